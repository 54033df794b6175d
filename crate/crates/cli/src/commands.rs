use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use log::info;
use vostk_core::attention::{AttentionVariant, EmbeddingMatrix, IdentityEmbedding, LayerProjections};
use vostk_core::config::{FusionMode, PipelineConfig};
use vostk_core::frame::ProbabilityVolume;
use vostk_core::fusion::{fuse_keypoint_voting, normalize_prediction, NccMatcher};
use vostk_core::io::{read_frames, read_mask};
use vostk_core::memory::{MemoryBank, MemoryEntry, ReadConfig, SamplingPolicy, TopKConfig};
use vostk_core::metrics::{evaluate_sequence, EvalConfig};
use vostk_core::pipeline::{
    fuse, propagate_augmented, read_masks, read_prediction, read_volumes, refine_sequence, run_pipeline,
    write_masks, write_prediction, zoom_sequence,
};
use vostk_core::synthetic::{gen_synthetic, write_clip, SyntheticSpec};
use vostk_core::{Result, VosError};

use crate::{Command, ConfigFlags};

#[derive(Debug, Args)]
pub struct PropagateArgs {
    /// Directory of frames (PNG or PPM), read in name order.
    #[arg(long)]
    frames: PathBuf,
    /// Palette PNG annotation of frame 0.
    #[arg(long)]
    first_mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Resize factor applied to the frames before propagation.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Propagate on horizontally flipped frames.
    #[arg(long)]
    flip: bool,
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Prediction directories written by `propagate`.
    #[arg(long = "input", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// average, max or keypoint-vote.
    #[arg(long)]
    mode: Option<String>,
    /// Frames at reference resolution; required for keypoint voting.
    #[arg(long)]
    frames: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    masks: PathBuf,
    #[arg(long)]
    volumes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    patch_stride: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ZoomArgs {
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    masks: PathBuf,
    #[arg(long)]
    first_mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Integer upscaling of each crop.
    #[arg(long)]
    zoom: Option<usize>,
    /// Context around the box as a fraction of its size.
    #[arg(long)]
    margin: Option<f64>,
    /// Objects smaller than this many pixels are zoomed.
    #[arg(long)]
    area_threshold: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_delimiter = ',')]
    seen: Vec<u8>,
    #[arg(long, value_delimiter = ',')]
    unseen: Vec<u8>,
    /// Boundary tolerance in pixels.
    #[arg(long)]
    tolerance: Option<usize>,
    /// Score only these frame indices.
    #[arg(long, value_delimiter = ',')]
    annotated: Option<Vec<usize>>,
    /// Write the key=value records here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttendArgs {
    /// eq1, eq2 or eq3.
    #[arg(long, default_value = "eq2")]
    variant: String,
    #[arg(long, default_value_t = 2)]
    queries: usize,
    #[arg(long, default_value_t = 4)]
    memory: usize,
    #[arg(long, default_value_t = 4)]
    channels: usize,
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    MovingSquare,
    ShrinkingSquare,
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON clip description; overrides the preset.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "moving-square")]
    preset: Preset,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 10)]
    frames: usize,
    /// Square side (start side for the shrinking preset).
    #[arg(long, default_value_t = 8)]
    size: usize,
    /// Final side for the shrinking preset.
    #[arg(long, default_value_t = 2)]
    end_size: usize,
    /// Per-frame displacement `dx,dy` for the moving preset.
    #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [1.0, 0.5])]
    velocity: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// A video directory or a directory of video directories.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Videos processed at once.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    flags: ConfigFlags,
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<f64>>,
    #[arg(long, overrides_with = "no_flip")]
    flip: bool,
    #[arg(long)]
    no_flip: bool,
    /// average, max or keypoint-vote.
    #[arg(long)]
    fusion: Option<String>,
    #[arg(long)]
    no_boundary: bool,
    #[arg(long)]
    no_zoom: bool,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    patch_stride: Option<usize>,
    #[arg(long)]
    zoom: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    area_threshold: Option<usize>,
    #[arg(long)]
    tolerance: Option<usize>,
}

fn io_error(path: &Path, source: std::io::Error) -> VosError {
    VosError::Io { path: Some(path.to_path_buf()), source }
}

fn parse_policy(s: &str) -> Result<SamplingPolicy> {
    let bad = || VosError::Config(format!("unknown memory policy `{s}`"));
    match s.split_once(':') {
        None if s == "keep-all" => Ok(SamplingPolicy::KeepAll),
        Some(("stride", n)) => Ok(SamplingPolicy::Stride { stride: n.parse().map_err(|_| bad())? }),
        Some(("first-plus-stride", n)) => Ok(SamplingPolicy::FirstPlusStride { video_len: n.parse().map_err(|_| bad())? }),
        _ => Err(bad()),
    }
}

fn apply_flags(config: &mut PipelineConfig, flags: &ConfigFlags) -> Result<()> {
    if let Some(v) = &flags.variant {
        config.attention_variant = v.parse()?;
    }
    if let Some(c) = flags.capacity {
        config.memory.capacity = c;
    }
    if let Some(p) = &flags.policy {
        config.memory.policy = parse_policy(p)?;
    }
    if let Some(k) = flags.topk {
        config.memory.topk = TopKConfig::keep(k);
    }
    if let Some(t) = flags.temperature {
        config.memory.temperature = t;
    }
    if let Some(s) = flags.stride {
        config.stride = s;
    }
    if flags.id_dim.is_some() {
        config.id_dim = flags.id_dim;
    }
    if let Some(s) = flags.seed {
        config.seed = s;
    }
    Ok(())
}

fn base_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

pub fn dispatch(config_path: Option<&Path>, command: Command) -> Result<()> {
    match command {
        Command::Propagate(a) => propagate_cmd(config_path, a),
        Command::Fuse(a) => fuse_cmd(config_path, a),
        Command::RefineBoundary(a) => refine_cmd(config_path, a),
        Command::ZoomRefine(a) => zoom_cmd(config_path, a),
        Command::Evaluate(a) => evaluate_cmd(config_path, a),
        Command::AttendDemo(a) => attend_cmd(a),
        Command::GenSynthetic(a) => synthetic_cmd(a),
        Command::Run(a) => run_cmd(config_path, a),
    }
}

fn propagate_cmd(config_path: Option<&Path>, a: PropagateArgs) -> Result<()> {
    let mut config = base_config(config_path)?;
    apply_flags(&mut config, &a.flags)?;
    config.validate()?;
    let frames = read_frames(&a.frames)?;
    let first = read_mask(&a.first_mask)?;
    let reference = (frames[0].width(), frames[0].height());
    let set = propagate_augmented(&frames, &first, &config.propagation(), a.scale, a.flip)?;
    write_prediction(&a.out, &set, reference)?;
    info!("propagated {} frames into {}", set.len(), a.out.display());
    Ok(())
}

fn fuse_cmd(config_path: Option<&Path>, a: FuseArgs) -> Result<()> {
    let config = base_config(config_path)?;
    let mode = match &a.mode {
        Some(m) => m.parse()?,
        None => config.fusion,
    };
    let frames = a.frames.as_deref().map(read_frames).transpose()?;
    let mut sets = Vec::with_capacity(a.inputs.len());
    let mut reference = None;
    for dir in &a.inputs {
        let (set, r) = read_prediction(dir)?;
        let r = frames.as_ref().map_or(r, |f| (f[0].width(), f[0].height()));
        let r = *reference.get_or_insert(r);
        sets.push(normalize_prediction(&set, r.0, r.1)?);
    }
    let (w, h) = reference.expect("at least one input");
    let mut fused_set = sets[0].clone();
    fused_set.source_id = "fused".into();
    if mode == FusionMode::KeypointVote && sets.len() >= 2 {
        let frames = frames.ok_or_else(|| VosError::Input("keypoint voting needs --frames".into()))?;
        let voted = fuse_keypoint_voting(&sets, &frames, &NccMatcher::default())?;
        fs::create_dir_all(&a.out).map_err(|e| io_error(&a.out, e))?;
        let path = a.out.join("weights.json");
        let text = serde_json::to_string_pretty(&voted.weights).expect("weights serialise");
        fs::write(&path, text).map_err(|e| io_error(&path, e))?;
        fused_set.volumes = voted.volumes;
    } else {
        fused_set.volumes = fuse(mode, &sets, frames.as_deref().unwrap_or(&[]))?;
    }
    write_prediction(&a.out, &fused_set, (w, h))
}

fn refine_cmd(config_path: Option<&Path>, a: RefineArgs) -> Result<()> {
    let mut params = base_config(config_path)?.boundary.params;
    if let Some(s) = a.patch_size {
        params.patch_size = s;
    }
    if let Some(s) = a.patch_stride {
        params.stride = s;
    }
    let frames = read_frames(&a.frames)?;
    let masks = read_masks(&a.masks)?;
    let volumes: Vec<ProbabilityVolume> = read_volumes(&a.volumes)?;
    let refined = refine_sequence(&frames, &volumes, &masks, &params)?;
    write_masks(&a.out.join("masks"), &refined)
}

fn zoom_cmd(config_path: Option<&Path>, a: ZoomArgs) -> Result<()> {
    let config = base_config(config_path)?;
    let mut params = config.zoom.params;
    if let Some(z) = a.zoom {
        params.zoom = z;
    }
    if let Some(m) = a.margin {
        params.margin = m;
    }
    if let Some(t) = a.area_threshold {
        params.area_threshold = t;
    }
    let frames = read_frames(&a.frames)?;
    let masks = read_masks(&a.masks)?;
    let first = read_mask(&a.first_mask)?;
    let z = zoom_sequence(&frames, &masks, &first, &params, &config.propagation())?;
    for w in &z.warnings {
        log::warn!("{w}");
    }
    write_masks(&a.out.join("masks"), &z.masks)
}

fn evaluate_cmd(config_path: Option<&Path>, a: EvaluateArgs) -> Result<()> {
    let config = base_config(config_path)?;
    let preds = read_masks(&a.pred)?;
    let gts = read_masks(&a.gt)?;
    let seen = if a.seen.is_empty() { config.seen_ids.clone() } else { a.seen };
    let unseen = if a.unseen.is_empty() { config.unseen_ids.clone() } else { a.unseen };
    let eval = EvalConfig { tolerance: a.tolerance.or(config.tolerance), annotated_frames: a.annotated };
    let report = evaluate_sequence(&preds, &gts, &seen, &unseen, &eval)?;
    print!("{}", report.to_table());
    match a.report {
        Some(path) => fs::write(&path, report.to_records()).map_err(|e| io_error(&path, e)),
        None => {
            println!();
            print!("{}", report.to_records());
            Ok(())
        }
    }
}

fn attend_cmd(a: AttendArgs) -> Result<()> {
    let variant: AttentionVariant = a.variant.parse()?;
    let q = EmbeddingMatrix::random(a.queries, a.channels, a.seed);
    let k = EmbeddingMatrix::random(a.memory, a.channels, a.seed.wrapping_add(1));
    let v = EmbeddingMatrix::random(a.memory, a.channels, a.seed.wrapping_add(2));
    let e = IdentityEmbedding::new(EmbeddingMatrix::random(a.memory, a.channels, a.seed.wrapping_add(3)));
    let proj = LayerProjections::seeded(a.channels, 0, a.seed, 0.1);
    let bank = MemoryBank::init(MemoryEntry::new(0, k, v, e)?, 1, SamplingPolicy::KeepAll)?;
    let topk = a.topk.map_or_else(TopKConfig::disabled, TopKConfig::keep);
    let read = ReadConfig { variant, topk, temperature: 1.0 };
    let out = bank.read(&q, &read, Some(&proj))?;
    for i in 0..out.rows() {
        let row: Vec<String> = out.row(i).iter().map(|v| format!("{v:.6}")).collect();
        println!("{}", row.join(" "));
    }
    Ok(())
}

fn synthetic_cmd(a: SyntheticArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            serde_json::from_str(&text).map_err(|e| VosError::Format(format!("{}: {e}", path.display())))?
        }
        None => match a.preset {
            Preset::MovingSquare => {
                SyntheticSpec::moving_square(a.width, a.height, a.frames, a.size, [a.velocity[0], a.velocity[1]], a.seed)
            }
            Preset::ShrinkingSquare => {
                SyntheticSpec::shrinking_square(a.width, a.height, a.frames, a.size, a.end_size, a.seed)
            }
        },
    };
    let clip = gen_synthetic(&spec)?;
    write_clip(&a.out, &clip)?;
    let path = a.out.join("spec.json");
    let text = serde_json::to_string_pretty(&spec).expect("spec serialises");
    fs::write(&path, text).map_err(|e| io_error(&path, e))
}

fn run_cmd(config_path: Option<&Path>, a: RunArgs) -> Result<()> {
    let mut config = base_config(config_path)?;
    apply_flags(&mut config, &a.flags)?;
    if let Some(s) = a.scales {
        config.scales = s;
    }
    if a.flip {
        config.flip = true;
    }
    if a.no_flip {
        config.flip = false;
    }
    if let Some(f) = &a.fusion {
        config.fusion = f.parse()?;
    }
    if a.no_boundary {
        config.boundary.enabled = false;
    }
    if a.no_zoom {
        config.zoom.enabled = false;
    }
    if let Some(s) = a.patch_size {
        config.boundary.params.patch_size = s;
    }
    if let Some(s) = a.patch_stride {
        config.boundary.params.stride = s;
    }
    if let Some(z) = a.zoom {
        config.zoom.params.zoom = z;
    }
    if let Some(m) = a.margin {
        config.zoom.params.margin = m;
    }
    if let Some(t) = a.area_threshold {
        config.zoom.params.area_threshold = t;
    }
    if a.tolerance.is_some() {
        config.tolerance = a.tolerance;
    }
    config.validate()?;
    let results = run_pipeline(&config, &a.input, &a.out, a.jobs)?;
    for (name, report) in results {
        match report {
            Some(r) => println!("{name}: overall {:.3}", r.overall),
            None => println!("{name}: done"),
        }
    }
    Ok(())
}
