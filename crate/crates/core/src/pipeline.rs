//! End-to-end orchestration over on-disk videos.
//!
//! A video directory holds `frames/`, `first_mask.png` and optionally `gt/`.
//! Every stage reads its inputs from and writes its outputs to files, so a run
//! can be stopped after any prefix of the stage chain and resumed with the
//! single-stage commands.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{FusionMode, PipelineConfig};
use crate::error::{Result, VosError};
use crate::frame::{Frame, LabelMask, ProbabilityVolume};
use crate::fusion::{fuse_average, fuse_keypoint_voting, fuse_max, normalize_prediction, NccMatcher, PredictionSet};
use crate::io::{read_frames, read_mask, read_volume, write_mask, write_volume};
use crate::metrics::{evaluate_sequence, EvalConfig, ScoreReport};
use crate::postprocess::{
    refine_boundaries, zoom_refine_sequence, BoundaryConfig, OtsuRefiner, ReferenceSegmenters, ZoomConfig, ZoomRefinement,
};
use crate::propagation::{propagate, PropagationConfig};

/// Frames, first-frame annotation and optional ground truth of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoInput {
    pub frames: Vec<Frame>,
    pub first_mask: LabelMask,
    pub gt: Option<Vec<LabelMask>>,
}

pub fn load_video(dir: &Path) -> Result<VideoInput> {
    let frames = read_frames(&dir.join("frames"))?;
    let mask_path = dir.join("first_mask.png");
    if !mask_path.is_file() {
        return Err(VosError::Input(format!("missing first-frame mask {}", mask_path.display())));
    }
    let first_mask = read_mask(&mask_path)?;
    let gt_dir = dir.join("gt");
    let gt = if gt_dir.is_dir() {
        let masks = read_masks(&gt_dir)?;
        if masks.len() != frames.len() {
            return Err(VosError::Input(format!(
                "{} ground-truth masks for {} frames",
                masks.len(),
                frames.len()
            )));
        }
        Some(masks)
    } else {
        None
    };
    Ok(VideoInput { frames, first_mask, gt })
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| VosError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case(ext)))
        .collect();
    files.sort();
    Ok(files)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| VosError::io(dir, e))
}

pub fn write_masks(dir: &Path, masks: &[LabelMask]) -> Result<()> {
    create_dir(dir)?;
    masks
        .par_iter()
        .enumerate()
        .try_for_each(|(t, m)| write_mask(&dir.join(format!("{t:05}.png")), m))
}

pub fn read_masks(dir: &Path) -> Result<Vec<LabelMask>> {
    let files = sorted_files(dir, "png")?;
    if files.is_empty() {
        return Err(VosError::Input(format!("no masks in {}", dir.display())));
    }
    files.par_iter().map(|p| read_mask(p)).collect()
}

pub fn write_volumes(dir: &Path, volumes: &[ProbabilityVolume]) -> Result<()> {
    create_dir(dir)?;
    volumes
        .par_iter()
        .enumerate()
        .try_for_each(|(t, v)| write_volume(&dir.join(format!("{t:05}.vosp")), v))
}

pub fn read_volumes(dir: &Path) -> Result<Vec<ProbabilityVolume>> {
    let files = sorted_files(dir, "vosp")?;
    if files.is_empty() {
        return Err(VosError::Input(format!("no volumes in {}", dir.display())));
    }
    files.par_iter().map(|p| read_volume(p)).collect()
}

/// Sidecar describing a stored prediction set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMeta {
    pub source_id: String,
    pub native_scale: f64,
    pub flipped: bool,
    pub reference_width: usize,
    pub reference_height: usize,
}

/// Writes `masks/`, `volumes/` and `prediction.json` under `dir`.
pub fn write_prediction(dir: &Path, set: &PredictionSet, reference: (usize, usize)) -> Result<()> {
    write_volumes(&dir.join("volumes"), &set.volumes)?;
    let masks: Vec<LabelMask> = set.volumes.iter().map(ProbabilityVolume::argmax).collect();
    write_masks(&dir.join("masks"), &masks)?;
    let meta = PredictionMeta {
        source_id: set.source_id.clone(),
        native_scale: set.native_scale,
        flipped: set.flipped,
        reference_width: reference.0,
        reference_height: reference.1,
    };
    let path = dir.join("prediction.json");
    let text = serde_json::to_string_pretty(&meta).expect("metadata serialises");
    fs::write(&path, text).map_err(|e| VosError::io(&path, e))
}

/// Reads a prediction set; without `prediction.json` it is taken as unscaled and unflipped.
pub fn read_prediction(dir: &Path) -> Result<(PredictionSet, (usize, usize))> {
    let volumes = read_volumes(&dir.join("volumes"))?;
    let path = dir.join("prediction.json");
    let meta = if path.is_file() {
        let text = fs::read_to_string(&path).map_err(|e| VosError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| VosError::Format(format!("{}: {e}", path.display())))?
    } else {
        PredictionMeta {
            source_id: dir.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
            native_scale: 1.0,
            flipped: false,
            reference_width: volumes[0].width(),
            reference_height: volumes[0].height(),
        }
    };
    let set = PredictionSet::new(meta.source_id, volumes, meta.native_scale, meta.flipped)?;
    Ok((set, (meta.reference_width, meta.reference_height)))
}

/// Pixel size of a `width × height` input resized by `scale`.
pub fn scaled_size(width: usize, height: usize, scale: f64) -> (usize, usize) {
    let s = |v: usize| ((v as f64 * scale).round() as usize).max(1);
    (s(width), s(height))
}

pub fn source_id(scale: f64, flipped: bool) -> String {
    format!("s{scale:.2}{}", if flipped { "-flip" } else { "" })
}

/// Propagates one test-time augmentation of the video.
pub fn propagate_augmented(
    frames: &[Frame],
    first_mask: &LabelMask,
    config: &PropagationConfig,
    scale: f64,
    flipped: bool,
) -> Result<PredictionSet> {
    let first = frames.first().ok_or_else(|| VosError::Input("video has no frames".into()))?;
    let (w, h) = scaled_size(first.width(), first.height(), scale);
    let mut inputs = frames.iter().map(|f| f.resize(w, h)).collect::<Result<Vec<_>>>()?;
    let mut mask = first_mask.resize_nearest(w, h)?;
    if flipped {
        inputs = inputs.iter().map(Frame::flip_horizontal).collect();
        mask = mask.flip_horizontal();
    }
    let out = propagate(&inputs, &mask, config)?;
    PredictionSet::new(source_id(scale, flipped), out.into_iter().map(|p| p.volume).collect(), scale, flipped)
}

/// Fuses normalised sets according to `mode`.
pub fn fuse(mode: FusionMode, sets: &[PredictionSet], frames: &[Frame]) -> Result<Vec<ProbabilityVolume>> {
    match mode {
        FusionMode::Average => fuse_average(sets),
        FusionMode::Max => fuse_max(sets),
        FusionMode::KeypointVote if sets.len() < 2 => fuse_average(sets),
        FusionMode::KeypointVote => Ok(fuse_keypoint_voting(sets, frames, &NccMatcher::default())?.volumes),
    }
}

/// Boundary refinement of every frame after the annotated first one.
pub fn refine_sequence(
    frames: &[Frame],
    volumes: &[ProbabilityVolume],
    masks: &[LabelMask],
    params: &BoundaryConfig,
) -> Result<Vec<LabelMask>> {
    if frames.len() != volumes.len() || frames.len() != masks.len() {
        return Err(VosError::shape(format!(
            "{} frames, {} volumes and {} masks",
            frames.len(),
            volumes.len(),
            masks.len()
        )));
    }
    frames
        .par_iter()
        .zip(volumes)
        .zip(masks)
        .enumerate()
        .map(|(t, ((frame, volume), mask))| {
            if t == 0 {
                return Ok(mask.clone());
            }
            refine_boundaries(frame, volume, mask, params, &OtsuRefiner)
        })
        .collect()
}

/// Crop-then-zoom over a clip, re-segmenting against crops of the first frame.
pub fn zoom_sequence(
    frames: &[Frame],
    masks: &[LabelMask],
    first_mask: &LabelMask,
    params: &ZoomConfig,
    propagation: &PropagationConfig,
) -> Result<ZoomRefinement> {
    let first = frames.first().ok_or_else(|| VosError::Input("video has no frames".into()))?;
    let segmenters = ReferenceSegmenters {
        frame: first.clone(),
        mask: first_mask.clone(),
        margin: params.margin,
        config: PropagationConfig { stride: 1, ..propagation.clone() },
    };
    zoom_refine_sequence(frames, masks, params, &segmenters)
}

pub fn write_report(dir: &Path, report: &ScoreReport) -> Result<()> {
    for (name, text) in [("report.txt", report.to_table()), ("report.records", report.to_records())] {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| VosError::io(&path, e))?;
    }
    Ok(())
}

/// Runs every stage on one video directory and writes the results under `out`.
///
/// Layout: `propagate/<source>/`, `fused/`, `boundary/`, `zoom/`, `final/masks/`
/// and, with ground truth, `report.txt` and `report.records`. Disabled
/// post-processing stages are not written. Boundary refinement leaves the
/// annotated first frame alone.
pub fn run_video(config: &PipelineConfig, input: &Path, out: &Path) -> Result<Option<ScoreReport>> {
    config.validate()?;
    let video = load_video(input)?;
    let reference = (video.frames[0].width(), video.frames[0].height());
    if (video.first_mask.width(), video.first_mask.height()) != reference {
        return Err(VosError::Input("first-frame mask does not match the frame size".into()));
    }
    create_dir(out)?;
    let config_path = out.join("config.json");
    fs::write(&config_path, config.to_json()).map_err(|e| VosError::io(&config_path, e))?;

    let prop = config.propagation();
    let augmentations: Vec<(f64, bool)> = config
        .scales
        .iter()
        .flat_map(|&s| std::iter::once((s, false)).chain(config.flip.then_some((s, true))))
        .collect();
    let sets = augmentations
        .par_iter()
        .map(|&(scale, flipped)| {
            let set = propagate_augmented(&video.frames, &video.first_mask, &prop, scale, flipped)?;
            write_prediction(&out.join("propagate").join(&set.source_id), &set, reference)?;
            normalize_prediction(&set, reference.0, reference.1)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("propagate"))?;

    let fused = fuse(config.fusion, &sets, &video.frames).map_err(|e| e.in_stage("fuse"))?;
    let mut masks: Vec<LabelMask> = fused.iter().map(ProbabilityVolume::argmax).collect();
    (|| {
        write_volumes(&out.join("fused").join("volumes"), &fused)?;
        write_masks(&out.join("fused").join("masks"), &masks)
    })()
    .map_err(|e| e.in_stage("fuse"))?;

    if config.boundary.enabled {
        masks = refine_sequence(&video.frames, &fused, &masks, &config.boundary.params)
            .and_then(|m| write_masks(&out.join("boundary").join("masks"), &m).map(|_| m))
            .map_err(|e| e.in_stage("refine-boundary"))?;
    }

    if config.zoom.enabled {
        masks = zoom_sequence(&video.frames, &masks, &video.first_mask, &config.zoom.params, &prop)
            .and_then(|z| {
                write_masks(&out.join("zoom").join("masks"), &z.masks)?;
                let path = out.join("zoom").join("boxes.json");
                let text = serde_json::to_string_pretty(&z.boxes).expect("boxes serialise");
                fs::write(&path, text).map_err(|e| VosError::io(&path, e))?;
                Ok(z.masks)
            })
            .map_err(|e| e.in_stage("zoom-refine"))?;
    }

    write_masks(&out.join("final").join("masks"), &masks).map_err(|e| e.in_stage("write"))?;

    let Some(gt) = &video.gt else { return Ok(None) };
    let eval = EvalConfig { tolerance: config.tolerance, annotated_frames: None };
    let report = evaluate_sequence(&masks, gt, &config.seen_ids, &config.unseen_ids, &eval)
        .and_then(|r| write_report(out, &r).map(|_| r))
        .map_err(|e| e.in_stage("evaluate"))?;
    Ok(Some(report))
}

/// Video directories under `input`: `input` itself when it holds `frames/`,
/// otherwise every immediate subdirectory that does.
pub fn discover_videos(input: &Path) -> Result<Vec<PathBuf>> {
    if input.join("frames").is_dir() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| VosError::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("frames").is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(VosError::Input(format!("no videos found under {}", input.display())));
    }
    Ok(dirs)
}

/// Runs [`run_video`] on every video under `input`, `jobs` at a time.
///
/// A single video writes straight into `out`; several videos each get
/// `out/<name>/`.
pub fn run_pipeline(
    config: &PipelineConfig,
    input: &Path,
    out: &Path,
    jobs: usize,
) -> Result<Vec<(String, Option<ScoreReport>)>> {
    config.validate()?;
    let videos = discover_videos(input)?;
    let single = videos.len() == 1 && videos[0] == input;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| VosError::config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| {
        videos
            .par_iter()
            .map(|dir| {
                let name = dir.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
                let dest = if single { out.to_path_buf() } else { out.join(&name) };
                run_video(config, dir, &dest).map(|r| (name, r))
            })
            .collect()
    })
}

