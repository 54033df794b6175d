//! Non-learned reference segmenter.
//!
//! Frames are encoded into 8-channel appearance/position features, the first
//! frame's mask seeds a [`MemoryBank`], and every later frame reads that memory
//! with its own features as queries. Memory values carry one-hot object
//! indicators; the identity block of the values carries the per-object
//! identification vectors, so one read yields scores for every object at once.
//!
//! Query and key tokens are lifted so that the plain dot product equals the
//! negative squared feature distance up to a per-query constant:
//! `q = [f, 1]`, `k = [2f', -|f'|²]` gives `q·k = |f|² - |f - f'|²`, and the
//! softmax is invariant to the `|f|²` term.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionVariant, EmbeddingMatrix, IdentityEmbedding, LayerProjections};
use crate::error::{Result, VosError};
use crate::frame::{Frame, LabelMask, ProbabilityVolume};
use crate::memory::{MemoryBank, MemoryEntry, ReadConfig, SamplingPolicy, TopKConfig};

/// Channels produced by [`encode_frame`].
pub const FEATURE_CHANNELS: usize = 8;

/// Dense per-pixel feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || width == 0 || height == 0 {
            return Err(VosError::shape("feature grid must be non-empty"));
        }
        if data.len() != width * height * channels {
            return Err(VosError::shape("feature grid data length mismatch"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(VosError::Numeric("non-finite feature".into()));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn feature(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// One token row per pixel, raster order.
    pub fn tokens(&self) -> EmbeddingMatrix {
        EmbeddingMatrix::new(self.width * self.height, self.channels, self.data.clone())
            .expect("feature grid invariants guarantee a valid matrix")
    }
}

/// `[r, g, b, x/W, y/H, mean3x3(r), mean3x3(g), mean3x3(b)]` per pixel.
///
/// The 3×3 mean only averages neighbours that exist, so border pixels use
/// smaller windows.
pub fn encode_frame(frame: &Frame) -> Result<FeatureGrid> {
    let (w, h) = (frame.width(), frame.height());
    let mut data = Vec::with_capacity(w * h * FEATURE_CHANNELS);
    for y in 0..h {
        for x in 0..w {
            let rgb = frame.pixel(x, y);
            let mut mean = [0.0; 3];
            let mut n = 0.0;
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let p = frame.pixel(nx, ny);
                    mean.iter_mut().zip(p).for_each(|(m, v)| *m += v);
                    n += 1.0;
                }
            }
            data.extend_from_slice(&rgb);
            data.push(x as f64 / w as f64);
            data.push(y as f64 / h as f64);
            data.extend(mean.map(|m| m / n));
        }
    }
    FeatureGrid::new(w, h, FEATURE_CHANNELS, data)
}

/// Fixed orthonormal identification vectors, one per label value (row 0 is background).
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityBank {
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

impl IdentityBank {
    /// Gram–Schmidt over Gaussian draws; `dim` vectors of length `dim`.
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(VosError::Capacity("identity dimension must be positive".into()));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(dim);
        while vectors.len() < dim {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            for _ in 0..2 {
                for u in &vectors {
                    let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(u).for_each(|(a, b)| *a -= proj * b);
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                vectors.push(v.into_iter().map(|a| a / norm).collect());
            }
        }
        Ok(Self { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, label: u8) -> Result<&[f64]> {
        self.vectors.get(label as usize).map(Vec::as_slice).ok_or_else(|| {
            VosError::Capacity(format!("label {label} exceeds identity bank of {} vectors", self.dim))
        })
    }

    /// Per-pixel identity rows for `mask`.
    pub fn embed(&self, mask: &LabelMask) -> Result<IdentityEmbedding> {
        if mask.max_label() as usize >= self.dim {
            return Err(VosError::Capacity(format!(
                "label {} needs an identity bank of at least {} vectors, have {}",
                mask.max_label(),
                mask.max_label() as usize + 1,
                self.dim
            )));
        }
        let mut data = Vec::with_capacity(mask.labels().len() * self.dim);
        for &l in mask.labels() {
            data.extend_from_slice(&self.vectors[l as usize]);
        }
        Ok(IdentityEmbedding::new(EmbeddingMatrix::new(mask.labels().len(), self.dim, data)?))
    }
}

/// Identity embedding of `mask` using a bank of `id_dim` vectors drawn from `seed`.
pub fn build_identity(mask: &LabelMask, id_dim: usize, seed: u64) -> Result<IdentityEmbedding> {
    IdentityBank::new(id_dim, seed)?.embed(mask)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropagationConfig {
    pub variant: AttentionVariant,
    pub memory_capacity: usize,
    pub policy: SamplingPolicy,
    pub topk: TopKConfig,
    /// Softmax temperature applied on top of `1/√C`.
    pub temperature: f64,
    /// Integer downsampling before tokenisation.
    pub stride: usize,
    /// Identity vectors available; `None` sizes the bank to the largest label.
    pub id_dim: Option<usize>,
    pub seed: u64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            variant: AttentionVariant::Identity,
            memory_capacity: 5,
            policy: SamplingPolicy::KeepAll,
            topk: TopKConfig::disabled(),
            temperature: 0.01,
            stride: 1,
            id_dim: None,
            seed: 0,
        }
    }
}

/// Output of one propagated frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagatedFrame {
    pub mask: LabelMask,
    pub volume: ProbabilityVolume,
}

/// Memory-side block layout: `[indicators (planes) | features | identity]`.
struct ValueLayout {
    planes: usize,
    features: usize,
    id_dim: usize,
}

impl ValueLayout {
    fn width(&self) -> usize {
        self.planes + self.features + self.id_dim
    }

    fn id_offset(&self) -> usize {
        self.planes + self.features
    }
}

fn query_tokens(features: &FeatureGrid) -> Result<EmbeddingMatrix> {
    let c = features.channels();
    let mut data = Vec::with_capacity(features.width() * features.height() * (c + 1));
    for f in features.data().chunks(c) {
        data.extend_from_slice(f);
        data.push(1.0);
    }
    EmbeddingMatrix::new(features.width() * features.height(), c + 1, data)
}

fn key_tokens(features: &FeatureGrid) -> Result<EmbeddingMatrix> {
    let c = features.channels();
    let mut data = Vec::with_capacity(features.width() * features.height() * (c + 1));
    for f in features.data().chunks(c) {
        data.extend(f.iter().map(|v| 2.0 * v));
        data.push(-f.iter().map(|v| v * v).sum::<f64>());
    }
    EmbeddingMatrix::new(features.width() * features.height(), c + 1, data)
}

fn memory_entry(
    frame_index: usize,
    features: &FeatureGrid,
    mask: &LabelMask,
    layout: &ValueLayout,
    ids: &IdentityBank,
) -> Result<MemoryEntry> {
    let n = mask.labels().len();
    let identity_rows = ids.embed(mask)?;
    let mut values = vec![0.0; n * layout.width()];
    let mut identity = vec![0.0; n * layout.width()];
    for (i, &l) in mask.labels().iter().enumerate() {
        let row = &mut values[i * layout.width()..(i + 1) * layout.width()];
        row[l as usize] = 1.0;
        row[layout.planes..layout.id_offset()].copy_from_slice(&features.data()[i * layout.features..(i + 1) * layout.features]);
        identity[i * layout.width() + layout.id_offset()..(i + 1) * layout.width()]
            .copy_from_slice(identity_rows.as_matrix().row(i));
    }
    MemoryEntry::new(
        frame_index,
        key_tokens(features)?,
        EmbeddingMatrix::new(n, layout.width(), values)?,
        IdentityEmbedding::new(EmbeddingMatrix::new(n, layout.width(), identity)?),
    )
}

/// Turns a memory readout into per-label scores.
fn decode(
    readout: &EmbeddingMatrix,
    variant: AttentionVariant,
    layout: &ValueLayout,
    labels: &[u8],
    ids: &IdentityBank,
    width: usize,
    height: usize,
) -> Result<ProbabilityVolume> {
    let n = readout.rows();
    let mut scores = vec![0.0; n * layout.planes];
    for i in 0..n {
        let row = readout.row(i);
        for &l in labels {
            let s = match variant {
                AttentionVariant::Plain => row[l as usize],
                AttentionVariant::Identity | AttentionVariant::Gated => {
                    let e = ids.vector(l)?;
                    row[layout.id_offset()..].iter().zip(e).map(|(a, b)| a * b).sum()
                }
            };
            scores[l as usize * n + i] = s;
        }
    }
    ProbabilityVolume::from_scores(width, height, layout.planes, scores)
}

/// Propagates `first_mask` through `frames`.
///
/// Frame 0 is returned verbatim. Later frames are segmented by reading the
/// memory bank; each result is appended back to the bank according to the
/// sampling policy.
pub fn propagate(frames: &[Frame], first_mask: &LabelMask, config: &PropagationConfig) -> Result<Vec<PropagatedFrame>> {
    let first = frames.first().ok_or_else(|| VosError::Input("no frames to propagate".into()))?;
    let (w, h) = (first.width(), first.height());
    if first_mask.width() != w || first_mask.height() != h {
        return Err(VosError::shape(format!(
            "first mask is {}x{}, frames are {w}x{h}",
            first_mask.width(),
            first_mask.height()
        )));
    }
    if let Some((t, f)) = frames.iter().enumerate().find(|(_, f)| f.width() != w || f.height() != h) {
        return Err(VosError::shape(format!(
            "frame {t} is {}x{}, expected {w}x{h}",
            f.width(),
            f.height()
        )));
    }
    if config.stride == 0 {
        return Err(VosError::config("propagation stride must be at least 1"));
    }

    let planes = first_mask.max_label() as usize + 1;
    let id_dim = config.id_dim.unwrap_or(planes);
    let ids = IdentityBank::new(id_dim, config.seed)?;
    let layout = ValueLayout { planes, features: FEATURE_CHANNELS, id_dim };
    let mut labels = vec![0u8];
    labels.extend(first_mask.object_ids());

    let stride = config.stride;
    let (sw, sh) = (w.div_ceil(stride), h.div_ceil(stride));
    let working_mask = if stride == 1 {
        first_mask.clone()
    } else {
        first_mask.downsample_mode(stride, sw, sh)?
    };

    let mut outputs = Vec::with_capacity(frames.len());
    outputs.push(PropagatedFrame {
        mask: first_mask.clone(),
        volume: ProbabilityVolume::one_hot(first_mask, planes)?,
    });
    if frames.len() == 1 {
        return Ok(outputs);
    }

    let features0 = encode_frame(&first.downsample_mean(stride)?)?;
    let mut bank = MemoryBank::init(
        memory_entry(0, &features0, &working_mask, &layout, &ids)?,
        config.memory_capacity,
        config.policy,
    )?;
    let proj = LayerProjections::passthrough(layout.width(), 0);
    let read = ReadConfig { variant: config.variant, topk: config.topk, temperature: config.temperature };

    for (t, frame) in frames.iter().enumerate().skip(1) {
        let features = encode_frame(&frame.downsample_mean(stride)?)?;
        let readout = bank.read(&query_tokens(&features)?, &read, Some(&proj))?;
        let small = decode(&readout, config.variant, &layout, &labels, &ids, sw, sh)?;
        let small_mask = small.argmax();
        let volume = small.resize_nearest(w, h)?;
        let mask = volume.argmax();
        bank.append(memory_entry(t, &features, &small_mask, &layout, &ids)?)?;
        outputs.push(PropagatedFrame { mask, volume });
    }
    Ok(outputs)
}
