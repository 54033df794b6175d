//! Merging predictions across test-time augmentations and models.
//!
//! Every fuser works on [`PredictionSet`]s that have already been brought to a
//! common resolution with [`normalize_prediction`].

use rayon::prelude::*;

use crate::error::{Result, VosError};
use crate::frame::{Frame, LabelMask, ProbabilityVolume};
use crate::propagation::FeatureGrid;

/// Per-frame probability volumes produced by one model or augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub source_id: String,
    pub volumes: Vec<ProbabilityVolume>,
    /// Resize factor relative to the reference resolution.
    pub native_scale: f64,
    pub flipped: bool,
}

impl PredictionSet {
    pub fn new(source_id: impl Into<String>, volumes: Vec<ProbabilityVolume>, native_scale: f64, flipped: bool) -> Result<Self> {
        if let Some(first) = volumes.first() {
            if volumes.iter().any(|v| v.planes() != first.planes()) {
                return Err(VosError::shape("prediction set mixes object counts"));
            }
        }
        if !(native_scale > 0.0 && native_scale.is_finite()) {
            return Err(VosError::config(format!("native scale {native_scale} must be positive")));
        }
        Ok(Self { source_id: source_id.into(), volumes, native_scale, flipped })
    }

    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    pub fn planes(&self) -> Option<usize> {
        self.volumes.first().map(ProbabilityVolume::planes)
    }
}

/// Resamples `set` to `width × height`, undoes its flip and renormalises.
pub fn normalize_prediction(set: &PredictionSet, width: usize, height: usize) -> Result<PredictionSet> {
    if width == 0 || height == 0 {
        return Err(VosError::shape(format!("reference size {width}x{height} has zero area")));
    }
    let volumes = set
        .volumes
        .par_iter()
        .map(|v| {
            let v = if set.flipped { v.flip_horizontal() } else { v.clone() };
            v.resize(width, height)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PredictionSet { source_id: set.source_id.clone(), volumes, native_scale: 1.0, flipped: false })
}

fn check_congruent(sets: &[PredictionSet]) -> Result<()> {
    let Some(first) = sets.first() else {
        return Err(VosError::config("fusion needs at least one prediction set"));
    };
    for set in &sets[1..] {
        if set.len() != first.len() {
            return Err(VosError::shape(format!(
                "source '{}' has {} frames, '{}' has {}",
                set.source_id,
                set.len(),
                first.source_id,
                first.len()
            )));
        }
        for (t, (a, b)) in set.volumes.iter().zip(&first.volumes).enumerate() {
            if !a.same_shape(b) {
                return Err(VosError::shape(format!(
                    "source '{}' frame {t} does not match '{}'",
                    set.source_id, first.source_id
                )));
            }
        }
    }
    Ok(())
}

/// Order-independent mean of one element across sources.
fn element_mean(values: &mut [f64]) -> f64 {
    let first = values[0];
    if values.iter().all(|&v| v == first) {
        return first;
    }
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

fn average_frame(volumes: &[&ProbabilityVolume]) -> Result<ProbabilityVolume> {
    let v0 = volumes[0];
    let mut scratch = vec![0.0; volumes.len()];
    let data = (0..v0.data().len())
        .map(|i| {
            for (s, v) in scratch.iter_mut().zip(volumes) {
                *s = v.data()[i];
            }
            element_mean(&mut scratch)
        })
        .collect();
    ProbabilityVolume::from_scores(v0.width(), v0.height(), v0.planes(), data)
}

/// Per-element arithmetic mean across sources, frame by frame.
pub fn fuse_average(sets: &[PredictionSet]) -> Result<Vec<ProbabilityVolume>> {
    check_congruent(sets)?;
    (0..sets[0].len())
        .into_par_iter()
        .map(|t| average_frame(&sets.iter().map(|s| &s.volumes[t]).collect::<Vec<_>>()))
        .collect()
}

/// Per-element maximum across sources, renormalised per pixel.
pub fn fuse_max(sets: &[PredictionSet]) -> Result<Vec<ProbabilityVolume>> {
    check_congruent(sets)?;
    (0..sets[0].len())
        .into_par_iter()
        .map(|t| {
            let v0 = &sets[0].volumes[t];
            let mut data = v0.data().to_vec();
            for set in &sets[1..] {
                for (d, &x) in data.iter_mut().zip(set.volumes[t].data()) {
                    *d = d.max(x);
                }
            }
            ProbabilityVolume::from_scores(v0.width(), v0.height(), v0.planes(), data)
        })
        .collect()
}

/// Weighted mean of congruent volumes; `weights` must be non-negative and sum to 1.
///
/// Zero-weight sources are dropped and equal weights fall back to the plain mean,
/// so degenerate weightings reproduce [`fuse_average`] on the remaining sources.
fn weighted_frame(volumes: &[&ProbabilityVolume], weights: &[f64]) -> Result<ProbabilityVolume> {
    let kept: Vec<(&ProbabilityVolume, f64)> =
        volumes.iter().zip(weights).filter(|(_, &w)| w > 0.0).map(|(&v, &w)| (v, w)).collect();
    if kept.is_empty() {
        return average_frame(volumes);
    }
    if kept.iter().all(|(_, w)| *w == kept[0].1) {
        return average_frame(&kept.iter().map(|(v, _)| *v).collect::<Vec<_>>());
    }
    let v0 = kept[0].0;
    let mut data = vec![0.0; v0.data().len()];
    for (v, w) in &kept {
        for (d, &x) in data.iter_mut().zip(v.data()) {
            *d += w * x;
        }
    }
    ProbabilityVolume::from_scores(v0.width(), v0.height(), v0.planes(), data)
}

/// A correspondence between pixel `point_a` of one frame and `point_b` of another.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointMatch {
    pub point_a: (usize, usize),
    pub point_b: (usize, usize),
    /// Normalised cross-correlation of the two patches, in [-1, 1].
    pub score: f64,
}

/// Finds keypoint correspondences between two feature grids.
pub trait KeypointMatcher: Sync {
    fn match_keypoints(&self, a: &FeatureGrid, b: &FeatureGrid) -> Result<Vec<KeypointMatch>>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig {
    /// Descriptor patch is `2r + 1` pixels square.
    pub patch_radius: usize,
    /// Non-maximum suppression radius for corner detection.
    pub nms_radius: usize,
    /// Minimum corner response.
    pub min_response: f64,
    pub max_keypoints: usize,
    /// Lowe ratio threshold on descriptor distances.
    pub ratio: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { patch_radius: 2, nms_radius: 2, min_response: 1e-4, max_keypoints: 256, ratio: 0.8 }
    }
}

/// Corner detector plus normalised cross-correlation matcher.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NccMatcher {
    pub config: MatchConfig,
}

impl NccMatcher {
    pub fn new(config: MatchConfig) -> Self {
        Self { config }
    }
}

impl KeypointMatcher for NccMatcher {
    fn match_keypoints(&self, a: &FeatureGrid, b: &FeatureGrid) -> Result<Vec<KeypointMatch>> {
        match_keypoints(a, b, &self.config)
    }
}

/// Feature grid holding only the colour channels of `frame`.
pub fn appearance_features(frame: &Frame) -> Result<FeatureGrid> {
    FeatureGrid::new(frame.width(), frame.height(), 3, frame.data().to_vec())
}

fn margin(config: &MatchConfig) -> usize {
    config.patch_radius.max(2)
}

/// Minimum eigenvalue of the 3×3-windowed structure tensor, summed over channels.
pub fn corner_response(grid: &FeatureGrid) -> Vec<f64> {
    let (w, h, c) = (grid.width(), grid.height(), grid.channels());
    let mut gxx = vec![0.0; w * h];
    let mut gyy = vec![0.0; w * h];
    let mut gxy = vec![0.0; w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let i = y * w + x;
            for ch in 0..c {
                let gx = (grid.feature(x + 1, y)[ch] - grid.feature(x - 1, y)[ch]) / 2.0;
                let gy = (grid.feature(x, y + 1)[ch] - grid.feature(x, y - 1)[ch]) / 2.0;
                gxx[i] += gx * gx;
                gyy[i] += gy * gy;
                gxy[i] += gx * gy;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 2..h.saturating_sub(2) {
        for x in 2..w.saturating_sub(2) {
            let (mut a, mut b, mut d) = (0.0, 0.0, 0.0);
            for ny in y - 1..=y + 1 {
                for nx in x - 1..=x + 1 {
                    let j = ny * w + nx;
                    a += gxx[j];
                    d += gyy[j];
                    b += gxy[j];
                }
            }
            let half_trace = (a + d) / 2.0;
            out[y * w + x] = half_trace - (((a - d) / 2.0).powi(2) + b * b).sqrt();
        }
    }
    out
}

/// Local maxima of the corner response, strongest first.
pub fn detect_keypoints(grid: &FeatureGrid, config: &MatchConfig) -> Result<Vec<(usize, usize)>> {
    let (w, h) = (grid.width(), grid.height());
    let m = margin(config);
    if w < 2 * m + 1 || h < 2 * m + 1 {
        return Err(VosError::shape(format!(
            "{w}x{h} grid is too small for a {}-pixel patch",
            2 * config.patch_radius + 1
        )));
    }
    let response = corner_response(grid);
    let r = config.nms_radius;
    let mut points = Vec::new();
    for y in m..h - m {
        for x in m..w - m {
            let v = response[y * w + x];
            if !(v > config.min_response) {
                continue;
            }
            let mut is_max = true;
            'window: for ny in y.saturating_sub(r)..=(y + r).min(h - 1) {
                for nx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                    let o = response[ny * w + nx];
                    let earlier = (ny, nx) < (y, x);
                    if o > v || (earlier && o == v) {
                        is_max = false;
                        break 'window;
                    }
                }
            }
            if is_max {
                points.push((x, y, v));
            }
        }
    }
    points.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.1, a.0).cmp(&(b.1, b.0))));
    points.truncate(config.max_keypoints);
    Ok(points.into_iter().map(|(x, y, _)| (x, y)).collect())
}

/// Zero-mean, unit-norm patch descriptor; `None` for flat patches.
fn describe(grid: &FeatureGrid, x: usize, y: usize, radius: usize) -> Option<Vec<f64>> {
    let mut d = Vec::with_capacity((2 * radius + 1).pow(2) * grid.channels());
    for ny in y - radius..=y + radius {
        for nx in x - radius..=x + radius {
            d.extend_from_slice(grid.feature(nx, ny));
        }
    }
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    d.iter_mut().for_each(|v| *v -= mean);
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-9 {
        return None;
    }
    d.iter_mut().for_each(|v| *v /= norm);
    Some(d)
}

fn describe_all(grid: &FeatureGrid, config: &MatchConfig) -> Result<Vec<((usize, usize), Vec<f64>)>> {
    Ok(detect_keypoints(grid, config)?
        .into_iter()
        .filter_map(|(x, y)| describe(grid, x, y, config.patch_radius).map(|d| ((x, y), d)))
        .collect())
}

/// Mutual-best NCC matches passing the ratio test, best score first.
pub fn match_keypoints(a: &FeatureGrid, b: &FeatureGrid, config: &MatchConfig) -> Result<Vec<KeypointMatch>> {
    if a.channels() != b.channels() {
        return Err(VosError::shape(format!(
            "feature grids have {} and {} channels",
            a.channels(),
            b.channels()
        )));
    }
    if !(config.ratio > 0.0 && config.ratio <= 1.0) {
        return Err(VosError::config(format!("ratio threshold {} outside (0, 1]", config.ratio)));
    }
    let da = describe_all(a, config)?;
    let db = describe_all(b, config)?;
    if da.is_empty() || db.is_empty() {
        return Ok(Vec::new());
    }
    let scores: Vec<Vec<f64>> = da
        .iter()
        .map(|(_, x)| db.iter().map(|(_, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>().clamp(-1.0, 1.0)).collect())
        .collect();
    let best_in_a = |j: usize| {
        (0..da.len()).fold(0, |best, i| if scores[i][j] > scores[best][j] { i } else { best })
    };
    let distance = |s: f64| (2.0 - 2.0 * s).max(0.0).sqrt();
    let mut matches = Vec::new();
    for (i, row) in scores.iter().enumerate() {
        let mut best = 0;
        for j in 1..row.len() {
            if row[j] > row[best] {
                best = j;
            }
        }
        let second = (0..row.len()).filter(|&j| j != best).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        if second.is_finite() && distance(row[best]) >= config.ratio * distance(second) {
            continue;
        }
        if best_in_a(best) != i {
            continue;
        }
        matches.push(KeypointMatch { point_a: da[i].0, point_b: db[best].0, score: row[best] });
    }
    matches.sort_by(|p, q| {
        q.score.total_cmp(&p.score).then((p.point_a.1, p.point_a.0).cmp(&(q.point_a.1, q.point_a.0)))
    });
    Ok(matches)
}

/// Fused volumes together with the per-frame source weights that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct VotingFusion {
    pub volumes: Vec<ProbabilityVolume>,
    /// `weights[t][s]` is the weight of source `s` at frame `t`.
    pub weights: Vec<Vec<f64>>,
}

/// Source weights at one frame from keypoints transported out of `prev_mask`.
///
/// A source's quality is the fraction of an object's transported points that
/// land inside that source's region for the object, averaged over objects
/// that received points.
pub fn voting_weights(
    matches: &[KeypointMatch],
    prev_mask: &LabelMask,
    current: &[&ProbabilityVolume],
) -> Vec<f64> {
    let n = current.len();
    let argmaxes: Vec<LabelMask> = current.iter().map(|v| v.argmax()).collect();
    let mut quality = vec![0.0; n];
    let mut objects = 0usize;
    for id in prev_mask.object_ids() {
        let landed: Vec<(usize, usize)> = matches
            .iter()
            .filter(|m| prev_mask.get(m.point_a.0, m.point_a.1) == id)
            .map(|m| m.point_b)
            .collect();
        if landed.is_empty() {
            continue;
        }
        objects += 1;
        for (q, mask) in quality.iter_mut().zip(&argmaxes) {
            let inside = landed.iter().filter(|&&(x, y)| mask.get(x, y) == id).count();
            *q += inside as f64 / landed.len() as f64;
        }
    }
    let total: f64 = quality.iter().sum();
    if objects == 0 || total <= 0.0 {
        return vec![1.0 / n as f64; n];
    }
    quality.iter().map(|q| q / total).collect()
}

/// Weights every source per frame by keypoint voting and averages accordingly.
///
/// Frame 0 has no predecessor and uses uniform weights; each later frame
/// transports keypoints from the previous fused mask.
pub fn fuse_keypoint_voting(
    sets: &[PredictionSet],
    frames: &[Frame],
    matcher: &dyn KeypointMatcher,
) -> Result<VotingFusion> {
    if sets.len() < 2 {
        return Err(VosError::config("keypoint voting needs at least two prediction sets"));
    }
    check_congruent(sets)?;
    if frames.len() != sets[0].len() {
        return Err(VosError::shape(format!(
            "{} frames for {} predicted frames",
            frames.len(),
            sets[0].len()
        )));
    }
    for (t, (frame, vol)) in frames.iter().zip(&sets[0].volumes).enumerate() {
        if frame.width() != vol.width() || frame.height() != vol.height() {
            return Err(VosError::shape(format!("frame {t} does not match the prediction resolution")));
        }
    }
    let grids = frames.par_iter().map(appearance_features).collect::<Result<Vec<_>>>()?;
    let links = grids
        .par_windows(2)
        .map(|pair| matcher.match_keypoints(&pair[0], &pair[1]))
        .collect::<Result<Vec<_>>>()?;

    let mut out = VotingFusion { volumes: Vec::with_capacity(frames.len()), weights: Vec::with_capacity(frames.len()) };
    for t in 0..frames.len() {
        let current: Vec<&ProbabilityVolume> = sets.iter().map(|s| &s.volumes[t]).collect();
        let weights = match out.volumes.last() {
            None => vec![1.0 / sets.len() as f64; sets.len()],
            Some(prev) => voting_weights(&links[t - 1], &prev.argmax(), &current),
        };
        out.volumes.push(weighted_frame(&current, &weights)?);
        out.weights.push(weights);
    }
    Ok(out)
}
