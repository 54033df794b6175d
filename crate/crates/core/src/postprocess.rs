//! Boundary-patch refinement and tracking-based crop-then-zoom for small objects.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VosError};
use crate::frame::{Frame, LabelMask, ProbabilityVolume, Rect};
use crate::propagation::{propagate, PropagationConfig};

/// A square window straddling the boundary of one object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BoundaryPatch {
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub object_id: u8,
}

impl BoundaryPatch {
    pub fn rect(&self) -> Rect {
        Rect::new(self.x, self.y, self.size, self.size)
    }
}

/// Image and object-probability content of a patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchCrop {
    pub patch: BoundaryPatch,
    pub image: Frame,
    /// Probability of `patch.object_id`, row-major.
    pub prob: Vec<f64>,
}

/// Pixels of `id` with at least one in-frame 4-neighbour carrying another label.
fn object_boundary(mask: &LabelMask, id: u8) -> Vec<(usize, usize)> {
    let (w, h) = (mask.width(), mask.height());
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) != id {
                continue;
            }
            let differs = (x > 0 && mask.get(x - 1, y) != id)
                || (x + 1 < w && mask.get(x + 1, y) != id)
                || (y > 0 && mask.get(x, y - 1) != id)
                || (y + 1 < h && mask.get(x, y + 1) != id);
            if differs {
                out.push((x, y));
            }
        }
    }
    out
}

fn clamp_origin(c: usize, half: usize, size: usize, len: usize) -> usize {
    c.saturating_sub(half).min(len.saturating_sub(size))
}

/// Covers every object boundary with `patch_size` squares.
///
/// Boundary pixels are visited in raster order; each pixel not yet within
/// the `stride`-wide cell of an earlier centre becomes a new centre. Patches
/// are clamped to the frame and deduplicated.
pub fn extract_boundary_patches(mask: &LabelMask, patch_size: usize, stride: usize) -> Result<Vec<BoundaryPatch>> {
    if patch_size < 3 {
        return Err(VosError::config(format!("patch size {patch_size} is below 3")));
    }
    if stride == 0 {
        return Err(VosError::config("patch stride must be positive"));
    }
    if patch_size > mask.width() || patch_size > mask.height() {
        return Err(VosError::shape(format!(
            "patch size {patch_size} exceeds the {}x{} mask",
            mask.width(),
            mask.height()
        )));
    }
    let mut patches = BTreeSet::new();
    for id in mask.object_ids() {
        let mut centres: Vec<(usize, usize)> = Vec::new();
        let lo = stride / 2;
        let covered = |c: &(usize, usize), p: (usize, usize)| {
            p.0 + lo >= c.0 && p.0 + lo < c.0 + stride && p.1 + lo >= c.1 && p.1 + lo < c.1 + stride
        };
        for p in object_boundary(mask, id) {
            if !centres.iter().any(|c| covered(c, p)) {
                centres.push(p);
            }
        }
        for (cx, cy) in centres {
            patches.insert(BoundaryPatch {
                x: clamp_origin(cx, patch_size / 2, patch_size, mask.width()),
                y: clamp_origin(cy, patch_size / 2, patch_size, mask.height()),
                size: patch_size,
                object_id: id,
            });
        }
    }
    let mut out: Vec<BoundaryPatch> = patches.into_iter().collect();
    out.sort_by_key(|p| (p.object_id, p.y, p.x));
    Ok(out)
}

/// Gathers the frame and probability content under `patch`.
pub fn crop_patch(patch: BoundaryPatch, frame: &Frame, volume: &ProbabilityVolume) -> Result<PatchCrop> {
    if frame.width() != volume.width() || frame.height() != volume.height() {
        return Err(VosError::shape("frame and probability volume differ in size"));
    }
    if patch.object_id as usize >= volume.planes() {
        return Err(VosError::shape(format!("object {} has no probability plane", patch.object_id)));
    }
    let image = frame.crop(patch.rect())?;
    let prob = volume.crop_plane(patch.object_id as usize, patch.rect())?;
    Ok(PatchCrop { patch, image, prob })
}

/// Maps a patch crop to a binary object mask of the same size.
pub trait Refiner: Sync {
    fn refine(&self, crop: &PatchCrop) -> Result<Vec<bool>>;
}

/// Otsu threshold over the distinct values of `scores`; `None` when all are equal.
pub fn otsu_threshold(scores: &[f64]) -> Option<f64> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let total: f64 = sorted.iter().sum();
    let (mut best, mut best_var) = (None, f64::NEG_INFINITY);
    let mut below = 0.0;
    for i in 0..sorted.len().saturating_sub(1) {
        below += sorted[i];
        if sorted[i] == sorted[i + 1] {
            continue;
        }
        let n0 = (i + 1) as f64;
        let n1 = n - n0;
        let m0 = below / n0;
        let m1 = (total - below) / n1;
        let var = n0 * n1 * (m0 - m1).powi(2);
        if var > best_var {
            best_var = var;
            best = Some((sorted[i] + sorted[i + 1]) / 2.0);
        }
    }
    best
}

/// Snaps the object region to intensity structure inside the crop.
///
/// Binary probability crops are returned as they are. Otherwise each pixel's
/// probability is weighted by its intensity (inverted when the likely object is
/// darker than its surroundings) and the weighted scores are split at their
/// Otsu threshold. Crops without any score variation fall back to `p > 0.5`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct OtsuRefiner;

impl Refiner for OtsuRefiner {
    fn refine(&self, crop: &PatchCrop) -> Result<Vec<bool>> {
        let fallback: Vec<bool> = crop.prob.iter().map(|&p| p > 0.5).collect();
        if crop.prob.iter().all(|&p| p == 0.0 || p == 1.0) {
            return Ok(fallback);
        }
        let (w, h) = (crop.image.width(), crop.image.height());
        let intensity: Vec<f64> = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| crop.image.intensity(x, y)).collect();
        let mean_where = |pred: &dyn Fn(f64) -> bool| {
            let (s, n) = intensity
                .iter()
                .zip(&crop.prob)
                .filter(|(_, &p)| pred(p))
                .fold((0.0, 0usize), |(s, n), (&i, _)| (s + i, n + 1));
            (n > 0).then(|| s / n as f64)
        };
        let darker = matches!(
            (mean_where(&|p| p > 0.5), mean_where(&|p| p <= 0.5)),
            (Some(inside), Some(outside)) if inside < outside
        );
        let scores: Vec<f64> = intensity
            .iter()
            .zip(&crop.prob)
            .map(|(&i, &p)| p * if darker { 1.0 - i } else { i })
            .collect();
        Ok(match otsu_threshold(&scores) {
            Some(t) => scores.iter().zip(&crop.prob).map(|(&s, &p)| p > 0.0 && s > t).collect(),
            None => fallback,
        })
    }
}

/// Runs `refiner` and checks the size of its output.
pub fn refine_patch(crop: &PatchCrop, refiner: &dyn Refiner) -> Result<Vec<bool>> {
    let out = refiner.refine(crop)?;
    let expected = crop.patch.size * crop.patch.size;
    if out.len() != expected {
        return Err(VosError::Contract(format!(
            "refiner returned {} pixels for a {expected}-pixel patch",
            out.len()
        )));
    }
    Ok(out)
}

/// Writes refined patches back into `mask` by per-pixel majority vote.
///
/// For each object a covering patch votes for or against the object at each
/// pixel. The object with the largest positive margin takes the pixel; ties keep
/// the original label, and a pixel whose own object is voted out becomes
/// background. Pixels outside all patches are left untouched.
pub fn stitch_patches(mask: &LabelMask, refined: &[(BoundaryPatch, Vec<bool>)]) -> Result<LabelMask> {
    let (w, h) = (mask.width(), mask.height());
    for (patch, crop) in refined {
        patch.rect().check_inside(w, h)?;
        if crop.len() != patch.size * patch.size {
            return Err(VosError::Contract(format!(
                "refined crop has {} pixels for a {}-pixel patch",
                crop.len(),
                patch.size * patch.size
            )));
        }
    }
    let ids: BTreeSet<u8> = refined.iter().map(|(p, _)| p.object_id).collect();
    let mut margins: Vec<(u8, Vec<i32>)> = ids.iter().map(|&id| (id, vec![0i32; w * h])).collect();
    let mut touched = vec![false; w * h];
    for (patch, crop) in refined {
        let slot = margins.iter().position(|(id, _)| *id == patch.object_id).unwrap();
        let m = &mut margins[slot].1;
        for dy in 0..patch.size {
            for dx in 0..patch.size {
                let i = (patch.y + dy) * w + patch.x + dx;
                m[i] += if crop[dy * patch.size + dx] { 1 } else { -1 };
                touched[i] = true;
            }
        }
    }
    let mut labels = mask.labels().to_vec();
    for i in (0..w * h).filter(|&i| touched[i]) {
        let original = labels[i];
        let best = margins.iter().map(|(id, m)| (m[i], *id)).filter(|(m, _)| *m > 0).max_by_key(|(m, _)| *m);
        labels[i] = match best {
            Some((top, id)) => {
                let tied = margins.iter().filter(|(_, m)| m[i] == top).count() > 1;
                if tied { original } else { id }
            }
            None => {
                let voted_out = margins.iter().any(|(id, m)| *id == original && m[i] < 0);
                if voted_out { 0 } else { original }
            }
        };
    }
    LabelMask::new(w, h, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundaryConfig {
    pub patch_size: usize,
    pub stride: usize,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        Self { patch_size: 7, stride: 5 }
    }
}

/// Extracts, refines and stitches every boundary patch of one frame.
pub fn refine_boundaries(
    frame: &Frame,
    volume: &ProbabilityVolume,
    mask: &LabelMask,
    config: &BoundaryConfig,
    refiner: &dyn Refiner,
) -> Result<LabelMask> {
    if frame.width() != mask.width() || frame.height() != mask.height() {
        return Err(VosError::shape("frame and mask differ in size"));
    }
    if config.patch_size > mask.width() || config.patch_size > mask.height() {
        return Ok(mask.clone());
    }
    let patches = extract_boundary_patches(mask, config.patch_size, config.stride)?;
    let refined = patches
        .par_iter()
        .map(|&p| {
            let crop = crop_patch(p, frame, volume)?;
            Ok((p, refine_patch(&crop, refiner)?))
        })
        .collect::<Result<Vec<_>>>()?;
    stitch_patches(mask, &refined)
}

/// Tracker state for one object in one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackBox {
    pub object_id: u8,
    pub frame_index: usize,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl TrackBox {
    pub fn rect(&self) -> Rect {
        Rect::new(self.x, self.y, self.w, self.h)
    }

    pub fn from_rect(object_id: u8, frame_index: usize, r: Rect) -> Self {
        Self { object_id, frame_index, x: r.x, y: r.y, w: r.w, h: r.h }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackOutcome {
    Tracked(TrackBox),
    Lost,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackConfig {
    /// Context added around the box on each side of the template, as a fraction of the box size.
    pub context: f64,
    /// Minimum correlation for a successful match.
    pub min_score: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self { context: 0.25, min_score: 0.5 }
    }
}

/// Zero-mean, unit-norm colour vector of `rect`; `None` when flat.
fn normalized_patch(frame: &Frame, rect: Rect) -> Option<Vec<f64>> {
    let mut v = Vec::with_capacity(rect.area() * 3);
    for y in rect.y..rect.y + rect.h {
        for x in rect.x..rect.x + rect.w {
            v.extend_from_slice(&frame.pixel(x, y));
        }
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|e| *e -= mean);
    let norm = v.iter().map(|e| e * e).sum::<f64>().sqrt();
    (norm > 1e-9).then(|| {
        v.iter_mut().for_each(|e| *e /= norm);
        v
    })
}

fn expand(r: Rect, fx: f64, width: usize, height: usize) -> Rect {
    let mx = (r.w as f64 * fx).ceil() as usize;
    let my = (r.h as f64 * fx).ceil() as usize;
    let x0 = r.x.saturating_sub(mx);
    let y0 = r.y.saturating_sub(my);
    let x1 = (r.x + r.w + mx).min(width);
    let y1 = (r.y + r.h + my).min(height);
    Rect::new(x0, y0, x1.saturating_sub(x0), y1.saturating_sub(y0))
}

/// Follows `prev_box` from `prev_frame` into `cur_frame` by template matching.
///
/// The template is the previous box plus context; displacements up to half
/// the box size in each direction are searched. The best normalised
/// cross-correlation wins, ties going to the smallest displacement. When
/// `cur_mask` holds the object, the box takes the object's extent around the
/// matched centre.
pub fn track_box(
    prev_box: &TrackBox,
    cur_mask: Option<&LabelMask>,
    cur_frame: &Frame,
    prev_frame: &Frame,
    config: &TrackConfig,
) -> Result<TrackOutcome> {
    let (w, h) = (cur_frame.width(), cur_frame.height());
    if prev_frame.width() != w || prev_frame.height() != h {
        return Err(VosError::shape("tracked frames differ in size"));
    }
    prev_box.rect().check_inside(w, h)?;
    let template_rect = expand(prev_box.rect(), config.context, w, h);
    let Some(template) = normalized_patch(prev_frame, template_rect) else {
        return Ok(TrackOutcome::Lost);
    };
    let rx = (prev_box.w / 2).max(1) as i64;
    let ry = (prev_box.h / 2).max(1) as i64;
    let mut best: Option<(f64, i64, i64)> = None;
    for dy in -ry..=ry {
        for dx in -rx..=rx {
            let x = template_rect.x as i64 + dx;
            let y = template_rect.y as i64 + dy;
            if x < 0 || y < 0 || x as usize + template_rect.w > w || y as usize + template_rect.h > h {
                continue;
            }
            let cand = Rect::new(x as usize, y as usize, template_rect.w, template_rect.h);
            let Some(patch) = normalized_patch(cur_frame, cand) else { continue };
            let score: f64 = template.iter().zip(&patch).map(|(a, b)| a * b).sum();
            let better = match best {
                None => true,
                Some((s, bx, by)) => score > s || (score == s && dx.abs() + dy.abs() < bx.abs() + by.abs()),
            };
            if better {
                best = Some((score, dx, dy));
            }
        }
    }
    let Some((score, dx, dy)) = best else { return Ok(TrackOutcome::Lost) };
    if score < config.min_score {
        return Ok(TrackOutcome::Lost);
    }
    let mut next = TrackBox {
        object_id: prev_box.object_id,
        frame_index: prev_box.frame_index + 1,
        x: (prev_box.x as i64 + dx) as usize,
        y: (prev_box.y as i64 + dy) as usize,
        w: prev_box.w,
        h: prev_box.h,
    };
    if let Some(extent) = cur_mask.and_then(|m| m.bbox(prev_box.object_id)) {
        if (extent.w, extent.h) != (next.w, next.h) {
            let cx = next.x as f64 + next.w as f64 / 2.0;
            let cy = next.y as f64 + next.h as f64 / 2.0;
            let nx = (cx - extent.w as f64 / 2.0).round().max(0.0) as usize;
            let ny = (cy - extent.h as f64 / 2.0).round().max(0.0) as usize;
            next.w = extent.w;
            next.h = extent.h;
            next.x = nx.min(w - extent.w);
            next.y = ny.min(h - extent.h);
        }
    }
    Ok(TrackOutcome::Tracked(next))
}

/// Re-segments a zoomed crop; `hint` is the current mask resized to the crop.
pub trait Segmenter: Sync {
    fn segment(&self, frame: &Frame, hint: &LabelMask) -> Result<LabelMask>;
}

/// Returns the hint unchanged.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct IdentitySegmenter;

impl Segmenter for IdentitySegmenter {
    fn segment(&self, _frame: &Frame, hint: &LabelMask) -> Result<LabelMask> {
        Ok(hint.clone())
    }
}

/// Propagates a reference crop and its mask onto the zoomed crop.
///
/// The reference is resampled to the crop size, then the two-frame clip
/// `[reference, crop]` is propagated at full resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationSegmenter {
    pub reference_frame: Frame,
    pub reference_mask: LabelMask,
    pub config: PropagationConfig,
}

impl Segmenter for PropagationSegmenter {
    fn segment(&self, frame: &Frame, _hint: &LabelMask) -> Result<LabelMask> {
        let reference = self.reference_frame.resize(frame.width(), frame.height())?;
        let mask = self.reference_mask.resize_nearest(frame.width(), frame.height())?;
        let config = PropagationConfig { stride: 1, ..self.config.clone() };
        let mut out = propagate(&[reference, frame.clone()], &mask, &config)?;
        Ok(out.pop().expect("two-frame clip yields two predictions").mask)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZoomConfig {
    /// Integer upscaling of the crop.
    pub zoom: usize,
    /// Context added on each side of the box, as a fraction of its size.
    pub margin: f64,
    /// Objects smaller than this many pixels in a frame are zoomed there.
    pub area_threshold: usize,
    pub track: TrackConfig,
}

impl Default for ZoomConfig {
    fn default() -> Self {
        Self { zoom: 4, margin: 0.25, area_threshold: 100, track: TrackConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZoomOutcome {
    pub mask: LabelMask,
    /// Set when the crop was degenerate and nothing was changed.
    pub warning: Option<String>,
    /// Region that was allowed to change.
    pub region: Option<Rect>,
}

/// Crops around `bbox`, upsamples, re-segments and pastes the result back.
///
/// Only pixels inside the margin-expanded box can change, and labels not
/// already present in `full_mask` (other than the box's object) are dropped to
/// background.
pub fn crop_then_zoom(
    frame: &Frame,
    bbox: &TrackBox,
    full_mask: &LabelMask,
    segmenter: &dyn Segmenter,
    config: &ZoomConfig,
) -> Result<ZoomOutcome> {
    if config.zoom < 1 {
        return Err(VosError::config("zoom factor must be at least 1"));
    }
    if !(config.margin >= 0.0 && config.margin.is_finite()) {
        return Err(VosError::config("zoom margin must be non-negative"));
    }
    if frame.width() != full_mask.width() || frame.height() != full_mask.height() {
        return Err(VosError::shape("frame and mask differ in size"));
    }
    let (w, h) = (frame.width(), frame.height());
    let inside = bbox.w > 0 && bbox.h > 0 && bbox.x < w && bbox.y < h;
    let region = if inside {
        let clipped = Rect::new(bbox.x, bbox.y, bbox.w.min(w - bbox.x), bbox.h.min(h - bbox.y));
        expand(clipped, config.margin, w, h)
    } else {
        Rect::new(0, 0, 0, 0)
    };
    if region.w == 0 || region.h == 0 {
        let warning = format!("degenerate zoom box {bbox:?} in a {w}x{h} frame; mask left unchanged");
        log::warn!("{warning}");
        return Ok(ZoomOutcome { mask: full_mask.clone(), warning: Some(warning), region: None });
    }
    let (zw, zh) = (region.w * config.zoom, region.h * config.zoom);
    let crop = frame.crop(region)?.resize(zw, zh)?;
    let hint = full_mask.crop(region)?.resize_nearest(zw, zh)?;
    let segmented = segmenter.segment(&crop, &hint)?;
    if segmented.width() != zw || segmented.height() != zh {
        return Err(VosError::Contract(format!(
            "segmenter returned {}x{} for a {zw}x{zh} crop",
            segmented.width(),
            segmented.height()
        )));
    }
    let small = segmented.downsample_mode(config.zoom, region.w, region.h)?;
    let mut allowed = [false; 256];
    allowed[0] = true;
    allowed[bbox.object_id as usize] = true;
    full_mask.labels().iter().for_each(|&l| allowed[l as usize] = true);
    let cleaned = small.labels().iter().map(|&l| if allowed[l as usize] { l } else { 0 }).collect();
    let small = LabelMask::new(region.w, region.h, cleaned)?;
    let mut mask = full_mask.clone();
    mask.paste(&small, region.x, region.y)?;
    Ok(ZoomOutcome { mask, warning: None, region: Some(region) })
}

/// An object flagged as small together with the frames to zoom.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmallObject {
    pub object_id: u8,
    /// Inclusive frame ranges.
    pub ranges: Vec<(usize, usize)>,
}

/// Frames where each object is below `area_threshold` pixels.
///
/// A frame counts once the object has appeared, so frames where a small
/// object vanished from the mask are included.
pub fn small_object_select(masks: &[LabelMask], area_threshold: usize) -> Result<Vec<SmallObject>> {
    if area_threshold < 1 {
        return Err(VosError::config("area threshold must be at least one pixel"));
    }
    let ids: BTreeSet<u8> = masks.iter().flat_map(LabelMask::object_ids).collect();
    let mut out = Vec::new();
    for id in ids {
        let first = masks.iter().position(|m| m.area(id) > 0).expect("id taken from the masks");
        let mut ranges: Vec<(usize, usize)> = Vec::new();
        for (t, m) in masks.iter().enumerate().skip(first) {
            if m.area(id) >= area_threshold {
                continue;
            }
            match ranges.last_mut() {
                Some(r) if r.1 + 1 == t => r.1 = t,
                _ => ranges.push((t, t)),
            }
        }
        if !ranges.is_empty() {
            out.push(SmallObject { object_id: id, ranges });
        }
    }
    Ok(out)
}

/// Builds the segmenter used for one small object.
pub trait SegmenterFactory: Sync {
    fn for_object(&self, object_id: u8) -> Result<Box<dyn Segmenter>>;
}

/// Reference crops taken from an annotated frame around each object.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSegmenters {
    pub frame: Frame,
    pub mask: LabelMask,
    pub margin: f64,
    pub config: PropagationConfig,
}

impl SegmenterFactory for ReferenceSegmenters {
    fn for_object(&self, object_id: u8) -> Result<Box<dyn Segmenter>> {
        let Some(b) = self.mask.bbox(object_id) else {
            return Err(VosError::Input(format!("object {object_id} is absent from the reference mask")));
        };
        let region = expand(b, self.margin, self.mask.width(), self.mask.height());
        Ok(Box::new(PropagationSegmenter {
            reference_frame: self.frame.crop(region)?,
            reference_mask: self.mask.crop(region)?,
            config: self.config.clone(),
        }))
    }
}

/// Identity segmenters for every object.
impl SegmenterFactory for IdentitySegmenter {
    fn for_object(&self, _object_id: u8) -> Result<Box<dyn Segmenter>> {
        Ok(Box::new(IdentitySegmenter))
    }
}

/// Result of zoom refinement over a clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ZoomRefinement {
    pub masks: Vec<LabelMask>,
    pub boxes: Vec<TrackBox>,
    pub warnings: Vec<String>,
}

/// Applies crop-then-zoom to every small object over its flagged frames.
///
/// Boxes start from the object's extent in the nearest earlier frame that
/// contains it and are carried forward by [`track_box`]; in each frame the
/// zoom region is the union of the tracked box and the object's current extent.
pub fn zoom_refine_sequence(
    frames: &[Frame],
    masks: &[LabelMask],
    config: &ZoomConfig,
    segmenters: &dyn SegmenterFactory,
) -> Result<ZoomRefinement> {
    if frames.len() != masks.len() {
        return Err(VosError::shape(format!("{} frames for {} masks", frames.len(), masks.len())));
    }
    let mut out = ZoomRefinement { masks: masks.to_vec(), boxes: Vec::new(), warnings: Vec::new() };
    for small in small_object_select(masks, config.area_threshold)? {
        let id = small.object_id;
        let segmenter = segmenters.for_object(id)?;
        for &(start, end) in &small.ranges {
            let Some(anchor) = (0..=start).rev().find(|&t| masks[t].area(id) > 0) else { continue };
            let mut current = TrackBox::from_rect(id, anchor, masks[anchor].bbox(id).expect("anchor has the object"));
            for t in anchor + 1..=start {
                match track_box(&current, Some(&masks[t]), &frames[t], &frames[t - 1], &config.track)? {
                    TrackOutcome::Tracked(b) => current = b,
                    TrackOutcome::Lost => current.frame_index = t,
                }
            }
            let mut zoomed: Vec<(usize, TrackBox)> = Vec::new();
            for t in start..=end {
                if t > start {
                    match track_box(&current, Some(&masks[t]), &frames[t], &frames[t - 1], &config.track)? {
                        TrackOutcome::Tracked(b) => current = b,
                        TrackOutcome::Lost => {
                            out.warnings.push(format!("object {id} lost at frame {t}"));
                            current.frame_index = t;
                        }
                    }
                }
                let region = match masks[t].bbox(id) {
                    Some(extent) => current.rect().union(&extent),
                    None => current.rect(),
                };
                zoomed.push((t, TrackBox::from_rect(id, t, region)));
            }
            let results = zoomed
                .par_iter()
                .map(|(t, b)| crop_then_zoom(&frames[*t], b, &out.masks[*t], segmenter.as_ref(), config))
                .collect::<Result<Vec<_>>>()?;
            for ((t, b), r) in zoomed.into_iter().zip(results) {
                out.warnings.extend(r.warning);
                out.masks[t] = r.mask;
                out.boxes.push(b);
            }
        }
    }
    Ok(out)
}
