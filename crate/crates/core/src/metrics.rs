//! Region similarity J, boundary measure F and the four-way overall score.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Result, VosError};
use crate::frame::LabelMask;

/// `|pred ∩ gt| / |pred ∪ gt|` for label `id`; 1 when both are empty.
pub fn jaccard(pred: &LabelMask, gt: &LabelMask, id: u8) -> Result<f64> {
    pred.check_same_shape(gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        let (p, g) = (p == id, g == id);
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Object pixels with at least one in-frame 4-neighbour outside the object.
pub fn boundary_map(mask: &[bool], width: usize, height: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if !mask[i] {
                continue;
            }
            out[i] = (x > 0 && !mask[i - 1])
                || (x + 1 < width && !mask[i + 1])
                || (y > 0 && !mask[i - width])
                || (y + 1 < height && !mask[i + width]);
        }
    }
    out
}

/// Square (Chebyshev) dilation by `radius`, done as two separable passes.
pub fn dilate(map: &[bool], width: usize, height: usize, radius: usize) -> Vec<bool> {
    if radius == 0 {
        return map.to_vec();
    }
    let mut horizontal = vec![false; map.len()];
    for y in 0..height {
        let row = &map[y * width..(y + 1) * width];
        let mut last_seen: Option<usize> = None;
        // Forward pass marks pixels within `radius` after a set pixel, backward pass before.
        for x in 0..width {
            if row[x] {
                last_seen = Some(x);
            }
            if last_seen.is_some_and(|s| x - s <= radius) {
                horizontal[y * width + x] = true;
            }
        }
        last_seen = None;
        for x in (0..width).rev() {
            if row[x] {
                last_seen = Some(x);
            }
            if last_seen.is_some_and(|s| s - x <= radius) {
                horizontal[y * width + x] = true;
            }
        }
    }
    let mut out = vec![false; map.len()];
    for x in 0..width {
        let mut last_seen: Option<usize> = None;
        for y in 0..height {
            if horizontal[y * width + x] {
                last_seen = Some(y);
            }
            if last_seen.is_some_and(|s| y - s <= radius) {
                out[y * width + x] = true;
            }
        }
        last_seen = None;
        for y in (0..height).rev() {
            if horizontal[y * width + x] {
                last_seen = Some(y);
            }
            if last_seen.is_some_and(|s| s - y <= radius) {
                out[y * width + x] = true;
            }
        }
    }
    out
}

/// Boundary F-measure of label `id` with a square matching window of
/// `tolerance` pixels.
///
/// Both objects empty, or both without any boundary pixel, scores 1. An empty
/// boundary on one side only scores 0.
pub fn boundary_f(pred: &LabelMask, gt: &LabelMask, id: u8, tolerance: usize) -> Result<f64> {
    pred.check_same_shape(gt)?;
    let (w, h) = (pred.width(), pred.height());
    let pb = boundary_map(&pred.binary(id), w, h);
    let gb = boundary_map(&gt.binary(id), w, h);
    let np = pb.iter().filter(|&&b| b).count();
    let ng = gb.iter().filter(|&&b| b).count();
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    let gd = dilate(&gb, w, h, tolerance);
    let pd = dilate(&pb, w, h, tolerance);
    let precision = if np == 0 {
        0.0
    } else {
        pb.iter().zip(&gd).filter(|(&b, &d)| b && d).count() as f64 / np as f64
    };
    let recall = if ng == 0 {
        0.0
    } else {
        gb.iter().zip(&pd).filter(|(&b, &d)| b && d).count() as f64 / ng as f64
    };
    Ok(if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) })
}

/// `ceil(0.008 × diagonal)`.
pub fn default_tolerance(width: usize, height: usize) -> usize {
    (0.008 * ((width * width + height * height) as f64).sqrt()).ceil() as usize
}

/// Arithmetic mean of the four leaderboard components.
pub fn overall_score(j_seen: f64, j_unseen: f64, f_seen: f64, f_unseen: f64) -> Result<f64> {
    let parts = [j_seen, j_unseen, f_seen, f_unseen];
    if let Some(bad) = parts.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(VosError::Domain(format!("score {bad} outside [0, 1]")));
    }
    Ok(parts.iter().sum::<f64>() / 4.0)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalConfig {
    /// Boundary tolerance in pixels; `None` uses [`default_tolerance`].
    pub tolerance: Option<usize>,
    /// Frame indices to score; `None` scores every frame.
    pub annotated_frames: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectScore {
    pub j: f64,
    pub f: f64,
    pub frames: usize,
    pub seen: Option<bool>,
}

/// Per-object scores and seen/unseen aggregates.
///
/// A category with no scored objects has `None` aggregates; `overall` is then
/// the mean of the components that exist.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub per_object: BTreeMap<u8, ObjectScore>,
    pub j_seen: Option<f64>,
    pub j_unseen: Option<f64>,
    pub f_seen: Option<f64>,
    pub f_unseen: Option<f64>,
    pub overall: f64,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Scores a predicted sequence against ground truth.
///
/// Each object is scored on the selected frames from its first appearance in
/// `gts` onwards, then averaged per object, then per category. With both id
/// lists empty every ground-truth object counts as seen; otherwise objects in
/// neither list are reported but not aggregated.
pub fn evaluate_sequence(
    preds: &[LabelMask],
    gts: &[LabelMask],
    seen_ids: &[u8],
    unseen_ids: &[u8],
    config: &EvalConfig,
) -> Result<ScoreReport> {
    if preds.len() != gts.len() {
        return Err(VosError::shape(format!(
            "{} predictions for {} ground-truth frames",
            preds.len(),
            gts.len()
        )));
    }
    if let Some(id) = seen_ids.iter().find(|id| unseen_ids.contains(id)) {
        return Err(VosError::config(format!("object {id} is both seen and unseen")));
    }
    for (p, g) in preds.iter().zip(gts) {
        p.check_same_shape(g)?;
    }
    let frames: Vec<usize> = match &config.annotated_frames {
        Some(list) => {
            if let Some(bad) = list.iter().find(|&&t| t >= gts.len()) {
                return Err(VosError::config(format!("annotated frame {bad} out of range")));
            }
            list.clone()
        }
        None => (0..gts.len()).collect(),
    };
    let mut ids: Vec<u8> = gts.iter().flat_map(LabelMask::object_ids).collect();
    ids.sort_unstable();
    ids.dedup();

    let mut per_object = BTreeMap::new();
    for &id in &ids {
        let Some(first) = gts.iter().position(|g| g.area(id) > 0) else { continue };
        let tol = |m: &LabelMask| config.tolerance.unwrap_or_else(|| default_tolerance(m.width(), m.height()));
        let mut js = Vec::new();
        let mut fs = Vec::new();
        for &t in frames.iter().filter(|&&t| t >= first) {
            js.push(jaccard(&preds[t], &gts[t], id)?);
            fs.push(boundary_f(&preds[t], &gts[t], id, tol(&gts[t]))?);
        }
        if js.is_empty() {
            continue;
        }
        let seen = if seen_ids.is_empty() && unseen_ids.is_empty() {
            Some(true)
        } else if seen_ids.contains(&id) {
            Some(true)
        } else if unseen_ids.contains(&id) {
            Some(false)
        } else {
            None
        };
        per_object.insert(
            id,
            ObjectScore { j: mean(js.iter().copied()).unwrap(), f: mean(fs.iter().copied()).unwrap(), frames: js.len(), seen },
        );
    }
    let pick = |seen: bool, f: fn(&ObjectScore) -> f64| {
        mean(per_object.values().filter(|o| o.seen == Some(seen)).map(f))
    };
    let j_seen = pick(true, |o| o.j);
    let j_unseen = pick(false, |o| o.j);
    let f_seen = pick(true, |o| o.f);
    let f_unseen = pick(false, |o| o.f);
    let overall = match (j_seen, j_unseen, f_seen, f_unseen) {
        (Some(a), Some(b), Some(c), Some(d)) => overall_score(a, b, c, d)?,
        _ => mean([j_seen, j_unseen, f_seen, f_unseen].into_iter().flatten()).unwrap_or(0.0),
    };
    Ok(ScoreReport { per_object, j_seen, j_unseen, f_seen, f_unseen, overall })
}

impl ScoreReport {
    /// Human-readable table.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
        let mut out = String::new();
        let _ = writeln!(out, "{:>8} {:>8} {:>8} {:>8} {:>8}", "Overall", "J_seen", "J_unseen", "F_seen", "F_unseen");
        let _ = writeln!(
            out,
            "{:>8.3} {:>8} {:>8} {:>8} {:>8}",
            self.overall,
            fmt(self.j_seen),
            fmt(self.j_unseen),
            fmt(self.f_seen),
            fmt(self.f_unseen)
        );
        let _ = writeln!(out);
        let _ = writeln!(out, "{:>6} {:>8} {:>8} {:>7} {:>8}", "object", "J", "F", "frames", "category");
        for (id, o) in &self.per_object {
            let cat = match o.seen {
                Some(true) => "seen",
                Some(false) => "unseen",
                None => "-",
            };
            let _ = writeln!(out, "{id:>6} {:>8.3} {:>8.3} {:>7} {cat:>8}", o.j, o.f, o.frames);
        }
        out
    }

    /// One `key=value` record per line: objects first, then the aggregate.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        for (id, o) in &self.per_object {
            let cat = match o.seen {
                Some(true) => "seen",
                Some(false) => "unseen",
                None => "none",
            };
            let _ = writeln!(out, "record=object id={id} j={:.6} f={:.6} frames={} category={cat}", o.j, o.f, o.frames);
        }
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(
            out,
            "record=aggregate j_seen={} j_unseen={} f_seen={} f_unseen={} overall={:.6}",
            opt(self.j_seen),
            opt(self.j_unseen),
            opt(self.f_seen),
            opt(self.f_unseen),
            self.overall
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(w: usize, h: usize, x0: usize, y0: usize, side: usize, id: u8) -> LabelMask {
        let mut m = LabelMask::background(w, h).unwrap();
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                m.set(x, y, id);
            }
        }
        m
    }

    #[test]
    fn jaccard_basics() {
        let a = square(10, 10, 1, 1, 4, 1);
        assert_eq!(jaccard(&a, &a, 1).unwrap(), 1.0);
        let far = square(10, 10, 6, 6, 4, 1);
        assert_eq!(jaccard(&a, &far, 1).unwrap(), 0.0);
        let shifted = square(10, 10, 3, 1, 4, 1);
        assert!((jaccard(&a, &shifted, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let empty = LabelMask::background(10, 10).unwrap();
        assert_eq!(jaccard(&empty, &empty, 1).unwrap(), 1.0);
        assert!(matches!(jaccard(&a, &LabelMask::background(9, 10).unwrap(), 1), Err(VosError::Shape(_))));
    }

    #[test]
    fn boundary_f_basics() {
        let gt = square(12, 12, 2, 2, 6, 1);
        assert_eq!(boundary_f(&gt, &gt, 1, 1).unwrap(), 1.0);
        let inner = square(12, 12, 3, 3, 4, 1);
        assert_eq!(boundary_f(&inner, &gt, 1, 1).unwrap(), 1.0);
        assert!(boundary_f(&inner, &gt, 1, 0).unwrap() < 1.0);
        let empty = LabelMask::background(12, 12).unwrap();
        assert_eq!(boundary_f(&empty, &gt, 1, 3).unwrap(), 0.0);
        assert_eq!(boundary_f(&empty, &empty, 1, 3).unwrap(), 1.0);
    }

    #[test]
    fn overall_domain_and_values() {
        assert_eq!(overall_score(1.0, 1.0, 1.0, 1.0).unwrap(), 1.0);
        assert!((overall_score(0.855, 0.817, 0.914, 0.903).unwrap() - 0.87225).abs() < 1e-12);
        assert!(matches!(overall_score(1.2, 0.0, 0.0, 0.0), Err(VosError::Domain(_))));
        assert!(matches!(overall_score(f64::NAN, 0.0, 0.0, 0.0), Err(VosError::Domain(_))));
    }

    #[test]
    fn default_tolerance_matches_diagonal_rule() {
        assert_eq!(default_tolerance(854, 480), 8);
        assert_eq!(default_tolerance(32, 32), 1);
    }

    #[test]
    fn frame_averaging_rule() {
        let gt = square(8, 8, 0, 0, 4, 1);
        let half = square(8, 8, 0, 0, 4, 1);
        let mut worse = half.clone();
        for y in 0..4 {
            for x in 2..4 {
                worse.set(x, y, 0);
            }
        }
        let report = evaluate_sequence(&[half, worse], &[gt.clone(), gt], &[1], &[], &EvalConfig::default()).unwrap();
        assert!((report.per_object[&1].j - 0.75).abs() < 1e-15);
        assert_eq!(report.j_unseen, None);
    }

    #[test]
    fn seen_unseen_overlap_is_rejected() {
        let m = square(4, 4, 0, 0, 2, 1);
        let err = evaluate_sequence(&[m.clone()], &[m], &[1], &[1], &EvalConfig::default());
        assert!(matches!(err, Err(VosError::Config(_))));
    }

    #[test]
    fn perfect_predictions_score_one() {
        let a = square(10, 10, 1, 1, 3, 1);
        let mut b = a.clone();
        b.set(8, 8, 2);
        let gts = vec![a, b];
        let report = evaluate_sequence(&gts, &gts, &[1], &[2], &EvalConfig::default()).unwrap();
        assert_eq!(report.overall, 1.0);
        assert_eq!(report.j_unseen, Some(1.0));
        assert!(report.to_records().contains("record=aggregate"));
    }
}
