//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vostk_core::attention::{
    attend, attend_lstt_v2, attend_with_identity, gradient_check, AttentionOp, AttentionVariant, EmbeddingMatrix,
    GradInputs, IdentityEmbedding, LayerProjections,
};
use vostk_core::config::{FusionMode, PipelineConfig};
use vostk_core::frame::{Frame, LabelMask, ProbabilityVolume, Rect};
use vostk_core::fusion::{fuse_average, fuse_keypoint_voting, fuse_max, normalize_prediction, NccMatcher, PredictionSet};
use vostk_core::memory::{MemoryBank, MemoryEntry, ReadConfig, SamplingPolicy, TopKConfig};
use vostk_core::metrics::{boundary_f, jaccard, overall_score};
use vostk_core::pipeline::run_video;
use vostk_core::postprocess::{
    crop_then_zoom, extract_boundary_patches, refine_boundaries, stitch_patches, zoom_refine_sequence,
    BoundaryConfig, BoundaryPatch, IdentitySegmenter, OtsuRefiner, ReferenceSegmenters, Segmenter, TrackBox,
    ZoomConfig,
};
use vostk_core::propagation::{propagate, PropagationConfig};
use vostk_core::synthetic::{gen_synthetic, write_clip, SyntheticSpec};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() -> ExitCode {
    let criteria: [(&str, Duration, fn() -> Outcome); 9] = [
        ("leaderboard arithmetic", Duration::from_secs(1), leaderboard_arithmetic),
        ("attention readouts vs oracles", Duration::from_secs(10), attention_oracles),
        ("top-k equivalence", Duration::from_secs(10), topk_equivalence),
        ("moving-square propagation", Duration::from_secs(60), moving_square_suite),
        ("small-object zoom", Duration::from_secs(60), small_object_zoom),
        ("fusion properties", Duration::from_secs(30), fusion_properties),
        ("metric oracles", Duration::from_secs(30), metric_oracles),
        ("post-processing locality", Duration::from_secs(30), postprocess_locality),
        ("run determinism", Duration::from_secs(120), run_determinism),
    ];
    let mut failed = 0;
    for (n, (name, budget, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = f();
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > *budget => Err(format!("{detail}; over budget {budget:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail}) [{took:.2?}]", n + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({detail}) [{took:.2?}]", n + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------- 1

fn leaderboard_arithmetic() -> Outcome {
    // (overall, J seen, J unseen, F seen, F unseen), in thousandths.
    let rows: [(&str, [u32; 5]); 7] = [
        ("Thursday_Group", [872, 855, 817, 914, 903]),
        ("ux", [867, 844, 819, 903, 903]),
        ("zjmagicworld", [862, 841, 816, 895, 896]),
        ("whc", [862, 840, 818, 894, 896]),
        ("gogo", [861, 847, 808, 901, 890]),
        ("sz", [857, 831, 815, 886, 896]),
        ("PinxueGuo", [856, 832, 812, 887, 892]),
    ];
    let mut worst: f64 = 0.0;
    for (team, [overall, js, ju, fs, fu]) in rows {
        let t = |v: u32| f64::from(v) / 1000.0;
        let mean = overall_score(t(js), t(ju), t(fs), t(fu)).map_err(|e| e.to_string())?;
        // Exact in integer units of 1e-4: 10 × |4·overall − Σ| / 4 ≤ 5.
        let gap_e4 = (4 * overall).abs_diff(js + ju + fs + fu) * 10;
        check(gap_e4 <= 5 * 4, || format!("{team}: mean {mean} vs {}", t(overall)))?;
        check((mean - (js + ju + fs + fu) as f64 / 4000.0).abs() < 1e-12, || format!("{team}: mean {mean}"))?;
        worst = worst.max((mean - t(overall)).abs());
    }
    Ok(format!("7 rows, largest gap {worst:.4e}"))
}

// ---------------------------------------------------------------- 2

fn naive_attention(q: &EmbeddingMatrix, k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    (0..q.rows())
        .map(|i| {
            let scores: Vec<f64> =
                k.iter().map(|kj| q.row(i).iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale).collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let mut out = vec![0.0; v[0].len()];
            for (w, vj) in exps.iter().zip(v) {
                for (o, x) in out.iter_mut().zip(vj) {
                    *o += w / total * x;
                }
            }
            out
        })
        .collect()
}

fn rows_of(m: &EmbeddingMatrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn max_diff(got: &EmbeddingMatrix, want: &[Vec<f64>]) -> f64 {
    want.iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().enumerate().map(move |(j, &x)| (got.get(i, j) - x).abs()))
        .fold(0.0, f64::max)
}

fn attention_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let instances = 150;
    for n in 0..instances {
        let seed = rng.gen::<u64>();
        let (nq, nm) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let (ck, cv) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let q = EmbeddingMatrix::random(nq, ck, seed);
        let k = EmbeddingMatrix::random(nm, ck, seed ^ 1);
        let v = EmbeddingMatrix::random(nm, cv, seed ^ 2);
        let e = IdentityEmbedding::new(EmbeddingMatrix::random(nm, cv, seed ^ 3));
        let proj = LayerProjections::seeded(cv, n % 3, seed ^ 4, 0.8);

        let plain = naive_attention(&q, &rows_of(&k), &rows_of(&v));
        let augmented: Vec<Vec<f64>> = (0..nm)
            .map(|j| v.row(j).iter().zip(e.as_matrix().row(j)).map(|(a, b)| a + b).collect())
            .collect();
        let identity = naive_attention(&q, &rows_of(&k), &augmented);
        let gated_k: Vec<Vec<f64>> = (0..nm)
            .map(|j| {
                let z: f64 = e.as_matrix().row(j).iter().zip(proj.gate_weights()).map(|(a, b)| a * b).sum();
                let g = 1.0 / (1.0 + (-z).exp());
                k.row(j).iter().map(|x| x * g).collect()
            })
            .collect();
        let projected_v: Vec<Vec<f64>> = (0..nm)
            .map(|j| {
                (0..cv)
                    .map(|c| {
                        let w = proj.value_weights();
                        v.get(j, c) + (0..cv).map(|d| e.as_matrix().get(j, d) * w.get(d, c)).sum::<f64>()
                    })
                    .collect()
            })
            .collect();
        let gated = naive_attention(&q, &gated_k, &projected_v);

        let err = |r: vostk_core::Result<EmbeddingMatrix>| r.map_err(|e| e.to_string());
        let diffs = [
            max_diff(&err(attend(&q, &k, &v))?, &plain),
            max_diff(&err(attend_with_identity(&q, &k, &v, &e))?, &identity),
            max_diff(&err(attend_lstt_v2(&q, &k, &v, &e, &proj))?, &gated),
        ];
        let entry = MemoryEntry::new(0, k.clone(), v.clone(), e.clone()).map_err(|e| e.to_string())?;
        let bank = MemoryBank::init(entry, 2, SamplingPolicy::KeepAll).map_err(|e| e.to_string())?;
        let read = |variant| {
            let cfg = ReadConfig { variant, topk: TopKConfig::disabled(), temperature: 1.0 };
            err(bank.read(&q, &cfg, Some(&proj)))
        };
        let reads = [
            max_diff(&read(AttentionVariant::Plain)?, &plain),
            max_diff(&read(AttentionVariant::Identity)?, &identity),
            max_diff(&read(AttentionVariant::Gated)?, &gated),
        ];
        for d in diffs.into_iter().chain(reads) {
            worst = worst.max(d);
            check(d <= 1e-10, || format!("instance {n}: deviation {d:.3e}"))?;
        }
    }

    let mut grad_worst: f64 = 0.0;
    let grad_instances = 24;
    for n in 0..grad_instances {
        let seed = rng.gen::<u64>();
        let (nq, nm, c) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let full = GradInputs {
            q: EmbeddingMatrix::random(nq, c, seed),
            k: EmbeddingMatrix::random(nm, c, seed ^ 1),
            v: Some(EmbeddingMatrix::random(nm, c, seed ^ 2)),
            e: Some(IdentityEmbedding::new(EmbeddingMatrix::random(nm, c, seed ^ 3))),
            proj: Some(LayerProjections::seeded(c, 0, seed ^ 4, 0.7)),
        };
        for op in [AttentionOp::Correlation, AttentionOp::Attend, AttentionOp::AttendWithIdentity, AttentionOp::AttendLsttV2] {
            let inputs = match op {
                AttentionOp::Correlation => GradInputs { v: None, e: None, proj: None, ..full.clone() },
                AttentionOp::Attend => GradInputs { e: None, proj: None, ..full.clone() },
                AttentionOp::AttendWithIdentity => GradInputs { proj: None, ..full.clone() },
                AttentionOp::AttendLsttV2 => full.clone(),
            };
            let rel = gradient_check(op, &inputs, 1e-5).map_err(|e| e.to_string())?;
            grad_worst = grad_worst.max(rel);
            check(rel <= 1e-4, || format!("gradient instance {n} {op:?}: relative error {rel:.3e}"))?;
        }
    }
    Ok(format!(
        "{instances} instances, max deviation {worst:.2e}; {grad_instances}x4 gradient checks, max rel {grad_worst:.2e}"
    ))
}

// ---------------------------------------------------------------- 3

fn random_bank(rng: &mut ChaCha8Rng, ck: usize, cv: usize) -> (MemoryBank, EmbeddingMatrix, EmbeddingMatrix) {
    let blocks = rng.gen_range(1..=3);
    let mut bank = None::<MemoryBank>;
    let (mut keys, mut values) = (Vec::new(), Vec::new());
    for t in 0..blocks {
        let n = rng.gen_range(1..=6);
        let seed = rng.gen::<u64>();
        let k = EmbeddingMatrix::random(n, ck, seed);
        let v = EmbeddingMatrix::random(n, cv, seed ^ 1);
        let e = IdentityEmbedding::new(EmbeddingMatrix::random(n, cv, seed ^ 2));
        keys.push(k.clone());
        values.push(v.add(e.as_matrix()).unwrap());
        let entry = MemoryEntry::new(t, k, v, e).unwrap();
        match bank.as_mut() {
            None => bank = Some(MemoryBank::init(entry, 3, SamplingPolicy::KeepAll).unwrap()),
            Some(b) => {
                b.append(entry).unwrap();
            }
        }
    }
    let keys = EmbeddingMatrix::vstack(&keys).unwrap();
    let values = EmbeddingMatrix::vstack(&values).unwrap();
    (bank.unwrap(), keys, values)
}

fn topk_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let banks = 200;
    let mut worst: f64 = 0.0;
    for n in 0..banks {
        let (ck, cv) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
        let (bank, keys, values) = random_bank(&mut rng, ck, cv);
        let q = EmbeddingMatrix::random(rng.gen_range(1..=6), ck, rng.gen());
        let temperature = [1.0, 0.5, 0.01][n % 3];
        let proj = LayerProjections::seeded(cv, 0, rng.gen(), 0.8);
        let read = |variant, topk| {
            bank.read(&q, &ReadConfig { variant, topk, temperature }, Some(&proj)).map_err(|e| e.to_string())
        };
        for variant in [AttentionVariant::Plain, AttentionVariant::Identity, AttentionVariant::Gated] {
            let dense = read(variant, TopKConfig::disabled())?;
            let full = read(variant, TopKConfig::keep(bank.total_tokens()))?;
            let d = dense.data().iter().zip(full.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(d);
            check(d <= 1e-12, || format!("bank {n} {variant:?}: k = total deviates by {d:.3e}"))?;
        }

        let plain_values = EmbeddingMatrix::vstack(bank.entries().iter().map(|e| e.values())).unwrap();
        for (variant, values) in [(AttentionVariant::Plain, &plain_values), (AttentionVariant::Identity, &values)] {
            let one = read(variant, TopKConfig::keep(1))?;
            for i in 0..q.rows() {
                let scores: Vec<f64> = (0..keys.rows())
                    .map(|j| q.row(i).iter().zip(keys.row(j)).map(|(a, b)| a * b).sum())
                    .collect();
                let best = (0..scores.len()).fold(0, |b, j| if scores[j] > scores[b] { j } else { b });
                check(one.row(i) == values.row(best), || {
                    format!("bank {n} {variant:?} row {i}: k = 1 is not the argmax value")
                })?;
            }
        }
    }
    Ok(format!("{banks} banks, k = total max deviation {worst:.2e}, k = 1 exact"))
}

// ---------------------------------------------------------------- 4

fn moving_square_suite() -> Outcome {
    let clips = [
        (16, 16, 30, 5, [0.2, 0.15]),
        (24, 32, 20, 7, [0.5, 0.4]),
        (32, 32, 15, 8, [1.0, -0.5]),
        (48, 40, 12, 10, [-1.0, 1.0]),
        (64, 64, 10, 12, [1.5, 1.0]),
    ];
    let config = PropagationConfig::default();
    check(config.variant == AttentionVariant::Identity, || "default variant is not the identity readout".into())?;
    let mut per_clip = Vec::new();
    for (i, &(w, h, frames, size, velocity)) in clips.iter().enumerate() {
        let clip = gen_synthetic(&SyntheticSpec::moving_square(w, h, frames, size, velocity, 40 + i as u64))
            .map_err(|e| e.to_string())?;
        let out = propagate(&clip.frames, &clip.masks[0], &config).map_err(|e| e.to_string())?;
        let js: Vec<f64> = (1..frames).map(|t| jaccard(&out[t].mask, &clip.masks[t], 1).unwrap()).collect();
        per_clip.push(js.iter().sum::<f64>() / js.len() as f64);
    }
    let mean = per_clip.iter().sum::<f64>() / per_clip.len() as f64;
    let listed = per_clip.iter().map(|j| format!("{j:.3}")).collect::<Vec<_>>().join(" ");
    check(mean >= 0.95, || format!("mean J {mean:.4} [{listed}]"))?;
    Ok(format!("5 clips, mean J {mean:.4} [{listed}]"))
}

// ---------------------------------------------------------------- 5

fn small_object_zoom() -> Outcome {
    let mut spec = SyntheticSpec::shrinking_square(64, 64, 12, 12, 2, 5);
    spec.shapes[0].center = [32.0, 32.0];
    let clip = gen_synthetic(&spec).map_err(|e| e.to_string())?;
    let config = PropagationConfig { stride: 2, ..PropagationConfig::default() };
    let base: Vec<LabelMask> = propagate(&clip.frames, &clip.masks[0], &config)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|p| p.mask)
        .collect();
    let segmenters = ReferenceSegmenters {
        frame: clip.frames[0].clone(),
        mask: clip.masks[0].clone(),
        margin: 0.25,
        config: PropagationConfig::default(),
    };
    let zoomed = zoom_refine_sequence(&clip.frames, &base, &ZoomConfig::default(), &segmenters)
        .map_err(|e| e.to_string())?;
    let mean_j = |masks: &[LabelMask]| {
        (1..masks.len()).map(|t| jaccard(&masks[t], &clip.masks[t], 1).unwrap()).sum::<f64>() / (masks.len() - 1) as f64
    };
    let (before, after) = (mean_j(&base), mean_j(&zoomed.masks));
    check(after > before, || format!("J {before:.4} -> {after:.4}"))?;
    Ok(format!("J {before:.4} -> {after:.4}"))
}

// ---------------------------------------------------------------- 6

fn random_volume(rng: &mut ChaCha8Rng, w: usize, h: usize, planes: usize) -> ProbabilityVolume {
    let data = (0..w * h * planes).map(|_| rng.gen_range(0.01..1.0)).collect();
    ProbabilityVolume::from_scores(w, h, planes, data).unwrap()
}

fn shift_right(mask: &LabelMask, dx: usize) -> LabelMask {
    let mut out = LabelMask::background(mask.width(), mask.height()).unwrap();
    for y in 0..mask.height() {
        for x in dx..mask.width() {
            out.set(x, y, mask.get(x - dx, y));
        }
    }
    out
}

fn fusion_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let trials = 200;
    for n in 0..trials {
        let (w, h, planes) = (rng.gen_range(1..8), rng.gen_range(1..8), rng.gen_range(2..5));
        let count = rng.gen_range(1..5);
        let frames = rng.gen_range(1..3);
        let sets: Vec<PredictionSet> = (0..count)
            .map(|i| {
                let vols = (0..frames).map(|_| random_volume(&mut rng, w, h, planes)).collect();
                PredictionSet::new(format!("s{i}"), vols, 1.0, false).unwrap()
            })
            .collect();
        let avg = fuse_average(&sets).map_err(|e| e.to_string())?;
        let max = fuse_max(&sets).map_err(|e| e.to_string())?;
        for v in avg.iter().chain(&max) {
            let e = v.max_normalization_error();
            check(e <= 1e-9, || format!("trial {n}: normalization error {e:.3e}"))?;
        }
        let mut shuffled = sets.clone();
        shuffled.shuffle(&mut rng);
        check(fuse_average(&shuffled).unwrap() == avg, || format!("trial {n}: average depends on order"))?;
        check(fuse_max(&shuffled).unwrap() == max, || format!("trial {n}: max depends on order"))?;

        let copies: Vec<PredictionSet> = (0..count)
            .map(|i| PredictionSet::new(format!("c{i}"), sets[0].volumes.clone(), 1.0, false).unwrap())
            .collect();
        check(fuse_average(&copies).unwrap() == sets[0].volumes, || format!("trial {n}: average not idempotent"))?;

        let flipped: Vec<ProbabilityVolume> = sets[0].volumes.iter().map(|v| v.flip_horizontal()).collect();
        let flipped = PredictionSet::new("f", flipped, 1.0, true).unwrap();
        let restored = normalize_prediction(&flipped, w, h).map_err(|e| e.to_string())?;
        for (a, b) in restored.volumes.iter().zip(&sets[0].volumes) {
            let d = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            check(d <= 1e-12, || format!("trial {n}: flip round trip deviates by {d:.3e}"))?;
        }
    }

    let mut spec = SyntheticSpec::moving_square(48, 40, 16, 12, [1.0, 0.5], 11);
    spec.shapes[0].texture = 0.2;
    let clip = gen_synthetic(&spec).map_err(|e| e.to_string())?;
    let good: Vec<_> = clip.masks.iter().map(|m| ProbabilityVolume::one_hot(m, 2).unwrap()).collect();
    let bad: Vec<_> = clip.masks.iter().map(|m| ProbabilityVolume::one_hot(&shift_right(m, 4), 2).unwrap()).collect();
    let sets = vec![
        PredictionSet::new("clean", good, 1.0, false).unwrap(),
        PredictionSet::new("corrupted", bad, 1.0, false).unwrap(),
    ];
    let voted = fuse_keypoint_voting(&sets, &clip.frames, &NccMatcher::default()).map_err(|e| e.to_string())?;
    let lower = voted.weights.iter().filter(|w| w[1] < w[0]).count();
    let frames = voted.weights.len();
    check(lower as f64 >= 0.9 * frames as f64, || format!("corrupted source down-weighted on {lower}/{frames} frames"))?;
    Ok(format!("{trials} randomized trials; corrupted source down-weighted on {lower}/{frames} frames"))
}

// ---------------------------------------------------------------- 7

fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize) -> LabelMask {
    let mut m = LabelMask::background(w, h).unwrap();
    match rng.gen_range(0..4) {
        0 => {}
        1 => {
            for y in 0..h {
                for x in 0..w {
                    m.set(x, y, rng.gen_range(0..3));
                }
            }
        }
        _ => {
            for _ in 0..rng.gen_range(1..5) {
                let (x0, y0) = (rng.gen_range(0..w), rng.gen_range(0..h));
                let (rw, rh) = (rng.gen_range(1..=w - x0), rng.gen_range(1..=h - y0));
                let id = rng.gen_range(1..3);
                for y in y0..y0 + rh {
                    for x in x0..x0 + rw {
                        m.set(x, y, id);
                    }
                }
            }
        }
    }
    m
}

fn brute_boundary(m: &LabelMask, id: u8) -> Vec<(i64, i64)> {
    let (w, h) = (m.width() as i64, m.height() as i64);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if m.get(x as usize, y as usize) != id {
                continue;
            }
            let edge = [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dx, dy)| {
                let (nx, ny) = (x + dx, y + dy);
                nx >= 0 && ny >= 0 && nx < w && ny < h && m.get(nx as usize, ny as usize) != id
            });
            if edge {
                out.push((x, y));
            }
        }
    }
    out
}

fn brute_f(pred: &LabelMask, gt: &LabelMask, id: u8, tol: i64) -> f64 {
    let (pb, gb) = (brute_boundary(pred, id), brute_boundary(gt, id));
    if pb.is_empty() && gb.is_empty() {
        return 1.0;
    }
    let near = |a: &(i64, i64), set: &[(i64, i64)]| set.iter().any(|b| (a.0 - b.0).abs().max((a.1 - b.1).abs()) <= tol);
    let precision =
        if pb.is_empty() { 0.0 } else { pb.iter().filter(|p| near(p, &gb)).count() as f64 / pb.len() as f64 };
    let recall = if gb.is_empty() { 0.0 } else { gb.iter().filter(|g| near(g, &pb)).count() as f64 / gb.len() as f64 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pairs = 1000;
    let mut worst_f: f64 = 0.0;
    for n in 0..pairs {
        let pred = random_mask(&mut rng, 32, 32);
        let gt = random_mask(&mut rng, 32, 32);
        let id = rng.gen_range(1..3);
        let tol = rng.gen_range(0..5);
        let inter = pred.labels().iter().zip(gt.labels()).filter(|(p, g)| **p == id && **g == id).count();
        let union = pred.labels().iter().zip(gt.labels()).filter(|(p, g)| **p == id || **g == id).count();
        let want_j = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        let got_j = jaccard(&pred, &gt, id).map_err(|e| e.to_string())?;
        check(got_j == want_j, || format!("pair {n}: J {got_j} vs {want_j}"))?;
        let got_f = boundary_f(&pred, &gt, id, tol).map_err(|e| e.to_string())?;
        let want_f = brute_f(&pred, &gt, id, tol as i64);
        worst_f = worst_f.max((got_f - want_f).abs());
        check((got_f - want_f).abs() <= 1e-9, || format!("pair {n}: F {got_f} vs {want_f}"))?;
    }
    let empty = LabelMask::background(32, 32).unwrap();
    let mut one = empty.clone();
    one.set(3, 4, 1);
    check(jaccard(&empty, &empty, 1).unwrap() == 1.0, || "both-empty J is not 1".into())?;
    check(boundary_f(&empty, &empty, 1, 0).unwrap() == 1.0, || "both-empty F is not 1".into())?;
    check(jaccard(&empty, &one, 1).unwrap() == 0.0, || "empty vs non-empty J is not 0".into())?;
    check(boundary_f(&empty, &one, 1, 3).unwrap() == 0.0, || "empty vs non-empty F is not 0".into())?;
    Ok(format!("{pairs} pairs, J exact, max F deviation {worst_f:.2e}; both-empty scores 1"))
}

// ---------------------------------------------------------------- 8

struct NoisySegmenter(u64);

impl Segmenter for NoisySegmenter {
    fn segment(&self, frame: &Frame, _hint: &LabelMask) -> vostk_core::Result<LabelMask> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.0);
        let labels = (0..frame.width() * frame.height()).map(|_| rng.gen_range(0..6u8)).collect();
        LabelMask::new(frame.width(), frame.height(), labels)
    }
}

fn noise_frame(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Frame {
    let data = (0..w * h * 3).map(|_| rng.gen_range(0..=255u32) as f64 / 255.0).collect();
    Frame::new(w, h, data).unwrap()
}

fn postprocess_locality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (w, h) = (10, 8);
    let frame = noise_frame(&mut rng, w, h);
    let labels = (0..w * h).map(|_| if rng.gen_bool(0.3) { rng.gen_range(1..3) } else { 0 }).collect();
    let mask = LabelMask::new(w, h, labels).unwrap();
    let present: BTreeSet<u8> = mask.labels().iter().copied().collect();

    let mut boxes = 0;
    for (x, y) in (0..h).flat_map(|y| (0..w).map(move |x| (x, y))) {
        for (bw, bh) in (1..=w - x).flat_map(|bw| (1..=h - y).map(move |bh| (bw, bh))) {
            boxes += 1;
            let b = TrackBox { object_id: 3, frame_index: 0, x, y, w: bw, h: bh };
            for zoom in [1, 3] {
                let cfg = ZoomConfig { zoom, ..ZoomConfig::default() };
                let same = crop_then_zoom(&frame, &b, &mask, &IdentitySegmenter, &cfg).map_err(|e| e.to_string())?;
                check(same.mask == mask, || format!("identity zoom {zoom} changed box {b:?}"))?;
            }
            let cfg = ZoomConfig { zoom: 2, ..ZoomConfig::default() };
            let out = crop_then_zoom(&frame, &b, &mask, &NoisySegmenter(boxes), &cfg).map_err(|e| e.to_string())?;
            let region = out.region.ok_or_else(|| format!("no region for {b:?}"))?;
            check(region.contains(x, y) && region.contains(x + bw - 1, y + bh - 1), || format!("region misses {b:?}"))?;
            for (px, py) in (0..h).flat_map(|py| (0..w).map(move |px| (px, py))) {
                let l = out.mask.get(px, py);
                check(present.contains(&l) || l == 0 || l == 3, || format!("box {b:?}: foreign label {l}"))?;
                if !region.contains(px, py) {
                    check(l == mask.get(px, py), || format!("box {b:?}: pixel ({px},{py}) changed outside"))?;
                }
            }
        }
    }

    let mut patches = 0;
    for size in 3..=5 {
        for (x, y) in (0..=h - size).flat_map(|y| (0..=w - size).map(move |x| (x, y))) {
            for object_id in 1..3 {
                patches += 1;
                let p = BoundaryPatch { x, y, size, object_id };
                let bits: Vec<bool> = (0..size * size).map(|_| rng.gen_bool(0.5)).collect();
                let out = stitch_patches(&mask, &[(p, bits)]).map_err(|e| e.to_string())?;
                let keep: Vec<bool> =
                    (0..size * size).map(|i| mask.get(x + i % size, y + i / size) == object_id).collect();
                let same = stitch_patches(&mask, &[(p, keep)]).map_err(|e| e.to_string())?;
                check(same == mask, || format!("unchanged patch {p:?} altered the mask"))?;
                for (px, py) in (0..h).flat_map(|py| (0..w).map(move |px| (px, py))) {
                    if !p.rect().contains(px, py) {
                        check(out.get(px, py) == mask.get(px, py), || format!("patch {p:?}: pixel ({px},{py}) changed"))?;
                    }
                }
            }
        }
    }

    let mut refinements = 0;
    for seed in 0..40u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (24, 20);
        let mut m = LabelMask::background(w, h).unwrap();
        for _ in 0..3 {
            let r = Rect::new(rng.gen_range(0..w - 6), rng.gen_range(0..h - 6), rng.gen_range(2..7), rng.gen_range(2..7));
            let id = rng.gen_range(1..3);
            for y in r.y..r.y + r.h {
                for x in r.x..r.x + r.w {
                    m.set(x, y, id);
                }
            }
        }
        let frame = noise_frame(&mut rng, w, h);
        let cfg = BoundaryConfig::default();
        let one_hot = ProbabilityVolume::one_hot(&m, 3).unwrap();
        let fixed = refine_boundaries(&frame, &one_hot, &m, &cfg, &OtsuRefiner).map_err(|e| e.to_string())?;
        check(fixed == m, || format!("seed {seed}: one-hot refinement is not a no-op"))?;
        let noisy = random_volume(&mut rng, w, h, 3);
        let out = refine_boundaries(&frame, &noisy, &m, &cfg, &OtsuRefiner).map_err(|e| e.to_string())?;
        let cover: Vec<Rect> = extract_boundary_patches(&m, cfg.patch_size, cfg.stride)
            .map_err(|e| e.to_string())?
            .iter()
            .map(BoundaryPatch::rect)
            .collect();
        for (px, py) in (0..h).flat_map(|py| (0..w).map(move |px| (px, py))) {
            if !cover.iter().any(|r| r.contains(px, py)) {
                check(out.get(px, py) == m.get(px, py), || format!("seed {seed}: pixel ({px},{py}) changed"))?;
            }
        }
        let frames = vec![frame.clone(); 3];
        let masks = vec![m.clone(); 3];
        let cfg = ZoomConfig { area_threshold: usize::MAX, ..ZoomConfig::default() };
        let same = zoom_refine_sequence(&frames, &masks, &cfg, &IdentitySegmenter).map_err(|e| e.to_string())?;
        check(same.masks == masks, || format!("seed {seed}: identity zoom over the clip changed masks"))?;
        refinements += 1;
    }
    Ok(format!("{boxes} zoom boxes, {patches} stitch patches, {refinements} refinement masks"))
}

// ---------------------------------------------------------------- 9

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn run_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let input = tmp.path().join("clip");
    let mut spec = SyntheticSpec::moving_square(32, 24, 8, 8, [1.0, 0.5], 9);
    spec.shapes[0].texture = 0.2;
    let clip = gen_synthetic(&spec).map_err(|e| e.to_string())?;
    write_clip(&input, &clip).map_err(|e| e.to_string())?;
    let config = PipelineConfig { fusion: FusionMode::KeypointVote, seed: 17, ..PipelineConfig::default() };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_video(&config, &input, &a).map_err(|e| e.to_string())?;
    run_video(&config, &input, &b).map_err(|e| e.to_string())?;
    let (ta, tb) = (tree(&a), tree(&b));
    check(!ta.is_empty(), || "empty output tree".into())?;
    let names = |t: &[(String, Vec<u8>)]| t.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>();
    check(names(&ta) == names(&tb), || "output trees list different files".into())?;
    if let Some((name, _)) = ta.iter().zip(&tb).find(|(x, y)| x.1 != y.1).map(|(x, _)| x) {
        return Err(format!("{name} differs between runs"));
    }
    Ok(format!("{} files bit-identical", ta.len()))
}
