use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vostk_core::frame::{Frame, LabelMask, Rect};
use vostk_core::postprocess::{
    crop_then_zoom, extract_boundary_patches, refine_patch, small_object_select, stitch_patches, track_box,
    BoundaryPatch, IdentitySegmenter, OtsuRefiner, PatchCrop, Segmenter, TrackBox, TrackConfig, TrackOutcome,
    ZoomConfig,
};
use vostk_core::Result;

fn square_mask(w: usize, h: usize, r: Rect, id: u8) -> LabelMask {
    let mut m = LabelMask::background(w, h).unwrap();
    for y in r.y..r.y + r.h {
        for x in r.x..r.x + r.w {
            m.set(x, y, id);
        }
    }
    m
}

fn noise_frame(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Frame {
    let data = (0..w * h * 3).map(|_| rng.gen_range(0..=255u32) as f64 / 255.0).collect();
    Frame::new(w, h, data).unwrap()
}

fn translate(frame: &Frame, dx: usize, dy: usize) -> Frame {
    let mut out = frame.clone();
    for y in dy..frame.height() {
        for x in dx..frame.width() {
            out.set_pixel(x, y, frame.pixel(x - dx, y - dy));
        }
    }
    out
}

/// Returns a random label mask for every pixel of the crop.
struct NoisySegmenter(u64);

impl Segmenter for NoisySegmenter {
    fn segment(&self, frame: &Frame, _hint: &LabelMask) -> Result<LabelMask> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.0);
        let labels = (0..frame.width() * frame.height()).map(|_| rng.gen_range(0..6u8)).collect();
        LabelMask::new(frame.width(), frame.height(), labels)
    }
}

#[test]
fn ring_tiling_matches_hand_enumeration() {
    let m = square_mask(8, 8, Rect::new(2, 2, 4, 4), 1);
    let got: BTreeSet<(usize, usize)> =
        extract_boundary_patches(&m, 3, 3).unwrap().iter().map(|p| (p.x, p.y)).collect();
    let expected: BTreeSet<(usize, usize)> = [(1, 1), (3, 1), (1, 3), (4, 3)].into_iter().collect();
    assert_eq!(got, expected);
    let ring: Vec<(usize, usize)> = (0..8)
        .flat_map(|y| (0..8).map(move |x| (x, y)))
        .filter(|&(x, y)| (2..6).contains(&x) && (2..6).contains(&y) && (x == 2 || x == 5 || y == 2 || y == 5))
        .collect();
    assert_eq!(ring.len(), 12);
    for (x, y) in ring {
        assert!(got.iter().any(|&(px, py)| (px..px + 3).contains(&x) && (py..py + 3).contains(&y)));
    }
}

#[test]
fn step_edge_snaps_to_intensity() {
    let size = 8;
    let mut image = Frame::filled(size, size, [0.2; 3]).unwrap();
    for y in 0..size {
        for x in 5..size {
            image.set_pixel(x, y, [0.8; 3]);
        }
    }
    let crop = PatchCrop { patch: BoundaryPatch { x: 0, y: 0, size, object_id: 1 }, image, prob: vec![0.5; size * size] };
    let out = refine_patch(&crop, &OtsuRefiner).unwrap();
    for y in 0..size {
        let first = (0..size).find(|&x| out[y * size + x]).unwrap();
        assert!(first.abs_diff(5) <= 1, "row {y} starts at {first}");
        assert!((first..size).all(|x| out[y * size + x]));
    }
}

#[test]
fn overlapping_disagreement_keeps_original() {
    let m = square_mask(8, 8, Rect::new(2, 2, 4, 4), 1);
    let crop_of = |p: BoundaryPatch| -> Vec<bool> {
        (0..p.size * p.size).map(|i| m.get(p.x + i % p.size, p.y + i / p.size) == 1).collect()
    };
    let a = BoundaryPatch { x: 1, y: 1, size: 3, object_id: 1 };
    let b = BoundaryPatch { x: 2, y: 1, size: 3, object_id: 1 };
    let mut ca = crop_of(a);
    let cb = crop_of(b);
    ca[4] = !ca[4];
    assert_eq!(stitch_patches(&m, &[(a, ca), (b, cb)]).unwrap(), m);
}

#[test]
fn static_frames_keep_the_box() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = noise_frame(&mut rng, 32, 32);
    let b = TrackBox { object_id: 1, frame_index: 0, x: 10, y: 12, w: 6, h: 5 };
    let out = track_box(&b, None, &f, &f, &TrackConfig::default()).unwrap();
    assert_eq!(out, TrackOutcome::Tracked(TrackBox { frame_index: 1, ..b }));
}

#[test]
fn translation_is_recovered_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let prev = noise_frame(&mut rng, 40, 32);
    let cur = translate(&prev, 3, 1);
    let b = TrackBox { object_id: 1, frame_index: 4, x: 12, y: 10, w: 8, h: 8 };
    let cur_mask = square_mask(40, 32, Rect::new(15, 11, 8, 8), 1);
    let out = track_box(&b, Some(&cur_mask), &cur, &prev, &TrackConfig::default()).unwrap();
    assert_eq!(out, TrackOutcome::Tracked(TrackBox { frame_index: 5, x: 15, y: 11, ..b }));
}

#[test]
fn occlusion_loses_the_track() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let prev = noise_frame(&mut rng, 32, 32);
    let cur = noise_frame(&mut rng, 32, 32);
    let b = TrackBox { object_id: 1, frame_index: 0, x: 10, y: 10, w: 8, h: 8 };
    assert_eq!(track_box(&b, None, &cur, &prev, &TrackConfig::default()).unwrap(), TrackOutcome::Lost);
    let flat = Frame::filled(32, 32, [0.4; 3]).unwrap();
    assert_eq!(track_box(&b, None, &flat, &flat, &TrackConfig::default()).unwrap(), TrackOutcome::Lost);
}

#[test]
fn zoom_one_identity_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let frame = noise_frame(&mut rng, 24, 20);
    let labels = (0..24 * 20).map(|_| rng.gen_range(0..3u8)).collect();
    let mask = LabelMask::new(24, 20, labels).unwrap();
    let b = TrackBox { object_id: 1, frame_index: 0, x: 5, y: 4, w: 7, h: 6 };
    let cfg = ZoomConfig { zoom: 1, ..ZoomConfig::default() };
    assert_eq!(crop_then_zoom(&frame, &b, &mask, &IdentitySegmenter, &cfg).unwrap().mask, mask);
    let cfg4 = ZoomConfig { zoom: 4, ..ZoomConfig::default() };
    assert_eq!(crop_then_zoom(&frame, &b, &mask, &IdentitySegmenter, &cfg4).unwrap().mask, mask);
}

#[test]
fn shrinking_object_is_flagged_for_the_small_frames_only() {
    let sides = [10usize, 9, 8, 7, 6, 5, 4, 3, 2, 2];
    let masks: Vec<LabelMask> =
        sides.iter().map(|&s| square_mask(32, 32, Rect::new(4, 4, s, s), 1)).collect();
    let threshold = 40;
    let flagged: Vec<usize> = masks.iter().enumerate().filter(|(_, m)| m.area(1) < threshold).map(|(t, _)| t).collect();
    let sel = small_object_select(&masks, threshold).unwrap();
    assert_eq!(sel.len(), 1);
    let expanded: Vec<usize> = sel[0].ranges.iter().flat_map(|&(a, b)| a..=b).collect();
    assert_eq!(expanded, flagged);
    assert_eq!(sel[0].ranges, vec![(4, 9)]);
}

proptest! {
    #[test]
    fn stitching_is_local(seed in any::<u64>(), n in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (12, 10);
        let labels = (0..w * h).map(|_| rng.gen_range(0..3u8)).collect();
        let mask = LabelMask::new(w, h, labels).unwrap();
        let refined: Vec<(BoundaryPatch, Vec<bool>)> = (0..n)
            .map(|_| {
                let size = rng.gen_range(3..=5);
                let p = BoundaryPatch { x: rng.gen_range(0..=w - size), y: rng.gen_range(0..=h - size), size, object_id: rng.gen_range(1..3) };
                (p, (0..size * size).map(|_| rng.gen_bool(0.5)).collect())
            })
            .collect();
        let out = stitch_patches(&mask, &refined).unwrap();
        let present: BTreeSet<u8> = mask.labels().iter().copied().chain([0]).collect();
        for y in 0..h {
            for x in 0..w {
                prop_assert!(present.contains(&out.get(x, y)));
                if !refined.iter().any(|(p, _)| p.rect().contains(x, y)) {
                    prop_assert_eq!(out.get(x, y), mask.get(x, y));
                }
            }
        }
    }

    #[test]
    fn zoom_is_local_and_label_closed(seed in any::<u64>(), zoom in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (16, 14);
        let frame = noise_frame(&mut rng, w, h);
        let labels = (0..w * h).map(|_| if rng.gen_bool(0.2) { 2 } else { 0 }).collect();
        let mask = LabelMask::new(w, h, labels).unwrap();
        let b = TrackBox { object_id: 1, frame_index: 0, x: rng.gen_range(0..w), y: rng.gen_range(0..h), w: rng.gen_range(1..6), h: rng.gen_range(1..6) };
        let cfg = ZoomConfig { zoom, ..ZoomConfig::default() };
        let out = crop_then_zoom(&frame, &b, &mask, &NoisySegmenter(seed), &cfg).unwrap();
        let region = out.region.unwrap();
        for y in 0..h {
            for x in 0..w {
                let l = out.mask.get(x, y);
                prop_assert!([0u8, 1, 2].contains(&l));
                if !region.contains(x, y) {
                    prop_assert_eq!(l, mask.get(x, y));
                }
            }
        }
    }

    #[test]
    fn patch_extraction_is_translation_equivariant(seed in any::<u64>(), dx in 0usize..4, dy in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (30, 30);
        let mut mask = LabelMask::background(w, h).unwrap();
        for _ in 0..3 {
            let (x0, y0) = (rng.gen_range(8..14), rng.gen_range(8..14));
            let (rw, rh) = (rng.gen_range(1..6), rng.gen_range(1..6));
            let id = rng.gen_range(1..3);
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    mask.set(x, y, id);
                }
            }
        }
        let mut moved = LabelMask::background(w, h).unwrap();
        for y in 0..h - dy {
            for x in 0..w - dx {
                moved.set(x + dx, y + dy, mask.get(x, y));
            }
        }
        let a: Vec<BoundaryPatch> = extract_boundary_patches(&mask, 5, 3).unwrap();
        let b: Vec<BoundaryPatch> = extract_boundary_patches(&moved, 5, 3).unwrap();
        let shifted: BTreeSet<BoundaryPatch> = a.iter().map(|p| BoundaryPatch { x: p.x + dx, y: p.y + dy, ..*p }).collect();
        prop_assert_eq!(shifted, b.into_iter().collect::<BTreeSet<_>>());
    }
}
