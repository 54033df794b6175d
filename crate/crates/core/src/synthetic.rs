//! Deterministic synthetic clips with exact ground truth.
//!
//! Rectangles move linearly and may resize linearly over the clip; they are
//! drawn in ascending `z` order over a static noise-textured background. Every
//! colour is quantised to 8 bits so clips survive a PNG round trip unchanged.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VosError};
use crate::frame::{Frame, LabelMask, Rect};
use crate::io::{write_frame, write_mask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub id: u8,
    pub color: [f64; 3],
    /// Centre at frame 0.
    pub center: [f64; 2],
    /// Centre displacement per frame.
    #[serde(default)]
    pub velocity: [f64; 2],
    /// Width and height at frame 0.
    pub size: [usize; 2],
    /// Width and height at the last frame; linear in between.
    #[serde(default)]
    pub end_size: Option<[usize; 2]>,
    #[serde(default)]
    pub z: i32,
    /// Amplitude of a per-pixel texture that moves with the shape.
    #[serde(default)]
    pub texture: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub seed: u64,
    pub background: [f64; 3],
    /// Half-range of the uniform background texture.
    #[serde(default)]
    pub background_noise: f64,
    pub shapes: Vec<ShapeSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClip {
    pub frames: Vec<Frame>,
    pub masks: Vec<LabelMask>,
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

impl ShapeSpec {
    pub fn size_at(&self, t: usize, frames: usize) -> [usize; 2] {
        let Some(end) = self.end_size else { return self.size };
        if frames <= 1 {
            return self.size;
        }
        let f = t as f64 / (frames - 1) as f64;
        [0, 1].map(|a| (self.size[a] as f64 + (end[a] as f64 - self.size[a] as f64) * f).round() as usize)
    }

    /// Rectangle covered at frame `t` (may lie partly outside the frame).
    pub fn rect_at(&self, t: usize, frames: usize) -> (i64, i64, usize, usize) {
        let [w, h] = self.size_at(t, frames);
        let cx = self.center[0] + self.velocity[0] * t as f64;
        let cy = self.center[1] + self.velocity[1] * t as f64;
        let x0 = (cx - w as f64 / 2.0).round() as i64;
        let y0 = (cy - h as f64 / 2.0).round() as i64;
        (x0, y0, w, h)
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.frames == 0 {
            return Err(VosError::Spec("clip must have positive size and frame count".into()));
        }
        for shape in &self.shapes {
            if shape.id == 0 {
                return Err(VosError::Spec("shape id 0 is reserved for background".into()));
            }
            for t in 0..self.frames {
                let (x, y, w, h) = shape.rect_at(t, self.frames);
                if w == 0 || h == 0 || x < 0 || y < 0 || x as usize + w > self.width || y as usize + h > self.height {
                    return Err(VosError::Spec(format!(
                        "shape {} leaves the {}x{} frame at t={t}: origin ({x},{y}) size {w}x{h}",
                        shape.id, self.width, self.height
                    )));
                }
            }
        }
        Ok(())
    }

    /// One square of side `size` over a gray textured background.
    pub fn moving_square(width: usize, height: usize, frames: usize, size: usize, velocity: [f64; 2], seed: u64) -> Self {
        Self {
            width,
            height,
            frames,
            seed,
            background: [0.25, 0.3, 0.35],
            background_noise: 0.08,
            shapes: vec![ShapeSpec {
                id: 1,
                color: [0.9, 0.2, 0.1],
                center: [width as f64 / 4.0 + size as f64 / 2.0, height as f64 / 3.0 + size as f64 / 2.0],
                velocity,
                size: [size, size],
                end_size: None,
                z: 0,
                texture: 0.0,
            }],
        }
    }

    /// A square whose side shrinks linearly from `start` to `end` pixels.
    pub fn shrinking_square(width: usize, height: usize, frames: usize, start: usize, end: usize, seed: u64) -> Self {
        let mut spec = Self::moving_square(width, height, frames, start, [0.0, 0.0], seed);
        spec.shapes[0].center = [width as f64 / 2.0 + 0.5, height as f64 / 2.0 + 0.5];
        spec.shapes[0].end_size = Some([end, end]);
        spec
    }
}

/// Renders `spec` into frames and ground-truth masks.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticClip> {
    spec.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
    let background: Vec<[f64; 3]> = (0..spec.width * spec.height)
        .map(|_| {
            let n: f64 = if spec.background_noise > 0.0 {
                rng.gen_range(-spec.background_noise..=spec.background_noise)
            } else {
                0.0
            };
            spec.background.map(|c| quantize(c + n))
        })
        .collect();
    // Texture tables indexed by shape-local coordinates, large enough for any size.
    let textures: Vec<Vec<f64>> = spec
        .shapes
        .iter()
        .map(|s| {
            let side = s.size[0].max(s.size[1]).max(s.end_size.map_or(0, |e| e[0].max(e[1])));
            (0..side * side)
                .map(|_| if s.texture > 0.0 { rng.gen_range(-s.texture..=s.texture) } else { 0.0 })
                .collect()
        })
        .collect();
    let mut order: Vec<usize> = (0..spec.shapes.len()).collect();
    order.sort_by_key(|&i| (spec.shapes[i].z, i));

    let mut clip = SyntheticClip { frames: Vec::with_capacity(spec.frames), masks: Vec::with_capacity(spec.frames) };
    for t in 0..spec.frames {
        let mut frame = Frame::filled(spec.width, spec.height, [0.0; 3])?;
        for y in 0..spec.height {
            for x in 0..spec.width {
                frame.set_pixel(x, y, background[y * spec.width + x]);
            }
        }
        let mut mask = LabelMask::background(spec.width, spec.height)?;
        for &i in &order {
            let shape = &spec.shapes[i];
            let (x0, y0, w, h) = shape.rect_at(t, spec.frames);
            let side = shape.size[0].max(shape.size[1]).max(shape.end_size.map_or(0, |e| e[0].max(e[1])));
            for dy in 0..h {
                for dx in 0..w {
                    let (x, y) = (x0 as usize + dx, y0 as usize + dy);
                    let tex = textures[i][(dy % side) * side + dx % side];
                    frame.set_pixel(x, y, shape.color.map(|c| quantize(c + tex)));
                    mask.set(x, y, shape.id);
                }
            }
        }
        clip.frames.push(frame);
        clip.masks.push(mask);
    }
    Ok(clip)
}

/// Rectangle of `shape` at frame `t`, clipped to non-negative coordinates.
pub fn shape_rect(shape: &ShapeSpec, t: usize, frames: usize) -> Rect {
    let (x, y, w, h) = shape.rect_at(t, frames);
    Rect::new(x.max(0) as usize, y.max(0) as usize, w, h)
}

/// Writes a clip as `frames/NNNNN.png`, `gt/NNNNN.png` and `first_mask.png`.
pub fn write_clip(dir: &Path, clip: &SyntheticClip) -> Result<()> {
    let frames_dir = dir.join("frames");
    let gt_dir = dir.join("gt");
    for d in [&frames_dir, &gt_dir] {
        fs::create_dir_all(d).map_err(|e| VosError::io(d, e))?;
    }
    for (t, (frame, mask)) in clip.frames.iter().zip(&clip.masks).enumerate() {
        write_frame(&frames_dir.join(format!("{t:05}.png")), frame)?;
        write_mask(&gt_dir.join(format!("{t:05}.png")), mask)?;
    }
    if let Some(first) = clip.masks.first() {
        write_mask(&dir.join("first_mask.png"), first)?;
    }
    Ok(())
}
