//! Frames, label masks and probability volumes, plus the resampling helpers
//! shared by propagation, fusion and post-processing.

use std::collections::BTreeSet;

use crate::error::{Result, VosError};

/// RGB frame with channel values in `[0, 1]`, interleaved row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(VosError::shape("frame must be at least 1x1"));
        }
        if data.len() != width * height * 3 {
            return Err(VosError::shape(format!(
                "frame data has {} values, expected {}",
                data.len(),
                width * height * 3
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(VosError::Domain("frame values must lie in [0, 1]".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb.map(|v| v.clamp(0.0, 1.0)));
    }

    /// Mean of the three channels.
    pub fn intensity(&self, x: usize, y: usize) -> f64 {
        let [r, g, b] = self.pixel(x, y);
        (r + g + b) / 3.0
    }

    pub fn crop(&self, rect: Rect) -> Result<Frame> {
        rect.check_inside(self.width, self.height)?;
        let mut data = Vec::with_capacity(rect.w * rect.h * 3);
        for y in rect.y..rect.y + rect.h {
            let start = (y * self.width + rect.x) * 3;
            data.extend_from_slice(&self.data[start..start + rect.w * 3]);
        }
        Ok(Frame { width: rect.w, height: rect.h, data })
    }

    pub fn flip_horizontal(&self) -> Frame {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                data.extend_from_slice(&self.pixel(x, y));
            }
        }
        Frame { width: self.width, height: self.height, data }
    }

    /// Bilinear resize; identical sizes return an exact copy.
    pub fn resize(&self, width: usize, height: usize) -> Result<Frame> {
        if width == 0 || height == 0 {
            return Err(VosError::shape("resize target must be at least 1x1"));
        }
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let data = resize_bilinear_interleaved(&self.data, self.width, self.height, 3, width, height);
        Ok(Frame { width, height, data: data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect() })
    }

    /// Averages non-overlapping `stride × stride` blocks (partial blocks at the edges included).
    pub fn downsample_mean(&self, stride: usize) -> Result<Frame> {
        if stride == 0 {
            return Err(VosError::config("downsample stride must be at least 1"));
        }
        if stride == 1 {
            return Ok(self.clone());
        }
        let (w, h) = (self.width.div_ceil(stride), self.height.div_ceil(stride));
        let mut data = Vec::with_capacity(w * h * 3);
        for by in 0..h {
            for bx in 0..w {
                let mut acc = [0.0; 3];
                let mut n = 0.0;
                for y in by * stride..((by + 1) * stride).min(self.height) {
                    for x in bx * stride..((bx + 1) * stride).min(self.width) {
                        let p = self.pixel(x, y);
                        acc.iter_mut().zip(p).for_each(|(a, v)| *a += v);
                        n += 1.0;
                    }
                }
                data.extend(acc.map(|a| a / n));
            }
        }
        Ok(Frame { width: w, height: h, data })
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && y >= self.y && x < self.x + self.w && y < self.y + self.h
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn check_inside(&self, width: usize, height: usize) -> Result<()> {
        if self.w == 0 || self.h == 0 || self.x + self.w > width || self.y + self.h > height {
            return Err(VosError::shape(format!(
                "rect {self:?} does not fit inside {width}x{height}"
            )));
        }
        Ok(())
    }

    /// Smallest rectangle containing both.
    pub fn union(&self, other: &Rect) -> Rect {
        let x0 = self.x.min(other.x);
        let y0 = self.y.min(other.y);
        let x1 = (self.x + self.w).max(other.x + other.w);
        let y1 = (self.y + self.h).max(other.y + other.h);
        Rect::new(x0, y0, x1 - x0, y1 - y0)
    }
}

/// Integer object labels; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMask {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(VosError::shape("mask must be at least 1x1"));
        }
        if labels.len() != width * height {
            return Err(VosError::shape(format!(
                "mask has {} labels, expected {}",
                labels.len(),
                width * height
            )));
        }
        Ok(Self { width, height, labels })
    }

    pub fn background(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![0; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, label: u8) {
        self.labels[y * self.width + x] = label;
    }

    pub fn same_shape(&self, other: &LabelMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_same_shape(&self, other: &LabelMask) -> Result<()> {
        if !self.same_shape(other) {
            return Err(VosError::shape(format!(
                "mask sizes differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// Non-zero labels present, ascending.
    pub fn object_ids(&self) -> Vec<u8> {
        self.labels.iter().copied().filter(|&l| l != 0).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn area(&self, id: u8) -> usize {
        self.labels.iter().filter(|&&l| l == id).count()
    }

    pub fn binary(&self, id: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == id).collect()
    }

    /// Tight bounding box of `id`, if present.
    pub fn bbox(&self, id: u8) -> Option<Rect> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) == id {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0 != usize::MAX).then(|| Rect::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1))
    }

    pub fn crop(&self, rect: Rect) -> Result<LabelMask> {
        rect.check_inside(self.width, self.height)?;
        let mut labels = Vec::with_capacity(rect.area());
        for y in rect.y..rect.y + rect.h {
            let start = y * self.width + rect.x;
            labels.extend_from_slice(&self.labels[start..start + rect.w]);
        }
        Ok(LabelMask { width: rect.w, height: rect.h, labels })
    }

    pub fn flip_horizontal(&self) -> LabelMask {
        let mut labels = Vec::with_capacity(self.labels.len());
        for row in self.labels.chunks(self.width) {
            labels.extend(row.iter().rev());
        }
        LabelMask { width: self.width, height: self.height, labels }
    }

    /// Nearest-neighbour resize using pixel-centre alignment.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Result<LabelMask> {
        if width == 0 || height == 0 {
            return Err(VosError::shape("resize target must be at least 1x1"));
        }
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let mut labels = Vec::with_capacity(width * height);
        for y in 0..height {
            let sy = nearest_source(y, height, self.height);
            for x in 0..width {
                labels.push(self.get(nearest_source(x, width, self.width), sy));
            }
        }
        Ok(LabelMask { width, height, labels })
    }

    /// Shrinks by an integer factor, each output pixel taking the most frequent
    /// label of its block (ties go to the lowest non-zero label, then background).
    pub fn downsample_mode(&self, factor: usize, width: usize, height: usize) -> Result<LabelMask> {
        if factor == 0 {
            return Err(VosError::config("mode-downsample factor must be positive"));
        }
        let mut labels = Vec::with_capacity(width * height);
        let mut counts = [0usize; 256];
        for by in 0..height {
            for bx in 0..width {
                counts.iter_mut().for_each(|c| *c = 0);
                for y in by * factor..((by + 1) * factor).min(self.height) {
                    for x in bx * factor..((bx + 1) * factor).min(self.width) {
                        counts[self.get(x, y) as usize] += 1;
                    }
                }
                let mut best = 0usize;
                for l in 1..256 {
                    if counts[l] > counts[best] || (best == 0 && counts[l] == counts[0] && counts[l] > 0) {
                        best = l;
                    }
                }
                labels.push(best as u8);
            }
        }
        LabelMask::new(width, height, labels)
    }

    /// Copies `patch` into `self` with its top-left corner at `(x, y)`.
    pub fn paste(&mut self, patch: &LabelMask, x: usize, y: usize) -> Result<()> {
        Rect::new(x, y, patch.width, patch.height).check_inside(self.width, self.height)?;
        for py in 0..patch.height {
            let dst = (y + py) * self.width + x;
            self.labels[dst..dst + patch.width].copy_from_slice(&patch.labels[py * patch.width..(py + 1) * patch.width]);
        }
        Ok(())
    }
}

pub(crate) fn nearest_source(dst: usize, dst_len: usize, src_len: usize) -> usize {
    let pos = (dst as f64 + 0.5) * src_len as f64 / dst_len as f64;
    (pos.floor() as usize).min(src_len - 1)
}

/// Bilinear resize of interleaved `channels`-wide samples with pixel-centre alignment.
pub(crate) fn resize_bilinear_interleaved(
    src: &[f64],
    sw: usize,
    sh: usize,
    channels: usize,
    dw: usize,
    dh: usize,
) -> Vec<f64> {
    let axis = |d: usize, dl: usize, sl: usize| -> (usize, usize, f64) {
        let pos = ((d as f64 + 0.5) * sl as f64 / dl as f64 - 0.5).clamp(0.0, (sl - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(sl - 1);
        (i0, i1, pos - i0 as f64)
    };
    let mut out = Vec::with_capacity(dw * dh * channels);
    for y in 0..dh {
        let (y0, y1, fy) = axis(y, dh, sh);
        for x in 0..dw {
            let (x0, x1, fx) = axis(x, dw, sw);
            for c in 0..channels {
                let at = |xx: usize, yy: usize| src[(yy * sw + xx) * channels + c];
                let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

/// Per-pixel distribution over background (plane 0) and object labels.
///
/// Plane `p` holds the score of label `p`; labels absent from a video simply
/// carry zero mass. Stored plane-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVolume {
    width: usize,
    height: usize,
    planes: usize,
    data: Vec<f64>,
}

/// Per-pixel sum tolerance for a valid volume.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

impl ProbabilityVolume {
    pub fn new(width: usize, height: usize, planes: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || planes == 0 {
            return Err(VosError::shape("probability volume must be non-empty"));
        }
        if data.len() != width * height * planes {
            return Err(VosError::shape(format!(
                "volume has {} values, expected {}",
                data.len(),
                width * height * planes
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < -NORMALIZATION_TOLERANCE || *v > 1.0 + NORMALIZATION_TOLERANCE) {
            return Err(VosError::Domain("probabilities must lie in [0, 1]".into()));
        }
        let vol = Self { width, height, planes, data };
        for i in 0..width * height {
            let s = vol.pixel_sum(i);
            if (s - 1.0).abs() > NORMALIZATION_TOLERANCE {
                return Err(VosError::Domain(format!("pixel {i} sums to {s}")));
            }
        }
        Ok(vol)
    }

    /// Builds a volume from unnormalised non-negative scores.
    ///
    /// Pixels whose scores are all zero become pure background.
    pub fn from_scores(width: usize, height: usize, planes: usize, mut data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * planes || planes == 0 {
            return Err(VosError::shape("score volume shape mismatch"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(VosError::Numeric("non-finite score".into()));
        }
        data.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut vol = Self { width, height, planes, data };
        vol.renormalize();
        Ok(vol)
    }

    pub fn one_hot(mask: &LabelMask, planes: usize) -> Result<Self> {
        if (mask.max_label() as usize) >= planes {
            return Err(VosError::shape(format!(
                "label {} needs more than {planes} planes",
                mask.max_label()
            )));
        }
        let n = mask.width * mask.height;
        let mut data = vec![0.0; n * planes];
        for (i, &l) in mask.labels.iter().enumerate() {
            data[l as usize * n + i] = 1.0;
        }
        Ok(Self { width: mask.width, height: mask.height, planes, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn planes(&self) -> usize {
        self.planes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, p: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[p * n..(p + 1) * n]
    }

    pub fn get(&self, p: usize, x: usize, y: usize) -> f64 {
        self.data[p * self.width * self.height + y * self.width + x]
    }

    pub fn same_shape(&self, other: &ProbabilityVolume) -> bool {
        self.width == other.width && self.height == other.height && self.planes == other.planes
    }

    fn pixel_sum(&self, i: usize) -> f64 {
        let n = self.width * self.height;
        (0..self.planes).map(|p| self.data[p * n + i]).sum()
    }

    /// Largest deviation of any pixel sum from 1.
    pub fn max_normalization_error(&self) -> f64 {
        (0..self.width * self.height).map(|i| (self.pixel_sum(i) - 1.0).abs()).fold(0.0, f64::max)
    }

    /// Rescales pixels whose sum is off by more than 1e-12; all-zero pixels become background.
    pub fn renormalize(&mut self) {
        let n = self.width * self.height;
        for i in 0..n {
            let s = self.pixel_sum(i);
            if (s - 1.0).abs() <= 1e-12 {
                continue;
            }
            if s <= 0.0 {
                for p in 0..self.planes {
                    self.data[p * n + i] = if p == 0 { 1.0 } else { 0.0 };
                }
            } else {
                for p in 0..self.planes {
                    self.data[p * n + i] /= s;
                }
            }
        }
    }

    /// Per-pixel label of the highest score. Ties go to the lowest object
    /// label; background loses ties against any object.
    pub fn argmax(&self) -> LabelMask {
        let n = self.width * self.height;
        let labels = (0..n)
            .map(|i| {
                let mut best = 0usize;
                let mut best_score = self.data[i];
                for p in 1..self.planes {
                    let s = self.data[p * n + i];
                    if s > best_score || (best == 0 && s == best_score) {
                        best = p;
                        best_score = s;
                    }
                }
                best as u8
            })
            .collect();
        LabelMask { width: self.width, height: self.height, labels }
    }

    pub fn flip_horizontal(&self) -> ProbabilityVolume {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width) {
            data.extend(row.iter().rev());
        }
        ProbabilityVolume { width: self.width, height: self.height, planes: self.planes, data }
    }

    /// Bilinear resize of every plane, renormalised. Identical sizes return an exact copy.
    pub fn resize(&self, width: usize, height: usize) -> Result<ProbabilityVolume> {
        if width == 0 || height == 0 {
            return Err(VosError::shape("resize target must be at least 1x1"));
        }
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let mut data = Vec::with_capacity(width * height * self.planes);
        for p in 0..self.planes {
            data.extend(resize_bilinear_interleaved(self.plane(p), self.width, self.height, 1, width, height));
        }
        let mut vol = ProbabilityVolume { width, height, planes: self.planes, data };
        vol.renormalize();
        Ok(vol)
    }

    /// Nearest-neighbour upsampling (no renormalisation needed).
    pub fn resize_nearest(&self, width: usize, height: usize) -> Result<ProbabilityVolume> {
        if width == 0 || height == 0 {
            return Err(VosError::shape("resize target must be at least 1x1"));
        }
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let mut data = Vec::with_capacity(width * height * self.planes);
        for p in 0..self.planes {
            let plane = self.plane(p);
            for y in 0..height {
                let sy = nearest_source(y, height, self.height);
                for x in 0..width {
                    data.push(plane[sy * self.width + nearest_source(x, width, self.width)]);
                }
            }
        }
        Ok(ProbabilityVolume { width, height, planes: self.planes, data })
    }

    /// Returns a copy with extra zero planes so that it has `planes` planes.
    pub fn with_planes(&self, planes: usize) -> Result<ProbabilityVolume> {
        if planes < self.planes {
            return Err(VosError::shape("cannot drop probability planes"));
        }
        let mut data = self.data.clone();
        data.resize(planes * self.width * self.height, 0.0);
        Ok(ProbabilityVolume { width: self.width, height: self.height, planes, data })
    }

    /// Crops one plane (used by boundary refinement).
    pub fn crop_plane(&self, p: usize, rect: Rect) -> Result<Vec<f64>> {
        rect.check_inside(self.width, self.height)?;
        let plane = self.plane(p);
        let mut out = Vec::with_capacity(rect.area());
        for y in rect.y..rect.y + rect.h {
            out.extend_from_slice(&plane[y * self.width + rect.x..y * self.width + rect.x + rect.w]);
        }
        Ok(out)
    }
}
