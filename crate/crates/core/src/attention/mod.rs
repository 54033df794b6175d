//! Dense attention-based matching kernels.
//!
//! Three readouts share one kernel:
//!
//! - plain scaled dot-product attention, `softmax(Q Kᵀ / √C) V`;
//! - identity-augmented attention, where a per-token identification
//!   embedding `E` is added to the values before the readout;
//! - gated identity attention, where `E` additionally produces one sigmoid
//!   gate per memory token that rescales that token's key row, and the value
//!   side receives a per-layer linear projection of `E`.
//!
//! Everything is `f64` and row-parallel. Rows are independent, so results do
//! not depend on the thread count.

mod gradcheck;

pub use gradcheck::{gradient_check, AttentionOp, GradInputs};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VosError};

/// Row-major dense matrix of finite reals; one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(VosError::shape(format!(
                "embedding data has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(VosError::Numeric(format!(
                "non-finite embedding value at flat index {pos}"
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Standard-normal entries drawn from `seed`.
    pub fn random(rows: usize, cols: usize, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        use rand_distr::StandardNormal;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(VosError::shape("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Elementwise sum; both operands must have identical shape.
    pub fn add(&self, other: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(VosError::shape(format!(
                "cannot add {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        EmbeddingMatrix::new(self.rows, self.cols, data)
    }

    pub fn scale(&self, factor: f64) -> Result<EmbeddingMatrix> {
        EmbeddingMatrix::new(self.rows, self.cols, self.data.iter().map(|v| v * factor).collect())
    }

    /// Ordinary matrix product `self · rhs`.
    pub fn matmul(&self, rhs: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        if self.cols != rhs.rows {
            return Err(VosError::shape(format!(
                "matmul inner dimensions differ: {} vs {}",
                self.cols, rhs.rows
            )));
        }
        let mut out = vec![0.0; self.rows * rhs.cols];
        for i in 0..self.rows {
            let dst = &mut out[i * rhs.cols..(i + 1) * rhs.cols];
            for (t, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (d, &b) in dst.iter_mut().zip(rhs.row(t)) {
                    *d += a * b;
                }
            }
        }
        EmbeddingMatrix::new(self.rows, rhs.cols, out)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack<'a>(parts: impl IntoIterator<Item = &'a EmbeddingMatrix>) -> Result<EmbeddingMatrix> {
        let mut cols = None;
        let mut rows = 0;
        let mut data = Vec::new();
        for part in parts {
            match cols {
                None => cols = Some(part.cols),
                Some(c) if c != part.cols => {
                    return Err(VosError::shape(format!(
                        "cannot stack {c}-column and {}-column blocks",
                        part.cols
                    )))
                }
                Some(_) => {}
            }
            rows += part.rows;
            data.extend_from_slice(&part.data);
        }
        Ok(EmbeddingMatrix { rows, cols: cols.unwrap_or(0), data })
    }

    /// Returns a copy with rows reordered so that output row `i` is input row `order[i]`.
    pub fn permute_rows(&self, order: &[usize]) -> EmbeddingMatrix {
        let mut data = Vec::with_capacity(order.len() * self.cols);
        for &r in order {
            data.extend_from_slice(self.row(r));
        }
        EmbeddingMatrix { rows: order.len(), cols: self.cols, data }
    }
}

/// Per-token identification payload added on the value side of attention.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityEmbedding(EmbeddingMatrix);

impl IdentityEmbedding {
    pub fn new(matrix: EmbeddingMatrix) -> Self {
        Self(matrix)
    }

    pub fn tokens(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn as_matrix(&self) -> &EmbeddingMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> EmbeddingMatrix {
        self.0
    }
}

/// Per-layer gate and value projections applied to the identity embedding.
///
/// `gate_weights` maps an identity row to a single scalar (one gate per
/// memory token); `value_weights` is a `dim × dim` matrix mapping identity rows
/// into value space. Neither carries a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerProjections {
    gate_weights: Vec<f64>,
    value_weights: EmbeddingMatrix,
    layer_index: usize,
}

impl LayerProjections {
    pub fn new(gate_weights: Vec<f64>, value_weights: EmbeddingMatrix, layer_index: usize) -> Result<Self> {
        let dim = gate_weights.len();
        if value_weights.rows() != dim || value_weights.cols() != dim {
            return Err(VosError::shape(format!(
                "value projection is {}x{}, gate expects {dim}",
                value_weights.rows(),
                value_weights.cols()
            )));
        }
        if gate_weights.iter().any(|v| !v.is_finite()) {
            return Err(VosError::Numeric("non-finite gate weight".into()));
        }
        Ok(Self { gate_weights, value_weights, layer_index })
    }

    pub fn zeros(dim: usize, layer_index: usize) -> Self {
        Self {
            gate_weights: vec![0.0; dim],
            value_weights: EmbeddingMatrix::zeros(dim, dim),
            layer_index,
        }
    }

    /// Zero gate, identity value map: the value side becomes exactly `V + E`.
    pub fn passthrough(dim: usize, layer_index: usize) -> Self {
        let mut value = vec![0.0; dim * dim];
        for i in 0..dim {
            value[i * dim + i] = 1.0;
        }
        Self {
            gate_weights: vec![0.0; dim],
            value_weights: EmbeddingMatrix { rows: dim, cols: dim, data: value },
            layer_index,
        }
    }

    /// Gaussian weights with standard deviation `std`, drawn from a stream keyed
    /// on `(seed, layer_index)` so that every layer gets its own instance.
    pub fn seeded(dim: usize, layer_index: usize, seed: u64, std: f64) -> Self {
        use rand::{Rng, SeedableRng};
        use rand_distr::StandardNormal;
        let stream = seed ^ (layer_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(stream);
        let mut draw = || std * rng.sample::<f64, _>(StandardNormal);
        let gate_weights = (0..dim).map(|_| draw()).collect();
        let data = (0..dim * dim).map(|_| draw()).collect();
        Self {
            gate_weights,
            value_weights: EmbeddingMatrix { rows: dim, cols: dim, data },
            layer_index,
        }
    }

    pub fn dim(&self) -> usize {
        self.gate_weights.len()
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn gate_weights(&self) -> &[f64] {
        &self.gate_weights
    }

    pub fn value_weights(&self) -> &EmbeddingMatrix {
        &self.value_weights
    }

    /// One sigmoid gate per identity token.
    pub fn gates(&self, identity: &IdentityEmbedding) -> Result<Vec<f64>> {
        self.check_dim(identity)?;
        Ok((0..identity.tokens())
            .map(|t| sigmoid(dot(identity.as_matrix().row(t), &self.gate_weights)))
            .collect())
    }

    /// `E · W_value`.
    pub fn project_values(&self, identity: &IdentityEmbedding) -> Result<EmbeddingMatrix> {
        self.check_dim(identity)?;
        identity.as_matrix().matmul(&self.value_weights)
    }

    fn check_dim(&self, identity: &IdentityEmbedding) -> Result<()> {
        if identity.dim() != self.dim() {
            return Err(VosError::shape(format!(
                "layer {} projections expect identity dim {}, got {}",
                self.layer_index,
                self.dim(),
                identity.dim()
            )));
        }
        Ok(())
    }
}

/// Which matching readout to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum AttentionVariant {
    /// `Att(Q, K, V)`
    #[serde(rename = "eq1")]
    Plain,
    /// `Att(Q, K, V + E)`
    #[default]
    #[serde(rename = "eq2")]
    Identity,
    /// `Att(Q, K ⊙ σ(W_G E), V + W_ID E)`
    #[serde(rename = "eq3")]
    Gated,
}

impl std::str::FromStr for AttentionVariant {
    type Err = VosError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eq1" | "plain" => Ok(Self::Plain),
            "eq2" | "identity" => Ok(Self::Identity),
            "eq3" | "gated" => Ok(Self::Gated),
            other => Err(VosError::config(format!("unknown attention variant `{other}`"))),
        }
    }
}

/// Score matrix produced by [`correlation`]. Entries may be `-inf` once masked.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(VosError::shape("score data length does not match shape"));
        }
        if data.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(VosError::Numeric("scores contain NaN or +inf".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `Q Kᵀ / √C`.
pub fn correlation(q: &EmbeddingMatrix, k: &EmbeddingMatrix) -> Result<ScoreMatrix> {
    if q.cols() != k.cols() {
        return Err(VosError::shape(format!(
            "query has {} channels, key has {}",
            q.cols(),
            k.cols()
        )));
    }
    let inv = 1.0 / (q.cols().max(1) as f64).sqrt();
    let mut data = Vec::with_capacity(q.rows() * k.rows());
    for i in 0..q.rows() {
        let qi = q.row(i);
        data.extend((0..k.rows()).map(|j| dot(qi, k.row(j)) * inv));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(VosError::Numeric("correlation overflowed".into()));
    }
    Ok(ScoreMatrix { rows: q.rows(), cols: k.rows(), data })
}

/// In-place max-subtracted softmax of one row. `-inf` entries get weight 0.
pub(crate) fn softmax_in_place(row: &mut [f64]) -> Result<()> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(VosError::Numeric("softmax row has no finite entry".into()));
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

/// Row-wise softmax.
pub fn softmax_rows(scores: &ScoreMatrix) -> Result<ScoreMatrix> {
    if scores.cols == 0 {
        return Err(VosError::shape("softmax over an empty row"));
    }
    let mut data = scores.data.clone();
    for row in data.chunks_mut(scores.cols) {
        softmax_in_place(row)?;
    }
    Ok(ScoreMatrix { rows: scores.rows, cols: scores.cols, data })
}

/// Masks every score outside the `k` largest of its row to `-inf`.
///
/// Ties at the cut are resolved in favour of the lower column index.
pub fn topk_mask(scores: &ScoreMatrix, k: usize) -> Result<ScoreMatrix> {
    if k == 0 || k > scores.cols {
        return Err(VosError::config(format!(
            "top-k of {k} is outside 1..={}",
            scores.cols
        )));
    }
    let mut data = scores.data.clone();
    let mut order = Vec::with_capacity(scores.cols);
    for row in data.chunks_mut(scores.cols) {
        mask_row_topk(row, k, &mut order);
    }
    Ok(ScoreMatrix { rows: scores.rows, cols: scores.cols, data })
}

pub(crate) fn mask_row_topk(row: &mut [f64], k: usize, order: &mut Vec<usize>) {
    if k >= row.len() {
        return;
    }
    order.clear();
    order.extend(0..row.len());
    order.select_nth_unstable_by(k - 1, |&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    for &j in &order[k..] {
        row[j] = f64::NEG_INFINITY;
    }
}

/// `weights · V` where `weights` is row-stochastic.
pub fn apply_weights(weights: &ScoreMatrix, v: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if weights.cols != v.rows() {
        return Err(VosError::shape(format!(
            "{} weights per row but {} value rows",
            weights.cols,
            v.rows()
        )));
    }
    let mut out = vec![0.0; weights.rows * v.cols()];
    for i in 0..weights.rows {
        accumulate_row(weights.row(i), v, &mut out[i * v.cols()..(i + 1) * v.cols()]);
    }
    EmbeddingMatrix::new(weights.rows, v.cols(), out)
}

fn accumulate_row(weights: &[f64], v: &EmbeddingMatrix, dst: &mut [f64]) {
    if dst.is_empty() {
        return;
    }
    for (&w, vj) in weights.iter().zip(v.data().chunks_exact(dst.len())) {
        if w == 0.0 {
            continue;
        }
        for (d, &x) in dst.iter_mut().zip(vj) {
            *d += w * x;
        }
    }
}

/// Options for the fused attention kernel used by memory reads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct KernelOptions {
    /// Extra divisor on top of `√C`.
    pub temperature: f64,
    pub topk: Option<usize>,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self { temperature: 1.0, topk: None }
    }
}

/// Fused correlation → (top-k) → softmax → readout, one query row at a time.
pub(crate) fn attention_kernel(
    q: &EmbeddingMatrix,
    k: &EmbeddingMatrix,
    v: &EmbeddingMatrix,
    opts: KernelOptions,
) -> Result<EmbeddingMatrix> {
    if q.cols() != k.cols() {
        return Err(VosError::shape(format!(
            "query has {} channels, key has {}",
            q.cols(),
            k.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(VosError::shape(format!(
            "{} keys but {} values",
            k.rows(),
            v.rows()
        )));
    }
    if k.rows() == 0 {
        return Err(VosError::shape("attention over zero memory tokens"));
    }
    if !(opts.temperature > 0.0 && opts.temperature.is_finite()) {
        return Err(VosError::config("temperature must be positive"));
    }
    if let Some(top) = opts.topk {
        if top == 0 || top > k.rows() {
            return Err(VosError::config(format!(
                "top-k of {top} is outside 1..={}",
                k.rows()
            )));
        }
    }
    let inv = 1.0 / ((q.cols().max(1) as f64).sqrt() * opts.temperature);
    let vc = v.cols();
    let mut out = vec![0.0; q.rows() * vc];
    out.par_chunks_mut(vc.max(1))
        .enumerate()
        .try_for_each_init(
            || (vec![0.0; k.rows()], Vec::new()),
            |(scores, order), (i, dst)| -> Result<()> {
                if vc == 0 {
                    return Ok(());
                }
                let qi = q.row(i);
                let kc = k.cols().max(1);
                for (s, kj) in scores.iter_mut().zip(k.data().chunks_exact(kc)) {
                    *s = dot(qi, kj) * inv;
                }
                if scores.iter().any(|s| !s.is_finite()) {
                    return Err(VosError::Numeric("attention scores overflowed".into()));
                }
                if let Some(top) = opts.topk {
                    mask_row_topk(scores, top, order);
                }
                softmax_in_place(scores)?;
                accumulate_row(scores, v, dst);
                Ok(())
            },
        )?;
    EmbeddingMatrix::new(q.rows(), vc, out)
}

/// `softmax(Q Kᵀ / √C) V`.
pub fn attend(q: &EmbeddingMatrix, k: &EmbeddingMatrix, v: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    attention_kernel(q, k, v, KernelOptions::default())
}

/// `Att(Q, K, V + E)`.
pub fn attend_with_identity(
    q: &EmbeddingMatrix,
    k: &EmbeddingMatrix,
    v: &EmbeddingMatrix,
    e: &IdentityEmbedding,
) -> Result<EmbeddingMatrix> {
    let augmented = v.add(e.as_matrix())?;
    attend(q, k, &augmented)
}

/// Keys scaled per token by `σ(E · w_G)` and values `V + E · W_ID`.
pub(crate) fn gated_memory(
    k: &EmbeddingMatrix,
    v: &EmbeddingMatrix,
    e: &IdentityEmbedding,
    proj: &LayerProjections,
) -> Result<(EmbeddingMatrix, EmbeddingMatrix)> {
    if e.tokens() != k.rows() {
        return Err(VosError::shape(format!(
            "identity has {} tokens, keys have {}",
            e.tokens(),
            k.rows()
        )));
    }
    let gates = proj.gates(e)?;
    let mut gated = k.data().to_vec();
    if k.cols() > 0 {
        for (row, g) in gated.chunks_mut(k.cols()).zip(&gates) {
            row.iter_mut().for_each(|x| *x *= g);
        }
    }
    let gated = EmbeddingMatrix::new(k.rows(), k.cols(), gated)?;
    let values = v.add(&proj.project_values(e)?)?;
    Ok((gated, values))
}

/// `Att(Q, K ⊙ σ(W_G E), V + W_ID E)` with the gate broadcast across channels.
pub fn attend_lstt_v2(
    q: &EmbeddingMatrix,
    k: &EmbeddingMatrix,
    v: &EmbeddingMatrix,
    e: &IdentityEmbedding,
    proj: &LayerProjections,
) -> Result<EmbeddingMatrix> {
    let (gated, values) = gated_memory(k, v, e, proj)?;
    attend(q, &gated, &values)
}
