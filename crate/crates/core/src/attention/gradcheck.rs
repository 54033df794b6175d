//! Finite-difference validation of hand-derived attention gradients.
//!
//! The scalar loss is the sum of every output entry. Analytic gradients are
//! written out for each operation and compared entry by entry against central
//! differences taken through the public kernels.

use super::{
    attend, attend_lstt_v2, attend_with_identity, correlation, sigmoid, softmax_rows, EmbeddingMatrix,
    IdentityEmbedding, LayerProjections,
};
use crate::error::{Result, VosError};

/// Operation under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionOp {
    Correlation,
    Attend,
    AttendWithIdentity,
    AttendLsttV2,
}

/// Inputs for [`gradient_check`]. `v`, `e` and `proj` are required by the
/// operations that consume them.
#[derive(Debug, Clone)]
pub struct GradInputs {
    pub q: EmbeddingMatrix,
    pub k: EmbeddingMatrix,
    pub v: Option<EmbeddingMatrix>,
    pub e: Option<IdentityEmbedding>,
    pub proj: Option<LayerProjections>,
}

/// Flat parameter layout: `q | k | v | e | gate | value_weights`.
struct Layout {
    q: (usize, usize),
    k: (usize, usize),
    v: (usize, usize),
    e: (usize, usize),
    d: usize,
}

impl Layout {
    fn of(inputs: &GradInputs) -> Self {
        let shape = |m: &EmbeddingMatrix| (m.rows(), m.cols());
        Self {
            q: shape(&inputs.q),
            k: shape(&inputs.k),
            v: inputs.v.as_ref().map_or((0, 0), shape),
            e: inputs.e.as_ref().map_or((0, 0), |e| shape(e.as_matrix())),
            d: inputs.proj.as_ref().map_or(0, LayerProjections::dim),
        }
    }

    fn flatten(&self, inputs: &GradInputs) -> Vec<f64> {
        let mut p = Vec::new();
        p.extend_from_slice(inputs.q.data());
        p.extend_from_slice(inputs.k.data());
        if let Some(v) = &inputs.v {
            p.extend_from_slice(v.data());
        }
        if let Some(e) = &inputs.e {
            p.extend_from_slice(e.as_matrix().data());
        }
        if let Some(proj) = &inputs.proj {
            p.extend_from_slice(proj.gate_weights());
            p.extend_from_slice(proj.value_weights().data());
        }
        p
    }

    fn rebuild(&self, p: &[f64], template: &GradInputs) -> Result<GradInputs> {
        let mut at = 0;
        let mut take = |(r, c): (usize, usize)| {
            let m = EmbeddingMatrix::new(r, c, p[at..at + r * c].to_vec());
            at += r * c;
            m
        };
        let q = take(self.q)?;
        let k = take(self.k)?;
        let v = template.v.as_ref().map(|_| take(self.v)).transpose()?;
        let e = template
            .e
            .as_ref()
            .map(|_| take(self.e).map(IdentityEmbedding::new))
            .transpose()?;
        let proj = match &template.proj {
            Some(old) => {
                let gate = take((1, self.d))?.into_data();
                let value = take((self.d, self.d))?;
                Some(LayerProjections::new(gate, value, old.layer_index())?)
            }
            None => None,
        };
        Ok(GradInputs { q, k, v, e, proj })
    }
}

fn require<'a, T>(slot: &'a Option<T>, what: &str) -> Result<&'a T> {
    slot.as_ref()
        .ok_or_else(|| VosError::config(format!("gradient check needs `{what}`")))
}

fn loss(op: AttentionOp, x: &GradInputs) -> Result<f64> {
    let total = match op {
        AttentionOp::Correlation => correlation(&x.q, &x.k)?.data().iter().sum(),
        AttentionOp::Attend => attend(&x.q, &x.k, require(&x.v, "v")?)?.data().iter().sum(),
        AttentionOp::AttendWithIdentity => {
            attend_with_identity(&x.q, &x.k, require(&x.v, "v")?, require(&x.e, "e")?)?
                .data()
                .iter()
                .sum()
        }
        AttentionOp::AttendLsttV2 => attend_lstt_v2(
            &x.q,
            &x.k,
            require(&x.v, "v")?,
            require(&x.e, "e")?,
            require(&x.proj, "proj")?,
        )?
        .data()
        .iter()
        .sum(),
    };
    if !f64::is_finite(total) {
        return Err(VosError::Numeric("loss is not finite".into()));
    }
    Ok(total)
}

/// Gradients of `sum(softmax(Q Kᵀ s) V)` for `s = 1/√C`; returns `(dQ, dK, dV)`.
fn attention_grads(q: &EmbeddingMatrix, k: &EmbeddingMatrix, v: &EmbeddingMatrix) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (n, m, c, dv) = (q.rows(), k.rows(), q.cols(), v.cols());
    let s = 1.0 / (c as f64).sqrt();
    let p = softmax_rows(&correlation(q, k)?)?;
    let value_sums: Vec<f64> = (0..m).map(|j| v.row(j).iter().sum()).collect();

    let mut d_scores = vec![0.0; n * m];
    for i in 0..n {
        let mean: f64 = (0..m).map(|j| p.get(i, j) * value_sums[j]).sum();
        for j in 0..m {
            d_scores[i * m + j] = p.get(i, j) * (value_sums[j] - mean);
        }
    }
    let mut dq = vec![0.0; n * c];
    let mut dk = vec![0.0; m * c];
    for i in 0..n {
        for j in 0..m {
            let g = d_scores[i * m + j] * s;
            for a in 0..c {
                dq[i * c + a] += g * k.get(j, a);
                dk[j * c + a] += g * q.get(i, a);
            }
        }
    }
    let mut dvals = vec![0.0; m * dv];
    for j in 0..m {
        let col: f64 = (0..n).map(|i| p.get(i, j)).sum();
        dvals[j * dv..(j + 1) * dv].iter_mut().for_each(|x| *x = col);
    }
    Ok((dq, dk, dvals))
}

fn analytic(op: AttentionOp, x: &GradInputs) -> Result<Vec<f64>> {
    let mut grad = Vec::new();
    match op {
        AttentionOp::Correlation => {
            let c = x.q.cols();
            let s = 1.0 / (c as f64).sqrt();
            let key_sum: Vec<f64> = (0..c).map(|a| (0..x.k.rows()).map(|j| x.k.get(j, a)).sum()).collect();
            let query_sum: Vec<f64> = (0..c).map(|a| (0..x.q.rows()).map(|i| x.q.get(i, a)).sum()).collect();
            for _ in 0..x.q.rows() {
                grad.extend(key_sum.iter().map(|v| v * s));
            }
            for _ in 0..x.k.rows() {
                grad.extend(query_sum.iter().map(|v| v * s));
            }
        }
        AttentionOp::Attend => {
            let (dq, dk, dv) = attention_grads(&x.q, &x.k, require(&x.v, "v")?)?;
            grad.extend(dq);
            grad.extend(dk);
            grad.extend(dv);
        }
        AttentionOp::AttendWithIdentity => {
            let e = require(&x.e, "e")?;
            let augmented = require(&x.v, "v")?.add(e.as_matrix())?;
            let (dq, dk, dv) = attention_grads(&x.q, &x.k, &augmented)?;
            grad.extend(dq);
            grad.extend(dk);
            grad.extend(dv.iter().copied());
            grad.extend(dv);
        }
        AttentionOp::AttendLsttV2 => {
            let v = require(&x.v, "v")?;
            let e = require(&x.e, "e")?;
            let proj = require(&x.proj, "proj")?;
            let (m, c, d) = (x.k.rows(), x.k.cols(), proj.dim());
            let gates: Vec<f64> = (0..m)
                .map(|j| sigmoid(super::dot(e.as_matrix().row(j), proj.gate_weights())))
                .collect();
            let (gated, values) = super::gated_memory(&x.k, v, e, proj)?;
            let (dq, d_gated, d_values) = attention_grads(&x.q, &gated, &values)?;

            let mut dk = vec![0.0; m * c];
            let mut d_logit = vec![0.0; m];
            for j in 0..m {
                let mut dg = 0.0;
                for a in 0..c {
                    dk[j * c + a] = gates[j] * d_gated[j * c + a];
                    dg += d_gated[j * c + a] * x.k.get(j, a);
                }
                d_logit[j] = dg * gates[j] * (1.0 - gates[j]);
            }
            let w = proj.value_weights();
            let mut de = vec![0.0; m * d];
            let mut d_gate_w = vec![0.0; d];
            let mut d_value_w = vec![0.0; d * d];
            for j in 0..m {
                for b in 0..d {
                    let e_jb = e.as_matrix().get(j, b);
                    let mut acc = d_logit[j] * proj.gate_weights()[b];
                    for cc in 0..d {
                        acc += d_values[j * d + cc] * w.get(b, cc);
                        d_value_w[b * d + cc] += e_jb * d_values[j * d + cc];
                    }
                    de[j * d + b] = acc;
                    d_gate_w[b] += d_logit[j] * e_jb;
                }
            }
            grad.extend(dq);
            grad.extend(dk);
            grad.extend(d_values);
            grad.extend(de);
            grad.extend(d_gate_w);
            grad.extend(d_value_w);
        }
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(VosError::Numeric("analytic gradient is not finite".into()));
    }
    Ok(grad)
}

/// Largest `|analytic − central difference| / (|analytic| + 1e-8)` over all
/// input entries, including projection weights for the gated variant.
pub fn gradient_check(op: AttentionOp, inputs: &GradInputs, eps: f64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(VosError::config(format!("perturbation {eps} outside [1e-7, 1e-3]")));
    }
    let layout = Layout::of(inputs);
    let base = layout.flatten(inputs);
    let grad = analytic(op, inputs)?;
    debug_assert_eq!(grad.len(), base.len(), "gradient layout drifted");
    let mut params = base.clone();
    let mut worst: f64 = 0.0;
    for (idx, g) in grad.iter().enumerate() {
        params[idx] = base[idx] + eps;
        let up = loss(op, &layout.rebuild(&params, inputs)?)?;
        params[idx] = base[idx] - eps;
        let down = loss(op, &layout.rebuild(&params, inputs)?)?;
        params[idx] = base[idx];
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max((g - numeric).abs() / (g.abs() + 1e-8));
    }
    Ok(worst)
}
