//! Independent reference implementations for verification.
//!
//! Everything here is deliberately written with plain scalar loops and no
//! shared code with the production kernels. The attention reference computes
//! softmax restricted exactly to the allowed key set; forbidden keys simply
//! do not participate, rather than being pushed down by a large negative
//! additive term. Agreement between the two routes is what the verify suite
//! checks.

use crate::attention::AttentionConfig;
use crate::error::{Error, Result};
use crate::mask::AllowMatrix;

/// Tolerances pinned for verification checks.
#[derive(Clone, Copy, Debug)]
pub struct ToleranceSpec {
    /// Absolute tolerance for value comparisons.
    pub abs: f64,
    /// Relative tolerance for gradient comparisons.
    pub rel: f64,
    /// Central-difference step.
    pub fd_step: f64,
}

impl Default for ToleranceSpec {
    fn default() -> Self {
        ToleranceSpec { abs: 1e-10, rel: 1e-4, fd_step: 1e-5 }
    }
}

pub struct ReferenceAttention {
    /// `[batch, n, heads * dh]`, heads concatenated.
    pub output: Vec<f64>,
    /// `[batch, heads, n, n]` post-softmax weights; forbidden keys are 0.
    pub weights: Vec<f64>,
}

/// Scalar-loop attention with softmax restricted to the allowed set.
/// `q`, `k`, `v` are `[batch, heads, n, dh]`; `allow` is one matrix per
/// sequence, shared across heads.
pub fn reference_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    allow: &[AllowMatrix],
    batch: usize,
    n: usize,
    cfg: &AttentionConfig,
) -> Result<ReferenceAttention> {
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let want = batch * heads * n * dh;
    if q.len() != want || k.len() != want || v.len() != want {
        return Err(Error::contract(
            "reference_attention",
            format!("expected {want} values per input, got q={} k={} v={}", q.len(), k.len(), v.len()),
        ));
    }
    if allow.len() != batch {
        return Err(Error::contract(
            "reference_attention",
            format!("{} allow matrices for batch {batch}", allow.len()),
        ));
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut output = vec![0.0; batch * n * heads * dh];
    let mut weights = vec![0.0; batch * heads * n * n];

    for b in 0..batch {
        let am = &allow[b];
        if am.rows() != n || am.cols() != n {
            return Err(Error::ShapeMismatch {
                op: "reference_attention",
                lhs: vec![n, n],
                rhs: vec![am.rows(), am.cols()],
            });
        }
        for h in 0..heads {
            let base = ((b * heads + h) * n) * dh;
            for i in 0..n {
                let allowed: Vec<usize> = (0..n).filter(|j| am.get(i, *j)).collect();
                if allowed.is_empty() {
                    return Err(Error::contract(
                        "reference_attention",
                        format!("query {i} in sequence {b} has no allowed keys"),
                    ));
                }
                let mut scores = Vec::with_capacity(allowed.len());
                for &j in &allowed {
                    let mut dot = 0.0;
                    for d in 0..dh {
                        dot += q[base + i * dh + d] * k[base + j * dh + d];
                    }
                    scores.push(dot * scale);
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for (&j, e) in allowed.iter().zip(&exps) {
                    let w = e / sum;
                    weights[((b * heads + h) * n + i) * n + j] = w;
                    for d in 0..dh {
                        output[(b * n + i) * (heads * dh) + h * dh + d] += w * v[base + j * dh + d];
                    }
                }
            }
        }
    }
    Ok(ReferenceAttention { output, weights })
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_grad(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    step: f64,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let hi = f(&probe)?;
        probe[i] = x[i] - step;
        let lo = f(&probe)?;
        probe[i] = x[i];
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::numeric(
                "finite_diff_grad",
                format!("non-finite function value near coordinate {i}"),
            ));
        }
        grad[i] = (hi - lo) / (2.0 * step);
    }
    Ok(grad)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest elementwise relative error, with a floor on the denominator so
/// near-zero pairs compare absolutely.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Chi-square statistic of observed bin counts against a uniform expectation.
/// Compare against a tabulated quantile for `counts.len() - 1` degrees of
/// freedom.
pub fn chi_square_uniform(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    counts
        .iter()
        .map(|c| {
            let d = *c as f64 - expected;
            d * d / expected
        })
        .sum()
}
