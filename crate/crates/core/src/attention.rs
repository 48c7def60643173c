//! Scaled dot-product attention with optional connectivity masking,
//! weight dropout, and head dropout.
//!
//! The pipeline is fixed: scores are computed from split heads, an additive
//! mask (0 or a large negative constant) is applied before softmax, weight
//! dropout runs after softmax, the weighted sum over values follows, and
//! head dropout runs last, before heads are merged and projected.

use crate::error::{Error, Result};
use crate::mask::AdditiveMask;
use crate::params::{Init, ParamId, ParamSet};
use crate::regularizer::{HookCtx, RegularizerStack};
use crate::tensor::{Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_emb: usize,
    pub heads: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_emb == 0 || self.d_emb % self.heads != 0 {
            return Err(Error::config(
                "heads",
                format!("head count {} must be nonzero and divide d_emb {}", self.heads, self.d_emb),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_emb / self.heads
    }
}

pub struct AttentionOutput {
    /// `[B, N, d_emb]`: per-head contexts merged, before any output projection.
    pub output: Var,
    /// `[B, H, Nq, Nk]` post-softmax weights, retained for inspection.
    pub weights: Var,
}

/// `QK^T / sqrt(d_emb / H)` on split heads `[B, H, N, dh]`.
pub fn scaled_scores(tape: &mut Tape, q: Var, k: Var, cfg: &AttentionConfig) -> Result<Var> {
    cfg.validate()?;
    let sq = tape.shape(q).to_vec();
    let sk = tape.shape(k).to_vec();
    if sq.len() != 4 || sk.len() != 4 || sq[0] != sk[0] || sq[1] != sk[1] || sq[3] != sk[3] {
        return Err(Error::ShapeMismatch { op: "scaled_scores", lhs: sq, rhs: sk });
    }
    if sq[1] != cfg.heads || sq[3] != cfg.head_dim() {
        return Err(Error::contract(
            "scaled_scores",
            format!("q shape {:?} does not match heads={} dh={}", sq, cfg.heads, cfg.head_dim()),
        ));
    }
    let kt = tape.transpose_last2(k)?;
    let raw = tape.matmul(q, kt)?;
    Ok(tape.scale(raw, 1.0 / (cfg.head_dim() as f64).sqrt()))
}

/// Full attention over split heads, with an optional additive mask and
/// optional regularizer hooks at the two post-softmax stages.
fn attention_core(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    additive: Option<&AdditiveMask>,
    cfg: &AttentionConfig,
    hooks: Option<(&RegularizerStack, &HookCtx)>,
) -> Result<AttentionOutput> {
    let mut scores = scaled_scores(tape, q, k, cfg)?;
    if let Some(mask) = additive {
        let s = tape.shape(scores).to_vec();
        let want = [mask.batch, mask.heads, mask.rows, mask.cols];
        if s != want {
            return Err(Error::ShapeMismatch { op: "masked_attention", lhs: s, rhs: want.to_vec() });
        }
        let mask_var = tape.constant(mask.to_tensor());
        scores = tape.add(scores, mask_var)?;
    }
    let weights = tape.softmax_lastdim(scores)?;
    let mut active = weights;
    if let Some((stack, ctx)) = hooks {
        for reg in stack.iter() {
            active = reg.transform_weights(tape, active, ctx)?;
        }
    }
    let mut context = tape.matmul(active, v)?;
    if let Some((stack, ctx)) = hooks {
        for reg in stack.iter() {
            context = reg.transform_heads(tape, context, ctx)?;
        }
    }
    let output = tape.merge_heads(context)?;
    Ok(AttentionOutput { output, weights })
}

/// Attention with an additive connectivity mask and no stochastic
/// regularization: the inference path.
pub fn masked_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    additive: Option<&AdditiveMask>,
    cfg: &AttentionConfig,
) -> Result<AttentionOutput> {
    attention_core(tape, q, k, v, additive, cfg, None)
}

// ── Stochastic regularizers ─────────────────────────────────────────────────

/// Inverted dropout on attention weights: each entry is zeroed with
/// probability `rate`, survivors are scaled by `1/(1-rate)` so expected
/// values are preserved. Identity when not training or `rate == 0`.
pub fn attention_dropout(
    tape: &mut Tape,
    weights: Var,
    rate: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config("rate", format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if !training || rate == 0.0 {
        return Ok(weights);
    }
    let shape = tape.shape(weights).to_vec();
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..crate::tensor::numel(&shape))
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let mask_var = tape.constant(crate::tensor::Tensor::new(shape, mask)?);
    tape.mul(weights, mask_var)
}

/// One batch element's head-drop decision.
pub struct HeadPlan {
    /// Raw Bernoulli outcomes before the retention rule.
    pub raw_dropped: Vec<bool>,
    /// Final keep decisions; at least one head is always kept.
    pub kept: Vec<bool>,
}

impl HeadPlan {
    pub fn kept_count(&self) -> usize {
        self.kept.iter().filter(|k| **k).count()
    }

    /// Survivors are scaled so the expected head mass is preserved.
    pub fn scale(&self) -> f64 {
        self.kept.len() as f64 / self.kept_count() as f64
    }
}

/// Draw which heads to drop for one batch element. If every head would be
/// dropped, one uniformly chosen head is retained.
pub fn sample_head_plan(rate: f64, heads: usize, rng: &mut ChaCha8Rng) -> HeadPlan {
    let raw_dropped: Vec<bool> = (0..heads).map(|_| rng.random::<f64>() < rate).collect();
    let mut kept: Vec<bool> = raw_dropped.iter().map(|d| !d).collect();
    if kept.iter().all(|k| !k) {
        let idx = rng.random_range(0..heads);
        kept[idx] = true;
    }
    HeadPlan { raw_dropped, kept }
}

/// Structured dropout of whole heads on `[B, H, N, Dh]` contexts, one draw
/// per batch element. Identity when not training or `rate == 0`.
pub fn drophead(
    tape: &mut Tape,
    heads_ctx: Var,
    rate: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config("rate", format!("head-drop rate must be in [0, 1), got {rate}")));
    }
    if !training || rate == 0.0 {
        return Ok(heads_ctx);
    }
    let shape = tape.shape(heads_ctx).to_vec();
    if shape.len() != 4 {
        return Err(Error::contract("drophead", format!("need [B, H, N, Dh], got {:?}", shape)));
    }
    let (b, h) = (shape[0], shape[1]);
    let plane = shape[2] * shape[3];
    let mut mask = Vec::with_capacity(b * h * plane);
    for _ in 0..b {
        let plan = sample_head_plan(rate, h, rng);
        let scale = plan.scale();
        for hi in 0..h {
            let value = if plan.kept[hi] { scale } else { 0.0 };
            mask.extend(std::iter::repeat(value).take(plane));
        }
    }
    let mask_var = tape.constant(crate::tensor::Tensor::new(shape, mask)?);
    tape.mul(heads_ctx, mask_var)
}

// ── Multi-head attention layer ──────────────────────────────────────────────

/// Projections plus the attention core, with regularizer hooks applied.
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

pub struct MhaOutput {
    /// `[B, Nq, E]` after the output projection.
    pub output: Var,
    /// `[B, Nq, E]` merged head contexts, before the output projection.
    pub context: Var,
    /// `[B, H, Nq, Nk]` post-softmax weights (before any weight dropout).
    pub weights: Var,
    /// `[B, Nk, E]` projected values, before head split.
    pub values: Var,
}

impl MultiHeadAttention {
    pub fn new(params: &mut ParamSet, prefix: &str, cfg: AttentionConfig, rng: &mut ChaCha8Rng) -> Self {
        let e = cfg.d_emb;
        let w = |params: &mut ParamSet, rng: &mut ChaCha8Rng, name: String| {
            params.register(&name, &[e, e], Init::Normal { std: 0.02 }, rng)
        };
        let b = |params: &mut ParamSet, rng: &mut ChaCha8Rng, name: String| {
            params.register(&name, &[e], Init::Zeros, rng)
        };
        MultiHeadAttention {
            cfg,
            wq: w(params, rng, format!("{prefix}.wq")),
            bq: b(params, rng, format!("{prefix}.bq")),
            wk: w(params, rng, format!("{prefix}.wk")),
            bk: b(params, rng, format!("{prefix}.bk")),
            wv: w(params, rng, format!("{prefix}.wv")),
            bv: b(params, rng, format!("{prefix}.bv")),
            wo: w(params, rng, format!("{prefix}.wo")),
            bo: b(params, rng, format!("{prefix}.bo")),
        }
    }

    /// `x_q`: `[B, Nq, E]` queries; `x_kv`: `[B, Nk, E]` keys/values source.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x_q: Var,
        x_kv: Var,
        additive: Option<&AdditiveMask>,
        stack: &RegularizerStack,
        ctx: &HookCtx,
    ) -> Result<MhaOutput> {
        let project = |tape: &mut Tape, x: Var, w: ParamId, b: ParamId| -> Result<Var> {
            let lin = tape.matmul(x, vars[w.index()])?;
            tape.add(lin, vars[b.index()])
        };
        let q = project(tape, x_q, self.wq, self.bq)?;
        let k = project(tape, x_kv, self.wk, self.bk)?;
        let v = project(tape, x_kv, self.wv, self.bv)?;
        let qh = tape.split_heads(q, self.cfg.heads)?;
        let kh = tape.split_heads(k, self.cfg.heads)?;
        let vh = tape.split_heads(v, self.cfg.heads)?;
        let attn = attention_core(tape, qh, kh, vh, additive, &self.cfg, Some((stack, ctx)))?;
        let output = {
            let lin = tape.matmul(attn.output, vars[self.wo.index()])?;
            tape.add(lin, vars[self.bo.index()])?
        };
        Ok(MhaOutput { output, context: attn.output, weights: attn.weights, values: v })
    }
}

// ── Tests ───────────────────────────────────────────────────────────────────
