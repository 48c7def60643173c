//! A small encoder / encoder-decoder Transformer with post-norm residual
//! blocks, learned positional embeddings, and a GELU feed-forward.
//!
//! Connectivity restrictions and stochastic regularizers are injected per
//! attention site through the registered scheme stack; the blocks themselves
//! always assemble a base additive mask from padding (and causality for the
//! decoder) so that every scheme runs the same tape structure.

use crate::attention::{AttentionConfig, MultiHeadAttention};
use crate::error::{Error, Result};
use crate::mask::{
    expand_batch_to_additive, AllowMatrix, AttentionMaskVector, MaskStrategy,
};
use crate::params::{Init, ParamId, ParamSet};
use crate::regularizer::{AttentionSite, HookCtx, Mode, PinnedMasks, RegularizerStack};
use crate::rng::{StreamPurpose, TrainRng};
use crate::tensor::{numel, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Classifier,
    Seq2Seq,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub vocab: usize,
    pub d_emb: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
    /// Output classes for the classifier head; ignored by seq2seq.
    pub classes: usize,
    pub hidden_dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.attention().validate()?;
        if self.vocab < 4 {
            return Err(Error::config(
                "vocab",
                format!("vocab {} leaves no room after the reserved ids", self.vocab),
            ));
        }
        if self.layers == 0 {
            return Err(Error::config("layers", "need at least one layer"));
        }
        if self.max_len == 0 {
            return Err(Error::config("max_len", "need a positive maximum length"));
        }
        if self.arch == Architecture::Classifier && self.classes < 2 {
            return Err(Error::config("classes", format!("{} classes is not a task", self.classes)));
        }
        if !(0.0..1.0).contains(&self.hidden_dropout) {
            return Err(Error::config(
                "hidden_dropout",
                format!("rate must be in [0, 1), got {}", self.hidden_dropout),
            ));
        }
        Ok(())
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig { d_emb: self.d_emb, heads: self.heads }
    }

    fn ff_hidden(&self) -> usize {
        4 * self.d_emb
    }
}

// ── Batches ─────────────────────────────────────────────────────────────────

/// A padded batch of token id rows plus the per-sequence padding masks.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    /// Row-major `[batch * seq]`.
    pub ids: Vec<usize>,
    pub attn: Vec<AttentionMaskVector>,
}

impl TokenBatch {
    /// Pad variable-length rows with `pad_id` up to the longest row.
    pub fn from_rows(rows: &[Vec<usize>], pad_id: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::contract("token_batch", "empty batch"));
        }
        let seq = rows.iter().map(|r| r.len()).max().unwrap();
        if seq == 0 {
            return Err(Error::contract("token_batch", "batch of empty sequences"));
        }
        let mut ids = Vec::with_capacity(rows.len() * seq);
        let mut attn = Vec::with_capacity(rows.len());
        for row in rows {
            if row.is_empty() {
                return Err(Error::contract("token_batch", "empty sequence in batch"));
            }
            ids.extend_from_slice(row);
            ids.extend(std::iter::repeat(pad_id).take(seq - row.len()));
            attn.push(AttentionMaskVector::with_prefix_real(row.len(), seq));
        }
        Ok(TokenBatch { batch: rows.len(), seq, ids, attn })
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }
}

// ── Sub-modules ─────────────────────────────────────────────────────────────

struct LnParams {
    g: ParamId,
    b: ParamId,
}

impl LnParams {
    fn new(params: &mut ParamSet, name: &str, d: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        LnParams {
            g: params.register(&format!("{name}.g"), &[d], Init::Ones, rng),
            b: params.register(&format!("{name}.b"), &[d], Init::Zeros, rng),
        }
    }

    fn apply(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        tape.layer_norm(x, vars[self.g.index()], vars[self.b.index()], LN_EPS)
    }
}

struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl FeedForward {
    fn new(
        params: &mut ParamSet,
        name: &str,
        d: usize,
        hidden: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        FeedForward {
            w1: params.register(&format!("{name}.w1"), &[d, hidden], Init::Normal { std: INIT_STD }, rng),
            b1: params.register(&format!("{name}.b1"), &[hidden], Init::Zeros, rng),
            w2: params.register(&format!("{name}.w2"), &[hidden, d], Init::Normal { std: INIT_STD }, rng),
            b2: params.register(&format!("{name}.b2"), &[d], Init::Zeros, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let h = tape.matmul(x, vars[self.w1.index()])?;
        let h = tape.add(h, vars[self.b1.index()])?;
        let h = tape.gelu(h);
        let o = tape.matmul(h, vars[self.w2.index()])?;
        tape.add(o, vars[self.b2.index()])
    }
}

/// Inverted dropout over a whole activation tensor, drawn from its own
/// purpose stream so toggling other consumers never shifts it.
fn hidden_dropout(
    tape: &mut Tape,
    x: Var,
    rate: f64,
    mode: Mode,
    rng: &TrainRng,
    coords: [u64; 4],
) -> Result<Var> {
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let mut r = rng.stream(StreamPurpose::HiddenDropout, coords);
    let shape = tape.shape(x).to_vec();
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..numel(&shape))
        .map(|_| if r.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let m = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, m)
}

// ── Blocks ──────────────────────────────────────────────────────────────────

/// Sublayer codes used in hidden-dropout stream coordinates.
const SUB_EMBED: u64 = 0;
const SUB_ATTN: u64 = 1;
const SUB_CROSS: u64 = 2;
const SUB_FF: u64 = 3;

/// Area codes (first coordinate after the step) for hidden dropout.
const AREA_ENCODER: u64 = 0;
const AREA_DECODER: u64 = 1;

pub struct EncoderBlock {
    attn: MultiHeadAttention,
    ff: FeedForward,
    ln1: LnParams,
    ln2: LnParams,
}

impl EncoderBlock {
    fn new(params: &mut ParamSet, prefix: &str, cfg: &ModelConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        EncoderBlock {
            attn: MultiHeadAttention::new(params, &format!("{prefix}.attn"), cfg.attention(), rng),
            ff: FeedForward::new(params, &format!("{prefix}.ff"), cfg.d_emb, cfg.ff_hidden(), rng),
            ln1: LnParams::new(params, &format!("{prefix}.ln1"), cfg.d_emb, rng),
            ln2: LnParams::new(params, &format!("{prefix}.ln2"), cfg.d_emb, rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        attn_m: &[AttentionMaskVector],
        fctx: &ForwardCtx,
        layer: usize,
        hidden_rate: f64,
    ) -> Result<Var> {
        let ctx = fctx.hook_ctx(AttentionSite::EncoderSelf, false, layer, fctx.strategy);
        let mut allows = Vec::with_capacity(attn_m.len());
        for (seq, m) in attn_m.iter().enumerate() {
            let mut allow = AllowMatrix::base(m, false);
            for reg in fctx.stack.iter() {
                reg.restrict_connectivity(&mut allow, m, seq, &ctx)?;
            }
            allows.push(allow);
        }
        let additive = expand_batch_to_additive(&allows, self.attn.cfg.heads)?;
        let out = self.attn.forward(tape, vars, x, x, Some(&additive), fctx.stack, &ctx)?;
        let dropped = hidden_dropout(
            tape,
            out.output,
            hidden_rate,
            fctx.mode,
            fctx.rng,
            [fctx.step, AREA_ENCODER, layer as u64, SUB_ATTN],
        )?;
        let res = tape.add(x, dropped)?;
        let x1 = self.ln1.apply(tape, vars, res)?;
        let ff = self.ff.forward(tape, vars, x1)?;
        let ff = hidden_dropout(
            tape,
            ff,
            hidden_rate,
            fctx.mode,
            fctx.rng,
            [fctx.step, AREA_ENCODER, layer as u64, SUB_FF],
        )?;
        let res = tape.add(x1, ff)?;
        self.ln2.apply(tape, vars, res)
    }
}

pub struct DecoderBlock {
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
    ff: FeedForward,
    ln1: LnParams,
    ln2: LnParams,
    ln3: LnParams,
}

impl DecoderBlock {
    fn new(params: &mut ParamSet, prefix: &str, cfg: &ModelConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        DecoderBlock {
            self_attn: MultiHeadAttention::new(params, &format!("{prefix}.self_attn"), cfg.attention(), rng),
            cross_attn: MultiHeadAttention::new(params, &format!("{prefix}.cross_attn"), cfg.attention(), rng),
            ff: FeedForward::new(params, &format!("{prefix}.ff"), cfg.d_emb, cfg.ff_hidden(), rng),
            ln1: LnParams::new(params, &format!("{prefix}.ln1"), cfg.d_emb, rng),
            ln2: LnParams::new(params, &format!("{prefix}.ln2"), cfg.d_emb, rng),
            ln3: LnParams::new(params, &format!("{prefix}.ln3"), cfg.d_emb, rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        dec_attn: &[AttentionMaskVector],
        memory: Var,
        memory_attn: &[AttentionMaskVector],
        fctx: &ForwardCtx,
        layer: usize,
        hidden_rate: f64,
    ) -> Result<Var> {
        let heads = self.self_attn.cfg.heads;
        // Masked self-attention over the decoder sequence.
        let self_ctx = fctx.hook_ctx(AttentionSite::DecoderSelf, true, layer, fctx.decoder_strategy);
        let mut allows = Vec::with_capacity(dec_attn.len());
        for (seq, m) in dec_attn.iter().enumerate() {
            let mut allow = AllowMatrix::base(m, true);
            for reg in fctx.stack.iter() {
                reg.restrict_connectivity(&mut allow, m, seq, &self_ctx)?;
            }
            allows.push(allow);
        }
        let additive = expand_batch_to_additive(&allows, heads)?;
        let out = self.self_attn.forward(tape, vars, x, x, Some(&additive), fctx.stack, &self_ctx)?;
        let dropped = hidden_dropout(
            tape,
            out.output,
            hidden_rate,
            fctx.mode,
            fctx.rng,
            [fctx.step, AREA_DECODER, layer as u64, SUB_ATTN],
        )?;
        let res = tape.add(x, dropped)?;
        let x1 = self.ln1.apply(tape, vars, res)?;

        // Cross-attention into the encoder memory.
        let cross_ctx = fctx.hook_ctx(AttentionSite::Cross, false, layer, fctx.strategy);
        let dec_n = dec_attn.first().map(|m| m.len()).unwrap_or(0);
        let mut allows = Vec::with_capacity(memory_attn.len());
        for (seq, m) in memory_attn.iter().enumerate() {
            let mut allow = AllowMatrix::cross(dec_n, m);
            for reg in fctx.stack.iter() {
                reg.restrict_cross_keys(&mut allow, m, seq, &cross_ctx)?;
            }
            allows.push(allow);
        }
        let additive = expand_batch_to_additive(&allows, heads)?;
        let out =
            self.cross_attn.forward(tape, vars, x1, memory, Some(&additive), fctx.stack, &cross_ctx)?;
        let dropped = hidden_dropout(
            tape,
            out.output,
            hidden_rate,
            fctx.mode,
            fctx.rng,
            [fctx.step, AREA_DECODER, layer as u64, SUB_CROSS],
        )?;
        let res = tape.add(x1, dropped)?;
        let x2 = self.ln2.apply(tape, vars, res)?;

        let ff = self.ff.forward(tape, vars, x2)?;
        let ff = hidden_dropout(
            tape,
            ff,
            hidden_rate,
            fctx.mode,
            fctx.rng,
            [fctx.step, AREA_DECODER, layer as u64, SUB_FF],
        )?;
        let res = tape.add(x2, ff)?;
        self.ln3.apply(tape, vars, res)
    }
}

// ── The model ───────────────────────────────────────────────────────────────

/// Per-forward context: mode, step, the batch's strategy draws, and the
/// stream source. Built once per step by the caller.
pub struct ForwardCtx<'a> {
    pub mode: Mode,
    pub step: u64,
    pub strategy: MaskStrategy,
    pub decoder_strategy: MaskStrategy,
    pub rng: &'a TrainRng,
    pub stack: &'a RegularizerStack,
    pub pinned: Option<&'a PinnedMasks>,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval(rng: &'a TrainRng, stack: &'a RegularizerStack) -> Self {
        ForwardCtx {
            mode: Mode::Eval,
            step: 0,
            strategy: MaskStrategy::None,
            decoder_strategy: MaskStrategy::None,
            rng,
            stack,
            pinned: None,
        }
    }

    fn hook_ctx(&self, site: AttentionSite, causal: bool, layer: usize, strategy: MaskStrategy) -> HookCtx<'a> {
        HookCtx {
            mode: self.mode,
            site,
            causal,
            layer,
            step: self.step,
            strategy,
            rng: self.rng,
            pinned: self.pinned,
        }
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    tok: ParamId,
    pos: ParamId,
    enc: Vec<EncoderBlock>,
    dec: Vec<DecoderBlock>,
    head_w: ParamId,
    head_b: ParamId,
}

impl Model {
    /// Registers every parameter in a fixed order so the same seed always
    /// produces the same initial weights.
    pub fn new(cfg: ModelConfig, params: &mut ParamSet, rng: &TrainRng) -> Result<Model> {
        cfg.validate()?;
        let mut r = rng.stream(StreamPurpose::Init, [0; 4]);
        let tok = params.register("tok_emb", &[cfg.vocab, cfg.d_emb], Init::Normal { std: INIT_STD }, &mut r);
        let pos = params.register("pos_emb", &[cfg.max_len, cfg.d_emb], Init::Normal { std: INIT_STD }, &mut r);
        let enc = (0..cfg.layers)
            .map(|i| EncoderBlock::new(params, &format!("enc{i}"), &cfg, &mut r))
            .collect();
        let dec = match cfg.arch {
            Architecture::Classifier => Vec::new(),
            Architecture::Seq2Seq => (0..cfg.layers)
                .map(|i| DecoderBlock::new(params, &format!("dec{i}"), &cfg, &mut r))
                .collect(),
        };
        let out_dim = match cfg.arch {
            Architecture::Classifier => cfg.classes,
            Architecture::Seq2Seq => cfg.vocab,
        };
        let head_w = params.register("head.w", &[cfg.d_emb, out_dim], Init::Normal { std: INIT_STD }, &mut r);
        let head_b = params.register("head.b", &[out_dim], Init::Zeros, &mut r);
        Ok(Model { cfg, tok, pos, enc, dec, head_w, head_b })
    }

    fn embed(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &TokenBatch,
        fctx: &ForwardCtx,
        area: u64,
    ) -> Result<Var> {
        if batch.seq > self.cfg.max_len {
            return Err(Error::contract(
                "forward",
                format!("sequence length {} exceeds max_len {}", batch.seq, self.cfg.max_len),
            ));
        }
        let tok = tape.embedding(vars[self.tok.index()], &batch.ids, &[batch.batch, batch.seq])?;
        let pos_ids: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq).collect();
        let pos = tape.embedding(vars[self.pos.index()], &pos_ids, &[batch.batch, batch.seq])?;
        let x = tape.add(tok, pos)?;
        hidden_dropout(
            tape,
            x,
            self.cfg.hidden_dropout,
            fctx.mode,
            fctx.rng,
            [fctx.step, area, 0, SUB_EMBED],
        )
    }

    fn encode(&self, tape: &mut Tape, vars: &[Var], src: &TokenBatch, fctx: &ForwardCtx) -> Result<Var> {
        let mut x = self.embed(tape, vars, src, fctx, AREA_ENCODER)?;
        for (i, block) in self.enc.iter().enumerate() {
            x = block.forward(tape, vars, x, &src.attn, fctx, i, self.cfg.hidden_dropout)?;
        }
        Ok(x)
    }

    /// Class logits `[B, classes]` read from position 0.
    pub fn forward_classifier(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        src: &TokenBatch,
        fctx: &ForwardCtx,
    ) -> Result<Var> {
        if self.cfg.arch != Architecture::Classifier {
            return Err(Error::contract("forward", "not a classifier model"));
        }
        let x = self.encode(tape, vars, src, fctx)?;
        let first = tape.take_position(x, 0)?;
        let logits = tape.matmul(first, vars[self.head_w.index()])?;
        tape.add(logits, vars[self.head_b.index()])
    }

    /// Next-token logits `[B, N_dec, vocab]` under teacher forcing.
    pub fn forward_seq2seq(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        src: &TokenBatch,
        dec_in: &TokenBatch,
        fctx: &ForwardCtx,
    ) -> Result<Var> {
        if self.cfg.arch != Architecture::Seq2Seq {
            return Err(Error::contract("forward", "not a seq2seq model"));
        }
        if src.batch != dec_in.batch {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: vec![src.batch],
                rhs: vec![dec_in.batch],
            });
        }
        let memory = self.encode(tape, vars, src, fctx)?;
        let mut x = self.embed(tape, vars, dec_in, fctx, AREA_DECODER)?;
        for (i, block) in self.dec.iter().enumerate() {
            x = block.forward(
                tape,
                vars,
                x,
                &dec_in.attn,
                memory,
                &src.attn,
                fctx,
                i,
                self.cfg.hidden_dropout,
            )?;
        }
        let logits = tape.matmul(x, vars[self.head_w.index()])?;
        tape.add(logits, vars[self.head_b.index()])
    }
}

// ── Tests ───────────────────────────────────────────────────────────────────
