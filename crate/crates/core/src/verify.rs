//! Self-checking invariant suite. Each check re-derives an expected result
//! through an independent route (scalar loops, finite differences, frequency
//! counts, bit comparison of supposedly equivalent paths) and compares it to
//! what the library actually computes. `run_all(tamper)` with `tamper = true`
//! flips one connectivity bit in the first masking fixture, which must make
//! the one-hot check fail; a suite that still passes under tampering is not
//! testing anything.

use crate::attention::{masked_attention, AttentionConfig};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::mask::{
    build_allow_matrix, draw_strategy, expand_batch_to_additive, expand_to_additive,
    select_masked_tokens, AllowMatrix, AttentionMaskVector, MaskStrategy, MaskedSet,
};
use crate::oracle::reference_attention;
use crate::params::ParamSet;
use crate::regularizer::{
    AttentionSite, Mode, PinnedMasks, RegularizerSpec, RegularizerStack, Scheme,
};
use crate::rng::{StreamPurpose, TrainRng};
use crate::tasks::{DatasetSpec, TaskKind, BOS, PAD};
use crate::tensor::{Tape, Tensor};
use crate::training::{metrics_csv, train_with_rng};
use crate::transformer::{Architecture, ForwardCtx, Model, ModelConfig, TokenBatch};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

const LEAK_TOL: f64 = 1e-12;
const ONE_HOT_TOL: f64 = 1e-9;
const ORACLE_TOL: f64 = 1e-10;
const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

// ── Report plumbing ─────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct VerifyReport {
    pub checks: Vec<CheckOutcome>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            out.push_str(&format!("{tag} {} ({:.3}s): {}\n", c.name, c.seconds, c.detail));
        }
        let total: f64 = self.checks.iter().map(|c| c.seconds).sum();
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        if failed == 0 {
            out.push_str(&format!("all {} checks passed in {total:.3}s\n", self.checks.len()));
        } else {
            out.push_str(&format!("{failed} of {} checks FAILED ({total:.3}s)\n", self.checks.len()));
        }
        out
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<String>) -> CheckOutcome {
    let start = Instant::now();
    let result = f();
    let seconds = start.elapsed().as_secs_f64();
    match result {
        Ok(detail) => CheckOutcome { name, passed: true, detail, seconds },
        Err(e) => CheckOutcome { name, passed: false, detail: e.to_string(), seconds },
    }
}

fn fail(msg: String) -> Error {
    Error::contract("verify", msg)
}

/// Run every check. `tamper` injects one flipped allow bit into the first
/// sibling-masking fixture; the expected outcome is then exactly one failing
/// check, `siblings_one_hot`.
pub fn run_all(tamper: bool) -> VerifyReport {
    let checks = vec![
        timed("siblings_one_hot", || check_siblings_one_hot(tamper)),
        timed("self_mask_column_zero", check_self_mask_column),
        timed("zero_mask_identity", check_zero_mask_identity),
        timed("eval_scheme_invariance", check_eval_scheme_invariance),
        timed("attention_matches_reference", check_attention_matches_reference),
        timed("gradients_match_finite_difference", check_gradients),
        timed("selection_rate_calibration", check_selection_rate),
        timed("strategy_draw_frequency", check_strategy_frequency),
        timed("stream_draw_counts", check_stream_counts),
        timed("training_reproducibility", check_training_reproducibility),
    ];
    VerifyReport { checks }
}

// ── Shared fixtures ─────────────────────────────────────────────────────────

struct MaskInstance {
    n: usize,
    real: usize,
    cfg: AttentionConfig,
    attn_m: AttentionMaskVector,
    masked: MaskedSet,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
}

/// Random non-causal instance: 2..=6 tokens, a real prefix of at least two,
/// and a masked set that is a nonempty proper subset of the real tokens.
fn random_instance(rng: &mut ChaCha8Rng) -> MaskInstance {
    let n = rng.random_range(2..=6usize);
    let real = rng.random_range(2..=n);
    let heads = rng.random_range(1..=2usize);
    let dh = rng.random_range(1..=3usize);
    let cfg = AttentionConfig { d_emb: heads * dh, heads };
    let attn_m = AttentionMaskVector::with_prefix_real(real, n);
    let mut masked: Vec<usize> = (0..real).filter(|_| rng.random::<f64>() < 0.5).collect();
    if masked.is_empty() {
        masked.push(rng.random_range(0..real));
    }
    if masked.len() == real {
        masked.pop();
    }
    let size = n * cfg.d_emb;
    let mut draw = |_: usize| rng.random::<f64>() * 4.0 - 2.0;
    MaskInstance {
        n,
        real,
        cfg,
        attn_m,
        masked: MaskedSet::from_indices(masked),
        q: (0..size).map(&mut draw).collect(),
        k: (0..size).map(&mut draw).collect(),
        v: (0..size).map(&mut draw).collect(),
    }
}

/// Post-softmax weights `[1, H, n, n]` for one instance under `allow`.
fn instance_weights(inst: &MaskInstance, allow: &AllowMatrix) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let shape = vec![1, inst.n, inst.cfg.d_emb];
    let q = tape.constant(Tensor::new(shape.clone(), inst.q.clone())?);
    let k = tape.constant(Tensor::new(shape.clone(), inst.k.clone())?);
    let v = tape.constant(Tensor::new(shape, inst.v.clone())?);
    let q = tape.split_heads(q, inst.cfg.heads)?;
    let k = tape.split_heads(k, inst.cfg.heads)?;
    let v = tape.split_heads(v, inst.cfg.heads)?;
    let additive = expand_to_additive(allow, 1, inst.cfg.heads)?;
    let out = masked_attention(&mut tape, q, k, v, Some(&additive), &inst.cfg)?;
    Ok(tape.data(out.weights).to_vec())
}

// ── Check 1: sibling masking isolates the token both ways ───────────────────

fn check_siblings_one_hot(tamper: bool) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_self: f64 = 1.0;
    let mut worst_leak: f64 = 0.0;
    for i in 0..200 {
        let inst = random_instance(&mut rng);
        let mut allow =
            build_allow_matrix(MaskStrategy::Siblings, &inst.masked, &inst.attn_m, false)?;
        if tamper && i == 0 {
            let t = inst.masked.iter().next().expect("nonempty");
            let j = (0..inst.real).find(|j| *j != t).expect("real >= 2");
            allow.set(t, j, true);
        }
        let w = instance_weights(&inst, &allow)?;
        let n = inst.n;
        for h in 0..inst.cfg.heads {
            let at = |q: usize, k: usize| w[h * n * n + q * n + k];
            for t in inst.masked.iter() {
                worst_self = worst_self.min(at(t, t));
                if at(t, t) < 1.0 - ONE_HOT_TOL {
                    return Err(fail(format!(
                        "instance {i}, head {h}: masked token {t} keeps weight {} on itself",
                        at(t, t)
                    )));
                }
                for j in 0..n {
                    let leak = if j == t { 0.0 } else { at(t, j) };
                    worst_leak = worst_leak.max(leak);
                    if leak > LEAK_TOL {
                        return Err(fail(format!(
                            "instance {i}, head {h}: masked token {t} attends to {j} with {leak}"
                        )));
                    }
                }
                for r in 0..n {
                    let leak = if r == t { 0.0 } else { at(r, t) };
                    worst_leak = worst_leak.max(leak);
                    if leak > LEAK_TOL {
                        return Err(fail(format!(
                            "instance {i}, head {h}: token {r} attends to masked {t} with {leak}"
                        )));
                    }
                }
            }
        }
    }
    Ok(format!(
        "200 instances: min self-weight {worst_self:.3e}, max leakage {worst_leak:.3e}"
    ))
}

// ── Check 2: self masking removes the whole column ──────────────────────────

fn check_self_mask_column() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let inst = random_instance(&mut rng);
        let allow =
            build_allow_matrix(MaskStrategy::SelfMask, &inst.masked, &inst.attn_m, false)?;
        let w = instance_weights(&inst, &allow)?;
        let n = inst.n;
        for h in 0..inst.cfg.heads {
            for t in inst.masked.iter() {
                for r in 0..n {
                    let leak = w[h * n * n + r * n + t];
                    worst = worst.max(leak);
                    if leak > LEAK_TOL {
                        return Err(fail(format!(
                            "instance {i}, head {h}: row {r} keeps weight {leak} on self-masked column {t}"
                        )));
                    }
                }
            }
        }
    }
    Ok(format!("200 instances: max column weight {worst:.3e}"))
}

// ── Check 3: an empty mask changes no bits ──────────────────────────────────

fn tiny_classifier_cfg() -> ModelConfig {
    ModelConfig {
        arch: Architecture::Classifier,
        vocab: 9,
        d_emb: 8,
        heads: 2,
        layers: 1,
        max_len: 6,
        classes: 3,
        hidden_dropout: 0.0,
    }
}

fn tiny_batch() -> Result<TokenBatch> {
    TokenBatch::from_rows(&[vec![BOS, 4, 5, 6], vec![BOS, 7, 8, 4, 5]], PAD)
}

fn classifier_logits(
    model: &Model,
    params: &ParamSet,
    batch: &TokenBatch,
    rng: &TrainRng,
    stack: &RegularizerStack,
    mode: Mode,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = tape.bind(params);
    let fctx = ForwardCtx {
        mode,
        step: 0,
        strategy: MaskStrategy::Siblings,
        decoder_strategy: MaskStrategy::Siblings,
        rng,
        stack,
        pinned: None,
    };
    let logits = model.forward_classifier(&mut tape, &vars, batch, &fctx)?;
    Ok(tape.data(logits).to_vec())
}

fn check_zero_mask_identity() -> Result<String> {
    // Attention level: an all-true allow matrix must expand to literal zeros
    // and leave every output bit alone.
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for i in 0..50 {
        let inst = random_instance(&mut rng);
        let allow = AllowMatrix::new_all(inst.n, inst.n, true);
        let additive = expand_to_additive(&allow, 1, inst.cfg.heads)?;
        if additive.values().iter().any(|v| v.to_bits() != 0.0f64.to_bits()) {
            return Err(fail(format!("instance {i}: all-true mask expands to nonzero values")));
        }
        let mut tape = Tape::new();
        let shape = vec![1, inst.n, inst.cfg.d_emb];
        let q = tape.constant(Tensor::new(shape.clone(), inst.q.clone())?);
        let k = tape.constant(Tensor::new(shape.clone(), inst.k.clone())?);
        let v = tape.constant(Tensor::new(shape, inst.v.clone())?);
        let q = tape.split_heads(q, inst.cfg.heads)?;
        let k = tape.split_heads(k, inst.cfg.heads)?;
        let v = tape.split_heads(v, inst.cfg.heads)?;
        let masked = masked_attention(&mut tape, q, k, v, Some(&additive), &inst.cfg)?;
        let plain = masked_attention(&mut tape, q, k, v, None, &inst.cfg)?;
        let a = tape.data(masked.output);
        let b = tape.data(plain.output);
        if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return Err(fail(format!("instance {i}: zero additive mask changed output bits")));
        }
    }

    // Model level: token masking at rate zero selects nobody, so a training
    // forward must be bit-identical to the unregularized scheme.
    let rng = TrainRng::new(7);
    let mut params = ParamSet::new();
    let model = Model::new(tiny_classifier_cfg(), &mut params, &rng)?;
    let batch = tiny_batch()?;
    let none = RegularizerStack::from_spec(&RegularizerSpec::default())?;
    let spec = RegularizerSpec {
        scheme: "tlm".parse()?,
        rate: 0.0,
        ..RegularizerSpec::default()
    };
    let zero = RegularizerStack::from_spec(&spec)?;
    let a = classifier_logits(&model, &params, &batch, &rng, &none, Mode::Train)?;
    let b = classifier_logits(&model, &params, &batch, &rng, &zero, Mode::Train)?;
    if a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
        return Err(fail("rate-zero token masking changed training logits".to_string()));
    }
    Ok("50 attention instances and a model forward, all bit-identical".to_string())
}

// ── Check 4: evaluation ignores the regularizer entirely ────────────────────

fn check_eval_scheme_invariance() -> Result<String> {
    let rng = TrainRng::new(11);
    let mut params = ParamSet::new();
    let model = Model::new(tiny_classifier_cfg(), &mut params, &rng)?;
    let batch = tiny_batch()?;
    let baseline = classifier_logits(
        &model,
        &params,
        &batch,
        &rng,
        &RegularizerStack::from_spec(&RegularizerSpec::default())?,
        Mode::Eval,
    )?;
    let mut tried = 0;
    for (i, scheme) in Scheme::all_combinations().into_iter().cycle().take(16).enumerate() {
        let spec = RegularizerSpec {
            scheme,
            rate: [0.05, 0.1, 0.2, 0.3][i % 4],
            p_self: [0.0, 0.5, 1.0][i % 3],
            encoder_rate: if i % 2 == 0 { Some(0.15) } else { None },
            decoder_rate: None,
            cross_attention_tlm: i % 2 == 1,
            independent_strategy_draws: i % 3 == 0,
        };
        spec.validate()?;
        let stack = RegularizerStack::from_spec(&spec)?;
        let logits = classifier_logits(&model, &params, &batch, &rng, &stack, Mode::Eval)?;
        if logits.iter().zip(&baseline).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return Err(fail(format!(
                "spec {i} ({}) changed evaluation logits",
                spec.scheme
            )));
        }
        tried += 1;
    }
    Ok(format!("{tried} regularizer specs, evaluation logits bit-identical"))
}

// ── Check 5: tape attention equals the scalar-loop reference ────────────────

fn check_attention_matches_reference() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let batch = rng.random_range(1..=2usize);
        let n = rng.random_range(2..=6usize);
        let heads = rng.random_range(1..=2usize);
        let dh = rng.random_range(1..=3usize);
        let cfg = AttentionConfig { d_emb: heads * dh, heads };
        let causal = rng.random::<f64>() < 0.5;
        let mut allows = Vec::with_capacity(batch);
        for _ in 0..batch {
            let real = rng.random_range(1..=n);
            let attn_m = AttentionMaskVector::with_prefix_real(real, n);
            let strategy = match rng.random_range(0..3u8) {
                0 => MaskStrategy::None,
                1 => MaskStrategy::Siblings,
                _ => MaskStrategy::SelfMask,
            };
            let masked = if strategy == MaskStrategy::None || real < 2 {
                MaskedSet::empty()
            } else {
                let keep: Vec<usize> =
                    (0..real).filter(|_| rng.random::<f64>() < 0.4).take(real - 1).collect();
                MaskedSet::from_indices(keep)
            };
            allows.push(build_allow_matrix(strategy, &masked, &attn_m, causal)?);
        }
        // Both paths take head-split `[B, H, N, dh]` buffers.
        let split_len = batch * heads * n * dh;
        let mut draw = |_: usize| rng.random::<f64>() * 4.0 - 2.0;
        let qs: Vec<f64> = (0..split_len).map(&mut draw).collect();
        let ks: Vec<f64> = (0..split_len).map(&mut draw).collect();
        let vs: Vec<f64> = (0..split_len).map(&mut draw).collect();
        let reference = reference_attention(&qs, &ks, &vs, &allows, batch, n, &cfg)?;

        let mut tape = Tape::new();
        let shape = vec![batch, heads, n, dh];
        let q = tape.constant(Tensor::new(shape.clone(), qs.clone())?);
        let k = tape.constant(Tensor::new(shape.clone(), ks.clone())?);
        let v = tape.constant(Tensor::new(shape, vs.clone())?);
        let additive = expand_batch_to_additive(&allows, cfg.heads)?;
        let out = masked_attention(&mut tape, q, k, v, Some(&additive), &cfg)?;

        let d_out = crate::oracle::max_abs_diff(tape.data(out.output), &reference.output);
        let d_w = crate::oracle::max_abs_diff(tape.data(out.weights), &reference.weights);
        worst = worst.max(d_out).max(d_w);
        if d_out > ORACLE_TOL || d_w > ORACLE_TOL {
            return Err(fail(format!(
                "instance {i}: output differs by {d_out:.3e}, weights by {d_w:.3e}"
            )));
        }
    }
    Ok(format!("200 instances: max |tape - reference| = {worst:.3e}"))
}

// ── Check 6: backward pass against central finite differences ───────────────

/// Loss as a pure function of the parameters: training-mode forward with
/// pinned masked sets, a fixed strategy, and every stochastic rate at zero.
fn fd_classifier_loss(
    model: &Model,
    params: &ParamSet,
    batch: &TokenBatch,
    targets: &[usize],
    rng: &TrainRng,
    stack: &RegularizerStack,
    pinned: &PinnedMasks,
    grads: Option<&mut ParamSet>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = tape.bind(params);
    let fctx = ForwardCtx {
        mode: Mode::Train,
        step: 0,
        strategy: MaskStrategy::Siblings,
        decoder_strategy: MaskStrategy::Siblings,
        rng,
        stack,
        pinned: Some(pinned),
    };
    let logits = model.forward_classifier(&mut tape, &vars, batch, &fctx)?;
    let loss = tape.cross_entropy(logits, targets)?;
    let value = tape.value_scalar(loss)?;
    if let Some(gp) = grads {
        gp.zero_grads();
        tape.backward(loss)?;
        tape.export_grads(gp);
    }
    Ok(value)
}

/// Compare every analytic parameter gradient of a small masked classifier
/// against central finite differences. Returns (coordinates checked, max
/// relative error). Exposed so the acceptance gate can reuse it.
pub fn gradient_check_classifier() -> Result<(usize, f64)> {
    let cfg = ModelConfig {
        arch: Architecture::Classifier,
        vocab: 11,
        d_emb: 8,
        heads: 2,
        layers: 1,
        max_len: 4,
        classes: 3,
        hidden_dropout: 0.0,
    };
    let rng = TrainRng::new(13);
    let mut params = ParamSet::new();
    let model = Model::new(cfg, &mut params, &rng)?;
    let batch = TokenBatch::from_rows(&[vec![BOS, 4, 5], vec![BOS, 9, 10], vec![BOS, 6, 4]], PAD)?;
    let targets = vec![0usize, 1, 2];
    let spec = RegularizerSpec { scheme: "tlm".parse()?, ..RegularizerSpec::default() };
    let stack = RegularizerStack::from_spec(&spec)?;
    let mut pinned = PinnedMasks::new();
    for seq in 0..3 {
        pinned.pin(AttentionSite::EncoderSelf, 0, seq, MaskedSet::from_indices([1]));
    }

    let mut with_grads = params.clone();
    fd_classifier_loss(&model, &params, &batch, &targets, &rng, &stack, &pinned, Some(&mut with_grads))?;

    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for id in params.ids() {
        for c in 0..params.data(id).len() {
            let orig = params.data(id)[c];
            params.data_mut(id)[c] = orig + FD_STEP;
            let up = fd_classifier_loss(&model, &params, &batch, &targets, &rng, &stack, &pinned, None)?;
            params.data_mut(id)[c] = orig - FD_STEP;
            let down = fd_classifier_loss(&model, &params, &batch, &targets, &rng, &stack, &pinned, None)?;
            params.data_mut(id)[c] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            let ad = with_grads.grad(id)[c];
            let err = (ad - fd).abs() / fd.abs().max(ad.abs()).max(1.0);
            worst = worst.max(err);
            if err > GRAD_TOL {
                return Err(fail(format!(
                    "param `{}`[{c}]: analytic {ad:.6e} vs finite difference {fd:.6e} (rel {err:.3e})",
                    params.name(id)
                )));
            }
            checked += 1;
        }
    }
    Ok((checked, worst))
}

fn fd_seq2seq_loss(
    model: &Model,
    params: &ParamSet,
    src: &TokenBatch,
    dec_in: &TokenBatch,
    targets: &[usize],
    active: &[bool],
    rng: &TrainRng,
    stack: &RegularizerStack,
    pinned: &PinnedMasks,
    grads: Option<&mut ParamSet>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = tape.bind(params);
    let fctx = ForwardCtx {
        mode: Mode::Train,
        step: 0,
        strategy: MaskStrategy::Siblings,
        decoder_strategy: MaskStrategy::SelfMask,
        rng,
        stack,
        pinned: Some(pinned),
    };
    let logits = model.forward_seq2seq(&mut tape, &vars, src, dec_in, &fctx)?;
    let rows = src.batch * dec_in.seq;
    let vocab = model.cfg.vocab;
    let flat = tape.reshape(logits, vec![rows, vocab])?;
    let loss = tape.cross_entropy_masked(flat, targets, active)?;
    let value = tape.value_scalar(loss)?;
    if let Some(gp) = grads {
        gp.zero_grads();
        tape.backward(loss)?;
        tape.export_grads(gp);
    }
    Ok(value)
}

/// Same finite-difference comparison for the encoder-decoder path, with
/// pinned masked sets at all three attention sites (self, causal self, and
/// cross-attention keys).
pub fn gradient_check_seq2seq() -> Result<(usize, f64)> {
    let cfg = ModelConfig {
        arch: Architecture::Seq2Seq,
        vocab: 9,
        d_emb: 6,
        heads: 2,
        layers: 1,
        max_len: 4,
        classes: 9,
        hidden_dropout: 0.0,
    };
    let rng = TrainRng::new(17);
    let mut params = ParamSet::new();
    let model = Model::new(cfg, &mut params, &rng)?;
    let src = TokenBatch::from_rows(&[vec![4, 5, 6], vec![7, 8, 4]], PAD)?;
    let dec_in = TokenBatch::from_rows(&[vec![BOS, 4, 5], vec![BOS, 7, 8]], PAD)?;
    let targets = vec![4, 5, 6, 7, 8, 4];
    let active = vec![true; 6];
    let spec = RegularizerSpec {
        scheme: "tlm".parse()?,
        cross_attention_tlm: true,
        ..RegularizerSpec::default()
    };
    let stack = RegularizerStack::from_spec(&spec)?;
    let mut pinned = PinnedMasks::new();
    for seq in 0..2 {
        pinned.pin(AttentionSite::EncoderSelf, 0, seq, MaskedSet::from_indices([1]));
        pinned.pin(AttentionSite::DecoderSelf, 0, seq, MaskedSet::from_indices([1]));
        pinned.pin(AttentionSite::Cross, 0, seq, MaskedSet::from_indices([2]));
    }

    let mut with_grads = params.clone();
    fd_seq2seq_loss(
        &model, &params, &src, &dec_in, &targets, &active, &rng, &stack, &pinned,
        Some(&mut with_grads),
    )?;

    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for id in params.ids() {
        for c in 0..params.data(id).len() {
            let orig = params.data(id)[c];
            params.data_mut(id)[c] = orig + FD_STEP;
            let up = fd_seq2seq_loss(
                &model, &params, &src, &dec_in, &targets, &active, &rng, &stack, &pinned, None,
            )?;
            params.data_mut(id)[c] = orig - FD_STEP;
            let down = fd_seq2seq_loss(
                &model, &params, &src, &dec_in, &targets, &active, &rng, &stack, &pinned, None,
            )?;
            params.data_mut(id)[c] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            let ad = with_grads.grad(id)[c];
            let err = (ad - fd).abs() / fd.abs().max(ad.abs()).max(1.0);
            worst = worst.max(err);
            if err > GRAD_TOL {
                return Err(fail(format!(
                    "param `{}`[{c}]: analytic {ad:.6e} vs finite difference {fd:.6e} (rel {err:.3e})",
                    params.name(id)
                )));
            }
            checked += 1;
        }
    }
    Ok((checked, worst))
}

fn check_gradients() -> Result<String> {
    let (n1, e1) = gradient_check_classifier()?;
    let (n2, e2) = gradient_check_seq2seq()?;
    Ok(format!(
        "classifier {n1} coords (max rel {e1:.3e}), encoder-decoder {n2} coords (max rel {e2:.3e})"
    ))
}

// ── Check 7: token selection hits its Bernoulli rate ────────────────────────

fn check_selection_rate() -> Result<String> {
    let mut details = Vec::new();
    let attn_m = AttentionMaskVector::full(10);
    for (i, &rate) in [0.05, 0.1, 0.2].iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + i as u64);
        let trials = 10_000;
        let mut selected = 0usize;
        for _ in 0..trials {
            selected += select_masked_tokens(&attn_m, rate, &mut rng)?.len();
        }
        let mean = selected as f64 / (trials * 10) as f64;
        if (mean - rate).abs() > 0.01 {
            return Err(fail(format!(
                "rate {rate}: observed fraction {mean:.4} is off by more than 0.01"
            )));
        }
        details.push(format!("{rate}->{mean:.4}"));
    }
    Ok(format!("10k sequences of 10 tokens each: {}", details.join(", ")))
}

// ── Check 8: strategy draw hits p_self ──────────────────────────────────────

fn check_strategy_frequency() -> Result<String> {
    let mut details = Vec::new();
    for (i, &p) in [0.25, 0.5, 0.75].iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + i as u64);
        let trials = 10_000;
        let selfs = (0..trials)
            .filter(|_| matches!(draw_strategy(p, &mut rng), Ok(MaskStrategy::SelfMask)))
            .count();
        let freq = selfs as f64 / trials as f64;
        if (freq - p).abs() > 0.02 {
            return Err(fail(format!(
                "p_self {p}: observed self-mask frequency {freq:.4} is off by more than 0.02"
            )));
        }
        details.push(format!("{p}->{freq:.4}"));
    }
    Ok(format!("10k draws each: {}", details.join(", ")))
}

// ── Check 9: exactly the expected number of stream draws ────────────────────

fn tiny_copy_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.task = TaskKind::Copy;
    cfg.vocab = 6;
    cfg.min_len = 2;
    cfg.max_len = 3;
    cfg.train_examples = 8;
    cfg.eval_examples = 4;
    cfg.data_seed = 3;
    cfg.d_emb = 8;
    cfg.heads = 2;
    cfg.layers = 1;
    cfg.hidden_dropout = 0.0;
    cfg.batch_size = 4;
    cfg.max_epochs = 1;
    cfg.patience = 0;
    cfg.scheme = "tlm".parse().expect("known scheme");
    cfg
}

fn check_stream_counts() -> Result<String> {
    let cfg = tiny_copy_config();
    let spec = DatasetSpec {
        task: cfg.task,
        vocab: cfg.vocab,
        min_len: cfg.min_len,
        max_len: cfg.max_len,
        train: cfg.train_examples,
        eval: cfg.eval_examples,
        seed: cfg.data_seed,
    };
    let dataset = crate::tasks::generate_dataset(&spec)?;
    let model = ModelConfig {
        arch: Architecture::Seq2Seq,
        vocab: dataset.vocab,
        d_emb: cfg.d_emb,
        heads: cfg.heads,
        layers: cfg.layers,
        max_len: 4,
        classes: dataset.classes,
        hidden_dropout: 0.0,
    };
    let (rng, trace) = TrainRng::traced(cfg.seed);
    train_with_rng("trace", &model, &dataset, &cfg.train_cfg(), &cfg.reg_spec(), rng, None)?;
    let events = trace.lock().expect("trace lock").clone();
    let count = |p: StreamPurpose| events.iter().filter(|e| e.purpose == p).count();

    // 8 examples, batch 4, one epoch: 2 optimization steps. One strategy draw
    // per step; one token-mask stream per (layer, sequence, site) per
    // training forward; the final-epoch evaluation runs in eval mode and must
    // draw nothing extra.
    let steps = 2;
    let strategy = count(StreamPurpose::Strategy);
    if strategy != steps {
        return Err(fail(format!("expected {steps} strategy draws, saw {strategy}")));
    }
    // Encoder self plus decoder self per sequence: 2 sites x 1 layer x 8 rows.
    let token = count(StreamPurpose::TokenMask);
    if token != 16 {
        return Err(fail(format!("expected 16 token-mask streams, saw {token}")));
    }
    let cross = count(StreamPurpose::CrossMask);
    if cross != 0 {
        return Err(fail(format!("cross-attention masking is off, yet saw {cross} draws")));
    }
    let order = count(StreamPurpose::BatchOrder);
    if order != 1 {
        return Err(fail(format!("expected 1 batch-order stream, saw {order}")));
    }
    let dropout = count(StreamPurpose::AttDropout) + count(StreamPurpose::DropHead);
    if dropout != 0 {
        return Err(fail(format!("dropout is off, yet saw {dropout} draws")));
    }
    Ok(format!(
        "one epoch: {strategy} strategy, {token} token-mask, {order} batch-order draws, no spurious streams"
    ))
}

// ── Check 10: a rerun reproduces every byte ─────────────────────────────────

fn check_training_reproducibility() -> Result<String> {
    let mut cfg = tiny_copy_config();
    cfg.max_epochs = 2;
    let run = |c: &ExperimentConfig| -> Result<String> {
        let exp = c.build()?;
        let record = crate::training::train(
            &exp.run_id,
            &exp.model,
            &exp.dataset,
            &c.train_cfg(),
            &c.reg_spec(),
        )?;
        Ok(metrics_csv(&record))
    };
    let first = run(&cfg)?;
    let second = run(&cfg)?;
    if first != second {
        return Err(fail("two identical runs produced different metrics".to_string()));
    }
    Ok(format!("two runs, {} bytes of metrics, byte-identical", first.len()))
}
