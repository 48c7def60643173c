//! Acceptance gate. Twelve checks, each pinning one promised behavior to a
//! fixed tolerance and (where it matters) a runtime budget. Every test prints
//! a single `PASS criterion NN` line; run with `--nocapture` to see them.
//!
//! The two training criteria (09, 10) run real experiments and dominate the
//! suite's wall clock. Their configs are frozen; changing them invalidates
//! the calibrated expectations stated in the asserts.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

use tlm_core::attention::{masked_attention, AttentionConfig};
use tlm_core::config::ExperimentConfig;
use tlm_core::mask::{
    build_allow_matrix, draw_strategy, expand_batch_to_additive, expand_to_additive,
    select_masked_tokens, AllowMatrix, AttentionMaskVector, MaskStrategy, MaskedSet,
};
use tlm_core::oracle::{max_abs_diff, reference_attention};
use tlm_core::params::ParamSet;
use tlm_core::regularizer::{Mode, RegularizerSpec, RegularizerStack, Scheme};
use tlm_core::rng::{StreamPurpose, TrainRng};
use tlm_core::sweep::{expand, rows_to_csv, run_sweep, GridSpec, SweepRow};
use tlm_core::tasks::{generate_dataset, DatasetSpec, TaskKind, BOS, PAD};
use tlm_core::tensor::{Tape, Tensor};
use tlm_core::training::{
    gap_trend_experiment, metrics_csv, train, train_with_rng, TrainConfig,
};
use tlm_core::transformer::{Architecture, ForwardCtx, Model, ModelConfig, TokenBatch};
use tlm_core::verify;

const LEAK_TOL: f64 = 1e-12;
const ONE_HOT_TOL: f64 = 1e-9;
const ORACLE_TOL: f64 = 1e-10;
const GRAD_TOL: f64 = 1e-4;
const RATE_TOL: f64 = 0.01;
const STRATEGY_TOL: f64 = 0.02;

// ── Shared fixtures ──────────────────────────────────────────────────────────

struct Instance {
    n: usize,
    cfg: AttentionConfig,
    attn_m: AttentionMaskVector,
    masked: MaskedSet,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
}

/// Random non-causal attention instance: up to 6 tokens, a real prefix of at
/// least two, and a masked set that is a nonempty proper subset of the real
/// tokens (so no row ever loses every key and the fallback stays out of the
/// picture).
fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.random_range(2..=6usize);
    let real = rng.random_range(2..=n);
    let heads = rng.random_range(1..=2usize);
    let dh = rng.random_range(1..=3usize);
    let cfg = AttentionConfig { d_emb: heads * dh, heads };
    let mut masked: Vec<usize> = (0..real).filter(|_| rng.random::<f64>() < 0.5).collect();
    if masked.is_empty() {
        masked.push(rng.random_range(0..real));
    }
    if masked.len() == real {
        masked.pop();
    }
    let size = n * cfg.d_emb;
    let mut draw = |_: usize| rng.random::<f64>() * 4.0 - 2.0;
    Instance {
        n,
        cfg,
        attn_m: AttentionMaskVector::with_prefix_real(real, n),
        masked: MaskedSet::from_indices(masked),
        q: (0..size).map(&mut draw).collect(),
        k: (0..size).map(&mut draw).collect(),
        v: (0..size).map(&mut draw).collect(),
    }
}

/// Post-softmax weights `[1, H, n, n]` for one instance under `allow`.
fn instance_weights(inst: &Instance, allow: &AllowMatrix) -> Vec<f64> {
    let mut tape = Tape::new();
    let shape = vec![1, inst.n, inst.cfg.d_emb];
    let q = tape.constant(Tensor::new(shape.clone(), inst.q.clone()).unwrap());
    let k = tape.constant(Tensor::new(shape.clone(), inst.k.clone()).unwrap());
    let v = tape.constant(Tensor::new(shape, inst.v.clone()).unwrap());
    let q = tape.split_heads(q, inst.cfg.heads).unwrap();
    let k = tape.split_heads(k, inst.cfg.heads).unwrap();
    let v = tape.split_heads(v, inst.cfg.heads).unwrap();
    let additive = expand_to_additive(allow, 1, inst.cfg.heads).unwrap();
    let out = masked_attention(&mut tape, q, k, v, Some(&additive), &inst.cfg).unwrap();
    tape.data(out.weights).to_vec()
}

fn tiny_classifier() -> (Model, ParamSet, TokenBatch, TrainRng) {
    let cfg = ModelConfig {
        arch: Architecture::Classifier,
        vocab: 9,
        d_emb: 8,
        heads: 2,
        layers: 2,
        max_len: 6,
        classes: 3,
        hidden_dropout: 0.0,
    };
    let rng = TrainRng::new(7);
    let mut params = ParamSet::new();
    let model = Model::new(cfg, &mut params, &rng).unwrap();
    let batch = TokenBatch::from_rows(&[vec![BOS, 4, 5, 6], vec![BOS, 7, 8, 4, 5]], PAD).unwrap();
    (model, params, batch, rng)
}

fn tiny_seq2seq() -> (Model, ParamSet, TokenBatch, TokenBatch, TrainRng) {
    let cfg = ModelConfig {
        arch: Architecture::Seq2Seq,
        vocab: 9,
        d_emb: 8,
        heads: 2,
        layers: 1,
        max_len: 6,
        classes: 9,
        hidden_dropout: 0.0,
    };
    let rng = TrainRng::new(13);
    let mut params = ParamSet::new();
    let model = Model::new(cfg, &mut params, &rng).unwrap();
    let src = TokenBatch::from_rows(&[vec![4, 5, 6], vec![7, 8]], PAD).unwrap();
    let dec = TokenBatch::from_rows(&[vec![BOS, 4, 5], vec![BOS, 7]], PAD).unwrap();
    (model, params, src, dec, rng)
}

fn classifier_logits(
    model: &Model,
    params: &ParamSet,
    batch: &TokenBatch,
    rng: &TrainRng,
    stack: &RegularizerStack,
    mode: Mode,
) -> Vec<f64> {
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
    let logits = model.forward_classifier(&mut tape, &vars, batch, &fctx).unwrap();
    tape.data(logits).to_vec()
}

fn seq2seq_eval_logits(
    model: &Model,
    params: &ParamSet,
    src: &TokenBatch,
    dec: &TokenBatch,
    rng: &TrainRng,
    stack: &RegularizerStack,
) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars = tape.bind(params);
    let fctx = ForwardCtx::eval(rng, stack);
    let logits = model.forward_seq2seq(&mut tape, &vars, src, dec, &fctx).unwrap();
    tape.data(logits).to_vec()
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

// ── Criterion 1: siblings masking ────────────────────────────────────────────

#[test]
fn c01_siblings_masking_isolates_each_masked_token_both_ways() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut min_self: f64 = 1.0;
    let mut max_leak: f64 = 0.0;
    for _ in 0..1000 {
        let inst = random_instance(&mut rng);
        let allow =
            build_allow_matrix(MaskStrategy::Siblings, &inst.masked, &inst.attn_m, false).unwrap();
        let w = instance_weights(&inst, &allow);
        let n = inst.n;
        for h in 0..inst.cfg.heads {
            let at = |q: usize, k: usize| w[h * n * n + q * n + k];
            for t in inst.masked.iter() {
                min_self = min_self.min(at(t, t));
                assert!(
                    at(t, t) >= 1.0 - ONE_HOT_TOL,
                    "masked token {t} keeps only {} weight on itself",
                    at(t, t)
                );
                for j in 0..n {
                    if j != t {
                        max_leak = max_leak.max(at(t, j)).max(at(j, t));
                        assert!(at(t, j) <= LEAK_TOL, "row leak at ({t},{j}): {}", at(t, j));
                        assert!(at(j, t) <= LEAK_TOL, "column leak at ({j},{t}): {}", at(j, t));
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 10.0, "took {secs:.1}s, budget is 10s");
    println!(
        "PASS criterion 01: siblings masking, 1000 instances, min self-weight {min_self:.3e}, \
         max leak {max_leak:.3e}, {secs:.2}s"
    );
}

// ── Criterion 2: self masking ────────────────────────────────────────────────

#[test]
fn c02_self_masking_zeroes_the_whole_column_including_the_diagonal() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    let mut max_col: f64 = 0.0;
    for _ in 0..1000 {
        let inst = random_instance(&mut rng);
        let allow =
            build_allow_matrix(MaskStrategy::SelfMask, &inst.masked, &inst.attn_m, false).unwrap();
        let w = instance_weights(&inst, &allow);
        let n = inst.n;
        for h in 0..inst.cfg.heads {
            for t in inst.masked.iter() {
                for r in 0..n {
                    let leak = w[h * n * n + r * n + t];
                    max_col = max_col.max(leak);
                    assert!(
                        leak <= LEAK_TOL,
                        "row {r} keeps {leak} on self-masked column {t} (diagonal included)"
                    );
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 10.0, "took {secs:.1}s, budget is 10s");
    println!(
        "PASS criterion 02: self masking, 1000 instances, max column weight {max_col:.3e}, \
         {secs:.2}s"
    );
}

// ── Criterion 3: the zero mask is the identity ───────────────────────────────

#[test]
fn c03_zero_additive_mask_and_rate_zero_masking_change_no_bits() {
    // Attention level: an all-true allow matrix expands to literal 0.0 and the
    // masked path reproduces the unmasked path bit for bit.
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    for _ in 0..100 {
        let inst = random_instance(&mut rng);
        let allow = AllowMatrix::new_all(inst.n, inst.n, true);
        let additive = expand_to_additive(&allow, 1, inst.cfg.heads).unwrap();
        assert!(
            additive.values().iter().all(|v| v.to_bits() == 0.0f64.to_bits()),
            "all-true allow matrix expanded to nonzero additive entries"
        );
        let mut tape = Tape::new();
        let shape = vec![1, inst.n, inst.cfg.d_emb];
        let q = tape.constant(Tensor::new(shape.clone(), inst.q.clone()).unwrap());
        let k = tape.constant(Tensor::new(shape.clone(), inst.k.clone()).unwrap());
        let v = tape.constant(Tensor::new(shape, inst.v.clone()).unwrap());
        let q = tape.split_heads(q, inst.cfg.heads).unwrap();
        let k = tape.split_heads(k, inst.cfg.heads).unwrap();
        let v = tape.split_heads(v, inst.cfg.heads).unwrap();
        let masked = masked_attention(&mut tape, q, k, v, Some(&additive), &inst.cfg).unwrap();
        let plain = masked_attention(&mut tape, q, k, v, None, &inst.cfg).unwrap();
        assert!(
            bits_equal(tape.data(masked.output), tape.data(plain.output))
                && bits_equal(tape.data(masked.weights), tape.data(plain.weights)),
            "a zero additive mask changed attention bits"
        );
    }

    // Model level: token masking at rate zero selects nobody, so a training
    // forward equals the unregularized scheme exactly.
    let (model, params, batch, rng) = tiny_classifier();
    let none = RegularizerStack::from_spec(&RegularizerSpec::default()).unwrap();
    let zero = RegularizerStack::from_spec(&RegularizerSpec {
        scheme: "tlm".parse().unwrap(),
        rate: 0.0,
        ..RegularizerSpec::default()
    })
    .unwrap();
    let a = classifier_logits(&model, &params, &batch, &rng, &none, Mode::Train);
    let b = classifier_logits(&model, &params, &batch, &rng, &zero, Mode::Train);
    assert!(bits_equal(&a, &b), "rate-zero token masking changed training logits");
    println!(
        "PASS criterion 03: zero mask identity, 100 attention instances and a rate-zero \
         training forward, all bit-identical"
    );
}

// ── Criterion 4: evaluation ignores every regularizer setting ────────────────

#[test]
fn c04_eval_logits_are_bit_identical_across_100_random_regularizer_specs() {
    let combos = Scheme::all_combinations();
    let mut rng = ChaCha8Rng::seed_from_u64(1004);
    let random_spec = |rng: &mut ChaCha8Rng| {
        let spec = RegularizerSpec {
            scheme: combos[rng.random_range(0..combos.len())].clone(),
            rate: rng.random::<f64>() * 0.9,
            p_self: rng.random::<f64>(),
            encoder_rate: (rng.random::<f64>() < 0.5).then(|| rng.random::<f64>() * 0.9),
            decoder_rate: (rng.random::<f64>() < 0.5).then(|| rng.random::<f64>() * 0.9),
            cross_attention_tlm: rng.random::<f64>() < 0.5,
            independent_strategy_draws: rng.random::<f64>() < 0.5,
        };
        spec.validate().unwrap();
        spec
    };

    let (model, params, batch, trng) = tiny_classifier();
    let baseline_stack = RegularizerStack::from_spec(&RegularizerSpec::default()).unwrap();
    let baseline = classifier_logits(&model, &params, &batch, &trng, &baseline_stack, Mode::Eval);

    let (s2s, s2s_params, src, dec, s2s_rng) = tiny_seq2seq();
    let s2s_baseline = seq2seq_eval_logits(&s2s, &s2s_params, &src, &dec, &s2s_rng, &baseline_stack);

    for i in 0..100 {
        let spec = random_spec(&mut rng);
        let stack = RegularizerStack::from_spec(&spec).unwrap();
        let logits = classifier_logits(&model, &params, &batch, &trng, &stack, Mode::Eval);
        assert!(
            bits_equal(&logits, &baseline),
            "spec {i} ({}) changed classifier evaluation logits",
            spec.scheme
        );
        let s2s_logits = seq2seq_eval_logits(&s2s, &s2s_params, &src, &dec, &s2s_rng, &stack);
        assert!(
            bits_equal(&s2s_logits, &s2s_baseline),
            "spec {i} ({}) changed seq2seq evaluation logits",
            spec.scheme
        );
    }
    println!(
        "PASS criterion 04: evaluation invariance, 100 random regularizer specs, classifier \
         and seq2seq logits bit-identical"
    );
}

// ── Criterion 5: tape attention equals the scalar-loop oracle ────────────────

#[test]
fn c05_masked_attention_matches_the_restricted_softmax_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1005);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
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
            allows.push(build_allow_matrix(strategy, &masked, &attn_m, causal).unwrap());
        }
        let split_len = batch * heads * n * dh;
        let mut draw = |_: usize| rng.random::<f64>() * 4.0 - 2.0;
        let qs: Vec<f64> = (0..split_len).map(&mut draw).collect();
        let ks: Vec<f64> = (0..split_len).map(&mut draw).collect();
        let vs: Vec<f64> = (0..split_len).map(&mut draw).collect();
        let reference = reference_attention(&qs, &ks, &vs, &allows, batch, n, &cfg).unwrap();

        let mut tape = Tape::new();
        let shape = vec![batch, heads, n, dh];
        let q = tape.constant(Tensor::new(shape.clone(), qs).unwrap());
        let k = tape.constant(Tensor::new(shape.clone(), ks).unwrap());
        let v = tape.constant(Tensor::new(shape, vs).unwrap());
        let additive = expand_batch_to_additive(&allows, cfg.heads).unwrap();
        let out = masked_attention(&mut tape, q, k, v, Some(&additive), &cfg).unwrap();

        let d_out = max_abs_diff(tape.data(out.output), &reference.output);
        let d_w = max_abs_diff(tape.data(out.weights), &reference.weights);
        worst = worst.max(d_out).max(d_w);
        assert!(
            d_out <= ORACLE_TOL && d_w <= ORACLE_TOL,
            "instance {i}: output off by {d_out:.3e}, weights by {d_w:.3e}"
        );
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 30.0, "took {secs:.1}s, budget is 30s");
    println!(
        "PASS criterion 05: oracle equivalence, 1000 instances, max |tape - oracle| \
         {worst:.3e}, {secs:.2}s"
    );
}

// ── Criterion 6: analytic gradients vs central finite differences ────────────

#[test]
fn c06_backward_pass_matches_finite_differences_with_masks_pinned() {
    let start = Instant::now();
    let (n_cls, rel_cls) = verify::gradient_check_classifier().unwrap();
    let (n_s2s, rel_s2s) = verify::gradient_check_seq2seq().unwrap();
    assert!(n_cls > 500 && n_s2s > 500, "gradient checks covered too few coordinates");
    assert!(
        rel_cls < GRAD_TOL,
        "classifier max relative gradient error {rel_cls:.3e} exceeds {GRAD_TOL:.0e}"
    );
    assert!(
        rel_s2s < GRAD_TOL,
        "seq2seq max relative gradient error {rel_s2s:.3e} exceeds {GRAD_TOL:.0e}"
    );
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "took {secs:.1}s, budget is 60s");
    println!(
        "PASS criterion 06: gradient integrity, {n_cls}+{n_s2s} coordinates, max relative \
         error {:.3e}, {secs:.2}s",
        rel_cls.max(rel_s2s)
    );
}

// ── Criterion 7: the draws hit their configured probabilities ────────────────

#[test]
fn c07_selection_and_strategy_draws_are_calibrated() {
    let attn_m = AttentionMaskVector::full(10);
    let trials = 10_000;
    let mut rate_obs = Vec::new();
    for (i, &rate) in [0.05, 0.1, 0.2].iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1700 + i as u64);
        let mut selected = 0usize;
        for _ in 0..trials {
            selected += select_masked_tokens(&attn_m, rate, &mut rng).unwrap().len();
        }
        let mean = selected as f64 / (trials * 10) as f64;
        assert!(
            (mean - rate).abs() <= RATE_TOL,
            "rate {rate}: observed masked fraction {mean:.4} off by more than {RATE_TOL}"
        );
        rate_obs.push(format!("{rate}->{mean:.4}"));
    }
    let mut strat_obs = Vec::new();
    for (i, &p) in [0.25, 0.5, 0.75].iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1800 + i as u64);
        let selfs = (0..trials)
            .filter(|_| matches!(draw_strategy(p, &mut rng), Ok(MaskStrategy::SelfMask)))
            .count();
        let freq = selfs as f64 / trials as f64;
        assert!(
            (freq - p).abs() <= STRATEGY_TOL,
            "p_self {p}: observed self-mask frequency {freq:.4} off by more than {STRATEGY_TOL}"
        );
        strat_obs.push(format!("{p}->{freq:.4}"));
    }
    println!(
        "PASS criterion 07: calibration over {trials} draws, masked fraction {}, self-mask \
         frequency {}",
        rate_obs.join(" "),
        strat_obs.join(" ")
    );
}

// ── Criterion 8: the training loop draws exactly what it should ──────────────

#[test]
fn c08_one_strategy_draw_per_step_and_one_mask_draw_per_layer_and_sequence() {
    // 8 copy examples, batch 4, one epoch: 2 optimization steps of 4 rows
    // each. Two self-attention sites (encoder, decoder) times 2 layers times
    // 4 rows times 2 steps = 32 token-mask streams. The final evaluation runs
    // in eval mode and must draw nothing.
    let spec = DatasetSpec {
        task: TaskKind::Copy,
        vocab: 6,
        min_len: 2,
        max_len: 3,
        train: 8,
        eval: 4,
        seed: 3,
    };
    let dataset = generate_dataset(&spec).unwrap();
    let model = ModelConfig {
        arch: Architecture::Seq2Seq,
        vocab: dataset.vocab,
        d_emb: 8,
        heads: 2,
        layers: 2,
        max_len: 4,
        classes: dataset.classes,
        hidden_dropout: 0.0,
    };
    let tcfg = TrainConfig {
        lr: 1e-3,
        batch_size: 4,
        max_epochs: 1,
        seed: 5,
        patience: 0,
        eval_every: 1,
        ..TrainConfig::default()
    };
    let run = |reg: &RegularizerSpec| {
        let (rng, trace) = TrainRng::traced(tcfg.seed);
        train_with_rng("trace", &model, &dataset, &tcfg, reg, rng, None).unwrap();
        let events = trace.lock().unwrap().clone();
        move |p: StreamPurpose| events.iter().filter(|e| e.purpose == p).count()
    };

    let tlm = RegularizerSpec {
        scheme: "tlm".parse().unwrap(),
        rate: 0.3,
        ..RegularizerSpec::default()
    };
    let count = run(&tlm);
    assert_eq!(count(StreamPurpose::Strategy), 2, "one strategy draw per optimization step");
    assert_eq!(
        count(StreamPurpose::TokenMask),
        32,
        "one masked-set draw per site, layer, and sequence in every training forward"
    );
    assert_eq!(count(StreamPurpose::CrossMask), 0, "cross-attention masking is off");
    assert_eq!(count(StreamPurpose::BatchOrder), 1, "one shuffle per epoch");
    assert_eq!(count(StreamPurpose::AttDropout), 0, "attention dropout is off");
    assert_eq!(count(StreamPurpose::DropHead), 0, "head dropout is off");

    // Opting in to cross-attention masking adds one stream per decoder layer
    // and sequence; independent strategies double the per-step draws.
    let full = RegularizerSpec {
        cross_attention_tlm: true,
        independent_strategy_draws: true,
        ..tlm
    };
    let count = run(&full);
    assert_eq!(count(StreamPurpose::Strategy), 4, "encoder and decoder draw separately");
    assert_eq!(count(StreamPurpose::TokenMask), 32);
    assert_eq!(count(StreamPurpose::CrossMask), 16, "2 layers x 4 rows x 2 steps");

    println!(
        "PASS criterion 08: stream counts, 2 strategy and 32 token-mask draws in the shared \
         setup, 4 and 32+16 with independent strategies and cross-attention masking"
    );
}

// ── Criterion 9: the vanilla model actually learns ───────────────────────────

#[test]
fn c09_vanilla_model_learns_the_copy_task_to_95_percent() {
    let start = Instant::now();
    let cfg = ExperimentConfig {
        task: TaskKind::Copy,
        vocab: 8,
        min_len: 2,
        max_len: 6,
        train_examples: 500,
        eval_examples: 100,
        data_seed: 11,
        d_emb: 32,
        heads: 2,
        layers: 1,
        hidden_dropout: 0.1,
        lr: 2e-3,
        batch_size: 32,
        max_epochs: 40,
        seed: 1,
        patience: 0,
        eval_every: 5,
        scheme: Scheme::none(),
        ..ExperimentConfig::default()
    };
    cfg.validate().unwrap();
    let exp = cfg.build().unwrap();
    let record =
        train(&exp.run_id, &exp.model, &exp.dataset, &cfg.train_cfg(), &cfg.reg_spec()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert!(
        record.epochs.len() <= 200,
        "needed {} epochs, budget is 200",
        record.epochs.len()
    );
    assert!(
        record.final_eval_accuracy >= 0.95,
        "eval sequence accuracy {:.3} below 0.95 after {} epochs",
        record.final_eval_accuracy,
        record.epochs.len()
    );
    assert!(secs < 300.0, "took {secs:.0}s, budget is 300s");
    println!(
        "PASS criterion 09: copy task, eval sequence accuracy {:.3} after {} epochs, {secs:.0}s",
        record.final_eval_accuracy,
        record.epochs.len()
    );
}

// ── Criterion 10: token masking narrows the train-eval gap ───────────────────

#[test]
fn c10_token_masking_shrinks_the_overfitting_gap_on_parity() {
    // 200 parity-pattern examples overfit readily: the vanilla arm lands
    // around a 0.37 mean gap over these five seeds. Deterministic training
    // makes the comparison exact rather than statistical; the margin was
    // calibrated once and stays fixed with the config below.
    let start = Instant::now();
    let cfg = ExperimentConfig {
        task: TaskKind::ParityPattern,
        vocab: 10,
        min_len: 8,
        max_len: 12,
        train_examples: 200,
        eval_examples: 200,
        data_seed: 21,
        d_emb: 32,
        heads: 2,
        layers: 2,
        hidden_dropout: 0.0,
        lr: 1.5e-3,
        batch_size: 32,
        max_epochs: 70,
        patience: 0,
        eval_every: 10,
        rate: 0.1,
        ..ExperimentConfig::default()
    };
    cfg.validate().unwrap();
    let exp = cfg.build().unwrap();
    let arm = |scheme: &str| RegularizerSpec {
        scheme: scheme.parse().unwrap(),
        rate: 0.1,
        ..RegularizerSpec::default()
    };
    let arms = vec![
        ("none".to_string(), RegularizerSpec::default()),
        ("tlm".to_string(), arm("tlm")),
        ("att_dropout".to_string(), arm("att_dropout")),
        ("drophead".to_string(), arm("drophead")),
    ];
    let seeds = [1, 2, 3, 4, 5];
    let table =
        gap_trend_experiment(&exp.model, &exp.dataset, &cfg.train_cfg(), &arms, &seeds).unwrap();
    let secs = start.elapsed().as_secs_f64();

    let mean = |s: &str| table.mean_gap(s).unwrap();
    let report: Vec<String> = ["none", "tlm", "att_dropout", "drophead"]
        .iter()
        .map(|s| format!("{s} {:.3}", mean(s)))
        .collect();
    assert!(
        mean("tlm") < mean("none"),
        "mean gap with token masking ({:.3}) is not below vanilla ({:.3}); arms: {}",
        mean("tlm"),
        mean("none"),
        report.join(", ")
    );
    assert!(secs < 1200.0, "took {secs:.0}s, budget is 1200s");
    println!(
        "PASS criterion 10: parity gap trend over {} seeds, mean gaps {}, {secs:.0}s",
        seeds.len(),
        report.join(" ")
    );
}

// ── Criterion 11: the sweep runner reproduces every ablation shape ───────────

#[test]
fn c11_sweeps_cover_combos_rates_encoder_decoder_and_p_self_grids() {
    // Shape and determinism only, so each cell trains a throwaway model for
    // one epoch. Grids land in separate directories under one tempdir.
    let dir = tempfile::tempdir().unwrap();
    let base = |sub: &str| ExperimentConfig {
        task: TaskKind::Copy,
        vocab: 8,
        min_len: 2,
        max_len: 3,
        train_examples: 16,
        eval_examples: 8,
        data_seed: 3,
        d_emb: 8,
        heads: 2,
        layers: 1,
        hidden_dropout: 0.0,
        lr: 1e-3,
        batch_size: 8,
        max_epochs: 1,
        patience: 0,
        eval_every: 1,
        scheme: "tlm".parse().unwrap(),
        out_dir: dir.path().join(sub).to_string_lossy().into_owned(),
        ..ExperimentConfig::default()
    };
    let complete = |rows: &[SweepRow]| {
        for r in rows {
            assert_eq!(r.status, "completed", "cell {}_s{} did not complete", r.config_hash, r.seed);
        }
        let csv = rows_to_csv(rows);
        for line in csv.lines() {
            assert_eq!(line.split(',').count(), 12, "short row in sweep csv: {line}");
        }
        csv
    };

    // 2^3 scheme combinations.
    let mut combo_base = base("combos");
    combo_base.scheme = Scheme::none();
    let combos = run_sweep(&combo_base, &GridSpec { combos: true, ..GridSpec::default() }).unwrap();
    let schemes: std::collections::BTreeSet<&str> =
        combos.rows.iter().map(|r| r.scheme.as_str()).collect();
    assert_eq!(combos.rows.len(), 8, "one row per scheme combination");
    assert_eq!(schemes.len(), 8, "all 8 combinations distinct");
    assert!(schemes.contains("none") && schemes.contains("tlm+att_dropout+drophead"));
    complete(&combos.rows);

    // Masking-rate grid.
    let rate_grid = GridSpec { rates: vec![0.05, 0.1, 0.15, 0.2], ..GridSpec::default() };
    let rates = run_sweep(&base("rates"), &rate_grid).unwrap();
    assert_eq!(
        rates.rows.iter().map(|r| r.rate).collect::<Vec<_>>(),
        vec![0.05, 0.1, 0.15, 0.2]
    );
    let first = complete(&rates.rows);

    // Same grid in a fresh directory: byte-identical rows.
    let again = run_sweep(&base("rates2"), &rate_grid).unwrap();
    assert_eq!(first, rows_to_csv(&again.rows), "rate grid is not deterministic");

    // Encoder x decoder rate grid.
    let ed = run_sweep(
        &base("enc_dec"),
        &GridSpec {
            encoder_rates: vec![0.0, 0.1],
            decoder_rates: vec![0.0, 0.1],
            ..GridSpec::default()
        },
    )
    .unwrap();
    let pairs: Vec<(f64, f64)> = ed.rows.iter().map(|r| (r.encoder_rate, r.decoder_rate)).collect();
    assert_eq!(pairs, vec![(0.0, 0.0), (0.0, 0.1), (0.1, 0.0), (0.1, 0.1)]);
    complete(&ed.rows);

    // p_self x rate grid.
    let ps = run_sweep(
        &base("p_self"),
        &GridSpec {
            rates: vec![0.05, 0.1, 0.15],
            p_selfs: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            ..GridSpec::default()
        },
    )
    .unwrap();
    assert_eq!(ps.rows.len(), 15);
    let distinct: std::collections::BTreeSet<String> =
        ps.rows.iter().map(|r| format!("{}/{}", r.rate, r.p_self)).collect();
    assert_eq!(distinct.len(), 15, "every (rate, p_self) cell distinct");
    complete(&ps.rows);

    // The cell expansion order itself is part of the contract.
    let cells = expand(&base("unused"), &rate_grid);
    assert_eq!(cells.iter().map(|c| c.rate).collect::<Vec<_>>(), vec![0.05, 0.1, 0.15, 0.2]);

    println!(
        "PASS criterion 11: sweep shapes, 8 scheme combos, 4 rates (rerun byte-identical), \
         2x2 encoder/decoder grid, 5x3 p_self grid"
    );
}

// ── Criterion 12: reruns reproduce every byte ────────────────────────────────

#[test]
fn c12_identical_config_and_seed_reproduce_the_metrics_csv_exactly() {
    // All three stochastic regularizers at once, plus hidden dropout, so every
    // consumer of randomness is on the replay path.
    let cfg = ExperimentConfig {
        task: TaskKind::Copy,
        vocab: 8,
        min_len: 2,
        max_len: 3,
        train_examples: 16,
        eval_examples: 8,
        data_seed: 3,
        d_emb: 8,
        heads: 2,
        layers: 1,
        hidden_dropout: 0.1,
        lr: 1e-3,
        batch_size: 8,
        max_epochs: 3,
        seed: 9,
        patience: 0,
        eval_every: 1,
        scheme: "tlm+att_dropout+drophead".parse().unwrap(),
        rate: 0.1,
        ..ExperimentConfig::default()
    };
    cfg.validate().unwrap();
    let run = || {
        let exp = cfg.build().unwrap();
        let record =
            train(&exp.run_id, &exp.model, &exp.dataset, &cfg.train_cfg(), &cfg.reg_spec())
                .unwrap();
        metrics_csv(&record)
    };
    let first = run();
    let second = run();
    assert_eq!(first, second, "two identical runs disagree on the metrics csv");
    assert!(first.lines().count() > 1, "metrics csv is empty");
    println!(
        "PASS criterion 12: determinism, {} bytes of metrics reproduced byte-identically",
        first.len()
    );
}
