//! The optimization loop: batching, the per-batch strategy draw, Adam with
//! bias correction, early stopping on eval loss, and metric emission.
//!
//! Reproducibility contract: identical seed and config give a bit-identical
//! RunRecord, wall clock aside. Every stochastic consumer draws from its own
//! purpose stream, so enabling one regularizer never shifts another's draws.

use crate::error::{Error, Result};
use crate::mask::draw_strategy;
use crate::params::ParamSet;
use crate::regularizer::{Mode, PinnedMasks, RegularizerSpec, RegularizerStack};
use crate::rng::{StreamPurpose, TrainRng};
use crate::tasks::{Dataset, Example, TaskKind, BOS, EOS, PAD};
use crate::tensor::{Tape, Var};
use crate::transformer::{Architecture, ForwardCtx, Model, ModelConfig, TokenBatch};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Early-stop patience in epochs; 0 disables early stopping.
    pub patience: usize,
    /// Evaluate every this many epochs (the final epoch always evaluates).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            batch_size: 32,
            max_epochs: 100,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            patience: 20,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "batch size must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs", "need at least one epoch"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "evaluation cadence must be at least 1"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(name, format!("must be in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps", "must be positive"));
        }
        Ok(())
    }
}

// ── Adam ────────────────────────────────────────────────────────────────────

pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let m = params.ids().map(|id| vec![0.0; params.data(id).len()]).collect::<Vec<_>>();
        let v = m.clone();
        AdamState { m, v, t: 0 }
    }
}

/// One Adam update with bias correction, reading accumulated gradients from
/// the parameter set. A non-finite gradient aborts with the parameter named.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for (slot, id) in ids.into_iter().enumerate() {
        for g in params.grad(id) {
            if !g.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite gradient in `{}` at step {}",
                    params.name(id),
                    state.t
                )));
            }
        }
        let n = params.data(id).len();
        for i in 0..n {
            let g = params.grad(id)[i];
            let m = &mut state.m[slot][i];
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            let v = &mut state.v[slot][i];
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mhat = state.m[slot][i] / bc1;
            let vhat = state.v[slot][i] / bc2;
            params.data_mut(id)[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

// ── Batch assembly ──────────────────────────────────────────────────────────

/// Classifier batches read the class from position 0, so a begin token is
/// prepended to every input row.
pub fn build_classifier_batch(examples: &[&Example]) -> Result<(TokenBatch, Vec<usize>)> {
    let rows: Vec<Vec<usize>> = examples
        .iter()
        .map(|e| {
            let mut r = Vec::with_capacity(e.input.len() + 1);
            r.push(BOS);
            r.extend_from_slice(&e.input);
            r
        })
        .collect();
    let batch = TokenBatch::from_rows(&rows, PAD)?;
    let targets = examples.iter().map(|e| e.target[0]).collect();
    Ok((batch, targets))
}

pub struct Seq2SeqBatch {
    pub src: TokenBatch,
    pub dec_in: TokenBatch,
    /// Flat `[batch * dec_seq]` next-token targets, padded rows inactive.
    pub targets: Vec<usize>,
    pub active: Vec<bool>,
}

/// Teacher forcing: the decoder reads `[BOS] + target` and predicts
/// `target + [EOS]` position by position.
pub fn build_seq2seq_batch(examples: &[&Example]) -> Result<Seq2SeqBatch> {
    let src_rows: Vec<Vec<usize>> = examples.iter().map(|e| e.input.clone()).collect();
    let src = TokenBatch::from_rows(&src_rows, PAD)?;
    let dec_rows: Vec<Vec<usize>> = examples
        .iter()
        .map(|e| {
            let mut r = Vec::with_capacity(e.target.len() + 1);
            r.push(BOS);
            r.extend_from_slice(&e.target);
            r
        })
        .collect();
    let dec_in = TokenBatch::from_rows(&dec_rows, PAD)?;
    let n = dec_in.seq;
    let mut targets = Vec::with_capacity(examples.len() * n);
    let mut active = Vec::with_capacity(examples.len() * n);
    for e in examples {
        for i in 0..n {
            if i < e.target.len() {
                targets.push(e.target[i]);
                active.push(true);
            } else if i == e.target.len() {
                targets.push(EOS);
                active.push(true);
            } else {
                targets.push(PAD);
                active.push(false);
            }
        }
    }
    Ok(Seq2SeqBatch { src, dec_in, targets, active })
}

fn check_arch(model: &Model, task: TaskKind) -> Result<()> {
    let want = if task.is_seq2seq() { Architecture::Seq2Seq } else { Architecture::Classifier };
    if model.cfg.arch != want {
        return Err(Error::contract(
            "train",
            format!("task {task} needs {want:?} but the model is {:?}", model.cfg.arch),
        ));
    }
    Ok(())
}

/// Batch loss on the tape plus its weight (rows contributing to the mean).
fn batch_loss(
    model: &Model,
    tape: &mut Tape,
    vars: &[Var],
    examples: &[&Example],
    task: TaskKind,
    fctx: &ForwardCtx,
) -> Result<(Var, f64)> {
    if task.is_seq2seq() {
        let b = build_seq2seq_batch(examples)?;
        let logits = model.forward_seq2seq(tape, vars, &b.src, &b.dec_in, fctx)?;
        let vocab = model.cfg.vocab;
        let rows = b.targets.len();
        let flat = tape.reshape(logits, vec![rows, vocab])?;
        let loss = tape.cross_entropy_masked(flat, &b.targets, &b.active)?;
        let weight = b.active.iter().filter(|a| **a).count() as f64;
        Ok((loss, weight))
    } else {
        let (batch, targets) = build_classifier_batch(examples)?;
        let logits = model.forward_classifier(tape, vars, &batch, fctx)?;
        let loss = tape.cross_entropy(logits, &targets)?;
        Ok((loss, examples.len() as f64))
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Loss and accuracy of a split under vanilla eval-mode attention. Accuracy
/// is label accuracy for classification and exact-sequence accuracy (teacher
/// forced) for seq2seq. Model weights are untouched by construction.
pub fn evaluate_split(
    model: &Model,
    params: &ParamSet,
    examples: &[Example],
    batch_size: usize,
    stack: &RegularizerStack,
    rng: &TrainRng,
) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Ok((0.0, 0.0));
    }
    let task = if model.cfg.arch == Architecture::Seq2Seq { TaskKind::Copy } else { TaskKind::ParityPattern };
    let mut loss_sum = 0.0;
    let mut weight_sum = 0.0;
    let mut correct = 0usize;
    for chunk in examples.chunks(batch_size) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let mut tape = Tape::new();
        let vars = tape.bind(params);
        let fctx = ForwardCtx::eval(rng, stack);
        if task.is_seq2seq() {
            let b = build_seq2seq_batch(&refs)?;
            let logits = model.forward_seq2seq(&mut tape, &vars, &b.src, &b.dec_in, &fctx)?;
            let vocab = model.cfg.vocab;
            let n = b.dec_in.seq;
            let rows = b.targets.len();
            let flat = tape.reshape(logits, vec![rows, vocab])?;
            let loss = tape.cross_entropy_masked(flat, &b.targets, &b.active)?;
            let w = b.active.iter().filter(|a| **a).count() as f64;
            loss_sum += tape.value_scalar(loss)? * w;
            weight_sum += w;
            let data = tape.data(logits);
            for (bi, _) in refs.iter().enumerate() {
                let mut all = true;
                for i in 0..n {
                    let r = bi * n + i;
                    if !b.active[r] {
                        continue;
                    }
                    if argmax(&data[r * vocab..(r + 1) * vocab]) != b.targets[r] {
                        all = false;
                        break;
                    }
                }
                if all {
                    correct += 1;
                }
            }
        } else {
            let (batch, targets) = build_classifier_batch(&refs)?;
            let logits = model.forward_classifier(&mut tape, &vars, &batch, &fctx)?;
            let loss = tape.cross_entropy(logits, &targets)?;
            let w = refs.len() as f64;
            loss_sum += tape.value_scalar(loss)? * w;
            weight_sum += w;
            let classes = model.cfg.classes;
            let data = tape.data(logits);
            for (bi, t) in targets.iter().enumerate() {
                if argmax(&data[bi * classes..(bi + 1) * classes]) == *t {
                    correct += 1;
                }
            }
        }
    }
    Ok((loss_sum / weight_sum, correct as f64 / examples.len() as f64))
}

// ── Run records ─────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    EarlyStopped,
    Diverged,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean optimization loss over the epoch's batches (train mode).
    pub train_loss: f64,
    /// Accuracy over the training split in eval mode, so the train-eval gap
    /// compares like with like. Repeats the last value on skipped epochs.
    pub train_accuracy: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub seed: u64,
    pub scheme: String,
    pub status: RunStatus,
    pub failure: Option<String>,
    pub model: ModelConfig,
    pub train_config: TrainConfig,
    pub regularizer: RegularizerSpec,
    pub epochs: Vec<EpochMetrics>,
    pub final_train_accuracy: f64,
    pub final_eval_accuracy: f64,
    /// final_train_accuracy − final_eval_accuracy.
    pub gap: f64,
    /// Informational; excluded from the bit-identical-rerun guarantee.
    pub wall_clock_seconds: f64,
}

impl RunRecord {
    pub fn diverged(&self) -> bool {
        self.status == RunStatus::Diverged
    }
}

/// One row per epoch and split: `run_id,epoch,split,loss,accuracy`.
pub fn metrics_csv(record: &RunRecord) -> String {
    let mut out = String::from("run_id,epoch,split,loss,accuracy\n");
    for e in &record.epochs {
        out.push_str(&format!(
            "{},{},train,{},{}\n",
            record.run_id, e.epoch, e.train_loss, e.train_accuracy
        ));
        out.push_str(&format!(
            "{},{},eval,{},{}\n",
            record.run_id, e.epoch, e.eval_loss, e.eval_accuracy
        ));
    }
    out
}

pub fn write_metrics_csv(path: &Path, record: &RunRecord) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(metrics_csv(record).as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

// ── The loop ────────────────────────────────────────────────────────────────

pub fn train(
    run_id: &str,
    model_cfg: &ModelConfig,
    dataset: &Dataset,
    tcfg: &TrainConfig,
    reg: &RegularizerSpec,
) -> Result<RunRecord> {
    train_with_rng(run_id, model_cfg, dataset, tcfg, reg, TrainRng::new(tcfg.seed), None)
        .map(|(record, _)| record)
}

/// Training with an injectable stream source (for trace-based tests) and
/// optionally pinned masked sets (for gradient checks on a fixed batch).
pub fn train_with_rng(
    run_id: &str,
    model_cfg: &ModelConfig,
    dataset: &Dataset,
    tcfg: &TrainConfig,
    reg: &RegularizerSpec,
    rng: TrainRng,
    pinned: Option<&PinnedMasks>,
) -> Result<(RunRecord, ParamSet)> {
    tcfg.validate()?;
    model_cfg.validate()?;
    reg.validate()?;
    let stack = RegularizerStack::from_spec(reg)?;
    let mut params = ParamSet::new();
    let model = Model::new(model_cfg.clone(), &mut params, &rng)?;
    check_arch(&model, dataset.task)?;
    if dataset.train.is_empty() {
        return Err(Error::contract("train", "empty training split"));
    }
    let mut adam = AdamState::new(&params);
    let started = Instant::now();

    let mut epochs = Vec::new();
    let mut status = RunStatus::Completed;
    let mut failure = None;
    let mut best_eval = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut last_train_acc = 0.0;
    let mut last_eval = (0.0, 0.0);
    let mut step: u64 = 0;

    'epochs: for epoch in 1..=tcfg.max_epochs {
        let mut order: Vec<usize> = (0..dataset.train.len()).collect();
        let mut br = rng.stream(StreamPurpose::BatchOrder, [epoch as u64, 0, 0, 0]);
        order.shuffle(&mut br);

        let mut loss_sum = 0.0;
        let mut weight_sum = 0.0;
        for chunk in order.chunks(tcfg.batch_size) {
            let examples: Vec<&Example> = chunk.iter().map(|i| &dataset.train[*i]).collect();
            let result = (|| -> Result<(f64, f64)> {
                let mut strategy_rng = rng.stream(StreamPurpose::Strategy, [step, 0, 0, 0]);
                let strategy = draw_strategy(reg.p_self, &mut strategy_rng)?;
                let decoder_strategy = if reg.independent_strategy_draws
                    && model.cfg.arch == Architecture::Seq2Seq
                {
                    let mut dec_rng = rng.stream(StreamPurpose::Strategy, [step, 1, 0, 0]);
                    draw_strategy(reg.p_self, &mut dec_rng)?
                } else {
                    strategy
                };
                let mut tape = Tape::new();
                let vars = tape.bind(&params);
                let fctx = ForwardCtx {
                    mode: Mode::Train,
                    step,
                    strategy,
                    decoder_strategy,
                    rng: &rng,
                    stack: &stack,
                    pinned,
                };
                let (loss_var, weight) =
                    batch_loss(&model, &mut tape, &vars, &examples, dataset.task, &fctx)?;
                let loss = tape.value_scalar(loss_var)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged(format!("loss {loss} at step {step}")));
                }
                params.zero_grads();
                tape.backward(loss_var)?;
                tape.export_grads(&mut params);
                adam_step(&mut params, &mut adam, tcfg)?;
                Ok((loss, weight))
            })();
            step += 1;
            match result {
                Ok((loss, weight)) => {
                    loss_sum += loss * weight;
                    weight_sum += weight;
                }
                Err(e @ (Error::Diverged(_) | Error::Numeric { .. })) => {
                    status = RunStatus::Diverged;
                    failure = Some(e.to_string());
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let train_loss = loss_sum / weight_sum;

        let evaluate_now = epoch % tcfg.eval_every == 0 || epoch == tcfg.max_epochs;
        if evaluate_now {
            let eval_outcome = (|| -> Result<()> {
                let (_, train_acc) =
                    evaluate_split(&model, &params, &dataset.train, tcfg.batch_size, &stack, &rng)?;
                last_train_acc = train_acc;
                last_eval =
                    evaluate_split(&model, &params, &dataset.eval, tcfg.batch_size, &stack, &rng)?;
                Ok(())
            })();
            match eval_outcome {
                Ok(()) => {}
                Err(e @ (Error::Diverged(_) | Error::Numeric { .. })) => {
                    status = RunStatus::Diverged;
                    failure = Some(e.to_string());
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        epochs.push(EpochMetrics {
            epoch,
            train_loss,
            train_accuracy: last_train_acc,
            eval_loss: last_eval.0,
            eval_accuracy: last_eval.1,
        });

        if evaluate_now && tcfg.patience > 0 && !dataset.eval.is_empty() {
            if last_eval.0 < best_eval {
                best_eval = last_eval.0;
                best_epoch = epoch;
            } else if epoch - best_epoch >= tcfg.patience {
                status = RunStatus::EarlyStopped;
                break 'epochs;
            }
        }
    }

    let final_train_accuracy = epochs.last().map(|e| e.train_accuracy).unwrap_or(0.0);
    let final_eval_accuracy = epochs.last().map(|e| e.eval_accuracy).unwrap_or(0.0);
    let record = RunRecord {
        run_id: run_id.to_string(),
        seed: tcfg.seed,
        scheme: reg.scheme.to_string(),
        status,
        failure,
        model: model_cfg.clone(),
        train_config: tcfg.clone(),
        regularizer: reg.clone(),
        epochs,
        final_train_accuracy,
        final_eval_accuracy,
        gap: final_train_accuracy - final_eval_accuracy,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((record, params))
}

// ── Gap-trend experiment ────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GapCell {
    pub scheme: String,
    pub seed: u64,
    pub status: RunStatus,
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
    pub gap: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GapTable {
    pub cells: Vec<GapCell>,
}

impl GapTable {
    pub fn mean_gap(&self, scheme: &str) -> Option<f64> {
        let gaps: Vec<f64> =
            self.cells.iter().filter(|c| c.scheme == scheme).map(|c| c.gap).collect();
        if gaps.is_empty() {
            None
        } else {
            Some(gaps.iter().sum::<f64>() / gaps.len() as f64)
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scheme,seed,status,train_accuracy,eval_accuracy,gap\n");
        for c in &self.cells {
            let status = match c.status {
                RunStatus::Completed => "completed",
                RunStatus::EarlyStopped => "early_stopped",
                RunStatus::Diverged => "diverged",
            };
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.scheme, c.seed, status, c.train_accuracy, c.eval_accuracy, c.gap
            ));
        }
        out
    }

    /// Per-scheme means, arms in first-appearance order.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("scheme,runs,mean_train_accuracy,mean_eval_accuracy,mean_gap\n");
        let mut seen: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !seen.contains(&c.scheme.as_str()) {
                seen.push(&c.scheme);
            }
        }
        for scheme in seen {
            let rows: Vec<&GapCell> = self.cells.iter().filter(|c| c.scheme == scheme).collect();
            let n = rows.len() as f64;
            let mt = rows.iter().map(|c| c.train_accuracy).sum::<f64>() / n;
            let me = rows.iter().map(|c| c.eval_accuracy).sum::<f64>() / n;
            let mg = rows.iter().map(|c| c.gap).sum::<f64>() / n;
            out.push_str(&format!("{},{},{},{},{}\n", scheme, rows.len(), mt, me, mg));
        }
        out
    }
}

/// Train every (arm, seed) pair on one fixed small dataset and tabulate the
/// final train-eval gaps. Cells run in parallel; output order is the arm
/// order crossed with the seed order regardless of scheduling.
pub fn gap_trend_experiment(
    model_cfg: &ModelConfig,
    dataset: &Dataset,
    tcfg: &TrainConfig,
    arms: &[(String, RegularizerSpec)],
    seeds: &[u64],
) -> Result<GapTable> {
    if arms.is_empty() || seeds.is_empty() {
        return Err(Error::contract("gap_trend", "need at least one arm and one seed"));
    }
    let jobs: Vec<(usize, &(String, RegularizerSpec), u64)> = arms
        .iter()
        .flat_map(|arm| seeds.iter().map(move |s| (arm, *s)))
        .enumerate()
        .map(|(i, (arm, s))| (i, arm, s))
        .collect();
    let mut cells: Vec<(usize, GapCell)> = jobs
        .into_par_iter()
        .map(|(i, (label, reg), seed)| -> Result<(usize, GapCell)> {
            let cfg = TrainConfig { seed, ..tcfg.clone() };
            let run_id = format!("{label}_seed{seed}");
            let record = train(&run_id, model_cfg, dataset, &cfg, reg)?;
            Ok((
                i,
                GapCell {
                    scheme: label.clone(),
                    seed,
                    status: record.status,
                    train_accuracy: record.final_train_accuracy,
                    eval_accuracy: record.final_eval_accuracy,
                    gap: record.gap,
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    cells.sort_by_key(|(i, _)| *i);
    Ok(GapTable { cells: cells.into_iter().map(|(_, c)| c).collect() })
}

// ── Tests ───────────────────────────────────────────────────────────────────
