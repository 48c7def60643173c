//! Grid sweeps over regularizer settings. A sweep expands a base config along
//! the requested axes (scheme combinations, rates, self-mask probability,
//! per-site rate pairs), runs every cell for every seed, and writes one CSV
//! row per (cell, seed). Rows carry the cell's config hash and seed so any
//! row is reproducible from those two values alone; summary statistics are
//! grouped by config hash and never pooled across different hashes.

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::regularizer::Scheme;
use crate::training::{train, RunRecord, RunStatus};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

// ── Grid definition ──────────────────────────────────────────────────────────

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct GridSpec {
    /// Shared mask/dropout rates to vary. Empty keeps the base rate.
    pub rates: Vec<f64>,
    /// Self-mask probabilities to vary. Empty keeps the base value.
    pub p_selfs: Vec<f64>,
    /// Encoder rates, crossed with `decoder_rates`.
    pub encoder_rates: Vec<f64>,
    /// Decoder rates, crossed with `encoder_rates`.
    pub decoder_rates: Vec<f64>,
    /// Run every scheme combination (2^3 = 8 arms including the baseline).
    pub combos: bool,
    /// Seeds per cell. Empty means just the base seed.
    pub seeds: Vec<u64>,
}

impl GridSpec {
    pub fn seeds_or(&self, base: u64) -> Vec<u64> {
        if self.seeds.is_empty() { vec![base] } else { self.seeds.clone() }
    }
}

fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() { vec![base] } else { values.to_vec() }
}

/// Expand the grid into concrete cell configs, in a fixed order: scheme-major,
/// then rate, then p_self, then encoder rate, then decoder rate.
pub fn expand(base: &ExperimentConfig, grid: &GridSpec) -> Vec<ExperimentConfig> {
    let schemes: Vec<Scheme> =
        if grid.combos { Scheme::all_combinations() } else { vec![base.scheme.clone()] };
    let rates = axis(&grid.rates, base.rate);
    let p_selfs = axis(&grid.p_selfs, base.p_self);
    let enc: Vec<Option<f64>> = if grid.encoder_rates.is_empty() {
        vec![base.encoder_rate]
    } else {
        grid.encoder_rates.iter().copied().map(Some).collect()
    };
    let dec: Vec<Option<f64>> = if grid.decoder_rates.is_empty() {
        vec![base.decoder_rate]
    } else {
        grid.decoder_rates.iter().copied().map(Some).collect()
    };
    let mut cells = Vec::new();
    for scheme in &schemes {
        for &rate in &rates {
            for &p_self in &p_selfs {
                for &encoder_rate in &enc {
                    for &decoder_rate in &dec {
                        let mut cell = base.clone();
                        cell.run_id = None;
                        cell.scheme = scheme.clone();
                        cell.rate = rate;
                        cell.p_self = p_self;
                        cell.encoder_rate = encoder_rate;
                        cell.decoder_rate = decoder_rate;
                        cells.push(cell);
                    }
                }
            }
        }
    }
    cells
}

// ── Cell execution ───────────────────────────────────────────────────────────

/// What a finished cell left behind. Failures are recorded, not fatal: the
/// rest of the sweep still runs and the row keeps the error text.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum CellOutcome {
    Finished { record: RunRecord },
    Failed { error: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub config_hash: String,
    pub seed: u64,
    pub scheme: String,
    pub rate: f64,
    pub p_self: f64,
    pub encoder_rate: f64,
    pub decoder_rate: f64,
    pub status: String,
    pub epochs: usize,
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
    pub gap: f64,
}

pub const SWEEP_HEADER: &str = "config_hash,seed,scheme,rate,p_self,encoder_rate,decoder_rate,status,epochs,train_accuracy,eval_accuracy,gap";

fn cell_path(cells_dir: &Path, hash: &str, seed: u64) -> PathBuf {
    cells_dir.join(format!("{hash}_s{seed}.json"))
}

fn run_cell(cfg: &ExperimentConfig) -> CellOutcome {
    let result = cfg.build().and_then(|exp| {
        train(&exp.run_id, &exp.model, &exp.dataset, &cfg.train_cfg(), &cfg.reg_spec())
    });
    match result {
        Ok(record) => CellOutcome::Finished { record },
        Err(e) => CellOutcome::Failed { error: e.to_string() },
    }
}

fn row_from_outcome(cfg: &ExperimentConfig, hash: &str, outcome: &CellOutcome) -> SweepRow {
    let spec = cfg.reg_spec();
    let (status, epochs, train_acc, eval_acc, gap) = match outcome {
        CellOutcome::Finished { record } => {
            let status = match record.status {
                RunStatus::Completed => "completed",
                RunStatus::EarlyStopped => "early_stopped",
                RunStatus::Diverged => "diverged",
            };
            (
                status.to_string(),
                record.epochs.len(),
                record.final_train_accuracy,
                record.final_eval_accuracy,
                record.gap,
            )
        }
        CellOutcome::Failed { .. } => ("failed".to_string(), 0, 0.0, 0.0, 0.0),
    };
    SweepRow {
        config_hash: hash.to_string(),
        seed: cfg.seed,
        scheme: spec.scheme.to_string(),
        rate: spec.rate,
        p_self: spec.p_self,
        encoder_rate: spec.encoder_rate.unwrap_or(spec.rate),
        decoder_rate: spec.decoder_rate.unwrap_or(spec.rate),
        status,
        epochs,
        train_accuracy: train_acc,
        eval_accuracy: eval_acc,
        gap,
    }
}

pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
    /// (path, error) for any cell that could not be persisted.
    pub cells_dir: PathBuf,
}

/// Run the grid. Each (cell, seed) job writes `<hash>_s<seed>.json` under
/// `out_dir/cells`; jobs whose file already exists are not re-run, which makes
/// an interrupted sweep resumable and a repeated sweep a pure read. Row order
/// is the cell expansion order crossed with seed order, independent of
/// completion order.
pub fn run_sweep(base: &ExperimentConfig, grid: &GridSpec) -> Result<SweepOutput> {
    let cells = expand(base, grid);
    let seeds = grid.seeds_or(base.seed);
    let out_dir = PathBuf::from(&base.out_dir);
    let cells_dir = out_dir.join("cells");
    std::fs::create_dir_all(&cells_dir)
        .map_err(|e| Error::io(cells_dir.display().to_string(), e))?;

    let mut jobs: Vec<(ExperimentConfig, String)> = Vec::new();
    for cell in &cells {
        for &seed in &seeds {
            let mut cfg = cell.clone();
            cfg.seed = seed;
            let hash = cfg.config_hash();
            jobs.push((cfg, hash));
        }
    }

    let outcomes: Vec<Result<CellOutcome>> = jobs
        .par_iter()
        .map(|(cfg, hash)| {
            let path = cell_path(&cells_dir, hash, cfg.seed);
            if path.exists() {
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
                return serde_json::from_str(&text).map_err(|e| {
                    Error::Format(format!("{}: bad cell file: {e}", path.display()))
                });
            }
            let outcome = run_cell(cfg);
            let text = serde_json::to_string_pretty(&outcome).expect("outcome serializes");
            std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
            Ok(outcome)
        })
        .collect();

    let mut rows = Vec::with_capacity(jobs.len());
    for ((cfg, hash), outcome) in jobs.iter().zip(outcomes) {
        rows.push(row_from_outcome(cfg, hash, &outcome?));
    }
    let csv_path = out_dir.join("sweep.csv");
    std::fs::write(&csv_path, rows_to_csv(&rows))
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    Ok(SweepOutput { rows, cells_dir })
}

// ── CSV output ───────────────────────────────────────────────────────────────

pub fn rows_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.config_hash,
            r.seed,
            r.scheme,
            r.rate,
            r.p_self,
            r.encoder_rate,
            r.decoder_rate,
            r.status,
            r.epochs,
            r.train_accuracy,
            r.eval_accuracy,
            r.gap
        )
        .expect("string write");
    }
    out
}

/// Per-cell means over seeds. Grouping key is the config hash: rows with
/// different hashes are never averaged together. Only finished (completed or
/// early-stopped) runs enter the means; the `runs`/`ok` columns expose how
/// many seeds each mean covers.
pub fn summary_csv(rows: &[SweepRow]) -> String {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&SweepRow>> = BTreeMap::new();
    for row in rows {
        let entry = groups.entry(&row.config_hash).or_default();
        if entry.is_empty() {
            order.push(&row.config_hash);
        }
        entry.push(row);
    }
    let mut out = String::from(
        "config_hash,scheme,rate,p_self,encoder_rate,decoder_rate,runs,ok,mean_train_accuracy,mean_eval_accuracy,mean_gap",
    );
    out.push('\n');
    for hash in order {
        let group = &groups[hash];
        let first = group[0];
        let ok: Vec<&&SweepRow> = group
            .iter()
            .filter(|r| r.status == "completed" || r.status == "early_stopped")
            .collect();
        let n = ok.len();
        let mean = |f: fn(&SweepRow) -> f64| {
            if n == 0 { 0.0 } else { ok.iter().map(|r| f(r)).sum::<f64>() / n as f64 }
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            hash,
            first.scheme,
            first.rate,
            first.p_self,
            first.encoder_rate,
            first.decoder_rate,
            group.len(),
            n,
            mean(|r| r.train_accuracy),
            mean(|r| r.eval_accuracy),
            mean(|r| r.gap)
        )
        .expect("string write");
    }
    out
}
