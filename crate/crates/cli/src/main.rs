//! `tlm`: train, sweep, verify, and dataset plumbing for the token-masking
//! experiment harness. Everything an experiment needs lives in one flat TOML
//! config file; a handful of flags override single fields for sweeps and
//! quick variations. Exit codes: 0 ok, 2 bad config, 3 diverged run, 4
//! verification failure.

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use tlm_core::config::ExperimentConfig;
use tlm_core::error::Error;
use tlm_core::rng::TrainRng;
use tlm_core::sweep::{run_sweep, summary_csv, GridSpec};
use tlm_core::tasks::{export_tsv, generate_dataset};
use tlm_core::training::{train_with_rng, write_metrics_csv};
use tlm_core::verify::run_all;

#[derive(Parser)]
#[command(name = "tlm", version, about = "Token-level masking experiment harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model from a config file and write its artifacts.
    Train(TrainArgs),
    /// Expand a grid around a base config and run every (cell, seed) pair.
    Sweep(SweepArgs),
    /// Run the invariant suite with per-check timing.
    Verify(VerifyArgs),
    /// Generate a synthetic dataset and write train/eval TSV files.
    GenData(DataArgs),
    /// Resolve a config's dataset (generated or loaded) and export it.
    ExportDataset(DataArgs),
}

#[derive(Args)]
struct CommonOverrides {
    /// Training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Regularizer scheme, e.g. "none", "tlm", "tlm+drophead".
    #[arg(long)]
    scheme: Option<String>,
    /// Shared masking/dropout rate.
    #[arg(long)]
    rate: Option<f64>,
    /// Probability of drawing self-masking over siblings-masking.
    #[arg(long)]
    p_self: Option<f64>,
    /// Output directory root.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Epoch budget.
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Run identifier (train only; default is hash + seed).
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config file (flat TOML).
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: CommonOverrides,
}

#[derive(Args)]
struct SweepArgs {
    /// Base experiment config file.
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: CommonOverrides,
    /// Rates to sweep, comma-separated (e.g. 0.05,0.1,0.15,0.2).
    #[arg(long, value_delimiter = ',')]
    rates: Vec<f64>,
    /// Self-masking probabilities to sweep.
    #[arg(long, value_delimiter = ',')]
    p_selfs: Vec<f64>,
    /// Encoder rates; crossed with --decoder-rates.
    #[arg(long, value_delimiter = ',')]
    encoder_rates: Vec<f64>,
    /// Decoder rates; crossed with --encoder-rates.
    #[arg(long, value_delimiter = ',')]
    decoder_rates: Vec<f64>,
    /// Run all 8 regularizer combinations.
    #[arg(long)]
    combos: bool,
    /// Seeds per cell, comma-separated.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Also write summary.csv with per-cell means over seeds.
    #[arg(long)]
    summary: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// Flip one connectivity bit in a fixture; the sibling-masking check
    /// must then fail (a self-test of the suite).
    #[arg(long)]
    tamper: bool,
}

#[derive(Args)]
struct DataArgs {
    /// Experiment config file naming the task.
    #[arg(long)]
    config: PathBuf,
    /// Destination directory for train.tsv and eval.tsv.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: CommonOverrides,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } | Error::Format(_) => ExitCode::from(2),
                Error::Diverged(_) => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Sweep(args) => cmd_sweep(args),
        Cmd::Verify(args) => cmd_verify(args),
        Cmd::GenData(args) => cmd_gen_data(args),
        Cmd::ExportDataset(args) => cmd_export_dataset(args),
    }
}

fn load_config(path: &Path, ov: &CommonOverrides) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::from_path(path)?;
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
    }
    if let Some(scheme) = &ov.scheme {
        cfg.scheme = scheme.parse()?;
    }
    if let Some(rate) = ov.rate {
        cfg.rate = rate;
    }
    if let Some(p_self) = ov.p_self {
        cfg.p_self = p_self;
    }
    if let Some(out_dir) = &ov.out_dir {
        cfg.out_dir = out_dir.display().to_string();
    }
    if let Some(max_epochs) = ov.max_epochs {
        cfg.max_epochs = max_epochs;
    }
    if let Some(run_id) = &ov.run_id {
        cfg.run_id = Some(run_id.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

// ── train ───────────────────────────────────────────────────────────────────

fn cmd_train(args: TrainArgs) -> Result<ExitCode, Error> {
    let cfg = load_config(&args.config, &args.overrides)?;
    let exp = cfg.build()?;
    println!(
        "run {} | task {} | scheme {} | seed {}",
        exp.run_id, cfg.task, cfg.scheme, cfg.seed
    );
    let (record, params) = train_with_rng(
        &exp.run_id,
        &exp.model,
        &exp.dataset,
        &cfg.train_cfg(),
        &cfg.reg_spec(),
        TrainRng::new(cfg.seed),
        None,
    )?;

    let run_dir = PathBuf::from(&cfg.out_dir).join(&exp.run_id);
    ensure_dir(&run_dir)?;
    let record_path = run_dir.join("runrecord.json");
    let json = serde_json::to_string_pretty(&record)
        .map_err(|e| Error::Format(format!("run record serialization: {e}")))?;
    write_text(&record_path, &json)?;
    write_metrics_csv(&run_dir.join("metrics.csv"), &record)?;

    if record.diverged() {
        eprintln!(
            "run {} diverged: {}",
            exp.run_id,
            record.failure.as_deref().unwrap_or("loss became non-finite")
        );
        println!("wrote {}", record_path.display());
        return Ok(ExitCode::from(3));
    }

    let ckpt_path = run_dir.join("model.ckpt");
    tlm_core::checkpoint::save(&ckpt_path, &exp.model, &params)?;
    println!(
        "finished {:?} after {} epochs | train acc {:.4} | eval acc {:.4} | gap {:.4}",
        record.status,
        record.epochs.len(),
        record.final_train_accuracy,
        record.final_eval_accuracy,
        record.gap
    );
    println!("wrote {}", run_dir.display());
    Ok(ExitCode::SUCCESS)
}

// ── sweep ───────────────────────────────────────────────────────────────────

fn cmd_sweep(args: SweepArgs) -> Result<ExitCode, Error> {
    let cfg = load_config(&args.config, &args.overrides)?;
    let grid = GridSpec {
        rates: args.rates,
        p_selfs: args.p_selfs,
        encoder_rates: args.encoder_rates,
        decoder_rates: args.decoder_rates,
        combos: args.combos,
        seeds: args.seeds,
    };
    let out = run_sweep(&cfg, &grid)?;
    let failed = out.rows.iter().filter(|r| r.status == "failed").count();
    let diverged = out.rows.iter().filter(|r| r.status == "diverged").count();
    println!(
        "{} rows ({} failed, {} diverged) | cells in {}",
        out.rows.len(),
        failed,
        diverged,
        out.cells_dir.display()
    );
    let csv_path = PathBuf::from(&cfg.out_dir).join("sweep.csv");
    println!("wrote {}", csv_path.display());
    if args.summary {
        let path = PathBuf::from(&cfg.out_dir).join("summary.csv");
        write_text(&path, &summary_csv(&out.rows))?;
        println!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

// ── verify ──────────────────────────────────────────────────────────────────

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode, Error> {
    let report = run_all(args.tamper);
    print!("{}", report.render());
    if report.all_passed() {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(4))
    }
}

// ── dataset plumbing ────────────────────────────────────────────────────────

fn data_out_dir(cfg: &ExperimentConfig, out: &Option<PathBuf>) -> PathBuf {
    out.clone().unwrap_or_else(|| PathBuf::from(&cfg.out_dir).join("data"))
}

fn cmd_gen_data(args: DataArgs) -> Result<ExitCode, Error> {
    let cfg = load_config(&args.config, &args.overrides)?;
    if cfg.task == tlm_core::tasks::TaskKind::TsvClassification {
        return Err(Error::config("task", "gen-data only covers generated tasks"));
    }
    let dataset = generate_dataset(&cfg.dataset_spec())?;
    let dir = data_out_dir(&cfg, &args.out);
    ensure_dir(&dir)?;
    export_tsv(&dir.join("train.tsv"), &dataset.train)?;
    export_tsv(&dir.join("eval.tsv"), &dataset.eval)?;
    println!(
        "{} train / {} eval examples (vocab {}) -> {}",
        dataset.train.len(),
        dataset.eval.len(),
        dataset.vocab,
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_export_dataset(args: DataArgs) -> Result<ExitCode, Error> {
    let cfg = load_config(&args.config, &args.overrides)?;
    let exp = cfg.build()?;
    let dir = data_out_dir(&cfg, &args.out);
    ensure_dir(&dir)?;
    export_tsv(&dir.join("train.tsv"), &exp.dataset.train)?;
    export_tsv(&dir.join("eval.tsv"), &exp.dataset.eval)?;
    println!(
        "{} train / {} eval examples (vocab {}, classes {}) -> {}",
        exp.dataset.train.len(),
        exp.dataset.eval.len(),
        exp.dataset.vocab,
        exp.dataset.classes,
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}
