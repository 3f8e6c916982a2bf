//! `pass`: generate pilot datasets, train the neural estimators, evaluate
//! them against the switching baselines and report their complexity.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration or usage error,
//! 3 antenna count above a model's capacity, 4 I/O error, 5 bad magic bytes,
//! 6 format version mismatch, 7 truncated file, 8 malformed file.
//! `PASS_WORKERS` bounds the worker pool.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pass_core::config::ExperimentConfig;
use pass_core::experiment::{baseline_rows, complexity_report, mean_rows, run_sweep, Baseline, SweepKind, TrainedModel};
use pass_core::io::{load_dataset, save_metrics, write_metrics, Checkpoint, DatasetWriter};
use pass_core::pilots::{generate_records, DatasetMeta, DATASET_FORMAT_VERSION};
use pass_core::trainer::{evaluate, train, zero_shot_eval, MetricsRow};
use pass_core::{PassError, Result};

#[derive(Parser, Debug)]
#[command(name = "pass", version, about = "Pinching-antenna channel estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration entry, e.g. `--set channel.p_los=1.0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed of the command: dataset seed, training seed, or the single
    /// evaluation seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path. Tables go to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a pilot dataset.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train `train.model` on a dataset and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// NMSE of a checkpoint on a dataset, or on fresh test sets over
    /// `train.eval_n` at `sweep.fixed_snr_db`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// NMSE over `sweep.snr_grid_db` at `sweep.fixed_n`.
    SweepSnr {
        #[command(flatten)]
        common: Common,
        /// Checkpoint of a neural estimator listed in `sweep.estimators`.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// NMSE over `sweep.n_grid` at `sweep.fixed_snr_db`.
    SweepN {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Multiply-adds and parameter counts of both models over `sweep.n_grid`.
    Flops {
        #[command(flatten)]
        common: Common,
    },
    /// LS and LMMSE with one PA switched on per slot, at `system.N` and
    /// `system.snr_db`.
    Baseline {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn configure_workers() -> Result<()> {
    let Ok(raw) = std::env::var("PASS_WORKERS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| PassError::Config(format!("PASS_WORKERS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| PassError::Config(e.to_string()))
}

fn load_config(common: &Common, seed_key: Option<&str>) -> Result<ExperimentConfig> {
    let mut sets = common.overrides.clone();
    if let (Some(seed), Some(key)) = (common.seed, seed_key) {
        sets.push(format!("{key}={seed}"));
    }
    ExperimentConfig::load(common.config.as_deref(), &sets)
}

fn preamble(command: &str, cfg: &ExperimentConfig, common: &Common) -> Vec<String> {
    let mut lines = vec![format!("command={command}"), format!("config_hash={}", cfg.hash_hex())];
    lines.extend(common.overrides.iter().map(|o| format!("set {o}")));
    lines
}

fn emit_rows(command: &str, cfg: &ExperimentConfig, common: &Common, rows: &[MetricsRow]) -> Result<()> {
    let pre = preamble(command, cfg, common);
    match &common.out {
        Some(p) => save_metrics(p, &pre, rows),
        None => write_metrics(std::io::stdout().lock(), &pre, rows),
    }
}

fn require_out<'a>(common: &'a Common, what: &str) -> Result<&'a Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| PassError::Config(format!("--out is required to write the {what}")))
}

fn run(command: Command) -> Result<()> {
    configure_workers()?;
    match command {
        Command::Generate { common } => {
            let cfg = load_config(&common, Some("system.seed"))?;
            let out = require_out(&common, "dataset")?;
            let meta = DatasetMeta {
                num_samples: cfg.generate.num_samples,
                cfg: cfg.system.clone(),
                format_version: DATASET_FORMAT_VERSION,
                seed: cfg.system.seed,
            };
            let mut w = DatasetWriter::create(out, &meta)?;
            const CHUNK: usize = 4096;
            for start in (0..meta.num_samples).step_by(CHUNK) {
                let end = (start + CHUNK).min(meta.num_samples);
                for r in generate_records(&cfg.system, meta.seed, start..end, cfg.generate.snr_policy())? {
                    w.write(&r)?;
                }
            }
            w.finish()?;
            eprintln!("wrote {} records to {}", meta.num_samples, out.display());
            Ok(())
        }
        Command::Train { common, dataset } => {
            let mut cfg = load_config(&common, Some("train.seed"))?;
            let out = require_out(&common, "checkpoint")?;
            let (meta, records) = load_dataset(&dataset)?;
            // the pilot budget of the model follows the dataset
            cfg.system.pilot_slots = meta.cfg.pilot_slots;
            let model_cfg = cfg.model_config(&cfg.train.model)?;
            let model = model_cfg.build()?;
            let log_path = out.with_extension("log.jsonl");
            let mut log = std::fs::File::create(&log_path).map_err(|e| PassError::Io {
                path: log_path.display().to_string(),
                source: e,
            })?;
            let mut log_err = None;
            let outcome = train(model.as_ref(), &records, &cfg.train, |e| {
                eprintln!(
                    "epoch {:>3}  loss {:.5}  val nmse {:.5}  {:.1}s",
                    e.epoch, e.train_loss, e.val_nmse, e.wallclock_s
                );
                let line = serde_json::to_string(e).expect("log entry serializes");
                if let Err(err) = writeln!(log, "{line}") {
                    log_err.get_or_insert(err);
                }
            })?;
            if let Some(e) = log_err {
                return Err(PassError::Io { path: log_path.display().to_string(), source: e });
            }
            Checkpoint {
                model: model_cfg,
                system: meta.cfg,
                train: cfg.train.clone(),
                best_epoch: outcome.best_epoch,
                val_nmse: outcome.best_val_nmse,
                store: outcome.best,
            }
            .save(out)?;
            eprintln!(
                "best epoch {} with val nmse {:.5}; checkpoint {}",
                outcome.best_epoch,
                outcome.best_val_nmse,
                out.display()
            );
            Ok(())
        }
        Command::Eval { common, checkpoint, dataset } => {
            let cfg = with_single_seed(load_config(&common, None)?, common.seed);
            let ckpt = Checkpoint::load(&checkpoint)?;
            let model = ckpt.estimator()?;
            let rows = match dataset {
                Some(path) => {
                    let (meta, records) = load_dataset(&path)?;
                    let n = meta.cfg.num_pas;
                    model.check_antennas(n)?;
                    let start = std::time::Instant::now();
                    let nmse = evaluate(model.as_ref(), &ckpt.store, &records, cfg.train.batch_size)?.value();
                    let snr = records.first().map_or(meta.cfg.snr_db, |r| r.snr_db);
                    let fixed = records.iter().all(|r| r.snr_db == snr);
                    vec![MetricsRow {
                        estimator: model.id().into(),
                        n,
                        t: meta.cfg.pilot_slots,
                        snr_db: if fixed { snr } else { f64::NAN },
                        nmse: Some(nmse),
                        flops: model.flops(n),
                        params: model.num_params(),
                        seed: Some(meta.seed),
                        wallclock_s: start.elapsed().as_secs_f64(),
                    }]
                }
                None => {
                    let mut rows = zero_shot_eval(
                        model.as_ref(),
                        &ckpt.store,
                        &ckpt.system,
                        &cfg.train.eval_n,
                        cfg.sweep.fixed_snr_db,
                        &cfg.sweep.seeds,
                        cfg.sweep.records_per_cell,
                    )?;
                    let means = mean_rows(&rows);
                    rows.extend(means);
                    rows
                }
            };
            emit_rows("eval", &cfg, &common, &rows)
        }
        Command::SweepSnr { common, checkpoint } => sweep(&common, &checkpoint, SweepKind::Snr, "sweep-snr"),
        Command::SweepN { common, checkpoint } => sweep(&common, &checkpoint, SweepKind::AntennaCount, "sweep-n"),
        Command::Flops { common } => {
            let cfg = load_config(&common, None)?;
            let mut text = String::from("model,N,flops,params\n");
            for id in ["pamoe-v1", "paformer-v1"] {
                let report = complexity_report(&cfg.model_config(id)?, &cfg.sweep.n_grid)?;
                for (n, f) in &report.flops {
                    text.push_str(&format!("{},{n},{f},{}\n", report.model, report.params));
                }
            }
            match &common.out {
                Some(p) => std::fs::write(p, text).map_err(|e| PassError::Io { path: p.display().to_string(), source: e }),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Command::Baseline { common } => {
            let cfg = with_single_seed(load_config(&common, None)?, common.seed);
            let s = &cfg.sweep;
            let mut rows = Vec::new();
            for b in [Baseline::Ls, Baseline::Lmmse] {
                rows.extend(baseline_rows(
                    b,
                    &cfg.system,
                    cfg.system.num_pas,
                    cfg.system.snr_db,
                    &s.seeds,
                    s.records_per_cell,
                    s.covariance_samples,
                )?);
            }
            let means = mean_rows(&rows);
            rows.extend(means);
            emit_rows("baseline", &cfg, &common, &rows)
        }
    }
}

fn with_single_seed(mut cfg: ExperimentConfig, seed: Option<u64>) -> ExperimentConfig {
    if let Some(s) = seed {
        cfg.sweep.seeds = vec![s];
    }
    cfg
}

fn sweep(common: &Common, checkpoints: &[PathBuf], kind: SweepKind, name: &str) -> Result<()> {
    let cfg = with_single_seed(load_config(common, None)?, common.seed);
    let mut trained = Vec::new();
    for path in checkpoints {
        let ckpt = Checkpoint::load(path)?;
        trained.push(TrainedModel::new(&ckpt.model, ckpt.store)?);
    }
    let rows = run_sweep(&cfg, kind, &trained)?;
    emit_rows(name, &cfg, common, &rows)
}
