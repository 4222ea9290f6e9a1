//! `cncv`: train, evaluate, and inspect conditional neural control variates.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 numeric failure,
//! 3 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use cncv::checkpoint::Checkpoint;
use cncv::config::ExperimentConfig;
use cncv::error::{Error, Result};
use cncv::evaluation;
use cncv::report;
use cncv::training;

#[derive(Parser, Debug)]
#[command(name = "cncv", version, about = "Conditional neural control variates for posterior expectations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Study {
    Vrf,
    Stein,
    Sweep,
    Ablate,
    Amortize,
}

impl Study {
    fn name(self) -> &'static str {
        match self {
            Study::Vrf => "vrf",
            Study::Stein => "stein",
            Study::Sweep => "sweep",
            Study::Ablate => "ablate",
            Study::Amortize => "amortize",
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an ensemble and write a checkpoint plus its training curve.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint path [default: <output.dir>/checkpoint.json].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides train.epochs.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Single-threaded, bit-reproducible execution.
        #[arg(long)]
        deterministic: bool,
    },
    /// Run an evaluation study on a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        study: Study,
        /// Experiment config; defaults to the snapshot stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory [default: <output.dir>].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides eval.seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        deterministic: bool,
        /// Comma-separated ensemble sizes for the ablation study.
        #[arg(long, value_delimiter = ',')]
        ensemble_sizes: Option<Vec<usize>>,
        /// Comma-separated sample sizes for the sweep study.
        #[arg(long, value_delimiter = ',')]
        sample_sizes: Option<Vec<usize>>,
    },
    /// Write the training dataset as CSV.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        // Training is sequential, so --threads and --deterministic do not change it.
        Command::Train { config, out, seed, epochs, threads: _, deterministic: _ } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.validate()?;
            cmd_train(&cfg, out)
        }
        Command::Eval { ckpt, study, config, out, seed, threads, deterministic, ensemble_sizes, sample_sizes } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let mut cfg = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => checkpoint.config.clone(),
            };
            if let Some(s) = seed {
                cfg.eval.seed = s;
            }
            if let Some(v) = ensemble_sizes {
                cfg.eval.ensemble_sizes = v;
            }
            if let Some(v) = sample_sizes {
                cfg.eval.sizes = v;
            }
            cfg.validate()?;
            let threads = if deterministic { 1 } else { threads.max(1) };
            cmd_eval(&cfg, &checkpoint, study, out, threads)
        }
        Command::Generate { config, out, seed } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            cfg.validate()?;
            let problem = cfg.problem.build()?;
            let data = training::generate_dataset(&problem, cfg.train.n_train_samples, cfg.train.seed, cfg.train.validation_fraction)?;
            create_parent(&out)?;
            report::dataset_table(&data).write(&out, &cfg.hash())?;
            eprintln!("wrote {} rows to {}", data.len(), out.display());
            Ok(())
        }
    }
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

fn cmd_train(cfg: &ExperimentConfig, out: Option<PathBuf>) -> Result<()> {
    let problem = cfg.problem.build()?;
    let ckpt_path = out.unwrap_or_else(|| cfg.output.dir.join("checkpoint.json"));
    create_parent(&ckpt_path)?;
    let mut hook = |r: &training::EpochReport, _: &cncv::model::CvEnsemble| -> Result<()> {
        eprintln!("epoch {:>4}  samples {:>10}  val_loss {:.6e}", r.epoch, r.samples_seen, r.val_loss);
        Ok(())
    };
    let outcome = match training::train_with_hook(&problem, &cfg.model, &cfg.train, cfg.qoi.kind, &mut hook) {
        Err(Error::NonFiniteLoss { epoch, batch, last_good }) => {
            let path = ckpt_path.with_extension("last_good.json");
            Checkpoint::new(cfg, &last_good.ensemble, last_good.metadata.clone()).save(&path)?;
            eprintln!("saved the last good parameters to {}", path.display());
            return Err(Error::NonFiniteLoss { epoch, batch, last_good });
        }
        other => other?,
    };
    Checkpoint::new(cfg, &outcome.ensemble, outcome.metadata.clone()).save(&ckpt_path)?;
    let curve_path = ckpt_path.with_extension("curve.csv");
    report::curve_table(&outcome.curve).write(&curve_path, &cfg.hash())?;
    eprintln!("wrote {} and {}", ckpt_path.display(), curve_path.display());
    Ok(())
}

fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Checkpoint, study: Study, out: Option<PathBuf>, threads: usize) -> Result<()> {
    let problem = cfg.problem.build()?;
    checkpoint.check_compatible(&problem)?;
    let ensemble = checkpoint.ensemble()?;
    let qoi = checkpoint.metadata.qoi;
    let dir = out.unwrap_or_else(|| cfg.output.dir.clone());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let hash = cfg.hash();
    let csv_path = dir.join(format!("{}.csv", study.name()));
    let json_path = dir.join(format!("{}.json", study.name()));
    let base = json!({
        "study": study.name(),
        "config_hash": hash,
        "checkpoint_fingerprint": checkpoint.fingerprint,
        "qoi": qoi,
    });
    let summary = match study {
        Study::Vrf => {
            let r = evaluation::vrf_study(&problem, &ensemble, qoi, &cfg.eval.options(cfg.eval.n_obs, threads))?;
            report::vrf_table(&r).write(&csv_path, &hash)?;
            eprintln!("mean VRF {:.4} over {} observations", r.mean_vrf(), r.n_obs - r.skipped.len());
            json!({
                "n_obs": r.n_obs,
                "samples": cfg.eval.samples,
                "mean_vrf": r.mean_vrf(),
                "components_outer": r.components_outer(),
                "observations_outer": r.observations_outer(),
                "per_component_vrf": r.per_component(),
                "mean_corr": r.mean_corr(),
                "exact_sampler": r.exact_sampler,
                "skipped": r.skipped,
            })
        }
        Study::Stein => {
            let r = evaluation::stein_verify(&problem, &ensemble, &cfg.eval.options(cfg.eval.stein_obs, threads))?;
            report::stein_table(&r).write(&csv_path, &hash)?;
            eprintln!("Stein statistic {:.3e} +- {:.3e}; |z| < 4 for {:.1}%", r.summary.mean, r.summary.std, 100.0 * r.pass_fraction(4.0));
            json!({
                "n_obs": r.rows.len(),
                "samples": cfg.eval.samples,
                "statistic": r.summary,
                "pass_fraction_z4": r.pass_fraction(4.0),
                "skipped": r.skipped,
            })
        }
        Study::Sweep => {
            let r = evaluation::sample_efficiency_sweep(&problem, &ensemble, qoi, &cfg.eval.sweep_options(threads))?;
            report::sweep_table(&r).write(&csv_path, &hash)?;
            eprintln!("raw MSE slope {:.3}, controlled MSE slope {:.3}", r.raw_slope, r.cv_slope);
            json!({ "reference": r.reference, "raw_slope": r.raw_slope, "cv_slope": r.cv_slope, "rows": r.rows })
        }
        Study::Ablate => {
            let rows = evaluation::ensemble_ablation(
                &problem,
                &cfg.model,
                &cfg.train,
                qoi,
                &cfg.eval.ensemble_sizes,
                &cfg.eval.ablation_seeds,
                &cfg.eval.options(cfg.eval.n_obs, threads),
            )?;
            report::ablation_table(&rows).write(&csv_path, &hash)?;
            let by_size: Vec<_> = cfg
                .eval
                .ensemble_sizes
                .iter()
                .map(|&l| {
                    let v: Vec<f64> = rows.iter().filter(|r| r.ensemble_size == l).map(|r| r.mean_vrf).collect();
                    json!({ "ensemble_size": l, "vrf": evaluation::MeanStd::of(&v) })
                })
                .collect();
            json!({ "rows": rows, "by_ensemble_size": by_size })
        }
        Study::Amortize => {
            let r = evaluation::amortization_study(&problem, &ensemble, qoi, cfg.eval.pool_size, &cfg.eval.options(3, threads))?;
            report::amortization_table(&r).write(&csv_path, &hash)?;
            let per_obs: Vec<_> = r
                .report
                .per_observation()
                .iter()
                .map(|&(id, v)| json!({ "label": r.observations[id].label, "y": r.observations[id].y, "mean_vrf": v }))
                .collect();
            json!({
                "observations": per_obs,
                "fingerprint_before": r.fingerprint_before,
                "fingerprint_after": r.fingerprint_after,
                "skipped": r.report.skipped,
            })
        }
    };
    let mut merged = base;
    if let (Some(m), serde_json::Value::Object(s)) = (merged.as_object_mut(), summary) {
        m.extend(s);
    }
    report::write_json(&json_path, &merged)?;
    eprintln!("wrote {} and {}", csv_path.display(), json_path.display());
    Ok(())
}
