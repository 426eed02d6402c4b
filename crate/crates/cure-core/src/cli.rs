//! Command-line entry points and run-directory plumbing.
//!
//! Subcommands: `train`, `finetune`, `certify`, `attack`, `export-bounds`,
//! and `report`. Exit codes: 0 success, 1 usage error, 2 runtime failure.
//! Every run writes a manifest that reproduces it bit-for-bit when replayed
//! with `train --manifest`.

use crate::attack::Norm;
use crate::certify::{evaluate, EvalConfig};
use crate::checkpoint;
use crate::config::{parse_config, parse_kv_text, RunManifest, TrainConfig, TrainMode};
use crate::data::{load_mnist_idx, make_synthetic, Dataset};
use crate::error::{CureError, Result};
use crate::rng;
use crate::trainer;
use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "cure",
    version = crate::VERSION,
    about = "Multi-norm certified training and certification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat key=value config file ('#' comments).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. --set alpha=0.5.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut overrides = BTreeMap::new();
        for pair in &self.sets {
            let Some((k, v)) = pair.split_once('=') else {
                return Err(CureError::Config(format!(
                    "--set expects KEY=VALUE, got '{pair}'"
                )));
            };
            overrides.insert(k.trim().to_string(), v.trim().to_string());
        }
        parse_config(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model (mode from config) and write a run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory (default runs/<mode>-seed<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replay a previous run from its manifest.
        #[arg(long, conflicts_with = "config")]
        manifest: Option<PathBuf>,
    },
    /// Fine-tune a pre-trained checkpoint with the scratch objective.
    Finetune {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Certify a checkpoint at an epsilon pair and write an EvalReport.
    Certify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        eps_inf: Option<f64>,
        #[arg(long)]
        eps_2: Option<f64>,
        /// Number of test samples (canonical order).
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Empirical PGD evaluation only (no certification).
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        eps_inf: Option<f64>,
        #[arg(long)]
        eps_2: Option<f64>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export per-class bound differences of one sample as CSV.
    ExportBounds {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Test-sample index.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        eps_inf: Option<f64>,
        #[arg(long)]
        eps_2: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge EvalReports into a comparison table (method, clean, linf, l2,
    /// union).
    Report {
        /// Entries NAME=eval_report.json, in output order.
        #[arg(value_name = "NAME=JSON", required = true)]
        entries: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Build the train/test datasets a config describes. Synthetic data is
/// drawn as one pool and split so both sides share the class blobs.
pub fn load_data(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        crate::config::DataSource::Synthetic { n, test_n, k, shape } => {
            let pool = make_synthetic(n + test_n, *k, shape, rng::derive_seed(cfg.seed, &[0xDA7A]))?;
            let train = pool.take(*n);
            let test = pool.slice(*n, n + test_n, "synthetic-test")?;
            Ok((train, test))
        }
        crate::config::DataSource::Mnist {
            images,
            labels,
            test_images,
            test_labels,
        } => {
            let train = load_mnist_idx(Path::new(images), Path::new(labels))?;
            let test = load_mnist_idx(Path::new(test_images), Path::new(test_labels))?;
            Ok((train, test))
        }
    }
}

fn eval_config(cfg: &TrainConfig) -> EvalConfig {
    EvalConfig {
        eps_inf: cfg.eps_inf,
        eps_2: cfg.eps_2,
        samples: cfg.eval_samples,
        pgd_steps: cfg.pgd_eval_steps,
        pgd_restarts: cfg.pgd_eval_restarts,
        pgd_step_size: 0.125,
        elide_last: cfg.elide_last,
        seed: cfg.seed,
    }
}

fn default_out_dir(cfg: &TrainConfig) -> PathBuf {
    PathBuf::from(format!("runs/{}-seed{}", cfg.mode.name(), cfg.seed))
}

fn write_run(
    out_dir: &Path,
    cfg: &TrainConfig,
    fingerprint: &str,
    net: &crate::network::Network,
    log: &trainer::TrainingLog,
) -> Result<PathBuf> {
    fs::create_dir_all(out_dir.join("checkpoints"))?;
    let ckpt = out_dir.join("checkpoints/final.ckpt");
    checkpoint::save_checkpoint(net, &ckpt)?;
    fs::write(out_dir.join("train_log.csv"), log.csv())?;
    if !log.projections.is_empty() {
        fs::write(out_dir.join("gp_log.csv"), log.projection_csv())?;
    }
    let manifest = RunManifest {
        tool_version: crate::VERSION.to_string(),
        config: cfg.clone(),
        dataset_fingerprint: fingerprint.to_string(),
        seed: cfg.seed,
        out_dir: out_dir.display().to_string(),
        checkpoint: ckpt.display().to_string(),
        train_log: out_dir.join("train_log.csv").display().to_string(),
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(ckpt)
}

fn run_train(cfg: &TrainConfig, out: Option<PathBuf>) -> Result<()> {
    let (train_data, test_data) = load_data(cfg)?;
    let out_dir = out.unwrap_or_else(|| default_out_dir(cfg));
    let (net, log) = match cfg.mode {
        TrainMode::Finetune => trainer::finetune(cfg, &train_data)?,
        _ => trainer::train(cfg, &train_data)?,
    };
    let ckpt = write_run(&out_dir, cfg, &train_data.fingerprint(), &net, &log)?;
    let report = evaluate(&net, &test_data, &eval_config(cfg))?;
    fs::write(out_dir.join("eval_report.json"), report.to_json()?)?;
    fs::write(out_dir.join("verdicts.csv"), report.verdicts_csv())?;
    println!(
        "trained {} -> {} (clean {:.1}%, linf {:.1}%, l2 {:.1}%, union {:.1}%)",
        cfg.mode.name(),
        ckpt.display(),
        report.clean_pct,
        report.cert_linf_pct,
        report.cert_l2_pct,
        report.union_pct
    );
    Ok(())
}

fn run_certify(
    checkpoint_path: &Path,
    cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    out: Option<PathBuf>,
) -> Result<()> {
    let net = checkpoint::load_checkpoint(checkpoint_path)?;
    let (_, test_data) = load_data(cfg)?;
    let report = evaluate(&net, &test_data, eval_cfg)?;
    let out_dir = out.unwrap_or_else(|| {
        checkpoint_path
            .parent()
            .and_then(Path::parent)
            .unwrap_or(Path::new("."))
            .to_path_buf()
    });
    fs::create_dir_all(&out_dir)?;
    fs::write(out_dir.join("eval_report.json"), report.to_json()?)?;
    fs::write(out_dir.join("verdicts.csv"), report.verdicts_csv())?;
    println!(
        "certified {} samples: clean {:.1}%, linf {:.1}%, l2 {:.1}%, union {:.1}%",
        report.samples, report.clean_pct, report.cert_linf_pct, report.cert_l2_pct,
        report.union_pct
    );
    Ok(())
}

fn run_attack(
    checkpoint_path: &Path,
    cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    out: Option<PathBuf>,
) -> Result<()> {
    let net = checkpoint::load_checkpoint(checkpoint_path)?;
    let (_, test_data) = load_data(cfg)?;
    let linf = crate::certify::empirical_accuracy(&net, &test_data, Norm::LInf, eval_cfg)?;
    let l2 = crate::certify::empirical_accuracy(&net, &test_data, Norm::L2, eval_cfg)?;
    let n = eval_cfg.samples.min(test_data.len());
    let mut clean = 0usize;
    for i in 0..n {
        let (x, y) = test_data.sample(i);
        let logits = net.forward(&crate::tensor::Tensor::from_slice(x))?;
        if crate::tensor::argmax(logits.data()) == y {
            clean += 1;
        }
    }
    let clean_pct = 100.0 * clean as f64 / n.max(1) as f64;
    let json = serde_json::json!({
        "tool_version": crate::VERSION,
        "samples": n,
        "eps_inf": eval_cfg.eps_inf,
        "eps_2": eval_cfg.eps_2,
        "clean_pct": clean_pct,
        "pgd_linf_pct": linf,
        "pgd_l2_pct": l2,
    });
    let text = serde_json::to_string_pretty(&json)?;
    match out {
        Some(path) => fs::write(path, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn run_export_bounds(
    checkpoint_path: &Path,
    cfg: &TrainConfig,
    index: usize,
    eps_inf: f64,
    eps_2: f64,
    out: Option<PathBuf>,
) -> Result<()> {
    let net = checkpoint::load_checkpoint(checkpoint_path)?;
    let (_, test_data) = load_data(cfg)?;
    if index >= test_data.len() {
        return Err(CureError::Config(format!(
            "sample index {index} out of range ({} test samples)",
            test_data.len()
        )));
    }
    let (x, y) = test_data.sample(index);
    let csv = crate::certify::bound_diffs_csv(&net, x, y, eps_inf, eps_2, cfg.elide_last)?;
    match out {
        Some(path) => fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn run_report(entries: &[String], out: Option<PathBuf>) -> Result<()> {
    let mut csv = String::from("method,clean,linf,l2,union\n");
    for entry in entries {
        let Some((name, path)) = entry.split_once('=') else {
            return Err(CureError::Config(format!(
                "report entries take NAME=eval_report.json, got '{entry}'"
            )));
        };
        let text = fs::read_to_string(path)?;
        let report: crate::certify::EvalReport = serde_json::from_str(&text)?;
        csv.push_str(&format!(
            "{name},{:.1},{:.1},{:.1},{:.1}\n",
            report.clean_pct, report.cert_linf_pct, report.cert_l2_pct, report.union_pct
        ));
    }
    match out {
        Some(path) => fs::write(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            manifest,
        } => {
            let cfg = match manifest {
                Some(path) => RunManifest::load(&path)?.config,
                None => config.resolve()?,
            };
            run_train(&cfg, out)
        }
        Command::Finetune { config, out } => {
            let mut cfg = config.resolve()?;
            cfg.mode = TrainMode::Finetune;
            if cfg.finetune_source.is_none() {
                return Err(CureError::Config(
                    "finetune requires finetune_source".to_string(),
                ));
            }
            run_train(&cfg, out)
        }
        Command::Certify {
            checkpoint,
            config,
            eps_inf,
            eps_2,
            samples,
            out,
        } => {
            let cfg = config.resolve()?;
            let mut ec = eval_config(&cfg);
            if let Some(v) = eps_inf {
                ec.eps_inf = v;
            }
            if let Some(v) = eps_2 {
                ec.eps_2 = v;
            }
            if let Some(v) = samples {
                ec.samples = v;
            }
            run_certify(&checkpoint, &cfg, &ec, out)
        }
        Command::Attack {
            checkpoint,
            config,
            eps_inf,
            eps_2,
            samples,
            out,
        } => {
            let cfg = config.resolve()?;
            let mut ec = eval_config(&cfg);
            if let Some(v) = eps_inf {
                ec.eps_inf = v;
            }
            if let Some(v) = eps_2 {
                ec.eps_2 = v;
            }
            if let Some(v) = samples {
                ec.samples = v;
            }
            run_attack(&checkpoint, &cfg, &ec, out)
        }
        Command::ExportBounds {
            checkpoint,
            config,
            index,
            eps_inf,
            eps_2,
            out,
        } => {
            let cfg = config.resolve()?;
            let ei = eps_inf.unwrap_or(cfg.eps_inf);
            let e2 = eps_2.unwrap_or(cfg.eps_2);
            run_export_bounds(&checkpoint, &cfg, index, ei, e2, out)
        }
        Command::Report { entries, out } => run_report(&entries, out),
    }
}

/// Entry point used by the binary and by tests. Returns the process exit
/// code: 0 success, 1 usage error, 2 runtime failure.
pub fn cli_main(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successful exits.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Parse a config file's text (exposed for tooling and tests).
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    parse_kv_text(text)
}
