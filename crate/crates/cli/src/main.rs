//! Command-line front end for the experiment pipeline.
//!
//! Verbs mirror the pipeline stages: `collect` → `fit-edmd` → `solve-dare`
//! → `train` → `eval` → `report`. Every verb reads one TOML config (compiled
//! defaults when omitted) and an output directory; `--set section.key=value`
//! overrides individual config keys from the command line.
//!
//! Exit codes: 0 success, 1 configuration error (bad flags, unparsable or
//! invalid config), 2 runtime failure (missing artifacts, numeric errors).

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use lcsac::clf::{analyze_p, CLFCertificate};
use lcsac::config::ExperimentConfig;
use lcsac::edmd::{EdmdDataset, LiftedModel};
use lcsac::error::{Error, Result};
use lcsac::harness::{
    collect_dataset, certify_pipeline, evaluate, export_metrics, fit_pipeline, train, Algorithm,
    CertifiedModel, RunRecord,
};
use lcsac::sac::AgentParams;

#[derive(Parser)]
#[command(
    name = "lcsac",
    version,
    about = "Lyapunov-constrained soft actor-critic experiment pipeline",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every verb.
#[derive(Args)]
struct Common {
    /// Experiment config (TOML); compiled defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set sac.gamma=0.98` or
    /// `--set env.trajectory=circle`. Repeatable; applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Directory artifacts are written to (created if missing).
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Collect the identification dataset with the PID controller.
    Collect {
        #[command(flatten)]
        common: Common,
        /// Collection seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit the lifted linear surrogate on a collected dataset.
    FitEdmd {
        #[command(flatten)]
        common: Common,
        /// Dataset CSV (defaults to `<out>/dataset.csv`).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Seed for the split and the RBF-center k-means.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Solve the Riccati equation on a fitted model and verify it.
    SolveDare {
        #[command(flatten)]
        common: Common,
        /// Model JSON (defaults to `<out>/model.json`).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Lifted states sampled by the contraction check.
        #[arg(long, default_value_t = 10_000)]
        verify_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one algorithm over the configured seeds.
    Train {
        #[command(flatten)]
        common: Common,
        /// Algorithm: `sac` or `lcsac`.
        #[arg(long, value_parser = parse_algo)]
        algo: Algorithm,
        /// Train this single seed instead of the config's seed list.
        #[arg(long)]
        seed: Option<u64>,
        /// Model JSON for lcsac (defaults to `<out>/model.json`).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Certificate JSON for lcsac (defaults to `<out>/certificate.json`).
        #[arg(long)]
        cert: Option<PathBuf>,
    },
    /// Roll out a saved checkpoint deterministically.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint JSON written during training.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 5)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Aggregate every run record under the output directory.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_algo(s: &str) -> std::result::Result<Algorithm, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help / --version are not errors.
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 1,
                _ => 2,
            })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Collect { common, seed } => {
            let cfg = load_config(&common)?;
            std::fs::create_dir_all(&common.out)?;
            let dataset = collect_dataset(&cfg, seed)?;
            let path = common.out.join("dataset.csv");
            dataset.save_csv(&path)?;
            cfg.save(common.out.join("config.toml"))?;
            println!("collected {} transitions -> {}", dataset.len(), path.display());
            Ok(())
        }
        Command::FitEdmd {
            common,
            dataset,
            seed,
        } => {
            let cfg = load_config(&common)?;
            std::fs::create_dir_all(&common.out)?;
            let data_path = dataset.unwrap_or_else(|| common.out.join("dataset.csv"));
            let data = EdmdDataset::load_csv(&data_path)?;
            let (model, report) = fit_pipeline(&cfg, &data, seed)?;
            let model_path = common.out.join("model.json");
            model.save_json(&model_path)?;
            let report_path = common.out.join("validation.json");
            serde_json::to_writer_pretty(
                std::io::BufWriter::new(std::fs::File::create(&report_path)?),
                &report,
            )?;
            println!(
                "fitted {}-dim lifted model on {} samples -> {}",
                model.n_lift(),
                data.len(),
                model_path.display()
            );
            let rmse: Vec<String> = report.one_step_rmse.iter().map(|v| format!("{v:.6}")).collect();
            println!("one-step rmse per error channel: [{}]", rmse.join(", "));
            match report.multi_step_rmse {
                Some(v) => println!(
                    "multi-step rmse over {} rollout steps (horizon {}): {v:.6}",
                    report.n_rollout_steps, report.rollout_horizon
                ),
                None => println!("multi-step rmse: n/a (no contiguous held-out runs)"),
            }
            Ok(())
        }
        Command::SolveDare {
            common,
            model,
            verify_samples,
            seed,
        } => {
            let cfg = load_config(&common)?;
            std::fs::create_dir_all(&common.out)?;
            let model_path = model.unwrap_or_else(|| common.out.join("model.json"));
            let model = LiftedModel::load_json(&model_path)?;
            let (cert, contraction) = certify_pipeline(&cfg, &model, verify_samples, seed)?;
            let cert_path = common.out.join("certificate.json");
            cert.save_json(&cert_path)?;
            let spectrum = analyze_p(&cert.p, 0.0)?;
            let spectrum_path = common.out.join("spectrum.csv");
            spectrum.save_csv(&spectrum_path)?;
            println!("certificate -> {}", cert_path.display());
            println!("dare residual = {:.3e}", cert.dare_residual);
            println!(
                "P spectrum: min = {:.6e}, max = {:.6e}, condition = {:.3e} -> {}",
                spectrum.m1,
                spectrum.m2,
                spectrum.condition_number,
                spectrum_path.display()
            );
            println!(
                "contraction check at eta = {:.3e} (eta* = {:.3e}): worst s = {:.3e}, rollouts {}, {}",
                contraction.eta,
                contraction.eta_star,
                contraction.worst_s,
                if contraction.rollouts_ok { "ok" } else { "FAILED" },
                if contraction.pass { "pass" } else { "FAIL" },
            );
            if !contraction.pass {
                return Err(Error::InvalidArgument(
                    "contraction verification failed; the fitted surrogate is not usable".into(),
                ));
            }
            Ok(())
        }
        Command::Train {
            common,
            algo,
            seed,
            model,
            cert,
        } => {
            let cfg = load_config(&common)?;
            std::fs::create_dir_all(&common.out)?;
            let artifacts = match algo {
                Algorithm::Sac => None,
                Algorithm::LcSac => {
                    let model_path = model.unwrap_or_else(|| common.out.join("model.json"));
                    let cert_path = cert.unwrap_or_else(|| common.out.join("certificate.json"));
                    Some((
                        LiftedModel::load_json(&model_path)?,
                        CLFCertificate::load_json(&cert_path)?,
                    ))
                }
            };
            let seeds = match seed {
                Some(s) => vec![s],
                None => cfg.run.seeds.clone(),
            };
            if seeds.is_empty() {
                return Err(Error::Config("run.seeds is empty and no --seed given".into()));
            }
            cfg.save(common.out.join("config.toml"))?;
            for &s in &seeds {
                let run_dir = common.out.join(format!("{algo}_seed{s}"));
                std::fs::create_dir_all(&run_dir)?;
                let handle = artifacts.as_ref().map(|(m, c)| CertifiedModel { model: m, cert: c });
                let (record, _) = train(&cfg, algo, s, handle, Some(&run_dir))?;
                record.save_json(run_dir.join("record.json"))?;
                let final10 = record
                    .data
                    .episodes
                    .iter()
                    .rev()
                    .take(10)
                    .map(|e| e.reward)
                    .sum::<f64>()
                    / record.data.episodes.len().min(10).max(1) as f64;
                let last_eval = record
                    .data
                    .evals
                    .last()
                    .map_or("n/a".to_string(), |e| format!("{:.2} +/- {:.2}", e.mean_reward, e.std_reward));
                println!(
                    "{algo} seed {s}: {} episodes, trailing-10 reward {final10:.2}, final eval {last_eval}, {:.1}s -> {}",
                    record.data.episodes.len(),
                    record.meta.wall_clock_seconds,
                    run_dir.display()
                );
            }
            Ok(())
        }
        Command::Eval {
            common,
            checkpoint,
            episodes,
            seed,
        } => {
            let cfg = load_config(&common)?;
            std::fs::create_dir_all(&common.out)?;
            let agent = AgentParams::load_checkpoint(&checkpoint, &cfg.sac, seed)?;
            let report = evaluate(&agent, &cfg, episodes, seed)?;
            let path = common.out.join("eval.json");
            serde_json::to_writer_pretty(
                std::io::BufWriter::new(std::fs::File::create(&path)?),
                &report,
            )?;
            println!(
                "eval over {episodes} episodes: reward {:.2} +/- {:.2} -> {}",
                report.mean_reward,
                report.std_reward,
                path.display()
            );
            Ok(())
        }
        Command::Report { common } => {
            let mut records = Vec::new();
            collect_records(&common.out, &mut records)?;
            if records.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "no record.json files under {}; train first",
                    common.out.display()
                )));
            }
            // Stable report order regardless of directory iteration order.
            records.sort_by_key(|r: &RunRecord| (r.meta.algo.to_string(), r.meta.seed));
            let written = export_metrics(&records, &common.out)?;
            println!(
                "aggregated {} runs -> {} files under {}",
                records.len(),
                written.len(),
                common.out.display()
            );
            for row in lcsac::harness::summarize(&records)? {
                println!(
                    "{:6} {:32} mean {:>12.4} std {:>10.4} min {:>12.4} max {:>12.4}",
                    row.algo, row.metric, row.mean, row.std, row.min, row.max
                );
            }
            Ok(())
        }
    }
}

/// Load the config file (or defaults), then apply `--set` overrides.
fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut doc: toml::Value = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("config parse: {e}")))?
        }
        None => toml::Value::Table(toml::map::Map::new()),
    };
    for setting in &common.set {
        apply_set(&mut doc, setting)?;
    }
    let text = toml::to_string(&doc).map_err(|e| Error::Config(format!("config encode: {e}")))?;
    ExperimentConfig::from_toml_str(&text)
}

/// Apply one `section.key=value` override to a TOML document. The value is
/// parsed as TOML (numbers, booleans, arrays); anything unparsable is taken
/// as a bare string, so `--set env.trajectory=circle` needs no quoting.
fn apply_set(doc: &mut toml::Value, setting: &str) -> Result<()> {
    let (path, raw) = setting
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {setting:?}")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("--set key has an empty segment: {path:?}")));
    }
    let value = parse_toml_value(raw.trim());

    let mut node = doc;
    for key in &keys[..keys.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("--set {path}: `{key}` is not a table")))?;
        node = table
            .entry((*key).to_string())
            .or_insert(toml::Value::Table(toml::map::Map::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("--set {path}: parent is not a table")))?;
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

fn parse_toml_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Value>(&format!("v = {raw}"))
        .ok()
        .and_then(|v| v.get("v").cloned())
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Recursively gather `record.json` files below `dir`.
fn collect_records(dir: &Path, out: &mut Vec<RunRecord>) -> Result<()> {
    if !dir.is_dir() {
        return Ok(());
    }
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_records(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == "record.json") {
            out.push(RunRecord::load_json(&path)?);
        }
    }
    Ok(())
}
