//! `apgan`: train, evaluate, ablate and inspect adaptive perceptual GAN runs.

mod ablate;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use apgan::config::{ExperimentConfig, ENV_PREFIX};
use apgan::manifest::WeightManifest;
use apgan::metrics::comparison_table;
use apgan::tasks::data::save_png;
use apgan::trainer::Trainer;
use apgan::Error;
use clap::{Parser, Subcommand};

const EXIT_HELP: &str = "Exit codes: 0 success, 1 internal error, 2 configuration error, \
3 data or checkpoint error, 4 non-finite loss abort.\n\
Every config key may be overridden by an environment variable named APGAN_<KEY>, e.g. APGAN_SEED=7.";

#[derive(Parser)]
#[command(name = "apgan", version, about = "Adaptive perceptual discriminator GAN experiments", after_help = EXIT_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one experiment described by a `key = value` config file.
    Train {
        config: PathBuf,
        /// Run directory; overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip rendering loss and unfreeze plots.
        #[arg(long)]
        no_plots: bool,
    },
    /// Run a checkpoint's generator over a dataset and score the outputs.
    Eval {
        checkpoint: PathBuf,
        /// Image folder (HR images for sisr, `a/` + `b/` for paired, domain X
        /// for unpaired). Defaults to the checkpoint's own held-out split.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Directory receiving `images/` and `metrics.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every variant of an ablation matrix with a shared seed.
    Ablate {
        /// Base `key = value` config plus `variants = Dense_D+F, Dense_D+SN+UF, ...`.
        matrix: PathBuf,
        /// Parent directory of the per-variant runs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the metadata, freeze state and tensor inventory of a checkpoint
    /// or weight manifest.
    InspectCheckpoint { checkpoint: PathBuf },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Unsupported(_) => 2,
        Error::MissingDataset(_)
        | Error::Data(_)
        | Error::Io { .. }
        | Error::CorruptFile(_)
        | Error::VersionMismatch { .. }
        | Error::MissingTensors(_)
        | Error::ShapeMismatch { .. }
        | Error::SpatialSize(_) => 3,
        Error::NonFinite(_) => 4,
        Error::Tensor(_) => 1,
    }
}

fn fail(context: &str, e: &Error) -> ExitCode {
    eprintln!("error: {context}: {e}");
    if let Error::NonFinite(d) = e {
        eprintln!("diagnostic: {d:?}");
    }
    ExitCode::from(exit_code(e))
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Error> {
    if !path.is_file() {
        return Err(Error::Config {
            field: "config".into(),
            message: format!("cannot read {}", path.display()),
        });
    }
    ExperimentConfig::load(path)
}

pub(crate) fn default_out(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.clone().unwrap_or_else(|| {
        let label = cfg
            .name
            .clone()
            .unwrap_or_else(|| cfg.train.task.kind.as_str().to_string());
        PathBuf::from("runs").join(format!("{label}-seed{}", cfg.train.seed))
    })
}

/// Trains one configuration into `out` and renders its plots.
pub(crate) fn run_experiment(
    cfg: ExperimentConfig,
    out: &Path,
    plots: bool,
) -> Result<apgan::trainer::RunReport, Error> {
    let mut trainer = Trainer::new(cfg.train)?;
    log::info!("training into {}", out.display());
    let report = trainer.run(Some(out))?;
    if plots {
        plot::render_run(out)?;
    }
    Ok(report)
}

fn cmd_train(config: &Path, out: Option<PathBuf>, no_plots: bool) -> ExitCode {
    let cfg = match load_config(config) {
        Ok(c) => c,
        Err(e) => return fail("invalid configuration", &e),
    };
    let out = out.unwrap_or_else(|| default_out(&cfg));
    match run_experiment(cfg, &out, !no_plots) {
        Ok(r) => {
            println!(
                "{} steps, held-out PSNR {:.3} dB (untrained {:.3}), SSIM {:.4}; report in {}",
                r.losses.len(),
                r.metrics.mean_psnr,
                r.initial_metrics.mean_psnr,
                r.metrics.mean_ssim,
                out.display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => fail("training failed", &e),
    }
}

fn cmd_eval(checkpoint: &Path, dataset: Option<&Path>, out: &Path) -> Result<(), Error> {
    let trainer = Trainer::restore(checkpoint)?;
    let p = &trainer.pipeline;
    let mut meta = trainer.metric_metadata();
    let split = match dataset {
        Some(d) => {
            meta.insert("dataset".into(), d.display().to_string());
            p.eval_split_from_dir(d)?
        }
        None => p.eval.clone(),
    };
    meta.insert("checkpoint".into(), checkpoint.display().to_string());
    let (report, outputs) = p.evaluate(&split, meta)?;
    for (id, img) in &outputs {
        save_png(&out.join("images").join(format!("{id}.png")), img)?;
    }
    let path = out.join("metrics.json");
    std::fs::write(&path, report.to_json()).map_err(|e| Error::Io { path, source: e })?;
    let dataset = report.metadata.get("dataset").cloned().unwrap_or_default();
    println!(
        "{}",
        comparison_table(&[("checkpoint".into(), dataset, report.clone())])
    );
    println!("{} images written to {}", outputs.len(), out.join("images").display());
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<(), Error> {
    let m = WeightManifest::read(path)?;
    println!("file: {}", path.display());
    println!("tensors: {}", m.len());
    for (k, v) in &m.metadata {
        if k == "config" || k == "freeze" {
            continue;
        }
        println!("{k}: {v}");
    }
    if let Some(cfg) = m.metadata.get("config") {
        let cfg: apgan::trainer::TrainConfig =
            serde_json::from_value(cfg.clone()).map_err(|e| Error::CorruptFile(format!("config: {e}")))?;
        println!("config:");
        for line in apgan::config::to_kv(&cfg, None).lines() {
            println!("  {line}");
        }
    }
    if let Some(f) = m.metadata.get("freeze") {
        let f: apgan::extractor::FreezeState =
            serde_json::from_value(f.clone()).map_err(|e| Error::CorruptFile(format!("freeze: {e}")))?;
        println!("unfrozen units: {}/{}", f.unfrozen_count, m.units.len());
        for e in &f.epoch_log {
            let name = m.units.get(e.unit_index).map_or("?", String::as_str);
            println!("  epoch {:>4}: {name}", e.epoch);
        }
    } else if !m.units.is_empty() {
        println!("units (unfreeze order): {}", m.units.join(", "));
    }
    println!("tensor inventory:");
    for (name, e) in m.entries() {
        println!("  {name} {:?} {:?}", e.dtype, e.shape);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    log::debug!("environment overrides use the {ENV_PREFIX} prefix");
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, out, no_plots } => cmd_train(&config, out, no_plots),
        Command::Eval {
            checkpoint,
            dataset,
            out,
        } => match cmd_eval(&checkpoint, dataset.as_deref(), &out) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => fail("evaluation failed", &e),
        },
        Command::Ablate { matrix, out } => match ablate::run(&matrix, out.as_deref()) {
            Ok(table) => {
                println!("{table}");
                ExitCode::SUCCESS
            }
            Err((variant, e)) => fail(&format!("ablation variant {variant}"), &e),
        },
        Command::InspectCheckpoint { checkpoint } => match cmd_inspect(&checkpoint) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => fail("cannot inspect checkpoint", &e),
        },
    }
}
