//! Command-line entry point: experiment stages as subcommands, plus
//! single-image prediction and report re-emission.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use biqa_core::config::{ExperimentConfig, SynthConfig};
use biqa_core::experiment::{self, predict_image, prepare, run_experiment, ExperimentError};
use biqa_core::model::{load_model, QualityModel};
use biqa_core::report::{emit_report, EvalReport};
use biqa_core::synth::synth_dataset;

#[derive(Parser)]
#[command(
    name = "biqa",
    about = "Blind image quality assessment: crop-based CNN features, fusion, SVR scoring and evaluation protocols",
    version
)]
struct Cli {
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the protocol seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the report format (`table` or `json-like`).
    #[arg(long)]
    format: Option<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, ExperimentError> {
        let mut cfg = ExperimentConfig::from_file(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.protocol.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        if let Some(format) = &self.format {
            cfg.output.formats = vec![normalize_format(format)?];
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn normalize_format(format: &str) -> Result<String, ExperimentError> {
    match format {
        "table" => Ok("table".to_string()),
        "json" | "json-like" => Ok("json".to_string()),
        "plots" => Ok("plots".to_string()),
        other => Err(biqa_core::config::ConfigError::Invalid(format!(
            "unknown format `{other}` (expected table or json-like)"
        ))
        .into()),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic distorted-image dataset with known MOS values.
    Synth {
        /// Synthesis configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Override the generation seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune the backbone on each split's training fold (or persist the
    /// initialized backbone when fine-tuning is disabled).
    Finetune(ConfigArgs),
    /// Extract crop descriptors into binary feature files.
    Extract(ConfigArgs),
    /// Train the SVR scoring head per split and fusion configuration.
    TrainSvr(ConfigArgs),
    /// Evaluate on test folds and write the report.
    Evaluate(ConfigArgs),
    /// Run all stages: finetune, extract, train-svr, evaluate.
    Run(ConfigArgs),
    /// Score a single image with a saved quality model.
    Predict {
        /// Quality model file (.biqm).
        #[arg(long)]
        model: PathBuf,
        /// Backbone checkpoint (.biqn); defaults to the model's sibling file.
        #[arg(long)]
        backbone: Option<PathBuf>,
        /// Image to score (PNG or BMP).
        #[arg(long)]
        image: PathBuf,
        /// Number of random crops (defaults to the model's crop count).
        #[arg(long)]
        crops: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-emit a stored report in another format.
    Report {
        /// report.json produced by `evaluate` or `run`.
        #[arg(long)]
        input: PathBuf,
        /// Output format: table, json-like or plots.
        #[arg(long, default_value = "table")]
        format: String,
        /// Output directory (defaults to the report's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are success, anything else is usage.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("warning: could not configure {jobs} worker threads: {e}");
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<(), ExperimentError> {
    match command {
        Command::Synth { config, seed, out } => {
            let mut synth_cfg = SynthConfig::from_file(&config)?;
            if let Some(seed) = seed {
                synth_cfg.seed = seed;
            }
            if let Some(out) = out {
                synth_cfg.out_dir = out;
            }
            let manifest = synth_dataset(&synth_cfg.spec(), synth_cfg.seed, &synth_cfg.out_dir)?;
            println!(
                "wrote {} images and manifest.csv to {}",
                manifest.records.len(),
                synth_cfg.out_dir.display()
            );
            Ok(())
        }
        Command::Finetune(args) => {
            let ctx = prepare(&args.load()?)?;
            experiment::stage_finetune(&ctx)?;
            println!("finetune stage complete: {}", ctx.paths.dir.display());
            Ok(())
        }
        Command::Extract(args) => {
            let ctx = prepare(&args.load()?)?;
            experiment::stage_extract(&ctx)?;
            println!("extract stage complete: {}", ctx.paths.dir.display());
            Ok(())
        }
        Command::TrainSvr(args) => {
            let ctx = prepare(&args.load()?)?;
            experiment::stage_train_svr(&ctx)?;
            println!("train-svr stage complete: {}", ctx.paths.dir.display());
            Ok(())
        }
        Command::Evaluate(args) => {
            let ctx = prepare(&args.load()?)?;
            let report = experiment::stage_evaluate(&ctx)?;
            print_summary(&report);
            Ok(())
        }
        Command::Run(args) => {
            let report = run_experiment(&args.load()?)?;
            print_summary(&report);
            Ok(())
        }
        Command::Predict { model, backbone, image, crops, seed } => {
            let model_data: QualityModel = load_model(&model)?;
            let checkpoint =
                backbone.unwrap_or_else(|| QualityModel::sibling_checkpoint_path(&model));
            if !checkpoint.exists() {
                return Err(ExperimentError::AssetMissing { path: checkpoint });
            }
            let (bundle, hash) = biqa_core::backbone::load_checkpoint(&checkpoint)?;
            model_data.verify_backbone(&hash)?;
            let outcome = predict_image(&model_data, &bundle, &image, crops, seed)?;
            println!("score: {:.4}", outcome.score);
            if let Some(per_crop) = &outcome.per_crop {
                let joined =
                    per_crop.iter().map(|s| format!("{s:.4}")).collect::<Vec<_>>().join(" ");
                println!("per-crop: {joined}");
            }
            if outcome.with_replacement {
                eprintln!("note: crop count exceeds distinct origins; crops repeat");
            }
            Ok(())
        }
        Command::Report { input, format, out } => {
            let report = EvalReport::load(&input).map_err(|source| ExperimentError::Io {
                path: input.clone(),
                source,
            })?;
            let dir = out
                .or_else(|| input.parent().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("."));
            let format = normalize_format(&format)?;
            emit_report(&report, &dir, std::slice::from_ref(&format))
                .map_err(|source| ExperimentError::Io { path: dir.clone(), source })?;
            if format == "table" {
                print!("{}", report.to_table());
            }
            Ok(())
        }
    }
}

fn print_summary(report: &EvalReport) {
    print!("{}", report.to_table());
}
