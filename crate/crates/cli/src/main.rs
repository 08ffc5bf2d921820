use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use cris_core::backbone::BackboneKind;
use cris_core::data::{load_dataset, split_dataset, synth_shapes, write_dataset, DatasetLayout, SplitSpec};
use cris_core::experiments::{
    emit_plots, emit_table_from_dir, evaluate_saved_cell, prepare_dataset, run_grid, train_cell, tune_cell, tuned_config,
    CellPlan, ExperimentSpec,
};
use cris_core::training::Strategy;
use cris_core::{Error, Result};

#[derive(Parser)]
#[command(name = "cris", version, about = "Segmentation with an interleaved refinement objective")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetKind {
    Kvasir,
    Cvc,
    Synth,
}

#[derive(Args)]
struct CellArgs {
    /// Experiment spec (TOML).
    spec: PathBuf,
    #[arg(long)]
    dataset: String,
    #[arg(long)]
    backbone: BackboneKind,
    #[arg(long)]
    strategy: Strategy,
}

#[derive(Subcommand)]
enum Command {
    /// Check or generate a dataset and write its split manifest.
    PrepareData {
        root: PathBuf,
        #[arg(long, value_enum)]
        dataset: DatasetKind,
        /// Target side length after resizing.
        #[arg(long, default_value_t = 128)]
        size: usize,
        /// Sample count for the synthetic dataset.
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Learning-rate search for one grid cell.
    Tune(CellArgs),
    /// Train one grid cell, using a tuned learning rate when available.
    Train(CellArgs),
    /// Score a trained cell on its test split.
    Evaluate(CellArgs),
    /// Run every cell of an experiment spec.
    RunGrid {
        spec: PathBuf,
        /// Validate and print the resolved grid without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Rebuild the results table from stored reports.
    EmitTable { dir: PathBuf },
    /// Render precision-recall curves and probability maps from stored reports.
    EmitPlots { dir: PathBuf },
}

fn cell(args: &CellArgs) -> Result<(ExperimentSpec, CellPlan, PathBuf)> {
    let spec = ExperimentSpec::from_file(&args.spec)?;
    spec.validate()?;
    let plan = spec.find_cell(&args.dataset, args.backbone, args.strategy)?;
    let dir = spec.effective_output_dir().join(plan.dir_name());
    Ok((spec, plan, dir))
}

fn print(value: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&value).expect("json value"));
}

fn prepare_data(root: &Path, kind: DatasetKind, size: usize, count: usize, seed: u64) -> Result<()> {
    let (name, data) = match kind {
        DatasetKind::Synth => {
            let d = synth_shapes(count, (size, size), seed)?;
            write_dataset(&d, root)?;
            ("synth", d)
        }
        DatasetKind::Kvasir | DatasetKind::Cvc => {
            let name = if matches!(kind, DatasetKind::Kvasir) { "kvasir" } else { "cvc" };
            (name, load_dataset(name, &DatasetLayout::detect(root)?, (size, size))?)
        }
    };
    let splits = split_dataset(&data, &SplitSpec::new(seed))?;
    let manifest = root.join("split_manifest.tsv");
    splits.manifest.write_or_verify(&manifest)?;
    let (train, val, test) = splits.sizes();
    print(json!({
        "dataset": name,
        "samples": data.len(),
        "train": train,
        "val": val,
        "test": test,
        "manifest": manifest,
        "manifest_hash": splits.manifest.digest(),
    }));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrepareData {
            root,
            dataset,
            size,
            count,
            seed,
        } => prepare_data(&root, dataset, size, count, seed),
        Command::Tune(args) => {
            let (spec, plan, dir) = cell(&args)?;
            if spec.tuning.is_none() {
                return Err(Error::InvalidConfig("the experiment file has no [tuning] section".into()));
            }
            let data = prepare_dataset(&spec, &plan.dataset, &spec.effective_output_dir())?;
            let (cfg, summary) = tune_cell(&spec, &plan, &data, &dir)?;
            print(json!({ "cell": plan.dir_name(), "learning_rate": cfg.learning_rate, "study": summary }));
            Ok(())
        }
        Command::Train(args) => {
            let (spec, plan, dir) = cell(&args)?;
            let data = prepare_dataset(&spec, &plan.dataset, &spec.effective_output_dir())?;
            let (cfg, _) = tuned_config(&plan, &dir)?;
            let state = train_cell(&spec, &plan, &cfg, &data, &dir)?;
            print(json!({
                "cell": plan.dir_name(),
                "learning_rate": cfg.learning_rate,
                "epochs": state.history.records.len(),
                "final_val_dice": state.history.records.last().map(|r| r.val_dice),
                "checkpoint": dir.join("model.ckpt"),
            }));
            Ok(())
        }
        Command::Evaluate(args) => {
            let (spec, plan, dir) = cell(&args)?;
            let data = prepare_dataset(&spec, &plan.dataset, &spec.effective_output_dir())?;
            let report = evaluate_saved_cell(&spec, &plan, &data, &dir)?;
            print(json!({
                "cell": plan.dir_name(),
                "dice": report.eval.dice,
                "mse": report.eval.mse,
                "best_threshold": report.eval.best_threshold,
            }));
            Ok(())
        }
        Command::RunGrid { spec, dry_run } => {
            let spec = ExperimentSpec::from_file(&spec)?;
            spec.validate()?;
            if dry_run {
                print!("{}", spec.describe());
                return Ok(());
            }
            let outcome = run_grid(&spec)?;
            print(serde_json::to_value(&outcome).expect("serializable outcome"));
            if outcome.failed() > 0 {
                eprintln!("{} of {} cells failed", outcome.failed(), outcome.cells.len());
            }
            Ok(())
        }
        Command::EmitTable { dir } => {
            print!("{}", emit_table_from_dir(&dir)?);
            Ok(())
        }
        Command::EmitPlots { dir } => {
            let written = emit_plots(&dir)?;
            print(json!({ "written": written }));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
