use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use cfaug::config::ExperimentConfig;
use cfaug::dataset::{write_labels, write_split};
use cfaug::exp::{augment_offline, report, sweep, Recipe, SweepAxis};
use cfaug::synth::{generate_dataset, SynthSpec};
use cfaug::train::run_experiment;

#[derive(Parser)]
#[command(name = "cfaug", about = "Counterfactual/factual background augmentation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic spurious-correlation dataset directory.
    Synth(SynthArgs),
    /// Produce augmented copies of a dataset offline.
    Augment(AugmentArgs),
    /// Train models from an experiment config.
    Train(TrainArgs),
    /// Sweep one hyperparameter axis over a list of values.
    Sweep(SweepArgs),
    /// Aggregate run records into summary tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 1000)]
    train_per_class: usize,
    #[arg(long, default_value_t = 200)]
    val_per_class: usize,
    #[arg(long, default_value_t = 500)]
    test_per_class: usize,
    /// Train-split correlation between label and background class.
    #[arg(long, default_value_t = 0.95)]
    rho: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AugmentArgs {
    /// Source dataset directory (never modified).
    #[arg(long)]
    dataset: PathBuf,
    /// Recipes: cf-grey, cf-random, cf-shuffle, cf-tile,
    /// cf-external=<dir>, f-random, f-shuffle, f-mixed-rand, f-fgsm.
    #[arg(long, required = true)]
    recipe: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    /// Trained checkpoint, required for f-fgsm.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config JSON; defaults apply for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model_name: Option<String>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    data_ratio: Option<f64>,
    #[arg(long)]
    dataset_dir: Option<String>,
    #[arg(long)]
    output_dir: Option<String>,
}

impl TrainArgs {
    fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)
                .with_context(|| format!("loading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = &self.model_name {
            cfg.model_name = v.clone();
        }
        if let Some(v) = &self.seeds {
            cfg.seeds = v.clone();
        }
        if let Some(v) = self.epochs {
            cfg.optimizer.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.optimizer.lr = v;
        }
        if let Some(v) = self.data_ratio {
            cfg.data_ratio = v;
        }
        if let Some(v) = &self.dataset_dir {
            cfg.dataset_dir = Some(v.clone());
        }
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Axis: lambda_sal, fgsm_eps, data_ratio, cf_method, f_method.
    #[arg(long)]
    axis: String,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory containing model run subdirectories.
    #[arg(long)]
    run_dir: PathBuf,
    /// Model name used as the relative-improvement baseline.
    #[arg(long, default_value = "baseline")]
    baseline: String,
}

fn run_synth(args: &SynthArgs) -> anyhow::Result<()> {
    let base = SynthSpec {
        num_classes: args.classes,
        image_size: args.size,
        samples_per_class: args.train_per_class,
        correlation: args.rho,
        seed: args.seed,
    };
    let train = generate_dataset(&base)?;
    let val = generate_dataset(&SynthSpec {
        samples_per_class: args.val_per_class,
        correlation: 1.0 / args.classes as f64,
        seed: args.seed.wrapping_add(1_000_003),
        ..base
    })?;
    let test = generate_dataset(&SynthSpec {
        samples_per_class: args.test_per_class,
        correlation: 1.0,
        seed: args.seed.wrapping_add(2_000_003),
        ..base
    })?;
    let mut rows = Vec::new();
    write_split(&args.out, "train", &train, &mut rows)?;
    write_split(&args.out, "val", &val, &mut rows)?;
    write_split(&args.out, "test", &test, &mut rows)?;
    write_labels(&args.out, &rows)?;
    println!(
        "wrote {} examples ({} train / {} val / {} test) to {}",
        rows.len(),
        train.len(),
        val.len(),
        test.len(),
        args.out.display()
    );
    Ok(())
}

fn run_augment(args: &AugmentArgs) -> anyhow::Result<()> {
    let recipes = args
        .recipe
        .iter()
        .map(|r| Recipe::parse(r))
        .collect::<Result<Vec<_>, _>>()?;
    let result = augment_offline(
        &args.dataset,
        &recipes,
        &args.out,
        args.checkpoint.as_deref(),
        args.seed,
    )?;
    println!(
        "wrote {} augmented images to {}",
        result.manifest.len(),
        args.out.display()
    );
    for failure in &result.failures {
        eprintln!("failed: {failure}");
    }
    if !result.failures.is_empty() && result.manifest.is_empty() {
        bail!("all augmentations failed");
    }
    Ok(())
}

fn run_train(args: &TrainArgs) -> anyhow::Result<()> {
    let cfg = args.resolve()?;
    let records = run_experiment(&cfg)?;
    for r in &records {
        match &r.aborted {
            Some(reason) => println!("seed {}: aborted ({reason})", r.seed),
            None => {
                println!(
                    "seed {}: best val accuracy {:.4} at epoch {}",
                    r.seed, r.best_val_accuracy, r.best_epoch
                );
                for report in &r.reports {
                    println!(
                        "  {:<12} acc {:.4}  auc {:.4}  sal-aupr {:.4}",
                        report.split, report.accuracy, report.macro_auc, report.saliency_aupr
                    );
                }
            }
        }
    }
    Ok(())
}

fn run_sweep(args: &SweepArgs) -> anyhow::Result<()> {
    let cfg = args.train.resolve()?;
    let axis = SweepAxis::parse(&args.axis)?;
    let result = sweep(&cfg, axis, &args.values)?;
    for (value, records) in &result.records {
        let mean_flip: Vec<f64> = records
            .iter()
            .flat_map(|r| r.reports.iter())
            .filter(|rep| rep.split == "flip")
            .map(|rep| rep.accuracy)
            .collect();
        if !mean_flip.is_empty() {
            let m = mean_flip.iter().sum::<f64>() / mean_flip.len() as f64;
            println!("{}={value}: flip accuracy {:.4}", axis.name(), m);
        }
    }
    for (split, r2) in &result.scatter_r2 {
        println!("scatter r^2 [{split}] = {r2:.4}");
    }
    Ok(())
}

fn run_report(args: &ReportArgs) -> anyhow::Result<()> {
    let (_, md) = report(&args.run_dir, &args.baseline)?;
    println!("{md}");
    Ok(())
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Synth(args) => run_synth(&args),
        Command::Augment(args) => run_augment(&args),
        Command::Train(args) => run_train(&args),
        Command::Sweep(args) => run_sweep(&args),
        Command::Report(args) => run_report(&args),
    }
}
