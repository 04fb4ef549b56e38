//! Training loop and experiment runner: data preparation, SGD with step
//! decay and early stopping on validation accuracy, per-split evaluation,
//! and RunRecord persistence.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::dataset::load_dataset;
use crate::error::{CfaugError, Result};
use crate::loss::{batch_total_loss, LossBreakdown};
use crate::metrics::{argmax, evaluate_split, next_class_shift, MetricReport};
use crate::net::{forward_logits, save_checkpoint, Network, SgdOptimizer};
use crate::synth::{
    build_flip_split, build_mixed_split, generate_dataset, LabeledExample, SplitMode, SynthSpec,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_loss: f64,
    pub ce: f64,
    pub cf: f64,
    pub factual: f64,
    pub sal: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub model_name: String,
    pub seed: u64,
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub reports: Vec<MetricReport>,
    /// Set when the run aborted (e.g. non-finite loss); reports are then
    /// empty.
    pub aborted: Option<String>,
}

/// Materialized data for one experiment: train/val plus evaluation splits.
pub struct PreparedData {
    pub num_classes: usize,
    pub image_size: usize,
    pub train: Vec<LabeledExample>,
    pub val: Vec<LabeledExample>,
    pub eval: BTreeMap<String, Vec<LabeledExample>>,
}

/// Class-balanced prefix subsample: floor(n_c * ratio) per class.
pub fn subsample_balanced(examples: &[LabeledExample], ratio: f64, k: usize) -> Vec<LabeledExample> {
    if ratio >= 1.0 {
        return examples.to_vec();
    }
    let mut per_class: Vec<usize> = vec![0; k];
    for e in examples {
        per_class[e.label] += 1;
    }
    let want: Vec<usize> = per_class
        .iter()
        .map(|n| (*n as f64 * ratio).floor() as usize)
        .collect();
    let mut taken = vec![0usize; k];
    examples
        .iter()
        .filter(|e| {
            if taken[e.label] < want[e.label] {
                taken[e.label] += 1;
                true
            } else {
                false
            }
        })
        .cloned()
        .collect()
}

pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData> {
    let (k, size, train, val, test_original) = match &config.dataset_dir {
        Some(dir) => {
            let mut splits = load_dataset(Path::new(dir))?;
            let take = |splits: &mut BTreeMap<_, Vec<crate::dataset::DatasetRecord>>,
                        name: &str|
             -> Result<Vec<LabeledExample>> {
                splits
                    .remove(name)
                    .map(|v| v.into_iter().map(|r| r.example).collect())
                    .ok_or_else(|| {
                        CfaugError::InvalidArgument(format!("dataset has no {name} split"))
                    })
            };
            let train = take(&mut splits, "train")?;
            let val = take(&mut splits, "val")?;
            let test = take(&mut splits, "test")?;
            let k = train.iter().map(|e| e.label).max().unwrap_or(0) + 1;
            let size = train
                .first()
                .map(|e| e.image.height)
                .ok_or_else(|| CfaugError::InvalidArgument("empty train split".into()))?;
            (k, size, train, val, test)
        }
        None => {
            let s = &config.synth;
            let train_per_class = if config.data_ratio > 1.0 {
                (s.train_per_class as f64 * config.data_ratio).round() as usize
            } else {
                s.train_per_class
            };
            let train = generate_dataset(&SynthSpec {
                num_classes: s.num_classes,
                image_size: s.image_size,
                samples_per_class: train_per_class,
                correlation: s.correlation,
                seed: s.seed,
            })?;
            // validation is balanced: background independent of the label
            let val = generate_dataset(&SynthSpec {
                num_classes: s.num_classes,
                image_size: s.image_size,
                samples_per_class: s.val_per_class,
                correlation: 1.0 / s.num_classes as f64,
                seed: s.seed.wrapping_add(1_000_003),
            })?;
            // evaluation base: fully matched backgrounds
            let test = generate_dataset(&SynthSpec {
                num_classes: s.num_classes,
                image_size: s.image_size,
                samples_per_class: s.test_per_class,
                correlation: 1.0,
                seed: s.seed.wrapping_add(2_000_003),
            })?;
            (s.num_classes, s.image_size, train, val, test)
        }
    };

    let train = if config.data_ratio < 1.0 {
        subsample_balanced(&train, config.data_ratio, k)
    } else {
        train
    };

    let mut split_rng = ChaCha8Rng::seed_from_u64(config.synth.seed.wrapping_add(3_000_003));
    let mut eval = BTreeMap::new();
    for name in &config.eval_splits {
        let mode = SplitMode::parse(name)?;
        let examples = match mode {
            SplitMode::Original => test_original.clone(),
            SplitMode::MixedSame | SplitMode::MixedRand | SplitMode::MixedNext => {
                build_mixed_split(&test_original, mode, k, &mut split_rng)?
            }
            SplitMode::Flip => build_flip_split(&test_original, k, &mut split_rng)?.1,
        };
        eval.insert(name.clone(), examples);
    }
    Ok(PreparedData {
        num_classes: k,
        image_size: size,
        train,
        val,
        eval,
    })
}

fn split_accuracy(net: &Network, examples: &[LabeledExample]) -> Result<f64> {
    let mut hits = 0usize;
    for e in examples {
        let logits = forward_logits(net, &e.image.normalize())?;
        if argmax(&logits) == e.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// Trains one seed: returns the best-validation network and epoch stats.
pub fn train_one_seed(
    config: &ExperimentConfig,
    data: &PreparedData,
    seed: u64,
) -> Result<(Network, Vec<EpochStats>, usize, f64, Option<String>)> {
    let mut net = Network::new(
        data.image_size,
        data.image_size,
        3,
        data.num_classes,
        seed,
    );
    let opt_cfg = &config.optimizer;
    let mut opt = SgdOptimizer::new(&net, opt_cfg.lr, opt_cfg.momentum, opt_cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1));
    let mut stats = Vec::new();
    let mut best = net.clone();
    let mut best_epoch = 0usize;
    let mut best_val = f64::NEG_INFINITY;
    let mut since_best = 0usize;

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 0..opt_cfg.epochs {
        let decays = opt_cfg.lr_decay_epochs.iter().filter(|d| **d <= epoch).count();
        opt.lr = opt_cfg.lr * opt_cfg.lr_decay_factor.powi(decays as i32);
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        let mut batches = 0usize;
        for chunk in order.chunks(opt_cfg.batch_size) {
            let batch: Vec<LabeledExample> =
                chunk.iter().map(|i| data.train[*i].clone()).collect();
            let (bd, grads) = match batch_total_loss(&net, &batch, &config.loss, &mut rng) {
                Ok(v) => v,
                Err(CfaugError::NonFinite(what)) => {
                    return Ok((
                        best,
                        stats,
                        best_epoch,
                        best_val.max(0.0),
                        Some(format!("non-finite loss at epoch {epoch}: {what}")),
                    ));
                }
                Err(e) => return Err(e),
            };
            opt.step(&mut net, &grads)?;
            sums.total += bd.total;
            sums.ce += bd.ce;
            sums.cf += bd.cf;
            sums.factual += bd.factual;
            sums.sal += bd.sal;
            batches += 1;
        }
        let inv = 1.0 / batches.max(1) as f64;
        let val_accuracy = split_accuracy(&net, &data.val)?;
        stats.push(EpochStats {
            train_loss: sums.total * inv,
            ce: sums.ce * inv,
            cf: sums.cf * inv,
            factual: sums.factual * inv,
            sal: sums.sal * inv,
            val_accuracy,
        });
        if val_accuracy > best_val {
            best_val = val_accuracy;
            best = net.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > config.early_stopping_patience {
                break;
            }
        }
    }
    Ok((best, stats, best_epoch, best_val, None))
}

/// Evaluates the trained network on every configured split, attaching the
/// next-class probability shift to the mixed-next report when an original
/// split is present.
pub fn evaluate_all(net: &Network, data: &PreparedData) -> Result<Vec<MetricReport>> {
    let mut reports = Vec::new();
    for (name, examples) in &data.eval {
        let mut report = evaluate_split(net, examples, name)?;
        if name == "mixed-next" {
            if let Some(original) = data.eval.get("original") {
                report.next_class_shift = next_class_shift(net, original, examples)?;
            }
        }
        reports.push(report);
    }
    Ok(reports)
}

pub fn model_dir(config: &ExperimentConfig) -> PathBuf {
    Path::new(&config.output_dir).join(&config.model_name)
}

/// Full experiment: trains every seed, evaluates, and persists RunRecords
/// plus a metrics.csv under `<output_dir>/<model_name>/`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    config.validate()?;
    let data = prepare_data(config)?;
    let dir = model_dir(config);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(
        dir.join("config.json"),
        serde_json::to_vec_pretty(config).expect("config serializes"),
    )?;
    let hash = config.hash();
    let started = std::time::Instant::now();
    let mut records = Vec::new();
    for &seed in &config.seeds {
        let (net, epochs, best_epoch, best_val, aborted) =
            train_one_seed(config, &data, seed)?;
        let reports = if aborted.is_none() {
            evaluate_all(&net, &data)?
        } else {
            Vec::new()
        };
        save_checkpoint(&net, &dir.join(format!("net-{seed}.ckpt")))?;
        let record = RunRecord {
            config_hash: hash.clone(),
            model_name: config.model_name.clone(),
            seed,
            epochs,
            best_epoch,
            best_val_accuracy: best_val,
            reports,
            aborted,
        };
        std::fs::write(
            dir.join(format!("run-{seed}.json")),
            serde_json::to_vec_pretty(&record).expect("record serializes"),
        )?;
        records.push(record);
    }
    write_metrics_csv(&dir.join("metrics.csv"), &records)?;
    // wall time and timestamps stay out of the deterministic artifacts
    let mut log = std::fs::File::create(dir.join("run.log"))?;
    writeln!(
        log,
        "finished {} seeds in {:.1}s",
        config.seeds.len(),
        started.elapsed().as_secs_f64()
    )?;
    Ok(records)
}

pub fn write_metrics_csv(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CfaugError::Io(e.to_string()))?;
    w.write_record(["model", "seed", "split", "accuracy", "macro_auc", "saliency_aupr", "next_class_shift"])
        .map_err(|e| CfaugError::Io(e.to_string()))?;
    for r in records {
        for report in &r.reports {
            w.write_record([
                r.model_name.as_str(),
                &r.seed.to_string(),
                &report.split,
                &format!("{:.6}", report.accuracy),
                &format!("{:.6}", report.macro_auc),
                &format!("{:.6}", report.saliency_aupr),
                &format!("{:.6}", report.next_class_shift),
            ])
            .map_err(|e| CfaugError::Io(e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}
