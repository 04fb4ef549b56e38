//! Offline augmentation, hyperparameter sweeps, and report rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::load_external_infill;
use crate::config::ExperimentConfig;
use crate::dataset::{load_dataset, DatasetRecord};
use crate::error::{CfaugError, Result};
use crate::img::Image;
use crate::loss::{
    build_cf_image, build_factual_image, CfInfillKind, FInfillKind, LossConfig,
};
use crate::metrics::r_squared;
use crate::net::{load_checkpoint, Network};
use crate::train::{run_experiment, RunRecord};

/// An offline augmentation recipe. Counterfactual outputs change the
/// label ("not y"); factual outputs keep it.
#[derive(Debug, Clone, PartialEq)]
pub enum Recipe {
    Cf(CfInfillKind),
    CfExternal(PathBuf),
    F(FInfillKind),
}

impl Recipe {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cf-grey" => Ok(Self::Cf(CfInfillKind::Grey)),
            "cf-random" => Ok(Self::Cf(CfInfillKind::Random)),
            "cf-shuffle" => Ok(Self::Cf(CfInfillKind::Shuffle)),
            "cf-tile" => Ok(Self::Cf(CfInfillKind::Tile)),
            "f-random" => Ok(Self::F(FInfillKind::Random)),
            "f-shuffle" => Ok(Self::F(FInfillKind::Shuffle)),
            "f-mixed-rand" => Ok(Self::F(FInfillKind::MixedRand)),
            "f-fgsm" => Ok(Self::F(FInfillKind::Fgsm)),
            other => match other.strip_prefix("cf-external=") {
                Some(dir) if !dir.is_empty() => Ok(Self::CfExternal(PathBuf::from(dir))),
                _ => Err(CfaugError::InvalidArgument(format!(
                    "unknown recipe {other:?}"
                ))),
            },
        }
    }

    pub fn method_name(&self) -> String {
        match self {
            Self::Cf(k) => format!("cf-{}", kind_name_cf(*k)),
            Self::CfExternal(_) => "cf-external".into(),
            Self::F(k) => format!("f-{}", kind_name_f(*k)),
        }
    }

    pub fn label_action(&self) -> &'static str {
        match self {
            Self::Cf(_) | Self::CfExternal(_) => "counterfactual",
            Self::F(_) => "keep",
        }
    }
}

fn kind_name_cf(k: CfInfillKind) -> &'static str {
    match k {
        CfInfillKind::Grey => "grey",
        CfInfillKind::Random => "random",
        CfInfillKind::Shuffle => "shuffle",
        CfInfillKind::Tile => "tile",
    }
}

fn kind_name_f(k: FInfillKind) -> &'static str {
    match k {
        FInfillKind::Random => "random",
        FInfillKind::Shuffle => "shuffle",
        FInfillKind::MixedRand => "mixed-rand",
        FInfillKind::Fgsm => "fgsm",
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRow {
    pub source_id: String,
    pub method: String,
    pub output_path: String,
    pub label_action: String,
}

pub struct OfflineReport {
    pub manifest: Vec<ManifestRow>,
    /// Per-file failures; the run continues past them.
    pub failures: Vec<String>,
}

fn build_recipe_image(
    recipe: &Recipe,
    record: &DatasetRecord,
    all: &[DatasetRecord],
    index: usize,
    net: Option<&Network>,
    rng: &mut ChaCha8Rng,
) -> Result<Image> {
    let e = &record.example;
    match recipe {
        Recipe::Cf(kind) => {
            let cfg = LossConfig {
                cf_infill: *kind,
                ..LossConfig::default()
            };
            build_cf_image(e, &cfg, rng)
        }
        Recipe::CfExternal(dir) => {
            load_external_infill(&dir.join(format!("{}.png", record.id)), &e.image, &e.region)
        }
        Recipe::F(kind) => {
            let cfg = LossConfig {
                f_infill: *kind,
                ..LossConfig::default()
            };
            let net = match kind {
                FInfillKind::Fgsm => Some(net.ok_or_else(|| {
                    CfaugError::InvalidArgument(
                        "f-fgsm offline augmentation needs --checkpoint".into(),
                    )
                })?),
                _ => None,
            };
            // a placeholder network is fine for non-fgsm methods
            let fallback;
            let net_ref = match net {
                Some(n) => n,
                None => {
                    fallback = Network::new(
                        e.image.height.max(4) / 4 * 4,
                        e.image.width.max(4) / 4 * 4,
                        e.image.channels,
                        2,
                        0,
                    );
                    &fallback
                }
            };
            let batch: Vec<_> = all.iter().map(|r| r.example.clone()).collect();
            build_factual_image(e, &batch, index, net_ref, &cfg, rng)?.ok_or_else(|| {
                CfaugError::InvalidArgument("no donor available for mixed-rand".into())
            })
        }
    }
}

/// Generates augmented PNGs for every input image and recipe, plus a
/// manifest CSV. Source files are never modified.
pub fn augment_offline(
    dataset_dir: &Path,
    recipes: &[Recipe],
    out_dir: &Path,
    checkpoint: Option<&Path>,
    seed: u64,
) -> Result<OfflineReport> {
    let splits = load_dataset(dataset_dir)?;
    let net = match checkpoint {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = Vec::new();
    let mut failures = Vec::new();
    std::fs::create_dir_all(out_dir)?;
    for records in splits.values() {
        for (i, record) in records.iter().enumerate() {
            for recipe in recipes {
                let method = recipe.method_name();
                match build_recipe_image(recipe, record, records, i, net.as_ref(), &mut rng) {
                    Ok(img) => {
                        let sub = out_dir.join(&method);
                        std::fs::create_dir_all(&sub)?;
                        let out_path = sub.join(format!("{}.png", record.id));
                        img.save_png(&out_path)?;
                        manifest.push(ManifestRow {
                            source_id: record.id.clone(),
                            method: method.clone(),
                            output_path: out_path.to_string_lossy().into_owned(),
                            label_action: recipe.label_action().to_string(),
                        });
                    }
                    Err(e) => failures.push(format!("{} [{}]: {e}", record.id, method)),
                }
            }
        }
    }
    let mut w = csv::Writer::from_path(out_dir.join("manifest.csv"))
        .map_err(|e| CfaugError::Io(e.to_string()))?;
    for row in &manifest {
        w.serialize(row).map_err(|e| CfaugError::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(OfflineReport { manifest, failures })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    LambdaSal,
    FgsmEps,
    DataRatio,
    CfMethod,
    FMethod,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lambda_sal" => Ok(Self::LambdaSal),
            "fgsm_eps" => Ok(Self::FgsmEps),
            "data_ratio" => Ok(Self::DataRatio),
            "cf_method" => Ok(Self::CfMethod),
            "f_method" => Ok(Self::FMethod),
            other => Err(CfaugError::InvalidArgument(format!(
                "unknown sweep axis {other:?}"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::LambdaSal => "lambda_sal",
            Self::FgsmEps => "fgsm_eps",
            Self::DataRatio => "data_ratio",
            Self::CfMethod => "cf_method",
            Self::FMethod => "f_method",
        }
    }

    fn apply(&self, config: &mut ExperimentConfig, value: &str) -> Result<()> {
        let parse_f64 = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| CfaugError::InvalidArgument(format!("bad numeric value {v:?}")))
        };
        match self {
            Self::LambdaSal => {
                config.loss.sal_enabled = true;
                config.loss.lambda_sal = parse_f64(value)?;
            }
            Self::FgsmEps => {
                config.loss.f_enabled = true;
                config.loss.f_infill = FInfillKind::Fgsm;
                config.loss.fgsm_eps = parse_f64(value)?;
            }
            Self::DataRatio => config.data_ratio = parse_f64(value)?,
            Self::CfMethod => {
                config.loss.cf_enabled = true;
                config.loss.cf_infill = match Recipe::parse(&format!("cf-{value}"))? {
                    Recipe::Cf(k) => k,
                    _ => unreachable!(),
                };
            }
            Self::FMethod => {
                config.loss.f_enabled = true;
                config.loss.f_infill = match Recipe::parse(&format!("f-{value}"))? {
                    Recipe::F(k) => k,
                    _ => unreachable!(),
                };
            }
        }
        Ok(())
    }
}

pub struct SweepResult {
    pub records: Vec<(String, Vec<RunRecord>)>,
    /// (split -> r_squared of saliency AUPR vs accuracy), when defined.
    pub scatter_r2: BTreeMap<String, f64>,
}

/// Runs the experiment once per sweep value, emitting a long-format CSV
/// plus (saliency AUPR, accuracy) scatter pairs with an R^2 summary.
pub fn sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[String]) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(CfaugError::InvalidArgument("sweep needs values".into()));
    }
    let sweep_dir = Path::new(&base.output_dir).join(format!("sweep-{}", axis.name()));
    std::fs::create_dir_all(&sweep_dir)?;
    let mut all = Vec::new();
    for value in values {
        let mut cfg = base.clone();
        axis.apply(&mut cfg, value)?;
        cfg.model_name = format!("{}-{}-{}", base.model_name, axis.name(), value);
        cfg.output_dir = sweep_dir.to_string_lossy().into_owned();
        let records = run_experiment(&cfg)?;
        all.push((value.clone(), records));
    }

    // long-format table
    let mut w = csv::Writer::from_path(sweep_dir.join("sweep.csv"))
        .map_err(|e| CfaugError::Io(e.to_string()))?;
    w.write_record([
        "axis", "value", "model", "seed", "split", "accuracy", "macro_auc", "saliency_aupr",
        "next_class_shift",
    ])
    .map_err(|e| CfaugError::Io(e.to_string()))?;
    let mut scatter: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (value, records) in &all {
        for r in records {
            for report in &r.reports {
                w.write_record([
                    axis.name(),
                    value,
                    &r.model_name,
                    &r.seed.to_string(),
                    &report.split,
                    &format!("{:.6}", report.accuracy),
                    &format!("{:.6}", report.macro_auc),
                    &format!("{:.6}", report.saliency_aupr),
                    &format!("{:.6}", report.next_class_shift),
                ])
                .map_err(|e| CfaugError::Io(e.to_string()))?;
                let entry = scatter.entry(report.split.clone()).or_default();
                entry.0.push(report.saliency_aupr);
                entry.1.push(report.accuracy);
            }
        }
    }
    w.flush()?;

    let mut sw = csv::Writer::from_path(sweep_dir.join("scatter.csv"))
        .map_err(|e| CfaugError::Io(e.to_string()))?;
    sw.write_record(["split", "saliency_aupr", "accuracy"])
        .map_err(|e| CfaugError::Io(e.to_string()))?;
    let mut scatter_r2 = BTreeMap::new();
    for (split, (xs, ys)) in &scatter {
        for (x, y) in xs.iter().zip(ys.iter()) {
            sw.write_record([split.as_str(), &format!("{x:.6}"), &format!("{y:.6}")])
                .map_err(|e| CfaugError::Io(e.to_string()))?;
        }
        if let Ok(r2) = r_squared(xs, ys) {
            scatter_r2.insert(split.clone(), r2);
        }
    }
    sw.flush()?;
    let mut rw = csv::Writer::from_path(sweep_dir.join("scatter_r2.csv"))
        .map_err(|e| CfaugError::Io(e.to_string()))?;
    rw.write_record(["split", "r_squared"])
        .map_err(|e| CfaugError::Io(e.to_string()))?;
    for (split, r2) in &scatter_r2 {
        rw.write_record([split.as_str(), &format!("{r2:.6}")])
            .map_err(|e| CfaugError::Io(e.to_string()))?;
    }
    rw.flush()?;
    Ok(SweepResult {
        records: all,
        scatter_r2,
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregated per-model, per-split summary across seeds.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub model: String,
    pub split: String,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub macro_auc_mean: f64,
    pub saliency_aupr_mean: f64,
    pub next_class_shift_mean: f64,
    /// Relative accuracy improvement over the baseline model, in percent.
    pub rel_improvement_pct: f64,
}

/// Loads every `run-*.json` under `run_dir` (one level of model
/// subdirectories) and renders mean (std) tables, with a relative
/// improvement column against `baseline_model`.
pub fn report(run_dir: &Path, baseline_model: &str) -> Result<(Vec<SummaryRow>, String)> {
    let mut records: Vec<RunRecord> = Vec::new();
    let mut stack = vec![run_dir.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("run-") && n.ends_with(".json"))
            {
                let bytes = std::fs::read(&path)?;
                let record: RunRecord = serde_json::from_slice(&bytes)
                    .map_err(|e| CfaugError::Format(format!("{}: {e}", path.display())))?;
                records.push(record);
            }
        }
    }
    if records.is_empty() {
        return Err(CfaugError::InvalidArgument(format!(
            "no run records under {}",
            run_dir.display()
        )));
    }

    // (model, split) -> metric vectors over seeds
    let mut grouped: BTreeMap<(String, String), Vec<&crate::metrics::MetricReport>> =
        BTreeMap::new();
    for r in &records {
        for report in &r.reports {
            grouped
                .entry((r.model_name.clone(), report.split.clone()))
                .or_default()
                .push(report);
        }
    }
    let baseline_acc: BTreeMap<String, f64> = grouped
        .iter()
        .filter(|((m, _), _)| m == baseline_model)
        .map(|((_, split), reports)| {
            let accs: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
            (split.clone(), mean_std(&accs).0)
        })
        .collect();

    let mut rows = Vec::new();
    for ((model, split), reports) in &grouped {
        let accs: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
        let (acc_mean, acc_std) = mean_std(&accs);
        let auc: Vec<f64> = reports.iter().map(|r| r.macro_auc).collect();
        let aupr: Vec<f64> = reports.iter().map(|r| r.saliency_aupr).collect();
        let shift: Vec<f64> = reports.iter().map(|r| r.next_class_shift).collect();
        let rel = match baseline_acc.get(split) {
            Some(base) if *base > 0.0 => (acc_mean - base) / base * 100.0,
            _ => 0.0,
        };
        rows.push(SummaryRow {
            model: model.clone(),
            split: split.clone(),
            accuracy_mean: acc_mean,
            accuracy_std: acc_std,
            macro_auc_mean: mean_std(&auc).0,
            saliency_aupr_mean: mean_std(&aupr).0,
            next_class_shift_mean: mean_std(&shift).0,
            rel_improvement_pct: rel,
        });
    }

    let mut md = String::new();
    writeln!(md, "| model | split | accuracy | macro AUC | saliency AUPR | next-class shift | rel. vs {baseline_model} |").unwrap();
    writeln!(md, "|---|---|---|---|---|---|---|").unwrap();
    for row in &rows {
        writeln!(
            md,
            "| {} | {} | {:.1} ({:.1}) | {:.3} | {:.1} | {:+.2} | {:+.1}% |",
            row.model,
            row.split,
            row.accuracy_mean * 100.0,
            row.accuracy_std * 100.0,
            row.macro_auc_mean,
            row.saliency_aupr_mean * 100.0,
            row.next_class_shift_mean * 100.0,
            row.rel_improvement_pct,
        )
        .unwrap();
    }

    let mut w = csv::Writer::from_path(run_dir.join("summary.csv"))
        .map_err(|e| CfaugError::Io(e.to_string()))?;
    for row in &rows {
        w.serialize(row).map_err(|e| CfaugError::Io(e.to_string()))?;
    }
    w.flush()?;
    std::fs::write(run_dir.join("summary.md"), &md)?;
    Ok((rows, md))
}
