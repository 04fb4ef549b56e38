//! End-to-end acceptance checks. Each criterion prints a single PASS/FAIL
//! line; run with `cargo test --test acceptance -- --nocapture` to see
//! them all. Criteria 3-5 share one set of trained models.

mod common;

use std::collections::BTreeMap;
use std::path::Path;

use common::{auc_pairwise, aupr_threshold_sweep, brute_force_rect};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cfaug::augment::{
    compose_counterfactual, compose_factual, infill_shuffle, infill_tile,
    largest_background_rectangle,
};
use cfaug::config::{ExperimentConfig, OptimizerConfig, SynthConfig};
use cfaug::img::{Image, Region};
use cfaug::loss::{
    counterfactual_loss, cross_entropy, fgsm_background, saliency_penalty_from_grad,
    CfInfillKind, FInfillKind, LossConfig,
};
use cfaug::metrics::{binary_auc, macro_ovr_auc, saliency_aupr};
use cfaug::net::{Network, Saliency, Session};
use cfaug::train::{run_experiment, RunRecord};

struct Checker {
    failures: Vec<String>,
}

impl Checker {
    fn report(&mut self, idx: usize, name: &str, pass: bool, detail: String) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("criterion {idx} ({name}): {verdict} — {detail}");
        if !pass {
            self.failures.push(format!("criterion {idx} ({name}): {detail}"));
        }
    }
}

fn random_region(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Region {
    let mask: Vec<u8> = (0..h * w).map(|_| u8::from(rng.gen_bool(p))).collect();
    Region::new(h, w, mask).unwrap()
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    let data: Vec<f64> = (0..h * w * 3).map(|_| rng.gen::<f64>()).collect();
    Image::new(h, w, 3, data).unwrap()
}

// ---- criterion 1: oracle suite ----

fn criterion_oracles(c: &mut Checker) {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut pass = true;
    let mut detail = String::new();

    for _ in 0..1000 {
        let h = rng.gen_range(1..=12);
        let w = rng.gen_range(1..=12);
        let p = rng.gen_range(0.05..0.95);
        let region = random_region(&mut rng, h, w, p);
        match (brute_force_rect(&region), largest_background_rectangle(&region)) {
            (None, Err(_)) => {}
            (Some((area, pos)), Ok(rect)) if rect.area() == area && (rect.top, rect.left) == pos => {}
            other => {
                pass = false;
                detail = format!("rectangle mismatch: {other:?}");
                break;
            }
        }
    }

    for _ in 0..500 {
        let n = rng.gen_range(2..=10);
        let n_pos = rng.gen_range(1..n);
        let mut mask = vec![0u8; n];
        for m in mask.iter_mut().take(n_pos) {
            *m = 1;
        }
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..4) as f64 / 3.0).collect();
        let got = saliency_aupr(
            &Saliency { height: n, width: 1, scores: scores.clone() },
            &Region::new(n, 1, mask.clone()).unwrap(),
        )
        .unwrap();
        let positive: Vec<bool> = mask.iter().map(|m| *m == 1).collect();
        let want = aupr_threshold_sweep(&scores, &positive);
        if (got - want).abs() >= 1e-12 {
            pass = false;
            detail = format!("aupr {got} vs oracle {want}");
        }
    }

    for _ in 0..200 {
        let n = rng.gen_range(6..=30);
        let k = rng.gen_range(2..=4);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k).map(|_| rng.gen_range(0..5) as f64).collect())
            .collect();
        let mut class_aucs = Vec::new();
        for class in 0..k {
            let pos: Vec<bool> = labels.iter().map(|l| *l == class).collect();
            if pos.iter().all(|p| *p) || pos.iter().all(|p| !*p) {
                continue;
            }
            let s: Vec<f64> = scores.iter().map(|row| row[class]).collect();
            class_aucs.push(auc_pairwise(&s, &pos));
            let got = binary_auc(&s, &pos).unwrap();
            if (got - class_aucs.last().unwrap()).abs() >= 1e-12 {
                pass = false;
                detail = "binary auc vs concordance oracle".into();
            }
        }
        if !class_aucs.is_empty() {
            let want = class_aucs.iter().sum::<f64>() / class_aucs.len() as f64;
            let (got, _) = macro_ovr_auc(&scores, &labels, k).unwrap();
            if (got - want).abs() >= 1e-12 {
                pass = false;
                detail = format!("macro auc {got} vs oracle {want}");
            }
        }
    }

    let mut worst_rel: f64 = 0.0;
    let mut net = Network::new(8, 8, 3, 4, 5);
    let input: Vec<f64> = (0..8 * 8 * 3).map(|_| rng.gen_range(-0.9..0.9)).collect();
    let mut session = Session::new(&net);
    let (_, logits) = session.forward(&input).unwrap();
    let loss = session.graph.cross_entropy(logits, 1);
    session.backward(loss).unwrap();
    let grads = session.param_grads();
    let loss_at = |net: &Network| -> f64 {
        let mut s = Session::new(net);
        let (_, logits) = s.forward(&input).unwrap();
        cross_entropy(s.graph.value(logits).data.as_slice(), 1).unwrap()
    };
    let eps = 1e-5;
    for p in 0..net.params.len() {
        let len = net.params[p].data.len();
        for _ in 0..6 {
            let j = rng.gen_range(0..len);
            let orig = net.params[p].data[j];
            net.params[p].data[j] = orig + eps;
            let up = loss_at(&net);
            net.params[p].data[j] = orig - eps;
            let down = loss_at(&net);
            net.params[p].data[j] = orig;
            let fd = (up - down) / (2.0 * eps);
            let ad = grads[p][j];
            let scale = fd.abs().max(ad.abs());
            if scale >= 1e-7 {
                worst_rel = worst_rel.max((fd - ad).abs() / scale);
            }
        }
    }
    if worst_rel >= 1e-3 {
        pass = false;
        detail = format!("autodiff rel err {worst_rel:.2e}");
    }
    if pass {
        detail = format!(
            "rectangle/aupr/auc oracles agree; autodiff max rel err {worst_rel:.2e}"
        );
    }
    c.report(1, "oracle suite", pass, detail);
}

// ---- criterion 2: augmentation invariants ----

fn criterion_invariants(c: &mut Checker) {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let mut pass = true;
    let mut detail = String::new();

    for case in 0..500 {
        let h = rng.gen_range(2..10);
        let w = rng.gen_range(2..10);
        let image = random_image(&mut rng, h, w);
        let region = random_region(&mut rng, h, w, 0.5);
        let infill = random_image(&mut rng, h, w);
        let cf = compose_counterfactual(&image, &region, &infill).unwrap();
        let f = compose_factual(&image, &region, &infill).unwrap();
        let dual = compose_counterfactual(&image, &region.complement(), &infill).unwrap();
        let select_ok = (0..h).all(|y| {
            (0..w).all(|x| {
                (0..3).all(|ch| {
                    let (want_cf, want_f) = if region.get(y, x) == 1 {
                        (infill.get(y, x, ch), image.get(y, x, ch))
                    } else {
                        (image.get(y, x, ch), infill.get(y, x, ch))
                    };
                    cf.get(y, x, ch) == want_cf && f.get(y, x, ch) == want_f
                })
            })
        });
        if !select_ok || f.data != dual.data {
            pass = false;
            detail = format!("composition case {case}");
            break;
        }
    }

    // shuffle multiset + tile period on a fixed example
    let image = random_image(&mut rng, 9, 9);
    let region = random_region(&mut rng, 9, 9, 0.4);
    let shuffled = infill_shuffle(&image, &region.complement(), false, &mut rng).unwrap();
    let multiset = |img: &Image| {
        let mut v: Vec<u64> = Vec::new();
        for y in 0..9 {
            for x in 0..9 {
                if region.get(y, x) == 0 {
                    for ch in 0..3 {
                        v.push(img.get(y, x, ch).to_bits());
                    }
                }
            }
        }
        v.sort_unstable();
        v
    };
    if multiset(&image) != multiset(&shuffled) {
        pass = false;
        detail = "shuffle multiset".into();
    }
    let rect = largest_background_rectangle(&region).unwrap();
    let tiled = infill_tile(&image, &region).unwrap();
    for y in 0..9 {
        for x in 0..9 {
            for ch in 0..3 {
                let want = image.get(rect.top + y % rect.height, rect.left + x % rect.width, ch);
                if tiled.get(y, x, ch) != want {
                    pass = false;
                    detail = "tile period".into();
                }
            }
        }
    }

    let net = Network::new(8, 8, 3, 4, 3);
    let image = random_image(&mut rng, 8, 8);
    let region = random_region(&mut rng, 8, 8, 0.3);
    for eps in [0.15, 0.5, 0.9] {
        let adv = fgsm_background(&net, &image, &region, 1, eps).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                for ch in 0..3 {
                    let delta_norm = 2.0 * (adv.get(y, x, ch) - image.get(y, x, ch));
                    let ok = if region.get(y, x) == 1 {
                        adv.get(y, x, ch) == image.get(y, x, ch)
                    } else {
                        delta_norm.abs() <= eps + 1e-12
                    };
                    if !ok {
                        pass = false;
                        detail = format!("fgsm at eps {eps}");
                    }
                }
            }
        }
    }
    if pass {
        detail = "duality, shuffle, tile, fgsm bounds hold".into();
    }
    c.report(2, "augmentation invariants", pass, detail);
}

// ---- criteria 3-5 + 7: trained models ----

fn training_config(model_name: &str, loss: LossConfig, out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        model_name: model_name.into(),
        dataset_dir: None,
        synth: SynthConfig {
            num_classes: 5,
            image_size: 20,
            train_per_class: 150,
            val_per_class: 40,
            test_per_class: 60,
            correlation: 0.95,
            seed: 0,
        },
        loss,
        optimizer: OptimizerConfig {
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 32,
            lr_decay_epochs: vec![8, 14],
            lr_decay_factor: 0.1,
        },
        early_stopping_patience: 10,
        seeds: vec![0, 1, 2],
        data_ratio: 1.0,
        output_dir: out.to_string_lossy().into_owned(),
        eval_splits: vec![
            "original".into(),
            "mixed-same".into(),
            "mixed-rand".into(),
            "mixed-next".into(),
            "flip".into(),
        ],
    }
}

fn seed_mean(records: &[RunRecord], split: &str, metric: impl Fn(&cfaug::metrics::MetricReport) -> f64) -> f64 {
    let values: Vec<f64> = records
        .iter()
        .flat_map(|r| r.reports.iter())
        .filter(|rep| rep.split == split)
        .map(&metric)
        .collect();
    values.iter().sum::<f64>() / values.len() as f64
}

fn criterion_training(c: &mut Checker, out: &Path) {
    let baseline_cfg = training_config("baseline", LossConfig::default(), out);
    let cf_f_cfg = training_config(
        "cf-grey-f-shuffle",
        LossConfig {
            cf_enabled: true,
            cf_infill: CfInfillKind::Grey,
            f_enabled: true,
            f_infill: FInfillKind::Shuffle,
            ..LossConfig::default()
        },
        out,
    );
    let f_cfg = training_config(
        "f-shuffle",
        LossConfig {
            f_enabled: true,
            f_infill: FInfillKind::Shuffle,
            ..LossConfig::default()
        },
        out,
    );

    let mut results = BTreeMap::new();
    for cfg in [&baseline_cfg, &cf_f_cfg, &f_cfg] {
        let records = run_experiment(cfg).unwrap();
        assert!(records.iter().all(|r| r.aborted.is_none()), "{} aborted", cfg.model_name);
        results.insert(cfg.model_name.clone(), records);
    }

    let base = &results["baseline"];
    let cf_f = &results["cf-grey-f-shuffle"];
    let f_only = &results["f-shuffle"];

    let base_orig = seed_mean(base, "original", |r| r.accuracy);
    let base_flip = seed_mean(base, "flip", |r| r.accuracy);
    let cf_orig = seed_mean(cf_f, "original", |r| r.accuracy);
    let cf_flip = seed_mean(cf_f, "flip", |r| r.accuracy);
    let gap_ok = base_orig - base_flip >= 0.10;
    let recovery_ok = cf_flip - base_flip >= 0.10 && base_orig - cf_orig <= 0.05;
    c.report(
        3,
        "spurious-correlation recovery",
        gap_ok && recovery_ok,
        format!(
            "baseline orig {base_orig:.3} / flip {base_flip:.3}; cf+f orig {cf_orig:.3} / flip {cf_flip:.3}"
        ),
    );

    let base_aupr = seed_mean(base, "original", |r| r.saliency_aupr);
    let f_aupr = seed_mean(f_only, "original", |r| r.saliency_aupr);
    c.report(
        4,
        "saliency-focus trend",
        f_aupr > base_aupr,
        format!("f-shuffle aupr {f_aupr:.3} vs baseline {base_aupr:.3}"),
    );

    let base_shift = seed_mean(base, "mixed-next", |r| r.next_class_shift);
    let cf_shift = seed_mean(cf_f, "mixed-next", |r| r.next_class_shift);
    c.report(
        5,
        "background-reliance trend",
        cf_shift < base_shift,
        format!("cf next-class shift {cf_shift:.3} vs baseline {base_shift:.3}"),
    );
}

// ---- criterion 6: loss spot checks ----

fn criterion_loss_values(c: &mut Checker) {
    let cf = counterfactual_loss(&[0.0, 0.0], 0, 1).unwrap();
    let cf_ok = (cf - std::f64::consts::LN_2).abs() < 1e-6;

    let k = 5;
    let ce = cross_entropy(&vec![0.0; k], 2).unwrap();
    let ce_ok = (ce - (k as f64).ln()).abs() < 1e-6;

    // 2x2 single channel, mask [1,0;0,1]: background grads -1 and 2,
    // lambda 0.5 -> 0.5 * (1 + 4) / 2 = 1.25
    let region = Region::new(2, 2, vec![1, 0, 0, 1]).unwrap();
    let sal = saliency_penalty_from_grad(&[3.0, -1.0, 2.0, 0.0], &region, 1, 0.5);
    let sal_ok = (sal - 1.25).abs() < 1e-6;

    c.report(
        6,
        "loss-value spot checks",
        cf_ok && ce_ok && sal_ok,
        format!("cf {cf:.6} (ln2), ce {ce:.6} (ln5), sal {sal:.6} (1.25)"),
    );
}

// ---- criterion 7: determinism ----

fn criterion_determinism(c: &mut Checker, first_out: &Path, rerun_out: &Path) {
    let cfg = training_config("baseline", LossConfig::default(), rerun_out);
    run_experiment(&cfg).unwrap();
    let a = std::fs::read(first_out.join("baseline/metrics.csv")).unwrap();
    let b = std::fs::read(rerun_out.join("baseline/metrics.csv")).unwrap();
    c.report(
        7,
        "determinism",
        a == b,
        format!("metrics.csv rerun byte-identical: {}", a == b),
    );
}

#[test]
fn acceptance_criteria() {
    let mut checker = Checker { failures: Vec::new() };
    let out = tempfile::tempdir().unwrap();
    let rerun = tempfile::tempdir().unwrap();

    criterion_oracles(&mut checker);
    criterion_invariants(&mut checker);
    criterion_training(&mut checker, out.path());
    criterion_loss_values(&mut checker);
    criterion_determinism(&mut checker, out.path(), rerun.path());

    assert!(
        checker.failures.is_empty(),
        "failed criteria:\n{}",
        checker.failures.join("\n")
    );
}
