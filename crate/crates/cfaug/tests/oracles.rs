//! Cross-checks against independent brute-force oracles.

mod common;

use common::{auc_pairwise, aupr_threshold_sweep, brute_force_rect};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cfaug::augment::largest_background_rectangle;
use cfaug::img::Region;
use cfaug::loss::cross_entropy;
use cfaug::metrics::{binary_auc, saliency_aupr};
use cfaug::net::{Network, Saliency, Session};

#[test]
fn rectangle_matches_brute_force_on_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..1000 {
        let h = rng.gen_range(1..=12);
        let w = rng.gen_range(1..=12);
        let p = rng.gen_range(0.05..0.95);
        let mask: Vec<u8> = (0..h * w).map(|_| u8::from(rng.gen_bool(p))).collect();
        let region = Region::new(h, w, mask).unwrap();
        match brute_force_rect(&region) {
            None => assert!(largest_background_rectangle(&region).is_err()),
            Some((area, pos)) => {
                let rect = largest_background_rectangle(&region).unwrap();
                assert_eq!(rect.area(), area, "case {case}: wrong area");
                assert_eq!((rect.top, rect.left), pos, "case {case}: wrong tie-break");
                for y in rect.top..rect.top + rect.height {
                    for x in rect.left..rect.left + rect.width {
                        assert_eq!(region.get(y, x), 0, "case {case}: rect not background");
                    }
                }
            }
        }
    }
}

#[test]
fn aupr_matches_threshold_sweep_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..500 {
        let n = rng.gen_range(2..=10);
        let w = 1;
        let mut mask = vec![0u8; n];
        let n_pos = rng.gen_range(1..n);
        for m in mask.iter_mut().take(n_pos) {
            *m = 1;
        }
        // quantize scores so ties occur often
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..4) as f64 / 3.0).collect();
        let region = Region::new(n, w, mask.clone()).unwrap();
        let saliency = Saliency {
            height: n,
            width: w,
            scores: scores.clone(),
        };
        let got = saliency_aupr(&saliency, &region).unwrap();
        let positive: Vec<bool> = mask.iter().map(|m| *m == 1).collect();
        let want = aupr_threshold_sweep(&scores, &positive);
        assert!((got - want).abs() < 1e-12, "got {got}, oracle {want}");
    }
}

#[test]
fn auc_matches_pairwise_oracle_with_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..500 {
        let n = rng.gen_range(4..=30);
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        if labels.iter().all(|l| *l) || labels.iter().all(|l| !*l) {
            continue;
        }
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64).collect();
        let got = binary_auc(&scores, &labels).unwrap();
        let want = auc_pairwise(&scores, &labels);
        assert!((got - want).abs() < 1e-12, "got {got}, oracle {want}");
    }
}

#[test]
fn network_parameter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut net = Network::new(8, 8, 3, 4, 5);
    let input: Vec<f64> = (0..8 * 8 * 3).map(|_| rng.gen_range(-0.9..0.9)).collect();
    let label = 2;

    let mut session = Session::new(&net);
    let (_, logits) = session.forward(&input).unwrap();
    let loss = session.graph.cross_entropy(logits, label);
    session.backward(loss).unwrap();
    let grads = session.param_grads();

    let loss_at = |net: &Network| -> f64 {
        let mut s = Session::new(net);
        let (_, logits) = s.forward(&input).unwrap();
        cross_entropy(s.graph.value(logits).data.as_slice(), label).unwrap()
    };

    let eps = 1e-5;
    let mut checked = 0;
    for p in 0..net.params.len() {
        let len = net.params[p].data.len();
        for _ in 0..8 {
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
            if scale < 1e-7 {
                continue; // dead unit or pooled-away weight
            }
            let rel = (fd - ad).abs() / scale;
            assert!(rel < 1e-3, "param {p}[{j}]: ad {ad}, fd {fd}, rel {rel}");
            checked += 1;
        }
    }
    assert!(checked >= 20, "too few informative parameters checked");
}
