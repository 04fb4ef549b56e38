//! Randomized invariants of the augmentation operators.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cfaug::augment::{
    compose_counterfactual, compose_factual, infill_random, infill_shuffle, infill_tile,
    largest_background_rectangle,
};
use cfaug::img::{Image, Region};
use cfaug::loss::fgsm_background;
use cfaug::net::Network;

fn arb_case() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<u8>)> {
    (2usize..10, 2usize..10).prop_flat_map(|(h, w)| {
        (
            Just(h),
            Just(w),
            proptest::collection::vec(0.0f64..=1.0, h * w * 3),
            proptest::collection::vec(0u8..=1, h * w),
        )
    })
}

proptest! {
    /// Composing with the complemented region is exactly the factual
    /// composition, element for element.
    #[test]
    fn factual_is_counterfactual_of_complement((h, w, pixels, mask) in arb_case()) {
        let image = Image::new(h, w, 3, pixels).unwrap();
        let region = Region::new(h, w, mask).unwrap();
        let infill = Image::filled(h, w, 3, 0.25);
        let f = compose_factual(&image, &region, &infill).unwrap();
        let cf_of_complement =
            compose_counterfactual(&image, &region.complement(), &infill).unwrap();
        prop_assert_eq!(f.data, cf_of_complement.data);
    }

    /// Counterfactual output takes infill pixels exactly on the region and
    /// original pixels exactly off it.
    #[test]
    fn counterfactual_is_pixelwise_select((h, w, pixels, mask) in arb_case()) {
        let image = Image::new(h, w, 3, pixels).unwrap();
        let region = Region::new(h, w, mask).unwrap();
        let infill = Image::filled(h, w, 3, 0.9);
        let cf = compose_counterfactual(&image, &region, &infill).unwrap();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let want = if region.get(y, x) == 1 {
                        infill.get(y, x, c)
                    } else {
                        image.get(y, x, c)
                    };
                    prop_assert_eq!(cf.get(y, x, c), want);
                }
            }
        }
    }

    /// Shuffling the background permutes its pixel multiset and leaves the
    /// foreground untouched.
    #[test]
    fn shuffle_preserves_background_multiset(
        (h, w, pixels, mask) in arb_case(),
        seed in 0u64..1000,
    ) {
        let image = Image::new(h, w, 3, pixels).unwrap();
        let region = Region::new(h, w, mask).unwrap();
        prop_assume!(region.background_count() > 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shuffled = infill_shuffle(&image, &region.complement(), false, &mut rng).unwrap();
        let collect = |img: &Image| {
            let mut v: Vec<[u64; 3]> = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    if region.get(y, x) == 0 {
                        v.push([
                            img.get(y, x, 0).to_bits(),
                            img.get(y, x, 1).to_bits(),
                            img.get(y, x, 2).to_bits(),
                        ]);
                    }
                }
            }
            v.sort();
            v
        };
        prop_assert_eq!(collect(&image), collect(&shuffled));
        for y in 0..h {
            for x in 0..w {
                if region.get(y, x) == 1 {
                    for c in 0..3 {
                        prop_assert_eq!(shuffled.get(y, x, c), image.get(y, x, c));
                    }
                }
            }
        }
    }

    /// A tiled infill repeats the source patch with its exact period.
    #[test]
    fn tile_is_periodic((h, w, pixels, mask) in arb_case()) {
        let image = Image::new(h, w, 3, pixels).unwrap();
        let region = Region::new(h, w, mask).unwrap();
        prop_assume!(region.background_count() > 0);
        let rect = largest_background_rectangle(&region).unwrap();
        let tiled = infill_tile(&image, &region).unwrap();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let src = image.get(
                        rect.top + y % rect.height,
                        rect.left + x % rect.width,
                        c,
                    );
                    prop_assert_eq!(tiled.get(y, x, c), src);
                }
            }
        }
    }
}

#[test]
fn random_infill_stays_in_range_and_varies() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = infill_random(20, 20, 3, &mut rng);
    assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
    let distinct: std::collections::BTreeSet<u64> =
        img.data.iter().map(|v| v.to_bits()).collect();
    assert!(distinct.len() > 100);
}

#[test]
fn fgsm_respects_linf_budget_and_foreground() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let h = 8;
    let w = 8;
    let pixels: Vec<f64> = (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
    let image = Image::new(h, w, 3, pixels).unwrap();
    let mask: Vec<u8> = (0..h * w).map(|_| u8::from(rng.gen_bool(0.3))).collect();
    let region = Region::new(h, w, mask).unwrap();
    let net = Network::new(h, w, 3, 4, 3);
    for eps in [0.15, 0.5, 0.9] {
        let adv = fgsm_background(&net, &image, &region, 1, eps).unwrap();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let delta_norm = 2.0 * (adv.get(y, x, c) - image.get(y, x, c));
                    if region.get(y, x) == 1 {
                        assert_eq!(adv.get(y, x, c), image.get(y, x, c));
                    } else {
                        // the linf budget is stated in [-1,1] space
                        assert!(delta_norm.abs() <= eps + 1e-12, "eps {eps}: {delta_norm}");
                    }
                    assert!((0.0..=1.0).contains(&adv.get(y, x, c)));
                }
            }
        }
    }
    let same = fgsm_background(&net, &image, &region, 1, 0.0).unwrap();
    assert_eq!(same.data, image.data);
}
