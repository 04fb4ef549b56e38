//! Infilling functions and the counterfactual / factual compositions.
//!
//! Counterfactual composition replaces the causal region with an infill
//! value, producing an image labeled "not y". Factual composition keeps
//! the foreground and perturbs the background, keeping the label.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CfaugError, Result};
use crate::img::{Image, Rect, Region};

fn check_shapes(image: &Image, region: &Region) -> Result<()> {
    if image.height != region.height || image.width != region.width {
        return Err(CfaugError::ShapeMismatch(format!(
            "image {}x{} vs region {}x{}",
            image.height, image.width, region.height, region.width
        )));
    }
    Ok(())
}

fn check_infill(image: &Image, infill: &Image) -> Result<()> {
    if !image.same_shape(infill) {
        return Err(CfaugError::ShapeMismatch(format!(
            "image {}x{}x{} vs infill {}x{}x{}",
            image.height, image.width, image.channels, infill.height, infill.width, infill.channels
        )));
    }
    Ok(())
}

/// `(1 - r) ⊙ x + r ⊙ x̂`: foreground replaced, background kept bit-exact.
pub fn compose_counterfactual(image: &Image, region: &Region, infill: &Image) -> Result<Image> {
    check_shapes(image, region)?;
    check_infill(image, infill)?;
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            if region.get(y, x) == 1 {
                for c in 0..image.channels {
                    out.set(y, x, c, infill.get(y, x, c));
                }
            }
        }
    }
    Ok(out)
}

/// `r ⊙ x + (1 - r) ⊙ x̂`: background replaced, foreground kept bit-exact.
pub fn compose_factual(image: &Image, region: &Region, infill: &Image) -> Result<Image> {
    compose_counterfactual(image, &region.complement(), infill)
}

/// Every pixel 0.5, which maps to 0 after [-1,1] normalization.
pub fn infill_grey(height: usize, width: usize, channels: usize) -> Image {
    Image::filled(height, width, channels, 0.5)
}

/// Low-frequency base (one uniform draw per channel, constant across the
/// image) plus per-pixel per-channel Gaussian noise of sigma 0.2,
/// truncated to [0,1].
pub fn infill_random<R: Rng>(height: usize, width: usize, channels: usize, rng: &mut R) -> Image {
    let base: Vec<f64> = (0..channels).map(|_| rng.gen::<f64>()).collect();
    let normal = Normal::new(0.0, RANDOM_INFILL_SIGMA).expect("valid sigma");
    let mut data = Vec::with_capacity(height * width * channels);
    for _ in 0..height * width {
        for b in &base {
            let v: f64 = b + normal.sample(rng);
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Image {
        height,
        width,
        channels,
        data,
    }
}

pub const RANDOM_INFILL_SIGMA: f64 = 0.2;

/// Uniform random permutation of the pixels inside `region`. By default
/// whole pixels move together (channel vectors intact); `per_channel`
/// permutes each channel independently.
pub fn infill_shuffle<R: Rng>(
    image: &Image,
    region: &Region,
    per_channel: bool,
    rng: &mut R,
) -> Result<Image> {
    check_shapes(image, region)?;
    let positions: Vec<(usize, usize)> = (0..image.height)
        .flat_map(|y| (0..image.width).map(move |x| (y, x)))
        .filter(|&(y, x)| region.get(y, x) == 1)
        .collect();
    if positions.is_empty() {
        return Err(CfaugError::DegenerateMask("shuffle region is empty".into()));
    }
    let mut out = image.clone();
    if per_channel {
        for c in 0..image.channels {
            let mut perm = positions.clone();
            perm.shuffle(rng);
            for (&(sy, sx), &(dy, dx)) in perm.iter().zip(positions.iter()) {
                out.set(dy, dx, c, image.get(sy, sx, c));
            }
        }
    } else {
        let mut perm = positions.clone();
        perm.shuffle(rng);
        for (&(sy, sx), &(dy, dx)) in perm.iter().zip(positions.iter()) {
            for c in 0..image.channels {
                out.set(dy, dx, c, image.get(sy, sx, c));
            }
        }
    }
    Ok(out)
}

/// Maximum-area axis-aligned rectangle containing only background (r=0)
/// pixels. Histogram-stack sweep, linear in pixel count. Ties break on
/// smallest top, then smallest left.
pub fn largest_background_rectangle(region: &Region) -> Result<Rect> {
    let (h, w) = (region.height, region.width);
    if region.background_count() == 0 {
        return Err(CfaugError::DegenerateMask(
            "no background pixel for rectangle extraction".into(),
        ));
    }
    let mut heights = vec![0usize; w];
    let mut best: Option<Rect> = None;

    let consider = |cand: Rect, best: &mut Option<Rect>| {
        let better = match best {
            None => true,
            Some(b) => {
                cand.area() > b.area()
                    || (cand.area() == b.area()
                        && (cand.top, cand.left) < (b.top, b.left))
            }
        };
        if better {
            *best = Some(cand);
        }
    };

    for y in 0..h {
        for x in 0..w {
            heights[x] = if region.get(y, x) == 0 {
                heights[x] + 1
            } else {
                0
            };
        }
        // largest rectangle in histogram with bottom row y
        let mut stack: Vec<usize> = Vec::new();
        for x in 0..=w {
            let cur = if x < w { heights[x] } else { 0 };
            while let Some(&top_idx) = stack.last() {
                if heights[top_idx] <= cur {
                    break;
                }
                let rect_h = heights[top_idx];
                stack.pop();
                let left = stack.last().map_or(0, |&i| i + 1);
                let rect_w = x - left;
                consider(
                    Rect {
                        top: y + 1 - rect_h,
                        left,
                        height: rect_h,
                        width: rect_w,
                    },
                    &mut best,
                );
            }
            if x < w {
                stack.push(x);
            }
        }
    }
    best.ok_or_else(|| CfaugError::DegenerateMask("no rectangle found".into()))
}

/// Tiled background: the largest background rectangle repeated to cover
/// the full frame, so output[y][x] = patch[y mod ph][x mod pw].
pub fn infill_tile(image: &Image, region: &Region) -> Result<Image> {
    check_shapes(image, region)?;
    let rect = largest_background_rectangle(region)?;
    let mut out = Image::filled(image.height, image.width, image.channels, 0.0);
    for y in 0..image.height {
        for x in 0..image.width {
            let sy = rect.top + (y % rect.height);
            let sx = rect.left + (x % rect.width);
            for c in 0..image.channels {
                out.set(y, x, c, image.get(sy, sx, c));
            }
        }
    }
    Ok(out)
}

/// Swap the background with the donor's tiled background; foreground kept.
pub fn mixed_rand_background(
    image: &Image,
    region: &Region,
    donor_image: &Image,
    donor_region: &Region,
) -> Result<Image> {
    let tiled = infill_tile(donor_image, donor_region)?;
    compose_factual(image, region, &tiled)
}

/// Compose an externally produced full-frame inpainting (e.g. from a
/// generative model run elsewhere) with the original: foreground comes
/// from the file, background stays original.
pub fn load_external_infill(path: &Path, image: &Image, region: &Region) -> Result<Image> {
    let external = Image::load_png(path)?;
    check_infill(image, &external)?;
    compose_counterfactual(image, region, &external)
}
