//! Synthetic spurious-correlation benchmark.
//!
//! Each class has a causal glyph shape and a spuriously correlated
//! background texture. Glyph color is drawn independently of the class, so
//! only shape is causal; backgrounds share one two-color palette and
//! differ per class only in stripe layout, so shuffling background pixels
//! destroys the background cue while keeping its marginal distribution.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::mixed_rand_background;
use crate::error::{CfaugError, Result};
use crate::img::{Image, Region};

pub const MAX_CLASSES: usize = 8;

/// Shared background palette.
const PALETTE_A: [f64; 3] = [0.20, 0.30, 0.70];
const PALETTE_B: [f64; 3] = [0.80, 0.70, 0.30];
const BG_NOISE: f64 = 0.04;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub image_size: usize,
    pub samples_per_class: usize,
    /// Probability that the background class equals the label.
    pub correlation: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > MAX_CLASSES {
            return Err(CfaugError::InvalidArgument(format!(
                "num_classes must be in 2..={MAX_CLASSES}"
            )));
        }
        if !(0.0..=1.0).contains(&self.correlation) {
            return Err(CfaugError::InvalidArgument(
                "correlation must be in [0,1]".into(),
            ));
        }
        if self.image_size < 16 || self.image_size % 4 != 0 {
            // glyphs are sized from image_size; below 16 they no longer fit
            return Err(CfaugError::InvalidArgument(
                "image_size must be a multiple of 4, at least 16".into(),
            ));
        }
        if self.samples_per_class == 0 {
            return Err(CfaugError::InvalidArgument(
                "samples_per_class must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub image: Image,
    pub region: Region,
    pub label: usize,
    pub background_class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    Original,
    MixedSame,
    MixedRand,
    MixedNext,
    Flip,
}

impl SplitMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Self::Original),
            "mixed-same" => Ok(Self::MixedSame),
            "mixed-rand" => Ok(Self::MixedRand),
            "mixed-next" => Ok(Self::MixedNext),
            "flip" => Ok(Self::Flip),
            other => Err(CfaugError::InvalidArgument(format!(
                "unknown split mode {other:?}"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Original => "original",
            Self::MixedSame => "mixed-same",
            Self::MixedRand => "mixed-rand",
            Self::MixedNext => "mixed-next",
            Self::Flip => "flip",
        }
    }
}

/// Glyph membership test for class `shape` centered at (cy, cx) with
/// radius `r`.
fn in_glyph(shape: usize, dy: isize, dx: isize, r: isize) -> bool {
    let (ady, adx) = (dy.abs(), dx.abs());
    match shape {
        0 => dy * dy + dx * dx <= r * r,                     // disk
        1 => ady <= r && adx <= r,                           // square
        2 => dy >= -r && dy <= r && 2 * adx <= dy + r,       // triangle
        3 => (adx * 3 <= r && ady <= r) || (ady * 3 <= r && adx <= r), // cross
        4 => {
            let d2 = dy * dy + dx * dx;
            4 * d2 >= r * r && d2 <= r * r                   // ring
        }
        5 => ady + adx <= r,                                 // diamond
        6 => (adx - ady).abs() * 3 <= r && ady <= r && adx <= r, // x-shape
        7 => ady <= r && adx <= r && (ady * 2 >= r || adx * 2 >= r), // hollow square
        _ => unreachable!("class count validated"),
    }
}

/// Background stripe layouts per class: (orientation, stripe width).
/// 0 = horizontal, 1 = vertical, 2 = diagonal.
const STYLES: [(u8, usize); MAX_CLASSES] =
    [(0, 2), (1, 2), (0, 5), (1, 5), (2, 3), (2, 6), (0, 8), (1, 8)];

fn background_pixel(style: usize, y: usize, x: usize) -> [f64; 3] {
    let (orient, period) = STYLES[style];
    let band = match orient {
        0 => y / period,
        1 => x / period,
        _ => (y + x) / period,
    };
    if band % 2 == 0 {
        PALETTE_A
    } else {
        PALETTE_B
    }
}

fn render_background(style: usize, size: usize, rng: &mut ChaCha8Rng) -> Image {
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let base = background_pixel(style, y, x);
            for b in base {
                let v: f64 = b + rng.gen_range(-BG_NOISE..BG_NOISE);
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Image {
        height: size,
        width: size,
        channels: 3,
        data,
    }
}

/// Glyph color independent of class, kept away from the background
/// palette so the glyph stays visible. Drawn from the RGB cube corners
/// for high contrast.
fn glyph_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let c = [
            f64::from(rng.gen::<bool>()),
            f64::from(rng.gen::<bool>()),
            f64::from(rng.gen::<bool>()),
        ];
        let far = |p: [f64; 3]| {
            c.iter()
                .zip(p.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                > 0.35
        };
        if far(PALETTE_A) && far(PALETTE_B) {
            return c;
        }
    }
}

fn render_example(
    label: usize,
    background_class: usize,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> LabeledExample {
    let mut image = render_background(background_class, size, rng);
    let r_min = (size / 4).max(3);
    let r_max = size / 3;
    let radius = rng.gen_range(r_min..=r_max) as isize;
    // jitter around the center; the glyph must stay inside the frame
    let jitter = ((size as isize / 2 - radius - 1).max(0)).min(size as isize / 8);
    let cy = size as isize / 2 + rng.gen_range(-jitter..=jitter);
    let cx = size as isize / 2 + rng.gen_range(-jitter..=jitter);
    let color = glyph_color(rng);
    let mut region = Region::empty(size, size);
    for y in 0..size {
        for x in 0..size {
            if in_glyph(label, y as isize - cy, x as isize - cx, radius) {
                region.set(y, x, 1);
                for (c, v) in color.iter().enumerate() {
                    image.set(y, x, c, *v);
                }
            }
        }
    }
    LabeledExample {
        image,
        region,
        label,
        background_class,
    }
}

/// Balanced dataset: `samples_per_class` examples per class; background
/// class equals the label with probability `correlation`, otherwise a
/// uniformly random other class.
pub fn generate_dataset(spec: &SynthSpec) -> Result<Vec<LabeledExample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.num_classes;
    let mut out = Vec::with_capacity(k * spec.samples_per_class);
    for label in 0..k {
        for _ in 0..spec.samples_per_class {
            let background_class = if rng.gen::<f64>() < spec.correlation {
                label
            } else {
                let mut other = rng.gen_range(0..k - 1);
                if other >= label {
                    other += 1;
                }
                other
            };
            out.push(render_example(label, background_class, spec.image_size, &mut rng));
        }
    }
    Ok(out)
}

/// Donor indices by background class, excluding `skip`.
fn donor_pool(examples: &[LabeledExample], class: usize, skip: usize) -> Vec<usize> {
    examples
        .iter()
        .enumerate()
        .filter(|(i, e)| *i != skip && e.background_class == class)
        .map(|(i, _)| i)
        .collect()
}

fn swap_background<R: Rng>(
    example: &LabeledExample,
    examples: &[LabeledExample],
    donor_class: usize,
    index: usize,
    rng: &mut R,
) -> Result<LabeledExample> {
    let pool = donor_pool(examples, donor_class, index);
    if pool.is_empty() {
        return Err(CfaugError::InvalidArgument(format!(
            "no donor with background class {donor_class}"
        )));
    }
    let donor = &examples[pool[rng.gen_range(0..pool.len())]];
    let image = mixed_rand_background(
        &example.image,
        &example.region,
        &donor.image,
        &donor.region,
    )?;
    Ok(LabeledExample {
        image,
        region: example.region.clone(),
        label: example.label,
        background_class: donor_class,
    })
}

/// Background-swapped evaluation splits. Keeps foreground, region, label,
/// and example order; replaces each background with a donor background of
/// the mode's class.
pub fn build_mixed_split<R: Rng>(
    examples: &[LabeledExample],
    mode: SplitMode,
    num_classes: usize,
    rng: &mut R,
) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::with_capacity(examples.len());
    for (i, e) in examples.iter().enumerate() {
        let donor_class = match mode {
            SplitMode::MixedSame => e.label,
            SplitMode::MixedNext => (e.label + 1) % num_classes,
            SplitMode::MixedRand => {
                let mut c = rng.gen_range(0..num_classes - 1);
                if c >= e.label {
                    c += 1;
                }
                c
            }
            _ => {
                return Err(CfaugError::InvalidArgument(
                    "build_mixed_split takes mixed-same/rand/next".into(),
                ))
            }
        };
        out.push(swap_background(e, examples, donor_class, i, rng)?);
    }
    Ok(out)
}

/// Waterbirds-style partition: `original` holds examples whose background
/// class matches the label; `flip` holds one mismatched-background example
/// per input, natural where available and donor-swapped otherwise.
pub fn build_flip_split<R: Rng>(
    examples: &[LabeledExample],
    num_classes: usize,
    rng: &mut R,
) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>)> {
    let mut original = Vec::new();
    let mut flip = Vec::new();
    for (i, e) in examples.iter().enumerate() {
        if e.background_class == e.label {
            original.push(e.clone());
            let mut c = rng.gen_range(0..num_classes - 1);
            if c >= e.label {
                c += 1;
            }
            flip.push(swap_background(e, examples, c, i, rng)?);
        } else {
            flip.push(e.clone());
        }
    }
    if original.is_empty() || flip.is_empty() {
        return Err(CfaugError::InvalidArgument(
            "flip split produced an empty partition".into(),
        ));
    }
    Ok((original, flip))
}
