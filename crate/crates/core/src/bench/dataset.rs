//! Seeded synthetic 3×8×8 image classes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{FeatureShape, Tensor4};

pub const CHANNELS: usize = 3;
pub const SIDE: usize = 8;
const PIXELS: usize = SIDE * SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    /// Oriented sinusoidal gratings, one orientation/frequency pair per class.
    GaussianTextures,
    /// A jittered glyph per class on a plain background.
    ShapePatterns,
}

impl Generator {
    /// Number of distinct classes the generator can draw.
    pub fn capacity(self) -> usize {
        match self {
            Generator::GaussianTextures => TEXTURES.len(),
            Generator::ShapePatterns => GLYPHS.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub generator: Generator,
    pub n_train: usize,
    pub n_test: usize,
    pub n_classes: usize,
    /// Std of the per-pixel noise baked into clean samples.
    pub pixel_noise: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            generator: Generator::GaussianTextures,
            n_train: 2000,
            n_test: 1000,
            n_classes: 4,
            pixel_noise: 0.05,
            seed: 1,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.n_classes < 2 || self.n_classes > self.generator.capacity() {
            bad.push(format!(
                "n_classes must lie in 2..={} for {:?}, got {}",
                self.generator.capacity(),
                self.generator,
                self.n_classes
            ));
        }
        if self.n_train < self.n_classes || self.n_test < self.n_classes {
            bad.push("n_train and n_test must each cover every class".to_string());
        }
        if !(self.pixel_noise >= 0.0 && self.pixel_noise.is_finite()) {
            bad.push("pixel_noise must be finite and ≥ 0".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor4,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self, n_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// (row frequency, column frequency) in cycles per image.
const TEXTURES: [(f64, f64); 8] = [
    (1.0, 0.0),
    (0.0, 1.0),
    (1.0, 1.0),
    (1.0, -1.0),
    (2.0, 0.0),
    (0.0, 2.0),
    (2.0, 2.0),
    (2.0, -2.0),
];

/// Glyph masks as rows of bits, most significant bit leftmost.
const GLYPHS: [[u8; 8]; 8] = [
    // horizontal bar
    [0x00, 0x00, 0x00, 0xFF, 0xFF, 0x00, 0x00, 0x00],
    // vertical bar
    [0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18],
    // diagonal
    [0x80, 0x40, 0x20, 0x10, 0x08, 0x04, 0x02, 0x01],
    // square outline
    [0x00, 0x7E, 0x42, 0x42, 0x42, 0x42, 0x7E, 0x00],
    // plus
    [0x18, 0x18, 0x18, 0xFF, 0xFF, 0x18, 0x18, 0x18],
    // anti-diagonal
    [0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80],
    // checker
    [0xCC, 0xCC, 0x33, 0x33, 0xCC, 0xCC, 0x33, 0x33],
    // centred block
    [0x00, 0x00, 0x3C, 0x3C, 0x3C, 0x3C, 0x00, 0x00],
];

fn glyph(class: usize, rng: &mut ChaCha8Rng, out: &mut [f64]) {
    let (dy, dx) = (rng.random_range(-1i32..=1), rng.random_range(-1i32..=1));
    let bg: [f64; CHANNELS] = std::array::from_fn(|_| rng.random_range(0.0..0.3));
    let fg: [f64; CHANNELS] = std::array::from_fn(|_| rng.random_range(0.6..1.0));
    for c in 0..CHANNELS {
        for y in 0..SIDE {
            for x in 0..SIDE {
                let sy = (y as i32 - dy).rem_euclid(SIDE as i32) as usize;
                let sx = (x as i32 - dx).rem_euclid(SIDE as i32) as usize;
                let on = GLYPHS[class][sy] >> (7 - sx) & 1 == 1;
                out[c * PIXELS + y * SIDE + x] = if on { fg[c] } else { bg[c] };
            }
        }
    }
}

fn texture(class: usize, rng: &mut ChaCha8Rng, out: &mut [f64]) {
    let (fy, fx) = TEXTURES[class];
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let amp = rng.random_range(0.25..0.45);
    let base: [f64; CHANNELS] = std::array::from_fn(|_| rng.random_range(0.35..0.65));
    let w = std::f64::consts::TAU / SIDE as f64;
    for c in 0..CHANNELS {
        for y in 0..SIDE {
            for x in 0..SIDE {
                let v = (w * (fy * y as f64 + fx * x as f64) + phase).sin();
                out[c * PIXELS + y * SIDE + x] = base[c] + amp * v;
            }
        }
    }
}

/// Draws `n_train + n_test` samples from one seeded stream and splits them,
/// so the two sets never share a sample.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let make = |n: usize, rng: &mut ChaCha8Rng| -> Result<Dataset> {
        let mut labels: Vec<usize> = (0..n).map(|i| i % spec.n_classes).collect();
        labels.shuffle(rng);
        let noise = Normal::new(0.0, spec.pixel_noise.max(f64::MIN_POSITIVE)).expect("valid std");
        let per = CHANNELS * PIXELS;
        let mut data = vec![0.0; n * per];
        for (i, &y) in labels.iter().enumerate() {
            let out = &mut data[i * per..(i + 1) * per];
            match spec.generator {
                Generator::ShapePatterns => glyph(y, rng, out),
                Generator::GaussianTextures => texture(y, rng, out),
            }
            for v in out.iter_mut() {
                let e = if spec.pixel_noise > 0.0 { noise.sample(rng) } else { 0.0 };
                *v = (*v + e).clamp(0.0, 1.0);
            }
        }
        Ok(Dataset {
            images: Tensor4::new(FeatureShape::new(n, CHANNELS, SIDE, SIDE), data)?,
            labels,
        })
    };
    let train = make(spec.n_train, &mut rng)?;
    let test = make(spec.n_test, &mut rng)?;
    Ok((train, test))
}
