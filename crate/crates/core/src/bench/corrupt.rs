//! Corruption bank with five severity levels per kind.
//!
//! Noise draws depend on the seed and kind only, so a higher severity
//! perturbs the same pixels further (impulse sets are nested, Gaussian
//! draws are rescaled).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub const MAX_SEVERITY: u8 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    Blur,
    Contrast,
    Brightness,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::Blur,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian-noise",
            CorruptionKind::ImpulseNoise => "impulse-noise",
            CorruptionKind::Blur => "blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
        }
    }

    /// Strength at severities 1..=5: noise std, impulse fraction, blur std in
    /// pixels, retained contrast, and added brightness.
    pub fn grid(self) -> [f64; 5] {
        match self {
            CorruptionKind::GaussianNoise => [0.04, 0.08, 0.12, 0.16, 0.20],
            CorruptionKind::ImpulseNoise => [0.01, 0.02, 0.03, 0.05, 0.07],
            CorruptionKind::Blur => [0.4, 0.6, 0.7, 0.8, 1.0],
            CorruptionKind::Contrast => [0.75, 0.5, 0.4, 0.3, 0.15],
            CorruptionKind::Brightness => [0.05, 0.1, 0.15, 0.2, 0.3],
        }
    }

    fn stream(self) -> u64 {
        self as u64 + 1
    }
}

impl std::str::FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown corruption kind '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn strength(&self) -> Result<f64> {
        if !(1..=MAX_SEVERITY).contains(&self.severity) {
            return Err(Error::InvalidArgument(format!(
                "severity must lie in 1..={MAX_SEVERITY}, got {}",
                self.severity
            )));
        }
        Ok(self.kind.grid()[self.severity as usize - 1])
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

/// Separable blur of one `h×w` plane with edge replication.
fn blur_plane(plane: &mut [f64], h: usize, w: usize, kernel: &[f64]) {
    let r = (kernel.len() / 2) as i64;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * plane[y * w + (x as i64 + i as i64 - r).clamp(0, w as i64 - 1) as usize])
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            plane[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * tmp[(y as i64 + i as i64 - r).clamp(0, h as i64 - 1) as usize * w + x])
                .sum();
        }
    }
}

/// Corrupted copy of `images` (pixels in `[0, 1]`); the input is untouched.
pub fn corrupt(images: &Tensor4, spec: &CorruptionSpec) -> Result<Tensor4> {
    let s = spec.strength()?;
    let shape = images.shape();
    let mut out = images.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(spec.kind.stream());
    let data = out.data_mut();
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            for v in data.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += s * z;
            }
        }
        CorruptionKind::ImpulseNoise => {
            for v in data.iter_mut() {
                let (u, salt): (f64, bool) = (rng.random(), rng.random());
                if u < s {
                    *v = if salt { 1.0 } else { 0.0 };
                }
            }
        }
        CorruptionKind::Blur => {
            let kernel = gaussian_kernel(s);
            let plane = shape.h * shape.w;
            for p in data.chunks_mut(plane) {
                blur_plane(p, shape.h, shape.w, &kernel);
            }
        }
        CorruptionKind::Contrast => {
            for img in data.chunks_mut(shape.features()) {
                let m = img.iter().sum::<f64>() / img.len() as f64;
                img.iter_mut().for_each(|v| *v = m + s * (*v - m));
            }
        }
        CorruptionKind::Brightness => data.iter_mut().for_each(|v| *v += s),
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

/// Mean over images of the per-pixel RMS change.
pub fn displacement(clean: &Tensor4, corrupted: &Tensor4) -> f64 {
    let per = clean.shape().features();
    let n = clean.shape().n.max(1);
    clean
        .data()
        .chunks(per)
        .zip(corrupted.data().chunks(per))
        .map(|(a, b)| (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / per as f64).sqrt())
        .sum::<f64>()
        / n as f64
}
