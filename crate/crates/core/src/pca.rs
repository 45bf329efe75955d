//! PCA on flattened features: batch and streaming fits, projection and
//! reconstruction, and a JSON file format for fitted bases.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::svd::svd;
use crate::tensor::{matmul, matmul_nt, mean_center, Matrix};

pub use crate::tensor::{flatten_features, unflatten_features, FeatureShape, Tensor4};

/// Singular values at or below this are never retained.
pub const MIN_SINGULAR_VALUE: f64 = 1e-12;

/// Current on-disk schema version for [`PcaBasis`] files.
pub const BASIS_FILE_VERSION: u32 = 1;

/// A fitted, rank-truncated PCA.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaBasis {
    mean: Vec<f64>,
    /// `L×p`; row `i` is the `i`-th right singular vector.
    components: Matrix,
    singular_values: Vec<f64>,
    n_fitted: usize,
    requested_rank: usize,
}

impl PcaBasis {
    /// Assembles a basis from parts, checking the structural invariants.
    pub fn from_parts(
        mean: Vec<f64>,
        components: Matrix,
        singular_values: Vec<f64>,
        n_fitted: usize,
    ) -> Result<Self> {
        let (l, p) = components.shape();
        if mean.len() != p {
            return Err(Error::shape(
                "PcaBasis::from_parts",
                format!("components {l}x{p}"),
                format!("mean of length {}", mean.len()),
            ));
        }
        if singular_values.len() != l {
            return Err(Error::shape(
                "PcaBasis::from_parts",
                format!("components {l}x{p}"),
                format!("{} singular values", singular_values.len()),
            ));
        }
        if l == 0 {
            return Err(Error::DegenerateBasis {
                threshold: MIN_SINGULAR_VALUE,
            });
        }
        if singular_values.iter().any(|s| !(*s > MIN_SINGULAR_VALUE) || !s.is_finite())
            || singular_values.windows(2).any(|w| w[0] < w[1])
        {
            return Err(Error::InvalidArgument(
                "singular values must be finite, positive and non-increasing".into(),
            ));
        }
        if !components.is_finite() || mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("basis has non-finite entries".into()));
        }
        Ok(Self {
            mean,
            components,
            singular_values,
            n_fitted,
            requested_rank: l,
        })
    }

    /// Feature width `p`.
    pub fn features(&self) -> usize {
        self.components.cols()
    }

    /// Effective rank `L` (may be below the requested rank for degenerate data).
    pub fn rank(&self) -> usize {
        self.components.rows()
    }

    pub fn requested_rank(&self) -> usize {
        self.requested_rank
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &Matrix {
        &self.components
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn n_fitted(&self) -> usize {
        self.n_fitted
    }

    /// Keeps the leading `rank` modes.
    pub fn truncated(&self, rank: usize) -> Result<Self> {
        if rank == 0 || rank > self.rank() {
            return Err(Error::InvalidArgument(format!(
                "cannot truncate rank-{} basis to {rank}",
                self.rank()
            )));
        }
        Ok(Self {
            mean: self.mean.clone(),
            components: self.components.slice_rows(0, rank),
            singular_values: self.singular_values[..rank].to_vec(),
            n_fitted: self.n_fitted,
            requested_rank: rank,
        })
    }

    fn check_features(&self, op: &'static str, x: &Matrix) -> Result<()> {
        if x.cols() != self.features() {
            return Err(Error::shape(
                op,
                x.shape_str(),
                format!("basis with p = {}", self.features()),
            ));
        }
        Ok(())
    }

    /// Scores `(x − mean)·V_L`, shape `M×L`.
    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        self.check_features("PcaBasis::transform", x)?;
        let centered = x.sub_row_vector(&self.mean)?;
        matmul_nt(&centered, &self.components)
    }

    /// `scores·V_Lᵀ + mean`, shape `M×p`.
    pub fn inverse_transform(&self, scores: &Matrix) -> Result<Matrix> {
        if scores.cols() != self.rank() {
            return Err(Error::shape(
                "PcaBasis::inverse_transform",
                scores.shape_str(),
                format!("basis of rank {}", self.rank()),
            ));
        }
        matmul(scores, &self.components)?.add_row_vector(&self.mean)
    }

    /// Writes the basis as JSON.
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = BasisFile::from(self);
        let text = serde_json::to_string_pretty(&file)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Json(j) => Error::Format {
                path: path.to_path_buf(),
                reason: j.to_string(),
            },
            other => other,
        })
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&BasisFile::from(self))?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: BasisFile = serde_json::from_str(text)?;
        file.into_basis()
    }
}

/// On-disk layout of a [`PcaBasis`].
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BasisFile {
    version: u32,
    p: usize,
    #[serde(rename = "L")]
    rank: usize,
    requested_rank: usize,
    n_fitted: usize,
    mean: Vec<f64>,
    singular_values: Vec<f64>,
    components: Vec<f64>,
}

impl From<&PcaBasis> for BasisFile {
    fn from(b: &PcaBasis) -> Self {
        Self {
            version: BASIS_FILE_VERSION,
            p: b.features(),
            rank: b.rank(),
            requested_rank: b.requested_rank,
            n_fitted: b.n_fitted,
            mean: b.mean.clone(),
            singular_values: b.singular_values.clone(),
            components: b.components.data().to_vec(),
        }
    }
}

impl BasisFile {
    fn into_basis(self) -> Result<PcaBasis> {
        if self.version != BASIS_FILE_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported basis file version {}",
                self.version
            )));
        }
        let components = Matrix::new(self.rank, self.p, self.components)?;
        let mut basis = PcaBasis::from_parts(self.mean, components, self.singular_values, self.n_fitted)?;
        basis.requested_rank = self.requested_rank;
        Ok(basis)
    }
}

fn retention_threshold(s_max: f64, n: usize, p: usize) -> f64 {
    MIN_SINGULAR_VALUE.max(s_max * (n.max(p) as f64) * f64::EPSILON)
}

/// Keeps at most `rank` modes above the retention threshold.
fn select_modes(
    s: &[f64],
    vt: &Matrix,
    rank: usize,
    n: usize,
) -> Result<(Vec<f64>, Matrix)> {
    let p = vt.cols();
    let threshold = retention_threshold(s.first().copied().unwrap_or(0.0), n, p);
    let keep = s
        .iter()
        .take(rank)
        .take_while(|v| **v > threshold)
        .count();
    if keep == 0 {
        return Err(Error::DegenerateBasis { threshold });
    }
    Ok((s[..keep].to_vec(), vt.slice_rows(0, keep)))
}

/// Fits a rank-`rank` PCA on the rows of `features`.
pub fn fit(features: &Matrix, rank: usize) -> Result<PcaBasis> {
    let (n, p) = features.shape();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "PCA needs at least 2 samples, got {n}"
        )));
    }
    if rank == 0 || rank > n.min(p) {
        return Err(Error::InvalidArgument(format!(
            "rank {rank} outside 1..={} for {n}x{p} features",
            n.min(p)
        )));
    }
    let (centered, mean) = mean_center(features);
    let d = svd(&centered)?;
    let (s, components) = select_modes(&d.s, &d.vt, rank, n)?;
    Ok(PcaBasis {
        mean,
        components,
        singular_values: s,
        n_fitted: n,
        requested_rank: rank,
    })
}

/// Streaming PCA whose state is a rank-`L` factor plus the running mean,
/// so memory is `O(L·p)` regardless of how many samples pass through.
///
/// Each update stacks `[diag(S)·Vᵀ; batch − batch mean; mean correction]`
/// and re-factors it. The result is exact when the data has rank at most
/// `L`; otherwise the discarded tail of each step is lost.
#[derive(Clone, Debug)]
pub struct IncrementalPca {
    p: usize,
    rank: usize,
    n_seen: usize,
    mean: Vec<f64>,
    /// Retained right singular vectors, `k×p` with `k ≤ rank`.
    vt: Matrix,
    s: Vec<f64>,
    s_max: f64,
}

impl IncrementalPca {
    pub fn new(p: usize, rank: usize) -> Result<Self> {
        if p == 0 || rank == 0 || rank > p {
            return Err(Error::InvalidArgument(format!(
                "rank {rank} outside 1..={p}"
            )));
        }
        Ok(Self {
            p,
            rank,
            n_seen: 0,
            mean: vec![0.0; p],
            vt: Matrix::zeros(0, p),
            s: Vec::new(),
            s_max: 0.0,
        })
    }

    pub fn n_seen(&self) -> usize {
        self.n_seen
    }

    /// Number of floats held in the running state.
    pub fn state_len(&self) -> usize {
        self.mean.len() + self.vt.data().len() + self.s.len()
    }

    pub fn update(&mut self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.p {
            return Err(Error::shape(
                "IncrementalPca::update",
                batch.shape_str(),
                format!("stream with p = {}", self.p),
            ));
        }
        let b = batch.rows();
        if b == 0 {
            return Ok(());
        }
        let (centered, batch_mean) = mean_center(batch);
        let stacked = if self.n_seen == 0 {
            centered
        } else {
            let (n_old, n_b) = (self.n_seen as f64, b as f64);
            let w = (n_old * n_b / (n_old + n_b)).sqrt();
            let correction: Vec<f64> = self
                .mean
                .iter()
                .zip(&batch_mean)
                .map(|(a, c)| w * (a - c))
                .collect();
            scale_rows(self.vt.clone(), &self.s)
                .vstack(&centered)?
                .vstack(&Matrix::new(1, self.p, correction)?)?
        };
        let d = svd(&stacked)?;
        let keep = self.rank.min(d.s.len());
        self.vt = d.vt.slice_rows(0, keep);
        self.s = d.s[..keep].to_vec();
        self.s_max = d.s.first().copied().unwrap_or(0.0);

        let total = self.n_seen + b;
        let (wo, wb) = (self.n_seen as f64 / total as f64, b as f64 / total as f64);
        for (m, bm) in self.mean.iter_mut().zip(&batch_mean) {
            *m = wo * *m + wb * bm;
        }
        self.n_seen = total;
        Ok(())
    }

    /// Produces the basis from the accumulated factor.
    pub fn finalize(&self) -> Result<PcaBasis> {
        if self.n_seen < 2 {
            return Err(Error::InvalidArgument(format!(
                "PCA needs at least 2 samples, got {}",
                self.n_seen
            )));
        }
        let threshold = retention_threshold(self.s_max, self.n_seen, self.p);
        let keep = self.s.iter().take_while(|v| **v > threshold).count();
        if keep == 0 {
            return Err(Error::DegenerateBasis { threshold });
        }
        let components = self.vt.slice_rows(0, keep);
        let s = &self.s;
        Ok(PcaBasis {
            mean: self.mean.clone(),
            components,
            singular_values: s[..keep].to_vec(),
            n_fitted: self.n_seen,
            requested_rank: self.rank,
        })
    }
}

/// Scales row `i` by `s[i]`.
fn scale_rows(mut m: Matrix, s: &[f64]) -> Matrix {
    for (i, f) in s.iter().enumerate() {
        m.row_mut(i).iter_mut().for_each(|v| *v *= f);
    }
    m
}

/// Fits PCA over a stream of equally wide batches.
pub fn fit_incremental<'a, I>(batches: I, rank: usize) -> Result<PcaBasis>
where
    I: IntoIterator<Item = &'a Matrix>,
{
    let mut iter = batches.into_iter().peekable();
    let p = iter
        .peek()
        .map(|m| m.cols())
        .ok_or_else(|| Error::InvalidArgument("empty batch stream".into()))?;
    let mut state = IncrementalPca::new(p, rank)?;
    for b in iter {
        state.update(b)?;
    }
    state.finalize()
}
