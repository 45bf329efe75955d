//! The learnable spectral filter and the project → filter → reconstruct map.
//!
//! Two diagonal parameterisations are provided, both keyed on the fitted
//! singular values `λᵢ`:
//!
//! * ridge:     `Fᵢᵢ = λᵢ / (λᵢ + max(γᵢ, 0))`
//! * neg-exp:   `Fᵢᵢ = 1 / (1 + exp(γᵢ² − λᵢ))`

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pca::PcaBasis;
use crate::tensor::{matmul, matmul_nt, Matrix};

pub const FILTER_FILE_VERSION: u32 = 1;

/// Largest double strictly below one.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterKind {
    /// Ridge shrinkage with a ReLU on the penalty.
    ReluRidge,
    /// Logistic roll-off around `γᵢ² = λᵢ`.
    NegExp,
}

impl FilterKind {
    pub fn name(self) -> &'static str {
        match self {
            FilterKind::ReluRidge => "relu-ridge",
            FilterKind::NegExp => "neg-exp",
        }
    }
}

/// `1 / (1 + eᶻ)` without overflow.
#[inline]
fn logistic_neg(z: f64) -> f64 {
    if z >= 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralFilter {
    kind: FilterKind,
    gamma: Vec<f64>,
    lambda_ref: Vec<f64>,
}

impl SpectralFilter {
    /// Filter with `γ = 0`.
    pub fn new(kind: FilterKind, lambda_ref: Vec<f64>) -> Result<Self> {
        let gamma = vec![0.0; lambda_ref.len()];
        Self::with_gamma(kind, lambda_ref, gamma)
    }

    pub fn with_gamma(kind: FilterKind, lambda_ref: Vec<f64>, gamma: Vec<f64>) -> Result<Self> {
        if lambda_ref.is_empty() {
            return Err(Error::InvalidArgument("filter needs at least one mode".into()));
        }
        if lambda_ref.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidArgument(
                "filter reference singular values must be finite and positive".into(),
            ));
        }
        let mut f = Self {
            kind,
            gamma: Vec::new(),
            lambda_ref,
        };
        f.set_gamma(&gamma)?;
        Ok(f)
    }

    /// Filter over the singular values of `basis`, with every `γᵢ = gamma_init`.
    pub fn for_basis(kind: FilterKind, basis: &PcaBasis, gamma_init: f64) -> Result<Self> {
        let lambda = basis.singular_values().to_vec();
        let gamma = vec![gamma_init; lambda.len()];
        Self::with_gamma(kind, lambda, gamma)
    }

    pub fn kind(&self) -> FilterKind {
        self.kind
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn lambda_ref(&self) -> &[f64] {
        &self.lambda_ref
    }

    /// Number of learnable parameters (`L`).
    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    pub fn set_gamma(&mut self, gamma: &[f64]) -> Result<()> {
        if gamma.len() != self.lambda_ref.len() {
            return Err(Error::shape(
                "SpectralFilter::set_gamma",
                format!("{} modes", self.lambda_ref.len()),
                format!("{} parameters", gamma.len()),
            ));
        }
        if gamma.iter().any(|g| !g.is_finite()) {
            return Err(Error::InvalidArgument("filter parameters must be finite".into()));
        }
        self.gamma = gamma.to_vec();
        Ok(())
    }

    /// Diagonal `Fᵢᵢ(γᵢ)`.
    pub fn diag(&self) -> Vec<f64> {
        self.gamma
            .iter()
            .zip(&self.lambda_ref)
            .map(|(&g, &l)| match self.kind {
                FilterKind::ReluRidge => l / (l + g.max(0.0)),
                FilterKind::NegExp => logistic_neg(g * g - l).clamp(f64::MIN_POSITIVE, BELOW_ONE),
            })
            .collect()
    }

    /// Elementwise derivative `∂Fᵢᵢ/∂γᵢ`. The ReLU kink at 0 takes subgradient 0.
    pub fn diag_grad(&self) -> Vec<f64> {
        self.gamma
            .iter()
            .zip(&self.lambda_ref)
            .map(|(&g, &l)| match self.kind {
                FilterKind::ReluRidge => {
                    if g > 0.0 {
                        let d = l + g;
                        -l / (d * d)
                    } else {
                        0.0
                    }
                }
                FilterKind::NegExp => {
                    let z = g * g - l;
                    // eᶻ/(1+eᶻ)² = σ(z)·σ(−z)
                    -2.0 * g * logistic_neg(z) * logistic_neg(-z)
                }
            })
            .collect()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&FilterFile {
            version: FILTER_FILE_VERSION,
            kind: self.kind,
            gamma: self.gamma.clone(),
        })?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads `{kind, gamma}` and binds it to the singular values of `basis`.
    pub fn load_json(path: &Path, basis: &PcaBasis) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: FilterFile = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if file.version != FILTER_FILE_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("unsupported filter file version {}", file.version),
            });
        }
        Self::with_gamma(file.kind, basis.singular_values().to_vec(), file.gamma)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FilterFile {
    version: u32,
    kind: FilterKind,
    gamma: Vec<f64>,
}

/// Intermediates of [`apply`] needed by [`apply_backward`].
#[derive(Clone, Debug)]
pub struct FilterCache {
    scores: Matrix,
    diag: Vec<f64>,
    diag_grad: Vec<f64>,
    gamma: Vec<f64>,
}

impl FilterCache {
    /// Projected scores `(x − mean)·V_L`.
    pub fn scores(&self) -> &Matrix {
        &self.scores
    }
}

fn check_compat(basis: &PcaBasis, filter_len: usize, x: &Matrix) -> Result<()> {
    if filter_len != basis.rank() {
        return Err(Error::shape(
            "spectral filter",
            format!("basis of rank {}", basis.rank()),
            format!("filter with {filter_len} modes"),
        ));
    }
    if x.cols() != basis.features() {
        return Err(Error::shape(
            "spectral filter",
            x.shape_str(),
            format!("basis with p = {}", basis.features()),
        ));
    }
    Ok(())
}

/// `(x − mean)·V_L·diag(F)·V_Lᵀ + mean`, with the cache for the backward pass.
pub fn apply(basis: &PcaBasis, filter: &SpectralFilter, x: &Matrix) -> Result<(Matrix, FilterCache)> {
    check_compat(basis, filter.len(), x)?;
    let diag = filter.diag();
    let scores = basis.transform(x)?;
    let out = basis.inverse_transform(&scores.scale_columns(&diag)?)?;
    let cache = FilterCache {
        scores,
        diag,
        diag_grad: filter.diag_grad(),
        gamma: filter.gamma.clone(),
    };
    Ok((out, cache))
}

/// Same map with an arbitrary diagonal in place of `F(γ)`.
pub fn apply_with_diag(basis: &PcaBasis, diag: &[f64], x: &Matrix) -> Result<Matrix> {
    check_compat(basis, diag.len(), x)?;
    basis.inverse_transform(&basis.transform(x)?.scale_columns(diag)?)
}

/// Gradients flowing out of the filter layer.
#[derive(Clone, Debug)]
pub struct FilterGrad {
    /// `∂loss/∂γ`, length `L`.
    pub gamma: Vec<f64>,
    /// `∂loss/∂x`, present when requested.
    pub input: Option<Matrix>,
}

/// Back-propagates `upstream = ∂loss/∂output` through [`apply`].
pub fn apply_backward(
    basis: &PcaBasis,
    filter: &SpectralFilter,
    cache: &FilterCache,
    upstream: &Matrix,
    want_input: bool,
) -> Result<FilterGrad> {
    if cache.gamma != filter.gamma {
        return Err(Error::StaleCache("filter parameters changed since the forward pass"));
    }
    if upstream.shape() != (cache.scores.rows(), basis.features()) {
        return Err(Error::shape(
            "apply_backward",
            upstream.shape_str(),
            format!("{}x{}", cache.scores.rows(), basis.features()),
        ));
    }
    let projected = matmul_nt(upstream, basis.components())?;
    let l = basis.rank();
    let mut gamma = vec![0.0; l];
    for m in 0..projected.rows() {
        let (s, g) = (cache.scores.row(m), projected.row(m));
        for i in 0..l {
            gamma[i] += s[i] * g[i];
        }
    }
    for (gi, d) in gamma.iter_mut().zip(&cache.diag_grad) {
        *gi *= d;
    }
    let input = if want_input {
        Some(matmul(&projected.scale_columns(&cache.diag)?, basis.components())?)
    } else {
        None
    };
    Ok(FilterGrad { gamma, input })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pca::fit;
    use crate::tensor::relative_frobenius;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn diag_examples() {
        let f = SpectralFilter::new(FilterKind::ReluRidge, vec![3.0, 1.0, 0.5]).unwrap();
        assert_eq!(f.diag(), vec![1.0, 1.0, 1.0]);
        let f = SpectralFilter::with_gamma(FilterKind::ReluRidge, vec![2.0], vec![2.0]).unwrap();
        assert_eq!(f.diag(), vec![0.5]);
        let f = SpectralFilter::with_gamma(FilterKind::NegExp, vec![4.0], vec![2.0]).unwrap();
        assert_eq!(f.diag(), vec![0.5]);
        let f = SpectralFilter::with_gamma(FilterKind::ReluRidge, vec![1.5], vec![-5.0]).unwrap();
        assert_eq!(f.diag(), vec![1.0]);
    }

    #[test]
    fn grad_examples() {
        let f = SpectralFilter::new(FilterKind::NegExp, vec![3.0, 0.1]).unwrap();
        assert_eq!(f.diag_grad(), vec![0.0, 0.0]);
        let f = SpectralFilter::with_gamma(FilterKind::ReluRidge, vec![2.0], vec![-1.0]).unwrap();
        assert_eq!(f.diag_grad(), vec![0.0]);
    }

    #[test]
    fn diag_grad_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = 1e-6;
        for kind in [FilterKind::ReluRidge, FilterKind::NegExp] {
            for _ in 0..150 {
                let l: f64 = rng.random_range(0.2..6.0);
                let g: f64 = match kind {
                    FilterKind::ReluRidge => rng.random_range(0.05..4.0),
                    FilterKind::NegExp => rng.random_range(-3.0..3.0),
                };
                let eval = |g: f64| SpectralFilter::with_gamma(kind, vec![l], vec![g]).unwrap().diag()[0];
                let fd = (eval(g + h) - eval(g - h)) / (2.0 * h);
                let an = SpectralFilter::with_gamma(kind, vec![l], vec![g]).unwrap().diag_grad()[0];
                assert!(rel_err(an, fd) < 1e-5, "{kind:?} l={l} g={g} an={an} fd={fd}");
            }
        }
    }

    #[test]
    fn range_holds_at_extremes() {
        let lambdas = [1e-12, 1e-6, 1e-2, 1.0, 1e2, 1e4, 1e6];
        let gammas = [-1e3, -10.0, -1.0, 0.0, 1e-9, 1.0, 10.0, 1e3];
        for &l in &lambdas {
            for &g in &gammas {
                let relu = SpectralFilter::with_gamma(FilterKind::ReluRidge, vec![l], vec![g]).unwrap();
                let d = relu.diag()[0];
                assert!(d > 0.0 && d <= 1.0, "relu l={l} g={g} d={d}");
                assert!(relu.diag_grad()[0].is_finite());
                let ne = SpectralFilter::with_gamma(FilterKind::NegExp, vec![l], vec![g]).unwrap();
                let d = ne.diag()[0];
                assert!(d > 0.0 && d < 1.0, "negexp l={l} g={g} d={d}");
                assert!(ne.diag_grad()[0].is_finite());
            }
        }
    }

    #[test]
    fn ridge_is_monotone_and_vanishes() {
        let at = |g: f64| SpectralFilter::with_gamma(FilterKind::ReluRidge, vec![2.0], vec![g]).unwrap().diag()[0];
        let mut prev = at(0.0);
        for k in 1..200 {
            let cur = at(k as f64 * 0.1);
            assert!(cur < prev);
            prev = cur;
        }
        assert!(at(1e12) < 1e-11);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(SpectralFilter::new(FilterKind::NegExp, vec![1.0, 0.0]).is_err());
        assert!(SpectralFilter::with_gamma(FilterKind::NegExp, vec![1.0], vec![f64::NAN]).is_err());
        assert!(SpectralFilter::with_gamma(FilterKind::NegExp, vec![1.0], vec![1.0, 2.0]).is_err());
    }

    fn setup(seed: u64, n: usize, p: usize, rank: usize) -> (PcaBasis, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(n, p, &mut rng);
        (fit(&x, rank).unwrap(), rng)
    }

    #[test]
    fn identity_filter_round_trips_at_full_rank() {
        let (basis, mut rng) = setup(1, 20, 6, 6);
        let f = SpectralFilter::for_basis(FilterKind::ReluRidge, &basis, 0.0).unwrap();
        let x = random(5, 6, &mut rng);
        let (y, _) = apply(&basis, &f, &x).unwrap();
        assert!(relative_frobenius(&y, &x) < 1e-8);
    }

    #[test]
    fn zero_diag_collapses_to_mean() {
        let (basis, mut rng) = setup(2, 20, 6, 4);
        let x = random(3, 6, &mut rng);
        let y = apply_with_diag(&basis, &[0.0; 4], &x).unwrap();
        for i in 0..3 {
            assert_eq!(y.row(i), basis.mean());
        }
    }

    #[test]
    fn matches_dense_projector() {
        let (basis, mut rng) = setup(3, 30, 7, 5);
        let gamma: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let f = SpectralFilter::with_gamma(FilterKind::NegExp, basis.singular_values().to_vec(), gamma).unwrap();
        let x = random(8, 7, &mut rng);
        let (y, _) = apply(&basis, &f, &x).unwrap();
        let d = f.diag();
        let v = basis.components();
        let op = Matrix::from_fn(7, 7, |i, j| (0..5).map(|k| v.get(k, i) * d[k] * v.get(k, j)).sum());
        let mut expected = Matrix::zeros(8, 7);
        for m in 0..8 {
            for j in 0..7 {
                let mut acc = basis.mean()[j];
                for i in 0..7 {
                    acc += (x.get(m, i) - basis.mean()[i]) * op.get(i, j);
                }
                expected.set(m, j, acc);
            }
        }
        assert!(relative_frobenius(&y, &expected) < 1e-10);
    }

    #[test]
    fn centered_map_is_linear() {
        let (basis, mut rng) = setup(4, 25, 6, 3);
        let gamma: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..2.0)).collect();
        let f = SpectralFilter::with_gamma(FilterKind::ReluRidge, basis.singular_values().to_vec(), gamma).unwrap();
        let centered = |x: &Matrix| {
            apply(&basis, &f, &x.add_row_vector(basis.mean()).unwrap())
                .unwrap()
                .0
                .sub_row_vector(basis.mean())
                .unwrap()
        };
        let x = random(4, 6, &mut rng);
        let y = random(4, 6, &mut rng);
        let (a, b) = (1.7, -0.3);
        let lhs = centered(&x.scale(a).add(&y.scale(b)).unwrap());
        let rhs = centered(&x).scale(a).add(&centered(&y).scale(b)).unwrap();
        assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-9);
    }

    /// Scalar loss `Σ w ∘ apply(x)`; upstream gradient is `w`.
    fn loss(basis: &PcaBasis, f: &SpectralFilter, x: &Matrix, w: &Matrix) -> f64 {
        let (y, _) = apply(basis, f, x).unwrap();
        y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let h = 1e-6;
        for (seed, kind) in (0..60).flat_map(|s| [(s, FilterKind::ReluRidge), (s + 1000, FilterKind::NegExp)]) {
            let (basis, mut rng) = setup(seed, 24, 6, 4);
            let gamma: Vec<f64> = (0..4)
                .map(|i| match kind {
                    FilterKind::ReluRidge => rng.random_range(0.05..3.0),
                    FilterKind::NegExp => basis.singular_values()[i].sqrt() + rng.random_range(-1.0..1.0),
                })
                .collect();
            let mut f = SpectralFilter::with_gamma(kind, basis.singular_values().to_vec(), gamma.clone()).unwrap();
            let x = random(5, 6, &mut rng);
            let w = random(5, 6, &mut rng);
            let (_, cache) = apply(&basis, &f, &x).unwrap();
            let grad = apply_backward(&basis, &f, &cache, &w, true).unwrap();
            for i in 0..4 {
                let mut gp = gamma.clone();
                gp[i] += h;
                f.set_gamma(&gp).unwrap();
                let up = loss(&basis, &f, &x, &w);
                gp[i] -= 2.0 * h;
                f.set_gamma(&gp).unwrap();
                let down = loss(&basis, &f, &x, &w);
                f.set_gamma(&gamma).unwrap();
                let fd = (up - down) / (2.0 * h);
                assert!(rel_err(grad.gamma[i], fd) < 1e-5, "{kind:?} seed {seed} mode {i}: {} vs {fd}", grad.gamma[i]);
            }
            // input gradient: directional derivative along a random direction
            let dir = random(5, 6, &mut rng);
            let up = loss(&basis, &f, &x.add(&dir.scale(h)).unwrap(), &w);
            let down = loss(&basis, &f, &x.sub(&dir.scale(h)).unwrap(), &w);
            let fd = (up - down) / (2.0 * h);
            let an: f64 = grad.input.unwrap().data().iter().zip(dir.data()).map(|(a, b)| a * b).sum();
            assert!(rel_err(an, fd) < 1e-5);
        }
    }

    #[test]
    fn backward_zero_cases_and_stale_cache() {
        let (basis, mut rng) = setup(5, 20, 5, 3);
        let mut f = SpectralFilter::new(FilterKind::NegExp, basis.singular_values().to_vec()).unwrap();
        let x = random(4, 5, &mut rng);
        let w = random(4, 5, &mut rng);
        let (_, cache) = apply(&basis, &f, &x).unwrap();
        let g = apply_backward(&basis, &f, &cache, &w, false).unwrap();
        assert!(g.gamma.iter().all(|v| *v == 0.0));
        assert!(g.input.is_none());
        f.set_gamma(&[0.5, 0.5, 0.5]).unwrap();
        let (_, cache) = apply(&basis, &f, &x).unwrap();
        let g = apply_backward(&basis, &f, &cache, &Matrix::zeros(4, 5), false).unwrap();
        assert!(g.gamma.iter().all(|v| *v == 0.0));
        f.set_gamma(&[0.1, 0.2, 0.3]).unwrap();
        assert!(matches!(
            apply_backward(&basis, &f, &cache, &w, false),
            Err(Error::StaleCache(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (basis, _) = setup(6, 20, 5, 3);
        let f = SpectralFilter::with_gamma(FilterKind::NegExp, basis.singular_values().to_vec(), vec![0.1, -0.7, 1.0 / 3.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("filter.json");
        f.save_json(&path).unwrap();
        assert_eq!(SpectralFilter::load_json(&path, &basis).unwrap(), f);
    }
}
