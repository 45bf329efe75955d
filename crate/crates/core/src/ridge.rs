//! Ridge regression two ways: the normal-equation closed form, and ordinary
//! least squares shrunk mode by mode with `F_ii = λ_i / (λ_i + γ)` in the
//! eigenbasis of `XᵀX`. [`verify_equivalence`] checks that they agree.
//!
//! `λ_i` here are eigenvalues of `XᵀX`, i.e. squared singular values of `X`,
//! whereas the adaptation filter uses the singular values themselves.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::svd::svd;
use crate::tensor::{matmul, matmul_tn, Matrix};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// Agreement required on well-conditioned problems.
pub const EQUIVALENCE_TOL: f64 = 1e-8;
/// Agreement required in the ill-conditioned sweep.
pub const CONDITIONED_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionProblem {
    pub x: Matrix,
    pub y: Matrix,
    pub gamma: f64,
}

impl RegressionProblem {
    pub fn new(x: Matrix, y: Matrix, gamma: f64) -> Result<Self> {
        if x.rows() != y.rows() {
            return Err(Error::shape("RegressionProblem", x.shape_str(), y.shape_str()));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("gamma must be finite and ≥ 0, got {gamma}")));
        }
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::InvalidArgument("non-finite regression data".into()));
        }
        Ok(Self { x, y, gamma })
    }
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    let scale = (0..n).map(|i| a.get(i, i).abs()).fold(0.0, f64::max);
    let floor = scale * n as f64 * f64::EPSILON;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if d <= floor {
            return Err(Error::RankDeficient(format!(
                "normal matrix not positive definite at pivot {j} ({d:e})"
            )));
        }
        let d = d.sqrt();
        l.set(j, j, d);
        for i in j + 1..n {
            let mut v = a.get(i, j);
            for k in 0..j {
                v -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, v / d);
        }
    }
    Ok(l)
}

/// `(XᵀX + γI)⁻¹ XᵀY` by Cholesky forward/back substitution.
pub fn ridge_closed_form(p: &RegressionProblem) -> Result<Matrix> {
    let mut c = matmul_tn(&p.x, &p.x)?;
    for i in 0..c.rows() {
        c.set(i, i, c.get(i, i) + p.gamma);
    }
    let l = cholesky(&c)?;
    let mut b = matmul_tn(&p.x, &p.y)?;
    let (d, k) = b.shape();
    for col in 0..k {
        for i in 0..d {
            let mut v = b.get(i, col);
            for j in 0..i {
                v -= l.get(i, j) * b.get(j, col);
            }
            b.set(i, col, v / l.get(i, i));
        }
        for i in (0..d).rev() {
            let mut v = b.get(i, col);
            for j in i + 1..d {
                v -= l.get(j, i) * b.get(j, col);
            }
            b.set(i, col, v / l.get(i, i));
        }
    }
    Ok(b)
}

/// `Uᵀ F_γ U θ*_0` where `XᵀX = Uᵀ D U`, obtained from the SVD of `X`.
/// Modes with a zero eigenvalue get `F = 0`, so `γ > 0` tolerates rank-deficient `X`.
pub fn spectral_ridge(p: &RegressionProblem) -> Result<Matrix> {
    let dec = svd(&p.x)?;
    let (n, d) = p.x.shape();
    let s_max = dec.s.first().copied().unwrap_or(0.0);
    let tol = s_max * n.max(d) as f64 * f64::EPSILON;
    let rank = dec.s.iter().filter(|s| **s > tol).count();
    if p.gamma == 0.0 && rank < d {
        return Err(Error::RankDeficient(format!("X has rank {rank} < {d} columns and gamma = 0")));
    }
    // OLS in eigen coordinates: S⁺ Uₓᵀ Y
    let mut z = matmul_tn(&dec.u, &p.y)?;
    for i in 0..z.rows() {
        let inv = if i < rank { 1.0 / dec.s[i] } else { 0.0 };
        z.row_mut(i).iter_mut().for_each(|v| *v *= inv);
    }
    let ev = dec.vt.slice_rows(0, z.rows());
    let theta0 = matmul_tn(&ev, &z)?;
    // project θ*_0 onto the eigenbasis, filter, and map back
    let mut coords = matmul(&ev, &theta0)?;
    for i in 0..coords.rows() {
        let lambda = if i < rank { dec.s[i] * dec.s[i] } else { 0.0 };
        let f = if lambda > 0.0 { lambda / (lambda + p.gamma) } else { 0.0 };
        coords.row_mut(i).iter_mut().for_each(|v| *v *= f);
    }
    matmul_tn(&ev, &coords)
}

fn relative_deviation(a: &Matrix, b: &Matrix) -> f64 {
    let diff = a.sub(b).map(|m| m.frobenius_norm()).unwrap_or(f64::INFINITY);
    diff / a.frobenius_norm().max(b.frobenius_norm()).max(f64::MIN_POSITIVE)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub gamma: f64,
    pub deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub condition: f64,
    pub gamma: f64,
    pub deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub schema_version: u32,
    pub seed: u64,
    pub trials: usize,
    pub tolerance: f64,
    pub max_relative_deviation: f64,
    pub worst_trial: usize,
    /// Largest error of either solver against `Y/(1+γ)` on `X = I`.
    pub identity_max_error: f64,
    pub conditioned_tolerance: f64,
    pub conditioning: Vec<ConditionResult>,
    pub passed: bool,
    pub results: Vec<TrialResult>,
}

const GAMMAS: [f64; 4] = [0.01, 0.1, 1.0, 10.0];

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Random well-conditioned problem: `n ∈ [d, 32]`, `d ≤ 8`, `k ≤ 3`.
pub fn random_problem(rng: &mut ChaCha8Rng) -> RegressionProblem {
    let d = rng.random_range(1..=8);
    let n = rng.random_range(d.max(2)..=32);
    let k = rng.random_range(1..=3);
    let gamma = GAMMAS[rng.random_range(0..GAMMAS.len())];
    RegressionProblem {
        x: gaussian(n, d, rng),
        y: gaussian(n, k, rng),
        gamma,
    }
}

/// `X = Q₁ diag(σ) Q₂ᵀ` with singular values spread geometrically up to `condition`.
pub fn conditioned_design(n: usize, d: usize, condition: f64, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    let q1 = svd(&gaussian(n, d, rng))?.u;
    let q2 = svd(&gaussian(d, d, rng))?.vt;
    let sigma: Vec<f64> = (0..d)
        .map(|i| condition.powf(-(i as f64) / (d.max(2) - 1) as f64))
        .collect();
    matmul(&q1.scale_columns(&sigma)?, &q2)
}

/// Runs both solvers on `trials` seeded problems, identity designs, and a
/// condition-number sweep at `γ = 1e-6`.
pub fn verify_equivalence(trials: usize, seed: u64) -> Result<EquivalenceReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::with_capacity(trials);
    let (mut worst, mut worst_trial) = (0.0f64, 0usize);
    for t in 0..trials {
        let p = random_problem(&mut rng);
        let dev = relative_deviation(&ridge_closed_form(&p)?, &spectral_ridge(&p)?);
        if dev > worst {
            worst = dev;
            worst_trial = t;
        }
        results.push(TrialResult {
            n: p.x.rows(),
            d: p.x.cols(),
            k: p.y.cols(),
            gamma: p.gamma,
            deviation: dev,
        });
    }
    let mut identity_max_error = 0.0f64;
    for d in [1usize, 3, 8] {
        for &gamma in &GAMMAS {
            let y = gaussian(d, 2, &mut rng);
            let p = RegressionProblem::new(Matrix::identity(d), y.clone(), gamma)?;
            let expect = y.scale(1.0 / (1.0 + gamma));
            for theta in [ridge_closed_form(&p)?, spectral_ridge(&p)?] {
                identity_max_error = identity_max_error.max(theta.sub(&expect)?.max_abs());
            }
        }
    }
    let mut conditioning = Vec::new();
    for condition in [1e2, 1e4, 1e6] {
        let x = conditioned_design(24, 6, condition, &mut rng)?;
        let p = RegressionProblem::new(x, gaussian(24, 2, &mut rng), 1e-6)?;
        conditioning.push(ConditionResult {
            condition,
            gamma: p.gamma,
            deviation: relative_deviation(&ridge_closed_form(&p)?, &spectral_ridge(&p)?),
        });
    }
    let passed = worst <= EQUIVALENCE_TOL
        && identity_max_error <= 1e-12
        && conditioning.iter().all(|c| c.deviation <= CONDITIONED_TOL);
    Ok(EquivalenceReport {
        schema_version: REPORT_SCHEMA_VERSION,
        seed,
        trials,
        tolerance: EQUIVALENCE_TOL,
        max_relative_deviation: worst,
        worst_trial,
        identity_max_error,
        conditioned_tolerance: CONDITIONED_TOL,
        conditioning,
        passed,
        results,
    })
}
