//! Thin singular value decomposition by one-sided (Hestenes) Jacobi.
//!
//! Tall inputs are first reduced to their `R` factor with Householder QR so
//! the Jacobi sweeps run on a square matrix; wide inputs are handled through
//! the transpose.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Sweep cap for the Jacobi iteration.
pub const MAX_SWEEPS: usize = 100;

/// A column pair is rotated while `|aᵢ·aⱼ| > tol·‖aᵢ‖‖aⱼ‖`.
pub const ROTATION_TOL: f64 = 1e-12;

/// `a = u·diag(s)·vt` with `r = min(rows, cols)`.
#[derive(Clone, Debug)]
pub struct Svd {
    /// `rows × r`, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, non-negative.
    pub s: Vec<f64>,
    /// `r × cols`, orthonormal rows.
    pub vt: Matrix,
}

impl Svd {
    /// `u·diag(s)·vt`.
    pub fn reconstruct(&self) -> Matrix {
        let us = self.u.scale_columns(&self.s).expect("s has r entries");
        crate::tensor::matmul(&us, &self.vt).expect("inner dimensions agree")
    }
}

/// Column-major working buffer.
struct Columns {
    m: usize,
    n: usize,
    data: Vec<f64>,
}

impl Columns {
    fn from_matrix(a: &Matrix) -> Self {
        let (m, n) = a.shape();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = a.get(i, j);
            }
        }
        Self { m, n, data }
    }

    fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { m: n, n, data }
    }

    #[inline]
    fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.m..(j + 1) * self.m]
    }

    #[inline]
    fn col_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.m..(j + 1) * self.m]
    }

    /// Mutable access to two distinct columns `i < j`.
    fn pair_mut(&mut self, i: usize, j: usize) -> (&mut [f64], &mut [f64]) {
        debug_assert!(i < j);
        let m = self.m;
        let (lo, hi) = self.data.split_at_mut(j * m);
        (&mut lo[i * m..(i + 1) * m], &mut hi[..m])
    }

    fn to_matrix(&self) -> Matrix {
        Matrix::from_fn(self.m, self.n, |i, j| self.data[j * self.m + i])
    }
}

/// Computes the thin SVD of `a`.
///
/// Right singular vectors are oriented so that their largest-magnitude entry
/// is positive, which makes the output deterministic. Under repeated singular
/// values only the spanned subspace is meaningful.
pub fn svd(a: &Matrix) -> Result<Svd> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "svd of an empty {m}x{n} matrix"
        )));
    }
    if !a.is_finite() {
        return Err(Error::InvalidArgument("svd input has non-finite entries".into()));
    }
    let raw = if m >= n {
        let (u, s, v) = tall_svd(a)?;
        (u, s, v.transpose())
    } else {
        // aᵀ = U'SV'ᵀ  ⇒  a = V'SU'ᵀ
        let (u_t, s, v_t) = tall_svd(&a.transpose())?;
        (v_t, s, u_t.transpose())
    };
    Ok(canonicalize(raw.0, raw.1, raw.2))
}

/// SVD of a tall matrix, returning `(U m×n, s, V n×n)` unsorted.
fn tall_svd(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (m, n) = a.shape();
    if m > n {
        let qr = HouseholderQr::new(a);
        let (ur, s, v) = jacobi(Columns::from_matrix(&qr.r()))?;
        let u = qr.apply_q(&ur);
        Ok((u, s, v))
    } else {
        jacobi(Columns::from_matrix(a))
    }
}

/// One-sided Jacobi on a square or tall column buffer.
fn jacobi(mut w: Columns) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let n = w.n;
    let mut v = Columns::identity(n);
    let mut converged = n < 2;
    let mut residual = 0.0_f64;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        residual = 0.0;
        for i in 0..n - 1 {
            for j in i + 1..n {
                let (alpha, beta, gamma) = {
                    let (ci, cj) = (w.col(i), w.col(j));
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut g = 0.0;
                    for (x, y) in ci.iter().zip(cj) {
                        a += x * x;
                        b += y * y;
                        g += x * y;
                    }
                    (a, b, g)
                };
                if gamma == 0.0 || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let scale = alpha.sqrt() * beta.sqrt();
                let ratio = gamma.abs() / scale;
                if ratio <= ROTATION_TOL || !ratio.is_finite() {
                    continue;
                }
                residual = residual.max(ratio);
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(w.pair_mut(i, j), c, s);
                rotate(v.pair_mut(i, j), c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            routine: "one-sided Jacobi SVD",
            iterations: MAX_SWEEPS,
            residual,
        });
    }

    let m = w.m;
    let mut s = vec![0.0; n];
    let mut u = Columns {
        m,
        n,
        data: vec![0.0; m * n],
    };
    let mut missing = Vec::new();
    for j in 0..n {
        let norm = w.col(j).iter().map(|x| x * x).sum::<f64>().sqrt();
        s[j] = norm;
        if norm > f64::MIN_POSITIVE {
            for (o, x) in u.col_mut(j).iter_mut().zip(w.col(j)) {
                *o = x / norm;
            }
        } else {
            missing.push(j);
        }
    }
    complete_orthonormal(&mut u, &missing);
    Ok((u.to_matrix(), s, v.to_matrix()))
}

#[inline]
fn rotate((x, y): (&mut [f64], &mut [f64]), c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

/// Fills the listed columns with unit vectors orthogonal to all others.
fn complete_orthonormal(u: &mut Columns, missing: &[usize]) {
    let m = u.m;
    let mut filled: Vec<usize> = (0..u.n).filter(|j| !missing.contains(j)).collect();
    let mut candidate = 0;
    for &j in missing {
        while candidate < m {
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            // two passes of Gram-Schmidt
            for _ in 0..2 {
                for &k in &filled {
                    let col = u.col(k);
                    let d: f64 = col.iter().zip(&e).map(|(a, b)| a * b).sum();
                    for (x, c) in e.iter_mut().zip(col) {
                        *x -= d * c;
                    }
                }
            }
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.5 {
                for (o, x) in u.col_mut(j).iter_mut().zip(&e) {
                    *o = x / norm;
                }
                filled.push(j);
                break;
            }
        }
    }
}

/// Sorts by descending singular value and fixes signs.
fn canonicalize(u: Matrix, s: Vec<f64>, vt: Matrix) -> Svd {
    let r = s.len();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let (m, p) = (u.rows(), vt.cols());
    let mut u_out = Matrix::zeros(m, r);
    let mut vt_out = Matrix::zeros(r, p);
    let mut s_out = Vec::with_capacity(r);
    for (k, &src) in order.iter().enumerate() {
        let row = vt.row(src);
        let mut best = 0;
        for (idx, val) in row.iter().enumerate() {
            if val.abs() > row[best].abs() {
                best = idx;
            }
        }
        let sign = if row[best] < 0.0 { -1.0 } else { 1.0 };
        for (o, x) in vt_out.row_mut(k).iter_mut().zip(row) {
            *o = sign * x;
        }
        for i in 0..m {
            u_out.set(i, k, sign * u.get(i, src));
        }
        s_out.push(s[src]);
    }
    Svd {
        u: u_out,
        s: s_out,
        vt: vt_out,
    }
}

/// Householder QR of a tall matrix, reflectors kept for applying `Q`.
struct HouseholderQr {
    m: usize,
    n: usize,
    /// Column-major copy holding `R` in its upper triangle.
    work: Vec<f64>,
    /// Unit reflector vectors, `vᵏ` has length `m − k`.
    reflectors: Vec<Vec<f64>>,
}

impl HouseholderQr {
    fn new(a: &Matrix) -> Self {
        let (m, n) = a.shape();
        let mut work = Columns::from_matrix(a).data;
        let mut reflectors = Vec::with_capacity(n);
        for k in 0..n {
            let col = &work[k * m + k..(k + 1) * m];
            let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            let mut v = col.to_vec();
            if norm == 0.0 {
                reflectors.push(vec![0.0; m - k]);
                continue;
            }
            let alpha = if v[0] > 0.0 { -norm } else { norm };
            v[0] -= alpha;
            let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if vn == 0.0 {
                reflectors.push(vec![0.0; m - k]);
                continue;
            }
            v.iter_mut().for_each(|x| *x /= vn);
            for j in k..n {
                let c = &mut work[j * m + k..(j + 1) * m];
                let d: f64 = v.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
                for (x, vi) in c.iter_mut().zip(&v) {
                    *x -= 2.0 * d * vi;
                }
            }
            reflectors.push(v);
        }
        Self {
            m,
            n,
            work,
            reflectors,
        }
    }

    fn r(&self) -> Matrix {
        Matrix::from_fn(self.n, self.n, |i, j| {
            if i <= j {
                self.work[j * self.m + i]
            } else {
                0.0
            }
        })
    }

    /// `Q·[b; 0]` for an `n×k` matrix `b`.
    fn apply_q(&self, b: &Matrix) -> Matrix {
        let (m, n) = (self.m, self.n);
        let k = b.cols();
        let mut cols = vec![0.0; m * k];
        for j in 0..k {
            for i in 0..n {
                cols[j * m + i] = b.get(i, j);
            }
        }
        for (r, v) in self.reflectors.iter().enumerate().rev() {
            for j in 0..k {
                let c = &mut cols[j * m + r..(j + 1) * m];
                let d: f64 = v.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
                if d != 0.0 {
                    for (x, vi) in c.iter_mut().zip(v) {
                        *x -= 2.0 * d * vi;
                    }
                }
            }
        }
        Matrix::from_fn(m, k, |i, j| cols[j * m + i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{matmul, matmul_nt, matmul_tn, relative_frobenius};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn orthonormality_error(q: &Matrix, rows: bool) -> f64 {
        let g = if rows { matmul_nt(q, q).unwrap() } else { matmul_tn(q, q).unwrap() };
        let mut worst: f64 = 0.0;
        for i in 0..g.rows() {
            for j in 0..g.cols() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g.get(i, j) - target).abs());
            }
        }
        worst
    }

    fn check(a: &Matrix) {
        let d = svd(a).unwrap();
        let r = a.rows().min(a.cols());
        assert_eq!(d.s.len(), r);
        assert_eq!(d.u.shape(), (a.rows(), r));
        assert_eq!(d.vt.shape(), (r, a.cols()));
        for w in d.s.windows(2) {
            assert!(w[0] >= w[1]);
        }
        assert!(d.s.iter().all(|v| *v >= 0.0));
        assert!(orthonormality_error(&d.vt, true) < 1e-10);
        assert!(orthonormality_error(&d.u, false) < 1e-10);
        assert!(relative_frobenius(&d.reconstruct(), a) < 1e-8);
        for k in 0..r {
            let row = d.vt.row(k);
            let best = row.iter().fold(0.0_f64, |m, v| if v.abs() > m.abs() { *v } else { m });
            assert!(best > 0.0);
        }
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let d = svd(&Matrix::identity(3)).unwrap();
        assert_eq!(d.s, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_matrix() {
        let d = svd(&Matrix::diag(&[3.0, 1.0])).unwrap();
        assert_eq!(d.s, vec![3.0, 1.0]);
        assert_eq!(d.vt, Matrix::identity(2));
        let d = svd(&Matrix::diag(&[1.0, -3.0])).unwrap();
        assert_eq!(d.s, vec![3.0, 1.0]);
        assert!((d.vt.get(0, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn seeded_5x3_reconstructs() {
        check(&random(5, 3, 42));
    }

    #[test]
    fn wide_tall_square_and_rank_deficient() {
        check(&random(3, 7, 1));
        check(&random(40, 6, 2));
        check(&random(9, 9, 3));
        // rank 2, 6x5
        let l = random(6, 2, 4);
        let r = random(2, 5, 5);
        check(&matmul(&l, &r).unwrap());
        check(&Matrix::zeros(4, 3));
        check(&Matrix::from_rows(&[vec![2.5]]).unwrap());
    }

    #[test]
    fn orthogonal_matrix_singular_values_are_one() {
        let q = svd(&random(8, 8, 9)).unwrap().u;
        let d = svd(&q).unwrap();
        for s in d.s {
            assert!((s - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn deterministic_output() {
        let a = random(12, 5, 10);
        let d1 = svd(&a).unwrap();
        let d2 = svd(&a).unwrap();
        assert_eq!(d1.vt, d2.vt);
        assert_eq!(d1.s, d2.s);
    }

    #[test]
    fn rejects_non_finite() {
        let mut a = random(3, 3, 1);
        a.set(1, 1, f64::NAN);
        assert!(matches!(svd(&a), Err(Error::InvalidArgument(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn reconstruction_property(rows in 1usize..=64, cols in 1usize..=64, seed in any::<u64>()) {
            let a = random(rows, cols, seed);
            let d = svd(&a).unwrap();
            prop_assert!(relative_frobenius(&d.reconstruct(), &a) <= 1e-8);
            prop_assert!(orthonormality_error(&d.vt, true) < 1e-10);
            prop_assert!(orthonormality_error(&d.u, false) < 1e-10);
        }
    }
}
