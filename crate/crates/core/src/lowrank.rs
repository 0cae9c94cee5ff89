//! Low-rank factorisation primitives: truncated SVD, spectrum-based rank
//! selection, and recompaction of adapter factor pairs to a new rank.
//!
//! All decompositions run through a cyclic Jacobi eigensolver on the small
//! Gram matrix, which is deterministic (no seeding, no data-dependent
//! pivoting) and accurate far beyond the 1e-6 relative tolerance the rest of
//! the system asks of it.

use crate::mat::Mat;
use thiserror::Error;

/// Sweeps bound for the Jacobi eigensolver; convergence is quadratic and
/// even 64x64 inputs settle in well under ten sweeps.
const JACOBI_MAX_SWEEPS: usize = 100;
/// Off-diagonal mass (relative to the total norm) below which the
/// eigensolver stops.
const JACOBI_REL_TOL: f64 = 1e-14;
/// Singular values below `SIGMA_NEGLIGIBLE * sigma_max` are treated as zero
/// when forming left singular vectors.
const SIGMA_NEGLIGIBLE: f64 = 1e-13;

#[derive(Debug, Error, PartialEq)]
pub enum LowRankError {
    #[error("rank {k} out of range for a {rows}x{cols} matrix")]
    RankOutOfRange { k: usize, rows: usize, cols: usize },
    #[error("matrix contains a non-finite entry")]
    NonFinite,
    #[error("factor shapes {a_rows}x{a_cols} and {b_rows}x{b_cols} do not chain")]
    DimensionMismatch { a_rows: usize, a_cols: usize, b_rows: usize, b_cols: usize },
    #[error("target rank must be at least 1")]
    ZeroTargetRank,
}

/// Rank-k factorisation `g ~ u * diag(sigma) * v^T`.
///
/// `u` is n x k, `v` is d x k; both have orthonormal columns and `sigma` is
/// non-negative and non-increasing.
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub u: Mat,
    pub sigma: Vec<f64>,
    pub v: Mat,
}

impl SvdResult {
    /// Materialises `u * diag(sigma) * v^T`.
    pub fn reconstruct(&self) -> Mat {
        let k = self.sigma.len();
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for c in 0..k {
                *us.at_mut(r, c) *= self.sigma[c];
            }
        }
        us.matmul(&self.v.transpose())
    }
}

/// Eigenvalue spectrum of the uncentered second-moment matrix `g^T g`;
/// entry `j` equals the squared singular value `sigma_j^2` of `g`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    eigenvalues: Vec<f64>,
}

impl Spectrum {
    /// Sorts descending and clamps the tiny negatives a finite-precision
    /// eigensolver can produce.
    pub fn from_eigenvalues(mut eigenvalues: Vec<f64>) -> Self {
        for e in &mut eigenvalues {
            if *e < 0.0 {
                *e = 0.0;
            }
        }
        eigenvalues.sort_by(|a, b| b.partial_cmp(a).expect("non-finite eigenvalue"));
        Spectrum { eigenvalues }
    }

    /// Spectrum of a row-sample matrix: one eigenvalue per column of `g`.
    pub fn from_rows(g: &Mat) -> Result<Self, LowRankError> {
        if !g.is_finite() {
            return Err(LowRankError::NonFinite);
        }
        let (vals, _) = jacobi_eigh(&gram(g));
        Ok(Spectrum::from_eigenvalues(vals))
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn total_energy(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }
}

/// `g^T g`, accumulated in f64.
fn gram(g: &Mat) -> Mat {
    let d = g.cols();
    let mut s = Mat::zeros(d, d);
    for r in 0..g.rows() {
        let row = g.row(r);
        for i in 0..d {
            let gi = row[i];
            if gi == 0.0 {
                continue;
            }
            for j in i..d {
                *s.at_mut(i, j) += gi * row[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            *s.at_mut(i, j) = s.at(j, i);
        }
    }
    s
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Returns eigenvalues sorted descending and the matching orthonormal
/// eigenvectors as columns.  Fully deterministic for a given input.
pub(crate) fn jacobi_eigh(s: &Mat) -> (Vec<f64>, Mat) {
    assert_eq!(s.rows(), s.cols(), "matrix must be square");
    let n = s.rows();
    let mut a = s.clone();
    let mut v = Mat::identity(n);
    if n <= 1 {
        let vals = if n == 1 { vec![a.at(0, 0)] } else { vec![] };
        return (vals, v);
    }
    let scale = a.frob_norm().max(f64::MIN_POSITIVE);
    let tol = JACOBI_REL_TOL * scale;

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a.at(p, q).powi(2);
            }
        }
        if (2.0 * off).sqrt() <= tol {
            break;
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a.at(p, q);
                if apq.abs() <= tol * 1e-3 {
                    continue;
                }
                let app = a.at(p, p);
                let aqq = a.at(q, q);
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;

                *a.at_mut(p, p) = app - t * apq;
                *a.at_mut(q, q) = aqq + t * apq;
                *a.at_mut(p, q) = 0.0;
                *a.at_mut(q, p) = 0.0;
                for i in 0..n {
                    if i == p || i == q {
                        continue;
                    }
                    let aip = a.at(i, p);
                    let aiq = a.at(i, q);
                    *a.at_mut(i, p) = c * aip - sn * aiq;
                    *a.at_mut(p, i) = c * aip - sn * aiq;
                    *a.at_mut(i, q) = sn * aip + c * aiq;
                    *a.at_mut(q, i) = sn * aip + c * aiq;
                }
                for i in 0..n {
                    let vip = v.at(i, p);
                    let viq = v.at(i, q);
                    *v.at_mut(i, p) = c * vip - sn * viq;
                    *v.at_mut(i, q) = sn * vip + c * viq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.at(j, j).partial_cmp(&a.at(i, i)).expect("non-finite eigenvalue"));
    let vals = order.iter().map(|&i| a.at(i, i)).collect();
    let vecs = Mat::from_fn(n, n, |r, c| v.at(r, order[c]));
    (vals, vecs)
}

/// Best rank-k approximation of `g` in the Frobenius norm.
///
/// The squared residual `||g - u diag(sigma) v^T||_F^2` equals the energy in
/// the discarded singular values.  Requires `1 <= k <= min(n, d)` and finite
/// entries.
pub fn truncated_svd(g: &Mat, k: usize) -> Result<SvdResult, LowRankError> {
    let (n, d) = (g.rows(), g.cols());
    if k < 1 || k > n.min(d) {
        return Err(LowRankError::RankOutOfRange { k, rows: n, cols: d });
    }
    if !g.is_finite() {
        return Err(LowRankError::NonFinite);
    }
    if n >= d {
        Ok(svd_tall(g, k))
    } else {
        let r = svd_tall(&g.transpose(), k);
        Ok(SvdResult { u: r.v, sigma: r.sigma, v: r.u })
    }
}

/// SVD of a matrix with `rows >= cols` via the column Gram matrix.
fn svd_tall(g: &Mat, k: usize) -> SvdResult {
    let d = g.cols();
    let (vals, vecs) = jacobi_eigh(&gram(g));
    let sigma_full: Vec<f64> = vals.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let sigma_max = sigma_full.first().copied().unwrap_or(0.0);
    let cutoff = sigma_max * SIGMA_NEGLIGIBLE;

    let v = Mat::from_fn(d, k, |r, c| vecs.at(r, c));
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        if sigma_full[j] > cutoff && sigma_full[j] > 0.0 {
            let mut col = vec![0.0f64; g.rows()];
            for r in 0..g.rows() {
                let grow = g.row(r);
                let mut acc = 0.0;
                for i in 0..d {
                    acc += grow[i] * vecs.at(i, j);
                }
                col[r] = acc / sigma_full[j];
            }
            u_cols.push(col);
        } else {
            u_cols.push(orthonormal_completion(&u_cols, g.rows()));
        }
    }
    let u = Mat::from_fn(g.rows(), k, |r, c| u_cols[c][r]);
    SvdResult { u, sigma: sigma_full[..k].to_vec(), v }
}

/// Deterministically extends an orthonormal column set by one vector,
/// drawn from the standard basis and Gram-Schmidt-purged twice.
fn orthonormal_completion(existing: &[Vec<f64>], n: usize) -> Vec<f64> {
    for basis in 0..n {
        let mut w = vec![0.0f64; n];
        w[basis] = 1.0;
        for _ in 0..2 {
            for col in existing {
                let dot: f64 = col.iter().zip(&w).map(|(a, b)| a * b).sum();
                for (wi, ci) in w.iter_mut().zip(col) {
                    *wi -= dot * ci;
                }
            }
        }
        let norm: f64 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.5 {
            for wi in &mut w {
                *wi /= norm;
            }
            return w;
        }
    }
    unreachable!("fewer than n orthonormal columns always leave a basis vector unreduced");
}

/// Smallest rank whose leading eigenvalues capture at least an `alpha`
/// fraction of the total spectral energy.  An all-zero (or empty) spectrum
/// carries no directional information and maps to rank 1.
pub fn select_rank(spectrum: &Spectrum, alpha: f64) -> usize {
    debug_assert!(alpha > 0.0 && alpha <= 1.0, "alpha must lie in (0, 1]");
    let total = spectrum.total_energy();
    if total <= 0.0 || spectrum.is_empty() {
        return 1;
    }
    let mut cum = 0.0;
    for (i, e) in spectrum.eigenvalues().iter().enumerate() {
        cum += e;
        if cum / total >= alpha {
            return i + 1;
        }
    }
    spectrum.len()
}

/// Rewrites the factor pair `(a, b)` at a new rank.
///
/// Growing pads `a` with zero columns and `b` with zero rows, leaving the
/// product bitwise unchanged.  Shrinking returns the best Frobenius rank
/// `k_new` approximation of `a * b`, computed by projecting onto the top
/// right-singular subspace of the product.
pub fn recompact(a: &Mat, b: &Mat, k_new: usize) -> Result<(Mat, Mat), LowRankError> {
    if a.cols() != b.rows() {
        return Err(LowRankError::DimensionMismatch {
            a_rows: a.rows(),
            a_cols: a.cols(),
            b_rows: b.rows(),
            b_cols: b.cols(),
        });
    }
    if k_new == 0 {
        return Err(LowRankError::ZeroTargetRank);
    }
    let d = b.cols();
    if k_new > d {
        return Err(LowRankError::RankOutOfRange { k: k_new, rows: a.rows(), cols: d });
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(LowRankError::NonFinite);
    }
    let k = a.cols();

    if k_new == k {
        return Ok((a.clone(), b.clone()));
    }
    if k_new > k {
        let an = Mat::from_fn(a.rows(), k_new, |r, c| if c < k { a.at(r, c) } else { 0.0 });
        let bn = Mat::from_fn(k_new, d, |r, c| if r < k { b.at(r, c) } else { 0.0 });
        return Ok((an, bn));
    }

    // Shrink: with t = a*b, the Gram matrix t^T t = b^T (a^T a) b is only
    // d x d, so the projection basis comes cheap even for many active rows.
    let h = gram(a);
    let s = b.transpose().matmul(&h.matmul(b));
    let (_, vecs) = jacobi_eigh(&s);
    let vkn = Mat::from_fn(d, k_new, |r, c| vecs.at(r, c));
    let bn = vkn.transpose();
    let an = a.matmul(&b.matmul(&vkn));
    Ok((an, bn))
}
