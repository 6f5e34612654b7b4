//! Small dense helpers shared by the Hessian, CRIB and solver modules.

use nalgebra::{DMatrix, SymmetricEigen};

/// Reciprocal condition number below which a solve is declared singular.
pub const RCOND_CUTOFF: f64 = 1e-14;

pub(crate) fn hadamard(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.component_mul(b)
}

pub(crate) fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// LU inverse together with the 1-norm reciprocal condition number.
///
/// Returns `None` when the factorization breaks down or the inverse is not finite.
pub(crate) fn inverse_with_rcond(m: &DMatrix<f64>) -> Option<(DMatrix<f64>, f64)> {
    let inv = m.clone().lu().try_inverse()?;
    if inv.iter().any(|x| !x.is_finite()) {
        return None;
    }
    let denom = norm1(m) * norm1(&inv);
    let rcond = if denom > 0.0 { 1.0 / denom } else { 0.0 };
    Some((inv, rcond))
}

/// Inverse of a general square matrix, `None` when its rcond is below [`RCOND_CUTOFF`].
pub(crate) fn checked_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    match inverse_with_rcond(m) {
        Some((inv, rcond)) if rcond >= RCOND_CUTOFF => Some(inv),
        _ => None,
    }
}

/// Eigendecomposition of a symmetric positive semidefinite matrix after
/// symmetric Jacobi equilibration `D^{-1/2} M D^{-1/2}`.
pub(crate) struct ScaledSymEigen {
    pub inv_sqrt_diag: Vec<f64>,
    pub eigen: SymmetricEigen<f64, nalgebra::Dyn>,
    pub rcond: f64,
}

impl ScaledSymEigen {
    pub fn new(m: &DMatrix<f64>) -> Option<Self> {
        let n = m.nrows();
        let mut inv_sqrt_diag = Vec::with_capacity(n);
        for i in 0..n {
            let d = m[(i, i)];
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            inv_sqrt_diag.push(1.0 / d.sqrt());
        }
        let scaled = DMatrix::from_fn(n, n, |i, j| {
            0.5 * (m[(i, j)] + m[(j, i)]) * inv_sqrt_diag[i] * inv_sqrt_diag[j]
        });
        let eigen = SymmetricEigen::new(scaled);
        let max = eigen.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = eigen.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        let rcond = if max > 0.0 { (min / max).max(0.0) } else { 0.0 };
        Some(Self { inv_sqrt_diag, eigen, rcond })
    }

    pub fn is_singular(&self) -> bool {
        !(self.rcond >= RCOND_CUTOFF)
    }

    /// Leading `k×k` block of the inverse of the original matrix.
    pub fn inverse_leading_block(&self, k: usize) -> DMatrix<f64> {
        let v = &self.eigen.eigenvectors;
        let lam = &self.eigen.eigenvalues;
        DMatrix::from_fn(k, k, |i, j| {
            let s: f64 = (0..lam.len()).map(|p| v[(i, p)] * v[(j, p)] / lam[p]).sum();
            s * self.inv_sqrt_diag[i] * self.inv_sqrt_diag[j]
        })
    }

}

/// Numerical rank: singular values above `rel_tol * sigma_max`.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}

/// Index map of the vec-transpose permutation `P_R`: `(P_R x)[k] = x[swap(k)]`
/// where `k = r*R + p` is sent to `p*R + r`. `P_R` is symmetric and an involution.
pub(crate) fn vec_transpose_index(rank: usize, k: usize) -> usize {
    let (r, p) = (k / rank, k % rank);
    p * rank + r
}

/// `P_R` as a dense 0/1 matrix.
pub fn vec_transpose_matrix(rank: usize) -> DMatrix<f64> {
    let n = rank * rank;
    DMatrix::from_fn(n, n, |i, j| {
        if vec_transpose_index(rank, i) == j {
            1.0
        } else {
            0.0
        }
    })
}

/// `P_R · M` without materializing `P_R`.
pub(crate) fn permute_rows(rank: usize, m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(vec_transpose_index(rank, i), j)])
}

/// `M · P_R` without materializing `P_R`.
pub(crate) fn permute_cols(rank: usize, m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, vec_transpose_index(rank, j))])
}

/// `dvec(D) · M`: scales row `k` of `M` by the `k`-th column-major entry of `D`.
pub(crate) fn dvec_left(d: &DMatrix<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    let v = d.as_slice();
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| v[i] * m[(i, j)])
}

/// `M · dvec(D)`.
pub(crate) fn dvec_right(m: &DMatrix<f64>, d: &DMatrix<f64>) -> DMatrix<f64> {
    let v = d.as_slice();
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * v[j])
}

/// Symmetric square root factor `F` (rows = rank) with `Fᵀ F = M` for a PSD `M`.
/// Eigenvalues in `[-tol·λmax, 0)` are clamped to zero; more negative ones are rejected.
pub(crate) fn psd_factor(m: &DMatrix<f64>, tol: f64) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    let sym = DMatrix::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let mut f = DMatrix::zeros(n, n);
    for p in 0..n {
        let lam = eig.eigenvalues[p];
        if lam < -tol * max.max(1.0) {
            return None;
        }
        let s = lam.max(0.0).sqrt();
        for j in 0..n {
            f[(p, j)] = s * eig.eigenvectors[(j, p)];
        }
    }
    Some(f)
}
