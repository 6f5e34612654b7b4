//! Gauss-Newton Hessian `H = JᵀJ` of the CP model: structured, reduced and masked forms.
//!
//! Parameters are ordered as `θ = [vec A₁; …; vec A_N]`, so entry `Aₙ[i, r]`
//! lives at `offset(n) + r·Iₙ + i`.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{CribError, Result};
use crate::linalg::{dvec_left, vec_transpose_matrix, ScaledSymEigen};
use crate::tensor::{gram_cache, tvprod_except, DenseTensor, GramCache, KruskalModel};

/// Largest parameter count for which a dense Hessian is assembled.
pub const ORACLE_MAX_PARAMS: usize = 2000;

/// Structured pieces of `H = G + Z K Zᵀ` together with the assembled matrix.
#[derive(Debug, Clone)]
pub struct HessianBlocks {
    dims: Vec<usize>,
    rank: usize,
    offsets: Vec<usize>,
    cache: GramCache,
    factors: Vec<DMatrix<f64>>,
    p_r: DMatrix<f64>,
    matrix: DMatrix<f64>,
}

impl HessianBlocks {
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn cache(&self) -> &GramCache {
        &self.cache
    }

    /// The vec-transpose permutation `P_R`.
    pub fn p_r(&self) -> &DMatrix<f64> {
        &self.p_r
    }

    /// Assembled dense `H`.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    /// `K_nm = (1 − δ_nm) P_R dvec(Γ_nm)`.
    pub fn k_block(&self, n: usize, m: usize) -> DMatrix<f64> {
        let r2 = self.rank * self.rank;
        if n == m {
            DMatrix::zeros(r2, r2)
        } else {
            &self.p_r * DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(
                self.cache.gamma(n, m).as_slice(),
            ))
        }
    }

    /// Block-diagonal `G` with blocks `Γ_nn ⊗ I_{Iₙ}`.
    pub fn g_matrix(&self) -> DMatrix<f64> {
        let p = *self.offsets.last().unwrap();
        let mut g = DMatrix::zeros(p, p);
        for n in 0..self.order() {
            let block = self.cache.gamma(n, n).kronecker(&DMatrix::<f64>::identity(self.dims[n], self.dims[n]));
            g.view_mut((self.offsets[n], self.offsets[n]), block.shape()).copy_from(&block);
        }
        g
    }

    /// Block-diagonal `Z` with blocks `I_R ⊗ Aₙ`.
    pub fn z_matrix(&self) -> DMatrix<f64> {
        let p = *self.offsets.last().unwrap();
        let r2 = self.rank * self.rank;
        let mut z = DMatrix::zeros(p, self.order() * r2);
        for n in 0..self.order() {
            let block = DMatrix::<f64>::identity(self.rank, self.rank).kronecker(&self.factors[n]);
            z.view_mut((self.offsets[n], n * r2), block.shape()).copy_from(&block);
        }
        z
    }

    /// The full `NR² × NR²` matrix `K`.
    pub fn k_matrix(&self) -> DMatrix<f64> {
        let r2 = self.rank * self.rank;
        let n = self.order();
        let mut k = DMatrix::zeros(n * r2, n * r2);
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    k.view_mut((a * r2, b * r2), (r2, r2)).copy_from(&self.k_block(a, b));
                }
            }
        }
        k
    }

    /// `G + Z K Zᵀ` formed by explicit matrix products.
    pub fn assemble_structured(&self) -> DMatrix<f64> {
        let z = self.z_matrix();
        self.g_matrix() + &z * self.k_matrix() * z.transpose()
    }
}

fn offsets_of(dims: &[usize], rank: usize) -> Vec<usize> {
    let mut offsets = vec![0];
    for &d in dims {
        offsets.push(offsets.last().unwrap() + d * rank);
    }
    offsets
}

/// Locates parameter index `p` as `(mode, row, column)`.
fn locate(offsets: &[usize], dims: &[usize], p: usize) -> (usize, usize, usize) {
    let n = offsets.partition_point(|&o| o <= p) - 1;
    let local = p - offsets[n];
    (n, local % dims[n], local / dims[n])
}

/// Builds the Hessian of `model` from its gram cache.
///
/// The dense matrix is filled entrywise from
/// `H[(n,i,r),(n,j,s)] = δᵢⱼ Γ_nn[r,s]` and
/// `H[(n,i,r),(m,j,s)] = Aₙ[i,s] A_m[j,r] Γ_nm[r,s]` for `n ≠ m`,
/// which equals `G + Z K Zᵀ`; columns are filled in parallel.
pub fn build_hessian(cache: &GramCache, model: &KruskalModel) -> HessianBlocks {
    let dims = model.dims();
    let rank = model.rank();
    let offsets = offsets_of(&dims, rank);
    let p = *offsets.last().unwrap();
    let factors = model.factors().to_vec();
    let mut matrix = DMatrix::zeros(p, p);
    matrix
        .as_mut_slice()
        .par_chunks_mut(p)
        .enumerate()
        .for_each(|(col, out)| {
            let (m, j, s) = locate(&offsets, &dims, col);
            for (row, v) in out.iter_mut().enumerate() {
                let (n, i, r) = locate(&offsets, &dims, row);
                *v = if n == m {
                    if i == j {
                        cache.gamma(n, n)[(r, s)]
                    } else {
                        0.0
                    }
                } else {
                    factors[n][(i, s)] * factors[m][(j, r)] * cache.gamma(n, m)[(r, s)]
                };
            }
        });
    HessianBlocks {
        dims,
        rank,
        offsets,
        cache: cache.clone(),
        factors,
        p_r: vec_transpose_matrix(rank),
        matrix,
    }
}

/// Analytic Jacobian `∂ vec(𝒴) / ∂θ`, one column per parameter.
pub fn jacobian(model: &KruskalModel) -> DMatrix<f64> {
    let dims = model.dims();
    let rank = model.rank();
    let offsets = offsets_of(&dims, rank);
    let rows: usize = dims.iter().product();
    let p = *offsets.last().unwrap();
    let mut j = DMatrix::zeros(rows, p);
    j.as_mut_slice().par_chunks_mut(rows).enumerate().for_each(|(col, out)| {
        let (n, i, r) = locate(&offsets, &dims, col);
        let mut term = vec![1.0];
        for (k, a) in model.factors().iter().enumerate() {
            let mut next = Vec::with_capacity(term.len() * dims[k]);
            for q in 0..dims[k] {
                let c = if k == n {
                    if q == i {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    a[(q, r)]
                };
                next.extend(term.iter().map(|&t| t * c));
            }
            term = next;
        }
        out.copy_from_slice(&term);
    });
    j
}

/// Gauge-fixing maps `Eₙ` for modes `n ≥ 2`; mode 1 is never reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReductionMap {
    /// `Eₙ = I_R ⊗ Π⊥` over `a₁⁽ⁿ⁾`, with the row of largest `|a₁⁽ⁿ⁾|` removed.
    /// Degenerates when some column of `Aₙ` is orthogonal to `a₁⁽ⁿ⁾`.
    Projector,
    /// `Eₙ = I_R ⊗ [0 | I]`: drops the first coordinate of every column.
    RowDeletion,
    /// Per column, drops the coordinate where `|aᵣ⁽ⁿ⁾|` is largest.
    #[default]
    Pivot,
}

/// Dense `Eₙ` of shape `R(Iₙ−1) × RIₙ`.
fn reduction_block(a: &DMatrix<f64>, map: ReductionMap) -> DMatrix<f64> {
    let (rows, rank) = a.shape();
    let drop_row = |m: &DMatrix<f64>, k: usize| m.clone().remove_row(k);
    let argmax = |r: usize| {
        a.column(r)
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x.abs() > best.1 { (i, x.abs()) } else { best })
            .0
    };
    let eye = DMatrix::<f64>::identity(rows, rows);
    let mut e = DMatrix::zeros(rank * (rows - 1), rank * rows);
    for r in 0..rank {
        let block = match map {
            ReductionMap::Projector => {
                let a1 = a.column(0);
                let nrm2 = a1.norm_squared();
                let proj = if nrm2 > 0.0 { &eye - a1 * a1.transpose() / nrm2 } else { eye.clone() };
                drop_row(&proj, argmax(0))
            }
            ReductionMap::RowDeletion => drop_row(&eye, 0),
            ReductionMap::Pivot => drop_row(&eye, argmax(r)),
        };
        e.view_mut((r * (rows - 1), r * rows), block.shape()).copy_from(&block);
    }
    e
}

/// Reduced Hessian `H_E = E H Eᵀ` with its equilibrated eigendecomposition.
pub struct ReducedHessian {
    matrix: DMatrix<f64>,
    eigen: Option<ScaledSymEigen>,
}

impl ReducedHessian {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Reciprocal condition number of the equilibrated `H_E`, 0 when it has a zero diagonal.
    pub fn rcond(&self) -> f64 {
        self.eigen.as_ref().map_or(0.0, |e| e.rcond)
    }

    pub fn is_singular(&self) -> bool {
        self.eigen.as_ref().is_none_or(|e| e.is_singular())
    }

    /// Eigenvalues of `H_E` (not equilibrated), ascending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = nalgebra::SymmetricEigen::new(self.matrix.clone()).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// `CRLB(a₁) = σ² [H_E⁻¹]_{1:I₁,1:I₁}`, `None` when `H_E` is numerically singular.
    pub fn crlb_a1(&self, i1: usize, sigma2: f64) -> Option<DMatrix<f64>> {
        match &self.eigen {
            Some(e) if !e.is_singular() => Some(e.inverse_leading_block(i1) * sigma2),
            _ => None,
        }
    }
}

/// Applies the reduction `E` block by block.
pub fn reduce_hessian(h: &HessianBlocks, model: &KruskalModel, map: ReductionMap) -> ReducedHessian {
    let order = h.order();
    let rank = h.rank();
    let blocks: Vec<DMatrix<f64>> = (0..order)
        .map(|n| {
            if n == 0 {
                DMatrix::identity(rank * h.dims[0], rank * h.dims[0])
            } else {
                reduction_block(model.factor(n), map)
            }
        })
        .collect();
    let mut red_offsets = vec![0];
    for b in &blocks {
        red_offsets.push(red_offsets.last().unwrap() + b.nrows());
    }
    let size = *red_offsets.last().unwrap();
    let pieces: Vec<(usize, usize, DMatrix<f64>)> = (0..order)
        .flat_map(|n| (n..order).map(move |m| (n, m)))
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(n, m)| {
            let hb = h.matrix.view(
                (h.offsets[n], h.offsets[m]),
                (h.offsets[n + 1] - h.offsets[n], h.offsets[m + 1] - h.offsets[m]),
            );
            (n, m, &blocks[n] * hb * blocks[m].transpose())
        })
        .collect();
    let mut matrix = DMatrix::zeros(size, size);
    for (n, m, b) in pieces {
        matrix.view_mut((red_offsets[n], red_offsets[m]), b.shape()).copy_from(&b);
        if n != m {
            matrix.view_mut((red_offsets[m], red_offsets[n]), (b.ncols(), b.nrows())).copy_from(&b.transpose());
        }
    }
    let eigen = ScaledSymEigen::new(&matrix);
    ReducedHessian { matrix, eigen }
}

/// Hessian `J_Wᵀ J_W` of the masked model.
#[derive(Debug, Clone)]
pub struct MaskedHessian {
    mask: DenseTensor,
    matrix: DMatrix<f64>,
}

impl MaskedHessian {
    pub fn mask(&self) -> &DenseTensor {
        &self.mask
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }
}

pub(crate) fn validate_mask(model: &KruskalModel, mask: &DenseTensor) -> Result<()> {
    if mask.dims() != model.dims().as_slice() {
        return Err(CribError::DimensionMismatch(format!(
            "mask dims {:?} differ from model dims {:?}",
            mask.dims(),
            model.dims()
        )));
    }
    if let Some((index, &value)) = mask.values().iter().enumerate().find(|(_, &x)| x != 0.0 && x != 1.0) {
        return Err(CribError::NonBinaryMask { index, value });
    }
    Ok(())
}

/// Missing-data Hessian assembled from mask contractions.
///
/// With `bₖ = aᵣ⁽ᵏ⁾ ⊛ aₛ⁽ᵏ⁾`, diagonal blocks are `diag(𝒲 ×̄₋ₙ {b})`, and for
/// `n ≠ m` the `(r, s)` block has entries `Aₙ[i,s] A_m[j,r] (𝒲 ×̄₋{n,m} {b})[i,j]`.
/// That is the column pairing `aₛ⁽ⁿ⁾ aᵣ⁽ᵐ⁾ᵀ` produced by `J_Wᵀ J_W`.
///
/// An all-ones mask returns the complete-data Hessian of [`build_hessian`].
pub fn masked_hessian(model: &KruskalModel, mask: &DenseTensor) -> Result<MaskedHessian> {
    validate_mask(model, mask)?;
    if mask.values().iter().all(|&w| w == 1.0) {
        let matrix = build_hessian(&gram_cache(model), model).into_matrix();
        return Ok(MaskedHessian { mask: mask.clone(), matrix });
    }
    contracted_hessian(model, mask)
}

pub(crate) fn contracted_hessian(model: &KruskalModel, mask: &DenseTensor) -> Result<MaskedHessian> {
    validate_mask(model, mask)?;
    let dims = model.dims();
    let rank = model.rank();
    let order = model.order();
    let offsets = offsets_of(&dims, rank);
    let p = *offsets.last().unwrap();

    let pairs: Vec<(usize, usize)> = (0..rank).flat_map(|r| (r..rank).map(move |s| (r, s))).collect();
    // For each (r, s): diagonal contractions per mode, and pairwise contractions for n < m.
    type Contractions = (usize, usize, Vec<Vec<f64>>, Vec<(usize, usize, Vec<f64>)>);
    let contractions: Vec<Contractions> = pairs
        .into_par_iter()
        .map(|(r, s)| {
            let b: Vec<Vec<f64>> = model
                .factors()
                .iter()
                .map(|a| a.column(r).component_mul(&a.column(s)).iter().copied().collect())
                .collect();
            let diag = (0..order)
                .map(|n| {
                    let vs: Vec<&[f64]> = (0..order).filter(|&k| k != n).map(|k| b[k].as_slice()).collect();
                    tvprod_except(mask, &vs, &[n]).expect("validated dims").into_values()
                })
                .collect();
            let mut off = Vec::new();
            for n in 0..order {
                for m in n + 1..order {
                    let vs: Vec<&[f64]> =
                        (0..order).filter(|&k| k != n && k != m).map(|k| b[k].as_slice()).collect();
                    off.push((n, m, tvprod_except(mask, &vs, &[n, m]).expect("validated dims").into_values()));
                }
            }
            (r, s, diag, off)
        })
        .collect();

    let mut h = DMatrix::zeros(p, p);
    let idx = |n: usize, i: usize, r: usize| offsets[n] + r * dims[n] + i;
    for (r, s, diag, off) in &contractions {
        for (n, d) in diag.iter().enumerate() {
            for (i, &v) in d.iter().enumerate() {
                h[(idx(n, i, *r), idx(n, i, *s))] = v;
                h[(idx(n, i, *s), idx(n, i, *r))] = v;
            }
        }
        for (n, m, w) in off {
            let (an, am) = (model.factor(*n), model.factor(*m));
            // w is the In×Im contraction, column-major
            for j in 0..dims[*m] {
                for i in 0..dims[*n] {
                    let v = w[i + j * dims[*n]];
                    // (n,i,r),(m,j,s) and its transpose pairing (n,i,s),(m,j,r)
                    let x = an[(i, *s)] * am[(j, *r)] * v;
                    h[(idx(*n, i, *r), idx(*m, j, *s))] = x;
                    h[(idx(*m, j, *s), idx(*n, i, *r))] = x;
                    let y = an[(i, *r)] * am[(j, *s)] * v;
                    h[(idx(*n, i, *s), idx(*m, j, *r))] = y;
                    h[(idx(*m, j, *r), idx(*n, i, *s))] = y;
                }
            }
        }
    }
    Ok(MaskedHessian { mask: mask.clone(), matrix: h })
}

/// `J_W = dvec(vec 𝒲) J`.
pub fn masked_jacobian(model: &KruskalModel, mask: &DenseTensor) -> Result<DMatrix<f64>> {
    validate_mask(model, mask)?;
    let w = DMatrix::from_column_slice(mask.len(), 1, mask.values());
    Ok(dvec_left(&w, &jacobian(model)))
}

/// Reduces an arbitrary full-parameter Hessian (for example a masked one).
pub fn reduce_matrix(h: &DMatrix<f64>, model: &KruskalModel, map: ReductionMap) -> ReducedHessian {
    let dims = model.dims();
    let rank = model.rank();
    let offsets = offsets_of(&dims, rank);
    let order = model.order();
    let mut e = DMatrix::zeros(rank * (dims[0] + dims[1..].iter().map(|d| d - 1).sum::<usize>()), offsets[order]);
    let mut row = 0;
    for n in 0..order {
        let block = if n == 0 {
            DMatrix::identity(rank * dims[0], rank * dims[0])
        } else {
            reduction_block(model.factor(n), map)
        };
        e.view_mut((row, offsets[n]), block.shape()).copy_from(&block);
        row += block.nrows();
    }
    let matrix = &e * h * e.transpose();
    let eigen = ScaledSymEigen::new(&matrix);
    ReducedHessian { matrix, eigen }
}

/// Checks the dense-oracle size cap.
pub fn check_oracle_size(model: &KruskalModel) -> Result<()> {
    let rows = model.num_params();
    if rows > ORACLE_MAX_PARAMS {
        Err(CribError::TooLarge { rows, cap: ORACLE_MAX_PARAMS })
    } else {
        Ok(())
    }
}

/// Comma-separated rows at full precision, for debugging dumps.
pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::with_capacity(m.len() * 24);
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:e}", m[(i, j)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
