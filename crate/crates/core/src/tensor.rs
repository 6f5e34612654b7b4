//! Kruskal-form tensor algebra.
//!
//! Every tensor is stored column-major (mode 1 varies fastest), so that
//! `vec(a⁽¹⁾ ∘ a⁽²⁾ ∘ … ∘ a⁽ᴺ⁾) = a⁽ᴺ⁾ ⊗ … ⊗ a⁽¹⁾`. The Hessian and Jacobian
//! code relies on this ordering.

use nalgebra::DMatrix;

use crate::error::{CribError, Result};
use crate::linalg::hadamard;

/// Dense N-way array, column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    dims: Vec<usize>,
    values: Vec<f64>,
}

impl DenseTensor {
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(CribError::InvalidArgument("tensor dimensions must be positive".into()));
        }
        let len: usize = dims.iter().product();
        if values.len() != len {
            return Err(CribError::DimensionMismatch(format!(
                "dims {:?} need {} values, got {}",
                dims,
                len,
                values.len()
            )));
        }
        Ok(Self { dims, values })
    }

    pub fn filled(dims: Vec<usize>, value: f64) -> Result<Self> {
        let len = dims.iter().product();
        Self::new(dims, vec![value; len])
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        Self::filled(dims, 0.0)
    }

    pub fn ones(dims: Vec<usize>) -> Result<Self> {
        Self::filled(dims, 1.0)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn linear_index(&self, index: &[usize]) -> usize {
        let mut lin = 0;
        let mut stride = 1;
        for (&i, &d) in index.iter().zip(&self.dims) {
            lin += i * stride;
            stride *= d;
        }
        lin
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.values[self.linear_index(index)]
    }

    /// The single entry of an order-0 tensor.
    pub fn scalar(&self) -> Option<f64> {
        if self.dims.is_empty() {
            Some(self.values[0])
        } else {
            None
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&x| x == 0.0 || x == 1.0)
    }

    pub(crate) fn scalar_tensor(value: f64) -> Self {
        Self { dims: Vec::new(), values: vec![value] }
    }
}

/// Iterates multi-indices in column-major order.
pub(crate) struct IndexIter {
    dims: Vec<usize>,
    current: Vec<usize>,
    done: bool,
}

impl IndexIter {
    pub fn new(dims: &[usize]) -> Self {
        Self {
            dims: dims.to_vec(),
            current: vec![0; dims.len()],
            done: dims.contains(&0),
        }
    }

    /// Advances to the next index; returns `false` once exhausted.
    pub fn advance(&mut self) -> bool {
        for (c, &d) in self.current.iter_mut().zip(&self.dims) {
            *c += 1;
            if *c < d {
                return true;
            }
            *c = 0;
        }
        self.done = true;
        false
    }

    pub fn index(&self) -> Option<&[usize]> {
        if self.done {
            None
        } else {
            Some(&self.current)
        }
    }
}

/// Factor matrices `A₁ … A_N` of a rank-R tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct KruskalModel {
    factors: Vec<DMatrix<f64>>,
}

impl KruskalModel {
    pub fn new(factors: Vec<DMatrix<f64>>) -> Result<Self> {
        if factors.len() < 3 {
            return Err(CribError::InvalidArgument(format!(
                "order must be at least 3, got {}",
                factors.len()
            )));
        }
        let rank = factors[0].ncols();
        if rank == 0 {
            return Err(CribError::InvalidArgument("rank must be at least 1".into()));
        }
        for (n, a) in factors.iter().enumerate() {
            if a.ncols() != rank {
                return Err(CribError::DimensionMismatch(format!(
                    "factor {} has {} columns, expected {}",
                    n + 1,
                    a.ncols(),
                    rank
                )));
            }
            if a.nrows() == 0 {
                return Err(CribError::InvalidArgument(format!("factor {} has no rows", n + 1)));
            }
            if a.iter().any(|x| !x.is_finite()) {
                return Err(CribError::InvalidArgument(format!(
                    "factor {} has non-finite entries",
                    n + 1
                )));
            }
        }
        Ok(Self { factors })
    }

    pub fn order(&self) -> usize {
        self.factors.len()
    }

    pub fn rank(&self) -> usize {
        self.factors[0].ncols()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.factors.iter().map(|a| a.nrows()).collect()
    }

    pub fn factor(&self, n: usize) -> &DMatrix<f64> {
        &self.factors[n]
    }

    pub fn factors(&self) -> &[DMatrix<f64>] {
        &self.factors
    }

    pub fn into_factors(self) -> Vec<DMatrix<f64>> {
        self.factors
    }

    /// Number of entries of `θ = [vec A₁; …; vec A_N]`.
    pub fn num_params(&self) -> usize {
        self.rank() * self.dims().iter().sum::<usize>()
    }

    /// Offsets of each `vec Aₙ` inside `θ`.
    pub fn param_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.order() + 1);
        let mut acc = 0;
        offsets.push(0);
        for a in &self.factors {
            acc += a.len();
            offsets.push(acc);
        }
        offsets
    }

    pub fn to_params(&self) -> Vec<f64> {
        self.factors.iter().flat_map(|a| a.as_slice().iter().copied()).collect()
    }

    pub fn from_params(dims: &[usize], rank: usize, theta: &[f64]) -> Result<Self> {
        let expected: usize = rank * dims.iter().sum::<usize>();
        if theta.len() != expected {
            return Err(CribError::DimensionMismatch(format!(
                "parameter vector has {} entries, expected {}",
                theta.len(),
                expected
            )));
        }
        let mut offset = 0;
        let factors = dims
            .iter()
            .map(|&d| {
                let m = DMatrix::from_column_slice(d, rank, &theta[offset..offset + d * rank]);
                offset += d * rank;
                m
            })
            .collect();
        Self::new(factors)
    }

    /// Rescales columns of `A₂ … A_N` to unit norm and moves the magnitudes into `A₁`.
    ///
    /// Sign convention: the first nonzero entry of every normalized column is
    /// nonnegative; a flipped sign is pushed into the matching column of `A₁`.
    /// Zero columns are left untouched.
    pub fn normalize(&self) -> Self {
        let mut factors = self.factors.clone();
        let rank = self.rank();
        for r in 0..rank {
            let mut scale = 1.0;
            for a in factors.iter_mut().skip(1) {
                let norm = a.column(r).norm();
                if norm == 0.0 {
                    continue;
                }
                let first = a.column(r).iter().copied().find(|&x| x != 0.0).unwrap_or(0.0);
                let sign = if first < 0.0 { -1.0 } else { 1.0 };
                a.column_mut(r).scale_mut(sign / norm);
                scale *= sign * norm;
            }
            factors[0].column_mut(r).scale_mut(scale);
        }
        Self { factors }
    }

    /// Moves mode `mode` to the front and column `column` to position 0.
    /// The remaining modes keep their relative order; columns `0` and `column` swap.
    pub fn permute_target(&self, mode: usize, column: usize) -> Result<Self> {
        if mode >= self.order() || column >= self.rank() {
            return Err(CribError::InvalidArgument(format!(
                "target ({}, {}) out of range for order {} rank {}",
                mode + 1,
                column + 1,
                self.order(),
                self.rank()
            )));
        }
        let mut order: Vec<usize> = vec![mode];
        order.extend((0..self.order()).filter(|&n| n != mode));
        let factors = order
            .into_iter()
            .map(|n| {
                let mut a = self.factors[n].clone();
                a.swap_columns(0, column);
                a
            })
            .collect();
        Ok(Self { factors })
    }

    /// Copy with column `r` of factor `n` multiplied by `lambda`.
    pub fn scale_column(&self, n: usize, r: usize, lambda: f64) -> Self {
        let mut factors = self.factors.clone();
        factors[n].column_mut(r).scale_mut(lambda);
        Self { factors }
    }
}

/// Builds the full tensor `Σᵣ a⁽¹⁾ᵣ ∘ … ∘ a⁽ᴺ⁾ᵣ`.
pub fn full_tensor(model: &KruskalModel) -> DenseTensor {
    let dims = model.dims();
    let rank = model.rank();
    let mut values = vec![0.0; dims.iter().product()];
    // Column-major Kronecker accumulation: start from mode 1 and grow outward.
    for r in 0..rank {
        let mut term: Vec<f64> = model.factor(0).column(r).iter().copied().collect();
        for a in &model.factors()[1..] {
            let col = a.column(r);
            let mut next = Vec::with_capacity(term.len() * col.len());
            for &c in col.iter() {
                next.extend(term.iter().map(|&t| t * c));
            }
            term = next;
        }
        for (v, t) in values.iter_mut().zip(term) {
            *v += t;
        }
    }
    DenseTensor { dims, values }
}

/// Column-wise Kronecker product: column `r` of the result is `aᵣ ⊗ bᵣ`.
pub fn khatri_rao(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(CribError::DimensionMismatch(format!(
            "khatri_rao needs equal column counts, got {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let (ra, rb) = (a.nrows(), b.nrows());
    Ok(DMatrix::from_fn(ra * rb, a.ncols(), |i, r| a[(i / rb, r)] * b[(i % rb, r)]))
}

/// `Ζₙ = A_N ⊙ … ⊙ A_{n+1} ⊙ A_{n−1} ⊙ … ⊙ A₁`, so that the mode-n unfolding is `Aₙ Ζₙᵀ`.
pub fn khatri_rao_except(model: &KruskalModel, skip: usize) -> DMatrix<f64> {
    let mut acc: Option<DMatrix<f64>> = None;
    for (n, a) in model.factors().iter().enumerate() {
        if n == skip {
            continue;
        }
        acc = Some(match acc {
            None => a.clone(),
            Some(prev) => khatri_rao(a, &prev).expect("factors share the rank"),
        });
    }
    acc.expect("order >= 3")
}

/// Grams `Cₙ = AₙᵀAₙ` and their Hadamard products `Γ_nm = ⊛_{k≠n,m} C_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramCache {
    grams: Vec<DMatrix<f64>>,
    gammas: Vec<DMatrix<f64>>,
}

impl GramCache {
    /// Builds the cache from gram matrices alone.
    pub fn from_grams(grams: Vec<DMatrix<f64>>) -> Result<Self> {
        if grams.len() < 3 {
            return Err(CribError::InvalidArgument(format!(
                "need at least 3 gram matrices, got {}",
                grams.len()
            )));
        }
        let rank = grams[0].nrows();
        for (n, c) in grams.iter().enumerate() {
            if c.nrows() != rank || c.ncols() != rank {
                return Err(CribError::DimensionMismatch(format!(
                    "gram {} is {}x{}, expected {}x{}",
                    n + 1,
                    c.nrows(),
                    c.ncols(),
                    rank,
                    rank
                )));
            }
        }
        let order = grams.len();
        let mut gammas = Vec::with_capacity(order * order);
        for n in 0..order {
            for m in 0..order {
                let mut g = DMatrix::from_element(rank, rank, 1.0);
                for (k, c) in grams.iter().enumerate() {
                    if k != n && k != m {
                        g = hadamard(&g, c);
                    }
                }
                gammas.push(g);
            }
        }
        Ok(Self { grams, gammas })
    }

    pub fn order(&self) -> usize {
        self.grams.len()
    }

    pub fn rank(&self) -> usize {
        self.grams[0].nrows()
    }

    pub fn gram(&self, n: usize) -> &DMatrix<f64> {
        &self.grams[n]
    }

    pub fn grams(&self) -> &[DMatrix<f64>] {
        &self.grams
    }

    /// `Γ_nm`; `gamma(n, n)` is `Γ_nn = ⊛_{k≠n} C_k`.
    pub fn gamma(&self, n: usize, m: usize) -> &DMatrix<f64> {
        &self.gammas[n * self.order() + m]
    }

    /// Pearson-style correlation `C[r,s] / sqrt(C[r,r] C[s,s])`.
    pub fn correlation(&self, n: usize, r: usize, s: usize) -> f64 {
        let c = &self.grams[n];
        let d = (c[(r, r)] * c[(s, s)]).sqrt();
        if d == 0.0 {
            0.0
        } else {
            c[(r, s)] / d
        }
    }
}

pub fn gram_cache(model: &KruskalModel) -> GramCache {
    let grams = model.factors().iter().map(|a| a.transpose() * a).collect();
    GramCache::from_grams(grams).expect("a valid model yields consistent grams")
}

/// Merges the given modes (0-based, mode 0 excluded) into one mode placed at
/// the position of the smallest merged mode. The merged column is the
/// Kronecker product with the later mode on the left, e.g. `a⁽⁴⁾ ⊗ a⁽³⁾`.
pub fn reshape_merge(model: &KruskalModel, modes: &[usize]) -> Result<KruskalModel> {
    let mut merged: Vec<usize> = modes.to_vec();
    merged.sort_unstable();
    merged.dedup();
    if merged.len() < 2 {
        return Err(CribError::InvalidArgument("merge needs at least two modes".into()));
    }
    if merged[0] == 0 {
        return Err(CribError::InvalidArgument("mode 1 cannot be merged".into()));
    }
    if *merged.last().unwrap() >= model.order() {
        return Err(CribError::InvalidArgument(format!(
            "merge mode {} out of range for order {}",
            merged.last().unwrap() + 1,
            model.order()
        )));
    }
    if model.order() - merged.len() + 1 < 3 {
        return Err(CribError::InvalidArgument(
            "merging would leave fewer than three modes".into(),
        ));
    }
    let mut block = model.factor(merged[0]).clone();
    for &m in &merged[1..] {
        block = khatri_rao(model.factor(m), &block)?;
    }
    let mut factors = Vec::with_capacity(model.order() - merged.len() + 1);
    for n in 0..model.order() {
        if n == merged[0] {
            factors.push(block.clone());
        } else if !merged.contains(&n) {
            factors.push(model.factor(n).clone());
        }
    }
    KruskalModel::new(factors)
}

/// Contracts `t` with one vector along every mode not listed in `skip`.
///
/// `vectors` holds one vector per non-skipped mode, in increasing mode order.
/// The result keeps the skipped modes in their original order; skipping no
/// mode yields an order-0 tensor (see [`DenseTensor::scalar`]).
pub fn tvprod_except(t: &DenseTensor, vectors: &[&[f64]], skip: &[usize]) -> Result<DenseTensor> {
    let order = t.order();
    if let Some(&bad) = skip.iter().find(|&&s| s >= order) {
        return Err(CribError::InvalidArgument(format!("skip mode {} out of range", bad + 1)));
    }
    let kept: Vec<usize> = (0..order).filter(|k| !skip.contains(k)).collect();
    if vectors.len() != kept.len() {
        return Err(CribError::DimensionMismatch(format!(
            "expected {} vectors, got {}",
            kept.len(),
            vectors.len()
        )));
    }
    // weight per mode, `None` for skipped modes
    let mut per_mode: Vec<Option<&[f64]>> = vec![None; order];
    for (&k, v) in kept.iter().zip(vectors) {
        if v.len() != t.dims()[k] {
            return Err(CribError::DimensionMismatch(format!(
                "vector for mode {} has length {}, expected {}",
                k + 1,
                v.len(),
                t.dims()[k]
            )));
        }
        per_mode[k] = Some(v);
    }
    let mut out_skip: Vec<usize> = skip.to_vec();
    out_skip.sort_unstable();
    out_skip.dedup();
    let out_dims: Vec<usize> = out_skip.iter().map(|&k| t.dims()[k]).collect();
    let mut out = vec![0.0; out_dims.iter().product()];

    let mut it = IndexIter::new(t.dims());
    let mut lin = 0;
    while let Some(idx) = it.index() {
        let x = t.values[lin];
        if x != 0.0 {
            let mut w = x;
            for (k, v) in per_mode.iter().enumerate() {
                if let Some(v) = v {
                    w *= v[idx[k]];
                }
            }
            let mut o = 0;
            let mut stride = 1;
            for &k in &out_skip {
                o += idx[k] * stride;
                stride *= t.dims()[k];
            }
            out[o] += w;
        }
        lin += 1;
        it.advance();
    }
    if out_dims.is_empty() {
        Ok(DenseTensor::scalar_tensor(out[0]))
    } else {
        DenseTensor::new(out_dims, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_model(dims: &[usize], rank: usize, seed: u64) -> KruskalModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let factors = dims
            .iter()
            .map(|&d| DMatrix::from_fn(d, rank, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        KruskalModel::new(factors).unwrap()
    }

    /// Naive entry: Σᵣ ∏ₙ Aₙ[iₙ, r].
    fn naive_entry(model: &KruskalModel, idx: &[usize]) -> f64 {
        (0..model.rank())
            .map(|r| idx.iter().enumerate().map(|(n, &i)| model.factor(n)[(i, r)]).product::<f64>())
            .sum()
    }

    #[test]
    fn rank_one_ones_gives_all_ones_tensor() {
        let ones = DMatrix::from_element(2, 1, 1.0);
        let m = KruskalModel::new(vec![ones.clone(), ones.clone(), ones]).unwrap();
        let t = full_tensor(&m);
        assert_eq!(t.dims(), &[2, 2, 2]);
        assert!(t.values().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn identity_factors_give_superdiagonal() {
        let eye = DMatrix::<f64>::identity(2, 2);
        let m = KruskalModel::new(vec![eye.clone(), eye.clone(), eye]).unwrap();
        let t = full_tensor(&m);
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    let expected = if i == j && j == k { 1.0 } else { 0.0 };
                    assert_eq!(t.get(&[i, j, k]), expected);
                }
            }
        }
    }

    #[test]
    fn full_tensor_matches_triple_loop() {
        let m = random_model(&[3, 4, 5], 3, 7);
        let t = full_tensor(&m);
        for i in 0..3 {
            for j in 0..4 {
                for k in 0..5 {
                    assert!((t.get(&[i, j, k]) - naive_entry(&m, &[i, j, k])).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn khatri_rao_examples() {
        let eye = DMatrix::<f64>::identity(2, 2);
        let kr = khatri_rao(&eye, &eye).unwrap();
        let mut expected = DMatrix::zeros(4, 2);
        expected[(0, 0)] = 1.0;
        expected[(3, 1)] = 1.0;
        assert_eq!(kr, expected);

        let a = DMatrix::from_element(3, 2, 1.0);
        let b = DMatrix::from_element(4, 2, 1.0);
        assert_eq!(khatri_rao(&a, &b).unwrap().shape(), (12, 2));
        assert!(khatri_rao(&a, &DMatrix::from_element(4, 3, 1.0)).is_err());
    }

    #[test]
    fn khatri_rao_gram_is_hadamard_of_grams() {
        let m = random_model(&[5, 5, 3], 3, 11);
        let (a, b) = (m.factor(0), m.factor(1));
        let kr = khatri_rao(a, b).unwrap();
        let lhs = kr.transpose() * &kr;
        let rhs = (a.transpose() * a).component_mul(&(b.transpose() * b));
        assert!((lhs - &rhs).norm() <= 1e-12 * rhs.norm());
    }

    #[test]
    fn gram_cache_orthonormal_is_identity() {
        let q = DMatrix::<f64>::identity(3, 2);
        let m = KruskalModel::new(vec![q.clone(), q.clone(), q]).unwrap();
        let g = gram_cache(&m);
        let eye = DMatrix::<f64>::identity(2, 2);
        for n in 0..3 {
            assert_eq!(g.gram(n), &eye);
            for k in 0..3 {
                assert_eq!(g.gamma(n, k), &eye);
            }
        }
    }

    #[test]
    fn gram_cache_rank_two_gamma11() {
        let (c2, c3) = (0.3_f64, -0.6_f64);
        let col = |c: f64| DMatrix::from_row_slice(2, 2, &[1.0, c, 0.0, (1.0 - c * c).sqrt()]);
        let a1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 0.9]);
        let m = KruskalModel::new(vec![a1, col(c2), col(c3)]).unwrap();
        let g = gram_cache(&m);
        let h1 = c2 * c3;
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, h1, h1, 1.0]);
        assert!((g.gamma(0, 0) - expected).norm() < 1e-14);
    }

    #[test]
    fn gamma_matches_loop_oracle() {
        let m = random_model(&[3, 4, 2, 5], 3, 5);
        let g = gram_cache(&m);
        let c: Vec<DMatrix<f64>> = m.factors().iter().map(|a| a.transpose() * a).collect();
        for n in 0..4 {
            for mm in 0..4 {
                for r in 0..3 {
                    for s in 0..3 {
                        let mut p = 1.0;
                        for (k, ck) in c.iter().enumerate() {
                            if k != n && k != mm {
                                p *= ck[(r, s)];
                            }
                        }
                        assert!((g.gamma(n, mm)[(r, s)] - p).abs() < 1e-13);
                    }
                }
            }
        }
    }

    #[test]
    fn gamma_nn_is_gram_of_khatri_rao_complement() {
        let m = random_model(&[3, 4, 2, 3], 2, 9);
        let g = gram_cache(&m);
        for n in 0..4 {
            let z = khatri_rao_except(&m, n);
            let zz = z.transpose() * &z;
            assert!((zz - g.gamma(n, n)).norm() <= 1e-12 * g.gamma(n, n).norm());
        }
    }

    #[test]
    fn mode_unfolding_uses_khatri_rao_complement() {
        let m = random_model(&[3, 4, 2], 2, 13);
        let t = full_tensor(&m);
        // mode-1 unfolding in column-major layout is simply a reshape
        let unf = DMatrix::from_column_slice(3, 8, t.values());
        let rebuilt = m.factor(0) * khatri_rao_except(&m, 0).transpose();
        assert!((unf - rebuilt).norm() < 1e-13);
    }

    #[test]
    fn normalize_preserves_tensor_and_sign_convention() {
        let m = random_model(&[3, 4, 5], 2, 21);
        let n = m.normalize();
        assert!((full_tensor(&m).frobenius_norm() - full_tensor(&n).frobenius_norm()).abs() < 1e-12);
        for (a, b) in full_tensor(&m).values().iter().zip(full_tensor(&n).values()) {
            assert!((a - b).abs() < 1e-13);
        }
        for f in &n.factors()[1..] {
            for r in 0..2 {
                assert!((f.column(r).norm() - 1.0).abs() < 1e-14);
                let first = f.column(r).iter().copied().find(|&x| x != 0.0).unwrap();
                assert!(first >= 0.0);
            }
        }
    }

    #[test]
    fn reshape_merge_correlations_multiply() {
        let c = [0.2, 0.5, 0.4, -0.7];
        let col = |c: f64| DMatrix::from_row_slice(3, 2, &[1.0, c, 0.0, (1.0 - c * c).sqrt(), 0.0, 0.0]);
        let m = KruskalModel::new(c.iter().map(|&x| col(x)).collect()).unwrap();
        let r = reshape_merge(&m, &[2, 3]).unwrap();
        assert_eq!(r.order(), 3);
        let g = gram_cache(&r);
        assert!((g.gram(0)[(0, 1)] - 0.2).abs() < 1e-15);
        assert!((g.gram(1)[(0, 1)] - 0.5).abs() < 1e-15);
        assert!((g.gram(2)[(0, 1)] - 0.4 * -0.7).abs() < 1e-15);
    }

    #[test]
    fn reshape_merge_rank_one_keeps_entries() {
        let m = random_model(&[2, 3, 2, 2], 1, 3);
        let r = reshape_merge(&m, &[2, 3]).unwrap();
        assert_eq!(r.rank(), 1);
        for (a, b) in full_tensor(&m).values().iter().zip(full_tensor(&r).values()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn reshape_merge_is_index_flattening() {
        let m = random_model(&[2, 3, 2, 3, 2], 2, 17);
        let r = reshape_merge(&m, &[3, 4]).unwrap();
        assert_eq!(r.dims(), vec![2, 3, 2, 6]);
        let (full, merged) = (full_tensor(&m), full_tensor(&r));
        let mut it = IndexIter::new(&m.dims());
        while let Some(idx) = it.index() {
            let flat = [idx[0], idx[1], idx[2], idx[3] + 3 * idx[4]];
            assert!((full.get(idx) - merged.get(&flat)).abs() < 1e-14);
            it.advance();
        }
    }

    #[test]
    fn reshape_merge_rejects_mode_one() {
        let m = random_model(&[2, 3, 2, 3], 2, 1);
        assert!(reshape_merge(&m, &[0, 1]).is_err());
        assert!(reshape_merge(&m, &[2]).is_err());
        let m3 = random_model(&[2, 3, 2], 2, 1);
        assert!(reshape_merge(&m3, &[1, 2]).is_err());
    }

    #[test]
    fn tvprod_ones() {
        let t = DenseTensor::ones(vec![2, 3, 4]).unwrap();
        let (v2, v3) = (vec![1.0; 3], vec![1.0; 4]);
        let r = tvprod_except(&t, &[&v2, &v3], &[0]).unwrap();
        assert_eq!(r.dims(), &[2]);
        assert_eq!(r.values(), &[12.0, 12.0]);
    }

    #[test]
    fn tvprod_unit_vectors_pick_entry() {
        let m = random_model(&[3, 2, 4], 2, 4);
        let t = full_tensor(&m);
        let e = |n: usize, i: usize| {
            let mut v = vec![0.0; n];
            v[i] = 1.0;
            v
        };
        let (a, b, c) = (e(3, 2), e(2, 1), e(4, 3));
        let s = tvprod_except(&t, &[&a, &b, &c], &[]).unwrap();
        assert_eq!(s.scalar().unwrap(), t.get(&[2, 1, 3]));
    }

    #[test]
    fn tvprod_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let vals: Vec<f64> = (0..27).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = DenseTensor::new(vec![3, 3, 3], vals).unwrap();
        let u: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = tvprod_except(&t, &[&u, &w], &[1]).unwrap();
        for j in 0..3 {
            let mut s = 0.0;
            for i in 0..3 {
                for k in 0..3 {
                    s += t.get(&[i, j, k]) * u[i] * w[k];
                }
            }
            assert!((r.values()[j] - s).abs() < 1e-14);
        }
        assert!(tvprod_except(&t, &[&u[..2], &w], &[1]).is_err());
    }

    #[test]
    fn params_round_trip() {
        let m = random_model(&[3, 2, 4], 2, 8);
        let back = KruskalModel::from_params(&m.dims(), 2, &m.to_params()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn permute_target_moves_mode_and_column() {
        let m = random_model(&[3, 4, 5], 3, 2);
        let p = m.permute_target(2, 1).unwrap();
        assert_eq!(p.dims(), vec![5, 3, 4]);
        assert_eq!(p.factor(0).column(0), m.factor(2).column(1));
        assert_eq!(p.factor(1).column(1), m.factor(0).column(0));
        assert!(m.permute_target(3, 0).is_err());
    }

    #[test]
    fn dense_tensor_validation() {
        assert!(DenseTensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(DenseTensor::new(vec![2, 0], vec![]).is_err());
        assert!(DenseTensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap().is_binary());
    }

    #[test]
    fn model_validation() {
        let a = DMatrix::from_element(2, 2, 1.0);
        let b = DMatrix::from_element(2, 3, 1.0);
        assert!(KruskalModel::new(vec![a.clone(), a.clone()]).is_err());
        assert!(KruskalModel::new(vec![a.clone(), a.clone(), b]).is_err());
    }
}
