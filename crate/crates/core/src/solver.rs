//! CP fitting by damped Gauss-Newton (Levenberg-Marquardt) and by ALS, for
//! complete tensors and tensors with missing entries.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{CribError, Result};
use crate::hessian::{build_hessian, masked_hessian};
use crate::tensor::{full_tensor, gram_cache, DenseTensor, IndexIter, KruskalModel};

#[derive(Debug, Clone, PartialEq, Default)]
pub enum Init {
    #[default]
    Random,
    Given(KruskalModel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Stop once the relative residual `‖r‖/‖𝒴‖` changes by less than this.
    pub rel_fit_tol: f64,
    /// `μ₀ = mu0_scale · mean(diag H)` at the starting point.
    pub mu0_scale: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    pub init: Init,
    /// Random starts; the best fit is kept. Ignored for [`Init::Given`].
    pub starts: usize,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            rel_fit_tol: 1e-10,
            mu0_scale: 1e-3,
            damping_up: 10.0,
            damping_down: 1.0 / 3.0,
            init: Init::Random,
            starts: 3,
            seed: 0,
        }
    }
}

impl SolverConfig {
    fn validate(&self) -> Result<()> {
        if !(self.rel_fit_tol > 0.0) || !(self.mu0_scale > 0.0) {
            return Err(CribError::InvalidArgument("tolerances and damping must be positive".into()));
        }
        if !(self.damping_up > 1.0) || !(self.damping_down > 0.0 && self.damping_down < 1.0) {
            return Err(CribError::InvalidArgument("damping factors must satisfy up > 1 > down > 0".into()));
        }
        if self.starts == 0 || self.max_iters == 0 {
            return Err(CribError::InvalidArgument("starts and max_iters must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    /// Normalized estimate.
    pub model: KruskalModel,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `‖𝒴 − 𝒴̂‖² / M` over the `M` observed entries.
    pub sigma2: f64,
    /// `‖𝒴 − 𝒴̂‖² / (M − R(ΣIₙ − N + 1))`, `None` when the model has at least as many degrees of freedom as data.
    pub sigma2_unbiased: Option<f64>,
    /// Residual norm after every accepted step, starting with the initial point.
    pub residual_history: Vec<f64>,
}

/// Per-column angles between an aligned estimate and the truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AngularError {
    /// `angles[n][r]` in radians, within `[0, π/2]`.
    pub angles: Vec<Vec<f64>>,
    pub squared: Vec<Vec<f64>>,
    /// `(1 − cos²α)/cos²α`.
    pub dsr: Vec<Vec<f64>>,
    pub abs_cos: Vec<Vec<f64>>,
}

fn check_tensor(tensor: &DenseTensor, rank: usize, mask: Option<&DenseTensor>) -> Result<()> {
    if rank == 0 {
        return Err(CribError::InvalidArgument("rank must be at least 1".into()));
    }
    if tensor.order() < 3 {
        return Err(CribError::InvalidArgument(format!("order must be at least 3, got {}", tensor.order())));
    }
    if tensor.values().iter().any(|x| !x.is_finite()) {
        return Err(CribError::InvalidArgument("tensor has non-finite entries".into()));
    }
    if let Some(w) = mask {
        if w.dims() != tensor.dims() {
            return Err(CribError::DimensionMismatch(format!(
                "mask dims {:?} differ from tensor dims {:?}",
                w.dims(),
                tensor.dims()
            )));
        }
        if let Some((index, &value)) = w.values().iter().enumerate().find(|(_, &x)| x != 0.0 && x != 1.0) {
            return Err(CribError::NonBinaryMask { index, value });
        }
    }
    Ok(())
}

fn observed(mask: Option<&DenseTensor>, k: usize) -> bool {
    mask.is_none_or(|w| w.values()[k] != 0.0)
}

/// `𝒴 − 𝒴̂` with unobserved entries set to zero.
pub fn residual(tensor: &DenseTensor, model: &KruskalModel, mask: Option<&DenseTensor>) -> Vec<f64> {
    let fit = full_tensor(model);
    tensor
        .values()
        .iter()
        .zip(fit.values())
        .enumerate()
        .map(|(k, (y, m))| if observed(mask, k) { y - m } else { 0.0 })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Matricized-tensor times Khatri-Rao product for every mode:
/// `out[n][i, r] = Σ_{entries with iₙ = i} t · ∏_{k≠n} A_k[i_k, r]`.
pub fn mttkrp_all(values: &[f64], dims: &[usize], model: &KruskalModel) -> Vec<DMatrix<f64>> {
    let order = dims.len();
    let rank = model.rank();
    let mut out: Vec<DMatrix<f64>> = dims.iter().map(|&d| DMatrix::zeros(d, rank)).collect();
    let mut it = IndexIter::new(dims);
    let mut prefix = vec![1.0; order + 1];
    let mut suffix = vec![1.0; order + 1];
    let mut lin = 0;
    while let Some(idx) = it.index() {
        let x = values[lin];
        if x != 0.0 {
            for r in 0..rank {
                for k in 0..order {
                    prefix[k + 1] = prefix[k] * model.factor(k)[(idx[k], r)];
                }
                for k in (0..order).rev() {
                    suffix[k] = suffix[k + 1] * model.factor(k)[(idx[k], r)];
                }
                for n in 0..order {
                    out[n][(idx[n], r)] += x * prefix[n] * suffix[n + 1];
                }
            }
        }
        lin += 1;
        it.advance();
    }
    out
}

/// `Jᵀ r` for the (masked) residual, ordered like `θ`. It is minus the gradient of `½‖r‖²`.
pub fn gradient(tensor: &DenseTensor, model: &KruskalModel, mask: Option<&DenseTensor>) -> Vec<f64> {
    let r = residual(tensor, model, mask);
    mttkrp_all(&r, tensor.dims(), model)
        .iter()
        .flat_map(|g| g.as_slice().to_vec())
        .collect()
}

fn random_start(dims: &[usize], rank: usize, seed: u64, tensor: &DenseTensor, mask: Option<&DenseTensor>) -> KruskalModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factors =
        dims.iter().map(|&d| DMatrix::from_fn(d, rank, |_, _| StandardNormal.sample(&mut rng))).collect();
    let model = KruskalModel::new(factors).expect("valid shapes").normalize();
    // match the energy of the observed data
    let fit = full_tensor(&model);
    let (mut num, mut den) = (0.0, 0.0);
    for (k, (y, m)) in tensor.values().iter().zip(fit.values()).enumerate() {
        if observed(mask, k) {
            num += y * y;
            den += m * m;
        }
    }
    if den > 0.0 && num > 0.0 {
        let s = (num / den).sqrt();
        let mut factors = model.into_factors();
        factors[0] *= s;
        KruskalModel::new(factors).expect("valid shapes")
    } else {
        model
    }
}

fn starting_points(tensor: &DenseTensor, rank: usize, cfg: &SolverConfig, mask: Option<&DenseTensor>) -> Result<Vec<KruskalModel>> {
    match &cfg.init {
        Init::Given(m) => {
            if m.dims() != tensor.dims() || m.rank() != rank {
                return Err(CribError::DimensionMismatch(format!(
                    "initial model has dims {:?} and rank {}, expected {:?} and {}",
                    m.dims(),
                    m.rank(),
                    tensor.dims(),
                    rank
                )));
            }
            Ok(vec![m.clone()])
        }
        Init::Random => Ok((0..cfg.starts as u64)
            .map(|s| random_start(tensor.dims(), rank, cfg.seed.wrapping_add(s), tensor, mask))
            .collect()),
    }
}

fn finish(tensor: &DenseTensor, model: KruskalModel, mask: Option<&DenseTensor>, iterations: usize, converged: bool, history: Vec<f64>) -> FitResult {
    let model = model.normalize();
    let r = residual(tensor, &model, mask);
    let sse: f64 = r.iter().map(|x| x * x).sum();
    let m = mask.map_or(tensor.len(), |w| w.values().iter().filter(|&&x| x != 0.0).count());
    let dims = tensor.dims();
    let dof = model.rank() * (dims.iter().sum::<usize>() + 1 - dims.len());
    FitResult {
        residual_norm: sse.sqrt(),
        iterations,
        converged,
        sigma2: sse / m.max(1) as f64,
        sigma2_unbiased: (m > dof).then(|| sse / (m - dof) as f64),
        residual_history: history,
        model,
    }
}

fn best_of(results: Vec<Result<FitResult>>) -> Result<FitResult> {
    let mut best: Option<FitResult> = None;
    let mut last_err = None;
    for r in results {
        match r {
            Ok(fit) => {
                if best.as_ref().is_none_or(|b| fit.residual_norm < b.residual_norm) {
                    best = Some(fit);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.unwrap_or(CribError::SingularStep))
}

/// Damped Gauss-Newton fit.
///
/// Each iteration solves `(H + μI) δ = Jᵀr` with the structured Hessian (or the
/// masked one). Accepted steps are renormalized and shrink `μ`; rejected steps
/// grow it. A rejection at `μ > 1e12·μ₀` means no further progress is possible
/// and ends the run as converged.
pub fn fit_gn(tensor: &DenseTensor, rank: usize, cfg: &SolverConfig, mask: Option<&DenseTensor>) -> Result<FitResult> {
    check_tensor(tensor, rank, mask)?;
    cfg.validate()?;
    let starts = starting_points(tensor, rank, cfg, mask)?;
    let results: Vec<Result<FitResult>> = starts.into_par_iter().map(|m| gn_run(tensor, m, cfg, mask)).collect();
    best_of(results)
}

fn hessian_of(model: &KruskalModel, mask: Option<&DenseTensor>) -> Result<DMatrix<f64>> {
    Ok(match mask {
        Some(w) => masked_hessian(model, w)?.into_matrix(),
        None => build_hessian(&gram_cache(model), model).into_matrix(),
    })
}

fn gn_run(tensor: &DenseTensor, start: KruskalModel, cfg: &SolverConfig, mask: Option<&DenseTensor>) -> Result<FitResult> {
    let dims = tensor.dims().to_vec();
    let rank = start.rank();
    let y_norm = {
        let v: Vec<f64> =
            tensor.values().iter().enumerate().map(|(k, &y)| if observed(mask, k) { y } else { 0.0 }).collect();
        norm(&v).max(f64::MIN_POSITIVE)
    };
    let mut model = start;
    let mut r = residual(tensor, &model, mask);
    let mut f = norm(&r);
    let mut history = vec![f];
    let mut mu0 = None;
    let mut mu = 0.0;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iters {
        iterations += 1;
        if f / y_norm < 1e-15 {
            converged = true;
            break;
        }
        let h = hessian_of(&model, mask)?;
        let base = *mu0.get_or_insert_with(|| cfg.mu0_scale * h.diagonal().mean().max(f64::MIN_POSITIVE));
        if mu == 0.0 {
            mu = base;
        }
        let g: Vec<f64> =
            mttkrp_all(&r, &dims, &model).iter().flat_map(|m| m.as_slice().to_vec()).collect();
        let g = DVector::from_vec(g);
        let step = solve_damped(&h, &g, &mut mu, base)?;
        let theta: Vec<f64> = model.to_params().iter().zip(step.iter()).map(|(a, b)| a + b).collect();
        let candidate = KruskalModel::from_params(&dims, rank, &theta)?;
        let r_new = residual(tensor, &candidate, mask);
        let f_new = norm(&r_new);
        if f_new.is_finite() && f_new < f {
            let change = (f - f_new) / y_norm;
            model = candidate.normalize();
            r = residual(tensor, &model, mask);
            f = norm(&r).min(f_new);
            history.push(f);
            mu *= cfg.damping_down;
            if change < cfg.rel_fit_tol {
                converged = true;
                break;
            }
        } else {
            mu *= cfg.damping_up;
            if mu > 1e12 * base {
                converged = true;
                break;
            }
        }
    }
    Ok(finish(tensor, model, mask, iterations, converged, history))
}

/// Solves `(H + μI) δ = g`, raising `μ` up to `1e6·μ₀` if the factorization fails.
fn solve_damped(h: &DMatrix<f64>, g: &DVector<f64>, mu: &mut f64, mu0: f64) -> Result<DVector<f64>> {
    loop {
        let mut a = h.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += *mu;
        }
        if let Some(ch) = a.cholesky() {
            let x = ch.solve(g);
            if x.iter().all(|v| v.is_finite()) {
                return Ok(x);
            }
        }
        if *mu > 1e6 * mu0 {
            return Err(CribError::SingularStep);
        }
        *mu *= 10.0;
    }
}

/// Alternating least squares. With a mask, each row of `Aₙ` is a weighted
/// least-squares problem over the observed entries in its slice.
pub fn fit_als(tensor: &DenseTensor, rank: usize, cfg: &SolverConfig, mask: Option<&DenseTensor>) -> Result<FitResult> {
    check_tensor(tensor, rank, mask)?;
    cfg.validate()?;
    let starts = starting_points(tensor, rank, cfg, mask)?;
    let results: Vec<Result<FitResult>> = starts.into_par_iter().map(|m| Ok(als_run(tensor, m, cfg, mask))).collect();
    best_of(results)
}

/// Least-squares solve with an SVD fallback for singular normal equations.
fn solve_normal(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = a.clone().cholesky() {
        let x = ch.solve(b);
        if x.iter().all(|v| v.is_finite()) {
            return x;
        }
    }
    a.clone().svd(true, true).solve(b, 1e-12 * a.norm()).unwrap_or_else(|_| DMatrix::zeros(b.nrows(), b.ncols()))
}

fn als_run(tensor: &DenseTensor, start: KruskalModel, cfg: &SolverConfig, mask: Option<&DenseTensor>) -> FitResult {
    let dims = tensor.dims().to_vec();
    let order = dims.len();
    let y_obs: Vec<f64> =
        tensor.values().iter().enumerate().map(|(k, &y)| if observed(mask, k) { y } else { 0.0 }).collect();
    let y_norm = norm(&y_obs).max(f64::MIN_POSITIVE);
    let mut factors = start.into_factors();
    let mut f = norm(&residual(tensor, &KruskalModel::new(factors.clone()).expect("valid"), mask));
    let mut history = vec![f];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iters {
        iterations += 1;
        for n in 0..order {
            let model = KruskalModel::new(factors.clone()).expect("valid");
            factors[n] = match mask {
                None => {
                    let rhs = mttkrp_all(&y_obs, &dims, &model).swap_remove(n);
                    let cache = gram_cache(&model);
                    solve_normal(cache.gamma(n, n), &rhs.transpose()).transpose()
                }
                Some(w) => masked_rows(&y_obs, w, &dims, &model, n),
            };
        }
        let model = KruskalModel::new(factors.clone()).expect("valid").normalize();
        factors = model.clone().into_factors();
        let f_new = norm(&residual(tensor, &model, mask));
        history.push(f_new);
        let change = (f - f_new).abs() / y_norm;
        f = f_new;
        if change < cfg.rel_fit_tol || f / y_norm < 1e-15 {
            converged = true;
            break;
        }
    }
    finish(tensor, KruskalModel::new(factors).expect("valid"), mask, iterations, converged, history)
}

fn masked_rows(y: &[f64], w: &DenseTensor, dims: &[usize], model: &KruskalModel, n: usize) -> DMatrix<f64> {
    let rank = model.rank();
    let mut lhs: Vec<DMatrix<f64>> = vec![DMatrix::zeros(rank, rank); dims[n]];
    let mut rhs: Vec<DVector<f64>> = vec![DVector::zeros(rank); dims[n]];
    let mut z = DVector::zeros(rank);
    let mut it = IndexIter::new(dims);
    let mut lin = 0;
    while let Some(idx) = it.index() {
        if w.values()[lin] != 0.0 {
            for r in 0..rank {
                z[r] = (0..dims.len()).filter(|&k| k != n).map(|k| model.factor(k)[(idx[k], r)]).product();
            }
            let i = idx[n];
            lhs[i] += &z * z.transpose();
            rhs[i] += &z * y[lin];
        }
        lin += 1;
        it.advance();
    }
    let mut a = DMatrix::zeros(dims[n], rank);
    for i in 0..dims[n] {
        let row = solve_normal(&lhs[i], &DMatrix::from_column_slice(rank, 1, rhs[i].as_slice()));
        for r in 0..rank {
            a[(i, r)] = row[(r, 0)];
        }
    }
    a
}

fn abs_cos(a: nalgebra::DVectorView<'_, f64>, b: nalgebra::DVectorView<'_, f64>) -> Option<f64> {
    let d = a.norm() * b.norm();
    (d > 0.0).then(|| (a.dot(&b).abs() / d).min(1.0))
}

/// `scores[p][q] = ∏ₙ |cos(â_p⁽ⁿ⁾, a_q⁽ⁿ⁾)|`.
pub fn congruence(estimate: &KruskalModel, truth: &KruskalModel) -> Vec<Vec<f64>> {
    let rank = truth.rank();
    (0..rank)
        .map(|p| {
            (0..rank)
                .map(|q| {
                    (0..truth.order())
                        .map(|n| abs_cos(estimate.factor(n).column(p), truth.factor(n).column(q)).unwrap_or(0.0))
                        .product()
                })
                .collect()
        })
        .collect()
}

/// Greedy column matching on the congruence products. Returns the estimate with
/// its columns in the truth's order, normalized.
pub fn align(estimate: &KruskalModel, truth: &KruskalModel) -> Result<KruskalModel> {
    if estimate.dims() != truth.dims() || estimate.rank() != truth.rank() {
        return Err(CribError::DimensionMismatch("estimate and truth differ in shape".into()));
    }
    let rank = truth.rank();
    let scores = congruence(estimate, truth);
    let mut used_est = vec![false; rank];
    let mut used_truth = vec![false; rank];
    let mut perm = vec![0; rank];
    for _ in 0..rank {
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for (p, row) in scores.iter().enumerate() {
            for (q, &s) in row.iter().enumerate() {
                if !used_est[p] && !used_truth[q] && s > best.0 {
                    best = (s, p, q);
                }
            }
        }
        used_est[best.1] = true;
        used_truth[best.2] = true;
        perm[best.2] = best.1;
    }
    let factors = estimate
        .factors()
        .iter()
        .map(|a| DMatrix::from_fn(a.nrows(), rank, |i, q| a[(i, perm[q])]))
        .collect();
    Ok(KruskalModel::new(factors)?.normalize())
}

/// Angles `αᵣ⁽ⁿ⁾` with `cos α = |aᵀâ|/(‖a‖‖â‖)`.
pub fn angular_errors(aligned: &KruskalModel, truth: &KruskalModel) -> Result<AngularError> {
    if aligned.dims() != truth.dims() || aligned.rank() != truth.rank() {
        return Err(CribError::DimensionMismatch("estimate and truth differ in shape".into()));
    }
    let mut out = AngularError { angles: vec![], squared: vec![], dsr: vec![], abs_cos: vec![] };
    for n in 0..truth.order() {
        let mut cosines = Vec::with_capacity(truth.rank());
        for r in 0..truth.rank() {
            let c = abs_cos(aligned.factor(n).column(r), truth.factor(n).column(r))
                .ok_or(CribError::ZeroNormColumn { mode: n + 1, column: r + 1 })?;
            cosines.push(c);
        }
        let angles: Vec<f64> = cosines.iter().map(|c| c.acos()).collect();
        out.squared.push(angles.iter().map(|a| a * a).collect());
        out.dsr.push(cosines.iter().map(|c| (1.0 - c * c) / (c * c)).collect());
        out.angles.push(angles);
        out.abs_cos.push(cosines);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_model(dims: &[usize], rank: usize, seed: u64) -> KruskalModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let factors = dims
            .iter()
            .map(|&d| DMatrix::from_fn(d, rank, |_, _| StandardNormal.sample(&mut rng)))
            .collect();
        KruskalModel::new(factors).unwrap().normalize()
    }

    fn max_angle(est: &KruskalModel, truth: &KruskalModel) -> f64 {
        let e = angular_errors(&align(est, truth).unwrap(), truth).unwrap();
        e.angles.iter().flatten().cloned().fold(0.0, f64::max)
    }

    #[test]
    fn gn_recovers_noiseless_rank2() {
        let mut ok = 0;
        for seed in 0..20 {
            let truth = random_model(&[5, 5, 5], 2, 100 + seed);
            let t = full_tensor(&truth);
            let cfg = SolverConfig { seed, ..Default::default() };
            let fit = fit_gn(&t, 2, &cfg, None).unwrap();
            if fit.residual_norm < 1e-8 * t.frobenius_norm() {
                ok += 1;
            }
        }
        assert!(ok >= 19, "{ok}/20");
    }

    #[test]
    fn gn_rank_one_all_ones() {
        let t = DenseTensor::ones(vec![2, 2, 2]).unwrap();
        let fit = fit_gn(&t, 1, &SolverConfig::default(), None).unwrap();
        let ones = DMatrix::from_element(2, 1, 1.0);
        let truth = KruskalModel::new(vec![ones.clone(), ones.clone(), ones]).unwrap();
        assert!(max_angle(&fit.model, &truth) < 1e-6);
    }

    #[test]
    fn gn_residual_is_monotone() {
        let truth = random_model(&[4, 5, 3], 3, 5);
        let mut t = full_tensor(&truth);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in t.values_mut() {
            *v += 0.01 * rng.random_range(-1.0..1.0);
        }
        let fit = fit_gn(&t, 3, &SolverConfig { starts: 1, ..Default::default() }, None).unwrap();
        for w in fit.residual_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn masked_all_ones_follows_same_path() {
        let truth = random_model(&[4, 3, 5], 2, 9);
        let mut t = full_tensor(&truth);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for v in t.values_mut() {
            *v += 0.05 * rng.random_range(-1.0..1.0);
        }
        let w = DenseTensor::ones(t.dims().to_vec()).unwrap();
        let cfg = SolverConfig { starts: 1, seed: 4, max_iters: 60, ..Default::default() };
        let a = fit_gn(&t, 2, &cfg, None).unwrap();
        let b = fit_gn(&t, 2, &cfg, Some(&w)).unwrap();
        assert_eq!(a.residual_history.len(), b.residual_history.len());
        for (x, y) in a.residual_history.iter().zip(&b.residual_history) {
            assert!((x - y).abs() <= 1e-12 * x.max(1.0));
        }
    }

    #[test]
    fn masked_out_entries_do_not_matter() {
        let truth = random_model(&[4, 4, 3], 2, 11);
        let t = full_tensor(&truth);
        let mut w = DenseTensor::ones(t.dims().to_vec()).unwrap();
        for k in (0..t.len()).step_by(4) {
            w.values_mut()[k] = 0.0;
        }
        let mut t2 = t.clone();
        for k in (0..t.len()).step_by(4) {
            t2.values_mut()[k] = 1e3 * (k as f64 + 1.0);
        }
        let cfg = SolverConfig { starts: 1, seed: 3, max_iters: 40, ..Default::default() };
        let a = fit_gn(&t, 2, &cfg, Some(&w)).unwrap();
        let b = fit_gn(&t2, 2, &cfg, Some(&w)).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.residual_history, b.residual_history);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = random_model(&[3, 4, 2], 2, 21);
        let t = full_tensor(&random_model(&[3, 4, 2], 2, 22));
        let mut w = DenseTensor::ones(t.dims().to_vec()).unwrap();
        w.values_mut()[3] = 0.0;
        for mask in [None, Some(&w)] {
            let g = gradient(&t, &m, mask);
            let theta = m.to_params();
            let obj = |th: &[f64]| {
                let mm = KruskalModel::from_params(&m.dims(), 2, th).unwrap();
                0.5 * residual(&t, &mm, mask).iter().map(|x| x * x).sum::<f64>()
            };
            let step = 1e-6;
            let fd: Vec<f64> = (0..theta.len())
                .map(|p| {
                    let (mut a, mut b) = (theta.clone(), theta.clone());
                    a[p] += step;
                    b[p] -= step;
                    -(obj(&a) - obj(&b)) / (2.0 * step)
                })
                .collect();
            let err: f64 = g.iter().zip(&fd).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            assert!(err <= 1e-5 * norm(&g));
        }
    }

    #[test]
    fn als_orthogonal_model() {
        let q = |rows: usize| DMatrix::from_fn(rows, 2, |i, j| if i == j { 1.0 } else { 0.0 });
        let truth = KruskalModel::new(vec![q(3) * 2.0, q(4), q(3)]).unwrap();
        let t = full_tensor(&truth);
        let cfg = SolverConfig { max_iters: 200, ..Default::default() };
        let fit = fit_als(&t, 2, &cfg, None).unwrap();
        assert!(fit.residual_norm < 1e-8 * t.frobenius_norm());
    }

    #[test]
    fn als_agrees_with_gn() {
        let truth = random_model(&[4, 5, 4], 2, 30);
        let t = full_tensor(&truth);
        let cfg = SolverConfig { max_iters: 2000, rel_fit_tol: 1e-14, ..Default::default() };
        let a = fit_als(&t, 2, &cfg, None).unwrap();
        let g = fit_gn(&t, 2, &SolverConfig::default(), None).unwrap();
        let a_al = align(&a.model, &g.model).unwrap();
        assert!(max_angle(&a_al, &g.model) < 1e-5);
    }

    #[test]
    fn als_masked_recovers() {
        let truth = random_model(&[5, 5, 5], 2, 31);
        let t = full_tensor(&truth);
        let mut w = DenseTensor::ones(t.dims().to_vec()).unwrap();
        for k in (0..t.len()).step_by(7) {
            w.values_mut()[k] = 0.0;
        }
        let cfg = SolverConfig { max_iters: 2000, rel_fit_tol: 1e-14, ..Default::default() };
        let fit = fit_als(&t, 2, &cfg, Some(&w)).unwrap();
        assert!(max_angle(&fit.model, &truth) < 1e-4);
    }

    #[test]
    fn over_rank_fit_does_not_panic() {
        let t = full_tensor(&random_model(&[2, 2, 2], 3, 2));
        let cfg = SolverConfig { max_iters: 50, ..Default::default() };
        let fit = fit_als(&t, 3, &cfg, None).unwrap();
        assert!(fit.residual_norm.is_finite());
    }

    #[test]
    fn align_swapped_and_flipped_columns() {
        let truth = random_model(&[3, 4, 5], 3, 40);
        let swapped: Vec<DMatrix<f64>> = truth
            .factors()
            .iter()
            .map(|a| {
                let mut b = a.clone();
                b.swap_columns(0, 2);
                b.column_mut(1).neg_mut();
                b
            })
            .collect();
        let est = KruskalModel::new(swapped).unwrap();
        let aligned = align(&est, &truth).unwrap();
        let e = angular_errors(&aligned, &truth).unwrap();
        assert!(e.angles.iter().flatten().all(|&a| a < 1e-7));
    }

    #[test]
    fn align_matches_exhaustive_search() {
        fn perms(n: usize) -> Vec<Vec<usize>> {
            if n == 0 {
                return vec![vec![]];
            }
            let mut out = vec![];
            for p in perms(n - 1) {
                for pos in 0..n {
                    let mut q = p.clone();
                    q.insert(pos, n - 1);
                    out.push(q);
                }
            }
            out
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for rank in 2..=5 {
            let truth = random_model(&[4, 5, 6], rank, rank as u64);
            let order: Vec<usize> = {
                let mut o: Vec<usize> = (0..rank).collect();
                o.rotate_left(1);
                o
            };
            let est = KruskalModel::new(
                truth
                    .factors()
                    .iter()
                    .map(|a| DMatrix::from_fn(a.nrows(), rank, |i, q| a[(i, order[q])] + 0.05 * rng.random_range(-1.0..1.0)))
                    .collect(),
            )
            .unwrap();
            let scores = congruence(&est, &truth);
            let best = perms(rank)
                .into_iter()
                .max_by(|p, q| {
                    let s = |pp: &Vec<usize>| (0..rank).map(|t| scores[pp[t]][t]).sum::<f64>();
                    s(p).total_cmp(&s(q))
                })
                .unwrap();
            let brute = KruskalModel::new(
                est.factors().iter().map(|a| DMatrix::from_fn(a.nrows(), rank, |i, t| a[(i, best[t])])).collect(),
            )
            .unwrap()
            .normalize();
            assert_eq!(align(&est, &truth).unwrap(), brute);
        }
    }

    #[test]
    fn angle_geometry() {
        let a = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let b = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let truth = KruskalModel::new(vec![a.clone(), a.clone(), a.clone()]).unwrap();
        let est = KruskalModel::new(vec![b, a.clone(), a]).unwrap();
        let e = angular_errors(&est, &truth).unwrap();
        assert!((e.angles[0][0] - std::f64::consts::FRAC_PI_4).abs() < 1e-15);
        assert!((e.dsr[0][0] - 1.0).abs() < 1e-15);
        assert_eq!(e.angles[1][0], 0.0);
        let zero = KruskalModel::new(vec![DMatrix::zeros(2, 1), DMatrix::from_element(2, 1, 1.0), DMatrix::from_element(2, 1, 1.0)]).unwrap();
        assert!(angular_errors(&zero, &truth).is_err());
    }

    #[test]
    fn dsr_small_angle() {
        for k in 1..=50 {
            let alpha = 0.001 * k as f64;
            let c = alpha.cos();
            let dsr = (1.0 - c * c) / (c * c);
            assert!((dsr / (alpha * alpha) - 1.0).abs() < 0.01);
        }
    }

    #[test]
    fn sigma2_estimates() {
        let truth = random_model(&[6, 6, 6], 2, 50);
        let clean = full_tensor(&truth);
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let sigma = 0.01;
        let mut t = clean.clone();
        for v in t.values_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += sigma * z;
        }
        let cfg = SolverConfig { init: Init::Given(truth), ..Default::default() };
        let fit = fit_gn(&t, 2, &cfg, None).unwrap();
        let unbiased = fit.sigma2_unbiased.unwrap();
        assert!(fit.sigma2 < unbiased);
        assert!((unbiased / (sigma * sigma) - 1.0).abs() < 0.3);
    }

    #[test]
    fn invalid_inputs() {
        let t = DenseTensor::ones(vec![2, 2, 2]).unwrap();
        assert!(fit_gn(&t, 0, &SolverConfig::default(), None).is_err());
        let w = DenseTensor::ones(vec![2, 2, 3]).unwrap();
        assert!(fit_gn(&t, 1, &SolverConfig::default(), Some(&w)).is_err());
        let bad = SolverConfig { damping_up: 0.5, ..Default::default() };
        assert!(fit_als(&t, 1, &bad, None).is_err());
    }
}
