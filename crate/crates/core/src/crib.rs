//! CRIB on the first column of the first factor, computed three ways.
//!
//! * `Oracle`: dense reduced Hessian, inverted after equilibration.
//! * `General`: block-Woodbury form driven by gram matrices only.
//! * `Fast`: the same with the `NR² × NR²` solve replaced by `N−1` solves of size `R²`.
//!
//! Any other target `(n, r)` is handled by permuting the model first.

use std::fmt;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{CribError, Result};
use crate::hessian::{
    build_hessian, check_oracle_size, masked_hessian, reduce_hessian, reduce_matrix, ReducedHessian,
    ReductionMap, ORACLE_MAX_PARAMS,
};
use crate::linalg::{checked_inverse, RCOND_CUTOFF, dvec_left, dvec_right, inverse_with_rcond, permute_cols, permute_rows, psd_factor};
use crate::tensor::{gram_cache, DenseTensor, GramCache, IndexIter, KruskalModel};

/// Default magnitude of gram regularization.
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Regularization levels used by the ε-limit extrapolation.
pub const EPSILON_LADDER: [f64; 3] = [1e-4, 1e-5, 1e-6];

/// Ratio `f(1e-6) / f(1e-4)` above which the ε-limit is declared divergent.
const DIVERGENCE_RATIO: f64 = 3.0;

/// Largest `R²` for which `Auto` tries the fast path.
const FAST_MAX_R2: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Oracle,
    General,
    Fast,
    #[default]
    Auto,
    /// Richardson extrapolation of regularized gram evaluations to ε → 0.
    EpsilonLimit,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Oracle => "oracle",
            Method::General => "general",
            Method::Fast => "fast",
            Method::Auto => "auto",
            Method::EpsilonLimit => "epsilon_limit",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = CribError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Method::Oracle),
            "general" => Ok(Method::General),
            "fast" => Ok(Method::Fast),
            "auto" => Ok(Method::Auto),
            "epsilon_limit" | "epsilon-limit" => Ok(Method::EpsilonLimit),
            other => Err(CribError::InvalidArgument(format!("unknown method '{other}'"))),
        }
    }
}

/// A CRIB query on column `target.1` of mode `target.0` (both 0-based).
#[derive(Debug, Clone)]
pub struct CribRequest {
    pub model: KruskalModel,
    pub target: (usize, usize),
    pub sigma2: f64,
    pub method: Method,
    pub epsilon: f64,
}

impl CribRequest {
    pub fn new(model: KruskalModel, sigma2: f64) -> Self {
        Self { model, target: (0, 0), sigma2, method: Method::Auto, epsilon: DEFAULT_EPSILON }
    }

    pub fn with_target(mut self, mode: usize, column: usize) -> Self {
        self.target = (mode, column);
        self
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    fn validate(&self) -> Result<()> {
        check_sigma2(self.sigma2)?;
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(CribError::InvalidArgument(format!("epsilon must lie in (0, 0.5), got {}", self.epsilon)));
        }
        Ok(())
    }

    /// Model with the target moved to mode 1, column 1, then normalized.
    fn prepared_model(&self) -> Result<KruskalModel> {
        let m = self.model.permute_target(self.target.0, self.target.1)?.normalize();
        if m.factor(0).column(0).norm() == 0.0 {
            return Err(CribError::ZeroNormColumn { mode: self.target.0 + 1, column: self.target.1 + 1 });
        }
        Ok(m)
    }
}

fn check_sigma2(sigma2: f64) -> Result<()> {
    if sigma2 > 0.0 && sigma2.is_finite() {
        Ok(())
    } else {
        Err(CribError::InvalidArgument(format!("sigma2 must be positive and finite, got {sigma2}")))
    }
}

/// Bound on the mean squared angular error of one factor column.
#[derive(Debug, Clone, PartialEq)]
pub struct CribReport {
    /// Radians²; `+∞` when the model is not locally identifiable.
    pub crib_linear: f64,
    pub crib_db: f64,
    /// `√crib` in degrees.
    pub angle_std_deg: f64,
    pub finite: bool,
    pub method: Method,
    pub epsilon_applied: bool,
}

impl CribReport {
    pub fn new(crib_linear: f64, method: Method, epsilon_applied: bool) -> Self {
        let (crib_db, angle_std_deg) = db_and_angle(crib_linear);
        Self { crib_linear, crib_db, angle_std_deg, finite: crib_linear.is_finite(), method, epsilon_applied }
    }

    pub fn infinite(method: Method, epsilon_applied: bool) -> Self {
        Self::new(f64::INFINITY, method, epsilon_applied)
    }
}

/// Rounds to 4 decimals for reports.
pub fn round_db(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

fn finite_or_none(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

impl Serialize for CribReport {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Json {
            crib: Option<f64>,
            crib_db: Option<f64>,
            angle_deg: Option<f64>,
            finite: bool,
            method: Method,
            epsilon_applied: bool,
        }
        Json {
            crib: finite_or_none(self.crib_linear),
            crib_db: finite_or_none(self.crib_db).map(round_db),
            angle_deg: finite_or_none(self.angle_std_deg),
            finite: self.finite,
            method: self.method,
            epsilon_applied: self.epsilon_applied,
        }
        .serialize(serializer)
    }
}

/// `(−10 log₁₀ crib, √crib · 180/π)`.
pub fn db_and_angle(crib_linear: f64) -> (f64, f64) {
    (-10.0 * crib_linear.log10(), crib_linear.sqrt().to_degrees())
}

/// Inverse of [`db_and_angle`]'s first component.
pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(-db / 10.0)
}

/// `tr[Π⊥ M] / ‖a‖²` with `Π⊥` projecting out `a`.
fn projected_trace(crlb: &DMatrix<f64>, a1: &[f64]) -> f64 {
    let nrm2: f64 = a1.iter().map(|x| x * x).sum();
    let mut quad = 0.0;
    for (i, &ai) in a1.iter().enumerate() {
        for (j, &aj) in a1.iter().enumerate() {
            quad += ai * crlb[(i, j)] * aj;
        }
    }
    (crlb.trace() - quad / nrm2) / nrm2
}

fn crib_from_reduced(red: &ReducedHessian, model: &KruskalModel, sigma2: f64) -> f64 {
    let i1 = model.factor(0).nrows();
    match red.crlb_a1(i1, sigma2) {
        Some(crlb) => {
            let a1: Vec<f64> = model.factor(0).column(0).iter().copied().collect();
            projected_trace(&crlb, &a1)
        }
        None => f64::INFINITY,
    }
}

/// Dense-Hessian CRIB of an already permuted and normalized model.
fn oracle_value(model: &KruskalModel, sigma2: f64) -> Result<f64> {
    check_oracle_size(model)?;
    let h = build_hessian(&gram_cache(model), model);
    let red = reduce_hessian(&h, model, ReductionMap::Pivot);
    Ok(crib_from_reduced(&red, model, sigma2))
}

/// Brute-force CRIB through the dense reduced Hessian.
pub fn crib_oracle(req: &CribRequest) -> Result<CribReport> {
    req.validate()?;
    let model = req.prepared_model()?;
    Ok(CribReport::new(oracle_value(&model, req.sigma2)?, Method::Oracle, false))
}

/// `Xₙ = Cₙ − Cₙ[:,1] Cₙ[1,:] / Cₙ[1,1]`; first row and column vanish.
pub fn x_matrix(c: &DMatrix<f64>) -> DMatrix<f64> {
    let c00 = c[(0, 0)];
    let r = c.nrows();
    let mut x = DMatrix::from_fn(r, r, |i, j| c[(i, j)] - c[(i, 0)] * c[(0, j)] / c00);
    for k in 0..r {
        x[(0, k)] = 0.0;
        x[(k, 0)] = 0.0;
    }
    x
}

fn gamma_inverse(cache: &GramCache, n: usize) -> Result<DMatrix<f64>> {
    checked_inverse(cache.gamma(n, n)).ok_or(CribError::SingularGamma)
}

/// `(σ²/‖a₁‖²) {(I₁−1) g₁₁ − tr[B₀ ((gᵀg) ⊗ X₁)]}` with `g` the first row of `Γ₁₁⁻¹`.
fn trace_formula(b0: &DMatrix<f64>, g11_inv: &DMatrix<f64>, cache: &GramCache, i1: usize, sigma2: f64) -> f64 {
    let c1 = cache.gram(0);
    let g = g11_inv.row(0).transpose();
    let gg = &g * g.transpose();
    let x1 = x_matrix(c1);
    let t = (b0 * gg.kronecker(&x1)).trace();
    // normalized by the rank-one value; a singular solve lands outside [1, 1/RCOND_CUTOFF]
    let ratio = ((i1 as f64 - 1.0) * g11_inv[(0, 0)] - t) * cache.gamma(0, 0)[(0, 0)];
    let floor = (i1 as f64 - 1.0) * (1.0 - 1e-8);
    if !ratio.is_finite() || ratio < floor || ratio > (i1 as f64).max(1.0) / RCOND_CUTOFF {
        return f64::INFINITY;
    }
    sigma2 / (c1[(0, 0)] * cache.gamma(0, 0)[(0, 0)]) * ratio
}

fn check_grams(cache: &GramCache, i1: usize) -> Result<()> {
    if i1 == 0 {
        return Err(CribError::InvalidArgument("I1 must be positive".into()));
    }
    for (n, c) in cache.grams().iter().enumerate() {
        for r in 0..c.nrows() {
            if !(c[(r, r)] > 0.0) {
                return Err(CribError::ZeroNormColumn { mode: n + 1, column: r + 1 });
            }
        }
        if c.iter().any(|x| !x.is_finite()) {
            return Err(CribError::InvalidArgument(format!("gram {} has non-finite entries", n + 1)));
        }
    }
    Ok(())
}

/// Structured general path from gram matrices.
pub fn general_from_grams(cache: &GramCache, i1: usize, sigma2: f64) -> Result<f64> {
    check_grams(cache, i1)?;
    let order = cache.order();
    let rank = cache.rank();
    let r2 = rank * rank;
    let inv: Vec<DMatrix<f64>> = (0..order).map(|n| gamma_inverse(cache, n)).collect::<Result<_>>()?;
    let size = order * r2;
    let mut psi_k = DMatrix::<f64>::identity(size, size);
    let mut k = DMatrix::zeros(size, size);
    for n in 0..order {
        for m in 0..order {
            if n != m {
                let d = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(cache.gamma(n, m).as_slice()));
                k.view_mut((n * r2, m * r2), (r2, r2)).copy_from(&permute_rows(rank, &d));
            }
        }
    }
    for n in 0..order {
        let inner = if n == 0 { cache.gram(0).clone() } else { x_matrix(cache.gram(n)) };
        let psi_n = inv[n].kronecker(&inner);
        let rows = &psi_n * k.rows(n * r2, r2);
        let mut target = psi_k.rows_mut(n * r2, r2);
        target += rows;
    }
    let (ib_inv, _) = inverse_with_rcond(&psi_k).ok_or(CribError::SingularIb)?;
    let b0 = k.rows(0, r2) * ib_inv.columns(0, r2);
    Ok(trace_formula(&b0, &inv[0], cache, i1, sigma2))
}

/// First gram entry that is exactly zero, if any.
fn zero_entry(cache: &GramCache) -> Option<(usize, usize, usize)> {
    for (n, c) in cache.grams().iter().enumerate() {
        for j in 0..c.ncols() {
            for i in 0..c.nrows() {
                if c[(i, j)].abs() < f64::MIN_POSITIVE {
                    return Some((n + 1, i + 1, j + 1));
                }
            }
        }
    }
    None
}

/// Fast path: `B₀ = −(I + V)⁻¹ Y` assembled from per-mode `R² × R²` solves.
pub fn fast_from_grams(cache: &GramCache, i1: usize, sigma2: f64) -> Result<f64> {
    check_grams(cache, i1)?;
    if let Some((mode, row, col)) = zero_entry(cache) {
        return Err(CribError::HypothesisViolated { mode, row, col });
    }
    let order = cache.order();
    let rank = cache.rank();
    let r2 = rank * rank;
    let c1 = cache.gram(0);
    let g11_inv = gamma_inverse(cache, 0)?;
    let eye = DMatrix::<f64>::identity(r2, r2);
    let mut w = DMatrix::zeros(r2, r2);
    let mut y = DMatrix::zeros(r2, r2);
    for n in 1..order {
        let cn = cache.gram(n);
        let t = gamma_inverse(cache, n)?.kronecker(&x_matrix(cn));
        let s = &eye - permute_cols(rank, &dvec_right(&t, &cache.gamma(n, n).component_div(cn)));
        let s_inv = checked_inverse(&s).ok_or(CribError::SnSingular { mode: n + 1 })?;
        let lead = permute_rows(rank, &dvec_left(cache.gamma(0, n), &s_inv)) * &t;
        w += dvec_right(&lead, &c1.component_div(cn));
        y += dvec_right(&permute_cols(rank, &lead), cache.gamma(0, n));
    }
    let v = &w - &y * g11_inv.kronecker(c1);
    let (ipv_inv, _) = inverse_with_rcond(&(&eye + &v)).ok_or(CribError::SingularIb)?;
    let b0 = -(ipv_inv * y);
    Ok(trace_formula(&b0, &g11_inv, cache, i1, sigma2))
}

/// Clamps every off-diagonal correlation `ρ = C[r,s]/√(C[r,r]C[s,s])` into
/// `[ε, 1−ε]` in magnitude, keeping its sign (zero becomes `+ε`).
/// Diagonals are untouched; `Γ` is recomputed from the modified grams.
pub fn regularize_grams(cache: &GramCache, eps: f64) -> GramCache {
    let grams = cache
        .grams()
        .iter()
        .map(|c| {
            let mut c = c.clone();
            let r = c.nrows();
            for i in 0..r {
                for j in 0..r {
                    if i == j {
                        continue;
                    }
                    let d = (c[(i, i)] * c[(j, j)]).sqrt();
                    if !(d > 0.0) {
                        continue;
                    }
                    let rho = c[(i, j)] / d;
                    let mag = rho.abs().clamp(eps, 1.0 - eps);
                    let sign = if rho < 0.0 { -1.0 } else { 1.0 };
                    c[(i, j)] = sign * mag * d;
                }
            }
            c
        })
        .collect();
    GramCache::from_grams(grams).expect("shapes are preserved")
}

/// True when some off-diagonal correlation lies outside `[ε, 1−ε]` in magnitude.
pub fn grams_degenerate(cache: &GramCache, eps: f64) -> bool {
    (0..cache.order()).any(|n| {
        let r = cache.rank();
        (0..r).any(|i| {
            (0..r).any(|j| {
                if i == j {
                    return false;
                }
                let rho = cache.correlation(n, i, j).abs();
                rho < eps || rho > 1.0 - eps
            })
        })
    })
}

/// Factor matrices with the given grams: `R` rows for modes `n ≥ 2` (enough by
/// gram sufficiency) and `I₁` rows for mode 1. `None` when a gram is not PSD or
/// `C₁` has rank above `I₁`.
pub fn realize_factors(cache: &GramCache, i1: usize) -> Option<KruskalModel> {
    let rank = cache.rank();
    let mut factors = Vec::with_capacity(cache.order());
    for (n, c) in cache.grams().iter().enumerate() {
        let f = psd_factor(c, 1e-10)?;
        if n > 0 {
            factors.push(f);
            continue;
        }
        // Keep the i1 largest rows; the rest must be negligible.
        let mut rows: Vec<(f64, usize)> = (0..rank).map(|p| (f.row(p).norm(), p)).collect();
        rows.sort_by(|a, b| b.0.total_cmp(&a.0));
        let scale = rows[0].0.max(f64::MIN_POSITIVE);
        if rows.iter().skip(i1).any(|&(norm, _)| norm > 1e-7 * scale) {
            return None;
        }
        let mut a = DMatrix::zeros(i1, rank);
        for (dst, &(_, p)) in rows.iter().take(i1).enumerate() {
            a.row_mut(dst).copy_from(&f.row(p));
        }
        factors.push(a);
    }
    KruskalModel::new(factors).ok()
}

/// Dense oracle on factors realized from grams, falling back to the general path
/// when no realization exists or it is too large.
fn realized_value(cache: &GramCache, i1: usize, sigma2: f64) -> Result<f64> {
    let rank = cache.rank();
    let params = rank * (i1 + (cache.order() - 1) * rank);
    if params <= ORACLE_MAX_PARAMS {
        if let Some(model) = realize_factors(cache, i1) {
            return oracle_value(&model, sigma2);
        }
    }
    general_from_grams(cache, i1, sigma2)
}

/// ε → 0 limit of the CRIB of regularized grams.
///
/// Evaluates at each ε of [`EPSILON_LADDER`] and returns the intercept of the
/// least-squares line in ε. A value is `+∞` when some evaluation is infinite or
/// the sequence grows by more than a factor 3 across the ladder.
pub fn crib_epsilon_limit(cache: &GramCache, i1: usize, sigma2: f64) -> Result<f64> {
    check_sigma2(sigma2)?;
    check_grams(cache, i1)?;
    let values: Vec<f64> = EPSILON_LADDER
        .iter()
        .map(|&e| match realized_value(&regularize_grams(cache, e), i1, sigma2) {
            Ok(v) => Ok(v),
            Err(CribError::SingularGamma | CribError::SingularIb) => Ok(f64::INFINITY),
            Err(err) => Err(err),
        })
        .collect::<Result<_>>()?;
    if values.iter().any(|v| !v.is_finite()) || values[2] > DIVERGENCE_RATIO * values[0] {
        return Ok(f64::INFINITY);
    }
    let n = EPSILON_LADDER.len() as f64;
    let mx = EPSILON_LADDER.iter().sum::<f64>() / n;
    let my = values.iter().sum::<f64>() / n;
    let sxy: f64 = EPSILON_LADDER.iter().zip(&values).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = EPSILON_LADDER.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(my - sxy / sxx * mx)
}

/// `true` when the model has more free parameters than the tensor has entries,
/// which forces a singular Fisher information.
fn over_parameterized(model: &KruskalModel) -> bool {
    let dims = model.dims();
    let free = model.rank() * (dims.iter().sum::<usize>() + 1 - dims.len());
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).is_some_and(|entries| free > entries)
}

/// Structured general path on the model itself.
pub fn crib_general(req: &CribRequest) -> Result<CribReport> {
    req.validate()?;
    let model = req.prepared_model()?;
    if over_parameterized(&model) {
        return Ok(CribReport::infinite(Method::General, false));
    }
    let value = general_from_grams(&gram_cache(&model), model.factor(0).nrows(), req.sigma2)?;
    Ok(CribReport::new(value, Method::General, false))
}

/// Fast path. Grams with a correlation outside `[ε, 1−ε]` are regularized first.
pub fn crib_fast(req: &CribRequest) -> Result<CribReport> {
    req.validate()?;
    let model = req.prepared_model()?;
    if over_parameterized(&model) {
        return Ok(CribReport::infinite(Method::Fast, false));
    }
    let mut cache = gram_cache(&model);
    let applied = grams_degenerate(&cache, req.epsilon);
    if applied {
        cache = regularize_grams(&cache, req.epsilon);
    }
    let value = fast_from_grams(&cache, model.factor(0).nrows(), req.sigma2)?;
    Ok(CribReport::new(value, Method::Fast, applied))
}

/// Structured routes in `Auto` order: fast when small enough, then general.
fn structured(cache: &GramCache, i1: usize, sigma2: f64) -> Result<CribReport> {
    if cache.rank() * cache.rank() <= FAST_MAX_R2 {
        if let Ok(v) = fast_from_grams(cache, i1, sigma2) {
            return Ok(CribReport::new(v, Method::Fast, false));
        }
    }
    general_from_grams(cache, i1, sigma2).map(|v| CribReport::new(v, Method::General, false))
}

fn epsilon_report(cache: &GramCache, i1: usize, sigma2: f64) -> Result<CribReport> {
    Ok(CribReport::new(crib_epsilon_limit(cache, i1, sigma2)?, Method::EpsilonLimit, true))
}

/// Policy for `Auto`:
/// regular grams go to fast, then general, then the oracle;
/// degenerate grams, or a mode with fewer rows than the rank, go to the oracle,
/// and to the ε-limit when the oracle is singular or too large.
fn crib_auto(req: &CribRequest) -> Result<CribReport> {
    req.validate()?;
    let model = req.prepared_model()?;
    let cache = gram_cache(&model);
    let i1 = model.factor(0).nrows();
    let fits = model.num_params() <= ORACLE_MAX_PARAMS;
    if over_parameterized(&model) && !fits {
        return Ok(CribReport::infinite(Method::General, false));
    }
    let thin = model.dims().iter().any(|&d| d < model.rank());
    if thin && fits {
        return Ok(CribReport::new(oracle_value(&model, req.sigma2)?, Method::Oracle, false));
    }
    if !grams_degenerate(&cache, req.epsilon) {
        if let Ok(report) = structured(&cache, i1, req.sigma2) {
            return Ok(report);
        }
        if fits {
            return Ok(CribReport::new(oracle_value(&model, req.sigma2)?, Method::Oracle, false));
        }
        return epsilon_report(&cache, i1, req.sigma2);
    }
    if fits {
        let v = oracle_value(&model, req.sigma2)?;
        if v.is_finite() {
            return Ok(CribReport::new(v, Method::Oracle, false));
        }
    }
    epsilon_report(&cache, i1, req.sigma2)
}

/// Dispatches on `req.method`.
pub fn crib(req: &CribRequest) -> Result<CribReport> {
    match req.method {
        Method::Oracle => crib_oracle(req),
        Method::General => crib_general(req),
        Method::Fast => crib_fast(req),
        Method::Auto => crib_auto(req),
        Method::EpsilonLimit => {
            req.validate()?;
            let model = req.prepared_model()?;
            epsilon_report(&gram_cache(&model), model.factor(0).nrows(), req.sigma2)
        }
    }
}

/// CRIB computed from gram matrices alone.
///
/// `‖a₁‖²` is `C₁[1,1]`; passing `norm_a1` rescales the first column of `A₁`
/// (row and column 1 of `C₁`) to that norm. For `Auto`, regular grams use the
/// structured paths and degenerate ones the ε-limit.
pub fn crib_from_grams(
    cache: &GramCache,
    i1: usize,
    norm_a1: Option<f64>,
    sigma2: f64,
    method: Method,
) -> Result<CribReport> {
    check_sigma2(sigma2)?;
    let cache = match norm_a1 {
        Some(norm) => {
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(CribError::InvalidArgument(format!("norm_a1 must be positive, got {norm}")));
            }
            let c = cache.gram(0);
            let lambda = norm / c[(0, 0)].sqrt();
            let mut c1 = c.clone();
            for k in 0..c1.nrows() {
                c1[(0, k)] *= lambda;
                c1[(k, 0)] *= lambda;
            }
            let mut grams = cache.grams().to_vec();
            grams[0] = c1;
            GramCache::from_grams(grams)?
        }
        None => cache.clone(),
    };
    check_grams(&cache, i1)?;
    match method {
        Method::General => general_from_grams(&cache, i1, sigma2).map(|v| CribReport::new(v, Method::General, false)),
        Method::Fast => fast_from_grams(&cache, i1, sigma2).map(|v| CribReport::new(v, Method::Fast, false)),
        Method::Oracle => realized_value(&cache, i1, sigma2).map(|v| CribReport::new(v, Method::Oracle, false)),
        Method::EpsilonLimit => epsilon_report(&cache, i1, sigma2),
        Method::Auto => {
            if grams_degenerate(&cache, DEFAULT_EPSILON) {
                return epsilon_report(&cache, i1, sigma2);
            }
            structured(&cache, i1, sigma2).or_else(|_| epsilon_report(&cache, i1, sigma2))
        }
    }
}

/// Reorders tensor modes: output mode `k` is input mode `order[k]`.
pub fn permute_tensor_modes(t: &DenseTensor, order: &[usize]) -> Result<DenseTensor> {
    let dims: Vec<usize> = order.iter().map(|&k| t.dims()[k]).collect();
    let mut values = vec![0.0; t.len()];
    let mut it = IndexIter::new(&dims);
    let mut lin = 0;
    let mut src = vec![0; order.len()];
    while let Some(idx) = it.index() {
        for (k, &o) in order.iter().enumerate() {
            src[o] = idx[k];
        }
        values[lin] = t.get(&src);
        lin += 1;
        it.advance();
    }
    DenseTensor::new(dims, values)
}

/// CRIB when only the entries flagged by `mask` are observed.
pub fn crib_masked(model: &KruskalModel, mask: &DenseTensor, target: (usize, usize), sigma2: f64) -> Result<CribReport> {
    check_sigma2(sigma2)?;
    crate::hessian::validate_mask(model, mask)?;
    let req = CribRequest::new(model.clone(), sigma2).with_target(target.0, target.1);
    let m = req.prepared_model()?;
    check_oracle_size(&m)?;
    let mut order = vec![target.0];
    order.extend((0..model.order()).filter(|&n| n != target.0));
    let w = permute_tensor_modes(mask, &order)?;
    let h = masked_hessian(&m, &w)?;
    let red = reduce_matrix(h.matrix(), &m, ReductionMap::Pivot);
    Ok(CribReport::new(crib_from_reduced(&red, &m, sigma2), Method::Oracle, false))
}

/// CRIB for every column of every mode, `result[n][r]`; targets run in parallel.
pub fn crib_all_columns(model: &KruskalModel, sigma2: f64, method: Method, mask: Option<&DenseTensor>) -> Result<Vec<Vec<CribReport>>> {
    let targets: Vec<(usize, usize)> =
        (0..model.order()).flat_map(|n| (0..model.rank()).map(move |r| (n, r))).collect();
    let reports: Vec<CribReport> = targets
        .par_iter()
        .map(|&(n, r)| match mask {
            Some(w) => crib_masked(model, w, (n, r), sigma2),
            None => crib(&CribRequest::new(model.clone(), sigma2).with_target(n, r).with_method(method)),
        })
        .collect::<Result<_>>()?;
    Ok(reports.chunks(model.rank()).map(|c| c.to_vec()).collect())
}
