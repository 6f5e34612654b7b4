//! Studies built on the CRIB engine: Monte Carlo validation, reshaping loss,
//! stable-rank bounds and the uniqueness necessary condition.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::crib::{crib, crib_all_columns, crib_from_grams, db_and_angle, CribReport, CribRequest, Method};
use crate::error::{CribError, Result};
use crate::hessian::ORACLE_MAX_PARAMS;
use crate::linalg::{hadamard, numerical_rank, psd_factor};
use crate::solver::{align, angular_errors, fit_als, fit_gn, Init, SolverConfig};
use crate::tensor::{full_tensor, gram_cache, reshape_merge, DenseTensor, GramCache, KruskalModel};

/// Relative singular-value tolerance for numerical rank decisions.
pub const RANK_TOL: f64 = 1e-10;

/// A matched column with `|cos|` below this marks a Monte Carlo trial as mis-aligned.
pub const MISALIGN_COS: f64 = 0.5;

fn check_dims(dims: &[usize], rank: usize) -> Result<()> {
    if dims.len() < 3 {
        return Err(CribError::InvalidArgument(format!("order must be at least 3, got {}", dims.len())));
    }
    if dims.contains(&0) {
        return Err(CribError::InvalidArgument("dimensions must be positive".into()));
    }
    if rank == 0 {
        return Err(CribError::InvalidArgument("rank must be at least 1".into()));
    }
    Ok(())
}

/// I.i.d. standard normal factors, normalized.
pub fn random_model(dims: &[usize], rank: usize, seed: u64) -> Result<KruskalModel> {
    check_dims(dims, rank)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factors = dims
        .iter()
        .map(|&d| DMatrix::from_fn(d, rank, |_, _| StandardNormal.sample(&mut rng)))
        .collect();
    Ok(KruskalModel::new(factors)?.normalize())
}

fn random_orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng));
    g.qr().q()
}

/// Random model whose per-mode grams equal the given PSD targets.
///
/// Each factor is `Q F` with `Q` a random orthonormal basis and `FᵀF = Cₙ`. When
/// `Iₙ` is smaller than the target's rank only the leading `Iₙ` directions are kept,
/// so the achieved gram is the best rank-`Iₙ` approximation.
pub fn model_with_grams(dims: &[usize], grams: &[DMatrix<f64>], seed: u64) -> Result<KruskalModel> {
    if grams.len() != dims.len() {
        return Err(CribError::DimensionMismatch(format!("{} grams for {} modes", grams.len(), dims.len())));
    }
    let rank = grams.first().map_or(0, |g| g.nrows());
    check_dims(dims, rank)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut factors = Vec::with_capacity(dims.len());
    for (n, (&d, c)) in dims.iter().zip(grams).enumerate() {
        if c.shape() != (rank, rank) {
            return Err(CribError::DimensionMismatch(format!("gram {} is not {rank}x{rank}", n + 1)));
        }
        let f = psd_factor(c, 1e-12)
            .ok_or_else(|| CribError::InfeasibleCorrelation(format!("target gram of mode {} is not PSD", n + 1)))?;
        // keep the largest-energy rows
        let mut rows: Vec<(f64, usize)> = (0..rank).map(|p| (f.row(p).norm_squared(), p)).collect();
        rows.sort_by(|a, b| b.0.total_cmp(&a.0));
        let k = d.min(rank);
        let f_kept = DMatrix::from_fn(k, rank, |i, j| f[(rows[i].1, j)]);
        let q = random_orthonormal(d, k, &mut rng);
        factors.push(q * f_kept);
    }
    KruskalModel::new(factors)
}

/// Unit-norm columns with equal pairwise correlation `c[n]` in mode `n`.
///
/// Exact for rank 2; for larger ranks all off-diagonal entries share the value,
/// feasible for `−1/(R−1) ≤ c ≤ 1`.
pub fn model_with_correlations(dims: &[usize], rank: usize, c: &[f64], seed: u64) -> Result<KruskalModel> {
    check_dims(dims, rank)?;
    if c.len() != dims.len() {
        return Err(CribError::DimensionMismatch(format!("{} correlations for {} modes", c.len(), dims.len())));
    }
    let mut grams = Vec::with_capacity(dims.len());
    for (n, &cn) in c.iter().enumerate() {
        let lower = if rank > 1 { -1.0 / (rank as f64 - 1.0) } else { -1.0 };
        if !cn.is_finite() || cn > 1.0 || cn < lower {
            return Err(CribError::InfeasibleCorrelation(format!(
                "correlation {cn} in mode {} gives a gram that is not PSD",
                n + 1
            )));
        }
        grams.push(DMatrix::from_fn(rank, rank, |i, j| if i == j { 1.0 } else { cn }));
    }
    model_with_grams(dims, &grams, seed)
}

/// Off-diagonal entries of every normalized gram, `[n][(r, s)]` for `r < s`.
pub fn achieved_correlations(model: &KruskalModel) -> Vec<Vec<f64>> {
    let cache = gram_cache(model);
    let rank = model.rank();
    (0..model.order())
        .map(|n| {
            let mut v = Vec::new();
            for r in 0..rank {
                for s in r + 1..rank {
                    v.push(cache.correlation(n, r, s));
                }
            }
            v
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    #[default]
    Gn,
    Als,
}

#[derive(Debug, Clone)]
pub struct McConfig {
    pub model: KruskalModel,
    pub sigma2: f64,
    pub trials: usize,
    pub solver: SolverConfig,
    pub algorithm: Algorithm,
    /// Fraction of entries removed by a random mask drawn once from `seed`.
    pub missing_fraction: Option<f64>,
    /// Start each fit at the true model instead of `solver.init`.
    pub init_at_truth: bool,
    pub seed: u64,
}

impl McConfig {
    pub fn new(model: KruskalModel, sigma2: f64) -> Self {
        Self {
            model,
            sigma2,
            trials: 200,
            solver: SolverConfig::default(),
            algorithm: Algorithm::Gn,
            missing_fraction: None,
            init_at_truth: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct McResult {
    /// `msae[n][r]`: mean of `α²` over successful trials.
    pub msae: Vec<Vec<f64>>,
    pub msae_db: Vec<Vec<f64>>,
    pub crib: Vec<Vec<CribReport>>,
    pub trials: usize,
    pub successes: usize,
    pub failures: usize,
    pub missing_fraction: Option<f64>,
}

/// Binary mask with `round(fraction · len)` zeros at random positions.
pub fn random_mask(dims: &[usize], fraction: f64, seed: u64) -> Result<DenseTensor> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(CribError::InvalidArgument(format!("missing fraction must lie in [0, 1), got {fraction}")));
    }
    let mut w = DenseTensor::ones(dims.to_vec())?;
    let len = w.len();
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let missing = (fraction * len as f64).round() as usize;
    for &k in &order[..missing] {
        w.values_mut()[k] = 0.0;
    }
    Ok(w)
}

fn noisy(clean: &DenseTensor, sigma: f64, seed: u64) -> DenseTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = clean.clone();
    for v in t.values_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += sigma * z;
    }
    t
}

/// Per-trial `α²` for every mode and column, or `None` for a failed trial.
fn mc_trial(cfg: &McConfig, clean: &DenseTensor, mask: Option<&DenseTensor>, trial: usize) -> Option<Vec<Vec<f64>>> {
    let seed = cfg.seed.wrapping_add(trial as u64);
    let t = noisy(clean, cfg.sigma2.sqrt(), seed);
    let mut solver = cfg.solver.clone();
    solver.seed = seed;
    if cfg.init_at_truth {
        solver.init = Init::Given(cfg.model.clone());
    }
    let rank = cfg.model.rank();
    let fit = match cfg.algorithm {
        Algorithm::Gn => fit_gn(&t, rank, &solver, mask),
        Algorithm::Als => fit_als(&t, rank, &solver, mask),
    }
    .ok()?;
    if !fit.converged {
        return None;
    }
    let aligned = align(&fit.model, &cfg.model).ok()?;
    let err = angular_errors(&aligned, &cfg.model).ok()?;
    if err.abs_cos.iter().flatten().any(|&c| c < MISALIGN_COS) {
        return None;
    }
    Some(err.squared)
}

/// Fits noisy realizations of `cfg.model` and compares the mean squared angular
/// error of every column with its CRIB.
pub fn monte_carlo(cfg: &McConfig) -> Result<McResult> {
    if cfg.trials == 0 {
        return Err(CribError::InvalidArgument("trials must be at least 1".into()));
    }
    if !(cfg.sigma2 > 0.0 && cfg.sigma2.is_finite()) {
        return Err(CribError::InvalidArgument(format!("sigma2 must be positive, got {}", cfg.sigma2)));
    }
    let dims = cfg.model.dims();
    let mask = cfg.missing_fraction.map(|f| random_mask(&dims, f, cfg.seed)).transpose()?;
    let clean = full_tensor(&cfg.model);
    let outcomes: Vec<Option<Vec<Vec<f64>>>> =
        (0..cfg.trials).into_par_iter().map(|k| mc_trial(cfg, &clean, mask.as_ref(), k)).collect();
    let ok: Vec<&Vec<Vec<f64>>> = outcomes.iter().flatten().collect();
    if ok.is_empty() {
        return Err(CribError::AllTrialsFailed(cfg.trials));
    }
    let rank = cfg.model.rank();
    let msae: Vec<Vec<f64>> = (0..cfg.model.order())
        .map(|n| (0..rank).map(|r| ok.iter().map(|sq| sq[n][r]).sum::<f64>() / ok.len() as f64).collect())
        .collect();
    let msae_db = msae.iter().map(|row| row.iter().map(|&v| db_and_angle(v).0).collect()).collect();
    let crib = crib_all_columns(&cfg.model, cfg.sigma2, Method::Auto, mask.as_ref())?;
    Ok(McResult {
        msae,
        msae_db,
        crib,
        trials: cfg.trials,
        successes: ok.len(),
        failures: cfg.trials - ok.len(),
        missing_fraction: cfg.missing_fraction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReshapeLoss {
    pub crib_original: f64,
    pub crib_reshaped: f64,
    pub loss_db: f64,
}

impl ReshapeLoss {
    fn from_pair(original: &CribReport, reshaped: &CribReport) -> Self {
        let loss_db = if original.finite && reshaped.finite {
            original.crib_db - reshaped.crib_db
        } else if original.finite {
            f64::INFINITY
        } else {
            f64::NAN
        };
        Self { crib_original: original.crib_linear, crib_reshaped: reshaped.crib_linear, loss_db }
    }
}

fn check_merge(order: usize, merge: &[usize]) -> Result<()> {
    if merge.contains(&0) {
        return Err(CribError::InvalidArgument("mode 1 cannot be merged".into()));
    }
    if merge.len() < 2 {
        return Err(CribError::InvalidArgument("merge at least two modes".into()));
    }
    if merge.iter().any(|&m| m >= order) {
        return Err(CribError::InvalidArgument(format!("merge modes must be below {order}")));
    }
    if order - merge.len() + 1 < 3 {
        return Err(CribError::InvalidArgument("the reshaped tensor must keep order at least 3".into()));
    }
    Ok(())
}

/// CRIB of the first column of `A₁` before and after merging `merge` (0-based modes, mode 0 excluded).
pub fn reshape_loss(model: &KruskalModel, merge: &[usize], sigma2: f64, method: Method) -> Result<ReshapeLoss> {
    check_merge(model.order(), merge)?;
    let reshaped = reshape_merge(model, merge)?;
    let a = crib(&CribRequest::new(model.clone(), sigma2).with_method(method))?;
    let b = crib(&CribRequest::new(reshaped, sigma2).with_method(method))?;
    Ok(ReshapeLoss::from_pair(&a, &b))
}

/// Grams after merging: the merged mode's gram is the Hadamard product of its parts.
pub fn merge_grams(cache: &GramCache, merge: &[usize]) -> Result<GramCache> {
    check_merge(cache.order(), merge)?;
    let mut sorted = merge.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != merge.len() {
        return Err(CribError::InvalidArgument("merge modes must be distinct".into()));
    }
    let merged = sorted.iter().skip(1).fold(cache.gram(sorted[0]).clone(), |acc, &m| hadamard(&acc, cache.gram(m)));
    let mut grams = Vec::new();
    for n in 0..cache.order() {
        if n == sorted[0] {
            grams.push(merged.clone());
        } else if !sorted.contains(&n) {
            grams.push(cache.gram(n).clone());
        }
    }
    GramCache::from_grams(grams)
}

/// [`reshape_loss`] on gram matrices alone, so exactly degenerate correlations can be posed.
pub fn reshape_loss_from_grams(cache: &GramCache, i1: usize, merge: &[usize], sigma2: f64) -> Result<ReshapeLoss> {
    let merged = merge_grams(cache, merge)?;
    let a = crib_from_grams(cache, i1, None, sigma2, Method::Auto)?;
    let b = crib_from_grams(&merged, i1, None, sigma2, Method::Auto)?;
    Ok(ReshapeLoss::from_pair(&a, &b))
}

/// `⌊∏Iₙ / (ΣIₙ − N + 1)⌋`, an upper bound on the largest rank with finite CRIB.
pub fn max_stable_rank_bound(dims: &[usize]) -> Result<usize> {
    check_dims(dims, 1)?;
    let prod = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| {
        CribError::InvalidArgument("dimension product overflows".into())
    })?;
    let free = dims.iter().sum::<usize>() + 1 - dims.len();
    Ok(prod / free)
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    pub dims: Vec<usize>,
    pub rank: usize,
    pub bound: usize,
    pub finite: bool,
    pub crib: CribReport,
}

/// CRIB of column (1,1) for a random normalized model of the given shape.
pub fn check_stability(dims: &[usize], rank: usize, seed: u64) -> Result<StabilityReport> {
    let model = random_model(dims, rank, seed)?;
    let method = if model.num_params() <= ORACLE_MAX_PARAMS { Method::Oracle } else { Method::Auto };
    let report = crib(&CribRequest::new(model, 1.0).with_method(method))?;
    Ok(StabilityReport {
        dims: dims.to_vec(),
        rank,
        bound: max_stable_rank_bound(dims)?,
        finite: report.finite,
        crib: report,
    })
}

/// `true` iff every `Γₙₙ` has numerical rank `R`, i.e. every Khatri-Rao complement
/// `Ζₙ` has full column rank.
pub fn uniqueness_necessary(model: &KruskalModel) -> bool {
    let cache = gram_cache(model);
    (0..model.order()).all(|n| numerical_rank(cache.gamma(n, n), RANK_TOL) == model.rank())
}
