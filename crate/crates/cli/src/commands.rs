use std::path::Path;

use cpd_crib::analysis::{
    achieved_correlations, check_stability, max_stable_rank_bound, model_with_correlations, monte_carlo, random_model,
    reshape_loss, reshape_loss_from_grams, Algorithm, McConfig, ReshapeLoss,
};
use cpd_crib::closed_forms::{brie_crib, crib_ortho, crib_rank1, crib_rank2, BrieParams, OrthoCaseParams, Rank2Params};
use cpd_crib::crib::{crib_masked, db_and_angle, round_db};
use cpd_crib::hessian::{build_hessian, check_oracle_size, masked_hessian, matrix_to_csv};
use cpd_crib::io::{json_diagnostic, kruskal_to_json, read_kruskal, read_tensor};
use cpd_crib::solver::{align, angular_errors};
use cpd_crib::tensor::full_tensor;
use cpd_crib::{crib, fit_als, fit_gn, gram_cache, CribError, CribReport, CribRequest, Init, KruskalModel, Method, SolverConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::output::{cell, emit, finite, opt_cell, Report, Table};
use crate::{AlgoArg, CaseArg, Cli, CliError, ClosedFormArgs, Command, CribArgs, DecomposeArgs, GenArgs, McArgs, ReshapeArgs, StableRankArgs};

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let report = match &cli.command {
        Command::Crib(a) => crib_cmd(a)?,
        Command::ClosedForm(a) => closed_form(a)?,
        Command::Decompose(a) => decompose(a, cli.verbose)?,
        Command::Mc(a) => mc(a, cli.verbose)?,
        Command::ReshapeLoss(a) => reshape(a)?,
        Command::StableRank(a) => stable_rank(a)?,
        Command::Gen(a) => gen(a)?,
    };
    emit(report, cli.format, cli.reproducible, cli.output.as_deref())
}

#[derive(Serialize)]
struct ColumnCrib {
    mode: usize,
    column: usize,
    #[serde(flatten)]
    report: CribReport,
}

fn crib_header() -> Vec<&'static str> {
    vec!["mode", "column", "crib", "crib_db", "angle_deg", "finite", "method"]
}

fn crib_row(c: &ColumnCrib) -> Vec<String> {
    let r = &c.report;
    vec![
        c.mode.to_string(),
        c.column.to_string(),
        opt_cell(finite(r.crib_linear)),
        opt_cell(finite(r.crib_db).map(round_db)),
        opt_cell(finite(r.angle_std_deg)),
        r.finite.to_string(),
        r.method.to_string(),
    ]
}

fn all_targets(model: &KruskalModel) -> Vec<(usize, usize)> {
    (0..model.order()).flat_map(|n| (0..model.rank()).map(move |r| (n, r))).collect()
}

fn check_target(model: &KruskalModel, (n, r): (usize, usize)) -> Result<(usize, usize), CliError> {
    if n > model.order() || r > model.rank() {
        return Err(CliError::Usage(format!(
            "--target {n}:{r} outside a model with {} modes and rank {}",
            model.order(),
            model.rank()
        )));
    }
    Ok((n - 1, r - 1))
}

fn crib_cmd(a: &CribArgs) -> Result<Report, CliError> {
    let model = read_kruskal(&a.factors)?;
    let mask = a.mask.as_deref().map(read_tensor).transpose()?;
    if mask.is_some() && a.method != crate::MethodArg::Auto {
        return Err(CliError::Usage("--method cannot be combined with --mask".into()));
    }
    let targets = if a.all { all_targets(&model) } else { vec![check_target(&model, a.target)?] };
    let method = Method::from(a.method);
    let columns = targets
        .par_iter()
        .map(|&(n, r)| {
            let report = match &mask {
                Some(w) => crib_masked(&model, w, (n, r), a.sigma2)?,
                None => crib(
                    &CribRequest::new(model.clone(), a.sigma2)
                        .with_target(n, r)
                        .with_method(method)
                        .with_epsilon(a.epsilon),
                )?,
            };
            Ok(ColumnCrib { mode: n + 1, column: r + 1, report })
        })
        .collect::<Result<Vec<_>, CribError>>()?;
    if let Some(path) = &a.dump_hessian {
        dump_hessian(&model, mask.as_ref(), path)?;
    }

    let mut table = Table::new(crib_header());
    for c in &columns {
        table.push(crib_row(c));
    }
    let masked = mask.is_some();
    if a.all {
        #[derive(Serialize)]
        struct Out {
            sigma2: f64,
            masked: bool,
            columns: Vec<ColumnCrib>,
        }
        Ok(Report::new(&Out { sigma2: a.sigma2, masked, columns }, table))
    } else {
        #[derive(Serialize)]
        struct Out {
            sigma2: f64,
            masked: bool,
            #[serde(flatten)]
            column: ColumnCrib,
        }
        let column = columns.into_iter().next().expect("one target");
        Ok(Report::new(&Out { sigma2: a.sigma2, masked, column }, table))
    }
}

fn dump_hessian(model: &KruskalModel, mask: Option<&cpd_crib::DenseTensor>, path: &Path) -> Result<(), CliError> {
    check_oracle_size(model)?;
    let h = match mask {
        Some(w) => masked_hessian(model, w)?.into_matrix(),
        None => build_hessian(&gram_cache(model), model).into_matrix(),
    };
    std::fs::write(path, matrix_to_csv(&h)).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn one() -> f64 {
    1.0
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Rank1In {
    i1: usize,
    #[serde(default = "one")]
    sigma2: f64,
    #[serde(default = "one")]
    norm_a1: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Rank2In {
    i1: usize,
    c: Vec<f64>,
    #[serde(default = "one")]
    sigma2: f64,
    #[serde(default = "one")]
    norm_a1: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OrthoIn {
    i1: usize,
    gammas: Vec<f64>,
    #[serde(default = "one")]
    sigma2: f64,
    #[serde(default = "one")]
    norm_a1: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BrieIn {
    i1: usize,
    c2: f64,
    c3: f64,
    c4: f64,
    #[serde(default = "one")]
    sigma2: f64,
    #[serde(default = "one")]
    norm_a1: f64,
}

fn parse_params<T: for<'de> Deserialize<'de>>(raw: &str) -> Result<T, CliError> {
    let text = match raw.strip_prefix('@') {
        Some(path) => std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("--params {path}: {e}")))?,
        None => raw.to_string(),
    };
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("--params: {}", json_diagnostic(&e))))
}

fn check_scale(sigma2: f64, norm_a1: f64) -> Result<(), CliError> {
    if sigma2 > 0.0 && sigma2.is_finite() && norm_a1 > 0.0 && norm_a1.is_finite() {
        Ok(())
    } else {
        Err(CliError::Usage("sigma2 and norm_a1 must be positive and finite".into()))
    }
}

fn closed_form(a: &ClosedFormArgs) -> Result<Report, CliError> {
    let (case, value) = match a.case {
        CaseArg::Rank1 => {
            let p: Rank1In = parse_params(&a.params)?;
            check_scale(p.sigma2, p.norm_a1)?;
            ("rank1", crib_rank1(p.i1, p.sigma2, p.norm_a1))
        }
        CaseArg::Rank2 => {
            let p: Rank2In = parse_params(&a.params)?;
            let params = Rank2Params { sigma2: p.sigma2, norm_a1: p.norm_a1, ..Rank2Params::new(p.i1, p.c) };
            ("rank2", crib_rank2(&params)?)
        }
        CaseArg::Ortho => {
            let p: OrthoIn = parse_params(&a.params)?;
            check_scale(p.sigma2, p.norm_a1)?;
            let params = OrthoCaseParams { sigma2: p.sigma2, norm_a1: p.norm_a1, ..OrthoCaseParams::new(p.i1, p.gammas) };
            let value = match crib_ortho(&params) {
                Err(CribError::GammaUnit(_)) => f64::INFINITY,
                other => other?,
            };
            ("ortho", value)
        }
        CaseArg::Brie => {
            let p: BrieIn = parse_params(&a.params)?;
            check_scale(p.sigma2, p.norm_a1)?;
            let params = BrieParams { sigma2: p.sigma2, norm_a1: p.norm_a1, ..BrieParams::new(p.i1, p.c2, p.c3, p.c4) };
            ("brie", brie_crib(&params)?)
        }
    };
    #[derive(Serialize)]
    struct Out {
        case: &'static str,
        crib: Option<f64>,
        crib_db: Option<f64>,
        angle_deg: Option<f64>,
        finite: bool,
    }
    let (db, angle) = db_and_angle(value);
    let out = Out { case, crib: finite(value), crib_db: finite(db).map(round_db), angle_deg: finite(angle), finite: value.is_finite() };
    let mut table = Table::new(vec!["case", "crib", "crib_db", "angle_deg", "finite"]);
    table.push(vec![case.into(), opt_cell(out.crib), opt_cell(out.crib_db), opt_cell(out.angle_deg), out.finite.to_string()]);
    Ok(Report::new(&out, table))
}

fn algorithm(a: AlgoArg) -> Algorithm {
    match a {
        AlgoArg::Gn => Algorithm::Gn,
        AlgoArg::Als => Algorithm::Als,
    }
}

fn decompose(a: &DecomposeArgs, verbose: u8) -> Result<Report, CliError> {
    let tensor = read_tensor(&a.tensor)?;
    let mask = a.mask.as_deref().map(read_tensor).transpose()?;
    let truth = a.truth.as_deref().map(read_kruskal).transpose()?;
    let init = match &a.init {
        Some(path) => Init::Given(read_kruskal(path)?),
        None => Init::Random,
    };
    let cfg = SolverConfig { max_iters: a.max_iters, rel_fit_tol: a.tol, starts: a.starts, seed: a.seed, init, ..Default::default() };
    let fit = match a.algo {
        AlgoArg::Gn => fit_gn(&tensor, a.rank, &cfg, mask.as_ref())?,
        AlgoArg::Als => fit_als(&tensor, a.rank, &cfg, mask.as_ref())?,
    };
    if verbose > 0 {
        eprintln!("fit: {} iterations, converged={}, residual {:.6e}", fit.iterations, fit.converged, fit.residual_norm);
    }

    let errors = match &truth {
        Some(t) => Some(angular_errors(&align(&fit.model, t)?, t)?.angles),
        None => None,
    };
    // an exact fit leaves no noise estimate to scale the bound with
    let cribs: Vec<Option<CribReport>> = if fit.sigma2 > 0.0 {
        all_targets(&fit.model)
            .par_iter()
            .map(|&(n, r)| match &mask {
                Some(w) => crib_masked(&fit.model, w, (n, r), fit.sigma2),
                None => crib(&CribRequest::new(fit.model.clone(), fit.sigma2).with_target(n, r)),
            }
            .map(Some))
            .collect::<Result<_, _>>()?
    } else {
        vec![None; fit.model.order() * fit.model.rank()]
    };

    #[derive(Serialize)]
    struct Column {
        mode: usize,
        column: usize,
        crib: Option<CribReport>,
        angular_error_deg: Option<f64>,
    }
    let columns: Vec<Column> = all_targets(&fit.model)
        .into_iter()
        .zip(cribs)
        .map(|((n, r), crib)| Column {
            mode: n + 1,
            column: r + 1,
            crib,
            angular_error_deg: errors.as_ref().map(|e| e[n][r].to_degrees()),
        })
        .collect();

    let model_json = kruskal_to_json(&fit.model);
    if let Some(path) = &a.model_out {
        std::fs::write(path, &model_json).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }
    let mut table = Table::new(vec!["mode", "column", "crib", "crib_db", "angle_deg", "angular_error_deg"]);
    for c in &columns {
        let r = c.crib.as_ref();
        table.push(vec![
            c.mode.to_string(),
            c.column.to_string(),
            opt_cell(r.and_then(|r| finite(r.crib_linear))),
            opt_cell(r.and_then(|r| finite(r.crib_db)).map(round_db)),
            opt_cell(r.and_then(|r| finite(r.angle_std_deg))),
            opt_cell(c.angular_error_deg),
        ]);
    }

    #[derive(Serialize)]
    struct Out {
        algorithm: Algorithm,
        rank: usize,
        converged: bool,
        iterations: usize,
        residual_norm: f64,
        sigma2: f64,
        sigma2_unbiased: Option<f64>,
        masked: bool,
        columns: Vec<Column>,
        model: serde_json::Value,
    }
    let out = Out {
        algorithm: algorithm(a.algo),
        rank: a.rank,
        converged: fit.converged,
        iterations: fit.iterations,
        residual_norm: fit.residual_norm,
        sigma2: fit.sigma2,
        sigma2_unbiased: fit.sigma2_unbiased,
        masked: mask.is_some(),
        columns,
        model: serde_json::from_str(&model_json).expect("model JSON parses"),
    };
    Ok(Report::new(&out, table))
}

fn mc(a: &McArgs, verbose: u8) -> Result<Report, CliError> {
    let model = read_kruskal(&a.factors)?;
    let sigma2 = match (a.sigma2, a.snr_db) {
        (Some(s), _) => s,
        (None, Some(snr)) => {
            let clean = full_tensor(&model);
            clean.frobenius_norm().powi(2) / clean.len() as f64 * 10f64.powf(-snr / 10.0)
        }
        (None, None) => unreachable!("clap requires one of --sigma2 and --snr-db"),
    };

    #[derive(Serialize)]
    struct Column {
        mode: usize,
        column: usize,
        msae: f64,
        msae_db: f64,
        crib: Option<f64>,
        crib_db: Option<f64>,
        finite: bool,
    }
    #[derive(Serialize)]
    struct Run {
        missing_fraction: f64,
        successes: usize,
        failures: usize,
        columns: Vec<Column>,
    }
    let mut runs = Vec::with_capacity(a.missing.len());
    let mut table = Table::new(vec!["missing_fraction", "mode", "column", "crib_db", "msae_db"]);
    for &fraction in &a.missing {
        let cfg = McConfig {
            trials: a.trials,
            solver: SolverConfig { max_iters: a.max_iters, seed: a.seed, ..Default::default() },
            algorithm: algorithm(a.algo),
            missing_fraction: (fraction != 0.0).then_some(fraction),
            init_at_truth: !a.random_init,
            seed: a.seed,
            ..McConfig::new(model.clone(), sigma2)
        };
        let res = monte_carlo(&cfg)?;
        if verbose > 0 {
            eprintln!("missing {fraction}: {} of {} trials used", res.successes, res.trials);
        }
        let mut columns = vec![];
        for (n, r) in all_targets(&model) {
            let c = &res.crib[n][r];
            let col = Column {
                mode: n + 1,
                column: r + 1,
                msae: res.msae[n][r],
                msae_db: round_db(res.msae_db[n][r]),
                crib: finite(c.crib_linear),
                crib_db: finite(c.crib_db).map(round_db),
                finite: c.finite,
            };
            table.push(vec![cell(fraction), col.mode.to_string(), col.column.to_string(), opt_cell(col.crib_db), cell(col.msae_db)]);
            columns.push(col);
        }
        runs.push(Run { missing_fraction: fraction, successes: res.successes, failures: res.failures, columns });
    }

    #[derive(Serialize)]
    struct Out {
        sigma2: f64,
        trials: usize,
        algorithm: Algorithm,
        seed: u64,
        runs: Vec<Run>,
    }
    Ok(Report::new(&Out { sigma2, trials: a.trials, algorithm: algorithm(a.algo), seed: a.seed, runs }, table))
}

fn reshape(a: &ReshapeArgs) -> Result<Report, CliError> {
    if a.merge.contains(&0) {
        return Err(CliError::Usage("--merge modes are 1-based".into()));
    }
    let merge: Vec<usize> = a.merge.iter().map(|m| m - 1).collect();
    let loss: ReshapeLoss = match (&a.factors, &a.c, a.i1) {
        (Some(path), _, _) => reshape_loss(&read_kruskal(path)?, &merge, a.sigma2, Method::from(a.method))?,
        (None, Some(c), Some(i1)) => {
            if c.len() < 3 {
                return Err(CliError::Usage(format!("--c needs one correlation per mode (at least 3), got {}", c.len())));
            }
            if let Some(x) = c.iter().find(|x| !(-1.0..=1.0).contains(*x)) {
                return Err(CliError::Usage(format!("--c: correlation {x} outside [-1, 1]")));
            }
            if i1 == 0 {
                return Err(CliError::Usage("--i1 must be positive".into()));
            }
            reshape_loss_from_grams(&Rank2Params::new(i1, c.clone()).grams(), i1, &merge, a.sigma2)?
        }
        _ => return Err(CliError::Usage("give --factors, or --c with --i1".into())),
    };

    #[derive(Serialize)]
    struct Out {
        merge: Vec<usize>,
        sigma2: f64,
        crib_original: Option<f64>,
        crib_reshaped: Option<f64>,
        crib_original_db: Option<f64>,
        crib_reshaped_db: Option<f64>,
        loss_db: Option<f64>,
    }
    let db = |x: f64| finite(db_and_angle(x).0).map(round_db);
    let out = Out {
        merge: a.merge.clone(),
        sigma2: a.sigma2,
        crib_original: finite(loss.crib_original),
        crib_reshaped: finite(loss.crib_reshaped),
        crib_original_db: db(loss.crib_original),
        crib_reshaped_db: db(loss.crib_reshaped),
        loss_db: finite(loss.loss_db).map(round_db),
    };
    let mut table = Table::new(vec!["crib_original_db", "crib_reshaped_db", "loss_db"]);
    table.push(vec![opt_cell(out.crib_original_db), opt_cell(out.crib_reshaped_db), opt_cell(out.loss_db)]);
    Ok(Report::new(&out, table))
}

fn stable_rank(a: &StableRankArgs) -> Result<Report, CliError> {
    let bound = max_stable_rank_bound(&a.dims)?;

    #[derive(Serialize)]
    struct Check {
        rank: usize,
        seeds: u64,
        finite_count: usize,
    }
    #[derive(Serialize)]
    struct Out {
        dims: Vec<usize>,
        bound: usize,
        #[serde(skip_serializing_if = "Option::is_none")]
        verify: Option<Vec<Check>>,
    }
    if !a.verify {
        let mut table = Table::new(vec!["bound"]);
        table.push(vec![bound.to_string()]);
        return Ok(Report::new(&Out { dims: a.dims.clone(), bound, verify: None }, table));
    }
    let mut table = Table::new(vec!["rank", "seed", "finite", "crib_db"]);
    let mut checks = vec![];
    for rank in [bound, bound + 1] {
        let reports = (a.seed..a.seed + a.seeds)
            .into_par_iter()
            .map(|s| check_stability(&a.dims, rank, s).map(|r| (s, r)))
            .collect::<Result<Vec<_>, _>>()?;
        for (s, r) in &reports {
            table.push(vec![rank.to_string(), s.to_string(), r.finite.to_string(), opt_cell(finite(r.crib.crib_db).map(round_db))]);
        }
        checks.push(Check { rank, seeds: a.seeds, finite_count: reports.iter().filter(|(_, r)| r.finite).count() });
    }
    Ok(Report::new(&Out { dims: a.dims.clone(), bound, verify: Some(checks) }, table))
}

fn gen(a: &GenArgs) -> Result<Report, CliError> {
    let model = match &a.correlations {
        Some(c) => {
            if c.len() != a.dims.len() {
                return Err(CliError::Usage(format!(
                    "--correlations needs one value per mode ({}), got {}",
                    a.dims.len(),
                    c.len()
                )));
            }
            let m = model_with_correlations(&a.dims, a.rank, c, a.seed)?;
            eprintln!("achieved correlations per mode: {:?}", achieved_correlations(&m));
            m
        }
        None => random_model(&a.dims, a.rank, a.seed)?,
    };
    Ok(Report::Artifact(kruskal_to_json(&model)))
}
