//! The `augcal` command-line tool: Monte Carlo studies, estimation on CSV
//! data and cross-validated choice of γ.

pub mod config;
pub mod table;

use std::fmt;
use std::path::{Path, PathBuf};

use augcal::estimators::CvConfig;
use augcal::gamma::{self, CvResult};
use augcal::montecarlo::{run_with_generator, MonteCarloSummary};
use augcal::propensity::{self, PropensityMethod};
use augcal::simgen::{ExternalTable, Generator};
use augcal::{
    build_basis, estimate_roster, BasisMatrix, BasisSpec, Contamination, Dataset, Error, EstimationConfig, Estimator, Execution,
    MonteCarloConfig, OutcomeModel, PropensityFit, ResponseModel, ScenarioSpec, TransformRegistry,
};

use config::{parse_grid, split_list, Cli, Command, CommonArgs, CvArgs, EstimateArgs, InputArgs, Settings, SimulateArgs};
use table::{fmt_num, meta_path, read_table, InputTable, OutputSet};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NONCONVERGENCE: i32 = 4;

pub const REPLICATIONS_HEADER: &[&str] = &["rep", "estimator", "estimate", "converged"];
pub const SUMMARY_HEADER: &[&str] = &["estimator", "bias", "variance", "rmse", "n_converged", "truth", "mean", "mc_se", "coverage"];
pub const ESTIMATE_HEADER: &[&str] = &["estimator", "estimate", "variance", "ci_lo", "ci_hi", "gamma_used", "diagnostics"];
pub const CV_HEADER: &[&str] = &["gamma", "mspe", "failed_folds", "selected"];

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    NonConvergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_IO,
            CliError::NonConvergence(_) => EXIT_NONCONVERGENCE,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::NonConvergence(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

/// Errors that reflect bad input rather than a numerical failure.
fn is_input_error(e: &Error) -> bool {
    matches!(
        e,
        Error::ShapeMismatch(_)
            | Error::OutcomePresenceViolation(_)
            | Error::NonFiniteBasisValue { .. }
            | Error::InvalidBasis(_)
            | Error::InvalidArgument(_)
            | Error::MissingColumn(_)
    )
}

fn core_error(e: Error) -> CliError {
    match e {
        Error::MissingColumn(c) => CliError::Config(format!("column `{c}` not found")),
        e if is_input_error(&e) => CliError::Config(e.to_string()),
        e => CliError::NonConvergence(e.to_string()),
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::CvGamma(a) => cmd_cv_gamma(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("augcal: {e}");
            e.exit_code()
        }
    }
}

const COMMON_KEYS: &[&str] = &["seed", "threads", "basis", "estimators", "gamma_grid", "folds", "input", "outcome", "covariates", "propensity", "out"];
const SIMULATE_KEYS: &[&str] = &["scenario", "n", "reps", "contamination", "noise_lo", "noise_hi", "target_rate"];

/// Keys left out of the metadata sidecar so that it depends only on what was computed.
const UNRECORDED: &[&str] = &["threads", "out", "config"];

fn load_settings(common: &CommonArgs, extra: &[&str]) -> Result<Settings, CliError> {
    let settings = Settings::load(common.config.as_deref())?;
    let known: Vec<&str> = COMMON_KEYS.iter().chain(extra).copied().collect();
    settings.check_unused(&known)?;
    Ok(settings)
}

fn thread_pool(settings: &mut Settings, flag: Option<usize>) -> Result<rayon::ThreadPool, CliError> {
    let threads = settings.get("threads", flag, Some(0))?.unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {threads} threads: {e}")))
}

fn metadata(command: &str, settings: &Settings, extra: &[(&str, String)]) -> String {
    let mut out = format!("command={command}\nversion={}\n", env!("CARGO_PKG_VERSION"));
    for (k, v) in &settings.resolved {
        if !UNRECORDED.contains(&k.as_str()) {
            out.push_str(&format!("{k}={v}\n"));
        }
    }
    for (k, v) in extra {
        out.push_str(&format!("{k}={v}\n"));
    }
    out
}

fn parse_roster(settings: &mut Settings, flag: Option<String>) -> Result<Vec<Estimator>, CliError> {
    let raw = settings.get("estimators", flag, Some("all".to_string()))?.unwrap_or_default();
    let mut roster = Vec::new();
    for t in split_list(&raw) {
        if t.eq_ignore_ascii_case("all") {
            roster.extend(Estimator::roster_all());
        } else {
            roster.push(t.parse::<Estimator>().map_err(|e| CliError::Config(format!("estimator `{t}`: {e}")))?);
        }
    }
    if roster.is_empty() {
        return Err(CliError::Config("empty estimator roster".into()));
    }
    Ok(roster)
}

fn parse_cv(settings: &mut Settings, common: &CommonArgs, seed: u64) -> Result<CvConfig, CliError> {
    let defaults = CvConfig::default();
    let default_grid = defaults.grid.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(",");
    let grid = parse_grid(&settings.get("gamma_grid", common.gamma_grid.clone(), Some(default_grid))?.unwrap_or_default())?;
    let folds = settings.get("folds", common.folds, Some(defaults.folds))?.unwrap_or(defaults.folds);
    if folds < 2 {
        return Err(CliError::Config(format!("folds must be at least 2, got {folds}")));
    }
    Ok(CvConfig { grid, folds, seed })
}

fn parse_basis(settings: &mut Settings, flag: Option<String>, names: &[String]) -> Result<Option<BasisSpec>, CliError> {
    match settings.get("basis", flag, None)? {
        None => Ok(None),
        Some(raw) => BasisSpec::parse(&split_list(&raw), names, &TransformRegistry::new())
            .map(Some)
            .map_err(core_error),
    }
}

fn load_input(settings: &mut Settings, input: &InputArgs) -> Result<InputTable, CliError> {
    let path = settings.require_path("input", input.input.clone())?;
    let outcome: String = settings.require("outcome", input.outcome.clone())?;
    let covariates = settings.get("covariates", input.covariates.clone(), None)?.map(|c| split_list(&c));
    read_table(&path, &outcome, covariates.as_deref())
}

fn propensity_design(settings: &mut Settings, flag: Option<String>, dataset: &Dataset) -> Result<nalgebra::DMatrix<f64>, CliError> {
    let cols = match settings.get("propensity", flag, None)? {
        None => (0..dataset.covariates().ncols()).collect::<Vec<_>>(),
        Some(raw) => split_list(&raw)
            .iter()
            .map(|c| {
                dataset
                    .covariate_names()
                    .iter()
                    .position(|n| n == c)
                    .ok_or_else(|| CliError::Config(format!("propensity column `{c}` is not a covariate")))
            })
            .collect::<Result<_, _>>()?,
    };
    Ok(propensity::design_from_columns(dataset, &cols))
}

fn basis_matrix(dataset: &Dataset, spec: Option<&BasisSpec>) -> Result<BasisMatrix, CliError> {
    let spec = spec.cloned().unwrap_or_else(|| BasisSpec::linear(dataset.covariates().ncols()));
    build_basis(dataset, &spec).map_err(core_error)
}

fn parse_scenario(label: &str) -> Result<(Option<OutcomeModel>, ResponseModel), CliError> {
    let l = label.trim().to_ascii_uppercase();
    let response = |s: &str| match s {
        "PM1" => Ok(ResponseModel::Pm1),
        "PM2" => Ok(ResponseModel::Pm2),
        "PM3" => Ok(ResponseModel::Pm3),
        "PM4" => Ok(ResponseModel::Pm4),
        _ => Err(CliError::Config(format!("unknown scenario `{label}`"))),
    };
    let (om, pm) = match l.strip_prefix("OM1") {
        Some(rest) => (Some(OutcomeModel::Om1), rest),
        None => match l.strip_prefix("OM2") {
            Some(rest) => (Some(OutcomeModel::Om2), rest),
            None => (None, l.as_str()),
        },
    };
    Ok((om, response(pm)?))
}

fn cmd_simulate(a: SimulateArgs) -> Result<(), CliError> {
    let mut s = load_settings(&a.common, SIMULATE_KEYS)?;
    let scenario: String = s.require("scenario", a.scenario)?;
    let out_dir = s.require_path("out", a.out)?;
    let seed = s.get("seed", a.common.seed, Some(0))?.unwrap_or(0);
    let n = s.get("n", a.n, Some(1000))?.unwrap_or(1000);
    let reps = s.get("reps", a.reps, Some(500))?.unwrap_or(500);
    if reps == 0 {
        return Err(CliError::Config("reps must be positive".into()));
    }
    let fraction = s.get("contamination", a.contamination, Some(0.0))?.unwrap_or(0.0);
    let lo = s.get("noise_lo", a.noise_lo, Some(-50.0))?.unwrap_or(-50.0);
    let hi = s.get("noise_hi", a.noise_hi, Some(50.0))?.unwrap_or(50.0);
    let target = s.get("target_rate", a.target_rate, Some(0.6))?.unwrap_or(0.6);
    let roster = parse_roster(&mut s, a.common.estimators.clone())?;
    let cv = parse_cv(&mut s, &a.common, seed)?;

    let (outcome, response) = parse_scenario(&scenario)?;
    let outcome = match outcome {
        Some(m) => {
            if a.table.input.is_some() {
                return Err(CliError::Config(format!("scenario {scenario} simulates its own covariates; drop --input")));
            }
            m
        }
        None => {
            let t = load_input(&mut s, &a.table)?;
            let outcome = t
                .outcome
                .iter()
                .enumerate()
                .map(|(i, v)| v.ok_or_else(|| CliError::Config(format!("population table has a missing outcome at row {}", i + 1))))
                .collect::<Result<Vec<_>, _>>()?;
            OutcomeModel::External(ExternalTable {
                covariates: t.covariates,
                outcome,
                names: t.names,
            })
        }
    };
    let names = match &outcome {
        OutcomeModel::External(t) => t.names.clone(),
        _ => vec!["x1".to_string(), "x2".to_string()],
    };
    let basis = parse_basis(&mut s, a.common.basis.clone(), &names)?;
    let mut spec = ScenarioSpec::new(outcome, response, n, seed);
    spec.target_rate = target;
    if fraction > 0.0 {
        spec = spec.contaminated(Contamination::uniform(fraction, lo, hi));
    }
    let pool = thread_pool(&mut s, a.common.threads)?;
    let generator = Generator::new(spec).map_err(core_error)?;
    let config = MonteCarloConfig {
        basis,
        estimation: EstimationConfig {
            design: None,
            cv,
            exec: Execution::Sequential,
        },
        exec: Execution::Parallel,
    };
    log::info!("simulating {} with {reps} replications", generator.spec().label());
    let summary = pool.install(|| run_with_generator(&generator, &roster, reps, &config)).map_err(core_error)?;

    std::fs::create_dir_all(&out_dir).map_err(|e| CliError::Io(format!("creating {}: {e}", out_dir.display())))?;
    let mut outputs = OutputSet::default();
    write_simulation(&mut outputs, &out_dir, &summary)?;
    let extra = [
        ("scenario_label", summary.scenario.clone()),
        ("intercept", generator.intercept().to_string()),
        ("truth", summary.truth.value.to_string()),
        ("truth_std_error", summary.truth.std_error.to_string()),
    ];
    outputs.write(&out_dir.join("simulate.meta"), &metadata("simulate", &s, &extra))?;
    outputs.commit();
    Ok(())
}

fn write_simulation(outputs: &mut OutputSet, dir: &Path, summary: &MonteCarloSummary) -> Result<(), CliError> {
    let reps: Vec<Vec<String>> = summary
        .replications
        .iter()
        .map(|r| {
            vec![
                r.rep.to_string(),
                r.estimator.label(),
                fmt_num(r.converged.then_some(r.estimate)),
                r.converged.to_string(),
            ]
        })
        .collect();
    outputs.write_csv(&dir.join("replications.csv"), REPLICATIONS_HEADER, &reps)?;
    let rows: Vec<Vec<String>> = summary
        .estimators
        .iter()
        .map(|e| {
            let ok = e.n_converged > 0;
            vec![
                e.estimator.label(),
                fmt_num(ok.then_some(e.bias)),
                fmt_num(ok.then_some(e.variance)),
                fmt_num(ok.then_some(e.rmse)),
                e.n_converged.to_string(),
                fmt_num(Some(summary.truth.value)),
                fmt_num(ok.then_some(e.mean)),
                fmt_num(ok.then_some(e.mc_se)),
                fmt_num(e.coverage),
            ]
        })
        .collect();
    outputs.write_csv(&dir.join("summary.csv"), SUMMARY_HEADER, &rows)
}

fn output_file(s: &mut Settings, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let out = s.require_path("out", flag)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        if !parent.is_dir() {
            return Err(CliError::Io(format!("output directory {} does not exist", parent.display())));
        }
    }
    Ok(out)
}

fn cmd_estimate(a: EstimateArgs) -> Result<(), CliError> {
    let mut s = load_settings(&a.common, &[])?;
    let out = output_file(&mut s, a.out)?;
    let seed = s.get("seed", a.common.seed, Some(0))?.unwrap_or(0);
    let table = load_input(&mut s, &a.input)?;
    let dataset = table.dataset()?;
    let roster = parse_roster(&mut s, a.common.estimators.clone())?;
    let cv = parse_cv(&mut s, &a.common, seed)?;
    let spec = parse_basis(&mut s, a.common.basis.clone(), &table.names)?;
    let design = propensity_design(&mut s, a.input.propensity.clone(), &dataset)?;
    let basis = basis_matrix(&dataset, spec.as_ref())?;
    let pool = thread_pool(&mut s, a.common.threads)?;
    let config = EstimationConfig {
        design: Some(design),
        cv,
        exec: Execution::Parallel,
    };
    let results = pool.install(|| estimate_roster(&dataset, &basis, &roster, &config));

    let mut failures = Vec::new();
    let mut rows = Vec::with_capacity(roster.len());
    for (est, r) in roster.iter().zip(results) {
        match r {
            Ok(rep) => {
                if !rep.diagnostics.converged {
                    failures.push(format!("{}: solver did not converge", est.label()));
                }
                let (lo, hi) = rep.ci95.unzip();
                rows.push(vec![
                    est.label(),
                    fmt_num(Some(rep.theta)),
                    fmt_num(rep.variance),
                    fmt_num(lo),
                    fmt_num(hi),
                    fmt_num(rep.gamma_used),
                    rep.diagnostics.summary(),
                ]);
            }
            Err(e) if is_input_error(&e) => return Err(core_error(e)),
            Err(e) => {
                failures.push(format!("{}: {e}", est.label()));
                let msg = e.to_string().replace([';', ','], " ");
                rows.push(vec![est.label(), "NA".into(), "NA".into(), "NA".into(), "NA".into(), "NA".into(), format!("error={msg}")]);
            }
        }
    }
    let mut outputs = OutputSet::default();
    outputs.write_csv(&out, ESTIMATE_HEADER, &rows)?;
    let extra = [
        ("n", dataset.n().to_string()),
        ("respondents", dataset.n_respondents().to_string()),
    ];
    outputs.write(&meta_path(&out), &metadata("estimate", &s, &extra))?;
    outputs.commit();
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::NonConvergence(failures.join("; ")))
    }
}

/// MLE propensity fit, or the trivial fit when every outcome is observed.
fn propensity_fit(dataset: &Dataset, design: nalgebra::DMatrix<f64>) -> Result<PropensityFit, CliError> {
    if dataset.n_nonrespondents() == 0 {
        Ok(PropensityFit::full_response(design, PropensityMethod::Mle))
    } else {
        propensity::fit_logistic_mle(dataset, &design).map_err(core_error)
    }
}

fn cmd_cv_gamma(a: CvArgs) -> Result<(), CliError> {
    let mut s = load_settings(&a.common, &[])?;
    let out = output_file(&mut s, a.out)?;
    let seed = s.get("seed", a.common.seed, Some(0))?.unwrap_or(0);
    let table = load_input(&mut s, &a.input)?;
    let dataset = table.dataset()?;
    let cv = parse_cv(&mut s, &a.common, seed)?;
    let spec = parse_basis(&mut s, a.common.basis.clone(), &table.names)?;
    let design = propensity_design(&mut s, a.input.propensity.clone(), &dataset)?;
    let basis = basis_matrix(&dataset, spec.as_ref())?;
    if dataset.n_respondents() == 0 {
        return Err(CliError::Config("no observed outcomes".into()));
    }
    let pool = thread_pool(&mut s, a.common.threads)?;
    let fit = propensity_fit(&dataset, design)?;
    let y = dataset.outcome_or_zero();
    let result: CvResult = pool
        .install(|| gamma::select_gamma_cv(&basis, &y, dataset.delta(), &fit.dhat(), &cv.grid, cv.folds, cv.seed, Execution::Parallel))
        .map_err(core_error)?;
    let rows: Vec<Vec<String>> = result
        .profile
        .iter()
        .map(|p| {
            vec![
                fmt_num(Some(p.gamma)),
                fmt_num(Some(p.mspe)),
                p.failed_folds.to_string(),
                (p.gamma == result.gamma).to_string(),
            ]
        })
        .collect();
    let mut outputs = OutputSet::default();
    outputs.write_csv(&out, CV_HEADER, &rows)?;
    outputs.write(&meta_path(&out), &metadata("cv-gamma", &s, &[("selected_gamma", result.gamma.to_string())]))?;
    outputs.commit();
    Ok(())
}
