//! The six point estimators of the population mean and a roster runner.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::balancing::{self, EntropyBalancing};
use crate::data::{BasisMatrix, Dataset, FitState, WeightSet};
use crate::error::{Error, Result};
use crate::gamma::{self, CvResult, GammaFit};
use crate::linalg;
use crate::parallel::Execution;
use crate::propensity::{self, PropensityFit, PropensityMethod};
use crate::variance::{self, InfluenceVector};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959964;

/// Tolerance, per observation, on the gap between weighting and imputation forms.
pub const DUAL_FORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaChoice {
    Fixed(f64),
    CrossValidated,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Estimator {
    Cc,
    Glm,
    Hm,
    Tan,
    Aps,
    ApsGamma(GammaChoice),
}

impl Estimator {
    /// Every estimator with γ = 0.5 for the robust one.
    pub fn roster_all() -> Vec<Estimator> {
        vec![
            Estimator::Cc,
            Estimator::Glm,
            Estimator::Hm,
            Estimator::Tan,
            Estimator::Aps,
            Estimator::ApsGamma(GammaChoice::Fixed(0.5)),
        ]
    }

    pub fn label(&self) -> String {
        match self {
            Estimator::Cc => "CC".into(),
            Estimator::Glm => "GLM".into(),
            Estimator::Hm => "HM".into(),
            Estimator::Tan => "Tan".into(),
            Estimator::Aps => "APS".into(),
            Estimator::ApsGamma(GammaChoice::Fixed(g)) => format!("APSgamma({g})"),
            Estimator::ApsGamma(GammaChoice::CrossValidated) => "APSgamma(cv)".into(),
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    /// Accepts `cc`, `glm`, `hm`, `tan`, `aps`, `aps-gamma=<γ>` and `aps-gamma=cv`
    /// (case-insensitive), as well as the labels produced by [`Estimator::label`].
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        let gamma_arg = t
            .strip_prefix("aps-gamma=")
            .or_else(|| t.strip_prefix("apsgamma(").and_then(|r| r.strip_suffix(')')));
        if let Some(arg) = gamma_arg {
            if arg == "cv" {
                return Ok(Estimator::ApsGamma(GammaChoice::CrossValidated));
            }
            let g: f64 = arg
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad gamma value in estimator '{s}'")))?;
            if !(g >= 0.0) || !g.is_finite() {
                return Err(Error::InvalidArgument(format!("gamma must be finite and nonnegative in '{s}'")));
            }
            return Ok(Estimator::ApsGamma(GammaChoice::Fixed(g)));
        }
        match t.as_str() {
            "cc" => Ok(Estimator::Cc),
            "glm" | "psw" | "ipw" => Ok(Estimator::Glm),
            "hm" => Ok(Estimator::Hm),
            "tan" => Ok(Estimator::Tan),
            "aps" | "apsw" => Ok(Estimator::Aps),
            _ => Err(Error::InvalidArgument(format!("unknown estimator '{s}'"))),
        }
    }
}

/// Solver diagnostics attached to a report.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diagnostics {
    pub converged: bool,
    pub iterations: usize,
    pub calibration_residual: Option<f64>,
    /// `|Σ δ_i ω_i y_i − Σ {δ_i y_i + (1 − δ_i) b_iᵀβ̂}|`.
    pub dual_gap: Option<f64>,
    pub fit: Option<FitState>,
    pub gamma_fit: Option<GammaFit>,
    pub cv: Option<CvResult>,
    /// Why the variance slot is empty for an estimator that normally fills it.
    pub variance_error: Option<String>,
}

impl Diagnostics {
    /// `key=value` pairs separated by `;`, for tabular output.
    pub fn summary(&self) -> String {
        let mut parts = vec![format!("converged={}", self.converged), format!("iterations={}", self.iterations)];
        if let Some(r) = self.calibration_residual {
            parts.push(format!("calibration_residual={r:e}"));
        }
        if let Some(g) = self.dual_gap {
            parts.push(format!("dual_gap={g:e}"));
        }
        if let Some(f) = &self.gamma_fit {
            parts.push(format!("sigma2={}", f.sigma2));
            parts.push(format!("outer_iterations={}", f.outer_iterations));
        }
        if let Some(e) = &self.variance_error {
            parts.push(format!("variance_error={}", e.replace([';', ','], " ")));
        }
        parts.join(";")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    pub estimator: Estimator,
    pub theta: f64,
    pub variance: Option<f64>,
    pub ci95: Option<(f64, f64)>,
    /// γ actually used by the robust estimator (after cross-validation).
    pub gamma_used: Option<f64>,
    pub diagnostics: Diagnostics,
}

impl EstimateReport {
    fn new(estimator: Estimator, theta: f64, diagnostics: Diagnostics) -> Self {
        Self {
            estimator,
            theta,
            variance: None,
            ci95: None,
            gamma_used: None,
            diagnostics,
        }
    }

    fn with_variance(mut self, v: Option<f64>) -> Self {
        self.variance = v;
        self.ci95 = v.map(|v| {
            let half = Z95 * v.max(0.0).sqrt();
            (self.theta - half, self.theta + half)
        });
        self
    }
}

fn require_respondents(dataset: &Dataset) -> Result<()> {
    if dataset.n_respondents() == 0 {
        Err(Error::EmptyRespondentSet)
    } else {
        Ok(())
    }
}

/// `n₁⁻¹ Σ δ_i y_i`.
pub fn estimate_cc(dataset: &Dataset) -> Result<EstimateReport> {
    require_respondents(dataset)?;
    let y = dataset.observed();
    let theta = y.iter().sum::<f64>() / y.len() as f64;
    Ok(EstimateReport::new(
        Estimator::Cc,
        theta,
        Diagnostics {
            converged: true,
            ..Default::default()
        },
    ))
}

fn propensity_diagnostics(fit: &PropensityFit) -> Diagnostics {
    Diagnostics {
        converged: fit.converged(),
        iterations: fit.iterations(),
        ..Default::default()
    }
}

fn ipw_mean(dataset: &Dataset, fit: &PropensityFit) -> f64 {
    let d = fit.dhat();
    let y = dataset.outcome_or_zero();
    dataset.respondents().iter().map(|&i| d[i] * y[i]).sum::<f64>() / dataset.n() as f64
}

/// `n⁻¹ Σ δ_i d̂_i y_i` with the maximum likelihood propensity fit.
pub fn estimate_ipw(dataset: &Dataset, fit: &PropensityFit) -> Result<EstimateReport> {
    require_respondents(dataset)?;
    Ok(EstimateReport::new(Estimator::Glm, ipw_mean(dataset, fit), propensity_diagnostics(fit)))
}

/// Inverse probability weighting with the calibrated propensity fit.
pub fn estimate_tan(dataset: &Dataset, design: &DMatrix<f64>) -> Result<EstimateReport> {
    require_respondents(dataset)?;
    let fit = if dataset.n_nonrespondents() == 0 {
        PropensityFit::full_response(design.clone(), PropensityMethod::TanCalibrated)
    } else {
        propensity::fit_tan_calibrated(dataset, design)?
    };
    estimate_tan_with_fit(dataset, &fit)
}

pub fn estimate_tan_with_fit(dataset: &Dataset, fit: &PropensityFit) -> Result<EstimateReport> {
    require_respondents(dataset)?;
    let mut diag = propensity_diagnostics(fit);
    diag.calibration_residual = Some(propensity::ipw_design_residual(fit, dataset.delta()));
    Ok(EstimateReport::new(Estimator::Tan, ipw_mean(dataset, fit), diag))
}

/// Weighted mean with entropy-balancing weights started from `d̂`.
pub fn estimate_hm(dataset: &Dataset, basis: &BasisMatrix, fit: &PropensityFit) -> Result<EstimateReport> {
    require_respondents(dataset)?;
    let EntropyBalancing { weights, iterations, .. } = balancing::solve_entropy_balancing(basis, &fit.dhat(), dataset.delta())?;
    let theta = weights.weighted_mean(&dataset.outcome_or_zero(), dataset.n());
    Ok(EstimateReport::new(
        Estimator::Hm,
        theta,
        Diagnostics {
            converged: true,
            iterations,
            calibration_residual: Some(weights.calibration_residual()),
            ..Default::default()
        },
    ))
}

/// Weighting and imputation forms, and the gap between their sums.
fn dual_forms(basis: &BasisMatrix, dataset: &Dataset, weights: &WeightSet, beta: &DVector<f64>) -> (f64, f64, f64) {
    let n = dataset.n();
    let y = dataset.outcome_or_zero();
    let weighting = weights.weighted_mean(&y, n);
    let imputation = balancing::imputation_estimate(basis, dataset.delta(), &y, beta);
    (weighting, imputation, (weighting - imputation).abs() * n as f64)
}

fn check_dual_form(gap: f64, n: usize) -> Result<()> {
    if gap <= DUAL_FORM_TOL * n as f64 {
        Ok(())
    } else {
        Err(Error::DualFormMismatch { gap })
    }
}

/// Augmented propensity score fit: λ̂, weights, the bias-calibrated β̂ and
/// both forms of the estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct ApsFit {
    pub lambda: DVector<f64>,
    pub beta: DVector<f64>,
    pub weights: WeightSet,
    pub theta_weighting: f64,
    pub theta_imputation: f64,
    pub dual_gap: f64,
    pub lambda_iterations: usize,
}

pub fn fit_aps(dataset: &Dataset, basis: &BasisMatrix, fit: &PropensityFit) -> Result<ApsFit> {
    require_respondents(dataset)?;
    let dhat = fit.dhat();
    let delta = dataset.delta();
    let y = dataset.outcome_or_zero();
    let solve = balancing::solve_aps_lambda(basis, &dhat, delta)?;
    let weights = balancing::aps_weights(basis, &dhat, &solve.lambda, delta)?;
    let beta = if weights.weights().iter().all(|&w| w == 1.0) {
        // Any β satisfies the bias-calibration condition; report least squares.
        let rows = dataset.respondents();
        let yr: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
        linalg::weighted_least_squares(basis.values(), &rows, &vec![1.0; rows.len()], &yr).ok_or(Error::SingularNormalEquations)?
    } else {
        balancing::ibc_beta(basis, &y, &weights)?
    };
    let (theta_weighting, theta_imputation, dual_gap) = dual_forms(basis, dataset, &weights, &beta);
    Ok(ApsFit {
        lambda_iterations: solve.iterations(),
        lambda: solve.lambda,
        beta,
        weights,
        theta_weighting,
        theta_imputation,
        dual_gap,
    })
}

/// Influence values for the augmented estimator.
pub fn aps_influence(dataset: &Dataset, basis: &BasisMatrix, fit: &PropensityFit, aps: &ApsFit) -> Result<InfluenceVector> {
    let y = dataset.outcome_or_zero();
    let delta = dataset.delta();
    let kappa = variance::solve_kappa_t1(basis, delta, &y, fit, &aps.lambda, &aps.beta)?;
    Ok(variance::influence_t1(basis, delta, &y, fit, &aps.lambda, &aps.beta, &kappa))
}

/// `n⁻¹ Σ δ_i ω_i y_i` with augmented weights; variance from its influence function.
pub fn estimate_aps(dataset: &Dataset, basis: &BasisMatrix, fit: &PropensityFit) -> Result<EstimateReport> {
    let aps = fit_aps(dataset, basis, fit)?;
    check_dual_form(aps.dual_gap, dataset.n())?;
    let (variance, variance_error) = match aps_influence(dataset, basis, fit, &aps) {
        Ok(inf) => (Some(inf.variance()), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let state = FitState {
        phi: fit.phi().clone(),
        lambda: aps.lambda.clone(),
        beta: aps.beta.clone(),
        sigma2: f64::NAN,
        gamma: 0.0,
        iterations: aps.lambda_iterations,
        converged: true,
        gradient_norm: fit.gradient_norm(),
    };
    let diag = Diagnostics {
        converged: true,
        iterations: aps.lambda_iterations,
        calibration_residual: Some(aps.weights.calibration_residual()),
        dual_gap: Some(aps.dual_gap),
        fit: Some(state),
        variance_error,
        ..Default::default()
    };
    Ok(EstimateReport::new(Estimator::Aps, aps.theta_weighting, diag).with_variance(variance))
}

/// The robust augmented fit at a fixed γ with both forms of the estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct ApsGammaFit {
    pub fit: GammaFit,
    pub weights: WeightSet,
    pub theta_weighting: f64,
    pub theta_imputation: f64,
    pub dual_gap: f64,
}

pub fn fit_aps_gamma(dataset: &Dataset, basis: &BasisMatrix, fit: &PropensityFit, gamma: f64) -> Result<ApsGammaFit> {
    require_respondents(dataset)?;
    let dhat = fit.dhat();
    let y = dataset.outcome_or_zero();
    let gfit = gamma::solve_gamma_system(basis, &y, dataset.delta(), &dhat, gamma)?;
    let weights = gamma::gamma_weights(&gfit, &dhat, basis)?;
    let (theta_weighting, theta_imputation, dual_gap) = dual_forms(basis, dataset, &weights, &gfit.beta);
    Ok(ApsGammaFit {
        fit: gfit,
        weights,
        theta_weighting,
        theta_imputation,
        dual_gap,
    })
}

pub fn aps_gamma_influence(dataset: &Dataset, basis: &BasisMatrix, fit: &PropensityFit, robust: &GammaFit) -> Result<InfluenceVector> {
    let y = dataset.outcome_or_zero();
    let dhat = fit.dhat();
    let nuisance = variance::solve_nuisance_t2(basis, &y, &dhat, robust)?;
    let kappa = variance::solve_kappa_t2(basis, &y, fit, robust, &nuisance)?;
    Ok(variance::influence_t2(basis, dataset.delta(), &y, fit, robust, &nuisance, &kappa))
}

/// Cross-validation settings for choosing γ.
#[derive(Debug, Clone, PartialEq)]
pub struct CvConfig {
    pub grid: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            grid: (1..=10).map(|k| k as f64 / 10.0).collect(),
            folds: 5,
            seed: 0,
        }
    }
}

/// Robust augmented estimator at a fixed γ.
pub fn estimate_aps_gamma(dataset: &Dataset, basis: &BasisMatrix, fit: &PropensityFit, gamma: f64) -> Result<EstimateReport> {
    estimate_aps_gamma_inner(dataset, basis, fit, gamma, Estimator::ApsGamma(GammaChoice::Fixed(gamma)), None)
}

/// Robust augmented estimator with γ chosen by K-fold cross-validation.
pub fn estimate_aps_gamma_cv(dataset: &Dataset, basis: &BasisMatrix, fit: &PropensityFit, cv: &CvConfig, exec: Execution) -> Result<EstimateReport> {
    require_respondents(dataset)?;
    let y = dataset.outcome_or_zero();
    let chosen = gamma::select_gamma_cv(basis, &y, dataset.delta(), &fit.dhat(), &cv.grid, cv.folds, cv.seed, exec)?;
    let gamma = chosen.gamma;
    estimate_aps_gamma_inner(dataset, basis, fit, gamma, Estimator::ApsGamma(GammaChoice::CrossValidated), Some(chosen))
}

fn estimate_aps_gamma_inner(
    dataset: &Dataset,
    basis: &BasisMatrix,
    fit: &PropensityFit,
    gamma: f64,
    tag: Estimator,
    cv: Option<CvResult>,
) -> Result<EstimateReport> {
    let robust = fit_aps_gamma(dataset, basis, fit, gamma)?;
    check_dual_form(robust.dual_gap, dataset.n())?;
    let (variance, variance_error) = match aps_gamma_influence(dataset, basis, fit, &robust.fit) {
        Ok(inf) => (Some(inf.variance()), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let g = &robust.fit;
    let state = FitState {
        phi: fit.phi().clone(),
        lambda: g.lambda.clone(),
        beta: g.beta.clone(),
        sigma2: g.sigma2,
        gamma,
        iterations: g.outer_iterations,
        converged: g.converged,
        gradient_norm: g.residuals.max(),
    };
    let diag = Diagnostics {
        converged: g.converged,
        iterations: g.outer_iterations,
        calibration_residual: Some(robust.weights.calibration_residual()),
        dual_gap: Some(robust.dual_gap),
        fit: Some(state),
        gamma_fit: Some(robust.fit.clone()),
        cv,
        variance_error,
    };
    let mut report = EstimateReport::new(tag, robust.theta_weighting, diag).with_variance(variance);
    report.gamma_used = Some(gamma);
    Ok(report)
}

/// Settings shared by a roster of estimators on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimationConfig {
    /// Propensity design; defaults to an intercept plus every covariate.
    pub design: Option<DMatrix<f64>>,
    pub cv: CvConfig,
    pub exec: Execution,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            design: None,
            cv: CvConfig::default(),
            exec: Execution::Sequential,
        }
    }
}

/// Runs every estimator in `roster`, fitting each propensity model at most once.
///
/// Results are returned in roster order; one estimator failing does not stop the others.
pub fn estimate_roster(dataset: &Dataset, basis: &BasisMatrix, roster: &[Estimator], config: &EstimationConfig) -> Vec<Result<EstimateReport>> {
    let design = config.design.clone().unwrap_or_else(|| propensity::default_design(dataset));
    let full = dataset.n_nonrespondents() == 0;
    let mut mle: Option<Result<PropensityFit>> = None;
    let mut mle_fit = || -> Result<PropensityFit> {
        mle.get_or_insert_with(|| {
            if full {
                Ok(PropensityFit::full_response(design.clone(), PropensityMethod::Mle))
            } else {
                propensity::fit_logistic_mle(dataset, &design)
            }
        })
        .clone()
    };
    let mut out = Vec::with_capacity(roster.len());
    for est in roster {
        let report = match *est {
            Estimator::Cc => estimate_cc(dataset),
            Estimator::Glm => mle_fit().and_then(|f| estimate_ipw(dataset, &f)),
            Estimator::Hm => mle_fit().and_then(|f| estimate_hm(dataset, basis, &f)),
            Estimator::Tan => estimate_tan(dataset, &design),
            Estimator::Aps => mle_fit().and_then(|f| estimate_aps(dataset, basis, &f)),
            Estimator::ApsGamma(GammaChoice::Fixed(g)) => mle_fit().and_then(|f| estimate_aps_gamma(dataset, basis, &f, g)),
            Estimator::ApsGamma(GammaChoice::CrossValidated) => {
                mle_fit().and_then(|f| estimate_aps_gamma_cv(dataset, basis, &f, &config.cv, config.exec))
            }
        };
        out.push(report);
    }
    out
}
