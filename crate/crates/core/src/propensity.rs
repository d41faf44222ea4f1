//! Working propensity score models `logit π₀(x; φ) = φᵀx̃`.
//!
//! Two fits are provided: the ordinary maximum likelihood fit, and the
//! calibrated fit whose first-order condition makes the inverse probability
//! weights reproduce the full-sample design totals exactly.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{self, MAX_CONDITION};

/// Coefficient magnitude beyond which fitted probabilities are numerically 0 or 1.
pub const SEPARATION_LIMIT: f64 = 30.0;
/// Clamp applied to probabilities when forming `d̂ = 1/π̂`.
pub const PROB_CLAMP: f64 = 1e-10;

const TAN_DIVERGENCE_LIMIT: f64 = 50.0;
const MAX_HALVINGS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropensityMethod {
    Mle,
    TanCalibrated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropensityFit {
    phi: DVector<f64>,
    probs: Vec<f64>,
    method: PropensityMethod,
    design: DMatrix<f64>,
    iterations: usize,
    gradient_norm: f64,
    converged: bool,
}

impl PropensityFit {
    /// The degenerate fit used when every outcome is observed: `π ≡ 1`.
    pub fn full_response(design: DMatrix<f64>, method: PropensityMethod) -> Self {
        let n = design.nrows();
        Self {
            phi: DVector::zeros(design.ncols()),
            probs: vec![1.0; n],
            method,
            design,
            iterations: 0,
            gradient_norm: 0.0,
            converged: true,
        }
    }

    pub fn phi(&self) -> &DVector<f64> {
        &self.phi
    }

    /// Fitted `π₀(x_i; φ̂)` for every row.
    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn method(&self) -> PropensityMethod {
        self.method
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Max-norm of the defining first-order condition at the returned `φ̂`.
    pub fn gradient_norm(&self) -> f64 {
        self.gradient_norm
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    /// `d̂_i = 1/π̂_i` with `π̂` clamped away from 0 and 1.
    pub fn dhat(&self) -> Vec<f64> {
        self.probs
            .iter()
            .map(|&p| if p == 1.0 { 1.0 } else { 1.0 / p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP) })
            .collect()
    }

    /// `h(x_i; φ̂) = π₀(x_i; φ̂) x̃_i`, the choice that turns the φ estimating
    /// equation into the logistic score.
    pub fn h(&self, row: usize) -> DVector<f64> {
        h_function(self.probs[row], &self.design.row(row).transpose())
    }

    /// `∂ logit π₀(x_i; φ) / ∂φ`, which is just `x̃_i`.
    pub fn logit_gradient(&self, row: usize) -> DVector<f64> {
        self.design.row(row).transpose()
    }

    /// `(Σ π̂_i(1-π̂_i) x̃_i x̃_iᵀ)⁻¹`, the inverse observed information.
    pub fn covariance(&self) -> Option<DMatrix<f64>> {
        let rows: Vec<usize> = (0..self.probs.len()).collect();
        let w: Vec<f64> = self.probs.iter().map(|p| p * (1.0 - p)).collect();
        linalg::weighted_gram(&self.design, &rows, &w).try_inverse()
    }

    pub fn standard_errors(&self) -> Option<DVector<f64>> {
        self.covariance().map(|c| c.diagonal().map(f64::sqrt))
    }
}

pub fn h_function(prob: f64, design_row: &DVector<f64>) -> DVector<f64> {
    design_row * prob
}

#[inline]
pub fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn log1p_exp(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

/// Default propensity design: intercept followed by every covariate.
pub fn default_design(dataset: &Dataset) -> DMatrix<f64> {
    design_from_columns(dataset, &(0..dataset.covariates().ncols()).collect::<Vec<_>>())
}

/// Intercept followed by the listed covariate columns.
pub fn design_from_columns(dataset: &Dataset, cols: &[usize]) -> DMatrix<f64> {
    let x = dataset.covariates();
    DMatrix::from_fn(x.nrows(), cols.len() + 1, |i, j| if j == 0 { 1.0 } else { x[(i, cols[j - 1])] })
}

fn check_design(dataset: &Dataset, design: &DMatrix<f64>) -> Result<()> {
    let (n, p) = design.shape();
    if n != dataset.n() {
        return Err(Error::ShapeMismatch(format!("design has {n} rows, dataset {}", dataset.n())));
    }
    if p == 0 || n < p {
        return Err(Error::ShapeMismatch(format!("design is {n} x {p}")));
    }
    if design.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("design must be finite".into()));
    }
    let gram = design.transpose() * design;
    if linalg::spd_condition(&gram) > MAX_CONDITION {
        return Err(Error::SingularHessian("propensity design is rank deficient"));
    }
    Ok(())
}

/// `ℓ(φ) = Σ δ_i η_i − log(1 + e^{η_i})`, divided by `n`.
pub fn log_likelihood(design: &DMatrix<f64>, delta: &[bool], phi: &DVector<f64>) -> f64 {
    let eta = design * phi;
    let n = delta.len() as f64;
    eta.iter()
        .zip(delta)
        .map(|(&e, &d)| if d { e } else { 0.0 } - log1p_exp(e))
        .sum::<f64>()
        / n
}

fn mle_score_and_info(design: &DMatrix<f64>, delta: &[bool], phi: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>, Vec<f64>) {
    let n = delta.len();
    let eta = design * phi;
    let probs: Vec<f64> = eta.iter().map(|&e| expit(e)).collect();
    let rows: Vec<usize> = (0..n).collect();
    let resid: Vec<f64> = probs
        .iter()
        .zip(delta)
        .map(|(p, &d)| (if d { 1.0 } else { 0.0 } - p) / n as f64)
        .collect();
    let score = linalg::weighted_row_sum(design, &rows, &resid);
    let w: Vec<f64> = probs.iter().map(|p| p * (1.0 - p) / n as f64).collect();
    let info = linalg::weighted_gram(design, &rows, &w);
    (score, info, probs)
}

/// Whether `φᵀx̃` puts every respondent strictly above every nonrespondent's
/// side of zero, in which case the likelihood has no finite maximizer.
fn perfectly_classified(design: &DMatrix<f64>, delta: &[bool], phi: &DVector<f64>) -> bool {
    let eta = design * phi;
    eta.iter().zip(delta).all(|(&e, &d)| if d { e > 0.0 } else { e < 0.0 })
}

/// Logistic maximum likelihood by damped Newton iterations.
pub fn fit_logistic_mle(dataset: &Dataset, design: &DMatrix<f64>) -> Result<PropensityFit> {
    fit_logistic_mle_with(dataset, design, NewtonOptions::default())
}

pub fn fit_logistic_mle_with(dataset: &Dataset, design: &DMatrix<f64>, opts: NewtonOptions) -> Result<PropensityFit> {
    check_design(dataset, design)?;
    let delta = dataset.delta();
    let mut phi = DVector::zeros(design.ncols());
    let mut objective = log_likelihood(design, delta, &phi);
    let mut polished = false;

    for iter in 0..=opts.max_iter {
        let (score, info, probs) = mle_score_and_info(design, delta, &phi);
        let norm = linalg::max_abs(&score);
        if norm <= opts.tol && (polished || norm == 0.0) {
            if perfectly_classified(design, delta, &phi) {
                return Err(Error::SeparationDetected {
                    limit: SEPARATION_LIMIT,
                });
            }
            return Ok(PropensityFit {
                phi,
                probs,
                method: PropensityMethod::Mle,
                design: design.clone(),
                iterations: iter,
                gradient_norm: norm,
                converged: true,
            });
        }
        if iter == opts.max_iter {
            return Err(Error::MaxIterationsExceeded {
                solver: "logistic MLE",
                iterations: opts.max_iter,
                residual: norm,
            });
        }
        let step = match linalg::solve_spd(&info, &score).filter(|_| linalg::spd_condition(&info) <= MAX_CONDITION) {
            Some(step) => step,
            None if perfectly_classified(design, delta, &phi) => {
                return Err(Error::SeparationDetected {
                    limit: SEPARATION_LIMIT,
                })
            }
            None => return Err(Error::SingularHessian("logistic MLE")),
        };
        let before = norm;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let trial = &phi + &step * t;
            let obj = log_likelihood(design, delta, &trial);
            if obj.is_finite() && obj >= objective - 1e-14 * objective.abs().max(1.0) {
                phi = trial;
                objective = obj;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // Stalled at rounding level: accept if already within tolerance.
            if before <= opts.tol {
                polished = true;
                continue;
            }
            return Err(Error::MaxIterationsExceeded {
                solver: "logistic MLE line search",
                iterations: iter,
                residual: before,
            });
        }
        if phi.iter().any(|v| v.abs() > SEPARATION_LIMIT) {
            return Err(Error::SeparationDetected {
                limit: SEPARATION_LIMIT,
            });
        }
        if before <= opts.tol {
            polished = true;
        }
    }
    unreachable!("loop returns on the final iteration")
}

/// `n⁻¹ Σ [δ_i e^{-φᵀx̃_i} + (1-δ_i) φᵀx̃_i]`.
///
/// Its stationarity condition is `Σ δ_i π_i⁻¹ x̃_i = Σ x̃_i`.
pub fn tan_objective(design: &DMatrix<f64>, delta: &[bool], phi: &DVector<f64>) -> f64 {
    let eta = design * phi;
    let n = delta.len() as f64;
    eta.iter()
        .zip(delta)
        .map(|(&e, &d)| if d { (-e).exp() } else { e })
        .sum::<f64>()
        / n
}

fn tan_gradient_and_hessian(design: &DMatrix<f64>, delta: &[bool], phi: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = delta.len() as f64;
    let eta = design * phi;
    let rows: Vec<usize> = (0..delta.len()).collect();
    let g: Vec<f64> = eta
        .iter()
        .zip(delta)
        .map(|(&e, &d)| if d { -(-e).exp() / n } else { 1.0 / n })
        .collect();
    let h: Vec<f64> = eta
        .iter()
        .zip(delta)
        .map(|(&e, &d)| if d { (-e).exp() / n } else { 0.0 })
        .collect();
    (
        linalg::weighted_row_sum(design, &rows, &g),
        linalg::weighted_gram(design, &rows, &h),
    )
}

/// Calibrated propensity fit minimizing [`tan_objective`].
pub fn fit_tan_calibrated(dataset: &Dataset, design: &DMatrix<f64>) -> Result<PropensityFit> {
    fit_tan_calibrated_with(dataset, design, NewtonOptions::default())
}

pub fn fit_tan_calibrated_with(dataset: &Dataset, design: &DMatrix<f64>, opts: NewtonOptions) -> Result<PropensityFit> {
    check_design(dataset, design)?;
    if dataset.n_nonrespondents() == 0 {
        // Σ δ e^{-η} x̃ = 0 has no solution with an intercept in the design.
        return Err(Error::Unbounded);
    }
    let delta = dataset.delta();
    let mut phi = DVector::zeros(design.ncols());
    let mut objective = tan_objective(design, delta, &phi);
    let mut polished = false;

    for iter in 0..=opts.max_iter {
        let (grad, hess) = tan_gradient_and_hessian(design, delta, &phi);
        let norm = linalg::max_abs(&grad);
        if norm <= opts.tol && (polished || norm == 0.0) {
            let probs = (design * &phi).iter().map(|&e| expit(e)).collect();
            return Ok(PropensityFit {
                phi,
                probs,
                method: PropensityMethod::TanCalibrated,
                design: design.clone(),
                iterations: iter,
                gradient_norm: norm,
                converged: true,
            });
        }
        if iter == opts.max_iter {
            return Err(Error::MaxIterationsExceeded {
                solver: "calibrated propensity",
                iterations: opts.max_iter,
                residual: norm,
            });
        }
        if linalg::spd_condition(&hess) > MAX_CONDITION {
            return Err(Error::SingularHessian("calibrated propensity"));
        }
        let step = linalg::solve_spd(&hess, &(-&grad)).ok_or(Error::SingularHessian("calibrated propensity"))?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let trial = &phi + &step * t;
            let obj = tan_objective(design, delta, &trial);
            if obj.is_finite() && obj <= objective + 1e-14 * objective.abs().max(1.0) {
                phi = trial;
                objective = obj;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            if norm <= opts.tol {
                polished = true;
                continue;
            }
            return Err(Error::Unbounded);
        }
        if phi.iter().any(|v| v.abs() > TAN_DIVERGENCE_LIMIT) {
            return Err(Error::Unbounded);
        }
        if norm <= opts.tol {
            polished = true;
        }
    }
    unreachable!("loop returns on the final iteration")
}

/// `max |n⁻¹ Σ (δ_i − π_i) x̃_i|`.
pub fn score_residual(fit: &PropensityFit, delta: &[bool]) -> f64 {
    let n = delta.len() as f64;
    let rows: Vec<usize> = (0..delta.len()).collect();
    let r: Vec<f64> = fit
        .probs
        .iter()
        .zip(delta)
        .map(|(p, &d)| (if d { 1.0 } else { 0.0 } - p) / n)
        .collect();
    linalg::max_abs(&linalg::weighted_row_sum(&fit.design, &rows, &r))
}

/// `max |n⁻¹ Σ δ_i π_i⁻¹ x̃_i − n⁻¹ Σ x̃_i|`.
pub fn ipw_design_residual(fit: &PropensityFit, delta: &[bool]) -> f64 {
    let n = delta.len() as f64;
    let rows: Vec<usize> = (0..delta.len()).collect();
    let r: Vec<f64> = fit
        .probs
        .iter()
        .zip(delta)
        .map(|(p, &d)| (if d { 1.0 / p } else { 0.0 } - 1.0) / n)
        .collect();
    linalg::max_abs(&linalg::weighted_row_sum(&fit.design, &rows, &r))
}
