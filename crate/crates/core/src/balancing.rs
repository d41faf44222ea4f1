//! Calibration weights from Lagrange multipliers.
//!
//! The augmented weights are `ω_i = 1 + a_i exp(b_iᵀλ)` with `a_i = d̂_i − 1`
//! (possibly scaled further by the robust factor `q_{γ,i}`), and λ is chosen
//! so that `n⁻¹ Σ δ_i ω_i b_i = n⁻¹ Σ b_i`. The map
//!
//! ```text
//! F(λ) = n⁻¹ Σ δ_i (1 + a_i e^{b_iᵀλ}) b_i − n⁻¹ Σ b_i
//! ```
//!
//! is the gradient of the convex potential `n⁻¹ Σ δ_i a_i e^{b_iᵀλ} − λᵀc`,
//! so damped Newton converges globally whenever the system is feasible.

use nalgebra::{DMatrix, DVector};

use crate::data::{BasisMatrix, WeightSet, WeightSource};
use crate::error::{Error, Result};
use crate::linalg::{self, MAX_CONDITION};

/// Largest admissible `exp(b_iᵀλ)` during the augmented-weight solve.
pub const OVERFLOW_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for LambdaOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            max_halvings: 30,
        }
    }
}

/// Lagrange multipliers and the trace of `‖F(λ)‖_∞` over Newton iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSolve {
    pub lambda: DVector<f64>,
    pub residual_history: Vec<f64>,
    pub converged: bool,
}

impl LambdaSolve {
    pub fn residual(&self) -> f64 {
        self.residual_history.last().copied().unwrap_or(f64::NAN)
    }

    pub fn iterations(&self) -> usize {
        self.residual_history.len().saturating_sub(1)
    }
}

fn respondent_rows(delta: &[bool]) -> Vec<usize> {
    (0..delta.len()).filter(|&i| delta[i]).collect()
}

/// `(F(λ), exp(b_iᵀλ) over respondents)`; `None` when a factor overflows.
fn calibration_map(basis: &BasisMatrix, rows: &[usize], excess: &[f64], lambda: &DVector<f64>) -> Option<(DVector<f64>, Vec<f64>)> {
    let n = basis.nrows() as f64;
    let mut g = Vec::with_capacity(rows.len());
    let mut w = Vec::with_capacity(rows.len());
    for (&i, &a) in rows.iter().zip(excess) {
        let e = basis.row_dot(i, lambda).exp();
        if !(e <= OVERFLOW_LIMIT) {
            return None;
        }
        g.push(e);
        w.push((1.0 + a * e) / n);
    }
    let f = linalg::weighted_row_sum(basis.values(), rows, &w) - basis.means();
    Some((f, g))
}

/// Solves for λ in the augmented-weight calibration equations.
///
/// `dhat` is indexed by dataset row; only respondent entries are read.
pub fn solve_aps_lambda(basis: &BasisMatrix, dhat: &[f64], delta: &[bool]) -> Result<LambdaSolve> {
    let rows = respondent_rows(delta);
    let excess: Vec<f64> = rows.iter().map(|&i| dhat[i] - 1.0).collect();
    solve_calibration_lambda(basis, &rows, &excess, None, LambdaOptions::default())
}

/// Damped Newton for `F(λ) = 0` with per-respondent excess factors `a_i ≥ 0`.
pub fn solve_calibration_lambda(
    basis: &BasisMatrix,
    rows: &[usize],
    excess: &[f64],
    start: Option<&DVector<f64>>,
    opts: LambdaOptions,
) -> Result<LambdaSolve> {
    let k = basis.ncols();
    if rows.len() != excess.len() {
        return Err(Error::ShapeMismatch("respondent rows and excess factors differ in length".into()));
    }
    if excess.iter().any(|a| !a.is_finite() || *a < 0.0) {
        return Err(Error::InvalidArgument("excess factors d_i - 1 must be finite and nonnegative".into()));
    }
    let n = basis.nrows() as f64;
    let mut lambda = start.cloned().unwrap_or_else(|| DVector::zeros(k));
    let (mut f, mut g) = calibration_map(basis, rows, excess, &lambda).ok_or(Error::WeightOverflow { limit: OVERFLOW_LIMIT })?;
    let mut history = vec![linalg::max_abs(&f)];

    if excess.iter().all(|&a| a == 0.0) {
        // ω ≡ 1 whatever λ is.
        return if history[0] <= opts.tol {
            Ok(LambdaSolve {
                lambda: DVector::zeros(k),
                residual_history: history,
                converged: true,
            })
        } else {
            Err(Error::SingularJacobian("augmented calibration (all d_i = 1)"))
        };
    }

    let mut polished = false;
    for _ in 0..opts.max_iter {
        let norm = *history.last().unwrap();
        if norm <= opts.tol && (polished || norm == 0.0) {
            return Ok(LambdaSolve {
                lambda,
                residual_history: history,
                converged: true,
            });
        }
        let jw: Vec<f64> = excess.iter().zip(&g).map(|(a, e)| a * e / n).collect();
        let jac = linalg::weighted_gram(basis.values(), rows, &jw);
        if linalg::spd_condition(&jac) > MAX_CONDITION {
            return Err(Error::SingularJacobian("augmented calibration"));
        }
        let step = linalg::solve_spd(&jac, &(-&f)).ok_or(Error::SingularJacobian("augmented calibration"))?;

        let merit = f.norm_squared();
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let trial = &lambda + &step * t;
            if let Some((tf, tg)) = calibration_map(basis, rows, excess, &trial) {
                if tf.norm_squared() < merit || tf.norm_squared() == 0.0 {
                    lambda = trial;
                    f = tf;
                    g = tg;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            if norm <= opts.tol {
                // Already at rounding level.
                return Ok(LambdaSolve {
                    lambda,
                    residual_history: history,
                    converged: true,
                });
            }
            let trial = &lambda + &step * t;
            return Err(match calibration_map(basis, rows, excess, &trial) {
                None => Error::WeightOverflow { limit: OVERFLOW_LIMIT },
                Some(_) => Error::MaxIterationsExceeded {
                    solver: "augmented calibration line search",
                    iterations: history.len(),
                    residual: norm,
                },
            });
        }
        if norm <= opts.tol {
            polished = true;
        }
        history.push(linalg::max_abs(&f));
    }
    let norm = *history.last().unwrap();
    if norm <= opts.tol {
        return Ok(LambdaSolve {
            lambda,
            residual_history: history,
            converged: true,
        });
    }
    Err(Error::MaxIterationsExceeded {
        solver: "augmented calibration",
        iterations: opts.max_iter,
        residual: norm,
    })
}

/// Jacobian of the calibration map, `n⁻¹ Σ δ_i a_i e^{b_iᵀλ} b_i b_iᵀ`.
pub fn calibration_jacobian(basis: &BasisMatrix, rows: &[usize], excess: &[f64], lambda: &DVector<f64>) -> DMatrix<f64> {
    let n = basis.nrows() as f64;
    let w: Vec<f64> = rows
        .iter()
        .zip(excess)
        .map(|(&i, a)| a * basis.row_dot(i, lambda).exp() / n)
        .collect();
    linalg::weighted_gram(basis.values(), rows, &w)
}

/// The calibration map itself (for derivative checks).
pub fn calibration_residual_vector(basis: &BasisMatrix, rows: &[usize], excess: &[f64], lambda: &DVector<f64>) -> DVector<f64> {
    let n = basis.nrows() as f64;
    let w: Vec<f64> = rows
        .iter()
        .zip(excess)
        .map(|(&i, a)| (1.0 + a * basis.row_dot(i, lambda).exp()) / n)
        .collect();
    linalg::weighted_row_sum(basis.values(), rows, &w) - basis.means()
}

/// `ω_i = 1 + (d̂_i − 1) exp(b_iᵀλ)` for every respondent.
pub fn aps_weights(basis: &BasisMatrix, dhat: &[f64], lambda: &DVector<f64>, delta: &[bool]) -> Result<WeightSet> {
    let rows = respondent_rows(delta);
    let weights = rows
        .iter()
        .map(|&i| 1.0 + (dhat[i] - 1.0) * basis.row_dot(i, lambda).exp())
        .collect();
    WeightSet::new(basis, rows, weights, WeightSource::Augmented)
}

/// Entropy-balancing weights and their dual solution (non-intercept columns only).
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyBalancing {
    pub weights: WeightSet,
    pub lambda: DVector<f64>,
    pub iterations: usize,
}

const EB_MAX_ITER: usize = 200;
const EB_LAMBDA_LIMIT: f64 = 1e3;

/// Minimum-KL weights `ω_i ∝ d̂_i exp(b̃_iᵀλ)` scaled so `Σ δ_i ω_i = n`,
/// balancing every basis column exactly.
pub fn solve_entropy_balancing(basis: &BasisMatrix, dhat: &[f64], delta: &[bool]) -> Result<EntropyBalancing> {
    let rows = respondent_rows(delta);
    if rows.is_empty() {
        return Err(Error::EmptyRespondentSet);
    }
    let n = basis.nrows() as f64;
    let k = basis.ncols() - 1;
    let target: Vec<f64> = (1..=k).map(|j| basis.means()[j]).collect();
    // z_i = b̃_i − target, respondents only
    let z = DMatrix::from_fn(rows.len(), k, |r, j| basis.values()[(rows[r], j + 1)] - target[j]);
    let logd: Vec<f64> = rows.iter().map(|&i| dhat[i].ln()).collect();
    if logd.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("d_i must be positive and finite".into()));
    }
    let all: Vec<usize> = (0..rows.len()).collect();

    // Normalized tilted probabilities and the dual objective log Σ d e^{zλ}.
    let tilt = |lambda: &DVector<f64>| -> (Vec<f64>, f64) {
        let s: Vec<f64> = (0..rows.len())
            .map(|r| logd[r] + (0..k).map(|j| z[(r, j)] * lambda[j]).sum::<f64>())
            .collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
        let total: f64 = e.iter().sum();
        (e.iter().map(|v| v / total).collect(), m + total.ln())
    };

    let mut lambda = DVector::zeros(k);
    let (mut p, mut obj) = tilt(&lambda);
    let mut iterations = 0;
    let mut polished = false;
    loop {
        let grad = linalg::weighted_row_sum(&z, &all, &p);
        let norm = linalg::max_abs(&grad);
        if norm <= 1e-8 && (polished || norm == 0.0) || k == 0 {
            break;
        }
        if iterations >= EB_MAX_ITER {
            return Err(Error::Infeasible);
        }
        let hess = linalg::weighted_gram(&z, &all, &p) - &grad * grad.transpose();
        let step = match linalg::solve_spd(&hess, &(-&grad)) {
            Some(s) if linalg::spd_condition(&hess) <= MAX_CONDITION => s,
            _ if lambda.norm() > 1.0 => return Err(Error::Infeasible),
            _ => return Err(Error::SingularJacobian("entropy balancing")),
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=50 {
            let trial = &lambda + &step * t;
            let (tp, tobj) = tilt(&trial);
            if tobj.is_finite() && tobj <= obj + 1e-14 * obj.abs().max(1.0) {
                lambda = trial;
                p = tp;
                obj = tobj;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        if !accepted {
            if norm <= 1e-8 {
                break;
            }
            return Err(Error::Infeasible);
        }
        if lambda.norm() > EB_LAMBDA_LIMIT {
            return Err(Error::Infeasible);
        }
        if norm <= 1e-8 {
            polished = true;
        }
    }
    let weights = p.iter().map(|pi| n * pi).collect();
    Ok(EntropyBalancing {
        weights: WeightSet::new(basis, rows, weights, WeightSource::EntropyBalancing)?,
        lambda,
        iterations,
    })
}

/// Internally bias-calibrated coefficients
/// `β̂ = {Σ δ_i (ω_i − 1) b_i b_iᵀ}⁻¹ Σ δ_i (ω_i − 1) b_i y_i`.
///
/// `outcome` is indexed by dataset row.
pub fn ibc_beta(basis: &BasisMatrix, outcome: &[f64], weights: &WeightSet) -> Result<DVector<f64>> {
    let excess: Vec<f64> = weights.weights().iter().map(|w| w - 1.0).collect();
    let y: Vec<f64> = weights.rows().iter().map(|&i| outcome[i]).collect();
    linalg::weighted_least_squares(basis.values(), weights.rows(), &excess, &y).ok_or(Error::SingularNormalEquations)
}

/// Regression imputation `n⁻¹ Σ {δ_i y_i + (1 − δ_i) b_iᵀβ}`.
pub fn imputation_estimate(basis: &BasisMatrix, delta: &[bool], outcome: &[f64], beta: &DVector<f64>) -> f64 {
    let n = delta.len();
    (0..n)
        .map(|i| if delta[i] { outcome[i] } else { basis.row_dot(i, beta) })
        .sum::<f64>()
        / n as f64
}
