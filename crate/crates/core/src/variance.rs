//! Linearized variance for the augmented estimators.
//!
//! Each estimator is written as a smooth functional of its nuisance
//! parameters plus a correction for every estimating equation that pins those
//! parameters down. The correction coefficients come from small linear
//! systems; the resulting per-observation influence values average to θ̂ and
//! their centered sum of squares over `n²` is the variance estimate.

use nalgebra::{DMatrix, DVector};

use crate::data::BasisMatrix;
use crate::error::Result;
use crate::gamma::{q_weight, GammaFit};
use crate::linalg;
use crate::propensity::PropensityFit;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Theorem {
    /// Augmented weights with a logistic working propensity model.
    T1,
    /// The γ-robust version, which also linearizes over (β, σ²).
    T2,
}

/// Uncentered influence values `η̂_i` (their mean reproduces θ̂) and the
/// nuisance coefficients used to build them.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceVector {
    pub values: Vec<f64>,
    pub theorem: Theorem,
    pub kappa: DVector<f64>,
    pub mu: Option<DVector<f64>>,
    pub zeta: Option<DVector<f64>>,
    pub nu: Option<f64>,
}

impl InfluenceVector {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// `n⁻² Σ (η̂_i − η̄)²`.
    pub fn variance(&self) -> f64 {
        variance_from_values(&self.values)
    }
}

pub fn variance_from_values(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n * n)
}

/// `n⁻² Σ (η̂_i − η̄)²`.
pub fn variance_t1(influence: &InfluenceVector) -> f64 {
    influence.variance()
}

fn dhat_excess(propensity: &PropensityFit) -> Vec<f64> {
    propensity.dhat().iter().map(|d| (d - 1.0).max(0.0)).collect()
}

/// κ̂ solving `Σ δ_i (d̂_i − 1) [e^{b_iᵀλ̂}(y_i − b_iᵀβ̂) − h_iᵀκ] x̃_i = 0`.
///
/// Returns zero when no respondent has `d̂_i > 1`, where the equation is void.
pub fn solve_kappa_t1(
    basis: &BasisMatrix,
    delta: &[bool],
    outcome: &[f64],
    propensity: &PropensityFit,
    lambda: &DVector<f64>,
    beta: &DVector<f64>,
) -> Result<DVector<f64>> {
    let design = propensity.design();
    let p = design.ncols();
    let n = delta.len() as f64;
    let a = dhat_excess(propensity);
    let mut lhs = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    let mut active = false;
    for i in (0..delta.len()).filter(|&i| delta[i] && a[i] > 0.0) {
        active = true;
        let x = propensity.logit_gradient(i);
        let h = propensity.h(i);
        let g = basis.row_dot(i, lambda).exp();
        let r = outcome[i] - basis.row_dot(i, beta);
        lhs += &x * h.transpose() * (a[i] / n);
        rhs += &x * (a[i] * g * r / n);
    }
    if !active {
        return Ok(DVector::zeros(p));
    }
    linalg::solve_equilibrated(&lhs, &rhs, "kappa (augmented weights)")
}

/// `η̂_i = b_iᵀβ̂ + δ_i ω̂_i (y_i − b_iᵀβ̂) + (1 − δ_i d̂_i) h_iᵀκ̂`.
pub fn influence_t1(
    basis: &BasisMatrix,
    delta: &[bool],
    outcome: &[f64],
    propensity: &PropensityFit,
    lambda: &DVector<f64>,
    beta: &DVector<f64>,
    kappa: &DVector<f64>,
) -> InfluenceVector {
    let dhat = propensity.dhat();
    let values = (0..delta.len())
        .map(|i| {
            let fitted = basis.row_dot(i, beta);
            let hk = propensity.h(i).dot(kappa);
            if delta[i] {
                let omega = 1.0 + (dhat[i] - 1.0) * basis.row_dot(i, lambda).exp();
                fitted + omega * (outcome[i] - fitted) + (1.0 - dhat[i]) * hk
            } else {
                fitted + hk
            }
        })
        .collect();
    InfluenceVector {
        values,
        theorem: Theorem::T1,
        kappa: kappa.clone(),
        mu: None,
        zeta: None,
        nu: None,
    }
}

/// Derivatives, scaled by `n⁻¹`, of the linearized robust functional
///
/// ```text
/// Θ(λ, β, σ²) = n⁻¹ Σ b_iᵀμ + n⁻¹ Σ δ_i ω_{γ,i}(y_i − b_iᵀμ)
///             + ζᵀ n⁻¹ Σ w_i r_i b_i + ν n⁻¹ Σ w_i (r_i² − σ²/(1+γ))
/// ```
///
/// with `w_i = δ_i (d̂_i − 1) e^{b_iᵀλ} q_{γ,i}`. Row block `k` holds the
/// derivative in the `k`-th parameter (λ, β, σ²); column block `j` multiplies
/// 1, μ, ζ, ν respectively, so `∂Θ/∂(k) = s_k0 + s_k1 μ + s_k2 ζ + s_k3 ν`.
#[derive(Debug, Clone, PartialEq)]
pub struct SMatrices {
    pub s10: DVector<f64>,
    pub s11: DMatrix<f64>,
    pub s12: DMatrix<f64>,
    pub s13: DVector<f64>,
    pub s20: DVector<f64>,
    pub s21: DMatrix<f64>,
    pub s22: DMatrix<f64>,
    pub s23: DVector<f64>,
    pub s30: f64,
    pub s31: DVector<f64>,
    pub s32: DVector<f64>,
    pub s33: f64,
}

impl SMatrices {
    /// The `(2K+1)`-square coefficient matrix of `(μ, ζ, ν)`.
    pub fn system(&self) -> (DMatrix<f64>, DVector<f64>) {
        let k = self.s10.len();
        let dim = 2 * k + 1;
        let mut m = DMatrix::zeros(dim, dim);
        let mut rhs = DVector::zeros(dim);
        m.view_mut((0, 0), (k, k)).copy_from(&self.s11);
        m.view_mut((0, k), (k, k)).copy_from(&self.s12);
        m.view_mut((0, 2 * k), (k, 1)).copy_from(&self.s13);
        m.view_mut((k, 0), (k, k)).copy_from(&self.s21);
        m.view_mut((k, k), (k, k)).copy_from(&self.s22);
        m.view_mut((k, 2 * k), (k, 1)).copy_from(&self.s23);
        m.view_mut((2 * k, 0), (1, k)).copy_from(&self.s31.transpose());
        m.view_mut((2 * k, k), (1, k)).copy_from(&self.s32.transpose());
        m[(2 * k, 2 * k)] = self.s33;
        rhs.rows_mut(0, k).copy_from(&(-&self.s10));
        rhs.rows_mut(k, k).copy_from(&(-&self.s20));
        rhs[2 * k] = -self.s30;
        (m, rhs)
    }

    /// `(∂Θ/∂λ, ∂Θ/∂β, ∂Θ/∂σ²)` at the given coefficients.
    pub fn gradient(&self, mu: &DVector<f64>, zeta: &DVector<f64>, nu: f64) -> (DVector<f64>, DVector<f64>, f64) {
        (
            &self.s10 + &self.s11 * mu + &self.s12 * zeta + &self.s13 * nu,
            &self.s20 + &self.s21 * mu + &self.s22 * zeta + &self.s23 * nu,
            self.s30 + self.s31.dot(mu) + self.s32.dot(zeta) + self.s33 * nu,
        )
    }
}

/// Per-respondent pieces of the robust system at the fitted parameters.
struct RobustTerms {
    row: usize,
    w: f64,
    r: f64,
    y: f64,
}

fn robust_terms(basis: &BasisMatrix, outcome: &[f64], dhat: &[f64], fit: &GammaFit) -> Vec<RobustTerms> {
    fit.rows
        .iter()
        .map(|&i| {
            let r = outcome[i] - basis.row_dot(i, &fit.beta);
            let w = (dhat[i] - 1.0).max(0.0) * basis.row_dot(i, &fit.lambda).exp() * q_weight(r, fit.sigma2, fit.gamma);
            RobustTerms { row: i, w, r, y: outcome[i] }
        })
        .collect()
}

/// Empirical s-matrices at the fitted `(λ̂, β̂, σ̂²)`.
pub fn s_matrices(basis: &BasisMatrix, outcome: &[f64], dhat: &[f64], fit: &GammaFit) -> SMatrices {
    let k = basis.ncols();
    let n = basis.nrows() as f64;
    let gamma = fit.gamma;
    let sigma2 = fit.sigma2;
    let c = sigma2 / (1.0 + gamma);
    let t = gamma / sigma2;
    let mut s = SMatrices {
        s10: DVector::zeros(k),
        s11: DMatrix::zeros(k, k),
        s12: DMatrix::zeros(k, k),
        s13: DVector::zeros(k),
        s20: DVector::zeros(k),
        s21: DMatrix::zeros(k, k),
        s22: DMatrix::zeros(k, k),
        s23: DVector::zeros(k),
        s30: 0.0,
        s31: DVector::zeros(k),
        s32: DVector::zeros(k),
        s33: 0.0,
    };
    for term in robust_terms(basis, outcome, dhat, fit) {
        let RobustTerms { row, w, r, y } = term;
        if w == 0.0 {
            continue;
        }
        let w = w / n;
        let b: DVector<f64> = basis.values().row(row).transpose();
        let bb = &b * b.transpose();
        let u = gamma * r * r / (2.0 * sigma2 * sigma2);
        let e = r * r - c;

        s.s10 += &b * (w * y);
        s.s11 -= &bb * w;
        s.s12 += &bb * (w * r);
        s.s13 += &b * (w * e);

        s.s20 += &b * (w * t * r * y);
        s.s21 -= &bb * (w * t * r);
        s.s22 += &bb * (w * (t * r * r - 1.0));
        s.s23 += &b * (w * r * (t * e - 2.0));

        s.s30 += w * u * y;
        s.s31 -= &b * (w * u);
        s.s32 += &b * (w * u * r);
        s.s33 += w * u * e - w / (1.0 + gamma);
    }
    s
}

/// Coefficients `(μ, ζ, ν)` that remove the first-order effect of estimating
/// `(λ, β, σ²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct T2Nuisance {
    pub mu: DVector<f64>,
    pub zeta: DVector<f64>,
    pub nu: f64,
}

pub fn solve_nuisance_t2(basis: &BasisMatrix, outcome: &[f64], dhat: &[f64], fit: &GammaFit) -> Result<T2Nuisance> {
    let k = basis.ncols();
    if robust_terms(basis, outcome, dhat, fit).iter().all(|t| t.w == 0.0) {
        // With every d_i = 1 the functional does not depend on (λ, β, σ²).
        return Ok(T2Nuisance {
            mu: fit.beta.clone(),
            zeta: DVector::zeros(k),
            nu: 0.0,
        });
    }
    let (m, rhs) = s_matrices(basis, outcome, dhat, fit).system();
    let sol = linalg::solve_equilibrated(&m, &rhs, "robust nuisance coefficients")?;
    Ok(T2Nuisance {
        mu: sol.rows(0, k).into_owned(),
        zeta: sol.rows(k, k).into_owned(),
        nu: sol[2 * k],
    })
}

/// Per-respondent `δ_i (d̂_i − 1) e^{b_iᵀλ} q_i [(y_i − b_iᵀμ) + r_i ζᵀb_i + ν(r_i² − c)]`.
fn phi_effect_terms(basis: &BasisMatrix, outcome: &[f64], dhat: &[f64], fit: &GammaFit, nuisance: &T2Nuisance) -> Vec<(usize, f64)> {
    let c = fit.sigma2 / (1.0 + fit.gamma);
    robust_terms(basis, outcome, dhat, fit)
        .into_iter()
        .map(|t| {
            let inner = (t.y - basis.row_dot(t.row, &nuisance.mu)) + t.r * basis.row_dot(t.row, &nuisance.zeta) + nuisance.nu * (t.r * t.r - c);
            (t.row, t.w * inner)
        })
        .collect()
}

/// κ̂ for the robust estimator: `M κ = v` with `M = n⁻¹ Σ π̂_i(1 − π̂_i) x̃_i x̃_iᵀ`
/// (minus the φ-derivative of the logistic score) and `v` the φ-derivative of
/// the linearized functional with its sign flipped.
pub fn solve_kappa_t2(
    basis: &BasisMatrix,
    outcome: &[f64],
    propensity: &PropensityFit,
    fit: &GammaFit,
    nuisance: &T2Nuisance,
) -> Result<DVector<f64>> {
    let design = propensity.design();
    let p = design.ncols();
    let n = basis.nrows() as f64;
    let dhat = propensity.dhat();
    let terms = phi_effect_terms(basis, outcome, &dhat, fit, nuisance);
    if terms.iter().all(|(_, v)| *v == 0.0) {
        return Ok(DVector::zeros(p));
    }
    let probs = propensity.probabilities();
    let all: Vec<usize> = (0..basis.nrows()).collect();
    let w: Vec<f64> = probs.iter().map(|p| p * (1.0 - p) / n).collect();
    let m = linalg::weighted_gram(design, &all, &w);
    let mut v = DVector::zeros(p);
    for (i, t) in terms {
        v += propensity.logit_gradient(i) * (t / n);
    }
    linalg::solve_equilibrated(&m, &v, "kappa (robust weights)")
}

/// `η̂_{γ,i} = b_iᵀμ + δ_i ω_{γ,i}(y_i − b_iᵀμ) + (1 − δ_i d̂_i) h_iᵀκ
///            + w_i r_i ζᵀb_i + w_i ν (r_i² − σ²/(1+γ))`.
pub fn influence_t2(
    basis: &BasisMatrix,
    delta: &[bool],
    outcome: &[f64],
    propensity: &PropensityFit,
    fit: &GammaFit,
    nuisance: &T2Nuisance,
    kappa: &DVector<f64>,
) -> InfluenceVector {
    let dhat = propensity.dhat();
    let c = fit.sigma2 / (1.0 + fit.gamma);
    let mut values: Vec<f64> = (0..delta.len())
        .map(|i| basis.row_dot(i, &nuisance.mu) + (1.0 - if delta[i] { dhat[i] } else { 0.0 }) * propensity.h(i).dot(kappa))
        .collect();
    for t in robust_terms(basis, outcome, &dhat, fit) {
        let fitted = basis.row_dot(t.row, &nuisance.mu);
        values[t.row] += (1.0 + t.w) * (t.y - fitted) + t.w * t.r * basis.row_dot(t.row, &nuisance.zeta) + t.w * nuisance.nu * (t.r * t.r - c);
    }
    InfluenceVector {
        values,
        theorem: Theorem::T2,
        kappa: kappa.clone(),
        mu: Some(nuisance.mu.clone()),
        zeta: Some(nuisance.zeta.clone()),
        nu: Some(nuisance.nu),
    }
}
