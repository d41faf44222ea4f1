//! Outlier-robust augmented weights from the γ-power divergence.
//!
//! For fixed λ the pair (β, σ²) solves the redescending estimating equations
//!
//! ```text
//! Σ δ_i a_i g_i q_i r_i b_i                     = 0
//! Σ δ_i a_i g_i q_i {r_i² − σ²/(1+γ)}           = 0
//! ```
//!
//! with `a_i = d̂_i − 1`, `g_i = exp(b_iᵀλ)`, `r_i = y_i − b_iᵀβ` and
//! `q_i = exp(−γ r_i² / 2σ²)`; λ in turn calibrates the robust weights
//! `ω_{γ,i} = 1 + a_i g_i q_i` to the full-sample basis means. The three
//! blocks are solved in turn until the parameters stop moving.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::balancing::{self, LambdaOptions};
use crate::data::{BasisMatrix, WeightSet, WeightSource};
use crate::error::{Error, Result};
use crate::linalg;
use crate::parallel::{self, Execution};

/// Lower end of the σ² bracket; also the value reported for a degenerate scale.
pub const SIGMA2_FLOOR: f64 = 1e-8;

/// `exp(−γ r² / 2σ²)`.
#[inline]
pub fn q_weight(residual: f64, sigma2: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        return 1.0;
    }
    (-0.5 * gamma * residual * residual / sigma2).exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaOptions {
    pub tol: f64,
    pub max_outer: usize,
    pub lambda: LambdaOptions,
}

impl Default for GammaOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_outer: 200,
            lambda: LambdaOptions::default(),
        }
    }
}

/// Max-norm residuals of the three defining equation blocks, scaled by `n⁻¹`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GammaResiduals {
    pub calibration: f64,
    pub beta: f64,
    pub sigma2: f64,
}

impl GammaResiduals {
    pub fn max(&self) -> f64 {
        self.calibration.max(self.beta).max(self.sigma2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaFit {
    pub beta: DVector<f64>,
    pub sigma2: f64,
    pub lambda: DVector<f64>,
    pub gamma: f64,
    /// Respondent row indices, aligned with `q`.
    pub rows: Vec<usize>,
    pub q: Vec<f64>,
    pub outer_iterations: usize,
    pub converged: bool,
    /// Set when every residual vanished and σ² was pinned at [`SIGMA2_FLOOR`].
    pub sigma_degenerate: bool,
    pub residuals: GammaResiduals,
}

struct Problem<'a> {
    basis: &'a BasisMatrix,
    rows: Vec<usize>,
    y: Vec<f64>,
    excess: Vec<f64>,
    gamma: f64,
}

impl Problem<'_> {
    fn residuals(&self, beta: &DVector<f64>) -> Vec<f64> {
        self.rows
            .iter()
            .zip(&self.y)
            .map(|(&i, y)| y - self.basis.row_dot(i, beta))
            .collect()
    }

    fn tilts(&self, lambda: &DVector<f64>) -> Vec<f64> {
        self.rows.iter().map(|&i| self.basis.row_dot(i, lambda).exp()).collect()
    }

    fn block_residuals(&self, beta: &DVector<f64>, sigma2: f64, lambda: &DVector<f64>) -> GammaResiduals {
        let n = self.basis.nrows() as f64;
        let r = self.residuals(beta);
        let g = self.tilts(lambda);
        let c = sigma2 / (1.0 + self.gamma);
        let w: Vec<f64> = (0..self.rows.len())
            .map(|k| self.excess[k] * g[k] * q_weight(r[k], sigma2, self.gamma))
            .collect();
        let wr: Vec<f64> = w.iter().zip(&r).map(|(w, r)| w * r / n).collect();
        let beta_eq = linalg::max_abs(&linalg::weighted_row_sum(self.basis.values(), &self.rows, &wr));
        let sigma_eq = w.iter().zip(&r).map(|(w, r)| w * (r * r - c)).sum::<f64>().abs() / n;
        let omega: Vec<f64> = w.iter().map(|w| 1.0 + w).collect();
        let calibration = crate::data::calibration_residual(self.basis, &self.rows, &omega);
        GammaResiduals {
            calibration,
            beta: beta_eq,
            sigma2: sigma_eq,
        }
    }
}

/// Solves the robust system for a fixed γ.
///
/// `outcome` and `dhat` are indexed by dataset row; nonrespondent entries are ignored.
pub fn solve_gamma_system(basis: &BasisMatrix, outcome: &[f64], delta: &[bool], dhat: &[f64], gamma: f64) -> Result<GammaFit> {
    solve_gamma_system_with(basis, outcome, delta, dhat, gamma, GammaOptions::default())
}

pub fn solve_gamma_system_with(
    basis: &BasisMatrix,
    outcome: &[f64],
    delta: &[bool],
    dhat: &[f64],
    gamma: f64,
    opts: GammaOptions,
) -> Result<GammaFit> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidArgument(format!("gamma must be finite and nonnegative, got {gamma}")));
    }
    let k = basis.ncols();
    let rows: Vec<usize> = (0..delta.len()).filter(|&i| delta[i]).collect();
    if rows.len() < k + 1 {
        return Err(Error::InvalidArgument(format!(
            "{} respondents is too few for {} basis functions",
            rows.len(),
            k
        )));
    }
    let mut excess = Vec::with_capacity(rows.len());
    for &i in &rows {
        let a = dhat[i] - 1.0;
        if !(a >= -1e-12) || !a.is_finite() {
            return Err(Error::InvalidArgument(format!("d_i must be >= 1, got {} at row {i}", dhat[i])));
        }
        excess.push(a.max(0.0));
    }
    let p = Problem {
        basis,
        y: rows.iter().map(|&i| outcome[i]).collect(),
        rows,
        excess,
        gamma,
    };

    let ones = vec![1.0; p.rows.len()];
    let mut beta = linalg::weighted_least_squares(basis.values(), &p.rows, &ones, &p.y).ok_or(Error::SingularNormalEquations)?;
    let r0 = p.residuals(&beta);
    let dof = (p.rows.len() - k).max(1) as f64;
    let mut sigma2 = (r0.iter().map(|r| r * r).sum::<f64>() / dof).max(SIGMA2_FLOOR);
    let mut lambda = DVector::zeros(k);

    if p.excess.iter().all(|&a| a == 0.0) {
        // Every d_i = 1: the weights are 1 whatever (β, σ², λ) are, so report
        // the unweighted robust fit with λ = 0.
        return full_response_fit(&p, beta, sigma2, opts);
    }

    for outer in 1..=opts.max_outer {
        // (a) β by weighted least squares with q frozen at the current (β, σ²)
        let g = p.tilts(&lambda);
        let r = p.residuals(&beta);
        let w: Vec<f64> = (0..p.rows.len())
            .map(|j| p.excess[j] * g[j] * q_weight(r[j], sigma2, gamma))
            .collect();
        let beta_new = linalg::weighted_least_squares(basis.values(), &p.rows, &w, &p.y).ok_or(Error::SingularNormalEquations)?;

        // (b) σ² from its scalar estimating equation
        let r = p.residuals(&beta_new);
        let c: Vec<f64> = p.excess.iter().zip(&g).map(|(a, g)| a * g).collect();
        let (sigma2_new, degenerate) = solve_sigma2(&r, &c, gamma, sigma2);

        // (c) λ calibrating the robust weights
        let qa: Vec<f64> = (0..p.rows.len())
            .map(|j| p.excess[j] * q_weight(r[j], sigma2_new, gamma))
            .collect();
        let solve = balancing::solve_calibration_lambda(basis, &p.rows, &qa, Some(&lambda), opts.lambda)?;

        let change = linalg::max_abs(&(&beta_new - &beta))
            .max((sigma2_new - sigma2).abs())
            .max(linalg::max_abs(&(&solve.lambda - &lambda)));
        beta = beta_new;
        sigma2 = sigma2_new;
        lambda = solve.lambda;

        if change <= opts.tol {
            let residuals = p.block_residuals(&beta, sigma2, &lambda);
            if residuals.max() <= opts.tol || degenerate {
                if degenerate {
                    log::warn!("all robust residuals vanished; sigma^2 pinned at {SIGMA2_FLOOR}");
                }
                let q = p.residuals(&beta).iter().map(|&r| q_weight(r, sigma2, gamma)).collect();
                return Ok(GammaFit {
                    beta,
                    sigma2,
                    lambda,
                    gamma,
                    rows: p.rows,
                    q,
                    outer_iterations: outer,
                    converged: true,
                    sigma_degenerate: degenerate,
                    residuals,
                });
            }
        }
        if outer == opts.max_outer {
            return Err(Error::NonConvergence {
                iterations: opts.max_outer,
                change,
            });
        }
    }
    unreachable!("loop returns on the final iteration")
}

fn full_response_fit(p: &Problem<'_>, mut beta: DVector<f64>, mut sigma2: f64, opts: GammaOptions) -> Result<GammaFit> {
    let ones = vec![1.0; p.rows.len()];
    let k = p.basis.ncols();
    let lambda = DVector::zeros(k);
    for outer in 1..=opts.max_outer {
        let r = p.residuals(&beta);
        let w: Vec<f64> = r.iter().map(|&r| q_weight(r, sigma2, p.gamma)).collect();
        let beta_new = linalg::weighted_least_squares(p.basis.values(), &p.rows, &w, &p.y).ok_or(Error::SingularNormalEquations)?;
        let r = p.residuals(&beta_new);
        let (sigma2_new, degenerate) = solve_sigma2(&r, &ones, p.gamma, sigma2);
        let change = linalg::max_abs(&(&beta_new - &beta)).max((sigma2_new - sigma2).abs());
        beta = beta_new;
        sigma2 = sigma2_new;
        if change <= opts.tol {
            let q = p.residuals(&beta).iter().map(|&r| q_weight(r, sigma2, p.gamma)).collect();
            return Ok(GammaFit {
                beta,
                sigma2,
                lambda,
                gamma: p.gamma,
                rows: p.rows.clone(),
                q,
                outer_iterations: outer,
                converged: true,
                sigma_degenerate: degenerate,
                residuals: GammaResiduals::default(),
            });
        }
        if outer == opts.max_outer {
            return Err(Error::NonConvergence {
                iterations: opts.max_outer,
                change,
            });
        }
    }
    unreachable!("loop returns on the final iteration")
}

/// Root in σ² of `Σ c_i q_i(σ²) {r_i² − σ²/(1+γ)}`, taking the root nearest `prev`.
///
/// Returns `(σ², degenerate)`.
pub fn solve_sigma2(r: &[f64], c: &[f64], gamma: f64, prev: f64) -> (f64, bool) {
    let r2: Vec<f64> = r.iter().map(|r| r * r).collect();
    let active: Vec<usize> = (0..r2.len()).filter(|&i| c[i] > 0.0).collect();
    let max_r2 = active.iter().map(|&i| r2[i]).fold(0.0_f64, f64::max);
    let scale = 1.0 + gamma;
    if max_r2 * scale <= SIGMA2_FLOOR {
        return (SIGMA2_FLOOR, true);
    }
    if gamma == 0.0 {
        let num: f64 = active.iter().map(|&i| c[i] * r2[i]).sum();
        let den: f64 = active.iter().map(|&i| c[i]).sum();
        let s = num / den;
        return if s <= SIGMA2_FLOOR { (SIGMA2_FLOOR, true) } else { (s, false) };
    }
    let min_r2 = active.iter().map(|&i| r2[i]).fold(f64::INFINITY, f64::min);

    // Scaled by exp(γ min r² / 2s) > 0, which leaves the roots unchanged.
    let f = |s: f64| -> (f64, f64) {
        let mut val = 0.0;
        let mut der = 0.0;
        for &i in &active {
            let e = c[i] * (-0.5 * gamma * (r2[i] - min_r2) / s).exp();
            let term = r2[i] - s / scale;
            val += e * term;
            der += e * (0.5 * gamma * (r2[i] - min_r2) / (s * s) * term - 1.0 / scale);
        }
        (val, der)
    };

    // f(hi) ≤ 0 always. Zero residuals make f negative near 0 as well, so
    // look for a positive value next to `prev` and bracket the root between
    // it and its negative neighbour.
    let lo = SIGMA2_FLOOR;
    let hi = scale * max_r2;
    let s0 = prev.clamp(lo, hi);
    let f0 = f(s0).0;
    if f0 == 0.0 {
        return (s0, false);
    }
    let bracket = if f0 > 0.0 {
        let mut b = s0;
        loop {
            let up = (b * 2.0).min(hi);
            if f(up).0 <= 0.0 {
                break Some((b, up));
            }
            b = up;
        }
    } else {
        let mut a = s0;
        let mut found = None;
        while a > lo {
            let down = (a * 0.5).max(lo);
            if f(down).0 > 0.0 {
                found = Some((down, a));
                break;
            }
            a = down;
        }
        if found.is_none() {
            let mut b = s0;
            while b < hi {
                let up = (b * 2.0).min(hi);
                if f(up).0 > 0.0 {
                    let mut c = up;
                    found = loop {
                        let next = (c * 2.0).min(hi);
                        if f(next).0 <= 0.0 {
                            break Some((c, next));
                        }
                        c = next;
                    };
                    break;
                }
                b = up;
            }
        }
        found
    };
    let Some(bracket) = bracket else {
        return (SIGMA2_FLOOR, true);
    };

    let (mut a, mut b) = bracket;
    let mut fa = f(a).0;
    let mut s = 0.5 * (a + b);
    for _ in 0..200 {
        let (fs, ds) = f(s);
        if fs == 0.0 {
            return (s, false);
        }
        if fs.signum() == fa.signum() {
            a = s;
            fa = fs;
        } else {
            b = s;
        }
        if (b - a).abs() <= 1e-15 * s {
            break;
        }
        let newton = s - fs / ds;
        let next = if ds != 0.0 && newton > a.min(b) && newton < a.max(b) {
            newton
        } else {
            0.5 * (a + b)
        };
        let done = (next - s).abs() <= 1e-15 * s;
        s = next;
        if done {
            break;
        }
    }
    (s, false)
}

/// `ω_{γ,i} = 1 + (d̂_i − 1) g_i(λ) q_{γ,i}(β, σ²)` for every respondent.
pub fn gamma_weights(fit: &GammaFit, dhat: &[f64], basis: &BasisMatrix) -> Result<WeightSet> {
    let weights = fit
        .rows
        .iter()
        .zip(&fit.q)
        .map(|(&i, q)| 1.0 + (dhat[i] - 1.0).max(0.0) * basis.row_dot(i, &fit.lambda).exp() * q)
        .collect();
    WeightSet::new(basis, fit.rows.clone(), weights, WeightSource::AugmentedGamma(fit.gamma))
}

/// The robust (β, σ²) objective at fixed λ, scaled by `n⁻¹`:
/// `−(2πσ²)^{−γ/(2(1+γ))} n⁻¹ Σ δ_i a_i g_i q_i`.
///
/// This normalization makes its σ² stationarity condition coincide with the
/// σ² estimating equation used by the solver.
#[allow(clippy::too_many_arguments)]
pub fn gamma_objective(
    basis: &BasisMatrix,
    outcome: &[f64],
    delta: &[bool],
    dhat: &[f64],
    lambda: &DVector<f64>,
    beta: &DVector<f64>,
    sigma2: f64,
    gamma: f64,
) -> f64 {
    let n = basis.nrows() as f64;
    let power = gamma / (2.0 * (1.0 + gamma));
    let sum: f64 = (0..delta.len())
        .filter(|&i| delta[i])
        .map(|i| {
            let r = outcome[i] - basis.row_dot(i, beta);
            (dhat[i] - 1.0) * basis.row_dot(i, lambda).exp() * q_weight(r, sigma2, gamma)
        })
        .sum();
    -(2.0 * std::f64::consts::PI * sigma2).powf(-power) * sum / n
}

/// Cross-validated choice of γ.
#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub gamma: f64,
    pub profile: Vec<CvPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvPoint {
    pub gamma: f64,
    /// Σ over held-out respondents of squared prediction error, rescaled to all
    /// respondents when some folds failed.
    pub mspe: f64,
    pub failed_folds: usize,
}

/// Fold label for each row; respondents and nonrespondents are shuffled and
/// dealt round-robin separately so every fold gets its share of both.
pub fn stratified_folds(delta: &[bool], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = vec![0; delta.len()];
    for stratum in [true, false] {
        let mut idx: Vec<usize> = (0..delta.len()).filter(|&i| delta[i] == stratum).collect();
        idx.shuffle(&mut rng);
        for (pos, i) in idx.into_iter().enumerate() {
            labels[i] = pos % k;
        }
    }
    labels
}

#[allow(clippy::too_many_arguments)]
pub fn select_gamma_cv(
    basis: &BasisMatrix,
    outcome: &[f64],
    delta: &[bool],
    dhat: &[f64],
    grid: &[f64],
    folds: usize,
    seed: u64,
    exec: Execution,
) -> Result<CvResult> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty gamma grid".into()));
    }
    if folds < 2 {
        return Err(Error::InvalidArgument("at least two folds are required".into()));
    }
    if grid.iter().any(|g| !(*g >= 0.0)) {
        return Err(Error::InvalidArgument("gamma grid values must be nonnegative".into()));
    }
    let labels = stratified_folds(delta, folds, seed);
    let held_out: Vec<Vec<usize>> = (0..folds)
        .map(|f| (0..delta.len()).filter(|&i| labels[i] == f).collect())
        .collect();
    let complement: Vec<Vec<usize>> = (0..folds)
        .map(|f| (0..delta.len()).filter(|&i| labels[i] != f).collect())
        .collect();

    // One task per (γ, fold); the result is Some((sse, evaluated respondents)).
    let tasks = grid.len() * folds;
    let outcomes = parallel::map_indexed(tasks, exec, |t| {
        let (gi, f) = (t / folds, t % folds);
        let train = &complement[f];
        let sub_basis = basis.subset(train);
        let sub_y: Vec<f64> = train.iter().map(|&i| outcome[i]).collect();
        let sub_delta: Vec<bool> = train.iter().map(|&i| delta[i]).collect();
        let sub_d: Vec<f64> = train.iter().map(|&i| dhat[i]).collect();
        match solve_gamma_system(&sub_basis, &sub_y, &sub_delta, &sub_d, grid[gi]) {
            Ok(fit) => {
                let mut sse = 0.0;
                let mut count = 0usize;
                for &i in held_out[f].iter().filter(|&&i| delta[i]) {
                    let e = outcome[i] - basis.row_dot(i, &fit.beta);
                    sse += e * e;
                    count += 1;
                }
                Some((sse, count))
            }
            Err(e) => {
                log::warn!("cross-validation fit failed for gamma={} fold={f}: {e}", grid[gi]);
                None
            }
        }
    });

    let total_resp = delta.iter().filter(|&&d| d).count() as f64;
    let mut profile = Vec::with_capacity(grid.len());
    for (gi, &gamma) in grid.iter().enumerate() {
        let cells = &outcomes[gi * folds..(gi + 1) * folds];
        let failed = cells.iter().filter(|c| c.is_none()).count();
        let (sse, count) = cells.iter().flatten().fold((0.0, 0usize), |(s, c), (ds, dc)| (s + ds, c + dc));
        let mspe = if failed == folds {
            f64::NAN
        } else if failed == 0 || count == 0 {
            sse
        } else {
            sse * total_resp / count as f64
        };
        profile.push(CvPoint {
            gamma,
            mspe,
            failed_folds: failed,
        });
    }
    let best = profile
        .iter()
        .filter(|p| p.mspe.is_finite())
        .min_by(|a, b| a.mspe.total_cmp(&b.mspe).then(a.gamma.total_cmp(&b.gamma)))
        .ok_or(Error::AllFoldsFailed)?;
    Ok(CvResult {
        gamma: best.gamma,
        profile,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn q_weight_cases() {
        assert_eq!(q_weight(0.0, 2.0, 0.5), 1.0);
        assert_eq!(q_weight(123.0, 2.0, 0.0), 1.0);
        let (sigma2, gamma) = (1.7_f64, 0.6_f64);
        let r = (2.0 * sigma2 / gamma).sqrt();
        assert_abs_diff_eq!(q_weight(r, sigma2, gamma), (-1.0_f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(q_weight(r, sigma2, gamma), 0.367879, epsilon = 1e-6);
    }

    #[test]
    fn q_weight_is_monotone() {
        assert!(q_weight(1.0, 1.0, 0.5) > q_weight(1.5, 1.0, 0.5));
        assert!(q_weight(1.0, 1.0, 0.5) > q_weight(1.0, 1.0, 0.7));
        assert!(q_weight(-2.0, 1.0, 0.5) < q_weight(1.0, 1.0, 0.5));
    }

    #[test]
    fn sigma2_constant_residual_closed_form() {
        for gamma in [0.0, 0.3, 1.0, 2.5] {
            let r = vec![1.3, -1.3, 1.3, -1.3];
            let c = vec![0.5, 2.0, 1.0, 3.0];
            let (s, degenerate) = solve_sigma2(&r, &c, gamma, 0.1);
            assert!(!degenerate);
            assert_abs_diff_eq!(s, (1.0 + gamma) * 1.69, epsilon = 1e-10);
        }
    }

    #[test]
    fn sigma2_degenerate_when_residuals_vanish() {
        let (s, degenerate) = solve_sigma2(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0], 0.5, 1.0);
        assert!(degenerate);
        assert_eq!(s, SIGMA2_FLOOR);
    }

    #[test]
    fn sigma2_root_satisfies_equation() {
        let r: Vec<f64> = (0..40).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.4 + if i % 9 == 0 { 30.0 } else { 0.0 }).collect();
        let c: Vec<f64> = (0..40).map(|i| 0.5 + (i % 3) as f64).collect();
        let gamma = 0.5;
        let (s, _) = solve_sigma2(&r, &c, gamma, 2.0);
        let eq: f64 = r
            .iter()
            .zip(&c)
            .map(|(r, c)| c * q_weight(*r, s, gamma) * (r * r - s / (1.0 + gamma)))
            .sum();
        assert!(eq.abs() < 1e-10, "residual {eq} at s={s}");
    }

    #[test]
    fn folds_are_stratified_and_seeded() {
        let delta: Vec<bool> = (0..103).map(|i| i % 5 != 0).collect();
        let a = stratified_folds(&delta, 5, 9);
        assert_eq!(a, stratified_folds(&delta, 5, 9));
        for f in 0..5 {
            let resp = (0..103).filter(|&i| delta[i] && a[i] == f).count();
            assert!((16..=17).contains(&resp));
        }
    }
}
