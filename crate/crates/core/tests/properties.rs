mod common;

use nalgebra::DVector;
use proptest::prelude::*;

use augcal::balancing;
use augcal::estimators::{self, GammaChoice};
use augcal::gamma;
use augcal::montecarlo::{summarize, ReplicationRecord};
use augcal::propensity;
use augcal::{build_basis, estimate_roster, BasisSpec, EstimationConfig, Estimator};
use common::{from_parts, instance, Instance};

fn permuted(inst: &Instance, shift: usize) -> (Instance, Vec<usize>) {
    let n = inst.data.n();
    let order: Vec<usize> = (0..n).map(|i| (i * 7 + shift) % n).collect();
    let order = if order.iter().collect::<std::collections::HashSet<_>>().len() == n {
        order
    } else {
        (0..n).rev().collect()
    };
    let d = inst.data.subset(&order).unwrap();
    (from_parts(d.covariates().clone(), d.delta().to_vec(), d.outcome().to_vec()), order)
}

/// `n⁻¹ Σ δ_i d̂_i`, the factor a shift picks up under inverse probability weighting.
fn ipw_mass(inst: &Instance) -> f64 {
    let fit = propensity::fit_logistic_mle(&inst.data, &inst.design).unwrap();
    let d = fit.dhat();
    inst.data.respondents().iter().map(|&i| d[i]).sum::<f64>() / inst.data.n() as f64
}

fn roster() -> Vec<Estimator> {
    vec![
        Estimator::Cc,
        Estimator::Glm,
        Estimator::Hm,
        Estimator::Tan,
        Estimator::Aps,
        Estimator::ApsGamma(GammaChoice::Fixed(0.5)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn basis_means_recompute(seed in 0u64..10_000, n in 20usize..300, l in 1usize..4) {
        let inst = instance(seed, n, l, 0.2);
        let again = build_basis(&inst.data, &BasisSpec::linear(l)).unwrap();
        prop_assert_eq!(&again, &inst.basis);
        for j in 0..inst.basis.ncols() {
            let m = inst.basis.values().column(j).iter().sum::<f64>() / n as f64;
            prop_assert!((m - inst.basis.means()[j]).abs() <= 1e-14 * m.abs().max(1.0));
        }
    }

    #[test]
    fn mle_hessian_matches_finite_differences(seed in 0u64..10_000, n in 20usize..50, l in 1usize..3) {
        let inst = instance(seed, n, l, 0.0);
        prop_assume!(inst.data.n_respondents() > 2 && inst.data.n_nonrespondents() > 2);
        let Ok(fit) = propensity::fit_logistic_mle(&inst.data, &inst.design) else { return Ok(()) };
        let info = fit.covariance().unwrap().try_inverse().unwrap();
        let p = inst.design.ncols();
        let h = 1e-4;
        let ll = |phi: &DVector<f64>| propensity::log_likelihood(&inst.design, inst.data.delta(), phi);
        for a in 0..p {
            for b in 0..p {
                let mut pp = fit.phi().clone();
                pp[a] += h; pp[b] += h;
                let mut pm = fit.phi().clone();
                pm[a] += h; pm[b] -= h;
                let mut mp = fit.phi().clone();
                mp[a] -= h; mp[b] += h;
                let mut mm = fit.phi().clone();
                mm[a] -= h; mm[b] -= h;
                // log_likelihood is the mean, the information a sum
                let fd = -(ll(&pp) - ll(&pm) - ll(&mp) + ll(&mm)) / (4.0 * h * h) * n as f64;
                prop_assert!((fd - info[(a, b)]).abs() <= 1e-5 * info.amax(), "{} vs {}", fd, info[(a, b)]);
            }
        }
    }

    #[test]
    fn propensity_fits_ignore_row_order(seed in 0u64..10_000, n in 50usize..300, l in 1usize..4, shift in 0usize..50) {
        let inst = instance(seed, n, l, 0.0);
        let (perm, _) = permuted(&inst, shift);
        let a = propensity::fit_logistic_mle(&inst.data, &inst.design).unwrap();
        let b = propensity::fit_logistic_mle(&perm.data, &perm.design).unwrap();
        prop_assert!((a.phi() - b.phi()).amax() <= 1e-12 * a.phi().amax().max(1.0));
        let a = propensity::fit_tan_calibrated(&inst.data, &inst.design).unwrap();
        let b = propensity::fit_tan_calibrated(&perm.data, &perm.design).unwrap();
        prop_assert!((a.phi() - b.phi()).amax() <= 1e-12 * a.phi().amax().max(1.0));
        prop_assert!(propensity::ipw_design_residual(&a, inst.data.delta()) <= 1e-8);
    }

    #[test]
    fn aps_lambda_is_stable_and_weights_exceed_one(seed in 0u64..10_000, n in 50usize..400, l in 1usize..4, shift in 0usize..50) {
        let inst = instance(seed, n, l, 0.3);
        let fit = propensity::fit_logistic_mle(&inst.data, &inst.design).unwrap();
        let solve = balancing::solve_aps_lambda(&inst.basis, &fit.dhat(), inst.data.delta()).unwrap();
        let w = balancing::aps_weights(&inst.basis, &fit.dhat(), &solve.lambda, inst.data.delta()).unwrap();
        prop_assert!(w.weights().iter().all(|&v| v >= 1.0));
        let (perm, order) = permuted(&inst, shift);
        let dhat: Vec<f64> = order.iter().map(|&i| fit.dhat()[i]).collect();
        let again = balancing::solve_aps_lambda(&perm.basis, &dhat, perm.data.delta()).unwrap();
        prop_assert!((&solve.lambda - &again.lambda).amax() <= 1e-10);
    }

    #[test]
    fn aps_jacobian_matches_finite_differences(seed in 0u64..10_000, n in 50usize..300, l in 1usize..4) {
        let inst = instance(seed, n, l, 0.3);
        let fit = propensity::fit_logistic_mle(&inst.data, &inst.design).unwrap();
        let rows = inst.data.respondents();
        let excess: Vec<f64> = rows.iter().map(|&i| fit.dhat()[i] - 1.0).collect();
        let k = inst.basis.ncols();
        let lambda = DVector::from_fn(k, |j, _| 0.1 * (j as f64 + 1.0) * if seed % 2 == 0 { 1.0 } else { -1.0 });
        let jac = balancing::calibration_jacobian(&inst.basis, &rows, &excess, &lambda);
        let h = 1e-6;
        for j in 0..k {
            let mut up = lambda.clone();
            up[j] += h;
            let mut down = lambda.clone();
            down[j] -= h;
            let fd = (balancing::calibration_residual_vector(&inst.basis, &rows, &excess, &up)
                - balancing::calibration_residual_vector(&inst.basis, &rows, &excess, &down)) / (2.0 * h);
            prop_assert!((fd - jac.column(j)).amax() <= 1e-5);
        }
    }

    #[test]
    fn calibrated_weights_have_an_imputation_form(seed in 0u64..10_000, n in 50usize..400, l in 1usize..4) {
        let inst = instance(seed, n, l, 0.5);
        let fit = propensity::fit_logistic_mle(&inst.data, &inst.design).unwrap();
        let y = inst.data.outcome_or_zero();
        let nf = n as f64;
        let eb = balancing::solve_entropy_balancing(&inst.basis, &fit.dhat(), inst.data.delta()).unwrap();
        let beta = balancing::ibc_beta(&inst.basis, &y, &eb.weights).unwrap();
        let gap = (eb.weights.weighted_mean(&y, n) - balancing::imputation_estimate(&inst.basis, inst.data.delta(), &y, &beta)).abs() * nf;
        prop_assert!(gap <= 1e-6 * nf);
        let aps = estimators::fit_aps(&inst.data, &inst.basis, &fit).unwrap();
        prop_assert!(aps.dual_gap <= 1e-6 * nf);
        let robust = estimators::fit_aps_gamma(&inst.data, &inst.basis, &fit, 0.5).unwrap();
        if robust.fit.converged {
            prop_assert!(robust.dual_gap <= 1e-6 * nf);
        }
    }

    #[test]
    fn estimators_are_location_and_scale_equivariant(seed in 0u64..10_000, n in 80usize..300, shift in -5.0f64..5.0, scale in 0.2f64..5.0) {
        let inst = instance(seed, n, 2, 0.4);
        let config = EstimationConfig::default();
        let base = estimate_roster(&inst.data, &inst.basis, &roster(), &config);
        let moved = inst.data.map_outcomes(|y| scale * y + shift).unwrap();
        let after = estimate_roster(&moved, &inst.basis, &roster(), &config);
        for ((e, a), b) in roster().iter().zip(base).zip(after) {
            let (a, b) = (a.unwrap(), b.unwrap());
            // Horvitz-Thompson with divisor n: Σδd̂ ≠ n, so only scale carries over
            let expect = if *e == Estimator::Glm { scale * a.theta + shift * ipw_mass(&inst) } else { scale * a.theta + shift };
            // the robust fit stops on a 1e-8 parameter tolerance, so allow solver-level slack there
            let tol = if matches!(e, Estimator::ApsGamma(_)) { 1e-6 } else { 1e-9 } * expect.abs().max(1.0);
            prop_assert!((b.theta - expect).abs() <= tol, "{}: {} vs {}", e, b.theta, expect);
            if let (Some(va), Some(vb)) = (a.variance, b.variance) {
                prop_assert!(va >= 0.0 && vb >= 0.0);
            }
        }
    }

    #[test]
    fn q_weight_decreases(r in 0.0f64..10.0, dr in 0.01f64..5.0, s2 in 0.1f64..10.0, g in 0.01f64..2.0, dg in 0.01f64..1.0) {
        let q = gamma::q_weight(r, s2, g);
        prop_assert!(q > 0.0 && q <= 1.0);
        let q_far = gamma::q_weight(r + dr, s2, g);
        prop_assert!(q_far < q || q == 0.0);
        if r > 0.0 {
            let q_more = gamma::q_weight(r, s2, g + dg);
            prop_assert!(q_more < q || q == 0.0);
        }
    }

    #[test]
    fn robust_fit_is_stationary(seed in 0u64..10_000, n in 100usize..400, g in 0.1f64..1.0) {
        let inst = instance(seed, n, 2, 0.3);
        let fit = propensity::fit_logistic_mle(&inst.data, &inst.design).unwrap();
        let y = inst.data.outcome_or_zero();
        let d = fit.dhat();
        let gf = gamma::solve_gamma_system(&inst.basis, &y, inst.data.delta(), &d, g).unwrap();
        prop_assume!(gf.converged);
        prop_assert!(gf.q.iter().all(|&q| q > 0.0 && q <= 1.0));
        let obj = |beta: &DVector<f64>, s2: f64| gamma::gamma_objective(&inst.basis, &y, inst.data.delta(), &d, &gf.lambda, beta, s2, g);
        let h = 1e-6;
        for j in 0..gf.beta.len() {
            let mut up = gf.beta.clone();
            up[j] += h;
            let mut down = gf.beta.clone();
            down[j] -= h;
            prop_assert!(((obj(&up, gf.sigma2) - obj(&down, gf.sigma2)) / (2.0 * h)).abs() <= 1e-6);
        }
        let ds = (obj(&gf.beta, gf.sigma2 + h) - obj(&gf.beta, gf.sigma2 - h)) / (2.0 * h);
        prop_assert!(ds.abs() <= 1e-6);
        let w = gamma::gamma_weights(&gf, &d, &inst.basis).unwrap();
        prop_assert!(w.calibration_residual() <= 1e-8);
    }

    #[test]
    fn rmse_decomposes_exactly(values in prop::collection::vec(-100.0f64..100.0, 1..60), truth in -10.0f64..10.0) {
        let records: Vec<ReplicationRecord> = values.iter().enumerate().map(|(rep, &estimate)| ReplicationRecord {
            rep,
            estimator: Estimator::Cc,
            estimate,
            variance: None,
            converged: true,
            error: None,
        }).collect();
        let s = summarize(Estimator::Cc, &records, truth);
        prop_assert!((s.rmse * s.rmse - s.bias * s.bias - s.variance).abs() <= 1e-10 * s.rmse.powi(2).max(1.0));
    }
}

#[test]
fn outcome_shift_leaves_weights_untouched() {
    let inst = instance(3, 200, 2, 0.3);
    let fit = propensity::fit_logistic_mle(&inst.data, &inst.design).unwrap();
    let a = estimators::fit_aps(&inst.data, &inst.basis, &fit).unwrap();
    let shifted = inst.data.map_outcomes(|y| y + 10.0).unwrap();
    let b = estimators::fit_aps(&shifted, &inst.basis, &fit).unwrap();
    assert_eq!(a.weights.weights(), b.weights.weights());
}
