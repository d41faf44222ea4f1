mod common;

use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, DVector};

use augcal::balancing;
use augcal::estimators::{self, GammaChoice, Z95};
use augcal::propensity::{self, PropensityFit, PropensityMethod};
use augcal::{build_basis, estimate_roster, BasisSpec, Dataset, EstimationConfig, Estimator, WeightSet, WeightSource};
use common::{instance, Instance};

fn dataset(x: &[f64], y: &[Option<f64>]) -> Dataset {
    let delta = y.iter().map(Option::is_some).collect();
    Dataset::new(DMatrix::from_column_slice(x.len(), 1, x), delta, y.to_vec()).unwrap()
}

#[test]
fn cc_is_respondent_mean() {
    let d = dataset(&[0.0, 1.0, 2.0], &[Some(2.0), Some(4.0), None]);
    assert_eq!(estimators::estimate_cc(&d).unwrap().theta, 3.0);
}

#[test]
fn ipw_with_intercept_only_propensity_is_cc() {
    let Instance { data, .. } = instance(11, 200, 2, 0.3);
    let design = DMatrix::from_element(data.n(), 1, 1.0);
    let fit = propensity::fit_logistic_mle(&data, &design).unwrap();
    let ipw = estimators::estimate_ipw(&data, &fit).unwrap().theta;
    let cc = estimators::estimate_cc(&data).unwrap().theta;
    assert_abs_diff_eq!(ipw, cc, epsilon = 1e-12);
}

#[test]
fn full_response_gives_sample_mean_everywhere() {
    let y = [1.5, -0.25, 3.0, 2.0, 0.5, 4.25];
    let d = dataset(&[0.1, 0.7, -0.3, 1.2, 0.0, -1.1], &y.map(Some));
    let basis = build_basis(&d, &BasisSpec::linear(1)).unwrap();
    let mut roster = Estimator::roster_all();
    roster.push(Estimator::ApsGamma(GammaChoice::Fixed(1.0)));
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    for (e, r) in roster.iter().zip(estimate_roster(&d, &basis, &roster, &EstimationConfig::default())) {
        let r = r.unwrap_or_else(|err| panic!("{e}: {err}"));
        assert_abs_diff_eq!(r.theta, mean, epsilon = 1e-12);
    }
}

#[test]
fn aps_closed_form_instance() {
    // n = 4, two respondents with d̂ = 3, intercept-only basis.
    let d = dataset(&[0.0; 4], &[Some(1.0), Some(3.0), None, None]);
    let basis = build_basis(&d, &BasisSpec::intercept_only()).unwrap();
    let dhat = [3.0; 4];
    let solve = balancing::solve_aps_lambda(&basis, &dhat, d.delta()).unwrap();
    let w = balancing::aps_weights(&basis, &dhat, &solve.lambda, d.delta()).unwrap();
    let y = d.outcome_or_zero();
    let beta = balancing::ibc_beta(&basis, &y, &w).unwrap();
    assert_abs_diff_eq!(w.weighted_mean(&y, 4), 2.0, epsilon = 1e-12);
    assert_abs_diff_eq!(beta[0], 2.0, epsilon = 1e-12);
    assert_abs_diff_eq!(balancing::imputation_estimate(&basis, d.delta(), &y, &beta), 2.0, epsilon = 1e-12);
}

#[test]
fn hm_intercept_only_is_self_normalized_ipw() {
    let Instance { data, design, .. } = instance(12, 300, 2, 0.3);
    let basis = build_basis(&data, &BasisSpec::intercept_only()).unwrap();
    let fit = propensity::fit_logistic_mle(&data, &design).unwrap();
    let dhat = fit.dhat();
    let y = data.outcome_or_zero();
    let rows = data.respondents();
    let num: f64 = rows.iter().map(|&i| dhat[i] * y[i]).sum();
    let den: f64 = rows.iter().map(|&i| dhat[i]).sum();
    let hm = estimators::estimate_hm(&data, &basis, &fit).unwrap().theta;
    assert_abs_diff_eq!(hm, num / den, epsilon = 1e-10);
}

#[test]
fn aps_gamma_zero_matches_aps() {
    let Instance { data, basis, design } = instance(13, 400, 3, 0.5);
    let fit = propensity::fit_logistic_mle(&data, &design).unwrap();
    let aps = estimators::estimate_aps(&data, &basis, &fit).unwrap();
    let robust = estimators::estimate_aps_gamma(&data, &basis, &fit, 0.0).unwrap();
    assert_abs_diff_eq!(aps.theta, robust.theta, epsilon = 1e-8);
}

#[test]
fn ci_is_symmetric_normal_interval() {
    let Instance { data, basis, design } = instance(14, 300, 2, 0.3);
    let fit = propensity::fit_logistic_mle(&data, &design).unwrap();
    for r in [
        estimators::estimate_aps(&data, &basis, &fit).unwrap(),
        estimators::estimate_aps_gamma(&data, &basis, &fit, 0.5).unwrap(),
    ] {
        let v = r.variance.unwrap();
        let (lo, hi) = r.ci95.unwrap();
        assert_abs_diff_eq!(hi - r.theta, Z95 * v.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(r.theta - lo, Z95 * v.sqrt(), epsilon = 1e-12);
    }
    for r in [estimators::estimate_cc(&data).unwrap(), estimators::estimate_ipw(&data, &fit).unwrap()] {
        assert!(r.variance.is_none() && r.ci95.is_none());
    }
}

#[test]
fn roster_failures_are_isolated() {
    // every respondent has x > 0 and every nonrespondent x < 0: the MLE separates
    let x: Vec<f64> = (0..20).map(|i| i as f64 - 9.5).collect();
    let y: Vec<Option<f64>> = x.iter().map(|&v| (v > 0.0).then_some(v)).collect();
    let d = dataset(&x, &y);
    let basis = build_basis(&d, &BasisSpec::linear(1)).unwrap();
    let results = estimate_roster(&d, &basis, &Estimator::roster_all(), &EstimationConfig::default());
    assert!(results[0].is_ok(), "CC does not need a propensity model");
    assert!(results[1].is_err(), "GLM should report separation");
}

#[test]
fn weight_set_rejects_non_finite() {
    let d = dataset(&[0.0, 1.0], &[Some(1.0), None]);
    let basis = build_basis(&d, &BasisSpec::intercept_only()).unwrap();
    assert!(WeightSet::new(&basis, vec![0], vec![f64::NAN], WeightSource::Custom).is_err());
}

#[test]
fn trivial_fit_reports_unit_dhat() {
    let fit = PropensityFit::full_response(DMatrix::from_element(3, 1, 1.0), PropensityMethod::Mle);
    assert_eq!(fit.dhat(), vec![1.0; 3]);
    assert_eq!(fit.phi(), &DVector::zeros(1));
}
