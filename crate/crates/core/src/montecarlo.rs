//! Monte Carlo replications of a scenario and their summaries.

use crate::data::{build_basis, BasisSpec};
use crate::error::Result;
use crate::estimators::{self, EstimateReport, EstimationConfig, Estimator};
use crate::parallel::{self, Execution};
use crate::simgen::{Generator, ScenarioSpec, Truth};

/// One estimator on one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub rep: usize,
    pub estimator: Estimator,
    /// NaN when the estimator failed.
    pub estimate: f64,
    pub variance: Option<f64>,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    pub mean: f64,
    pub bias: f64,
    /// Replication variance with divisor `R`, so `rmse² = bias² + variance`.
    pub variance: f64,
    pub rmse: f64,
    /// `sd / √R`, the Monte Carlo standard error of the mean estimate.
    pub mc_se: f64,
    pub n_converged: usize,
    /// Share of converged replications whose 95% interval covers the truth,
    /// for estimators that report a variance.
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloSummary {
    pub scenario: String,
    pub truth: Truth,
    pub reps: usize,
    pub estimators: Vec<EstimatorSummary>,
    /// Replication-major, roster order within each replication.
    pub replications: Vec<ReplicationRecord>,
}

impl MonteCarloSummary {
    pub fn get(&self, est: Estimator) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|s| s.estimator == est)
    }

    /// Converged estimates of `est` in replication order.
    pub fn estimates(&self, est: Estimator) -> Vec<f64> {
        self.replications
            .iter()
            .filter(|r| r.estimator == est && r.converged)
            .map(|r| r.estimate)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct MonteCarloConfig {
    /// Basis for calibration and regression; defaults to an intercept plus every covariate.
    pub basis: Option<BasisSpec>,
    pub estimation: EstimationConfig,
    /// How replications are scheduled. Estimators inside a replication always run sequentially.
    pub exec: Execution,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self {
            basis: None,
            estimation: EstimationConfig::default(),
            exec: Execution::Parallel,
        }
    }
}

fn record(rep: usize, est: Estimator, result: Result<EstimateReport>) -> ReplicationRecord {
    match result {
        Ok(r) => ReplicationRecord {
            rep,
            estimator: est,
            estimate: r.theta,
            variance: r.variance,
            converged: r.diagnostics.converged && r.theta.is_finite(),
            error: None,
        },
        Err(e) => ReplicationRecord {
            rep,
            estimator: est,
            estimate: f64::NAN,
            variance: None,
            converged: false,
            error: Some(e.to_string()),
        },
    }
}

/// Runs `reps` replications of `scenario`; replication `r` draws from stream `r`
/// of the scenario seed, so results do not depend on scheduling.
pub fn run_monte_carlo(scenario: &ScenarioSpec, roster: &[Estimator], reps: usize, config: &MonteCarloConfig) -> Result<MonteCarloSummary> {
    let generator = Generator::new(scenario.clone())?;
    run_with_generator(&generator, roster, reps, config)
}

pub fn run_with_generator(generator: &Generator, roster: &[Estimator], reps: usize, config: &MonteCarloConfig) -> Result<MonteCarloSummary> {
    let truth = generator.truth();
    let per_rep = parallel::map_indexed(reps, config.exec, |rep| {
        let data = generator.draw(rep as u64);
        let spec = config
            .basis
            .clone()
            .unwrap_or_else(|| BasisSpec::linear(data.covariates().ncols()));
        match build_basis(&data, &spec) {
            Ok(basis) => {
                let results = estimators::estimate_roster(&data, &basis, roster, &config.estimation);
                roster.iter().zip(results).map(|(&e, r)| record(rep, e, r)).collect::<Vec<_>>()
            }
            Err(e) => roster.iter().map(|&est| record(rep, est, Err(e.clone()))).collect(),
        }
    });
    let replications: Vec<ReplicationRecord> = per_rep.into_iter().flatten().collect();
    let estimators = roster
        .iter()
        .map(|&est| summarize(est, &replications, truth.value))
        .collect();
    Ok(MonteCarloSummary {
        scenario: generator.spec().label(),
        truth,
        reps,
        estimators,
        replications,
    })
}

/// Bias, variance and RMSE over the converged replications of `est`.
pub fn summarize(est: Estimator, records: &[ReplicationRecord], truth: f64) -> EstimatorSummary {
    let ok: Vec<&ReplicationRecord> = records.iter().filter(|r| r.estimator == est && r.converged).collect();
    let r = ok.len();
    let rf = r as f64;
    let mean = ok.iter().map(|x| x.estimate).sum::<f64>() / rf;
    let variance = ok.iter().map(|x| (x.estimate - mean) * (x.estimate - mean)).sum::<f64>() / rf;
    let bias = mean - truth;
    let with_var: Vec<_> = ok.iter().filter_map(|x| x.variance.map(|v| (x.estimate, v))).collect();
    let coverage = (!with_var.is_empty()).then(|| {
        let hits = with_var
            .iter()
            .filter(|(t, v)| (t - truth).abs() <= estimators::Z95 * v.max(0.0).sqrt())
            .count();
        hits as f64 / with_var.len() as f64
    });
    EstimatorSummary {
        estimator: est,
        mean,
        bias,
        variance,
        rmse: (bias * bias + variance).sqrt(),
        mc_se: (variance / rf).sqrt(),
        n_converged: r,
        coverage,
    }
}
