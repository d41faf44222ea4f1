//! Synthetic data for the simulation designs.
//!
//! Covariates are `X₁ ~ Unif(0, 2)` and `X₂ ~ N(0, 1)`. Outcome models:
//!
//! * OM1: `Y = 1 + x₁ + x₂ + ε`
//! * OM2: `Y = 1 + x₁ + x₂ + (x₁ − 0.5) x₂⁴ + ε`
//!
//! with `ε ~ N(0, 1)`. Response models:
//!
//! * PM1: `logit P(δ = 1 | x) = φ₀ + 0.5 x₁ + 0.5 x₂`
//! * PM2: `P(δ = 1 | x) = 0.8` if `a + x₁ + x₂ > 0`, else 0.4
//! * PM3: `logit P(δ = 1 | x) = φ₀ + 2 x₁ + x₂ + 0.5 x₃`
//! * PM4: `P(δ = 1 | x) = 0.8` if `a + 2 x₁ + x₂ + x₃ + x₄ + x₅ + x₆ > 0`, else 0.4
//!
//! PM3 and PM4 act on a supplied covariate table, standardized column by
//! column before the index is formed. Intercepts are tuned to a target
//! response rate. The response indicator is always drawn from the covariates
//! alone, before any outcome is attached.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::propensity::expit;

/// Number of covariate draws used to tune PM1/PM2 intercepts.
pub const CALIBRATION_DRAWS: usize = 1_000_000;
/// Seed of the covariate sample used to tune intercepts; shared by all scenarios.
pub const CALIBRATION_SEED: u64 = 0x5eed_ca1b;
/// Largest accepted gap between the achieved and the target response rate.
pub const RATE_TOLERANCE: f64 = 1e-4;

const STEP_HIGH: f64 = 0.8;
const STEP_LOW: f64 = 0.4;

/// Outcome rows for an externally supplied population table.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalTable {
    pub covariates: DMatrix<f64>,
    pub outcome: Vec<f64>,
    pub names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OutcomeModel {
    Om1,
    Om2,
    External(ExternalTable),
}

impl OutcomeModel {
    pub fn mean(&self, x1: f64, x2: f64) -> f64 {
        match self {
            OutcomeModel::Om1 => 1.0 + x1 + x2,
            OutcomeModel::Om2 => 1.0 + x1 + x2 + (x1 - 0.5) * x2.powi(4),
            OutcomeModel::External(_) => f64::NAN,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            OutcomeModel::Om1 => "OM1",
            OutcomeModel::Om2 => "OM2",
            OutcomeModel::External(_) => "external",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResponseModel {
    Pm1,
    Pm2,
    Pm3,
    Pm4,
}

impl ResponseModel {
    pub fn mechanism(self) -> Mechanism {
        match self {
            ResponseModel::Pm1 => Mechanism::logistic(vec![0.5, 0.5]),
            ResponseModel::Pm2 => Mechanism::step(vec![1.0, 1.0]),
            ResponseModel::Pm3 => Mechanism::logistic(vec![2.0, 1.0, 0.5]),
            ResponseModel::Pm4 => Mechanism::step(vec![2.0, 1.0, 1.0, 1.0, 1.0, 1.0]),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ResponseModel::Pm1 => "PM1",
            ResponseModel::Pm2 => "PM2",
            ResponseModel::Pm3 => "PM3",
            ResponseModel::Pm4 => "PM4",
        }
    }

    fn on_table(self) -> bool {
        matches!(self, ResponseModel::Pm3 | ResponseModel::Pm4)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    /// `P = expit(c + sᵀx)`.
    Logistic,
    /// `P = 0.8` if `c + sᵀx > 0`, else 0.4.
    Step,
}

/// A response probability `P(δ = 1 | x)` built from a linear index `c + sᵀx`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mechanism {
    pub link: Link,
    pub slopes: Vec<f64>,
}

impl Mechanism {
    pub fn logistic(slopes: Vec<f64>) -> Self {
        Self { link: Link::Logistic, slopes }
    }

    pub fn step(slopes: Vec<f64>) -> Self {
        Self { link: Link::Step, slopes }
    }

    fn index(&self, x: &DMatrix<f64>, row: usize) -> f64 {
        self.slopes.iter().enumerate().map(|(j, s)| s * x[(row, j)]).sum()
    }

    pub fn probability(&self, intercept: f64, index: f64) -> f64 {
        match self.link {
            Link::Logistic => expit(intercept + index),
            Link::Step => {
                if intercept + index > 0.0 {
                    STEP_HIGH
                } else {
                    STEP_LOW
                }
            }
        }
    }

    /// Intercept at which the average response probability over the rows of
    /// `x` equals `target`.
    pub fn calibrate(&self, x: &DMatrix<f64>, target: f64) -> Result<f64> {
        if !(target > 0.0 && target < 1.0) {
            return Err(Error::InvalidArgument(format!("target rate must lie in (0, 1), got {target}")));
        }
        if x.ncols() < self.slopes.len() {
            return Err(Error::MissingColumn(format!("x{}", x.ncols() + 1)));
        }
        let idx: Vec<f64> = (0..x.nrows()).map(|i| self.index(x, i)).collect();
        let rate = |c: f64| idx.iter().map(|&v| self.probability(c, v)).sum::<f64>() / idx.len() as f64;
        if self.slopes.iter().all(|&s| s == 0.0) && self.link == Link::Logistic {
            let c = (target / (1.0 - target)).ln();
            return Ok(c);
        }
        let spread = idx.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let (mut lo, mut hi) = (-spread - 40.0, spread + 40.0);
        let (rlo, rhi) = (rate(lo), rate(hi));
        if !(rlo < target && target < rhi) {
            return Err(Error::BracketFailure);
        }
        let mut mid = 0.5 * (lo + hi);
        while hi - lo > 1e-10 {
            mid = 0.5 * (lo + hi);
            if rate(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        if (rate(mid) - target).abs() > RATE_TOLERANCE.max(2.0 * (STEP_HIGH - STEP_LOW) / x.nrows() as f64) {
            return Err(Error::BracketFailure);
        }
        Ok(mid)
    }

    /// One Bernoulli draw per row of `x`.
    pub fn draw<R: Rng>(&self, x: &DMatrix<f64>, intercept: f64, rng: &mut R) -> Vec<bool> {
        (0..x.nrows())
            .map(|i| rng.random::<f64>() < self.probability(intercept, self.index(x, i)))
            .collect()
    }
}

/// Additive `Unif(lo, hi)` noise on a simple random sample of the observed outcomes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contamination {
    pub fraction: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Contamination {
    pub fn uniform(fraction: f64, lo: f64, hi: f64) -> Self {
        Self { fraction, lo, hi }
    }

    /// `round(fraction · n₁)`.
    pub fn count(&self, respondents: usize) -> usize {
        (self.fraction * respondents as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub outcome: OutcomeModel,
    pub response: ResponseModel,
    pub n: usize,
    pub contamination: Option<Contamination>,
    pub seed: u64,
    pub target_rate: f64,
}

impl ScenarioSpec {
    pub fn new(outcome: OutcomeModel, response: ResponseModel, n: usize, seed: u64) -> Self {
        Self {
            outcome,
            response,
            n,
            contamination: None,
            seed,
            target_rate: 0.6,
        }
    }

    pub fn contaminated(mut self, c: Contamination) -> Self {
        self.contamination = Some(c);
        self
    }

    pub fn label(&self) -> String {
        format!("{}{}", self.outcome.label(), self.response.label())
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.contamination {
            if !(0.0..=1.0).contains(&c.fraction) {
                return Err(Error::InvalidArgument(format!("contamination fraction {} outside [0, 1]", c.fraction)));
            }
            if !(c.lo <= c.hi) || !c.lo.is_finite() || !c.hi.is_finite() {
                return Err(Error::InvalidArgument("contamination bounds must be finite with lo <= hi".into()));
            }
        }
        match (&self.outcome, self.response.on_table()) {
            (OutcomeModel::External(t), true) => {
                if t.covariates.nrows() != t.outcome.len() {
                    return Err(Error::ShapeMismatch("external table outcome length differs from its rows".into()));
                }
                if t.covariates.nrows() < 10 {
                    return Err(Error::InvalidArgument("external table needs at least 10 rows".into()));
                }
            }
            (OutcomeModel::External(_), false) => {
                return Err(Error::InvalidArgument("PM1/PM2 are defined for the simulated covariates only".into()));
            }
            (_, true) => {
                return Err(Error::InvalidArgument("PM3/PM4 need an external covariate table".into()));
            }
            (_, false) => {
                if self.n < 10 {
                    return Err(Error::InvalidArgument(format!("n must be at least 10, got {}", self.n)));
                }
            }
        }
        Ok(())
    }
}

/// `n` draws of `(X₁, X₂)`.
pub fn draw_covariates<R: Rng>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let u = Uniform::new(0.0, 2.0).expect("valid range");
    let mut x = DMatrix::zeros(n, 2);
    for i in 0..n {
        x[(i, 0)] = u.sample(rng);
        x[(i, 1)] = Distribution::<f64>::sample(&StandardNormal, rng);
    }
    x
}

/// Intercept giving `target` mean response probability under the simulated
/// covariate law, approximated with `draws` fresh covariate draws.
pub fn calibrate_intercept(model: ResponseModel, target: f64, draws: usize, seed: u64) -> Result<f64> {
    if model.on_table() {
        return Err(Error::InvalidArgument("PM3/PM4 intercepts are tuned on a covariate table".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.mechanism().calibrate(&draw_covariates(draws, &mut rng), target)
}

/// [`calibrate_intercept`] with the shared calibration sample, memoized per
/// (model, target) for the life of the process.
pub fn default_intercept(model: ResponseModel, target: f64) -> Result<f64> {
    static CACHE: OnceLock<Mutex<HashMap<(ResponseModel, u64), f64>>> = OnceLock::new();
    let key = (model, target.to_bits());
    let cache = CACHE.get_or_init(Default::default);
    if let Some(&c) = cache.lock().expect("cache lock").get(&key) {
        return Ok(c);
    }
    let c = calibrate_intercept(model, target, CALIBRATION_DRAWS, CALIBRATION_SEED)?;
    cache.lock().expect("cache lock").insert(key, c);
    Ok(c)
}

/// Columns rescaled to mean 0 and variance 1 (constant columns become 0).
pub fn standardize(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows() as f64;
    let mut out = x.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        for v in col.iter_mut() {
            *v = if sd > 0.0 { (*v - mean) / sd } else { 0.0 };
        }
    }
    out
}

/// PM3/PM4 response indicators for a covariate table whose first columns are
/// `x₁, …, x₆` in order; the intercept is tuned on the standardized table.
pub fn apply_pm34(table: &DMatrix<f64>, model: ResponseModel, target: f64, seed: u64) -> Result<Vec<bool>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prepared = TableMechanism::new(table, model, target)?;
    Ok(prepared.draw(&mut rng))
}

/// A PM3/PM4 mechanism with its intercept tuned to a particular table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableMechanism {
    standardized: DMatrix<f64>,
    mechanism: Mechanism,
    intercept: f64,
}

impl TableMechanism {
    pub fn new(table: &DMatrix<f64>, model: ResponseModel, target: f64) -> Result<Self> {
        if !model.on_table() {
            return Err(Error::InvalidArgument(format!("{} is not a table mechanism", model.label())));
        }
        let mechanism = model.mechanism();
        if table.ncols() < mechanism.slopes.len() {
            return Err(Error::MissingColumn(format!("x{}", table.ncols() + 1)));
        }
        let standardized = standardize(&table.columns(0, mechanism.slopes.len()).into_owned());
        let intercept = mechanism.calibrate(&standardized, target)?;
        Ok(Self {
            standardized,
            mechanism,
            intercept,
        })
    }

    pub fn intercept(&self) -> f64 {
        self.intercept
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> Vec<bool> {
        self.mechanism.draw(&self.standardized, self.intercept, rng)
    }
}

/// `E(Y)` with a standard error (zero when known in closed form).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Truth {
    pub value: f64,
    pub std_error: f64,
}

/// Population mean of the outcome model. OM1 and OM2 are exact; an external
/// table reports its row mean with the standard error of that mean.
pub fn truth_theta(model: &OutcomeModel) -> Truth {
    match model {
        OutcomeModel::Om1 => Truth { value: 2.0, std_error: 0.0 },
        // E x₁ = 1, E x₂ = 0, E x₂⁴ = 3 and x₁ ⟂ x₂.
        OutcomeModel::Om2 => Truth { value: 3.5, std_error: 0.0 },
        OutcomeModel::External(t) => {
            let (mean, se) = mean_and_se(&t.outcome);
            Truth { value: mean, std_error: se }
        }
    }
}

/// Monte Carlo approximation of `E(Y)` from `draws` simulated outcomes.
pub fn truth_theta_mc(model: &OutcomeModel, draws: usize, seed: u64) -> Truth {
    if let OutcomeModel::External(_) = model {
        return truth_theta(model);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = draw_covariates(draws, &mut rng);
    let y: Vec<f64> = (0..draws)
        .map(|i| model.mean(x[(i, 0)], x[(i, 1)]) + Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect();
    let (value, std_error) = mean_and_se(&y);
    Truth { value, std_error }
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// A scenario with its intercept resolved, ready to produce replications.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    spec: ScenarioSpec,
    intercept: f64,
    table: Option<TableMechanism>,
}

impl Generator {
    pub fn new(spec: ScenarioSpec) -> Result<Self> {
        spec.validate()?;
        let (intercept, table) = match &spec.outcome {
            OutcomeModel::External(t) => {
                let m = TableMechanism::new(&t.covariates, spec.response, spec.target_rate)?;
                (m.intercept(), Some(m))
            }
            _ => (default_intercept(spec.response, spec.target_rate)?, None),
        };
        Ok(Self { spec, intercept, table })
    }

    /// Uses a known intercept instead of tuning one (PM1/PM2 only).
    pub fn with_intercept(spec: ScenarioSpec, intercept: f64) -> Result<Self> {
        spec.validate()?;
        if spec.response.on_table() {
            return Err(Error::InvalidArgument("table mechanisms tune their own intercept".into()));
        }
        Ok(Self {
            spec,
            intercept,
            table: None,
        })
    }

    pub fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    pub fn intercept(&self) -> f64 {
        self.intercept
    }

    pub fn truth(&self) -> Truth {
        truth_theta(&self.spec.outcome)
    }

    /// Random stream for replication `rep` of this scenario.
    pub fn rng(&self, rep: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(rep);
        rng
    }

    /// The dataset for replication `rep`.
    pub fn draw(&self, rep: u64) -> Dataset {
        let mut rng = self.rng(rep);
        let (x, delta, mut y, names) = match (&self.spec.outcome, &self.table) {
            (OutcomeModel::External(t), Some(m)) => {
                let delta = m.draw(&mut rng);
                (t.covariates.clone(), delta, t.outcome.clone(), t.names.clone())
            }
            (model, _) => {
                let x = draw_covariates(self.spec.n, &mut rng);
                let delta = self.spec.response.mechanism().draw(&x, self.intercept, &mut rng);
                let y: Vec<f64> = (0..self.spec.n)
                    .map(|i| model.mean(x[(i, 0)], x[(i, 1)]) + Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect();
                (x, delta, y, vec!["x1".to_string(), "x2".to_string()])
            }
        };
        if let Some(c) = self.spec.contamination {
            let resp: Vec<usize> = (0..delta.len()).filter(|&i| delta[i]).collect();
            let m = c.count(resp.len()).min(resp.len());
            let noise = Uniform::new_inclusive(c.lo, c.hi).expect("validated bounds");
            for k in sample(&mut rng, resp.len(), m).into_vec() {
                y[resp[k]] += noise.sample(&mut rng);
            }
        }
        let outcome = y.iter().zip(&delta).map(|(&v, &d)| d.then_some(v)).collect();
        let ds = Dataset::new(x, delta, outcome).expect("generated data are consistent");
        if names.len() == ds.covariates().ncols() {
            ds.with_names(names).expect("name count checked")
        } else {
            ds
        }
    }
}

/// Replication 0 of `spec`.
pub fn generate(spec: &ScenarioSpec) -> Result<Dataset> {
    Ok(Generator::new(spec.clone())?.draw(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_slope_logistic_intercept() {
        let x = DMatrix::from_element(100, 2, 1.0);
        let c = Mechanism::logistic(vec![0.0, 0.0]).calibrate(&x, 0.5).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn contamination_count_rounds() {
        let c = Contamination::uniform(0.2, -50.0, 50.0);
        assert_eq!(c.count(600), 120);
        assert_eq!(c.count(7), 1);
        assert_eq!(c.count(8), 2);
    }

    #[test]
    fn same_seed_same_data() {
        let g = Generator::with_intercept(ScenarioSpec::new(OutcomeModel::Om1, ResponseModel::Pm1, 50, 3), 0.0).unwrap();
        assert_eq!(g.draw(4), g.draw(4));
        assert_ne!(g.draw(4), g.draw(5));
    }

    #[test]
    fn table_mechanism_needs_columns() {
        let t = DMatrix::from_element(20, 2, 1.0);
        assert!(matches!(TableMechanism::new(&t, ResponseModel::Pm3, 0.6), Err(Error::MissingColumn(_))));
    }
}
