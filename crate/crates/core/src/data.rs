//! Shared data types: the incomplete-outcome dataset, basis functions and
//! their evaluation, calibration weight sets and solver fit state.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// `n` observations of covariates, a response indicator and the outcome when
/// it was observed.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    covariates: DMatrix<f64>,
    delta: Vec<bool>,
    outcome: Vec<Option<f64>>,
    names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset and checks every invariant (see [`Dataset::validate`]).
    pub fn new(covariates: DMatrix<f64>, delta: Vec<bool>, outcome: Vec<Option<f64>>) -> Result<Self> {
        let names = (1..=covariates.ncols()).map(|j| format!("x{j}")).collect();
        let ds = Self {
            covariates,
            delta,
            outcome,
            names,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Response indicators are read off the outcome column: present means observed.
    pub fn from_outcomes(covariates: DMatrix<f64>, outcome: Vec<Option<f64>>) -> Result<Self> {
        let delta = outcome.iter().map(Option::is_some).collect();
        Self::new(covariates, delta, outcome)
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.covariates.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "{} covariate names for {} columns",
                names.len(),
                self.covariates.ncols()
            )));
        }
        self.names = names;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.covariates.nrows();
        if n == 0 {
            return Err(Error::ShapeMismatch("dataset has no rows".into()));
        }
        if self.delta.len() != n || self.outcome.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} covariate rows, {} response indicators, {} outcomes",
                n,
                self.delta.len(),
                self.outcome.len()
            )));
        }
        for (i, (d, y)) in self.delta.iter().zip(&self.outcome).enumerate() {
            match (d, y) {
                (true, Some(v)) if v.is_finite() => {}
                (false, None) => {}
                _ => return Err(Error::OutcomePresenceViolation(i)),
            }
        }
        if self.covariates.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("covariates must be finite".into()));
        }
        if !self.delta.iter().any(|&d| d) {
            return Err(Error::EmptyRespondentSet);
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.delta.len()
    }

    pub fn n_respondents(&self) -> usize {
        self.delta.iter().filter(|&&d| d).count()
    }

    pub fn n_nonrespondents(&self) -> usize {
        self.n() - self.n_respondents()
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.names
    }

    pub fn delta(&self) -> &[bool] {
        &self.delta
    }

    pub fn outcome(&self) -> &[Option<f64>] {
        &self.outcome
    }

    /// Row indices of respondents in ascending order.
    pub fn respondents(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.delta[i]).collect()
    }

    /// Observed outcomes in respondent order.
    pub fn observed(&self) -> Vec<f64> {
        self.outcome.iter().flatten().copied().collect()
    }

    /// Observed outcomes with zero in place of the missing ones; only ever
    /// multiplied by `δ_i`.
    pub fn outcome_or_zero(&self) -> Vec<f64> {
        self.outcome.iter().map(|y| y.unwrap_or(0.0)).collect()
    }

    /// Applies `f` to every observed outcome.
    pub fn map_outcomes(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let mut out = self.clone();
        for y in out.outcome.iter_mut().flatten() {
            *y = f(*y);
        }
        out.validate()?;
        Ok(out)
    }

    /// The dataset restricted to the given rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let covariates = self.covariates.select_rows(rows.iter());
        let delta = rows.iter().map(|&i| self.delta[i]).collect();
        let outcome = rows.iter().map(|&i| self.outcome[i]).collect();
        Self::new(covariates, delta, outcome)?.with_names(self.names.clone())
    }
}

type RowFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Named pure function of a covariate row.
#[derive(Clone)]
pub struct Transform {
    name: String,
    func: RowFn,
}

impl Transform {
    pub fn new(name: impl Into<String>, func: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            func: Arc::new(func),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn eval(&self, row: &[f64]) -> f64 {
        (self.func)(row)
    }
}

impl fmt::Debug for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("Transform").field(&self.name).finish()
    }
}

#[derive(Debug, Clone)]
pub enum BasisTerm {
    Intercept,
    Column(usize),
    Transform(Transform),
}

impl BasisTerm {
    fn eval(&self, row: &[f64]) -> f64 {
        match self {
            BasisTerm::Intercept => 1.0,
            BasisTerm::Column(j) => row[*j],
            BasisTerm::Transform(t) => t.eval(row),
        }
    }
}

/// Named transforms available to textual basis specifications.
///
/// Besides whatever is registered explicitly, `fn(col)` resolves the unary
/// built-ins `sq`, `cube`, `log`, `log1p`, `sqrt`, `exp` and `abs`, and
/// `colA*colB` builds a product.
#[derive(Default, Clone)]
pub struct TransformRegistry {
    named: HashMap<String, Transform>,
}

impl TransformRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, func: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) {
        let name = name.into();
        self.named.insert(name.clone(), Transform::new(name, func));
    }

    pub fn get(&self, name: &str) -> Option<&Transform> {
        self.named.get(name)
    }

    fn unary(op: &str) -> Option<fn(f64) -> f64> {
        Some(match op {
            "sq" => |v: f64| v * v,
            "cube" => |v: f64| v * v * v,
            "log" => f64::ln,
            "log1p" => f64::ln_1p,
            "sqrt" => f64::sqrt,
            "exp" => f64::exp,
            "abs" => f64::abs,
            _ => return None,
        })
    }

    /// Resolves one textual term against the covariate names.
    pub fn resolve(&self, term: &str, columns: &[String]) -> Result<BasisTerm> {
        let term = term.trim();
        let col = |name: &str| {
            columns
                .iter()
                .position(|c| c == name.trim())
                .ok_or_else(|| Error::MissingColumn(name.trim().to_string()))
        };
        if term == "1" {
            return Ok(BasisTerm::Intercept);
        }
        if let Some(t) = self.get(term) {
            return Ok(BasisTerm::Transform(t.clone()));
        }
        if let Some((op, rest)) = term.split_once('(') {
            let arg = rest
                .strip_suffix(')')
                .ok_or_else(|| Error::InvalidBasis(format!("unbalanced parentheses in `{term}`")))?;
            let f = Self::unary(op.trim()).ok_or_else(|| Error::InvalidBasis(format!("unknown transform `{op}`")))?;
            let j = col(arg)?;
            return Ok(BasisTerm::Transform(Transform::new(term, move |row| f(row[j]))));
        }
        if let Some((a, b)) = term.split_once('*') {
            let (ja, jb) = (col(a)?, col(b)?);
            return Ok(BasisTerm::Transform(Transform::new(term, move |row| row[ja] * row[jb])));
        }
        col(term).map(BasisTerm::Column)
    }
}

/// Ordered basis functions `b_0 ≡ 1, b_1, …, b_L`.
#[derive(Debug, Clone)]
pub struct BasisSpec {
    terms: Vec<BasisTerm>,
}

impl BasisSpec {
    pub fn new(terms: Vec<BasisTerm>) -> Result<Self> {
        match terms.first() {
            Some(BasisTerm::Intercept) => {}
            _ => return Err(Error::InvalidBasis("the first basis function must be the intercept".into())),
        }
        if terms[1..].iter().any(|t| matches!(t, BasisTerm::Intercept)) {
            return Err(Error::InvalidBasis("intercept listed more than once".into()));
        }
        Ok(Self { terms })
    }

    pub fn intercept_only() -> Self {
        Self {
            terms: vec![BasisTerm::Intercept],
        }
    }

    /// Intercept plus every covariate column in order.
    pub fn linear(p: usize) -> Self {
        let mut terms = vec![BasisTerm::Intercept];
        terms.extend((0..p).map(BasisTerm::Column));
        Self { terms }
    }

    /// Intercept plus the listed covariate columns.
    pub fn columns(cols: &[usize]) -> Self {
        let mut terms = vec![BasisTerm::Intercept];
        terms.extend(cols.iter().copied().map(BasisTerm::Column));
        Self { terms }
    }

    /// Parses textual terms; a leading intercept is added when missing.
    pub fn parse<S: AsRef<str>>(terms: &[S], columns: &[String], registry: &TransformRegistry) -> Result<Self> {
        let mut parsed = Vec::with_capacity(terms.len() + 1);
        for t in terms {
            parsed.push(registry.resolve(t.as_ref(), columns)?);
        }
        if !matches!(parsed.first(), Some(BasisTerm::Intercept)) {
            parsed.insert(0, BasisTerm::Intercept);
        }
        Self::new(parsed)
    }

    /// `L + 1`.
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[BasisTerm] {
        &self.terms
    }
}

/// Basis functions evaluated on every row of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix {
    values: DMatrix<f64>,
    means: DVector<f64>,
}

impl BasisMatrix {
    /// Wraps a precomputed matrix whose first column must be all ones.
    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::ShapeMismatch("empty basis matrix".into()));
        }
        if values.column(0).iter().any(|&v| v != 1.0) {
            return Err(Error::InvalidBasis("column 0 must be identically one".into()));
        }
        for (idx, v) in values.iter().enumerate() {
            if !v.is_finite() {
                let n = values.nrows();
                return Err(Error::NonFiniteBasisValue {
                    row: idx % n,
                    column: idx / n,
                });
            }
        }
        let means = column_means(&values);
        Ok(Self { values, means })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn means(&self) -> &DVector<f64> {
        &self.means
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    /// `L + 1`.
    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn row_dot(&self, i: usize, v: &DVector<f64>) -> f64 {
        crate::linalg::row_dot(&self.values, i, v)
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        let values = self.values.select_rows(rows.iter());
        let means = column_means(&values);
        Self { values, means }
    }
}

fn column_means(values: &DMatrix<f64>) -> DVector<f64> {
    let n = values.nrows() as f64;
    DVector::from_iterator(values.ncols(), values.column_iter().map(|c| c.iter().sum::<f64>() / n))
}

/// Evaluates `spec` on every row of `dataset`.
pub fn build_basis(dataset: &Dataset, spec: &BasisSpec) -> Result<BasisMatrix> {
    let x = dataset.covariates();
    let (n, p) = x.shape();
    for t in spec.terms() {
        if let BasisTerm::Column(j) = t {
            if *j >= p {
                return Err(Error::InvalidBasis(format!("column {j} out of range for {p} covariates")));
            }
        }
    }
    let k = spec.len();
    let mut values = DMatrix::zeros(n, k);
    let mut row = vec![0.0; p];
    for i in 0..n {
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = x[(i, j)];
        }
        for (c, term) in spec.terms().iter().enumerate() {
            let v = term.eval(&row);
            if !v.is_finite() {
                return Err(Error::NonFiniteBasisValue { row: i, column: c });
            }
            values[(i, c)] = v;
        }
    }
    let means = column_means(&values);
    Ok(BasisMatrix { values, means })
}

/// Which estimator produced a set of weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightSource {
    InverseProbability,
    EntropyBalancing,
    TanCalibrated,
    Augmented,
    AugmentedGamma(f64),
    Custom,
}

/// Per-respondent weights `ω_i` with the achieved calibration residual.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    rows: Vec<usize>,
    weights: Vec<f64>,
    source: WeightSource,
    residual: f64,
}

impl WeightSet {
    /// `rows` are the respondent indices the weights belong to.
    pub fn new(basis: &BasisMatrix, rows: Vec<usize>, weights: Vec<f64>, source: WeightSource) -> Result<Self> {
        if rows.len() != weights.len() {
            return Err(Error::ShapeMismatch(format!("{} rows but {} weights", rows.len(), weights.len())));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidArgument("weights must be finite".into()));
        }
        let residual = calibration_residual(basis, &rows, &weights);
        Ok(Self {
            rows,
            weights,
            source,
            residual,
        })
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn source(&self) -> WeightSource {
        self.source
    }

    /// `max_j |n⁻¹ Σ δ_i ω_i b_ij − n⁻¹ Σ_i b_ij|`.
    pub fn calibration_residual(&self) -> f64 {
        self.residual
    }

    /// `n⁻¹ Σ δ_i ω_i y_i`, with `y` indexed by dataset row.
    pub fn weighted_mean(&self, y: &[f64], n: usize) -> f64 {
        self.rows.iter().zip(&self.weights).map(|(&i, w)| w * y[i]).sum::<f64>() / n as f64
    }
}

/// Max-norm of `n⁻¹ Σ δ_i ω_i b_i − n⁻¹ Σ_i b_i`.
pub fn calibration_residual(basis: &BasisMatrix, rows: &[usize], weights: &[f64]) -> f64 {
    let n = basis.nrows() as f64;
    let sums = crate::linalg::weighted_row_sum(basis.values(), rows, weights);
    sums.iter()
        .zip(basis.means().iter())
        .fold(0.0_f64, |acc, (s, m)| acc.max((s / n - m).abs()))
}

/// Converged parameter block shared by the augmented estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct FitState {
    pub phi: DVector<f64>,
    pub lambda: DVector<f64>,
    pub beta: DVector<f64>,
    pub sigma2: f64,
    pub gamma: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        Dataset::new(x, vec![true, false, true], vec![Some(1.0), None, Some(2.0)]).unwrap()
    }

    #[test]
    fn basis_of_raw_column() {
        let b = build_basis(&small(), &BasisSpec::linear(1)).unwrap();
        assert_eq!(b.values().column(0).as_slice(), &[1.0, 1.0, 1.0]);
        assert_eq!(b.values().column(1).as_slice(), &[0.0, 1.0, 2.0]);
        assert_eq!(b.means().as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn intercept_only_basis() {
        let b = build_basis(&small(), &BasisSpec::intercept_only()).unwrap();
        assert_eq!(b.ncols(), 1);
        assert_eq!(b.means()[0], 1.0);
    }

    #[test]
    fn non_finite_transform_is_reported() {
        let spec = BasisSpec::new(vec![
            BasisTerm::Intercept,
            BasisTerm::Transform(Transform::new("log", |r| r[0].ln())),
        ])
        .unwrap();
        assert_eq!(
            build_basis(&small(), &spec),
            Err(Error::NonFiniteBasisValue { row: 0, column: 1 })
        );
    }

    #[test]
    fn spec_must_start_with_intercept() {
        assert!(BasisSpec::new(vec![BasisTerm::Column(0)]).is_err());
        assert!(BasisSpec::new(vec![BasisTerm::Intercept, BasisTerm::Intercept]).is_err());
    }

    #[test]
    fn validate_cases() {
        let x = DMatrix::zeros(2, 1);
        assert!(Dataset::new(x.clone(), vec![true, false], vec![Some(3.0), None]).is_ok());
        assert_eq!(
            Dataset::new(x.clone(), vec![true, false], vec![Some(3.0), Some(5.0)]),
            Err(Error::OutcomePresenceViolation(1))
        );
        assert_eq!(
            Dataset::new(x.clone(), vec![false, false], vec![None, None]),
            Err(Error::EmptyRespondentSet)
        );
        assert!(matches!(
            Dataset::new(x, vec![true], vec![Some(1.0)]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn parse_textual_terms() {
        let cols = vec!["a".to_string(), "b".to_string()];
        let mut reg = TransformRegistry::new();
        reg.register("ratio", |r| r[0] / (1.0 + r[1].abs()));
        let spec = BasisSpec::parse(&["a", "sq(b)", "a*b", "ratio"], &cols, &reg).unwrap();
        assert_eq!(spec.len(), 5);
        let x = DMatrix::from_row_slice(1, 2, &[2.0, -3.0]);
        let ds = Dataset::new(x, vec![true], vec![Some(0.0)]).unwrap();
        let b = build_basis(&ds, &spec).unwrap();
        assert_eq!(b.values().row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0, 9.0, -6.0, 0.5]);
        assert!(matches!(
            BasisSpec::parse(&["zzz"], &cols, &reg),
            Err(Error::MissingColumn(_))
        ));
    }

    #[test]
    fn residual_recomputes() {
        let ds = small();
        let b = build_basis(&ds, &BasisSpec::linear(1)).unwrap();
        let w = WeightSet::new(&b, ds.respondents(), vec![1.5, 1.5], WeightSource::Custom).unwrap();
        // n⁻¹Σδωb = (1, 1), targets (1, 1)
        assert!(w.calibration_residual() < 1e-15);
        assert_eq!(w.calibration_residual(), calibration_residual(&b, w.rows(), w.weights()));
    }
}
