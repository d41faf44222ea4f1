#![allow(dead_code)]

use augcal::propensity;
use augcal::{build_basis, BasisMatrix, BasisSpec, Dataset};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    Distribution::<f64>::sample(&StandardNormal, rng)
}

pub struct Instance {
    pub data: Dataset,
    pub basis: BasisMatrix,
    pub design: DMatrix<f64>,
}

/// `l` Gaussian covariates, logistic response near 60% and an outcome with a
/// quadratic term of strength `curvature`.
pub fn instance(seed: u64, n: usize, l: usize, curvature: f64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, l, |_, _| normal(&mut rng));
    let phi: Vec<f64> = (0..l).map(|_| rng.random_range(-0.6..0.6)).collect();
    let beta: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut delta = Vec::with_capacity(n);
    let mut outcome = Vec::with_capacity(n);
    for i in 0..n {
        let eta = 0.4 + (0..l).map(|j| phi[j] * x[(i, j)]).sum::<f64>();
        let d = rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp());
        let y = 1.0 + (0..l).map(|j| beta[j] * x[(i, j)]).sum::<f64>() + curvature * x[(i, 0)] * x[(i, 0)] + normal(&mut rng);
        delta.push(d);
        outcome.push(d.then_some(y));
    }
    from_parts(x, delta, outcome)
}

/// Same covariates and response pattern as [`instance`] but `y = 1 + Σ x_j` exactly.
pub fn linear_instance(seed: u64, n: usize, l: usize) -> Instance {
    let base = instance(seed, n, l, 0.0);
    let x = base.data.covariates().clone();
    let outcome = (0..n)
        .map(|i| base.data.delta()[i].then(|| 1.0 + (0..l).map(|j| x[(i, j)]).sum::<f64>()))
        .collect();
    from_parts(x, base.data.delta().to_vec(), outcome)
}

pub fn from_parts(x: DMatrix<f64>, delta: Vec<bool>, outcome: Vec<Option<f64>>) -> Instance {
    let l = x.ncols();
    let data = Dataset::new(x, delta, outcome).unwrap();
    let basis = build_basis(&data, &BasisSpec::linear(l)).unwrap();
    let design = propensity::default_design(&data);
    Instance { data, basis, design }
}
