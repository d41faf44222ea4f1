use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use augcal::montecarlo::{run_monte_carlo, MonteCarloConfig};
use augcal::{Estimator, Execution, OutcomeModel, ResponseModel, ScenarioSpec};

fn replications(c: &mut Criterion) {
    let spec = ScenarioSpec::new(OutcomeModel::Om1, ResponseModel::Pm1, 500, 7);
    let roster = Estimator::roster_all();
    let mut group = c.benchmark_group("monte_carlo_om1pm1_n500_32reps");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        let config = MonteCarloConfig { exec, ..MonteCarloConfig::default() };
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &config, |b, config| {
            b.iter(|| run_monte_carlo(&spec, &roster, 32, config).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, replications);
criterion_main!(benches);
