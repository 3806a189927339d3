use aggtree::{
    crossfit_nuisances, dr_scores, fit_regression_forest, gate_from_scores, grow_aggregation_tree,
    weakest_link_sequence, Covariates, Dataset, Feature, ForestParams, PropensityMethod, StopRules,
    VarianceKind,
};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn covariates(n: usize, p: usize, seed: u64) -> Covariates {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = (0..p).map(|j| Feature::numeric(format!("x{j}"))).collect();
    let columns = (0..p).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect();
    Covariates::new(features, columns).unwrap()
}

fn dataset(n: usize, seed: u64) -> Dataset {
    let x = covariates(n, 4, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let d: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    let y = (0..n)
        .map(|i| {
            let x0 = x.column(0)[i];
            let tau = if x0 > 0.5 { 2.0 } else { 0.5 };
            x0 + if d[i] { tau } else { 0.0 } + rng.random::<f64>() - 0.5
        })
        .collect();
    Dataset::new(y, d, x).unwrap()
}

fn smooth_tau(x: &Covariates) -> Vec<f64> {
    (0..x.n_rows()).map(|i| x.column(0)[i] * 3.0 + x.column(1)[i].sin()).collect()
}

fn bench_grow(c: &mut Criterion) {
    let mut group = c.benchmark_group("grow_aggregation_tree");
    for n in [1_000, 10_000] {
        let x = covariates(n, 5, 1);
        let tau = smooth_tau(&x);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| grow_aggregation_tree(&x, &tau, &StopRules::default()).unwrap())
        });
    }
    group.finish();
}

fn bench_prune(c: &mut Criterion) {
    let x = covariates(5_000, 5, 2);
    let tree = grow_aggregation_tree(&x, &smooth_tau(&x), &StopRules::default()).unwrap();
    c.bench_function("weakest_link_sequence 5000", |b| {
        b.iter(|| weakest_link_sequence(&tree).unwrap())
    });
}

fn bench_forest(c: &mut Criterion) {
    let x = covariates(2_000, 5, 3);
    let y = smooth_tau(&x);
    let params = ForestParams {
        n_trees: 100,
        ..ForestParams::default()
    };
    c.bench_function("forest 2000 x 100 trees", |b| {
        b.iter(|| fit_regression_forest(&x, &y, &params).unwrap())
    });
}

fn bench_gates(c: &mut Criterion) {
    let ds = dataset(2_000, 4);
    let params = ForestParams {
        n_trees: 50,
        ..ForestParams::default()
    };
    let ids: Vec<usize> = ds.x().column(0).iter().map(|&v| 1 + (v * 4.0) as usize).collect();
    c.bench_function("nuisances + gates 2000", |b| {
        b.iter(|| {
            let nuis = crossfit_nuisances(&ds, 5, &params, PropensityMethod::Logistic, 0.01, 7).unwrap();
            let scores = dr_scores(ds.y(), ds.d(), &nuis).unwrap();
            gate_from_scores(&scores, &ids, 0.95, VarianceKind::Hc0).unwrap()
        })
    });
}

criterion_group!(benches, bench_grow, bench_prune, bench_forest, bench_gates);
criterion_main!(benches);
