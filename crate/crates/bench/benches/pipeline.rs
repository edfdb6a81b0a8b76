//! End-to-end benchmarks for the main pipeline pieces: trace generation,
//! cost construction, node training, full bottom-up training, replay, and
//! frontier filtering.

use cascade_bench::workload;
use cascade_core::{
    evaluate_dataset, pareto_filter, train_bottom_up, OverheadSpec, Policy, SynthConfig,
    TraceEvaluator, TrainConfig,
};
use criterion::{criterion_group, criterion_main, Criterion};

fn bench_generate(c: &mut Criterion) {
    let mut cfg = SynthConfig::reference();
    cfg.n = 2000;
    c.bench_function("synth_generate_2k", |b| {
        b.iter(|| cascade_core::generate(&cfg).unwrap())
    });
}

fn bench_action_costs(c: &mut Criterion) {
    let (topo, data, loss) = workload(2000);
    let policy = Policy::terminal_only(&topo);
    let root = topo.root();
    c.bench_function("action_costs_root_2k", |b| {
        b.iter(|| cascade_core::action_costs(&topo, &data, &loss, &policy, root).unwrap())
    });
}

fn bench_train_node(c: &mut Criterion) {
    let (topo, data, loss) = workload(2000);
    let overheads = OverheadSpec::default_for(&topo);
    let config = TrainConfig::default();
    let policy = Policy::terminal_only(&topo);
    let root = topo.root();
    c.bench_function("train_node_root_2k", |b| {
        b.iter(|| {
            cascade_core::train_node(&topo, &data, &loss, &policy, root, 10.0, &overheads, &config)
                .unwrap()
        })
    });
}

fn bench_train_bottom_up(c: &mut Criterion) {
    let (topo, data, loss) = workload(2000);
    let overheads = OverheadSpec::default_for(&topo);
    let config = TrainConfig::default();
    c.bench_function("train_bottom_up_2k", |b| {
        b.iter(|| train_bottom_up(&topo, &data, &loss, 10.0, &overheads, &config).unwrap())
    });
}

fn bench_evaluate(c: &mut Criterion) {
    let (topo, data, loss) = workload(2000);
    let overheads = OverheadSpec::default_for(&topo);
    let policy =
        train_bottom_up(&topo, &data, &loss, 10.0, &overheads, &TrainConfig::default()).unwrap();
    let eval = TraceEvaluator::new(&topo, &data);
    c.bench_function("evaluate_2k", |b| {
        b.iter(|| evaluate_dataset(&policy, &topo, &eval, &loss).unwrap())
    });
}

fn bench_pareto(c: &mut Criterion) {
    // Dense frontier input: many points, few non-dominated.
    let points: Vec<(f64, f64)> = (0..10_000)
        .map(|i| {
            let t = (i % 97) as f64 * 0.01;
            let e = 1.0 / (1.0 + t) + ((i * 7919) % 101) as f64 * 1e-3;
            (t, e)
        })
        .collect();
    c.bench_function("pareto_filter_10k", |b| b.iter(|| pareto_filter(&points)));
}

criterion_group!(
    benches,
    bench_generate,
    bench_action_costs,
    bench_train_node,
    bench_train_bottom_up,
    bench_evaluate,
    bench_pareto
);
criterion_main!(benches);
