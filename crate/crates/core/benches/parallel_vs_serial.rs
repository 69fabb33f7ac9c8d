//! Adaptive-test simulation and test-user evaluation on one thread versus the
//! default pool. The two paths produce identical results; only time differs.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cat_aif::cat::Selector;
use cat_aif::data::{build_biased_set, OracleSource, Role};
use cat_aif::influence::{HessianFactorization, InfluenceReport};
use cat_aif::par;
use cat_aif::pipeline::{self, PipelineConfig};

fn thread_counts() -> Vec<usize> {
    let wide = std::thread::available_parallelism().map_or(1, |n| n.get());
    if wide > 1 {
        vec![1, wide]
    } else {
        vec![1]
    }
}

fn bench(c: &mut Criterion) {
    let mut cfg = PipelineConfig::default();
    cfg.data.roles.biased = 200;
    cfg.data.roles.test = 200;
    cfg.data.n_users = cfg.data.roles.total();
    let prepared = pipeline::prepare(&cfg, 0).unwrap();
    let model = pipeline::fit_unbiased(&prepared.data, &cfg.fit, None).unwrap();
    let bank = model.item_bank();
    let set = build_biased_set(&prepared.data, &bank, Selector::Kli, cfg.cat.steps, OracleSource::Dense, 0).unwrap();
    let thetas = pipeline::final_thetas(&set.sessions);
    let train = prepared.data.slice(Role::UnbiasedTrain);
    let fact = HessianFactorization::from_model(&model, &train).unwrap();
    let biased = set.dataset.interactions().to_vec();

    let mut group = c.benchmark_group("parallel_vs_serial");
    group.sample_size(10);
    for threads in thread_counts() {
        group.bench_with_input(BenchmarkId::new("cat_simulation", threads), &threads, |b, &t| {
            b.iter(|| {
                par::with_threads(t, || {
                    build_biased_set(&prepared.data, &bank, Selector::Kli, cfg.cat.steps, OracleSource::Dense, 0).unwrap()
                })
            })
        });
        group.bench_with_input(BenchmarkId::new("evaluation", threads), &threads, |b, &t| {
            b.iter(|| par::with_threads(t, || pipeline::score_model(&model, &prepared.data, &prepared.reference, &cfg, 0).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("influence", threads), &threads, |b, &t| {
            b.iter(|| par::with_threads(t, || InfluenceReport::compute(&fact, &biased, &thetas, None).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
