use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use lcfed::clustering::{similarity_matrix, SimilarityKind};
use lcfed::data::make_synthetic_clusters;
use lcfed::model::ModelArch;
use lcfed::server::{Simulation, StrategyConfig};
use lcfed::strategy::StrategyKind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn simulation() -> Simulation {
    let arch = Arc::new(ModelArch::with_head_split(vec![10, 64, 4]).unwrap());
    let shards = make_synthetic_clusters(4, 40, 10, 4, 200, 1).unwrap();
    let cfg = StrategyConfig {
        clusters: 4,
        low_rank_dim: 8,
        seed: 1,
        ..StrategyConfig::new(StrategyKind::LcFed)
    };
    let mut sim = Simulation::new(cfg, arch, shards).unwrap();
    // Past the seeding round so the benchmark sees a steady-state round.
    sim.run_round().unwrap();
    sim
}

fn similarity_inputs() -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut draw = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..20_000).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    };
    (draw(200), draw(10))
}

/// Runs `f` on `pool` when given, otherwise on the caller's pool.
#[cfg(feature = "parallel")]
fn on<T: Send>(pool: Option<&rayon::ThreadPool>, f: impl FnOnce() -> T + Send) -> T {
    match pool {
        Some(p) => p.install(f),
        None => f(),
    }
}

#[cfg(not(feature = "parallel"))]
fn on<T>(_pool: Option<&()>, f: impl FnOnce() -> T) -> T {
    f()
}

#[cfg(feature = "parallel")]
type Pool = rayon::ThreadPool;
#[cfg(not(feature = "parallel"))]
type Pool = ();

fn bench_group(c: &mut Criterion, name: &str, pool: Option<&Pool>) {
    let mut group = c.benchmark_group(name);
    group.sample_size(20);
    let template = simulation();
    let (devices, centers) = similarity_inputs();
    let d: Vec<&[f64]> = devices.iter().map(Vec::as_slice).collect();
    let k: Vec<&[f64]> = centers.iter().map(Vec::as_slice).collect();
    group.bench_function("run_round", |b| {
        b.iter_batched(
            || template.clone(),
            |mut s| on(pool, move || s.run_round().unwrap()),
            BatchSize::LargeInput,
        )
    });
    group.bench_function("full_cosine_200x10", |b| {
        b.iter(|| on(pool, || similarity_matrix(SimilarityKind::FullCosine, &d, &k)))
    });
    group.finish();
}

#[cfg(feature = "parallel")]
fn benches(c: &mut Criterion) {
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    bench_group(c, "one_thread", Some(&single));
    bench_group(c, "default_pool", None);
}

#[cfg(not(feature = "parallel"))]
fn benches(c: &mut Criterion) {
    bench_group(c, "sequential", None);
}

criterion_group!(rounds, benches);
criterion_main!(rounds);
