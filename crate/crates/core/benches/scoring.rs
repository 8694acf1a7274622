//! Gallery scoring: one shard against all shards, and the factored path
//! against the materialized dense transform.
//!
//! Build with `--no-default-features` to time the sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use quari::hypernet::LowRankTransform;
use quari::par::available_threads;
use quari::retrieval::{score_all, top_k, DenseScorer, GalleryIndex, LowRankScorer};
use quari::tensor::Tensor2;

const N: usize = 20_000;
const E: usize = 256;
const R: usize = 32;

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor2<f32> {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
    Tensor2::from_vec(rows, cols, data).unwrap()
}

fn fixture() -> (GalleryIndex<f32>, LowRankTransform<f32>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let index = GalleryIndex::with_row_ids(gaussian(N, E, &mut rng)).unwrap();
    let t = LowRankTransform::from_factor_rows(gaussian(R, E, &mut rng), gaussian(R, E, &mut rng)).unwrap();
    let q = (0..E).map(|_| rng.sample(StandardNormal)).collect();
    (index, t, q)
}

fn shards(c: &mut Criterion) {
    let (index, t, q) = fixture();
    let scorer = LowRankScorer::new(&t, &q).unwrap();
    let mut g = c.benchmark_group("top100_lowrank");
    g.throughput(Throughput::Elements(N as u64));
    let mut counts = vec![1, available_threads()];
    counts.dedup();
    for s in counts {
        g.bench_with_input(BenchmarkId::new("shards", s), &s, |b, &s| b.iter(|| top_k(&index, &scorer, 100, s)));
    }
    g.finish();
}

fn paths(c: &mut Criterion) {
    let (index, t, q) = fixture();
    let shards = available_threads();
    let lowrank = LowRankScorer::new(&t, &q).unwrap();
    let dense = DenseScorer::new(&t, &q).unwrap();
    let mut g = c.benchmark_group("score_all");
    g.throughput(Throughput::Elements(N as u64));
    g.sample_size(20);
    g.bench_function("lowrank", |b| b.iter(|| score_all(&index, &lowrank, shards)));
    g.bench_function("dense", |b| b.iter(|| score_all(&index, &dense, shards)));
    g.finish();
}

criterion_group!(benches, shards, paths);
criterion_main!(benches);
