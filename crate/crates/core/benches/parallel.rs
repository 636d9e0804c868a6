//! Sequential versus data-parallel throughput of feature extraction and
//! batched evaluation. The sequential arm pins rayon to one worker; building
//! with `--no-default-features` removes rayon altogether.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use biolip::dataset::Dataset;
use biolip::evaluation::window_logits;
use biolip::kinematics::FeatureConfig;
use biolip::network::{ModelConfig, ModelParams};
use biolip::synthetic::{gen_sequences, SynthConfig};
use biolip::trajectory::RegionMap;

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let n = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut out = vec![("sequential".to_string(), rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap())];
    out.push((format!("parallel-{n}"), rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap()));
    out
}

fn bench(c: &mut Criterion) {
    let seqs = gen_sequences(&SynthConfig::default(), 16, 16, 1).unwrap();
    let features = FeatureConfig::default();
    let map = RegionMap::default();
    let data = Dataset::from_sequences(seqs.clone(), &features, &map).unwrap();
    let params = ModelParams::init(&ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();

    let mut extract = c.benchmark_group("extract_32_videos");
    for (name, pool) in pools() {
        extract.bench_function(BenchmarkId::from_parameter(&name), |b| {
            b.iter(|| pool.install(|| Dataset::from_sequences(seqs.clone(), &features, &map).unwrap()))
        });
    }
    extract.finish();

    let mut eval = c.benchmark_group("eval_windows");
    eval.sample_size(10);
    for (name, pool) in pools() {
        eval.bench_function(BenchmarkId::new(name, data.windows.len()), |b| {
            b.iter(|| pool.install(|| window_logits(&params, &data.windows, 256).unwrap()))
        });
    }
    eval.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
