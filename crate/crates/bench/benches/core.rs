use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use flexsel_bench::random_scores;
use flexsel_core::pipeline::{run_training_free, PartitionSpec, PlantedScorer, SelectionConfig};
use flexsel_core::probe::{build_haystack, HaystackSpec, PlantedTask};
use flexsel_core::selector::{selector_forward, SelectorConfig};
use flexsel_core::softrank::{isotonic_regression, rank_loss, soft_rank, SoftRankConfig};
use flexsel_core::SelectorWeights;

fn soft_ranking(c: &mut Criterion) {
    let mut g = c.benchmark_group("soft_rank");
    for m in [128usize, 1024, 8192] {
        let v = random_scores(1, m);
        let cfg = SoftRankConfig::new(0.1).unwrap();
        g.bench_with_input(BenchmarkId::new("forward", m), &v, |b, v| {
            b.iter(|| soft_rank(black_box(v), cfg).unwrap())
        });
        let reference = random_scores(2, m);
        g.bench_with_input(BenchmarkId::new("rank_loss", m), &v, |b, v| {
            b.iter(|| rank_loss(&reference, black_box(v), 0.1).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("pav", m), &v, |b, v| {
            b.iter(|| isotonic_regression(black_box(v)))
        });
    }
    g.finish();
}

fn pipeline(c: &mut Criterion) {
    let task = PlantedTask {
        noise: 0.0,
        ..PlantedTask::default()
    };
    let mut g = c.benchmark_group("training_free");
    for frames in [64usize, 256] {
        let h = build_haystack(&HaystackSpec {
            frames,
            ..task.haystack_spec(0)
        })
        .unwrap();
        let scorer = PlantedScorer {
            spec: task.teacher(h.relevant.clone()).unwrap(),
            layer: task.peak_layer,
        };
        let spec = PartitionSpec::new(frames, 16).unwrap();
        let cfg = SelectionConfig {
            max_frames_per_set: 16,
            ..SelectionConfig::default()
        };
        g.bench_with_input(BenchmarkId::from_parameter(frames), &h, |b, h| {
            b.iter(|| run_training_free(&h.sequence, &spec, &cfg, &scorer).unwrap())
        });
    }
    g.finish();
}

fn selector(c: &mut Criterion) {
    let cfg = SelectorConfig::default();
    let w = SelectorWeights::init(&cfg).unwrap();
    let h = build_haystack(&HaystackSpec::default()).unwrap();
    c.bench_function("selector_forward/128", |b| {
        b.iter(|| selector_forward(&cfg, &w, black_box(&h.sequence)).unwrap())
    });
}

criterion_group!(benches, soft_ranking, pipeline, selector);
criterion_main!(benches);
