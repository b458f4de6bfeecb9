//! Sequential vs parallel backends on a training step and on metrics.

use cadiff::cadseq::synth::{random_sequence, random_sequence_with_len, SynthConfig};
use cadiff::denoiser::DenoiserConfig;
use cadiff::engine::{Cascade, TrainConfig, Trainer};
use cadiff::evalgeo::{metrics, MetricsConfig};
use cadiff::kernels::ScheduleConfig;
use cadiff::par::Exec;
use cadiff::rng::substream;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;

const BACKENDS: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn train_step(c: &mut Criterion) {
    let mut rng = substream(1, &[]);
    let corpus: Vec<_> = (0..16)
        .map(|_| {
            let n = rng.random_range(4..=8);
            random_sequence_with_len(&mut rng, n, 2, 2)
        })
        .collect();
    let net = DenoiserConfig {
        d_model: 32,
        n_blocks_cmd: 2,
        n_blocks_param: 2,
        n_heads: 4,
        max_cmd_len: 8,
        max_param_len: 40,
        ..DenoiserConfig::default()
    };
    let sched = ScheduleConfig::default().with_steps(100);
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for (name, exec) in BACKENDS {
        let cascade = Cascade::for_corpus(&sched, &net, &corpus, 0).unwrap();
        let mut cfg = TrainConfig::new(0);
        cfg.batch_size = 16;
        let mut tr = Trainer::new(cascade, &corpus, cfg).unwrap().with_exec(exec);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| tr.step().unwrap())
        });
    }
    group.finish();
}

fn eval_metrics(c: &mut Criterion) {
    let mut rng = substream(2, &[]);
    let synth = SynthConfig::default();
    let gen: Vec<_> = (0..24).map(|_| random_sequence(&mut rng, &synth)).collect();
    let reference: Vec<_> = (0..24).map(|_| random_sequence(&mut rng, &synth)).collect();
    let mut group = c.benchmark_group("metrics");
    group.sample_size(10);
    for (name, exec) in BACKENDS {
        let cfg = MetricsConfig {
            points_per_model: 256,
            exec,
            ..MetricsConfig::default()
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| metrics(&gen, &reference, &[], &cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, train_step, eval_metrics);
criterion_main!(benches);
