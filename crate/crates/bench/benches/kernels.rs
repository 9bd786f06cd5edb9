use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kdlsq::distill::{loss_total, LossMode};
use kdlsq::harness::SyntheticTask;
use kdlsq::lsq::fake_quantize_tensor;
use kdlsq::scale_init::{init_scale_factor, initialize_scales, InitMethod};
use kdlsq::transformer::{forward, teacher_trace, ForwardOptions};
use kdlsq::{BitConfig, Graph, ModelConfig, ModelState, QuantSpec, Tensor};

fn random_tensor(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![n], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn quantizer(c: &mut Criterion) {
    let x = random_tensor(1 << 16, 1);
    let spec = QuantSpec::signed(4).unwrap();
    c.bench_function("fake_quantize 64k", |b| {
        b.iter(|| fake_quantize_tensor(black_box(&x), 0.1, spec).unwrap())
    });
    c.bench_function("init_scale_factor 64k", |b| {
        b.iter(|| init_scale_factor(black_box(&x), 0.05).unwrap())
    });
}

fn training_step(c: &mut Criterion) {
    let cfg = ModelConfig::toy();
    let teacher = ModelState::init(cfg, 0, 0.1).unwrap();
    let task = SyntheticTask {
        train_size: 64,
        test_size: 16,
        ..SyntheticTask::default()
    };
    let (train, _) = task.generate().unwrap();
    let idx: Vec<usize> = (0..16).collect();
    let batch = train.batch(&idx).unwrap();
    let mut student = teacher.requantized(BitConfig::new(2, 2, 8)).unwrap();
    initialize_scales(&mut student, &batch, InitMethod::default()).unwrap();
    let t = teacher_trace(&teacher, &batch).unwrap();

    c.bench_function("toy forward 2-2-8 batch 16", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            forward(&mut g, black_box(&student), &batch, ForwardOptions::student()).unwrap();
        })
    });
    c.bench_function("toy forward+backward kd+gt batch 16", |b| {
        b.iter_batched(
            Graph::new,
            |mut g| {
                let tc = t.constants(&mut g);
                let (s, _) =
                    forward(&mut g, &student, &batch, ForwardOptions::student().trainable()).unwrap();
                let (_, total) = loss_total(&mut g, &s, Some(&tc), &batch.labels, LossMode::KdGt).unwrap();
                g.backward(total).unwrap();
                g
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, quantizer, training_step);
criterion_main!(benches);
