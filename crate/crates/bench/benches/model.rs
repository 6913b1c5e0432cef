use criterion::{criterion_group, criterion_main, Criterion};
use nowcast_core::autodiff::Tape;
use nowcast_core::rng::{stream, Stream};
use nowcast_core::{Model, ModelConfig, Tensor};
use rand::Rng;

fn random(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = stream(seed, Stream::Synthetic);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn model(c: &mut Criterion) {
    let mut group = c.benchmark_group("model");
    group.sample_size(20);
    for grid in [8usize, 16] {
        let cfg = ModelConfig::for_input(7, grid, grid, 15);
        let m = Model::init(cfg, 1).unwrap();
        let x = random(vec![7, grid, grid, 15], 2);
        group.bench_function(format!("forward_{grid}x{grid}"), |b| b.iter(|| m.forward(&x).unwrap()));
        group.bench_function(format!("forward_backward_{grid}x{grid}"), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let trace = m.forward_taped(&mut tape, &x, true, None).unwrap();
                tape.backward(trace.prediction).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, model);
criterion_main!(benches);
