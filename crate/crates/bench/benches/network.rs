use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use stegnet::metrics::{images_to_tensor, ImageTensor};
use stegnet::model::{train_step, Checkpoint, IMAGE_SIZE, WIDTH};
use stegnet::pipeline::synthetic_corpus;
use stegnet::tensor::{AdamConfig, Tape, Tensor};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn batch(seed: u64, n: usize) -> Tensor<f32> {
    let imgs: Vec<ImageTensor> = synthetic_corpus(n, seed, IMAGE_SIZE).iter().map(ImageTensor::from_bytes).collect();
    images_to_tensor(&imgs).unwrap()
}

fn ramp(shape: &[usize]) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|i| ((i * 37 % 101) as f32 - 50.0) / 200.0).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv forward+backward, batch 8, 64x64");
    for (name, kernel) in [
        ("lift 6->32 3x3", [WIDTH, 6, 3, 3]),
        ("pointwise 32->32 1x1", [WIDTH, WIDTH, 1, 1]),
        ("reduce 32->3 3x3", [3, WIDTH, 3, 3]),
    ] {
        let x = ramp(&[8, kernel[1], IMAGE_SIZE, IMAGE_SIZE]);
        let k = ramp(&kernel);
        let b = Tensor::zeros(&[kernel[0]]);
        g.bench_function(name, |bench| {
            bench.iter(|| {
                let mut t = Tape::new();
                let (xv, kv, bv) = (t.leaf(x.clone(), true), t.param(k.clone()), t.param(b.clone()));
                let y = t.conv2d(xv, kv, bv, 1, kernel[2] / 2).unwrap();
                let m = t.mean(y).unwrap();
                t.backward(m).unwrap();
                black_box(t.grad(kv))
            })
        });
    }
    g.finish();
}

fn training(c: &mut Criterion) {
    let (cover, hidden) = (batch(1, 8), batch(100, 8));
    let start = Checkpoint::init(0, AdamConfig::default());
    let mut g = c.benchmark_group("model");
    g.sample_size(10);
    g.bench_function("train step, batch 8", |b| {
        b.iter_batched(
            || start.clone(),
            |mut ck| train_step(&mut ck, &cover, &hidden).unwrap(),
            BatchSize::LargeInput,
        )
    });
    g.bench_function("encode+decode, batch 8", |b| {
        b.iter(|| {
            let e = start.model.encode(&cover, &hidden).unwrap();
            black_box(start.model.decode(&e).unwrap())
        })
    });
    g.finish();
}

criterion_group!(benches, conv, training);
criterion_main!(benches);
