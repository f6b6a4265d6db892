use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use refgen_core::dataset::{gen_asset, generate_dataset, DatasetConfig};
use refgen_core::geometry::{rasterize, Pose, RenderConfig};
use refgen_core::model::{Model, ModelConfig, ModelInput};
use refgen_core::training::{PreparedSample, TrainConfig, Trainer};
use refgen_core::{Tape, Tensor};

fn matmul(c: &mut Criterion) {
    for n in [64usize, 256] {
        let a = Tensor::from_fn([n, n], |i| ((i % 13) as f32 - 6.0) * 0.1);
        let b = Tensor::from_fn([n, n], |i| ((i % 7) as f32 - 3.0) * 0.1);
        c.bench_function(&format!("matmul_fwd_bwd_{n}"), |bench| {
            bench.iter(|| {
                let mut tape = Tape::<f32>::new();
                let x = tape.param(a.clone()).unwrap();
                let y = tape.param(b.clone()).unwrap();
                let z = tape.matmul(x, y).unwrap();
                let s = tape.sum_all(z).unwrap();
                black_box(tape.backward(s).unwrap());
            })
        });
    }
}

fn raster(c: &mut Criterion) {
    let mesh = gen_asset(3).unwrap().mesh;
    let cams = RenderConfig::default().cameras(4).unwrap();
    c.bench_function("rasterize_32px", |b| b.iter(|| black_box(rasterize(&mesh, &cams[0], &Pose::identity()))));
}

fn model(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let data = generate_dataset(&DatasetConfig {
        count: 1,
        ..DatasetConfig::default()
    })
    .unwrap();
    let sample = PreparedSample::new(&data[0], cfg.patch).unwrap();
    let model = Model::new(cfg.clone(), 0).unwrap();
    let mut g = c.benchmark_group("model");
    g.sample_size(10);
    g.bench_function("forward_default", |b| {
        b.iter(|| {
            let mut tape = Tape::<f32>::new();
            let bound = model.params.bind_frozen(&mut tape).unwrap();
            let input = ModelInput {
                target_rgb: &sample.target_rgb,
                target_pm: Some(&sample.target_pm),
                views: Some(&sample.views),
                caption: Some(sample.caption),
                t: 0.5,
            };
            black_box(model.forward(&mut tape, &bound, &input).unwrap());
        })
    });
    let mut trainer = Trainer::new(
        model.clone(),
        TrainConfig {
            batch: 1,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let batch = [sample];
    g.bench_function("train_step_batch1", |b| b.iter(|| black_box(trainer.train_step(&batch).unwrap())));
    g.finish();
}

criterion_group!(benches, matmul, raster, model);
criterion_main!(benches);
