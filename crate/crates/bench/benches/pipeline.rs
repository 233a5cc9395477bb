use criterion::{black_box, criterion_group, criterion_main, Criterion};

use oponerf_bench::fixture;
use oponerf_core::metrics::{psnr, ssim};
use oponerf_core::model::{render_view, FrozenScene};
use oponerf_core::scene::render_gt_view;
use oponerf_core::train::Trainer;

fn training_step(c: &mut Criterion) {
    let f = fixture();
    let mut trainer = Trainer::new(f.model.clone());
    c.bench_function("train_step_default", |b| b.iter(|| trainer.step(black_box(&f.data)).unwrap()));
}

fn rendering(c: &mut Criterion) {
    let f = fixture();
    let cam = f.rig.camera(f.rig.validation_views[0]).unwrap();
    c.bench_function("frozen_scene", |b| b.iter(|| FrozenScene::new(&f.model, black_box(&f.data.support)).unwrap()));
    let frozen = FrozenScene::new(&f.model, &f.data.support).unwrap();
    c.bench_function("render_view_48", |b| {
        b.iter(|| render_view(&f.model, &frozen, &f.data.support, black_box(cam), f.rig.near, f.rig.far, f.scene.background).unwrap())
    });
    c.bench_function("ground_truth_view_48", |b| b.iter(|| render_gt_view(&f.scene, black_box(cam))));
}

fn metrics(c: &mut Criterion) {
    let f = fixture();
    let a = &f.data.images[0];
    let b2 = &f.data.images[1];
    c.bench_function("psnr_48", |b| b.iter(|| psnr(black_box(a), black_box(b2)).unwrap()));
    c.bench_function("ssim_48", |b| b.iter(|| ssim(black_box(a), black_box(b2)).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = training_step, rendering, metrics
}
criterion_main!(benches);
