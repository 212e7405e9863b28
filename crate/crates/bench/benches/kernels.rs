use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use sst_bench::{mask, scene, tensor};
use sst_core::model::blocks::{declare_spatial_ab, declare_spectral_ab, spatial_ab, spectral_ab};
use sst_core::model::{Declarations, SstConfig, SstModel};
use sst_core::train::{train_step, AdamState, LossConfig};
use sst_core::{forward_project, DispersionConfig, Graph, NoiseModel};

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    for (ch, hw, k) in [(16, 32, 3), (32, 16, 3), (8, 32, 7)] {
        let x = tensor(&[ch, hw, hw], 1);
        let w = tensor(&[ch, ch, k, k], 2);
        let id = format!("{ch}ch_{hw}px_k{k}");
        group.bench_function(BenchmarkId::new("forward", &id), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let wv = g.constant(w.clone());
                black_box(g.conv2d(xv, wv).unwrap());
            })
        });
        group.bench_function(BenchmarkId::new("forward_backward", &id), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let xv = g.param(x.clone());
                let wv = g.param(w.clone());
                let y = g.conv2d(xv, wv).unwrap();
                let s = g.sum(y);
                g.backward(s).unwrap();
                black_box(g.grad(wv));
            })
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    let (ch, hw) = (16, 32);
    let x = tensor(&[ch, hw, hw], 3);
    let mut d = Declarations::default();
    declare_spectral_ab(&mut d, "spec", ch, 1, 2);
    declare_spatial_ab(&mut d, "spat", ch, 1, 8, 2);
    let params = d.instantiate::<f32>(0).unwrap();
    group.bench_function("spectral_ab_16ch_32px", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let p = params.bind_frozen(&mut g);
            let xv = g.constant(x.clone());
            black_box(spectral_ab(&mut g, &p, "spec", xv).unwrap());
        })
    });
    group.bench_function("spatial_ab_16ch_32px_s8", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let p = params.bind_frozen(&mut g);
            let xv = g.constant(x.clone());
            black_box(spatial_ab(&mut g, &p, "spat", xv, 1, 8).unwrap());
        })
    });
    group.finish();
}

fn optics(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward_project");
    for (hw, ch, d) in [(32, 8, 1), (256, 28, 2)] {
        let x = scene(hw, hw, ch, 4);
        let m = mask(hw, hw, 5);
        let disp = DispersionConfig::new(d);
        group.bench_function(format!("{hw}x{hw}x{ch}_d{d}"), |b| {
            b.iter(|| black_box(forward_project(&x, &m, &disp, &NoiseModel::None).unwrap()))
        });
    }
    group.finish();
}

fn model(c: &mut Criterion) {
    let mut group = c.benchmark_group("toy_model");
    group.sample_size(10);
    let model = SstModel::new(SstConfig::toy(1)).unwrap();
    let x = scene(32, 32, 8, 6);
    let m = mask(32, 32, 7);
    let y = forward_project(&x, &m, &DispersionConfig::new(1), &NoiseModel::None).unwrap();
    let init = model.init_params::<f32>(0).unwrap();
    group.bench_function("reconstruct", |b| b.iter(|| black_box(model.reconstruct(&init, &y, &m).unwrap())));
    group.bench_function("train_step", |b| {
        let mut params = init.clone();
        let mut state = AdamState::new(&params);
        let batch = [x.clone()];
        b.iter(|| {
            train_step(&model, &mut params, &mut state, &batch, &m, &[NoiseModel::None], &LossConfig::default(), 1e-4)
                .unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, conv, attention, optics, model);
criterion_main!(benches);
