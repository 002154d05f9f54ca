use std::hint::black_box;

use bevsync::heads::run_heads;
use bevsync::instances::{decode_instances, InstanceVideo};
use bevsync::metrics::vpq;
use bevsync::params::Init;
use bevsync::pipeline::{encode_scene, predict_map};
use bevsync::posesync::{deform_attn, DeformAttnParams};
use bevsync::warp::{warp_bev, EgoDelta, WarpMode};
use bevsync::Tensor;
use bevsync_bench::{config, fixture};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn deformable(c: &mut Criterion) {
    let mut init = Init::new(1);
    let params = DeformAttnParams::init(&mut init, 16, 4, 4).unwrap();
    let features = init.uniform(&[64, 64, 16], 1);
    let q: Vec<f64> = init.uniform(&[16], 1).data().to_vec();
    c.bench_function("deform_attn/16ch_4h_4pts", |b| {
        b.iter(|| deform_attn(black_box(&q), (31.3, 17.8), &features, &params).unwrap())
    });
}

fn stages(c: &mut Criterion) {
    let mut g = c.benchmark_group("stages");
    g.sample_size(10);
    for n in [32, 64] {
        let f = fixture(config(n, 2));
        g.bench_with_input(BenchmarkId::new("encode", n), &f, |b, f| {
            b.iter(|| encode_scene(&f.cfg, &f.model, &f.scenario).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("predict", n), &f, |b, f| {
            b.iter(|| predict_map(&f.model, &f.map, false).unwrap())
        });
        let d0 = predict_map(&f.model, &f.map, false).unwrap().d0;
        g.bench_with_input(BenchmarkId::new("heads", n), &d0, |b, d0| b.iter(|| run_heads(d0, &f.model.heads).unwrap()));
        g.bench_with_input(BenchmarkId::new("decode", n), &f, |b, f| {
            b.iter(|| decode_instances(&f.gt_bundle, &f.cfg.decode).unwrap())
        });
    }
    g.finish();
}

fn pyramid_depth(c: &mut Criterion) {
    let mut g = c.benchmark_group("pyramid_depth");
    g.sample_size(10);
    for depth in 1..=4 {
        let f = fixture(config(32, depth));
        g.bench_with_input(BenchmarkId::from_parameter(depth), &f, |b, f| {
            b.iter(|| predict_map(&f.model, &f.map, false).unwrap())
        });
    }
    g.finish();
}

fn metrics_and_warp(c: &mut Criterion) {
    let f = fixture(config(32, 1));
    let video = InstanceVideo::from_ground_truth(&f.gt).unwrap();
    c.bench_function("vpq/32x32x5", |b| b.iter(|| vpq(black_box(&video), &video, video.len() - 1).unwrap()));
    let past: Tensor = f.map.frame(1);
    let delta = EgoDelta::new(0.5, 2.0, -1.0).unwrap();
    c.bench_function("warp_bev/bilinear", |b| {
        b.iter(|| warp_bev(black_box(&past), &f.cfg.grid, &delta, WarpMode::Bilinear).unwrap())
    });
}

criterion_group!(benches, deformable, stages, pyramid_depth, metrics_and_warp);
criterion_main!(benches);
