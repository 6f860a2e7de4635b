// SPDX-License-Identifier: Apache-2.0

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use spinres_bench as fx;
use spinres_core::biasdyn::{self, BiasSchedule};
use spinres_core::deer::{self, DeerConfig};
use spinres_core::fieldmap::{self, Region};
use spinres_core::{kinet, netmodel, spinsim, SpinPacket, SpinSystemConfig};

fn s21(c: &mut Criterion) {
    let net = fx::network();
    let grid = fx::s21_grid(1001);
    c.bench_function("s21_sweep_1001", |b| b.iter(|| netmodel::sweep(black_box(&net), &grid)));
}

fn propagate(c: &mut Criterion) {
    let (wf, dt) = fx::bir4_waveform();
    let cfg = SpinSystemConfig::default().without_relaxation();
    let bias = BiasSchedule::empty(0.0);
    let p = SpinPacket::new(std::f64::consts::TAU * 0.2e6, 0.9);
    c.bench_function("propagate_bir4_5000_steps", |b| {
        b.iter(|| spinsim::propagate(black_box(&p), &wf, &bias, 0.0, dt, &cfg).unwrap())
    });
}

fn deer_echo(c: &mut Criterion) {
    let cfg = DeerConfig {
        observers: 2000,
        ..DeerConfig::default()
    };
    c.bench_function("deer_echo_2000_observers", |b| {
        b.iter(|| deer::deer_echo(black_box(20e-6), &cfg).unwrap())
    });
}

fn tuning(c: &mut Criterion) {
    let dev = fx::device();
    let data = fx::tuning_data(501);
    c.bench_function("delta_f", |b| {
        b.iter(|| kinet::delta_f(black_box(3.9e-3), &dev.tuning).unwrap())
    });
    c.bench_function("fit_tuning_501", |b| {
        b.iter(|| kinet::fit_tuning_params(black_box(&data), dev.tuning.f0).unwrap())
    });
    let step = BiasSchedule::step(0.0, 3.9e-3, dev.lag).unwrap();
    c.bench_function("tuning_time", |b| {
        b.iter(|| biasdyn::tuning_time(black_box(&step), &dev.tuning, -31.2e6).unwrap())
    });
}

fn broadening(c: &mut Criterion) {
    let g = fx::device().geometry;
    c.bench_function("broadening_above_pin", |b| {
        b.iter(|| fieldmap::broadening_vs_misalignment(black_box(&g), 4e-3, 0.082, Region::AbovePin).unwrap())
    });
}

criterion_group!(kernels, s21, propagate, deer_echo, tuning, broadening);
criterion_main!(kernels);
