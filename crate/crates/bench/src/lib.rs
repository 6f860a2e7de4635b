// SPDX-License-Identifier: Apache-2.0

//! Shared inputs for the kernel benchmarks.

use spinres_core::spinsim::{self, PulseElement, WaveSample};
use spinres_core::{Device, NetworkSpec, TuningDataset};

pub fn device() -> Device {
    Device::builtin("4um").expect("builtin device")
}

pub fn network() -> NetworkSpec {
    device().network.expect("4um device has a network")
}

/// Frequencies spanning ±5 linewidths around the unbiased resonance.
pub fn s21_grid(points: usize) -> Vec<f64> {
    let t = device().tuning;
    let half = 5.0 * t.f0 / t.q_loaded;
    (0..points)
        .map(|k| t.f0 - half + 2.0 * half * k as f64 / (points - 1) as f64)
        .collect()
}

/// A 10 μs BIR4 inversion pulse sampled every 2 ns.
pub fn bir4_waveform() -> (Vec<WaveSample>, f64) {
    let dt = 2e-9;
    let p = PulseElement::bir4(10e-6, std::f64::consts::TAU * 0.885e6, std::f64::consts::PI, 2e6, 0.0);
    (spinsim::waveform(&p, dt).expect("step is small enough"), dt)
}

pub fn tuning_data(points: usize) -> TuningDataset {
    let t = device().tuning;
    TuningDataset::synthetic(&t, 0.999 * t.i_critical, points)
}
