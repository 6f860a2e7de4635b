// SPDX-License-Identifier: Apache-2.0

//! Rotating-frame Bloch propagation of spin packets.
//!
//! Convention: `dm/dt = m × Ω` with `Ω = (ω₁ cos φ, ω₁ sin φ, Δ)`, so free
//! precession turns `m₊ = m_x + i m_y` as `e^{−iΔt}`. A pulse with frequency
//! offset `ω_c` is resonant with packets whose `Δ = ω_c`.
//!
//! Each step applies the exact rotation for the mid-step field and then
//! relaxation. Free-evolution delays are propagated in closed form.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::biasdyn::BiasSchedule;
use crate::device::Device;
use crate::error::{Error, Result, Warning};
use crate::fieldmap::{self, Region, REFERENCE_B0};
use crate::fit::{levenberg_marquardt, LmOptions};
use crate::kinet::{delta_f, DeviceTuningParams};
use crate::numeric::{pairwise_sum_complex, parabolic_vertex};
use crate::result::ExperimentResult;

use std::f64::consts::{PI, TAU};

pub type Vec3 = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Species {
    #[serde(rename = "p31")]
    P31,
    #[serde(rename = "as75")]
    As75,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpinPacket {
    pub m: Vec3,
    /// Static offset from the sequence reference frequency, rad/s.
    pub detuning0: f64,
    pub b1_scale: f64,
    /// Detuning per ampere of bias current, rad/s/A.
    pub bias_shift: f64,
    pub weight: f64,
    pub species: Species,
}

impl SpinPacket {
    pub fn new(detuning0: f64, b1_scale: f64) -> Self {
        Self {
            m: [0.0, 0.0, 1.0],
            detuning0,
            b1_scale,
            bias_shift: 0.0,
            weight: 1.0,
            species: Species::P31,
        }
    }

    pub fn norm(&self) -> f64 {
        self.m.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn transverse(&self) -> Complex64 {
        Complex64::new(self.m[0], self.m[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PulseKind {
    Rect,
    Bir4Wurst20,
    Delay,
    Acquire,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseElement {
    pub kind: PulseKind,
    pub duration: f64,
    /// Nominal Rabi frequency γB₁ in rad/s.
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default)]
    pub phase: f64,
    #[serde(default)]
    pub flip_angle: f64,
    /// Hz.
    #[serde(default)]
    pub chirp_halfwidth: f64,
    /// Hz, relative to the sequence reference.
    #[serde(default)]
    pub carrier_offset: f64,
}

impl PulseElement {
    fn base(kind: PulseKind, duration: f64) -> Self {
        Self {
            kind,
            duration,
            amplitude: 0.0,
            phase: 0.0,
            flip_angle: 0.0,
            chirp_halfwidth: 0.0,
            carrier_offset: 0.0,
        }
    }

    pub fn rect(duration: f64, amplitude: f64, phase: f64) -> Self {
        Self {
            amplitude,
            phase,
            ..Self::base(PulseKind::Rect, duration)
        }
    }

    pub fn bir4(duration: f64, amplitude: f64, flip_angle: f64, chirp_halfwidth: f64, phase: f64) -> Self {
        Self {
            amplitude,
            phase,
            flip_angle,
            chirp_halfwidth,
            ..Self::base(PulseKind::Bir4Wurst20, duration)
        }
    }

    pub fn delay(duration: f64) -> Self {
        Self::base(PulseKind::Delay, duration)
    }

    pub fn acquire(window: f64) -> Self {
        Self::base(PulseKind::Acquire, window)
    }

    pub fn with_carrier(mut self, offset_hz: f64) -> Self {
        self.carrier_offset = offset_hz;
        self
    }

    pub fn is_pulse(&self) -> bool {
        matches!(self.kind, PulseKind::Rect | PulseKind::Bir4Wurst20)
    }

    pub fn validate(&self) -> Result<()> {
        let ok_duration = match self.kind {
            PulseKind::Acquire => self.duration >= 0.0,
            _ => self.duration > 0.0,
        };
        if !ok_duration || !self.duration.is_finite() {
            return Err(Error::InvalidInput(format!(
                "{:?} duration {} is invalid",
                self.kind, self.duration
            )));
        }
        if self.kind == PulseKind::Bir4Wurst20 && !(self.chirp_halfwidth > 0.0) {
            return Err(Error::InvalidInput("adiabatic pulse needs chirp_halfwidth > 0".into()));
        }
        if !(self.amplitude.is_finite() && self.phase.is_finite() && self.carrier_offset.is_finite()) {
            return Err(Error::InvalidInput("pulse parameters must be finite".into()));
        }
        Ok(())
    }
}

/// One waveform step: Rabi frequency (rad/s), phase (rad) and frequency
/// offset from the reference (rad/s), all at the step midpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaveSample {
    pub omega1: f64,
    pub phase: f64,
    pub freq_offset: f64,
}

/// WURST-20 envelope over a full BIR-4 of length `total`: zero at the
/// quarter points, maximal at the start, middle and end.
pub fn bir4_envelope(t: f64, total: f64) -> f64 {
    1.0 - (TAU * t / total).sin().abs().powi(20)
}

/// Samples a pulse on a grid of `round(duration/dt)` midpoints.
pub fn waveform(p: &PulseElement, dt: f64) -> Result<Vec<WaveSample>> {
    p.validate()?;
    if !(dt > 0.0) || dt > p.duration / 50.0 {
        return Err(Error::InvalidInput(format!(
            "step {dt:e} s is coarser than duration/50 for a {:e} s element",
            p.duration
        )));
    }
    let n = (p.duration / dt).round().max(1.0) as usize;
    let h = p.duration / n as f64;
    let carrier = TAU * p.carrier_offset;
    let samples = (0..n).map(|k| {
        let t = (k as f64 + 0.5) * h;
        match p.kind {
            PulseKind::Rect => WaveSample {
                omega1: p.amplitude,
                phase: p.phase,
                freq_offset: carrier,
            },
            PulseKind::Bir4Wurst20 => {
                let q = p.duration / 4.0;
                let seg = ((t / q) as usize).min(3);
                let s = t - seg as f64 * q;
                // the middle passage sweeps −Δ→+Δ across the two central
                // quarters, the outer passage wraps around the ends
                let sweep = if seg % 2 == 0 { s / q } else { s / q - 1.0 };
                let jump = if seg == 1 || seg == 2 {
                    PI + 0.5 * p.flip_angle
                } else {
                    0.0
                };
                WaveSample {
                    omega1: p.amplitude * bir4_envelope(t, p.duration),
                    phase: p.phase + jump,
                    freq_offset: carrier + TAU * p.chirp_halfwidth * sweep,
                }
            }
            PulseKind::Delay | PulseKind::Acquire => WaveSample {
                omega1: 0.0,
                phase: 0.0,
                freq_offset: 0.0,
            },
        }
    });
    Ok(samples.collect())
}

/// Exact solution of `dm/dt = m × w` over `dt`: a rotation by `−|w|dt`
/// about `ŵ`.
pub fn rotate(m: Vec3, w: Vec3, dt: f64) -> Vec3 {
    let n = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    if n == 0.0 {
        return m;
    }
    let k = [w[0] / n, w[1] / n, w[2] / n];
    let (s, c) = (-n * dt).sin_cos();
    let kxm = [
        k[1] * m[2] - k[2] * m[1],
        k[2] * m[0] - k[0] * m[2],
        k[0] * m[1] - k[1] * m[0],
    ];
    let kdm = k[0] * m[0] + k[1] * m[1] + k[2] * m[2];
    [
        m[0] * c + kxm[0] * s + k[0] * kdm * (1.0 - c),
        m[1] * c + kxm[1] * s + k[1] * kdm * (1.0 - c),
        m[2] * c + kxm[2] * s + k[2] * kdm * (1.0 - c),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeciesParams {
    /// Field-to-frequency slope, Hz/T.
    pub gamma_eff: f64,
    pub line_center_field: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpinSystemConfig {
    pub p31: SpeciesParams,
    pub as75: SpeciesParams,
    pub line_fwhm: f64,
    /// `None` disables transverse relaxation.
    pub t2: Option<f64>,
    #[serde(default)]
    pub t1: Option<f64>,
    /// Exponent `n` of `exp(−(t/T₂)ⁿ)`.
    #[serde(default = "one")]
    pub t2_stretch: f64,
}

/// 33 MHz of resonator shift moved the line by 1.06 mT.
pub const GAMMA_EFF_P31: f64 = 33e6 / 1.06e-3;

impl Default for SpinSystemConfig {
    fn default() -> Self {
        let p31 = SpeciesParams {
            gamma_eff: GAMMA_EFF_P31,
            line_center_field: 0.274_78,
        };
        Self {
            p31,
            as75: SpeciesParams {
                gamma_eff: GAMMA_EFF_P31,
                // 33 MHz below the observer line at the same field
                line_center_field: 0.274_78 + 33e6 / GAMMA_EFF_P31,
            },
            line_fwhm: 0.02e-3,
            t2: Some(448e-6),
            t1: None,
            t2_stretch: 1.0,
        }
    }
}

impl SpinSystemConfig {
    pub fn species(&self, s: Species) -> &SpeciesParams {
        match s {
            Species::P31 => &self.p31,
            Species::As75 => &self.as75,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !(pos(self.line_fwhm) && pos(self.p31.gamma_eff) && pos(self.as75.gamma_eff)) {
            return Err(Error::InvalidInput("line width and slopes must be positive".into()));
        }
        if self.t2.is_some_and(|t| !pos(t)) || self.t1.is_some_and(|t| !pos(t)) || !pos(self.t2_stretch) {
            return Err(Error::InvalidInput("relaxation times must be positive".into()));
        }
        Ok(())
    }

    pub fn without_relaxation(&self) -> Self {
        Self {
            t2: None,
            t1: None,
            ..*self
        }
    }

    fn relax(&self, m: &mut Vec3, t_from: f64, t_to: f64) {
        if let Some(t2) = self.t2 {
            let n = self.t2_stretch;
            let f = ((t_from / t2).powf(n) - (t_to / t2).powf(n)).exp();
            m[0] *= f;
            m[1] *= f;
        }
        if let Some(t1) = self.t1 {
            let e = (-(t_to - t_from) / t1).exp();
            m[2] = 1.0 - (1.0 - m[2]) * e;
        }
    }
}

/// Largest allowed rotation per step.
pub const MAX_STEP_ANGLE: f64 = 0.1;

/// Steps a packet through waveform samples starting at time `t_start`.
///
/// Off-carrier samples are rotated in the frame of their own carrier and
/// then returned to the reference frame, so the step limit only involves
/// the detuning from that carrier. The carrier phase restarts at every call.
pub fn propagate(
    packet: &SpinPacket,
    wf: &[WaveSample],
    bias: &BiasSchedule,
    t_start: f64,
    dt: f64,
    cfg: &SpinSystemConfig,
) -> Result<SpinPacket> {
    let mut p = *packet;
    let mut carrier_phase = 0.0;
    let has_bias = p.bias_shift != 0.0 && !bias.elements.is_empty();
    for (k, s) in wf.iter().enumerate() {
        let t0 = t_start + k as f64 * dt;
        let i = if has_bias { bias.current_at(t0 + 0.5 * dt) } else { 0.0 };
        let delta = p.detuning0 + p.bias_shift * i;
        let w1 = s.omega1 * p.b1_scale;
        let psi = s.phase - carrier_phase;
        let axis = [w1 * psi.cos(), w1 * psi.sin(), delta - s.freq_offset];
        let angle = (axis[0].powi(2) + axis[1].powi(2) + axis[2].powi(2)).sqrt() * dt;
        if angle > MAX_STEP_ANGLE {
            return Err(Error::StepTooLarge(angle));
        }
        p.m = rotate(p.m, axis, dt);
        if s.freq_offset != 0.0 {
            p.m = rotate(p.m, [0.0, 0.0, s.freq_offset], dt);
            carrier_phase += s.freq_offset * dt;
        }
        cfg.relax(&mut p.m, t0, t0 + dt);
    }
    Ok(p)
}

/// Closed-form free precession from `t0` for `duration`.
pub fn free_evolve(
    packet: &SpinPacket,
    t0: f64,
    duration: f64,
    bias: &BiasSchedule,
    cfg: &SpinSystemConfig,
) -> SpinPacket {
    let mut p = *packet;
    let mut angle = p.detuning0 * duration;
    if p.bias_shift != 0.0 && !bias.elements.is_empty() {
        angle += p.bias_shift * bias.charge_between(t0, t0 + duration);
    }
    p.m = rotate(p.m, [0.0, 0.0, angle], 1.0);
    cfg.relax(&mut p.m, t0, t0 + duration);
    p
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub packets: Vec<SpinPacket>,
}

/// Gauss–Hermite nodes and weights for `∫ e^{−x²} f(x) dx`.
pub fn gauss_hermite(n: usize) -> Vec<(f64, f64)> {
    use nalgebra::DMatrix;
    let jac = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64 / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let eig = jac.symmetric_eigen();
    let mut out: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], PI.sqrt() * eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// Gaussian line of the given FWHM as `(offset, weight)` pairs, weights
/// summing to one.
pub fn gaussian_nodes(fwhm: f64, n: usize) -> Vec<(f64, f64)> {
    let sigma = fwhm / (8.0 * 2f64.ln()).sqrt();
    gauss_hermite(n)
        .into_iter()
        .map(|(x, w)| (2f64.sqrt() * sigma * x, w / PI.sqrt()))
        .collect()
}

impl Ensemble {
    pub fn single(packet: SpinPacket) -> Self {
        Self {
            packets: vec![SpinPacket { weight: 1.0, ..packet }],
        }
    }

    /// Deterministic Gaussian detuning line (rad/s) on Gauss–Hermite nodes.
    pub fn gaussian_line(center: f64, fwhm: f64, n: usize) -> Self {
        let packets = gaussian_nodes(fwhm, n)
            .into_iter()
            .map(|(d, w)| SpinPacket {
                weight: w,
                ..SpinPacket::new(center + d, 1.0)
            })
            .collect();
        Self { packets }
    }

    /// Monte-Carlo Gaussian line drawn from the `(seed, "spinsim.line")` stream.
    pub fn monte_carlo_line(center: f64, fwhm: f64, n: usize, seed: u64) -> Self {
        use rand_distr::{Distribution, Normal};
        let sigma = fwhm / (8.0 * 2f64.ln()).sqrt();
        let normal = Normal::new(center, sigma).expect("finite width");
        let packets = (0..n)
            .map(|k| {
                let mut rng = crate::rng::stream(seed, "spinsim.line", k as u64);
                SpinPacket {
                    weight: 1.0 / n as f64,
                    ..SpinPacket::new(normal.sample(&mut rng), 1.0)
                }
            })
            .collect();
        Self { packets }
    }

    pub fn total_weight(&self) -> f64 {
        self.packets.iter().map(|p| p.weight).sum()
    }

    pub fn normalized(mut self) -> Self {
        let w = self.total_weight();
        if w > 0.0 {
            for p in &mut self.packets {
                p.weight /= w;
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.packets.is_empty() {
            return Err(Error::InvalidInput("ensemble is empty".into()));
        }
        for p in &self.packets {
            if p.norm() > 1.0 + 1e-9 || !(p.weight >= 0.0) || !p.b1_scale.is_finite() {
                return Err(Error::InvalidInput("packet violates |m| ≤ 1 or weight ≥ 0".into()));
            }
        }
        Ok(())
    }
}

/// Maps pulse amplitude to drive power through one reference point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriveCalibration {
    pub reference_rabi: f64,
    pub reference_dbm: f64,
}

impl Default for DriveCalibration {
    /// A 200 ns rectangular π/2 at −29 dBm.
    fn default() -> Self {
        Self {
            reference_rabi: PI / (2.0 * 200e-9),
            reference_dbm: -29.0,
        }
    }
}

impl DriveCalibration {
    pub fn rabi_at(&self, dbm: f64) -> f64 {
        self.reference_rabi * 10f64.powf((dbm - self.reference_dbm) / 20.0)
    }

    pub fn power_for(&self, rabi: f64) -> f64 {
        self.reference_dbm + 20.0 * (rabi / self.reference_rabi).log10()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub dt: f64,
    pub acquire_samples: usize,
    /// When set, pulse powers are checked against the device caps.
    pub drive_check: Option<(DriveCalibration, DeviceTuningParams)>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            dt: 1e-9,
            acquire_samples: 41,
            drive_check: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceOutput {
    /// `(time, Σ w m₊)` at the acquisition samples.
    pub trace: Vec<(f64, Complex64)>,
    /// Window average of the trace.
    pub echo: Complex64,
    pub warnings: Vec<Warning>,
}

impl SequenceOutput {
    pub fn amplitude(&self) -> f64 {
        self.echo.norm()
    }

    pub fn phase(&self) -> f64 {
        self.echo.arg()
    }
}

/// Free precession a pulse contributes on each side of its effective
/// rotation. Rectangular pulses act at their centre; BIR-4 pulses are
/// offset compensated and carry none.
pub fn precession_share(p: &PulseElement) -> f64 {
    match p.kind {
        PulseKind::Rect => 0.5 * p.duration,
        _ => 0.0,
    }
}

/// `π/2 – τ – π – τ – echo` with `τ` measured between pulse centres and the
/// acquisition window centred on the refocusing point. That point is `2τ`
/// for rectangular pulses and earlier by half the π/2 length for adiabatic
/// ones.
pub fn hahn_sequence(tau: f64, pi2: PulseElement, pi: PulseElement, window: f64) -> Result<Vec<PulseElement>> {
    let d1 = tau - 0.5 * pi2.duration - 0.5 * pi.duration;
    let dephase = precession_share(&pi2) + d1 + precession_share(&pi);
    let d2 = dephase - precession_share(&pi) - 0.5 * window;
    if !(d1 > 0.0 && d2 > 0.0) {
        return Err(Error::TimingViolation(format!(
            "τ = {tau:e} s is too short for the pulses and acquisition window"
        )));
    }
    Ok(vec![
        pi2,
        PulseElement::delay(d1),
        pi,
        PulseElement::delay(d2),
        PulseElement::acquire(window),
    ])
}

/// Runs `seq` four times with the refocusing pulse phase stepped by π/2 and
/// combines the outputs so only the echo pathway survives. Finite line
/// sampling otherwise leaves unrefocused terms that oscillate with τ.
pub fn run_phase_cycled(
    ensemble: &Ensemble,
    seq: &[PulseElement],
    bias: &BiasSchedule,
    cfg: &SpinSystemConfig,
    opts: &RunOptions,
) -> Result<SequenceOutput> {
    let k_pi = seq
        .iter()
        .enumerate()
        .filter(|(_, p)| p.is_pulse())
        .nth(1)
        .map(|(k, _)| k)
        .ok_or_else(|| Error::InvalidInput("phase cycling needs a refocusing pulse".into()))?;
    let mut total: Option<SequenceOutput> = None;
    for step in 0..4 {
        let shift = 0.5 * PI * step as f64;
        let mut cycled = seq.to_vec();
        cycled[k_pi].phase += shift;
        let out = run_sequence(ensemble, &cycled, bias, cfg, opts)?;
        // the echo phase follows twice the refocusing phase
        let receiver = Complex64::from_polar(0.25, -2.0 * shift);
        total = Some(match total {
            None => SequenceOutput {
                trace: out.trace.iter().map(|(t, v)| (*t, v * receiver)).collect(),
                echo: out.echo * receiver,
                warnings: out.warnings,
            },
            Some(mut acc) => {
                for (a, (_, v)) in acc.trace.iter_mut().zip(&out.trace) {
                    a.1 += v * receiver;
                }
                acc.echo += out.echo * receiver;
                acc
            }
        });
    }
    Ok(total.expect("four steps ran"))
}

/// Start time of the π/2 centre relative to the sequence start.
pub fn sequence_origin(seq: &[PulseElement]) -> f64 {
    seq.first().filter(|p| p.is_pulse()).map_or(0.0, |p| 0.5 * p.duration)
}

/// Runs `seq` on every packet and integrates the weighted transverse
/// magnetisation over the single acquisition window.
pub fn run_sequence(
    ensemble: &Ensemble,
    seq: &[PulseElement],
    bias: &BiasSchedule,
    cfg: &SpinSystemConfig,
    opts: &RunOptions,
) -> Result<SequenceOutput> {
    ensemble.validate()?;
    cfg.validate()?;
    bias.validate()?;
    let acquires = seq.iter().filter(|p| p.kind == PulseKind::Acquire).count();
    if acquires != 1 {
        return Err(Error::InvalidInput(format!(
            "sequence needs exactly one acquire, found {acquires}"
        )));
    }
    let mut warnings = Vec::new();
    let biased = bias.max_abs_amplitude() > 0.0;
    if let Some((cal, dev)) = &opts.drive_check {
        for p in seq.iter().filter(|p| p.is_pulse() && p.amplitude > 0.0) {
            if let Some(w) = dev.check_power(cal.power_for(p.amplitude), biased) {
                if !warnings.contains(&w) {
                    warnings.push(w);
                }
            }
        }
    }
    let waves: Vec<Option<Vec<WaveSample>>> = seq
        .iter()
        .map(|p| {
            if p.is_pulse() {
                waveform(p, opts.dt).map(Some)
            } else {
                p.validate().map(|_| None)
            }
        })
        .collect::<Result<_>>()?;

    let n_acq = opts.acquire_samples.max(1);
    let per_packet: Vec<Vec<Complex64>> = ensemble
        .packets
        .par_iter()
        .map(|packet| -> Result<Vec<Complex64>> {
            let mut p = *packet;
            let mut t = 0.0;
            for (el, wf) in seq.iter().zip(&waves) {
                match (el.kind, wf) {
                    (PulseKind::Acquire, _) => {
                        let h = el.duration / n_acq as f64;
                        return Ok((0..n_acq)
                            .map(|j| {
                                let s = (j as f64 + 0.5) * h;
                                let q = free_evolve(&p, t, s, bias, cfg);
                                q.transverse() * p.weight
                            })
                            .collect());
                    }
                    (_, Some(wf)) => {
                        let h = el.duration / wf.len() as f64;
                        p = propagate(&p, wf, bias, t, h, cfg)?;
                    }
                    (_, None) => p = free_evolve(&p, t, el.duration, bias, cfg),
                }
                t += el.duration;
            }
            unreachable!("sequence validated to contain an acquire")
        })
        .collect::<Result<_>>()?;

    let t_acq: f64 = seq
        .iter()
        .take_while(|p| p.kind != PulseKind::Acquire)
        .map(|p| p.duration)
        .sum();
    let window = seq
        .iter()
        .find(|p| p.kind == PulseKind::Acquire)
        .map_or(0.0, |p| p.duration);
    let h = window / n_acq as f64;
    let mut column = vec![Complex64::new(0.0, 0.0); per_packet.len()];
    let trace: Vec<(f64, Complex64)> = (0..n_acq)
        .map(|j| {
            for (c, v) in column.iter_mut().zip(&per_packet) {
                *c = v[j];
            }
            (t_acq + (j as f64 + 0.5) * h, pairwise_sum_complex(&column))
        })
        .collect();
    let values: Vec<Complex64> = trace.iter().map(|x| x.1).collect();
    let echo = pairwise_sum_complex(&values) / n_acq as f64;
    Ok(SequenceOutput { trace, echo, warnings })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PulseStyle {
    Rect,
    Adiabatic,
}

/// Experimental settings shared by field sweeps and T₂ runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSetup {
    pub tau: f64,
    pub rect_pi2: f64,
    pub rect_pi: f64,
    pub rect_power_dbm: f64,
    pub adiabatic_power_dbm: f64,
    pub adiabatic_duration: f64,
    pub chirp_halfwidth: f64,
    pub acquire_window: f64,
    /// In-plane angle between B₀ and the pin axis, radians.
    pub misalignment: f64,
    pub calibration: DriveCalibration,
    pub dt: f64,
    pub spatial_ny: usize,
    pub spatial_nz: usize,
    pub line_nodes: usize,
}

impl Default for SweepSetup {
    fn default() -> Self {
        Self {
            tau: 60e-6,
            rect_pi2: 200e-9,
            rect_pi: 400e-9,
            rect_power_dbm: -29.0,
            adiabatic_power_dbm: -32.0,
            adiabatic_duration: 10e-6,
            chirp_halfwidth: 2e6,
            acquire_window: 2e-6,
            misalignment: 0.0,
            calibration: DriveCalibration::default(),
            dt: 2e-9,
            spatial_ny: 24,
            spatial_nz: 16,
            line_nodes: 24,
        }
    }
}

impl SweepSetup {
    /// Pulse pair and any power-cap warning for the given bias state.
    pub fn pulses(
        &self,
        style: PulseStyle,
        tuning: &DeviceTuningParams,
        biased: bool,
    ) -> (PulseElement, PulseElement, Option<Warning>) {
        let requested = match style {
            PulseStyle::Rect => self.rect_power_dbm,
            PulseStyle::Adiabatic => self.adiabatic_power_dbm,
        };
        let warning = tuning.check_power(requested, biased);
        let power = requested.min(tuning.power_cap(biased));
        let w = self.calibration.rabi_at(power);
        match style {
            PulseStyle::Rect => (
                PulseElement::rect(self.rect_pi2, w, 0.0),
                PulseElement::rect(self.rect_pi, w, 0.5 * PI),
                warning,
            ),
            PulseStyle::Adiabatic => (
                PulseElement::bir4(self.adiabatic_duration, w, 0.5 * PI, self.chirp_halfwidth, 0.0),
                PulseElement::bir4(self.adiabatic_duration, w, PI, self.chirp_halfwidth, 0.5 * PI),
                warning,
            ),
        }
    }

    pub fn hahn(
        &self,
        style: PulseStyle,
        tuning: &DeviceTuningParams,
        biased: bool,
        tau: f64,
    ) -> Result<(Vec<PulseElement>, Option<Warning>)> {
        let (a, b, w) = self.pulses(style, tuning, biased);
        Ok((hahn_sequence(tau, a, b, self.acquire_window)?, w))
    }
}

/// Per-position quantities of the spin layer used to build ensembles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialPacket {
    pub b1_ratio: f64,
    /// B₁-reciprocity detection weight, normalised over the layer.
    pub weight: f64,
    /// `(B_y, B_z)` bias field per ampere.
    pub b_bias_per_amp: (f64, f64),
}

pub fn spatial_packets(device: &Device, ny: usize, nz: usize) -> Vec<SpatialPacket> {
    let g = &device.geometry;
    let reference = fieldmap::b1_per_sqrt_watt(g, g.reference_point());
    let samples = fieldmap::region_samples(g, Region::Lateral, ny, nz);
    let total: f64 = samples.iter().map(|s| s.b1_per_sqrt_watt / reference).sum();
    samples
        .iter()
        .map(|s| {
            let r = s.b1_per_sqrt_watt / reference;
            SpatialPacket {
                b1_ratio: r,
                weight: r / total,
                b_bias_per_amp: s.b_bias_per_amp,
            }
        })
        .collect()
}

/// Complex echo of a single packet as a function of detuning and B₁ scale,
/// tabulated once and bilinearly interpolated.
struct EchoTable {
    d_lo: f64,
    d_step: f64,
    b_lo: f64,
    b_step: f64,
    nd: usize,
    nb: usize,
    values: Vec<Complex64>,
}

impl EchoTable {
    fn build(
        seq: &[PulseElement],
        cfg: &SpinSystemConfig,
        opts: &RunOptions,
        d_half: f64,
        d_step: f64,
        b_range: (f64, f64),
        nb: usize,
    ) -> Result<Self> {
        let nd = (2.0 * d_half / d_step).round() as usize + 1;
        let nb = nb.max(2);
        let b_step = (b_range.1 - b_range.0).max(1e-9) / (nb - 1) as f64;
        let bias = BiasSchedule::empty(0.0);
        let values: Vec<Complex64> = (0..nb * nd)
            .into_par_iter()
            .map(|k| {
                let (ib, id) = (k / nd, k % nd);
                let packet = SpinPacket::new(-d_half + id as f64 * d_step, b_range.0 + ib as f64 * b_step);
                run_sequence(&Ensemble::single(packet), seq, &bias, cfg, opts).map(|o| o.echo)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            d_lo: -d_half,
            d_step,
            b_lo: b_range.0,
            b_step,
            nd,
            nb,
            values,
        })
    }

    fn at(&self, detuning: f64, b1: f64) -> Complex64 {
        let x = (detuning - self.d_lo) / self.d_step;
        if x < 0.0 || x > (self.nd - 1) as f64 {
            return Complex64::new(0.0, 0.0);
        }
        let y = ((b1 - self.b_lo) / self.b_step).clamp(0.0, (self.nb - 1) as f64);
        let (i, j) = ((x as usize).min(self.nd - 2), (y as usize).min(self.nb - 2));
        let (fx, fy) = (x - i as f64, y - j as f64);
        let v = |jj: usize, ii: usize| self.values[jj * self.nd + ii];
        v(j, i) * (1.0 - fx) * (1.0 - fy)
            + v(j, i + 1) * fx * (1.0 - fy)
            + v(j + 1, i) * (1.0 - fx) * fy
            + v(j + 1, i + 1) * fx * fy
    }
}

/// Echo-detected field sweep with the resonator held at the bias-shifted
/// frequency and the drive on resonance with it.
///
/// Rows: `x_value` = B₀ (T), `echo_amp`, `echo_phase`. Amplitudes are
/// normalised so full refocusing of the whole layer gives 1.
pub fn field_sweep(
    cfg: &SpinSystemConfig,
    device: &Device,
    setup: &SweepSetup,
    bias_current: f64,
    style: PulseStyle,
    field_grid: &[f64],
) -> Result<ExperimentResult> {
    cfg.validate()?;
    if field_grid.len() < 3 {
        return Err(Error::InvalidInput("field grid needs at least 3 points".into()));
    }
    let tuning = &device.tuning;
    let shift = delta_f(bias_current, tuning)?;
    let biased = bias_current != 0.0;
    let (seq, warning) = setup.hahn(style, tuning, biased, setup.tau)?;
    let opts = RunOptions {
        dt: setup.dt,
        ..RunOptions::default()
    };

    let spatial = spatial_packets(device, setup.spatial_ny, setup.spatial_nz);
    let line = gaussian_nodes(cfg.line_fwhm, setup.line_nodes);
    let species = &cfg.p31;
    let local: Vec<f64> = spatial
        .iter()
        .map(|s| {
            let b = (s.b_bias_per_amp.0 * bias_current, s.b_bias_per_amp.1 * bias_current);
            fieldmap::parallel_shift(b, REFERENCE_B0, setup.misalignment)
        })
        .collect();
    let (b_min, b_max) = spatial.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), s| {
        (lo.min(s.b1_ratio), hi.max(s.b1_ratio))
    });
    let d_half = TAU * 8e6;
    // the table edges see the largest offsets, so shrink the step to suit
    let peak_rate = seq
        .iter()
        .map(|p| p.amplitude.abs() * b_max + TAU * (p.chirp_halfwidth.abs() + p.carrier_offset.abs()))
        .fold(0.0, f64::max)
        + d_half;
    let opts = RunOptions {
        dt: opts.dt.min(0.9 * MAX_STEP_ANGLE / peak_rate),
        ..opts
    };
    let table = EchoTable::build(&seq, cfg, &opts, d_half, TAU * 0.025e6, (b_min, b_max), 14)?;

    let mut out = ExperimentResult::new("x_value", &["echo_amp", "echo_phase"]);
    out.metadata.experiment = "field_sweep".into();
    out.metadata.device = device.name.clone();
    if let Some(w) = warning {
        out.warn(w.to_string());
    }
    let (table, line) = (&table, &line);
    let rows: Vec<Vec<f64>> = field_grid
        .par_iter()
        .map(|&b0| {
            let terms: Vec<Complex64> = spatial
                .iter()
                .zip(&local)
                .flat_map(|(s, dl)| {
                    line.iter().map(move |(db, wl)| {
                        let f_spin = species.gamma_eff * (b0 + db + dl - species.line_center_field);
                        let det = TAU * (f_spin - shift);
                        table.at(det, s.b1_ratio) * (s.weight * wl)
                    })
                })
                .collect();
            let s = pairwise_sum_complex(&terms);
            vec![b0, s.norm(), s.arg()]
        })
        .collect();
    for r in rows {
        out.push_row(r)?;
    }
    Ok(out)
}

/// Peak location and height of a sweep by parabolic refinement around the
/// largest `echo_amp` sample.
pub fn sweep_peak(sweep: &ExperimentResult) -> Result<(f64, f64)> {
    let x = sweep.x();
    let y = sweep
        .column("echo_amp")
        .ok_or_else(|| Error::InvalidInput("sweep has no echo_amp column".into()))?;
    let k = y
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k)
        .ok_or(Error::NoPeakFound)?;
    if k == 0 || k + 1 == y.len() {
        return Ok((x[k], y[k]));
    }
    let step = x[k] - x[k - 1];
    let (a, b, c) = (y[k - 1], y[k], y[k + 1]);
    let curvature = a - 2.0 * b + c;
    let top = if curvature < 0.0 {
        b - (a - c).powi(2) / (8.0 * curvature)
    } else {
        b
    };
    Ok((parabolic_vertex(x[k], step, a, b, c), top))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct T2Fit {
    pub t2: f64,
    pub stderr: f64,
    pub amplitude: f64,
}

/// Fits `A exp(−2τ/T₂)` to a decay whose `x_value` is τ in seconds.
pub fn fit_t2(decay: &ExperimentResult) -> Result<T2Fit> {
    let tau = decay.x();
    let amp = decay
        .column("echo_amp")
        .ok_or_else(|| Error::InvalidInput("decay has no echo_amp column".into()))?;
    if tau.len() < 6 {
        return Err(Error::InvalidInput(format!(
            "need at least 6 points, got {}",
            tau.len()
        )));
    }
    if amp.iter().any(|a| !(*a > 0.0)) {
        return Err(Error::InvalidInput("echo amplitudes must be positive".into()));
    }
    // log-linear start
    let n = tau.len() as f64;
    let (sx, sy) = (tau.iter().sum::<f64>(), amp.iter().map(|a| a.ln()).sum::<f64>());
    let sxx: f64 = tau.iter().map(|t| t * t).sum();
    let sxy: f64 = tau.iter().zip(&amp).map(|(t, a)| t * a.ln()).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let icpt = (sy - slope * sx) / n;
    let span = tau.iter().cloned().fold(0.0, f64::max);
    // rate in units of 1/span so both parameters are O(1)
    let a0 = icpt.exp();
    let k0 = (-0.5 * slope * span).max(1e-6);
    let model = |p: &[f64]| {
        let r = nalgebra::DVector::from_fn(tau.len(), |i, _| {
            p[0] * (-2.0 * p[1] * tau[i] / span).exp() / a0 - amp[i] / a0
        });
        let j = nalgebra::DMatrix::from_fn(tau.len(), 2, |i, c| {
            let e = (-2.0 * p[1] * tau[i] / span).exp();
            if c == 0 {
                e / a0
            } else {
                -2.0 * tau[i] / span * p[0] * e / a0
            }
        });
        (r, j)
    };
    let fit = levenberg_marquardt(model, &[a0, k0], LmOptions::default()).map_err(|e| match e {
        Error::IllConditioned(m) => Error::FitDiverged(m),
        other => other,
    })?;
    let (a, k) = (fit.params[0], fit.params[1]);
    let k_err = fit.stderr(1);
    if !(k > 0.0) || k < 2.0 * k_err.max(1e-9) {
        return Err(Error::FitDiverged("no resolvable decay".into()));
    }
    let t2 = span / k;
    Ok(T2Fit {
        t2,
        stderr: t2 * k_err / k,
        amplitude: a,
    })
}

/// How bias current is applied during a T₂ measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum T2Bias {
    None,
    /// Equal lobes centred in each free-evolution period.
    Compensated {
        current: f64,
        lobe: f64,
    },
    /// A single lobe in the first period.
    Uncompensated {
        current: f64,
        lobe: f64,
    },
}

/// Linear bias coupling `2π γ B_y sin θ` in rad/s/A.
pub fn bias_shift_per_amp(b_bias_per_amp: (f64, f64), gamma: f64, theta: f64) -> f64 {
    TAU * gamma * b_bias_per_amp.0 * theta.sin()
}

/// Spatial × line ensemble on resonance with the unbiased resonator.
pub fn layer_ensemble(
    cfg: &SpinSystemConfig,
    device: &Device,
    setup: &SweepSetup,
    ny: usize,
    nz: usize,
    line_nodes: usize,
) -> Ensemble {
    let spatial = spatial_packets(device, ny, nz);
    let line = gaussian_nodes(TAU * cfg.p31.gamma_eff * cfg.line_fwhm, line_nodes);
    let mut packets = Vec::with_capacity(spatial.len() * line.len());
    for s in &spatial {
        for (d, w) in &line {
            packets.push(SpinPacket {
                bias_shift: bias_shift_per_amp(s.b_bias_per_amp, cfg.p31.gamma_eff, setup.misalignment),
                weight: s.weight * w,
                ..SpinPacket::new(*d, s.b1_ratio)
            });
        }
    }
    Ensemble { packets }
}

/// Bias lobes for one Hahn sequence, centred in the free-evolution gaps
/// before and after the π pulse. Times are from the sequence start.
pub fn t2_bias_schedule(bias: T2Bias, seq: &[PulseElement], lag: f64) -> Result<BiasSchedule> {
    use crate::biasdyn::BiasElement;
    let mut gaps = Vec::new();
    let mut t = 0.0;
    for p in seq {
        if p.kind == PulseKind::Delay {
            gaps.push((t, t + p.duration));
        }
        t += p.duration;
    }
    let (current, lobe, both) = match bias {
        T2Bias::None => return Ok(BiasSchedule::empty(lag)),
        T2Bias::Compensated { current, lobe } => (current, lobe, true),
        T2Bias::Uncompensated { current, lobe } => (current, lobe, false),
    };
    let [before, after] = gaps[..] else {
        return Err(Error::InvalidInput("bias lobes need a two-gap Hahn sequence".into()));
    };
    // equal lengths keep the areas equal; leave room for the lag tail
    let l = lobe.min(0.8 * (before.1 - before.0)).min(0.8 * (after.1 - after.0));
    let centred = |(a, b): (f64, f64)| BiasElement::new(0.5 * (a + b) - 0.5 * l, 0.5 * (a + b) + 0.5 * l, current);
    let mut elements = vec![centred(before)];
    if both {
        elements.push(centred(after));
    }
    BiasSchedule::new(elements, lag)
}

/// Hahn-echo decay with adiabatic pulses. Rows: τ (s), amplitude, phase.
/// Bias lobes sit in the free-evolution gaps.
pub fn t2_decay(
    cfg: &SpinSystemConfig,
    device: &Device,
    setup: &SweepSetup,
    ensemble: &Ensemble,
    taus: &[f64],
    bias: T2Bias,
) -> Result<ExperimentResult> {
    let opts = RunOptions {
        dt: setup.dt,
        ..RunOptions::default()
    };
    let mut out = ExperimentResult::new("x_value", &["echo_amp", "echo_phase"]);
    out.metadata.experiment = "t2_decay".into();
    out.metadata.device = device.name.clone();
    for &tau in taus {
        // pulses sit outside the lobes, so the unbiased power cap applies
        let (seq, _) = setup.hahn(PulseStyle::Adiabatic, &device.tuning, false, tau)?;
        let sched = t2_bias_schedule(bias, &seq, device.lag)?;
        if sched.max_abs_amplitude() > 0.0 {
            sched.check_critical(device.tuning.i_critical)?;
        }
        let r = run_phase_cycled(ensemble, &seq, &sched, cfg, &opts)?;
        out.push_row(vec![tau, r.amplitude(), r.phase()])?;
    }
    Ok(out)
}

/// Moves every element of `sched` later by `dt`.
pub fn shift_schedule(sched: &BiasSchedule, dt: f64) -> Result<BiasSchedule> {
    let elements = sched
        .elements
        .iter()
        .map(|e| crate::biasdyn::BiasElement::new(e.t_start + dt, e.t_end + dt, e.amplitude))
        .collect();
    BiasSchedule::new(elements, sched.lag_time_constant)
}
