// SPDX-License-Identifier: Apache-2.0

//! DEER between ³¹P observers and randomly placed ⁷⁵As partners.
//!
//! With the pump at time `t` after the observer π/2 and the π at `τ`, a
//! flipped partner with coupling `D` adds a net phase `±D t` at the echo, so
//! the observer signal is `∏ cos(D_k t)` over flipped partners.

use std::f64::consts::{PI, TAU};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::biasdyn::BiasSchedule;
use crate::device::Device;
use crate::error::{Error, Result};
use crate::fieldmap::{compensation_schedule, CompensationKind, DeerTiming};
use crate::kinet::invert_delta_f;
use crate::numeric::pairwise_sum;
use crate::result::ExperimentResult;
use crate::spinsim::{
    self, gaussian_nodes, run_sequence, shift_schedule, spatial_packets, Ensemble, PulseElement, RunOptions,
    SpinPacket, SpinSystemConfig, SweepSetup,
};
use crate::{HBAR, MU0};

/// Free-electron gyromagnetic ratio, rad/s/T.
pub const GAMMA_E: f64 = TAU * 28.0e9;

/// `μ₀γ²ℏ/4π` in rad·m³/s.
pub fn dipolar_constant() -> f64 {
    MU0 / (4.0 * PI) * GAMMA_E * GAMMA_E * HBAR
}

/// Secular dipolar coupling in rad/s for a pair at distance `r` whose axis
/// makes angle `theta` with B₀.
pub fn dipolar_coupling(r: f64, theta: f64) -> f64 {
    let c = theta.cos();
    dipolar_constant() * (1.0 - 3.0 * c * c) / (r * r * r)
}

/// Decay rate of the ensemble echo per unit flipped partner density for a
/// Poisson-random continuum: `8π²C/(9√3)`, in m³/s.
pub fn instantaneous_diffusion_coefficient() -> f64 {
    8.0 * PI * PI * dipolar_constant() / (9.0 * 3f64.sqrt())
}

/// Flip fraction that gives echo `target` at pump time `t` in the continuum limit.
pub fn calibrate_flip_fraction(concentration: f64, t: f64, target: f64) -> f64 {
    -target.ln() / (t * concentration * instantaneous_diffusion_coefficient())
}

/// 5×10¹⁶ cm⁻³.
pub const DEFAULT_CONCENTRATION: f64 = 5e22;

fn default_flip_fraction() -> f64 {
    // ~20 % echo reduction at t = 20 μs
    calibrate_flip_fraction(DEFAULT_CONCENTRATION, 20e-6, 0.80)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeerConfig {
    pub tau: f64,
    pub t_min: f64,
    pub settle_time: f64,
    /// Pump frequency relative to the observer transition, Hz.
    pub pump_offset: f64,
    pub pump_duration: f64,
    /// Detuning of the pump from the As line in the off-resonance control, Hz.
    pub off_resonance_detuning: f64,
    /// Gyromagnetic ratio used for both species in the dipolar kernel, rad/s/T.
    pub gamma: f64,
    pub as_concentration: f64,
    /// Fraction of partners inverted by an on-resonance pump.
    pub flip_fraction: f64,
    /// `None` places the cutoff where `|D| = 0.05/τ`.
    pub cutoff_radius: Option<f64>,
    /// Restrict partners to an implanted slab of this thickness.
    pub slab_thickness: Option<f64>,
    pub observers: usize,
    pub seed: u64,
}

impl Default for DeerConfig {
    fn default() -> Self {
        Self {
            tau: 34e-6,
            t_min: 6e-6,
            settle_time: 1e-6,
            pump_offset: -33e6,
            pump_duration: 400e-9,
            off_resonance_detuning: 10e6,
            gamma: GAMMA_E,
            as_concentration: DEFAULT_CONCENTRATION,
            flip_fraction: default_flip_fraction(),
            cutoff_radius: None,
            slab_thickness: None,
            observers: 10_000,
            seed: 1,
        }
    }
}

impl DeerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if !(self.settle_time >= 0.0 && self.t_min >= self.settle_time) {
            return bad("require t_min ≥ settle_time ≥ 0".into());
        }
        if !(self.tau > self.t_min + self.pump_duration) {
            return bad("τ must exceed t_min plus the pump duration".into());
        }
        if !(self.as_concentration > 0.0) {
            return bad("concentration must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.flip_fraction) {
            return bad(format!("flip_fraction {} outside [0, 1]", self.flip_fraction));
        }
        if self.cutoff_radius.is_some_and(|r| !(r > 0.0)) || self.slab_thickness.is_some_and(|d| !(d > 0.0)) {
            return bad("cutoff radius and slab thickness must be positive".into());
        }
        if self.observers == 0 {
            return bad("need at least one observer".into());
        }
        Ok(())
    }

    pub fn coupling_constant(&self) -> f64 {
        MU0 / (4.0 * PI) * self.gamma * self.gamma * HBAR
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff_radius
            .unwrap_or_else(|| (2.0 * self.coupling_constant() * self.tau / 0.05).cbrt())
    }

    pub fn mean_partners(&self) -> f64 {
        self.as_concentration * 4.0 / 3.0 * PI * self.cutoff().powi(3)
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if t < self.t_min {
            return Err(Error::TimingViolation(format!(
                "t = {t:e} s is below t_min ({:e} s)",
                self.t_min
            )));
        }
        if t > self.tau - self.pump_duration {
            return Err(Error::TimingViolation(format!(
                "t = {t:e} s leaves no room for the pump before the π pulse at τ = {:e} s",
                self.tau
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartnerSet {
    pub couplings: Vec<f64>,
    pub flipped: Vec<bool>,
}

impl PartnerSet {
    /// Observer signal `∏ cos(D_k t)` over flipped partners.
    pub fn echo(&self, t: f64) -> f64 {
        self.couplings
            .iter()
            .zip(&self.flipped)
            .filter(|(_, f)| **f)
            .map(|(d, _)| (d * t).cos())
            .product()
    }
}

/// Partners of observer `index` with each one flipped with probability
/// `flip_probability`. Positions do not depend on the probability, and a
/// partner flipped at some probability stays flipped at any larger one.
pub fn sample_partners_with(cfg: &DeerConfig, index: u64, flip_probability: f64) -> PartnerSet {
    let mut rng = crate::rng::stream(cfg.seed, "deer.partners", index);
    let radius = cfg.cutoff();
    let c = cfg.coupling_constant();
    let depth = cfg.slab_thickness.map(|d| d * rng.gen::<f64>());
    let lambda = cfg.mean_partners();
    let n = if lambda > 0.0 {
        Poisson::new(lambda).map(|p| p.sample(&mut rng) as usize).unwrap_or(0)
    } else {
        0
    };
    let mut out = PartnerSet {
        couplings: Vec::with_capacity(n),
        flipped: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let v: [f64; 3] = [
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
        ];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        let r = radius * rng.gen::<f64>().cbrt();
        let u: f64 = rng.gen();
        if let (Some(z0), Some(d)) = (depth, cfg.slab_thickness) {
            let z = z0 + r * v[2] / norm;
            if !(0.0..=d).contains(&z) {
                continue;
            }
        }
        // B₀ lies in-plane along x
        let cos_t = v[0] / norm;
        out.couplings.push(c * (1.0 - 3.0 * cos_t * cos_t) / (r * r * r));
        out.flipped.push(u < flip_probability);
    }
    out
}

pub fn sample_partners(cfg: &DeerConfig, index: u64) -> PartnerSet {
    sample_partners_with(cfg, index, cfg.flip_fraction)
}

/// Ensemble echo for flip probability `p`.
fn ensemble_echo(cfg: &DeerConfig, t: f64, p: f64) -> f64 {
    let per: Vec<f64> = (0..cfg.observers as u64)
        .into_par_iter()
        .map(|k| sample_partners_with(cfg, k, p).echo(t))
        .collect();
    pairwise_sum(&per) / cfg.observers as f64
}

/// Observer-averaged normalised echo for an instantaneous, perfect pump.
pub fn deer_echo(t: f64, cfg: &DeerConfig) -> Result<f64> {
    cfg.validate()?;
    cfg.check_time(t)?;
    Ok(ensemble_echo(cfg, t, cfg.flip_fraction))
}

/// Exhaustive average over the 2ⁿ initial partner states, accumulating the
/// observer phase piecewise across the pump and refocusing pulses.
pub fn brute_force_echo(couplings: &[f64], flipped: &[bool], t: f64, tau: f64) -> f64 {
    let n = couplings.len();
    assert!(n <= 16, "enumeration is exponential");
    let mut acc = Complex64::new(0.0, 0.0);
    for state in 0..(1u32 << n) {
        let mut phase = 0.0;
        for k in 0..n {
            let m = if state >> k & 1 == 1 { 0.5 } else { -0.5 };
            let after = if flipped[k] { -m } else { m };
            // sign of accumulation flips at the π pulse
            phase += couplings[k] * (m * t + after * (tau - t) - after * tau);
        }
        acc += Complex64::from_polar(1.0, phase);
    }
    (acc / (1u64 << n) as f64).re
}

/// Inversion `(1 − m_z)/2` of a rectangular pulse of nominal flip `π`
/// scaled by `scale`, at detuning `delta` relative to its Rabi frequency `w1`.
pub fn rect_inversion(w1: f64, duration: f64, delta: f64) -> f64 {
    let weff = (w1 * w1 + delta * delta).sqrt();
    if weff == 0.0 {
        return 0.0;
    }
    (w1 / weff).powi(2) * (0.5 * weff * duration).sin().powi(2)
}

/// Flip probability when the pump misses the As line by `detuning` (Hz),
/// relative to the on-resonance pump.
pub fn off_resonance_fraction(cfg: &DeerConfig, detuning: f64) -> f64 {
    let w1 = PI / cfg.pump_duration;
    cfg.flip_fraction * rect_inversion(w1, cfg.pump_duration, TAU * detuning)
        / rect_inversion(w1, cfg.pump_duration, 0.0)
}

/// Analytic DEER curve. Rows: `t_us`, on-resonance echo, off-resonance echo.
pub fn deer_curve(cfg: &DeerConfig, t_grid: &[f64]) -> Result<ExperimentResult> {
    cfg.validate()?;
    let mut out = ExperimentResult::new("t_us", &["echo_norm_on_res", "echo_norm_off_res"]);
    out.metadata.experiment = "deer".into();
    out.metadata.seed = cfg.seed;
    let p_off = off_resonance_fraction(cfg, cfg.off_resonance_detuning);
    for &t in t_grid {
        cfg.check_time(t)?;
        let on = ensemble_echo(cfg, t, cfg.flip_fraction);
        let off = ensemble_echo(cfg, t, p_off);
        out.push_row(vec![t * 1e6, on, off])?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PumpShape {
    Rect,
    Adiabatic,
}

/// Settings for propagating the full observer sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FullModeOptions {
    pub pump: PumpShape,
    pub pump_power_dbm: f64,
    /// Move the resonator to the pump frequency for the pump pulse.
    pub retune: bool,
    pub compensation: CompensationKind,
    pub dt: f64,
    pub spatial_ny: usize,
    pub spatial_nz: usize,
    pub line_nodes: usize,
}

impl Default for FullModeOptions {
    fn default() -> Self {
        Self {
            pump: PumpShape::Rect,
            pump_power_dbm: -29.0,
            retune: true,
            compensation: CompensationKind::SymmetricPair,
            dt: 0.25e-9,
            spatial_ny: 6,
            spatial_nz: 4,
            line_nodes: 6,
        }
    }
}

/// Amplitude transmitted by a resonator of loaded Q at `offset` from its centre.
pub fn lorentzian_amplitude(offset: f64, f0: f64, q: f64) -> f64 {
    1.0 / (1.0 + (2.0 * q * offset / f0).powi(2)).sqrt()
}

struct FullModel {
    pump: PulseElement,
    pump_ref: PulseElement,
    current: f64,
}

fn pump_element(cfg: &DeerConfig, shape: PumpShape, w1: f64, setup: &SweepSetup) -> PulseElement {
    match shape {
        PumpShape::Rect => PulseElement::rect(cfg.pump_duration, w1, 0.0),
        PumpShape::Adiabatic => PulseElement::bir4(cfg.pump_duration, w1, PI, setup.chirp_halfwidth, 0.0),
    }
}

fn full_model(
    cfg: &DeerConfig,
    device: &Device,
    setup: &SweepSetup,
    opts: &FullModeOptions,
    warnings: &mut Vec<String>,
) -> Result<FullModel> {
    let tuning = &device.tuning;
    let current = invert_delta_f(cfg.pump_offset, tuning)?;
    if let Some(w) = tuning.check_power(opts.pump_power_dbm, true) {
        warnings.push(w.to_string());
    }
    let w_nominal = setup
        .calibration
        .rabi_at(opts.pump_power_dbm.min(tuning.power_cap(true)));
    let pump_ref = pump_element(cfg, opts.pump, w_nominal, setup);
    let w1 = if opts.retune {
        w_nominal
    } else {
        // the resonator stays at the observer frequency and filters the pump
        setup
            .calibration
            .rabi_at(opts.pump_power_dbm.min(tuning.power_cap(false)))
            * lorentzian_amplitude(cfg.pump_offset, tuning.f0, tuning.q_loaded)
    };
    Ok(FullModel {
        pump: pump_element(cfg, opts.pump, w1, setup),
        pump_ref,
        current,
    })
}

/// Mean inversion of the As packets by `pump` when it misses the line by
/// `detuning` (Hz).
fn pump_efficiency(
    pump: &PulseElement,
    detuning: f64,
    spin: &SpinSystemConfig,
    device: &Device,
    opts: &FullModeOptions,
) -> Result<f64> {
    let spatial = spatial_packets(device, opts.spatial_ny, opts.spatial_nz);
    let line = gaussian_nodes(TAU * spin.as75.gamma_eff * spin.line_fwhm, opts.line_nodes);
    let wf = spinsim::waveform(pump, opts.dt)?;
    let h = pump.duration / wf.len() as f64;
    let quiet = spin.without_relaxation();
    let bias = BiasSchedule::empty(0.0);
    let mut terms = Vec::with_capacity(spatial.len() * line.len());
    for s in &spatial {
        for (d, w) in &line {
            let p = SpinPacket::new(TAU * detuning + d, s.b1_ratio);
            let q = spinsim::propagate(&p, &wf, &bias, 0.0, h, &quiet)?;
            terms.push(s.weight * w * 0.5 * (1.0 - q.m[2]));
        }
    }
    Ok(pairwise_sum(&terms))
}

/// Observer echo magnitude with the pump and bias lobes, over the same
/// sequence without them.
#[allow(clippy::too_many_arguments)]
fn observer_ratio(
    cfg: &DeerConfig,
    t: f64,
    pump: &PulseElement,
    current: f64,
    ensemble: &Ensemble,
    spin: &SpinSystemConfig,
    device: &Device,
    setup: &SweepSetup,
    opts: &FullModeOptions,
) -> Result<f64> {
    let (pi2, pi, _) = setup.pulses(spinsim::PulseStyle::Rect, &device.tuning, false);
    let w = setup.acquire_window;
    let pd = pump.duration;
    let d1 = t - 0.5 * pi2.duration - 0.5 * pd;
    let d2 = cfg.tau - t - 0.5 * pd - 0.5 * pi.duration;
    let d3 = cfg.tau - 0.5 * pi.duration - 0.5 * w;
    if !(d1 > 0.0 && d2 > 0.0 && d3 > 0.0) {
        return Err(Error::TimingViolation(format!(
            "pump at t = {t:e} s collides with the observer pulses"
        )));
    }
    let pump = pump.with_carrier(cfg.pump_offset);
    let seq = vec![
        pi2,
        PulseElement::delay(d1),
        pump,
        PulseElement::delay(d2),
        pi,
        PulseElement::delay(d3),
        PulseElement::acquire(w),
    ];
    let reference = vec![
        pi2,
        PulseElement::delay(d1 + pd + d2),
        pi,
        PulseElement::delay(d3),
        PulseElement::acquire(w),
    ];
    let bias = if opts.retune {
        let timing = DeerTiming {
            tau: cfg.tau,
            t_pump: t - 0.5 * pd,
            pump_duration: pd,
            settle: cfg.settle_time,
            pi_duration: pi.duration,
            acquire_half_window: 0.5 * w,
        };
        let s = compensation_schedule(opts.compensation, &timing, current, device.lag)?;
        s.check_critical(device.tuning.i_critical)?;
        shift_schedule(&s, 0.5 * pi2.duration)?
    } else {
        BiasSchedule::empty(device.lag)
    };
    let run = RunOptions {
        dt: opts.dt,
        ..RunOptions::default()
    };
    let with = run_sequence(ensemble, &seq, &bias, spin, &run)?;
    let without = run_sequence(ensemble, &reference, &BiasSchedule::empty(device.lag), spin, &run)?;
    Ok(with.amplitude() / without.amplitude())
}

/// DEER curve from full propagation of the observer sequence. The dipolar
/// factor uses the analytic partner model with the flip probability scaled
/// by the simulated pump efficiency relative to the nominal retuned pump.
pub fn deer_curve_full(
    cfg: &DeerConfig,
    device: &Device,
    spin: &SpinSystemConfig,
    setup: &SweepSetup,
    opts: &FullModeOptions,
    t_grid: &[f64],
) -> Result<ExperimentResult> {
    cfg.validate()?;
    spin.validate()?;
    let mut warnings = Vec::new();
    let model = full_model(cfg, device, setup, opts, &mut warnings)?;
    let eta_ref = pump_efficiency(&model.pump_ref, 0.0, spin, device, opts)?;
    if !(eta_ref > 0.0) {
        return Err(Error::InvalidInput("reference pump inverts nothing".into()));
    }
    let eta_on = pump_efficiency(&model.pump, 0.0, spin, device, opts)?;
    let eta_off = pump_efficiency(&model.pump, cfg.off_resonance_detuning, spin, device, opts)?;
    let p_on = (cfg.flip_fraction * eta_on / eta_ref).min(1.0);
    let p_off = (cfg.flip_fraction * eta_off / eta_ref).min(1.0);
    let ensemble = spinsim::layer_ensemble(spin, device, setup, opts.spatial_ny, opts.spatial_nz, opts.line_nodes);

    let mut out = ExperimentResult::new("t_us", &["echo_norm_on_res", "echo_norm_off_res"]);
    out.metadata.experiment = "deer".into();
    out.metadata.device = device.name.clone();
    out.metadata.seed = cfg.seed;
    for w in warnings {
        out.warn(w);
    }
    out.metadata.extra.insert("pump_efficiency_on".into(), eta_on.into());
    out.metadata
        .extra
        .insert("pump_efficiency_reference".into(), eta_ref.into());
    for &t in t_grid {
        cfg.check_time(t)?;
        let obs = observer_ratio(cfg, t, &model.pump, model.current, &ensemble, spin, device, setup, opts)
            .map_err(|e| e.context(format!("t = {:.3} μs", t * 1e6)))?;
        let on = obs * ensemble_echo(cfg, t, p_on);
        let off = obs * ensemble_echo(cfg, t, p_off);
        out.push_row(vec![t * 1e6, on, off])?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small(observers: usize) -> DeerConfig {
        DeerConfig {
            observers,
            ..DeerConfig::default()
        }
    }

    #[test]
    fn magic_angle_and_cube_law() {
        let magic = (1.0 / 3f64.sqrt()).acos();
        assert!(dipolar_coupling(20e-9, magic).abs() < 1e-9);
        let d1 = dipolar_coupling(20e-9, 0.3);
        let d2 = dipolar_coupling(40e-9, 0.3);
        assert!((d2 * 8.0 / d1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn coupling_at_30nm() {
        // μ0/4π = 1e-7, γ = 2π·28 GHz/T, ℏ
        let g = 2.0 * std::f64::consts::PI * 28.0e9;
        let oracle = -2.0 * 1e-7 * g * g * 1.054_571_817e-34 / (30e-9f64).powi(3);
        let d = dipolar_coupling(30e-9, 0.0);
        assert!((d / oracle - 1.0).abs() < 1e-6);
        assert!((d / (2.0 * std::f64::consts::PI) + 3.85e3).abs() < 10.0, "{}", d / TAU);
    }

    #[test]
    fn default_cutoff_and_fraction() {
        let c = DeerConfig::default();
        assert!((c.cutoff() - 76.3e-9).abs() < 0.5e-9, "{}", c.cutoff());
        assert!((c.flip_fraction - 0.135).abs() < 0.002, "{}", c.flip_fraction);
    }

    #[test]
    fn empty_without_partners() {
        let mut c = small(10);
        c.as_concentration = 1e-30;
        for k in 0..10 {
            assert!(sample_partners(&c, k).couplings.is_empty());
        }
    }

    #[test]
    fn poisson_mean() {
        let c = small(10_000);
        let total: usize = (0..10_000).map(|k| sample_partners(&c, k).couplings.len()).sum();
        let mean = total as f64 / 1e4;
        assert!((mean / c.mean_partners() - 1.0).abs() < 0.02);
    }

    #[test]
    fn deterministic_partners() {
        let c = small(1);
        assert_eq!(sample_partners(&c, 7), sample_partners(&c, 7));
        assert_ne!(sample_partners(&c, 7), sample_partners(&c, 8));
    }

    #[test]
    fn no_flips_no_decay() {
        let c = DeerConfig {
            flip_fraction: 0.0,
            ..small(500)
        };
        for t in [6e-6, 15e-6, 30e-6] {
            assert_eq!(deer_echo(t, &c).unwrap(), 1.0);
        }
    }

    #[test]
    fn brute_force_matches_product() {
        let couplings = [2.0e4, -1.3e4, 7.0e3];
        for flips in [[true, false, true], [true, true, true], [false, false, false]] {
            let set = PartnerSet {
                couplings: couplings.to_vec(),
                flipped: flips.to_vec(),
            };
            for t in [6e-6, 12.5e-6, 20e-6] {
                assert!((set.echo(t) - brute_force_echo(&couplings, &flips, t, 34e-6)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn early_pump_rejected() {
        let c = small(10);
        assert!(matches!(deer_echo(4e-6, &c), Err(Error::TimingViolation(_))));
        assert!(matches!(deer_echo(33.9e-6, &c), Err(Error::TimingViolation(_))));
    }

    #[test]
    fn decay_follows_exponential_oracle() {
        let c = small(4000);
        let k = -(0.8f64).ln() / 20e-6;
        for t in [6e-6, 10e-6, 15e-6, 20e-6] {
            let e = deer_echo(t, &c).unwrap();
            assert!((e / (-k * t).exp() - 1.0).abs() < 0.05, "{t}: {e}");
        }
    }

    #[test]
    fn doubling_fraction_doubles_log() {
        let a = DeerConfig {
            flip_fraction: 0.03,
            ..small(4000)
        };
        let b = DeerConfig {
            flip_fraction: 0.06,
            ..a
        };
        let la = -deer_echo(20e-6, &a).unwrap().ln();
        let lb = -deer_echo(20e-6, &b).unwrap().ln();
        assert!((lb / la / 2.0 - 1.0).abs() < 0.05, "{la} {lb}");
    }

    #[test]
    fn cutoff_converged() {
        let a = small(20000);
        let b = DeerConfig {
            cutoff_radius: Some(2.0 * a.cutoff()),
            ..a
        };
        let ea = deer_echo(20e-6, &a).unwrap();
        let eb = deer_echo(20e-6, &b).unwrap();
        assert!((ea / eb - 1.0).abs() < 0.01, "{ea} {eb}");
    }

    #[test]
    fn slab_mode_reduces_partners() {
        let a = small(2000);
        let b = DeerConfig {
            slab_thickness: Some(50e-9),
            ..a
        };
        assert!(deer_echo(20e-6, &b).unwrap() > deer_echo(20e-6, &a).unwrap());
    }

    #[test]
    fn off_resonance_is_flat() {
        let c = small(2000);
        let r = deer_curve(&c, &[6e-6, 12e-6, 20e-6]).unwrap();
        for v in r.column("echo_norm_off_res").unwrap() {
            assert!((v - 1.0).abs() < 0.01);
        }
        let on = r.column("echo_norm_on_res").unwrap();
        assert!(on[0] > on[1] && on[1] > on[2]);
    }

    #[test]
    fn lorentzian_filter_at_33mhz() {
        let a = lorentzian_amplitude(-33e6, 7636.6e6, 3000.0);
        assert!((a - 0.0386).abs() < 5e-4, "{a}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn even_in_couplings(ds in proptest::collection::vec(-5e4f64..5e4, 0..4), t in 0.0f64..3e-5) {
            let flips = vec![true; ds.len()];
            let neg: Vec<f64> = ds.iter().map(|d| -d).collect();
            let a = PartnerSet { couplings: ds.clone(), flipped: flips.clone() }.echo(t);
            let b = PartnerSet { couplings: neg, flipped: flips.clone() }.echo(t);
            prop_assert!((a - b).abs() < 1e-15);
            prop_assert!((-1.0..=1.0).contains(&a));
            prop_assert!((a - brute_force_echo(&ds, &flips, t, 34e-6)).abs() < 1e-12);
        }
    }
}
