// SPDX-License-Identifier: Apache-2.0

//! Bias-current schedules, the first-order bias-circuit lag and the driven
//! single-mode cavity used to time resonator retuning.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinet::{delta_f, invert_delta_f, DeviceTuningParams};
use crate::numeric::bisect;

/// Length of an element standing in for a step that never switches off.
pub const STEP_HOLD: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasElement {
    pub t_start: f64,
    pub t_end: f64,
    pub amplitude: f64,
}

impl BiasElement {
    pub fn new(t_start: f64, t_end: f64, amplitude: f64) -> Self {
        Self {
            t_start,
            t_end,
            amplitude,
        }
    }
}

mod lag_ns {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(v * 1e9)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        f64::deserialize(d).map(|ns| ns * 1e-9)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSchedule {
    pub elements: Vec<BiasElement>,
    /// Seconds in memory, nanoseconds on disk.
    #[serde(rename = "lag_ns", with = "lag_ns")]
    pub lag_time_constant: f64,
}

/// Unit response of the lag to a step switched on at `t = 0`.
fn step_response(t: f64, lag: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if lag == 0.0 {
        1.0
    } else {
        -(-t / lag).exp_m1()
    }
}

/// Integral of [`step_response`] from 0 to `t`.
fn step_charge(t: f64, lag: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if lag == 0.0 {
        t
    } else {
        t + lag * (-t / lag).exp_m1()
    }
}

impl BiasSchedule {
    pub fn new(elements: Vec<BiasElement>, lag: f64) -> Result<Self> {
        let s = Self {
            elements,
            lag_time_constant: lag,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn empty(lag: f64) -> Self {
        Self {
            elements: Vec::new(),
            lag_time_constant: lag,
        }
    }

    /// A single step switched on at `t_start` and held.
    pub fn step(t_start: f64, amplitude: f64, lag: f64) -> Result<Self> {
        Self::new(vec![BiasElement::new(t_start, t_start + STEP_HOLD, amplitude)], lag)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lag_time_constant >= 0.0 && self.lag_time_constant.is_finite()) {
            return Err(Error::InvalidInput("lag must be non-negative".into()));
        }
        let mut prev_end = 0.0;
        for (k, e) in self.elements.iter().enumerate() {
            if !(e.t_start >= 0.0 && e.t_end > e.t_start && e.amplitude.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "element {k} has an invalid window or amplitude"
                )));
            }
            if e.t_start < prev_end {
                return Err(Error::InvalidInput(format!("element {k} overlaps or is out of order")));
            }
            prev_end = e.t_end;
        }
        Ok(())
    }

    /// Rejects amplitudes at or above the device critical current.
    pub fn check_critical(&self, i_critical: f64) -> Result<()> {
        match self.elements.iter().find(|e| e.amplitude.abs() >= i_critical) {
            Some(e) => Err(Error::CriticalCurrentExceeded {
                current: e.amplitude,
                critical: i_critical,
            }),
            None => Ok(()),
        }
    }

    pub fn current_at(&self, t: f64) -> f64 {
        let lag = self.lag_time_constant;
        self.elements
            .iter()
            .take_while(|e| e.t_start < t)
            .map(|e| e.amplitude * (step_response(t - e.t_start, lag) - step_response(t - e.t_end, lag)))
            .sum()
    }

    /// `∫₀ᵗ i dt`, in closed form.
    pub fn charge_to(&self, t: f64) -> f64 {
        let lag = self.lag_time_constant;
        self.elements
            .iter()
            .take_while(|e| e.t_start < t)
            .map(|e| e.amplitude * (step_charge(t - e.t_start, lag) - step_charge(t - e.t_end, lag)))
            .sum()
    }

    pub fn charge_between(&self, a: f64, b: f64) -> f64 {
        self.charge_to(b) - self.charge_to(a)
    }

    pub fn max_abs_amplitude(&self) -> f64 {
        self.elements.iter().map(|e| e.amplitude.abs()).fold(0.0, f64::max)
    }

    /// Amplitude of the element in force at `t` (0 between elements).
    pub fn drive_at(&self, t: f64) -> f64 {
        self.elements
            .iter()
            .find(|e| e.t_start <= t && t < e.t_end)
            .map_or(0.0, |e| e.amplitude)
    }

    pub fn first_start(&self) -> f64 {
        self.elements.first().map_or(0.0, |e| e.t_start)
    }
}

/// Free-function form of [`BiasSchedule::current_at`].
pub fn current_at(sched: &BiasSchedule, t: f64) -> f64 {
    sched.current_at(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CavityTrace {
    pub times: Vec<f64>,
    /// `|a|`, normalised so a static resonant cavity gives 1.
    pub transmitted_amplitude: Vec<f64>,
    pub f_res_of_t: Vec<f64>,
    pub probe_f: f64,
}

impl CavityTrace {
    /// CSV rows `time_ns, f_res_mhz, transmitted_amp`.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.times
            .iter()
            .zip(&self.f_res_of_t)
            .zip(&self.transmitted_amplitude)
            .map(|((t, f), a)| vec![t * 1e9, f * 1e-6, *a])
            .collect()
    }
}

/// Energy decay rate `κ = 2π f₀ / Q`.
pub fn kappa(dev: &DeviceTuningParams) -> f64 {
    2.0 * std::f64::consts::PI * dev.f0 / dev.q_loaded
}

/// Integrates `a' = −(κ/2 + iΔ(t)) a + κ/2` with RK4 from the steady state
/// at `t = 0`, where `Δ = 2π (f_res(t) − probe_f)`.
pub fn cavity_trace(
    probe_f: f64,
    sched: &BiasSchedule,
    dev: &DeviceTuningParams,
    duration: f64,
) -> Result<CavityTrace> {
    sched.validate()?;
    sched.check_critical(dev.i_critical)?;
    if !(duration > 0.0) {
        return Err(Error::InvalidInput("duration must be positive".into()));
    }
    let k = kappa(dev);
    let two_pi = 2.0 * std::f64::consts::PI;
    let f_res = |t: f64| -> Result<f64> { Ok(dev.f0 + delta_f(sched.current_at(t), dev)?) };

    let worst_shift = delta_f(sched.max_abs_amplitude(), dev)?;
    let max_detuning = two_pi * ((dev.f0 - probe_f).abs() + worst_shift.abs());
    let lag = sched.lag_time_constant;
    let mut dt = if lag > 0.0 { lag.min(1.0 / k) } else { 1.0 / k } / 20.0;
    if max_detuning > 0.0 {
        dt = dt.min(0.1 / max_detuning);
    }
    let n = (duration / dt).ceil() as usize;
    let dt = duration / n as f64;

    let half_k = 0.5 * k;
    let rhs = |a: Complex64, f: f64| -> Complex64 {
        let det = two_pi * (f - probe_f);
        -Complex64::new(half_k, det) * a + half_k
    };
    let f_start = f_res(0.0)?;
    let mut a = Complex64::new(half_k, 0.0) / Complex64::new(half_k, two_pi * (f_start - probe_f));

    let mut times = Vec::with_capacity(n + 1);
    let mut amps = Vec::with_capacity(n + 1);
    let mut freqs = Vec::with_capacity(n + 1);
    times.push(0.0);
    amps.push(a.norm());
    freqs.push(f_start);
    let mut f_now = f_start;
    for step in 0..n {
        let t = step as f64 * dt;
        let f_mid = f_res(t + 0.5 * dt)?;
        let f_next = f_res(t + dt)?;
        let k1 = rhs(a, f_now);
        let k2 = rhs(a + k1 * (0.5 * dt), f_mid);
        let k3 = rhs(a + k2 * (0.5 * dt), f_mid);
        let k4 = rhs(a + k3 * dt, f_next);
        a += (k1 + 2.0 * k2 + 2.0 * k3 + k4) * (dt / 6.0);
        f_now = f_next;
        times.push(t + dt);
        amps.push(a.norm());
        freqs.push(f_next);
    }
    Ok(CavityTrace {
        times,
        transmitted_amplitude: amps,
        f_res_of_t: freqs,
        probe_f,
    })
}

/// First time after `t_ref` at which transmitted power has covered half of
/// its rise from the value at `t_ref` to the trace maximum, linearly
/// interpolated between samples.
pub fn arrival_time(trace: &CavityTrace, t_ref: f64) -> Option<f64> {
    let start = trace.times.iter().position(|&t| t >= t_ref)?;
    let p: Vec<f64> = trace.transmitted_amplitude[start..].iter().map(|a| a * a).collect();
    let p_max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let threshold = 0.5 * (p[0] + p_max);
    if p_max <= p[0] {
        return None;
    }
    let k = p.iter().position(|&x| x >= threshold)?;
    if k == 0 {
        return Some(trace.times[start]);
    }
    let (t0, t1) = (trace.times[start + k - 1], trace.times[start + k]);
    let frac = (threshold - p[k - 1]) / (p[k] - p[k - 1]);
    Some(t0 + frac * (t1 - t0))
}

/// Default observation window after the first element switches on.
pub fn settle_window(dev: &DeviceTuningParams, lag: f64) -> f64 {
    30.0 * lag + 40.0 / kappa(dev)
}

/// Delay from the first element switching on until the cavity, probed at
/// `f0 + target_delta_f`, arrives on resonance. Targets up to half a
/// linewidth beyond the settled shift still count as reachable.
pub fn tuning_time(sched: &BiasSchedule, dev: &DeviceTuningParams, target_delta_f: f64) -> Result<f64> {
    let reach = delta_f(sched.max_abs_amplitude(), dev)?;
    let tolerance = 0.5 * dev.f0 / dev.q_loaded;
    if target_delta_f > 0.0 || target_delta_f < reach - tolerance {
        return Err(Error::TargetUnreachable {
            target: target_delta_f,
            max: reach,
        });
    }
    let t_ref = sched.first_start();
    let duration = t_ref + settle_window(dev, sched.lag_time_constant);
    let trace = cavity_trace(dev.f0 + target_delta_f, sched, dev, duration)?;
    let t = arrival_time(&trace, t_ref).unwrap_or(t_ref);
    Ok(t - t_ref)
}

/// Step schedule whose settled current produces `target_delta_f`.
pub fn step_for_target(target_delta_f: f64, dev: &DeviceTuningParams, lag: f64) -> Result<BiasSchedule> {
    let i = invert_delta_f(target_delta_f, dev)?;
    BiasSchedule::step(0.0, i, lag)
}

/// Lag at which a `current` step reaches the `target_delta_f` probe after
/// `time`. Tuning time grows monotonically with the lag.
pub fn calibrate_lag(dev: &DeviceTuningParams, current: f64, target_delta_f: f64, time: f64) -> Result<f64> {
    let at = |lag: f64| BiasSchedule::step(0.0, current, lag).and_then(|s| tuning_time(&s, dev, target_delta_f));
    if at(0.0)? > time {
        return Err(Error::InvalidInput(format!(
            "cavity alone needs longer than {time:e} s"
        )));
    }
    let err = |lag: f64| at(lag).map_or(f64::NAN, |t| t - time);
    bisect(err, 0.0, time, 1e-13).ok_or_else(|| Error::InvalidInput("lag calibration failed to bracket".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Chirp {
    pub f_start: f64,
    pub f_end: f64,
    pub duration: f64,
}

impl Chirp {
    pub fn frequency_at(&self, t_rel: f64) -> f64 {
        self.f_start + (self.f_end - self.f_start) * (t_rel / self.duration).clamp(0.0, 1.0)
    }
}

/// Time at which a tracking schedule expects the chirp to begin.
pub fn chirp_lead_time(lag: f64) -> f64 {
    if lag > 0.0 {
        20.0 * lag
    } else {
        0.0
    }
}

/// Piecewise-constant drive whose lag-filtered current makes `f_res` follow
/// the chirp. Each piece is pre-compensated as `u = i + τ di/dt`.
pub fn chirp_tracking_schedule(chirp: &Chirp, dev: &DeviceTuningParams, lag: f64) -> Result<BiasSchedule> {
    if !(chirp.duration > 0.0) {
        return Err(Error::InvalidInput("chirp duration must be positive".into()));
    }
    let rate = (chirp.f_end - chirp.f_start).abs() / chirp.duration;
    let limit = if lag > 0.0 {
        dev.max_shift().abs() / lag
    } else {
        f64::INFINITY
    };
    if rate > limit {
        return Err(Error::SlewTooFast { required: rate, limit });
    }
    let i_of = |t_rel: f64| invert_delta_f(chirp.frequency_at(t_rel) - dev.f0, dev);
    let i0 = i_of(0.0)?;
    i_of(chirp.duration)?;

    let t0 = chirp_lead_time(lag);
    let pieces = if lag > 0.0 {
        ((chirp.duration / (0.5 * lag)).ceil() as usize).clamp(1, 20_000)
    } else {
        64
    };
    let h = chirp.duration / pieces as f64;
    let mut elements: Vec<BiasElement> = Vec::with_capacity(pieces + 1);
    fn push(elements: &mut Vec<BiasElement>, s: f64, e: f64, u: f64) {
        match elements.last_mut() {
            Some(last) if last.amplitude == u && last.t_end == s => last.t_end = e,
            _ => elements.push(BiasElement::new(s, e, u)),
        }
    }
    if t0 > 0.0 {
        push(&mut elements, 0.0, t0, i0);
    }
    for k in 0..pieces {
        let a = k as f64 * h;
        let b = if k + 1 == pieces {
            chirp.duration
        } else {
            (k + 1) as f64 * h
        };
        let (ia, ib) = (i_of(a)?, i_of(b)?);
        let mid = 0.5 * (ia + ib);
        let slope = (ib - ia) / h;
        let u = mid + lag * slope;
        if u.abs() >= dev.i_critical {
            return Err(Error::SlewTooFast {
                required: rate,
                limit: rate * dev.i_critical / u.abs(),
            });
        }
        push(&mut elements, t0 + a, t0 + b, u);
    }
    let hold = elements.last().map_or(0.0, |e| e.amplitude);
    push(
        &mut elements,
        t0 + chirp.duration,
        t0 + chirp.duration + STEP_HOLD,
        hold,
    );
    BiasSchedule::new(elements, lag)
}

/// Largest `|f_res(t) − f_chirp(t)|` over the chirp, sampled every `dt`.
pub fn tracking_error(sched: &BiasSchedule, dev: &DeviceTuningParams, chirp: &Chirp, dt: f64) -> Result<f64> {
    let t0 = chirp_lead_time(sched.lag_time_constant);
    let n = (chirp.duration / dt).ceil() as usize;
    let mut worst: f64 = 0.0;
    for k in 0..=n {
        let tr = (k as f64 * dt).min(chirp.duration);
        let f = dev.f0 + delta_f(sched.current_at(t0 + tr), dev)?;
        worst = worst.max((f - chirp.frequency_at(tr)).abs());
    }
    Ok(worst)
}
