// SPDX-License-Identifier: Apache-2.0

//! Frequency-domain ABCD model of cascaded transmission-line segments.
//!
//! The photonic-bandgap resonator is a cavity segment between two Bragg
//! mirrors of alternating low/high impedance sections. All segments are
//! lossless except the cavity, which carries the internal loss as an
//! attenuation constant `α = β / (2 Q_int)`.
//!
//! Coupling is reported as `β_c = Q_int / Q_ext`. For a symmetric two-port
//! the peak transmission is `β_c / (1 + β_c)`, which is how it is recovered
//! from a sweep.

use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{bisect, golden_max};
use crate::SPEED_OF_LIGHT;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSegment {
    /// Physical length in metres.
    pub length: f64,
    /// Characteristic impedance in ohms.
    pub z0: f64,
    /// Phase velocity in m/s.
    pub v_phase: f64,
    /// Share of the inductance per unit length that is kinetic.
    #[serde(default)]
    pub kinetic_fraction: f64,
}

impl LineSegment {
    pub fn new(length: f64, z0: f64, v_phase: f64, kinetic_fraction: f64) -> Result<Self> {
        let seg = Self {
            length,
            z0,
            v_phase,
            kinetic_fraction,
        };
        seg.validate()?;
        Ok(seg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0 && self.length.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "segment length must be positive, got {}",
                self.length
            )));
        }
        if !(self.z0 > 0.0 && self.z0.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "segment impedance must be positive, got {}",
                self.z0
            )));
        }
        if !(self.v_phase > 0.0 && self.v_phase <= SPEED_OF_LIGHT) {
            return Err(Error::InvalidInput(format!(
                "phase velocity must lie in (0, c], got {}",
                self.v_phase
            )));
        }
        if !(0.0..1.0).contains(&self.kinetic_fraction) {
            return Err(Error::InvalidInput(format!(
                "kinetic fraction must lie in [0, 1), got {}",
                self.kinetic_fraction
            )));
        }
        Ok(())
    }

    pub fn beta(&self, f: f64) -> f64 {
        2.0 * std::f64::consts::PI * f / self.v_phase
    }

    /// Frequency at which the segment is half a wavelength long.
    pub fn half_wave_frequency(&self) -> f64 {
        self.v_phase / (2.0 * self.length)
    }

    /// The same segment with its kinetic inductance multiplied by `scale`.
    ///
    /// `z0` and `v_phase` describe the total inductance, so only the kinetic
    /// share is rescaled: `L' = L (1 - k + k s)`.
    pub fn with_kinetic_scale(&self, scale: f64) -> Self {
        let ratio = 1.0 - self.kinetic_fraction + self.kinetic_fraction * scale;
        Self {
            length: self.length,
            z0: self.z0 * ratio.sqrt(),
            v_phase: self.v_phase / ratio.sqrt(),
            kinetic_fraction: self.kinetic_fraction * scale / ratio,
        }
    }
}

/// 2×2 complex transfer matrix `[[A, B], [C, D]]`.
pub type Abcd = [[Complex64; 2]; 2];

pub const IDENTITY: Abcd = [
    [Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)],
    [Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0)],
];

/// Lossless line: `A = D = cos βl`, `B = jZ₀ sin βl`, `C = j sin βl / Z₀`.
pub fn abcd_segment(seg: &LineSegment, f: f64) -> Abcd {
    let bl = seg.beta(f) * seg.length;
    let (s, c) = bl.sin_cos();
    [
        [Complex64::new(c, 0.0), Complex64::new(0.0, seg.z0 * s)],
        [Complex64::new(0.0, s / seg.z0), Complex64::new(c, 0.0)],
    ]
}

/// Line with attenuation `α = β/(2Q)`: `A = D = cosh γl`, `B = Z₀ sinh γl`,
/// `C = sinh γl / Z₀`.
pub fn abcd_lossy(seg: &LineSegment, f: f64, q_internal: f64) -> Abcd {
    let beta = seg.beta(f);
    let gl = Complex64::new(beta / (2.0 * q_internal), beta) * seg.length;
    let (sh, ch) = (gl.sinh(), gl.cosh());
    [[ch, sh * seg.z0], [sh / seg.z0, ch]]
}

pub fn cascade(a: &Abcd, b: &Abcd) -> Abcd {
    let mut out = [[Complex64::new(0.0, 0.0); 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

pub fn determinant(m: &Abcd) -> Complex64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

/// Scattering parameters referenced to a real port impedance.
#[derive(Debug, Clone, Copy)]
pub struct SParams {
    pub s11: Complex64,
    pub s12: Complex64,
    pub s21: Complex64,
    pub s22: Complex64,
}

pub fn abcd_to_s(m: &Abcd, z_port: f64) -> SParams {
    let [[a, b], [c, d]] = *m;
    let bz = b / z_port;
    let cz = c * z_port;
    let den = a + bz + cz + d;
    SParams {
        s11: (a + bz - cz - d) / den,
        s12: 2.0 * (a * d - b * c) / den,
        s21: 2.0 / den,
        s22: (-a + bz - cz + d) / den,
    }
}

fn default_port() -> f64 {
    50.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub segments: Vec<LineSegment>,
    #[serde(default = "default_port")]
    pub port_impedance: f64,
    /// Internal quality factor folded into the cavity segment.
    #[serde(default)]
    pub internal_q: Option<f64>,
    /// Index of the lossy cavity segment; defaults to the middle segment.
    #[serde(default)]
    pub cavity_index: Option<usize>,
}

impl NetworkSpec {
    pub fn new(segments: Vec<LineSegment>) -> Result<Self> {
        let net = Self {
            segments,
            port_impedance: 50.0,
            internal_q: None,
            cavity_index: None,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::InvalidInput("network has no segments".into()));
        }
        for (k, s) in self.segments.iter().enumerate() {
            s.validate().map_err(|e| e.context(format!("segment {k}")))?;
        }
        if !(self.port_impedance > 0.0) {
            return Err(Error::InvalidInput("port impedance must be positive".into()));
        }
        if let Some(q) = self.internal_q {
            if !(q > 0.0) {
                return Err(Error::InvalidInput("internal_q must be positive".into()));
            }
        }
        if let Some(ci) = self.cavity_index {
            if ci >= self.segments.len() {
                return Err(Error::InvalidInput(format!("cavity_index {ci} out of range")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let net: Self = serde_json::from_str(text)?;
        net.validate()?;
        Ok(net)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn cavity(&self) -> usize {
        self.cavity_index.unwrap_or(self.segments.len() / 2)
    }

    pub fn with_internal_q(&self, q: Option<f64>) -> Self {
        Self {
            internal_q: q,
            ..self.clone()
        }
    }

    /// Rescales the kinetic inductance of every segment so that all
    /// resonances move by the factor `ratio` (`f' = ratio · f`). Segments
    /// without kinetic inductance are left unchanged.
    pub fn with_frequency_scale(&self, ratio: f64) -> Self {
        let r = 1.0 / (ratio * ratio);
        let segments = self
            .segments
            .iter()
            .map(|s| {
                if s.kinetic_fraction > 0.0 {
                    s.with_kinetic_scale(1.0 + (r - 1.0) / s.kinetic_fraction)
                } else {
                    *s
                }
            })
            .collect();
        Self {
            segments,
            ..self.clone()
        }
    }

    /// True when segment `k` matches segment `n-1-k` for every `k`.
    pub fn is_mirror_symmetric(&self, rel_tol: f64) -> bool {
        let n = self.segments.len();
        let close = |a: f64, b: f64| (a - b).abs() <= rel_tol * a.abs().max(b.abs());
        (0..n / 2).all(|k| {
            let (a, b) = (&self.segments[k], &self.segments[n - 1 - k]);
            close(a.length, b.length) && close(a.z0, b.z0) && close(a.v_phase, b.v_phase)
        })
    }

    pub fn abcd(&self, f: f64) -> Abcd {
        let cav = self.cavity();
        self.segments.iter().enumerate().fold(IDENTITY, |acc, (k, seg)| {
            let m = match self.internal_q {
                Some(q) if k == cav => abcd_lossy(seg, f, q),
                _ => abcd_segment(seg, f),
            };
            cascade(&acc, &m)
        })
    }

    pub fn s_params(&self, f: f64) -> SParams {
        abcd_to_s(&self.abcd(f), self.port_impedance)
    }

    /// Mismatch function of a lossless symmetric network: zero exactly where
    /// the input impedance equals the port impedance (unit transmission).
    /// `1/|S21|² = 1 + (h/2)²` for such networks.
    fn lossless_mismatch(&self, f: f64) -> f64 {
        let m = self.with_internal_q(None).abcd(f);
        m[0][1].im / self.port_impedance - m[1][0].im * self.port_impedance
    }

    /// Builds a symmetric Bragg-mirror resonator: `periods` × (low, high)
    /// sections, the cavity, then the mirror image.
    pub fn pbg(
        template: &PbgTemplate,
        mirror_length: f64,
        cavity_length: f64,
        internal_q: Option<f64>,
    ) -> Result<Self> {
        let low = LineSegment::new(
            mirror_length,
            template.z_low,
            template.v_phase,
            template.kinetic_fraction,
        )?;
        let high = LineSegment::new(
            mirror_length,
            template.z_high,
            template.v_phase,
            template.kinetic_fraction,
        )?;
        let cavity = LineSegment::new(
            cavity_length,
            template.z_cavity,
            template.v_phase,
            template.kinetic_fraction,
        )?;
        let mut segments = Vec::with_capacity(4 * template.periods + 1);
        for _ in 0..template.periods {
            segments.push(low);
            segments.push(high);
        }
        let cavity_index = segments.len();
        segments.push(cavity);
        for _ in 0..template.periods {
            segments.push(high);
            segments.push(low);
        }
        let net = Self {
            segments,
            port_impedance: template.port_impedance,
            internal_q,
            cavity_index: Some(cavity_index),
        };
        net.validate()?;
        Ok(net)
    }
}

pub fn s21(net: &NetworkSpec, f: f64) -> Complex64 {
    net.s_params(f).s21
}

/// Evaluates S21 at every frequency (in parallel, order preserved).
pub fn sweep(net: &NetworkSpec, freqs: &[f64]) -> Vec<Complex64> {
    freqs.par_iter().map(|&f| s21(net, f)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResonanceSummary {
    pub f_res: f64,
    pub q_loaded: f64,
    pub coupling: f64,
    pub peak_s21_mag: f64,
}

/// Locates the single transmission peak of `net` inside `band` with the
/// cavity loss set by `loss_q_internal`.
pub fn find_resonance(net: &NetworkSpec, band: (f64, f64), loss_q_internal: f64) -> Result<ResonanceSummary> {
    if !(loss_q_internal > 0.0) {
        return Err(Error::InvalidInput("loss_q_internal must be positive".into()));
    }
    let lossy = net.with_internal_q(Some(loss_q_internal));
    analyze_peak(|f| s21(&lossy, f).norm(), band, loss_q_internal)
}

/// Peak analysis of an arbitrary transmission magnitude `mag(f)`.
///
/// A coarse grid with step `f/(20 q_hint)` is scanned for local maxima; the
/// single surviving peak is refined by golden-section search and its
/// half-power points by bisection.
pub fn analyze_peak<F>(mag: F, band: (f64, f64), q_hint: f64) -> Result<ResonanceSummary>
where
    F: Fn(f64) -> f64 + Sync,
{
    let (lo, hi) = band;
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::InvalidInput(format!("invalid band ({lo}, {hi})")));
    }
    let step_target = 0.5 * (lo + hi) / (20.0 * q_hint.max(1.0));
    let n = (((hi - lo) / step_target).ceil() as usize).clamp(64, 2_000_000);
    let step = (hi - lo) / n as f64;
    let freqs: Vec<f64> = (0..=n).map(|k| lo + step * k as f64).collect();
    let m: Vec<f64> = freqs.par_iter().map(|&f| mag(f)).collect();

    let global = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let floor = m.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(global > 0.0) || global - floor <= 1e-9 * global {
        return Err(Error::NoPeakFound);
    }
    let maxima: Vec<usize> = (1..n).filter(|&k| m[k] > m[k - 1] && m[k] >= m[k + 1]).collect();
    let strong: Vec<usize> = maxima.iter().copied().filter(|&k| m[k] > 0.5 * global).collect();
    let k = match strong.as_slice() {
        [] => return Err(Error::NoPeakFound),
        [k] => *k,
        many => return Err(Error::MultiplePeaks { count: many.len() }),
    };

    let (f_res, peak) = golden_max(&mag, freqs[k - 1], freqs[k + 1], 1e-3);
    let half = peak / std::f64::consts::SQRT_2;
    let edge = |dir: f64| -> Result<f64> {
        let mut inner = f_res;
        let mut outer = f_res + dir * step;
        while mag(outer) > half {
            inner = outer;
            outer += dir * step;
            if outer <= lo - step || outer >= hi + step {
                return Err(Error::InvalidInput(
                    "band does not contain the half-power points".into(),
                ));
            }
        }
        bisect(|f| mag(f) - half, inner, outer, 1e-3).ok_or(Error::NoPeakFound)
    };
    let f_lo = edge(-1.0)?;
    let f_hi = edge(1.0)?;
    let q_loaded = f_res / (f_hi - f_lo);
    let coupling = if peak >= 1.0 - 1e-12 {
        f64::INFINITY
    } else {
        peak / (1.0 - peak)
    };
    Ok(ResonanceSummary {
        f_res,
        q_loaded,
        coupling,
        peak_s21_mag: peak,
    })
}

/// Fixed design inputs of a stepped-impedance resonator. The high-impedance
/// value and the cavity loss are the calibration unknowns; `z_high` here is
/// only the upper end of the search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PbgTemplate {
    pub z_low: f64,
    pub z_high: f64,
    pub z_cavity: f64,
    pub periods: usize,
    pub v_phase: f64,
    pub kinetic_fraction: f64,
    pub port_impedance: f64,
}

impl Default for PbgTemplate {
    fn default() -> Self {
        Self {
            z_low: 35.0,
            z_high: 137.0,
            z_cavity: 50.0,
            periods: 4,
            // sapphire CPW, effective permittivity ≈ 6.2
            v_phase: 1.2e8,
            kinetic_fraction: 0.2,
            port_impedance: 50.0,
        }
    }
}

/// Calibration targets for [`calibrate_pbg`].
#[derive(Debug, Clone, Copy)]
pub struct PbgTargets {
    pub f_res: f64,
    pub q_loaded: f64,
    pub coupling: f64,
}

/// Lossless external Q from the `|h| = 2` half-power points around `f`.
fn lossless_q(net: &NetworkSpec, f: f64) -> Result<f64> {
    let side = |dir: f64| -> Result<f64> {
        let mut step = f * 1e-7;
        let mut inner = f;
        let excess = |x: f64| net.lossless_mismatch(x).abs() - 2.0;
        while excess(f + dir * step) < 0.0 {
            inner = f + dir * step;
            step *= 1.5;
            if step > 0.2 * f {
                return Err(Error::InvalidInput("half-power point not found".into()));
            }
        }
        bisect(excess, inner, f + dir * step, 1e-4).ok_or(Error::NoPeakFound)
    };
    let (a, b) = (side(-1.0)?, side(1.0)?);
    Ok(f / (b - a))
}

/// Builds quarter-wave mirrors around a half-wave cavity at `f_res`, then
/// solves for the high-impedance value that gives the lossless external Q
/// `Q_L (1 + β)/β` and for the cavity loss that gives the loaded Q.
///
/// Quarter-wave sections make each mirror stack diagonal at `f_res`, so the
/// two stacks cancel and the mode sits exactly at the target whatever the
/// impedance contrast.
pub fn calibrate_pbg(template: &PbgTemplate, targets: PbgTargets) -> Result<NetworkSpec> {
    let f = targets.f_res;
    let quarter = template.v_phase / (4.0 * f);
    let q_ext_target = targets.q_loaded * (1.0 + targets.coupling) / targets.coupling;
    let build = |z_high: f64| NetworkSpec::pbg(&PbgTemplate { z_high, ..*template }, quarter, 2.0 * quarter, None);

    // external Q grows monotonically with the contrast z_high/z_low
    let q_err = |z_high: f64| -> f64 {
        build(z_high)
            .and_then(|n| lossless_q(&n, f))
            .map(|q| q.ln() - q_ext_target.ln())
            .unwrap_or(f64::NAN)
    };
    let unreachable = || {
        Error::InvalidInput(format!(
            "external Q {q_ext_target:.0} is not reachable with z_high ≤ {:.1} Ω",
            template.z_high
        ))
    };
    let mut hi = template.z_high;
    if !(q_err(hi) > 0.0) {
        return Err(unreachable());
    }
    // walk the contrast down until the Q drops below target
    let mut lo = hi;
    loop {
        lo = template.z_low + 0.9 * (lo - template.z_low);
        if lo - template.z_low < 1e-3 * template.z_low {
            return Err(unreachable());
        }
        let e = q_err(lo);
        if e < 0.0 {
            break;
        }
        if e > 0.0 {
            hi = lo;
        }
    }
    let z_high = bisect(q_err, lo, hi, 1e-10).ok_or_else(|| Error::InvalidInput("mirror calibration failed".into()))?;
    let lossless = build(z_high)?;

    // the mirrors store part of the energy, so the folded cavity Q sits
    // below Q_L (1 + β)
    let band = (f * (1.0 - 10.0 / targets.q_loaded), f * (1.0 + 10.0 / targets.q_loaded));
    let ql_err = |q_int: f64| -> f64 {
        find_resonance(&lossless, band, q_int)
            .map(|r| r.q_loaded.ln() - targets.q_loaded.ln())
            .unwrap_or(f64::NAN)
    };
    let q_guess = targets.q_loaded * (1.0 + targets.coupling);
    let q_int = bisect(ql_err, 0.3 * q_guess, 3.0 * q_guess, 1e-6 * q_guess)
        .ok_or_else(|| Error::InvalidInput("internal Q calibration failed to bracket".into()))?;
    Ok(lossless.with_internal_q(Some(q_int)))
}

/// CSV rows `freq_hz, s21_re, s21_im, s21_mag_db`.
pub fn sweep_rows(net: &NetworkSpec, freqs: &[f64]) -> Vec<Vec<f64>> {
    sweep(net, freqs)
        .into_iter()
        .zip(freqs)
        .map(|(s, &f)| vec![f, s.re, s.im, 20.0 * s.norm().log10()])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const V: f64 = 1.2e8;

    fn seg(length: f64, z0: f64) -> LineSegment {
        LineSegment::new(length, z0, V, 0.0).unwrap()
    }

    #[test]
    fn zero_length_is_identity() {
        let s = LineSegment {
            length: 0.0,
            z0: 50.0,
            v_phase: V,
            kinetic_fraction: 0.0,
        };
        let m = abcd_segment(&s, 7e9);
        for i in 0..2 {
            for j in 0..2 {
                assert!((m[i][j] - IDENTITY[i][j]).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn quarter_wave_entries() {
        let f = 7e9;
        let s = seg(V / (4.0 * f), 35.0);
        let m = abcd_segment(&s, f);
        assert!(m[0][0].norm() < 1e-12);
        assert!(m[1][1].norm() < 1e-12);
        assert!((m[0][1] - Complex64::new(0.0, 35.0)).norm() < 1e-10);
        assert!((m[1][0] - Complex64::new(0.0, 1.0 / 35.0)).norm() < 1e-12);
    }

    #[test]
    fn halves_cascade_to_whole() {
        let f = 7.3e9;
        let whole = seg(3.1e-3, 137.0);
        let half = seg(1.55e-3, 137.0);
        let prod = cascade(&abcd_segment(&half, f), &abcd_segment(&half, f));
        let direct = abcd_segment(&whole, f);
        for i in 0..2 {
            for j in 0..2 {
                assert!((prod[i][j] - direct[i][j]).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn matched_line_transmits_fully() {
        let net = NetworkSpec::new(vec![seg(1.234e-2, 50.0)]).unwrap();
        for f in [1e9, 5.5e9, 7.6366e9] {
            assert!((s21(&net, f).norm() - 1.0).abs() < 1e-12);
        }
    }

    /// Input impedance of a chain of quarter-wave sections terminated in the
    /// port impedance, by repeated `Z_in = Z_k² / Z_load`.
    fn quarter_wave_stack_transmission(impedances: &[f64], z_port: f64) -> f64 {
        let z_in = impedances.iter().rev().fold(z_port, |load, &zk| zk * zk / load);
        let gamma = (z_in - z_port) / (z_in + z_port);
        1.0 - gamma * gamma
    }

    #[test]
    fn mirror_stack_blocks_mid_gap() {
        let f = 7.6e9;
        let q = V / (4.0 * f);
        let zs: Vec<f64> = (0..8).map(|k| if k % 2 == 0 { 35.0 } else { 137.0 }).collect();
        let net = NetworkSpec::new(zs.iter().map(|&z| seg(q, z)).collect()).unwrap();
        let t = s21(&net, f).norm_sqr();
        let oracle = quarter_wave_stack_transmission(&zs, 50.0);
        assert!((t - oracle).abs() < 1e-9 * oracle.max(1e-30), "{t} vs {oracle}");
        assert!(t.sqrt() < 0.1);
    }

    #[test]
    fn half_wave_cavity_resonance() {
        let s = seg(8.0e-3, 137.0);
        let net = NetworkSpec::new(vec![s]).unwrap();
        let f_half = s.half_wave_frequency();
        let r = analyze_peak(|f| s21(&net, f).norm(), (0.55 * f_half, 1.45 * f_half), 2.0).unwrap();
        // a broad, flat-topped peak limits the golden search to about sqrt(eps)
        assert!((r.f_res / f_half - 1.0).abs() < 1e-7, "{} vs {}", r.f_res, f_half);
    }

    #[test]
    fn lorentzian_q_recovered() {
        let (f0, q) = (7.6366e9, 3000.0);
        let peak = 0.375;
        let lorentz = |f: f64| {
            let x = 2.0 * q * (f - f0) / f0;
            peak / (1.0 + x * x).sqrt()
        };
        let r = analyze_peak(lorentz, (f0 - 20e6, f0 + 20e6), q).unwrap();
        assert!((r.q_loaded / q - 1.0).abs() < 0.01, "{}", r.q_loaded);
        assert!((r.f_res - f0).abs() < 1e3);
        assert!((r.coupling - 0.6).abs() < 1e-6);
    }

    #[test]
    fn flat_band_has_no_peak() {
        let err = analyze_peak(|_| 0.5, (7e9, 8e9), 3000.0).unwrap_err();
        assert!(matches!(err, Error::NoPeakFound));
    }

    #[test]
    fn two_peaks_are_rejected() {
        let two = |f: f64| {
            let a = 1.0 / (1.0 + ((f - 7.0e9) / 1e6).powi(2));
            let b = 0.9 / (1.0 + ((f - 7.1e9) / 1e6).powi(2));
            a + b
        };
        let err = analyze_peak(two, (6.9e9, 7.2e9), 3000.0).unwrap_err();
        assert!(matches!(err, Error::MultiplePeaks { count: 2 }));
    }

    #[test]
    fn invalid_segments_rejected() {
        assert!(LineSegment::new(-1.0, 50.0, V, 0.0).is_err());
        assert!(LineSegment::new(1e-3, 0.0, V, 0.0).is_err());
        assert!(LineSegment::new(1e-3, 50.0, 4e8, 0.0).is_err());
        assert!(LineSegment::new(1e-3, 50.0, V, 1.0).is_err());
        assert!(NetworkSpec::new(vec![]).is_err());
    }

    #[test]
    fn kinetic_scale_shifts_half_wave_mode() {
        let s = LineSegment::new(8e-3, 50.0, V, 0.3).unwrap();
        let biased = s.with_kinetic_scale(1.1);
        let expected = s.half_wave_frequency() / (1.0 + 0.3 * 0.1f64).sqrt();
        assert!((biased.half_wave_frequency() / expected - 1.0).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn abcd_has_unit_determinant(len in 1e-5f64..5e-2, z0 in 5.0f64..300.0, v in 3e7f64..2.9e8, f in 1e8f64..2e10) {
            let s = LineSegment::new(len, z0, v, 0.0).unwrap();
            let d = determinant(&abcd_segment(&s, f));
            prop_assert!((d - Complex64::new(1.0, 0.0)).norm() < 1e-12);
            let dl = determinant(&abcd_lossy(&s, f, 3000.0));
            prop_assert!((dl - Complex64::new(1.0, 0.0)).norm() < 1e-10);
        }

        #[test]
        fn symmetric_network_is_reciprocal(l1 in 1e-4f64..1e-2, l2 in 1e-4f64..1e-2, f in 1e9f64..1e10) {
            let a = seg(l1, 35.0);
            let b = seg(l2, 137.0);
            let net = NetworkSpec::new(vec![a, b, a]).unwrap();
            let s = net.s_params(f);
            prop_assert!((s.s21 - s.s12).norm() < 1e-10);
            prop_assert!(s.s21.norm() <= 1.0 + 1e-12);
            prop_assert!(s.s21.norm() > 0.0);
        }

        #[test]
        fn only_total_inductance_matters(kf in 0.0f64..0.9, f in 1e9f64..1e10) {
            // z0 and v_phase are totals, so the kinetic share alone leaves S21 alone
            let a = LineSegment::new(3e-3, 80.0, V, kf).unwrap();
            let b = LineSegment::new(3e-3, 80.0, V, 0.0).unwrap();
            let na = NetworkSpec::new(vec![a, seg(2e-3, 35.0)]).unwrap();
            let nb = NetworkSpec::new(vec![b, seg(2e-3, 35.0)]).unwrap();
            prop_assert!((s21(&na, f) - s21(&nb, f)).norm() < 1e-14);
        }
    }
}
