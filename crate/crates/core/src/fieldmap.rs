// SPDX-License-Identifier: Apache-2.0

//! Static bias field and microwave field over the CPW cross-section.
//!
//! Coordinates: current flows along x, `y` is the in-plane transverse
//! coordinate (0 at the pin centre) and `z` the height above the film.
//! Each conductor is a thin strip of uniform sheet current at `z = 0`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::biasdyn::{BiasElement, BiasSchedule};
use crate::error::{Error, Result};
use crate::MU0;

/// Static field used when converting misalignment into a resonance shift.
pub const REFERENCE_B0: f64 = 0.274_78;

fn default_epi() -> f64 {
    2e-6
}
fn default_implant() -> f64 {
    200e-9
}
fn default_anchor_b1() -> f64 {
    0.2e-6
}
fn default_anchor_dbm() -> f64 {
    -15.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpwGeometry {
    pub center_width: f64,
    pub gap: f64,
    /// Width of each ground plane; `None` means ten centre widths.
    #[serde(default)]
    pub ground_width: Option<f64>,
    pub film_thickness: f64,
    pub sample_standoff: f64,
    #[serde(default = "default_epi")]
    pub epi_thickness: f64,
    #[serde(default = "default_implant")]
    pub implant_depth: f64,
    /// B₁ at the reference point for the anchor power.
    #[serde(default = "default_anchor_b1")]
    pub b1_anchor: f64,
    #[serde(default = "default_anchor_dbm")]
    pub b1_anchor_dbm: f64,
}

impl CpwGeometry {
    /// Defaults for everything but the pin width.
    pub fn with_center_width(center_width: f64) -> Self {
        Self {
            center_width,
            gap: 2e-6,
            ground_width: None,
            film_thickness: 20e-9,
            sample_standoff: 0.5e-6,
            epi_thickness: default_epi(),
            implant_depth: default_implant(),
            b1_anchor: default_anchor_b1(),
            b1_anchor_dbm: default_anchor_dbm(),
        }
    }

    pub fn ground_width(&self) -> f64 {
        self.ground_width.unwrap_or(10.0 * self.center_width)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [
            ("center_width", self.center_width),
            ("gap", self.gap),
            ("ground_width", self.ground_width()),
            ("film_thickness", self.film_thickness),
            ("sample_standoff", self.sample_standoff),
            ("epi_thickness", self.epi_thickness),
            ("implant_depth", self.implant_depth),
            ("b1_anchor", self.b1_anchor),
        ];
        for (name, v) in vals {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// `(y_left, y_right, current share)` for pin and both grounds.
    fn strips(&self) -> [(f64, f64, f64); 3] {
        let (w, g, gw) = (self.center_width, self.gap, self.ground_width());
        [
            (-w / 2.0, w / 2.0, 1.0),
            (w / 2.0 + g, w / 2.0 + g + gw, -0.5),
            (-w / 2.0 - g - gw, -w / 2.0 - g, -0.5),
        ]
    }

    /// Epi-layer mid-height above the pin centre.
    pub fn reference_point(&self) -> (f64, f64) {
        (0.0, self.sample_standoff + 0.5 * self.epi_thickness)
    }
}

/// Field `(B_y, B_z)` of an isolated thin strip on `[a, b]` carrying current
/// `current` along +x.
pub fn isolated_strip(a: f64, b: f64, current: f64, (y, z): (f64, f64)) -> (f64, f64) {
    let k = current / (b - a);
    let by = -(MU0 * k / (2.0 * std::f64::consts::PI)) * (((y - a) / z).atan() - ((y - b) / z).atan());
    let bz = (MU0 * k / (4.0 * std::f64::consts::PI)) * (((y - a).powi(2) + z * z) / ((y - b).powi(2) + z * z)).ln();
    (by, bz)
}

/// Bias field per ampere of pin current; the grounds return half each.
pub fn strip_field(geom: &CpwGeometry, point: (f64, f64)) -> (f64, f64) {
    geom.strips().iter().fold((0.0, 0.0), |(by, bz), &(a, b, share)| {
        let (dy, dz) = isolated_strip(a, b, share, point);
        (by + dy, bz + dz)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldSample {
    pub position: (f64, f64),
    /// `(B_y, B_z)` in T/A.
    pub b_bias_per_amp: (f64, f64),
    pub b1_per_sqrt_watt: f64,
}

impl FieldSample {
    pub fn b1_at(&self, power_dbm: f64) -> f64 {
        self.b1_per_sqrt_watt * crate::units::dbm_to_watts(power_dbm).sqrt()
    }
}

/// B₁ per √W at `point`, shaped like the pin-current field and scaled to
/// the anchor value at the reference point.
pub fn b1_per_sqrt_watt(geom: &CpwGeometry, point: (f64, f64)) -> f64 {
    let norm = |p| {
        let (by, bz) = strip_field(geom, p);
        by.hypot(bz)
    };
    let anchor = geom.b1_anchor / crate::units::dbm_to_watts(geom.b1_anchor_dbm).sqrt();
    anchor * norm(point) / norm(geom.reference_point())
}

pub fn sample_at(geom: &CpwGeometry, point: (f64, f64)) -> FieldSample {
    FieldSample {
        position: point,
        b_bias_per_amp: strip_field(geom, point),
        b1_per_sqrt_watt: b1_per_sqrt_watt(geom, point),
    }
}

/// Rows `y_um, z_um, bbias_x_uT_per_mA, bbias_y_uT_per_mA, b1_uT` over a
/// `ny × nz` grid spanning `|y| ≤ y_half` and the epi layer. The bias
/// columns are the horizontal and vertical components of the cross-section.
pub fn b1_map(geom: &CpwGeometry, power_dbm: f64, y_half: f64, ny: usize, nz: usize) -> Vec<Vec<f64>> {
    let z0 = geom.sample_standoff;
    let pts: Vec<(f64, f64)> = (0..nz)
        .flat_map(|kz| {
            (0..ny).map(move |ky| {
                let y = -y_half + 2.0 * y_half * ky as f64 / (ny.max(2) - 1) as f64;
                let z = z0 + geom.epi_thickness * kz as f64 / (nz.max(2) - 1) as f64;
                (y, z)
            })
        })
        .collect();
    pts.par_iter()
        .map(|&p| {
            let s = sample_at(geom, p);
            vec![
                p.0 * 1e6,
                p.1 * 1e6,
                s.b_bias_per_amp.0 * 1e6 * 1e-3,
                s.b_bias_per_amp.1 * 1e6 * 1e-3,
                s.b1_at(power_dbm) * 1e6,
            ]
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    AbovePin,
    AboveGap,
    /// Everything within the outer gap edges.
    Lateral,
}

/// Midpoint grid over `region` through the epi layer.
pub fn region_samples(geom: &CpwGeometry, region: Region, ny: usize, nz: usize) -> Vec<FieldSample> {
    let (w, g) = (geom.center_width, geom.gap);
    let spans: Vec<(f64, f64)> = match region {
        Region::AbovePin => vec![(-w / 2.0, w / 2.0)],
        Region::AboveGap => vec![(-w / 2.0 - g, -w / 2.0), (w / 2.0, w / 2.0 + g)],
        Region::Lateral => vec![(-w / 2.0 - g, w / 2.0 + g)],
    };
    let dz = geom.epi_thickness / nz as f64;
    let mut pts = Vec::with_capacity(spans.len() * ny * nz);
    for &(a, b) in &spans {
        let dy = (b - a) / ny as f64;
        for kz in 0..nz {
            for ky in 0..ny {
                pts.push((
                    a + dy * (ky as f64 + 0.5),
                    geom.sample_standoff + dz * (kz as f64 + 0.5),
                ));
            }
        }
    }
    pts.par_iter().map(|&p| sample_at(geom, p)).collect()
}

/// Resonance-field shift `|B₀ b̂₀ + B_i| − B₀` for `b̂₀ = (cos θ, sin θ, 0)`.
pub fn parallel_shift(b_bias: (f64, f64), b0: f64, theta: f64) -> f64 {
    let (by, bz) = b_bias;
    let x = b0 * theta.cos();
    let y = b0 * theta.sin() + by;
    (x * x + y * y + bz * bz).sqrt() - b0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Broadening {
    /// 2√(2 ln 2) × the B₁²-weighted standard deviation of the shift.
    pub fwhm: f64,
    pub mean_shift: f64,
}

pub fn broadening_vs_misalignment(geom: &CpwGeometry, i: f64, theta: f64, region: Region) -> Result<Broadening> {
    if !(theta.abs() < 0.2) {
        return Err(Error::InvalidInput(format!(
            "misalignment {theta} rad outside |θ| < 0.2"
        )));
    }
    let samples = region_samples(geom, region, 32, 32);
    let weights: Vec<f64> = samples.iter().map(|s| s.b1_per_sqrt_watt.powi(2)).collect();
    let shifts: Vec<f64> = samples
        .iter()
        .map(|s| parallel_shift((s.b_bias_per_amp.0 * i, s.b_bias_per_amp.1 * i), REFERENCE_B0, theta))
        .collect();
    let wsum: f64 = weights.iter().sum();
    let mean = shifts.iter().zip(&weights).map(|(s, w)| s * w).sum::<f64>() / wsum;
    let var = shifts
        .iter()
        .zip(&weights)
        .map(|(s, w)| w * (s - mean).powi(2))
        .sum::<f64>()
        / wsum;
    Ok(Broadening {
        fwhm: 2.0 * (2.0 * 2f64.ln()).sqrt() * var.sqrt(),
        mean_shift: mean,
    })
}

/// Observer-sequence timing around which compensating bias lobes are placed.
/// Times are measured from the centre of the π/2 pulse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeerTiming {
    pub tau: f64,
    /// Pump-pulse start.
    pub t_pump: f64,
    pub pump_duration: f64,
    /// Resonator settle time before the pump.
    pub settle: f64,
    pub pi_duration: f64,
    /// Half-width kept clear around the echo.
    pub acquire_half_window: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompensationKind {
    SymmetricPair,
    Bipolar,
}

/// Filtered tails must die out to `e^-25` before the next protected event.
pub const SETTLE_LAGS: f64 = 25.0;

pub fn compensation_schedule(kind: CompensationKind, timing: &DeerTiming, i: f64, lag: f64) -> Result<BiasSchedule> {
    let t = timing;
    let start = t.t_pump - t.settle;
    let end = t.t_pump + t.pump_duration;
    let margin = SETTLE_LAGS * lag;
    let pi_start = t.tau - 0.5 * t.pi_duration;
    let pi_end = t.tau + 0.5 * t.pi_duration;
    if start < 0.0 {
        return Err(Error::DoesNotFit(format!(
            "lobe would start {:.3e} s before the π/2 pulse",
            -start
        )));
    }
    let elements = match kind {
        CompensationKind::SymmetricPair => {
            if end + margin > pi_start {
                return Err(Error::DoesNotFit("first lobe overlaps the π pulse".into()));
            }
            let (s2, e2) = (2.0 * t.tau - end, 2.0 * t.tau - start);
            if s2 < pi_end {
                return Err(Error::DoesNotFit("mirrored lobe overlaps the π pulse".into()));
            }
            if e2 + margin > 2.0 * t.tau - t.acquire_half_window {
                return Err(Error::DoesNotFit(
                    "mirrored lobe does not settle before the echo".into(),
                ));
            }
            vec![BiasElement::new(start, end, i), BiasElement::new(s2, e2, i)]
        }
        CompensationKind::Bipolar => {
            let d = end - start;
            if end + d + margin > pi_start {
                return Err(Error::DoesNotFit(
                    "bipolar pair does not settle before the π pulse".into(),
                ));
            }
            vec![BiasElement::new(start, end, i), BiasElement::new(end, end + d, -i)]
        }
    };
    BiasSchedule::new(elements, lag)
}

/// First-order echo phase per unit bias shift: charge after the π pulse
/// minus charge before it, normalised by one lobe's charge.
pub fn residual_phase_fraction(sched: &BiasSchedule, tau: f64) -> f64 {
    let before = sched.charge_between(0.0, tau);
    let after = sched.charge_between(tau, 2.0 * tau);
    let lobe = sched
        .elements
        .first()
        .map(|e| (e.amplitude * (e.t_end - e.t_start)).abs())
        .unwrap_or(1.0);
    (after - before) / lobe
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geom4() -> CpwGeometry {
        CpwGeometry::with_center_width(4e-6)
    }

    #[test]
    fn wide_strip_sheet_limit() {
        let w = 1e-3;
        let (by, bz) = isolated_strip(-w / 2.0, w / 2.0, 1.0, (0.0, 1e-7));
        let sheet = MU0 / (2.0 * w);
        assert!((by.abs() / sheet - 1.0).abs() < 1e-3);
        assert!(by < 0.0);
        assert!(bz.abs() < 1e-15);
    }

    #[test]
    fn superposition_of_strips() {
        let g = geom4();
        let p = (1.3e-6, 0.8e-6);
        let sum = g.strips().iter().fold((0.0, 0.0), |acc, &(a, b, s)| {
            let f = isolated_strip(a, b, s, p);
            (acc.0 + f.0, acc.1 + f.1)
        });
        assert_eq!(sum, strip_field(&g, p));
    }

    #[test]
    fn far_field_falls_faster_than_monopole() {
        let g = geom4();
        let span = g.center_width + 2.0 * (g.gap + g.ground_width());
        let r = 100.0 * span;
        let (by, bz) = strip_field(&g, (0.0, r));
        let monopole = MU0 / (2.0 * std::f64::consts::PI * r);
        assert!(by.hypot(bz) < 0.05 * monopole);
        // no monopole or dipole term survives, so doubling r cuts |B| well over 2x
        let (by2, bz2) = strip_field(&g, (0.0, 2.0 * r));
        assert!(by.hypot(bz) / by2.hypot(bz2) > 3.5);
    }

    #[test]
    fn b1_anchor_and_db_steps() {
        let g = geom4();
        let s = sample_at(&g, g.reference_point());
        assert!((s.b1_at(-15.0) - 0.2e-6).abs() < 1e-15);
        assert!((s.b1_at(-21.0) / 0.1e-6 - 1.0).abs() < 0.003);
        let g25 = CpwGeometry {
            b1_anchor: 0.09e-6,
            b1_anchor_dbm: -23.0,
            ..CpwGeometry::with_center_width(2.5e-6)
        };
        let s25 = sample_at(&g25, g25.reference_point());
        assert!((s25.b1_at(-23.0) - 0.09e-6).abs() < 1e-15);
    }

    #[test]
    fn aligned_pin_has_only_quadrature() {
        let g = geom4();
        let aligned = broadening_vs_misalignment(&g, 4e-3, 0.0, Region::AbovePin).unwrap();
        let tilted = broadening_vs_misalignment(&g, 4e-3, 4.7f64.to_radians(), Region::AbovePin).unwrap();
        assert!(aligned.fwhm < 0.1 * tilted.fwhm);
        assert!(aligned.mean_shift > 0.0);
    }

    #[test]
    fn pin_shift_is_odd_in_theta() {
        let g = geom4();
        let th = 4.7f64.to_radians();
        let zero = broadening_vs_misalignment(&g, 4e-3, 0.0, Region::AbovePin).unwrap();
        let p = broadening_vs_misalignment(&g, 4e-3, th, Region::AbovePin).unwrap();
        let m = broadening_vs_misalignment(&g, 4e-3, -th, Region::AbovePin).unwrap();
        // subtracting the even quadrature part leaves an odd remainder
        let odd = ((p.mean_shift - zero.mean_shift) + (m.mean_shift - zero.mean_shift)).abs();
        assert!(odd < 0.05 * (p.mean_shift - zero.mean_shift).abs());
        assert!((p.fwhm / m.fwhm - 1.0).abs() < 0.1);
    }

    #[test]
    fn symmetric_pair_cancels() {
        let timing = DeerTiming {
            tau: 34e-6,
            t_pump: 20e-6,
            pump_duration: 0.4e-6,
            settle: 1e-6,
            pi_duration: 0.4e-6,
            acquire_half_window: 1e-6,
        };
        let s = compensation_schedule(CompensationKind::SymmetricPair, &timing, 4e-3, 40e-9).unwrap();
        assert!(residual_phase_fraction(&s, timing.tau).abs() < 1e-9);
        let b = compensation_schedule(CompensationKind::Bipolar, &timing, 4e-3, 40e-9).unwrap();
        assert!(b.charge_between(0.0, timing.tau).abs() < 1e-9 * 4e-3 * 1.4e-6);
    }

    #[test]
    fn late_pump_does_not_fit() {
        let timing = DeerTiming {
            tau: 34e-6,
            t_pump: 33.5e-6,
            pump_duration: 0.4e-6,
            settle: 1e-6,
            pi_duration: 0.4e-6,
            acquire_half_window: 1e-6,
        };
        for kind in [CompensationKind::SymmetricPair, CompensationKind::Bipolar] {
            assert!(matches!(
                compensation_schedule(kind, &timing, 4e-3, 40e-9),
                Err(Error::DoesNotFit(_))
            ));
        }
    }

    proptest! {
        #[test]
        fn point_reflection_antisymmetry(y in -20e-6f64..20e-6, z in 0.1e-6f64..5e-6) {
            let g = geom4();
            let (by, bz) = strip_field(&g, (y, z));
            let (ry, rz) = strip_field(&g, (-y, -z));
            prop_assert!((by + ry).abs() <= 1e-12 * by.abs().max(1e-12));
            prop_assert!((bz + rz).abs() <= 1e-12 * bz.abs().max(1e-12));
        }

        #[test]
        fn linear_in_current(y in -10e-6f64..10e-6, z in 0.2e-6f64..3e-6) {
            let g = geom4();
            let (by, bz) = strip_field(&g, (y, z));
            let f1 = (by * 1e-3, bz * 1e-3);
            let f4 = (by * 4e-3, bz * 4e-3);
            prop_assert!((f4.0 - 4.0 * f1.0).abs() <= 1e-15 * f4.0.abs());
            prop_assert!((f4.1 - 4.0 * f1.1).abs() <= 1e-15 * f4.1.abs());
        }

        #[test]
        fn quadrature_shift_even_in_current(i in 0.0f64..5e-3, y in -4e-6f64..4e-6) {
            let g = geom4();
            let (by, bz) = strip_field(&g, (y, 1.0e-6));
            let p = parallel_shift((by * i, bz * i), REFERENCE_B0, 0.0);
            let m = parallel_shift((-by * i, -bz * i), REFERENCE_B0, 0.0);
            prop_assert_eq!(p, m);
        }

        #[test]
        fn b1_doubles_per_six_db(p in -40.0f64..-10.0, y in -6e-6f64..6e-6) {
            let g = geom4();
            let s = sample_at(&g, (y, 1.2e-6));
            let r = s.b1_at(p + 20.0 * 2f64.log10()) / s.b1_at(p);
            prop_assert!((r - 2.0).abs() < 1e-12);
        }
    }
}
