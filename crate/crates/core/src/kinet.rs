// SPDX-License-Identifier: Apache-2.0

//! Kinetic-inductance tuning law `δf = −f₀[(i/I₂*)² + (i/I₄*)⁴]`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Warning};
use crate::fit::{levenberg_marquardt, LmOptions};
use crate::numeric::bisect;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceTuningParams {
    pub f0: f64,
    pub i2_star: f64,
    pub i4_star: f64,
    pub i_critical: f64,
    pub q_loaded: f64,
    pub coupling: f64,
    pub max_power_no_bias: f64,
    pub max_power_biased: f64,
    pub center_pin_width: f64,
}

impl DeviceTuningParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if !(self.f0 > 0.0) {
            return bad("f0 must be positive");
        }
        if !(self.i_critical > 0.0 && self.i_critical < self.i2_star) {
            return bad("require 0 < i_critical < i2_star");
        }
        if !(self.i4_star > 0.0) {
            return bad("i4_star must be positive");
        }
        if !(self.q_loaded > 0.0 && self.coupling > 0.0) {
            return bad("q_loaded and coupling must be positive");
        }
        if self.max_power_biased > self.max_power_no_bias {
            return bad("max_power_biased must not exceed max_power_no_bias");
        }
        if !(self.center_pin_width > 0.0) {
            return bad("center_pin_width must be positive");
        }
        Ok(())
    }

    /// Largest reachable shift, evaluated just below the critical current.
    pub fn max_shift(&self) -> f64 {
        shift_unchecked(self.i_critical, self)
    }

    /// Drive-power cap for the given bias state.
    pub fn power_cap(&self, biased: bool) -> f64 {
        if biased {
            self.max_power_biased
        } else {
            self.max_power_no_bias
        }
    }

    /// Warns when `power_dbm` exceeds the cap; the caller decides whether to clamp.
    pub fn check_power(&self, power_dbm: f64, biased: bool) -> Option<Warning> {
        let cap = self.power_cap(biased);
        (power_dbm > cap).then_some(Warning::PowerCapExceeded {
            power_dbm,
            cap_dbm: cap,
        })
    }
}

fn shift_unchecked(i: f64, p: &DeviceTuningParams) -> f64 {
    let x2 = (i / p.i2_star).powi(2);
    let x4 = (i / p.i4_star).powi(4);
    -p.f0 * (x2 + x4)
}

pub fn delta_f(i: f64, p: &DeviceTuningParams) -> Result<f64> {
    if i.abs() >= p.i_critical {
        return Err(Error::CriticalCurrentExceeded {
            current: i,
            critical: p.i_critical,
        });
    }
    Ok(shift_unchecked(i, p))
}

/// Non-negative current producing `target` (≤ 0), by bisection on the
/// monotone branch.
pub fn invert_delta_f(target: f64, p: &DeviceTuningParams) -> Result<f64> {
    if target > 0.0 || !target.is_finite() {
        return Err(Error::InvalidInput(format!("tuning target must be ≤ 0, got {target}")));
    }
    let max = p.max_shift();
    if target < max {
        return Err(Error::TargetUnreachable { target, max });
    }
    if target == 0.0 {
        return Ok(0.0);
    }
    let i = bisect(|i| shift_unchecked(i, p) - target, 0.0, p.i_critical, 1e-15)
        .ok_or(Error::TargetUnreachable { target, max })?;
    Ok(i.min(p.i_critical * (1.0 - f64::EPSILON)))
}

/// Fixed-resonator Q needed to span two frequencies `span` apart.
pub fn q_requirement(f_center: f64, span: f64) -> Result<f64> {
    if !(span > 0.0) {
        return Err(Error::InvalidInput("span must be positive".into()));
    }
    Ok(f_center / span)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TuningDataset {
    /// `(current [A], δf [Hz])`.
    pub points: Vec<(f64, f64)>,
}

impl TuningDataset {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        let d = Self { points };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let mut currents: Vec<f64> = Vec::with_capacity(self.points.len());
        for &(i, df) in &self.points {
            if !(i >= 0.0 && i.is_finite()) {
                return Err(Error::InvalidInput(format!("current {i} must be non-negative")));
            }
            if !(df <= 0.0) {
                return Err(Error::InvalidInput(format!("shift {df} must be ≤ 0")));
            }
            currents.push(i);
        }
        currents.sort_by(f64::total_cmp);
        if currents.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput("currents must be distinct".into()));
        }
        Ok(())
    }

    /// Noise-free samples on `n` evenly spaced currents in `[0, i_max]`.
    pub fn synthetic(p: &DeviceTuningParams, i_max: f64, n: usize) -> Self {
        let points = (0..n)
            .map(|k| {
                let i = i_max * k as f64 / (n - 1) as f64;
                (i, shift_unchecked(i, p))
            })
            .collect();
        Self { points }
    }

    /// Reads `current_ma, delta_f_mhz` rows; a non-numeric first line is
    /// treated as a header.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            let parsed: std::result::Result<Vec<f64>, _> = cols.iter().map(|c| c.parse::<f64>()).collect();
            match parsed {
                Ok(v) if v.len() >= 2 => points.push((v[0] * 1e-3, v[1] * 1e6)),
                _ if ln == 0 => continue,
                _ => {
                    return Err(Error::Parse {
                        line: ln + 1,
                        column: 1,
                        message: format!("expected 'current_ma, delta_f_mhz', got '{line}'"),
                    })
                }
            }
        }
        Self::new(points)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningFit {
    pub i2_star: f64,
    /// `f64::INFINITY` when the quartic coefficient is not positive.
    pub i4_star: f64,
    /// Covariance of `(i2_star, i4_star)` in A².
    pub covariance: [[f64; 2]; 2],
    /// Covariance of the linear coefficients `(1/I₂*², 1/I₄*⁴)`.
    pub coefficient_covariance: [[f64; 2]; 2],
    pub residual_rms: f64,
    pub f0: f64,
}

impl TuningFit {
    pub fn i2_stderr(&self) -> f64 {
        self.covariance[0][0].max(0.0).sqrt()
    }

    pub fn i4_stderr(&self) -> f64 {
        self.covariance[1][1].max(0.0).sqrt()
    }
}

/// Least-squares fit of `I₂*`, `I₄*` with `f₀` held fixed.
///
/// The model is linear in `a = 1/I₂*²` and `b = 1/I₄*⁴`; both are scaled by
/// the largest current so the normal matrix is well conditioned.
pub fn fit_tuning_params(data: &TuningDataset, f0: f64) -> Result<TuningFit> {
    data.validate()?;
    if !(f0 > 0.0) {
        return Err(Error::InvalidInput("f0 must be positive".into()));
    }
    if data.points.len() < 4 {
        return Err(Error::InvalidInput(format!(
            "need at least 4 points, got {}",
            data.points.len()
        )));
    }
    let i_max = data.points.iter().map(|p| p.0).fold(0.0, f64::max);
    if !(i_max > 0.0) {
        return Err(Error::IllConditioned("all currents are zero".into()));
    }
    let n = data.points.len();
    let u2: Vec<f64> = data.points.iter().map(|p| (p.0 / i_max).powi(2)).collect();
    let u4: Vec<f64> = u2.iter().map(|u| u * u).collect();
    let y: Vec<f64> = data.points.iter().map(|p| p.1 / f0).collect();

    let model = |q: &[f64]| {
        let r = DVector::from_fn(n, |k, _| -(q[0] * u2[k] + q[1] * u4[k]) - y[k]);
        let j = DMatrix::from_fn(n, 2, |k, c| if c == 0 { -u2[k] } else { -u4[k] });
        (r, j)
    };
    let fit = levenberg_marquardt(model, &[0.0, 0.0], LmOptions::default())?;
    if fit.initial_rss > 0.0 && fit.rss >= fit.initial_rss {
        return Err(Error::FitDiverged("residual did not decrease".into()));
    }

    let (s2, s4) = (i_max.powi(-2), i_max.powi(-4));
    let a = fit.params[0] * s2;
    let b = fit.params[1] * s4;
    if !(a > 0.0) {
        return Err(Error::FitDiverged(format!(
            "quadratic coefficient {a:e} is not positive"
        )));
    }
    let cov = &fit.covariance;
    let cc = [
        [cov[(0, 0)] * s2 * s2, cov[(0, 1)] * s2 * s4],
        [cov[(1, 0)] * s4 * s2, cov[(1, 1)] * s4 * s4],
    ];
    let i2 = a.powf(-0.5);
    let (i4, g4) = if b > 0.0 {
        (b.powf(-0.25), -0.25 * b.powf(-1.25))
    } else {
        (f64::INFINITY, f64::INFINITY)
    };
    let g2 = -0.5 * a.powf(-1.5);
    let covariance = [
        [g2 * g2 * cc[0][0], g2 * g4 * cc[0][1]],
        [g4 * g2 * cc[1][0], g4 * g4 * cc[1][1]],
    ];
    Ok(TuningFit {
        i2_star: i2,
        i4_star: i4,
        covariance,
        coefficient_covariance: cc,
        residual_rms: fit.residual_rms(n) * f0,
        f0,
    })
}

/// Refits `runs` noisy copies of `clean` (multiplicative Gaussian noise of
/// relative size `rel_noise`) and returns every fit in seed order.
pub fn monte_carlo_fits(
    clean: &TuningDataset,
    f0: f64,
    rel_noise: f64,
    seed: u64,
    runs: usize,
) -> Vec<Result<TuningFit>> {
    use rand_distr::{Distribution, Normal};
    (0..runs)
        .into_par_iter()
        .map(|k| {
            let mut rng = crate::rng::stream(seed, "kinet.montecarlo", k as u64);
            let normal = Normal::new(0.0, rel_noise).expect("finite noise level");
            let points = clean
                .points
                .iter()
                .map(|&(i, df)| (i, (df * (1.0 + normal.sample(&mut rng))).min(0.0)))
                .collect();
            fit_tuning_params(&TuningDataset { points }, f0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn four_um() -> DeviceTuningParams {
        DeviceTuningParams {
            f0: 7636.6e6,
            i2_star: 62.5e-3,
            i4_star: 35.7e-3,
            i_critical: 5.014e-3,
            q_loaded: 3000.0,
            coupling: 0.6,
            max_power_no_bias: -15.0,
            max_power_biased: -32.0,
            center_pin_width: 4e-6,
        }
    }

    #[test]
    fn zero_current_no_shift() {
        assert_eq!(delta_f(0.0, &four_um()).unwrap(), 0.0);
    }

    #[test]
    fn five_milliamp_shift() {
        let df = delta_f(5e-3, &four_um()).unwrap();
        assert!((df / 1e6 + 51.8).abs() < 0.5, "{df}");
    }

    #[test]
    fn step_probe_shift() {
        let df = delta_f(3.9e-3, &four_um()).unwrap();
        assert!((df / 1e6 + 30.8).abs() < 0.05, "{df}");
        assert!((df / -31.2e6 - 1.0).abs() < 0.02);
    }

    #[test]
    fn critical_current_rejected() {
        let p = four_um();
        assert!(matches!(
            delta_f(-5.014e-3, &p),
            Err(Error::CriticalCurrentExceeded { .. })
        ));
    }

    #[test]
    fn inversion_examples() {
        let p = four_um();
        assert_eq!(invert_delta_f(0.0, &p).unwrap(), 0.0);
        let i = invert_delta_f(-31.2e6, &p).unwrap();
        assert!((i - 3.93e-3).abs() < 0.01e-3, "{i}");
        assert!(matches!(
            invert_delta_f(-200e6, &p),
            Err(Error::TargetUnreachable { .. })
        ));
    }

    #[test]
    fn q_requirement_examples() {
        assert!((q_requirement(7600e6, 33e6).unwrap() - 230.3).abs() < 0.1);
        assert_eq!(q_requirement(1e9, 1e9).unwrap(), 1.0);
        assert!((q_requirement(7600e6, 2.53e6).unwrap() - 3000.0).abs() < 5.0);
        assert!(q_requirement(1e9, 0.0).is_err());
    }

    #[test]
    fn noiseless_round_trip() {
        let p = four_um();
        let data = TuningDataset::synthetic(&p, 0.999 * p.i_critical, 40);
        let fit = fit_tuning_params(&data, p.f0).unwrap();
        assert!((fit.i2_star / p.i2_star - 1.0).abs() < 1e-3);
        assert!((fit.i4_star / p.i4_star - 1.0).abs() < 1e-3);
    }

    #[test]
    fn quadratic_only_limit() {
        let p = DeviceTuningParams {
            i4_star: 1e9,
            ..four_um()
        };
        let data = TuningDataset::synthetic(&p, 0.999 * p.i_critical, 40);
        let fit = fit_tuning_params(&data, p.f0).unwrap();
        assert!((fit.i2_star / p.i2_star - 1.0).abs() < 0.01);
        assert!(fit.i4_star > 1.0 || fit.i4_star.is_infinite(), "{}", fit.i4_star);
    }

    #[test]
    fn too_few_points() {
        let p = four_um();
        let data = TuningDataset::synthetic(&p, 4e-3, 3);
        assert!(fit_tuning_params(&data, p.f0).is_err());
    }

    #[test]
    fn dataset_rules() {
        assert!(TuningDataset::new(vec![(1e-3, 1.0)]).is_err());
        assert!(TuningDataset::new(vec![(1e-3, -1.0), (1e-3, -2.0)]).is_err());
        assert!(TuningDataset::new(vec![(-1e-3, -1.0)]).is_err());
    }

    #[test]
    fn csv_with_header() {
        let d = TuningDataset::from_csv("current_ma,delta_f_mhz\n0,0\n1,-2.5\n2,-10.25\n").unwrap();
        assert_eq!(d.points.len(), 3);
        assert!((d.points[2].0 - 2e-3).abs() < 1e-15);
        assert!((d.points[2].1 + 10.25e6).abs() < 1e-6);
        let err = TuningDataset::from_csv("0,0\nx,y\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn power_cap_warning() {
        let p = four_um();
        assert!(p.check_power(-20.0, false).is_none());
        assert!(p.check_power(-20.0, true).is_some());
    }

    proptest! {
        #[test]
        fn even_and_decreasing(a in 0.0f64..5.0e-3, b in 0.0f64..5.0e-3) {
            let p = four_um();
            prop_assert_eq!(delta_f(a, &p).unwrap(), delta_f(-a, &p).unwrap());
            if a < b {
                prop_assert!(delta_f(a, &p).unwrap() > delta_f(b, &p).unwrap());
            }
        }

        #[test]
        fn inverse_round_trip(i in 0.0f64..5.0e-3) {
            let p = four_um();
            let df = delta_f(i, &p).unwrap();
            let back = invert_delta_f(df, &p).unwrap();
            prop_assert!((delta_f(back, &p).unwrap() - df).abs() < 1.0);
            prop_assert!(back >= 0.0 && back < p.i_critical);
        }
    }
}
