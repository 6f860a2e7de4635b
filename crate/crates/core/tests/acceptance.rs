// SPDX-License-Identifier: Apache-2.0

//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::f64::consts::PI;
use std::path::PathBuf;
use std::time::Instant;

use num_complex::Complex64;
use spinres_core::biasdyn::{self, BiasSchedule};
use spinres_core::deer::{self, DeerConfig};
use spinres_core::fieldmap::{self, CompensationKind, DeerTiming, Region};
use spinres_core::kinet::{self, TuningDataset};
use spinres_core::netmodel;
use spinres_core::protocol::{self, ExperimentSpec};
use spinres_core::spinsim::{self, PulseStyle, RunOptions, SweepSetup};
use spinres_core::{Device, ExperimentResult, PulseElement, SpinPacket, SpinSystemConfig};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn spec_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../data/specs")
        .join(name)
}

fn run_spec(name: &str) -> Result<(ExperimentResult, f64), String> {
    let spec = ExperimentSpec::load(spec_path(name)).map_err(|e| format!("{name}: {e}"))?;
    let start = Instant::now();
    let out = protocol::run(&spec).map_err(|e| format!("{name}: {e}"))?;
    Ok((out, start.elapsed().as_secs_f64()))
}

fn extra(r: &ExperimentResult, key: &str) -> Result<f64, String> {
    r.metadata
        .extra
        .get(key)
        .and_then(|v| v.as_f64())
        .ok_or_else(|| format!("missing metadata {key}"))
}

fn device(name: &str) -> Result<Device, String> {
    Device::builtin(name).map_err(|e| e.to_string())
}

fn c1() -> Outcome {
    let d4 = device("4um")?;
    let df = kinet::delta_f(5e-3, &d4.tuning).map_err(|e| e.to_string())?;
    let d15 = device("1p5um")?;
    let max = d15.tuning.max_shift().abs();
    check(
        (df * 1e-6 + 51.8).abs() <= 0.5 && (max * 1e-6 - 95.0).abs() <= 3.0,
        format!(
            "δf(5 mA) = {:.3} MHz, 1.5 μm max |δf| = {:.2} MHz",
            df * 1e-6,
            max * 1e-6
        ),
    )
}

fn c2() -> Outcome {
    let start = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["1p5um", "2p5um", "4um"] {
        let p = device(name)?.tuning;
        let i_max = 0.999 * p.i_critical;
        // 10 μA grid
        let n = (i_max / 10e-6).round() as usize + 1;
        let clean = TuningDataset::synthetic(&p, i_max, n);
        let fit = kinet::fit_tuning_params(&clean, p.f0).map_err(|e| e.to_string())?;
        let rel = |a: f64, b: f64| (a / b - 1.0).abs();
        let clean_err = rel(fit.i2_star, p.i2_star).max(rel(fit.i4_star, p.i4_star));
        let mut worst: f64 = 0.0;
        for f in kinet::monte_carlo_fits(&clean, p.f0, 0.01, 2024, 100) {
            let f = f.map_err(|e| e.to_string())?;
            worst = worst.max(rel(f.i2_star, p.i2_star)).max(rel(f.i4_star, p.i4_star));
        }
        ok &= clean_err < 0.005 && worst < 0.05;
        parts.push(format!(
            "{name}: I2 {:.2} mA I4 {:.2} mA (noiseless err {:.1e}, worst noisy err {:.2}%)",
            fit.i2_star * 1e3,
            fit.i4_star * 1e3,
            clean_err,
            worst * 100.0
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    check(ok && secs < 10.0, format!("{}; {secs:.1} s", parts.join("; ")))
}

fn c3() -> Outcome {
    let (r, _) = run_spec("s21_unbiased.json")?;
    let f = extra(&r, "f_res_hz")?;
    let q = extra(&r, "q_loaded")?;
    let (f0, q0) = (7.6e9, 3000.0);
    let lorentz = |x: f64| 1.0 / Complex64::new(1.0, 2.0 * q0 * (x - f0) / f0).norm();
    let band = (f0 * (1.0 - 5.0 / q0), f0 * (1.0 + 5.0 / q0));
    let oracle = netmodel::analyze_peak(lorentz, band, q0).map_err(|e| e.to_string())?;
    let oracle_err = (oracle.q_loaded / q0 - 1.0).abs();
    check(
        (f * 1e-6 - 7636.6).abs() <= 0.1 && (q / 3000.0 - 1.0).abs() <= 0.05 && oracle_err < 0.01,
        format!(
            "f_res {:.4} MHz, Q {q:.1}, Lorentzian oracle Q error {:.1e}",
            f * 1e-6,
            oracle_err
        ),
    )
}

fn c4() -> Outcome {
    let start = Instant::now();
    let t = device("4um")?.tuning;
    let lag = biasdyn::calibrate_lag(&t, 3.9e-3, -31.2e6, 270e-9).map_err(|e| e.to_string())?;
    let mut times = Vec::new();
    for target in [-10e6, -20e6, -31.2e6, -45e6] {
        let s = biasdyn::step_for_target(target, &t, lag).map_err(|e| e.to_string())?;
        times.push(biasdyn::tuning_time(&s, &t, target).map_err(|e| e.to_string())?);
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let spread = times.iter().map(|x| (x / mean - 1.0).abs()).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let shown: Vec<String> = times.iter().map(|x| format!("{:.1}", x * 1e9)).collect();
    check(
        spread <= 0.2 && secs < 5.0,
        format!(
            "lag {:.2} ns, times [{}] ns, spread ±{:.1}%, {secs:.2} s",
            lag * 1e9,
            shown.join(", "),
            spread * 100.0
        ),
    )
}

fn single(p: SpinPacket, pulse: PulseElement, dt: f64) -> Result<SpinPacket, String> {
    let wf = spinsim::waveform(&pulse, dt).map_err(|e| e.to_string())?;
    let h = pulse.duration / wf.len() as f64;
    let cfg = SpinSystemConfig::default().without_relaxation();
    spinsim::propagate(&p, &wf, &BiasSchedule::empty(0.0), 0.0, h, &cfg).map_err(|e| e.to_string())
}

fn c5() -> Outcome {
    let w1 = 2.0 * PI * 1.25e6;
    let inv = single(SpinPacket::new(0.0, 1.0), PulseElement::rect(PI / w1, w1, 0.0), 1e-9)?;
    let inv_err = (inv.m[2] + 1.0).abs();
    let mut halving: f64 = 0.0;
    let mut drift: f64 = 0.0;
    for (det, b1) in [(0.0, 1.0), (2.0 * PI * 0.7e6, 0.8), (-2.0 * PI * 3e6, 1.2)] {
        let p = PulseElement::bir4(10e-6, 2.0 * PI * 0.885e6, PI, 2e6, 0.0);
        let a = single(SpinPacket::new(det, b1), p, 1e-9)?;
        let b = single(SpinPacket::new(det, b1), p, 0.5e-9)?;
        for k in 0..3 {
            halving = halving.max((a.m[k] - b.m[k]).abs());
        }
        // 10⁴ steps
        let r = single(SpinPacket::new(det, b1), PulseElement::rect(10e-6, w1, 0.3), 1e-9)?;
        drift = drift.max((a.norm() - 1.0).abs()).max((r.norm() - 1.0).abs());
    }
    check(
        inv_err < 1e-6 && halving < 1e-5 && drift < 1e-6,
        format!("π inversion error {inv_err:.1e}, step-halving {halving:.1e}, norm drift {drift:.1e} per 10⁴ steps"),
    )
}

fn c6() -> Outcome {
    let dev = device("4um")?;
    let setup = SweepSetup::default();
    let (_, bir4_pi, _) = setup.pulses(PulseStyle::Adiabatic, &dev.tuning, false);
    let (_, rect_pi, _) = setup.pulses(PulseStyle::Rect, &dev.tuning, false);
    let mut worst: f64 = 1.0;
    for k in 0..=12 {
        let b1 = 0.7 + 0.05 * k as f64;
        let m = single(SpinPacket::new(0.0, b1), bir4_pi, 2e-9)?;
        worst = worst.min(0.5 * (1.0 - m.m[2]));
    }
    let r = single(SpinPacket::new(0.0, 0.7), rect_pi, 1e-9)?;
    let rect = 0.5 * (1.0 - r.m[2]);
    check(
        worst >= 0.98 && rect <= 0.9,
        format!("BIR4 worst inversion {worst:.4} over b1 0.7–1.3, rect π at 0.7 gives {rect:.4}"),
    )
}

fn c7() -> Outcome {
    let (zero, t0) = run_spec("sweep_zero_bias.json")?;
    let (adi, t1) = run_spec("sweep_4ma_adiabatic.json")?;
    let (rect, t2) = run_spec("sweep_4ma_rect.json")?;
    let p0 = extra(&zero, "peak_field_mt")?;
    let pa = extra(&adi, "peak_field_mt")?;
    let a0 = extra(&zero, "peak_amp")?;
    let ra = extra(&adi, "peak_amp")? / a0;
    let rr = extra(&rect, "peak_amp")? / a0;
    let slowest = t0.max(t1).max(t2);
    check(
        (p0 - 274.78).abs() <= 1e-3 && (pa - 273.72).abs() <= 0.02 && ra >= 0.9 && rr < 0.9 && slowest < 60.0,
        format!(
            "zero-bias peak {p0:.4} mT, 4 mA peak {pa:.4} mT, amplitude ratio adiabatic {ra:.3} rect {rr:.3}, slowest sweep {slowest:.1} s"
        ),
    )
}

fn c8() -> Outcome {
    let (zero, _) = run_spec("t2_zero_bias.json")?;
    let (comp, _) = run_spec("t2_compensated.json")?;
    let (a, ea) = (extra(&zero, "t2_us")?, extra(&zero, "t2_stderr_us")?);
    let (b, eb) = (extra(&comp, "t2_us")?, extra(&comp, "t2_stderr_us")?);
    let joint = (ea * ea + eb * eb).sqrt();
    check(
        (a - 448.0).abs() <= 10.0 && (a - b).abs() <= joint,
        format!("T2 zero bias {a:.2} ± {ea:.2} μs, compensated 4.9 mA {b:.2} ± {eb:.2} μs"),
    )
}

fn c9() -> Outcome {
    let start = Instant::now();
    let cfg = DeerConfig::default();
    // sparse partners so most observers see at most three
    let sparse = DeerConfig {
        as_concentration: cfg.as_concentration * 1.5 / cfg.mean_partners(),
        ..cfg
    };
    let mut small = 0;
    let mut exact: f64 = 0.0;
    for k in 0..4000 {
        let set = deer::sample_partners_with(&sparse, k, 0.5);
        if set.couplings.is_empty() || set.couplings.len() > 3 {
            continue;
        }
        small += 1;
        for t in [6e-6, 13e-6, 20e-6, 27e-6] {
            let b = deer::brute_force_echo(&set.couplings, &set.flipped, t, cfg.tau);
            exact = exact.max((b - set.echo(t)).abs());
        }
    }
    let at20 = deer::deer_echo(20e-6, &cfg).map_err(|e| e.to_string())?;
    let grid: Vec<f64> = (0..10).map(|k| 6e-6 + 2e-6 * k as f64).collect();
    let curve = deer::deer_curve(&cfg, &grid).map_err(|e| e.to_string())?;
    let off = curve
        .column("echo_norm_off_res")
        .ok_or("missing off-resonance column")?;
    let flat = off.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
    let analytic_secs = start.elapsed().as_secs_f64();

    let (full, _) = run_spec("deer_full.json")?;
    let on = full.column("echo_norm_on_res").ok_or("missing on-resonance column")?;
    let mut agree: f64 = 0.0;
    for (t_us, v) in full.x().iter().zip(&on) {
        let a = deer::deer_echo(t_us * 1e-6, &cfg).map_err(|e| e.to_string())?;
        agree = agree.max((v / a - 1.0).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        small > 0 && exact < 1e-12 && (at20 - 0.80).abs() <= 0.03 && flat <= 0.01 && agree <= 0.03 && analytic_secs < 120.0,
        format!(
            "{small} small instances, enumeration error {exact:.1e}; echo(20 μs) {at20:.4}; off-resonance max deviation {:.2}%; full vs analytic {:.2}%; {secs:.1} s",
            flat * 100.0,
            agree * 100.0
        ),
    )
}

fn c10() -> Outcome {
    let dev = device("4um")?;
    let spin = SpinSystemConfig::default().without_relaxation();
    let setup = SweepSetup {
        misalignment: 4.7f64.to_radians(),
        ..SweepSetup::default()
    };
    let ens = spinsim::layer_ensemble(&spin, &dev, &setup, 12, 4, 8);
    let (pi2, pi, _) = setup.pulses(PulseStyle::Rect, &dev.tuning, false);
    let tau = 34e-6;
    let seq = spinsim::hahn_sequence(tau, pi2, pi, setup.acquire_window).map_err(|e| e.to_string())?;
    let timing = DeerTiming {
        tau,
        t_pump: 20e-6,
        pump_duration: 0.4e-6,
        settle: 1e-6,
        pi_duration: pi.duration,
        acquire_half_window: 0.5 * setup.acquire_window,
    };
    let origin = spinsim::sequence_origin(&seq);
    let opts = RunOptions::default();
    let run = |s: &BiasSchedule| -> Result<Complex64, String> {
        let shifted = spinsim::shift_schedule(s, origin).map_err(|e| e.to_string())?;
        spinsim::run_phase_cycled(&ens, &seq, &shifted, &spin, &opts)
            .map(|o| o.echo)
            .map_err(|e| e.to_string())
    };
    let reference = run(&BiasSchedule::empty(dev.lag))?;
    let phase = |s: &BiasSchedule| run(s).map(|e| (e * reference.conj()).arg().abs());
    let sym = fieldmap::compensation_schedule(CompensationKind::SymmetricPair, &timing, 4e-3, dev.lag)
        .map_err(|e| e.to_string())?;
    let bip = fieldmap::compensation_schedule(CompensationKind::Bipolar, &timing, 4e-3, dev.lag)
        .map_err(|e| e.to_string())?;
    let one_sided = BiasSchedule::new(vec![sym.elements[0]], dev.lag).map_err(|e| e.to_string())?;
    let (ps, pb, pu) = (phase(&sym)?, phase(&bip)?, phase(&one_sided)?);
    check(
        ps < 1e-3 && pb < 1e-3 && pu > 0.1,
        format!("echo phase symmetric pair {ps:.1e} rad, bipolar {pb:.1e} rad, one-sided {pu:.3} rad"),
    )
}

fn c11() -> Outcome {
    let g = device("4um")?.geometry;
    let th = 4.7f64.to_radians();
    let pin = fieldmap::broadening_vs_misalignment(&g, 4e-3, th, Region::AbovePin).map_err(|e| e.to_string())?;
    let gap = fieldmap::broadening_vs_misalignment(&g, 4e-3, th, Region::AboveGap).map_err(|e| e.to_string())?;
    let line = SpinSystemConfig::default().line_fwhm;
    let r_line = pin.fwhm / line;
    let r_gap = gap.fwhm / pin.fwhm;
    check(
        (0.5..=2.0).contains(&r_line) && r_gap < 0.1,
        format!(
            "above pin {:.2} μT ({r_line:.2}× line), above gap {:.2} μT ({:.0}% of pin)",
            pin.fwhm * 1e6,
            gap.fwhm * 1e6,
            r_gap * 100.0
        ),
    )
}

fn c12() -> Outcome {
    let q = kinet::q_requirement(7.6e9, 33e6).map_err(|e| e.to_string())?;
    check((q - 230.0).abs() <= 5.0, format!("q_requirement = {q:.2}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("tuning law", c1),
        ("tuning fit round trip", c2),
        ("resonance extraction", c3),
        ("tuning dynamics", c4),
        ("spin propagation", c5),
        ("adiabatic robustness", c6),
        ("field sweeps", c7),
        ("T2", c8),
        ("DEER", c9),
        ("bias compensation", c10),
        ("misalignment broadening", c11),
        ("Q requirement", c12),
    ];
    // optional criterion numbers on the command line select a subset
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(k + 1)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let (tag, detail) = match f() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "{tag} {:>2} {name}: {detail} [{:.1} s]",
            k + 1,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
