// SPDX-License-Identifier: Apache-2.0

//! Experiment specs: parsing, dotted-key overrides, validation and runs.
//!
//! A spec names one experiment kind, a device (builtin name or path
//! relative to the spec file), kind-specific parameters in SI units, a seed
//! and an optional output CSV path. Parameters are deserialised into typed
//! structs that reject unknown keys, so overrides are checked the same way
//! as file contents.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_distr::{Distribution, Normal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::biasdyn::{self, BiasSchedule};
use crate::deer::{self, DeerConfig, FullModeOptions, PumpShape};
use crate::device::Device;
use crate::error::{Error, Result};
use crate::fieldmap::CompensationKind;
use crate::kinet::{self, TuningDataset};
use crate::netmodel;
use crate::numeric::linspace;
use crate::result::ExperimentResult;
use crate::spinsim::{self, PulseStyle, SpinSystemConfig, SweepSetup, T2Bias};
use crate::units::parse_si;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    FitTuning,
    S21Sweep,
    TuneTime,
    FieldSweep,
    T2Decay,
    Deer,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::FitTuning => "fit_tuning",
            Self::S21Sweep => "s21_sweep",
            Self::TuneTime => "tune_time",
            Self::FieldSweep => "field_sweep",
            Self::T2Decay => "t2_decay",
            Self::Deer => "deer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    /// Builtin device name or a device JSON path.
    #[serde(alias = "device_ref")]
    pub device: String,
    #[serde(default)]
    pub parameters: Map<String, Value>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, alias = "output_path")]
    pub output: Option<PathBuf>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// A single reason a spec cannot run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn violation(field: &str, message: impl Into<String>) -> Violation {
    Violation {
        field: field.to_string(),
        message: message.into(),
    }
}

// Parameter schemas. Every field has a default so minimal specs stay short.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitTuningParams {
    /// CSV with `current_ma, delta_f_mhz` columns. Without it the device's
    /// own tuning law is sampled.
    pub data: Option<PathBuf>,
    pub f0: Option<f64>,
    /// Upper end of the synthetic current grid; defaults to `i_critical`.
    pub i_max: Option<f64>,
    pub points: usize,
    /// Relative Gaussian noise added to synthetic data.
    pub noise: f64,
}

impl Default for FitTuningParams {
    fn default() -> Self {
        Self {
            data: None,
            f0: None,
            i_max: None,
            points: 101,
            noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct S21Params {
    /// Defaults to ±5 linewidths around the biased resonance.
    pub f_start: Option<f64>,
    pub f_stop: Option<f64>,
    pub points: usize,
    pub bias_current: f64,
}

impl Default for S21Params {
    fn default() -> Self {
        Self {
            f_start: None,
            f_stop: None,
            points: 2001,
            bias_current: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneTimeParams {
    /// Target shift in Hz (negative).
    pub target_delta_f: f64,
    /// Overrides the device lag.
    pub lag: Option<f64>,
    /// Trace length; defaults to the settle window.
    pub duration: Option<f64>,
}

impl Default for TuneTimeParams {
    fn default() -> Self {
        Self {
            target_delta_f: -31.2e6,
            lag: None,
            duration: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldSweepParams {
    pub bias_current: f64,
    pub pulses: PulseStyle,
    /// Sweep centre in tesla; defaults to the expected peak.
    pub center: Option<f64>,
    pub span: f64,
    pub points: usize,
    pub misalignment_deg: f64,
    pub tau: f64,
    pub spin: SpinSystemConfig,
}

impl Default for FieldSweepParams {
    fn default() -> Self {
        Self {
            bias_current: 0.0,
            pulses: PulseStyle::Adiabatic,
            center: None,
            span: 0.4e-3,
            points: 161,
            misalignment_deg: 0.0,
            tau: 60e-6,
            spin: SpinSystemConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    None,
    Compensated,
    Uncompensated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct T2Params {
    pub tau_start: f64,
    pub tau_stop: f64,
    pub points: usize,
    pub bias: BiasMode,
    pub bias_current: f64,
    pub lobe: f64,
    /// Relative noise on the echo amplitudes, seeded.
    pub noise: f64,
    pub misalignment_deg: f64,
    pub spatial_ny: usize,
    pub spatial_nz: usize,
    pub line_nodes: usize,
    pub spin: SpinSystemConfig,
}

impl Default for T2Params {
    fn default() -> Self {
        Self {
            tau_start: 20e-6,
            tau_stop: 600e-6,
            points: 16,
            bias: BiasMode::None,
            bias_current: 4.9e-3,
            lobe: 10e-6,
            noise: 0.01,
            misalignment_deg: 4.7,
            spatial_ny: 8,
            spatial_nz: 4,
            line_nodes: 8,
            spin: SpinSystemConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeerMode {
    Analytic,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeerParams {
    pub mode: DeerMode,
    pub t_start: f64,
    pub t_stop: f64,
    pub points: usize,
    pub config: DeerConfig,
    pub full: FullModeOptions,
    pub spin: SpinSystemConfig,
}

impl Default for DeerParams {
    fn default() -> Self {
        Self {
            mode: DeerMode::Analytic,
            t_start: 6e-6,
            t_stop: 24e-6,
            points: 10,
            config: DeerConfig::default(),
            full: FullModeOptions::default(),
            spin: SpinSystemConfig::default(),
        }
    }
}

fn parse_params<T: DeserializeOwned>(params: &Map<String, Value>) -> std::result::Result<T, String> {
    serde_json::from_value(Value::Object(params.clone())).map_err(|e| e.to_string())
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
        let mut spec = Self::from_json(&text).map_err(|e| e.context(path.display().to_string()))?;
        spec.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serialises")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn device(&self) -> Result<Device> {
        if Device::builtin_names().any(|n| n == self.device) {
            Device::builtin(&self.device)
        } else {
            Device::load(self.resolve(Path::new(&self.device)))
        }
    }

    /// Applies `key=value` with a dotted key such as
    /// `parameters.bias_current=4mA`. Values are read as JSON when possible,
    /// then as numbers with SI suffixes, then as plain strings. The result
    /// must still parse against the schema.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::InvalidInput(format!("override '{assignment}' is not key=value")))?;
        let value = parse_override_value(raw.trim());
        let mut doc = serde_json::to_value(&*self)?;
        let mut node = &mut doc;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for (k, part) in parts.iter().enumerate() {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| Error::InvalidInput(format!("'{key}': '{part}' is not inside an object")))?;
            if k + 1 == parts.len() {
                obj.insert(part.to_string(), value.clone());
                break;
            }
            node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
        }
        let base = std::mem::take(&mut self.base_dir);
        let mut updated: Self =
            serde_json::from_value(doc).map_err(|e| Error::InvalidInput(format!("override '{key}': {e}")))?;
        updated.base_dir = base;
        if let Some(v) = updated.check_parameters().into_iter().next() {
            return Err(Error::InvalidInput(format!("override '{key}': {v}")));
        }
        *self = updated;
        Ok(())
    }

    fn check_parameters(&self) -> Vec<Violation> {
        let r = match self.kind {
            ExperimentKind::FitTuning => parse_params::<FitTuningParams>(&self.parameters).map(|_| ()),
            ExperimentKind::S21Sweep => parse_params::<S21Params>(&self.parameters).map(|_| ()),
            ExperimentKind::TuneTime => parse_params::<TuneTimeParams>(&self.parameters).map(|_| ()),
            ExperimentKind::FieldSweep => parse_params::<FieldSweepParams>(&self.parameters).map(|_| ()),
            ExperimentKind::T2Decay => parse_params::<T2Params>(&self.parameters).map(|_| ()),
            ExperimentKind::Deer => parse_params::<DeerParams>(&self.parameters).map(|_| ()),
        };
        r.err().map(|m| violation("parameters", m)).into_iter().collect()
    }
}

fn parse_override_value(raw: &str) -> Value {
    if let Ok(v) = serde_json::from_str::<Value>(raw) {
        return v;
    }
    if let Ok(x) = parse_si(raw) {
        if let Some(n) = serde_json::Number::from_f64(x) {
            return Value::Number(n);
        }
    }
    Value::String(raw.to_string())
}

fn check_current(out: &mut Vec<Violation>, field: &str, current: f64, device: &Device) {
    let ic = device.tuning.i_critical;
    if current.abs() >= ic {
        out.push(violation(
            field,
            format!("{:.4} mA exceeds i_critical {:.4} mA", current.abs() * 1e3, ic * 1e3),
        ));
    }
}

fn check_grid(out: &mut Vec<Violation>, field: &str, start: f64, stop: f64, points: usize) {
    if points < 2 || !(stop > start) {
        out.push(violation(
            field,
            format!("grid [{start:e}, {stop:e}] with {points} points is empty"),
        ));
    }
}

/// Lists every reason `spec` cannot run; empty means runnable.
pub fn validate(spec: &ExperimentSpec) -> Vec<Violation> {
    let device = match spec.device() {
        Ok(d) => d,
        Err(e) => return vec![violation("device", e.to_string())],
    };
    let mut out = spec.check_parameters();
    if !out.is_empty() {
        return out;
    }
    let p = &spec.parameters;
    match spec.kind {
        ExperimentKind::FitTuning => {
            let q: FitTuningParams = parse_params(p).expect("checked");
            if let Some(data) = &q.data {
                if !spec.resolve(data).is_file() {
                    out.push(violation(
                        "parameters.data",
                        format!("file {} does not exist", data.display()),
                    ));
                }
            }
            if let Some(i) = q.i_max {
                check_current(&mut out, "parameters.i_max", i * (1.0 + 1e-12), &device);
            }
            if q.points < 4 {
                out.push(violation("parameters.points", "need at least 4 points"));
            }
            if !(q.noise >= 0.0) {
                out.push(violation("parameters.noise", "must be non-negative"));
            }
        }
        ExperimentKind::S21Sweep => {
            let q: S21Params = parse_params(p).expect("checked");
            if device.network.is_none() {
                out.push(violation("device", "device has no network description"));
            }
            check_current(&mut out, "parameters.bias_current", q.bias_current, &device);
            if let (Some(a), Some(b)) = (q.f_start, q.f_stop) {
                check_grid(&mut out, "parameters.f_start", a, b, q.points);
            }
        }
        ExperimentKind::TuneTime => {
            let q: TuneTimeParams = parse_params(p).expect("checked");
            let reach = device.tuning.max_shift();
            if !(q.target_delta_f < 0.0) || q.target_delta_f < reach {
                out.push(violation(
                    "parameters.target_delta_f",
                    format!("must lie in ({:.3} MHz, 0)", reach * 1e-6),
                ));
            }
            if q.lag.is_some_and(|l| !(l >= 0.0)) {
                out.push(violation("parameters.lag", "must be non-negative"));
            }
        }
        ExperimentKind::FieldSweep => {
            let q: FieldSweepParams = parse_params(p).expect("checked");
            check_current(&mut out, "parameters.bias_current", q.bias_current, &device);
            if q.points < 3 || !(q.span > 0.0) {
                out.push(violation(
                    "parameters.span",
                    "need a positive span and at least 3 points",
                ));
            }
            if let Err(e) = q.spin.validate() {
                out.push(violation("parameters.spin", e.to_string()));
            }
        }
        ExperimentKind::T2Decay => {
            let q: T2Params = parse_params(p).expect("checked");
            check_grid(&mut out, "parameters.tau_start", q.tau_start, q.tau_stop, q.points);
            if q.bias != BiasMode::None {
                check_current(&mut out, "parameters.bias_current", q.bias_current, &device);
            }
            let setup = SweepSetup::default();
            let min_tau = 0.5 * (setup.adiabatic_duration * 2.0 + setup.acquire_window);
            if q.tau_start <= min_tau {
                out.push(violation(
                    "parameters.tau_start",
                    format!("τ must exceed {:.1} μs to fit the pulses", min_tau * 1e6),
                ));
            }
            if let Err(e) = q.spin.validate() {
                out.push(violation("parameters.spin", e.to_string()));
            }
        }
        ExperimentKind::Deer => {
            let q: DeerParams = parse_params(p).expect("checked");
            let c = &q.config;
            if let Err(e) = c.validate() {
                out.push(violation("parameters.config", e.to_string()));
            }
            if q.t_start < c.t_min {
                out.push(violation(
                    "parameters.t_start",
                    format!("t < t_min ({} μs)", c.t_min * 1e6),
                ));
            }
            if q.t_stop > c.tau - c.pump_duration {
                out.push(violation(
                    "parameters.t_stop",
                    format!("t > τ − pump duration ({:.2} μs)", (c.tau - c.pump_duration) * 1e6),
                ));
            }
            check_grid(&mut out, "parameters.t_start", q.t_start, q.t_stop, q.points.max(2));
            if q.mode == DeerMode::Full {
                match kinet::invert_delta_f(c.pump_offset, &device.tuning) {
                    Ok(i) => check_current(&mut out, "parameters.config.pump_offset", i, &device),
                    Err(e) => out.push(violation("parameters.config.pump_offset", e.to_string())),
                }
            }
        }
    }
    out
}

/// Validates and runs `spec`. Module errors carry the experiment kind as context.
pub fn run(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    let violations = validate(spec);
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(Error::InvalidInput(list.join("; ")));
    }
    let started = Instant::now();
    let device = spec.device()?;
    let mut result = dispatch(spec, &device).map_err(|e| e.context(spec.kind.name()))?;
    result.metadata.experiment = spec.kind.name().to_string();
    result.metadata.device = device.name.clone();
    result.metadata.seed = spec.seed;
    result.metadata.wall_time_s = started.elapsed().as_secs_f64();
    Ok(result)
}

/// Runs `spec` and writes the CSV and sidecar to `out_dir` or the spec's
/// output path. Returns the CSV path.
pub fn run_and_write(spec: &ExperimentSpec, out_dir: Option<&Path>) -> Result<(ExperimentResult, PathBuf)> {
    let result = run(spec)?;
    let path = output_path(spec, out_dir);
    result.write(&path)?;
    Ok((result, path))
}

pub fn output_path(spec: &ExperimentSpec, out_dir: Option<&Path>) -> PathBuf {
    let file = spec
        .output
        .as_ref()
        .and_then(|p| p.file_name().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(format!("{}.csv", spec.kind.name())));
    match (out_dir, &spec.output) {
        (Some(dir), _) => dir.join(file),
        (None, Some(p)) => spec.resolve(p),
        (None, None) => file,
    }
}

fn dispatch(spec: &ExperimentSpec, device: &Device) -> Result<ExperimentResult> {
    let p = &spec.parameters;
    let params_err = |m: String| Error::InvalidInput(m);
    match spec.kind {
        ExperimentKind::FitTuning => run_fit(spec, device, parse_params(p).map_err(params_err)?),
        ExperimentKind::S21Sweep => run_s21(device, parse_params(p).map_err(params_err)?),
        ExperimentKind::TuneTime => run_tune(device, parse_params(p).map_err(params_err)?),
        ExperimentKind::FieldSweep => run_field_sweep(device, parse_params(p).map_err(params_err)?),
        ExperimentKind::T2Decay => run_t2(spec, device, parse_params(p).map_err(params_err)?),
        ExperimentKind::Deer => run_deer(spec, device, parse_params(p).map_err(params_err)?),
    }
}

fn run_fit(spec: &ExperimentSpec, device: &Device, q: FitTuningParams) -> Result<ExperimentResult> {
    let f0 = q.f0.unwrap_or(device.tuning.f0);
    let data = match &q.data {
        Some(path) => {
            let path = spec.resolve(path);
            let text =
                std::fs::read_to_string(&path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
            TuningDataset::from_csv(&text)?
        }
        None => {
            let i_max = q.i_max.unwrap_or(device.tuning.i_critical * (1.0 - 1e-9));
            let clean = TuningDataset::synthetic(&device.tuning, i_max, q.points);
            if q.noise > 0.0 {
                let mut rng = crate::rng::stream(spec.seed, "protocol.fit_noise", 0);
                let normal = Normal::new(0.0, q.noise).map_err(|e| Error::InvalidInput(e.to_string()))?;
                let pts = clean
                    .points
                    .iter()
                    .map(|&(i, d)| (i, d * (1.0 + normal.sample(&mut rng))))
                    .collect();
                TuningDataset::new(pts)?
            } else {
                clean
            }
        }
    };
    let fit = kinet::fit_tuning_params(&data, f0)?;
    let mut out = ExperimentResult::new("current_ma", &["delta_f_mhz", "fit_delta_f_mhz"]);
    for &(i, d) in &data.points {
        let model = -f0 * ((i / fit.i2_star).powi(2) + (i / fit.i4_star).powi(4));
        out.push_row(vec![i * 1e3, d * 1e-6, model * 1e-6])?;
    }
    let extra = &mut out.metadata.extra;
    extra.insert("f0_hz".into(), f0.into());
    extra.insert("i2_star_a".into(), fit.i2_star.into());
    extra.insert("i4_star_a".into(), fit.i4_star.into());
    extra.insert("i2_star_stderr_a".into(), fit.i2_stderr().into());
    extra.insert("i4_star_stderr_a".into(), fit.i4_stderr().into());
    extra.insert("residual_rms_hz".into(), fit.residual_rms.into());
    Ok(out)
}

fn run_s21(device: &Device, q: S21Params) -> Result<ExperimentResult> {
    let net = device
        .network
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("device has no network description".into()))?;
    let t = &device.tuning;
    let shift = kinet::delta_f(q.bias_current, t)?;
    let net = net.with_frequency_scale((t.f0 + shift) / t.f0);
    let center = t.f0 + shift;
    let half = 5.0 * center / t.q_loaded;
    let (a, b) = (q.f_start.unwrap_or(center - half), q.f_stop.unwrap_or(center + half));
    let freqs = linspace(a, b, q.points);
    let mut out = ExperimentResult::new("freq_mhz", &["s21_db", "s21_phase_rad"]);
    for row in netmodel::sweep_rows(&net, &freqs) {
        out.push_row(vec![row[0] * 1e-6, row[1], row[2]])?;
    }
    if let Some(qi) = net.internal_q {
        let summary = netmodel::analyze_peak(|f| netmodel::s21(&net, f).norm(), (a, b), qi)?;
        let extra = &mut out.metadata.extra;
        extra.insert("f_res_hz".into(), summary.f_res.into());
        extra.insert("q_loaded".into(), summary.q_loaded.into());
        extra.insert("coupling".into(), summary.coupling.into());
    }
    Ok(out)
}

fn run_tune(device: &Device, q: TuneTimeParams) -> Result<ExperimentResult> {
    let lag = q.lag.unwrap_or(device.lag);
    let t = &device.tuning;
    let sched = biasdyn::step_for_target(q.target_delta_f, t, lag)?;
    let duration = q.duration.unwrap_or_else(|| biasdyn::settle_window(t, lag));
    let trace = biasdyn::cavity_trace(t.f0 + q.target_delta_f, &sched, t, duration)?;
    let tuning_time = biasdyn::tuning_time(&sched, t, q.target_delta_f)?;
    let mut out = ExperimentResult::new("time_ns", &["f_res_mhz", "transmitted_amp"]);
    for row in trace.rows() {
        out.push_row(row)?;
    }
    out.metadata
        .extra
        .insert("tuning_time_ns".into(), (tuning_time * 1e9).into());
    out.metadata.extra.insert("lag_ns".into(), (lag * 1e9).into());
    Ok(out)
}

/// Field at which the line is expected for a given resonator shift.
pub fn expected_peak_field(spin: &SpinSystemConfig, shift: f64) -> f64 {
    spin.p31.line_center_field + shift / spin.p31.gamma_eff
}

fn run_field_sweep(device: &Device, q: FieldSweepParams) -> Result<ExperimentResult> {
    let shift = kinet::delta_f(q.bias_current, &device.tuning)?;
    let center = q.center.unwrap_or_else(|| expected_peak_field(&q.spin, shift));
    let grid = linspace(center - 0.5 * q.span, center + 0.5 * q.span, q.points);
    let setup = SweepSetup {
        tau: q.tau,
        misalignment: q.misalignment_deg.to_radians(),
        ..SweepSetup::default()
    };
    let sweep = spinsim::field_sweep(&q.spin, device, &setup, q.bias_current, q.pulses, &grid)?;
    let (peak, amp) = spinsim::sweep_peak(&sweep)?;
    let mut out = rescale_x(&sweep, "field_mt", 1e3)?;
    out.metadata.extra.insert("peak_field_mt".into(), (peak * 1e3).into());
    out.metadata.extra.insert("peak_amp".into(), amp.into());
    Ok(out)
}

fn run_t2(spec: &ExperimentSpec, device: &Device, q: T2Params) -> Result<ExperimentResult> {
    let setup = SweepSetup {
        misalignment: q.misalignment_deg.to_radians(),
        ..SweepSetup::default()
    };
    let ens = spinsim::layer_ensemble(&q.spin, device, &setup, q.spatial_ny, q.spatial_nz, q.line_nodes);
    let bias = match q.bias {
        BiasMode::None => T2Bias::None,
        BiasMode::Compensated => T2Bias::Compensated {
            current: q.bias_current,
            lobe: q.lobe,
        },
        BiasMode::Uncompensated => T2Bias::Uncompensated {
            current: q.bias_current,
            lobe: q.lobe,
        },
    };
    let taus = linspace(q.tau_start, q.tau_stop, q.points);
    let mut decay = spinsim::t2_decay(&q.spin, device, &setup, &ens, &taus, bias)?;
    add_noise(&mut decay, q.noise, spec.seed);
    let mut out = rescale_x(&decay, "tau_us", 1e6)?;
    match spinsim::fit_t2(&decay) {
        Ok(fit) => {
            out.metadata.extra.insert("t2_us".into(), (fit.t2 * 1e6).into());
            out.metadata
                .extra
                .insert("t2_stderr_us".into(), (fit.stderr * 1e6).into());
        }
        Err(e) => out.warn(format!("T2 fit failed: {e}")),
    }
    Ok(out)
}

/// Adds seeded Gaussian noise of `rel` times the first amplitude to every
/// `echo_amp` value.
pub fn add_noise(decay: &mut ExperimentResult, rel: f64, seed: u64) {
    if !(rel > 0.0) || decay.rows.is_empty() {
        return;
    }
    let k = decay
        .headers()
        .iter()
        .position(|h| *h == "echo_amp")
        .expect("decay has echo_amp");
    let sigma = rel * decay.rows[0][k];
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    for (j, row) in decay.rows.iter_mut().enumerate() {
        let mut rng = crate::rng::stream(seed, "protocol.t2_noise", j as u64);
        row[k] += normal.sample(&mut rng);
    }
}

fn run_deer(spec: &ExperimentSpec, device: &Device, q: DeerParams) -> Result<ExperimentResult> {
    let cfg = DeerConfig {
        seed: spec.seed,
        ..q.config
    };
    let grid = linspace(q.t_start, q.t_stop, q.points.max(2));
    let mut out = match q.mode {
        DeerMode::Analytic => deer::deer_curve(&cfg, &grid)?,
        DeerMode::Full => deer::deer_curve_full(&cfg, device, &q.spin, &SweepSetup::default(), &q.full, &grid)?,
    };
    out.metadata
        .extra
        .insert("flip_fraction".into(), cfg.flip_fraction.into());
    out.metadata.extra.insert(
        "mode".into(),
        match q.mode {
            DeerMode::Analytic => "analytic",
            DeerMode::Full => "full",
        }
        .into(),
    );
    Ok(out)
}

/// Copy of `r` with the x column relabelled and multiplied by `factor`.
pub fn rescale_x(r: &ExperimentResult, label: &str, factor: f64) -> Result<ExperimentResult> {
    let ys: Vec<&str> = r.y_labels.iter().map(String::as_str).collect();
    let mut out = ExperimentResult::new(label, &ys);
    out.metadata = r.metadata.clone();
    for row in &r.rows {
        let mut row = row.clone();
        row[0] *= factor;
        out.push_row(row)?;
    }
    Ok(out)
}

/// Bias schedule helper exposed for the CLI `tune` subcommand.
pub fn tuning_step(device: &Device, target: f64) -> Result<BiasSchedule> {
    biasdyn::step_for_target(target, &device.tuning, device.lag)
}

/// Pump shape names accepted on the command line.
pub fn parse_pump(s: &str) -> Option<PumpShape> {
    match s {
        "rect" => Some(PumpShape::Rect),
        "adiabatic" => Some(PumpShape::Adiabatic),
        _ => None,
    }
}

/// Compensation names accepted on the command line.
pub fn parse_compensation(s: &str) -> Option<CompensationKind> {
    match s {
        "symmetric_pair" => Some(CompensationKind::SymmetricPair),
        "bipolar" => Some(CompensationKind::Bipolar),
        _ => None,
    }
}
