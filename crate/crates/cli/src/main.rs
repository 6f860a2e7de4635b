// SPDX-License-Identifier: Apache-2.0

//! `spinres`: run resonator and spin experiments from JSON specs.
//!
//! Exit codes: 0 success, 2 invalid spec, 3 runtime failure, 64 bad usage.

mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};
use spinres_core::fieldmap::{self, Region};
use spinres_core::protocol;
use spinres_core::units::parse_si;
use spinres_core::{Device, ExperimentKind, ExperimentResult, ExperimentSpec};

const EXIT_INVALID: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_USAGE: u8 = 64;

#[derive(Debug, Parser)]
#[command(name = "spinres", version, about = "Tunable ESR resonator and spin-echo simulations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the kinetic-inductance tuning law to measured or synthetic shifts.
    Fit {
        #[command(flatten)]
        run: RunArgs,
        /// CSV with `current_ma, delta_f_mhz` columns.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Unbiased resonance frequency (SI suffixes accepted).
        #[arg(long, value_parser = si)]
        f0: Option<f64>,
    },
    /// Transmission sweep of the calibrated network.
    S21 {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Cavity response to a bias step and the resulting tuning time.
    Tune {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Echo-detected field sweep.
    Fieldsweep {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Hahn-echo decay and T2 fit.
    T2 {
        #[command(flatten)]
        run: RunArgs,
    },
    /// DEER on/off-resonance curves.
    Deer {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Bias and microwave field map of the CPW cross-section.
    Fieldmap(FieldmapArgs),
    /// Check a spec and list every violation.
    Validate {
        #[arg(long)]
        spec: PathBuf,
        /// Override a parameter, e.g. `parameters.t_start=4us`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Render a result CSV as an SVG line plot.
    Plot {
        csv: PathBuf,
        /// Output SVG path; defaults to the CSV path with an .svg extension.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Experiment spec; without one the defaults for the subcommand are used.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Builtin device name or device JSON path when no spec is given.
    #[arg(long)]
    device: Option<String>,
    /// Override a spec value, e.g. `parameters.bias_current=4mA`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory for the CSV, sidecar and SVG.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker thread cap.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// deer: analytic|full; fieldsweep: adiabatic|rect; t2: none|compensated|uncompensated.
    #[arg(long)]
    mode: Option<String>,
    /// Skip the SVG.
    #[arg(long)]
    no_plot: bool,
}

#[derive(Debug, Args)]
struct FieldmapArgs {
    #[arg(long, default_value = "4um")]
    device: String,
    /// Drive power in dBm; defaults to the device anchor power.
    #[arg(long, value_parser = si, allow_hyphen_values = true)]
    power: Option<f64>,
    /// Half-width of the map; defaults to the outer gap edge plus one gap.
    #[arg(long, value_parser = si)]
    y_half: Option<f64>,
    #[arg(long, default_value_t = 81)]
    ny: usize,
    #[arg(long, default_value_t = 5)]
    nz: usize,
    /// Bias current for the broadening summary (SI suffixes accepted).
    #[arg(long, value_parser = si, default_value = "4mA")]
    current: f64,
    /// Field misalignment in degrees for the broadening summary.
    #[arg(long, value_parser = si, default_value = "4.7", allow_hyphen_values = true)]
    misalignment_deg: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

fn si(s: &str) -> Result<f64, String> {
    parse_si(s).map_err(|e| e.to_string())
}

/// Failure with the exit code it maps to.
struct Fail {
    code: u8,
    message: String,
}

impl Fail {
    fn invalid(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INVALID,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }

    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn execute(command: Command) -> Result<(), Fail> {
    match command {
        Command::Fit { run, data, f0 } => {
            let mut extra = Map::new();
            if let Some(d) = data {
                let abs = std::env::current_dir().map(|c| c.join(&d)).unwrap_or(d);
                extra.insert("data".into(), json!(abs));
            }
            if let Some(f) = f0 {
                extra.insert("f0".into(), json!(f));
            }
            run_experiment(ExperimentKind::FitTuning, run, extra)
        }
        Command::S21 { run } => run_experiment(ExperimentKind::S21Sweep, run, Map::new()),
        Command::Tune { run } => run_experiment(ExperimentKind::TuneTime, run, Map::new()),
        Command::Fieldsweep { run } => run_experiment(ExperimentKind::FieldSweep, run, Map::new()),
        Command::T2 { run } => run_experiment(ExperimentKind::T2Decay, run, Map::new()),
        Command::Deer { run } => run_experiment(ExperimentKind::Deer, run, Map::new()),
        Command::Fieldmap(args) => run_fieldmap(args),
        Command::Validate { spec, set } => {
            let mut spec = load_spec(&spec)?;
            for s in &set {
                spec.apply_override(s).map_err(|e| Fail::invalid(e.to_string()))?;
            }
            let violations = protocol::validate(&spec);
            if violations.is_empty() {
                println!("ok: {} spec is runnable", spec.kind.name());
                Ok(())
            } else {
                for v in &violations {
                    println!("violation: {v}");
                }
                Err(Fail::invalid(format!("{} violation(s)", violations.len())))
            }
        }
        Command::Plot { csv, out } => {
            let result = ExperimentResult::read(&csv).map_err(|e| Fail::invalid(e.to_string()))?;
            let svg_path = out.unwrap_or_else(|| csv.with_extension("svg"));
            write_svg(&result, &svg_path, &title_for(&csv))?;
            println!("{}", svg_path.display());
            Ok(())
        }
    }
}

fn load_spec(path: &Path) -> Result<ExperimentSpec, Fail> {
    ExperimentSpec::load(path).map_err(|e| Fail::invalid(e.to_string()))
}

fn set_threads(threads: Option<usize>) -> Result<(), Fail> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Fail::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Fail::runtime(e.to_string()))?;
    }
    Ok(())
}

fn mode_key(kind: ExperimentKind) -> Option<&'static str> {
    match kind {
        ExperimentKind::Deer => Some("mode"),
        ExperimentKind::FieldSweep => Some("pulses"),
        ExperimentKind::T2Decay => Some("bias"),
        _ => None,
    }
}

fn run_experiment(kind: ExperimentKind, args: RunArgs, extra: Map<String, Value>) -> Result<(), Fail> {
    set_threads(args.threads)?;
    let mut spec = match &args.spec {
        Some(path) => {
            let spec = load_spec(path)?;
            if spec.kind != kind {
                return Err(Fail::invalid(format!(
                    "spec kind '{}' does not match subcommand '{}'",
                    spec.kind.name(),
                    kind.name()
                )));
            }
            spec
        }
        None => ExperimentSpec {
            kind,
            device: args.device.clone().unwrap_or_else(|| "4um".into()),
            parameters: Map::new(),
            seed: 0,
            output: None,
            base_dir: PathBuf::new(),
        },
    };
    if let (Some(_), Some(d)) = (&args.spec, &args.device) {
        spec.device = d.clone();
    }
    spec.parameters.extend(extra);
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(mode) = &args.mode {
        let key = mode_key(kind).ok_or_else(|| Fail::usage(format!("--mode is not used by {}", kind.name())))?;
        spec.apply_override(&format!("parameters.{key}={mode}"))
            .map_err(|e| Fail::invalid(e.to_string()))?;
    }
    for s in &args.set {
        spec.apply_override(s).map_err(|e| Fail::invalid(e.to_string()))?;
    }

    let violations = protocol::validate(&spec);
    if !violations.is_empty() {
        for v in &violations {
            eprintln!("violation: {v}");
        }
        return Err(Fail::invalid(format!("{} violation(s)", violations.len())));
    }
    let (result, csv) =
        protocol::run_and_write(&spec, args.out.as_deref()).map_err(|e| Fail::runtime(e.to_string()))?;
    let mut summary = Map::new();
    summary.insert("csv".into(), json!(csv));
    if !args.no_plot {
        let svg = csv.with_extension("svg");
        write_svg(&result, &svg, &title_for(&csv))?;
        summary.insert("svg".into(), json!(svg));
    }
    for (k, v) in &result.metadata.extra {
        summary.insert(k.clone(), v.clone());
    }
    if !result.metadata.warnings.is_empty() {
        summary.insert("warnings".into(), json!(result.metadata.warnings));
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&Value::Object(summary)).expect("summary serialises")
    );
    Ok(())
}

fn run_fieldmap(args: FieldmapArgs) -> Result<(), Fail> {
    set_threads(args.threads)?;
    let device = if Device::builtin_names().any(|n| n == args.device) {
        Device::builtin(&args.device)
    } else {
        Device::load(&args.device)
    }
    .map_err(|e| Fail::invalid(e.to_string()))?;
    if !(args.ny >= 2 && args.nz >= 2) {
        return Err(Fail::usage("--ny and --nz must be at least 2"));
    }
    let geom = &device.geometry;
    let power = args.power.unwrap_or(geom.b1_anchor_dbm);
    let y_half = args.y_half.unwrap_or(0.5 * geom.center_width + 2.0 * geom.gap);
    let theta = args.misalignment_deg.to_radians();
    let broadening = |region| fieldmap::broadening_vs_misalignment(geom, args.current, theta, region);
    let pin = broadening(Region::AbovePin).map_err(|e| Fail::invalid(e.to_string()))?;
    let gap = broadening(Region::AboveGap).map_err(|e| Fail::invalid(e.to_string()))?;

    let mut result = ExperimentResult::new("y_um", &["z_um", "bbias_x_uT_per_mA", "bbias_y_uT_per_mA", "b1_uT"]);
    for row in fieldmap::b1_map(geom, power, y_half, args.ny, args.nz) {
        result.push_row(row).map_err(|e| Fail::runtime(e.to_string()))?;
    }
    result.metadata.experiment = "fieldmap".into();
    result.metadata.device = device.name.clone();
    let extra = &mut result.metadata.extra;
    extra.insert("power_dbm".into(), json!(power));
    extra.insert("current_a".into(), json!(args.current));
    extra.insert("misalignment_deg".into(), json!(args.misalignment_deg));
    extra.insert("fwhm_above_pin_t".into(), json!(pin.fwhm));
    extra.insert("fwhm_above_gap_t".into(), json!(gap.fwhm));

    let dir = args.out.unwrap_or_default();
    let csv = dir.join(format!("fieldmap_{}.csv", device.name));
    result.write(&csv).map_err(|e| Fail::runtime(e.to_string()))?;
    let mut summary = result.metadata.extra.clone();
    summary.insert("csv".into(), json!(csv));
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).expect("summary serialises")
    );
    Ok(())
}

fn title_for(csv: &Path) -> String {
    csv.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn write_svg(result: &ExperimentResult, path: &Path, title: &str) -> Result<(), Fail> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Fail::runtime(e.to_string()))?;
    }
    std::fs::write(path, plot::render(result, title)).map_err(|e| Fail::runtime(format!("{}: {e}", path.display())))
}
