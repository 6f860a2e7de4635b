// SPDX-License-Identifier: Apache-2.0

//! Simulation and analysis toolkit for bias-current-tunable superconducting
//! coplanar-waveguide ESR resonators.
//!
//! The crate is organised by physical subsystem:
//!
//! * [`netmodel`]: ABCD-matrix transmission model of the stepped-impedance
//!   (photonic bandgap) resonator and resonance extraction.
//! * [`kinet`]: kinetic-inductance tuning law, its inverse and parameter fits.
//! * [`biasdyn`]: bias-current schedules, bias-circuit lag and the driven
//!   cavity response used to measure tuning times.
//! * [`spinsim`]: rotating-frame Bloch propagation, pulse shapes, Hahn echoes,
//!   field sweeps and T₂ fits.
//! * [`fieldmap`]: bias and microwave field maps of the CPW cross-section.
//! * [`deer`]: two-species dipolar DEER simulation.
//! * [`protocol`]: experiment specs, validation and orchestration.

pub mod biasdyn;
pub mod deer;
pub mod device;
pub mod error;
pub mod fieldmap;
pub mod fit;
pub mod kinet;
pub mod netmodel;
pub mod numeric;
pub mod protocol;
pub mod result;
pub mod rng;
pub mod spinsim;
pub mod units;

pub use biasdyn::{BiasElement, BiasSchedule, CavityTrace};
pub use deer::{DeerConfig, PartnerSet};
pub use device::Device;
pub use error::{Error, Result, Warning};
pub use fieldmap::{CpwGeometry, FieldSample, Region};
pub use kinet::{DeviceTuningParams, TuningDataset, TuningFit};
pub use netmodel::{LineSegment, NetworkSpec, ResonanceSummary};
pub use protocol::{ExperimentKind, ExperimentSpec, Violation};
pub use result::ExperimentResult;
pub use spinsim::{Ensemble, PulseElement, PulseKind, Species, SpinPacket, SpinSystemConfig};

/// Vacuum permeability in T·m/A.
pub const MU0: f64 = 4.0e-7 * std::f64::consts::PI;
/// Speed of light in m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Reduced Planck constant in J·s.
pub const HBAR: f64 = 1.054_571_817e-34;

/// Toolkit version recorded in result metadata.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
