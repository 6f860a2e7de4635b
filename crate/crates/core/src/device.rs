// SPDX-License-Identifier: Apache-2.0

//! Device description files: tuning law, bias-circuit lag, CPW geometry and
//! an optional calibrated transmission network.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fieldmap::CpwGeometry;
use crate::kinet::DeviceTuningParams;
use crate::netmodel::NetworkSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Device {
    pub name: String,
    pub tuning: DeviceTuningParams,
    /// First-order bias-circuit time constant in seconds.
    pub lag: f64,
    pub geometry: CpwGeometry,
    #[serde(default)]
    pub network: Option<NetworkSpec>,
    /// Free-text caveats, e.g. which values are approximate.
    #[serde(default)]
    pub notes: Vec<String>,
}

const BUILTIN: [(&str, &str); 3] = [
    ("1p5um", include_str!("../../../data/devices/1p5um.json")),
    ("2p5um", include_str!("../../../data/devices/2p5um.json")),
    ("4um", include_str!("../../../data/devices/4um.json")),
];

impl Device {
    pub fn validate(&self) -> Result<()> {
        self.tuning.validate()?;
        if !(self.lag >= 0.0 && self.lag.is_finite()) {
            return Err(Error::InvalidInput("lag must be non-negative".into()));
        }
        self.geometry.validate()?;
        if let Some(net) = &self.network {
            net.validate().map_err(|e| e.context("network"))?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let d: Self = serde_json::from_str(text)?;
        d.validate()?;
        Ok(d)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
        Self::from_json(&text).map_err(|e| e.context(path.display().to_string()))
    }

    /// One of the shipped devices: `1p5um`, `2p5um` or `4um`.
    pub fn builtin(name: &str) -> Result<Self> {
        let (_, text) = BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown device '{name}'")))?;
        Self::from_json(text).map_err(|e| e.context(format!("builtin device {name}")))
    }

    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN.iter().map(|(n, _)| *n)
    }
}
