//! Human-editable TOML description of a simulated program.
//!
//! ```toml
//! group = "sm"
//! seed = 7
//!
//! [[kernels]]
//! name = "scale"
//! grid = [64, 1, 1]
//! block = [128, 1, 1]
//! input_size = 8192
//! config_id = 0
//!
//! [[kernels.phases]]
//! windows = 6
//! rates = { inst_executed = 900.0, global_load = 300.0, global_store = 120.0 }
//! ```
//!
//! A document names either a bundled `preset` or its own `kernels`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::presets::{marker_amplitude, GroupKind, Preset, DEFAULT_DISPERSION, DEFAULT_GAP_WINDOWS, DEFAULT_LEAD_JITTER};
use super::{GpuSimError, KernelProfile, Phase, ProgramSpec};
use crate::model::{DeviceConfig, KernelMetadata};
use crate::segmentation::MarkerSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseDoc {
    pub windows: u32,
    #[serde(default = "default_dispersion")]
    pub dispersion: f64,
    pub rates: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelDoc {
    pub name: String,
    #[serde(default = "one")]
    pub occupancy: f64,
    pub grid: [u32; 3],
    pub block: [u32; 3],
    pub input_size: u64,
    pub config_id: u32,
    pub phases: Vec<PhaseDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProgramDoc {
    #[serde(default)]
    pub preset: Option<Preset>,
    #[serde(default = "default_group")]
    pub group: GroupKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub gap_windows: Option<u32>,
    #[serde(default)]
    pub lead_jitter: Option<u32>,
    #[serde(default)]
    pub kernels: Vec<KernelDoc>,
    /// Marker amplitude overrides keyed by config id.
    #[serde(default)]
    pub amplitudes: BTreeMap<String, u64>,
}

fn default_dispersion() -> f64 {
    DEFAULT_DISPERSION
}

fn one() -> f64 {
    1.0
}

fn default_group() -> GroupKind {
    GroupKind::Sm
}

impl ProgramDoc {
    pub fn to_program(&self, device: &DeviceConfig) -> Result<ProgramSpec, GpuSimError> {
        let err = |m: String| GpuSimError::Document(m);
        let mut program = match (&self.preset, self.kernels.is_empty()) {
            (Some(p), true) => p.program(self.group, device, self.seed),
            (None, false) => {
                let kernels: Vec<_> = self
                    .kernels
                    .iter()
                    .map(|k| {
                        let phases = k
                            .phases
                            .iter()
                            .map(|p| Phase { duration_windows: p.windows, rates: p.rates.clone(), dispersion: p.dispersion })
                            .collect();
                        let meta = KernelMetadata::new(k.name.clone(), k.grid, k.block, k.input_size, k.config_id);
                        (KernelProfile { name: k.name.clone(), phases, occupancy: k.occupancy }, meta)
                    })
                    .collect();
                let amplitudes = kernels.iter().map(|(_, m)| (m.config_id, marker_amplitude(m.config_id))).collect();
                ProgramSpec {
                    group: self.group.event_group(device),
                    kernels,
                    marker: MarkerSpec::new(self.group.marker_event(device), 1, amplitudes)
                        .map_err(|e| err(e.to_string()))?,
                    seed: self.seed,
                    gap_windows: DEFAULT_GAP_WINDOWS,
                    lead_jitter: DEFAULT_LEAD_JITTER,
                }
            }
            (Some(_), false) => return Err(err("`preset` and `kernels` are mutually exclusive".into())),
            (None, true) => return Err(err("either `preset` or `kernels` is required".into())),
        };
        for (id, amp) in &self.amplitudes {
            let id: u32 = id.parse().map_err(|_| err(format!("amplitude key `{id}` is not a config id")))?;
            program.marker.expected_amplitude.insert(id, *amp);
        }
        program.marker.validate().map_err(|e| err(e.to_string()))?;
        if let Some(g) = self.gap_windows {
            program.gap_windows = g;
        }
        if let Some(j) = self.lead_jitter {
            program.lead_jitter = j;
        }
        program.validate()?;
        Ok(program)
    }
}

pub fn load_program_doc(text: &str, device: &DeviceConfig) -> Result<ProgramSpec, GpuSimError> {
    let doc: ProgramDoc = toml::from_str(text).map_err(|e| GpuSimError::Document(e.to_string()))?;
    doc.to_program(device)
}
