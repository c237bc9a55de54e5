//! Bundled workloads named after common GPU benchmarks.
//!
//! The rate tables are invented. Each kernel is a short sequence of phases
//! described by per-SM instruction, load and store rates plus a DRAM miss
//! fraction; the memory-partition counters are derived from those: every
//! SM-group instance sees `group_size × load` L2 read queries, `group_size ×
//! store` write queries, and the missing fraction of reads split 55/45 over
//! the two frame-buffer sub-partitions.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{KernelProfile, Phase, ProgramSpec};
use crate::model::{Category, DeviceConfig, EventGroup, EventSpec, KernelMetadata};
use crate::segmentation::MarkerSpec;

pub const INST_EXECUTED: &str = "inst_executed";
pub const GLOBAL_LOAD: &str = "global_load";
pub const GLOBAL_STORE: &str = "global_store";
pub const GLOBAL_ATOM_CAS: &str = "global_atom_cas";
pub const FB_SUBP0_READ: &str = "fb_subp0_read_sectors";
pub const FB_SUBP1_READ: &str = "fb_subp1_read_sectors";
pub const L2_READ_QUERIES: &str = "l2_subp0_total_read_sector_queries";
pub const L2_WRITE_QUERIES: &str = "l2_subp0_total_write_sector_queries";
pub const ATOM_COUNT: &str = "atom_count";

/// Memory-side counters an attacker on DRAM shows up in.
pub const MEMORY_EVENTS: [&str; 4] = [FB_SUBP0_READ, FB_SUBP1_READ, L2_READ_QUERIES, L2_WRITE_QUERIES];

/// Count dispersion of every preset phase.
pub const DEFAULT_DISPERSION: f64 = 0.05;
/// Idle windows between launches.
pub const DEFAULT_GAP_WINDOWS: u32 = 16;
/// Upper bound of the idle lead-in before the first launch.
pub const DEFAULT_LEAD_JITTER: u32 = 15;

/// CAS total of the marker burst for `config_id`: geometric steps of 1.25
/// keep neighbouring amplitudes separable at a 10% decode tolerance.
pub fn marker_amplitude(config_id: u32) -> u64 {
    (160.0 * 1.25f64.powi(config_id as i32)).round() as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    /// Per-SM instruction and global-memory counters, marked by CAS.
    Sm,
    /// Per-SM-group memory-partition counters, marked by the atomic count.
    Memory,
}

impl GroupKind {
    pub fn marker_event(self, device: &DeviceConfig) -> EventSpec {
        match self {
            GroupKind::Sm => EventSpec::new(GLOBAL_ATOM_CAS, Category::Atomic, device.num_sms),
            GroupKind::Memory => EventSpec::new(ATOM_COUNT, Category::Atomic, device.num_sm_groups()),
        }
    }

    pub fn event_group(self, device: &DeviceConfig) -> EventGroup {
        let events = match self {
            GroupKind::Sm => {
                let g = device.num_sms;
                vec![
                    EventSpec::new(INST_EXECUTED, Category::Sm, g),
                    EventSpec::new(GLOBAL_LOAD, Category::GlobalMemory, g),
                    EventSpec::new(GLOBAL_STORE, Category::GlobalMemory, g),
                    self.marker_event(device),
                ]
            }
            GroupKind::Memory => {
                let g = device.num_sm_groups();
                vec![
                    EventSpec::new(FB_SUBP0_READ, Category::Memory, g),
                    EventSpec::new(FB_SUBP1_READ, Category::Memory, g),
                    EventSpec::new(L2_READ_QUERIES, Category::L2, g),
                    EventSpec::new(L2_WRITE_QUERIES, Category::L2, g),
                    self.marker_event(device),
                ]
            }
        };
        EventGroup::new(events).expect("preset groups are well formed")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "vecAdd")]
    VecAdd,
    #[serde(rename = "matMul")]
    MatMul,
    #[serde(rename = "histogram")]
    Histogram,
    #[serde(rename = "bitonicSort")]
    BitonicSort,
    #[serde(rename = "AlexNet-8")]
    AlexNet,
    #[serde(rename = "CifarNet-8")]
    CifarNet,
}

impl Preset {
    pub const ALL: [Preset; 6] =
        [Preset::VecAdd, Preset::MatMul, Preset::Histogram, Preset::BitonicSort, Preset::AlexNet, Preset::CifarNet];

    pub fn name(self) -> &'static str {
        match self {
            Preset::VecAdd => "vecAdd",
            Preset::MatMul => "matMul",
            Preset::Histogram => "histogram",
            Preset::BitonicSort => "bitonicSort",
            Preset::AlexNet => "AlexNet-8",
            Preset::CifarNet => "CifarNet-8",
        }
    }

    /// The preset whose kernels are short relative to a sampling window.
    pub fn is_fast(self) -> bool {
        self == Preset::BitonicSort
    }

    pub fn kernels(self, device: &DeviceConfig) -> Vec<(KernelProfile, KernelMetadata)> {
        let b = Builder { group_size: device.sm_group_size as f64 };
        match self {
            Preset::VecAdd => {
                let k = b.kernel(
                    "vecAdd",
                    1.0,
                    &[(2, 400., 200., 40., 0.9), (6, 900., 600., 100., 0.9), (4, 500., 150., 450., 0.8), (2, 150., 40., 120., 0.7)],
                );
                let meta = KernelMetadata::new("vecAdd", [4096, 1, 1], [256, 1, 1], 1 << 20, 0);
                vec![(k, meta); 8]
            }
            Preset::MatMul => {
                let k = b.kernel(
                    "matMul",
                    1.0,
                    &[
                        (4, 2000., 800., 20., 0.6),
                        (8, 6000., 200., 10., 0.1),
                        (4, 2200., 750., 30., 0.5),
                        (8, 5600., 180., 15., 0.1),
                        (3, 800., 50., 600., 0.2),
                    ],
                );
                let meta = KernelMetadata::new("matMul", [32, 32, 1], [16, 16, 1], 512 * 512, 0);
                vec![(k, meta); 6]
            }
            Preset::Histogram => {
                let hist = b.kernel("histogram256", 1.0, &[(3, 1500., 700., 30., 0.8), (6, 2500., 400., 300., 0.4), (3, 900., 100., 500., 0.2)]);
                let merge = b.kernel("mergeHistogram256", 0.5, &[(3, 300., 400., 20., 0.6), (4, 600., 250., 300., 0.4), (2, 200., 120., 80., 0.4)]);
                let hm = KernelMetadata::new("histogram256", [240, 1, 1], [192, 1, 1], 1 << 22, 0);
                let mm = KernelMetadata::new("mergeHistogram256", [256, 1, 1], [256, 1, 1], 240 * 256, 1);
                (0..4).flat_map(|_| [(hist.clone(), hm.clone()), (merge.clone(), mm.clone())]).collect()
            }
            Preset::BitonicSort => {
                // Compare/exchange stages alternating between shared-memory work and global traffic.
                let shared = b.kernel(
                    "bitonicSortShared",
                    1.0,
                    &[
                        (2, 1500., 500., 100., 0.6),
                        (2, 600., 900., 480., 0.6),
                        (2, 1700., 450., 120., 0.5),
                        (2, 700., 850., 520., 0.5),
                        (2, 1600., 520., 90., 0.5),
                        (2, 650., 880., 500., 0.4),
                        (2, 1550., 480., 110., 0.4),
                        (2, 500., 300., 700., 0.3),
                    ],
                );
                let global = b.kernel(
                    "bitonicMergeGlobal",
                    1.0,
                    &[
                        (3, 400., 1000., 200., 0.9),
                        (2, 1200., 300., 600., 0.7),
                        (3, 450., 950., 250., 0.9),
                        (2, 1100., 280., 650., 0.7),
                        (3, 420., 980., 220., 0.8),
                        (3, 1000., 200., 700., 0.6),
                    ],
                );
                let sm = KernelMetadata::new("bitonicSortShared", [512, 1, 1], [512, 1, 1], 1 << 20, 0);
                let gm = KernelMetadata::new("bitonicMergeGlobal", [1024, 1, 1], [256, 1, 1], 1 << 20, 1);
                let mut v = vec![(shared.clone(), sm.clone())];
                for _ in 0..4 {
                    v.push((global.clone(), gm.clone()));
                    v.push((shared.clone(), sm.clone()));
                }
                v.push((global, gm));
                v
            }
            Preset::AlexNet => vec![
                b.conv("conv1", 4, 1.6, [55, 55, 96], 227 * 227 * 3, 0),
                b.conv("conv2", 3, 1.3, [27, 27, 256], 27 * 27 * 96, 1),
                b.conv("conv3", 3, 1.0, [13, 13, 384], 13 * 13 * 256, 2),
                b.conv("conv4", 2, 0.9, [13, 13, 384], 13 * 13 * 384, 3),
                b.conv("conv5", 2, 0.8, [13, 13, 256], 13 * 13 * 384, 4),
                b.fc("fc6", 4, 1.0, 9216, 5),
                b.fc("fc7", 3, 0.8, 4096, 6),
                b.fc("fc8", 2, 0.5, 4096, 7),
            ],
            Preset::CifarNet => vec![
                b.conv("conv1", 3, 1.2, [32, 32, 64], 32 * 32 * 3, 0),
                b.pool("pool1", 4, [16, 16, 64], 32 * 32 * 64, 1),
                b.conv("conv2", 3, 1.0, [16, 16, 64], 16 * 16 * 64, 2),
                b.pool("pool2", 4, [8, 8, 64], 16 * 16 * 64, 3),
                b.fc("fc3", 3, 0.9, 8 * 8 * 64, 4),
                b.fc("fc4", 2, 0.7, 384, 5),
                b.fc("fc5", 2, 0.4, 192, 6),
                b.softmax("softmax", [1, 1, 1], 10, 7),
            ],
        }
    }

    pub fn program(self, kind: GroupKind, device: &DeviceConfig, seed: u64) -> ProgramSpec {
        let kernels = self.kernels(device);
        let amplitudes: BTreeMap<u32, u64> =
            kernels.iter().map(|(_, m)| (m.config_id, marker_amplitude(m.config_id))).collect();
        ProgramSpec {
            group: kind.event_group(device),
            kernels,
            marker: MarkerSpec::new(kind.marker_event(device), 1, amplitudes).expect("positive threshold"),
            seed,
            gap_windows: DEFAULT_GAP_WINDOWS,
            lead_jitter: DEFAULT_LEAD_JITTER,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown preset `{s}`"))
    }
}

struct Builder {
    group_size: f64,
}

/// (windows, inst, load, store, miss fraction)
type PhaseRow = (u32, f64, f64, f64, f64);

impl Builder {
    fn phase(&self, (windows, inst, load, store, miss): PhaseRow) -> Phase {
        let g = self.group_size;
        let rates = [
            (INST_EXECUTED, inst),
            (GLOBAL_LOAD, load),
            (GLOBAL_STORE, store),
            (L2_READ_QUERIES, g * load),
            (L2_WRITE_QUERIES, g * store),
            (FB_SUBP0_READ, 0.55 * miss * g * load),
            (FB_SUBP1_READ, 0.45 * miss * g * load),
        ]
        .into_iter()
        .map(|(e, r)| (e.to_string(), r))
        .collect();
        Phase { duration_windows: windows, rates, dispersion: DEFAULT_DISPERSION }
    }

    fn kernel(&self, name: &str, occupancy: f64, rows: &[PhaseRow]) -> KernelProfile {
        KernelProfile { name: name.into(), phases: rows.iter().map(|r| self.phase(*r)).collect(), occupancy }
    }

    /// Convolution: weight fetch, two compute passes around a partial-sum
    /// spill, then write-back. `u` scales the duration, `i` the arithmetic.
    fn conv(&self, name: &str, u: u32, i: f64, out: [u32; 3], input: u64, id: u32) -> (KernelProfile, KernelMetadata) {
        let k = self.kernel(
            name,
            1.0,
            &[
                (u, 800. * i, 700., 30., 0.8),
                (2 * u, 3000. * i, 250., 40., 0.2),
                (u, 1800. * i, 450., 160., 0.4),
                (u + 1, 2600. * i, 300., 60., 0.2),
                (u, 600., 80., 650., 0.1),
            ],
        );
        (k, KernelMetadata::new(name, [out[0], out[1], 1], [out[2].min(256), 1, 1], input, id))
    }

    /// Fully connected layer: weight streaming dominates.
    fn fc(&self, name: &str, u: u32, i: f64, inputs: u64, id: u32) -> (KernelProfile, KernelMetadata) {
        let k = self.kernel(
            name,
            1.0,
            &[(2 * u, 900. * i, 1200., 10., 0.95), (u, 1500. * i, 300., 60., 0.3), (u, 1100. * i, 900., 20., 0.9), (1, 300., 50., 400., 0.1)],
        );
        (k, KernelMetadata::new(name, [(inputs / 256).max(1) as u32, 1, 1], [256, 1, 1], inputs, id))
    }

    fn pool(&self, name: &str, u: u32, out: [u32; 3], input: u64, id: u32) -> (KernelProfile, KernelMetadata) {
        let k = self.kernel(name, 0.75, &[(u, 500., 900., 40., 0.7), (u, 700., 400., 300., 0.5), (1, 200., 60., 500., 0.2)]);
        (k, KernelMetadata::new(name, [out[0], out[1], 1], [out[2], 1, 1], input, id))
    }

    fn softmax(&self, name: &str, grid: [u32; 3], input: u64, id: u32) -> (KernelProfile, KernelMetadata) {
        let k = self.kernel(name, 0.25, &[(3, 300., 400., 10., 0.6), (3, 900., 120., 10., 0.4), (2, 200., 60., 220., 0.4)]);
        (k, KernelMetadata::new(name, grid, [32, 1, 1], input, id))
    }
}
