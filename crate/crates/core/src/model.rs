//! Domain types shared by every stage of the pipeline: counter events and
//! groups, per-window samples, traces, kernel segments, kernel metadata and
//! validation verdicts.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum number of events that can be collected together in one group.
/// Mirrors the eight counter registers available per monitoring unit.
pub const MAX_GROUP_EVENTS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("event group must contain between 1 and {MAX_GROUP_EVENTS} events, got {0}")]
    GroupSize(usize),
    #[error("event `{name}` has instance granularity {found}, group requires {expected}")]
    MixedGranularity { name: String, expected: u32, found: u32 },
    #[error("event `{0}` appears twice in the group")]
    DuplicateEvent(String),
    #[error("event `{0}` has zero instance granularity")]
    ZeroGranularity(String),
    #[error("sample {window} has {found} values, expected {expected}")]
    SampleShape { window: u64, expected: usize, found: usize },
    #[error("window indices must be strictly increasing ({prev} then {next})")]
    WindowOrder { prev: u64, next: u64 },
    #[error("unknown kernel configuration `{0}`")]
    UnknownConfiguration(String),
    #[error("config id {0} registered twice")]
    DuplicateConfigId(u32),
    #[error("kernel configuration `{0}` registered twice")]
    DuplicateConfiguration(String),
    #[error("invalid device: {0}")]
    InvalidDevice(String),
}

/// Counter taxonomy, following the profiler's event categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Sm,
    Memory,
    L2,
    GlobalMemory,
    Atomic,
    Texture,
    Pcie,
    Misc,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Sm => "sm",
            Category::Memory => "memory",
            Category::L2 => "l2",
            Category::GlobalMemory => "global_memory",
            Category::Atomic => "atomic",
            Category::Texture => "texture",
            Category::Pcie => "pcie",
            Category::Misc => "misc",
        }
    }

    pub fn parse(s: &str) -> Option<Category> {
        Some(match s {
            "sm" => Category::Sm,
            "memory" => Category::Memory,
            "l2" => Category::L2,
            "global_memory" => Category::GlobalMemory,
            "atomic" => Category::Atomic,
            "texture" => Category::Texture,
            "pcie" => Category::Pcie,
            "misc" => Category::Misc,
            _ => return None,
        })
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A hardware event and the number of counter instances it yields per sample
/// (one per SM, or one per group of SMs).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EventSpec {
    pub name: String,
    pub category: Category,
    pub instance_granularity: u32,
}

impl EventSpec {
    pub fn new(name: impl Into<String>, category: Category, instance_granularity: u32) -> Self {
        EventSpec { name: name.into(), category, instance_granularity }
    }
}

/// Events that can be read together. All members share one instance
/// granularity; at most eight events per group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EventGroup {
    events: Vec<EventSpec>,
}

impl EventGroup {
    pub fn new(events: Vec<EventSpec>) -> Result<Self, ModelError> {
        if events.is_empty() || events.len() > MAX_GROUP_EVENTS {
            return Err(ModelError::GroupSize(events.len()));
        }
        let expected = events[0].instance_granularity;
        for (i, e) in events.iter().enumerate() {
            if e.instance_granularity == 0 {
                return Err(ModelError::ZeroGranularity(e.name.clone()));
            }
            if e.instance_granularity != expected {
                return Err(ModelError::MixedGranularity {
                    name: e.name.clone(),
                    expected,
                    found: e.instance_granularity,
                });
            }
            if events[..i].iter().any(|o| o.name == e.name) {
                return Err(ModelError::DuplicateEvent(e.name.clone()));
            }
        }
        Ok(EventGroup { events })
    }

    pub fn events(&self) -> &[EventSpec] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Counter instances per event per sample.
    pub fn instances(&self) -> usize {
        self.events[0].instance_granularity as usize
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.events.iter().position(|e| e.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }
}

impl<'de> Deserialize<'de> for EventGroup {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            events: Vec<EventSpec>,
        }
        let raw = Raw::deserialize(d)?;
        EventGroup::new(raw.events).map_err(serde::de::Error::custom)
    }
}

/// Counter deltas for one sampling window, stored row-major as
/// `[event][instance]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub window_index: u64,
    values: Vec<u64>,
    instances: usize,
}

impl Sample {
    pub fn new(window_index: u64, instances: usize, values: Vec<u64>) -> Self {
        assert!(instances > 0 && values.len().is_multiple_of(instances), "ragged sample matrix");
        Sample { window_index, values, instances }
    }

    pub fn zeros(window_index: u64, events: usize, instances: usize) -> Self {
        Sample::new(window_index, instances, vec![0; events * instances])
    }

    pub fn instances(&self) -> usize {
        self.instances
    }

    pub fn events(&self) -> usize {
        self.values.len() / self.instances
    }

    pub fn get(&self, event: usize, instance: usize) -> u64 {
        self.values[event * self.instances + instance]
    }

    pub fn set(&mut self, event: usize, instance: usize, v: u64) {
        self.values[event * self.instances + instance] = v;
    }

    pub fn add(&mut self, event: usize, instance: usize, v: u64) {
        let slot = &mut self.values[event * self.instances + instance];
        *slot = slot.saturating_add(v);
    }

    /// Counts of one event across its instances.
    pub fn event_row(&self, event: usize) -> &[u64] {
        &self.values[event * self.instances..(event + 1) * self.instances]
    }

    pub fn event_total(&self, event: usize) -> u64 {
        self.event_row(event).iter().sum()
    }

    pub fn values(&self) -> &[u64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [u64] {
        &mut self.values
    }
}

/// Kernel launch configuration carried to the validator over the marker
/// channel.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KernelMetadata {
    pub kernel_name: String,
    pub grid_dims: [u32; 3],
    pub block_dims: [u32; 3],
    pub input_size: u64,
    pub config_id: u32,
}

impl KernelMetadata {
    pub fn new(
        kernel_name: impl Into<String>,
        grid_dims: [u32; 3],
        block_dims: [u32; 3],
        input_size: u64,
        config_id: u32,
    ) -> Self {
        KernelMetadata { kernel_name: kernel_name.into(), grid_dims, block_dims, input_size, config_id }
    }

    fn key(&self) -> ConfigKey {
        ConfigKey {
            kernel_name: self.kernel_name.clone(),
            grid_dims: self.grid_dims,
            block_dims: self.block_dims,
            input_size: self.input_size,
        }
    }

    fn describe(&self) -> String {
        format!(
            "{} grid={:?} block={:?} input={}",
            self.kernel_name, self.grid_dims, self.block_dims, self.input_size
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct ConfigKey {
    kernel_name: String,
    grid_dims: [u32; 3],
    block_dims: [u32; 3],
    input_size: u64,
}

/// Registered kernel configurations and their ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "Vec<KernelMetadata>", try_from = "Vec<KernelMetadata>")]
pub struct ConfigTable {
    by_id: BTreeMap<u32, KernelMetadata>,
    by_key: BTreeMap<ConfigKey, u32>,
}

impl ConfigTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `meta` under its own `config_id`.
    pub fn register(&mut self, meta: KernelMetadata) -> Result<(), ModelError> {
        if self.by_id.contains_key(&meta.config_id) {
            return Err(ModelError::DuplicateConfigId(meta.config_id));
        }
        let key = meta.key();
        if self.by_key.contains_key(&key) {
            return Err(ModelError::DuplicateConfiguration(meta.describe()));
        }
        self.by_key.insert(key, meta.config_id);
        self.by_id.insert(meta.config_id, meta);
        Ok(())
    }

    pub fn get(&self, config_id: u32) -> Option<&KernelMetadata> {
        self.by_id.get(&config_id)
    }

    pub fn contains(&self, config_id: u32) -> bool {
        self.by_id.contains_key(&config_id)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &KernelMetadata> {
        self.by_id.values()
    }
}

impl From<ConfigTable> for Vec<KernelMetadata> {
    fn from(t: ConfigTable) -> Self {
        t.by_id.into_values().collect()
    }
}

impl TryFrom<Vec<KernelMetadata>> for ConfigTable {
    type Error = ModelError;

    fn try_from(v: Vec<KernelMetadata>) -> Result<Self, Self::Error> {
        let mut t = ConfigTable::new();
        for m in v {
            t.register(m)?;
        }
        Ok(t)
    }
}

/// Looks up the registered id of a launch configuration. The `config_id`
/// field of `meta` itself is ignored.
pub fn derive_config_id(meta: &KernelMetadata, table: &ConfigTable) -> Result<u32, ModelError> {
    table
        .by_key
        .get(&meta.key())
        .copied()
        .ok_or_else(|| ModelError::UnknownConfiguration(meta.describe()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceConfig {
    pub num_sms: u32,
    pub sm_group_size: u32,
    pub window_cycles: u64,
    pub clock_mhz: f64,
}

impl DeviceConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_sms == 0 || self.sm_group_size == 0 || self.window_cycles == 0 {
            return Err(ModelError::InvalidDevice("counts must be positive".into()));
        }
        if !(self.clock_mhz.is_finite() && self.clock_mhz > 0.0) {
            return Err(ModelError::InvalidDevice("clock must be positive".into()));
        }
        if !self.num_sms.is_multiple_of(self.sm_group_size) {
            return Err(ModelError::InvalidDevice(format!(
                "{} SMs not divisible into groups of {}",
                self.num_sms, self.sm_group_size
            )));
        }
        Ok(())
    }

    pub fn num_sm_groups(&self) -> u32 {
        self.num_sms / self.sm_group_size
    }
}

impl Default for DeviceConfig {
    /// A 16-SM desk-scale device with 4-SM groups for shared-resource events.
    fn default() -> Self {
        DeviceConfig { num_sms: 16, sm_group_size: 4, window_cycles: 10_000, clock_mhz: 1380.0 }
    }
}

/// A multichannel counter time series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub group: EventGroup,
    pub samples: Vec<Sample>,
    pub meta: Option<KernelMetadata>,
    pub device: DeviceConfig,
}

impl Trace {
    pub fn new(
        group: EventGroup,
        samples: Vec<Sample>,
        meta: Option<KernelMetadata>,
        device: DeviceConfig,
    ) -> Result<Self, ModelError> {
        let t = Trace { group, samples, meta, device };
        t.check()?;
        Ok(t)
    }

    /// Verifies dimensional consistency and window ordering.
    pub fn check(&self) -> Result<(), ModelError> {
        let expected = self.group.len() * self.group.instances();
        let mut prev: Option<u64> = None;
        for s in &self.samples {
            if s.values.len() != expected || s.instances != self.group.instances() {
                return Err(ModelError::SampleShape {
                    window: s.window_index,
                    expected,
                    found: s.values.len(),
                });
            }
            if let Some(p) = prev {
                if s.window_index <= p {
                    return Err(ModelError::WindowOrder { prev: p, next: s.window_index });
                }
            }
            prev = Some(s.window_index);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Per-window totals (summed over instances) of one event.
    pub fn event_totals(&self, event: usize) -> Vec<u64> {
        self.samples.iter().map(|s| s.event_total(event)).collect()
    }
}

/// The portion of a trace belonging to one kernel launch, marker windows
/// excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub kernel_ordinal: usize,
    pub samples: Vec<Sample>,
    pub meta: Option<KernelMetadata>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn config_id(&self) -> Option<u32> {
        self.meta.as_ref().map(|m| m.config_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Benign,
    Compromised,
    Incomplete,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Benign => "benign",
            Decision::Compromised => "compromised",
            Decision::Incomplete => "incomplete",
        }
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMatch {
    pub kernel_ordinal: usize,
    pub config_id: u32,
    pub correlation: f64,
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub per_segment: Vec<SegmentMatch>,
    pub max_consecutive_rejections: usize,
    pub decision: Decision,
    pub flagged_kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

impl Verdict {
    /// Applies the consecutive-rejection policy to per-segment results given
    /// in program order.
    pub fn from_matches(per_segment: Vec<SegmentMatch>, reject_run_len: usize) -> Verdict {
        let (max_run, first_run_start) = rejection_runs(&per_segment, reject_run_len);
        let compromised = max_run >= reject_run_len;
        Verdict {
            decision: if compromised { Decision::Compromised } else { Decision::Benign },
            flagged_kernel: if compromised { first_run_start } else { None },
            max_consecutive_rejections: max_run,
            per_segment,
            diagnostics: Vec::new(),
        }
    }

    /// An unusable trace: structural problems never resolve to benign.
    pub fn incomplete(
        per_segment: Vec<SegmentMatch>,
        flagged_kernel: Option<usize>,
        diagnostics: Vec<String>,
    ) -> Verdict {
        let (max_run, _) = rejection_runs(&per_segment, usize::MAX);
        Verdict {
            per_segment,
            max_consecutive_rejections: max_run,
            decision: Decision::Incomplete,
            flagged_kernel,
            diagnostics,
        }
    }

    pub fn min_coefficient(&self) -> Option<f64> {
        self.per_segment.iter().map(|m| m.correlation).reduce(f64::min)
    }

    pub fn is_benign(&self) -> bool {
        self.decision == Decision::Benign
    }
}

/// Longest run of consecutive non-matches, and the ordinal of the first
/// segment of the first run reaching `threshold`.
fn rejection_runs(per_segment: &[SegmentMatch], threshold: usize) -> (usize, Option<usize>) {
    let mut max_run = 0;
    let mut run = 0;
    let mut run_start = 0;
    let mut first = None;
    for (i, m) in per_segment.iter().enumerate() {
        if m.matched {
            run = 0;
            continue;
        }
        if run == 0 {
            run_start = i;
        }
        run += 1;
        max_run = max_run.max(run);
        if run >= threshold && first.is_none() {
            first = Some(per_segment[run_start].kernel_ordinal);
        }
    }
    (max_run, first)
}
