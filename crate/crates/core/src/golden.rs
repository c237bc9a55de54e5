//! Golden reference models built from trusted executions.
//!
//! Each golden trace is segmented by its markers. All segments sharing a
//! config id are resampled to their median length and reduced element-wise
//! to a median series, with the median absolute deviation kept as the
//! per-window spread.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ConfigTable, DeviceConfig, EventGroup, Trace};
use crate::segmentation::{segment_trace, MarkerSpec, SegmentationError};
use crate::similarity::{channel_flatten, Reduction, Series, DEFAULT_TAU_CORR};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GoldenError {
    #[error("no golden traces supplied")]
    NoTraces,
    #[error("golden trace {trace} has kernel sequence {found:?}, expected {expected:?}")]
    InconsistentKernelSequence { trace: usize, expected: Vec<u32>, found: Vec<u32> },
    #[error("golden trace {trace} uses a different event group or device")]
    InconsistentCollection { trace: usize },
    #[error("golden trace {trace}: {source}")]
    SegmentationFailure { trace: usize, source: SegmentationError },
    #[error("no reference for config id {0}")]
    NoReferenceForConfig(u32),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("reference for config {0} is not registered in the config table")]
    UnregisteredReference(u32),
}

/// Thresholds governing software validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationPolicy {
    /// A segment matches if its correlation strictly exceeds this.
    pub tau_corr: f64,
    /// Consecutive rejections needed to declare compromise.
    pub reject_run_len: usize,
    /// Relative tolerance when decoding marker amplitudes.
    pub amplitude_tolerance: f64,
    /// Minimum marker count for a burst window.
    pub marker_threshold: u64,
}

impl Default for ValidationPolicy {
    fn default() -> Self {
        ValidationPolicy {
            tau_corr: DEFAULT_TAU_CORR,
            reject_run_len: 4,
            amplitude_tolerance: 0.1,
            marker_threshold: 1,
        }
    }
}

impl ValidationPolicy {
    pub fn validate(&self) -> Result<(), GoldenError> {
        if !(self.tau_corr > 0.0 && self.tau_corr < 1.0) {
            return Err(GoldenError::InvalidPolicy(format!("tau_corr {} outside (0, 1)", self.tau_corr)));
        }
        if self.reject_run_len == 0 {
            return Err(GoldenError::InvalidPolicy("reject_run_len must be ≥ 1".into()));
        }
        if !(self.amplitude_tolerance >= 0.0) {
            return Err(GoldenError::InvalidPolicy("amplitude_tolerance must be ≥ 0".into()));
        }
        if self.marker_threshold == 0 {
            return Err(GoldenError::InvalidPolicy("marker_threshold must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSegment {
    pub config_id: u32,
    /// Median series, `[event][window]`.
    pub series: Series,
    /// Median absolute deviation per event and window.
    pub per_window_spread: Series,
    /// Number of golden segments aggregated.
    pub support: usize,
}

impl ReferenceSegment {
    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenModel {
    pub group: EventGroup,
    pub device: DeviceConfig,
    pub marker: MarkerSpec,
    /// Config ids of the trusted program's kernels in launch order.
    pub sequence: Vec<u32>,
    pub refs: BTreeMap<u32, ReferenceSegment>,
    pub config_table: ConfigTable,
    pub policy: ValidationPolicy,
    /// Number of golden traces the model was built from.
    pub trace_count: usize,
}

impl GoldenModel {
    pub fn check(&self) -> Result<(), GoldenError> {
        self.policy.validate()?;
        for (&id, r) in &self.refs {
            if !self.config_table.contains(id) || r.config_id != id {
                return Err(GoldenError::UnregisteredReference(id));
            }
        }
        Ok(())
    }

    /// The marker spec with this model's presence threshold applied.
    pub fn effective_marker(&self) -> MarkerSpec {
        self.marker.with_threshold(self.policy.marker_threshold)
    }
}

pub fn select_reference(model: &GoldenModel, config_id: u32) -> Result<&ReferenceSegment, GoldenError> {
    model.refs.get(&config_id).ok_or(GoldenError::NoReferenceForConfig(config_id))
}

/// Linear-interpolation resampling of every channel to `len` points. The
/// first and last samples map onto each other.
pub fn resample(series: &Series, len: usize) -> Series {
    assert!(len > 0, "resample to zero length");
    let n = series.len();
    let channels = series
        .channels
        .iter()
        .map(|c| {
            (0..len)
                .map(|j| {
                    if n == 1 {
                        return c[0];
                    }
                    let pos = if len == 1 {
                        (n - 1) as f64 / 2.0
                    } else {
                        j as f64 * (n - 1) as f64 / (len - 1) as f64
                    };
                    let lo = (pos.floor() as usize).min(n - 1);
                    let hi = (lo + 1).min(n - 1);
                    let frac = pos - lo as f64;
                    if frac == 0.0 {
                        c[lo]
                    } else {
                        c[lo] + (c[hi] - c[lo]) * frac
                    }
                })
                .collect()
        })
        .collect();
    Series::new(channels)
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Element-wise median and MAD over equally shaped series.
pub(crate) fn median_and_mad(pool: &[Series]) -> (Series, Series) {
    let (channels, len) = (pool[0].num_channels(), pool[0].len());
    let mut med = vec![vec![0.0; len]; channels];
    let mut mad = vec![vec![0.0; len]; channels];
    let mut buf = Vec::with_capacity(pool.len());
    for c in 0..channels {
        for t in 0..len {
            buf.clear();
            buf.extend(pool.iter().map(|s| s.channels[c][t]));
            let m = median(&mut buf);
            for v in buf.iter_mut() {
                *v = (*v - m).abs();
            }
            med[c][t] = m;
            mad[c][t] = median(&mut buf);
        }
    }
    (Series::new(med), Series::new(mad))
}

fn lower_median_len(lengths: &mut [usize]) -> usize {
    lengths.sort_unstable();
    lengths[(lengths.len() - 1) / 2]
}

pub fn build_golden(
    traces: &[Trace],
    marker: &MarkerSpec,
    config_table: &ConfigTable,
    policy: &ValidationPolicy,
) -> Result<GoldenModel, GoldenError> {
    policy.validate()?;
    let first = traces.first().ok_or(GoldenError::NoTraces)?;
    let marker = marker.with_threshold(policy.marker_threshold);

    let segmented: Vec<Vec<(u32, Series)>> = traces
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            if t.group != first.group || t.device != first.device {
                return Err(GoldenError::InconsistentCollection { trace: i });
            }
            let segs = segment_trace(t, &marker, config_table, policy.amplitude_tolerance)
                .map_err(|source| GoldenError::SegmentationFailure { trace: i, source })?;
            Ok(segs
                .iter()
                .map(|s| (s.config_id().expect("decoded"), channel_flatten(s, Reduction::SumInstances)))
                .collect())
        })
        .collect::<Result<_, _>>()?;

    let sequence: Vec<u32> = segmented[0].iter().map(|(id, _)| *id).collect();
    for (i, segs) in segmented.iter().enumerate() {
        let found: Vec<u32> = segs.iter().map(|(id, _)| *id).collect();
        if found != sequence {
            return Err(GoldenError::InconsistentKernelSequence { trace: i, expected: sequence, found });
        }
    }

    let mut pools: BTreeMap<u32, Vec<&Series>> = BTreeMap::new();
    for segs in &segmented {
        for (id, s) in segs {
            pools.entry(*id).or_default().push(s);
        }
    }
    let refs = pools
        .into_par_iter()
        .map(|(id, pool)| {
            let mut lens: Vec<usize> = pool.iter().map(|s| s.len()).collect();
            let len = lower_median_len(&mut lens);
            let resampled: Vec<Series> = pool.iter().map(|s| resample(s, len)).collect();
            let (series, spread) = median_and_mad(&resampled);
            (id, ReferenceSegment { config_id: id, series, per_window_spread: spread, support: pool.len() })
        })
        .collect::<BTreeMap<_, _>>();

    let mut table = ConfigTable::new();
    for id in refs.keys() {
        let meta = config_table.get(*id).expect("segment_trace resolved it");
        table.register(meta.clone()).expect("ids are unique");
    }
    Ok(GoldenModel {
        group: first.group.clone(),
        device: first.device.clone(),
        marker,
        sequence,
        refs,
        config_table: table,
        policy: policy.clone(),
        trace_count: traces.len(),
    })
}
