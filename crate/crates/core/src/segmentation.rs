//! Marker-burst detection and per-kernel trace splitting.
//!
//! Every instrumented kernel launch is bracketed by two short atomic-CAS
//! bursts. A burst is a maximal run of windows whose summed marker count
//! reaches the presence threshold. Bursts pair up as (open, close); the
//! windows strictly between a pair form that kernel's segment. The total
//! CAS count of a burst is fixed by the marker kernel's launch geometry and
//! identifies the launch configuration.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ConfigTable, EventSpec, Segment, Trace};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SegmentationError {
    #[error("marker event `{0}` is not collected by this trace")]
    MarkerEventAbsent(String),
    #[error("{0} marker bursts cannot be paired into kernel boundaries")]
    UnpairedMarker(usize),
    #[error("kernel {0} has no body windows between its markers")]
    EmptySegment(usize),
    #[error("burst total {total} matches several configurations: {candidates:?}")]
    AmbiguousAmplitude { total: u64, candidates: Vec<u32> },
    #[error("burst total {0} matches no registered amplitude")]
    UnknownAmplitude(u64),
    #[error("kernel {ordinal}: opening marker decodes to config {open}, closing marker to {close}")]
    MarkerMismatch { ordinal: usize, open: u32, close: u32 },
    #[error("config id {0} has an amplitude but no registered configuration")]
    UnregisteredConfig(u32),
    #[error("invalid marker spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerSpec {
    pub marker_event: EventSpec,
    /// Minimum summed marker count for a window to belong to a burst.
    pub presence_threshold: u64,
    /// Total CAS count emitted per burst, by config id.
    pub expected_amplitude: BTreeMap<u32, u64>,
}

impl MarkerSpec {
    pub fn new(
        marker_event: EventSpec,
        presence_threshold: u64,
        expected_amplitude: BTreeMap<u32, u64>,
    ) -> Result<Self, SegmentationError> {
        let spec = MarkerSpec { marker_event, presence_threshold, expected_amplitude };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SegmentationError> {
        if self.presence_threshold == 0 {
            return Err(SegmentationError::InvalidSpec("presence threshold must be ≥ 1".into()));
        }
        let mut seen: Vec<u64> = Vec::new();
        for (&id, &amp) in &self.expected_amplitude {
            if amp < self.presence_threshold {
                return Err(SegmentationError::InvalidSpec(format!(
                    "amplitude {amp} of config {id} is below the presence threshold"
                )));
            }
            if seen.contains(&amp) {
                return Err(SegmentationError::InvalidSpec(format!("amplitude {amp} used twice")));
            }
            seen.push(amp);
        }
        Ok(())
    }

    pub fn amplitude(&self, config_id: u32) -> Option<u64> {
        self.expected_amplitude.get(&config_id).copied()
    }

    pub fn with_threshold(&self, presence_threshold: u64) -> MarkerSpec {
        MarkerSpec { presence_threshold, ..self.clone() }
    }
}

/// One marker burst. Window bounds are inclusive sample positions within the
/// trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Burst {
    pub start_window: usize,
    pub end_window: usize,
    pub total_count: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundarySet {
    pub bursts: Vec<Burst>,
}

impl BoundarySet {
    pub fn len(&self) -> usize {
        self.bursts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bursts.is_empty()
    }
}

/// Summed marker count per window.
pub fn marker_channel(trace: &Trace, spec: &MarkerSpec) -> Result<Vec<u64>, SegmentationError> {
    let idx = trace
        .group
        .index_of(&spec.marker_event.name)
        .ok_or_else(|| SegmentationError::MarkerEventAbsent(spec.marker_event.name.clone()))?;
    Ok(trace.event_totals(idx))
}

pub fn detect_markers(trace: &Trace, spec: &MarkerSpec) -> Result<BoundarySet, SegmentationError> {
    let channel = marker_channel(trace, spec)?;
    Ok(bursts_in(&channel, spec.presence_threshold))
}

pub(crate) fn bursts_in(channel: &[u64], threshold: u64) -> BoundarySet {
    let mut bursts = Vec::new();
    let mut open: Option<(usize, u64)> = None;
    for (w, &c) in channel.iter().enumerate() {
        match (c >= threshold, open) {
            (true, None) => open = Some((w, c)),
            (true, Some((s, tot))) => open = Some((s, tot + c)),
            (false, Some((s, tot))) => {
                bursts.push(Burst { start_window: s, end_window: w - 1, total_count: tot });
                open = None;
            }
            (false, None) => {}
        }
    }
    if let Some((s, tot)) = open {
        bursts.push(Burst { start_window: s, end_window: channel.len() - 1, total_count: tot });
    }
    BoundarySet { bursts }
}

/// Splits `trace` into kernel segments: burst `2i` opens kernel `i`, burst
/// `2i + 1` closes it. Segments carry no metadata yet.
pub fn split_segments(trace: &Trace, bounds: &BoundarySet) -> Result<Vec<Segment>, SegmentationError> {
    let n = bounds.bursts.len();
    if n < 2 || !n.is_multiple_of(2) {
        return Err(SegmentationError::UnpairedMarker(n));
    }
    bounds
        .bursts
        .chunks_exact(2)
        .enumerate()
        .map(|(i, pair)| {
            let body = pair[0].end_window + 1..pair[1].start_window;
            if body.is_empty() {
                return Err(SegmentationError::EmptySegment(i));
            }
            Ok(Segment { kernel_ordinal: i, samples: trace.samples[body].to_vec(), meta: None })
        })
        .collect()
}

/// Maps a burst total to the config id whose registered amplitude lies within
/// relative tolerance `tolerance` of it.
pub fn decode_metadata(total_count: u64, spec: &MarkerSpec, tolerance: f64) -> Result<u32, SegmentationError> {
    let candidates: Vec<u32> = spec
        .expected_amplitude
        .iter()
        .filter(|(_, &amp)| (total_count as f64 - amp as f64).abs() <= tolerance * amp as f64)
        .map(|(&id, _)| id)
        .collect();
    match candidates.as_slice() {
        [] => Err(SegmentationError::UnknownAmplitude(total_count)),
        [id] => Ok(*id),
        _ => Err(SegmentationError::AmbiguousAmplitude { total: total_count, candidates }),
    }
}

/// Detects, splits and decodes: every returned segment carries the metadata
/// registered for its marker amplitude. Both markers of a pair must agree.
pub fn segment_trace(
    trace: &Trace,
    spec: &MarkerSpec,
    table: &ConfigTable,
    tolerance: f64,
) -> Result<Vec<Segment>, SegmentationError> {
    let bounds = detect_markers(trace, spec)?;
    let mut segments = split_segments(trace, &bounds)?;
    for (seg, pair) in segments.iter_mut().zip(bounds.bursts.chunks_exact(2)) {
        let open = decode_metadata(pair[0].total_count, spec, tolerance)?;
        let close = decode_metadata(pair[1].total_count, spec, tolerance)?;
        if open != close {
            return Err(SegmentationError::MarkerMismatch { ordinal: seg.kernel_ordinal, open, close });
        }
        let meta = table.get(open).ok_or(SegmentationError::UnregisteredConfig(open))?;
        seg.meta = Some(meta.clone());
    }
    Ok(segments)
}
