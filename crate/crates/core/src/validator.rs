//! Software validation: segment an untested trace, match every kernel against
//! its golden reference, and apply the consecutive-rejection policy.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::golden::{select_reference, GoldenModel};
use crate::model::{Decision, SegmentMatch, Verdict};
use crate::model::Trace;
use crate::segmentation::{segment_trace, MarkerSpec};
use crate::similarity::match_segment;

/// Validates `trace` against `model`. Structural problems (unpaired or
/// undecodable markers, kernels missing from the expected sequence) yield
/// [`Decision::Incomplete`], never a silent benign verdict. When kernels were
/// skipped, `flagged_kernel` holds the program ordinal of the first missing
/// one.
pub fn validate_trace(trace: &Trace, model: &GoldenModel, marker: &MarkerSpec) -> Verdict {
    let policy = &model.policy;
    if trace.group != model.group {
        return Verdict::incomplete(vec![], None, vec!["trace event group differs from the model".into()]);
    }
    let marker = marker.with_threshold(policy.marker_threshold);
    let segments = match segment_trace(trace, &marker, &model.config_table, policy.amplitude_tolerance) {
        Ok(s) => s,
        Err(e) => return Verdict::incomplete(vec![], None, vec![format!("segmentation: {e}")]),
    };

    let observed: Vec<u32> = segments.iter().map(|s| s.config_id().expect("decoded")).collect();
    let alignment = match align(&model.sequence, &observed) {
        Some(a) => a,
        None => {
            return Verdict::incomplete(
                vec![],
                None,
                vec![format!(
                    "unexpected kernel sequence {observed:?} (expected {:?})",
                    model.sequence
                )],
            )
        }
    };

    let mut per_segment = Vec::with_capacity(segments.len());
    let mut diagnostics = Vec::new();
    for (seg, &ordinal) in segments.iter().zip(&alignment.ordinals) {
        let id = seg.config_id().expect("decoded");
        let reference = match select_reference(model, id) {
            Ok(r) => r,
            Err(e) => return Verdict::incomplete(per_segment, None, vec![e.to_string()]),
        };
        let out = match_segment(seg, reference, policy.tau_corr);
        if let Some(d) = out.diagnostic {
            diagnostics.push(format!("kernel {ordinal}: {d}"));
        }
        per_segment.push(SegmentMatch {
            kernel_ordinal: ordinal,
            config_id: id,
            correlation: out.coefficient,
            matched: out.matched,
        });
    }

    if let Some(&first_missing) = alignment.missing.first() {
        for k in &alignment.missing {
            diagnostics.push(format!("missing segment: kernel {k}"));
        }
        return Verdict::incomplete(per_segment, Some(first_missing), diagnostics);
    }
    let mut v = Verdict::from_matches(per_segment, policy.reject_run_len);
    v.diagnostics = diagnostics;
    v
}

struct Alignment {
    /// Program ordinal of each observed segment.
    ordinals: Vec<usize>,
    /// Program ordinals with no observed segment.
    missing: Vec<usize>,
}

/// Greedy leftmost embedding of `observed` into `expected`. `None` when
/// `observed` is not a subsequence.
fn align(expected: &[u32], observed: &[u32]) -> Option<Alignment> {
    let mut ordinals = Vec::with_capacity(observed.len());
    let mut missing = Vec::new();
    let mut p = 0;
    for (k, id) in expected.iter().enumerate() {
        if p < observed.len() && observed[p] == *id {
            ordinals.push(k);
            p += 1;
        } else {
            missing.push(k);
        }
    }
    (p == observed.len()).then_some(Alignment { ordinals, missing })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSizes {
    pub golden: usize,
    pub normal: usize,
    pub attack: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dataset {
    Normal,
    Attack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceVerdict {
    pub dataset: Dataset,
    pub index: usize,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    /// Fraction of attack traces not judged benign; `None` without attack
    /// traces.
    pub tpr: Option<f64>,
    /// Fraction of normal traces not judged benign; `None` without normal
    /// traces.
    pub fpr: Option<f64>,
    pub dataset_sizes: DatasetSizes,
    pub per_trace: Vec<TraceVerdict>,
}

/// Fraction of verdicts that are not benign. Incomplete counts as a positive
/// in both datasets.
pub fn positive_rate<'a>(verdicts: impl IntoIterator<Item = &'a Verdict>) -> Option<f64> {
    let (mut n, mut pos) = (0usize, 0usize);
    for v in verdicts {
        n += 1;
        pos += usize::from(v.decision != Decision::Benign);
    }
    (n > 0).then(|| pos as f64 / n as f64)
}

pub fn run_campaign(model: &GoldenModel, normal: &[Trace], attack: &[Trace]) -> CampaignReport {
    let marker = model.marker.clone();
    let check = |ds: Dataset, traces: &[Trace]| -> Vec<TraceVerdict> {
        traces
            .par_iter()
            .enumerate()
            .map(|(index, t)| TraceVerdict { dataset: ds, index, verdict: validate_trace(t, model, &marker) })
            .collect()
    };
    let mut per_trace = check(Dataset::Normal, normal);
    per_trace.extend(check(Dataset::Attack, attack));
    report_from_verdicts(per_trace, model.trace_count)
}

pub fn report_from_verdicts(per_trace: Vec<TraceVerdict>, golden: usize) -> CampaignReport {
    let of = |ds: Dataset| per_trace.iter().filter(move |v| v.dataset == ds).map(|v| &v.verdict);
    CampaignReport {
        tpr: positive_rate(of(Dataset::Attack)),
        fpr: positive_rate(of(Dataset::Normal)),
        dataset_sizes: DatasetSizes {
            golden,
            normal: of(Dataset::Normal).count(),
            attack: of(Dataset::Attack).count(),
        },
        per_trace,
    }
}

/// Alternative reading of the rejection policy: runs are counted over
/// successive traces of a stream rather than segments of one trace. A trace
/// counts as a rejection if any of its segments failed or it was not
/// structurally complete; a trace is compromised once the run it extends
/// reaches `reject_run_len`.
pub fn stream_decisions(verdicts: &[Verdict], reject_run_len: usize) -> Vec<Decision> {
    let mut run = 0;
    verdicts
        .iter()
        .map(|v| {
            let rejected = v.decision == Decision::Incomplete || v.per_segment.iter().any(|m| !m.matched);
            run = if rejected { run + 1 } else { 0 };
            if run >= reject_run_len {
                Decision::Compromised
            } else {
                Decision::Benign
            }
        })
        .collect()
}
