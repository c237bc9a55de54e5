//! Time-series comparison: lag-searching Pearson cross-correlation and
//! path-normalized dynamic time warping over multichannel series.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::golden::ReferenceSegment;
use crate::model::Segment;

/// Default minimum overlap, as a fraction of the shorter series, for a lag to
/// be considered by [`xcorr`].
pub const DEFAULT_MIN_OVERLAP_FRAC: f64 = 0.5;

/// Default match threshold. A segment matches only if its coefficient is
/// strictly greater.
pub const DEFAULT_TAU_CORR: f64 = 0.8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimilarityError {
    #[error("series must be non-empty")]
    Empty,
    #[error("channel counts differ ({0} vs {1})")]
    ChannelMismatch(usize, usize),
    #[error("no channel varies in both series")]
    DegenerateInput,
    #[error("no lag satisfies the minimum overlap")]
    NoAdmissibleLag,
}

/// A multichannel real series laid out `[channel][time]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub channels: Vec<Vec<f64>>,
}

impl Series {
    pub fn new(channels: Vec<Vec<f64>>) -> Self {
        debug_assert!(channels.windows(2).all(|w| w[0].len() == w[1].len()), "ragged series");
        Series { channels }
    }

    pub fn single(values: Vec<f64>) -> Self {
        Series { channels: vec![values] }
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// Number of time steps.
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Column vector at time `t`.
    pub fn at(&self, t: usize) -> impl Iterator<Item = f64> + '_ {
        self.channels.iter().map(move |c| c[t])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    SumInstances,
    PerInstance,
}

pub fn channel_flatten(seg: &Segment, reduction: Reduction) -> Series {
    let Some(first) = seg.samples.first() else {
        return Series::new(Vec::new());
    };
    let (events, instances) = (first.events(), first.instances());
    let channels = match reduction {
        Reduction::SumInstances => (0..events)
            .map(|e| seg.samples.iter().map(|s| s.event_total(e) as f64).collect())
            .collect(),
        Reduction::PerInstance => (0..events)
            .flat_map(|e| (0..instances).map(move |i| (e, i)))
            .map(|(e, i)| seg.samples.iter().map(|s| s.get(e, i) as f64).collect())
            .collect(),
    };
    Series::new(channels)
}

fn is_constant(c: &[f64]) -> bool {
    c.iter().all(|&v| v == c[0])
}

fn znorm(c: &[f64]) -> Vec<f64> {
    let n = c.len() as f64;
    let mean = c.iter().sum::<f64>() / n;
    let var = c.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    c.iter().map(|v| (v - mean) / sd).collect()
}

/// Indices of channels that vary in both series.
fn shared_varying(a: &Series, b: &Series) -> Vec<usize> {
    (0..a.num_channels())
        .filter(|&c| !is_constant(&a.channels[c]) && !is_constant(&b.channels[c]))
        .collect()
}

fn check_pair(a: &Series, b: &Series) -> Result<(), SimilarityError> {
    if a.is_empty() || b.is_empty() || a.num_channels() == 0 {
        return Err(SimilarityError::Empty);
    }
    if a.num_channels() != b.num_channels() {
        return Err(SimilarityError::ChannelMismatch(a.num_channels(), b.num_channels()));
    }
    Ok(())
}

/// Zero when either window is constant, even if z-normalisation left
/// rounding residue in it.
fn pearson(x: &[f64], y: &[f64]) -> f64 {
    if is_constant(x) || is_constant(y) {
        return 0.0;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&u, &v) in x.iter().zip(y) {
        let (du, dv) = (u - mx, v - my);
        sxy += du * dv;
        sxx += du * du;
        syy += dv * dv;
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XcorrResult {
    /// `a[t]` is aligned with `b[t + best_lag]`.
    pub best_lag: i64,
    pub coefficient: f64,
    pub overlap_len: usize,
}

/// Slides `a` over `b` and returns the lag maximising the mean per-channel
/// Pearson coefficient on the overlap. Lags whose overlap is shorter than
/// `ceil(min_overlap_frac * min(|a|, |b|))` are skipped. Channels constant in
/// either series carry no weight. Exact ties go to the smaller `|lag|`.
pub fn xcorr(a: &Series, b: &Series, min_overlap_frac: f64) -> Result<XcorrResult, SimilarityError> {
    check_pair(a, b)?;
    let keep = shared_varying(a, b);
    if keep.is_empty() {
        return Err(SimilarityError::DegenerateInput);
    }
    let za: Vec<Vec<f64>> = keep.iter().map(|&c| znorm(&a.channels[c])).collect();
    let zb: Vec<Vec<f64>> = keep.iter().map(|&c| znorm(&b.channels[c])).collect();

    let (n, m) = (a.len() as i64, b.len() as i64);
    let min_overlap = ((min_overlap_frac * n.min(m) as f64).ceil() as i64).max(1);
    let mut best: Option<XcorrResult> = None;
    for lag in -(n - 1)..m {
        let start = (-lag).max(0);
        let end = n.min(m - lag);
        let len = end - start;
        if len < min_overlap {
            continue;
        }
        let (s, e) = (start as usize, end as usize);
        let (bs, be) = ((start + lag) as usize, (end + lag) as usize);
        let coef = za.iter().zip(&zb).map(|(x, y)| pearson(&x[s..e], &y[bs..be])).sum::<f64>()
            / keep.len() as f64;
        let better = match &best {
            None => true,
            Some(cur) => {
                coef > cur.coefficient
                    || (coef == cur.coefficient && lag.abs() < cur.best_lag.abs())
            }
        };
        if better {
            best = Some(XcorrResult { best_lag: lag, coefficient: coef, overlap_len: len as usize });
        }
    }
    best.ok_or(SimilarityError::NoAdmissibleLag)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DtwResult {
    pub distance: f64,
    /// Cells on the optimal warping path (shortest among equal-cost paths).
    pub path_len: usize,
    pub similarity: f64,
}

impl DtwResult {
    fn new(distance: f64, path_len: usize) -> Self {
        DtwResult { distance, path_len, similarity: 1.0 / (1.0 + distance / path_len as f64) }
    }
}

/// Classic DTW with steps `(1,0)`, `(0,1)`, `(1,1)` over an `n × m` local cost
/// function. Returns the optimal cumulative cost and the number of cells on
/// the shortest optimal path.
pub fn dtw_path_cost(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> (f64, usize) {
    assert!(n > 0 && m > 0, "dtw over empty series");
    let mut acc = vec![(f64::INFINITY, 0usize); n * m];
    for i in 0..n {
        for j in 0..m {
            let prev = if i == 0 && j == 0 {
                (0.0, 0)
            } else {
                let mut best = (f64::INFINITY, usize::MAX);
                // diagonal first so that it wins exact ties on both keys
                let cands = [
                    (i > 0 && j > 0).then(|| acc[(i - 1) * m + j - 1]),
                    (i > 0).then(|| acc[(i - 1) * m + j]),
                    (j > 0).then(|| acc[i * m + j - 1]),
                ];
                for c in cands.into_iter().flatten() {
                    if c.0 < best.0 || (c.0 == best.0 && c.1 < best.1) {
                        best = c;
                    }
                }
                best
            };
            acc[i * m + j] = (prev.0 + cost(i, j), prev.1 + 1);
        }
    }
    acc[n * m - 1]
}

fn euclid(a: &[Vec<f64>], b: &[Vec<f64>], i: usize, j: usize) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x[i] - y[j]) * (x[i] - y[j])).sum::<f64>().sqrt()
}

/// DTW similarity on per-channel z-normalized series with Euclidean local
/// cost; `similarity = 1 / (1 + distance / path_len)`.
///
/// Channels constant in either series are dropped. With nothing left the
/// series carry no shape information and only their lengths are compared:
/// `distance = |n - m|` over a path of `max(n, m)` cells.
pub fn dtw_similarity(a: &Series, b: &Series) -> Result<DtwResult, SimilarityError> {
    check_pair(a, b)?;
    let keep = shared_varying(a, b);
    if keep.is_empty() {
        let (n, m) = (a.len(), b.len());
        return Ok(DtwResult::new(n.abs_diff(m) as f64, n.max(m)));
    }
    let za: Vec<Vec<f64>> = keep.iter().map(|&c| znorm(&a.channels[c])).collect();
    let zb: Vec<Vec<f64>> = keep.iter().map(|&c| znorm(&b.channels[c])).collect();
    let (d, len) = dtw_path_cost(a.len(), b.len(), |i, j| euclid(&za, &zb, i, j));
    Ok(DtwResult::new(d, len))
}

/// DTW similarity with differences expressed in fixed per-channel units
/// (`scale[c] > 0`) instead of each series' own spread. Used where the
/// reference noise level is known, e.g. against hardware golden windows.
pub fn dtw_similarity_scaled(a: &Series, b: &Series, scale: &[f64]) -> Result<DtwResult, SimilarityError> {
    check_pair(a, b)?;
    assert_eq!(scale.len(), a.num_channels(), "one scale per channel");
    let sa: Vec<Vec<f64>> =
        a.channels.iter().zip(scale).map(|(c, s)| c.iter().map(|v| v / s).collect()).collect();
    let sb: Vec<Vec<f64>> =
        b.channels.iter().zip(scale).map(|(c, s)| c.iter().map(|v| v / s).collect()).collect();
    let (d, len) = dtw_path_cost(a.len(), b.len(), |i, j| euclid(&sa, &sb, i, j));
    Ok(DtwResult::new(d, len))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchOutcome {
    pub matched: bool,
    pub coefficient: f64,
    pub lag: i64,
    pub diagnostic: Option<String>,
}

/// Compares a segment against its reference; matched iff the best-lag
/// coefficient strictly exceeds `tau_corr`. Degenerate inputs are reported
/// as non-matches with coefficient 0.
pub fn match_segment(seg: &Segment, reference: &ReferenceSegment, tau_corr: f64) -> MatchOutcome {
    match_series(&channel_flatten(seg, Reduction::SumInstances), &reference.series, tau_corr)
}

pub fn match_series(observed: &Series, reference: &Series, tau_corr: f64) -> MatchOutcome {
    match xcorr(observed, reference, DEFAULT_MIN_OVERLAP_FRAC) {
        Ok(r) => MatchOutcome {
            matched: r.coefficient > tau_corr,
            coefficient: r.coefficient,
            lag: r.best_lag,
            diagnostic: None,
        },
        Err(e) => MatchOutcome { matched: false, coefficient: 0.0, lag: 0, diagnostic: Some(e.to_string()) },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Sample;

    fn s1(v: &[f64]) -> Series {
        Series::single(v.to_vec())
    }

    #[test]
    fn flatten_sums_instances() {
        let mut s = Sample::zeros(0, 2, 2);
        s.set(0, 0, 3);
        s.set(0, 1, 5);
        s.set(1, 1, 1);
        let seg = Segment { kernel_ordinal: 0, samples: vec![s.clone(), s], meta: None };
        let sum = channel_flatten(&seg, Reduction::SumInstances);
        assert_eq!(sum.channels, vec![vec![8.0, 8.0], vec![1.0, 1.0]]);
        let per = channel_flatten(&seg, Reduction::PerInstance);
        assert_eq!(per.num_channels(), 4);
        assert_eq!(per.channels[1], vec![5.0, 5.0]);
    }

    #[test]
    fn identity_correlates_at_lag_zero() {
        let a = Series::new(vec![vec![1.0, 4.0, 2.0, 8.0, 5.0, 7.0], vec![0.0, 1.0, 0.0, 3.0, 3.0, 1.0]]);
        let r = xcorr(&a, &a, 0.5).unwrap();
        assert_eq!(r.best_lag, 0);
        assert!((r.coefficient - 1.0).abs() < 1e-12);
        assert_eq!(r.overlap_len, 6);
    }

    #[test]
    fn delayed_copy_found_at_its_lag() {
        let a = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0, 5.0, 3.0];
        let mut b = vec![0.0; 3];
        b.extend_from_slice(&a);
        let r = xcorr(&s1(&a), &s1(&b), 0.5).unwrap();
        assert_eq!(r.best_lag, 3);
        assert!((r.coefficient - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_inputs_are_degenerate() {
        let a = s1(&[2.0; 5]);
        let b = s1(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(xcorr(&a, &b, 0.5), Err(SimilarityError::DegenerateInput));
        assert_eq!(xcorr(&b, &a, 0.5), Err(SimilarityError::DegenerateInput));
    }

    #[test]
    fn constant_channel_gets_no_weight() {
        let a = Series::new(vec![vec![1.0, 3.0, 2.0, 5.0], vec![4.0; 4]]);
        let b = Series::new(vec![vec![1.0, 3.0, 2.0, 5.0], vec![1.0, 9.0, 2.0, 0.0]]);
        let r = xcorr(&a, &b, 0.5).unwrap();
        assert!((r.coefficient - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dtw_identity_and_symmetry() {
        let a = Series::new(vec![vec![1.0, 5.0, 2.0, 2.0, 8.0], vec![0.0, 1.0, 1.0, 0.0, 2.0]]);
        let r = dtw_similarity(&a, &a).unwrap();
        assert_eq!(r.distance, 0.0);
        assert_eq!(r.similarity, 1.0);
        assert_eq!(r.path_len, 5);
        let b = Series::new(vec![vec![2.0, 2.0, 7.0, 1.0], vec![1.0, 0.0, 0.0, 3.0]]);
        assert_eq!(dtw_similarity(&a, &b).unwrap(), dtw_similarity(&b, &a).unwrap());
    }

    #[test]
    fn dtw_all_constant_falls_back_to_lengths() {
        let a = s1(&[3.0; 4]);
        let b = s1(&[3.0; 6]);
        let r = dtw_similarity(&a, &b).unwrap();
        assert_eq!((r.distance, r.path_len), (2.0, 6));
        assert_eq!(dtw_similarity(&a, &a).unwrap().similarity, 1.0);
    }

    #[test]
    fn dtw_warps_repeated_samples_for_free() {
        let a = s1(&[0.0, 1.0, 2.0, 1.0, 0.0]);
        let b = s1(&[0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 0.0]);
        let r = dtw_similarity_scaled(&a, &b, &[1.0]).unwrap();
        assert_eq!(r.distance, 0.0);
        assert_eq!(r.path_len, 7);
    }

    #[test]
    fn threshold_is_strict() {
        let a = s1(&[1.0, 2.0, 3.0, 4.0]);
        let out = match_series(&a, &a, 1.0);
        assert!(!out.matched, "coefficient equal to tau must not match");
        assert!(match_series(&a, &a, 0.8).matched);
    }
}
