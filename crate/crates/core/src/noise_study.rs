//! Segment similarity under concurrent-kernel interference.
//!
//! Self-noise runs extra copies of the program's own kernels alongside it,
//! launched a few windows apart from the originals. External noise runs
//! unrelated `vecAdd` launches back to back from random offsets. Every
//! segment of every noisy trace is scored against the noise-free golden
//! reference with z-normalized DTW.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::golden::{build_golden, select_reference, GoldenError, GoldenModel, ValidationPolicy};
use crate::gpusim::presets::{GroupKind, Preset};
use crate::gpusim::{simulate, simulate_with_layout, ConcurrentKernel, GpuSimError, KernelProfile, KernelSpan, NoiseKind, NoiseSpec, ProgramSpec};
use crate::model::DeviceConfig;
use crate::segmentation::{segment_trace, SegmentationError};
use crate::similarity::{channel_flatten, dtw_similarity, Reduction, SimilarityError};

/// Largest launch offset, in windows, of a self-noise copy.
pub const SELF_NOISE_JITTER: u64 = 3;
/// Largest idle gap between consecutive external launches.
pub const EXTERNAL_GAP: u64 = 4;

#[derive(Debug, Error)]
pub enum NoiseStudyError {
    #[error(transparent)]
    Sim(#[from] GpuSimError),
    #[error(transparent)]
    Golden(#[from] GoldenError),
    #[error("noisy trace {trace}: {source}")]
    Segmentation { trace: usize, source: SegmentationError },
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error("invalid study: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseStudyConfig {
    pub preset: Preset,
    pub group: GroupKind,
    pub golden_traces: usize,
    pub traces_per_cell: usize,
    pub max_level: usize,
    pub seed: u64,
    /// Replaces every phase dispersion, victim and noise alike.
    pub dispersion: Option<f64>,
}

impl Default for NoiseStudyConfig {
    fn default() -> Self {
        NoiseStudyConfig {
            preset: Preset::AlexNet,
            group: GroupKind::Sm,
            golden_traces: 100,
            traces_per_cell: 20,
            max_level: 3,
            seed: 0,
            dispersion: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseCondition {
    Baseline,
    SelfNoise,
    ExternalNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseCell {
    pub condition: NoiseCondition,
    /// Concurrent kernels per victim kernel (self) or launch streams (external).
    pub level: usize,
    pub traces: usize,
    pub segments: usize,
    pub mean_dtw: f64,
}

fn with_dispersion(mut profile: KernelProfile, d: Option<f64>) -> KernelProfile {
    if let Some(d) = d {
        profile.phases.iter_mut().for_each(|p| p.dispersion = d);
    }
    profile
}

/// `level` copies of every program kernel, each launched up to
/// [`SELF_NOISE_JITTER`] windows after the original body starts.
pub fn self_noise(program: &ProgramSpec, spans: &[KernelSpan], level: usize, seed: u64) -> NoiseSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut concurrent = Vec::new();
    for _ in 0..level {
        for ((profile, _), span) in program.kernels.iter().zip(spans) {
            let start_window = span.body_start as u64 + rng.gen_range(0..=SELF_NOISE_JITTER);
            concurrent.push(ConcurrentKernel { profile: profile.clone(), start_window });
        }
    }
    NoiseSpec { concurrent, kind: NoiseKind::SelfNoise, seed: rng.gen() }
}

/// `level` independent streams of back-to-back `launch` kernels covering
/// `windows`, each starting at a random offset.
pub fn external_noise(launch: &KernelProfile, windows: u64, level: usize, seed: u64) -> NoiseSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = launch.duration_windows().max(1);
    let mut concurrent = Vec::new();
    for _ in 0..level {
        let mut start = rng.gen_range(0..len);
        while start < windows {
            concurrent.push(ConcurrentKernel { profile: launch.clone(), start_window: start });
            start += len + rng.gen_range(0..=EXTERNAL_GAP);
        }
    }
    NoiseSpec { concurrent, kind: NoiseKind::ExternalNoise, seed: rng.gen() }
}

/// Mean DTW similarity of every segment of `traces` against `model`.
fn mean_similarity(model: &GoldenModel, traces: &[crate::model::Trace]) -> Result<(usize, f64), NoiseStudyError> {
    let marker = model.effective_marker();
    let per_trace: Vec<Vec<f64>> = traces
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let segs = segment_trace(t, &marker, &model.config_table, model.policy.amplitude_tolerance)
                .map_err(|source| NoiseStudyError::Segmentation { trace: i, source })?;
            segs.iter()
                .map(|s| {
                    let r = select_reference(model, s.config_id().expect("decoded"))?;
                    Ok(dtw_similarity(&channel_flatten(s, Reduction::SumInstances), &r.series)?.similarity)
                })
                .collect()
        })
        .collect::<Result<_, NoiseStudyError>>()?;
    let all: Vec<f64> = per_trace.into_iter().flatten().collect();
    let n = all.len();
    Ok((n, if n == 0 { 0.0 } else { all.iter().sum::<f64>() / n as f64 }))
}

/// Baseline row followed by one row per noise condition and level in
/// `1..=max_level`.
pub fn noise_study(cfg: &NoiseStudyConfig, device: &DeviceConfig) -> Result<Vec<NoiseCell>, NoiseStudyError> {
    if cfg.golden_traces == 0 || cfg.traces_per_cell == 0 {
        return Err(NoiseStudyError::Invalid("trace counts must be ≥ 1".into()));
    }
    let mut program = cfg.preset.program(cfg.group, device, cfg.seed);
    for (k, _) in program.kernels.iter_mut() {
        *k = with_dispersion(k.clone(), cfg.dispersion);
    }
    let launch = with_dispersion(Preset::VecAdd.kernels(device).swap_remove(0).0, cfg.dispersion);

    let golden: Vec<_> = (0..cfg.golden_traces as u64)
        .into_par_iter()
        .map(|i| simulate(&program.with_seed(cfg.seed.wrapping_add(i)), device, None))
        .collect::<Result<_, _>>()?;
    let model = build_golden(&golden, &program.marker, &program.config_table()?, &ValidationPolicy::default())?;

    let base = cfg.seed.wrapping_add(1 << 32);
    let layouts: Vec<_> = (0..cfg.traces_per_cell as u64)
        .into_par_iter()
        .map(|i| simulate_with_layout(&program.with_seed(base.wrapping_add(i)), device, None))
        .collect::<Result<_, _>>()?;

    let cell = |condition, level, traces: &[crate::model::Trace]| -> Result<NoiseCell, NoiseStudyError> {
        let (segments, mean_dtw) = mean_similarity(&model, traces)?;
        Ok(NoiseCell { condition, level, traces: traces.len(), segments, mean_dtw })
    };
    let clean: Vec<_> = layouts.iter().map(|(t, _)| t.clone()).collect();
    let mut cells = vec![cell(NoiseCondition::Baseline, 0, &clean)?];

    for level in 1..=cfg.max_level {
        for condition in [NoiseCondition::SelfNoise, NoiseCondition::ExternalNoise] {
            let traces: Vec<_> = layouts
                .par_iter()
                .enumerate()
                .map(|(i, (t, spans))| {
                    let p = program.with_seed(base.wrapping_add(i as u64));
                    let nseed = p.seed ^ ((level as u64) << 48) ^ 0x6e01_5e00;
                    let noise = match condition {
                        NoiseCondition::SelfNoise => self_noise(&p, spans, level, nseed),
                        _ => external_noise(&launch, t.len() as u64, level, nseed),
                    };
                    simulate(&p, device, Some(&noise))
                })
                .collect::<Result<_, _>>()?;
            cells.push(cell(condition, level, &traces)?);
        }
    }
    Ok(cells)
}
