//! Window-granular synthetic GPU execution producing per-instance counter
//! traces with marker bursts around every kernel launch.
//!
//! Body counts follow a gamma-Poisson law: mean `μ`, variance `μ + d²μ²`
//! for dispersion `d`. With `d = 0` every draw is exactly `round(μ)`.

mod doc;
pub mod presets;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ConfigTable, DeviceConfig, EventGroup, KernelMetadata, ModelError, Sample, Trace};
use crate::segmentation::MarkerSpec;

pub use doc::{load_program_doc, ProgramDoc};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpuSimError {
    #[error("config id {0} has no marker amplitude")]
    UnregisteredConfig(u32),
    #[error("marker event `{0}` is not part of the program's event group")]
    MarkerNotInGroup(String),
    #[error("invalid kernel profile `{name}`: {reason}")]
    InvalidProfile { name: String, reason: String },
    #[error("program document: {0}")]
    Document(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A stretch of uniform behaviour inside a kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub duration_windows: u32,
    /// Mean count per active instance per window, by event name.
    pub rates: BTreeMap<String, f64>,
    pub dispersion: f64,
}

impl Phase {
    pub fn rate(&self, event: &str) -> f64 {
        self.rates.get(event).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelProfile {
    pub name: String,
    pub phases: Vec<Phase>,
    /// Fraction of each event's instances the kernel occupies.
    pub occupancy: f64,
}

impl KernelProfile {
    pub fn duration_windows(&self) -> u64 {
        self.phases.iter().map(|p| p.duration_windows as u64).sum()
    }

    /// Number of instances occupied out of `instances`; always at least one.
    pub fn active_instances(&self, instances: usize) -> usize {
        ((self.occupancy * instances as f64).round() as usize).clamp(1, instances)
    }

    /// Phase rates unrolled to one entry per body window.
    pub fn window_phases(&self) -> impl Iterator<Item = &Phase> {
        self.phases.iter().flat_map(|p| std::iter::repeat_n(p, p.duration_windows as usize))
    }

    /// Mean of `event`'s rate over all body windows.
    pub fn mean_rate(&self, event: &str) -> f64 {
        let n = self.duration_windows();
        if n == 0 {
            return 0.0;
        }
        self.phases.iter().map(|p| p.rate(event) * p.duration_windows as f64).sum::<f64>() / n as f64
    }

    pub fn validate(&self, group: &EventGroup, marker_event: Option<&str>) -> Result<(), GpuSimError> {
        let bad = |reason: String| Err(GpuSimError::InvalidProfile { name: self.name.clone(), reason });
        if self.phases.is_empty() {
            return bad("no phases".into());
        }
        if !(self.occupancy > 0.0 && self.occupancy <= 1.0) {
            return bad(format!("occupancy {} outside (0, 1]", self.occupancy));
        }
        for (i, p) in self.phases.iter().enumerate() {
            if p.duration_windows == 0 {
                return bad(format!("phase {i} has zero duration"));
            }
            if !(p.dispersion >= 0.0 && p.dispersion.is_finite()) {
                return bad(format!("phase {i} dispersion {}", p.dispersion));
            }
            if let Some((e, r)) = p.rates.iter().find(|(_, r)| !(**r >= 0.0 && r.is_finite())) {
                return bad(format!("phase {i} rate {r} for `{e}`"));
            }
            for ev in group.events() {
                if Some(ev.name.as_str()) != marker_event && !p.rates.contains_key(&ev.name) {
                    return bad(format!("phase {i} has no rate for `{}`", ev.name));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgramSpec {
    pub group: EventGroup,
    pub kernels: Vec<(KernelProfile, KernelMetadata)>,
    pub marker: MarkerSpec,
    pub seed: u64,
    /// Idle windows after every kernel's closing marker.
    pub gap_windows: u32,
    /// Upper bound of the random idle lead-in before the first kernel,
    /// modelling the arbitrary phase between sampling windows and launch.
    pub lead_jitter: u32,
}

impl ProgramSpec {
    /// Distinct kernel configurations of the program.
    pub fn config_table(&self) -> Result<ConfigTable, GpuSimError> {
        let mut t = ConfigTable::new();
        for (_, meta) in &self.kernels {
            match t.get(meta.config_id) {
                Some(m) if m == meta => {}
                _ => t.register(meta.clone())?,
            }
        }
        Ok(t)
    }

    pub fn with_seed(&self, seed: u64) -> ProgramSpec {
        ProgramSpec { seed, ..self.clone() }
    }

    /// Longest trace the program can produce.
    pub fn max_windows(&self) -> u64 {
        self.lead_jitter as u64
            + self.kernels.iter().map(|(k, _)| k.duration_windows() + 2 + self.gap_windows as u64).sum::<u64>()
    }

    pub fn validate(&self) -> Result<(), GpuSimError> {
        let marker = &self.marker.marker_event.name;
        if self.group.index_of(marker).is_none() {
            return Err(GpuSimError::MarkerNotInGroup(marker.clone()));
        }
        for (k, meta) in &self.kernels {
            k.validate(&self.group, Some(marker))?;
            if self.marker.amplitude(meta.config_id).is_none() {
                return Err(GpuSimError::UnregisteredConfig(meta.config_id));
            }
        }
        self.config_table()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    SelfNoise,
    ExternalNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcurrentKernel {
    pub profile: KernelProfile,
    pub start_window: u64,
}

/// Kernels running alongside the program. They add counts to the windows
/// they overlap and never touch the marker channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub concurrent: Vec<ConcurrentKernel>,
    pub kind: NoiseKind,
    pub seed: u64,
}

/// Where each kernel landed in a simulated trace, as sample positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelSpan {
    pub open_marker: usize,
    pub body_start: usize,
    pub body_len: usize,
    pub close_marker: usize,
}

/// Draws one counter value with mean `mean` and dispersion `dispersion`.
pub fn draw_count<R: Rng + ?Sized>(mean: f64, dispersion: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    if dispersion == 0.0 {
        return mean.round() as u64;
    }
    let d2 = dispersion * dispersion;
    let lambda = Gamma::new(1.0 / d2, mean * d2).expect("positive shape and scale").sample(rng);
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).expect("positive rate").sample(rng) as u64
}

pub fn simulate(program: &ProgramSpec, device: &DeviceConfig, noise: Option<&NoiseSpec>) -> Result<Trace, GpuSimError> {
    simulate_with_layout(program, device, noise).map(|(t, _)| t)
}

/// As [`simulate`], also returning where every kernel was placed.
pub fn simulate_with_layout(
    program: &ProgramSpec,
    device: &DeviceConfig,
    noise: Option<&NoiseSpec>,
) -> Result<(Trace, Vec<KernelSpan>), GpuSimError> {
    program.validate()?;
    device.validate()?;
    let group = &program.group;
    let (events, instances) = (group.len(), group.instances());
    let marker_idx = group.index_of(&program.marker.marker_event.name).expect("validated");
    let mut rng = ChaCha8Rng::seed_from_u64(program.seed);

    let lead = if program.lead_jitter > 0 { rng.gen_range(0..=program.lead_jitter) } else { 0 } as usize;
    let mut samples: Vec<Sample> = Vec::with_capacity(program.max_windows() as usize);
    let push_idle = |samples: &mut Vec<Sample>, n: usize| {
        for _ in 0..n {
            samples.push(Sample::zeros(samples.len() as u64, events, instances));
        }
    };
    push_idle(&mut samples, lead);

    let mut spans = Vec::with_capacity(program.kernels.len());
    for (profile, meta) in &program.kernels {
        let active = profile.active_instances(instances);
        let amplitude = program.marker.amplitude(meta.config_id).expect("validated");
        let open_marker = samples.len();
        samples.push(marker_sample(open_marker, events, instances, marker_idx, amplitude, active));
        let body_start = samples.len();
        for phase in profile.window_phases() {
            let mut s = Sample::zeros(samples.len() as u64, events, instances);
            for (e, ev) in group.events().iter().enumerate() {
                if e == marker_idx {
                    continue;
                }
                let mu = phase.rate(&ev.name);
                for i in 0..active {
                    s.set(e, i, draw_count(mu, phase.dispersion, &mut rng));
                }
            }
            samples.push(s);
        }
        let close_marker = samples.len();
        samples.push(marker_sample(close_marker, events, instances, marker_idx, amplitude, active));
        spans.push(KernelSpan { open_marker, body_start, body_len: close_marker - body_start, close_marker });
        push_idle(&mut samples, program.gap_windows as usize);
    }

    if let Some(noise) = noise {
        overlay_noise(&mut samples, group, marker_idx, noise)?;
    }
    let trace = Trace::new(group.clone(), samples, None, device.clone())?;
    Ok((trace, spans))
}

fn marker_sample(w: usize, events: usize, instances: usize, marker: usize, amplitude: u64, active: usize) -> Sample {
    let mut s = Sample::zeros(w as u64, events, instances);
    let (share, rest) = (amplitude / active as u64, amplitude % active as u64);
    for i in 0..active {
        s.set(marker, i, share + u64::from((i as u64) < rest));
    }
    s
}

fn overlay_noise(samples: &mut [Sample], group: &EventGroup, marker: usize, noise: &NoiseSpec) -> Result<(), GpuSimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    for ck in &noise.concurrent {
        ck.profile.validate(group, Some(&group.events()[marker].name))?;
        let active = ck.profile.active_instances(group.instances());
        for (off, phase) in ck.profile.window_phases().enumerate() {
            let Some(s) = samples.get_mut(ck.start_window as usize + off) else {
                break;
            };
            for (e, ev) in group.events().iter().enumerate() {
                if e == marker {
                    continue;
                }
                let mu = phase.rate(&ev.name);
                for i in 0..active {
                    s.add(e, i, draw_count(mu, phase.dispersion, &mut rng));
                }
            }
        }
    }
    Ok(())
}

/// Models a lower sampling rate: each run of `keep_every` consecutive windows
/// (the last run possibly shorter) is summed into one window.
pub fn sampling_decimate(trace: &Trace, keep_every: usize) -> Trace {
    assert!(keep_every >= 1, "keep_every must be positive");
    let samples = trace
        .samples
        .chunks(keep_every)
        .enumerate()
        .map(|(w, chunk)| {
            let mut s = Sample::zeros(w as u64, chunk[0].events(), chunk[0].instances());
            for c in chunk {
                for (acc, v) in s.values_mut().iter_mut().zip(c.values()) {
                    *acc += v;
                }
            }
            s
        })
        .collect();
    Trace { group: trace.group.clone(), samples, meta: trace.meta.clone(), device: trace.device.clone() }
}
