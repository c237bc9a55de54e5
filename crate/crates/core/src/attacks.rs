//! Counter-level signatures of four attacks on GPU workloads, expressed as
//! transformations of a simulated program or as concurrent attacker kernels.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gpusim::presets::{
    FB_SUBP0_READ, FB_SUBP1_READ, GLOBAL_LOAD, GLOBAL_STORE, INST_EXECUTED, L2_READ_QUERIES, L2_WRITE_QUERIES,
    MEMORY_EVENTS,
};
use crate::gpusim::{ConcurrentKernel, KernelProfile, NoiseKind, NoiseSpec, Phase, ProgramSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error("target kernel {target} out of range for a {kernels}-kernel program")]
    InvalidTarget { target: usize, kernels: usize },
    #[error("{0:?} requires a target kernel")]
    MissingTarget(AttackKind),
    #[error("magnitude must be positive and finite, got {0}")]
    InvalidMagnitude(f64),
    #[error("skipping the only kernel leaves an empty program")]
    EmptyProgram,
    #[error("event group lacks memory event `{0}`")]
    MissingMemoryEvents(String),
    #[error("spec of kind {found:?} passed to the {expected:?} injector")]
    WrongKind { expected: AttackKind, found: AttackKind },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    /// Hijacked control flow runs an injected payload inside a kernel.
    BufferOverflow,
    /// A kernel launch is hijacked into a no-op.
    MindControl,
    /// A concurrent kernel hammers DRAM rows and evicts L2.
    Rowhammer,
    /// A concurrent kernel triggers refresh management with random DRAM
    /// accesses, stretching the victim.
    Slowdown,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] =
        [AttackKind::BufferOverflow, AttackKind::MindControl, AttackKind::Rowhammer, AttackKind::Slowdown];

    /// Shipped magnitudes, calibrated on the bundled presets at default
    /// dispersion and policy.
    pub fn default_magnitude(self) -> f64 {
        match self {
            AttackKind::BufferOverflow => 0.75,
            AttackKind::MindControl => 1.0,
            AttackKind::Rowhammer => 20.0,
            AttackKind::Slowdown => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    #[serde(default)]
    pub target_kernel: Option<usize>,
    pub magnitude: f64,
    #[serde(default)]
    pub seed: u64,
}

impl AttackSpec {
    pub fn new(kind: AttackKind, target_kernel: Option<usize>, seed: u64) -> Self {
        AttackSpec { kind, target_kernel, magnitude: kind.default_magnitude(), seed }
    }

    pub fn validate(&self, kernels: usize) -> Result<(), AttackError> {
        if !(self.magnitude > 0.0 && self.magnitude.is_finite()) {
            return Err(AttackError::InvalidMagnitude(self.magnitude));
        }
        match self.target_kernel {
            None if self.kind == AttackKind::MindControl => Err(AttackError::MissingTarget(self.kind)),
            Some(t) if t >= kernels => Err(AttackError::InvalidTarget { target: t, kernels }),
            _ => Ok(()),
        }
    }

    fn expect(&self, kind: AttackKind, kernels: usize) -> Result<(), AttackError> {
        if self.kind != kind {
            return Err(AttackError::WrongKind { expected: kind, found: self.kind });
        }
        self.validate(kernels)
    }

    fn targets(&self, kernels: usize) -> Vec<usize> {
        match self.target_kernel {
            Some(t) => vec![t],
            None => (0..kernels).collect(),
        }
    }
}

/// Outcome of applying an attack: a rewritten program and, for attacks that
/// run beside the victim, the attacker kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct Injected {
    pub program: ProgramSpec,
    pub noise: Option<NoiseSpec>,
}

pub fn inject(program: &ProgramSpec, spec: &AttackSpec) -> Result<Injected, AttackError> {
    Ok(match spec.kind {
        AttackKind::BufferOverflow => Injected { program: inject_buffer_overflow(program, spec)?, noise: None },
        AttackKind::MindControl => Injected { program: inject_kernel_skip(program, spec)?, noise: None },
        AttackKind::Rowhammer => Injected { program: program.clone(), noise: Some(inject_rowhammer(program, spec)?) },
        AttackKind::Slowdown => {
            let (program, noise) = inject_slowdown(program, spec)?;
            Injected { program, noise: Some(noise) }
        }
    })
}

/// Body windows `[start, end)` of a `len`-window kernel overwritten by a
/// payload of magnitude `m`: a centred span covering `min(1, m)` of the body.
pub fn payload_window_range(len: u64, m: f64) -> (u64, u64) {
    let span = ((m.min(1.0) * len as f64).round() as u64).min(len);
    let start = (len - span) / 2;
    (start, start + span)
}

/// The payload's steady behaviour inside `profile`: the kernel's mean rates
/// with instructions scaled by `1 + m` and the read and write sides of the
/// memory mix exchanged.
pub fn payload_phase(profile: &KernelProfile, m: f64, windows: u32) -> Phase {
    let mut rates: BTreeMap<String, f64> =
        profile.phases[0].rates.keys().map(|e| (e.clone(), profile.mean_rate(e))).collect();
    if let Some(r) = rates.get_mut(INST_EXECUTED) {
        *r *= 1.0 + m;
    }
    for (read, write) in [(GLOBAL_LOAD, GLOBAL_STORE), (L2_READ_QUERIES, L2_WRITE_QUERIES)] {
        if let (Some(r), Some(w)) = (rates.remove(read), rates.remove(write)) {
            rates.insert(read.into(), w);
            rates.insert(write.into(), r);
        }
    }
    Phase { duration_windows: windows, rates, dispersion: profile.phases[0].dispersion }
}

/// Splices an attacker payload into each targeted kernel: the centred
/// [`payload_window_range`] runs [`payload_phase`] instead of the victim code.
pub fn inject_buffer_overflow(program: &ProgramSpec, spec: &AttackSpec) -> Result<ProgramSpec, AttackError> {
    spec.expect(AttackKind::BufferOverflow, program.kernels.len())?;
    let mut out = program.clone();
    let m = spec.magnitude;
    for k in spec.targets(program.kernels.len()) {
        let profile = &mut out.kernels[k].0;
        let (start, end) = payload_window_range(profile.duration_windows(), m);
        if start == end {
            continue;
        }
        let payload = payload_phase(profile, m, (end - start) as u32);
        let mut phases = Vec::new();
        for (p, inside) in split_phases(&profile.phases, start, end) {
            if !inside {
                phases.push(p);
            } else if phases.last() != Some(&payload) {
                phases.push(payload.clone());
            }
        }
        profile.phases = phases;
    }
    Ok(out)
}

/// Cuts phases at body windows `start` and `end`, tagging each piece with
/// whether it lies inside `[start, end)`.
fn split_phases(phases: &[Phase], start: u64, end: u64) -> Vec<(Phase, bool)> {
    let mut out = Vec::new();
    let mut t = 0u64;
    for p in phases {
        let (a, b) = (t, t + p.duration_windows as u64);
        let cuts = [a, start.clamp(a, b), end.clamp(a, b), b];
        for seg in cuts.windows(2) {
            if seg[1] > seg[0] {
                let piece = Phase { duration_windows: (seg[1] - seg[0]) as u32, ..p.clone() };
                out.push((piece, seg[0] >= start && seg[1] <= end));
            }
        }
        t = b;
    }
    out
}

/// Removes the targeted launch together with its markers.
pub fn inject_kernel_skip(program: &ProgramSpec, spec: &AttackSpec) -> Result<ProgramSpec, AttackError> {
    spec.expect(AttackKind::MindControl, program.kernels.len())?;
    if program.kernels.len() == 1 {
        return Err(AttackError::EmptyProgram);
    }
    let mut out = program.clone();
    out.kernels.remove(spec.target_kernel.expect("validated"));
    Ok(out)
}

fn require_memory_events(program: &ProgramSpec) -> Result<(), AttackError> {
    match MEMORY_EVENTS.iter().find(|e| !program.group.contains(e)) {
        Some(e) => Err(AttackError::MissingMemoryEvents(e.to_string())),
        None => Ok(()),
    }
}

/// Duration-weighted mean rate of `event` over the program's kernel bodies.
fn benign_mean(program: &ProgramSpec, event: &str) -> f64 {
    let (mut sum, mut windows) = (0.0, 0u64);
    for (k, _) in &program.kernels {
        sum += k.mean_rate(event) * k.duration_windows() as f64;
        windows += k.duration_windows();
    }
    if windows == 0 {
        0.0
    } else {
        sum / windows as f64
    }
}

fn benign_peak(program: &ProgramSpec, event: &str) -> f64 {
    program.kernels.iter().flat_map(|(k, _)| &k.phases).map(|p| p.rate(event)).fold(0.0, f64::max)
}

/// Rates for every non-marker event of the group, zero unless given.
fn attacker_rates(program: &ProgramSpec, given: &[(&str, f64)]) -> BTreeMap<String, f64> {
    let marker = &program.marker.marker_event.name;
    program
        .group
        .events()
        .iter()
        .filter(|e| &e.name != marker)
        .map(|e| {
            let r = given.iter().find(|(n, _)| *n == e.name).map_or(0.0, |(_, r)| *r);
            (e.name.clone(), r)
        })
        .collect()
}

fn noise_seed(spec: &AttackSpec) -> u64 {
    spec.seed ^ 0x5eed_a77a_c4e5_0000
}

pub const ROWHAMMER_DISPERSION: f64 = 0.5;
pub const SLOWDOWN_DISPERSION: f64 = 2.0;

/// A concurrent attacker spanning the victim: hammering bursts of one to
/// three windows with DRAM reads at `magnitude ×` the victim's mean rate and
/// L2 read and write queries raised by `magnitude / 2` and `magnitude / 4`,
/// each followed by a one-window lull at a twentieth of the burst level.
pub fn inject_rowhammer(program: &ProgramSpec, spec: &AttackSpec) -> Result<NoiseSpec, AttackError> {
    spec.expect(AttackKind::Rowhammer, program.kernels.len())?;
    require_memory_events(program)?;
    let m = spec.magnitude;
    let level = |scale: f64| {
        [
            (FB_SUBP0_READ, scale * m * benign_mean(program, FB_SUBP0_READ)),
            (FB_SUBP1_READ, scale * m * benign_mean(program, FB_SUBP1_READ)),
            (L2_READ_QUERIES, scale * m / 2.0 * benign_mean(program, L2_READ_QUERIES)),
            (L2_WRITE_QUERIES, scale * m / 4.0 * benign_mean(program, L2_WRITE_QUERIES)),
        ]
    };
    let (burst, quiet) = (attacker_rates(program, &level(1.0)), attacker_rates(program, &level(0.05)));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = program.max_windows();
    let mut phases = Vec::new();
    let mut t = 0u64;
    while t < total {
        for (rates, len) in [(&burst, rng.gen_range(1..=3u32)), (&quiet, 1)] {
            phases.push(Phase { duration_windows: len, rates: rates.clone(), dispersion: ROWHAMMER_DISPERSION });
            t += len as u64;
        }
    }
    let profile = KernelProfile { name: "rowhammer".into(), phases, occupancy: 1.0 };
    Ok(NoiseSpec {
        concurrent: vec![ConcurrentKernel { profile, start_window: 0 }],
        kind: NoiseKind::ExternalNoise,
        seed: noise_seed(spec),
    })
}

/// Stretches every phase of the targeted kernels by `1 + magnitude` and runs
/// a random-address attacker beside the victim: memory rates at
/// `1 + magnitude` times the victim's peak phase rate with high dispersion.
pub fn inject_slowdown(program: &ProgramSpec, spec: &AttackSpec) -> Result<(ProgramSpec, NoiseSpec), AttackError> {
    spec.expect(AttackKind::Slowdown, program.kernels.len())?;
    require_memory_events(program)?;
    let m = spec.magnitude;
    let mut out = program.clone();
    for k in spec.targets(program.kernels.len()) {
        for p in &mut out.kernels[k].0.phases {
            p.duration_windows = ((p.duration_windows as f64 * (1.0 + m)).round() as u32).max(1);
        }
    }
    let given: Vec<(&str, f64)> = MEMORY_EVENTS.iter().map(|e| (*e, (1.0 + m) * benign_peak(program, e))).collect();
    let phase = Phase {
        duration_windows: out.max_windows() as u32,
        rates: attacker_rates(program, &given),
        dispersion: SLOWDOWN_DISPERSION,
    };
    let profile = KernelProfile { name: "rfm_slowdown".into(), phases: vec![phase], occupancy: 1.0 };
    let noise = NoiseSpec {
        concurrent: vec![ConcurrentKernel { profile, start_window: 0 }],
        kind: NoiseKind::ExternalNoise,
        seed: noise_seed(spec),
    };
    Ok((out, noise))
}
