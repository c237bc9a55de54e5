//! Cycle-level model of in-GPU validation: per-SM PMUs freeze a packet every
//! sampling window, packets cross a shared token-bucket link, and an on-chip
//! validator sums them per window and compares the sums with golden values.
//!
//! With validation off the same packets sink into a memory ring buffer over
//! the same link, so the cycle difference between the two modes isolates the
//! cost of golden fetches and checking.

pub mod pmu;
pub mod validator;

use std::collections::{BTreeMap, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gpusim::{simulate_with_layout, GpuSimError, NoiseSpec, ProgramSpec};
use crate::model::DeviceConfig;
use crate::similarity::{dtw_similarity_scaled, Series};

use pmu::{Metrics, PmuPacket, PmuState, PMU_COUNTERS, PMU_LINES};
use validator::{compare_window, AggCache, WindowOutcome, WindowTag, DEFAULT_CACHE_ENTRIES, FETCH_BUFFER_ENTRIES};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HwSimError {
    #[error(transparent)]
    Sim(#[from] GpuSimError),
    #[error("invalid hardware config: {0}")]
    InvalidConfig(String),
    #[error("program events have {found} instances but the hardware has {expected} SMs")]
    NotPerSm { expected: usize, found: usize },
    #[error("program has {0} events; a PMU has {PMU_LINES} lines")]
    TooManyEvents(usize),
    #[error("aggregation cache full ({capacity} entries) when window {tag:?} arrived")]
    CacheCapacityExceeded { capacity: usize, tag: WindowTag },
    #[error("window {0:?} arrived for a kernel with no active PMUs")]
    NoActivePmus(WindowTag),
    #[error("validation needs a golden model")]
    MissingGolden,
    #[error("no golden reference for config {0}")]
    NoGolden(u32),
    #[error("golden runs disagree on config {config_id}: {a} vs {b} windows")]
    InconsistentGolden { config_id: u32, a: usize, b: usize },
    #[error("golden run {0} did not complete")]
    IncompleteGoldenRun(usize),
    #[error("no golden runs")]
    EmptyGolden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HwSimConfig {
    pub num_sms: u32,
    pub window_cycles: u32,
    /// Packets per cycle; `inf` for an uncontended link.
    pub link_bandwidth: f64,
    pub link_latency: u64,
    /// Packets per cycle of the workload's own traffic on the link.
    pub background_traffic: f64,
    pub cache_entries: usize,
    /// Thresholds are this multiple of the golden spread.
    pub mad_factor: f64,
    /// Fixed per-metric thresholds replacing the golden-derived ones.
    pub tau: Option<[f64; PMU_COUNTERS]>,
}

impl Default for HwSimConfig {
    fn default() -> Self {
        HwSimConfig {
            num_sms: 15,
            window_cycles: 16_384,
            link_bandwidth: 0.004,
            link_latency: 200,
            background_traffic: 0.001,
            cache_entries: DEFAULT_CACHE_ENTRIES,
            mad_factor: 6.0,
            tau: None,
        }
    }
}

impl HwSimConfig {
    pub fn validate(&self) -> Result<(), HwSimError> {
        let bad = |m: String| Err(HwSimError::InvalidConfig(m));
        if self.num_sms == 0 || self.num_sms > u8::MAX as u32 {
            return bad(format!("num_sms {} outside 1..=255", self.num_sms));
        }
        if self.window_cycles == 0 {
            return bad("window_cycles must be positive".into());
        }
        if !(self.link_bandwidth > 0.0) {
            return bad(format!("link_bandwidth {} must be positive", self.link_bandwidth));
        }
        if !(self.background_traffic >= 0.0 && self.background_traffic < self.link_bandwidth) {
            return bad(format!(
                "background_traffic {} must lie in [0, link_bandwidth)",
                self.background_traffic
            ));
        }
        if self.cache_entries == 0 {
            return bad("cache_entries must be positive".into());
        }
        if !(self.mad_factor >= 0.0 && self.mad_factor.is_finite()) {
            return bad(format!("mad_factor {}", self.mad_factor));
        }
        if let Some(t) = &self.tau {
            if t.iter().any(|v| !(*v >= 0.0)) {
                return bad("thresholds must be non-negative".into());
            }
        }
        Ok(())
    }

    /// Device matching this hardware, for generating workloads.
    pub fn device(&self) -> DeviceConfig {
        let group = (1..=4).rev().find(|g| self.num_sms.is_multiple_of(*g)).unwrap_or(1);
        DeviceConfig { num_sms: self.num_sms, sm_group_size: group, window_cycles: self.window_cycles as u64, clock_mhz: 700.0 }
    }

    /// Cycles one link transfer occupies the link.
    fn service_interval(&self) -> f64 {
        let free = self.link_bandwidth - self.background_traffic;
        if free.is_infinite() {
            0.0
        } else {
            1.0 / free
        }
    }
}

/// Event-line activity of one kernel launch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelLoad {
    pub config_id: u32,
    pub active: usize,
    /// `[window][sm][line]`: cycles each line is asserted.
    pub windows: Vec<Vec<[u64; PMU_LINES]>>,
}

/// Per-SM event-line activity of `program`, taken from the simulated counter
/// trace: event `e` of the group drives line `e`.
pub fn workload(program: &ProgramSpec, noise: Option<&NoiseSpec>, cfg: &HwSimConfig) -> Result<Vec<KernelLoad>, HwSimError> {
    let group = &program.group;
    if group.len() > PMU_LINES {
        return Err(HwSimError::TooManyEvents(group.len()));
    }
    if group.instances() != cfg.num_sms as usize {
        return Err(HwSimError::NotPerSm { expected: cfg.num_sms as usize, found: group.instances() });
    }
    let (trace, spans) = simulate_with_layout(program, &cfg.device(), noise)?;
    Ok(program
        .kernels
        .iter()
        .zip(&spans)
        .map(|((profile, meta), span)| {
            let active = profile.active_instances(group.instances());
            let windows = trace.samples[span.body_start..span.body_start + span.body_len]
                .iter()
                .map(|s| {
                    (0..active)
                        .map(|sm| {
                            let mut lines = [0u64; PMU_LINES];
                            for (e, l) in lines.iter_mut().enumerate().take(group.len()) {
                                *l = s.get(e, sm);
                            }
                            lines
                        })
                        .collect()
                })
                .collect();
            KernelLoad { config_id: meta.config_id, active, windows }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelObservation {
    pub config_id: u32,
    pub active: usize,
    /// Per-window sums over active SMs of the delivered packets.
    pub windows: Vec<[u64; PMU_COUNTERS]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum HwVerdict {
    Benign,
    Flagged {
        kernel: u32,
        config_id: u32,
        ts: u32,
        /// Metrics over threshold; empty when the kernel ended short of its
        /// golden length.
        metrics: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HwRun {
    pub validation_on: bool,
    pub cycles: u64,
    pub verdict: HwVerdict,
    pub kernels: Vec<KernelObservation>,
    /// Scaled DTW similarity of each observed kernel to its golden windows.
    pub dtw: Vec<Option<f64>>,
    pub stall_cycles: u64,
    pub overflow: bool,
    /// Per SM and counter: cycles its selected line was asserted.
    pub asserted: Vec<[u64; PMU_COUNTERS]>,
    /// Per SM and counter: sum of all emitted metrics.
    pub emitted: Vec<[u64; PMU_COUNTERS]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HwReference {
    pub config_id: u32,
    pub windows: Vec<Metrics>,
    /// Median absolute deviation per window and metric.
    pub spread: Vec<[f64; PMU_COUNTERS]>,
    /// Per-metric unit: the largest window spread, at least 1.
    pub scale: [f64; PMU_COUNTERS],
    pub tau: [f64; PMU_COUNTERS],
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HwGolden {
    pub refs: BTreeMap<u32, HwReference>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Per-config median and MAD of window sums over complete profiling runs.
/// Thresholds are `mad_factor` times each metric's largest window MAD
/// (floored at 1).
pub fn build_hw_golden(runs: &[HwRun], mad_factor: f64) -> Result<HwGolden, HwSimError> {
    if runs.is_empty() {
        return Err(HwSimError::EmptyGolden);
    }
    let mut by_config: BTreeMap<u32, Vec<&[[u64; PMU_COUNTERS]]>> = BTreeMap::new();
    for (i, r) in runs.iter().enumerate() {
        if r.verdict != HwVerdict::Benign {
            return Err(HwSimError::IncompleteGoldenRun(i));
        }
        for k in &r.kernels {
            let v = by_config.entry(k.config_id).or_default();
            if let Some(first) = v.first() {
                if first.len() != k.windows.len() {
                    return Err(HwSimError::InconsistentGolden {
                        config_id: k.config_id,
                        a: first.len(),
                        b: k.windows.len(),
                    });
                }
            }
            v.push(&k.windows);
        }
    }
    let refs = by_config
        .into_iter()
        .map(|(config_id, obs)| {
            let len = obs[0].len();
            let mut windows = Vec::with_capacity(len);
            let mut spread = Vec::with_capacity(len);
            for w in 0..len {
                let (mut med, mut mad) = ([0u32; PMU_COUNTERS], [0f64; PMU_COUNTERS]);
                for m in 0..PMU_COUNTERS {
                    let mut xs: Vec<f64> = obs.iter().map(|o| o[w][m] as f64).collect();
                    let c = median(&mut xs);
                    let mut dev: Vec<f64> = xs.iter().map(|x| (x - c).abs()).collect();
                    med[m] = c.round().min(u32::MAX as f64) as u32;
                    mad[m] = median(&mut dev);
                }
                windows.push(med);
                spread.push(mad);
            }
            let mut scale = [1f64; PMU_COUNTERS];
            for s in &spread {
                for m in 0..PMU_COUNTERS {
                    scale[m] = scale[m].max(s[m]);
                }
            }
            let tau = scale.map(|s| mad_factor * s);
            (config_id, HwReference { config_id, windows, spread, scale, tau, support: obs.len() })
        })
        .collect();
    Ok(HwGolden { refs })
}

/// Profiles `program` once per seed with validation off and builds the
/// golden model from the runs.
pub fn hw_golden_from_seeds(program: &ProgramSpec, cfg: &HwSimConfig, seeds: &[u64]) -> Result<HwGolden, HwSimError> {
    let runs: Vec<HwRun> = seeds
        .par_iter()
        .map(|&s| run_hwsim(&program.with_seed(s), None, cfg, None, false))
        .collect::<Result<_, _>>()?;
    build_hw_golden(&runs, cfg.mad_factor)
}

/// DTW similarity of observed window sums to the golden windows, with each
/// metric measured in units of its golden spread.
pub fn kernel_dtw(observed: &[[u64; PMU_COUNTERS]], reference: &HwReference) -> Option<f64> {
    if observed.is_empty() || reference.windows.is_empty() {
        return None;
    }
    let a = Series::new((0..PMU_COUNTERS).map(|m| observed.iter().map(|w| w[m] as f64).collect()).collect());
    let b = Series::new((0..PMU_COUNTERS).map(|m| reference.windows.iter().map(|w| w[m] as f64).collect()).collect());
    dtw_similarity_scaled(&a, &b, &reference.scale).ok().map(|r| r.similarity)
}

#[derive(Debug, Clone, Copy)]
enum SmState {
    Idle,
    Running { until: f64 },
    Stalled { since: f64 },
    Done,
}

#[derive(Debug, Clone, Copy)]
enum LinkItem {
    Packet(usize),
    Fetch(WindowTag),
}

#[derive(Debug, Clone, Copy)]
enum Delivery {
    Packet(PmuPacket),
    Golden(WindowTag),
}

/// Single shared link: one transfer per service interval, then a fixed
/// latency. Transfers are served in request order.
struct Link {
    interval: f64,
    latency: f64,
    free_at: f64,
    queue: VecDeque<LinkItem>,
    /// Deliveries in arrival order (service is FIFO and latency constant).
    inflight: VecDeque<(f64, Delivery)>,
}

struct KernelCheck<'g> {
    config_id: u32,
    active: u8,
    reference: Option<&'g HwReference>,
    /// Observed window count, known once the kernel has completed.
    windows: Option<u32>,
    next_check: u32,
    ready: BTreeMap<u32, Metrics>,
}

impl KernelCheck<'_> {
    fn golden_len(&self) -> u32 {
        self.reference.map_or(0, |r| r.windows.len() as u32)
    }
}

struct Validator<'g> {
    cache: AggCache,
    kernels: Vec<KernelCheck<'g>>,
    current: usize,
    fetch_cursor: (usize, u32),
    /// Golden entries requested or resident, with arrival state.
    fetch_buffer: BTreeMap<WindowTag, bool>,
    tau_override: Option<[f64; PMU_COUNTERS]>,
}

impl Validator<'_> {
    fn request_fetches(&mut self, link: &mut Link) {
        while self.fetch_buffer.len() < FETCH_BUFFER_ENTRIES {
            let (k, ts) = self.fetch_cursor;
            let Some(kc) = self.kernels.get(k) else { break };
            if ts >= kc.golden_len() {
                if k + 1 < self.kernels.len() {
                    self.fetch_cursor = (k + 1, 0);
                    continue;
                }
                break;
            }
            let tag = WindowTag { kernel: k as u32, ts };
            self.fetch_buffer.insert(tag, false);
            link.queue.push_back(LinkItem::Fetch(tag));
            self.fetch_cursor.1 += 1;
        }
    }

    fn receive(&mut self, packet: &PmuPacket) -> Result<(), HwSimError> {
        let active = self.kernels[packet.kernel as usize].active;
        if let Some(check) = self.cache.receive(packet, active)? {
            self.kernels[check.tag.kernel as usize].ready.insert(check.tag.ts, check.aggregate);
        }
        Ok(())
    }

    /// Runs every check whose aggregate and golden entry are both present,
    /// in window order. Returns the first flag.
    fn progress(&mut self) -> Option<HwVerdict> {
        while let Some(kc) = self.kernels.get_mut(self.current) {
            let ts = kc.next_check;
            let kernel = self.current as u32;
            if kc.windows == Some(ts) {
                if ts < kc.golden_len() {
                    return Some(HwVerdict::Flagged { kernel, config_id: kc.config_id, ts, metrics: vec![] });
                }
                self.current += 1;
                continue;
            }
            let Some(aggregate) = kc.ready.get(&ts).copied() else { break };
            let tag = WindowTag { kernel, ts };
            let golden = match kc.reference {
                Some(r) if (ts as usize) < r.windows.len() => {
                    if self.fetch_buffer.get(&tag) != Some(&true) {
                        break;
                    }
                    self.fetch_buffer.remove(&tag);
                    r.windows[ts as usize]
                }
                _ => [0; PMU_COUNTERS],
            };
            let tau = self.tau_override.or(kc.reference.map(|r| r.tau)).unwrap_or([0.0; PMU_COUNTERS]);
            kc.ready.remove(&ts);
            kc.next_check += 1;
            if let WindowOutcome::Flag(metrics) = compare_window(&aggregate, &golden, &tau) {
                return Some(HwVerdict::Flagged { kernel, config_id: kc.config_id, ts, metrics });
            }
        }
        None
    }

    fn finished(&self) -> bool {
        self.current >= self.kernels.len()
    }
}

pub fn run_hwsim(
    program: &ProgramSpec,
    noise: Option<&NoiseSpec>,
    cfg: &HwSimConfig,
    golden: Option<&HwGolden>,
    validation_on: bool,
) -> Result<HwRun, HwSimError> {
    cfg.validate()?;
    let loads = workload(program, noise, cfg)?;
    run_loads(&loads, cfg, golden, validation_on)
}

/// Drives pre-computed kernel loads through PMUs, link and validator.
pub fn run_loads(
    loads: &[KernelLoad],
    cfg: &HwSimConfig,
    golden: Option<&HwGolden>,
    validation_on: bool,
) -> Result<HwRun, HwSimError> {
    cfg.validate()?;
    if validation_on && golden.is_none() {
        return Err(HwSimError::MissingGolden);
    }
    let n = cfg.num_sms as usize;
    let w = cfg.window_cycles as f64;
    let mut pmus: Vec<PmuState> = (0..n).map(|i| PmuState::new(i as u32, cfg.window_cycles)).collect();
    let mut states = vec![SmState::Idle; n];
    let mut asserted = vec![[0u64; PMU_COUNTERS]; n];
    let mut link = Link {
        interval: cfg.service_interval(),
        latency: cfg.link_latency as f64,
        free_at: 0.0,
        queue: VecDeque::new(),
        inflight: VecDeque::new(),
    };
    let mut val = Validator {
        cache: AggCache::new(cfg.cache_entries),
        kernels: Vec::new(),
        current: 0,
        fetch_cursor: (0, 0),
        fetch_buffer: BTreeMap::new(),
        tau_override: cfg.tau,
    };
    let mut observed: Vec<KernelObservation> = Vec::new();
    let mut running: Option<usize> = None;
    let mut next_kernel = 0usize;
    let mut verdict = HwVerdict::Benign;
    let mut now = 0.0f64;

    // Starts the SM's next window of `load`, or retires it.
    let start_next = |sm: usize, now: f64, load: &KernelLoad, pmus: &[PmuState], states: &mut [SmState]| {
        states[sm] = if (pmus[sm].window as usize) < load.windows.len() {
            SmState::Running { until: now + w }
        } else {
            SmState::Done
        };
    };
    // Counts `cycles` of the SM's current window of `load`.
    let count = |sm: usize, cycles: u32, load: &KernelLoad, pmus: &mut [PmuState], asserted: &mut [[u64; PMU_COUNTERS]]| {
        let p = &mut pmus[sm];
        let lines = &load.windows[p.window as usize][sm];
        p.advance(cycles, lines);
        for c in 0..PMU_COUNTERS {
            let l = p.mux_select[c] as usize;
            if l < PMU_LINES {
                asserted[sm][c] += lines[l].min(cycles as u64);
            }
        }
    };

    'sim: loop {
        loop {
            let mut changed = false;

            while link.inflight.front().is_some_and(|(t, _)| *t <= now) {
                let (_, d) = link.inflight.pop_front().expect("non-empty");
                changed = true;
                match d {
                    Delivery::Packet(p) => {
                        let obs = &mut observed[p.kernel as usize];
                        for (acc, v) in obs.windows[p.ts as usize].iter_mut().zip(&p.metrics) {
                            *acc += *v as u64;
                        }
                        if validation_on {
                            val.receive(&p)?;
                        }
                    }
                    Delivery::Golden(tag) => {
                        val.fetch_buffer.insert(tag, true);
                    }
                }
            }

            if validation_on {
                if let Some(flag) = val.progress() {
                    verdict = flag;
                    // The dispatcher stops the kernel: open windows close
                    // early and their packets are never processed.
                    if let Some(k) = running {
                        for sm in 0..loads[k].active {
                            if let SmState::Running { until } = states[sm] {
                                let elapsed = (now - (until - w)).floor().clamp(0.0, w) as u32;
                                count(sm, elapsed, &loads[k], &mut pmus, &mut asserted);
                                pmus[sm].freeze();
                                states[sm] = SmState::Done;
                            }
                        }
                    }
                    break 'sim;
                }
                val.request_fetches(&mut link);
            }

            // Kernel dispatch and completion.
            if let Some(k) = running {
                if (0..loads[k].active).all(|sm| matches!(states[sm], SmState::Done)) {
                    if validation_on {
                        val.kernels[k].windows = Some(loads[k].windows.len() as u32);
                    }
                    running = None;
                    changed = true;
                }
            }
            if running.is_none() && next_kernel < loads.len() {
                let k = next_kernel;
                let load = &loads[k];
                next_kernel += 1;
                running = Some(k);
                changed = true;
                observed.push(KernelObservation {
                    config_id: load.config_id,
                    active: load.active,
                    windows: vec![[0; PMU_COUNTERS]; load.windows.len()],
                });
                if validation_on {
                    let reference = golden.expect("checked").refs.get(&load.config_id);
                    if reference.is_none() && cfg.tau.is_none() {
                        return Err(HwSimError::NoGolden(load.config_id));
                    }
                    val.kernels.push(KernelCheck {
                        config_id: load.config_id,
                        active: load.active as u8,
                        reference,
                        windows: None,
                        next_check: 0,
                        ready: BTreeMap::new(),
                    });
                }
                for sm in 0..load.active {
                    pmus[sm].reset_kernel(k as u32);
                    start_next(sm, now, load, &pmus, &mut states);
                }
            }

            if let Some(k) = running {
                for sm in 0..loads[k].active {
                    match states[sm] {
                        SmState::Running { until } if until <= now => {
                            changed = true;
                            count(sm, cfg.window_cycles, &loads[k], &mut pmus, &mut asserted);
                            if pmus[sm].freeze() {
                                link.queue.push_back(LinkItem::Packet(sm));
                                start_next(sm, now, &loads[k], &pmus, &mut states);
                            } else {
                                states[sm] = SmState::Stalled { since: now };
                            }
                        }
                        SmState::Stalled { since } if pmus[sm].retry_pending() => {
                            changed = true;
                            pmus[sm].stall_cycles += (now - since).ceil() as u64;
                            link.queue.push_back(LinkItem::Packet(sm));
                            start_next(sm, now, &loads[k], &pmus, &mut states);
                        }
                        _ => {}
                    }
                }
            }

            while link.free_at <= now {
                let Some(item) = link.queue.pop_front() else { break };
                changed = true;
                let done = now.max(link.free_at) + link.interval;
                link.free_at = done;
                let d = match item {
                    LinkItem::Packet(sm) => Delivery::Packet(pmus[sm].pop_packet().expect("queued packet")),
                    LinkItem::Fetch(tag) => Delivery::Golden(tag),
                };
                link.inflight.push_back((done + link.latency, d));
            }

            if !changed {
                break;
            }
        }

        let mut next = f64::INFINITY;
        if let Some(k) = running {
            for state in &states[..loads[k].active] {
                if let SmState::Running { until } = state {
                    next = next.min(*until);
                }
            }
        }
        if !link.queue.is_empty() {
            next = next.min(link.free_at);
        }
        if let Some((t, _)) = link.inflight.front() {
            next = next.min(*t);
        }
        if !next.is_finite() {
            break;
        }
        now = next;
    }

    debug_assert!(
        verdict != HwVerdict::Benign || !validation_on || val.finished(),
        "validator stalled with no pending events"
    );
    let dtw = observed
        .iter()
        .map(|o| golden.and_then(|g| g.refs.get(&o.config_id)).and_then(|r| kernel_dtw(&o.windows, r)))
        .collect();
    Ok(HwRun {
        validation_on,
        cycles: now.ceil() as u64,
        verdict,
        kernels: observed,
        dtw,
        stall_cycles: pmus.iter().map(|p| p.stall_cycles).sum(),
        overflow: pmus.iter().any(|p| p.overflow),
        asserted,
        emitted: pmus.iter().map(|p| p.emitted).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadPoint {
    pub link_bandwidth: f64,
    pub cycles_on: u64,
    pub cycles_off: u64,
    /// `cycles_on / cycles_off − 1`.
    pub overhead: f64,
    pub verdict: HwVerdict,
}

/// Runs one workload with validation off and on.
pub fn measure_overhead(
    program: &ProgramSpec,
    noise: Option<&NoiseSpec>,
    cfg: &HwSimConfig,
    golden: &HwGolden,
) -> Result<OverheadPoint, HwSimError> {
    cfg.validate()?;
    let loads = workload(program, noise, cfg)?;
    let off = run_loads(&loads, cfg, Some(golden), false)?;
    let on = run_loads(&loads, cfg, Some(golden), true)?;
    Ok(OverheadPoint {
        link_bandwidth: cfg.link_bandwidth,
        cycles_on: on.cycles,
        cycles_off: off.cycles,
        overhead: on.cycles as f64 / off.cycles as f64 - 1.0,
        verdict: on.verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gpusim::presets::{GroupKind, Preset};

    fn cfg() -> HwSimConfig {
        HwSimConfig { window_cycles: 64, num_sms: 3, link_bandwidth: 1.0, background_traffic: 0.0, link_latency: 5, ..Default::default() }
    }

    fn load(config_id: u32, active: usize, windows: usize, v: u64) -> KernelLoad {
        let mut lines = [0u64; PMU_LINES];
        lines[0] = v;
        lines[1] = v / 2;
        KernelLoad { config_id, active, windows: vec![vec![lines; active]; windows] }
    }

    #[test]
    fn profiling_run_observes_window_sums() {
        let loads = [load(0, 3, 4, 10), load(1, 2, 2, 100)];
        let r = run_loads(&loads, &cfg(), None, false).unwrap();
        assert_eq!(r.verdict, HwVerdict::Benign);
        assert_eq!(r.kernels[0].windows, vec![[30, 15, 0, 0, 0, 0, 0, 0]; 4]);
        // lines saturate at the window length
        assert_eq!(r.kernels[1].windows[0][0], 2 * 64);
        assert_eq!(r.asserted, r.emitted);
        assert!(!r.overflow);
        assert_eq!(r.cycles, 6 * 64 + 2 + 5);
    }

    #[test]
    fn identical_golden_never_flags() {
        let loads = [load(0, 3, 4, 10), load(1, 2, 3, 20)];
        let off = run_loads(&loads, &cfg(), None, false).unwrap();
        let g = build_hw_golden(&[off], 6.0).unwrap();
        for tau in [0.0, 1.0] {
            let c = HwSimConfig { tau: Some([tau; 8]), ..cfg() };
            let on = run_loads(&loads, &c, Some(&g), true).unwrap();
            assert_eq!(on.verdict, HwVerdict::Benign);
            assert!(on.dtw.iter().all(|d| *d == Some(1.0)));
        }
    }

    #[test]
    fn deviation_is_flagged_in_its_window() {
        let loads = [load(0, 3, 6, 10)];
        let g = build_hw_golden(&[run_loads(&loads, &cfg(), None, false).unwrap()], 6.0).unwrap();
        let mut bad = loads.clone();
        bad[0].windows[4][1][0] = 17;
        let on = run_loads(&bad, &cfg(), Some(&g), true).unwrap();
        assert_eq!(on.verdict, HwVerdict::Flagged { kernel: 0, config_id: 0, ts: 4, metrics: vec![0] });
        // halted before the last window arrived
        assert!(on.kernels[0].windows[5] == [0; 8]);
        // the halt closes open windows early, so nothing counted goes missing
        assert!(!on.overflow);
        assert_eq!(on.asserted, on.emitted);
    }

    #[test]
    fn short_or_long_kernels_are_flagged() {
        let loads = [load(0, 2, 5, 10)];
        let g = build_hw_golden(&[run_loads(&loads, &cfg(), None, false).unwrap()], 6.0).unwrap();
        let short = [load(0, 2, 3, 10)];
        let r = run_loads(&short, &cfg(), Some(&g), true).unwrap();
        assert_eq!(r.verdict, HwVerdict::Flagged { kernel: 0, config_id: 0, ts: 3, metrics: vec![] });
        let long = [load(0, 2, 7, 10)];
        let r = run_loads(&long, &cfg(), Some(&g), true).unwrap();
        assert!(matches!(r.verdict, HwVerdict::Flagged { ts: 5, .. }));
    }

    #[test]
    fn infinite_bandwidth_costs_nothing() {
        let c = HwSimConfig { link_bandwidth: f64::INFINITY, ..cfg() };
        let loads = [load(0, 3, 4, 10), load(1, 3, 3, 20)];
        let g = build_hw_golden(&[run_loads(&loads, &c, None, false).unwrap()], 6.0).unwrap();
        let off = run_loads(&loads, &c, Some(&g), false).unwrap();
        let on = run_loads(&loads, &c, Some(&g), true).unwrap();
        assert_eq!(on.cycles, off.cycles);
        assert_eq!(on.stall_cycles, 0);
    }

    #[test]
    fn slow_link_stalls_sms() {
        let c = HwSimConfig { link_bandwidth: 0.01, ..cfg() };
        let loads = [load(0, 3, 40, 10)];
        let r = run_loads(&loads, &c, None, false).unwrap();
        assert!(r.stall_cycles > 0);
        assert_eq!(r.asserted, r.emitted);
        assert!(r.cycles as f64 >= 120.0 / 0.01);
    }

    #[test]
    fn preset_workload_matches_device() {
        let c = HwSimConfig::default();
        let p = Preset::VecAdd.program(GroupKind::Sm, &c.device(), 3);
        let loads = workload(&p, None, &c).unwrap();
        assert_eq!(loads.len(), 8);
        assert_eq!(loads[0].active, 15);
        let mem = Preset::VecAdd.program(GroupKind::Memory, &c.device(), 3);
        assert!(matches!(workload(&mem, None, &c), Err(HwSimError::NotPerSm { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(HwSimConfig::default().validate().is_ok());
        assert!(HwSimConfig { link_bandwidth: 0.0, ..Default::default() }.validate().is_err());
        assert!(HwSimConfig { background_traffic: 1.0, link_bandwidth: 1.0, ..Default::default() }.validate().is_err());
        assert!(HwSimConfig { tau: Some([-1.0; 8]), ..Default::default() }.validate().is_err());
        assert!(HwSimConfig { link_bandwidth: f64::INFINITY, ..Default::default() }.validate().is_ok());
    }
}
