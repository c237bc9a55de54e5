//! Command implementations behind the `goldtrace` binary. Every command reads
//! one TOML [`CampaignConfig`] and writes deterministic files: reruns with
//! the same document produce byte-identical output.

mod config;

use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::attacks::{inject, AttackError, AttackKind};
use crate::golden::{build_golden, GoldenError, GoldenModel};
use crate::gpusim::{sampling_decimate, simulate, GpuSimError, ProgramSpec};
use crate::hwsim::{
    hw_golden_from_seeds, measure_overhead, run_hwsim, HwGolden, HwSimConfig, HwSimError, HwVerdict,
};
use crate::model::{Decision, Trace, Verdict};
use crate::noise_study::{noise_study, NoiseCondition, NoiseStudyError};
use crate::trace_io::{ingest_profiler_csv, read_golden, read_trace, write_golden, write_trace, TraceIoError};
use crate::validator::{report_from_verdicts, validate_trace, CampaignReport, Dataset, TraceVerdict};

pub use config::{
    AttackDoc, CampaignConfig, HwStudyConfig, Mode, ProgramSource, SeedBases, Sizes, DEFAULT_OUT, OUT_ENV,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    TraceIo(#[from] TraceIoError),
    #[error(transparent)]
    Sim(#[from] GpuSimError),
    #[error(transparent)]
    Golden(#[from] GoldenError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Hw(#[from] HwSimError),
    #[error(transparent)]
    Noise(#[from] NoiseStudyError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    /// 2 for file-system failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } | CliError::TraceIo(TraceIoError::IoFailure(_)) => 2,
            _ => 1,
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::io(path, e))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<(), CliError> {
    w.flush().map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| CliError::io(path, e))?;
    finish(w, path)
}

fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let inner = w.into_inner().map_err(|e| CliError::io(path, e.into_error()))?;
    finish(inner, path)
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn snake<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
}

fn decimate(trace: Trace, keep_every: usize) -> Trace {
    if keep_every > 1 {
        sampling_decimate(&trace, keep_every)
    } else {
        trace
    }
}

/// Simulated golden collection, decimated like every other dataset.
pub fn golden_traces(cfg: &CampaignConfig, program: &ProgramSpec) -> Result<Vec<Trace>, CliError> {
    let traces: Vec<Trace> = (0..cfg.datasets.golden as u64)
        .into_par_iter()
        .map(|i| simulate(&program.with_seed(cfg.seeds.golden.wrapping_add(i)), &cfg.device, None))
        .collect::<Result<_, _>>()?;
    Ok(traces.into_iter().map(|t| decimate(t, cfg.keep_every)).collect())
}

fn trace_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| CliError::io(dir, e)))
        .collect::<Result<_, _>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "trace"));
    files.sort();
    if files.is_empty() {
        return Err(CliError::Config(format!("no .trace files in {}", dir.display())));
    }
    Ok(files)
}

/// Golden model from simulation, or from the `.trace` files of `input`
/// (in file-name order) when given.
pub fn golden_model(cfg: &CampaignConfig, input: Option<&Path>) -> Result<GoldenModel, CliError> {
    let program = cfg.program(&cfg.device)?;
    let traces = match input {
        Some(dir) => trace_files(dir)?
            .iter()
            .map(|p| Ok(read_trace(open(p)?)?))
            .collect::<Result<Vec<_>, CliError>>()?,
        None => golden_traces(cfg, &program)?,
    };
    Ok(build_golden(&traces, &program.marker, &program.config_table()?, &cfg.policy)?)
}

pub fn cmd_build_golden(cfg: &CampaignConfig, out: &Path, input: Option<&Path>) -> Result<Vec<PathBuf>, CliError> {
    let model = golden_model(cfg, input)?;
    let path = out.join("golden.json");
    let mut w = create(&path)?;
    write_golden(&model, &mut w)?;
    finish(w, &path)?;
    Ok(vec![path])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackSummary {
    pub kind: AttackKind,
    pub target_kernel: Option<usize>,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackReport {
    /// `None` for the benign-only campaign.
    pub attack: Option<AttackSummary>,
    #[serde(flatten)]
    pub report: CampaignReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CampaignOutput {
    pub program: String,
    pub mode: Mode,
    pub keep_every: usize,
    pub seeds: SeedBases,
    pub reports: Vec<AttackReport>,
}

fn hw_verdict(run_verdict: &HwVerdict) -> Verdict {
    match run_verdict {
        HwVerdict::Benign => {
            Verdict { per_segment: vec![], max_consecutive_rejections: 0, decision: Decision::Benign, flagged_kernel: None, diagnostics: vec![] }
        }
        HwVerdict::Flagged { kernel, config_id, ts, metrics } => Verdict {
            per_segment: vec![],
            max_consecutive_rejections: 0,
            decision: Decision::Compromised,
            flagged_kernel: Some(*kernel as usize),
            diagnostics: vec![if metrics.is_empty() {
                format!("kernel {kernel} (config {config_id}) ended at window {ts}, short of its golden length")
            } else {
                format!("kernel {kernel} (config {config_id}) window {ts}: metrics {metrics:?} over threshold")
            }],
        },
    }
}

/// Produces per-trace verdicts for one dataset under the configured mode.
pub struct Judge<'a> {
    cfg: &'a CampaignConfig,
    program: ProgramSpec,
    hw: HwSimConfig,
    software: Option<GoldenModel>,
    hardware: Option<HwGolden>,
}

impl<'a> Judge<'a> {
    fn new(cfg: &'a CampaignConfig) -> Result<Self, CliError> {
        let hw = cfg.hwsim.hardware.clone();
        match cfg.mode {
            Mode::Software => {
                let program = cfg.program(&cfg.device)?;
                let traces = golden_traces(cfg, &program)?;
                let model = build_golden(&traces, &program.marker, &program.config_table()?, &cfg.policy)?;
                Ok(Judge { cfg, program, hw, software: Some(model), hardware: None })
            }
            Mode::Hardware => {
                let program = cfg.program(&hw.device())?;
                let seeds: Vec<u64> = (0..cfg.datasets.golden as u64).map(|i| cfg.seeds.golden.wrapping_add(i)).collect();
                let golden = hw_golden_from_seeds(&program, &hw, &seeds)?;
                Ok(Judge { cfg, program, hw, software: None, hardware: Some(golden) })
            }
        }
    }

    fn golden_json(&self, path: &Path) -> Result<(), CliError> {
        match (&self.software, &self.hardware) {
            (Some(m), _) => {
                let mut w = create(path)?;
                write_golden(m, &mut w)?;
                finish(w, path)
            }
            (_, Some(g)) => write_json(path, g),
            _ => unreachable!("judge without golden"),
        }
    }

    fn judge(&self, seed: u64, attack: Option<&AttackDoc>) -> Result<Verdict, CliError> {
        let victim = self.program.with_seed(seed);
        let (program, noise) = match attack {
            Some(a) => {
                let inj = inject(&victim, &a.spec(seed))?;
                (inj.program, inj.noise)
            }
            None => (victim, None),
        };
        if let Some(model) = &self.software {
            let t = decimate(simulate(&program, &self.cfg.device, noise.as_ref())?, self.cfg.keep_every);
            return Ok(validate_trace(&t, model, &model.marker));
        }
        let run = run_hwsim(&program, noise.as_ref(), &self.hw, self.hardware.as_ref(), true)?;
        Ok(hw_verdict(&run.verdict))
    }

    fn dataset(&self, ds: Dataset, base: u64, n: usize, attack: Option<&AttackDoc>) -> Result<Vec<TraceVerdict>, CliError> {
        (0..n)
            .into_par_iter()
            .map(|index| {
                let verdict = self.judge(base.wrapping_add(index as u64), attack)?;
                Ok(TraceVerdict { dataset: ds, index, verdict })
            })
            .collect()
    }
}

pub fn run_campaign_config(cfg: &CampaignConfig) -> Result<(CampaignOutput, Judge<'_>), CliError> {
    let judge = Judge::new(cfg)?;
    let golden = cfg.datasets.golden;
    let normal = judge.dataset(Dataset::Normal, cfg.seeds.normal, cfg.datasets.normal, None)?;
    let mut reports = Vec::new();
    if cfg.attacks.is_empty() {
        reports.push(AttackReport { attack: None, report: report_from_verdicts(normal.clone(), golden) });
    }
    for a in &cfg.attacks {
        let mut per_trace = normal.clone();
        per_trace.extend(judge.dataset(Dataset::Attack, cfg.seeds.attack, cfg.datasets.attack, Some(a))?);
        reports.push(AttackReport {
            attack: Some(AttackSummary { kind: a.kind, target_kernel: a.target_kernel, magnitude: a.magnitude() }),
            report: report_from_verdicts(per_trace, golden),
        });
    }
    let out = CampaignOutput {
        program: cfg.program.name(),
        mode: cfg.mode,
        keep_every: cfg.keep_every,
        seeds: cfg.seeds,
        reports,
    };
    Ok((out, judge))
}

/// `golden.json`, `report.json`, `per_trace.csv` and `plot.csv`.
pub fn cmd_campaign(cfg: &CampaignConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let (output, judge) = run_campaign_config(cfg)?;
    let golden = out.join("golden.json");
    judge.golden_json(&golden)?;
    let report = out.join("report.json");
    write_json(&report, &output)?;

    let attack_name = |r: &AttackReport| r.attack.as_ref().map_or_else(|| "none".to_string(), |a| snake(&a.kind));
    let per_trace = out.join("per_trace.csv");
    let rows = output.reports.iter().flat_map(|r| {
        let name = attack_name(r);
        r.report
            .per_trace
            .iter()
            .filter(move |t| r.attack.is_some() || t.dataset == Dataset::Normal)
            .map(move |t| {
                let base = if t.dataset == Dataset::Normal { cfg.seeds.normal } else { cfg.seeds.attack };
                let v = &t.verdict;
                let min_corr = v.per_segment.iter().map(|m| m.correlation).reduce(f64::min);
                vec![
                    name.clone(),
                    snake(&t.dataset),
                    t.index.to_string(),
                    base.wrapping_add(t.index as u64).to_string(),
                    snake(&v.decision),
                    v.max_consecutive_rejections.to_string(),
                    opt(min_corr),
                    opt(v.flagged_kernel),
                    v.diagnostics.join("; "),
                ]
            })
    });
    write_csv(
        &per_trace,
        &["attack", "dataset", "index", "seed", "decision", "max_consecutive_rejections", "min_correlation", "flagged_kernel", "diagnostics"],
        rows,
    )?;

    let plot = out.join("plot.csv");
    let rows = output.reports.iter().map(|r| {
        let d = &r.report.dataset_sizes;
        vec![
            output.program.clone(),
            attack_name(r),
            opt(r.attack.as_ref().map(|a| a.magnitude)),
            opt(r.report.tpr),
            opt(r.report.fpr),
            d.golden.to_string(),
            d.normal.to_string(),
            d.attack.to_string(),
        ]
    });
    write_csv(&plot, &["benchmark", "attack", "magnitude", "tpr", "fpr", "golden", "normal", "attack_traces"], rows)?;
    Ok(vec![golden, report, per_trace, plot])
}

/// `noise_study.csv`: one row per condition and level.
pub fn cmd_noise_study(cfg: &CampaignConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let cells = noise_study(&cfg.noise_study, &cfg.device)?;
    let path = out.join("noise_study.csv");
    let rows = cells.iter().map(|c| {
        let cond = match c.condition {
            NoiseCondition::Baseline => "baseline",
            NoiseCondition::SelfNoise => "self",
            NoiseCondition::ExternalNoise => "external",
        };
        vec![
            cfg.noise_study.preset.name().to_string(),
            cond.to_string(),
            c.level.to_string(),
            c.traces.to_string(),
            c.segments.to_string(),
            c.mean_dtw.to_string(),
        ]
    });
    write_csv(&path, &["preset", "condition", "level", "traces", "segments", "mean_dtw"], rows)?;
    Ok(vec![path])
}

#[derive(Debug, Clone, PartialEq)]
pub struct HwRow {
    pub preset: String,
    pub scenario: String,
    pub seed: u64,
    pub link_bandwidth: f64,
    pub cycles_on: u64,
    pub cycles_off: u64,
    pub verdict: HwVerdict,
    /// Meaningless for flagged runs, which halt early.
    pub overhead: f64,
    /// Lowest per-kernel DTW similarity of the unhalted run.
    pub min_dtw: Option<f64>,
}

/// Benign overhead rows over the bandwidth sweep, then attacked runs at the
/// configured bandwidth, for every preset.
pub fn hwsim_rows(cfg: &CampaignConfig) -> Result<Vec<HwRow>, CliError> {
    let study = &cfg.hwsim;
    let hw = &study.hardware;
    let device = hw.device();
    let mut rows = Vec::new();
    for &preset in &study.presets {
        let program = preset.program(cfg.program.group, &device, cfg.seeds.golden);
        let seeds: Vec<u64> = (0..cfg.datasets.golden as u64).map(|i| cfg.seeds.golden.wrapping_add(i)).collect();
        let golden = hw_golden_from_seeds(&program, hw, &seeds)?;

        let victim = program.with_seed(cfg.seeds.normal);
        let benign: Vec<HwRow> = study
            .bandwidth_sweep
            .par_iter()
            .map(|&b| {
                let c = HwSimConfig { link_bandwidth: b, ..hw.clone() };
                let o = measure_overhead(&victim, None, &c, &golden)?;
                let off = run_hwsim(&victim, None, &c, Some(&golden), false)?;
                Ok(HwRow {
                    preset: preset.name().into(),
                    scenario: "benign".into(),
                    seed: cfg.seeds.normal,
                    link_bandwidth: b,
                    cycles_on: o.cycles_on,
                    cycles_off: o.cycles_off,
                    overhead: o.overhead,
                    verdict: o.verdict,
                    min_dtw: off.dtw.iter().flatten().copied().reduce(f64::min),
                })
            })
            .collect::<Result<_, CliError>>()?;
        rows.extend(benign);

        for a in &study.attacks {
            let attacked: Vec<HwRow> = (0..study.trials as u64)
                .into_par_iter()
                .map(|i| {
                    let seed = cfg.seeds.attack.wrapping_add(i);
                    let inj = inject(&program.with_seed(seed), &a.spec(seed))?;
                    let o = measure_overhead(&inj.program, inj.noise.as_ref(), hw, &golden)?;
                    let off = run_hwsim(&inj.program, inj.noise.as_ref(), hw, Some(&golden), false)?;
                    Ok(HwRow {
                        preset: preset.name().into(),
                        scenario: snake(&a.kind),
                        seed,
                        link_bandwidth: hw.link_bandwidth,
                        cycles_on: o.cycles_on,
                        cycles_off: o.cycles_off,
                        overhead: o.overhead,
                        verdict: o.verdict,
                        min_dtw: off.dtw.iter().flatten().copied().reduce(f64::min),
                    })
                })
                .collect::<Result<_, CliError>>()?;
            rows.extend(attacked);
        }
    }
    Ok(rows)
}

/// `hwsim.csv`.
pub fn cmd_hwsim(cfg: &CampaignConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let rows = hwsim_rows(cfg)?;
    let path = out.join("hwsim.csv");
    let records = rows.iter().map(|r| {
        let (verdict, kernel, ts, metrics) = match &r.verdict {
            HwVerdict::Benign => ("benign", String::new(), String::new(), String::new()),
            HwVerdict::Flagged { kernel, ts, metrics, .. } => {
                let mut m = String::new();
                for (i, x) in metrics.iter().enumerate() {
                    let _ = write!(m, "{}{x}", if i > 0 { " " } else { "" });
                }
                ("flagged", kernel.to_string(), ts.to_string(), m)
            }
        };
        vec![
            r.preset.clone(),
            r.scenario.clone(),
            r.seed.to_string(),
            r.link_bandwidth.to_string(),
            r.cycles_on.to_string(),
            r.cycles_off.to_string(),
            if matches!(r.verdict, HwVerdict::Benign) { r.overhead.to_string() } else { String::new() },
            verdict.to_string(),
            kernel,
            ts,
            metrics,
            opt(r.min_dtw),
        ]
    });
    write_csv(
        &path,
        &[
            "config", "scenario", "seed", "link_bandwidth", "cycles_on", "cycles_off", "overhead", "verdict",
            "flagged_kernel", "flagged_ts", "flagged_metrics", "dtw",
        ],
        records,
    )?;
    Ok(vec![path])
}

/// Converts a profiler CSV export into a trace file over the configured
/// event group.
pub fn cmd_ingest(cfg: &CampaignConfig, input: &Path, output: &Path) -> Result<Vec<PathBuf>, CliError> {
    let group = cfg.program(&cfg.device)?.group;
    let trace = ingest_profiler_csv(open(input)?, &group, &cfg.device)?;
    let mut w = create(output)?;
    write_trace(&trace, &mut w)?;
    finish(w, output)?;
    Ok(vec![output.to_path_buf()])
}

/// Validates one trace file; writes the verdict as JSON to `output`, or to
/// `stdout` when absent.
pub fn cmd_validate(golden: &Path, trace: &Path, output: Option<&Path>) -> Result<Verdict, CliError> {
    let model = read_golden(open(golden)?)?;
    let t = read_trace(open(trace)?)?;
    let verdict = validate_trace(&t, &model, &model.marker);
    match output {
        Some(p) => write_json(p, &verdict)?,
        None => {
            let mut s = serde_json::to_string_pretty(&verdict)?;
            s.push('\n');
            io::stdout().write_all(s.as_bytes()).map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
        }
    }
    Ok(verdict)
}
