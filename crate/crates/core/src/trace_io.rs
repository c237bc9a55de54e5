//! On-disk formats.
//!
//! Trace files (version 1) are line oriented UTF-8 with LF endings. A header
//! of `#`-prefixed records describes the device, the event group and the
//! optional kernel metadata; a column line follows, then one data row per
//! `(window_index, event_name, instance_id, count)`:
//!
//! ```text
//! #goldtrace-trace,1
//! #device,16,4,10000,1380
//! #event,inst_executed,sm,16
//! #meta,conv1,256,1,1,32,1,1,4096,7
//! window_index,event_name,instance_id,count
//! 0,inst_executed,0,312
//! ```
//!
//! Golden models are a single JSON document carrying the event group, the
//! device, the config table, the policy and every reference segment.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::golden::{GoldenError, GoldenModel};
use crate::model::{
    Category, DeviceConfig, EventGroup, EventSpec, KernelMetadata, ModelError, Sample, Trace,
};

pub const TRACE_FORMAT_VERSION: u32 = 1;
pub const GOLDEN_FORMAT_VERSION: u32 = 1;

const TRACE_MAGIC: &str = "#goldtrace-trace";
const GOLDEN_MAGIC: &str = "goldtrace-golden";
const COLUMNS: &str = "window_index,event_name,instance_id,count";

#[derive(Debug, Error)]
pub enum TraceIoError {
    #[error("i/o failure: {0}")]
    IoFailure(#[from] io::Error),
    #[error("line {line}: {reason}")]
    ParseError { line: usize, reason: String },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("sample {sample}: event `{event}` is missing instance {instance}")]
    MissingInstance { sample: u64, event: String, instance: usize },
    #[error("line {line}: event `{event}` is not in the event group")]
    UnknownEvent { line: usize, event: String },
    #[error("field `{0}` cannot be written: identifiers must not contain commas, quotes or line breaks")]
    InvalidField(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("golden document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("profiler csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid golden model: {0}")]
    Golden(#[from] GoldenError),
}

/// Fixed header of a trace file.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceFileHeader {
    pub format_version: u32,
    pub device: DeviceConfig,
    pub group: EventGroup,
    pub meta: Option<KernelMetadata>,
}

fn check_ident(s: &str) -> Result<&str, TraceIoError> {
    if s.is_empty() || s.contains([',', '\n', '\r', '"']) || s.starts_with('#') {
        Err(TraceIoError::InvalidField(s.to_string()))
    } else {
        Ok(s)
    }
}

pub fn write_trace<W: Write>(trace: &Trace, mut sink: W) -> Result<(), TraceIoError> {
    trace.check()?;
    let mut out = String::new();
    let d = &trace.device;
    out.push_str(&format!("{TRACE_MAGIC},{TRACE_FORMAT_VERSION}\n"));
    out.push_str(&format!(
        "#device,{},{},{},{}\n",
        d.num_sms, d.sm_group_size, d.window_cycles, d.clock_mhz
    ));
    for e in trace.group.events() {
        out.push_str(&format!(
            "#event,{},{},{}\n",
            check_ident(&e.name)?,
            e.category,
            e.instance_granularity
        ));
    }
    if let Some(m) = &trace.meta {
        out.push_str(&format!(
            "#meta,{},{},{},{},{},{},{},{},{}\n",
            check_ident(&m.kernel_name)?,
            m.grid_dims[0],
            m.grid_dims[1],
            m.grid_dims[2],
            m.block_dims[0],
            m.block_dims[1],
            m.block_dims[2],
            m.input_size,
            m.config_id
        ));
    }
    out.push_str(COLUMNS);
    out.push('\n');
    sink.write_all(out.as_bytes())?;

    let instances = trace.group.instances();
    for s in &trace.samples {
        out.clear();
        for (ei, e) in trace.group.events().iter().enumerate() {
            for inst in 0..instances {
                out.push_str(&format!("{},{},{},{}\n", s.window_index, e.name, inst, s.get(ei, inst)));
            }
        }
        sink.write_all(out.as_bytes())?;
    }
    sink.flush()?;
    Ok(())
}

pub fn trace_to_bytes(trace: &Trace) -> Result<Vec<u8>, TraceIoError> {
    let mut buf = Vec::new();
    write_trace(trace, &mut buf)?;
    Ok(buf)
}

fn parse_err(line: usize, reason: impl Into<String>) -> TraceIoError {
    TraceIoError::ParseError { line, reason: reason.into() }
}

fn parse_num<T: std::str::FromStr>(line: usize, field: &str, what: &str) -> Result<T, TraceIoError> {
    field.parse().map_err(|_| parse_err(line, format!("invalid {what} `{field}`")))
}

fn expect_fields(line: usize, rec: &str, n: usize) -> Result<Vec<&str>, TraceIoError> {
    let f: Vec<&str> = rec.split(',').collect();
    if f.len() != n {
        return Err(parse_err(line, format!("expected {n} fields, found {}", f.len())));
    }
    Ok(f)
}

pub fn read_trace<R: BufRead>(source: R) -> Result<Trace, TraceIoError> {
    let mut lines = source.lines().enumerate().map(|(i, l)| (i + 1, l));

    let (ln, first) = match lines.next() {
        Some((ln, l)) => (ln, l?),
        None => return Err(parse_err(1, "empty input")),
    };
    let f = expect_fields(ln, &first, 2)?;
    if f[0] != TRACE_MAGIC {
        return Err(parse_err(ln, "missing trace format marker"));
    }
    let version: u32 = parse_num(ln, f[1], "format version")?;
    if version != TRACE_FORMAT_VERSION {
        return Err(TraceIoError::VersionMismatch { found: version, expected: TRACE_FORMAT_VERSION });
    }

    let mut device = None;
    let mut events = Vec::new();
    let mut meta = None;
    let mut header_done = false;
    for (ln, l) in lines.by_ref() {
        let l = l?;
        if l == COLUMNS {
            header_done = true;
            break;
        }
        let rec = l.strip_prefix('#').ok_or_else(|| parse_err(ln, "expected header record"))?;
        let kind = rec.split(',').next().unwrap_or_default();
        match kind {
            "device" => {
                let f = expect_fields(ln, rec, 5)?;
                device = Some(DeviceConfig {
                    num_sms: parse_num(ln, f[1], "num_sms")?,
                    sm_group_size: parse_num(ln, f[2], "sm_group_size")?,
                    window_cycles: parse_num(ln, f[3], "window_cycles")?,
                    clock_mhz: parse_num(ln, f[4], "clock_mhz")?,
                });
            }
            "event" => {
                let f = expect_fields(ln, rec, 4)?;
                let category = Category::parse(f[2])
                    .ok_or_else(|| parse_err(ln, format!("unknown category `{}`", f[2])))?;
                events.push(EventSpec::new(f[1], category, parse_num(ln, f[3], "granularity")?));
            }
            "meta" => {
                let f = expect_fields(ln, rec, 10)?;
                let mut dims = [0u32; 6];
                for (k, d) in dims.iter_mut().enumerate() {
                    *d = parse_num(ln, f[2 + k], "dimension")?;
                }
                meta = Some(KernelMetadata::new(
                    f[1],
                    [dims[0], dims[1], dims[2]],
                    [dims[3], dims[4], dims[5]],
                    parse_num(ln, f[8], "input_size")?,
                    parse_num(ln, f[9], "config_id")?,
                ));
            }
            other => return Err(parse_err(ln, format!("unknown header record `{other}`"))),
        }
    }
    if !header_done {
        return Err(parse_err(0, "missing column line"));
    }
    let device = device.ok_or_else(|| parse_err(0, "missing #device record"))?;
    let group = EventGroup::new(events)?;
    let n_events = group.len();
    let instances = group.instances();

    let mut samples: Vec<Sample> = Vec::new();
    let mut filled: Vec<bool> = Vec::new();
    let mut current_start_line = 0;
    let finish = |s: &Sample, filled: &[bool], line: usize| -> Result<(), TraceIoError> {
        if let Some(pos) = filled.iter().position(|f| !f) {
            return Err(parse_err(
                line,
                format!(
                    "window {} lacks event `{}` instance {}",
                    s.window_index,
                    group.events()[pos / instances].name,
                    pos % instances
                ),
            ));
        }
        Ok(())
    };
    for (ln, l) in lines {
        let l = l?;
        let f = expect_fields(ln, &l, 4)?;
        let window: u64 = parse_num(ln, f[0], "window index")?;
        let event = group.index_of(f[1]).ok_or_else(|| TraceIoError::UnknownEvent {
            line: ln,
            event: f[1].to_string(),
        })?;
        let inst: usize = parse_num(ln, f[2], "instance id")?;
        if inst >= instances {
            return Err(parse_err(ln, format!("instance {inst} out of range")));
        }
        let count: u64 = parse_num(ln, f[3], "count")?;

        let new_window = match samples.last() {
            None => true,
            Some(s) if s.window_index == window => false,
            Some(s) if window > s.window_index => {
                finish(s, &filled, current_start_line)?;
                true
            }
            Some(s) => {
                return Err(parse_err(
                    ln,
                    format!("window {window} after window {}", s.window_index),
                ))
            }
        };
        if new_window {
            samples.push(Sample::zeros(window, n_events, instances));
            filled = vec![false; n_events * instances];
            current_start_line = ln;
        }
        let slot = event * instances + inst;
        if filled[slot] {
            return Err(parse_err(ln, "duplicate row"));
        }
        filled[slot] = true;
        samples.last_mut().expect("pushed above").set(event, inst, count);
    }
    if let Some(s) = samples.last() {
        finish(s, &filled, current_start_line)?;
    }
    Ok(Trace::new(group, samples, meta, device)?)
}

pub fn trace_from_bytes(bytes: &[u8]) -> Result<Trace, TraceIoError> {
    read_trace(bytes)
}

/// Reshapes an offline profiler export with columns `sample_ordinal`,
/// `event_name`, `instance_id` and `value` (any order, extra columns
/// ignored) into a trace over `group`.
pub fn ingest_profiler_csv<R: io::Read>(
    source: R,
    group: &EventGroup,
    device: &DeviceConfig,
) -> Result<Trace, TraceIoError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(1, format!("missing column `{name}`")))
    };
    let (c_ord, c_event, c_inst, c_val) =
        (col("sample_ordinal")?, col("event_name")?, col("instance_id")?, col("value")?);

    let n_events = group.len();
    let instances = group.instances();
    let mut windows: BTreeMap<u64, (Sample, Vec<bool>)> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let ln = i + 2;
        let field = |c: usize| rec.get(c).ok_or_else(|| parse_err(ln, "short row"));
        let ordinal: u64 = parse_num(ln, field(c_ord)?, "sample ordinal")?;
        let name = field(c_event)?;
        let event = group
            .index_of(name)
            .ok_or_else(|| TraceIoError::UnknownEvent { line: ln, event: name.to_string() })?;
        let inst: usize = parse_num(ln, field(c_inst)?, "instance id")?;
        if inst >= instances {
            return Err(parse_err(ln, format!("instance {inst} out of range")));
        }
        let value = parse_count(ln, field(c_val)?)?;
        let (s, filled) = windows
            .entry(ordinal)
            .or_insert_with(|| (Sample::zeros(ordinal, n_events, instances), vec![false; n_events * instances]));
        let slot = event * instances + inst;
        if filled[slot] {
            return Err(parse_err(ln, "duplicate reading"));
        }
        filled[slot] = true;
        s.set(event, inst, value);
    }

    let mut samples = Vec::with_capacity(windows.len());
    for (ordinal, (s, filled)) in windows {
        if let Some(pos) = filled.iter().position(|f| !f) {
            return Err(TraceIoError::MissingInstance {
                sample: ordinal,
                event: group.events()[pos / instances].name.clone(),
                instance: pos % instances,
            });
        }
        samples.push(s);
    }
    Ok(Trace::new(group.clone(), samples, None, device.clone())?)
}

// Profilers sometimes print integral counts as `123.0`.
fn parse_count(line: usize, s: &str) -> Result<u64, TraceIoError> {
    if let Ok(v) = s.parse::<u64>() {
        return Ok(v);
    }
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.fract() == 0.0 && v < u64::MAX as f64 => Ok(v as u64),
        _ => Err(parse_err(line, format!("invalid counter value `{s}`"))),
    }
}

#[derive(Serialize)]
struct GoldenDocOut<'a> {
    format: &'static str,
    format_version: u32,
    model: &'a GoldenModel,
}

#[derive(Deserialize)]
struct GoldenDocIn {
    format: String,
    format_version: u32,
    model: GoldenModel,
}

pub fn write_golden<W: Write>(model: &GoldenModel, mut sink: W) -> Result<(), TraceIoError> {
    let doc = GoldenDocOut { format: GOLDEN_MAGIC, format_version: GOLDEN_FORMAT_VERSION, model };
    serde_json::to_writer_pretty(&mut sink, &doc)?;
    sink.write_all(b"\n")?;
    sink.flush()?;
    Ok(())
}

pub fn golden_to_bytes(model: &GoldenModel) -> Result<Vec<u8>, TraceIoError> {
    let mut buf = Vec::new();
    write_golden(model, &mut buf)?;
    Ok(buf)
}

pub fn read_golden<R: io::Read>(source: R) -> Result<GoldenModel, TraceIoError> {
    let value: serde_json::Value = serde_json::from_reader(source)?;
    let format = value.get("format").and_then(|v| v.as_str());
    if format != Some(GOLDEN_MAGIC) {
        return Err(parse_err(1, "not a golden-model document"));
    }
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| parse_err(1, "missing format_version"))?;
    if version != GOLDEN_FORMAT_VERSION as u64 {
        return Err(TraceIoError::VersionMismatch {
            found: version.try_into().unwrap_or(u32::MAX),
            expected: GOLDEN_FORMAT_VERSION,
        });
    }
    let doc: GoldenDocIn = serde_json::from_value(value)?;
    debug_assert_eq!(doc.format, GOLDEN_MAGIC);
    debug_assert_eq!(doc.format_version, GOLDEN_FORMAT_VERSION);
    doc.model.check()?;
    Ok(doc.model)
}
