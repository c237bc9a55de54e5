//! C ABI over the goldtrace validator.
//!
//! Traces and golden models are opaque handles owned by the caller and
//! released with their `_free` function. Every fallible call returns a
//! [`GtStatus`]; on failure a message is kept per thread and can be read with
//! [`gt_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use goldtrace::gpusim::presets::{GroupKind, Preset};
use goldtrace::gpusim::simulate;
use goldtrace::model::{Decision, DeviceConfig, Trace};
use goldtrace::trace_io::{
    golden_to_bytes, ingest_profiler_csv, read_golden, read_trace, trace_from_bytes, trace_to_bytes, write_golden,
    write_trace, TraceIoError,
};
use goldtrace::{build_golden, validate_trace, GoldenModel, ValidationPolicy};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    InvalidArgument = 5,
    Simulation = 6,
    Golden = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GtDecision {
    Benign = 0,
    Compromised = 1,
    Incomplete = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GtGroup {
    Sm = 0,
    Memory = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GtPreset {
    VecAdd = 0,
    MatMul = 1,
    Histogram = 2,
    BitonicSort = 3,
    AlexNet = 4,
    CifarNet = 5,
}

/// Summary of one validation.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtVerdict {
    pub decision: GtDecision,
    /// Program ordinal of the flagged kernel, or -1.
    pub flagged_kernel: i64,
    pub max_consecutive_rejections: usize,
    /// Segments matched against a reference.
    pub segments: usize,
    /// Lowest correlation over matched segments; NaN without segments.
    pub min_correlation: f64,
}

/// Opaque trace handle.
pub struct GtTrace(Trace);

/// Opaque golden model handle.
pub struct GtGolden(GoldenModel);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(GtStatus, String);

impl From<TraceIoError> for Failure {
    fn from(e: TraceIoError) -> Self {
        let status = match e {
            TraceIoError::IoFailure(_) => GtStatus::Io,
            TraceIoError::Golden(_) => GtStatus::Golden,
            _ => GtStatus::Parse,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: GtStatus, msg: impl ToString) -> Failure {
    Failure(status, msg.to_string())
}

/// Runs `f`, converting errors and panics into a status and the thread's
/// last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GtStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            GtStatus::Panic
        }
    }
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(GtStatus::NullPointer, "null path"));
    }
    CStr::from_ptr(p).to_str().map_err(|e| fail(GtStatus::InvalidUtf8, e))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(GtStatus::NullPointer, format!("null {what}")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(GtStatus::NullPointer, "null output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn open(p: &str) -> Result<BufReader<File>, Failure> {
    File::open(p).map(BufReader::new).map_err(|e| fail(GtStatus::Io, format!("{p}: {e}")))
}

fn create(p: &str) -> Result<BufWriter<File>, Failure> {
    File::create(p).map(BufWriter::new).map_err(|e| fail(GtStatus::Io, format!("{p}: {e}")))
}

/// Copies `bytes` into a caller buffer. `needed` always receives the full
/// length; a short buffer yields `InvalidArgument` and is left untouched.
unsafe fn copy_out(bytes: &[u8], buf: *mut u8, cap: usize, needed: *mut usize) -> Result<(), Failure> {
    if needed.is_null() {
        return Err(fail(GtStatus::NullPointer, "null length pointer"));
    }
    *needed = bytes.len();
    if buf.is_null() || cap < bytes.len() {
        return Err(fail(GtStatus::InvalidArgument, format!("buffer of {cap} bytes, {} needed", bytes.len())));
    }
    ptr::copy_nonoverlapping(bytes.as_ptr(), buf, bytes.len());
    Ok(())
}

/// Message of the calling thread's last failure, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn gt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gt_trace_read_file(path_: *const c_char, out: *mut *mut GtTrace) -> GtStatus {
    guard(|| {
        let t = read_trace(open(path(path_)?)?)?;
        put(out, GtTrace(t))
    })
}

/// # Safety
/// `data` must point to `len` readable bytes and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gt_trace_from_bytes(data: *const u8, len: usize, out: *mut *mut GtTrace) -> GtStatus {
    guard(|| {
        if data.is_null() {
            return Err(fail(GtStatus::NullPointer, "null data"));
        }
        let t = trace_from_bytes(std::slice::from_raw_parts(data, len))?;
        put(out, GtTrace(t))
    })
}

/// Serializes a trace into `buf`. Call with a null `buf` to learn the size.
///
/// # Safety
/// `trace` must be a live handle, `buf` null or writable for `cap` bytes,
/// `needed` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gt_trace_to_bytes(
    trace: *const GtTrace,
    buf: *mut u8,
    cap: usize,
    needed: *mut usize,
) -> GtStatus {
    guard(|| {
        let bytes = trace_to_bytes(&deref(trace, "trace")?.0)?;
        copy_out(&bytes, buf, cap, needed)
    })
}

/// # Safety
/// `trace` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gt_trace_write_file(trace: *const GtTrace, path_: *const c_char) -> GtStatus {
    guard(|| {
        let t = deref(trace, "trace")?;
        let p = path(path_)?;
        let mut w = create(p)?;
        write_trace(&t.0, &mut w)?;
        w.flush().map_err(|e| fail(GtStatus::Io, format!("{p}: {e}")))
    })
}

/// Reads a profiler CSV export over the event group and device of `golden`.
///
/// # Safety
/// `path` must be a NUL-terminated string, `golden` a live handle and `out`
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gt_trace_ingest_csv(
    path_: *const c_char,
    golden: *const GtGolden,
    out: *mut *mut GtTrace,
) -> GtStatus {
    guard(|| {
        let g = &deref(golden, "golden model")?.0;
        let t = ingest_profiler_csv(open(path(path_)?)?, &g.group, &g.device)?;
        put(out, GtTrace(t))
    })
}

/// Number of samples in the trace; 0 for a null handle.
///
/// # Safety
/// `trace` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gt_trace_len(trace: *const GtTrace) -> usize {
    trace.as_ref().map_or(0, |t| t.0.samples.len())
}

/// # Safety
/// `trace` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gt_trace_free(trace: *mut GtTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}

/// Simulates a bundled program on the default device. `seed` selects the
/// run.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gt_trace_simulate(
    preset: GtPreset,
    group: GtGroup,
    seed: u64,
    out: *mut *mut GtTrace,
) -> GtStatus {
    guard(|| {
        let d = DeviceConfig::default();
        let program = preset_of(preset).program(group_of(group), &d, seed);
        let t = simulate(&program, &d, None).map_err(|e| fail(GtStatus::Simulation, e))?;
        put(out, GtTrace(t))
    })
}

fn preset_of(p: GtPreset) -> Preset {
    match p {
        GtPreset::VecAdd => Preset::VecAdd,
        GtPreset::MatMul => Preset::MatMul,
        GtPreset::Histogram => Preset::Histogram,
        GtPreset::BitonicSort => Preset::BitonicSort,
        GtPreset::AlexNet => Preset::AlexNet,
        GtPreset::CifarNet => Preset::CifarNet,
    }
}

fn group_of(g: GtGroup) -> GroupKind {
    match g {
        GtGroup::Sm => GroupKind::Sm,
        GtGroup::Memory => GroupKind::Memory,
    }
}

/// Golden model of a bundled program from `count` simulated runs with seeds
/// `seed..seed + count`, under the default policy and device.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gt_golden_build_preset(
    preset: GtPreset,
    group: GtGroup,
    count: usize,
    seed: u64,
    out: *mut *mut GtGolden,
) -> GtStatus {
    guard(|| {
        if count == 0 {
            return Err(fail(GtStatus::InvalidArgument, "count must be ≥ 1"));
        }
        let d = DeviceConfig::default();
        let program = preset_of(preset).program(group_of(group), &d, seed);
        let traces = (0..count as u64)
            .map(|i| simulate(&program.with_seed(seed.wrapping_add(i)), &d, None))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| fail(GtStatus::Simulation, e))?;
        let table = program.config_table().map_err(|e| fail(GtStatus::Simulation, e))?;
        let model = build_golden(&traces, &program.marker, &table, &ValidationPolicy::default())
            .map_err(|e| fail(GtStatus::Golden, e))?;
        put(out, GtGolden(model))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gt_golden_read_file(path_: *const c_char, out: *mut *mut GtGolden) -> GtStatus {
    guard(|| {
        let g = read_golden(open(path(path_)?)?)?;
        put(out, GtGolden(g))
    })
}

/// # Safety
/// `golden` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gt_golden_write_file(golden: *const GtGolden, path_: *const c_char) -> GtStatus {
    guard(|| {
        let g = deref(golden, "golden model")?;
        let p = path(path_)?;
        let mut w = create(p)?;
        write_golden(&g.0, &mut w)?;
        w.flush().map_err(|e| fail(GtStatus::Io, format!("{p}: {e}")))
    })
}

/// Serializes a golden model as JSON into `buf`. Call with a null `buf` to
/// learn the size.
///
/// # Safety
/// `golden` must be a live handle, `buf` null or writable for `cap` bytes,
/// `needed` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gt_golden_to_bytes(
    golden: *const GtGolden,
    buf: *mut u8,
    cap: usize,
    needed: *mut usize,
) -> GtStatus {
    guard(|| {
        let bytes = golden_to_bytes(&deref(golden, "golden model")?.0)?;
        copy_out(&bytes, buf, cap, needed)
    })
}

/// # Safety
/// `golden` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gt_golden_free(golden: *mut GtGolden) {
    if !golden.is_null() {
        drop(Box::from_raw(golden));
    }
}

/// # Safety
/// `golden` and `trace` must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gt_validate(golden: *const GtGolden, trace: *const GtTrace, out: *mut GtVerdict) -> GtStatus {
    guard(|| {
        let g = &deref(golden, "golden model")?.0;
        let t = &deref(trace, "trace")?.0;
        if out.is_null() {
            return Err(fail(GtStatus::NullPointer, "null verdict pointer"));
        }
        let v = validate_trace(t, g, &g.marker);
        *out = GtVerdict {
            decision: match v.decision {
                Decision::Benign => GtDecision::Benign,
                Decision::Compromised => GtDecision::Compromised,
                Decision::Incomplete => GtDecision::Incomplete,
            },
            flagged_kernel: v.flagged_kernel.map_or(-1, |k| k as i64),
            max_consecutive_rejections: v.max_consecutive_rejections,
            segments: v.per_segment.len(),
            min_correlation: v.per_segment.iter().map(|m| m.correlation).reduce(f64::min).unwrap_or(f64::NAN),
        };
        Ok(())
    })
}
