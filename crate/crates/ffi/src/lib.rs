//! C ABI over the residcert toolkit.
//!
//! Conventions:
//! - Every fallible function returns an [`RcStatus`]; results go through out
//!   pointers. On failure a message is available from [`rc_last_error`] on the
//!   same thread until the next failing call.
//! - Objects are opaque handles created by `rc_*_open`/`rc_verify` and
//!   released with the matching `rc_*_free`; freeing NULL is a no-op.
//! - Strings returned as `char *` are owned by the caller and released with
//!   [`rc_string_free`].
//! - Panics never cross the boundary; they surface as `RC_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use residcert::compose::{global_bound, hybrid_block_bound, BoundInputs};
use residcert::ir::{self, BlockIR, ReplayBlock};
use residcert::tensor::Tensor;
use residcert::verify::{self, Tolerances, VerifyReport};
use residcert::Error;

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    DigestMismatch = 5,
    Shape = 6,
    Numeric = 7,
    Panic = 8,
}

/// Certificate kinds accepted by [`rc_verify`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RcCertKind {
    Block = 0,
    Model = 1,
    Edit = 2,
}

/// An extracted residual block loaded from a tensor archive.
pub struct RcBlock {
    block: BlockIR,
}

/// The outcome of verifying one certificate.
pub struct RcReport {
    report: VerifyReport,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', "\\0")).expect("NUL bytes were escaped");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> RcStatus {
    match e {
        Error::Io { .. } => RcStatus::Io,
        Error::DigestMismatch { .. } => RcStatus::DigestMismatch,
        Error::Dimension(_) | Error::ShapeMismatch { .. } | Error::MalformedBlock(_) | Error::Range(_) => {
            RcStatus::Shape
        }
        Error::NonFinite { .. } | Error::DegenerateRow { .. } | Error::UndefinedCoverage(_) => RcStatus::Numeric,
        Error::Format(_) | Error::MissingEntry { .. } | Error::Json(_) | Error::Zip(_) | Error::Encoding(_) => {
            RcStatus::Format
        }
        _ => RcStatus::InvalidArgument,
    }
}

/// Runs `f`, translating errors and panics into a status and the thread's
/// last-error message.
fn guard(f: impl FnOnce() -> Result<(), (RcStatus, String)>) -> RcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RcStatus::Ok,
        Ok(Err((status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            RcStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (RcStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (RcStatus, String) {
    (RcStatus::NullPointer, format!("`{what}` is NULL"))
}

/// # Safety
/// `p` must be NULL or a NUL-terminated string valid for the call.
unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (RcStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (RcStatus::InvalidArgument, format!("`{what}` is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

fn owned_string(s: String) -> Result<*mut c_char, (RcStatus, String)> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| (RcStatus::Format, "string contains a NUL byte".to_string()))
}

/// Message of the last failing call on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Interpreter version string (static; do not free).
#[no_mangle]
pub extern "C" fn rc_interpreter_version() -> *const c_char {
    static VERSION: std::sync::OnceLock<CString> = std::sync::OnceLock::new();
    VERSION
        .get_or_init(|| CString::new(ir::INTERPRETER_VERSION).expect("version has no NUL"))
        .as_ptr()
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must be NULL or a pointer returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// `Σ_i ε_i · Π_{j>i} L_j` over `n` layers.
///
/// # Safety
/// `epsilons` and `lipschitz` must point to `n` readable doubles (either may be
/// NULL when `n == 0`); `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rc_global_bound(
    epsilons: *const f64,
    lipschitz: *const f64,
    n: usize,
    out: *mut f64,
) -> RcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let slice = |p: *const f64, what| {
            if n == 0 {
                Ok(Vec::new())
            } else if p.is_null() {
                Err(null(what))
            } else {
                Ok(std::slice::from_raw_parts(p, n).to_vec())
            }
        };
        let inputs = BoundInputs::new(slice(epsilons, "epsilons")?, slice(lipschitz, "lipschitz")?).map_err(lib_err)?;
        *out = global_bound(&inputs);
        Ok(())
    })
}

/// `(1 + k_attn) · k_mlp`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rc_hybrid_block_bound(k_attn: f64, k_mlp: f64, out: *mut f64) -> RcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = hybrid_block_bound(k_attn, k_mlp).map_err(lib_err)?;
        Ok(())
    })
}

/// SHA-256 of a file as lowercase hex, written to `*out_hex` (free with
/// [`rc_string_free`]).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_hex` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rc_digest_file(path: *const c_char, out_hex: *mut *mut c_char) -> RcStatus {
    guard(|| {
        if out_hex.is_null() {
            return Err(null("out_hex"));
        }
        let path = path_arg(path, "path")?;
        let hex = residcert::digest::digest_file(&path).map_err(lib_err)?;
        *out_hex = owned_string(hex)?;
        Ok(())
    })
}

/// Loads a block archive into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rc_block_open(path: *const c_char, out: *mut *mut RcBlock) -> RcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path, "path")?;
        let block = ir::read_archive(&path).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(RcBlock { block }));
        Ok(())
    })
}

/// # Safety
/// `block` must be NULL or a handle from [`rc_block_open`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rc_block_free(block: *mut RcBlock) {
    if !block.is_null() {
        drop(Box::from_raw(block));
    }
}

/// Residual width of the block (0 for NULL).
///
/// # Safety
/// `block` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rc_block_d_model(block: *const RcBlock) -> usize {
    block.as_ref().map_or(0, |b| b.block.d_model)
}

/// Longest sequence the block's mask and position tables cover (0 for NULL).
///
/// # Safety
/// `block` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rc_block_t_max(block: *const RcBlock) -> usize {
    block.as_ref().map_or(0, |b| b.block.t_max)
}

/// Replays the block on `t` tokens: `x_in` and `x_out` are row-major
/// `t × d_model` float arrays.
///
/// # Safety
/// `block` must be a live handle; `x_in` must hold `t·d_model` readable floats
/// and `x_out` `t·d_model` writable floats.
#[no_mangle]
pub unsafe extern "C" fn rc_block_interpret(
    block: *const RcBlock,
    x_in: *const f32,
    t: usize,
    x_out: *mut f32,
) -> RcStatus {
    guard(|| {
        let b = &block.as_ref().ok_or_else(|| null("block"))?.block;
        if x_in.is_null() {
            return Err(null("x_in"));
        }
        if x_out.is_null() {
            return Err(null("x_out"));
        }
        let n = t
            .checked_mul(b.d_model)
            .ok_or_else(|| (RcStatus::InvalidArgument, "t · d_model overflows".to_string()))?;
        let input = Tensor::new(vec![t, b.d_model], std::slice::from_raw_parts(x_in, n).to_vec()).map_err(lib_err)?;
        let y = b.replay(&input).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(x_out, n).copy_from_slice(y.data());
        Ok(())
    })
}

/// Verifies a certificate against an artifact directory and stores the
/// report in `*out`. A completed verification returns `RC_STATUS_OK` whether
/// or not it passed; query [`rc_report_passed`].
///
/// # Safety
/// `certificate` and `artifacts` must be NUL-terminated strings; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn rc_verify(
    kind: RcCertKind,
    certificate: *const c_char,
    artifacts: *const c_char,
    rel_tol: f64,
    abs_tol: f64,
    out: *mut *mut RcReport,
) -> RcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cert = path_arg(certificate, "certificate")?;
        let root = path_arg(artifacts, "artifacts")?;
        let tol = Tolerances::new(rel_tol, abs_tol).map_err(lib_err)?;
        let report = match kind {
            RcCertKind::Block => verify::verify_block_file(&cert, &root, &tol),
            RcCertKind::Model => verify::verify_model_file(&cert, &root, &tol),
            RcCertKind::Edit => verify::verify_edit_file(&cert, &root, &tol),
        };
        *out = Box::into_raw(Box::new(RcReport { report }));
        Ok(())
    })
}

/// True iff every check passed (false for NULL).
///
/// # Safety
/// `report` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rc_report_passed(report: *const RcReport) -> bool {
    report.as_ref().is_some_and(|r| r.report.passed)
}

/// The report as JSON, written to `*out_json` (free with [`rc_string_free`]).
///
/// # Safety
/// `report` must be a live handle; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rc_report_json(report: *const RcReport, out_json: *mut *mut c_char) -> RcStatus {
    guard(|| {
        let r = report.as_ref().ok_or_else(|| null("report"))?;
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        let json = serde_json::to_string(&r.report).map_err(|e| (RcStatus::Format, e.to_string()))?;
        *out_json = owned_string(json)?;
        Ok(())
    })
}

/// # Safety
/// `report` must be NULL or a handle from [`rc_verify`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rc_report_free(report: *mut RcReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}
