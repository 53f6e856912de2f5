//! C ABI over `echelon-core`.
//!
//! Every fallible function returns an [`EchStatus`]; on failure the message
//! is kept per thread and can be read with [`ech_last_error`]. Objects cross
//! the boundary only as opaque handles or as strings owned by this library,
//! which must be released with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use echelon::dataset::{aggregate_quality, ActorDataset, MeasurementBlock, MetricSeries};
use echelon::ensemble::{nll_loss, summarise, train_ensemble, Ensemble, EnsembleHyper};
use echelon::evaluation::{kendall_tau, spearman_rho};
use echelon::protocol::{decode_message, encode_message, Message, UncertaintyResponse};
use echelon::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EchStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Domain = 3,
    ShapeMismatch = 4,
    Decode = 5,
    Io = 6,
    Training = 7,
    Utf8 = 8,
    Internal = 9,
    Panic = 10,
}

/// Per-row summary of an ensemble prediction, in target units.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EchPrediction {
    pub mean: f64,
    pub knowledge_variance: f64,
    pub data_variance: f64,
    pub total_variance: f64,
}

/// Opaque trained ensemble.
pub struct EchEnsemble {
    inner: Ensemble,
}

/// Kind of a decoded protocol frame.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EchMessageKind {
    Call = 0,
    Response = 1,
    Decline = 2,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> EchStatus {
    match e {
        Error::InvalidInput(_) | Error::DuplicateId(_) | Error::EmptyJoin | Error::Config(_) => {
            EchStatus::InvalidInput
        }
        Error::Domain(_) => EchStatus::Domain,
        Error::Arity { .. } => EchStatus::ShapeMismatch,
        Error::Decode(_) | Error::Json(_) | Error::Parse { .. } | Error::Csv(_) => EchStatus::Decode,
        Error::Io { .. } => EchStatus::Io,
        Error::Training { .. } | Error::Singular(_) => EchStatus::Training,
        _ => EchStatus::Internal,
    }
}

struct Fail(EchStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(name: &str) -> Fail {
    Fail(EchStatus::NullPointer, format!("`{name}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> EchStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EchStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside echelon".into());
            EchStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn text<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Fail(EchStatus::Utf8, format!("`{name}`: {e}")))
}

unsafe fn write<T>(out: *mut T, value: T, name: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(name));
    }
    out.write(value);
    Ok(())
}

fn owned_string(s: String) -> Result<*mut c_char, Fail> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|e| Fail(EchStatus::Internal, e.to_string()))
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length in bytes
/// without the terminator, or 0 if there is none.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn ech_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match &*e.borrow() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len - 1);
                ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
                *buf.add(n) = 0;
            }
            bytes.len()
        }
    })
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must be null or a pointer obtained from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn ech_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Quality KPI of one observation. `actuals` and `setpoints` hold
/// `parts * types` values, part-major.
///
/// # Safety
/// Array arguments must be valid for `parts * types` values; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn ech_aggregate_quality(
    parts: usize,
    types: usize,
    actuals: *const f64,
    setpoints: *const f64,
    out: *mut f64,
) -> EchStatus {
    guard(|| {
        let n = parts
            .checked_mul(types)
            .ok_or_else(|| Fail(EchStatus::InvalidInput, "parts * types overflows".into()))?;
        let block = MeasurementBlock {
            parts,
            types,
            actuals: input(actuals, n, "actuals")?.to_vec(),
            setpoints: input(setpoints, n, "setpoints")?.to_vec(),
        };
        write(out, aggregate_quality(&block)?, "out")
    })
}

/// Per-sample Gaussian negative log-likelihood without the constant term.
#[no_mangle]
pub extern "C" fn ech_nll_loss(mu: f64, log_var: f64, y: f64) -> f64 {
    nll_loss(mu, log_var, y)
}

/// Combines `n` member means and variances into one predictive summary.
///
/// # Safety
/// `mus` and `variances` must be valid for `n` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ech_summarise(
    mus: *const f64,
    variances: *const f64,
    n: usize,
    out: *mut EchPrediction,
) -> EchStatus {
    guard(|| {
        if n == 0 {
            return Err(Fail(EchStatus::InvalidInput, "no members".into()));
        }
        let s = summarise(input(mus, n, "mus")?, input(variances, n, "variances")?);
        write(
            out,
            EchPrediction {
                mean: s.mean,
                knowledge_variance: s.knowledge_variance,
                data_variance: s.data_variance,
                total_variance: s.total_variance,
            },
            "out",
        )
    })
}

/// Kendall tau-b between two score vectors of length `n`.
///
/// # Safety
/// `a` and `b` must be valid for `n` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ech_kendall_tau(
    a: *const f64,
    b: *const f64,
    n: usize,
    out: *mut f64,
) -> EchStatus {
    guard(|| write(out, kendall_tau(input(a, n, "a")?, input(b, n, "b")?)?, "out"))
}

/// Spearman rank correlation with average ranks for ties.
///
/// # Safety
/// `a` and `b` must be valid for `n` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ech_spearman_rho(
    a: *const f64,
    b: *const f64,
    n: usize,
    out: *mut f64,
) -> EchStatus {
    guard(|| write(out, spearman_rho(input(a, n, "a")?, input(b, n, "b")?)?, "out"))
}

/// Trains an ensemble on a row-major `rows x width` feature matrix. Rows are
/// identified by their index. `member_count` and `max_epochs` override the
/// defaults when non-zero.
///
/// # Safety
/// `features` must be valid for `rows * width` values, `targets` for `rows`
/// values; `out` must be writable. The handle must be released with
/// [`ech_ensemble_free`].
#[no_mangle]
pub unsafe extern "C" fn ech_ensemble_train(
    features: *const f64,
    rows: usize,
    width: usize,
    targets: *const f64,
    member_count: usize,
    max_epochs: usize,
    seed: u64,
    out: *mut *mut EchEnsemble,
) -> EchStatus {
    guard(|| {
        let n = rows
            .checked_mul(width)
            .ok_or_else(|| Fail(EchStatus::InvalidInput, "rows * width overflows".into()))?;
        let xs = input(features, n, "features")?;
        let ys = input(targets, rows, "targets")?;
        let ids: Vec<String> = (0..rows).map(|i| i.to_string()).collect();
        let columns: Vec<String> = (0..width).map(|j| format!("x{j}")).collect();
        let dataset = ActorDataset::new("ffi", ids.clone(), columns, vec![false; width], xs.to_vec())?;
        let metric = MetricSeries::new(ids.into_iter().zip(ys.iter().copied()).collect())?;
        let mut hyper = EnsembleHyper::default();
        if member_count > 0 {
            hyper.member_count = member_count;
        }
        if max_epochs > 0 {
            hyper.max_epochs = max_epochs;
        }
        let inner = train_ensemble(&dataset, &metric, &hyper, seed)?;
        write(out, Box::into_raw(Box::new(EchEnsemble { inner })), "out")
    })
}

/// Restores an ensemble from checkpoint JSON.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ech_ensemble_from_checkpoint(
    json: *const c_char,
    out: *mut *mut EchEnsemble,
) -> EchStatus {
    guard(|| {
        let inner = Ensemble::from_checkpoint_str(text(json, "json")?)?;
        write(out, Box::into_raw(Box::new(EchEnsemble { inner })), "out")
    })
}

/// Serialises an ensemble as checkpoint JSON; free with [`ech_string_free`].
///
/// # Safety
/// `handle` must be a live ensemble handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ech_ensemble_to_checkpoint(
    handle: *const EchEnsemble,
    out: *mut *mut c_char,
) -> EchStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        write(out, owned_string(h.inner.to_checkpoint_string()?)?, "out")
    })
}

/// Number of input features the ensemble expects, or 0 for a null handle.
///
/// # Safety
/// `handle` must be null or a live ensemble handle.
#[no_mangle]
pub unsafe extern "C" fn ech_ensemble_width(handle: *const EchEnsemble) -> usize {
    handle.as_ref().map_or(0, |h| h.inner.width())
}

/// Predicts one raw feature row of length `width`.
///
/// # Safety
/// `handle` must be a live ensemble handle, `x` valid for `width` values and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ech_ensemble_predict(
    handle: *const EchEnsemble,
    x: *const f64,
    width: usize,
    out: *mut EchPrediction,
) -> EchStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        let s = h.inner.predict(input(x, width, "x")?)?;
        write(
            out,
            EchPrediction {
                mean: s.mean,
                knowledge_variance: s.knowledge_variance,
                data_variance: s.data_variance,
                total_variance: s.total_variance,
            },
            "out",
        )
    })
}

/// Releases an ensemble handle.
///
/// # Safety
/// `handle` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn ech_ensemble_free(handle: *mut EchEnsemble) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Encodes an uncertainty response frame (newline terminated); free with
/// [`ech_string_free`].
///
/// # Safety
/// String arguments must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ech_encode_response(
    actor_id: *const c_char,
    call_id: *const c_char,
    total_uncertainty: f64,
    out: *mut *mut c_char,
) -> EchStatus {
    guard(|| {
        let msg = Message::Response(UncertaintyResponse {
            actor_id: text(actor_id, "actor_id")?.to_string(),
            call_id: text(call_id, "call_id")?.to_string(),
            total_uncertainty,
        });
        let frame = String::from_utf8(encode_message(&msg))
            .map_err(|e| Fail(EchStatus::Internal, e.to_string()))?;
        write(out, owned_string(frame)?, "out")
    })
}

/// Decodes one frame of `len` bytes and reports its kind and call id (free
/// with [`ech_string_free`]). For responses `total_uncertainty` receives the
/// scalar; it is left untouched otherwise. Optional outputs may be null.
///
/// # Safety
/// `frame` must be valid for `len` bytes; non-null outputs writable.
#[no_mangle]
pub unsafe extern "C" fn ech_decode_message(
    frame: *const u8,
    len: usize,
    kind: *mut EchMessageKind,
    call_id: *mut *mut c_char,
    total_uncertainty: *mut f64,
) -> EchStatus {
    guard(|| {
        let msg = decode_message(input(frame, len, "frame")?).map_err(Error::from)?;
        let k = match &msg {
            Message::Call(_) => EchMessageKind::Call,
            Message::Response(r) => {
                if !total_uncertainty.is_null() {
                    total_uncertainty.write(r.total_uncertainty);
                }
                EchMessageKind::Response
            }
            Message::Decline(_) => EchMessageKind::Decline,
        };
        if !kind.is_null() {
            kind.write(k);
        }
        if !call_id.is_null() {
            call_id.write(owned_string(msg.call_id().to_string())?);
        }
        Ok(())
    })
}
