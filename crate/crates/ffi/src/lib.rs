//! C ABI over the `conta` library.
//!
//! Every function returns a [`ContaStatus`]. On failure the message is kept
//! in a thread-local slot readable through [`conta_last_error`]. Objects are
//! opaque handles created by `*_new`/`*_from_*` functions and released with
//! the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use conta::context::{build_confounder_set, compute_context_map, ConfounderSet, ConfounderSource, ProjectionPair};
use conta::metrics::miou;
use conta::pipeline::{run_conta, RunConfig};
use conta::scm::{nwgm_gap, DiscreteScm, DistTable};
use conta::{ClassMask, Error, LabelSet};

/// Result code of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContaStatus {
    Ok = 0,
    Validation = 1,
    Config = 2,
    NullEvent = 3,
    Positivity = 4,
    Unsupported = 5,
    Shape = 6,
    Placement = 7,
    Training = 8,
    Eval = 9,
    Verify = 10,
    Locked = 11,
    NotFound = 12,
    Io = 13,
    Json = 14,
    Image = 15,
    /// A required pointer argument was null.
    NullPointer = 16,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 17,
    /// The output buffer is shorter than the result.
    BufferTooSmall = 18,
    Panic = 19,
}

impl From<&Error> for ContaStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Validation(_) => Self::Validation,
            Error::Config(_) => Self::Config,
            Error::NullEvent(_) => Self::NullEvent,
            Error::Positivity { .. } => Self::Positivity,
            Error::Unsupported(_) => Self::Unsupported,
            Error::Shape(_) => Self::Shape,
            Error::Placement(_) => Self::Placement,
            Error::Training(_) => Self::Training,
            Error::Eval(_) => Self::Eval,
            Error::Verify(_) => Self::Verify,
            Error::Locked(_) => Self::Locked,
            Error::NotFound(_) => Self::NotFound,
            Error::Io { .. } => Self::Io,
            Error::Json(_) => Self::Json,
            Error::Image { .. } => Self::Image,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(msg));
}

struct Failure(ContaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(ContaStatus::from(&e), format!("{}: {e}", e.code()))
    }
}

type FfiResult<T = ()> = std::result::Result<T, Failure>;

fn guard(f: impl FnOnce() -> FfiResult) -> ContaStatus {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ContaStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("E_PANIC: {msg}"));
            ContaStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(ContaStatus::NullPointer, format!("E_NULL_POINTER: {name} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(ContaStatus::InvalidUtf8, format!("E_INVALID_UTF8: {name}")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or_else(|| null(name))
}

unsafe fn write_dist(values: &[f64], out: *mut f64, out_len: usize) -> FfiResult {
    if out_len < values.len() {
        return Err(Failure(
            ContaStatus::BufferTooSmall,
            format!("E_BUFFER_TOO_SMALL: need {} values, got {out_len}", values.len()),
        ));
    }
    if out.is_null() {
        return Err(null("out"));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

/// Message of the last failed call on this thread, or null after a success.
///
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn conta_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Static name of a status code, e.g. `"E_SHAPE"`.
#[no_mangle]
pub extern "C" fn conta_status_name(status: ContaStatus) -> *const c_char {
    let s: &'static CStr = match status {
        ContaStatus::Ok => c"OK",
        ContaStatus::Validation => c"E_VALIDATION",
        ContaStatus::Config => c"E_CONFIG",
        ContaStatus::NullEvent => c"E_NULL_EVENT",
        ContaStatus::Positivity => c"E_POSITIVITY",
        ContaStatus::Unsupported => c"E_UNSUPPORTED",
        ContaStatus::Shape => c"E_SHAPE",
        ContaStatus::Placement => c"E_PLACEMENT",
        ContaStatus::Training => c"E_TRAINING",
        ContaStatus::Eval => c"E_EVAL",
        ContaStatus::Verify => c"E_VERIFY",
        ContaStatus::Locked => c"E_LOCKED",
        ContaStatus::NotFound => c"E_NOT_FOUND",
        ContaStatus::Io => c"E_IO",
        ContaStatus::Json => c"E_JSON",
        ContaStatus::Image => c"E_IMAGE",
        ContaStatus::NullPointer => c"E_NULL_POINTER",
        ContaStatus::InvalidUtf8 => c"E_INVALID_UTF8",
        ContaStatus::BufferTooSmall => c"E_BUFFER_TOO_SMALL",
        ContaStatus::Panic => c"E_PANIC",
    };
    s.as_ptr()
}

/// Discrete causal model over (C, X, M, Y).
pub struct ContaScm(DiscreteScm);

/// Parses and validates a model from its JSON form.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn conta_scm_from_json(json: *const c_char, out: *mut *mut ContaScm) -> ContaStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let scm = DiscreteScm::from_json_str(str_arg(json, "json")?)?;
        *out = Box::into_raw(Box::new(ContaScm(scm)));
        Ok(())
    })
}

/// Built-in model in which observing and intervening on X disagree.
///
/// # Safety
/// `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn conta_scm_confounded_example(out: *mut *mut ContaScm) -> ContaStatus {
    guard(|| {
        *out_arg(out, "out")? = Box::into_raw(Box::new(ContaScm(DiscreteScm::confounded_example())));
        Ok(())
    })
}

/// # Safety
/// `scm` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn conta_scm_free(scm: *mut ContaScm) {
    if !scm.is_null() {
        drop(Box::from_raw(scm));
    }
}

/// Writes the cardinalities of (C, X, M, Y) into `out[0..4]`.
///
/// # Safety
/// `scm` must be a live handle and `out` must hold 4 values.
#[no_mangle]
pub unsafe extern "C" fn conta_scm_cards(scm: *const ContaScm, out: *mut usize) -> ContaStatus {
    guard(|| {
        let scm = scm.as_ref().ok_or_else(|| null("scm"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        ptr::copy_nonoverlapping(scm.0.cards.as_ptr(), out, 4);
        Ok(())
    })
}

#[derive(Clone, Copy)]
enum Query {
    Observe,
    Intervene,
    Backdoor,
}

unsafe fn scm_query(scm: *const ContaScm, x: usize, out: *mut f64, out_len: usize, q: Query) -> ContaStatus {
    guard(|| {
        let scm = &scm.as_ref().ok_or_else(|| null("scm"))?.0;
        let dist = match q {
            Query::Observe => scm.observe(x)?,
            Query::Intervene => scm.intervene(x)?,
            Query::Backdoor => scm.backdoor_adjust(x)?,
        };
        write_dist(dist.values(), out, out_len)
    })
}

/// P(Y | X = x) into `out`, which must hold at least |Y| values.
///
/// # Safety
/// `scm` must be a live handle and `out` must point to `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn conta_scm_observe(
    scm: *const ContaScm,
    x: usize,
    out: *mut f64,
    out_len: usize,
) -> ContaStatus {
    scm_query(scm, x, out, out_len, Query::Observe)
}

/// P(Y | do(X = x)) by truncated factorization.
///
/// # Safety
/// As for [`conta_scm_observe`].
#[no_mangle]
pub unsafe extern "C" fn conta_scm_intervene(
    scm: *const ContaScm,
    x: usize,
    out: *mut f64,
    out_len: usize,
) -> ContaStatus {
    scm_query(scm, x, out, out_len, Query::Intervene)
}

/// P(Y | do(X = x)) by adjusting over C. Requires a deterministic mediator.
///
/// # Safety
/// As for [`conta_scm_observe`].
#[no_mangle]
pub unsafe extern "C" fn conta_scm_backdoor(
    scm: *const ContaScm,
    x: usize,
    out: *mut f64,
    out_len: usize,
) -> ContaStatus {
    scm_query(scm, x, out, out_len, Query::Backdoor)
}

/// Largest gap between the adjusted and interventional distributions.
///
/// # Safety
/// `scm` must be a live handle; `max_gap` and `pass` must be writable.
#[no_mangle]
pub unsafe extern "C" fn conta_scm_verify_backdoor(
    scm: *const ContaScm,
    max_gap: *mut f64,
    pass: *mut bool,
) -> ContaStatus {
    guard(|| {
        let scm = &scm.as_ref().ok_or_else(|| null("scm"))?.0;
        let max_gap = out_arg(max_gap, "max_gap")?;
        let pass = out_arg(pass, "pass")?;
        let r = scm.verify_backdoor()?;
        *max_gap = r.max_abs_gap;
        *pass = r.pass;
        Ok(())
    })
}

/// Largest total-variation distance between P(Y|x) and P(Y|do(x)) over x.
///
/// # Safety
/// `scm` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn conta_scm_confounding_gap(scm: *const ContaScm, out: *mut f64) -> ContaStatus {
    guard(|| {
        let scm = &scm.as_ref().ok_or_else(|| null("scm"))?.0;
        *out_arg(out, "out")? = scm.confounding_gap()?;
        Ok(())
    })
}

/// Exact `Σ σ(s_c) P(c)` against `σ(Σ s_c P(c))` for `n` strata.
///
/// # Safety
/// `scores` and `prior` must each point to `n` doubles; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn conta_nwgm_gap(
    scores: *const f64,
    prior: *const f64,
    n: usize,
    exact: *mut f64,
    approx: *mut f64,
    gap: *mut f64,
) -> ContaStatus {
    guard(|| {
        let scores = slice_arg(scores, n, "scores")?;
        let prior = DistTable::new(slice_arg(prior, n, "prior")?.to_vec())?;
        let (exact, approx, gap) = (
            out_arg(exact, "exact")?,
            out_arg(approx, "approx")?,
            out_arg(gap, "gap")?,
        );
        let g = nwgm_gap(scores, &prior)?;
        *exact = g.exact;
        *approx = g.approx;
        *gap = g.gap;
        Ok(())
    })
}

/// Mean IoU of one `height x width` prediction against ground truth.
///
/// `per_class` may be null; otherwise it receives `n_classes + 1` values with
/// NaN for classes absent from both masks. Pixels equal to 255 in `gt` are
/// skipped.
///
/// # Safety
/// `pred` and `gt` must point to `height * width` bytes; `mean` must be writable.
#[no_mangle]
pub unsafe extern "C" fn conta_miou(
    pred: *const u8,
    gt: *const u8,
    height: usize,
    width: usize,
    n_classes: usize,
    per_class: *mut f64,
    mean: *mut f64,
) -> ContaStatus {
    guard(|| {
        let len = height * width;
        let pred = ClassMask::from_vec(height, width, slice_arg(pred, len, "pred")?.to_vec())?;
        let gt = ClassMask::from_vec(height, width, slice_arg(gt, len, "gt")?.to_vec())?;
        let mean = out_arg(mean, "mean")?;
        let m = miou(&pred, &gt, n_classes)?;
        *mean = m.mean;
        if !per_class.is_null() {
            for (i, v) in m.per_class.iter().enumerate() {
                *per_class.add(i) = v.unwrap_or(f64::NAN);
            }
        }
        Ok(())
    })
}

/// Class-average masks with a uniform prior.
pub struct ContaConfounders(ConfounderSet);

/// Averages `count` masks of `height x width` into one map per class.
///
/// `labels` holds `count * n_classes` flags; a nonzero flag at
/// `[k * n_classes + i]` marks class `i + 1` as present in image `k`.
///
/// # Safety
/// `masks` must point to `count * height * width` bytes, `labels` to
/// `count * n_classes` bytes, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn conta_confounders_build(
    masks: *const u8,
    labels: *const u8,
    count: usize,
    height: usize,
    width: usize,
    n_classes: usize,
    out: *mut *mut ContaConfounders,
) -> ContaStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        if n_classes == 0 || n_classes > 254 {
            return Err(Error::Validation(format!("n_classes must be in 1..=254, got {n_classes}")).into());
        }
        let hw = height * width;
        let raw = slice_arg(masks, count * hw, "masks")?;
        let flags = slice_arg(labels, count * n_classes, "labels")?;
        let masks = raw
            .chunks_exact(hw.max(1))
            .take(count)
            .map(|c| ClassMask::from_vec(height, width, c.to_vec()))
            .collect::<conta::Result<Vec<_>>>()?;
        let labels: Vec<LabelSet> = flags
            .chunks_exact(n_classes)
            .map(|row| (0..n_classes).filter(|&i| row[i] != 0).map(|i| i as u8 + 1).collect())
            .collect();
        let set = build_confounder_set(&masks, &labels, n_classes, ConfounderSource::SegMask)?;
        *out = Box::into_raw(Box::new(ContaConfounders(set)));
        Ok(())
    })
}

/// # Safety
/// `conf` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn conta_confounders_free(conf: *mut ContaConfounders) {
    if !conf.is_null() {
        drop(Box::from_raw(conf));
    }
}

/// Copies class map `class_index` (0-based) into `out`, which holds `height * width` values.
///
/// # Safety
/// `conf` must be a live handle and `out` must point to `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn conta_confounders_entry(
    conf: *const ContaConfounders,
    class_index: usize,
    out: *mut f64,
    out_len: usize,
) -> ContaStatus {
    guard(|| {
        let conf = &conf.as_ref().ok_or_else(|| null("conf"))?.0;
        let row = conf
            .entries
            .get(class_index)
            .ok_or_else(|| Error::Validation(format!("class index {class_index} >= {}", conf.n())))?;
        write_dist(row, out, out_len)
    })
}

/// Attention-weighted context map for one mask.
///
/// `w1` and `w2` are `n_classes x (height * width)` row-major; `out` receives
/// `height * width` values.
///
/// # Safety
/// `x_m` must point to `height * width` bytes matching the confounder size,
/// `w1`/`w2` to `n * hw` doubles and `out` to `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn conta_context_map(
    conf: *const ContaConfounders,
    x_m: *const u8,
    w1: *const f64,
    w2: *const f64,
    out: *mut f64,
    out_len: usize,
) -> ContaStatus {
    guard(|| {
        let conf = &conf.as_ref().ok_or_else(|| null("conf"))?.0;
        let (h, w, n) = (conf.height, conf.width, conf.n());
        let mask = ClassMask::from_vec(h, w, slice_arg(x_m, h * w, "x_m")?.to_vec())?;
        let proj = ProjectionPair::new(
            n,
            h * w,
            slice_arg(w1, n * h * w, "w1")?.to_vec(),
            slice_arg(w2, n * h * w, "w2")?.to_vec(),
        )?;
        let map = compute_context_map(&mask, conf, &proj)?;
        write_dist(&map.values, out, out_len)
    })
}

/// Runs the full refinement loop into `run_dir`.
///
/// `config_path` may be null for the default configuration.
///
/// # Safety
/// `run_dir` must be a NUL-terminated string; `config_path` null or one.
#[no_mangle]
pub unsafe extern "C" fn conta_run(config_path: *const c_char, run_dir: *const c_char, resume: bool) -> ContaStatus {
    guard(|| {
        let cfg = if config_path.is_null() {
            RunConfig::default()
        } else {
            RunConfig::from_json_file(&PathBuf::from(str_arg(config_path, "config_path")?))?
        };
        let run_dir = PathBuf::from(str_arg(run_dir, "run_dir")?);
        run_conta(&cfg, &run_dir, resume)?;
        Ok(())
    })
}
