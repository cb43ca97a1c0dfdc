//! C ABI over the fedmt library: opaque handles, integer status codes, and
//! caller-owned buffers, suitable for binding from other languages.
//!
//! Conventions shared by every exported function:
//!
//! - Fallible calls return [`FedmtStatus`]; `FEDMT_STATUS_OK` (0) is success.
//! - On failure a thread-local message is recorded; fetch it with
//!   [`fedmt_last_error`] immediately after the failing call.
//! - Handles are freed with the matching `fedmt_*_free`; freeing NULL is a
//!   no-op, and no function takes ownership of a handle it did not create.
//! - Matrix buffers are dense row-major `double` arrays owned by the caller,
//!   with an explicit element count that must match the expected shape.
//! - Panics never unwind across the boundary; they surface as
//!   `FEDMT_STATUS_INTERNAL_PANIC` with the panic text as the last error.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};

use fedmt::error::Error;
use fedmt::harness::{self, ExperimentConfig, MetricsStore};
use fedmt::losses::{loss_on_logits, LabelSpace, LabeledBatch, LossKind};
use fedmt::projection::{
    build_hierarchical_q, build_symmetric_noise_t, LabelSpaceSpec, MatrixRole, ProjectionMatrix,
};
use nalgebra::DMatrix;

/// Result code returned by every fallible ABI call.
///
/// Values above `FEDMT_STATUS_OK` up to `FEDMT_STATUS_JSON` mirror the
/// library's own error cases one to one; the remaining values report misuse
/// of the ABI itself.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedmtStatus {
    /// The call succeeded.
    Ok = 0,
    /// Operand dimensions are inconsistent.
    ShapeMismatch = 1,
    /// Hierarchical partition sizes do not sum to the class count.
    PartitionMismatch = 2,
    /// Noise matrix is singular or outside its invertible range.
    SingularNoise = 3,
    /// Class count not supported by this constructor.
    UnsupportedClassCount = 4,
    /// A loss evaluated to a non-finite value.
    NonfiniteLoss = 5,
    /// Task specification cannot produce a meaningful dataset.
    DegenerateSpec = 6,
    /// Signal too short for feature extraction.
    DegenerateSignal = 7,
    /// Per-client class quotas cannot be met by the pool.
    InfeasibleSplit = 8,
    /// Aggregation weights do not form a valid convex combination.
    BadWeights = 9,
    /// Gram matrix side exceeds the configured cap.
    TooLarge = 10,
    /// Theoretical contraction factor falls outside (0, 1).
    InvalidRate = 11,
    /// Eigensolver did not converge.
    ConvergenceFailure = 12,
    /// Experiment configuration failed validation.
    ConfigInvalid = 13,
    /// Filesystem operation failed.
    Io = 14,
    /// JSON serialization or parsing failed.
    Json = 15,
    /// A required pointer argument was NULL.
    NullPointer = 16,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 17,
    /// An argument value or buffer length does not fit the call.
    InvalidArgument = 18,
    /// The library panicked; treat the handle state as poisoned.
    InternalPanic = 19,
}

/// Which label alphabet the labels passed to [`fedmt_loss_eval`] live in.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedmtLabelSpace {
    /// The fine space with K classes that predictions live in.
    Desired = 0,
    /// The coarse or overlapping space with J classes.
    Other = 1,
}

/// Role of a projection matrix built from raw entries.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedmtMatrixRole {
    /// J x K correspondence between coarse and fine label spaces.
    LabelSpaceMap = 0,
    /// K x K label-noise transition matrix.
    NoiseMap = 1,
}

/// Training objective selected for [`fedmt_loss_eval`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedmtLossKind {
    /// Plain cross-entropy; takes no projection.
    PlainCe = 0,
    /// Cross-entropy on projected probabilities.
    ForwardCe = 1,
    /// Cross-entropy with the correction applied to the log terms.
    BackwardCe = 2,
    /// Weighted mean squared error against multi-hot targets.
    WeightedMse = 3,
}

/// Owned projection matrix (label-space map or noise matrix) with its cached
/// pseudo-inverse. Opaque to C callers.
pub struct FedmtProjection {
    inner: ProjectionMatrix,
}

/// Owned result of a finished experiment run. Opaque to C callers.
pub struct FedmtMetrics {
    inner: MetricsStore,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_last_error(msg: &str) {
    LAST_ERROR.with(|e| {
        let mut e = e.borrow_mut();
        e.clear();
        e.push_str(msg);
    });
}

fn fail(status: FedmtStatus, msg: &str) -> FedmtStatus {
    set_last_error(msg);
    status
}

fn error_status(err: &Error) -> FedmtStatus {
    match err {
        Error::ShapeMismatch(_) => FedmtStatus::ShapeMismatch,
        Error::PartitionMismatch(_) => FedmtStatus::PartitionMismatch,
        Error::SingularNoise(_) => FedmtStatus::SingularNoise,
        Error::UnsupportedK(_) => FedmtStatus::UnsupportedClassCount,
        Error::NonfiniteLoss(_) => FedmtStatus::NonfiniteLoss,
        Error::DegenerateSpec(_) => FedmtStatus::DegenerateSpec,
        Error::DegenerateSignal(_) => FedmtStatus::DegenerateSignal,
        Error::InfeasibleSplit(_) => FedmtStatus::InfeasibleSplit,
        Error::BadWeights(_) => FedmtStatus::BadWeights,
        Error::TooLarge(_) => FedmtStatus::TooLarge,
        Error::InvalidRate(_) => FedmtStatus::InvalidRate,
        Error::ConvergenceFailure(_) => FedmtStatus::ConvergenceFailure,
        Error::ConfigInvalid(_) => FedmtStatus::ConfigInvalid,
        Error::Io(_) => FedmtStatus::Io,
        Error::Json(_) => FedmtStatus::Json,
    }
}

fn fail_with(err: Error) -> FedmtStatus {
    let status = error_status(&err);
    set_last_error(&err.to_string());
    status
}

/// Runs `f`, converting any panic into `InternalPanic` instead of unwinding
/// into the caller's frames.
fn guarded(f: impl FnOnce() -> FedmtStatus) -> FedmtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(FedmtStatus::InternalPanic, &msg)
        }
    }
}

/// Copies `text` into `buf` (truncated, always NUL-terminated when `cap` is
/// nonzero) and returns the full untruncated length in bytes.
fn copy_text(text: &str, buf: *mut c_char, cap: usize) -> usize {
    if !buf.is_null() && cap > 0 {
        let n = text.len().min(cap - 1);
        // Safety: the caller promised `cap` writable bytes at `buf`.
        unsafe {
            std::ptr::copy_nonoverlapping(text.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
    }
    text.len()
}

unsafe fn write_handle<T>(out: *mut *mut T, value: T) -> FedmtStatus {
    if out.is_null() {
        return fail(FedmtStatus::NullPointer, "output handle pointer is NULL");
    }
    *out = Box::into_raw(Box::new(value));
    FedmtStatus::Ok
}

/// Library version as a static NUL-terminated string; never freed.
#[no_mangle]
pub extern "C" fn fedmt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the message of the most recent failure on this thread into `buf`
/// and returns its full length in bytes (excluding the NUL terminator).
///
/// Call with a NULL `buf` or zero `cap` to query the required length. The
/// message is only meaningful immediately after a call reported a failure.
#[no_mangle]
pub unsafe extern "C" fn fedmt_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| copy_text(&e.borrow(), buf, cap))
}

/// Builds the J x K map induced by grouping `n_groups` consecutive blocks of
/// fine classes, with block j holding `group_sizes[j]` classes.
#[no_mangle]
pub unsafe extern "C" fn fedmt_projection_hierarchical(
    group_sizes: *const usize,
    n_groups: usize,
    out: *mut *mut FedmtProjection,
) -> FedmtStatus {
    guarded(|| {
        if group_sizes.is_null() {
            return fail(FedmtStatus::NullPointer, "group_sizes is NULL");
        }
        let sizes = std::slice::from_raw_parts(group_sizes, n_groups);
        match build_hierarchical_q(&LabelSpaceSpec::hierarchical(sizes)) {
            Ok(inner) => write_handle(out, FedmtProjection { inner }),
            Err(e) => fail_with(e),
        }
    })
}

/// Builds the symmetric K x K label-noise matrix with off-diagonal mass `xi`.
#[no_mangle]
pub unsafe extern "C" fn fedmt_projection_noise(
    k: usize,
    xi: f64,
    out: *mut *mut FedmtProjection,
) -> FedmtStatus {
    guarded(|| match build_symmetric_noise_t(k, xi) {
        Ok(inner) => write_handle(out, FedmtProjection { inner }),
        Err(e) => fail_with(e),
    })
}

/// Builds the fixed interval-grouping map used by the sEMG-like task.
#[no_mangle]
pub unsafe extern "C" fn fedmt_projection_semg(
    k: usize,
    out: *mut *mut FedmtProjection,
) -> FedmtStatus {
    guarded(|| match fedmt::projection::build_semg_q(k) {
        Ok(inner) => write_handle(out, FedmtProjection { inner }),
        Err(e) => fail_with(e),
    })
}

/// Builds a projection from `rows * cols` row-major entries in `entries`
/// (`len` must equal `rows * cols`), validated for the given role.
#[no_mangle]
pub unsafe extern "C" fn fedmt_projection_from_entries(
    rows: usize,
    cols: usize,
    entries: *const f64,
    len: usize,
    role: FedmtMatrixRole,
    out: *mut *mut FedmtProjection,
) -> FedmtStatus {
    guarded(|| {
        if entries.is_null() {
            return fail(FedmtStatus::NullPointer, "entries is NULL");
        }
        if len != rows * cols {
            return fail(
                FedmtStatus::InvalidArgument,
                &format!("entries holds {len} values but {rows} x {cols} needs {}", rows * cols),
            );
        }
        let data = std::slice::from_raw_parts(entries, len);
        let m = DMatrix::from_row_slice(rows, cols, data);
        let role = match role {
            FedmtMatrixRole::LabelSpaceMap => MatrixRole::LabelSpaceMap,
            FedmtMatrixRole::NoiseMap => MatrixRole::NoiseMap,
        };
        match ProjectionMatrix::new(m, role) {
            Ok(inner) => write_handle(out, FedmtProjection { inner }),
            Err(e) => fail_with(e),
        }
    })
}

/// Row count of the projection; 0 if the handle is NULL.
#[no_mangle]
pub unsafe extern "C" fn fedmt_projection_rows(p: *const FedmtProjection) -> usize {
    p.as_ref().map_or(0, |p| p.inner.rows())
}

/// Column count of the projection; 0 if the handle is NULL.
#[no_mangle]
pub unsafe extern "C" fn fedmt_projection_cols(p: *const FedmtProjection) -> usize {
    p.as_ref().map_or(0, |p| p.inner.cols())
}

/// Copies the entries row-major into `buf`; `len` must equal rows * cols.
#[no_mangle]
pub unsafe extern "C" fn fedmt_projection_entries(
    p: *const FedmtProjection,
    buf: *mut f64,
    len: usize,
) -> FedmtStatus {
    guarded(|| copy_matrix(p, buf, len, false))
}

/// Copies the cached pseudo-inverse row-major into `buf`. The pseudo-inverse
/// of a rows x cols projection is cols x rows; `len` must equal rows * cols.
#[no_mangle]
pub unsafe extern "C" fn fedmt_projection_pinv(
    p: *const FedmtProjection,
    buf: *mut f64,
    len: usize,
) -> FedmtStatus {
    guarded(|| copy_matrix(p, buf, len, true))
}

unsafe fn copy_matrix(
    p: *const FedmtProjection,
    buf: *mut f64,
    len: usize,
    pinv: bool,
) -> FedmtStatus {
    let Some(p) = p.as_ref() else {
        return fail(FedmtStatus::NullPointer, "projection handle is NULL");
    };
    if buf.is_null() {
        return fail(FedmtStatus::NullPointer, "output buffer is NULL");
    }
    let m = if pinv { p.inner.pinv() } else { p.inner.entries() };
    if len != m.len() {
        return fail(
            FedmtStatus::InvalidArgument,
            &format!("buffer holds {len} values but the matrix has {}", m.len()),
        );
    }
    let out = std::slice::from_raw_parts_mut(buf, len);
    for (i, row) in m.row_iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out[i * m.ncols() + j] = *v;
        }
    }
    FedmtStatus::Ok
}

/// Releases a projection handle. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn fedmt_projection_free(p: *mut FedmtProjection) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Evaluates a training loss and its gradient with respect to the logits.
///
/// `logits` holds `n_samples * n_classes` row-major values; `labels` holds
/// `n_samples` indices into a space of `space_cardinality` classes tagged by
/// `space`. `projection` must be NULL for `PlainCe` and non-NULL otherwise.
/// `out_grad` may be NULL to skip the gradient; when present, `grad_len`
/// must equal `n_samples * n_classes`.
#[no_mangle]
pub unsafe extern "C" fn fedmt_loss_eval(
    kind: FedmtLossKind,
    projection: *const FedmtProjection,
    logits: *const f64,
    n_samples: usize,
    n_classes: usize,
    labels: *const usize,
    space: FedmtLabelSpace,
    space_cardinality: usize,
    out_loss: *mut f64,
    out_grad: *mut f64,
    grad_len: usize,
) -> FedmtStatus {
    guarded(|| {
        if logits.is_null() || labels.is_null() || out_loss.is_null() {
            return fail(FedmtStatus::NullPointer, "logits, labels, and out_loss are required");
        }
        if n_samples == 0 || n_classes == 0 {
            return fail(FedmtStatus::InvalidArgument, "n_samples and n_classes must be nonzero");
        }
        if !out_grad.is_null() && grad_len != n_samples * n_classes {
            return fail(
                FedmtStatus::InvalidArgument,
                &format!(
                    "gradient buffer holds {grad_len} values but needs {}",
                    n_samples * n_classes
                ),
            );
        }
        let kind = match (kind, projection.as_ref()) {
            (FedmtLossKind::PlainCe, None) => LossKind::PlainCe,
            (FedmtLossKind::PlainCe, Some(_)) => {
                return fail(
                    FedmtStatus::InvalidArgument,
                    "plain cross-entropy takes no projection; pass NULL",
                );
            }
            (_, None) => {
                return fail(FedmtStatus::NullPointer, "this loss kind requires a projection");
            }
            (FedmtLossKind::ForwardCe, Some(p)) => LossKind::ForwardCorrected(p.inner.clone()),
            (FedmtLossKind::BackwardCe, Some(p)) => LossKind::BackwardCorrected(p.inner.clone()),
            (FedmtLossKind::WeightedMse, Some(p)) => LossKind::WeightedMse(p.inner.clone()),
        };
        let logit_matrix =
            DMatrix::from_row_slice(n_samples, n_classes, std::slice::from_raw_parts(
                logits,
                n_samples * n_classes,
            ));
        let labels = std::slice::from_raw_parts(labels, n_samples).to_vec();
        let space = match space {
            FedmtLabelSpace::Desired => LabelSpace::Desired(space_cardinality),
            FedmtLabelSpace::Other => LabelSpace::Other(space_cardinality),
        };
        // The loss functions never read the feature matrix, only its row count.
        let batch = match LabeledBatch::new(DMatrix::zeros(n_samples, 1), labels, space) {
            Ok(b) => b,
            Err(e) => return fail_with(e),
        };
        match loss_on_logits(&kind, &logit_matrix, &batch) {
            Ok((loss, grad)) => {
                *out_loss = loss;
                if !out_grad.is_null() {
                    let out = std::slice::from_raw_parts_mut(out_grad, grad_len);
                    for i in 0..n_samples {
                        for j in 0..n_classes {
                            out[i * n_classes + j] = grad[(i, j)];
                        }
                    }
                }
                FedmtStatus::Ok
            }
            Err(e) => fail_with(e),
        }
    })
}

/// Parses `config_json`, runs the experiment, persists artifacts, and hands
/// back a metrics handle.
///
/// The output root is `out_dir` when non-NULL, else the `FEDMT_OUT_DIR`
/// environment variable, else the config's `output_dir` field, else `runs`.
/// Artifacts land under `<root>/<run id>/`.
#[no_mangle]
pub unsafe extern "C" fn fedmt_run_experiment(
    config_json: *const c_char,
    out_dir: *const c_char,
    out: *mut *mut FedmtMetrics,
) -> FedmtStatus {
    guarded(|| {
        if config_json.is_null() {
            return fail(FedmtStatus::NullPointer, "config_json is NULL");
        }
        let text = match CStr::from_ptr(config_json).to_str() {
            Ok(t) => t,
            Err(_) => return fail(FedmtStatus::InvalidUtf8, "config_json is not valid UTF-8"),
        };
        let dir = if out_dir.is_null() {
            None
        } else {
            match CStr::from_ptr(out_dir).to_str() {
                Ok(t) => Some(t),
                Err(_) => return fail(FedmtStatus::InvalidUtf8, "out_dir is not valid UTF-8"),
            }
        };
        let config = match ExperimentConfig::from_json(text) {
            Ok(c) => c,
            Err(e) => return fail_with(e),
        };
        let env = std::env::var(harness::OUT_DIR_ENV).ok();
        let root = harness::resolve_output_dir(dir, env.as_deref(), &config);
        match harness::run_experiment(&config, &root) {
            Ok(inner) => write_handle(out, FedmtMetrics { inner }),
            Err(e) => fail_with(e),
        }
    })
}

/// Copies the run id (hex content hash of the config) into `buf`; returns
/// its full length. Same truncation contract as [`fedmt_last_error`].
#[no_mangle]
pub unsafe extern "C" fn fedmt_metrics_run_id(
    m: *const FedmtMetrics,
    buf: *mut c_char,
    cap: usize,
) -> usize {
    m.as_ref().map_or(0, |m| copy_text(&m.inner.run_id, buf, cap))
}

/// Number of rows in the round trace (round 0 is the untrained baseline).
#[no_mangle]
pub unsafe extern "C" fn fedmt_metrics_rounds(m: *const FedmtMetrics) -> usize {
    m.as_ref().map_or(0, |m| m.inner.trace.len())
}

/// Test accuracy after the final round; NaN if the handle is NULL.
#[no_mangle]
pub unsafe extern "C" fn fedmt_metrics_final_acc(m: *const FedmtMetrics) -> f64 {
    m.as_ref().map_or(f64::NAN, |m| m.inner.summary.final_test_acc)
}

/// Best test accuracy over all rounds; NaN if the handle is NULL.
#[no_mangle]
pub unsafe extern "C" fn fedmt_metrics_best_acc(m: *const FedmtMetrics) -> f64 {
    m.as_ref().map_or(f64::NAN, |m| m.inner.summary.best_test_acc)
}

/// First round at which the overall loss fell to a tenth of its starting
/// value, or -1 if that never happened (or the handle is NULL).
#[no_mangle]
pub unsafe extern "C" fn fedmt_metrics_rounds_to_loss_fraction(m: *const FedmtMetrics) -> i64 {
    m.as_ref()
        .and_then(|m| m.inner.summary.rounds_to_loss_fraction)
        .map_or(-1, |r| r as i64)
}

/// Serializes the full metrics record (run id, per-round trace, summary) as
/// JSON into `buf`; returns its full length. Same truncation contract as
/// [`fedmt_last_error`]. Returns 0 if the handle is NULL.
#[no_mangle]
pub unsafe extern "C" fn fedmt_metrics_json(
    m: *const FedmtMetrics,
    buf: *mut c_char,
    cap: usize,
) -> usize {
    let Some(m) = m.as_ref() else { return 0 };
    match serde_json::to_string(&m.inner) {
        Ok(text) => copy_text(&text, buf, cap),
        Err(_) => 0,
    }
}

/// Releases a metrics handle. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn fedmt_metrics_free(m: *mut FedmtMetrics) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}
