/*
 * C interface to the fedmt library: frozen-feature federated training with
 * mixed-type labels, label-space projections, noise-corrected losses, and a
 * reproducible experiment harness.
 *
 * Conventions:
 *   - Fallible calls return FedmtStatus; FEDMT_STATUS_OK (0) means success.
 *   - On failure a thread-local message is recorded; fetch it with
 *     fedmt_last_error immediately after the failing call.
 *   - Handles returned through FedmtProjection** / FedmtMetrics** out
 *     parameters must be released with the matching fedmt_*_free. Freeing
 *     NULL is a no-op.
 *   - Matrix buffers are dense row-major double arrays owned by the caller.
 */

#ifndef FEDMT_H
#define FEDMT_H

/* Generated by cbindgen from the fedmt-capi crate; edit the Rust source instead. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Which label alphabet the labels passed to [`fedmt_loss_eval`] live in.
typedef enum FedmtLabelSpace {
  // The fine space with K classes that predictions live in.
  FEDMT_LABEL_SPACE_DESIRED = 0,
  // The coarse or overlapping space with J classes.
  FEDMT_LABEL_SPACE_OTHER = 1,
} FedmtLabelSpace;

// Training objective selected for [`fedmt_loss_eval`].
typedef enum FedmtLossKind {
  // Plain cross-entropy; takes no projection.
  FEDMT_LOSS_KIND_PLAIN_CE = 0,
  // Cross-entropy on projected probabilities.
  FEDMT_LOSS_KIND_FORWARD_CE = 1,
  // Cross-entropy with the correction applied to the log terms.
  FEDMT_LOSS_KIND_BACKWARD_CE = 2,
  // Weighted mean squared error against multi-hot targets.
  FEDMT_LOSS_KIND_WEIGHTED_MSE = 3,
} FedmtLossKind;

// Role of a projection matrix built from raw entries.
typedef enum FedmtMatrixRole {
  // J x K correspondence between coarse and fine label spaces.
  FEDMT_MATRIX_ROLE_LABEL_SPACE_MAP = 0,
  // K x K label-noise transition matrix.
  FEDMT_MATRIX_ROLE_NOISE_MAP = 1,
} FedmtMatrixRole;

// Result code returned by every fallible ABI call.
//
// Values above `FEDMT_STATUS_OK` up to `FEDMT_STATUS_JSON` mirror the
// library's own error cases one to one; the remaining values report misuse
// of the ABI itself.
typedef enum FedmtStatus {
  // The call succeeded.
  FEDMT_STATUS_OK = 0,
  // Operand dimensions are inconsistent.
  FEDMT_STATUS_SHAPE_MISMATCH = 1,
  // Hierarchical partition sizes do not sum to the class count.
  FEDMT_STATUS_PARTITION_MISMATCH = 2,
  // Noise matrix is singular or outside its invertible range.
  FEDMT_STATUS_SINGULAR_NOISE = 3,
  // Class count not supported by this constructor.
  FEDMT_STATUS_UNSUPPORTED_CLASS_COUNT = 4,
  // A loss evaluated to a non-finite value.
  FEDMT_STATUS_NONFINITE_LOSS = 5,
  // Task specification cannot produce a meaningful dataset.
  FEDMT_STATUS_DEGENERATE_SPEC = 6,
  // Signal too short for feature extraction.
  FEDMT_STATUS_DEGENERATE_SIGNAL = 7,
  // Per-client class quotas cannot be met by the pool.
  FEDMT_STATUS_INFEASIBLE_SPLIT = 8,
  // Aggregation weights do not form a valid convex combination.
  FEDMT_STATUS_BAD_WEIGHTS = 9,
  // Gram matrix side exceeds the configured cap.
  FEDMT_STATUS_TOO_LARGE = 10,
  // Theoretical contraction factor falls outside (0, 1).
  FEDMT_STATUS_INVALID_RATE = 11,
  // Eigensolver did not converge.
  FEDMT_STATUS_CONVERGENCE_FAILURE = 12,
  // Experiment configuration failed validation.
  FEDMT_STATUS_CONFIG_INVALID = 13,
  // Filesystem operation failed.
  FEDMT_STATUS_IO = 14,
  // JSON serialization or parsing failed.
  FEDMT_STATUS_JSON = 15,
  // A required pointer argument was NULL.
  FEDMT_STATUS_NULL_POINTER = 16,
  // A string argument was not valid UTF-8.
  FEDMT_STATUS_INVALID_UTF8 = 17,
  // An argument value or buffer length does not fit the call.
  FEDMT_STATUS_INVALID_ARGUMENT = 18,
  // The library panicked; treat the handle state as poisoned.
  FEDMT_STATUS_INTERNAL_PANIC = 19,
} FedmtStatus;

// Owned result of a finished experiment run. Opaque to C callers.
typedef struct FedmtMetrics FedmtMetrics;

// Owned projection matrix (label-space map or noise matrix) with its cached
// pseudo-inverse. Opaque to C callers.
typedef struct FedmtProjection FedmtProjection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string; never freed.
const char *fedmt_version(void);

// Copies the message of the most recent failure on this thread into `buf`
// and returns its full length in bytes (excluding the NUL terminator).
//
// Call with a NULL `buf` or zero `cap` to query the required length. The
// message is only meaningful immediately after a call reported a failure.
size_t fedmt_last_error(char *buf, size_t cap);

// Builds the J x K map induced by grouping `n_groups` consecutive blocks of
// fine classes, with block j holding `group_sizes[j]` classes.
enum FedmtStatus fedmt_projection_hierarchical(const size_t *group_sizes,
                                               size_t n_groups,
                                               struct FedmtProjection **out);

// Builds the symmetric K x K label-noise matrix with off-diagonal mass `xi`.
enum FedmtStatus fedmt_projection_noise(size_t k, double xi, struct FedmtProjection **out);

// Builds the fixed interval-grouping map used by the sEMG-like task.
enum FedmtStatus fedmt_projection_semg(size_t k, struct FedmtProjection **out);

// Builds a projection from `rows * cols` row-major entries in `entries`
// (`len` must equal `rows * cols`), validated for the given role.
enum FedmtStatus fedmt_projection_from_entries(size_t rows,
                                               size_t cols,
                                               const double *entries,
                                               size_t len,
                                               enum FedmtMatrixRole role,
                                               struct FedmtProjection **out);

// Row count of the projection; 0 if the handle is NULL.
size_t fedmt_projection_rows(const struct FedmtProjection *p);

// Column count of the projection; 0 if the handle is NULL.
size_t fedmt_projection_cols(const struct FedmtProjection *p);

// Copies the entries row-major into `buf`; `len` must equal rows * cols.
enum FedmtStatus fedmt_projection_entries(const struct FedmtProjection *p, double *buf, size_t len);

// Copies the cached pseudo-inverse row-major into `buf`. The pseudo-inverse
// of a rows x cols projection is cols x rows; `len` must equal rows * cols.
enum FedmtStatus fedmt_projection_pinv(const struct FedmtProjection *p, double *buf, size_t len);

// Releases a projection handle. NULL is ignored.
void fedmt_projection_free(struct FedmtProjection *p);

// Evaluates a training loss and its gradient with respect to the logits.
//
// `logits` holds `n_samples * n_classes` row-major values; `labels` holds
// `n_samples` indices into a space of `space_cardinality` classes tagged by
// `space`. `projection` must be NULL for `PlainCe` and non-NULL otherwise.
// `out_grad` may be NULL to skip the gradient; when present, `grad_len`
// must equal `n_samples * n_classes`.
enum FedmtStatus fedmt_loss_eval(enum FedmtLossKind kind,
                                 const struct FedmtProjection *projection,
                                 const double *logits,
                                 size_t n_samples,
                                 size_t n_classes,
                                 const size_t *labels,
                                 enum FedmtLabelSpace space,
                                 size_t space_cardinality,
                                 double *out_loss,
                                 double *out_grad,
                                 size_t grad_len);

// Parses `config_json`, runs the experiment, persists artifacts, and hands
// back a metrics handle.
//
// The output root is `out_dir` when non-NULL, else the `FEDMT_OUT_DIR`
// environment variable, else the config's `output_dir` field, else `runs`.
// Artifacts land under `<root>/<run id>/`.
enum FedmtStatus fedmt_run_experiment(const char *config_json,
                                      const char *out_dir,
                                      struct FedmtMetrics **out);

// Copies the run id (hex content hash of the config) into `buf`; returns
// its full length. Same truncation contract as [`fedmt_last_error`].
size_t fedmt_metrics_run_id(const struct FedmtMetrics *m, char *buf, size_t cap);

// Number of rows in the round trace (round 0 is the untrained baseline).
size_t fedmt_metrics_rounds(const struct FedmtMetrics *m);

// Test accuracy after the final round; NaN if the handle is NULL.
double fedmt_metrics_final_acc(const struct FedmtMetrics *m);

// Best test accuracy over all rounds; NaN if the handle is NULL.
double fedmt_metrics_best_acc(const struct FedmtMetrics *m);

// First round at which the overall loss fell to a tenth of its starting
// value, or -1 if that never happened (or the handle is NULL).
int64_t fedmt_metrics_rounds_to_loss_fraction(const struct FedmtMetrics *m);

// Serializes the full metrics record (run id, per-round trace, summary) as
// JSON into `buf`; returns its full length. Same truncation contract as
// [`fedmt_last_error`]. Returns 0 if the handle is NULL.
size_t fedmt_metrics_json(const struct FedmtMetrics *m, char *buf, size_t cap);

// Releases a metrics handle. NULL is ignored.
void fedmt_metrics_free(struct FedmtMetrics *m);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDMT_H */
