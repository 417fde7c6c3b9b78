#ifndef FEDGIA_H
#define FEDGIA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FedgiaStatus {
  FEDGIA_STATUS_OK = 0,
  FEDGIA_STATUS_NULL_POINTER = 1,
  FEDGIA_STATUS_INVALID_ARGUMENT = 2,
  FEDGIA_STATUS_IO = 3,
  FEDGIA_STATUS_OUT_OF_RANGE = 4,
  FEDGIA_STATUS_PANIC = 5,
} FedgiaStatus;

typedef enum FedgiaLoss {
  FEDGIA_LOSS_LEAST_SQUARES = 0,
  FEDGIA_LOSS_LOGISTIC_L2 = 1,
  FEDGIA_LOSS_LOGISTIC_NONCONVEX = 2,
} FedgiaLoss;

typedef enum FedgiaFormat {
  FEDGIA_FORMAT_CSV = 0,
  FEDGIA_FORMAT_LIBSVM = 1,
} FedgiaFormat;

typedef enum FedgiaAlgorithm {
  FEDGIA_ALGORITHM_FED_AVG = 0,
  FEDGIA_ALGORITHM_FED_PROX = 1,
  FEDGIA_ALGORITHM_FED_PD = 2,
  FEDGIA_ALGORITHM_FED_GIA_DIAGONAL = 3,
  FEDGIA_ALGORITHM_FED_GIA_GRAM = 4,
} FedgiaAlgorithm;

// Termination reason; the values match the command-line exit codes.
typedef enum FedgiaRunStatus {
  FEDGIA_RUN_STATUS_CONVERGED = 0,
  FEDGIA_RUN_STATUS_ITER_CAP = 3,
  FEDGIA_RUN_STATUS_DIVERGED = 4,
} FedgiaRunStatus;

// Opaque federated problem.
typedef struct FedgiaProblem FedgiaProblem;

// Opaque run result.
typedef struct FedgiaTrace FedgiaTrace;

// Run settings. Non-positive `t` and `tol` and a zero `max_iter` select the
// loss defaults.
typedef struct FedgiaRunConfig {
  enum FedgiaAlgorithm algorithm;
  size_t k0;
  double alpha;
  double t;
  double tol;
  size_t max_iter;
  uint64_t seed;
  size_t workers;
} FedgiaRunConfig;

// One aggregation round. `lagrangian` is NaN for the baselines.
typedef struct FedgiaTraceRow {
  size_t k;
  size_t tau;
  size_t cr;
  double objective;
  double error;
  double lagrangian;
  double elapsed_s;
} FedgiaTraceRow;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *fedgia_version(void);

// Message for the last failed call on this thread, or null. The pointer is
// valid until the next failing call on the same thread.
const char *fedgia_last_error_message(void);

// Generates the synthetic non-i.i.d. regression problem and binds `loss`.
// Logistic losses relabel the targets by sign.
enum FedgiaStatus fedgia_problem_generate(size_t m,
                                          size_t n,
                                          size_t d_min,
                                          size_t d_max,
                                          uint64_t seed,
                                          enum FedgiaLoss loss,
                                          struct FedgiaProblem **out);

// Builds a problem from dense data. `features` holds all samples row-major
// (`sum(sizes)` rows of `n` values), client after client; `labels` holds
// `sum(sizes)` values in the same order.
//
// # Safety
// `sizes` must be valid for `m` reads, `features` for `sum(sizes)·n` reads
// and `labels` for `sum(sizes)` reads.
enum FedgiaStatus fedgia_problem_from_dense(size_t m,
                                            const size_t *sizes,
                                            size_t n,
                                            const double *features,
                                            const double *labels,
                                            enum FedgiaLoss loss,
                                            struct FedgiaProblem **out);

// Loads a CSV (label in the last column) or LIBSVM file and splits it
// randomly across `m` clients.
//
// # Safety
// `path` must be a NUL-terminated string.
enum FedgiaStatus fedgia_problem_load(const char *path,
                                      enum FedgiaFormat format,
                                      size_t m,
                                      uint64_t seed,
                                      enum FedgiaLoss loss,
                                      struct FedgiaProblem **out);

// # Safety
// `problem` is null or a handle from this library that has not been freed.
void fedgia_problem_free(struct FedgiaProblem *problem);

// Writes client count, feature dimension and total sample count.
//
// # Safety
// `problem` must be a live handle; each out pointer may be null.
enum FedgiaStatus fedgia_problem_shape(const struct FedgiaProblem *problem,
                                       size_t *m,
                                       size_t *n,
                                       size_t *total_samples);

// Evaluates `f(x) = (1/m) Σ f_i(x)`.
//
// # Safety
// `problem` must be a live handle, `x` valid for `len` reads, `out` writable.
enum FedgiaStatus fedgia_problem_objective(const struct FedgiaProblem *problem,
                                           const double *x,
                                           size_t len,
                                           double *out);

// Default settings for `algorithm`: `k0 = 1`, `alpha = 1`, loss defaults,
// seed 0, one worker.
struct FedgiaRunConfig fedgia_run_config_default(enum FedgiaAlgorithm algorithm);

// Runs one trainer to termination.
//
// # Safety
// `problem` and `config` must be live; `out` must be writable.
enum FedgiaStatus fedgia_run(const struct FedgiaProblem *problem,
                             const struct FedgiaRunConfig *config,
                             struct FedgiaTrace **out);

// # Safety
// `trace` is null or a handle from this library that has not been freed.
void fedgia_trace_free(struct FedgiaTrace *trace);

// # Safety
// `trace` must be live and `out` writable.
enum FedgiaStatus fedgia_trace_status(const struct FedgiaTrace *trace, enum FedgiaRunStatus *out);

// # Safety
// `trace` must be live and `out` writable.
enum FedgiaStatus fedgia_trace_num_rows(const struct FedgiaTrace *trace, size_t *out);

// # Safety
// `trace` must be live and `out` writable.
enum FedgiaStatus fedgia_trace_row(const struct FedgiaTrace *trace,
                                   size_t index,
                                   struct FedgiaTraceRow *out);

// Copies the final global model into `buf`. `*written` receives the model
// length; a `len` that is too small fails with `OUT_OF_RANGE` after setting
// `*written`, so a first call with `len = 0` queries the size.
//
// # Safety
// `trace` must be live, `buf` valid for `len` writes, `written` writable.
enum FedgiaStatus fedgia_trace_final_x(const struct FedgiaTrace *trace,
                                       double *buf,
                                       size_t len,
                                       size_t *written);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDGIA_H */
