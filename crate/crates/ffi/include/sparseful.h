#ifndef SPARSEFUL_H
#define SPARSEFUL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SpfArm {
  SPF_ARM_SPARSEFUEL = 0,
  SPF_ARM_GLOBAL_FEDAVG = 1,
  SPF_ARM_ISOLATED = 2,
} SpfArm;

typedef enum SpfStatus {
  SPF_STATUS_OK = 0,
  SPF_STATUS_NULL_POINTER = 1,
  SPF_STATUS_INVALID_UTF8 = 2,
  SPF_STATUS_INVALID_ARGUMENT = 3,
  SPF_STATUS_CONFIG = 4,
  SPF_STATUS_IO = 5,
  SPF_STATUS_CODEC = 6,
  SPF_STATUS_RUNTIME = 7,
  SPF_STATUS_BUFFER_TOO_SMALL = 8,
  SPF_STATUS_PANIC = 9,
} SpfStatus;

/**
 * A parsed experiment configuration.
 */
typedef struct SpfConfig SpfConfig;

/**
 * A running experiment and the metrics recorded so far.
 */
typedef struct SpfExperiment SpfExperiment;

/**
 * A decoded model.
 */
typedef struct SpfModel SpfModel;

/**
 * Scalar columns of one round's metrics.
 */
typedef struct SpfRoundMetrics {
  uint64_t round;
  uint64_t federation_count;
  double objective;
  uint64_t bytes_round;
  uint64_t bytes_total;
  uint64_t macs;
} SpfRoundMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Length in bytes of the calling thread's last error message, without a
 * terminator. Zero when nothing has failed yet.
 */
size_t spf_last_error_length(void);

/**
 * Copy the last error message into `buf` as a NUL-terminated string,
 * truncating to `len - 1` bytes. Returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t spf_last_error_message(char *buf, size_t len);

/**
 * Parse configuration text.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SpfStatus spf_config_parse(const char *text, struct SpfConfig **out);

/**
 * Read and parse a configuration file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SpfStatus spf_config_load(const char *path, struct SpfConfig **out);

/**
 * Replace the configuration's seed.
 *
 * # Safety
 * `cfg` must come from this library and not be freed.
 */
enum SpfStatus spf_config_set_seed(struct SpfConfig *cfg, uint64_t seed);

/**
 * Number of subregions, which is also the number of per-region columns.
 *
 * # Safety
 * `cfg` must come from this library; `out` must be valid.
 */
enum SpfStatus spf_config_subregion_count(const struct SpfConfig *cfg, size_t *out);

/**
 * # Safety
 * `cfg` must be null or come from this library, and is invalid afterwards.
 */
void spf_config_free(struct SpfConfig *cfg);

/**
 * Run the threshold calibration for `cfg` and store the recommended value.
 *
 * # Safety
 * `cfg` must come from this library; `tau` must be valid.
 */
enum SpfStatus spf_calibrate_tau(const struct SpfConfig *cfg, double *tau);

/**
 * Set up an experiment. The configuration is copied; `cfg` may be freed
 * afterwards.
 *
 * # Safety
 * `cfg` must come from this library; `out` must be valid.
 */
enum SpfStatus spf_experiment_new(const struct SpfConfig *cfg,
                                  enum SpfArm arm,
                                  struct SpfExperiment **out);

/**
 * Run one round. `metrics` may be null.
 *
 * # Safety
 * `exp` must come from this library; `metrics` must be null or valid.
 */
enum SpfStatus spf_experiment_step(struct SpfExperiment *exp, struct SpfRoundMetrics *metrics);

/**
 * Run the remaining configured rounds.
 *
 * # Safety
 * `exp` must come from this library.
 */
enum SpfStatus spf_experiment_run(struct SpfExperiment *exp);

/**
 * Rounds completed so far.
 *
 * # Safety
 * `exp` must come from this library; `out` must be valid.
 */
enum SpfStatus spf_experiment_round(const struct SpfExperiment *exp, uint64_t *out);

/**
 * Per-subregion test accuracy after the latest round, written to
 * `out[0..len]`. `len` must equal the subregion count.
 *
 * # Safety
 * `exp` must come from this library; `out` must hold `len` doubles.
 */
enum SpfStatus spf_experiment_region_accuracy(const struct SpfExperiment *exp,
                                              double *out,
                                              size_t len);

/**
 * Write the metrics recorded so far as CSV.
 *
 * # Safety
 * `exp` must come from this library; `path` must be a NUL-terminated string.
 */
enum SpfStatus spf_experiment_write_csv(const struct SpfExperiment *exp, const char *path);

/**
 * # Safety
 * `exp` must be null or come from this library, and is invalid afterwards.
 */
void spf_experiment_free(struct SpfExperiment *exp);

/**
 * Decode a serialized model.
 *
 * # Safety
 * `bytes` must point to `len` readable bytes; `out` must be valid.
 */
enum SpfStatus spf_model_decode(const uint8_t *bytes, size_t len, struct SpfModel **out);

/**
 * Read a model checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid.
 */
enum SpfStatus spf_model_load(const char *path, struct SpfModel **out);

/**
 * Encoded size in bytes.
 *
 * # Safety
 * `model` must come from this library; `out` must be valid.
 */
enum SpfStatus spf_model_serialized_size(const struct SpfModel *model, uint64_t *out);

/**
 * Nonzero weights, i.e. multiply-accumulates per inference.
 *
 * # Safety
 * `model` must come from this library; `out` must be valid.
 */
enum SpfStatus spf_model_nonzero_macs(const struct SpfModel *model, uint64_t *out);

/**
 * Encode `model` into `buf`. `written` receives the encoded length even
 * when `cap` is too small, so a first call with `cap = 0` sizes the buffer.
 *
 * # Safety
 * `model` must come from this library; `buf` must be null or hold `cap`
 * bytes; `written` must be valid.
 */
enum SpfStatus spf_model_encode(const struct SpfModel *model,
                                uint8_t *buf,
                                size_t cap,
                                size_t *written);

/**
 * # Safety
 * `model` must be null or come from this library, and is invalid afterwards.
 */
void spf_model_free(struct SpfModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPARSEFUL_H */
