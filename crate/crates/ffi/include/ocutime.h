#ifndef OCUTIME_H
#define OCUTIME_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum OcutimeStatus {
  OCUTIME_STATUS_OK = 0,
  OCUTIME_STATUS_NULL_POINTER = 1,
  OCUTIME_STATUS_INVALID_UTF8 = 2,
  OCUTIME_STATUS_CONFIG = 3,
  OCUTIME_STATUS_SHAPE = 4,
  OCUTIME_STATUS_NUMERIC = 5,
  OCUTIME_STATUS_INSUFFICIENT_DATA = 6,
  OCUTIME_STATUS_UNDEFINED_CORRELATION = 7,
  OCUTIME_STATUS_STAGE_ORDER = 8,
  OCUTIME_STATUS_STALE_INPUT = 9,
  OCUTIME_STATUS_IO = 10,
  OCUTIME_STATUS_PARSE = 11,
  OCUTIME_STATUS_BUFFER_TOO_SMALL = 12,
  OCUTIME_STATUS_PANIC = 13,
} OcutimeStatus;

typedef enum OcutimeVariant {
  OCUTIME_VARIANT_M0 = 0,
  OCUTIME_VARIANT_M1 = 1,
  OCUTIME_VARIANT_M2 = 2,
} OcutimeVariant;

/**
 * Opaque pipeline configuration.
 */
typedef struct OcutimeConfig OcutimeConfig;

/**
 * Opaque trained or freshly initialized model.
 */
typedef struct OcutimeModel OcutimeModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ocutime_version(void);

/**
 * Message of the last failed call on this thread ("" if none). The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *ocutime_last_error_message(void);

/**
 * Builds a model with the default architecture for `channels × window`
 * windows, initialized from `seed`.
 *
 * # Safety
 * `out` must be a valid pointer; the handle must be released with
 * [`ocutime_model_free`].
 */
enum OcutimeStatus ocutime_model_new(enum OcutimeVariant variant,
                                     size_t channels,
                                     size_t window,
                                     uint64_t seed,
                                     struct OcutimeModel **out);

/**
 * Loads a checkpoint written by the train or ablate stage.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum OcutimeStatus ocutime_model_load(const char *path, struct OcutimeModel **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `model` a live handle.
 */
enum OcutimeStatus ocutime_model_save(const struct OcutimeModel *model, const char *path);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards. Null is a no-op.
 */
void ocutime_model_free(struct OcutimeModel *model);

/**
 * Input channels, window length, output length and parameter count.
 *
 * # Safety
 * All pointers must be valid.
 */
enum OcutimeStatus ocutime_model_dims(const struct OcutimeModel *model,
                                      size_t *channels,
                                      size_t *window,
                                      size_t *output_len,
                                      size_t *parameters);

/**
 * Predicted trajectory for one channel-major window `eeg[channels × window]`.
 *
 * # Safety
 * `eeg` must hold `eeg_len` values and `out` `out_len` writable values.
 */
enum OcutimeStatus ocutime_model_predict(const struct OcutimeModel *model,
                                         const double *eeg,
                                         size_t eeg_len,
                                         double *out,
                                         size_t out_len);

/**
 * Spatial-filter feature (one value per input sample) for one window.
 *
 * # Safety
 * As [`ocutime_model_predict`]; `out` needs `window` values.
 */
enum OcutimeStatus ocutime_model_feature(const struct OcutimeModel *model,
                                         const double *eeg,
                                         size_t eeg_len,
                                         double *out,
                                         size_t out_len);

/**
 * Pearson correlation of two equal-length sequences.
 *
 * # Safety
 * `a` and `b` must hold `n` values; `out` must be valid.
 */
enum OcutimeStatus ocutime_pearson_r(const double *a, const double *b, size_t n, double *out);

/**
 * Banded DTW distance with absolute-difference cost.
 *
 * # Safety
 * `a` holds `n` values, `b` holds `m`; `out` must be valid.
 */
enum OcutimeStatus ocutime_dtw_distance(const double *a,
                                        size_t n,
                                        const double *b,
                                        size_t m,
                                        size_t radius,
                                        double *out);

/**
 * Lag (ms) and value of the normalized cross-correlation peak of `a`
 * against `b`; positive lag means `a` trails `b`.
 *
 * # Safety
 * `a` and `b` must hold `n` values; outputs must be valid.
 */
enum OcutimeStatus ocutime_xcorr_peak(const double *a,
                                      const double *b,
                                      size_t n,
                                      size_t max_lag,
                                      double fs,
                                      double *lag_ms,
                                      double *peak);

/**
 * Parses a TOML pipeline configuration. `base_dir` (nullable) anchors
 * relative paths.
 *
 * # Safety
 * `toml` (and `base_dir` when non-null) must be NUL-terminated; `out` valid.
 */
enum OcutimeStatus ocutime_config_from_toml(const char *toml,
                                            const char *base_dir,
                                            struct OcutimeConfig **out);

/**
 * # Safety
 * `config` must come from this library and not be used afterwards. Null is a no-op.
 */
void ocutime_config_free(struct OcutimeConfig *config);

/**
 * # Safety
 * `config` must be a live handle.
 */
enum OcutimeStatus ocutime_config_set_seed(struct OcutimeConfig *config, uint64_t seed);

/**
 * Runs one named stage (`simulate`, `preprocess`, ... `report`). `empty`
 * (nullable) receives 1 when the stage produced no usable results.
 *
 * # Safety
 * `config` must be a live handle and `stage` NUL-terminated.
 */
enum OcutimeStatus ocutime_run_stage(const struct OcutimeConfig *config,
                                     const char *stage,
                                     int32_t *empty);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OCUTIME_H */
