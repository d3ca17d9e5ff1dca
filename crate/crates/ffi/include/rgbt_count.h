#ifndef RGBT_COUNT_H
#define RGBT_COUNT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every entry point.
typedef enum RgbtStatus {
  RGBT_STATUS_OK = 0,
  RGBT_STATUS_NULL_POINTER = 1,
  RGBT_STATUS_INVALID_ARGUMENT = 2,
  RGBT_STATUS_SHAPE = 3,
  RGBT_STATUS_NON_FINITE = 4,
  RGBT_STATUS_CONFIG = 5,
  RGBT_STATUS_PARSE = 6,
  RGBT_STATUS_CHECKPOINT = 7,
  RGBT_STATUS_IO = 8,
  RGBT_STATUS_DIVERGED = 9,
  RGBT_STATUS_PANIC = 10,
} RgbtStatus;

// Opaque model handle: architecture, parameters and optimizer state.
typedef struct RgbtModel RgbtModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread (empty after a success).
// The pointer stays valid until the next call on this thread.
const char *rgbt_last_error_message(void);

// Static description of a status code.
const char *rgbt_status_string(enum RgbtStatus status);

// Creates a freshly initialized model.
//
// # Safety
// `config_text` is null (defaults) or a NUL-terminated `key = value` config;
// `out` must be a valid pointer to write the handle to.
enum RgbtStatus rgbt_model_new(const char *config_text, uint64_t seed, struct RgbtModel **out);

// Loads a checkpoint written by the CLI or [`rgbt_model_save`].
//
// # Safety
// `path` is a NUL-terminated UTF-8 path; `out` a valid pointer.
enum RgbtStatus rgbt_model_load(const char *path, struct RgbtModel **out);

// # Safety
// `model` is a live handle; `path` a NUL-terminated UTF-8 path.
enum RgbtStatus rgbt_model_save(const struct RgbtModel *model, const char *path);

// Releases a handle; null is ignored.
//
// # Safety
// `model` is null or a handle not yet freed.
void rgbt_model_free(struct RgbtModel *model);

// Expected input height and width.
//
// # Safety
// `model` is a live handle; `out` a valid pointer.
enum RgbtStatus rgbt_model_image_size(const struct RgbtModel *model, size_t *out);

// Side `N` of the `N x N` density grid.
//
// # Safety
// `model` is a live handle; `out` a valid pointer.
enum RgbtStatus rgbt_model_grid_side(const struct RgbtModel *model, size_t *out);

// Number of scalar parameters.
//
// # Safety
// `model` is a live handle; `out` a valid pointer.
enum RgbtStatus rgbt_model_num_params(const struct RgbtModel *model, size_t *out);

// Predicts a density map. `rgb` holds `S*S*3` values and `thermal`
// `S*S*thermal_channels` (1 or 3), `S` the model image size. Writes `N*N`
// cells to `density_out` and the map total to `count_out`.
//
// # Safety
// All pointers valid for the stated lengths; `density_len` must be `N*N`.
enum RgbtStatus rgbt_model_predict(const struct RgbtModel *model,
                                   const double *rgb,
                                   const double *thermal,
                                   size_t thermal_channels,
                                   double *density_out,
                                   size_t density_len,
                                   double *count_out);

// GAME regional counts of an `n x n` density grid over a `height x width`
// image: writes `4^level` values, row-major.
//
// # Safety
// `grid` holds `n*n` values; `out` has room for `out_len` values.
enum RgbtStatus rgbt_regional_counts(const double *grid,
                                     size_t n,
                                     size_t height,
                                     size_t width,
                                     uint32_t level,
                                     double *out,
                                     size_t out_len);

// RMSE of predicted versus ground-truth totals.
//
// # Safety
// `pred` and `gt` hold `len` values; `out` is a valid pointer.
enum RgbtStatus rgbt_rmse(const double *pred, const double *gt, size_t len, double *out);

// Writes a synthetic dataset (`train/val/test` splits plus manifests) of
// `image_size` square scenes with 10 to 30 people.
//
// # Safety
// `out_dir` is a NUL-terminated UTF-8 path.
enum RgbtStatus rgbt_generate_dataset(const char *out_dir,
                                      uint64_t seed,
                                      size_t n_train,
                                      size_t n_val,
                                      size_t n_test,
                                      size_t image_size);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RGBT_COUNT_H */
