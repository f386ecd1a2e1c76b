#ifndef HST_H
#define HST_H

/* Generated by cbindgen from hst-capi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum HstStatus {
  HST_STATUS_OK = 0,
  HST_STATUS_NULL_POINTER = 1,
  HST_STATUS_INVALID_UTF8 = 2,
  HST_STATUS_IO = 3,
  HST_STATUS_PARSE = 4,
  HST_STATUS_VALIDATION = 5,
  HST_STATUS_CONFIG = 6,
  HST_STATUS_CHECKPOINT = 7,
  HST_STATUS_SHAPE = 8,
  HST_STATUS_TRAINING = 9,
  HST_STATUS_BUFFER_TOO_SMALL = 10,
} HstStatus;

/**
 * Opaque dataset: the records of one manifest.
 */
typedef struct HstDataset HstDataset;

/**
 * Opaque model restored from a checkpoint.
 */
typedef struct HstModelHandle HstModelHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static null-terminated string.
 */
const char *hst_version(void);

/**
 * Copy the last error message (UTF-8, null-terminated) into `buf`.
 * Returns the full message length in bytes (excluding the terminator);
 * call with `cap == 0` to query the required capacity.
 *
 * # Safety
 * `buf` must point to at least `cap` writable bytes, or be null with
 * `cap == 0`.
 */
uintptr_t hst_last_error(char *buf, uintptr_t cap);

/**
 * Load a manifest (CSV with header `subject_id,path,label,site`).
 *
 * # Safety
 * `manifest_path` must be a null-terminated string; `out` must be a valid
 * pointer to receive the handle.
 */
enum HstStatus hst_dataset_load(const char *manifest_path, struct HstDataset **out);

/**
 * Number of records in the dataset; 0 for a null handle.
 *
 * # Safety
 * `ds` must be a live handle from [`hst_dataset_load`] or null.
 */
uintptr_t hst_dataset_len(const struct HstDataset *ds);

/**
 * Copy subject `idx`'s id into `buf` (see [`hst_last_error`] conventions).
 * Returns the id length, or 0 for a bad handle/index.
 *
 * # Safety
 * `ds` must be live; `buf` must hold `cap` writable bytes or be null.
 */
uintptr_t hst_dataset_subject_id(const struct HstDataset *ds,
                                 uintptr_t idx,
                                 char *buf,
                                 uintptr_t cap);

/**
 * Label of subject `idx` (or `i64::MIN` on a bad handle/index).
 *
 * # Safety
 * `ds` must be a live handle or null.
 */
int64_t hst_dataset_label(const struct HstDataset *ds, uintptr_t idx);

/**
 * Release a dataset handle. Null is a no-op.
 *
 * # Safety
 * Call at most once per handle.
 */
void hst_dataset_free(struct HstDataset *ds);

/**
 * Load a checkpoint from disk and rebuild the model it describes.
 *
 * # Safety
 * `ckpt_path` must be a null-terminated string; `out` must be valid.
 */
enum HstStatus hst_model_load(const char *ckpt_path, struct HstModelHandle **out);

/**
 * Release a model handle. Null is a no-op.
 *
 * # Safety
 * Call at most once per handle.
 */
void hst_model_free(struct HstModelHandle *m);

/**
 * Window length the model tokenizes with (0 on null).
 *
 * # Safety
 * `m` must be a live handle or null.
 */
uintptr_t hst_model_window(const struct HstModelHandle *m);

/**
 * Number of input channels the model expects (0 on null).
 *
 * # Safety
 * `m` must be a live handle or null.
 */
uintptr_t hst_model_channels(const struct HstModelHandle *m);

/**
 * First-level state vocabulary size (0 on null).
 *
 * # Safety
 * `m` must be a live handle or null.
 */
uintptr_t hst_model_k_state(const struct HstModelHandle *m);

/**
 * Tokenize a `t_len x channels` row-major series. The series is z-scored and
 * sliced into the model's windows; tokens for all full windows are written
 * sequentially. Call with null token buffers to query the required length
 * via `out_len`. Buffers shorter than the required length yield
 * `HST_STATUS_BUFFER_TOO_SMALL`.
 *
 * # Safety
 * `data` must hold `t_len * channels` doubles; each non-null token buffer
 * must hold `cap` entries; `out_len` must be valid.
 */
enum HstStatus hst_model_tokenize(const struct HstModelHandle *m,
                                  const double *data,
                                  uintptr_t t_len,
                                  uintptr_t channels,
                                  uint32_t *state_tokens,
                                  uint32_t *transition_tokens,
                                  uintptr_t cap,
                                  uintptr_t *out_len);

/**
 * Reconstruct the first window of a series; writes the `W x channels`
 * reconstruction (row-major) plus the window's Pearson r and MSE.
 *
 * # Safety
 * `data` must hold `t_len * channels` doubles; `out_xhat` (if non-null) must
 * hold `W * channels` doubles; `out_r` / `out_mse` (if non-null) one double.
 */
enum HstStatus hst_model_reconstruct_first_window(const struct HstModelHandle *m,
                                                  const double *data,
                                                  uintptr_t t_len,
                                                  uintptr_t channels,
                                                  double *out_xhat,
                                                  double *out_r,
                                                  double *out_mse);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HST_H */
