#ifndef MODERNN_H
#define MODERNN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ModernnStatus {
  MODERNN_STATUS_OK = 0,
  MODERNN_STATUS_NULL_POINTER = 1,
  MODERNN_STATUS_INVALID_ARGUMENT = 2,
  MODERNN_STATUS_CONFIG = 3,
  MODERNN_STATUS_CONTRACT = 4,
  MODERNN_STATUS_SHAPE = 5,
  MODERNN_STATUS_FORMAT = 6,
  MODERNN_STATUS_IO = 7,
  MODERNN_STATUS_NON_FINITE = 8,
  MODERNN_STATUS_PANIC = 9,
} ModernnStatus;

/**
 * Opaque dataset handle.
 */
typedef struct ModernnDataset ModernnDataset;

/**
 * Opaque model handle.
 */
typedef struct ModernnModel ModernnModel;

typedef struct ModernnDatasetInfo {
  size_t count;
  size_t seq_len;
  size_t height;
  size_t width;
  size_t channels;
} ModernnDatasetInfo;

typedef struct ModernnModelInfo {
  size_t input_len;
  size_t pred_len;
  size_t channels;
  size_t height;
  size_t width;
  size_t parameters;
} ModernnModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *modernn_last_error(void);

/**
 * Generate `count` sequences from `key = value` config text (may be null
 * for defaults).
 *
 * # Safety
 * `config_text` must be null or a valid C string; `out` must be writable.
 */
enum ModernnStatus modernn_dataset_generate(const char *config_text,
                                            size_t count,
                                            struct ModernnDataset **out);

/**
 * # Safety
 * `path` must be a valid C string; `out` must be writable.
 */
enum ModernnStatus modernn_dataset_load(const char *path, struct ModernnDataset **out);

/**
 * # Safety
 * `data` must be a live handle and `path` a valid C string.
 */
enum ModernnStatus modernn_dataset_save(const struct ModernnDataset *data, const char *path);

/**
 * Number of sequences; 0 for a null handle.
 *
 * # Safety
 * `data` must be null or a live handle.
 */
size_t modernn_dataset_len(const struct ModernnDataset *data);

/**
 * # Safety
 * `data` must be a live handle; `out` must be writable.
 */
enum ModernnStatus modernn_dataset_info(const struct ModernnDataset *data,
                                        struct ModernnDatasetInfo *out);

/**
 * Copy sequence `index`: its mode label and `seq_len·H·W·C` raw pixels.
 *
 * # Safety
 * `data` must be a live handle; `label` writable; `frames` writable for
 * `frames_len` bytes.
 */
enum ModernnStatus modernn_dataset_sequence(const struct ModernnDataset *data,
                                            size_t index,
                                            uint8_t *label,
                                            uint8_t *frames,
                                            size_t frames_len);

/**
 * # Safety
 * `data` must be null or a handle not yet freed.
 */
void modernn_dataset_free(struct ModernnDataset *data);

/**
 * Load a model from a checkpoint file.
 *
 * # Safety
 * `path` must be a valid C string; `out` must be writable.
 */
enum ModernnStatus modernn_model_load(const char *path, struct ModernnModel **out);

/**
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum ModernnStatus modernn_model_info(const struct ModernnModel *model,
                                      struct ModernnModelInfo *out);

/**
 * Predict the horizon of sequence `index` into `out`
 * (`pred_len·C·H·W` values in `[0, 1]`, frame-major).
 *
 * # Safety
 * Handles must be live; `out` writable for `out_len` doubles.
 */
enum ModernnStatus modernn_model_predict(const struct ModernnModel *model,
                                         const struct ModernnDataset *data,
                                         size_t index,
                                         double *out,
                                         size_t out_len);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void modernn_model_free(struct ModernnModel *model);

/**
 * Per-pixel mean squared error of two `n`-value buffers.
 *
 * # Safety
 * `a` and `b` must be readable for `n` doubles; `out` writable.
 */
enum ModernnStatus modernn_mse(const double *a, const double *b, size_t n, double *out);

/**
 * PSNR in dB; `+inf` for identical inputs.
 *
 * # Safety
 * As for [`modernn_mse`].
 */
enum ModernnStatus modernn_psnr(const double *a,
                                const double *b,
                                size_t n,
                                double peak,
                                double *out);

/**
 * Gaussian-window SSIM of two `h×w` images on a `0..=255` scale.
 *
 * # Safety
 * `a` and `b` must be readable for `h·w` doubles; `out` writable.
 */
enum ModernnStatus modernn_ssim(const double *a, const double *b, size_t h, size_t w, double *out);

/**
 * Critical success index at `threshold`. `degenerate` (may be null) is set
 * to 1 when neither map has an event, in which case the value is 1.0.
 *
 * # Safety
 * `a`, `b` readable for `n` doubles; `out` writable.
 */
enum ModernnStatus modernn_csi(const double *pred,
                               const double *target,
                               size_t n,
                               double threshold,
                               double *out,
                               int32_t *degenerate);

/**
 * A-distance between row-major feature matrices `a` (`na×dim`) and
 * `b` (`nb×dim`) with the default linear probe.
 *
 * # Safety
 * `a`, `b` readable for `na·dim` and `nb·dim` doubles; `d_a` writable;
 * `epsilon` may be null.
 */
enum ModernnStatus modernn_a_distance(const double *a,
                                      size_t na,
                                      const double *b,
                                      size_t nb,
                                      size_t dim,
                                      uint64_t seed,
                                      double *d_a,
                                      double *epsilon);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* MODERNN_H */
