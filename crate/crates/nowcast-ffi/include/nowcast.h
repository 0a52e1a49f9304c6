#ifndef NOWCAST_H
#define NOWCAST_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible call. `NC_OK` is zero; anything
 * else leaves a message readable through `nc_last_error`.
 */
typedef enum NcStatus {
  NcOk = 0,
  /**
   * A required pointer argument was null.
   */
  NcNullArgument = 1,
  /**
   * Argument outside its documented domain.
   */
  NcInvalidArgument = 2,
  /**
   * Filesystem failure.
   */
  NcIoError = 3,
  /**
   * File exists but is not a valid tensor or checkpoint.
   */
  NcFormatError = 4,
  /**
   * Tensor shapes do not fit the requested operation.
   */
  NcShapeError = 5,
  /**
   * Any other failure from the underlying library.
   */
  NcInternalError = 6,
} NcStatus;

/**
 * Opaque trained-model handle.
 */
typedef struct NcModel NcModel;

/**
 * Opaque rank-n f32 tensor handle.
 */
typedef struct NcTensor NcTensor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread. Valid until
 * the next failing call on the same thread; never null.
 */
const char *nc_last_error(void);

/**
 * Builds a tensor from a dims array and row-major data. `data` must hold
 * the product of `dims` floats.
 *
 * # Safety
 * `dims` must point to `rank` elements, `data` to their product, and `out`
 * must be a valid destination pointer.
 */
enum NcStatus nc_tensor_create(const uintptr_t *dims,
                               uintptr_t rank,
                               const float *data,
                               struct NcTensor **out);

/**
 * Reads a tensor file.
 *
 * # Safety
 * `path` must be a valid C string and `out` a valid destination pointer.
 */
enum NcStatus nc_tensor_read(const char *path, struct NcTensor **out);

/**
 * Writes a tensor file.
 *
 * # Safety
 * `path` must be a valid C string and `t` a live tensor handle.
 */
enum NcStatus nc_tensor_write(const char *path, const struct NcTensor *t);

/**
 * Number of axes.
 *
 * # Safety
 * `t` must be a live tensor handle.
 */
uintptr_t nc_tensor_rank(const struct NcTensor *t);

/**
 * Copies the axis lengths into `dims`, which must hold `nc_tensor_rank`
 * entries.
 *
 * # Safety
 * `t` must be a live tensor handle and `dims` sized to its rank.
 */
enum NcStatus nc_tensor_dims(const struct NcTensor *t, uintptr_t *dims);

/**
 * Total element count.
 *
 * # Safety
 * `t` must be a live tensor handle.
 */
uintptr_t nc_tensor_len(const struct NcTensor *t);

/**
 * Borrowed pointer to the row-major payload; valid while the handle lives.
 *
 * # Safety
 * `t` must be a live tensor handle.
 */
const float *nc_tensor_data(const struct NcTensor *t);

/**
 * Releases a tensor handle. Null is a no-op.
 *
 * # Safety
 * `t` must have come from this library and not be freed twice.
 */
void nc_tensor_free(struct NcTensor *t);

/**
 * Number of rainfall bins (6).
 */
uintptr_t nc_num_bins(void);

/**
 * Number of exceedance thresholds (5).
 */
uintptr_t nc_num_thresholds(void);

/**
 * Bin index of a rain rate under the default thresholds.
 *
 * # Safety
 * `bin_out` must be a valid destination pointer.
 */
enum NcStatus nc_quantize(float rate, uintptr_t *bin_out);

/**
 * Representative rain rate of a bin, or NaN for an out-of-range index.
 */
float nc_representative(uintptr_t bin);

/**
 * 1 if the rate strictly exceeds threshold `index` (0..=4), else 0; also 0
 * for an out-of-range index.
 */
int32_t nc_exceeds(float rate, uintptr_t index);

/**
 * Loads a checkpoint written by the `nowcast` trainer.
 *
 * # Safety
 * `path` must be a valid C string and `out` a valid destination pointer.
 */
enum NcStatus nc_model_load(const char *path, struct NcModel **out);

/**
 * Releases a model handle. Null is a no-op.
 *
 * # Safety
 * `m` must have come from `nc_model_load` and not be freed twice.
 */
void nc_model_free(struct NcModel *m);

/**
 * Runs the model on an input sequence tensor (frames, bands, h, w) and
 * returns the decoded rain-rate forecast (timesteps, h_out, w_out).
 *
 * # Safety
 * `m` and `inputs` must be live handles, `out` a valid destination pointer.
 */
enum NcStatus nc_model_predict(const struct NcModel *m,
                               const struct NcTensor *inputs,
                               struct NcTensor **out);

/**
 * Pools `count` prediction/truth tensor pairs into one confusion table.
 * `csi` and `f1` must hold `nc_num_thresholds` doubles each; any of the
 * output pointers may be null to skip that value.
 *
 * # Safety
 * `preds` and `truths` must point to `count` live tensor handles; non-null
 * outputs must be sized as documented.
 */
enum NcStatus nc_score(const struct NcTensor *const *preds,
                       const struct NcTensor *const *truths,
                       uintptr_t count,
                       double *csi,
                       double *f1,
                       double *mcsi,
                       double *mf1);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* NOWCAST_H */
