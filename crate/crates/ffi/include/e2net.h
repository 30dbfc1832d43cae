#ifndef E2NET_H
#define E2NET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Which object an edge distance map describes.
 */
typedef enum E2nObject {
  E2N_LIVER = 0,
  E2N_TUMOR = 1,
} E2nObject;

typedef enum E2nStatus {
  E2N_OK = 0,
  /**
   * A required pointer argument was null.
   */
  E2N_ERR_NULL = 1,
  /**
   * Bad shapes, values or configuration.
   */
  E2N_ERR_VALIDATION = 2,
  /**
   * File system failure, including a missing checkpoint.
   */
  E2N_ERR_IO = 3,
  /**
   * Unreadable or incompatible checkpoint.
   */
  E2N_ERR_CHECKPOINT = 4,
  /**
   * Failure during inference, e.g. non-finite network output.
   */
  E2N_ERR_RUNTIME = 5,
  /**
   * A Rust panic was caught; the handle should be discarded.
   */
  E2N_ERR_PANIC = 6,
} E2nStatus;

/**
 * Opaque handle: a stage-1 and a stage-2 model plus inference options.
 */
typedef struct E2nPipeline E2nPipeline;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *e2n_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *e2n_version(void);

/**
 * Loads two checkpoints into a new pipeline written to `*out`.
 *
 * # Safety
 * The paths must be NUL-terminated strings; `out` must be writable.
 */
enum E2nStatus e2n_pipeline_load(const char *stage1_path,
                                 const char *stage2_path,
                                 struct E2nPipeline **out);

/**
 * Releases a pipeline. Null is ignored.
 *
 * # Safety
 * `p` must come from [`e2n_pipeline_load`] and not be used afterwards.
 */
void e2n_pipeline_free(struct E2nPipeline *p);

/**
 * Sets the probability threshold (default 0.5) used for both heads.
 *
 * # Safety
 * `p` must be a live pipeline.
 */
enum E2nStatus e2n_pipeline_set_threshold(struct E2nPipeline *p, float threshold);

/**
 * Segments a raw-HU volume of `depth × height × width` voxels. Writes
 * labels 0 (background), 1 (liver) or 2 (tumor) into `labels_out`, which
 * must hold the same number of elements. Spacing is taken as 1 mm.
 *
 * # Safety
 * `p` must be a live pipeline; the buffers must hold `depth·height·width`
 * elements.
 */
enum E2nStatus e2n_pipeline_segment(struct E2nPipeline *p,
                                    const float *hu,
                                    size_t depth,
                                    size_t height,
                                    size_t width,
                                    uint8_t *labels_out);

/**
 * Edge distance map of a binary `height × width` mask: 1 on the object
 * boundary falling to 0 at the deepest interior point, 0 outside.
 *
 * # Safety
 * `mask` and `out` must hold `height·width` elements.
 */
enum E2nStatus e2n_edge_distance_map(const uint8_t *mask,
                                     size_t height,
                                     size_t width,
                                     enum E2nObject object,
                                     double *out);

/**
 * Dice coefficient of two binary arrays of `n` elements (nonzero is set);
 * 1 when both are empty.
 *
 * # Safety
 * `a` and `b` must hold `n` elements; `out` must be writable.
 */
enum E2nStatus e2n_dice(const uint8_t *a, const uint8_t *b, size_t n, double *out);

/**
 * Clamps `n` HU values to the abdominal window and maps them onto [-1, 1].
 *
 * # Safety
 * `hu` and `out` must hold `n` elements; they may alias.
 */
enum E2nStatus e2n_window_normalize(const float *hu, size_t n, float *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* E2NET_H */
