#ifndef VOV3D_H
#define VOV3D_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum Vov3dSize {
  VOV3D_SIZE_M = 0,
  VOV3D_SIZE_L = 1,
} Vov3dSize;

typedef enum Vov3dStatus {
  VOV3D_STATUS_OK = 0,
  VOV3D_STATUS_NULL_POINTER = 1,
  VOV3D_STATUS_INVALID_ARGUMENT = 2,
  VOV3D_STATUS_SHAPE_MISMATCH = 3,
  VOV3D_STATUS_IO = 4,
  VOV3D_STATUS_FORMAT = 5,
  VOV3D_STATUS_NON_FINITE = 6,
  VOV3D_STATUS_BUFFER_TOO_SMALL = 7,
  VOV3D_STATUS_PANIC = 8,
} Vov3dStatus;

/**
 * Bottleneck core factorization.
 */
typedef enum Vov3dVariant {
  VOV3D_VARIANT_BOTTLENECK = 0,
  VOV3D_VARIANT_R21D = 1,
  VOV3D_VARIANT_DW_BOTTLENECK = 2,
  VOV3D_VARIANT_D12D = 3,
  VOV3D_VARIANT_D21D = 4,
} Vov3dVariant;

/**
 * Opaque network handle.
 */
typedef struct Vov3dModel Vov3dModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into this library on the same thread.
 */
const char *vov3d_last_error(void);

/**
 * Full-size network with `classes` outputs and random weights.
 */
enum Vov3dStatus vov3d_model_new(enum Vov3dSize size,
                                 enum Vov3dVariant variant,
                                 size_t classes,
                                 uint64_t seed,
                                 struct Vov3dModel **out);

/**
 * Desk-scale network.
 */
enum Vov3dStatus vov3d_model_new_tiny(enum Vov3dVariant variant,
                                      size_t classes,
                                      uint64_t seed,
                                      struct Vov3dModel **out);

/**
 * Network from an architecture description in TOML.
 */
enum Vov3dStatus vov3d_model_from_config(const char *config,
                                         uint64_t seed,
                                         struct Vov3dModel **out);

void vov3d_model_free(struct Vov3dModel *model);

enum Vov3dStatus vov3d_model_num_params(const struct Vov3dModel *model, uint64_t *out);

enum Vov3dStatus vov3d_model_num_classes(const struct Vov3dModel *model, size_t *out);

/**
 * Widest temporal receptive field of the pre-pool features, in frames.
 */
enum Vov3dStatus vov3d_model_max_trf(const struct Vov3dModel *model, size_t *out);

/**
 * Eval-mode logits for a batch laid out `n x c x t x h x w` (row-major).
 * `logits` receives `n x classes` values.
 */
enum Vov3dStatus vov3d_model_infer(const struct Vov3dModel *model,
                                   const double *input,
                                   size_t n,
                                   size_t c,
                                   size_t t,
                                   size_t h,
                                   size_t w,
                                   double *logits,
                                   size_t logits_len);

enum Vov3dStatus vov3d_model_save_weights(const struct Vov3dModel *model, const char *path);

enum Vov3dStatus vov3d_model_load_weights(struct Vov3dModel *model, const char *path);

/**
 * Parameter count and comparable FLOPs (1 MAC = 1 FLOP) of a full-size
 * network at one `frames x spatial x spatial` clip.
 */
enum Vov3dStatus vov3d_model_cost(enum Vov3dSize size,
                                  enum Vov3dVariant variant,
                                  size_t frames,
                                  size_t spatial,
                                  uint64_t *params,
                                  uint64_t *flops);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VOV3D_H */
