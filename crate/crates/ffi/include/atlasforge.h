#ifndef ATLASFORGE_H
#define ATLASFORGE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AfStatus {
  AF_OK = 0,
  AF_NULL_POINTER = 1,
  AF_INVALID_ARGUMENT = 2,
  AF_IO = 3,
  AF_DATA = 4,
  AF_NUMERICAL = 5,
  AF_PANIC = 6,
} AfStatus;

/*
 A trained atlas collection. Owned by the caller; release with
 [`af_atlas_free`].
 */
typedef struct AfAtlas AfAtlas;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread; empty after a success.
 The pointer stays valid until the next call on this thread.
 */
const char *af_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *af_version(void);

/*
 Loads a training checkpoint into a new handle stored in `*out`.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AfStatus af_atlas_load(const char *path, struct AfAtlas **out);

/*
 Releases a handle. Null is ignored.

 # Safety
 `atlas` must come from [`af_atlas_load`] and not be used afterwards.
 */
void af_atlas_free(struct AfAtlas *atlas);

/*
 # Safety
 `atlas` must be a live handle and `out` a valid pointer.
 */
enum AfStatus af_atlas_num_shapes(const struct AfAtlas *atlas, size_t *out);

/*
 Index of the shape called `name`.

 # Safety
 `atlas` must be a live handle, `name` NUL-terminated, `out` valid.
 */
enum AfStatus af_atlas_shape_index(const struct AfAtlas *atlas, const char *name, size_t *out);

/*
 Evaluates ϕ for `shape` at `n` domain points (`uv`, 2n values) in the
 normalized training frame. Writes 3n positions to `points` and, when
 `normals` is not null, 3n unit normals (zero where the Jacobian is
 degenerate).

 # Safety
 Buffers must hold the stated number of doubles.
 */
enum AfStatus af_atlas_eval_phi(const struct AfAtlas *atlas,
                                size_t shape,
                                const double *uv,
                                size_t n,
                                double *points,
                                double *normals);

/*
 Evaluates the chart map ψ for `shape` at `n` points with unit normals
 (3n values each, normalized frame). Writes 2n domain coordinates.

 # Safety
 Buffers must hold the stated number of doubles.
 */
enum AfStatus af_atlas_eval_psi(const struct AfAtlas *atlas,
                                size_t shape,
                                const double *points,
                                const double *normals,
                                size_t n,
                                double *uv);

/*
 Mixture density at `n` domain points (2n values); writes n values.

 # Safety
 Buffers must hold the stated number of doubles.
 */
enum AfStatus af_atlas_density(const struct AfAtlas *atlas,
                               const double *uv,
                               size_t n,
                               double *out);

/*
 Extracts the domain (threshold `tau`, or the default when `tau <= 0`;
 `resolution` nodes per axis), pushes it through ϕ of `shape` and writes
 an OBJ with UVs in the shape's original frame.

 # Safety
 `atlas` must be a live handle and `path` NUL-terminated.
 */
enum AfStatus af_atlas_export_mesh(const struct AfAtlas *atlas,
                                   size_t shape,
                                   double tau,
                                   size_t resolution,
                                   const char *path);

/*
 Transfers `n` points with normals (3n values each, original frame of
 `source`) to `target` through its chart map: `q = ϕ_target(ψ_source(p))`.
 Writes 3n values in the target's original frame.

 # Safety
 Buffers must hold the stated number of doubles.
 */
enum AfStatus af_atlas_correspond(const struct AfAtlas *atlas,
                                  size_t source,
                                  size_t target,
                                  const double *points,
                                  const double *normals,
                                  size_t n,
                                  double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ATLASFORGE_H */
