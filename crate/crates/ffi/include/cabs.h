#ifndef CABS_H
#define CABS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. Values 2..=5 match the CLI exit codes.
 */
typedef enum CabsStatus {
  CABS_STATUS_OK = 0,
  CABS_STATUS_VALIDATION = 2,
  CABS_STATUS_IO = 3,
  CABS_STATUS_EVALUATOR = 4,
  CABS_STATUS_INVARIANT = 5,
  CABS_STATUS_NULL_ARGUMENT = 10,
  CABS_STATUS_INVALID_UTF8 = 11,
  CABS_STATUS_BUFFER_SIZE = 12,
  CABS_STATUS_PANIC = 13,
} CabsStatus;

/**
 * An open checkpoint.
 */
typedef struct CabsCheckpoint CabsCheckpoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until the
 * next call into this library on the same thread.
 */
const char *cabs_last_error_message(void);

/**
 * Release a string returned by this library.
 *
 * # Safety
 * `s` must be NULL or a pointer obtained from this library, freed once.
 */
void cabs_string_free(char *s);

/**
 * Open a safetensors checkpoint. Only the header is read.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CabsStatus cabs_checkpoint_open(const char *path, struct CabsCheckpoint **out);

/**
 * # Safety
 * `ckpt` must be NULL or a handle from [`cabs_checkpoint_open`], freed once.
 */
void cabs_checkpoint_free(struct CabsCheckpoint *ckpt);

/**
 * Number of tensors, or 0 for a NULL handle.
 *
 * # Safety
 * `ckpt` must be NULL or a live handle.
 */
size_t cabs_checkpoint_tensor_count(const struct CabsCheckpoint *ckpt);

/**
 * Name of tensor `index` in header order. The string is owned by the handle.
 *
 * # Safety
 * `ckpt` must be a live handle; `out` must be writable.
 */
enum CabsStatus cabs_checkpoint_tensor_name(const struct CabsCheckpoint *ckpt,
                                            size_t index,
                                            const char **out);

/**
 * Element count of a tensor.
 *
 * # Safety
 * `ckpt` must be a live handle, `name` NUL-terminated, `out` writable.
 */
enum CabsStatus cabs_checkpoint_tensor_numel(const struct CabsCheckpoint *ckpt,
                                             const char *name,
                                             size_t *out);

/**
 * Read a floating tensor widened to F32 into `out[0..len]`; `len` must equal
 * the element count.
 *
 * # Safety
 * `ckpt` must be a live handle, `name` NUL-terminated, `out` valid for `len`
 * floats.
 */
enum CabsStatus cabs_checkpoint_read_f32(const struct CabsCheckpoint *ckpt,
                                         const char *name,
                                         float *out,
                                         size_t len);

/**
 * Validate a recipe given as JSON text. Writes a JSON array of violation
 * strings (empty when valid) to `violations_json`. Returns `Validation` if
 * the text is not a recipe at all.
 *
 * # Safety
 * `recipe_json` must be NUL-terminated; `violations_json` writable.
 */
enum CabsStatus cabs_recipe_validate(const char *recipe_json, char **violations_json);

/**
 * Run a merge recipe file. On success writes the run report JSON to
 * `report_json` (may be NULL to discard it).
 *
 * # Safety
 * `path` must be NUL-terminated; `report_json` NULL or writable.
 */
enum CabsStatus cabs_run_recipe_file(const char *path, char **report_json);

/**
 * Balanced n:m mask. Blocks run along rows of length `row_len` (pass `len`
 * for a flat tensor).
 *
 * # Safety
 * `values` valid for `len` floats, `mask_out` for `len` bytes.
 */
enum CabsStatus cabs_prune_nm(const float *values,
                              size_t len,
                              size_t row_len,
                              size_t n,
                              size_t m,
                              uint8_t *mask_out);

/**
 * Layer-wise magnitude mask keeping `ceil(keep_fraction * len)` entries.
 *
 * # Safety
 * `values` valid for `len` floats, `mask_out` for `len` bytes.
 */
enum CabsStatus cabs_prune_magnitude(const float *values,
                                     size_t len,
                                     double keep_fraction,
                                     uint8_t *mask_out);

/**
 * Conflict-aware n:m masks for `count` vectors of `len` elements each,
 * pruned in array order. `vectors[i]` and `masks_out[i]` point to the i-th
 * input and output buffer.
 *
 * # Safety
 * `vectors` and `masks_out` valid for `count` pointers, each valid for `len`
 * elements.
 */
enum CabsStatus cabs_ca_nm(const float *const *vectors,
                           size_t count,
                           size_t len,
                           size_t row_len,
                           size_t n,
                           size_t m,
                           uint8_t *const *masks_out);

/**
 * Overlap rate of byte mask `a` against `b`: shared / kept(a).
 *
 * # Safety
 * `a`, `b` valid for `len` bytes; `out` writable.
 */
enum CabsStatus cabs_overlap_rate(const uint8_t *a, const uint8_t *b, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CABS_H */
