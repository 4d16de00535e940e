#ifndef SELORA_H
#define SELORA_H

/* Generated by cbindgen from crates/selora-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status code returned by every FFI entry point.
typedef enum SeloraStatus {
  // Success; output parameters are valid.
  SELORA_STATUS_OK = 0,
  // A required pointer argument was null.
  SELORA_STATUS_NULL_ARGUMENT = 1,
  // An argument was outside its valid range (bad rank, bad UTF-8 id, ...).
  SELORA_STATUS_INVALID_ARGUMENT = 2,
  // Array dimensions disagreed with the handle or with each other.
  SELORA_STATUS_SHAPE_MISMATCH = 3,
  // Expansion was refused because the adapter sits at its rank cap.
  SELORA_STATUS_RANK_CAP_REACHED = 4,
  // The library panicked; the handle may be in an inconsistent state
  // and should be freed.
  SELORA_STATUS_PANIC = 5,
} SeloraStatus;

// Opaque adapter handle: one wrapped linear layer plus the RNG stream that
// drives its expansions. Create with `selora_adapter_new`, destroy with
// `selora_adapter_free`.
typedef struct SeloraAdapter SeloraAdapter;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent non-`Ok` status on this thread, empty if
// none. The pointer stays valid until the next failing call on the same
// thread; copy the string if it must outlive that.
const char *selora_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *selora_version(void);

// Create a rank-1 adapter around a frozen `d_in x d_out` base weight and a
// `d_out`-vector bias. `seed` fixes both the factor initialization and the
// handle's expansion stream: equal inputs give bit-identical adapters.
//
// # Safety
// `layer_id` must be a NUL-terminated string; `w0` must point to
// `d_in * d_out` doubles and `b0` to `d_out` doubles; `out` must be a valid
// destination for one pointer.
enum SeloraStatus selora_adapter_new(const char *layer_id,
                                     const double *w0,
                                     const double *b0,
                                     size_t d_in,
                                     size_t d_out,
                                     uint64_t seed,
                                     struct SeloraAdapter **out);

// Destroy a handle. A null pointer is a no-op.
//
// # Safety
// `adapter` must be null or a pointer from `selora_adapter_new` that has
// not been freed.
void selora_adapter_free(struct SeloraAdapter *adapter);

// Current rank.
//
// # Safety
// `adapter` must be a live handle; `out` must be writable.
enum SeloraStatus selora_adapter_rank(const struct SeloraAdapter *adapter, size_t *out);

// Input and output widths of the wrapped layer.
//
// # Safety
// `adapter` must be a live handle; `d_in` and `d_out` must be writable.
enum SeloraStatus selora_adapter_dims(const struct SeloraAdapter *adapter,
                                      size_t *d_in,
                                      size_t *d_out);

// Number of trainable scalars, `rank * (d_in + d_out)`.
//
// # Safety
// `adapter` must be a live handle; `out` must be writable.
enum SeloraStatus selora_adapter_trainable_params(const struct SeloraAdapter *adapter, size_t *out);

// Cap the rank. Expansion attempts at the cap return `RankCapReached`.
// Rejects caps below the current rank.
//
// # Safety
// `adapter` must be a live handle.
enum SeloraStatus selora_adapter_set_max_rank(struct SeloraAdapter *adapter, size_t max_rank);

// Apply the adapted layer to `n_rows` input rows: writes
// `x W0 + (x A) B + b0`, an `n_rows x d_out` row-major array, into `out`.
//
// # Safety
// `adapter` must be a live handle; `x` must point to `n_rows * d_in`
// doubles and `out` to `n_rows * d_out` writable doubles.
enum SeloraStatus selora_adapter_forward(const struct SeloraAdapter *adapter,
                                         const double *x,
                                         size_t n_rows,
                                         double *out);

// Grow the rank by one: a fresh Kaiming column on A, a zero row on B, so
// the layer's function is unchanged. Draws from the handle's seeded stream;
// the new rank is written to `new_rank` when non-null.
//
// # Safety
// `adapter` must be a live handle; `new_rank` must be null or writable.
enum SeloraStatus selora_adapter_expand(struct SeloraAdapter *adapter, size_t *new_rank);

// Collapse the adapter into a single effective weight,
// `W0 + scale * (A B)`, written as a `d_in x d_out` row-major array.
//
// # Safety
// `adapter` must be a live handle; `out` must point to `d_in * d_out`
// writable doubles.
enum SeloraStatus selora_adapter_merge_weights(const struct SeloraAdapter *adapter, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SELORA_H */
