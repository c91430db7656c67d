#ifndef MERIT_H
#define MERIT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Values are stable.
 */
typedef enum {
  MERIT_STATUS_OK = 0,
  MERIT_STATUS_OUT_OF_RANGE = 1,
  MERIT_STATUS_BAD_MAGIC = 2,
  MERIT_STATUS_TRUNCATED_PAYLOAD = 3,
  MERIT_STATUS_UNKNOWN_DTYPE = 4,
  MERIT_STATUS_NEGATIVE_STRIDE = 5,
  MERIT_STATUS_LUT_RANGE = 6,
  MERIT_STATUS_DIV_BY_ZERO = 7,
  MERIT_STATUS_SCRATCHPAD_OVERFLOW = 8,
  MERIT_STATUS_OUT_OF_FOOTPRINT = 9,
  MERIT_STATUS_INDIVISIBLE = 10,
  MERIT_STATUS_UNKNOWN_TEMPLATE = 11,
  MERIT_STATUS_BAD_PARAMS = 12,
  MERIT_STATUS_INVALID_PERMUTATION = 13,
  MERIT_STATUS_INVALID_PROGRAM = 14,
  MERIT_STATUS_INVALID_SPEC = 15,
  MERIT_STATUS_SHAPE_MISMATCH = 16,
  MERIT_STATUS_INVALID_TILING = 17,
  MERIT_STATUS_IO = 18,
  MERIT_STATUS_JSON = 19,
  MERIT_STATUS_NULL_POINTER = 20,
  MERIT_STATUS_INVALID_UTF8 = 21,
  MERIT_STATUS_BUFFER_TOO_SMALL = 22,
  MERIT_STATUS_PANIC = 23,
} MeritStatus;

/**
 * Opaque tensor handle.
 */
typedef struct MeritTensor MeritTensor;

/**
 * Opaque workload handle: two sources, two views and a program.
 */
typedef struct MeritWorkload MeritWorkload;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *merit_last_error(void);

/**
 * Frees a string returned by this library.
 */
void merit_string_free(char *s);

MeritStatus merit_tensor_from_f32(const size_t *shape,
                                  size_t rank,
                                  const float *data,
                                  size_t len,
                                  MeritTensor **out);

MeritStatus merit_tensor_from_fix16(const size_t *shape,
                                    size_t rank,
                                    uint8_t frac_bits,
                                    const int16_t *data,
                                    size_t len,
                                    MeritTensor **out);

/**
 * Reads an MRT1 tensor file.
 */
MeritStatus merit_tensor_read(const char *path, MeritTensor **out);

MeritStatus merit_tensor_write(const MeritTensor *t, const char *path);

size_t merit_tensor_rank(const MeritTensor *t);

size_t merit_tensor_len(const MeritTensor *t);

/**
 * On-disk dtype code: 0 for REAL32, 1 for FIX16.
 */
uint8_t merit_tensor_dtype(const MeritTensor *t);

/**
 * Copies the shape into `out`, which holds `cap` entries.
 */
MeritStatus merit_tensor_shape(const MeritTensor *t, size_t *out, size_t cap);

/**
 * Copies the elements as real numbers (FIX16 is dequantized).
 */
MeritStatus merit_tensor_values(const MeritTensor *t, double *out, size_t cap);

void merit_tensor_free(MeritTensor *t);

/**
 * Footprint of a `(t_p, t_a)` tile under a view given as JSON. Writes one
 * extent per source axis into `per_axis` and the word count into `words`.
 */
MeritStatus merit_view_footprint(const char *view_json,
                                 const size_t *t_p,
                                 size_t n_p,
                                 const size_t *t_a,
                                 size_t n_a,
                                 size_t *per_axis,
                                 size_t cap,
                                 uint64_t *words);

/**
 * Builds a workload from a named template with random inputs.
 */
MeritStatus merit_workload_from_template(const char *name,
                                         const char *params,
                                         uint64_t seed,
                                         MeritWorkload **out);

/**
 * Builds a workload from two tensors, two JSON views and a JSON program.
 * The tensors are copied; the caller still owns them.
 */
MeritStatus merit_workload_new(const MeritTensor *src_a,
                               const MeritTensor *src_b,
                               const char *view_a_json,
                               const char *view_b_json,
                               const char *program_json,
                               MeritWorkload **out);

MeritStatus merit_workload_run_full(const MeritWorkload *w, MeritTensor **out);

/**
 * Tiled execution with unbounded scratchpads. `report_json`, when not
 * NULL, receives the traffic report; free it with [`merit_string_free`].
 */
MeritStatus merit_workload_run_tiled(const MeritWorkload *w,
                                     const size_t *t_p,
                                     size_t n_p,
                                     const size_t *t_a,
                                     size_t n_a,
                                     MeritTensor **out,
                                     char **report_json);

void merit_workload_free(MeritWorkload *w);

/**
 * Bank-conflict analysis of the address pattern `coeffs` over `banks`
 * banks. `addr_bits` of 0 picks the default. The JSON report goes to
 * `report_json`; `reducible` is set when the pattern (or its hash)
 * reduces to identity.
 */
MeritStatus merit_banks_analyze(const uint64_t *coeffs,
                                size_t n,
                                size_t banks,
                                size_t addr_bits,
                                bool search_hash,
                                bool *reducible,
                                char **report_json);

/**
 * Whether the butterfly network can deliver bank line `perm[i]` to ALU `i`
 * for all `n` ALUs in one pass.
 */
MeritStatus merit_route(size_t n, const size_t *perm, bool *routed);

/**
 * `macs / (in_words + out_words)`.
 */
MeritStatus merit_reuse_rate(double macs, double in_words, double out_words, double *rate);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MERIT_H */
