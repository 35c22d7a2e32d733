#ifndef RESIDCERT_H
#define RESIDCERT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes of every fallible call.
 */
typedef enum RcStatus {
  RC_STATUS_OK = 0,
  RC_STATUS_NULL_POINTER = 1,
  RC_STATUS_INVALID_ARGUMENT = 2,
  RC_STATUS_IO = 3,
  RC_STATUS_FORMAT = 4,
  RC_STATUS_DIGEST_MISMATCH = 5,
  RC_STATUS_SHAPE = 6,
  RC_STATUS_NUMERIC = 7,
  RC_STATUS_PANIC = 8,
} RcStatus;

/**
 * Certificate kinds accepted by [`rc_verify`].
 */
typedef enum RcCertKind {
  RC_CERT_KIND_BLOCK = 0,
  RC_CERT_KIND_MODEL = 1,
  RC_CERT_KIND_EDIT = 2,
} RcCertKind;

/**
 * An extracted residual block loaded from a tensor archive.
 */
typedef struct RcBlock RcBlock;

/**
 * The outcome of verifying one certificate.
 */
typedef struct RcReport RcReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failing call on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *rc_last_error(void);

/**
 * Interpreter version string (static; do not free).
 */
const char *rc_interpreter_version(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must be NULL or a pointer returned by this library and not yet freed.
 */
void rc_string_free(char *s);

/**
 * `Σ_i ε_i · Π_{j>i} L_j` over `n` layers.
 *
 * # Safety
 * `epsilons` and `lipschitz` must point to `n` readable doubles (either may be
 * NULL when `n == 0`); `out` must be writable.
 */
enum RcStatus rc_global_bound(const double *epsilons,
                              const double *lipschitz,
                              size_t n,
                              double *out);

/**
 * `(1 + k_attn) · k_mlp`.
 *
 * # Safety
 * `out` must be writable.
 */
enum RcStatus rc_hybrid_block_bound(double k_attn, double k_mlp, double *out);

/**
 * SHA-256 of a file as lowercase hex, written to `*out_hex` (free with
 * [`rc_string_free`]).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out_hex` must be writable.
 */
enum RcStatus rc_digest_file(const char *path, char **out_hex);

/**
 * Loads a block archive into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum RcStatus rc_block_open(const char *path, struct RcBlock **out);

/**
 * # Safety
 * `block` must be NULL or a handle from [`rc_block_open`] not yet freed.
 */
void rc_block_free(struct RcBlock *block);

/**
 * Residual width of the block (0 for NULL).
 *
 * # Safety
 * `block` must be NULL or a live handle.
 */
size_t rc_block_d_model(const struct RcBlock *block);

/**
 * Longest sequence the block's mask and position tables cover (0 for NULL).
 *
 * # Safety
 * `block` must be NULL or a live handle.
 */
size_t rc_block_t_max(const struct RcBlock *block);

/**
 * Replays the block on `t` tokens: `x_in` and `x_out` are row-major
 * `t × d_model` float arrays.
 *
 * # Safety
 * `block` must be a live handle; `x_in` must hold `t·d_model` readable floats
 * and `x_out` `t·d_model` writable floats.
 */
enum RcStatus rc_block_interpret(const struct RcBlock *block,
                                 const float *x_in,
                                 size_t t,
                                 float *x_out);

/**
 * Verifies a certificate against an artifact directory and stores the
 * report in `*out`. A completed verification returns `RC_STATUS_OK` whether
 * or not it passed; query [`rc_report_passed`].
 *
 * # Safety
 * `certificate` and `artifacts` must be NUL-terminated strings; `out` must be
 * writable.
 */
enum RcStatus rc_verify(enum RcCertKind kind,
                        const char *certificate,
                        const char *artifacts,
                        double rel_tol,
                        double abs_tol,
                        struct RcReport **out);

/**
 * True iff every check passed (false for NULL).
 *
 * # Safety
 * `report` must be NULL or a live handle.
 */
bool rc_report_passed(const struct RcReport *report);

/**
 * The report as JSON, written to `*out_json` (free with [`rc_string_free`]).
 *
 * # Safety
 * `report` must be a live handle; `out_json` must be writable.
 */
enum RcStatus rc_report_json(const struct RcReport *report, char **out_json);

/**
 * # Safety
 * `report` must be NULL or a handle from [`rc_verify`] not yet freed.
 */
void rc_report_free(struct RcReport *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RESIDCERT_H */
