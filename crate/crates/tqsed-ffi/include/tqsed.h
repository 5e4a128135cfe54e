#ifndef TQSED_H
#define TQSED_H

/* Generated by cbindgen from the tqsed-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every API call.
 */
typedef enum {
  TQSED_STATUS_OK = 0,
  /**
   * Null pointer or malformed argument.
   */
  TQSED_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Input violated a precondition (length, sample rate, unknown query).
   */
  TQSED_STATUS_INVALID_INPUT = 2,
  /**
   * Checkpoint missing, corrupt or of an unknown format tag.
   */
  TQSED_STATUS_CHECKPOINT = 3,
  /**
   * Internal failure; message has details.
   */
  TQSED_STATUS_INTERNAL = 4,
} TqsedStatus;

/**
 * Opaque separator: a frozen model plus its text encoder.
 */
typedef struct TqsedSeparator TqsedSeparator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the most recent error message for this thread into `buf`
 * (truncated, always NUL-terminated). Returns the full message length.
 *
 * # Safety
 * `buf` must point to at least `cap` writable bytes, or be null (in which
 * case only the length is returned).
 */
uintptr_t tqsed_last_error_message(char *buf, uintptr_t cap);

/**
 * Library version as a static NUL-terminated string.
 */
const char *tqsed_version(void);

/**
 * Loads a separation checkpoint. On success writes a handle to `out`.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` must be a valid
 * pointer to a handle slot.
 */
TqsedStatus tqsed_separator_load(const char *path, TqsedSeparator **out);

/**
 * Frees a handle returned by [`tqsed_separator_load`]. Null is a no-op.
 *
 * # Safety
 * `handle` must originate from `tqsed_separator_load` and not be used again.
 */
void tqsed_separator_free(TqsedSeparator *handle);

/**
 * Sample rate the loaded separator expects.
 *
 * # Safety
 * `handle` must be a live separator handle.
 */
uint32_t tqsed_separator_sample_rate(const TqsedSeparator *handle);

/**
 * Separates the track described by `query` from `samples` (mono, f64, at
 * the model sample rate) into the caller-allocated `out` buffer of the
 * same length. Length is preserved exactly.
 *
 * # Safety
 * `samples` and `out` must each point to `len` readable/writable f64s;
 * `query` must be a NUL-terminated UTF-8 string; `handle` must be live.
 */
TqsedStatus tqsed_separate(const TqsedSeparator *handle,
                           const double *samples,
                           uintptr_t len,
                           uint32_t sample_rate,
                           const char *query,
                           double *out);

/**
 * Number of queries the separator's encoder knows; labels are retrieved
 * with [`tqsed_separator_query_label`].
 *
 * # Safety
 * `handle` must be a live separator handle.
 */
uintptr_t tqsed_separator_query_count(const TqsedSeparator *handle);

/**
 * Copies the idx-th known query label into `buf` (NUL-terminated,
 * truncated to `cap`). Returns the full label length, or 0 when out of
 * range.
 *
 * # Safety
 * `handle` must be live; `buf` must point to `cap` writable bytes.
 */
uintptr_t tqsed_separator_query_label(const TqsedSeparator *handle,
                                      uintptr_t idx,
                                      char *buf,
                                      uintptr_t cap);

/**
 * Signal-to-distortion ratio in dB (clamped to +-100).
 *
 * # Safety
 * `est` and `reference` must point to `len` readable f64s; `out` must be
 * writable.
 */
TqsedStatus tqsed_sdr(const double *est, const double *reference, uintptr_t len, double *out);

/**
 * Scale-invariant SDR in dB (clamped to +-100).
 *
 * # Safety
 * As [`tqsed_sdr`].
 */
TqsedStatus tqsed_si_sdr(const double *est, const double *reference, uintptr_t len, double *out);

/**
 * SDR improvement of `est` over `mixture`, both against `reference`.
 *
 * # Safety
 * All three buffers must point to `len` readable f64s; `out` writable.
 */
TqsedStatus tqsed_sdri(const double *est,
                       const double *reference,
                       const double *mixture,
                       uintptr_t len,
                       double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TQSED_H */
