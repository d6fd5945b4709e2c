/* C interface to the scalable-semantic-transfer inference path. */

#ifndef SST_H
#define SST_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum SstStatus {
  // Success.
  SST_STATUS_OK = 0,
  // A required pointer argument was null.
  SST_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8.
  SST_STATUS_INVALID_UTF8 = 2,
  // The request itself is wrong: bad path, unknown domain, malformed
  // input dimensions, malformed checkpoint.
  SST_STATUS_USAGE = 3,
  // The request was well-formed but execution failed.
  SST_STATUS_RUNTIME = 4,
  // An internal panic was caught at the boundary.
  SST_STATUS_PANIC = 5,
} SstStatus;

// A loaded model: checkpoint parameters plus its metadata.  Opaque.
typedef struct SstModel SstModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string; never null, never
// freed by the caller.
const char *sst_version(void);

// Retrieve the last error message recorded on this thread (snprintf
// convention; see the module docs).  Returns the full message length
// excluding the NUL.
//
// # Safety
// `buf` must be null or valid for `cap` bytes of writes.
uintptr_t sst_last_error(char *buf, uintptr_t cap);

// Load a checkpoint directory into a model handle.  On success `*out`
// owns the model; release it with `sst_model_free`.
//
// # Safety
// `path` must be a NUL-terminated string valid for reads; `out` must be
// valid for writes.
enum SstStatus sst_model_load(const char *path, struct SstModel **out);

// Release a model handle.  Null is a no-op.  The handle must not be used
// afterwards.
//
// # Safety
// `model` must be null or a pointer returned by `sst_model_load` that has
// not been freed yet.
void sst_model_free(struct SstModel *model);

// Total parameter count of the loaded model.
//
// # Safety
// `model` must be a live handle; `out` must be valid for writes.
enum SstStatus sst_model_num_params(const struct SstModel *model, uintptr_t *out);

// Number of domains the model carries a prediction head for.
//
// # Safety
// `model` must be a live handle; `out` must be valid for writes.
enum SstStatus sst_model_domain_count(const struct SstModel *model, uintptr_t *out);

// Name of the `index`-th domain head, in sorted order (snprintf
// convention; see the module docs).
//
// # Safety
// `model` must be a live handle; `buf` must be null or valid for `cap`
// bytes of writes; `out_len` must be null or valid for writes.
enum SstStatus sst_model_domain_name(const struct SstModel *model,
                                     uintptr_t index,
                                     char *buf,
                                     uintptr_t cap,
                                     uintptr_t *out_len);

// Hash of the domain registry this model was trained against (snprintf
// convention; see the module docs).  Predictions are only meaningful on
// data from a registry with the same hash.
//
// # Safety
// `model` must be a live handle; `buf` must be null or valid for `cap`
// bytes of writes; `out_len` must be null or valid for writes.
enum SstStatus sst_model_registry_hash(const struct SstModel *model,
                                       char *buf,
                                       uintptr_t cap,
                                       uintptr_t *out_len);

// Number of label classes predicted by `domain`'s head; this is the
// per-pixel label range `[0, n)` of `sst_predict` output.
//
// # Safety
// `model` must be a live handle; `domain` must be a NUL-terminated string
// valid for reads; `out` must be valid for writes.
enum SstStatus sst_model_num_labels(const struct SstModel *model,
                                    const char *domain,
                                    uintptr_t *out);

// Predict per-pixel labels for one image with `domain`'s head.
//
// `pixels` is interleaved 8-bit RGB, row-major, `height * width * 3`
// bytes.  `out_labels` receives `height * width` label indices.  Height
// and width must be multiples of the network's reduction factor (16) and
// at least one factor each.
//
// # Safety
// `model` must be a live handle; `domain` must be a NUL-terminated string
// valid for reads; `pixels` must be valid for `height * width * 3` bytes
// of reads; `out_labels` must be valid for `height * width` bytes of
// writes.
enum SstStatus sst_predict(const struct SstModel *model,
                           const char *domain,
                           const uint8_t *pixels,
                           uintptr_t height,
                           uintptr_t width,
                           uint8_t *out_labels);

// Strip the checkpoint at `src` down to the core network plus the heads
// named in `domains` (comma-separated) and write it to `dst`.  The export
// verifies that the stripped model's logits are bitwise identical to the
// full model's before writing.
//
// # Safety
// `src`, `domains` and `dst` must be NUL-terminated strings valid for
// reads.
enum SstStatus sst_export(const char *src, const char *domains, const char *dst);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* SST_H */
