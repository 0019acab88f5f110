#ifndef PRIVLENS_H
#define PRIVLENS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PlStatus {
  PL_STATUS_OK = 0,
  PL_STATUS_INVALID_ARGUMENT = 1,
  PL_STATUS_INVALID_CONFIG = 2,
  PL_STATUS_UNKNOWN_ANALYSIS = 3,
  PL_STATUS_NOT_FOUND = 4,
  PL_STATUS_PACKAGE_REJECTED = 5,
  PL_STATUS_DEVICE_UNAVAILABLE = 6,
  PL_STATUS_SESSION_FAILED = 7,
  PL_STATUS_STORAGE_ERROR = 8,
  PL_STATUS_INTERNAL = 9,
  PL_STATUS_PANIC = 10,
} PlStatus;

/**
 * Opaque handle to an analysis store.
 */
typedef struct PlStore PlStore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. The pointer is
 * valid until the next call into the library on the same thread.
 */
const char *pl_last_error(void);

/**
 * # Safety
 * `s` must come from this library and must not be used afterwards.
 */
void pl_string_free(char *s);

/**
 * Opens (or creates) a store rooted at `root`.
 *
 * # Safety
 * `root` must be a NUL-terminated string; `out` must be writable.
 */
enum PlStatus pl_store_open(const char *root, struct PlStore **out);

/**
 * # Safety
 * `h` must come from [`pl_store_open`] and must not be used afterwards.
 */
void pl_store_free(struct PlStore *h);

/**
 * Stores an uploaded package and writes its id to `out_id`.
 *
 * # Safety
 * `data` must point to `len` readable bytes.
 */
enum PlStatus pl_store_put_app(const struct PlStore *h,
                               const char *file_name,
                               const uint8_t *data,
                               size_t len,
                               char **out_id);

/**
 * Runs an analysis described by a JSON config to completion and writes the
 * analysis id to `out_id`. A session that ends in Failed still yields its id
 * together with `PL_STATUS_SESSION_FAILED`.
 *
 * # Safety
 * Pointers must be valid as documented on the other functions.
 */
enum PlStatus pl_analysis_run(const struct PlStore *h, const char *config_json, char **out_id);

/**
 * Writes the report model of a completed analysis as JSON.
 *
 * # Safety
 * Pointers must be valid as documented on the other functions.
 */
enum PlStatus pl_analysis_report_json(const struct PlStore *h,
                                      const char *analysis_id,
                                      char **out_json);

/**
 * Decodes a payload with default limits and writes the layer tree as JSON.
 *
 * # Safety
 * `data` must point to `len` readable bytes.
 */
enum PlStatus pl_decode(const uint8_t *data, size_t len, char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PRIVLENS_H */
