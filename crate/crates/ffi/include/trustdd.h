#ifndef TRUSTDD_H
#define TRUSTDD_H

/* Generated by cbindgen; regenerate with TRUSTDD_BLESS=1 cargo test -p trustdd-ffi. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Zero is success.
 */
typedef enum TrustddStatus {
  TRUSTDD_STATUS_OK = 0,
  TRUSTDD_STATUS_NULL_ARGUMENT = 1,
  TRUSTDD_STATUS_INVALID_UTF8 = 2,
  TRUSTDD_STATUS_CONFIG = 3,
  TRUSTDD_STATUS_LOAD = 4,
  TRUSTDD_STATUS_WRITE = 5,
  TRUSTDD_STATUS_VALIDATION = 6,
  TRUSTDD_STATUS_COMPUTE = 7,
  TRUSTDD_STATUS_BUFFER_TOO_SMALL = 8,
  TRUSTDD_STATUS_IO = 9,
  TRUSTDD_STATUS_PANIC = 10,
} TrustddStatus;

/**
 * Opaque experiment configuration.
 */
typedef struct TrustddConfig TrustddConfig;

/**
 * Opaque distilled set loaded from a container directory.
 */
typedef struct TrustddDistilled TrustddDistilled;

/**
 * In-distribution accuracy and mean OOD metrics for the first configured score.
 */
typedef struct TrustddEvalSummary {
  double accuracy;
  double fpr95;
  double auroc;
  double aupr_in;
  double aupr_out;
} TrustddEvalSummary;

/**
 * Plain-data summary of a distilled set.
 */
typedef struct TrustddDistilledInfo {
  size_t num_classes;
  size_t ipc;
  size_t channels;
  size_t height;
  size_t width;
  size_t s_in_count;
  size_t s_out_count;
  double lambda;
  uint64_t rng_seed;
} TrustddDistilledInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated)
 * and returns the buffer size it needs. Passing a null or short buffer only
 * reports the size.
 *
 * # Safety
 * `buf` must be null or valid for `len` writable bytes.
 */
size_t trustdd_last_error(char *buf, size_t len);

/**
 * Parses config text; relative paths resolve against `base_dir`.
 *
 * # Safety
 * `text` and `base_dir` must be NUL-terminated strings; `out` must be writable.
 */
enum TrustddStatus trustdd_config_parse(const char *text,
                                        const char *base_dir,
                                        struct TrustddConfig **out);

/**
 * Reads a config file; relative paths resolve against its directory.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum TrustddStatus trustdd_config_from_file(const char *path, struct TrustddConfig **out);

/**
 * Overrides one key. On error the config is left unchanged.
 *
 * # Safety
 * `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
 */
enum TrustddStatus trustdd_config_set(struct TrustddConfig *cfg,
                                      const char *key,
                                      const char *value);

/**
 * Writes the 64-hex-digit config checksum and a NUL into `buf` (65 bytes).
 *
 * # Safety
 * `cfg` must be a live handle; `buf` valid for `len` writable bytes.
 */
enum TrustddStatus trustdd_config_checksum(const struct TrustddConfig *cfg, char *buf, size_t len);

/**
 * Releases a config handle. Null is ignored.
 *
 * # Safety
 * `cfg` must be null or a handle not yet freed.
 */
void trustdd_config_free(struct TrustddConfig *cfg);

/**
 * Distills every configured run into `output/run{r}` and stores the run
 * count in `runs`.
 *
 * # Safety
 * `cfg` must be a live handle; `runs` null or writable.
 */
enum TrustddStatus trustdd_distill(const struct TrustddConfig *cfg, size_t *runs);

/**
 * Evaluates the runs under `dir` as arm `name`, writes the reports into the
 * config's output directory and summarizes the first score.
 *
 * # Safety
 * `cfg` must be a live handle; strings NUL-terminated; `out` writable.
 */
enum TrustddStatus trustdd_eval(const struct TrustddConfig *cfg,
                                const char *name,
                                const char *dir,
                                struct TrustddEvalSummary *out);

/**
 * Writes a tiled PPM of the distilled set in `dir`.
 *
 * # Safety
 * `dir` and `out` must be NUL-terminated strings.
 */
enum TrustddStatus trustdd_export_grid(const char *dir, const char *out);

/**
 * Loads a distilled-set container directory.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be writable.
 */
enum TrustddStatus trustdd_distilled_load(const char *dir, struct TrustddDistilled **out);

/**
 * # Safety
 * `set` must be a live handle; `out` must be writable.
 */
enum TrustddStatus trustdd_distilled_info(const struct TrustddDistilled *set,
                                          struct TrustddDistilledInfo *out);

/**
 * Copies `S_in` pixels (row-major count × channels × height × width).
 *
 * # Safety
 * `set` must be a live handle; `buf` valid for `len` floats.
 */
enum TrustddStatus trustdd_distilled_copy_s_in(const struct TrustddDistilled *set,
                                               float *buf,
                                               size_t len);

/**
 * Copies `S_out` pixels (row-major count × channels × height × width).
 *
 * # Safety
 * `set` must be a live handle; `buf` valid for `len` floats.
 */
enum TrustddStatus trustdd_distilled_copy_s_out(const struct TrustddDistilled *set,
                                                float *buf,
                                                size_t len);

/**
 * Copies the `S_in` class labels.
 *
 * # Safety
 * `set` must be a live handle; `buf` valid for `len` integers.
 */
enum TrustddStatus trustdd_distilled_copy_labels(const struct TrustddDistilled *set,
                                                 uint32_t *buf,
                                                 size_t len);

/**
 * Releases a distilled-set handle. Null is ignored.
 *
 * # Safety
 * `set` must be null or a handle not yet freed.
 */
void trustdd_distilled_free(struct TrustddDistilled *set);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRUSTDD_H */
