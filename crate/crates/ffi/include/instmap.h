#ifndef INSTMAP_H
#define INSTMAP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum InstmapStatus {
  INSTMAP_STATUS_OK = 0,
  INSTMAP_STATUS_NULL_ARGUMENT = 1,
  INSTMAP_STATUS_INVALID_UTF8 = 2,
  INSTMAP_STATUS_CONFIG = 3,
  INSTMAP_STATUS_IO = 4,
  INSTMAP_STATUS_PROTOCOL = 5,
  INSTMAP_STATUS_PIPELINE = 6,
  INSTMAP_STATUS_PANIC = 7,
} InstmapStatus;

// Parsed experiment configuration.
typedef struct InstmapConfig InstmapConfig;

// A decoded instance field.
typedef struct InstmapField InstmapField;

// Result of one pipeline run.
typedef struct InstmapRun InstmapRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on this thread.
const char *instmap_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *instmap_version(void);

// Loads an experiment file, resolving its scene path.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum InstmapStatus instmap_config_from_path(const char *path, struct InstmapConfig **out);

// Parses an experiment from TOML text; the scene must be inline.
//
// # Safety
// `toml` must be a NUL-terminated string and `out` a valid pointer.
enum InstmapStatus instmap_config_from_toml(const char *toml, struct InstmapConfig **out);

// Overrides the round count.
//
// # Safety
// `cfg` must come from this library.
enum InstmapStatus instmap_config_set_rounds(struct InstmapConfig *cfg, uint32_t rounds);

// Overrides the agent count.
//
// # Safety
// `cfg` must come from this library.
enum InstmapStatus instmap_config_set_agents(struct InstmapConfig *cfg, uint32_t agents);

// Validates the configuration.
//
// # Safety
// `cfg` must come from this library.
enum InstmapStatus instmap_config_validate(const struct InstmapConfig *cfg);

// # Safety
// `cfg` must come from this library or be null; it is invalid afterwards.
void instmap_config_free(struct InstmapConfig *cfg);

// Runs the full pipeline for one seed.
//
// # Safety
// `cfg` must come from this library and `out` be a valid pointer.
enum InstmapStatus instmap_run(const struct InstmapConfig *cfg,
                               uint64_t seed,
                               struct InstmapRun **out);

// Metrics report as JSON, owned by the run handle.
//
// # Safety
// `run` must come from this library or be null.
const char *instmap_run_metrics_json(const struct InstmapRun *run);

// Mean completion ratio in percent and completion in centimetres.
//
// # Safety
// `run` must come from this library; the outputs must be valid pointers.
enum InstmapStatus instmap_run_completion(const struct InstmapRun *run,
                                          double *ratio_pct,
                                          double *completion_cm);

// Writes every run artifact into `dir`.
//
// # Safety
// `run` and `cfg` must come from this library; `dir` must be a
// NUL-terminated string.
enum InstmapStatus instmap_run_write(const struct InstmapRun *run,
                                     const struct InstmapConfig *cfg,
                                     const char *dir);

// Copies a field trained by `agent` for instance `global_id` out of a run.
//
// # Safety
// `run` must come from this library and `out` be a valid pointer.
enum InstmapStatus instmap_run_field(const struct InstmapRun *run,
                                     uint32_t agent,
                                     uint32_t global_id,
                                     struct InstmapField **out);

// # Safety
// `run` must come from this library or be null; it is invalid afterwards.
void instmap_run_free(struct InstmapRun *run);

// Decodes a field from its wire encoding.
//
// # Safety
// `bytes` must point to `len` readable bytes and `out` be a valid pointer.
enum InstmapStatus instmap_field_decode(const uint8_t *bytes,
                                        uintptr_t len,
                                        struct InstmapField **out);

// Wire size of a field in bytes.
//
// # Safety
// `field` must come from this library or be null (returns 0).
uintptr_t instmap_field_encoded_len(const struct InstmapField *field);

// Encodes a field into `buf`; fails when `cap` is too small.
//
// # Safety
// `field` must come from this library and `buf` point to `cap` writable
// bytes.
enum InstmapStatus instmap_field_encode(const struct InstmapField *field,
                                        uint8_t *buf,
                                        uintptr_t cap);

// Evaluates occupancy and colour at `n` points given as `xyz` triples.
// `sigma` receives `n` values and `rgb` receives `3n`.
//
// # Safety
// `field` must come from this library; `xyz`, `sigma` and `rgb` must hold
// `3n`, `n` and `3n` doubles.
enum InstmapStatus instmap_field_query(const struct InstmapField *field,
                                       const double *xyz,
                                       uintptr_t n,
                                       double *sigma,
                                       double *rgb);

// # Safety
// `field` must come from this library or be null; it is invalid afterwards.
void instmap_field_free(struct InstmapField *field);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INSTMAP_H */
