#ifndef PRIVMEM_H
#define PRIVMEM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum PrivmemStatus {
  PRIVMEM_STATUS_OK = 0,
  PRIVMEM_STATUS_NULL_ARGUMENT = 1,
  PRIVMEM_STATUS_INVALID_UTF8 = 2,
  PRIVMEM_STATUS_INVALID_JSON = 3,
  /**
   * Dialogue, turn, memory or finding id not found.
   */
  PRIVMEM_STATUS_UNKNOWN_ENTITY = 4,
  /**
   * Rejected input: empty text, bad strategy, bad payload, nothing to infer.
   */
  PRIVMEM_STATUS_INVALID_INPUT = 5,
  /**
   * Provider failed, rejected credentials, or returned unusable output.
   */
  PRIVMEM_STATUS_PROVIDER = 6,
  PRIVMEM_STATUS_TIMEOUT = 7,
  /**
   * Log corruption or an I/O failure.
   */
  PRIVMEM_STATUS_STORAGE = 8,
  PRIVMEM_STATUS_CONFIG = 9,
  PRIVMEM_STATUS_PANIC = 10,
} PrivmemStatus;

/**
 * Opaque engine handle.
 */
typedef struct PrivmemEngine PrivmemEngine;

/**
 * An RGBA display color; alpha in [0, 1].
 */
typedef struct PrivmemColor {
  uint8_t r;
  uint8_t g;
  uint8_t b;
  double a;
} PrivmemColor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message on this thread, or null. Valid until the next failing
 * call on the same thread; do not free.
 */
const char *privmem_last_error(void);

/**
 * Releases a string returned by this library. Null is ignored.
 */
void privmem_string_free(char *s);

/**
 * Engine backed by a scripted mock provider (JSON array of script steps),
 * kept in memory. A non-zero `seed` makes ids and timestamps reproducible.
 */
enum PrivmemStatus privmem_engine_new_mock(const char *script_json,
                                           uint64_t seed,
                                           struct PrivmemEngine **out);

/**
 * Engine talking to the configured HTTP provider. `config_path` may be
 * null; `PRIVMEM_*` environment variables apply either way.
 */
enum PrivmemStatus privmem_engine_open(const char *config_path, struct PrivmemEngine **out);

/**
 * Frees an engine. Null is ignored.
 */
void privmem_engine_free(struct PrivmemEngine *engine);

/**
 * Blocks until background extraction and inference are done.
 */
enum PrivmemStatus privmem_wait_idle(const struct PrivmemEngine *engine);

enum PrivmemStatus privmem_create_dialogue(const struct PrivmemEngine *engine,
                                           const char *title,
                                           char **out_id);

/**
 * Sends a user message. `strategy` is `analyzer`, `gpt_like` or `manual`
 * (null means analyzer). Writes the chat response as JSON.
 */
enum PrivmemStatus privmem_send_message(const struct PrivmemEngine *engine,
                                        const char *dialogue_id,
                                        const char *text,
                                        const char *strategy,
                                        char **out_json);

/**
 * Writes `{"status": "none"|"pending"|"failed"|"ready", ...}`.
 */
enum PrivmemStatus privmem_findings_json(const struct PrivmemEngine *engine,
                                         const char *dialogue_id,
                                         char **out_json);

/**
 * Applies an edit batch (JSON) and writes the change report. A rejected
 * batch is not an error: check `accepted` in the report.
 */
enum PrivmemStatus privmem_apply_edits_json(const struct PrivmemEngine *engine,
                                            const char *batch_json,
                                            char **out_json);

enum PrivmemStatus privmem_list_memories_json(const struct PrivmemEngine *engine,
                                              bool include_deleted,
                                              char **out_json);

/**
 * `group_by` is `dialogue` or `task`; null means dialogue.
 */
enum PrivmemStatus privmem_metrics_summary_json(const struct PrivmemEngine *engine,
                                                const char *group_by,
                                                char **out_json);

/**
 * Sensitivity in [0, 1] of a category under the engine's table.
 */
enum PrivmemStatus privmem_sensitivity_of(const struct PrivmemEngine *engine,
                                          const char *category,
                                          double *out);

/**
 * Display color for a finding with the given confidence and sensitivity.
 */
enum PrivmemStatus privmem_color_of(double confidence,
                                    double sensitivity,
                                    struct PrivmemColor *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PRIVMEM_H */
