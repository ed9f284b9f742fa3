/* C interface to the vehicular federated learning simulator. */

#ifndef IOVFL_H
#define IOVFL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome of an interface call; anything but `Ok` leaves a message
 * retrievable via [`iovfl_last_error_message`].
 */
typedef enum IovflStatus {
  IOVFL_STATUS_OK = 0,
  IOVFL_STATUS_NULL_POINTER = 1,
  IOVFL_STATUS_INVALID_UTF8 = 2,
  IOVFL_STATUS_INVALID_ARGUMENT = 3,
  IOVFL_STATUS_NUMERIC_FAILURE = 4,
  IOVFL_STATUS_IO_FAILURE = 5,
  IOVFL_STATUS_OUT_OF_RANGE = 6,
} IovflStatus;

/**
 * Simulation configuration handle.
 */
typedef struct IovflConfig IovflConfig;

/**
 * Finished experiment handle: per-round metrics plus final state.
 */
typedef struct IovflRun IovflRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the most recent error message for this thread into `buf`
 * (truncated, always NUL-terminated) and returns the full message length
 * in bytes. `buf` may be null when `len` is 0 to query the length.
 *
 * # Safety
 * `buf` must point to at least `len` writable bytes, or be null with
 * `len == 0`.
 */
size_t iovfl_last_error_message(char *buf, size_t len);

/**
 * Returns a config with the built-in defaults. Never fails.
 */
struct IovflConfig *iovfl_config_default(void);

/**
 * Loads a TOML config file into a new handle stored in `out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum IovflStatus iovfl_config_load(const char *path, struct IovflConfig **out);

/**
 * Overrides the config seed.
 *
 * # Safety
 * `cfg` must be a live handle from this library or null.
 */
enum IovflStatus iovfl_config_set_seed(struct IovflConfig *cfg, uint64_t seed);

/**
 * Releases a config handle. Null is accepted.
 *
 * # Safety
 * `cfg` must be a handle returned by this library, freed at most once.
 */
void iovfl_config_free(struct IovflConfig *cfg);

/**
 * Runs a full experiment with the named scheduler (`random`,
 * `round_robin`, `location_significance`, `location_info_significance`)
 * and stores the run handle in `out`.
 *
 * # Safety
 * `cfg` must be a live config handle, `scheduler` a NUL-terminated
 * string, `out` a valid pointer.
 */
enum IovflStatus iovfl_run_experiment(const struct IovflConfig *cfg,
                                      const char *scheduler,
                                      struct IovflRun **out);

/**
 * Number of completed rounds; 0 for a null handle.
 *
 * # Safety
 * `run` must be a live run handle or null.
 */
size_t iovfl_run_num_rounds(const struct IovflRun *run);

/**
 * 1 when the loss stop rule fired before the round budget, else 0.
 *
 * # Safety
 * `run` must be a live run handle or null.
 */
int32_t iovfl_run_loss_converged(const struct IovflRun *run);

/**
 * Writes the run's metrics to `path` in the given format (`csv` or
 * `jsonl`).
 *
 * # Safety
 * `run` must be a live run handle; `path` and `format` NUL-terminated
 * strings.
 */
enum IovflStatus iovfl_run_write_metrics(const struct IovflRun *run,
                                         const char *path,
                                         const char *format);

/**
 * Releases a run handle. Null is accepted.
 *
 * # Safety
 * `run` must be a handle returned by this library, freed at most once.
 */
void iovfl_run_free(struct IovflRun *run);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IOVFL_H */
