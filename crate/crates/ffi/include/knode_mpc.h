#ifndef KNODE_MPC_H
#define KNODE_MPC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define KNODE_STATE_DIM 13

#define KNODE_CONTROL_DIM 4

typedef enum KnodeStatus {
  KNODE_STATUS_OK = 0,
  KNODE_STATUS_NULL_POINTER = 1,
  KNODE_STATUS_INVALID_ARGUMENT = 2,
  KNODE_STATUS_NON_FINITE = 3,
  KNODE_STATUS_DIMENSION = 4,
  KNODE_STATUS_CONFIG = 5,
  KNODE_STATUS_IO = 6,
  KNODE_STATUS_FORMAT = 7,
  KNODE_STATUS_SCHEMA = 8,
  KNODE_STATUS_ROLLOUT_DIVERGED = 9,
  KNODE_STATUS_TRAINING = 10,
  KNODE_STATUS_PANIC = 11,
} KnodeStatus;

/**
 * Opaque ensemble snapshot.
 */
typedef struct KnodeEnsemble KnodeEnsemble;

typedef struct KnodeEpisodeSummary {
  /**
   * Position MSE over the whole episode, mean of the per-axis values.
   */
  double mse;
  double mse_x;
  double mse_y;
  double mse_z;
  /**
   * Position MSE from the first mass change to the end.
   */
  double mse_post_change;
  size_t records;
  /**
   * Non-zero if the episode stopped early.
   */
  uint8_t failed;
} KnodeEpisodeSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len - 1` bytes). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t knode_last_error_message(char *buf, size_t len);

/**
 * Creates an empty ensemble (knowledge-only model) with default quadrotor
 * parameters, the default member architecture and the given capacity.
 *
 * # Safety
 * `out` must be a valid pointer; on success it receives a new handle.
 */
enum KnodeStatus knode_ensemble_new(size_t capacity, struct KnodeEnsemble **out);

/**
 * Loads an ensemble checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum KnodeStatus knode_ensemble_load(const char *path, struct KnodeEnsemble **out);

/**
 * # Safety
 * `h` must be a live handle and `path` a NUL-terminated string.
 */
enum KnodeStatus knode_ensemble_save(const struct KnodeEnsemble *h, const char *path);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `h` must be null or a handle not yet freed.
 */
void knode_ensemble_free(struct KnodeEnsemble *h);

/**
 * Number of members, or 0 for a null handle.
 *
 * # Safety
 * `h` must be null or a live handle.
 */
size_t knode_ensemble_len(const struct KnodeEnsemble *h);

/**
 * Snapshot version, or 0 for a null handle.
 *
 * # Safety
 * `h` must be null or a live handle.
 */
uint64_t knode_ensemble_version(const struct KnodeEnsemble *h);

/**
 * Hybrid vector field: nominal dynamics plus the weighted member residuals.
 *
 * # Safety
 * `x` points to 13 doubles, `u` to 4, `out` to 13 writable doubles.
 */
enum KnodeStatus knode_ensemble_derivative(const struct KnodeEnsemble *h,
                                           const double *x,
                                           const double *u,
                                           double *out);

/**
 * Nominal (first-principles) vector field with the ensemble's parameters.
 *
 * # Safety
 * Same as [`knode_ensemble_derivative`].
 */
enum KnodeStatus knode_nominal_derivative(const struct KnodeEnsemble *h,
                                          const double *x,
                                          const double *u,
                                          double *out);

/**
 * One RK4 step of the hybrid model over `dt` seconds, with the attitude
 * quaternion renormalized.
 *
 * # Safety
 * Same as [`knode_ensemble_derivative`].
 */
enum KnodeStatus knode_ensemble_step(const struct KnodeEnsemble *h,
                                     double dt,
                                     const double *x,
                                     const double *u,
                                     double *out);

/**
 * Runs one closed-loop episode on a circle of the given radius and speed.
 *
 * `config_path` may be null for the default configuration. `method` is one
 * of `mpc-nominal`, `knode-offline`, `knode-online`, `geometric`.
 *
 * # Safety
 * String arguments must be NUL-terminated (or null where allowed) and
 * `out` must be a valid pointer.
 */
enum KnodeStatus knode_episode_run(const char *config_path,
                                   const char *method,
                                   double radius_m,
                                   double speed_m_per_s,
                                   uint64_t seed,
                                   struct KnodeEpisodeSummary *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KNODE_MPC_H */
