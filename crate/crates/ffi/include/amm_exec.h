#ifndef AMM_EXEC_H
#define AMM_EXEC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AmmStatus {
  AMM_STATUS_OK = 0,
  AMM_STATUS_NULL_POINTER = 1,
  AMM_STATUS_INVALID_UTF8 = 2,
  AMM_STATUS_DOMAIN = 3,
  AMM_STATUS_INFEASIBLE_SWAP = 4,
  AMM_STATUS_INSUFFICIENT_INVENTORY = 5,
  AMM_STATUS_CONFIG = 6,
  AMM_STATUS_CHECKPOINT = 7,
  AMM_STATUS_PARSE = 8,
  AMM_STATUS_CONTRACT_VIOLATION = 9,
  AMM_STATUS_IO = 10,
  AMM_STATUS_PANIC = 11,
  AMM_STATUS_OTHER = 12,
} AmmStatus;

/**
 * Run configuration handle.
 */
typedef struct AmmConfig AmmConfig;

/**
 * Trained value network handle.
 */
typedef struct AmmNetwork AmmNetwork;

/**
 * Feedback policy handle.
 */
typedef struct AmmPolicy AmmPolicy;

/**
 * Counts and terminal state of one simulated market path.
 */
typedef struct AmmPathSummary {
  uint64_t spot_up;
  uint64_t spot_down;
  uint64_t swap_x;
  uint64_t swap_y;
  double terminal_spot;
  double terminal_rx;
  double terminal_ry;
  double terminal_spread;
  /**
   * Nonzero when the path hit the event cap before the horizon.
   */
  uint8_t truncated;
} AmmPathSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null if none. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *amm_last_error(void);

/**
 * Output of swapping `pi` of one token into reserves `(a, b)` with fee
 * `phi_fee`.
 *
 * # Safety
 * `out` must be null or valid for writes.
 */
enum AmmStatus amm_swap_out(double a, double b, double pi, double phi_fee, double *out);

/**
 * Reference configuration.
 */
struct AmmConfig *amm_config_default(void);

/**
 * Parses a TOML configuration.
 *
 * # Safety
 * `toml` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum AmmStatus amm_config_from_toml(const char *toml, struct AmmConfig **out);

/**
 * # Safety
 * `cfg` must be null or a handle from this library not yet freed.
 */
void amm_config_free(struct AmmConfig *cfg);

/**
 * Value of selling the whole initial inventory at time zero.
 *
 * # Safety
 * `cfg` must be a live handle; `out` must be valid for writes.
 */
enum AmmStatus amm_naive_value(const struct AmmConfig *cfg, double *out);

/**
 * Loads a checkpoint, checking it against the configured architecture.
 *
 * # Safety
 * `cfg` must be a live handle, `path` a NUL-terminated string and `out`
 * valid for writes.
 */
enum AmmStatus amm_network_load(const struct AmmConfig *cfg,
                                const char *path,
                                struct AmmNetwork **out);

/**
 * Freshly initialised network of the configured architecture.
 *
 * # Safety
 * `cfg` must be a live handle.
 */
struct AmmNetwork *amm_network_xavier(const struct AmmConfig *cfg, uint64_t seed);

/**
 * # Safety
 * `net` must be null or a handle from this library not yet freed.
 */
void amm_network_free(struct AmmNetwork *net);

/**
 * Number of trainable parameters; 0 for a null handle.
 *
 * # Safety
 * `net` must be null or a live handle.
 */
size_t amm_network_param_count(const struct AmmNetwork *net);

/**
 * Network output at a normalised point of length `dim`.
 *
 * # Safety
 * `net` must be a live handle, `point` valid for `dim` reads and `out`
 * valid for writes.
 */
enum AmmStatus amm_network_forward(const struct AmmNetwork *net,
                                   const double *point,
                                   size_t dim,
                                   double *out);

/**
 * Feedback policy of a network under a configuration. The network is copied;
 * both handles remain owned by the caller.
 *
 * # Safety
 * `cfg` and `net` must be live handles; `out` must be valid for writes.
 */
enum AmmStatus amm_policy_new(const struct AmmConfig *cfg,
                              const struct AmmNetwork *net,
                              struct AmmPolicy **out);

/**
 * # Safety
 * `policy` must be null or a handle from this library not yet freed.
 */
void amm_policy_free(struct AmmPolicy *policy);

/**
 * Swap intensity in `[0, ell_max]` at time `t`, spot `s`, reserves
 * `(r_x, r_y)` and inventory `z_x`.
 *
 * # Safety
 * `policy` must be a live handle; `out` must be valid for writes.
 */
enum AmmStatus amm_policy_intensity(const struct AmmPolicy *policy,
                                    double t,
                                    double s,
                                    double r_x,
                                    double r_y,
                                    double z_x,
                                    double *out);

/**
 * Simulates path `index` of the market alone over the configured horizon.
 * Equal `(seed, index)` give identical paths.
 *
 * # Safety
 * `cfg` must be a live handle; `out` must be valid for writes.
 */
enum AmmStatus amm_simulate_uncontrolled(const struct AmmConfig *cfg,
                                         uint64_t seed,
                                         uint64_t index,
                                         struct AmmPathSummary *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AMM_EXEC_H */
