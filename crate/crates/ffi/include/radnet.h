#ifndef RADNET_H
#define RADNET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define RADNET_MODE_BAYES 0

#define RADNET_MODE_ML 1

#define RADNET_SCENARIO_A 0

#define RADNET_SCENARIO_B 1

#define RADNET_SCENARIO_C 2

#define RADNET_TRAJECTORY_RANDOM 0

#define RADNET_TRAJECTORY_STRAIGHT 1

typedef enum RadnetStatus {
  RADNET_STATUS_OK = 0,
  RADNET_STATUS_NULL_POINTER = 1,
  RADNET_STATUS_INVALID_ARGUMENT = 2,
  RADNET_STATUS_CONFIG = 3,
  RADNET_STATUS_DEGENERATE = 4,
  RADNET_STATUS_NUMERIC = 5,
  RADNET_STATUS_DOMAIN = 6,
  RADNET_STATUS_IO = 7,
  RADNET_STATUS_BUFFER_TOO_SMALL = 8,
  RADNET_STATUS_PANIC = 9,
} RadnetStatus;

/*
 A validated experiment configuration.
 */
typedef struct RadnetConfig RadnetConfig;

/*
 Accumulates one frame's detections for a fusion solve.
 */
typedef struct RadnetFusion RadnetFusion;

/*
 Output of one experiment run.
 */
typedef struct RadnetRun RadnetRun;

/*
 Node pose in the global frame; `phi` in radians.
 */
typedef struct RadnetPose {
  double x;
  double y;
  double phi;
} RadnetPose;

typedef struct RadnetState {
  double x;
  double y;
  double vx;
  double vy;
} RadnetState;

/*
 Range (m), spatial frequency (rad) and radial velocity (m/s).
 */
typedef struct RadnetDetection {
  double range;
  double spatial_freq;
  double radial_vel;
} RadnetDetection;

/*
 Pose of node 2 in node 1's frame plus the matching cost.
 */
typedef struct RadnetCalibration {
  double px;
  double py;
  double phi;
  double j_min;
  double rmse;
  size_t k;
} RadnetCalibration;

typedef struct RadnetNoise {
  double sigma_r;
  double sigma_omega;
  double sigma_v;
} RadnetNoise;

/*
 Gaussian prior; the position mean is the closed-form initial estimate.
 */
typedef struct RadnetPrior {
  double sigma_x;
  double sigma_y;
  double sigma_vx;
  double sigma_vy;
} RadnetPrior;

/*
 One-shot fusion output. `covariance` is row-major and all NaN when
 the solver could not produce one.
 */
typedef struct RadnetEstimate {
  struct RadnetState state;
  double covariance[16];
  bool converged;
  size_t iterations;
  double conditioning;
} RadnetEstimate;

/*
 Headline numbers of an experiment run; NaN where a mode was not run.
 */
typedef struct RadnetSummary {
  uint64_t seed;
  double calibration_rmse;
  double position_rmse_bayes;
  double velocity_rmse_bayes;
  double position_rmse_ml;
  double velocity_rmse_ml;
  size_t evaluated_frames;
} RadnetSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *radnet_version(void);

/*
 Copies the calling thread's last error message into `buf`; empty after
 a successful call.

 # Safety
 `buf` must be writable for `len` bytes; `needed` may be null.
 */
enum RadnetStatus radnet_last_error_message(char *buf, size_t len, size_t *needed);

/*
 Ideal detection of `target` by a node at `node`.

 # Safety
 All pointers must be valid for their types.
 */
enum RadnetStatus radnet_measure(const struct RadnetPose *node,
                                 const struct RadnetState *target,
                                 struct RadnetDetection *out);

/*
 Closed-form relative pose of node 2 from two time-aligned tracks of
 `k` points each, given as interleaved `x, y` pairs in each node's frame.

 # Safety
 `track1` and `track2` must each hold `2 * k` doubles.
 */
enum RadnetStatus radnet_calibrate_pair(const double *track1,
                                        const double *track2,
                                        size_t k,
                                        struct RadnetCalibration *out);

/*
 Maps `k` node-2 points (interleaved `x, y`) into node 1's frame.
 `out` may alias `track2`.

 # Safety
 `track2` and `out` must each hold `2 * k` doubles.
 */
enum RadnetStatus radnet_apply_calibration(const struct RadnetCalibration *calibration,
                                           const double *track2,
                                           size_t k,
                                           double *out);

/*
 New fusion accumulator. `prior` may be null for the default prior.

 # Safety
 `noise` must be valid; `prior` null or valid; `out` writable.
 */
enum RadnetStatus radnet_fusion_new(const struct RadnetNoise *noise,
                                    const struct RadnetPrior *prior,
                                    struct RadnetFusion **out);

/*
 Adds one node's detection to the current frame.

 # Safety
 All pointers must be valid; `fusion` must come from `radnet_fusion_new`.
 */
enum RadnetStatus radnet_fusion_add(struct RadnetFusion *fusion,
                                    const struct RadnetPose *node,
                                    const struct RadnetDetection *detection);

/*
 Drops the accumulated detections.

 # Safety
 `fusion` must come from `radnet_fusion_new`.
 */
enum RadnetStatus radnet_fusion_clear(struct RadnetFusion *fusion);

/*
 Solves the accumulated frame in `mode` (`RADNET_MODE_*`). The
 detections are kept; call `radnet_fusion_clear` before the next frame.

 # Safety
 `fusion` must come from `radnet_fusion_new`; `out` must be writable.
 */
enum RadnetStatus radnet_fusion_solve(const struct RadnetFusion *fusion,
                                      uint32_t mode,
                                      struct RadnetEstimate *out);

/*
 # Safety
 `fusion` must be null or come from `radnet_fusion_new`, and not be used
 afterwards.
 */
void radnet_fusion_free(struct RadnetFusion *fusion);

/*
 Built-in geometry (`RADNET_SCENARIO_*`) evaluated on `trajectory`
 (`RADNET_TRAJECTORY_*`).

 # Safety
 `out` must be writable.
 */
enum RadnetStatus radnet_config_builtin(uint32_t scenario,
                                        uint32_t trajectory,
                                        struct RadnetConfig **out);

/*
 Parses and validates a TOML experiment configuration.

 # Safety
 `toml` must be a NUL-terminated UTF-8 string; `out` writable.
 */
enum RadnetStatus radnet_config_from_toml(const char *toml, struct RadnetConfig **out);

/*
 # Safety
 `config` must be null or come from a `radnet_config_*` constructor, and
 not be used afterwards.
 */
void radnet_config_free(struct RadnetConfig *config);

/*
 Runs the full pipeline. `use_seed == false` keeps the configured seed;
 `num_frames == 0` keeps the configured frame count.

 # Safety
 `config` must come from a `radnet_config_*` constructor; `out` writable.
 */
enum RadnetStatus radnet_run(const struct RadnetConfig *config,
                             bool use_seed,
                             uint64_t seed,
                             size_t num_frames,
                             struct RadnetRun **out);

/*
 # Safety
 `run` must come from `radnet_run`; `out` writable.
 */
enum RadnetStatus radnet_run_summary(const struct RadnetRun *run, struct RadnetSummary *out);

/*
 Copies the JSON report into `buf`. Pass `len == 0` to query the size
 through `needed`.

 # Safety
 `run` must come from `radnet_run`; `buf` writable for `len` bytes.
 */
enum RadnetStatus radnet_run_report_json(const struct RadnetRun *run,
                                         char *buf,
                                         size_t len,
                                         size_t *needed);

/*
 Writes every CSV, record and the report under directory `dir`.

 # Safety
 `run` must come from `radnet_run`; `dir` a NUL-terminated UTF-8 path.
 */
enum RadnetStatus radnet_run_write(const struct RadnetRun *run, const char *dir);

/*
 # Safety
 `run` must be null or come from `radnet_run`, and not be used afterwards.
 */
void radnet_run_free(struct RadnetRun *run);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RADNET_H */
