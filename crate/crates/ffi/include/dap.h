#ifndef DAP_H
#define DAP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every exported call.
typedef enum DapStatus {
  DAP_STATUS_OK = 0,
  DAP_STATUS_NULL_POINTER = 1,
  // Unknown name or malformed argument.
  DAP_STATUS_USAGE = 2,
  // Input rejected by domain, size, sequence or format checks.
  DAP_STATUS_INVALID = 3,
  DAP_STATUS_IO = 4,
  DAP_STATUS_INTERNAL = 5,
  // Output buffer too small; nothing was written.
  DAP_STATUS_BUFFER_TOO_SMALL = 6,
  // A Rust panic was caught at the boundary.
  DAP_STATUS_PANIC = 7,
} DapStatus;

// Trained sequence model for next-action queries.
typedef struct DapPlanner DapPlanner;

// Curvature–acceleration grid.
typedef struct DapTokenizer DapTokenizer;

// Planar pose: meters and radians.
typedef struct DapPose {
  double x;
  double y;
  double yaw;
} DapPose;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message, NUL-terminated and
// truncated to `cap` bytes. Returns the untruncated length plus one.
//
// # Safety
// `buf` must be null or point to `cap` writable bytes.
uintptr_t dap_last_error_message(char *buf, uintptr_t cap);

// Creates a tokenizer for grid `FB-ka-A` … `FB-ka-D`.
//
// # Safety
// `name` must be a NUL-terminated string; `out` must be writable.
enum DapStatus dap_tokenizer_new(const char *name, struct DapTokenizer **out);

// # Safety
// `t` must be null or a handle from [`dap_tokenizer_new`] not yet freed.
void dap_tokenizer_free(struct DapTokenizer *t);

// # Safety
// `t` must be a live tokenizer; `out` must be writable.
enum DapStatus dap_tokenizer_codebook_size(const struct DapTokenizer *t, uintptr_t *out);

// Quantizes one (κ, a) pair. `saturated` counts clamped components (0–2).
//
// # Safety
// `t` must be a live tokenizer; `token` must be writable; `saturated` may be null.
enum DapStatus dap_tokenizer_encode(const struct DapTokenizer *t,
                                    double kappa,
                                    double accel,
                                    uint32_t *token,
                                    uint32_t *saturated);

// Bin-center (κ, a) of a token.
//
// # Safety
// `t` must be a live tokenizer; `kappa` and `accel` must be writable.
enum DapStatus dap_tokenizer_decode(const struct DapTokenizer *t,
                                    uint32_t token,
                                    double *kappa,
                                    double *accel);

// Tokenizes `n_poses` poses sampled every `dt` seconds into `n_poses − 2`
// tokens.
//
// # Safety
// `poses` must hold `n_poses` entries; `tokens` must hold `cap` entries;
// `saturated` may be null.
enum DapStatus dap_tokenizer_tokenize(const struct DapTokenizer *t,
                                      const struct DapPose *poses,
                                      uintptr_t n_poses,
                                      double dt,
                                      uint32_t *tokens,
                                      uintptr_t cap,
                                      uintptr_t *saturated);

// Integrates `n_tokens` bin centers from `start` at speed `v0`, writing
// `n_tokens + 1` poses including `start`.
//
// # Safety
// `tokens` must hold `n_tokens` entries; `poses` must hold `cap` entries.
enum DapStatus dap_tokenizer_detokenize(const struct DapTokenizer *t,
                                        const uint32_t *tokens,
                                        uintptr_t n_tokens,
                                        struct DapPose start,
                                        double v0,
                                        double dt,
                                        struct DapPose *poses,
                                        uintptr_t cap);

// Loads a checkpoint that embeds its trajectory grid size. The grid preset
// is recovered from the trajectory vocabulary size.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum DapStatus dap_planner_load(const char *path, struct DapPlanner **out);

// # Safety
// `p` must be null or a handle from [`dap_planner_load`] not yet freed.
void dap_planner_free(struct DapPlanner *p);

// BEV tokens per frame and the longest context, in frames, the model accepts.
//
// # Safety
// `p` must be a live planner; outputs must be writable.
enum DapStatus dap_planner_shape(const struct DapPlanner *p,
                                 uintptr_t *bev_per_frame,
                                 uintptr_t *max_frames);

// Greedy next action for a context of `n_frames` frames. `bev` holds
// `n_frames × bev_per_frame` codebook indices, `actions` the `n_frames − 1`
// tokens taken between them. Frames beyond the model's context are dropped
// from the front. Writes the local trajectory token and its bin center.
//
// # Safety
// Input arrays must have the stated lengths; outputs must be writable.
enum DapStatus dap_planner_next_action(const struct DapPlanner *p,
                                       uint32_t command,
                                       const uint32_t *bev,
                                       const uint32_t *actions,
                                       uintptr_t n_frames,
                                       uint32_t *token,
                                       double *kappa,
                                       double *accel);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DAP_H */
