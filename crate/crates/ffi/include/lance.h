#ifndef LANCE_H
#define LANCE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LanceStatus {
  LANCE_STATUS_OK = 0,
  LANCE_STATUS_NULL_POINTER = 1,
  LANCE_STATUS_INVALID_ARGUMENT = 2,
  LANCE_STATUS_CONFIG = 3,
  LANCE_STATUS_CHECKPOINT = 4,
  LANCE_STATUS_NON_FINITE = 5,
  LANCE_STATUS_BUFFER_TOO_SMALL = 6,
  LANCE_STATUS_FINISHED = 7,
  LANCE_STATUS_RUNTIME = 8,
  LANCE_STATUS_PANIC = 9,
} LanceStatus;

/*
 Read-only weights and encoders for inference.
 */
typedef struct LanceModel LanceModel;

/*
 A trainer with its model, optimizer state and stage position.
 */
typedef struct LanceTrainer LanceTrainer;

/*
 Euler sampler settings for `lance_generate`.
 */
typedef struct LanceSamplerConfig {
  uint32_t steps;
  double cfg_scale;
  double shift;
  uint64_t seed;
} LanceSamplerConfig;

/*
 Pixel layout of a generated output: `frames x height x width x 3`.
 */
typedef struct LanceShape {
  size_t frames;
  size_t height;
  size_t width;
} LanceShape;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static nul-terminated string.
 */
const char *lance_version(void);

/*
 Message of the last failure on this thread, or null. The pointer stays
 valid until the next failing call on the same thread.
 */
const char *lance_last_error(void);

/*
 Default sampler settings (20 Euler steps, guidance 4, shift 4, seed 0).
 */
struct LanceSamplerConfig lance_sampler_default(void);

/*
 Validates a TOML run configuration (null means all defaults) under
 `seed` and writes its short hash into `hash_buf`.

 # Safety
 `config_toml` must be null or a valid string; `hash_buf` must hold
 `cap` bytes; `needed` must be null or writable.
 */
enum LanceStatus lance_config_check(const char *config_toml,
                                    uint64_t seed,
                                    char *hash_buf,
                                    size_t cap,
                                    size_t *needed);

/*
 Creates a fresh trainer from a TOML run configuration (null means all
 defaults) and `seed`.

 # Safety
 `config_toml` must be null or a valid string; `out` must be writable.
 */
enum LanceStatus lance_trainer_new(const char *config_toml,
                                   uint64_t seed,
                                   struct LanceTrainer **out);

/*
 Restores a trainer from a checkpoint directory.

 # Safety
 `dir` must be a valid string; `out` must be writable.
 */
enum LanceStatus lance_trainer_load(const char *dir, struct LanceTrainer **out);

/*
 Runs one optimizer step and writes its total loss. Returns
 `LANCE_STATUS_FINISHED` once every stage is done.

 # Safety
 `trainer` must come from this library; `loss` must be null or writable.
 */
enum LanceStatus lance_trainer_step(struct LanceTrainer *trainer, double *loss);

/*
 Steps taken so far, or 0 for a null handle.

 # Safety
 `trainer` must be null or come from this library.
 */
uint64_t lance_trainer_global_step(const struct LanceTrainer *trainer);

/*
 Writes a checkpoint into `dir`, creating it when missing.

 # Safety
 `trainer` must come from this library; `dir` must be a valid string.
 */
enum LanceStatus lance_trainer_save(const struct LanceTrainer *trainer, const char *dir);

/*
 # Safety
 `trainer` must be null or come from this library and not be used again.
 */
void lance_trainer_free(struct LanceTrainer *trainer);

/*
 Snapshots the trainer's current weights as an inference model.

 # Safety
 `trainer` must come from this library; `out` must be writable.
 */
enum LanceStatus lance_trainer_model(const struct LanceTrainer *trainer, struct LanceModel **out);

/*
 Loads the weights of a checkpoint directory for inference.

 # Safety
 `dir` must be a valid string; `out` must be writable.
 */
enum LanceStatus lance_model_load(const char *dir, struct LanceModel **out);

/*
 # Safety
 `model` must be null or come from this library and not be used again.
 */
void lance_model_free(struct LanceModel *model);

/*
 Generates the visual output of held-out sample `index` of generation
 task `task` (for example "t2i"), optionally with `prompt` replacing its
 text. Pixels go to `pixels` (frame, row, column, channel order);
 `shape` receives the layout even when the buffer is too small.

 # Safety
 `model` must come from this library; strings must be valid (`prompt`
 may be null); `pixels` must hold `cap` values; `shape` must be writable.
 */
enum LanceStatus lance_generate(const struct LanceModel *model,
                                const char *task,
                                uint64_t index,
                                const char *prompt,
                                struct LanceSamplerConfig sampler,
                                double *pixels,
                                size_t cap,
                                struct LanceShape *shape);

/*
 Greedy answer to held-out sample `index` of understanding task `task`
 (for example "i2t"), optionally with `question` replacing its text.

 # Safety
 `model` must come from this library; strings must be valid (`question`
 may be null); `buf` must hold `cap` bytes; `needed` null or writable.
 */
enum LanceStatus lance_answer(const struct LanceModel *model,
                              const char *task,
                              uint64_t index,
                              uint64_t seed,
                              const char *question,
                              char *buf,
                              size_t cap,
                              size_t *needed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LANCE_H */
