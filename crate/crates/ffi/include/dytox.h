#ifndef DYTOX_H
#define DYTOX_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every fallible call.
 */
typedef enum DytoxStatus {
  DYTOX_STATUS_OK = 0,
  DYTOX_STATUS_NULL_POINTER = 1,
  DYTOX_STATUS_INVALID_ARGUMENT = 2,
  DYTOX_STATUS_IO = 3,
  DYTOX_STATUS_FORMAT = 4,
  DYTOX_STATUS_SHAPE = 5,
  DYTOX_STATUS_NUMERIC = 6,
  DYTOX_STATUS_CONFIG = 7,
  DYTOX_STATUS_PANIC = 8,
} DytoxStatus;

/*
 Opaque model handle.
 */
typedef struct DytoxModel DytoxModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Creates a model with no tasks. `config_json` holds the architecture as a
 JSON object (null or `{}` for defaults).

 # Safety
 `config_json` must be null or a valid NUL-terminated string; `out` must
 be a valid pointer to writable storage.
 */
enum DytoxStatus dytox_model_new(const char *config_json,
                                 bool token_expansion,
                                 bool independent_heads,
                                 uint64_t seed,
                                 struct DytoxModel **out);

/*
 Loads a checkpoint written by `dytox_model_save` or the CLI.

 # Safety
 `path` must be a valid NUL-terminated string; `out` must be writable.
 */
enum DytoxStatus dytox_model_load(const char *path, struct DytoxModel **out);

/*
 # Safety
 `model` must be a live handle; `path` a valid NUL-terminated string.
 */
enum DytoxStatus dytox_model_save(const struct DytoxModel *model, const char *path);

/*
 Adds a task with `classes` new classes.

 # Safety
 `model` must be a live handle.
 */
enum DytoxStatus dytox_model_expand_task(struct DytoxModel *model, size_t classes);

/*
 Tasks learned so far; 0 for a null handle.

 # Safety
 `model` must be null or a live handle.
 */
size_t dytox_model_num_tasks(const struct DytoxModel *model);

/*
 Output width over all tasks; 0 for a null handle.

 # Safety
 `model` must be null or a live handle.
 */
size_t dytox_model_num_classes(const struct DytoxModel *model);

/*
 Inference parameter count; 0 for a null handle.

 # Safety
 `model` must be null or a live handle.
 */
size_t dytox_model_param_count(const struct DytoxModel *model);

/*
 Number of floats in one image (`channels · size · size`); 0 for null.

 # Safety
 `model` must be null or a live handle.
 */
size_t dytox_model_image_len(const struct DytoxModel *model);

/*
 Sigmoid outputs `[batch, num_classes]` in row-major order.

 # Safety
 `model` must be a live handle, `images` must hold `batch · image_len`
 floats and `out` must have room for `out_len` floats.
 */
enum DytoxStatus dytox_model_forward(const struct DytoxModel *model,
                                     const float *images,
                                     size_t batch,
                                     float *out,
                                     size_t out_len);

/*
 Arg-max class per image.

 # Safety
 As for `dytox_model_forward`, with `out` holding `batch` entries.
 */
enum DytoxStatus dytox_model_predict(const struct DytoxModel *model,
                                     const float *images,
                                     size_t batch,
                                     size_t *out);

/*
 Releases a handle. Null is ignored.

 # Safety
 `model` must be null or a handle not yet freed.
 */
void dytox_model_free(struct DytoxModel *model);

/*
 Copies the calling thread's last error message into `buf` (truncated,
 always NUL-terminated when `len > 0`) and returns the full message
 length excluding the terminator.

 # Safety
 `buf` must be null or point to `len` writable bytes.
 */
size_t dytox_last_error_message(char *buf, size_t len);

/*
 Library version as a static NUL-terminated string.
 */
const char *dytox_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DYTOX_H */
