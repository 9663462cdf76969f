#ifndef KGAMC_H
#define KGAMC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum KgamcStatus {
  KGAMC_STATUS_OK = 0,
  KGAMC_STATUS_NULL_POINTER = 1,
  KGAMC_STATUS_INVALID_ARGUMENT = 2,
  /*
   Malformed input data, file contents or configuration.
   */
  KGAMC_STATUS_VALIDATION = 3,
  KGAMC_STATUS_IO = 4,
  KGAMC_STATUS_BUFFER_TOO_SMALL = 5,
  KGAMC_STATUS_RUNTIME = 6,
  KGAMC_STATUS_PANIC = 7,
} KgamcStatus;

typedef enum KgamcMode {
  /*
   Argmax of the classifier head.
   */
  KGAMC_MODE_CLASSIFIER = 0,
  /*
   Nearest class anchor by cosine similarity.
   */
  KGAMC_MODE_ANCHOR = 1,
} KgamcMode;

/*
 Opaque handle to a loaded model.
 */
typedef struct KgamcModel KgamcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the most recent failure on this thread, or NULL. The pointer
 stays valid until the next failing call on the same thread.
 */
const char *kgamc_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *kgamc_version(void);

/*
 Loads a checkpoint file. On success `*out` owns a model that must be
 released with [`kgamc_model_free`].

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum KgamcStatus kgamc_model_load(const char *path, struct KgamcModel **out);

/*
 Releases a model. NULL is ignored.

 # Safety
 `model` must come from [`kgamc_model_load`] and not be used afterwards.
 */
void kgamc_model_free(struct KgamcModel *model);

/*
 Number of classes, or 0 for NULL.

 # Safety
 `model` must be NULL or a live handle.
 */
size_t kgamc_model_num_classes(const struct KgamcModel *model);

/*
 Samples per channel in one frame, or 0 for NULL.

 # Safety
 `model` must be NULL or a live handle.
 */
size_t kgamc_model_frame_len(const struct KgamcModel *model);

/*
 Width of the signal feature vector, or 0 for NULL.

 # Safety
 `model` must be NULL or a live handle.
 */
size_t kgamc_model_feature_dim(const struct KgamcModel *model);

/*
 Copies the NUL-terminated name of class `index` into `buf`. `*needed`
 (if not NULL) receives the buffer size required, terminator included.

 # Safety
 `buf` must hold `cap` bytes; `needed` must be NULL or valid.
 */
enum KgamcStatus kgamc_model_class_name(const struct KgamcModel *model,
                                        size_t index,
                                        char *buf,
                                        size_t cap,
                                        size_t *needed);

/*
 Classifies `n_frames` frames. Writes one label per frame to `labels` and,
 if `scores` is not NULL, `n_frames * num_classes` row-major softmax scores.

 # Safety
 `iq` must hold `n_frames * 2 * frame_len` floats, `labels` `n_frames`
 entries and `scores` (if given) `n_frames * num_classes` floats.
 */
enum KgamcStatus kgamc_classify(const struct KgamcModel *model,
                                const float *iq,
                                size_t n_frames,
                                enum KgamcMode mode,
                                uint32_t *labels,
                                float *scores);

/*
 Writes `n_frames * feature_dim` row-major signal features to `out`.

 # Safety
 `iq` must hold `n_frames * 2 * frame_len` floats and `out`
 `n_frames * feature_dim` floats.
 */
enum KgamcStatus kgamc_features(const struct KgamcModel *model,
                                const float *iq,
                                size_t n_frames,
                                float *out);

/*
 Synthesizes one frame of `class_name` (e.g. "QPSK") at `snr_db` into `out`
 (`2 * frame_len` floats). The same `(seed, index)` always yields the same
 frame. An SNR of 32767 means noiseless.

 # Safety
 `class_name` must be NUL-terminated and `out` hold `2 * frame_len` floats.
 */
enum KgamcStatus kgamc_synth_frame(const char *class_name,
                                   int16_t snr_db,
                                   uint64_t seed,
                                   uint64_t index,
                                   size_t frame_len,
                                   float *out);

/*
 Checks a triple file (NULL for the built-in graph) against the relation
 signatures. `*violations` receives the count; any violation returns
 `KGAMC_STATUS_VALIDATION`.

 # Safety
 `path` must be NULL or NUL-terminated; `violations` must be NULL or valid.
 */
enum KgamcStatus kgamc_kg_validate(const char *path, size_t *violations);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KGAMC_H */
