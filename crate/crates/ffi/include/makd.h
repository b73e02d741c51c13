#ifndef MAKD_H
#define MAKD_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MakdStatus {
  MAKD_STATUS_OK = 0,
  MAKD_STATUS_NULL_POINTER = 1,
  MAKD_STATUS_INVALID_ARGUMENT = 2,
  MAKD_STATUS_SHAPE = 3,
  MAKD_STATUS_RANK = 4,
  MAKD_STATUS_CONFIG = 5,
  MAKD_STATUS_MISSING_FILE = 6,
  MAKD_STATUS_IO = 7,
  MAKD_STATUS_CHECKPOINT = 8,
  MAKD_STATUS_ARCHITECTURE = 9,
  MAKD_STATUS_NUMERIC = 10,
  MAKD_STATUS_PANIC = 11,
} MakdStatus;

/*
 Opaque model handle.
 */
typedef struct MakdModel MakdModel;

/*
 Architecture summary filled in by `makd_model_info`.
 */
typedef struct MakdModelInfo {
  /*
   0 for a masked-LM encoder, 1 for a causal decoder.
   */
  uint32_t kind;
  uintptr_t layers;
  uintptr_t hidden;
  uintptr_t ffn;
  uintptr_t heads;
  uintptr_t vocab_size;
  uintptr_t max_seq_len;
  uintptr_t parameters;
  /*
   Non-zero when any projection is stored as low-rank factors.
   */
  uint32_t factorized;
} MakdModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *makd_version(void);

/*
 Message of the last failed call on this thread, or an empty string.
 Valid until the next `makd_*` call on the same thread.
 */
const char *makd_last_error(void);

/*
 Loads a checkpoint. On success `*out` receives a new handle.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MakdStatus makd_model_load(const char *path, struct MakdModel **out);

/*
 Releases a handle. Null is ignored.

 # Safety
 `model` must come from this library and not be used afterwards.
 */
void makd_model_free(struct MakdModel *model);

/*
 Writes the model to `path` in the checkpoint format.

 # Safety
 `model` must be a live handle and `path` a NUL-terminated string.
 */
enum MakdStatus makd_model_save(const struct MakdModel *model, const char *path);

/*
 Total number of stored parameters; 0 for a null handle.

 # Safety
 `model` must be null or a live handle.
 */
uintptr_t makd_model_num_params(const struct MakdModel *model);

/*
 # Safety
 `model` must be a live handle and `out` a valid pointer.
 */
enum MakdStatus makd_model_info(const struct MakdModel *model, struct MakdModelInfo *out);

/*
 Logits for one unpadded sequence of `len` token ids. `out` must hold
 `out_len = len * vocab_size` doubles, written row by row.

 # Safety
 `ids` must point to `len` values and `out` to `out_len` writable values.
 */
enum MakdStatus makd_model_logits(const struct MakdModel *model,
                                  const uintptr_t *ids,
                                  uintptr_t len,
                                  double *out,
                                  uintptr_t out_len);

/*
 Builds a student whose projections are rank-`rank` truncations of the
 teacher's. On success `*out` receives a new handle.

 # Safety
 `teacher` must be a live handle and `out` a valid pointer.
 */
enum MakdStatus makd_model_factorize(const struct MakdModel *teacher,
                                     uintptr_t rank,
                                     struct MakdModel **out);

/*
 Rouge-L of whitespace-tokenized `candidate` against `reference`. Any of
 the output pointers may be null.

 # Safety
 Both strings must be NUL-terminated; non-null outputs must be writable.
 */
enum MakdStatus makd_rouge_l(const char *candidate,
                             const char *reference,
                             double *precision,
                             double *recall,
                             double *f1);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MAKD_H */
