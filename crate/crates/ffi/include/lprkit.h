#ifndef LPRKIT_H
#define LPRKIT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LprStatus {
  LPR_STATUS_OK = 0,
  LPR_STATUS_NULL_POINTER = 1,
  LPR_STATUS_INVALID_ARGUMENT = 2,
  LPR_STATUS_IO = 3,
  LPR_STATUS_CHECKPOINT = 4,
  LPR_STATUS_DECODE = 5,
  LPR_STATUS_BUFFER_TOO_SMALL = 6,
  LPR_STATUS_EMPTY = 7,
  LPR_STATUS_INTERNAL = 8,
} LprStatus;

/*
 Accumulates prediction records and reports metrics over them.
 */
typedef struct LprEvaluator LprEvaluator;

/*
 Loaded network.
 */
typedef struct LprModel LprModel;

typedef struct LprReport {
  double accuracy;
  double mean_levenshtein;
  size_t tp;
  size_t tn1;
  size_t tn2;
  size_t n;
} LprReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Copies the calling thread's last error message into `buf` and returns
 the size needed including the terminator. Passing a null `buf` only
 returns the size.

 # Safety
 `buf` must be null or point to `cap` writable bytes.
 */
size_t lpr_last_error(char *buf, size_t cap);

/*
 Loads a `.lprb` checkpoint.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum LprStatus lpr_model_load(const char *path, struct LprModel **out);

/*
 # Safety
 `model` must be null or a handle from [`lpr_model_load`] not yet freed.
 */
void lpr_model_free(struct LprModel *model);

/*
 Number of output classes including the blank.

 # Safety
 `model` must be a live handle and `out` a valid pointer.
 */
enum LprStatus lpr_model_num_classes(const struct LprModel *model, size_t *out);

/*
 Recognizes one prepared input: `3 * 24 * 94` values, channel-major,
 BGR order, scaled to [0, 1].

 # Safety
 `pixels` must point to `len` readable doubles and `buf` to `cap`
 writable bytes; `needed` may be null.
 */
enum LprStatus lpr_model_recognize(const struct LprModel *model,
                                   const double *pixels,
                                   size_t len,
                                   char *buf,
                                   size_t cap,
                                   size_t *needed);

/*
 Loads a PNG plate photo, crops the plate region, resizes and converts
 it, then recognizes it.

 # Safety
 As [`lpr_model_recognize`]; `path` must be a NUL-terminated string.
 */
enum LprStatus lpr_model_recognize_png(const struct LprModel *model,
                                       const char *path,
                                       char *buf,
                                       size_t cap,
                                       size_t *needed);

/*
 Edit distance between two UTF-8 strings, counted in characters.

 # Safety
 `a` and `b` must be NUL-terminated strings and `out` a valid pointer.
 */
enum LprStatus lpr_levenshtein(const char *a, const char *b, size_t *out);

struct LprEvaluator *lpr_evaluator_new(void);

/*
 # Safety
 `ev` must be null or a handle from [`lpr_evaluator_new`] not yet freed.
 */
void lpr_evaluator_free(struct LprEvaluator *ev);

/*
 # Safety
 `ev` must be a live handle; the strings must be NUL-terminated.
 */
enum LprStatus lpr_evaluator_add(struct LprEvaluator *ev,
                                 const char *ground_truth,
                                 const char *predicted);

/*
 Metrics over every record added so far. Fails with `Empty` when none
 have been added.

 # Safety
 `ev` must be a live handle and `out` a valid pointer.
 */
enum LprStatus lpr_evaluator_report(const struct LprEvaluator *ev, struct LprReport *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LPRKIT_H */
