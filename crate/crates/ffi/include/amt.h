#ifndef AMT_H
#define AMT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum AmtStatus {
  AMT_STATUS_OK = 0,
  AMT_STATUS_NULL_POINTER = 1,
  AMT_STATUS_INVALID_ARGUMENT = 2,
  AMT_STATUS_IO = 3,
  AMT_STATUS_CHECKPOINT = 4,
  AMT_STATUS_BUFFER_TOO_SMALL = 5,
  AMT_STATUS_INTERNAL = 6,
} AmtStatus;

/**
 * A trained transcriber loaded from a checkpoint.
 */
typedef struct AmtModel AmtModel;

/**
 * An owned list of notes.
 */
typedef struct AmtNotes AmtNotes;

/**
 * One transcribed note: times in seconds, MIDI pitch.
 */
typedef struct AmtNote {
  double onset;
  double offset;
  uint8_t pitch;
} AmtNote;

/**
 * Precision, recall and F1 in `[0, 1]`.
 */
typedef struct AmtScore {
  double precision;
  double recall;
  double f1;
} AmtScore;

/**
 * Frame, note and note-with-offset scores of one clip.
 */
typedef struct AmtClipScores {
  struct AmtScore frame;
  struct AmtScore note;
  struct AmtScore note_with_offset;
} AmtClipScores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *amt_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *amt_version(void);

/**
 * Loads a checkpoint into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum AmtStatus amt_model_load(const char *path, struct AmtModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`amt_model_load`] and not be freed twice.
 */
void amt_model_free(struct AmtModel *model);

/**
 * Mel bins the model expects.
 *
 * # Safety
 * `model` must be a live handle or null (which yields 0).
 */
size_t amt_model_n_mels(const struct AmtModel *model);

/**
 * Transcribes mono samples at `sample_rate` Hz into `*out`.
 *
 * # Safety
 * `samples` must point to `len` readable floats, `model` must be live and
 * `out` writable.
 */
enum AmtStatus amt_transcribe_samples(const struct AmtModel *model,
                                      const float *samples,
                                      size_t len,
                                      uint32_t sample_rate,
                                      double threshold,
                                      struct AmtNotes **out);

/**
 * Transcribes a WAV file into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string, `model` live and `out` writable.
 */
enum AmtStatus amt_transcribe_file(const struct AmtModel *model,
                                   const char *path,
                                   double threshold,
                                   struct AmtNotes **out);

/**
 * Number of notes in a list; 0 for null.
 *
 * # Safety
 * `notes` must be a live list or null.
 */
size_t amt_notes_len(const struct AmtNotes *notes);

/**
 * Copies note `index` into `*out`.
 *
 * # Safety
 * `notes` must be a live list and `out` writable.
 */
enum AmtStatus amt_notes_get(const struct AmtNotes *notes, size_t index, struct AmtNote *out);

/**
 * Releases a note list. Null is ignored.
 *
 * # Safety
 * `notes` must come from a transcription call and not be freed twice.
 */
void amt_notes_free(struct AmtNotes *notes);

/**
 * Normalized log-mel features of mono samples, row-major frames × `n_mels`.
 *
 * Call with `out` null to learn the frame count through `*frames`; then
 * pass a buffer of at least `frames * n_mels` values as `capacity`.
 *
 * # Safety
 * `samples` must point to `len` floats, `frames` must be writable and `out`
 * (when non-null) must have room for `capacity` doubles.
 */
enum AmtStatus amt_mel_spectrogram(const float *samples,
                                   size_t len,
                                   uint32_t sample_rate,
                                   size_t n_mels,
                                   double *out,
                                   size_t capacity,
                                   size_t *frames);

/**
 * Scores predicted notes against reference notes.
 *
 * # Safety
 * `pred` and `reference` must point to `n_pred` and `n_ref` notes (either
 * may be null when its count is 0); `out` must be writable.
 */
enum AmtStatus amt_note_metrics(const struct AmtNote *pred,
                                size_t n_pred,
                                const struct AmtNote *reference,
                                size_t n_ref,
                                struct AmtClipScores *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AMT_H */
