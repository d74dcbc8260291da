#ifndef ALC_H
#define ALC_H

/* Generated by cbindgen from alc-capi; regenerate with `cbindgen --crate alc-capi --output include/alc.h`. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum AlcStatus {
  ALC_STATUS_OK = 0,
  ALC_STATUS_NULL_POINTER = 1,
  ALC_STATUS_INVALID_ARGUMENT = 2,
  ALC_STATUS_IO = 3,
  ALC_STATUS_COMPUTE = 4,
} AlcStatus;

/**
 * A trained classifier together with its sensor configuration and the
 * normalization fitted on its training split.
 */
typedef struct AlcModel AlcModel;

/**
 * A windowed dataset.
 */
typedef struct AlcWindowSet AlcWindowSet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *alc_version(void);

/**
 * Message describing the most recent failure on this thread, or null if
 * none occurred. The pointer stays valid until the next failing call on
 * the same thread.
 */
const char *alc_last_error(void);

/**
 * Generates a synthetic labeled dataset. Returns null on error.
 */
struct AlcWindowSet *alc_windows_synth(size_t n_subjects,
                                       size_t windows_per_class,
                                       size_t channels,
                                       size_t window_length,
                                       double noise_std,
                                       uint64_t seed);

/**
 * Loads a window cache file. Returns null on error.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string.
 */
struct AlcWindowSet *alc_windows_read_cache(const char *path);

/**
 * Writes a window cache file.
 *
 * # Safety
 * `set` must come from this library; `path` must be a valid string.
 */
enum AlcStatus alc_windows_write_cache(const struct AlcWindowSet *set, const char *path);

/**
 * Restricts a full-placement set to a sensor configuration tag (WO, W6,
 * WC, WA, or W18). Returns a new set; the input is untouched.
 *
 * # Safety
 * `set` must come from this library; `config` must be a valid string.
 */
struct AlcWindowSet *alc_windows_select(const struct AlcWindowSet *set, const char *config);

/**
 * Number of windows in the set; 0 if `set` is null.
 *
 * # Safety
 * `set` must come from this library or be null.
 */
size_t alc_windows_len(const struct AlcWindowSet *set);

/**
 * Channel count of the set; 0 if `set` is null.
 *
 * # Safety
 * `set` must come from this library or be null.
 */
size_t alc_windows_channels(const struct AlcWindowSet *set);

/**
 * Samples per window; 0 if `set` is null.
 *
 * # Safety
 * `set` must come from this library or be null.
 */
size_t alc_windows_window_len(const struct AlcWindowSet *set);

/**
 * Releases a window set. Null is a no-op.
 *
 * # Safety
 * `set` must come from this library and not be freed twice.
 */
void alc_windows_free(struct AlcWindowSet *set);

/**
 * Trains a classifier on the given windows: selects the configuration's
 * channels, fits per-channel normalization, and runs SGD with momentum.
 * Returns null on error.
 *
 * # Safety
 * `set` must come from this library; the tags must be valid strings.
 */
struct AlcModel *alc_train(const struct AlcWindowSet *set,
                           const char *model,
                           const char *config,
                           double learning_rate,
                           size_t epochs,
                           size_t batch_size,
                           double momentum,
                           uint64_t seed);

/**
 * Loads a model checkpoint. Returns null on error.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string.
 */
struct AlcModel *alc_model_read(const char *path);

/**
 * Saves a model checkpoint.
 *
 * # Safety
 * `model` must come from this library; `path` must be a valid string.
 */
enum AlcStatus alc_model_write(const struct AlcModel *model, const char *path);

/**
 * Evaluates the model on a window set, normalizing with the statistics the
 * model was trained with. Accepts either a full-placement set or one
 * already restricted to the model's configuration.
 *
 * # Safety
 * `model` and `set` must come from this library; the out pointers must be
 * valid for writes.
 */
enum AlcStatus alc_model_evaluate(struct AlcModel *model,
                                  const struct AlcWindowSet *set,
                                  double *out_accuracy,
                                  double *out_macro_f1);

/**
 * Classifies one raw window. `window` holds channel-major samples, channel
 * count and window length matching the model, so `len` must equal
 * channels * window_length. Writes the class index (0 low, 1 medium,
 * 2 high).
 *
 * # Safety
 * `model` must come from this library; `window` must point to `len`
 * doubles; `out_level` must be valid for writes.
 */
enum AlcStatus alc_model_predict(struct AlcModel *model,
                                 const double *window,
                                 size_t len,
                                 uint32_t *out_level);

/**
 * Releases a model. Null is a no-op.
 *
 * # Safety
 * `model` must come from this library and not be freed twice.
 */
void alc_model_free(struct AlcModel *model);

/**
 * Maps a MET value to its intensity class index (0 low, 1 medium, 2 high).
 *
 * # Safety
 * `out_level` must be valid for writes.
 */
enum AlcStatus alc_met_to_level(double met, uint32_t *out_level);

/**
 * Two-sided Wilcoxon signed-rank test on paired differences. Writes the
 * test statistic W and the p-value.
 *
 * # Safety
 * `diffs` must point to `len` doubles; the out pointers must be valid for
 * writes.
 */
enum AlcStatus alc_wilcoxon(const double *diffs, size_t len, double *out_w, double *out_p);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ALC_H */
