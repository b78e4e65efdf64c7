#ifndef WJMMD_H
#define WJMMD_H

#include <stddef.h>

// Result of a call. Values 1 to 12 mirror the core error kinds.
typedef enum WjmmdStatus {
  WJMMD_STATUS_OK = 0,
  WJMMD_STATUS_DIMENSION = 1,
  WJMMD_STATUS_CONTRACT = 2,
  WJMMD_STATUS_MISSING_FILE = 3,
  WJMMD_STATUS_LENGTH_MISMATCH = 4,
  WJMMD_STATUS_LABEL_OUT_OF_RANGE = 5,
  WJMMD_STATUS_MANIFEST = 6,
  WJMMD_STATUS_CONFIG = 7,
  WJMMD_STATUS_NON_FINITE_LOSS = 8,
  WJMMD_STATUS_CHECKPOINT = 9,
  WJMMD_STATUS_IO = 10,
  WJMMD_STATUS_JSON = 11,
  WJMMD_STATUS_CSV = 12,
  // A required pointer argument was null.
  WJMMD_STATUS_NULL_POINTER = 100,
  // A path was not valid UTF-8.
  WJMMD_STATUS_INVALID_STRING = 101,
  // An output buffer was too small.
  WJMMD_STATUS_BUFFER_TOO_SMALL = 102,
  // The dataset carries no labels.
  WJMMD_STATUS_NO_LABELS = 103,
  // Internal panic caught at the boundary.
  WJMMD_STATUS_PANIC = 199,
} WjmmdStatus;

// Labeled or unlabeled spectra of one domain.
typedef struct WjmmdDataset WjmmdDataset;

// A trained network loaded from a checkpoint.
typedef struct WjmmdModel WjmmdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null after a success.
// The pointer stays valid until the next call on the same thread.
const char *wjmmd_last_error(void);

// Samples per input window.
size_t wjmmd_window_len(void);

// Magnitude bins per spectrum, the model input width.
size_t wjmmd_spectrum_len(void);

// Loads every window listed in a domain manifest.
//
// # Safety
// `manifest` must be a NUL-terminated string and `out` writable.
enum WjmmdStatus wjmmd_dataset_load(const char *manifest, struct WjmmdDataset **out);

// Releases a dataset. Null is ignored.
//
// # Safety
// `ds` must come from [`wjmmd_dataset_load`] and not be used afterwards.
void wjmmd_dataset_free(struct WjmmdDataset *ds);

// Number of spectra in the dataset.
//
// # Safety
// `ds` must be a live dataset handle and `out` writable.
enum WjmmdStatus wjmmd_dataset_len(const struct WjmmdDataset *ds, size_t *out);

// Number of classes declared by the manifest.
//
// # Safety
// `ds` must be a live dataset handle and `out` writable.
enum WjmmdStatus wjmmd_dataset_class_count(const struct WjmmdDataset *ds, size_t *out);

// Copies the spectra, row-major `[len, spectrum_len]`, into `out`.
//
// # Safety
// `ds` must be a live dataset handle and `out` valid for `capacity` writes.
enum WjmmdStatus wjmmd_dataset_features(const struct WjmmdDataset *ds,
                                        double *out,
                                        size_t capacity);

// Copies the labels into `out`.
//
// # Safety
// `ds` must be a live dataset handle and `out` valid for `capacity` writes.
enum WjmmdStatus wjmmd_dataset_labels(const struct WjmmdDataset *ds, size_t *out, size_t capacity);

// Loads a checkpoint written by `wjmmd train`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum WjmmdStatus wjmmd_model_load(const char *path, struct WjmmdModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from [`wjmmd_model_load`] and not be used afterwards.
void wjmmd_model_free(struct WjmmdModel *model);

// Number of classes the model predicts.
//
// # Safety
// `model` must be a live model handle and `out` writable.
enum WjmmdStatus wjmmd_model_class_count(const struct WjmmdModel *model, size_t *out);

// Predicts a class for each of `rows` spectra laid out row-major
// `[rows, spectrum_len]`.
//
// # Safety
// `model` must be a live model handle, `spectra` valid for
// `rows * spectrum_len` reads and `out` for `rows` writes.
enum WjmmdStatus wjmmd_model_predict(const struct WjmmdModel *model,
                                     const double *spectra,
                                     size_t rows,
                                     size_t *out);

// Biased squared MMD between `m` source rows and `n` target rows of width
// `dim`. A positive `sigma2` selects one Gaussian kernel of that bandwidth;
// zero or less selects the five-kernel ladder around the median heuristic.
//
// # Safety
// `xs` and `xt` must be valid for `m * dim` and `n * dim` reads and `out`
// writable.
enum WjmmdStatus wjmmd_mmd2(const double *xs,
                            size_t m,
                            const double *xt,
                            size_t n,
                            size_t dim,
                            double sigma2,
                            double *out);

// Softmax weights of a row-major `rows x cols` grid of pair discrepancies.
//
// # Safety
// `grid` must be valid for `rows * cols` reads and `out` for as many writes.
enum WjmmdStatus wjmmd_pair_weights(const double *grid, size_t rows, size_t cols, double *out);

// Magnitudes of the first `spectrum_len` DFT bins of one window of
// `window_len` samples.
//
// # Safety
// `window` must be valid for `len` reads and `out` for `capacity` writes.
enum WjmmdStatus wjmmd_fft_magnitude(const double *window,
                                     size_t len,
                                     double *out,
                                     size_t capacity);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WJMMD_H */
