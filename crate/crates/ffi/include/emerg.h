#ifndef EMERG_H
#define EMERG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum EmergMode {
  EMERG_MODE_EMERG = 0,
  EMERG_MODE_RESIDUAL = 1,
} EmergMode;

typedef enum EmergStatus {
  EMERG_STATUS_OK = 0,
  EMERG_STATUS_NULL_POINTER = 1,
  EMERG_STATUS_INVALID_ARGUMENT = 2,
  // Bad configuration, schema, data or checkpoint.
  EMERG_STATUS_VALIDATION = 3,
  EMERG_STATUS_RUNTIME = 4,
  EMERG_STATUS_PANIC = 5,
} EmergStatus;

// A trained model: run configuration, data and θ.
typedef struct EmergModel EmergModel;

// Message of the last failed call on this thread; empty if none. The
// pointer stays valid until the next failing call on the same thread.
const char *emerg_last_error_message(void);

// Loads a run configuration and a θ checkpoint written by `emerg train`.
//
// # Safety
// `config_path` and `checkpoint_path` must be NUL-terminated strings; `out`
// must point to writable storage for one pointer.
enum EmergStatus emerg_model_load(const char *config_path,
                                  const char *checkpoint_path,
                                  struct EmergModel **out);

// # Safety
// `model` must be null or a handle from [`emerg_model_load`] not yet freed.
void emerg_model_free(struct EmergModel *model);

// Number of features, i.e. the length of a row and the side of the
// adjacency matrices.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum EmergStatus emerg_model_n_features(const struct EmergModel *model, size_t *out);

// Cold-start click probability of one instance. `values` holds one number
// per feature in schema order: vocabulary indices for categorical features,
// raw values for continuous ones. The item's features are taken from the row.
//
// # Safety
// `values` must point to `n_values` doubles; `model` must be live; `out`
// writable.
enum EmergStatus emerg_model_predict_row(const struct EmergModel *model,
                                         const double *values,
                                         size_t n_values,
                                         double *out);

// Cold-start adjacency `A^(layer)` (1-based) of the item described by
// `values` (a full row as in [`emerg_model_predict_row`]), written row-major
// into `out`, which must hold `n * n` doubles for `n` features.
//
// # Safety
// Pointers as described; `out` must hold `out_len` doubles.
enum EmergStatus emerg_model_adjacency(const struct EmergModel *model,
                                       const double *values,
                                       size_t n_values,
                                       size_t layer,
                                       double *out,
                                       size_t out_len);

// Writes the item's adjacency CSVs into `out_dir`; with `warmup`, also the
// stacks after warm-up phases A, B and C.
//
// # Safety
// `out_dir` must be a NUL-terminated string; `model` must be live.
enum EmergStatus emerg_model_export_graph(const struct EmergModel *model,
                                          uint32_t item,
                                          const char *out_dir,
                                          bool warmup);

// Rank-based AUC; ties share their average rank. Single-class input fails.
//
// # Safety
// `scores` and `labels` must point to `n` elements; `out` writable.
enum EmergStatus emerg_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

// F1 of `score >= threshold` predictions.
//
// # Safety
// `scores` and `labels` must point to `n` elements; `out` writable.
enum EmergStatus emerg_f1(const double *scores,
                          const uint8_t *labels,
                          size_t n,
                          double threshold,
                          double *out);

// Symbolic order check on one support pattern (`features * features`
// row-major bytes, nonzero = edge) reused by every layer. `mode` is an
// [`EmergMode`] value. `holds` receives
// whether each layer-`l` state has only degree-`l + 1` monomials.
//
// # Safety
// `pattern` must point to `features * features` bytes; `holds` writable.
enum EmergStatus emerg_check_prop1(size_t features,
                                   size_t layers,
                                   const uint8_t *pattern,
                                   uint32_t mode,
                                   bool *holds);

#endif  /* EMERG_H */
