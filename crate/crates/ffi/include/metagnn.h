#ifndef METAGNN_H
#define METAGNN_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum mg_status {
  MgStatusOk = 0,
  /**
   * Null handle or otherwise unusable argument.
   */
  MgStatusNullArgument = 1,
  /**
   * Configuration or data validation failure.
   */
  MgStatusValidation = 2,
  /**
   * Inner-loop divergence during training or adaptation.
   */
  MgStatusDivergence = 3,
  /**
   * File system failure.
   */
  MgStatusIo = 4,
  /**
   * Unexpected internal failure (caught panic).
   */
  MgStatusInternal = 5,
} mg_status;

/**
 * Opaque dataset handle.
 */
typedef struct MgDataset MgDataset;

/**
 * Opaque model handle. Carries the normalization and split settings
 * established at training time, when available.
 */
typedef struct MgModel MgModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent error on this thread. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *mg_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *mg_version(void);

/**
 * Load a JSONL dataset; returns null on failure.
 *
 * # Safety
 * `path` must be a valid NUL-terminated UTF-8 string.
 */
struct MgDataset *mg_dataset_load(const char *path);

/**
 * Generate a synthetic dataset; returns null on failure.
 */
struct MgDataset *mg_dataset_synth(uintptr_t num_graphs,
                                   uintptr_t nodes_min,
                                   uintptr_t nodes_max,
                                   uintptr_t d_node,
                                   uintptr_t d_edge,
                                   uintptr_t num_tasks,
                                   bool with_coords,
                                   uint64_t seed);

/**
 * Write a dataset as JSONL.
 *
 * # Safety
 * `ds` must be a live handle from this library; `path` a valid string.
 */
enum mg_status mg_dataset_save(const struct MgDataset *ds, const char *path);

/**
 * Number of graphs, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be a live handle or null.
 */
uintptr_t mg_dataset_num_graphs(const struct MgDataset *ds);

/**
 * Number of regression tasks, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be a live handle or null.
 */
uintptr_t mg_dataset_num_tasks(const struct MgDataset *ds);

/**
 * Release a dataset handle; null is a no-op.
 *
 * # Safety
 * `ds` must be a handle from this library, released at most once.
 */
void mg_dataset_free(struct MgDataset *ds);

/**
 * Initialize a model. `arch` is one of "gcn", "gat", "mpnn", "egnn".
 * Returns null on failure.
 *
 * # Safety
 * `arch` must be a valid NUL-terminated UTF-8 string.
 */
struct MgModel *mg_model_init(const char *arch,
                              uintptr_t d_node,
                              uintptr_t d_edge,
                              uintptr_t hidden_dim,
                              uint64_t seed);

/**
 * Load a model JSON document; returns null on failure.
 *
 * # Safety
 * `path` must be a valid NUL-terminated UTF-8 string.
 */
struct MgModel *mg_model_load(const char *path);

/**
 * Save a model as JSON, embedding its normalization and split settings
 * when present.
 *
 * # Safety
 * `model` must be a live handle; `path` a valid string.
 */
enum mg_status mg_model_save(const struct MgModel *model, const char *path);

/**
 * Total number of scalar parameters, or 0 for a null handle.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
uintptr_t mg_model_num_params(const struct MgModel *model);

/**
 * Release a model handle; null is a no-op.
 *
 * # Safety
 * `model` must be a handle from this library, released at most once.
 */
void mg_model_free(struct MgModel *model);

/**
 * Meta-train the model in place with Reptile over all tasks. The
 * train/test split and the pooled z-score normalizer are derived here
 * and retained in the handle.
 *
 * # Safety
 * `model` and `ds` must be live handles from this library.
 */
enum mg_status mg_train_reptile(struct MgModel *model,
                                const struct MgDataset *ds,
                                double alpha,
                                double beta,
                                uintptr_t k,
                                uintptr_t support_size,
                                uintptr_t epochs,
                                double train_frac,
                                uint64_t seed);

/**
 * Predict the (denormalized, when a normalizer is attached) target for
 * one graph; writes it to `out`.
 *
 * # Safety
 * `model` and `ds` must be live handles; `out` a valid f64 pointer.
 */
enum mg_status mg_model_predict(const struct MgModel *model,
                                const struct MgDataset *ds,
                                uintptr_t graph_index,
                                double *out);

/**
 * K-shot evaluation on one task over the stored test split. Writes the
 * mean query MSE before adaptation to `out_pre` and after `k` steps to
 * `out_post`.
 *
 * # Safety
 * `model` and `ds` must be live handles; `out_pre`/`out_post` valid
 * f64 pointers.
 */
enum mg_status mg_eval_kshot(const struct MgModel *model,
                             const struct MgDataset *ds,
                             uintptr_t target,
                             double alpha,
                             uintptr_t k,
                             uintptr_t support_size,
                             uintptr_t trials,
                             uint64_t seed,
                             double *out_pre,
                             double *out_post);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* METAGNN_H */
