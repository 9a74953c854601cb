#ifndef FLIPLAB_H
#define FLIPLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum FlStatus {
  FL_STATUS_OK = 0,
  FL_STATUS_NULL_POINTER = 1,
  FL_STATUS_INVALID_ARGUMENT = 2,
  FL_STATUS_IO = 3,
  FL_STATUS_PARSE = 4,
  FL_STATUS_DIMENSION = 5,
  FL_STATUS_ADDRESS = 6,
  FL_STATUS_INTERNAL = 7,
  FL_STATUS_PANIC = 8,
} FlStatus;

typedef enum FlDecodeStatus {
  FL_DECODE_STATUS_CLEAN = 0,
  FL_DECODE_STATUS_CORRECTED = 1,
  FL_DECODE_STATUS_UNCORRECTABLE = 2,
} FlDecodeStatus;

typedef struct FlDataset FlDataset;

typedef struct FlFlipSet FlFlipSet;

typedef struct FlModel FlModel;

// Attack settings; start from [`fl_attack_params_default`].
typedef struct FlAttackParams {
  double alpha;
  // Candidate share of the target layer, in percent.
  double rate_percent;
  size_t episodes;
  uint64_t seed;
  double failure_threshold;
  // Evaluation rows to sample; 0 uses every row.
  size_t eval_rows;
} FlAttackParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null if none.
//
// # Safety
// The pointer stays valid until the next failing call on the same thread.
const char *fl_last_error(void);

// Loads a model JSON file.
//
// # Safety
// `path` must be a valid NUL-terminated string and `out` a valid pointer.
enum FlStatus fl_model_load(const char *path, struct FlModel **out);

// Parses a model from a JSON string.
//
// # Safety
// `json` must be a valid NUL-terminated string and `out` a valid pointer.
enum FlStatus fl_model_from_json(const char *json, struct FlModel **out);

// # Safety
// `model` must be null or a handle from this library not yet freed.
void fl_model_free(struct FlModel *model);

// Number of layers, weighted or not.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum FlStatus fl_model_num_layers(const struct FlModel *model, size_t *out);

// Stored weight count of `layer`; 0 for layers without weights.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum FlStatus fl_model_layer_weights(const struct FlModel *model, size_t layer, size_t *out);

// Stored int8 value of one weight.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum FlStatus fl_model_weight(const struct FlModel *model, size_t layer, size_t param, int8_t *out);

// Loads a CSV dataset (features then a label column). `num_classes` of 0
// infers the class count from the labels.
//
// # Safety
// `path` must be a valid NUL-terminated string and `out` a valid pointer.
enum FlStatus fl_dataset_load_csv(const char *path, size_t num_classes, struct FlDataset **out);

// Copies `rows × dim` row-major inputs and `rows` labels into a dataset.
//
// # Safety
// `inputs` must point to `rows * dim` doubles and `labels` to `rows` values.
enum FlStatus fl_dataset_from_rows(const double *inputs,
                                   const uint32_t *labels,
                                   size_t rows,
                                   size_t dim,
                                   size_t num_classes,
                                   struct FlDataset **out);

// # Safety
// `data` must be null or a handle from this library not yet freed.
void fl_dataset_free(struct FlDataset *data);

// Final-exit accuracy of `model` on `data`.
//
// # Safety
// Both handles must be live and `out` a valid pointer.
enum FlStatus fl_accuracy(const struct FlModel *model, const struct FlDataset *data, double *out);

// # Safety
// `out` must be a valid pointer.
enum FlStatus fl_flipset_new(struct FlFlipSet **out);

// Adds one address; a duplicate is ignored. Addresses are checked against a
// model only when the set is applied.
//
// # Safety
// `set` must be a live handle.
enum FlStatus fl_flipset_insert(struct FlFlipSet *set, size_t layer, size_t param, uint8_t bit);

// # Safety
// `set` must be a live handle and `out` a valid pointer.
enum FlStatus fl_flipset_len(const struct FlFlipSet *set, size_t *out);

// The `index`-th address in canonical (layer, param, bit) order.
//
// # Safety
// `set` must be a live handle and the out pointers valid.
enum FlStatus fl_flipset_get(const struct FlFlipSet *set,
                             size_t index,
                             size_t *layer,
                             size_t *param,
                             uint8_t *bit);

// # Safety
// `set` must be null or a handle from this library not yet freed.
void fl_flipset_free(struct FlFlipSet *set);

// Writes a new model equal to `model` with every bit in `set` flipped. The
// input model is left untouched.
//
// # Safety
// Both handles must be live and `out` a valid pointer.
enum FlStatus fl_model_apply_flips(const struct FlModel *model,
                                   const struct FlFlipSet *set,
                                   struct FlModel **out);

// Default attack settings.
struct FlAttackParams fl_attack_params_default(void);

// Profiles every layer, searches the most sensitive one and returns the
// critical flip set. `final_accuracy` may be null.
//
// # Safety
// Handles must be live, `params` and `out` valid pointers.
enum FlStatus fl_attack(const struct FlModel *model,
                        const struct FlDataset *data,
                        const struct FlAttackParams *params,
                        struct FlFlipSet **out,
                        double *final_accuracy);

// Check byte of the (72,64) SECDED code for `data`.
uint8_t fl_secded_encode(uint64_t data);

// Decodes a stored word and check byte; single-bit errors are corrected.
//
// # Safety
// `out` and `status` must be valid pointers.
enum FlStatus fl_secded_decode(uint64_t data,
                               uint8_t check,
                               uint64_t *out,
                               enum FlDecodeStatus *status);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLIPLAB_H */
