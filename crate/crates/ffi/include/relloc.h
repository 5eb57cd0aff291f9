#ifndef RELLOC_H
#define RELLOC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every call.
typedef enum RellocStatus {
  RELLOC_STATUS_OK = 0,
  RELLOC_STATUS_NULL_POINTER = 1,
  RELLOC_STATUS_INVALID_INPUT = 2,
  RELLOC_STATUS_CONFIG = 3,
  RELLOC_STATUS_NUMERIC = 4,
  RELLOC_STATUS_LOOKUP = 5,
  RELLOC_STATUS_INDEX = 6,
  RELLOC_STATUS_PARSE = 7,
  RELLOC_STATUS_IO = 8,
  // Output buffer too small; the needed length is still reported.
  RELLOC_STATUS_BUFFER_TOO_SMALL = 9,
  RELLOC_STATUS_PANIC = 10,
} RellocStatus;

// A predicate graph read from an edge-list file.
typedef struct RellocGraph RellocGraph;

// A trained pair-rating head.
typedef struct RellocOrm RellocOrm;

// Predicate model with its graph and word vectors.
typedef struct RellocPredictor RellocPredictor;

typedef struct RellocDetection {
  double bbox[4];
  size_t category;
  double objectiveness;
} RellocDetection;

typedef struct RellocPair {
  size_t sub_idx;
  size_t ob_idx;
  double rating;
  double score;
} RellocPair;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *relloc_last_error(void);

// Intersection over union of two boxes.
//
// # Safety
// `a` and `b` point to 4 doubles, `out` to one.
enum RellocStatus relloc_iou(const double *a, const double *b, double *out);

// The 14-value relative-location encoding of a (subject, object) pair.
//
// # Safety
// `sub` and `ob` point to 4 doubles, `out` to 14.
enum RellocStatus relloc_encode_relative_location(const double *sub, const double *ob, double *out);

// Best product of subject and object IoU against `n_gt` ground-truth pairs,
// given as `n_gt * 8` doubles (subject box then object box).
//
// # Safety
// `sub`, `ob` point to 4 doubles, `gt_pairs` to `8 * n_gt`, `out` to one.
enum RellocStatus relloc_tri_iou(const double *sub,
                                 const double *ob,
                                 const double *gt_pairs,
                                 size_t n_gt,
                                 double *out);

// Loads the rating head from a checkpoint directory.
//
// # Safety
// `ckpt_dir` is a NUL-terminated path, `out` a valid pointer.
enum RellocStatus relloc_orm_load(const char *ckpt_dir, struct RellocOrm **out);

// Appearance feature length the head expects per detection.
//
// # Safety
// `orm` comes from [`relloc_orm_load`].
enum RellocStatus relloc_orm_feature_dim(const struct RellocOrm *orm, size_t *out);

// # Safety
// `orm` comes from [`relloc_orm_load`] and is not used afterwards. Null is ignored.
void relloc_orm_free(struct RellocOrm *orm);

// Pair proposing with i-NMS. `features` holds `n * feature_dim` doubles,
// one row per detection. At most `capacity` pairs are written to `out`;
// `out_len` receives the full count, and [`RellocStatus::BufferTooSmall`] is
// returned if it exceeds `capacity`.
//
// # Safety
// Array pointers cover the lengths given; `out` covers `capacity` pairs.
enum RellocStatus relloc_i_nms(const struct RellocOrm *orm,
                               const struct RellocDetection *detections,
                               size_t n,
                               const double *features,
                               size_t feature_dim,
                               size_t n_o,
                               double n_t,
                               double objectiveness_floor,
                               struct RellocPair *out,
                               size_t capacity,
                               size_t *out_len);

// # Safety
// `path` is a NUL-terminated path, `out` a valid pointer.
enum RellocStatus relloc_graph_load(const char *path, struct RellocGraph **out);

// # Safety
// `graph` comes from [`relloc_graph_load`].
enum RellocStatus relloc_graph_num_nodes(const struct RellocGraph *graph, size_t *out);

// Normalized adjacency weight from node `v` to node `u`.
//
// # Safety
// `graph` comes from [`relloc_graph_load`].
enum RellocStatus relloc_graph_weight(const struct RellocGraph *graph,
                                      size_t v,
                                      size_t u,
                                      double *out);

// # Safety
// `graph` comes from [`relloc_graph_load`] and is not used afterwards. Null is ignored.
void relloc_graph_free(struct RellocGraph *graph);

// Loads the predicate model from a checkpoint and word vectors from a text
// embedding file.
//
// # Safety
// Both paths are NUL-terminated, `out` is a valid pointer.
enum RellocStatus relloc_predictor_load(const char *ckpt_dir,
                                        const char *embeddings_file,
                                        struct RellocPredictor **out);

// # Safety
// `predictor` comes from [`relloc_predictor_load`].
enum RellocStatus relloc_predictor_num_predicates(const struct RellocPredictor *predictor,
                                                  size_t *out);

// Predicate probabilities for one pair. `sub_feature` and `ob_feature` hold
// `feature_dim` doubles each; labels are category names known to the word
// vectors. `out` receives one probability per predicate.
//
// # Safety
// Pointers cover the lengths given; `out` covers `capacity` doubles.
enum RellocStatus relloc_predict(const struct RellocPredictor *predictor,
                                 const double *sub_box,
                                 const double *ob_box,
                                 const double *sub_feature,
                                 const double *ob_feature,
                                 size_t feature_dim,
                                 const char *sub_label,
                                 const char *ob_label,
                                 double *out,
                                 size_t capacity);

// # Safety
// `predictor` comes from [`relloc_predictor_load`] and is not used afterwards. Null is ignored.
void relloc_predictor_free(struct RellocPredictor *predictor);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RELLOC_H */
