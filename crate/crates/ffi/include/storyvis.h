#ifndef STORYVIS_H
#define STORYVIS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SvStatus {
  SV_STATUS_OK = 0,
  SV_STATUS_NULL_POINTER = 1,
  SV_STATUS_INVALID_ARGUMENT = 2,
  SV_STATUS_PARSE_ERROR = 3,
  SV_STATUS_SHAPE_ERROR = 4,
  SV_STATUS_INDEX_OUT_OF_RANGE = 5,
  SV_STATUS_PANIC = 6,
} SvStatus;

/**
 * Bipartite entity/relation graph.
 */
typedef struct SvLeviGraph SvLeviGraph;

/**
 * Per-layer attention masks for one caption.
 */
typedef struct SvMaskStack SvMaskStack;

/**
 * Parsed constituency tree.
 */
typedef struct SvTree SvTree;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call into this library on the
 * same thread.
 */
const char *sv_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sv_version(void);

/**
 * Free a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void sv_string_free(char *s);

/**
 * Parse a bracketed tree such as `(S (NP (NNP Pororo)) (VP (VBZ smiles)))`.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` must be writable.
 */
enum SvStatus sv_tree_parse(const char *text, struct SvTree **out);

/**
 * # Safety
 * `tree` must come from [`sv_tree_parse`] and not be used afterwards. Null is ignored.
 */
void sv_tree_free(struct SvTree *tree);

/**
 * # Safety
 * `tree` must be a live handle; `out` must be writable.
 */
enum SvStatus sv_tree_leaf_count(const struct SvTree *tree, size_t *out);

/**
 * Height of the root; preterminals have height 1.
 *
 * # Safety
 * `tree` must be a live handle; `out` must be writable.
 */
enum SvStatus sv_tree_height(const struct SvTree *tree, size_t *out);

/**
 * Height of the lowest common ancestor of leaves `i` and `j`.
 *
 * # Safety
 * `tree` must be a live handle; `out` must be writable.
 */
enum SvStatus sv_tree_lca_height(const struct SvTree *tree, size_t i, size_t j, size_t *out);

/**
 * Build `layers` masks of shape `leaves x (memory_slots + leaves)`.
 *
 * # Safety
 * `tree` must be a live handle; `out` must be writable.
 */
enum SvStatus sv_mask_stack_build(const struct SvTree *tree,
                                  size_t layers,
                                  size_t memory_slots,
                                  bool final_layer_full,
                                  struct SvMaskStack **out);

/**
 * # Safety
 * `stack` must come from [`sv_mask_stack_build`] and not be used afterwards. Null is ignored.
 */
void sv_mask_stack_free(struct SvMaskStack *stack);

/**
 * Number of layers and the row/column count of each layer's mask.
 *
 * # Safety
 * `stack` must be a live handle; the out pointers must be writable.
 */
enum SvStatus sv_mask_stack_dims(const struct SvMaskStack *stack,
                                 size_t *layers,
                                 size_t *rows,
                                 size_t *cols);

/**
 * Copy layer `layer` (0-based) as row-major 0/1 bytes into `buf`, which
 * must hold exactly `rows * cols` bytes.
 *
 * # Safety
 * `stack` must be a live handle; `buf` must point to `len` writable bytes.
 */
enum SvStatus sv_mask_stack_copy_layer(const struct SvMaskStack *stack,
                                       size_t layer,
                                       uint8_t *buf,
                                       size_t len);

/**
 * Build a Levi graph from tab-separated `subject relation object` lines.
 *
 * # Safety
 * `tsv` must be a NUL-terminated string; `out` must be writable.
 */
enum SvStatus sv_levi_graph_from_tsv(const char *tsv, struct SvLeviGraph **out);

/**
 * # Safety
 * `graph` must come from [`sv_levi_graph_from_tsv`] and not be used afterwards. Null is ignored.
 */
void sv_levi_graph_free(struct SvLeviGraph *graph);

/**
 * Vertex, entity-vertex and directed base-edge counts.
 *
 * # Safety
 * `graph` must be a live handle; the out pointers must be writable.
 */
enum SvStatus sv_levi_graph_counts(const struct SvLeviGraph *graph,
                                   size_t *vertices,
                                   size_t *entities,
                                   size_t *edges);

/**
 * Graph as JSON. Release the string with [`sv_string_free`].
 *
 * # Safety
 * `graph` must be a live handle; `out` must be writable.
 */
enum SvStatus sv_levi_graph_to_json(const struct SvLeviGraph *graph, char **out);

/**
 * `0.5 * sum(exp(logvar) + mu^2 - 1 - logvar)` over `n` entries.
 *
 * # Safety
 * `mu` and `logvar` must each point to `n` readable doubles; `out` must be writable.
 */
enum SvStatus sv_kl_loss(const double *mu, const double *logvar, size_t n, double *out);

/**
 * Mirror-min box loss for `k` boxes given as `x1 y1 x2 y2` rows: the smaller
 * of the L1 distance to the target and to its horizontal mirror, divided by `k`.
 *
 * # Safety
 * `pred` and `target` must each point to `4 * k` readable doubles; `out` must be writable.
 */
enum SvStatus sv_bbox_mirror_loss(const double *pred, const double *target, size_t k, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STORYVIS_H */
