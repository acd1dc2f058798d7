#ifndef SHARDIR_H
#define SHARDIR_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ShardirStatus {
  SHARDIR_STATUS_OK = 0,
  SHARDIR_STATUS_NULL_ARGUMENT = 1,
  SHARDIR_STATUS_INVALID_UTF8 = 2,
  SHARDIR_STATUS_PARSE = 3,
  SHARDIR_STATUS_SHARDING = 4,
  SHARDIR_STATUS_PARTITION = 5,
  SHARDIR_STATUS_RUNTIME = 6,
  SHARDIR_STATUS_INVALID_ARGUMENT = 7,
  SHARDIR_STATUS_PANIC = 8,
} ShardirStatus;

typedef enum ShardirCollective {
  SHARDIR_COLLECTIVE_ALL_REDUCE = 0,
  SHARDIR_COLLECTIVE_ALL_GATHER = 1,
  SHARDIR_COLLECTIVE_ALL_TO_ALL = 2,
  SHARDIR_COLLECTIVE_COLLECTIVE_PERMUTE = 3,
} ShardirCollective;

/**
 * Opaque graph handle.
 */
typedef struct ShardirGraph ShardirGraph;

/**
 * Opaque partitioned-program handle.
 */
typedef struct ShardirProgram ShardirProgram;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until the
 * next call on this thread.
 */
const char *shardir_last_error(void);

/**
 * Parses graph text.
 *
 * # Safety
 * `text` must be a nul-terminated string and `out` a valid pointer.
 */
enum ShardirStatus shardir_graph_parse(const char *text, struct ShardirGraph **out);

/**
 * Built-in corpus graph `name` sized for `devices` devices.
 *
 * # Safety
 * `name` must be a nul-terminated string and `out` a valid pointer.
 */
enum ShardirStatus shardir_graph_corpus(const char *name,
                                        size_t devices,
                                        struct ShardirGraph **out);

/**
 * # Safety
 * `graph` must be NULL or a live handle.
 */
size_t shardir_graph_num_nodes(const struct ShardirGraph *graph);

/**
 * # Safety
 * `graph` must be NULL or a handle not yet freed.
 */
void shardir_graph_free(struct ShardirGraph *graph);

/**
 * Propagates shardings and partitions for `devices` devices.
 *
 * # Safety
 * `graph` must be a live handle and `out` a valid pointer.
 */
enum ShardirStatus shardir_partition(const struct ShardirGraph *graph,
                                     size_t devices,
                                     struct ShardirProgram **out);

/**
 * # Safety
 * `program` must be NULL or a live handle.
 */
size_t shardir_program_num_nodes(const struct ShardirProgram *program);

/**
 * # Safety
 * `program` must be NULL or a live handle.
 */
size_t shardir_program_collective_count(const struct ShardirProgram *program,
                                        enum ShardirCollective kind);

/**
 * Program text, owned by the handle.
 *
 * # Safety
 * `program` must be NULL or a live handle.
 */
const char *shardir_program_text(const struct ShardirProgram *program);

/**
 * # Safety
 * `program` must be NULL or a handle not yet freed.
 */
void shardir_program_free(struct ShardirProgram *program);

/**
 * Runs the partitioned graph on seeded inputs and writes the largest
 * relative error against the reference interpreter.
 *
 * # Safety
 * `graph` must be a live handle and `max_rel_error` a valid pointer.
 */
enum ShardirStatus shardir_verify(const struct ShardirGraph *graph,
                                  size_t devices,
                                  uint64_t seed,
                                  float *max_rel_error);

/**
 * Modeled time for one collective on the most square mesh of `devices`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum ShardirStatus shardir_collective_cost(enum ShardirCollective kind,
                                           double bytes_per_device,
                                           size_t devices,
                                           double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SHARDIR_H */
