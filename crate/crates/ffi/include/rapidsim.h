#ifndef RAPIDSIM_H
#define RAPIDSIM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define RAPIDSIM_MODE_FROM_RUN 0

#define RAPIDSIM_MODE_FLATTENED 1

#define RAPIDSIM_MODE_HIERARCHICAL 2

// Result codes of every fallible call.
typedef enum RapidsimStatus {
  RAPIDSIM_STATUS_OK = 0,
  // A required pointer argument was NULL.
  RAPIDSIM_STATUS_NULL_ARGUMENT = 1,
  // An input string was not valid UTF-8.
  RAPIDSIM_STATUS_INVALID_UTF8 = 2,
  // A document failed to parse or validate.
  RAPIDSIM_STATUS_CONFIG = 3,
  // The configuration does not fit in device memory.
  RAPIDSIM_STATUS_INFEASIBLE = 4,
  // Routing, trace or simulation failure.
  RAPIDSIM_STATUS_SIMULATION = 5,
  // An argument value is out of range.
  RAPIDSIM_STATUS_INVALID_ARGUMENT = 6,
  // The library panicked; the handle involved should be discarded.
  RAPIDSIM_STATUS_INTERNAL = 7,
} RapidsimStatus;

// Outcome of a single simulated run.
typedef struct RapidsimResult RapidsimResult;

// Parsed and validated model, hardware and run documents.
typedef struct RapidsimSpecs RapidsimSpecs;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or an empty string.
// The pointer stays valid until the next library call on the same thread.
const char *rapidsim_last_error(void);

// Library version as a static string.
const char *rapidsim_version(void);

// Parse the three JSON documents into a specs handle.
//
// # Safety
// The document pointers must be NULL or NUL-terminated strings; `out`
// must be NULL or writable.
enum RapidsimStatus rapidsim_specs_parse(const char *model_json,
                                         const char *hardware_json,
                                         const char *run_json,
                                         struct RapidsimSpecs **out);

// # Safety
// `specs` must be NULL or a handle from [`rapidsim_specs_parse`] that has
// not been freed.
void rapidsim_specs_free(struct RapidsimSpecs *specs);

// Replace the run seed (and the fault generator's seed, if any).
//
// # Safety
// `specs` must be NULL or a live specs handle.
enum RapidsimStatus rapidsim_specs_set_seed(struct RapidsimSpecs *specs, uint64_t seed);

// Number of GPUs described by the topology.
//
// # Safety
// `specs` must be NULL or a live specs handle; `out` NULL or writable.
enum RapidsimStatus rapidsim_specs_num_gpus(const struct RapidsimSpecs *specs, uint64_t *out);

// Simulate one run. `mode` is one of the `RAPIDSIM_MODE_*` constants.
//
// # Safety
// `specs` must be NULL or a live specs handle; `out` NULL or writable.
enum RapidsimStatus rapidsim_run(const struct RapidsimSpecs *specs,
                                 uint32_t mode,
                                 struct RapidsimResult **out);

// # Safety
// `result` must be NULL or a handle from [`rapidsim_run`] that has not
// been freed.
void rapidsim_result_free(struct RapidsimResult *result);

// Predicted end-to-end time in seconds.
//
// # Safety
// `result` must be NULL or a live result handle; `out` NULL or writable.
enum RapidsimStatus rapidsim_result_total_time(const struct RapidsimResult *result, double *out);

// Per-GPU memory footprint in bytes.
//
// # Safety
// `result` must be NULL or a live result handle; `out` NULL or writable.
enum RapidsimStatus rapidsim_result_memory_bytes(const struct RapidsimResult *result,
                                                 uint64_t *out);

// Full result as a JSON document. Release with [`rapidsim_string_free`].
//
// # Safety
// `result` must be NULL or a live result handle; `out` NULL or writable.
enum RapidsimStatus rapidsim_result_json(const struct RapidsimResult *result, char **out);

// Sweep the run document's grid; rows as a JSON array. Release with
// [`rapidsim_string_free`].
//
// # Safety
// `specs` must be NULL or a live specs handle; `out` NULL or writable.
enum RapidsimStatus rapidsim_sweep_json(const struct RapidsimSpecs *specs, char **out);

// Single-link fault Monte Carlo with `iterations` samples (0 keeps the
// run document's count). Release the JSON with [`rapidsim_string_free`].
//
// # Safety
// `specs` must be NULL or a live specs handle; `out` NULL or writable.
enum RapidsimStatus rapidsim_faults_json(const struct RapidsimSpecs *specs,
                                         uint64_t iterations,
                                         char **out);

// # Safety
// `s` must be NULL or a string returned by this library that has not been
// freed.
void rapidsim_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RAPIDSIM_H */
