#ifndef FLAKEMINE_H
#define FLAKEMINE_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum FlakemineStatus {
  FLAKEMINE_STATUS_OK = 0,
  FLAKEMINE_STATUS_NULL_ARGUMENT = 1,
  FLAKEMINE_STATUS_INVALID_UTF8 = 2,
  FLAKEMINE_STATUS_INVALID_ARGUMENT = 3,
  FLAKEMINE_STATUS_IO = 4,
  FLAKEMINE_STATUS_PARSE = 5,
  FLAKEMINE_STATUS_OUT_OF_RANGE = 6,
  FLAKEMINE_STATUS_PANIC = 7,
} FlakemineStatus;

// Outcome of one test in one run.
typedef enum FlakemineVerdict {
  FLAKEMINE_VERDICT_PASSED = 0,
  FLAKEMINE_VERDICT_FAILED = 1,
  FLAKEMINE_VERDICT_ERROR = 2,
  FLAKEMINE_VERDICT_SKIPPED = 3,
} FlakemineVerdict;

typedef enum FlakemineFlakiness {
  FLAKEMINE_FLAKINESS_NOT_FLAKY = 0,
  FLAKEMINE_FLAKINESS_NON_ORDER_DEPENDENT = 1,
  FLAKEMINE_FLAKINESS_ORDER_DEPENDENT = 2,
  FLAKEMINE_FLAKINESS_INFRASTRUCTURE = 3,
} FlakemineFlakiness;

// Parsed input-csv.
typedef struct FlakemineInput FlakemineInput;

// Tests-overview built from a results tree.
typedef struct FlakemineOverview FlakemineOverview;

// Verdict counts of one overview row.
typedef struct FlakemineCounts {
  uint64_t passed_same;
  uint64_t failed_same;
  uint64_t error_same;
  uint64_t skipped_same;
  uint64_t passed_random;
  uint64_t failed_random;
  uint64_t error_random;
  uint64_t skipped_random;
} FlakemineCounts;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next call into this library on the same thread.
const char *flakemine_last_error(void);

// Library version as a static string.
const char *flakemine_version(void);

// Seed of random-order run `run` in iteration `iteration`. Without a base
// seed (`has_base_seed` false) the run index is the seed.
uint64_t flakemine_derive_run_seed(bool has_base_seed,
                                   uint64_t base_seed,
                                   uint64_t iteration,
                                   uint64_t run);

// Whether a sequence of verdicts contains a pass and a failure or error.
//
// # Safety
// `verdicts` must point to `len` valid values (or be null with `len` 0);
// `out` must be writable.
enum FlakemineStatus flakemine_is_flaky(const enum FlakemineVerdict *verdicts,
                                        size_t len,
                                        bool *out);

// Parses an input-csv file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum FlakemineStatus flakemine_input_parse(const char *path, struct FlakemineInput **out);

// Number of rows; 0 for null.
//
// # Safety
// `input` must be null or come from [`flakemine_input_parse`].
size_t flakemine_input_len(const struct FlakemineInput *input);

// Project name of row `index`, or null if out of range.
//
// # Safety
// `input` must be null or come from [`flakemine_input_parse`].
const char *flakemine_input_project_name(const struct FlakemineInput *input, size_t index);

// Project URL of row `index`, or null if out of range.
//
// # Safety
// `input` must be null or come from [`flakemine_input_parse`].
const char *flakemine_input_project_url(const struct FlakemineInput *input, size_t index);

// Input-csv line on which row `index` starts, or 0 if out of range.
//
// # Safety
// `input` must be null or come from [`flakemine_input_parse`].
uint64_t flakemine_input_line_number(const struct FlakemineInput *input, size_t index);

// # Safety
// `input` must be null or come from [`flakemine_input_parse`], and is
// invalid afterwards.
void flakemine_input_free(struct FlakemineInput *input);

// Discovers all results-directories below `path` and builds the
// tests-overview over them.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum FlakemineStatus flakemine_overview_build(const char *path, struct FlakemineOverview **out);

// Number of rows, flaky or not; 0 for null.
//
// # Safety
// `overview` must be null or come from [`flakemine_overview_build`].
size_t flakemine_overview_len(const struct FlakemineOverview *overview);

// # Safety
// `overview` must be null or come from [`flakemine_overview_build`].
const char *flakemine_overview_project_name(const struct FlakemineOverview *overview, size_t index);

// # Safety
// `overview` must be null or come from [`flakemine_overview_build`].
const char *flakemine_overview_test_name(const struct FlakemineOverview *overview, size_t index);

// Verdict and counts of row `index`.
//
// # Safety
// `overview` must come from [`flakemine_overview_build`]; `verdict` and
// `counts` must be writable or null.
enum FlakemineStatus flakemine_overview_row(const struct FlakemineOverview *overview,
                                            size_t index,
                                            enum FlakemineFlakiness *verdict,
                                            struct FlakemineCounts *counts);

// Writes the tests-overview CSV to `path`.
//
// # Safety
// `overview` must come from [`flakemine_overview_build`] and `path` be a
// NUL-terminated string.
enum FlakemineStatus flakemine_overview_write_csv(const struct FlakemineOverview *overview,
                                                  const char *path,
                                                  bool include_not_flaky);

// # Safety
// `overview` must be null or come from [`flakemine_overview_build`], and
// is invalid afterwards.
void flakemine_overview_free(struct FlakemineOverview *overview);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLAKEMINE_H */
