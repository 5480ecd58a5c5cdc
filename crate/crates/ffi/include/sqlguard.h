#ifndef SQLGUARD_H
#define SQLGUARD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SgStatus {
  SG_STATUS_OK = 0,
  SG_STATUS_NULL_POINTER = 1,
  SG_STATUS_INVALID_ARGUMENT = 2,
  SG_STATUS_INVALID_UTF8 = 3,
  SG_STATUS_DATABASE = 4,
  SG_STATUS_EMPTY = 5,
  SG_STATUS_PANIC = 99,
} SgStatus;

typedef enum SgValidity {
  SG_VALIDITY_VALID = 0,
  SG_VALIDITY_EMPTY = 1,
  SG_VALIDITY_ALL_NULL = 2,
  SG_VALIDITY_FAILED = 3,
} SgValidity;

/**
 * Read-only connection to a SQLite database.
 */
typedef struct SgDatabase SgDatabase;

/**
 * Accumulates per-question outcomes and reports reliability scores.
 */
typedef struct SgScorer SgScorer;

typedef struct SgOutcomeCounts {
  size_t ans_correct;
  size_t ans_wrong;
  size_t ans_abstain;
  size_t una_attempt;
  size_t una_abstain;
} SgOutcomeCounts;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null. The pointer
 * stays valid until the next sqlguard call on the same thread.
 */
const char *sg_last_error_message(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *sg_version(void);

/**
 * Entropy in nats of one token position given its top alternatives as log-probabilities.
 *
 * # Safety
 * `logprobs` must point to `len` readable doubles; `out` must be writable.
 */
enum SgStatus sg_token_entropy(const double *logprobs, size_t len, double *out);

/**
 * Nearest-rank entropy threshold covering share `rho` of the population.
 *
 * # Safety
 * `entropies` must point to `len` readable doubles; `out` must be writable.
 */
enum SgStatus sg_calibrate_threshold(const double *entropies, size_t len, double rho, double *out);

/**
 * Extracts the SQL statement from raw model text. `*out_sql` receives a
 * newly allocated string, or null when the text is an abstention. Release
 * it with [`sg_string_free`].
 *
 * # Safety
 * `raw` must be a nul-terminated string; `out_sql` must be writable.
 */
enum SgStatus sg_postprocess(const char *raw, char **out_sql);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void sg_string_free(char *s);

struct SgScorer *sg_scorer_new(void);

/**
 * Records one question. `correct` is ignored unless the question is
 * answerable and a query was generated.
 *
 * # Safety
 * `scorer` must be a live handle from [`sg_scorer_new`].
 */
enum SgStatus sg_scorer_push(struct SgScorer *scorer, int answerable, int generated, int correct);

/**
 * Reliability score (percent) with a fixed penalty.
 *
 * # Safety
 * `scorer` must be a live handle; `out` must be writable.
 */
enum SgStatus sg_scorer_rs(const struct SgScorer *scorer, double penalty, double *out);

/**
 * Reliability score (percent) with the penalty set to the number of recorded outcomes.
 *
 * # Safety
 * `scorer` must be a live handle; `out` must be writable.
 */
enum SgStatus sg_scorer_rs_population(const struct SgScorer *scorer, double *out);

/**
 * # Safety
 * `scorer` must be a live handle; `out` must be writable.
 */
enum SgStatus sg_scorer_counts(const struct SgScorer *scorer, struct SgOutcomeCounts *out);

/**
 * # Safety
 * `scorer` must come from [`sg_scorer_new`] and not have been freed. Null is ignored.
 */
void sg_scorer_free(struct SgScorer *scorer);

/**
 * Opens a database read-only.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum SgStatus sg_db_open(const char *path, struct SgDatabase **out);

/**
 * Executes the first statement of `sql` and classifies the result. Query
 * errors and timeouts are reported as [`SgValidity::Failed`], not as a
 * non-OK status; the error text is still available from
 * [`sg_last_error_message`].
 *
 * # Safety
 * `db` must be a live handle; `sql` a nul-terminated string; `out` writable.
 */
enum SgStatus sg_db_classify(const struct SgDatabase *db,
                             const char *sql,
                             uint64_t timeout_ms,
                             enum SgValidity *out);

/**
 * # Safety
 * `db` must come from [`sg_db_open`] and not have been freed. Null is ignored.
 */
void sg_db_free(struct SgDatabase *db);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SQLGUARD_H */
