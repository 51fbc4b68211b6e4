#ifndef DEALBENCH_H
#define DEALBENCH_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  DB_STATUS_OK = 0,
  DB_STATUS_NULL_POINTER = 1,
  DB_STATUS_INVALID_UTF8 = 2,
  DB_STATUS_PARSE = 3,
  DB_STATUS_INVALID_ARGUMENT = 4,
  DB_STATUS_OUT_OF_RANGE = 5,
  DB_STATUS_NO_DATA = 6,
  DB_STATUS_INTERNAL = 7,
} DbStatus;

typedef enum {
  DB_DECISION_CONTINUE = 0,
  DB_DECISION_ACCEPTANCE = 1,
  DB_DECISION_REJECTION = 2,
} DbDecision;

typedef enum {
  DB_BUDGET_LEVEL_HIGH = 0,
  DB_BUDGET_LEVEL_RETAIL = 1,
  DB_BUDGET_LEVEL_MID = 2,
  DB_BUDGET_LEVEL_WHOLESALE = 3,
  DB_BUDGET_LEVEL_LOW = 4,
} DbBudgetLevel;

/**
 * Opaque bandit state over a fixed number of arms.
 */
typedef struct DbBandit DbBandit;

/**
 * Opaque product catalog.
 */
typedef struct DbCatalog DbCatalog;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. The pointer
 * stays valid until the next call into the library on this thread.
 */
const char *db_last_error(void);

/**
 * Library version, static storage.
 */
const char *db_version(void);

/**
 * # Safety
 * `s` must come from this library and not have been freed. NULL is a no-op.
 */
void db_string_free(char *s);

/**
 * Parse a price string such as "$26,995" or "24295.50" into cents.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out_cents` must be writable.
 */
DbStatus db_parse_price(const char *text, int64_t *out_cents);

/**
 * Rule-based seller price extraction. `*out_found` is false when the
 * message names no offer.
 *
 * # Safety
 * `message` must be a NUL-terminated string; outputs must be writable.
 */
DbStatus db_extract_price(const char *message, int64_t *out_cents, bool *out_found);

/**
 * Rule-based judge. `seller_message` may be NULL.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out` must be writable.
 */
DbStatus db_classify_decision(const char *buyer_message,
                              const char *seller_message,
                              DbDecision *out);

/**
 * Price reduction rate (retail − final) / retail.
 *
 * # Safety
 * `out` must be writable.
 */
DbStatus db_prr(int64_t retail_cents, int64_t final_cents, double *out);

/**
 * Load a catalog from a JSON array or JSON-lines text.
 *
 * # Safety
 * `json` must be NUL-terminated; `out` must be writable. Free the handle
 * with [`db_catalog_free`].
 */
DbStatus db_catalog_load(const char *json, DbCatalog **out);

/**
 * # Safety
 * `catalog` must be a live handle; `out` must be writable.
 */
DbStatus db_catalog_len(const DbCatalog *catalog, size_t *out);

/**
 * Retail and wholesale price of product `index`, in cents.
 *
 * # Safety
 * `catalog` must be a live handle; outputs must be writable.
 */
DbStatus db_catalog_prices(const DbCatalog *catalog,
                           size_t index,
                           int64_t *out_retail,
                           int64_t *out_wholesale);

/**
 * Buyer budget for product `index` at `level`, in cents.
 *
 * # Safety
 * `catalog` must be a live handle; `out_cents` must be writable.
 */
DbStatus db_catalog_budget(const DbCatalog *catalog,
                           size_t index,
                           DbBudgetLevel level,
                           int64_t *out_cents);

/**
 * # Safety
 * `catalog` must come from [`db_catalog_load`] and not be used afterwards.
 */
void db_catalog_free(DbCatalog *catalog);

/**
 * Number of strategy prompt configurations.
 */
size_t db_action_count(void);

/**
 * Buyer system prompt (with placeholders) extended by strategy `index`.
 *
 * # Safety
 * `out` must be writable; free the result with [`db_string_free`].
 */
DbStatus db_render_strategy_prompt(size_t index, char **out);

/**
 * Shaped reward for one episode outcome.
 *
 * # Safety
 * `out` must be writable.
 */
DbStatus db_compute_reward(bool over_budget,
                           bool below_wholesale,
                           bool over_retail,
                           bool deadlock,
                           DbBudgetLevel level,
                           double *out);

/**
 * Fresh bandit: θ = 0, baseline 0, every arm active.
 *
 * # Safety
 * `out` must be writable. Free with [`db_bandit_free`].
 */
DbStatus db_bandit_new(size_t arms, DbBandit **out);

/**
 * One policy-gradient update for `arm`; writes the advantage when
 * `out_advantage` is not NULL.
 *
 * # Safety
 * `bandit` must be a live handle.
 */
DbStatus db_bandit_update(DbBandit *bandit,
                          size_t arm,
                          double reward,
                          double eta,
                          double *out_advantage);

/**
 * Keep only the `k` highest-θ arms active.
 *
 * # Safety
 * `bandit` must be a live handle.
 */
DbStatus db_bandit_restrict(DbBandit *bandit, size_t k);

/**
 * Softmax probabilities over all arms (zero outside the active set) into
 * `out[0..len]`; `len` must equal the arm count.
 *
 * # Safety
 * `bandit` must be a live handle; `out` must hold `len` doubles.
 */
DbStatus db_bandit_policy(const DbBandit *bandit, double *out, size_t len);

/**
 * θ and baseline accessors.
 *
 * # Safety
 * `bandit` must be a live handle; `out` must be writable.
 */
DbStatus db_bandit_theta(const DbBandit *bandit, size_t arm, double *out);

/**
 * # Safety
 * `bandit` must be a live handle; `out` must be writable.
 */
DbStatus db_bandit_baseline(const DbBandit *bandit, double *out);

/**
 * Arg-max θ, lowest index on ties.
 *
 * # Safety
 * `bandit` must be a live handle; `out` must be writable.
 */
DbStatus db_bandit_best(const DbBandit *bandit, size_t *out);

/**
 * # Safety
 * `bandit` must come from [`db_bandit_new`] and not be used afterwards.
 */
void db_bandit_free(DbBandit *bandit);

/**
 * Per-cell metrics CSV from transcript JSON lines. `reference_seller` may
 * be NULL. Returns `NoData` when no negotiation completed.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out_csv` must be writable.
 * Free the result with [`db_string_free`].
 */
DbStatus db_aggregate_csv(const char *transcripts_jsonl,
                          const char *reference_seller,
                          char **out_csv);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEALBENCH_H */
