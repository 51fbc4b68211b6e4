//! C ABI over the dealbench core.
//!
//! Every fallible call returns a [`DbStatus`]; on failure the message is
//! available from [`db_last_error`] on the same thread. Strings handed out
//! by the library are freed with [`db_string_free`], handles with their own
//! `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use dealbench::agents::{classify_decision, extract_price, Decision};
use dealbench::bandit::{compute_reward, BanditState, EpisodeFeedback, RewardSpec};
use dealbench::catalog::{derive_budget, load_catalog, BudgetLevel, Product};
use dealbench::engine::{Flags, Transcript};
use dealbench::metrics::{emit_report, prr, DealRecord, MetricsOptions, MetricsReport};
use dealbench::money::parse_price;
use dealbench::prompts::{StrategyAction, TemplateSet, ACTION_COUNT};
use dealbench::Money;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    InvalidArgument = 4,
    OutOfRange = 5,
    NoData = 6,
    Internal = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DbDecision {
    Continue = 0,
    Acceptance = 1,
    Rejection = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DbBudgetLevel {
    High = 0,
    Retail = 1,
    Mid = 2,
    Wholesale = 3,
    Low = 4,
}

impl From<DbBudgetLevel> for BudgetLevel {
    fn from(l: DbBudgetLevel) -> Self {
        match l {
            DbBudgetLevel::High => BudgetLevel::High,
            DbBudgetLevel::Retail => BudgetLevel::Retail,
            DbBudgetLevel::Mid => BudgetLevel::Mid,
            DbBudgetLevel::Wholesale => BudgetLevel::Wholesale,
            DbBudgetLevel::Low => BudgetLevel::Low,
        }
    }
}

/// Opaque product catalog.
pub struct DbCatalog {
    products: Vec<Product>,
}

/// Opaque bandit state over a fixed number of arms.
pub struct DbBandit {
    state: BanditState,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: DbStatus, msg: impl Into<String>) -> DbStatus {
    set_error(msg);
    status
}

/// Run `f`, turning panics into `Internal`.
fn guard(f: impl FnOnce() -> DbStatus) -> DbStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(DbStatus::Internal, "internal panic"),
    }
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, DbStatus> {
    if p.is_null() {
        return Err(fail(DbStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(DbStatus::InvalidUtf8, "argument is not valid UTF-8"))
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> DbStatus {
    match CString::new(s) {
        Ok(c) => {
            *out = c.into_raw();
            DbStatus::Ok
        }
        Err(_) => fail(DbStatus::Internal, "output contains a NUL byte"),
    }
}

macro_rules! nonnull {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(DbStatus::NullPointer, concat!(stringify!($p), " is null"));
        })+
    };
}

macro_rules! try_ffi {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Message for the last failed call on this thread, or NULL. The pointer
/// stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn db_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn db_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must come from this library and not have been freed. NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn db_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parse a price string such as "$26,995" or "24295.50" into cents.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out_cents` must be writable.
#[no_mangle]
pub unsafe extern "C" fn db_parse_price(text: *const c_char, out_cents: *mut i64) -> DbStatus {
    guard(|| {
        nonnull!(out_cents);
        let s = try_ffi!(read_str(text));
        match parse_price(s) {
            Ok(m) => {
                *out_cents = m.cents();
                DbStatus::Ok
            }
            Err(e) => fail(DbStatus::Parse, e.to_string()),
        }
    })
}

/// Rule-based seller price extraction. `*out_found` is false when the
/// message names no offer.
///
/// # Safety
/// `message` must be a NUL-terminated string; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn db_extract_price(
    message: *const c_char,
    out_cents: *mut i64,
    out_found: *mut bool,
) -> DbStatus {
    guard(|| {
        nonnull!(out_cents, out_found);
        let s = try_ffi!(read_str(message));
        let p = extract_price(s);
        *out_found = p.is_some();
        *out_cents = p.map_or(0, Money::cents);
        DbStatus::Ok
    })
}

/// Rule-based judge. `seller_message` may be NULL.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn db_classify_decision(
    buyer_message: *const c_char,
    seller_message: *const c_char,
    out: *mut DbDecision,
) -> DbStatus {
    guard(|| {
        nonnull!(out);
        let buyer = try_ffi!(read_str(buyer_message));
        let seller = if seller_message.is_null() {
            None
        } else {
            Some(try_ffi!(read_str(seller_message)))
        };
        *out = match classify_decision(buyer, seller) {
            Decision::Continue => DbDecision::Continue,
            Decision::Acceptance => DbDecision::Acceptance,
            Decision::Rejection => DbDecision::Rejection,
        };
        DbStatus::Ok
    })
}

/// Price reduction rate (retail − final) / retail.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn db_prr(retail_cents: i64, final_cents: i64, out: *mut f64) -> DbStatus {
    guard(|| {
        nonnull!(out);
        if retail_cents <= 0 {
            return fail(DbStatus::InvalidArgument, "retail price must be positive");
        }
        *out = prr(Money::from_cents(retail_cents), Money::from_cents(final_cents));
        DbStatus::Ok
    })
}

/// Load a catalog from a JSON array or JSON-lines text.
///
/// # Safety
/// `json` must be NUL-terminated; `out` must be writable. Free the handle
/// with [`db_catalog_free`].
#[no_mangle]
pub unsafe extern "C" fn db_catalog_load(json: *const c_char, out: *mut *mut DbCatalog) -> DbStatus {
    guard(|| {
        nonnull!(out);
        let s = try_ffi!(read_str(json));
        match load_catalog(s.as_bytes()) {
            Ok(products) => {
                *out = Box::into_raw(Box::new(DbCatalog { products }));
                DbStatus::Ok
            }
            Err(e) => fail(DbStatus::Parse, e.to_string()),
        }
    })
}

/// # Safety
/// `catalog` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn db_catalog_len(catalog: *const DbCatalog, out: *mut usize) -> DbStatus {
    guard(|| {
        nonnull!(catalog, out);
        *out = (*catalog).products.len();
        DbStatus::Ok
    })
}

/// Retail and wholesale price of product `index`, in cents.
///
/// # Safety
/// `catalog` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn db_catalog_prices(
    catalog: *const DbCatalog,
    index: usize,
    out_retail: *mut i64,
    out_wholesale: *mut i64,
) -> DbStatus {
    guard(|| {
        nonnull!(catalog, out_retail, out_wholesale);
        let Some(p) = (&*catalog).products.get(index) else {
            return fail(DbStatus::OutOfRange, format!("no product {index}"));
        };
        *out_retail = p.retail_price.cents();
        *out_wholesale = p.wholesale_price.cents();
        DbStatus::Ok
    })
}

/// Buyer budget for product `index` at `level`, in cents.
///
/// # Safety
/// `catalog` must be a live handle; `out_cents` must be writable.
#[no_mangle]
pub unsafe extern "C" fn db_catalog_budget(
    catalog: *const DbCatalog,
    index: usize,
    level: DbBudgetLevel,
    out_cents: *mut i64,
) -> DbStatus {
    guard(|| {
        nonnull!(catalog, out_cents);
        let Some(p) = (&*catalog).products.get(index) else {
            return fail(DbStatus::OutOfRange, format!("no product {index}"));
        };
        *out_cents = derive_budget(p, level.into()).cents();
        DbStatus::Ok
    })
}

/// # Safety
/// `catalog` must come from [`db_catalog_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn db_catalog_free(catalog: *mut DbCatalog) {
    if !catalog.is_null() {
        drop(Box::from_raw(catalog));
    }
}

/// Number of strategy prompt configurations.
#[no_mangle]
pub extern "C" fn db_action_count() -> usize {
    ACTION_COUNT
}

/// Buyer system prompt (with placeholders) extended by strategy `index`.
///
/// # Safety
/// `out` must be writable; free the result with [`db_string_free`].
#[no_mangle]
pub unsafe extern "C" fn db_render_strategy_prompt(index: usize, out: *mut *mut c_char) -> DbStatus {
    guard(|| {
        nonnull!(out);
        match StrategyAction::from_index(index) {
            Ok(a) => write_string(out, TemplateSet::default().strategy_prompt(&a).body),
            Err(e) => fail(DbStatus::OutOfRange, e.to_string()),
        }
    })
}

/// Shaped reward for one episode outcome.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn db_compute_reward(
    over_budget: bool,
    below_wholesale: bool,
    over_retail: bool,
    deadlock: bool,
    level: DbBudgetLevel,
    out: *mut f64,
) -> DbStatus {
    guard(|| {
        nonnull!(out);
        let fb = EpisodeFeedback {
            flags: Flags {
                over_budget,
                below_wholesale,
                over_retail,
            },
            deadlock,
        };
        *out = compute_reward(&fb, level.into(), &RewardSpec::default());
        DbStatus::Ok
    })
}

/// Fresh bandit: θ = 0, baseline 0, every arm active.
///
/// # Safety
/// `out` must be writable. Free with [`db_bandit_free`].
#[no_mangle]
pub unsafe extern "C" fn db_bandit_new(arms: usize, out: *mut *mut DbBandit) -> DbStatus {
    guard(|| {
        nonnull!(out);
        if arms == 0 {
            return fail(DbStatus::InvalidArgument, "need at least one arm");
        }
        *out = Box::into_raw(Box::new(DbBandit {
            state: BanditState::new(arms),
        }));
        DbStatus::Ok
    })
}

/// One policy-gradient update for `arm`; writes the advantage when
/// `out_advantage` is not NULL.
///
/// # Safety
/// `bandit` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn db_bandit_update(
    bandit: *mut DbBandit,
    arm: usize,
    reward: f64,
    eta: f64,
    out_advantage: *mut f64,
) -> DbStatus {
    guard(|| {
        nonnull!(bandit);
        match (*bandit).state.update(arm, reward, eta, false) {
            Ok(t) => {
                if !out_advantage.is_null() {
                    *out_advantage = t.advantage;
                }
                DbStatus::Ok
            }
            Err(e) => fail(DbStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Keep only the `k` highest-θ arms active.
///
/// # Safety
/// `bandit` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn db_bandit_restrict(bandit: *mut DbBandit, k: usize) -> DbStatus {
    guard(|| {
        nonnull!(bandit);
        let b = &mut (*bandit).state;
        if k == 0 || k > b.theta.len() {
            return fail(DbStatus::InvalidArgument, format!("k = {k} out of range"));
        }
        let current = b.active_set.clone();
        b.restrict_to_top(&current, k);
        DbStatus::Ok
    })
}

/// Softmax probabilities over all arms (zero outside the active set) into
/// `out[0..len]`; `len` must equal the arm count.
///
/// # Safety
/// `bandit` must be a live handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn db_bandit_policy(bandit: *const DbBandit, out: *mut f64, len: usize) -> DbStatus {
    guard(|| {
        nonnull!(bandit, out);
        let b = &(*bandit).state;
        if len != b.theta.len() {
            return fail(DbStatus::InvalidArgument, format!("buffer holds {len}, need {}", b.theta.len()));
        }
        let dst = std::slice::from_raw_parts_mut(out, len);
        dst.fill(0.0);
        for (&arm, p) in b.active_set.iter().zip(b.policy()) {
            dst[arm] = p;
        }
        DbStatus::Ok
    })
}

/// θ and baseline accessors.
///
/// # Safety
/// `bandit` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn db_bandit_theta(bandit: *const DbBandit, arm: usize, out: *mut f64) -> DbStatus {
    guard(|| {
        nonnull!(bandit, out);
        match (&*bandit).state.theta.get(arm) {
            Some(t) => {
                *out = *t;
                DbStatus::Ok
            }
            None => fail(DbStatus::OutOfRange, format!("no arm {arm}")),
        }
    })
}

/// # Safety
/// `bandit` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn db_bandit_baseline(bandit: *const DbBandit, out: *mut f64) -> DbStatus {
    guard(|| {
        nonnull!(bandit, out);
        *out = (*bandit).state.baseline;
        DbStatus::Ok
    })
}

/// Arg-max θ, lowest index on ties.
///
/// # Safety
/// `bandit` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn db_bandit_best(bandit: *const DbBandit, out: *mut usize) -> DbStatus {
    guard(|| {
        nonnull!(bandit, out);
        *out = (*bandit).state.best_action();
        DbStatus::Ok
    })
}

/// # Safety
/// `bandit` must come from [`db_bandit_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn db_bandit_free(bandit: *mut DbBandit) {
    if !bandit.is_null() {
        drop(Box::from_raw(bandit));
    }
}

/// Per-cell metrics CSV from transcript JSON lines. `reference_seller` may
/// be NULL. Returns `NoData` when no negotiation completed.
///
/// # Safety
/// String arguments must be NUL-terminated; `out_csv` must be writable.
/// Free the result with [`db_string_free`].
#[no_mangle]
pub unsafe extern "C" fn db_aggregate_csv(
    transcripts_jsonl: *const c_char,
    reference_seller: *const c_char,
    out_csv: *mut *mut c_char,
) -> DbStatus {
    guard(|| {
        nonnull!(out_csv);
        let text = try_ffi!(read_str(transcripts_jsonl));
        let reference = if reference_seller.is_null() {
            None
        } else {
            Some(try_ffi!(read_str(reference_seller)).to_string())
        };
        let mut deals = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            match serde_json::from_str::<Transcript>(line) {
                Ok(t) => deals.push(DealRecord::from_transcript(&t)),
                Err(e) => return fail(DbStatus::Parse, format!("line {}: {e}", i + 1)),
            }
        }
        if deals.iter().all(|d| d.aborted) {
            return fail(DbStatus::NoData, "no completed negotiations");
        }
        let opts = MetricsOptions {
            reference_seller: reference,
            ..Default::default()
        };
        match emit_report(&MetricsReport::build(&deals, &opts), "csv") {
            Ok(csv) => write_string(out_csv, csv),
            Err(e) => fail(DbStatus::Internal, e.to_string()),
        }
    })
}
