//! Metric definitions evaluated record by record, straight from the
//! formulas, sharing nothing with the library's aggregation code.

use dealbench::metrics::DealRecord;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Default)]
pub struct Expected {
    pub prr_mean: Option<f64>,
    pub tp_cents: i64,
    pub rp: Option<f64>,
    pub dr: Option<f64>,
    pub pr: Option<f64>,
    pub obr: Option<f64>,
    pub owr: Option<f64>,
    pub opr: Option<f64>,
    pub dlr: Option<f64>,
}

pub fn brute_force(deals: &[DealRecord], tp_min_cents: i64) -> Expected {
    let mut n = 0u32;
    let mut deals_closed = 0u32;
    let (mut over, mut below, mut over_retail, mut dead) = (0u32, 0u32, 0u32, 0u32);
    let mut tp = 0i64;
    let (mut prr_sum, mut pr_sum) = (0.0f64, 0.0f64);
    for d in deals {
        if d.aborted {
            continue;
        }
        n += 1;
        if d.deadlock {
            dead += 1;
        }
        if !d.accepted {
            continue;
        }
        let p = d.final_price.unwrap().cents();
        let (r, w, b) = (d.p_r.cents(), d.p_w.cents(), d.beta.cents());
        deals_closed += 1;
        tp += p - w;
        prr_sum += (r - p) as f64 / r as f64;
        pr_sum += (p - w) as f64 / w as f64;
        if p > b {
            over += 1;
        }
        if p < w {
            below += 1;
        }
        if p > r {
            over_retail += 1;
        }
    }
    let per = |k: u32, m: u32| if m == 0 { None } else { Some(k as f64 / m as f64) };
    let avg = |s: f64| if deals_closed == 0 { None } else { Some(s / deals_closed as f64) };
    Expected {
        prr_mean: avg(prr_sum),
        tp_cents: tp,
        rp: (tp_min_cents > 0).then(|| tp as f64 / tp_min_cents as f64),
        dr: per(deals_closed, n),
        pr: avg(pr_sum),
        obr: per(over, n),
        owr: per(below, n),
        opr: per(over_retail, deals_closed),
        dlr: per(dead, n),
    }
}

/// Random fixture of at most 20 records mixing deals, rejections,
/// deadlocks, aborts and every kind of anomaly.
pub fn random_fixture(seed: u64) -> Vec<DealRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = rng.random_range(1..=20);
    (0..len)
        .map(|i| {
            let r = rng.random_range(1_000i64..5_000_000);
            let w = rng.random_range(r / 2..r);
            let b = rng.random_range(r * 7 / 10..r * 13 / 10);
            let kind = rng.random_range(0..10);
            let aborted = kind == 0;
            let accepted = kind >= 4;
            let deadlock = kind == 1 || kind == 2;
            let price = accepted.then(|| rng.random_range(w * 8 / 10..r * 12 / 10));
            DealRecord {
                case_id: format!("c{i}"),
                product_name: format!("p{i}"),
                category: Default::default(),
                p_r: dealbench::Money::from_cents(r),
                p_w: dealbench::Money::from_cents(w),
                beta: dealbench::Money::from_cents(b),
                budget_level: None,
                final_price: price.map(dealbench::Money::from_cents),
                accepted,
                deadlock,
                aborted,
                buyer_id: "b".into(),
                seller_id: "s".into(),
                flags: Default::default(),
            }
        })
        .collect()
}

pub fn close(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= tol,
        _ => false,
    }
}
