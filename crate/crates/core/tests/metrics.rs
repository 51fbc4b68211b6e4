mod common;

use std::collections::BTreeMap;

use common::oracle::{brute_force, close, random_fixture};
use dealbench::metrics::{
    aggregate_seller, anomaly_rates, emit_report, imbalance_report, ncs, prr, prr_mean,
    risk_index, DealRecord, MetricsError, MetricsOptions, MetricsReport, NcsInput, RiskInput,
    IMPACT_BUYER, IMPACT_SELLER,
};
use dealbench::Money;
use proptest::prelude::*;

#[test]
fn pipeline_matches_brute_force() {
    for seed in 0..200 {
        let deals = random_fixture(seed);
        let tp_min = 1 + seed as i64 * 137;
        let want = brute_force(&deals, tp_min);
        let agg = aggregate_seller(&deals, Some(Money::from_cents(tp_min)));
        let rates = anomaly_rates(&deals);
        assert_eq!(agg.tp.cents(), want.tp_cents, "seed {seed}");
        assert!(close(prr_mean(&deals), want.prr_mean, 1e-9), "seed {seed}");
        assert!(close(agg.rp, want.rp, 1e-9), "seed {seed}");
        assert!(close(agg.dr, want.dr, 1e-9), "seed {seed}");
        assert!(close(agg.pr, want.pr, 1e-9), "seed {seed}");
        assert!(close(rates.obr, want.obr, 1e-9), "seed {seed}");
        assert!(close(rates.owr, want.owr, 1e-9), "seed {seed}");
        assert!(close(rates.opr, want.opr, 1e-9), "seed {seed}");
        assert!(close(rates.dlr, want.dlr, 1e-9), "seed {seed}");
    }
}

#[test]
fn rates_come_from_integer_counts() {
    for seed in 0..50 {
        let deals = random_fixture(seed);
        let n = deals.iter().filter(|d| !d.aborted).count() as f64;
        let n_deal = deals.iter().filter(|d| !d.aborted && d.accepted).count() as f64;
        let r = anomaly_rates(&deals);
        for (v, den) in [(r.obr, n), (r.owr, n), (r.dlr, n), (r.opr, n_deal)] {
            if let Some(v) = v {
                let k = v * den;
                assert!((k - k.round()).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn zero_sum_identity() {
    for seed in 0..50 {
        for d in random_fixture(seed).iter().filter(|d| d.accepted) {
            let p = d.final_price.unwrap();
            let s = prr(d.p_r, p) + p.cents() as f64 / d.p_r.cents() as f64;
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

fn ncs_rows(rows: &[(&str, f64, f64, f64)]) -> BTreeMap<String, NcsInput> {
    rows.iter()
        .map(|(m, b, s, rp)| (m.to_string(), NcsInput { prr_buyer: *b, prr_seller: *s, rp: *rp }))
        .collect()
}

#[test]
fn two_model_risk_index_is_plus_minus_one() {
    let worse = RiskInput { obr: 0.2, owr: 0.1, opr: 0.3, dlr: 0.05 };
    let better = RiskInput { obr: 0.0, owr: 0.05, opr: 0.1, dlr: 0.0 };
    let r = risk_index(&BTreeMap::from([("w".into(), worse), ("b".into(), better)])).unwrap();
    assert!((r["w"] - 1.0).abs() < 1e-12 && (r["b"] + 1.0).abs() < 1e-12);
}

fn ranking(scores: &BTreeMap<String, f64>) -> Vec<String> {
    // rounded so exact ties survive float noise
    let mut v: Vec<_> = scores.iter().map(|(k, x)| (k, (x * 1e9).round() as i64)).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    v.into_iter().map(|(k, _)| k.clone()).collect()
}

proptest! {
    #[test]
    fn ncs_invariant_under_affine_rescaling(
        vals in prop::collection::vec((0.0f64..0.5, 0.0f64..0.5, 0.5f64..3.0), 2..9),
        which in 0usize..3,
        scale in 0.1f64..50.0,
        shift in -5.0f64..5.0,
    ) {
        let names: Vec<String> = (0..vals.len()).map(|i| format!("m{i}")).collect();
        let base: Vec<_> = names.iter().zip(&vals).map(|(n, v)| (n.as_str(), v.0, v.1, v.2)).collect();
        let scaled: Vec<_> = base.iter().map(|&(n, a, b, c)| match which {
            0 => (n, a * scale + shift, b, c),
            // 1 − prr_seller rescales affinely when prr_seller does
            1 => (n, a, b * scale + shift, c),
            _ => (n, a, b, c * scale + shift),
        }).collect();
        let x = ncs(&ncs_rows(&base)).unwrap();
        let y = ncs(&ncs_rows(&scaled)).unwrap();
        for k in x.keys() {
            prop_assert!((x[k] - y[k]).abs() < 1e-9);
        }
        prop_assert_eq!(ranking(&x), ranking(&y));
    }
}

fn rec(case: &str, buyer: &str, seller: &str, price: Option<i64>) -> DealRecord {
    DealRecord {
        case_id: case.into(),
        product_name: case.into(),
        category: Default::default(),
        p_r: Money::from_dollars(2000),
        p_w: Money::from_dollars(500),
        beta: Money::from_dollars(2000),
        budget_level: None,
        final_price: price.map(Money::from_dollars),
        accepted: price.is_some(),
        deadlock: false,
        aborted: false,
        buyer_id: buyer.into(),
        seller_id: seller.into(),
        flags: Default::default(),
    }
}

#[test]
fn imbalance_signs_and_shared_cases() {
    let deals = vec![
        rec("c1", "B0", "S0", Some(1000)),
        rec("c2", "B0", "S0", Some(1000)),
        rec("c3", "B0", "S0", Some(5000)),
        rec("c1", "B1", "S0", Some(1020)),
        rec("c2", "B1", "S0", Some(1020)),
        rec("c3", "B1", "S0", None),
        rec("c1", "B2", "S0", Some(860)),
        rec("c2", "B2", "S0", Some(860)),
    ];
    let rows = imbalance_report(&deals, ("B0", "S0"), &[]).unwrap();
    let by: BTreeMap<_, _> = rows.iter().map(|r| (r.buyer.as_str(), r)).collect();
    assert!((by["B0"].avg_payment - 1000.0).abs() < 1e-9);
    assert!((by["B1"].delta_pct - 2.0).abs() < 1e-9);
    assert_eq!(by["B1"].impact, IMPACT_BUYER);
    assert!((by["B2"].delta_pct + 14.0).abs() < 1e-9);
    assert_eq!(by["B2"].impact, IMPACT_SELLER);

    let disjoint = vec![
        rec("c1", "B0", "S0", Some(1000)),
        rec("c2", "B1", "S0", Some(1000)),
        rec("c3", "B2", "S0", Some(1000)),
    ];
    assert!(matches!(
        imbalance_report(&disjoint, ("B0", "S0"), &[]),
        Err(MetricsError::EmptyIntersection)
    ));
}

#[test]
fn report_outputs() {
    let mut deals = vec![
        rec("c1", "M0", "M0", Some(1000)),
        rec("c1", "M0", "M1", Some(1500)),
        rec("c1", "M1", "M0", Some(900)),
        rec("c1", "M1", "M1", None),
    ];
    deals[3].deadlock = true;
    let report = MetricsReport::build(&deals, &MetricsOptions::default());
    assert_eq!(report.cells.len(), 4);
    let csv = emit_report(&report, "csv").unwrap();
    assert_eq!(csv.lines().count(), 5);
    // M0 buying from M0: profit 500 against the lowest positive TP (500) facing M0
    assert!(csv.contains("M0,M0,,1,1,0,0,0,0,0,0.5000,1.0000,1.0000,500.00,1.0000,"));
    assert!(csv.contains("M0,M1,,1,1,0,0,0,0,0,0.2500,1.0000,2.0000,1000.00,2.0000,"));
    let long = emit_report(&report, "long").unwrap();
    assert!(long.starts_with("buyer,seller,budget_level,metric,value\n"));
    assert!(long.contains("M1,M1,,dlr,1.0000"));
    let md = emit_report(&report, "markdown").unwrap();
    assert!(md.contains("| Model | Out-of-Budget | Out-of-Wholesale |"));
    assert!(report.models.iter().all(|m| m.ncs.is_some()));
}
