//! Scripted run fixtures shared by the runner and acceptance tests.

use std::fs;
use std::path::{Path, PathBuf};

use dealbench::runner::ExperimentConfig;
use serde_json::{json, Value};

/// `n` products with retail 100 + 7i and wholesale 60% of that (whole
/// dollars), cycling through the categories.
pub fn write_catalog(dir: &Path, n: usize) -> PathBuf {
    let cats = ["electronics", "motor vehicle", "real estate", "other"];
    let items: Vec<Value> = (0..n)
        .map(|i| {
            let retail = 100 + 7 * i as i64;
            json!({
                "Product Name": format!("Item {i}"),
                "Retail Price": format!("${retail}"),
                "Wholesale Price": format!("${}", retail * 3 / 5),
                "Features": "test item",
                "Reference": "",
                "Category": cats[i % cats.len()],
            })
        })
        .collect();
    let path = dir.join("catalog.json");
    fs::write(&path, serde_json::to_string_pretty(&items).unwrap()).unwrap();
    path
}

/// Three scripted models with different concession behavior.
pub fn scripted_endpoints() -> Value {
    json!({
        "steady": {"kind": "scripted", "open_ratio": 0.7, "step_ratio": 0.05},
        "eager": {"kind": "scripted", "open_ratio": 0.85, "step_ratio": 0.08, "cap_slack": 0.25},
        "stubborn": {"kind": "scripted", "open_ratio": 0.6, "step_ratio": 0.02,
                     "stall_exit": {"turns": 3, "threshold": 0.01}},
    })
}

/// Config over `catalog` writing to `out`, with `overrides` merged on top.
pub fn config(catalog: &Path, out: &Path, overrides: Value) -> ExperimentConfig {
    let models = ["steady", "eager", "stubborn"];
    let mut v = json!({
        "run_seed": 11,
        "catalog": catalog,
        "endpoints": scripted_endpoints(),
        "buyer_models": models,
        "seller_models": models,
        "products_sample": {"count": 4, "seed": 5},
        "parallelism": 4,
        "output_dir": out,
        "clock": "logical",
    });
    for (k, x) in overrides.as_object().unwrap() {
        v[k] = x.clone();
    }
    ExperimentConfig::from_json(&v.to_string(), Path::new(".")).unwrap()
}

pub const ARTIFACTS: [&str; 4] = ["transcripts.jsonl", "metrics.csv", "report.md", "heatmap.csv"];

pub fn read_artifacts(dir: &Path) -> Vec<Vec<u8>> {
    ARTIFACTS.iter().map(|f| fs::read(dir.join(f)).unwrap()).collect()
}
