//! Product catalog loading and per-scenario buyer budgets.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::money::{parse_price, Money, PriceError};

pub const KEY_NAME: &str = "Product Name";
pub const KEY_RETAIL: &str = "Retail Price";
pub const KEY_WHOLESALE: &str = "Wholesale Price";
pub const KEY_FEATURES: &str = "Features";
pub const KEY_REFERENCE: &str = "Reference";
pub const KEY_CATEGORY: &str = "Category";

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("record {index}: missing or non-string key {key:?}")]
    Schema { index: usize, key: &'static str },
    #[error("record {index}: not a JSON object")]
    NotAnObject { index: usize },
    #[error("record {index} ({name}): {source}")]
    Price {
        index: usize,
        name: String,
        #[source]
        source: PriceError,
    },
    #[error("record {index} ({name}): wholesale price {wholesale} is not below retail price {retail}")]
    Invariant {
        index: usize,
        name: String,
        retail: Money,
        wholesale: Money,
    },
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Electronics,
    MotorVehicle,
    RealEstate,
    #[default]
    Other,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Electronics => "electronics",
            Category::MotorVehicle => "motor_vehicle",
            Category::RealEstate => "real_estate",
            Category::Other => "other",
        }
    }

    fn from_label(label: &str) -> Category {
        let norm: String = label
            .trim()
            .to_ascii_lowercase()
            .chars()
            .map(|c| if c == ' ' || c == '-' { '_' } else { c })
            .collect();
        match norm.as_str() {
            "electronics" | "electronic" | "electronic_devices" | "electronic_device" => {
                Category::Electronics
            }
            "motor_vehicle" | "motor_vehicles" | "vehicle" | "vehicles" => Category::MotorVehicle,
            "real_estate" => Category::RealEstate,
            _ => Category::Other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Product {
    pub name: String,
    pub retail_price: Money,
    pub wholesale_price: Money,
    pub features: String,
    pub reference: String,
    pub category: Category,
}

/// Product facts both negotiating sides observe.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicProduct {
    pub name: String,
    pub retail_price: Money,
    pub features: String,
}

impl From<&Product> for PublicProduct {
    fn from(p: &Product) -> Self {
        PublicProduct {
            name: p.name.clone(),
            retail_price: p.retail_price,
            features: p.features.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetLevel {
    High,
    Retail,
    Mid,
    Wholesale,
    Low,
}

impl BudgetLevel {
    pub const ALL: [BudgetLevel; 5] = [
        BudgetLevel::High,
        BudgetLevel::Retail,
        BudgetLevel::Mid,
        BudgetLevel::Wholesale,
        BudgetLevel::Low,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BudgetLevel::High => "high",
            BudgetLevel::Retail => "retail",
            BudgetLevel::Mid => "mid",
            BudgetLevel::Wholesale => "wholesale",
            BudgetLevel::Low => "low",
        }
    }
}

impl fmt::Display for BudgetLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BudgetLevel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BudgetLevel::ALL
            .into_iter()
            .find(|l| l.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown budget level {s:?}"))
    }
}

/// Buyer budget for a product at the given level:
/// high = 1.2·retail, retail, mid = (retail + wholesale)/2, wholesale,
/// low = 0.8·wholesale. Half-up to the cent.
pub fn derive_budget(product: &Product, level: BudgetLevel) -> Money {
    let (pr, pw) = (product.retail_price, product.wholesale_price);
    match level {
        BudgetLevel::High => pr.mul_ratio(12, 10),
        BudgetLevel::Retail => pr,
        BudgetLevel::Mid => pr.midpoint(pw),
        BudgetLevel::Wholesale => pw,
        BudgetLevel::Low => pw.mul_ratio(8, 10),
    }
}

fn field_str(
    obj: &Map<String, Value>,
    key: &'static str,
    index: usize,
) -> Result<String, CatalogError> {
    match obj.get(key) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Number(n)) => Ok(n.to_string()),
        _ => Err(CatalogError::Schema { index, key }),
    }
}

fn product_from_value(index: usize, value: &Value) -> Result<Product, CatalogError> {
    let obj = value
        .as_object()
        .ok_or(CatalogError::NotAnObject { index })?;
    let name = field_str(obj, KEY_NAME, index)?;
    let retail_raw = field_str(obj, KEY_RETAIL, index)?;
    let wholesale_raw = field_str(obj, KEY_WHOLESALE, index)?;
    let features = field_str(obj, KEY_FEATURES, index)?;
    let reference = field_str(obj, KEY_REFERENCE, index)?;
    let category = match obj.get(KEY_CATEGORY) {
        Some(Value::String(c)) => Category::from_label(c),
        _ => Category::Other,
    };
    let price = |raw: &str| {
        parse_price(raw).map_err(|source| CatalogError::Price {
            index,
            name: name.clone(),
            source,
        })
    };
    let retail_price = price(&retail_raw)?;
    let wholesale_price = price(&wholesale_raw)?;
    if wholesale_price >= retail_price {
        return Err(CatalogError::Invariant {
            index,
            name,
            retail: retail_price,
            wholesale: wholesale_price,
        });
    }
    Ok(Product {
        name,
        retail_price,
        wholesale_price,
        features,
        reference,
        category,
    })
}

/// Load a catalog from a JSON array or JSON-lines byte stream. Input order is
/// preserved.
pub fn load_catalog(source: &[u8]) -> Result<Vec<Product>, CatalogError> {
    let text = std::str::from_utf8(source).map_err(|e| {
        CatalogError::Json(serde_json::Error::io(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            e,
        )))
    })?;
    let trimmed = text.trim_start_matches('\u{feff}').trim_start();
    let values: Vec<Value> = if trimmed.starts_with('[') {
        serde_json::from_str(trimmed)?
    } else {
        trimmed
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?
    };
    values
        .iter()
        .enumerate()
        .map(|(i, v)| product_from_value(i, v))
        .collect()
}

/// Normalized catalog echo using the input key names.
pub fn catalog_to_json(products: &[Product]) -> Value {
    Value::Array(
        products
            .iter()
            .map(|p| {
                let mut obj = Map::new();
                obj.insert(KEY_NAME.into(), Value::String(p.name.clone()));
                obj.insert(KEY_RETAIL.into(), Value::String(p.retail_price.usd()));
                obj.insert(KEY_WHOLESALE.into(), Value::String(p.wholesale_price.usd()));
                obj.insert(KEY_FEATURES.into(), Value::String(p.features.clone()));
                obj.insert(KEY_REFERENCE.into(), Value::String(p.reference.clone()));
                obj.insert(KEY_CATEGORY.into(), Value::String(p.category.as_str().into()));
                Value::Object(obj)
            })
            .collect(),
    )
}

/// Seeded uniform sample of `count` product indices without replacement,
/// returned in catalog order. Returns every index when `count >= len`.
pub fn sample_indices(len: usize, count: usize, seed: u64) -> Vec<usize> {
    if count >= len {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, len, count).into_vec();
    picked.sort_unstable();
    picked
}

#[cfg(test)]
pub(crate) fn camry() -> Product {
    Product {
        name: "Toyota Camry".into(),
        retail_price: Money::from_dollars(26995),
        wholesale_price: Money::from_dollars(21596),
        features: "203-hp mid-size sedan with 8-speed automatic.".into(),
        reference: "https://www.toyota.com/camry/".into(),
        category: Category::Other,
    }
}
