//! Fixed-point USD amounts with two fractional digits.
//!
//! Amounts are stored as signed integer cents so sums over large catalogs
//! (real-estate prices in the millions) stay exact. Rounding is half-up
//! (away from zero for negative values).

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Neg, Sub};
use std::str::FromStr;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PriceError {
    #[error("malformed price {0:?}: no parseable decimal number")]
    MalformedPrice(String),
    #[error("price {0:?} must be strictly positive")]
    NegativePrice(String),
}

/// A USD amount in cents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Money(i64);

impl Money {
    pub const ZERO: Money = Money(0);

    pub const fn from_cents(cents: i64) -> Self {
        Money(cents)
    }

    pub const fn from_dollars(dollars: i64) -> Self {
        Money(dollars * 100)
    }

    pub const fn cents(self) -> i64 {
        self.0
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / 100.0
    }

    /// Nearest cent to `value` dollars, half-up.
    pub fn from_f64(value: f64) -> Self {
        Money(round_half_up(value * 100.0))
    }

    /// Multiply by an exact rational `num / den`, rounding half-up to the cent.
    pub fn mul_ratio(self, num: i64, den: i64) -> Self {
        assert!(den > 0, "denominator must be positive");
        let prod = self.0 as i128 * num as i128;
        let den = den as i128;
        let q = if prod >= 0 {
            (2 * prod + den) / (2 * den)
        } else {
            -((-2 * prod + den) / (2 * den))
        };
        Money(q as i64)
    }

    /// Multiply by a real factor, rounding half-up to the cent.
    pub fn scale(self, factor: f64) -> Self {
        Money(round_half_up(self.0 as f64 * factor))
    }

    /// Midpoint of two amounts, half-up.
    pub fn midpoint(self, other: Money) -> Self {
        Money(self.0 + other.0).mul_ratio(1, 2)
    }

    pub fn is_positive(self) -> bool {
        self.0 > 0
    }

    /// `"$1234.50"`
    pub fn usd(self) -> String {
        if self.0 < 0 {
            format!("-${}", -self)
        } else {
            format!("${self}")
        }
    }

    /// Lenient decimal parse: accepts an optional leading `$`, thousands
    /// separators and surrounding whitespace. Any sign is allowed.
    pub fn parse_decimal(raw: &str) -> Result<Money, PriceError> {
        let malformed = || PriceError::MalformedPrice(raw.to_string());
        let mut s: String = raw.trim().chars().filter(|c| *c != ',').collect();
        let negative = if let Some(rest) = s.strip_prefix('-') {
            s = rest.to_string();
            true
        } else {
            false
        };
        let s = s.trim();
        let s = s.strip_prefix('$').unwrap_or(s).trim();
        let s = s
            .strip_suffix("USD")
            .or_else(|| s.strip_suffix("usd"))
            .unwrap_or(s)
            .trim();
        let (int_part, frac_part) = match s.split_once('.') {
            Some((i, f)) => (i, f),
            None => (s, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return Err(malformed());
        }
        if !int_part.bytes().all(|b| b.is_ascii_digit())
            || !frac_part.bytes().all(|b| b.is_ascii_digit())
        {
            return Err(malformed());
        }
        let whole: i64 = if int_part.is_empty() {
            0
        } else {
            int_part.parse().map_err(|_| malformed())?
        };
        let digits = frac_part.as_bytes();
        let mut frac: i64 = 0;
        for i in 0..2 {
            frac = frac * 10 + digits.get(i).map_or(0, |d| (d - b'0') as i64);
        }
        if digits.get(2).is_some_and(|d| *d >= b'5') {
            frac += 1;
        }
        let cents = whole
            .checked_mul(100)
            .and_then(|c| c.checked_add(frac))
            .ok_or_else(malformed)?;
        Ok(Money(if negative { -cents } else { cents }))
    }
}

fn round_half_up(x: f64) -> i64 {
    // f64::round rounds half away from zero.
    x.round() as i64
}

/// Parse a catalog or message price such as `"$26995"`, `"26995.00"` or
/// `"$1,299,000.50"`. Zero and negative amounts are rejected.
pub fn parse_price(raw: &str) -> Result<Money, PriceError> {
    let m = Money::parse_decimal(raw)?;
    if m.0 <= 0 {
        return Err(PriceError::NegativePrice(raw.to_string()));
    }
    Ok(m)
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        write!(f, "{sign}{}.{:02}", abs / 100, abs % 100)
    }
}

impl FromStr for Money {
    type Err = PriceError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Money::parse_decimal(s)
    }
}

impl Add for Money {
    type Output = Money;
    fn add(self, rhs: Money) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl AddAssign for Money {
    fn add_assign(&mut self, rhs: Money) {
        self.0 += rhs.0;
    }
}

impl Sub for Money {
    type Output = Money;
    fn sub(self, rhs: Money) -> Money {
        Money(self.0 - rhs.0)
    }
}

impl Neg for Money {
    type Output = Money;
    fn neg(self) -> Money {
        Money(-self.0)
    }
}

impl Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        iter.fold(Money::ZERO, Add::add)
    }
}

impl Serialize for Money {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Money {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct MoneyVisitor;

        impl Visitor<'_> for MoneyVisitor {
            type Value = Money;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a decimal amount as string or number")
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Money, E> {
                Money::parse_decimal(v).map_err(E::custom)
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Money, E> {
                Ok(Money::from_dollars(v))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Money, E> {
                Ok(Money::from_dollars(v as i64))
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Money, E> {
                Ok(Money::from_f64(v))
            }
        }

        deserializer.deserialize_any(MoneyVisitor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_dollar_prefixed_catalog_price() {
        assert_eq!(parse_price("$26995").unwrap(), Money::from_cents(2_699_500));
        assert_eq!(parse_price("$26995").unwrap(), parse_price("26995.00").unwrap());
    }

    #[test]
    fn zero_is_rejected() {
        assert_eq!(
            parse_price("$0.00"),
            Err(PriceError::NegativePrice("$0.00".into()))
        );
        assert!(matches!(parse_price("-5"), Err(PriceError::NegativePrice(_))));
    }

    #[test]
    fn malformed_inputs() {
        for raw in ["", "$", "abc", "12a", "$ 1.2.3", "..", "1 000"] {
            assert!(
                matches!(parse_price(raw), Err(PriceError::MalformedPrice(_))),
                "{raw:?}"
            );
        }
    }

    /// Independent reference: digits are accumulated by hand from the string,
    /// no shared code with `parse_decimal`.
    fn reference_cents(raw: &str) -> i64 {
        let mut whole = 0i64;
        let mut frac = Vec::new();
        let mut seen_dot = false;
        for c in raw.chars() {
            match c {
                '0'..='9' if !seen_dot => whole = whole * 10 + c.to_digit(10).unwrap() as i64,
                '0'..='9' => frac.push(c.to_digit(10).unwrap() as i64),
                '.' => seen_dot = true,
                _ => {}
            }
        }
        while frac.len() < 3 {
            frac.push(0);
        }
        let mut cents = whole * 100 + frac[0] * 10 + frac[1];
        if frac[2] >= 5 {
            cents += 1;
        }
        cents
    }

    #[test]
    fn formatted_strings_match_reference_parser() {
        let cases = [
            "$1,299,000.50",
            "$26995",
            " $21596 ",
            "26995.00",
            "$0.01",
            "$1,000",
            "$999.99",
            "12.345",
            "12.344",
            "$3,000,000",
            "$15500.",
            "$.75",
            "1,234,567.89",
            "$ 42",
            "42 USD",
            "$7.5",
            "$100,000.10",
            "$65",
            "  $85.00",
            "$1,199.995",
        ];
        assert_eq!(cases.len(), 20);
        for raw in cases {
            assert_eq!(parse_price(raw).unwrap().cents(), reference_cents(raw), "{raw}");
        }
        assert_eq!(parse_price("$1,299,000.50").unwrap().cents(), 129_900_050);
    }

    #[test]
    fn ratio_rounding_is_half_up() {
        let camry = Money::from_dollars(26995);
        assert_eq!(camry.mul_ratio(12, 10).to_string(), "32394.00");
        assert_eq!(Money::from_cents(5).mul_ratio(1, 2), Money::from_cents(3));
        assert_eq!(Money::from_cents(-5).mul_ratio(1, 2), Money::from_cents(-3));
        assert_eq!(
            Money::from_dollars(26995).midpoint(Money::from_dollars(21596)),
            Money::from_cents(2_429_550)
        );
    }

    #[test]
    fn display_and_usd() {
        assert_eq!(Money::from_cents(-150).to_string(), "-1.50");
        assert_eq!(Money::from_cents(3_239_400).usd(), "$32394.00");
        assert_eq!(Money::from_cents(-150).usd(), "-$1.50");
    }

    #[test]
    fn serde_accepts_numbers_and_strings() {
        let m: Money = serde_json::from_str("\"$85\"").unwrap();
        assert_eq!(m, Money::from_dollars(85));
        let m: Money = serde_json::from_str("85.5").unwrap();
        assert_eq!(m, Money::from_cents(8550));
        assert_eq!(serde_json::to_string(&m).unwrap(), "\"85.50\"");
    }

    proptest! {
        #[test]
        fn display_parse_round_trip(cents in -10_000_000_000i64..10_000_000_000) {
            let m = Money::from_cents(cents);
            prop_assert_eq!(m.to_string().parse::<Money>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            prop_assert_eq!(serde_json::from_str::<Money>(&json).unwrap(), m);
        }
    }
}
