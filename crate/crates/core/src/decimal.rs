//! Exact decimal values in the closed unit interval.
//!
//! Confidence scores and thresholds are parsed from model text such as
//! `(0.75)` and compared against a threshold that sits exactly on a decimal
//! boundary. Storing them as binary floats would make `0.75 >= 0.75`
//! depend on how the value was produced, so they are kept as integer
//! millionths instead.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

const SCALE: u32 = 1_000_000;
const MAX_FRACTION_DIGITS: usize = 6;

/// A decimal in `[0, 1]` with at most six fractional digits.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct UnitDecimal(u32);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecimalError {
    #[error("not a decimal number: {0:?}")]
    Syntax(String),
    #[error("more than {MAX_FRACTION_DIGITS} fractional digits: {0:?}")]
    TooPrecise(String),
    #[error("value outside [0, 1]: {0:?}")]
    OutOfRange(String),
}

impl UnitDecimal {
    pub const ZERO: UnitDecimal = UnitDecimal(0);
    pub const ONE: UnitDecimal = UnitDecimal(SCALE);

    /// Builds a value from an integer count of millionths.
    pub const fn from_millionths(millionths: u32) -> Option<Self> {
        if millionths <= SCALE {
            Some(UnitDecimal(millionths))
        } else {
            None
        }
    }

    /// Builds `hundredths / 100`, e.g. `from_hundredths(75)` is 0.75.
    pub const fn from_hundredths(hundredths: u32) -> Option<Self> {
        if hundredths <= 100 {
            Some(UnitDecimal(hundredths * (SCALE / 100)))
        } else {
            None
        }
    }

    pub fn millionths(self) -> u32 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.0) / f64::from(SCALE)
    }

    pub fn as_ratio(self) -> Ratio<u64> {
        Ratio::new(u64::from(self.0), u64::from(SCALE))
    }

    /// Parses plain decimal text: `1`, `0.75`, `.5`, `1.00`.
    pub fn parse(text: &str) -> Result<Self, DecimalError> {
        let s = text.trim();
        let (int_part, frac_part) = match s.split_once('.') {
            Some((i, f)) => (i, f),
            None => (s, ""),
        };
        let digits_ok = |p: &str| p.bytes().all(|b| b.is_ascii_digit());
        if (int_part.is_empty() && frac_part.is_empty()) || !digits_ok(int_part) || !digits_ok(frac_part) {
            return Err(DecimalError::Syntax(text.to_string()));
        }
        let frac_trimmed = frac_part.trim_end_matches('0');
        if frac_trimmed.len() > MAX_FRACTION_DIGITS {
            return Err(DecimalError::TooPrecise(text.to_string()));
        }
        let int_value: u64 = if int_part.is_empty() {
            0
        } else {
            int_part
                .parse::<u64>()
                .map_err(|_| DecimalError::OutOfRange(text.to_string()))?
        };
        let mut frac_value: u64 = 0;
        for (i, b) in frac_trimmed.bytes().enumerate() {
            frac_value += u64::from(b - b'0') * 10u64.pow((MAX_FRACTION_DIGITS - 1 - i) as u32);
        }
        let total = int_value
            .checked_mul(u64::from(SCALE))
            .and_then(|v| v.checked_add(frac_value))
            .ok_or_else(|| DecimalError::OutOfRange(text.to_string()))?;
        if total > u64::from(SCALE) {
            return Err(DecimalError::OutOfRange(text.to_string()));
        }
        Ok(UnitDecimal(total as u32))
    }

    /// Converts a float through its shortest round-trip decimal rendering.
    pub fn from_f64(value: f64) -> Result<Self, DecimalError> {
        if !value.is_finite() {
            return Err(DecimalError::Syntax(value.to_string()));
        }
        if value < 0.0 {
            return Err(DecimalError::OutOfRange(value.to_string()));
        }
        Self::parse(&format!("{value}"))
    }
}

impl fmt::Display for UnitDecimal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let int = self.0 / SCALE;
        let frac = self.0 % SCALE;
        if frac == 0 {
            return write!(f, "{int}.0");
        }
        let digits = format!("{frac:06}");
        write!(f, "{int}.{}", digits.trim_end_matches('0'))
    }
}

impl fmt::Debug for UnitDecimal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for UnitDecimal {
    type Err = DecimalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl Serialize for UnitDecimal {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.as_f64())
    }
}

impl<'de> Deserialize<'de> for UnitDecimal {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = f64::deserialize(deserializer)?;
        UnitDecimal::from_f64(value).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_prompt_scores() {
        assert_eq!(UnitDecimal::parse("0.97").unwrap(), UnitDecimal::from_hundredths(97).unwrap());
        assert_eq!(UnitDecimal::parse("0.75").unwrap(), UnitDecimal::from_hundredths(75).unwrap());
        assert_eq!(UnitDecimal::parse("1").unwrap(), UnitDecimal::ONE);
        assert_eq!(UnitDecimal::parse("1.00").unwrap(), UnitDecimal::ONE);
        assert_eq!(UnitDecimal::parse(".5").unwrap(), UnitDecimal::from_hundredths(50).unwrap());
        assert_eq!(UnitDecimal::parse("0").unwrap(), UnitDecimal::ZERO);
    }

    #[test]
    fn rejects_bad_text() {
        assert!(matches!(UnitDecimal::parse("1.01"), Err(DecimalError::OutOfRange(_))));
        assert!(matches!(UnitDecimal::parse("-0.2"), Err(DecimalError::Syntax(_))));
        assert!(matches!(UnitDecimal::parse("abc"), Err(DecimalError::Syntax(_))));
        assert!(matches!(UnitDecimal::parse("."), Err(DecimalError::Syntax(_))));
        assert!(matches!(UnitDecimal::parse(""), Err(DecimalError::Syntax(_))));
        assert!(matches!(UnitDecimal::parse("0.1234567"), Err(DecimalError::TooPrecise(_))));
        assert!(matches!(UnitDecimal::parse("99999999999999999999"), Err(DecimalError::OutOfRange(_))));
    }

    #[test]
    fn boundary_comparison_is_exact() {
        let threshold = UnitDecimal::parse("0.75").unwrap();
        assert!(UnitDecimal::parse("0.75").unwrap() >= threshold);
        assert!(UnitDecimal::parse("0.74").unwrap() < threshold);
        assert!(UnitDecimal::from_f64(0.75).unwrap() >= threshold);
    }

    #[test]
    fn display_trims() {
        assert_eq!(UnitDecimal::parse("0.750").unwrap().to_string(), "0.75");
        assert_eq!(UnitDecimal::ONE.to_string(), "1.0");
        assert_eq!(UnitDecimal::ZERO.to_string(), "0.0");
    }

    proptest! {
        #[test]
        fn json_round_trip(m in 0u32..=1_000_000) {
            let d = UnitDecimal::from_millionths(m).unwrap();
            let json = serde_json::to_string(&d).unwrap();
            let back: UnitDecimal = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(back, d);
            prop_assert_eq!(UnitDecimal::parse(&d.to_string()).unwrap(), d);
        }
    }
}
