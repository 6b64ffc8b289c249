//! Category sensitivity and the confidence/sensitivity color ramp.
//!
//! Sensitivity `s` places a category on a blue (0) to red (1) ramp;
//! confidence `c` becomes the block's opacity:
//!
//! ```text
//! r = 109 + s·(255 − 109)
//! g = 172 + s·(117 − 172)
//! b = 255 + s·(117 − 255)
//! a = c
//! ```
//!
//! Channels are rounded half away from zero.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TABLE_TOML: &str = include_str!("../assets/sensitivity_table.toml");

const LOW: [f64; 3] = [109.0, 172.0, 255.0];
const HIGH: [f64; 3] = [255.0, 117.0, 117.0];

/// Raw per-category ratings plus a version tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityTable {
    pub version: String,
    #[serde(rename = "ratings")]
    pub entries: BTreeMap<String, f64>,
}

impl SensitivityTable {
    pub fn new(version: impl Into<String>, entries: BTreeMap<String, f64>) -> Result<Self> {
        let t = Self { version: version.into(), entries };
        t.validate()?;
        Ok(t)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let t: Self = toml::from_str(text).map_err(|e| Error::InvalidTable(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::InvalidTable("table has no categories".into()));
        }
        if let Some((name, r)) = self.entries.iter().find(|(_, r)| !r.is_finite()) {
            return Err(Error::InvalidTable(format!("rating for {name} is not finite: {r}")));
        }
        Ok(())
    }

    /// Every name in `categories` must have a rating.
    pub fn check_covers<'a>(&self, categories: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for c in categories {
            if !self.entries.contains_key(c) {
                return Err(Error::InvalidTable(format!("no rating for category {c}")));
            }
        }
        Ok(())
    }

    fn bounds(&self) -> (f64, f64) {
        self.entries
            .values()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| (lo.min(r), hi.max(r)))
    }

    /// Linear map of the category's rating onto [0, 1] over this table's
    /// min and max; 0.5 everywhere when all ratings are equal.
    pub fn sensitivity_of(&self, category: &str) -> Result<f64> {
        let raw = *self
            .entries
            .get(category)
            .ok_or_else(|| Error::UnknownCategory(category.to_owned()))?;
        let (lo, hi) = self.bounds();
        if hi == lo {
            return Ok(0.5);
        }
        Ok(((raw - lo) / (hi - lo)).clamp(0.0, 1.0))
    }
}

impl Default for SensitivityTable {
    fn default() -> Self {
        Self::from_toml(DEFAULT_TABLE_TOML).expect("bundled sensitivity table is valid")
    }
}

pub fn sensitivity_of(category: &str, table: &SensitivityTable) -> Result<f64> {
    table.sensitivity_of(category)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorSpec {
    pub r: u8,
    pub g: u8,
    pub b: u8,
    pub a: f64,
}

impl ColorSpec {
    /// CSS `rgba(r, g, b, a)`; the form the web client applies verbatim.
    pub fn css(&self) -> String {
        format!("rgba({}, {}, {}, {})", self.r, self.g, self.b, self.a)
    }
}

/// Unquantized channel values for sensitivity `s`.
pub fn channels(s: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| LOW[i] + s * (HIGH[i] - LOW[i]))
}

fn clamp_unit(name: &str, v: f64) -> f64 {
    if v.is_nan() {
        tracing::warn!("{name} is NaN; using 0");
        0.0
    } else if !(0.0..=1.0).contains(&v) {
        let clamped = v.clamp(0.0, 1.0);
        tracing::warn!("{name} {v} outside [0, 1]; clamped to {clamped}");
        clamped
    } else {
        v
    }
}

pub fn color_of(confidence: f64, sensitivity: f64) -> ColorSpec {
    let c = clamp_unit("confidence", confidence);
    let s = clamp_unit("sensitivity", sensitivity);
    // f64::round is half-away-from-zero
    let [r, g, b] = channels(s).map(|v| v.round() as u8);
    ColorSpec { r, g, b, a: c }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blue_and_red_endpoints() {
        assert_eq!(color_of(0.8, 0.0), ColorSpec { r: 109, g: 172, b: 255, a: 0.8 });
        assert_eq!(color_of(1.0, 1.0), ColorSpec { r: 255, g: 117, b: 117, a: 1.0 });
    }

    #[test]
    fn midpoint_rounds_half_away() {
        // g = 172 - 27.5 = 144.5 -> 145
        assert_eq!(color_of(0.25, 0.5), ColorSpec { r: 182, g: 145, b: 186, a: 0.25 });
        assert_eq!(color_of(0.25, 0.5).css(), "rgba(182, 145, 186, 0.25)");
    }

    #[test]
    fn out_of_range_inputs_are_clamped() {
        assert_eq!(color_of(1.7, -0.2), color_of(1.0, 0.0));
        assert_eq!(color_of(f64::NAN, 2.0), color_of(0.0, 1.0));
    }

    #[test]
    fn linear_map_endpoints_and_degenerate_table() {
        let t = SensitivityTable::default();
        assert_eq!(t.sensitivity_of("health").unwrap(), 1.0);
        assert_eq!(t.sensitivity_of("other").unwrap(), 0.0);
        assert!(matches!(t.sensitivity_of("astrology"), Err(Error::UnknownCategory(_))));

        let flat = SensitivityTable::new(
            "flat",
            [("a", 3.0), ("b", 3.0)].into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        )
        .unwrap();
        assert_eq!(flat.sensitivity_of("a").unwrap(), 0.5);
        assert_eq!(flat.sensitivity_of("b").unwrap(), 0.5);
    }

    #[test]
    fn default_table_ordering() {
        let t = SensitivityTable::default();
        let order = [
            "health",
            "account-credentials",
            "finance",
            "personal-identity",
            "location",
            "contact",
            "relationships",
            "education-work",
            "preferences",
            "other",
        ];
        assert_eq!(t.entries.len(), order.len());
        for w in order.windows(2) {
            assert!(t.entries[w[0]] > t.entries[w[1]], "{} should outrank {}", w[0], w[1]);
        }
    }

    #[test]
    fn rejects_non_finite_ratings() {
        assert!(SensitivityTable::from_toml("version = \"x\"\n[ratings]\na = nan\n").is_err());
        assert!(SensitivityTable::from_toml("version = \"x\"\n[ratings]\n").is_err());
    }
}
