use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Saffir-Simpson categories, weakest first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SaffirSimpsonCategory {
    TD,
    TS,
    H1,
    H2,
    H3,
    H4,
    H5,
}

use SaffirSimpsonCategory::*;

/// Lower bounds in knots; each category owns `[bound, next bound)`.
const LOWER_BOUNDS: [f64; 7] = [0.0, 34.0, 64.0, 83.0, 96.0, 113.0, 137.0];

impl SaffirSimpsonCategory {
    pub const ALL: [SaffirSimpsonCategory; 7] = [TD, TS, H1, H2, H3, H4, H5];

    /// 1 for TD through 7 for H5.
    pub fn level(self) -> usize {
        self as usize + 1
    }

    pub fn from_level(level: usize) -> Option<Self> {
        Self::ALL.get(level.checked_sub(1)?).copied()
    }

    pub fn name(self) -> &'static str {
        ["TD", "TS", "H1", "H2", "H3", "H4", "H5"][self as usize]
    }

    /// Half-open nominal interval; H5 is unbounded above.
    pub fn nominal(self) -> SpeedRange {
        let i = self as usize;
        SpeedRange {
            lo: LOWER_BOUNDS[i],
            hi: LOWER_BOUNDS.get(i + 1).copied().unwrap_or(f64::INFINITY),
        }
    }

    pub fn lower(self) -> Option<Self> {
        Self::from_level(self.level() - 1)
    }

    pub fn upper(self) -> Option<Self> {
        Self::from_level(self.level() + 1)
    }
}

impl fmt::Display for SaffirSimpsonCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SaffirSimpsonCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown Saffir-Simpson category {s:?}")))
    }
}

/// Category of a (possibly fractional) speed in knots.
pub fn categorize(speed: f64) -> Result<SaffirSimpsonCategory> {
    if !(speed > 0.0) {
        return Err(Error::InvalidArgument(format!("cannot categorize speed {speed}")));
    }
    let i = LOWER_BOUNDS.iter().rposition(|&lo| speed >= lo).expect("speed > 0");
    Ok(SaffirSimpsonCategory::ALL[i])
}

/// Half-open speed interval `[lo, hi)` in knots.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedRange {
    pub lo: f64,
    /// `null` in JSON for an unbounded range.
    #[serde(with = "unbounded")]
    pub hi: f64,
}

impl SpeedRange {
    pub fn contains(&self, speed: f64) -> bool {
        speed >= self.lo && speed < self.hi
    }

    pub fn contains_range(&self, other: &SpeedRange) -> bool {
        self.lo <= other.lo && self.hi >= other.hi
    }

    pub fn overlaps(&self, other: &SpeedRange) -> bool {
        self.lo < other.hi && other.lo < self.hi
    }
}

impl fmt::Display for SpeedRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.hi.is_infinite() {
            write!(f, "[{:.2}, inf)", self.lo)
        } else {
            write!(f, "[{:.2}, {:.2})", self.lo, self.hi)
        }
    }
}

mod unbounded {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum OverlapPolicy {
    /// Experts train on their nominal interval only.
    #[serde(rename = "none")]
    None,
    /// Extend into each neighbor by a third of the neighbor's nominal width.
    #[default]
    #[serde(rename = "third", alias = "one-third-adjacent")]
    OneThirdAdjacent,
}

impl FromStr for OverlapPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(OverlapPolicy::None),
            "third" | "one-third-adjacent" => Ok(OverlapPolicy::OneThirdAdjacent),
            _ => Err(Error::Config(format!("unknown overlap policy {s:?} (expected none or third)"))),
        }
    }
}

/// Nominal width used by the overlap rule; H5 is capped at `max_speed`.
fn width(c: SaffirSimpsonCategory, max_speed: f64) -> f64 {
    let r = c.nominal();
    let hi = if r.hi.is_finite() { r.hi } else { max_speed };
    (hi - r.lo).max(0.0)
}

/// Training range of the expert for `category`. `max_speed` is the largest
/// speed in the dataset and only matters for H5's width.
pub fn expert_range(category: SaffirSimpsonCategory, max_speed: f64, policy: OverlapPolicy) -> SpeedRange {
    let mut r = category.nominal();
    if policy == OverlapPolicy::OneThirdAdjacent {
        if let Some(lower) = category.lower() {
            r.lo -= width(lower, max_speed) / 3.0;
        }
        if let Some(upper) = category.upper() {
            r.hi += width(upper, max_speed) / 3.0;
        }
    }
    r
}

/// `expert_range` for every category.
pub fn expert_ranges(max_speed: f64, policy: OverlapPolicy) -> Vec<(SaffirSimpsonCategory, SpeedRange)> {
    SaffirSimpsonCategory::ALL
        .into_iter()
        .map(|c| (c, expert_range(c, max_speed, policy)))
        .collect()
}
