//! Interval-set threshold bands.
//!
//! Each violation level owns a set of intervals with explicit endpoint
//! openness. A valid band triple partitions the real line: the intervals
//! are pairwise disjoint, leave no gaps, and both unbounded tails belong to
//! exactly one band.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ViolationLevel;

/// A real interval. `None` endpoints are infinite (and always open).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: Option<f64>,
    pub lo_closed: bool,
    pub hi: Option<f64>,
    pub hi_closed: bool,
}

impl Interval {
    pub fn new(lo: Option<f64>, lo_closed: bool, hi: Option<f64>, hi_closed: bool) -> Self {
        Self {
            lo,
            lo_closed: lo.is_some() && lo_closed,
            hi,
            hi_closed: hi.is_some() && hi_closed,
        }
    }

    /// `(-inf, hi]` or `(-inf, hi)`.
    pub fn below(hi: f64, closed: bool) -> Self {
        Self::new(None, false, Some(hi), closed)
    }

    /// `[lo, +inf)` or `(lo, +inf)`.
    pub fn above(lo: f64, closed: bool) -> Self {
        Self::new(Some(lo), closed, None, false)
    }

    pub fn bounded(lo: f64, lo_closed: bool, hi: f64, hi_closed: bool) -> Self {
        Self::new(Some(lo), lo_closed, Some(hi), hi_closed)
    }

    pub fn everything() -> Self {
        Self::new(None, false, None, false)
    }

    pub fn contains(&self, x: f64) -> bool {
        let above_lo = match self.lo {
            None => true,
            Some(lo) if self.lo_closed => x >= lo,
            Some(lo) => x > lo,
        };
        let below_hi = match self.hi {
            None => true,
            Some(hi) if self.hi_closed => x <= hi,
            Some(hi) => x < hi,
        };
        above_lo && below_hi
    }

    pub fn is_empty(&self) -> bool {
        match (self.lo, self.hi) {
            (Some(lo), Some(hi)) => lo > hi || (lo == hi && !(self.lo_closed && self.hi_closed)),
            _ => false,
        }
    }

    pub fn is_bounded(&self) -> bool {
        self.lo.is_some() && self.hi.is_some()
    }

    pub fn width(&self) -> Option<f64> {
        Some(self.hi? - self.lo?)
    }

    /// Finite endpoints of this interval.
    pub fn endpoints(&self) -> impl Iterator<Item = f64> {
        self.lo.into_iter().chain(self.hi)
    }

    /// Ordering by lower endpoint: `-inf` first, then closed before open at
    /// equal values.
    pub(crate) fn cmp_lower(&self, other: &Self) -> Ordering {
        match (self.lo, other.lo) {
            (None, None) => Ordering::Equal,
            (None, Some(_)) => Ordering::Less,
            (Some(_), None) => Ordering::Greater,
            (Some(a), Some(b)) => a
                .partial_cmp(&b)
                .unwrap_or(Ordering::Equal)
                .then_with(|| other.lo_closed.cmp(&self.lo_closed)),
        }
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.lo {
            None => f.write_str("(-inf")?,
            Some(lo) => write!(f, "{}{}", if self.lo_closed { '[' } else { '(' }, lo)?,
        }
        f.write_str(", ")?;
        match self.hi {
            None => f.write_str("+inf)"),
            Some(hi) => write!(f, "{}{}", hi, if self.hi_closed { ']' } else { ')' }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed interval {0:?}")]
pub struct IntervalParseError(pub String);

impl FromStr for Interval {
    type Err = IntervalParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || IntervalParseError(s.to_string());
        let t = s.trim();
        let lo_closed = match t.chars().next() {
            Some('[') => true,
            Some('(') => false,
            _ => return Err(err()),
        };
        let hi_closed = match t.chars().last() {
            Some(']') => true,
            Some(')') => false,
            _ => return Err(err()),
        };
        let inner = &t[1..t.len() - 1];
        let (a, b) = inner.split_once(',').ok_or_else(err)?;
        let parse_end = |v: &str| -> Result<Option<f64>, IntervalParseError> {
            match v.trim() {
                "-inf" | "+inf" | "inf" => Ok(None),
                other => other.parse::<f64>().map(Some).map_err(|_| err()),
            }
        };
        let lo = parse_end(a)?;
        let hi = parse_end(b)?;
        if (lo.is_none() && lo_closed) || (hi.is_none() && hi_closed) {
            return Err(err());
        }
        if lo.is_none() && a.trim() != "-inf" {
            return Err(err());
        }
        if hi.is_none() && b.trim() == "-inf" {
            return Err(err());
        }
        Ok(Interval::new(lo, lo_closed, hi, hi_closed))
    }
}

impl Serialize for Interval {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Interval {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The three bands of a rule.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ThresholdBands {
    pub none: Vec<Interval>,
    pub l1: Vec<Interval>,
    pub l2: Vec<Interval>,
}

impl ThresholdBands {
    pub fn band(&self, level: ViolationLevel) -> &[Interval] {
        match level {
            ViolationLevel::None => &self.none,
            ViolationLevel::L1 => &self.l1,
            ViolationLevel::L2 => &self.l2,
        }
    }

    pub fn band_mut(&mut self, level: ViolationLevel) -> &mut Vec<Interval> {
        match level {
            ViolationLevel::None => &mut self.none,
            ViolationLevel::L1 => &mut self.l1,
            ViolationLevel::L2 => &mut self.l2,
        }
    }

    /// Level whose band contains `x`, if any.
    pub fn level_of(&self, x: f64) -> Option<ViolationLevel> {
        ViolationLevel::ALL
            .into_iter()
            .find(|&level| self.band(level).iter().any(|iv| iv.contains(x)))
    }

    /// All intervals tagged with their level.
    pub fn tagged(&self) -> impl Iterator<Item = (ViolationLevel, &Interval)> {
        ViolationLevel::ALL
            .into_iter()
            .flat_map(move |level| self.band(level).iter().map(move |iv| (level, iv)))
    }

    /// Sorted, de-duplicated finite endpoints across all bands.
    pub fn endpoints(&self) -> Vec<f64> {
        let mut pts: Vec<f64> = self.tagged().flat_map(|(_, iv)| iv.endpoints()).collect();
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
        pts.dedup();
        pts
    }

    /// Structural partition check. Returns the problems found, in order of
    /// position along the real line.
    pub fn partition_problems(&self) -> Vec<BandProblem> {
        let mut problems = Vec::new();
        let mut intervals: Vec<(ViolationLevel, Interval)> = Vec::new();
        for (level, iv) in self.tagged() {
            if iv.endpoints().any(|e| !e.is_finite()) {
                problems.push(BandProblem::NonFiniteEndpoint { level });
                continue;
            }
            if iv.is_empty() {
                problems.push(BandProblem::EmptyInterval { level, interval: *iv });
                continue;
            }
            intervals.push((level, *iv));
        }
        if intervals.is_empty() {
            problems.push(BandProblem::NoIntervals);
            return problems;
        }
        intervals.sort_by(|a, b| a.1.cmp_lower(&b.1));

        if intervals[0].1.lo.is_some() {
            problems.push(BandProblem::UncoveredTail { upper: false });
        }
        for pair in intervals.windows(2) {
            let (prev, next) = (&pair[0].1, &pair[1].1);
            let Some(prev_hi) = prev.hi else {
                // prev already runs to +inf, everything after overlaps it
                problems.push(BandProblem::Overlap { at: next.lo.unwrap_or(f64::NEG_INFINITY) });
                continue;
            };
            let next_lo = next.lo.unwrap_or(f64::NEG_INFINITY);
            if next_lo < prev_hi {
                problems.push(BandProblem::Overlap { at: next_lo });
            } else if next_lo > prev_hi {
                problems.push(BandProblem::Gap { from: prev_hi, to: next_lo });
            } else {
                match (prev.hi_closed, next.lo_closed) {
                    (true, true) => problems.push(BandProblem::Overlap { at: prev_hi }),
                    (false, false) => problems.push(BandProblem::Gap { from: prev_hi, to: next_lo }),
                    _ => {}
                }
            }
        }
        if intervals.last().map(|(_, iv)| iv.hi.is_some()).unwrap_or(true) {
            problems.push(BandProblem::UncoveredTail { upper: true });
        }
        problems
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BandProblem {
    NoIntervals,
    EmptyInterval { level: ViolationLevel, interval: Interval },
    NonFiniteEndpoint { level: ViolationLevel },
    Overlap { at: f64 },
    Gap { from: f64, to: f64 },
    UncoveredTail { upper: bool },
}

impl fmt::Display for BandProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BandProblem::NoIntervals => f.write_str("no intervals declared"),
            BandProblem::EmptyInterval { level, interval } => {
                write!(f, "empty interval {interval} in {level} band")
            }
            BandProblem::NonFiniteEndpoint { level } => {
                write!(f, "non-finite endpoint in {level} band")
            }
            BandProblem::Overlap { at } => write!(f, "bands overlap at {at}"),
            BandProblem::Gap { from, to } => write!(f, "gap between {from} and {to}"),
            BandProblem::UncoveredTail { upper: true } => f.write_str("upper tail not covered"),
            BandProblem::UncoveredTail { upper: false } => f.write_str("lower tail not covered"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_text_round_trip() {
        for s in ["(-inf, 30]", "(30, 35]", "(35, +inf)", "[16, 18)", "[18, 27]", "(-inf, +inf)"] {
            let iv: Interval = s.parse().unwrap();
            assert_eq!(iv.to_string(), s);
        }
        assert!("[-inf, 3)".parse::<Interval>().is_err());
        assert!("(3, 4".parse::<Interval>().is_err());
        assert!("(+inf, 4)".parse::<Interval>().is_err());
    }

    #[test]
    fn contains_respects_openness() {
        let iv = Interval::bounded(30.0, false, 35.0, true);
        assert!(!iv.contains(30.0));
        assert!(iv.contains(30.000001));
        assert!(iv.contains(35.0));
        assert!(!iv.contains(35.000001));
        assert!(Interval::bounded(1.0, true, 1.0, true).contains(1.0));
        assert!(Interval::bounded(1.0, true, 1.0, false).is_empty());
    }

    #[test]
    fn overlap_detected_at_shared_closed_endpoint() {
        let bands = ThresholdBands {
            none: vec![Interval::below(30.0, true)],
            l1: vec![Interval::bounded(30.0, true, 35.0, true)],
            l2: vec![Interval::above(35.0, false)],
        };
        assert_eq!(bands.partition_problems(), vec![BandProblem::Overlap { at: 30.0 }]);
    }

    #[test]
    fn gap_and_tail_detected() {
        let bands = ThresholdBands {
            none: vec![Interval::bounded(0.0, true, 10.0, false)],
            l1: vec![],
            l2: vec![Interval::bounded(11.0, true, 12.0, true)],
        };
        let problems = bands.partition_problems();
        assert!(problems.contains(&BandProblem::UncoveredTail { upper: false }));
        assert!(problems.contains(&BandProblem::Gap { from: 10.0, to: 11.0 }));
        assert!(problems.contains(&BandProblem::UncoveredTail { upper: true }));
    }
}
