//! Closed real intervals with outward rounding.
//!
//! Every arithmetic result is widened by one ulp on each side, so an
//! enclosure computed from enclosures stays an enclosure.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

/// Three-valued outcome of an interval comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Certainty {
    Holds,
    Fails,
    Indeterminate,
}

impl Certainty {
    pub fn holds(self) -> bool {
        self == Certainty::Holds
    }

    /// Conjunction: any failure dominates, then any indeterminate.
    pub fn and(self, other: Certainty) -> Certainty {
        use Certainty::*;
        match (self, other) {
            (Fails, _) | (_, Fails) => Fails,
            (Indeterminate, _) | (_, Indeterminate) => Indeterminate,
            _ => Holds,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        assert!(lo <= hi, "empty interval [{lo}, {hi}]");
        Interval { lo, hi }
    }

    pub fn point(x: f64) -> Self {
        Interval { lo: x, hi: x }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn contains_interval(&self, other: &Interval) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }

    pub fn overlaps(&self, other: &Interval) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }

    pub fn square(self) -> Interval {
        if self.lo >= 0.0 {
            widen(self.lo * self.lo, self.hi * self.hi)
        } else if self.hi <= 0.0 {
            widen(self.hi * self.hi, self.lo * self.lo)
        } else {
            let m = self.lo.abs().max(self.hi.abs());
            Interval::new(0.0, (m * m).next_up())
        }
    }

    /// Certified `self < other`.
    pub fn lt(&self, other: &Interval) -> Certainty {
        if self.hi < other.lo {
            Certainty::Holds
        } else if self.lo >= other.hi {
            Certainty::Fails
        } else {
            Certainty::Indeterminate
        }
    }
}

fn widen(lo: f64, hi: f64) -> Interval {
    Interval {
        lo: lo.next_down(),
        hi: hi.next_up(),
    }
}

impl Add for Interval {
    type Output = Interval;
    fn add(self, rhs: Interval) -> Interval {
        widen(self.lo + rhs.lo, self.hi + rhs.hi)
    }
}

impl Sub for Interval {
    type Output = Interval;
    fn sub(self, rhs: Interval) -> Interval {
        widen(self.lo - rhs.hi, self.hi - rhs.lo)
    }
}

impl Neg for Interval {
    type Output = Interval;
    fn neg(self) -> Interval {
        Interval {
            lo: -self.hi,
            hi: -self.lo,
        }
    }
}

impl Mul for Interval {
    type Output = Interval;
    fn mul(self, rhs: Interval) -> Interval {
        let p = [
            self.lo * rhs.lo,
            self.lo * rhs.hi,
            self.hi * rhs.lo,
            self.hi * rhs.hi,
        ];
        let lo = p.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        widen(lo, hi)
    }
}

impl Mul<f64> for Interval {
    type Output = Interval;
    fn mul(self, rhs: f64) -> Interval {
        self * Interval::point(rhs)
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:.15e}, {:.15e}]", self.lo, self.hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic_encloses_point_results() {
        let a = Interval::point(0.1);
        let b = Interval::point(0.2);
        let s = a + b;
        assert!(s.contains(0.1 + 0.2));
        assert!(s.lo < s.hi);
        let p = a * b;
        assert!(p.contains(0.1 * 0.2));
    }

    #[test]
    fn comparisons_are_three_valued() {
        let a = Interval::new(0.0, 1.0);
        let b = Interval::new(2.0, 3.0);
        assert_eq!(a.lt(&b), Certainty::Holds);
        assert_eq!(b.lt(&a), Certainty::Fails);
        let c = Interval::new(0.5, 2.5);
        assert_eq!(a.lt(&c), Certainty::Indeterminate);
    }

    #[test]
    fn square_of_straddling_interval_starts_at_zero() {
        let s = Interval::new(-2.0, 1.0).square();
        assert_eq!(s.lo, 0.0);
        assert!(s.hi >= 4.0);
    }
}
