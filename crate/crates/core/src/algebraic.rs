//! Integer 3x3 matrices, their characteristic cubics, and certified real roots.
//!
//! Root isolation never evaluates the cubic in floating point: every sign is
//! computed exactly by treating the f64 sample point as the dyadic rational it
//! is and evaluating with big integers. Interval endpoints therefore carry a
//! proven sign change.

use std::cmp::Ordering;

use num_bigint::BigInt;
use num_traits::{Signed, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interval::{Certainty, Interval};

pub const DEFAULT_ROOT_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlgebraError {
    #[error("polynomial has degree {0}, expected 3")]
    NotCubic(usize),
    #[error("cubic is not monic (leading coefficient {0})")]
    NotMonic(i64),
    #[error("cubic does not have three distinct real roots (discriminant {0})")]
    NotThreeRealRoots(i128),
    #[error("could not bracket the roots with exact sign changes")]
    BracketFailure,
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
}

/// A 3x3 matrix with integer entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegerMatrix(pub [[i64; 3]; 3]);

impl IntegerMatrix {
    /// The hyperbolic matrix driving the whole construction.
    pub const STANDARD: IntegerMatrix = IntegerMatrix([[2, -3, 1], [-3, 6, -2], [1, -2, 1]]);

    pub fn identity() -> Self {
        IntegerMatrix([[1, 0, 0], [0, 1, 0], [0, 0, 1]])
    }

    pub fn trace(&self) -> i64 {
        let m = &self.0;
        m[0][0] + m[1][1] + m[2][2]
    }

    pub fn determinant(&self) -> i64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Sum of the principal 2x2 minors.
    pub fn minor_sum(&self) -> i64 {
        let m = &self.0;
        (m[0][0] * m[1][1] - m[0][1] * m[1][0])
            + (m[0][0] * m[2][2] - m[0][2] * m[2][0])
            + (m[1][1] * m[2][2] - m[1][2] * m[2][1])
    }
}

/// Monic integer cubic `x^3 + c2 x^2 + c1 x + c0`, stored ascending.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntCubic {
    pub coeffs: [i64; 4],
}

impl IntCubic {
    pub fn from_ascending(coeffs: &[i64]) -> Result<Self, AlgebraError> {
        let degree = coeffs.iter().rposition(|&c| c != 0).unwrap_or(0);
        if degree != 3 || coeffs.len() != 4 {
            return Err(AlgebraError::NotCubic(degree));
        }
        if coeffs[3] != 1 {
            return Err(AlgebraError::NotMonic(coeffs[3]));
        }
        Ok(IntCubic {
            coeffs: [coeffs[0], coeffs[1], coeffs[2], 1],
        })
    }

    pub fn eval_i128(&self, x: i128) -> i128 {
        self.coeffs
            .iter()
            .rev()
            .fold(0i128, |acc, &c| acc * x + c as i128)
    }

    pub fn eval_f64(&self, x: f64) -> f64 {
        self.coeffs
            .iter()
            .rev()
            .fold(0.0, |acc, &c| acc * x + c as f64)
    }

    /// Discriminant of the monic cubic; positive iff three distinct real roots.
    pub fn discriminant(&self) -> i128 {
        let [d, c, b, _] = self.coeffs.map(|v| v as i128);
        18 * b * c * d - 4 * b * b * b * d + b * b * c * c - 4 * c * c * c - 27 * d * d
    }

    /// Exact sign of the cubic at the dyadic rational represented by `x`.
    pub fn sign_at(&self, x: f64) -> Ordering {
        let (mantissa, exp) = dyadic(x);
        // x = mantissa * 2^exp. With e = max(0, -exp), multiply through by 2^(3e).
        let shift = if exp < 0 { (-exp) as u32 } else { 0 };
        let num = if exp >= 0 {
            mantissa << (exp as u32)
        } else {
            mantissa
        };
        let mut acc = BigInt::zero();
        for (k, &c) in self.coeffs.iter().enumerate() {
            // c_k * num^k * 2^(shift * (3 - k))
            let term = BigInt::from(c) * num.pow(k as u32) << (shift as usize * (3 - k));
            acc += term;
        }
        if acc.is_zero() {
            Ordering::Equal
        } else if acc.is_positive() {
            Ordering::Greater
        } else {
            Ordering::Less
        }
    }

    /// Product of two elements of Z[x]/(p) given as coefficient triples.
    pub fn mul_mod(&self, u: [i64; 3], v: [i64; 3]) -> [i64; 3] {
        let mut prod = [0i128; 5];
        for i in 0..3 {
            for j in 0..3 {
                prod[i + j] += u[i] as i128 * v[j] as i128;
            }
        }
        // x^3 = -c2 x^2 - c1 x - c0
        for k in (3..5).rev() {
            let top = prod[k];
            prod[k] = 0;
            for i in 0..3 {
                prod[k - 3 + i] -= top * self.coeffs[i] as i128;
            }
        }
        [prod[0] as i64, prod[1] as i64, prod[2] as i64]
    }
}

fn dyadic(x: f64) -> (BigInt, i32) {
    if x == 0.0 {
        return (BigInt::zero(), 0);
    }
    let bits = x.to_bits();
    let sign = if bits >> 63 == 0 { 1i64 } else { -1i64 };
    let exponent = ((bits >> 52) & 0x7ff) as i32;
    let mantissa = if exponent == 0 {
        (bits & 0xf_ffff_ffff_ffff) << 1
    } else {
        (bits & 0xf_ffff_ffff_ffff) | 0x10_0000_0000_0000
    };
    (BigInt::from(sign) * BigInt::from(mantissa), exponent - 1075)
}

/// `det(xI - m)` with exact integer coefficients.
pub fn char_poly(m: &IntegerMatrix) -> IntCubic {
    IntCubic {
        coeffs: [-m.determinant(), m.minor_sum(), -m.trace(), 1],
    }
}

/// True iff the monic cubic has no rational root. For monic integer
/// polynomials every rational root is an integer dividing the constant term.
pub fn check_irreducible(coeffs: &[i64]) -> Result<bool, AlgebraError> {
    let p = IntCubic::from_ascending(coeffs)?;
    let c0 = p.coeffs[0];
    if c0 == 0 {
        return Ok(false);
    }
    let n = c0.unsigned_abs();
    let mut d = 1u64;
    while d * d <= n {
        if n % d == 0 {
            for cand in [d, n / d] {
                for s in [1i128, -1] {
                    if p.eval_i128(s * cand as i128) == 0 {
                        return Ok(false);
                    }
                }
            }
        }
        d += 1;
    }
    Ok(true)
}

/// Irreducible with square discriminant: the Galois group is cyclic of order 3.
pub fn galois_group_is_cyclic(p: &IntCubic) -> bool {
    let disc = p.discriminant();
    if disc <= 0 || !check_irreducible(&p.coeffs).unwrap_or(false) {
        return false;
    }
    let r = (disc as f64).sqrt().round() as i128;
    (r - 1..=r + 1).any(|s| s >= 0 && s * s == disc)
}

/// Three disjoint, ascending intervals each containing exactly one root, with
/// an exact sign change across every interval.
pub fn isolate_real_roots(p: &IntCubic, tol: f64) -> Result<[Interval; 3], AlgebraError> {
    if !(tol > 0.0) {
        return Err(AlgebraError::BadTolerance(tol));
    }
    let disc = p.discriminant();
    if disc <= 0 {
        return Err(AlgebraError::NotThreeRealRoots(disc));
    }
    let [c0, c1, c2, _] = p.coeffs.map(|c| c as f64);
    // Cauchy bound for a monic polynomial.
    let bound = 1.0 + c0.abs().max(c1.abs()).max(c2.abs());
    // Critical points separate the roots when disc > 0.
    let qa = 3.0;
    let qb = 2.0 * c2;
    let qc = c1;
    let qd = qb * qb - 4.0 * qa * qc;
    if qd <= 0.0 {
        return Err(AlgebraError::BracketFailure);
    }
    let sq = qd.sqrt();
    let mut crit = [(-qb - sq) / (2.0 * qa), (-qb + sq) / (2.0 * qa)];
    crit.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let fences = [-bound, crit[0], crit[1], bound];
    let expected = [
        Ordering::Less,
        Ordering::Greater,
        Ordering::Less,
        Ordering::Greater,
    ];
    for (x, want) in fences.iter().zip(expected) {
        if p.sign_at(*x) != want {
            return Err(AlgebraError::BracketFailure);
        }
    }
    let mut out = [Interval::point(0.0); 3];
    for i in 0..3 {
        out[i] = bisect(p, fences[i], fences[i + 1], tol);
    }
    Ok(out)
}

fn bisect(p: &IntCubic, mut lo: f64, mut hi: f64, tol: f64) -> Interval {
    let sign_lo = p.sign_at(lo);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        match p.sign_at(mid) {
            Ordering::Equal => return Interval::point(mid),
            s if s == sign_lo => lo = mid,
            _ => hi = mid,
        }
    }
    Interval::new(lo, hi)
}

/// Labels of the three real eigenvalues, ascending.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EigenLabel {
    One,
    Two,
    Three,
}

impl EigenLabel {
    pub const ALL: [EigenLabel; 3] = [EigenLabel::One, EigenLabel::Two, EigenLabel::Three];

    pub fn index(self) -> usize {
        match self {
            EigenLabel::One => 0,
            EigenLabel::Two => 1,
            EigenLabel::Three => 2,
        }
    }

    /// The cyclic relabeling 1 -> 2 -> 3 -> 1.
    pub fn sigma(self) -> EigenLabel {
        match self {
            EigenLabel::One => EigenLabel::Two,
            EigenLabel::Two => EigenLabel::Three,
            EigenLabel::Three => EigenLabel::One,
        }
    }
}

/// Certified eigenvalues of an integer matrix, sorted ascending.
fn polish_root(p: &IntCubic, i: Interval) -> f64 {
    let c = p.coeffs.map(|c| c as f64);
    let mut x = i.mid();
    for _ in 0..4 {
        let f = ((x + c[2]) * x + c[1]) * x + c[0];
        let df = (3.0 * x + 2.0 * c[2]) * x + c[1];
        if df == 0.0 {
            break;
        }
        let next = x - f / df;
        if !i.contains(next) {
            break;
        }
        x = next;
    }
    x
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenData {
    pub lambda: [Interval; 3],
    pub det: i64,
    pub poly: Option<IntCubic>,
}

impl EigenData {
    pub fn certify(m: &IntegerMatrix, tol: f64) -> Result<Self, AlgebraError> {
        let poly = char_poly(m);
        let lambda = isolate_real_roots(&poly, tol)?;
        Ok(EigenData {
            lambda,
            det: m.determinant(),
            poly: Some(poly),
        })
    }

    /// Point data with no polynomial behind it, for constructed examples.
    pub fn from_values(values: [f64; 3], det: i64) -> Self {
        EigenData {
            lambda: values.map(Interval::point),
            det,
            poly: None,
        }
    }

    pub fn get(&self, label: EigenLabel) -> Interval {
        self.lambda[label.index()]
    }

    pub fn value(&self, label: EigenLabel) -> f64 {
        self.values()[label.index()]
    }

    /// Point values, Newton-polished to full precision inside each enclosure.
    pub fn values(&self) -> [f64; 3] {
        self.lambda.map(|i| match &self.poly {
            Some(p) => polish_root(p, i),
            None => i.mid(),
        })
    }

    pub fn product(&self) -> Interval {
        self.lambda[0] * self.lambda[1] * self.lambda[2]
    }

    pub fn pairwise_disjoint(&self) -> bool {
        (0..3).all(|i| (i + 1..3).all(|j| !self.lambda[i].overlaps(&self.lambda[j])))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InequalityMargin {
    pub relation: String,
    /// Certified lower bound on `rhs - lhs`.
    pub lower_bound: f64,
    pub estimate: f64,
    pub status: Certainty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenConditionReport {
    pub verdict: Certainty,
    pub margins: Vec<InequalityMargin>,
    pub min_margin: f64,
    pub product: Interval,
    /// Whether the eigenvalue product encloses the matrix determinant.
    pub det_consistent: bool,
}

/// Certify `0 < l2^2 < l1 < l2 < 1 < l3`.
pub fn verify_eigenvalue_condition(e: &EigenData) -> EigenConditionReport {
    let [l1, l2, l3] = e.lambda;
    let l2sq = l2.square();
    let zero = Interval::point(0.0);
    let one = Interval::point(1.0);
    let chain: [(&str, Interval, Interval); 5] = [
        ("0 < l2^2", zero, l2sq),
        ("l2^2 < l1", l2sq, l1),
        ("l1 < l2", l1, l2),
        ("l2 < 1", l2, one),
        ("1 < l3", one, l3),
    ];
    let margins: Vec<InequalityMargin> = chain
        .iter()
        .map(|(name, lhs, rhs)| {
            let diff = *rhs - *lhs;
            InequalityMargin {
                relation: name.to_string(),
                lower_bound: diff.lo,
                estimate: diff.mid(),
                status: lhs.lt(rhs),
            }
        })
        .collect();
    let verdict = margins
        .iter()
        .fold(Certainty::Holds, |acc, m| acc.and(m.status));
    let min_margin = margins
        .iter()
        .map(|m| m.lower_bound)
        .fold(f64::INFINITY, f64::min);
    let product = e.product();
    EigenConditionReport {
        verdict,
        margins,
        min_margin,
        product,
        det_consistent: product.contains(e.det as f64),
    }
}

/// Evaluate `p + q*l + r*l^2` at the chosen conjugate, with an enclosure.
pub fn conjugate_eval(coeffs: [i64; 3], target: EigenLabel, e: &EigenData) -> Interval {
    let l = e.get(target);
    let [p, q, r] = coeffs.map(|c| Interval::point(c as f64));
    p + q * l + r * l.square()
}

/// The integer polynomial `s` with `s(l1) = l2`, `s(l2) = l3`, `s(l3) = l1`,
/// when one exists; verified exactly by `p(s(x)) = 0 mod p(x)`.
pub fn conjugation_polynomial(e: &EigenData) -> Option<[i64; 3]> {
    let p = e.poly?;
    let v = e.values();
    // Solve the Vandermonde system for s(v_i) = v_{sigma(i)}.
    let m = nalgebra::Matrix3::from_fn(|i, j| v[i].powi(j as i32));
    let rhs = nalgebra::Vector3::new(v[1], v[2], v[0]);
    let sol = m.lu().solve(&rhs)?;
    let s = [sol[0], sol[1], sol[2]].map(|c| c.round());
    if s.iter().zip(sol.iter()).any(|(r, c)| (r - c).abs() > 1e-6) {
        return None;
    }
    let s = s.map(|c| c as i64);
    // p(s) in Z[x]/(p): s^3 + c2 s^2 + c1 s + c0.
    let s2 = p.mul_mod(s, s);
    let s3 = p.mul_mod(s2, s);
    let mut acc = s3;
    for k in 0..3 {
        acc[k] += p.coeffs[2] * s2[k] + p.coeffs[1] * s[k];
    }
    acc[0] += p.coeffs[0];
    (acc == [0, 0, 0]).then_some(s)
}
