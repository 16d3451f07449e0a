//! Quadratic cone fields, the S-procedure containment test, domination
//! exponents, robustness radii, invariant-splitting extraction and the
//! partially hyperbolic rate report.
//!
//! A cone `{v : ||L v|| >= t ||v||}` is stored as `S = L^T L / t^2 - I`
//! (the form `L^T L - t^2 I` divided by `t^2`), so margins are measured in
//! units of the threshold. Its image under `L` is `{w : w^T (I - t^2 (L L^T)^-1) w >= 0}`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algebraic::{EigenData, EigenLabel};
use crate::linalg;
use crate::nilmanifold::{basis_index, Dynamics, GroupElement, Lattice, LieVector, Mat9, Slot, DIM};
use crate::planner::Plane;

pub const MARGIN_FLOOR: f64 = 1e-6;
const LAMBDA_LOG_RANGE: f64 = 30.0;
const GOLDEN_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq, Serialize, Deserialize)]
pub enum ConeError {
    #[error("threshold {threshold} is not strictly between the singular values {smin} and {smax}")]
    DegenerateCone { threshold: f64, smin: f64, smax: f64 },
    #[error("cone matrix has no {0} eigenvalue")]
    NotProper(String),
    #[error("map is singular")]
    Singular,
    #[error("no n <= {n_max} gives margin >= {floor} (best {best})")]
    Exhausted {
        n_max: u32,
        floor: f64,
        best: f64,
        curve: Vec<MarginCurvePoint>,
    },
    #[error("subspace dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

pub fn to_dmatrix(m: &Mat9) -> DMatrix<f64> {
    DMatrix::from_column_slice(DIM, DIM, m.as_slice())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticCone {
    pub s: DMatrix<f64>,
}

impl QuadraticCone {
    pub fn new(s: DMatrix<f64>) -> Result<Self, ConeError> {
        let s = (&s + s.transpose()) * 0.5;
        let ev = s.clone().symmetric_eigenvalues();
        if ev.max() <= 0.0 {
            return Err(ConeError::NotProper("positive".into()));
        }
        if ev.min() >= 0.0 {
            return Err(ConeError::NotProper("negative".into()));
        }
        Ok(QuadraticCone { s })
    }

    pub fn value(&self, v: &DVector<f64>) -> f64 {
        v.dot(&(&self.s * v))
    }

    pub fn contains(&self, v: &DVector<f64>) -> bool {
        self.value(v) >= 0.0
    }
}

fn check_threshold(l: &DMatrix<f64>, threshold: f64) -> Result<(), ConeError> {
    let sv = l.clone().singular_values();
    let (smin, smax) = (sv.min(), sv.max());
    if !(smin < threshold && threshold < smax) {
        return Err(ConeError::DegenerateCone {
            threshold,
            smin,
            smax,
        });
    }
    Ok(())
}

/// `{v : ||L v|| >= threshold ||v||}`.
pub fn cone_from_map(l: &DMatrix<f64>, threshold: f64) -> Result<QuadraticCone, ConeError> {
    check_threshold(l, threshold)?;
    let n = l.nrows();
    let s = l.transpose() * l / (threshold * threshold) - DMatrix::identity(n, n);
    QuadraticCone::new(s)
}

/// Image of [`cone_from_map`]`(l, threshold)` under `l`.
pub fn image_cone(l: &DMatrix<f64>, threshold: f64) -> Result<QuadraticCone, ConeError> {
    check_threshold(l, threshold)?;
    let n = l.nrows();
    let gram = (l * l.transpose()).try_inverse().ok_or(ConeError::Singular)?;
    QuadraticCone::new(DMatrix::identity(n, n) - gram * (threshold * threshold))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Containment {
    /// `max over lambda > 0 of min eig(S2 - lambda S1)`.
    pub margin: f64,
    pub lambda: f64,
    /// On failure, a unit vector on the boundary of the inner cone that the
    /// outer cone does not contain (up to rounding).
    pub witness: Option<Vec<f64>>,
}

impl Containment {
    pub fn contained(&self) -> bool {
        self.margin > 0.0
    }

    pub fn compact(&self, floor: f64) -> bool {
        self.margin >= floor
    }
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigenvalues().min()
}

/// S-procedure test of `c1 inside c2`. The dual function
/// `lambda -> min eig(S2 - lambda S1)` is concave, hence unimodal in
/// `log lambda`; it is maximized by golden-section search.
pub fn compactly_contained(c1: &QuadraticCone, c2: &QuadraticCone) -> Containment {
    let f = |tau: f64| min_eig(&(&c2.s - &c1.s * tau.exp()));
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (-LAMBDA_LOG_RANGE, LAMBDA_LOG_RANGE);
    let mut x1 = b - phi * (b - a);
    let mut x2 = a + phi * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while b - a > GOLDEN_TOL {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + phi * (b - a);
            f2 = f(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - phi * (b - a);
            f1 = f(x1);
        }
    }
    let tau = 0.5 * (a + b);
    let lambda = tau.exp();
    let pencil = &c2.s - &c1.s * lambda;
    let eig = SymmetricEigen::new(pencil);
    let margin = eig.eigenvalues.min();
    let witness = (margin <= 0.0).then(|| boundary_witness(&eig, margin, &c1.s));
    Containment {
        margin,
        lambda,
        witness,
    }
}

/// Unit vector in the minimizing eigenspace of the pencil on which the
/// inner form vanishes.
fn boundary_witness(eig: &SymmetricEigen<f64, nalgebra::Dyn>, margin: f64, s1: &DMatrix<f64>) -> Vec<f64> {
    let scale = eig.eigenvalues.amax().max(1.0);
    let cols: Vec<DVector<f64>> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .filter(|(_, v)| **v <= margin + 1e-6 * scale)
        .map(|(i, _)| eig.eigenvectors.column(i).into_owned())
        .collect();
    let u = DMatrix::from_columns(&cols);
    let restricted = SymmetricEigen::new(u.transpose() * s1 * &u);
    let vals = &restricted.eigenvalues;
    let (imax, imin) = (vals.imax(), vals.imin());
    let c = if vals[imax] > 0.0 && vals[imin] < 0.0 {
        restricted.eigenvectors.column(imax) * (-vals[imin]).sqrt()
            + restricted.eigenvectors.column(imin) * vals[imax].sqrt()
    } else {
        restricted.eigenvectors.column(vals.iamin()).into_owned()
    };
    let v = &u * c;
    (v.clone() / v.norm()).iter().copied().collect()
}

/// Containment margin of `L(C_L)` in `C_L` for threshold `t`.
pub fn map_margin(l: &DMatrix<f64>, threshold: f64) -> Result<Containment, ConeError> {
    Ok(compactly_contained(&image_cone(l, threshold)?, &cone_from_map(l, threshold)?))
}

/// Containment margin of `L1(C_{L1})` in `C_{L2}`.
pub fn pair_margin(l1: &DMatrix<f64>, l2: &DMatrix<f64>, threshold: f64) -> Result<Containment, ConeError> {
    Ok(compactly_contained(&image_cone(l1, threshold)?, &cone_from_map(l2, threshold)?))
}

/// A dominated splitting `E' + E''` of the unperturbed map, given by
/// coordinate axes, with its spectral gap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplittingSpec {
    pub name: String,
    pub e1_axes: Vec<usize>,
    pub e2_axes: Vec<usize>,
    pub lo: f64,
    pub hi: f64,
}

impl SplittingSpec {
    /// Rate bound on `E'`, one third of the way up the log-gap.
    pub fn alpha(&self) -> f64 {
        self.lo.powf(2.0 / 3.0) * self.hi.powf(1.0 / 3.0)
    }

    /// Rate bound on `E''`, two thirds of the way up the log-gap.
    pub fn beta(&self) -> f64 {
        self.lo.powf(1.0 / 3.0) * self.hi.powf(2.0 / 3.0)
    }

    pub fn e1_basis(&self) -> DMatrix<f64> {
        coordinate_basis(&self.e1_axes)
    }

    pub fn e2_basis(&self) -> DMatrix<f64> {
        coordinate_basis(&self.e2_axes)
    }
}

pub fn coordinate_basis(axes: &[usize]) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(DIM, axes.len());
    for (j, &i) in axes.iter().enumerate() {
        q[(i, j)] = 1.0;
    }
    q
}

/// The two dominated splittings of the partially hyperbolic structure:
/// `s|cu` separates `E^s = <X1, Y1, Z1, Z2>` and `cs|u` isolates
/// `E^u = <X3, Y3, Z3>`. `center_top` is the largest center modulus that
/// the deformation produces at the fixed point.
pub fn standard_splittings(eig: &EigenData, center_top: f64) -> Vec<SplittingSpec> {
    let l1 = eig.value(EigenLabel::One);
    let l2 = eig.value(EigenLabel::Two);
    let l3 = eig.value(EigenLabel::Three);
    let s_axes = vec![
        basis_index(Slot::X, 1),
        basis_index(Slot::Y, 1),
        basis_index(Slot::Z, 1),
        basis_index(Slot::Z, 2),
    ];
    let u_axes = vec![
        basis_index(Slot::X, 3),
        basis_index(Slot::Y, 3),
        basis_index(Slot::Z, 3),
    ];
    let complement = |axes: &[usize]| (0..DIM).filter(|i| !axes.contains(i)).collect::<Vec<_>>();
    vec![
        SplittingSpec {
            name: "s|cu".into(),
            e2_axes: complement(&s_axes),
            e1_axes: s_axes,
            lo: l1,
            hi: l2,
        },
        SplittingSpec {
            name: "cs|u".into(),
            e1_axes: complement(&u_axes),
            e2_axes: u_axes,
            lo: center_top.max(l2),
            hi: l3,
        },
    ]
}

/// `R_theta B` for `theta` on a uniform grid of `[0, a]`.
#[derive(Clone, Debug)]
pub struct MapFamily {
    pub base: DMatrix<f64>,
    pub plane: Plane,
    pub a: f64,
    pub grid: usize,
}

impl MapFamily {
    pub fn thetas(&self) -> Vec<f64> {
        if self.grid <= 1 || self.a == 0.0 {
            return vec![0.0];
        }
        (0..self.grid)
            .map(|i| self.a * i as f64 / (self.grid - 1) as f64)
            .collect()
    }

    pub fn map(&self, theta: f64) -> DMatrix<f64> {
        self.plane.rotation(theta) * &self.base
    }

    pub fn power(&self, theta: f64, n: u32) -> DMatrix<f64> {
        self.map(theta).pow(n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginCurvePoint {
    pub n: u32,
    pub min_margin: f64,
    pub worst_theta: f64,
    pub margin_f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominationWitness {
    pub splitting: String,
    pub n: u32,
    pub margin: f64,
    pub margin_f: f64,
    pub worst_theta: f64,
    pub lambda_at_worst: f64,
    pub theta_grid: usize,
    pub alpha: f64,
    pub beta: f64,
    pub curve: Vec<MarginCurvePoint>,
}

struct ThetaMargin {
    theta: f64,
    margin: f64,
    lambda: f64,
}

fn family_margins(family: &MapFamily, threshold: f64, n: u32) -> Vec<ThetaMargin> {
    family
        .thetas()
        .par_iter()
        .map(|&theta| {
            let (margin, lambda) = match map_margin(&family.power(theta, n), threshold) {
                Ok(c) => (c.margin, c.lambda),
                Err(_) => (f64::NEG_INFINITY, f64::NAN),
            };
            ThetaMargin {
                theta,
                margin,
                lambda,
            }
        })
        .collect()
}

fn domination_point(family: &MapFamily, spec: &SplittingSpec, n: u32) -> (MarginCurvePoint, f64) {
    let t = spec.beta().powi(n as i32);
    let margin_f = map_margin(&family.base.pow(n), t)
        .map(|c| c.margin)
        .unwrap_or(f64::NEG_INFINITY);
    let margins = family_margins(family, t, n);
    let worst = margins
        .iter()
        .min_by(|x, y| x.margin.total_cmp(&y.margin))
        .expect("nonempty grid");
    let point = MarginCurvePoint {
        n,
        min_margin: worst.margin.min(margin_f),
        worst_theta: worst.theta,
        margin_f,
    };
    (point, worst.lambda)
}

fn witness(family: &MapFamily, spec: &SplittingSpec, point: &MarginCurvePoint, lambda: f64, curve: Vec<MarginCurvePoint>) -> DominationWitness {
    DominationWitness {
        splitting: spec.name.clone(),
        n: point.n,
        margin: point.min_margin,
        margin_f: point.margin_f,
        worst_theta: point.worst_theta,
        lambda_at_worst: lambda,
        theta_grid: family.thetas().len(),
        alpha: spec.alpha(),
        beta: spec.beta(),
        curve,
    }
}

/// Smallest `n <= n_max` for which `(R_theta B)^n` maps its cone compactly
/// into itself, with margin at least `floor`, for the unrotated map and
/// every grid angle.
pub fn find_domination_exponent(
    family: &MapFamily,
    spec: &SplittingSpec,
    n_max: u32,
    floor: f64,
) -> Result<DominationWitness, ConeError> {
    let mut curve = Vec::new();
    for n in 1..=n_max.max(1) {
        let (point, lambda) = domination_point(family, spec, n);
        curve.push(point.clone());
        if point.min_margin >= floor {
            return Ok(witness(family, spec, &point, lambda, curve));
        }
    }
    let best = curve.iter().map(|c| c.min_margin).fold(f64::NEG_INFINITY, f64::max);
    Err(ConeError::Exhausted {
        n_max,
        floor,
        best,
        curve,
    })
}

/// The same check at one fixed exponent.
pub fn domination_at(family: &MapFamily, spec: &SplittingSpec, n: u32, floor: f64) -> Result<DominationWitness, ConeError> {
    let (point, lambda) = domination_point(family, spec, n);
    if point.min_margin >= floor {
        Ok(witness(family, spec, &point, lambda, vec![point.clone()]))
    } else {
        Err(ConeError::Exhausted {
            n_max: n,
            floor,
            best: point.min_margin,
            curve: vec![point],
        })
    }
}

/// Largest `delta` for which the explicit bound keeps half the margin:
///
/// with `S2' = L2^T L2 / t^2 - I` and `S1' = I - t^2 (L1 L1^T)^-1` for
/// `||Li - L|| <= delta`,
/// `||S2' - S2|| <= (2 ||L|| delta + delta^2) / t^2` and, writing
/// `s = ||L^-1||` and `e = s^2 delta / (1 - s delta)` (so
/// `||L1^-1 - L^-1|| <= e`), `||S1' - S1|| <= t^2 e (2 s + e)`.
/// Then `min eig(S2' - lambda S1') >= m - ||dS2|| - lambda ||dS1||`.
pub fn delta_bound(l: &DMatrix<f64>, threshold: f64, margin: f64, lambda: f64) -> f64 {
    if margin <= 0.0 {
        return 0.0;
    }
    let norm = linalg::spectral_norm(l);
    let s = match l.clone().try_inverse() {
        Some(inv) => linalg::spectral_norm(&inv),
        None => return 0.0,
    };
    let t2 = threshold * threshold;
    let loss = |d: f64| {
        if s * d >= 1.0 {
            return f64::INFINITY;
        }
        let e = s * s * d / (1.0 - s * d);
        (2.0 * norm * d + d * d) / t2 + lambda * t2 * e * (2.0 * s + e)
    };
    let (mut lo, mut hi) = (0.0, 1.0 / s);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if loss(mid) <= 0.5 * margin {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub delta: f64,
    pub worst_theta: f64,
    pub trials: usize,
    pub failures: usize,
    pub failures_at_double: usize,
    pub min_trial_margin: f64,
    pub seed: u64,
    /// Grid step times the Lipschitz constant `n ||B||^n` of
    /// `theta -> (R_theta B)^n`; inter-grid angles are covered when this is
    /// at most `delta`.
    pub inter_grid_deviation: f64,
    pub inter_grid_covered: bool,
    /// Grid size that would make the inter-grid deviation at most `delta`.
    pub grid_needed: f64,
}

fn random_perturbation(rng: &mut ChaCha8Rng, n: usize, radius: f64) -> DMatrix<f64> {
    let e = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = linalg::spectral_norm(&e);
    e * (radius / norm)
}

/// Certified perturbation radius, uniform over the grid, checked by
/// randomized trials at `delta` and `2 delta`.
pub fn robustness_radius(
    family: &MapFamily,
    spec: &SplittingSpec,
    witness: &DominationWitness,
    trials: usize,
    seed: u64,
) -> RobustnessReport {
    let n = witness.n;
    let t = spec.beta().powi(n as i32);
    let mut thetas = family.thetas();
    thetas.push(f64::NAN); // the unrotated map
    let deltas: Vec<(f64, f64)> = thetas
        .par_iter()
        .map(|&theta| {
            let l = if theta.is_nan() { family.base.pow(n) } else { family.power(theta, n) };
            match map_margin(&l, t) {
                Ok(c) => (theta, delta_bound(&l, t, c.margin, c.lambda)),
                Err(_) => (theta, 0.0),
            }
        })
        .collect();
    let (worst_theta, delta) = deltas
        .iter()
        .copied()
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .expect("nonempty");
    let worst_theta = if worst_theta.is_nan() { 0.0 } else { worst_theta };

    let grid_thetas = family.thetas();
    let run = |radius: f64, seed: u64| -> (usize, f64) {
        let results: Vec<f64> = (0..trials)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
                let theta = if i % 2 == 0 {
                    worst_theta
                } else {
                    grid_thetas[rng.random_range(0..grid_thetas.len())]
                };
                let l = family.power(theta, n);
                let l1 = &l + random_perturbation(&mut rng, l.nrows(), radius);
                let l2 = &l + random_perturbation(&mut rng, l.nrows(), radius);
                pair_margin(&l1, &l2, t).map(|c| c.margin).unwrap_or(f64::NEG_INFINITY)
            })
            .collect();
        let failures = results.iter().filter(|m| **m <= 0.0).count();
        (failures, results.iter().copied().fold(f64::INFINITY, f64::min))
    };
    let (failures, min_trial_margin) = run(delta, seed);
    let (failures_at_double, _) = run(2.0 * delta, seed ^ 0x5eed);

    let norm = linalg::spectral_norm(&family.base);
    let lipschitz = n as f64 * norm.powi(n as i32);
    let step = if grid_thetas.len() > 1 {
        family.a / (grid_thetas.len() - 1) as f64
    } else {
        0.0
    };
    let inter_grid_deviation = lipschitz * step / 2.0;
    let grid_needed = if delta > 0.0 {
        (lipschitz * family.a / (2.0 * delta)).ceil() + 1.0
    } else {
        f64::INFINITY
    };
    RobustnessReport {
        delta,
        worst_theta,
        trials,
        failures,
        failures_at_double,
        min_trial_margin,
        seed,
        inter_grid_deviation,
        inter_grid_covered: inter_grid_deviation <= delta,
        grid_needed,
    }
}

/// `Dg_{g^{n-1} x} ... Dg_x` in the left-invariant frame, and `g^n x`.
pub fn cocycle_product<D: Dynamics + ?Sized>(map: &D, x: &GroupElement, n: u32) -> (Mat9, GroupElement) {
    let mut prod = Mat9::identity();
    let mut y = *x;
    for _ in 0..n {
        prod = map.derivative(&y) * prod;
        y = map.step(&y);
    }
    (prod, y)
}

/// A rate function along orbits.
pub trait RateFunction {
    fn rate(&self, x: &GroupElement) -> f64;
}

/// Constant rate; its cocycle is an exact power.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantRate {
    pub value: f64,
}

impl RateFunction for ConstantRate {
    fn rate(&self, _x: &GroupElement) -> f64 {
        self.value
    }
}

/// `base^exponent`, kept symbolic so products of cocycles are exact.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocyclePower {
    pub base: f64,
    pub exponent: u64,
}

impl CocyclePower {
    pub fn value(&self) -> f64 {
        self.base.powf(self.exponent as f64)
    }

    /// Product of two powers of the same base.
    pub fn mul(&self, other: &CocyclePower) -> Option<CocyclePower> {
        (self.base == other.base).then(|| CocyclePower {
            base: self.base,
            exponent: self.exponent + other.exponent,
        })
    }
}

impl ConstantRate {
    /// `beta_n(x) = beta(g^{n-1} x) ... beta(x)`.
    pub fn cocycle(&self, _x: &GroupElement, n: u64) -> CocyclePower {
        CocyclePower {
            base: self.value,
            exponent: n,
        }
    }
}

/// The cocycle of a general rate function, evaluated along the orbit.
pub fn orbit_cocycle<R: RateFunction, D: Dynamics + ?Sized>(rate: &R, map: &D, x: &GroupElement, n: u32) -> f64 {
    let mut y = *x;
    let mut p = 1.0;
    for _ in 0..n {
        p *= rate.rate(&y);
        y = map.step(&y);
    }
    p
}

fn orth(m: &DMatrix<f64>) -> DMatrix<f64> {
    linalg::orthonormalize(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractOptions {
    /// Iterates per block; convergence is tested after every block.
    pub block: usize,
    pub k_max: usize,
    pub tol: f64,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions {
            block: 2,
            k_max: 200,
            tol: 1e-10,
        }
    }
}

/// Orthonormal bases of `E'(x)` and `E''(x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplittingAt {
    pub e1: DMatrix<f64>,
    pub e2: DMatrix<f64>,
    pub iterates_e1: usize,
    pub iterates_e2: usize,
    pub converged: bool,
}

impl SplittingAt {
    /// Smallest singular value of `[E' E'']`; zero when not transverse.
    pub fn transversality(&self) -> f64 {
        let mut m = DMatrix::zeros(DIM, self.e1.ncols() + self.e2.ncols());
        m.columns_mut(0, self.e1.ncols()).copy_from(&self.e1);
        m.columns_mut(self.e1.ncols(), self.e2.ncols()).copy_from(&self.e2);
        linalg::min_singular_value(&m)
    }
}

/// Pushes `start` through `mats` applied last-to-first, re-orthonormalizing
/// each step.
fn push(start: &DMatrix<f64>, mats: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut q = start.clone();
    for m in mats.iter().rev() {
        q = orth(&(m * q));
    }
    q
}

/// Orbit depth after which the influence of earlier iterates is damped
/// below `tol` at the cone rate `alpha / beta`. Agreement of shallower
/// estimates proves nothing: off the support the coordinate subspaces are
/// invariant, so estimates stay constant until the orbit meets it.
pub fn min_extraction_depth(spec: &SplittingSpec, tol: f64) -> usize {
    (tol.ln() / (spec.alpha() / spec.beta()).ln()).ceil().max(1.0) as usize
}

/// Iterates the cone axis forward from `g^-K x` (for `E''`) and the
/// complementary axis backward from `g^K x` (for `E'`), growing `K` by
/// blocks past [`min_extraction_depth`] until successive estimates agree
/// within `tol`.
pub fn extract_splitting_at<D: Dynamics + ?Sized>(
    map: &D,
    spec: &SplittingSpec,
    x: &GroupElement,
    opts: &ExtractOptions,
) -> SplittingAt {
    let block = opts.block.max(1);
    // Derivative of g at g^-j x, mapping into g^-(j-1) x.
    let mut back: Vec<DMatrix<f64>> = Vec::new();
    // Inverse derivative at g^(j-1) x, mapping g^j x back into g^(j-1) x.
    let mut fwd: Vec<DMatrix<f64>> = Vec::new();
    let (mut yb, mut yf) = (*x, *x);
    let (mut prev2, mut prev1): (Option<DMatrix<f64>>, Option<DMatrix<f64>>) = (None, None);
    let (mut done2, mut done1) = (false, false);
    let (mut it2, mut it1) = (0, 0);
    let start2 = spec.e2_basis();
    let start1 = spec.e1_basis();
    let depth = min_extraction_depth(spec, opts.tol);
    for k in 1..=opts.k_max {
        for _ in 0..block {
            if !done2 {
                let prev = map.step_inverse(&yb);
                back.push(to_dmatrix(&map.derivative(&prev)));
                yb = prev;
            }
            if !done1 {
                let d = to_dmatrix(&map.derivative(&yf));
                fwd.push(d.try_inverse().expect("derivative is invertible"));
                yf = map.step(&yf);
            }
        }
        if k * block < depth && k < opts.k_max {
            continue;
        }
        // `back[j]` maps T(g^-(j+1) x) to T(g^-j x): apply deepest first.
        if !done2 {
            let q = push(&start2, &back);
            if let Some(p) = &prev2 {
                if linalg::principal_angle(p, &q) < opts.tol {
                    done2 = true;
                }
            }
            prev2 = Some(q);
            it2 = k * block;
        }
        if !done1 {
            let q = push(&start1, &fwd);
            if let Some(p) = &prev1 {
                if linalg::principal_angle(p, &q) < opts.tol {
                    done1 = true;
                }
            }
            prev1 = Some(q);
            it1 = k * block;
        }
        if done1 && done2 {
            break;
        }
    }
    SplittingAt {
        e1: prev1.expect("at least one block"),
        e2: prev2.expect("at least one block"),
        iterates_e1: it1,
        iterates_e2: it2,
        converged: done1 && done2,
    }
}

/// Largest principal angle between corresponding bundles.
pub fn splitting_distance(s1: &SplittingAt, s2: &SplittingAt) -> Result<f64, ConeError> {
    if s1.e1.ncols() != s2.e1.ncols() {
        return Err(ConeError::DimensionMismatch(s1.e1.ncols(), s2.e1.ncols()));
    }
    if s1.e2.ncols() != s2.e2.ncols() {
        return Err(ConeError::DimensionMismatch(s1.e2.ncols(), s2.e2.ncols()));
    }
    Ok(linalg::principal_angle(&s1.e1, &s2.e1).max(linalg::principal_angle(&s1.e2, &s2.e2)))
}

/// Angle between `Dg^n E(x)` and `E(g^n x)`, worst over both bundles.
pub fn invariance_defect<D: Dynamics + ?Sized>(
    map: &D,
    spec: &SplittingSpec,
    x: &GroupElement,
    n: u32,
    opts: &ExtractOptions,
) -> f64 {
    let here = extract_splitting_at(map, spec, x, opts);
    let (prod, y) = cocycle_product(map, x, n);
    let there = extract_splitting_at(map, spec, &y, opts);
    let l = to_dmatrix(&prod);
    let a1 = linalg::principal_angle(&orth(&(&l * &here.e1)), &there.e1);
    let a2 = linalg::principal_angle(&orth(&(&l * &here.e2)), &there.e2);
    a1.max(a2)
}

/// `min expansion on E'' / max expansion on E'` under `Dg^n_x`.
pub fn domination_ratio(l: &DMatrix<f64>, at: &SplittingAt) -> f64 {
    let weak = linalg::spectral_norm(&(l * &at.e1));
    let strong = linalg::min_singular_value(&(l * &at.e2));
    strong / weak
}

/// Cone invariance along a sampled orbit: margin of
/// `Dg^n_x (C(x))` inside `C(g^n x)`, both cones built from `Dg^n`.
pub fn orbit_cone_margin<D: Dynamics + ?Sized>(
    map: &D,
    spec: &SplittingSpec,
    x: &GroupElement,
    n: u32,
) -> f64 {
    let t = spec.beta().powi(n as i32);
    let (p1, y) = cocycle_product(map, x, n);
    let (p2, _) = cocycle_product(map, &y, n);
    pair_margin(&to_dmatrix(&p1), &to_dmatrix(&p2), t)
        .map(|c| c.margin)
        .unwrap_or(f64::NEG_INFINITY)
}

/// `E^s`, `E^c`, `E^u` assembled from the two dominated splittings:
/// `E^s = E'(s|cu)`, `E^u = E''(cs|u)`, `E^c = E''(s|cu) ∩ E'(cs|u)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThreeSplitting {
    pub es: DMatrix<f64>,
    pub ec: DMatrix<f64>,
    pub eu: DMatrix<f64>,
}

pub fn intersect(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let dim = (a.ncols() + b.ncols()).saturating_sub(DIM);
    // Padded square so the SVD returns a full set of right singular vectors.
    let k = a.ncols() + b.ncols();
    let mut m = DMatrix::zeros(DIM.max(k), k);
    m.view_mut((0, 0), (DIM, a.ncols())).copy_from(a);
    m.view_mut((0, a.ncols()), (DIM, b.ncols())).copy_from(&(-b));
    let svd = m.svd(false, true);
    let v_t = svd.v_t.expect("requested");
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let cols: Vec<DVector<f64>> = idx[..dim]
        .iter()
        .map(|&i| a * v_t.row(i).transpose().rows(0, a.ncols()).into_owned())
        .collect();
    if cols.is_empty() {
        return DMatrix::zeros(DIM, 0);
    }
    orth(&DMatrix::from_columns(&cols))
}

impl ThreeSplitting {
    pub fn assemble(s_cu: &SplittingAt, cs_u: &SplittingAt) -> Self {
        ThreeSplitting {
            es: s_cu.e1.clone(),
            ec: intersect(&s_cu.e2, &cs_u.e1),
            eu: cs_u.e2.clone(),
        }
    }
}

/// Extreme finite-time rates over unit vectors of one bundle, as `n`-th
/// roots of singular values of `Dg^n` restricted to the bundle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleRates {
    pub min: f64,
    pub max: f64,
}

impl BundleRates {
    pub fn of(l: &DMatrix<f64>, q: &DMatrix<f64>, n: u32) -> Self {
        let sv = (l * q).singular_values();
        let root = 1.0 / n as f64;
        BundleRates {
            min: sv.min().powf(root),
            max: sv.max().powf(root),
        }
    }

    pub fn merge(self, other: BundleRates) -> BundleRates {
        BundleRates {
            min: self.min.min(other.min),
            max: self.max.max(other.max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bullet {
    pub name: String,
    /// Per-step measured value and bound; `margin = bound - value` for
    /// upper bounds and `value - bound` for lower bounds.
    pub measured: f64,
    pub bound: f64,
    pub margin: f64,
    pub holds: bool,
    pub witness_sample: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BunchingReport {
    pub n: u32,
    pub eps: f64,
    pub nu: f64,
    pub nu_hat: f64,
    pub gamma: f64,
    pub gamma_hat: f64,
    pub bunching_margin: f64,
    pub bunched: bool,
    pub bullets: Vec<Bullet>,
    pub all_bullets_hold: bool,
}

/// Checks `max(nu, nu_hat) < gamma gamma_hat` for per-step rates.
pub fn bunching_holds(nu: f64, nu_hat: f64, gamma: f64, gamma_hat: f64) -> (bool, f64) {
    let margin = gamma * gamma_hat - nu.max(nu_hat);
    (margin > 0.0, margin)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRates {
    pub stable: BundleRates,
    pub center: BundleRates,
    pub unstable: BundleRates,
}

impl SampleRates {
    pub fn measure(l: &DMatrix<f64>, s: &ThreeSplitting, n: u32) -> Self {
        SampleRates {
            stable: BundleRates::of(l, &s.es, n),
            center: BundleRates::of(l, &s.ec, n),
            unstable: BundleRates::of(l, &s.eu, n),
        }
    }
}

/// Rate bullets `||Dg^n v^s|| < (l1 + eps)^n`,
/// `(l2 - eps)^n < ||Dg^n v^c|| < (1 + eps)^n`, `(l3 - eps)^n < ||Dg^n v^u||`
/// and the bunching inequality, with the rate functions set to the measured
/// extremes: `nu = max stable`, `gamma = min center`,
/// `gamma_hat = 1 / max center`, `nu_hat = 1 / min unstable`.
pub fn bunching_report(samples: &[SampleRates], n: u32, eps: f64, lambdas: [f64; 3]) -> BunchingReport {
    let arg = |f: &dyn Fn(&SampleRates) -> f64, max: bool| -> (usize, f64) {
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| (i, f(s)))
            .reduce(|a, b| if (b.1 > a.1) == max && b.1 != a.1 { b } else { a })
            .expect("at least one sample")
    };
    let (is, smax) = arg(&|s| s.stable.max, true);
    let (icl, cmin) = arg(&|s| s.center.min, false);
    let (ich, cmax) = arg(&|s| s.center.max, true);
    let (iu, umin) = arg(&|s| s.unstable.min, false);
    let [l1, l2, l3] = lambdas;
    let upper = |name: &str, measured: f64, bound: f64, w: usize| Bullet {
        name: name.into(),
        measured,
        bound,
        margin: bound - measured,
        holds: measured < bound,
        witness_sample: w,
    };
    let lower = |name: &str, measured: f64, bound: f64, w: usize| Bullet {
        name: name.into(),
        measured,
        bound,
        margin: measured - bound,
        holds: measured > bound,
        witness_sample: w,
    };
    let bullets = vec![
        upper("stable < l1 + eps", smax, l1 + eps, is),
        lower("center > l2 - eps", cmin, l2 - eps, icl),
        upper("center < 1 + eps", cmax, 1.0 + eps, ich),
        lower("unstable > l3 - eps", umin, l3 - eps, iu),
    ];
    let (nu, nu_hat, gamma, gamma_hat) = (smax, 1.0 / umin, cmin, 1.0 / cmax);
    let (bunched, bunching_margin) = bunching_holds(nu, nu_hat, gamma, gamma_hat);
    BunchingReport {
        n,
        eps,
        nu,
        nu_hat,
        gamma,
        gamma_hat,
        bunching_margin,
        bunched,
        all_bullets_hold: bullets.iter().all(|b| b.holds),
        bullets,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrichotomyCase {
    /// No point of the `2n`-segment is moved by the rotation.
    AgreesWithF,
    /// Every `Dg^n` along the segment is within `delta` of `(R_theta B)^n`
    /// for one grid angle.
    NearRotation,
    Neither,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrichotomySample {
    pub case: TrichotomyCase,
    pub theta: f64,
    pub deviation: f64,
}

/// Classifies the `2n`-orbit segment from `x`. `touches_support(y)` tells
/// whether the step from `y` is modified by the rotation.
pub fn trichotomy<D: Dynamics + ?Sized>(
    map: &D,
    touches_support: &dyn Fn(&GroupElement) -> bool,
    family: &MapFamily,
    x: &GroupElement,
    n: u32,
    delta: f64,
) -> TrichotomySample {
    let mut y = *x;
    let mut segment = Vec::with_capacity(2 * n as usize);
    for _ in 0..2 * n {
        segment.push(y);
        y = map.step(&y);
    }
    if !segment.iter().any(|y| touches_support(y)) {
        return TrichotomySample {
            case: TrichotomyCase::AgreesWithF,
            theta: 0.0,
            deviation: 0.0,
        };
    }
    let products: Vec<DMatrix<f64>> = segment[..=n as usize]
        .iter()
        .map(|y| to_dmatrix(&cocycle_product(map, y, n).0))
        .collect();
    let (theta, deviation) = family
        .thetas()
        .iter()
        .map(|&theta| {
            let target = family.power(theta, n);
            let dev = products
                .iter()
                .map(|p| linalg::spectral_norm(&(p - &target)))
                .fold(0.0, f64::max);
            (theta, dev)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("nonempty grid");
    TrichotomySample {
        case: if deviation < delta {
            TrichotomyCase::NearRotation
        } else {
            TrichotomyCase::Neither
        },
        theta,
        deviation,
    }
}

/// Van der Corput radical inverse of `i` in `base`.
pub fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    inv = r;
    inv
}

const PRIMES: [u64; DIM] = [2, 3, 5, 7, 11, 13, 17, 19, 23];

/// Halton point `i` mapped to `[-1, 1]^9`.
pub fn halton_cube(i: u64) -> [f64; DIM] {
    let mut p = [0.0; DIM];
    for (k, b) in PRIMES.iter().enumerate() {
        p[k] = 2.0 * radical_inverse(i + 1, *b) - 1.0;
    }
    p
}

/// `count` deterministic points in the ball of `radius`, by rejection from
/// the Halton sequence starting at index `offset`.
pub fn halton_ball(count: usize, radius: f64, offset: u64) -> Vec<LieVector> {
    let mut out = Vec::with_capacity(count);
    let mut i = offset;
    while out.len() < count {
        let p = LieVector::from_array(halton_cube(i));
        i += 1;
        if p.norm() <= 1.0 {
            out.push(p * radius);
        }
    }
    out
}

/// Decades of radius covered by [`log_radius_points`].
pub const SUPPORT_DECADES: f64 = 6.0;

/// Halton directions at radii spread log-uniformly over
/// `[radius 10^-SUPPORT_DECADES, radius]`. Uniform sampling of a 9-ball
/// puts almost every point near its boundary.
pub fn log_radius_points(count: usize, radius: f64, offset: u64) -> Vec<LieVector> {
    halton_ball(count, 1.0, offset)
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let u = radical_inverse(offset + i as u64 + 1, 29);
            v * (radius * 10f64.powf(-SUPPORT_DECADES * u) / v.norm())
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    FixedPoint,
    ChartBall,
    SupportBall,
    ForwardOrbit,
    BackwardOrbit,
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePoint {
    pub point: GroupElement,
    pub kind: SampleKind,
}

/// Fixed point, low-discrepancy points in the chart and support balls,
/// orbit segments entering and leaving the support ball, and points spread
/// over a fundamental cell of the lattice.
pub fn sample_points<D: Dynamics + ?Sized>(
    map: &D,
    lattice: &Lattice,
    support_radius: f64,
    count: usize,
) -> Vec<SamplePoint> {
    let mut out = vec![SamplePoint {
        point: GroupElement::identity(),
        kind: SampleKind::FixedPoint,
    }];
    if count <= 1 {
        return out;
    }
    let rest = count - 1;
    let quarter = rest / 4;
    let chart = lattice.chart_radius();
    for v in halton_ball(quarter, chart, 0) {
        out.push(SamplePoint {
            point: GroupElement::from_log(v),
            kind: SampleKind::ChartBall,
        });
    }
    for v in log_radius_points(quarter, support_radius, 7919) {
        out.push(SamplePoint {
            point: GroupElement::from_log(v),
            kind: SampleKind::SupportBall,
        });
    }
    let orbit_len = 8;
    let seeds = log_radius_points(quarter.div_ceil(2 * orbit_len).max(1), support_radius, 104_729);
    let mut orbit_points = Vec::new();
    for s in &seeds {
        let (mut f, mut b) = (GroupElement::from_log(*s), GroupElement::from_log(*s));
        for _ in 0..orbit_len {
            f = map.step(&f);
            b = map.step_inverse(&b);
            orbit_points.push(SamplePoint {
                point: f,
                kind: SampleKind::ForwardOrbit,
            });
            orbit_points.push(SamplePoint {
                point: b,
                kind: SampleKind::BackwardOrbit,
            });
        }
    }
    orbit_points.truncate(quarter);
    out.extend(orbit_points);
    let mut i = 1_000_003u64;
    while out.len() < count {
        let u = halton_cube(i);
        i += 1;
        let coeffs = nalgebra::SVector::<f64, DIM>::from(u.map(|c| 0.5 * c));
        let p = GroupElement::from_log(LieVector(lattice.reduced * coeffs));
        out.push(SamplePoint {
            point: lattice.reduce(&p),
            kind: SampleKind::Global,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(v))
    }

    #[test]
    fn identity_cone_is_degenerate() {
        assert!(matches!(
            cone_from_map(&DMatrix::identity(3, 3), 1.0),
            Err(ConeError::DegenerateCone { .. })
        ));
        assert!(cone_from_map(&(DMatrix::identity(2, 2) * 2.0), 2.0).is_err());
    }

    #[test]
    fn equal_cones_have_zero_margin() {
        let c = cone_from_map(&diag(&[0.5, 3.0]), 1.0).unwrap();
        let r = compactly_contained(&c, &c);
        assert!(r.margin.abs() < 1e-9);
        assert!(!r.compact(MARGIN_FLOOR));
    }

    #[test]
    fn larger_threshold_cone_sits_inside() {
        let l = diag(&[0.5, 3.0]);
        let inner = cone_from_map(&l, 2.0).unwrap();
        let outer = cone_from_map(&l, 1.0).unwrap();
        assert!(compactly_contained(&inner, &outer).compact(MARGIN_FLOOR));
        let back = compactly_contained(&outer, &inner);
        assert!(!back.contained());
        let w = DVector::from_vec(back.witness.unwrap());
        assert!(outer.value(&w) >= -1e-9);
        assert!(inner.value(&w) < 0.0);
    }

    #[test]
    fn expanding_direction_is_in_the_cone() {
        let l = diag(&[0.3, 0.4, 8.0]);
        let c = cone_from_map(&l, 2.0).unwrap();
        assert!(c.contains(&DVector::from_vec(vec![0.0, 0.0, 1.0])));
        assert!(!c.contains(&DVector::from_vec(vec![1.0, 0.0, 0.0])));
        assert!(map_margin(&l, 2.0).unwrap().compact(MARGIN_FLOOR));
    }

    #[test]
    fn threshold_at_eigenvalue_never_compact() {
        for n in 1..5 {
            let l = diag(&[0.5, 2.0]).pow(n);
            let t = 2f64.powi(n as i32);
            assert!(map_margin(&l, t).is_err() || !map_margin(&l, t).unwrap().compact(MARGIN_FLOOR));
        }
    }

    #[test]
    fn cocycle_powers_multiply_exactly() {
        let r = ConstantRate { value: 0.37 };
        let x = GroupElement::identity();
        let a = r.cocycle(&x, 5);
        let b = r.cocycle(&x, 7);
        assert_eq!(a.mul(&b), Some(r.cocycle(&x, 12)));
        assert_eq!(a.mul(&ConstantRate { value: 0.5 }.cocycle(&x, 1)), None);
    }

    #[test]
    fn radical_inverse_base_two() {
        assert_eq!(radical_inverse(1, 2), 0.5);
        assert_eq!(radical_inverse(2, 2), 0.25);
        assert_eq!(radical_inverse(3, 2), 0.75);
        assert!((radical_inverse(5, 3) - (2.0 / 3.0 + 1.0 / 9.0)).abs() < 1e-15);
    }

    #[test]
    fn fabricated_rates_fail_bunching() {
        let (ok, margin) = bunching_holds(0.9, 0.1, 0.5, 1.0);
        assert!(!ok);
        assert!((margin + 0.4).abs() < 1e-15);
    }

    #[test]
    fn intersection_of_coordinate_spaces() {
        let a = coordinate_basis(&[0, 1, 2, 3, 4]);
        let b = coordinate_basis(&[3, 4, 5, 6, 7, 8]);
        let c = intersect(&a, &b);
        assert_eq!(c.ncols(), 2);
        assert!(linalg::principal_angle(&c, &coordinate_basis(&[3, 4])) < 1e-12);
    }
}
