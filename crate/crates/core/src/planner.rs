//! Eigenvalue surgery at the fixed point: which rotations of the derivative
//! keep the spectrum off the domination annuli, how to make a complex pair
//! real, how to split a Jordan block, and how to redistribute moduli so a
//! center eigenvalue crosses 1.

use nalgebra::{DMatrix, DVector, Matrix2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algebraic::{EigenData, EigenLabel};
use crate::deformation::RotationPlane;
use crate::linalg::{self, EigenDecomposition, C64};
use crate::nilmanifold::{basis_index, Slot, DIM};

#[derive(Debug, Error, Clone, PartialEq, Serialize, Deserialize)]
pub enum PlanError {
    #[error("annulus needs 0 < alpha < beta, got [{alpha}, {beta}]")]
    BadAnnulus { alpha: f64, beta: f64 },
    #[error("theta grid of {0} points is below the minimum of 100")]
    GridTooSmall(usize),
    #[error("plane basis is not orthonormal (defect {0:e})")]
    NotOrthonormal(f64),
    #[error("off-diagonal entry is zero: not a Jordan block")]
    NotJordan,
    #[error("no detuning angle up to {0} separates the eigenvalues")]
    DetuningFailed(f64),
    #[error("complex pair of modulus {modulus} lies in the annulus [{alpha}, {beta}]")]
    ComplexPairInAnnulus { modulus: f64, alpha: f64, beta: f64 },
    #[error("spectrum is not volume preserving: product of moduli is {0}")]
    NotVolumePreserving(f64),
    #[error("spectrum block `{0}` is empty")]
    EmptyBlock(String),
    #[error("eigenvalue {0} is zero or not finite")]
    BadEigenvalue(f64),
    #[error("no mu satisfies 1 < mu < {hi}")]
    InfeasibleMu { hi: f64 },
    #[error("target {target} is unreachable from the pair ({c}, {u}) by in-plane rotation")]
    Unreachable { c: f64, u: f64, target: f64 },
    #[error("single-plane plan needs l2 l3^2 > l3, got {lhs} <= {rhs}")]
    Infeasible { lhs: f64, rhs: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnulusSpec {
    pub alpha: f64,
    pub beta: f64,
}

impl AnnulusSpec {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, PlanError> {
        if !(alpha > 0.0 && alpha < beta && beta.is_finite()) {
            return Err(PlanError::BadAnnulus { alpha, beta });
        }
        Ok(AnnulusSpec { alpha, beta })
    }

    /// Rates at the thirds of the log-gap `(lo, hi)`.
    pub fn from_gap(lo: f64, hi: f64) -> Result<Self, PlanError> {
        Self::new(lo.powf(2.0 / 3.0) * hi.powf(1.0 / 3.0), lo.powf(1.0 / 3.0) * hi.powf(2.0 / 3.0))
    }

    pub fn contains(&self, modulus: f64) -> bool {
        self.alpha <= modulus && modulus <= self.beta
    }

    /// Distance from the annulus; negative inside.
    pub fn clearance(&self, modulus: f64) -> f64 {
        (self.alpha - modulus).max(modulus - self.beta)
    }
}

/// An oriented plane in `R^n` with orthonormal basis; rotation by `theta`
/// turns `e1` towards `e2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub e1: DVector<f64>,
    pub e2: DVector<f64>,
}

impl Plane {
    pub fn new(e1: DVector<f64>, e2: DVector<f64>) -> Result<Self, PlanError> {
        let defect = (e1.norm() - 1.0)
            .abs()
            .max((e2.norm() - 1.0).abs())
            .max(e1.dot(&e2).abs());
        if e1.len() != e2.len() || defect > 1e-12 {
            return Err(PlanError::NotOrthonormal(defect));
        }
        Ok(Plane { e1, e2 })
    }

    pub fn coordinate(n: usize, i: usize, j: usize) -> Self {
        let mut e1 = DVector::zeros(n);
        let mut e2 = DVector::zeros(n);
        e1[i] = 1.0;
        e2[j] = 1.0;
        Plane { e1, e2 }
    }

    pub fn from_rotation_plane(p: &RotationPlane) -> Self {
        Plane {
            e1: DVector::from_column_slice(p.e1.as_slice()),
            e2: DVector::from_column_slice(p.e2.as_slice()),
        }
    }

    /// The 9-dimensional plane, when the ambient dimension fits.
    pub fn to_rotation_plane(&self) -> Option<RotationPlane> {
        if self.e1.len() != DIM {
            return None;
        }
        RotationPlane::new(
            nalgebra::SVector::from_column_slice(self.e1.as_slice()),
            nalgebra::SVector::from_column_slice(self.e2.as_slice()),
        )
        .ok()
    }

    pub fn dim(&self) -> usize {
        self.e1.len()
    }

    pub fn rotation(&self, theta: f64) -> DMatrix<f64> {
        let n = self.dim();
        let p = &self.e1 * self.e1.transpose() + &self.e2 * self.e2.transpose();
        let j = &self.e2 * self.e1.transpose() - &self.e1 * self.e2.transpose();
        DMatrix::identity(n, n) + p * (theta.cos() - 1.0) + j * theta.sin()
    }

    /// Matrix of `m` compressed to the plane in the basis `(e1, e2)`.
    pub fn restrict(&self, m: &DMatrix<f64>) -> Matrix2<f64> {
        let me1 = m * &self.e1;
        let me2 = m * &self.e2;
        Matrix2::new(
            self.e1.dot(&me1),
            self.e1.dot(&me2),
            self.e2.dot(&me1),
            self.e2.dot(&me2),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnulusWitness {
    pub grid: usize,
    pub min_clearance: f64,
    pub worst_theta: f64,
    /// Bound on `||R_t Dq - R_s Dq||` for `t` within half a step of a grid
    /// point `s`.
    pub step_perturbation: f64,
    pub max_condition: f64,
    /// Extra angles inserted where grid points could not cover their step.
    pub refinements: usize,
    /// Bauer-Fike covers every angle between grid points.
    pub gaps_certified: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnulusViolation {
    pub theta: f64,
    pub eigenvalue: (f64, f64),
    pub modulus: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnulusVerdict {
    Avoided(AnnulusWitness),
    Violated(AnnulusViolation),
}

impl AnnulusVerdict {
    pub fn avoided(&self) -> bool {
        matches!(self, AnnulusVerdict::Avoided(_))
    }
}

pub const MIN_ANNULUS_GRID: usize = 100;

/// Sweeps `R_theta Dq` over a uniform grid of `[0, a]` and checks every
/// eigenvalue modulus stays outside the annulus.
pub fn annulus_avoidance(
    dq: &DMatrix<f64>,
    plane: &Plane,
    a: f64,
    ann: &AnnulusSpec,
    grid: usize,
) -> Result<AnnulusVerdict, PlanError> {
    sweep_annulus(dq, plane, a, ann, grid, MAX_REFINE_DEPTH)
}

fn sweep_annulus(
    dq: &DMatrix<f64>,
    plane: &Plane,
    a: f64,
    ann: &AnnulusSpec,
    grid: usize,
    max_depth: u32,
) -> Result<AnnulusVerdict, PlanError> {
    if grid < MIN_ANNULUS_GRID {
        return Err(PlanError::GridTooSmall(grid));
    }
    let thetas: Vec<f64> = if a == 0.0 {
        vec![0.0]
    } else {
        (0..grid).map(|i| a * i as f64 / (grid - 1) as f64).collect()
    };
    let step = if thetas.len() > 1 { a / (grid - 1) as f64 } else { 0.0 };
    let norm = linalg::spectral_norm(dq);
    let perturbation = norm * step / 2.0;

    let samples: Vec<AnnulusSample> = thetas
        .par_iter()
        .map(|&theta| AnnulusSample::at(dq, plane, ann, theta))
        .collect();
    if let Some(bad) = samples.iter().find(|s| s.clearance < 0.0) {
        return Ok(AnnulusVerdict::Violated(bad.violation()));
    }

    // Each grid point covers half of each neighbouring step; an interval
    // whose endpoints cannot cover it is bisected.
    let intervals: Vec<Result<(usize, AnnulusSample, bool), AnnulusViolation>> = samples
        .par_windows(2)
        .map(|w| refine(dq, plane, ann, norm, &w[0], &w[1], max_depth))
        .collect();
    let mut worst = samples
        .iter()
        .min_by(|x, y| x.clearance.total_cmp(&y.clearance))
        .expect("nonempty grid")
        .clone();
    let mut refinements = 0;
    let mut gaps_certified = true;
    for r in intervals {
        let (count, w, ok) = match r {
            Ok(v) => v,
            Err(v) => return Ok(AnnulusVerdict::Violated(v)),
        };
        refinements += count;
        gaps_certified &= ok;
        if w.clearance < worst.clearance {
            worst = w;
        }
    }
    Ok(AnnulusVerdict::Avoided(AnnulusWitness {
        grid: thetas.len(),
        min_clearance: worst.clearance,
        worst_theta: worst.theta,
        step_perturbation: perturbation,
        max_condition: samples.iter().map(|s| s.condition).fold(0.0, f64::max),
        refinements,
        gaps_certified,
    }))
}

const MAX_REFINE_DEPTH: u32 = 8;

#[derive(Clone, Debug)]
struct AnnulusSample {
    theta: f64,
    clearance: f64,
    worst: C64,
    condition: f64,
}

impl AnnulusSample {
    fn at(dq: &DMatrix<f64>, plane: &Plane, ann: &AnnulusSpec, theta: f64) -> Self {
        let m = plane.rotation(theta) * dq;
        let (values, condition) = match EigenDecomposition::compute(&m) {
            Some(d) => {
                let k = d.condition();
                (d.values, k)
            }
            None => (linalg::eigenvalues(&m), f64::INFINITY),
        };
        let worst = values
            .iter()
            .copied()
            .min_by(|x, y| ann.clearance(x.norm()).total_cmp(&ann.clearance(y.norm())))
            .expect("nonempty spectrum");
        AnnulusSample {
            theta,
            clearance: ann.clearance(worst.norm()),
            worst,
            condition,
        }
    }

    fn violation(&self) -> AnnulusViolation {
        AnnulusViolation {
            theta: self.theta,
            eigenvalue: (self.worst.re, self.worst.im),
            modulus: self.worst.norm(),
        }
    }

    /// Bauer-Fike: eigenvalues within `radius` of this angle move by at
    /// most `kappa(V) ||Dq|| radius`.
    fn covers(&self, norm: f64, radius: f64) -> bool {
        self.clearance > self.condition * norm * radius
    }
}

/// Returns (extra samples, worst sample, covered).
fn refine(
    dq: &DMatrix<f64>,
    plane: &Plane,
    ann: &AnnulusSpec,
    norm: f64,
    a: &AnnulusSample,
    b: &AnnulusSample,
    depth_left: u32,
) -> Result<(usize, AnnulusSample, bool), AnnulusViolation> {
    let half = 0.5 * (b.theta - a.theta);
    if a.covers(norm, half) && b.covers(norm, half) {
        let w = if a.clearance <= b.clearance { a } else { b };
        return Ok((0, w.clone(), true));
    }
    let defective = !a.condition.is_finite() || !b.condition.is_finite();
    if depth_left == 0 || defective {
        let w = if a.clearance <= b.clearance { a } else { b };
        return Ok((0, w.clone(), false));
    }
    let mid = AnnulusSample::at(dq, plane, ann, a.theta + half);
    if mid.clearance < 0.0 {
        return Err(mid.violation());
    }
    let (n1, w1, ok1) = refine(dq, plane, ann, norm, a, &mid, depth_left - 1)?;
    let (n2, w2, ok2) = refine(dq, plane, ann, norm, &mid, b, depth_left - 1)?;
    let w = if w1.clearance <= w2.clearance { w1 } else { w2 };
    Ok((1 + n1 + n2, w, ok1 && ok2))
}

/// Eigenvalues of a real 2x2 map, ordered by modulus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneEigen {
    pub trace: f64,
    pub det: f64,
    pub values: [(f64, f64); 2],
}

impl PlaneEigen {
    fn from_trace_det(trace: f64, det: f64) -> Self {
        let disc = trace * trace - 4.0 * det;
        let values = if disc >= 0.0 {
            let s = disc.sqrt();
            let big = 0.5 * (trace + if trace >= 0.0 { s } else { -s });
            let small = if big != 0.0 { det / big } else { 0.0 };
            if small.abs() <= big.abs() {
                [(small, 0.0), (big, 0.0)]
            } else {
                [(big, 0.0), (small, 0.0)]
            }
        } else {
            let im = 0.5 * (-disc).sqrt();
            [(0.5 * trace, -im), (0.5 * trace, im)]
        };
        PlaneEigen { trace, det, values }
    }

    pub fn of(m: &Matrix2<f64>) -> Self {
        Self::from_trace_det(m.trace(), m.determinant())
    }

    pub fn is_real(&self) -> bool {
        self.values[0].1 == 0.0
    }

    pub fn discriminant(&self) -> f64 {
        self.trace * self.trace - 4.0 * self.det
    }

    pub fn real_pair(&self) -> Option<(f64, f64)> {
        self.is_real().then(|| (self.values[0].0, self.values[1].0))
    }

    pub fn moduli(&self) -> (f64, f64) {
        let m = |v: (f64, f64)| v.0.hypot(v.1);
        (m(self.values[0]), m(self.values[1]))
    }
}

/// Eigenvalues of `R_theta diag(c, u)`: trace `(c + u) cos theta`,
/// determinant `c u`.
pub fn in_plane_eigen(c: f64, u: f64, theta: f64) -> PlaneEigen {
    PlaneEigen::from_trace_det((c + u) * theta.cos(), c * u)
}

const ANGLE_TOL: f64 = 1e-14;

/// Angle in `[0, pi]` at which `R_theta diag(c, u)` has the given trace,
/// found by bisection on the monotone map `theta -> (c + u) cos theta`.
pub fn angle_for_trace(c: f64, u: f64, trace: f64) -> Option<f64> {
    let s = c + u;
    if trace.abs() > s.abs() {
        return None;
    }
    let f = |t: f64| s * t.cos() - trace;
    let (mut lo, mut hi) = (0.0f64, std::f64::consts::PI);
    if f(lo) == 0.0 {
        return Some(0.0);
    }
    while hi - lo > ANGLE_TOL {
        let mid = 0.5 * (lo + hi);
        if (f(mid) > 0.0) == (f(lo) > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Angle making `target` an eigenvalue of `R_theta diag(c, u)`.
pub fn angle_for_eigenvalue(c: f64, u: f64, target: f64) -> Result<f64, PlanError> {
    angle_for_trace(c, u, target + c * u / target).ok_or(PlanError::Unreachable { c, u, target })
}

fn rotated_disc(m: &Matrix2<f64>, theta: f64) -> f64 {
    let (s, c) = theta.sin_cos();
    PlaneEigen::of(&(Matrix2::new(c, -s, s, c) * m)).discriminant()
}

/// Smallest `a >= 0` at which `R_a m` has real eigenvalues.
///
/// The trace of `R_theta m` is `A cos(theta - theta0)` with
/// `A^2 - 4 det m = (m11 - m22)^2 + (m12 + m21)^2 >= 0`, so the discriminant
/// first turns nonnegative at `theta0 - acos(2 sqrt(det) / A) + j pi`; the
/// closed-form root is then refined by bisection.
pub fn find_realifying_angle(m: &Matrix2<f64>) -> f64 {
    if rotated_disc(m, 0.0) >= 0.0 {
        return 0.0;
    }
    let k = m[(0, 1)] - m[(1, 0)];
    let amp = m.trace().hypot(k);
    let theta0 = k.atan2(m.trace());
    let alpha = (2.0 * m.determinant().sqrt() / amp).min(1.0).acos();
    let pi = std::f64::consts::PI;
    let mut root = theta0 - alpha;
    while root <= 0.0 {
        root += pi;
    }
    while root > pi {
        root -= pi;
    }
    let width = 1e-7 * root.max(1.0);
    let (mut lo, mut hi) = ((root - width).max(0.0), root + width);
    if rotated_disc(m, lo) < 0.0 && rotated_disc(m, hi) >= 0.0 {
        while hi - lo > ANGLE_TOL {
            let mid = 0.5 * (lo + hi);
            if rotated_disc(m, mid) >= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    } else {
        root
    }
}

/// Like [`find_realifying_angle`], but refuses a complex pair whose modulus
/// sits inside one of the domination annuli.
pub fn realify_outside_annuli(m: &Matrix2<f64>, annuli: &[AnnulusSpec]) -> Result<f64, PlanError> {
    let e = PlaneEigen::of(m);
    if !e.is_real() {
        let modulus = e.det.sqrt();
        if let Some(a) = annuli.iter().find(|a| a.contains(modulus)) {
            return Err(PlanError::ComplexPairInAnnulus {
                modulus,
                alpha: a.alpha,
                beta: a.beta,
            });
        }
    }
    Ok(find_realifying_angle(m))
}

pub const DEFAULT_DETUNING_MAX: f64 = 0.1;

/// Small angle splitting the Jordan block `[[l, b], [0, l]]`: the trace of
/// the rotated block is `2 l cos theta + b sin theta`, which grows in
/// magnitude when `theta` has the sign of `b l`.
pub fn jordan_detuning(lambda: f64, b: f64, theta_max: f64) -> Result<f64, PlanError> {
    if b == 0.0 {
        return Err(PlanError::NotJordan);
    }
    let sign = if lambda != 0.0 { (b * lambda).signum() } else { b.signum() };
    let mut theta = sign * theta_max.abs();
    for _ in 0..64 {
        let trace = 2.0 * lambda * theta.cos() + b * theta.sin();
        if trace * trace > 4.0 * lambda * lambda {
            return Ok(theta);
        }
        theta *= 0.5;
    }
    Err(PlanError::DetuningFailed(theta_max))
}

/// Real eigenvalues grouped as stable, center and unstable, each block
/// sorted by modulus. Axis `i` of the flattened order carries the `i`-th
/// value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSpectrum {
    pub stable: Vec<f64>,
    pub center: Vec<f64>,
    pub unstable: Vec<f64>,
}

impl LabeledSpectrum {
    pub fn new(mut stable: Vec<f64>, mut center: Vec<f64>, mut unstable: Vec<f64>) -> Self {
        for v in [&mut stable, &mut center, &mut unstable] {
            v.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
        }
        LabeledSpectrum {
            stable,
            center,
            unstable,
        }
    }

    pub fn flattened(&self) -> Vec<f64> {
        self.stable
            .iter()
            .chain(&self.center)
            .chain(&self.unstable)
            .copied()
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.stable.len() + self.center.len() + self.unstable.len()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(self.flattened()))
    }

    fn validate(&self) -> Result<(), PlanError> {
        if self.center.is_empty() {
            return Err(PlanError::EmptyBlock("center".into()));
        }
        if self.unstable.is_empty() {
            return Err(PlanError::EmptyBlock("unstable".into()));
        }
        if self.stable.is_empty() {
            return Err(PlanError::EmptyBlock("stable".into()));
        }
        let all = self.flattened();
        if let Some(&v) = all.iter().find(|v| !v.is_finite() || **v == 0.0) {
            return Err(PlanError::BadEigenvalue(v));
        }
        let log_prod: f64 = all.iter().map(|v| v.abs().ln()).sum();
        if log_prod.abs() > 1e-9 {
            return Err(PlanError::NotVolumePreserving(log_prod.exp()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanBranch {
    /// One center modulus is moved onto the unit circle.
    ModulusOne,
    /// The largest center modulus absorbs the unstable moduli one by one.
    Accumulate,
    /// As `Accumulate`, applied to the inverse map.
    MirroredAccumulate,
}

/// One bookkeeping step: the pair on axes `(accumulated, partner)` is
/// replaced by `target` with the same product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RedistributionStep {
    pub axes: (usize, usize),
    pub input: (f64, f64),
    pub target: (f64, f64),
    pub product_defect: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepAnnulusCheck {
    /// Number of moduli below the gap.
    pub split_index: usize,
    pub annulus: AnnulusSpec,
    pub verdict: AnnulusVerdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealizedStep {
    pub plane: Plane,
    pub angle: f64,
    pub target: (f64, f64),
    pub moduli_after: Vec<f64>,
    pub annulus_checks: Vec<StepAnnulusCheck>,
}

/// Why an orthonormal in-plane rotation cannot produce a step: rotation of
/// `diag(p, u)` only moves moduli inward, so the target `mu` must lie
/// between `|p|` and `|u|`. `required_skew_angle` is the largest angle
/// between the two eigenvectors (in a skewed metric) that would make the
/// target trace reachable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealizationFailure {
    pub step: usize,
    pub accumulated: f64,
    pub partner: f64,
    pub mu: f64,
    pub required_skew_angle: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Realization {
    pub mu: Option<f64>,
    pub mu_interval: Option<(f64, f64)>,
    pub steps: Vec<RealizedStep>,
    pub failure: Option<RealizationFailure>,
    pub final_moduli: Vec<f64>,
    /// Steps with at least one annulus check that did not pass.
    pub flagged_steps: Vec<usize>,
}

impl Realization {
    pub fn realizable(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RedistributionPlan {
    pub branch: PlanBranch,
    pub k: usize,
    pub l: usize,
    pub m: usize,
    pub mu: Option<f64>,
    pub mu_interval: Option<(f64, f64)>,
    pub steps: Vec<RedistributionStep>,
    /// `mu^-m |l_l^c l_1^u ... l_m^u|` for the accumulating branches.
    pub final_accumulated: Option<f64>,
    pub final_inequality_holds: bool,
    /// `| |p u| mu * mu - |p u| |` for the first pair under the literal
    /// "modulus |l_l^c l_1^u| mu" reading; nonzero whenever `mu != 1`.
    pub literal_reading_product_defect: Option<f64>,
    pub realization: Realization,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanOptions {
    pub annulus_grid: usize,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions { annulus_grid: 128 }
    }
}

fn sorted_moduli(m: &DMatrix<f64>) -> Vec<f64> {
    linalg::moduli(m)
}

/// Annulus checks for every spectral gap that survives the step.
fn step_annulus_checks(
    before: &DMatrix<f64>,
    plane: &Plane,
    angle: f64,
    grid: usize,
) -> Vec<StepAnnulusCheck> {
    let after = plane.rotation(angle) * before;
    let mb = sorted_moduli(before);
    let ma = sorted_moduli(&after);
    let mut out = Vec::new();
    for k in 1..mb.len() {
        let lo = mb[k - 1].max(ma[k - 1]);
        let hi = mb[k].min(ma[k]);
        if hi <= lo * (1.0 + 1e-9) {
            continue;
        }
        let Ok(annulus) = AnnulusSpec::from_gap(lo, hi) else {
            continue;
        };
        // The sweep runs over [0, |angle|]; a negative angle is the positive
        // rotation of the plane with reversed orientation.
        let swept = if angle < 0.0 {
            Plane {
                e1: plane.e2.clone(),
                e2: plane.e1.clone(),
            }
        } else {
            plane.clone()
        };
        let verdict = sweep_annulus(before, &swept, angle.abs(), &annulus, grid.max(MIN_ANNULUS_GRID), 0)
            .expect("grid clamped to the minimum");
        out.push(StepAnnulusCheck {
            split_index: k,
            annulus,
            verdict,
        });
    }
    out
}

/// Applies steps in orthonormal planes `(v_acc, e_partner)`, tracking the
/// eigenvector of the accumulating eigenvalue.
fn realize_steps(
    start: &DMatrix<f64>,
    acc_axis: usize,
    steps: &[(usize, f64, f64, f64)],
    grid: usize,
) -> Result<(DMatrix<f64>, Vec<RealizedStep>), PlanError> {
    let n = start.nrows();
    let mut m = start.clone();
    let mut acc = DVector::zeros(n);
    acc[acc_axis] = 1.0;
    let mut out = Vec::new();
    for &(partner_axis, angle_sign, target_partner, target_acc) in steps {
        let mut e = DVector::zeros(n);
        e[partner_axis] = 1.0;
        let plane = Plane::new(acc.clone(), e)?;
        let block = plane.restrict(&m);
        let (p, u) = (block[(0, 0)], block[(1, 1)]);
        let theta = angle_for_eigenvalue(p, u, target_partner)? * angle_sign;
        let checks = step_annulus_checks(&m, &plane, theta, grid);
        m = plane.rotation(theta) * &m;
        let rotated = plane.restrict(&m);
        // Eigenvector of the accumulated eigenvalue inside the plane.
        let shifted = rotated - Matrix2::identity() * target_acc;
        let w = if shifted.row(0).norm() >= shifted.row(1).norm() {
            nalgebra::Vector2::new(-shifted[(0, 1)], shifted[(0, 0)])
        } else {
            nalgebra::Vector2::new(-shifted[(1, 1)], shifted[(1, 0)])
        };
        let w = w / w.norm();
        acc = &plane.e1 * w[0] + &plane.e2 * w[1];
        acc /= acc.norm();
        out.push(RealizedStep {
            plane,
            angle: theta,
            target: (target_acc, target_partner),
            moduli_after: sorted_moduli(&m),
            annulus_checks: checks,
        });
    }
    Ok((m, out))
}

struct Accumulation {
    mu: f64,
    hi: f64,
    steps: Vec<RedistributionStep>,
    final_accumulated: f64,
    literal_defect: f64,
}

/// Bookkeeping for `(acc, u_1, ..., u_m)` with `|acc| < 1 < |u_1|`.
fn accumulate(acc: (usize, f64), partners: &[(usize, f64)]) -> Result<Accumulation, PlanError> {
    let m = partners.len() as f64;
    let p0: f64 = acc.1.abs() * partners.iter().map(|p| p.1.abs()).product::<f64>();
    let hi = partners[0].1.abs().min(p0.powf(1.0 / (2.0 * m)));
    if hi <= 1.0 {
        return Err(PlanError::InfeasibleMu { hi });
    }
    let mu = hi.sqrt();
    let mut pi = acc.1;
    let mut steps = Vec::new();
    for &(axis, u) in partners {
        let partner = u.signum() * mu;
        let next = pi * u / partner;
        steps.push(RedistributionStep {
            axes: (acc.0, axis),
            input: (pi, u),
            target: (next, partner),
            product_defect: (next * partner - pi * u).abs(),
        });
        pi = next;
    }
    let first = acc.1.abs() * partners[0].1.abs();
    Ok(Accumulation {
        mu,
        hi,
        steps,
        final_accumulated: pi.abs(),
        literal_defect: (first * mu * mu - first).abs(),
    })
}

/// Largest `mu` lower bound making every step realizable by orthonormal
/// rotations: before step `i + 1` the accumulated modulus
/// `|acc| u_1 ... u_i / mu^i` must not exceed `mu`.
fn realizable_lower_bound(acc: f64, partners: &[(usize, f64)]) -> f64 {
    let mut lo: f64 = 1.0;
    let mut prod = acc.abs();
    for (i, p) in partners.iter().enumerate().take(partners.len().saturating_sub(1)) {
        prod *= p.1.abs();
        lo = lo.max(prod.powf(1.0 / (i as f64 + 2.0)));
    }
    lo
}

fn skew_angle(p: f64, u: f64, mu: f64) -> f64 {
    let t = (p * u / mu).abs() + mu;
    let s = p.abs() + u.abs();
    let excess = (t * t - s * s).max(0.0).sqrt();
    (u.abs() - p.abs()).abs().atan2(excess)
}

/// Plans the moduli redistribution that forces a center eigenvalue across
/// the unit circle.
pub fn plan_center_collapse(
    spec: &LabeledSpectrum,
    opts: &PlanOptions,
) -> Result<RedistributionPlan, PlanError> {
    spec.validate()?;
    let (k, l, m) = (spec.stable.len(), spec.center.len(), spec.unstable.len());
    let start = spec.matrix();
    let center_axis = |j: usize| k + j;

    if let Some(j) = (0..l.saturating_sub(1))
        .find(|&j| spec.center[j].abs() < 1.0 && 1.0 < spec.center[j + 1].abs())
    {
        let (c, u) = (spec.center[j], spec.center[j + 1]);
        let target = c.signum();
        let other = c * u / target;
        let step = RedistributionStep {
            axes: (center_axis(j + 1), center_axis(j)),
            input: (u, c),
            target: (other, target),
            product_defect: (other * target - c * u).abs(),
        };
        let (end, realized) = realize_steps(
            &start,
            center_axis(j + 1),
            &[(center_axis(j), 1.0, target, other)],
            opts.annulus_grid,
        )?;
        let flagged = flagged(&realized);
        return Ok(RedistributionPlan {
            branch: PlanBranch::ModulusOne,
            k,
            l,
            m,
            mu: None,
            mu_interval: None,
            steps: vec![step],
            final_accumulated: None,
            final_inequality_holds: true,
            literal_reading_product_defect: None,
            realization: Realization {
                mu: None,
                mu_interval: None,
                steps: realized,
                failure: None,
                final_moduli: sorted_moduli(&end),
                flagged_steps: flagged,
            },
        });
    }

    let contracting = spec.center.iter().all(|c| c.abs() < 1.0);
    let expanding = spec.center.iter().all(|c| c.abs() > 1.0);
    let (branch, acc, partners, invert) = if contracting {
        let acc = (center_axis(l - 1), spec.center[l - 1]);
        let partners: Vec<(usize, f64)> = spec
            .unstable
            .iter()
            .enumerate()
            .map(|(i, &u)| (k + l + i, u))
            .collect();
        (PlanBranch::Accumulate, acc, partners, false)
    } else if expanding {
        // Inverse map: reciprocal moduli, stable block plays the unstable role.
        let acc = (center_axis(0), 1.0 / spec.center[0]);
        let partners: Vec<(usize, f64)> = spec
            .stable
            .iter()
            .enumerate()
            .rev()
            .map(|(i, &s)| (i, 1.0 / s))
            .collect();
        (PlanBranch::MirroredAccumulate, acc, partners, true)
    } else {
        // Some center modulus equals one already.
        return Ok(RedistributionPlan {
            branch: PlanBranch::ModulusOne,
            k,
            l,
            m,
            mu: None,
            mu_interval: None,
            steps: vec![],
            final_accumulated: None,
            final_inequality_holds: true,
            literal_reading_product_defect: None,
            realization: Realization {
                mu: None,
                mu_interval: None,
                steps: vec![],
                failure: None,
                final_moduli: sorted_moduli(&start),
                flagged_steps: vec![],
            },
        });
    };

    let book = accumulate(acc, &partners)?;
    let mirror = |x: f64| if invert { 1.0 / x } else { x };
    let steps: Vec<RedistributionStep> = book
        .steps
        .iter()
        .map(|s| {
            let target = (mirror(s.target.0), mirror(s.target.1));
            let input = (mirror(s.input.0), mirror(s.input.1));
            RedistributionStep {
                axes: s.axes,
                input,
                target,
                product_defect: (target.0 * target.1 - input.0 * input.1).abs(),
            }
        })
        .collect();
    let mm = partners.len() as i32;
    let final_inequality_holds = book.final_accumulated > book.mu.powi(mm);

    let lo_r = realizable_lower_bound(acc.1, &partners);
    let realization = if lo_r < book.hi {
        let mu_r = (lo_r * book.hi).sqrt();
        let r_book = accumulate(acc, &partners).map(|mut b| {
            // Rebuild the schedule with the realizable mu.
            let mut pi = acc.1;
            b.steps.clear();
            for &(axis, u) in &partners {
                let partner = u.signum() * mu_r;
                let next = pi * u / partner;
                b.steps.push(RedistributionStep {
                    axes: (acc.0, axis),
                    input: (pi, u),
                    target: (next, partner),
                    product_defect: 0.0,
                });
                pi = next;
            }
            b
        })?;
        let sign = if invert { -1.0 } else { 1.0 };
        let plan: Vec<(usize, f64, f64, f64)> = r_book
            .steps
            .iter()
            .map(|s| (s.axes.1, sign, mirror(s.target.1), mirror(s.target.0)))
            .collect();
        let (end, realized) = realize_steps(&start, acc.0, &plan, opts.annulus_grid)?;
        let flagged = flagged(&realized);
        Realization {
            mu: Some(mirror(mu_r)),
            mu_interval: Some((lo_r, book.hi)),
            steps: realized,
            failure: None,
            final_moduli: sorted_moduli(&end),
            flagged_steps: flagged,
        }
    } else {
        let (i, s) = book
            .steps
            .iter()
            .enumerate()
            .find(|(_, s)| s.input.0.abs() > book.mu)
            .expect("an unrealizable schedule has a step with accumulated modulus above mu");
        Realization {
            mu: None,
            mu_interval: None,
            steps: vec![],
            failure: Some(RealizationFailure {
                step: i,
                accumulated: mirror(s.input.0),
                partner: mirror(s.input.1),
                mu: mirror(book.mu),
                required_skew_angle: skew_angle(s.input.0, s.input.1, book.mu),
            }),
            final_moduli: vec![],
            flagged_steps: vec![],
        }
    };

    Ok(RedistributionPlan {
        branch,
        k,
        l,
        m,
        mu: Some(mirror(book.mu)),
        mu_interval: Some((1.0, book.hi)),
        steps,
        final_accumulated: Some(mirror(book.final_accumulated)),
        final_inequality_holds,
        literal_reading_product_defect: Some(book.literal_defect),
        realization,
    })
}

fn flagged(steps: &[RealizedStep]) -> Vec<usize> {
    steps
        .iter()
        .enumerate()
        .filter(|(_, s)| s.annulus_checks.iter().any(|c| !c.verdict.avoided()))
        .map(|(i, _)| i)
        .collect()
}

/// The rotation in `span(X2, Z3)` that turns the pair `(l2, l3^2)` into
/// `(1 + s, l2 l3^2 / (1 + s))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinglePlanePlan {
    pub plane: RotationPlane,
    pub c: f64,
    pub u: f64,
    pub s: f64,
    pub angle: f64,
    pub pair: (f64, f64),
    pub product_defect: f64,
    pub feasibility_lhs: f64,
    pub feasibility_rhs: f64,
    pub unstable_dim: usize,
    /// Largest principal angle between the expanding eigenspace of the
    /// rotated derivative and `span(X2, X3, Y3, Z3)`.
    pub unstable_distance: f64,
}

pub fn center_plane() -> RotationPlane {
    RotationPlane::coordinate(basis_index(Slot::X, 2), basis_index(Slot::Z, 3))
}

pub fn center_rotation_plan(eig: &EigenData, s: f64) -> Result<SinglePlanePlan, PlanError> {
    let l2 = eig.value(EigenLabel::Two);
    let l3 = eig.value(EigenLabel::Three);
    let (c, u) = (l2, l3 * l3);
    if c * u <= l3 {
        return Err(PlanError::Infeasible { lhs: c * u, rhs: l3 });
    }
    let target = 1.0 + s;
    let angle = angle_for_eigenvalue(c, u, target)?;
    let e = in_plane_eigen(c, u, angle);
    let pair = e.real_pair().expect("trace exceeds 2 sqrt(cu) on this branch");
    let plane = center_plane();

    let b = DMatrix::from_diagonal(&DVector::from_vec(
        crate::nilmanifold::Automorphism::from_eigen_data(eig).diag.to_vec(),
    ));
    let rotated = Plane::from_rotation_plane(&plane).rotation(angle) * b;
    let unstable = EigenDecomposition::compute(&rotated)
        .map(|d| d.real_invariant_subspace(|z| z.norm() > 1.0))
        .unwrap_or_else(|| DMatrix::zeros(DIM, 0));
    let expected: Vec<usize> = vec![
        basis_index(Slot::X, 2),
        basis_index(Slot::X, 3),
        basis_index(Slot::Y, 3),
        basis_index(Slot::Z, 3),
    ];
    let unstable_distance = if unstable.ncols() == expected.len() {
        let mut q = DMatrix::zeros(DIM, expected.len());
        for (j, &i) in expected.iter().enumerate() {
            q[(i, j)] = 1.0;
        }
        linalg::principal_angle(&q, &unstable)
    } else {
        f64::INFINITY
    };
    Ok(SinglePlanePlan {
        plane,
        c,
        u,
        s,
        angle,
        pair,
        product_defect: (pair.0 * pair.1 - c * u).abs(),
        feasibility_lhs: c * u,
        feasibility_rhs: l3,
        unstable_dim: unstable.ncols(),
        unstable_distance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn in_plane_eigen_at_zero_is_diagonal() {
        let e = in_plane_eigen(0.4, 68.0, 0.0);
        assert_eq!(e.real_pair(), Some((0.4, 68.0)));
    }

    #[test]
    fn conformal_pair_keeps_its_modulus() {
        // R_theta (2 R_phi) = 2 R_{phi + theta}.
        let phi: f64 = 0.7;
        let m = Matrix2::new(phi.cos(), -phi.sin(), phi.sin(), phi.cos()) * 2.0;
        for theta in [0.0f64, 0.3, 1.0, 2.0] {
            let r = Matrix2::new(theta.cos(), -theta.sin(), theta.sin(), theta.cos());
            let e = PlaneEigen::of(&(r * m));
            if !e.is_real() {
                let (a, b) = e.moduli();
                assert!((a - 2.0).abs() < 1e-12 && (b - 2.0).abs() < 1e-12);
            }
        }
        let a = find_realifying_angle(&m);
        assert!((a - (PI - phi)).abs() < 1e-10);
    }

    #[test]
    fn quarter_turn_realifies_at_half_pi() {
        let m = Matrix2::new(0.0, -2.0, 2.0, 0.0);
        let a = find_realifying_angle(&m);
        assert!((a - FRAC_PI_2).abs() < 1e-10);
        let r = Matrix2::new(a.cos(), -a.sin(), a.sin(), a.cos());
        let (x, y) = PlaneEigen::of(&(r * m)).real_pair().unwrap();
        assert!((x + 2.0).abs() < 1e-6 && (y + 2.0).abs() < 1e-6);
    }

    #[test]
    fn real_input_needs_no_rotation() {
        assert_eq!(find_realifying_angle(&Matrix2::new(2.0, 0.0, 0.0, 0.5)), 0.0);
    }

    #[test]
    fn jordan_detuning_sign_rule() {
        let t = jordan_detuning(1.0, 1.0, DEFAULT_DETUNING_MAX).unwrap();
        assert_eq!(t, 0.1);
        let trace = 2.0 * t.cos() + t.sin();
        assert!((trace - 2.0899).abs() < 1e-4);
        let t = jordan_detuning(-1.0, 1.0, DEFAULT_DETUNING_MAX).unwrap();
        assert!(t < 0.0);
        let trace = -2.0 * t.cos() + t.sin();
        assert!((trace + 2.0899).abs() < 1e-4);
        assert_eq!(jordan_detuning(1.0, 0.0, 0.1), Err(PlanError::NotJordan));
    }

    #[test]
    fn identity_violates_unit_annulus() {
        let id = DMatrix::identity(3, 3);
        let ann = AnnulusSpec::new(0.5, 2.0).unwrap();
        let v = annulus_avoidance(&id, &Plane::coordinate(3, 0, 1), 0.5, &ann, 100).unwrap();
        match v {
            AnnulusVerdict::Violated(x) => assert!((x.modulus - 1.0).abs() < 1e-12),
            _ => panic!("expected violation"),
        }
        assert_eq!(
            annulus_avoidance(&id, &Plane::coordinate(3, 0, 1), 0.5, &ann, 10),
            Err(PlanError::GridTooSmall(10))
        );
    }

    #[test]
    fn zero_angle_is_a_single_check() {
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 3.0, 8.0]));
        let ann = AnnulusSpec::new(1.0, 2.0).unwrap();
        match annulus_avoidance(&d, &Plane::coordinate(3, 0, 1), 0.0, &ann, 100).unwrap() {
            AnnulusVerdict::Avoided(w) => {
                assert_eq!(w.grid, 1);
                assert!((w.min_clearance - 0.5).abs() < 1e-12);
                assert!(w.gaps_certified);
            }
            _ => panic!("expected avoidance"),
        }
    }

    #[test]
    fn complex_pair_in_annulus_is_refused() {
        let m = Matrix2::new(0.0, -2.0, 2.0, 0.0);
        let ann = AnnulusSpec::new(1.5, 3.0).unwrap();
        assert!(matches!(
            realify_outside_annuli(&m, &[ann]),
            Err(PlanError::ComplexPairInAnnulus { .. })
        ));
        let far = AnnulusSpec::new(3.0, 4.0).unwrap();
        assert!(realify_outside_annuli(&m, &[far]).is_ok());
    }

    #[test]
    fn modulus_one_branch() {
        let spec = LabeledSpectrum::new(vec![0.25], vec![0.5, 2.0], vec![4.0]);
        let plan = plan_center_collapse(&spec, &PlanOptions::default()).unwrap();
        assert_eq!(plan.branch, PlanBranch::ModulusOne);
        assert!(plan.realization.final_moduli.iter().any(|m| (m - 1.0).abs() < 1e-6));
    }

    #[test]
    fn rejects_non_volume_preserving_input() {
        let spec = LabeledSpectrum::new(vec![0.25], vec![0.5], vec![4.0]);
        assert!(matches!(
            plan_center_collapse(&spec, &PlanOptions::default()),
            Err(PlanError::NotVolumePreserving(_))
        ));
    }

    #[test]
    fn accumulate_branch_with_one_unstable_value() {
        let spec = LabeledSpectrum::new(vec![0.1], vec![0.5], vec![20.0]);
        let plan = plan_center_collapse(&spec, &PlanOptions::default()).unwrap();
        assert_eq!(plan.branch, PlanBranch::Accumulate);
        let mu = plan.mu.unwrap();
        assert!((mu - 10f64.sqrt().sqrt()).abs() < 1e-12);
        assert!(plan.final_inequality_holds);
        assert!(plan.realization.realizable());
        let fm = &plan.realization.final_moduli;
        assert!(fm.iter().all(|m| (m - 1.0).abs() > 1e-6));
    }

    #[test]
    fn mirrored_branch_uses_reciprocals() {
        let spec = LabeledSpectrum::new(vec![0.05], vec![2.0], vec![10.0]);
        let plan = plan_center_collapse(&spec, &PlanOptions::default()).unwrap();
        assert_eq!(plan.branch, PlanBranch::MirroredAccumulate);
        assert!(plan.mu.unwrap() < 1.0);
        assert!(plan.realization.realizable());
        let fm = &plan.realization.final_moduli;
        assert!((fm.iter().map(|m| m.ln()).sum::<f64>()).abs() < 1e-9);
        assert!(fm.iter().all(|m| (m - 1.0).abs() > 1e-6));
    }
}
