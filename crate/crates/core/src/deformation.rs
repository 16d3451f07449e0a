//! The local rotation `h(x) = R_{psi(|x|)} x` supported in a small ball
//! around the fixed point, and the deformed map `g = h o f`.
//!
//! The profile is blended in log-time: with `tau = ln t`,
//! `t psi'(t) = -(eps/2) chi(tau)` where `chi` ramps from 0 to 1 around
//! `ln b` and back to 0 around `ln(eps/2)` through the smoothstep
//! `6u^5 - 15u^4 + 10u^3`. Between the ramps `psi` is exactly the log branch
//! `-(eps/2) ln t + c`, and `sup |t psi'| = eps/2`.


use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nilmanifold::{
    chart_from_frame, frame_from_chart, AnosovMap, Dynamics, GroupElement, LieVector, Mat9, Vec9,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeformationError {
    #[error("profile needs a > 0 and eps > 0, got a = {a}, eps = {eps}")]
    BadParameter { a: f64, eps: f64 },
    #[error("blend windows overlap: 2a/eps = {ratio} must exceed {needed}")]
    WindowsOverlap { ratio: f64, needed: f64 },
    #[error("smoothed profile has sup |t psi'| = {sup} >= eps = {eps}")]
    SlopeBound { sup: f64, eps: f64 },
    #[error("rotation plane basis is not orthonormal (defect {0:e})")]
    NotOrthonormal(f64),
    #[error("support radius {radius} exceeds chart radius {chart}")]
    SupportExceedsChart { radius: f64, chart: f64 },
}

/// Relative half-width of each blend window: the window around `t0` is
/// `[t0 / 1.25, 1.25 t0]`, so the lower one starts above `b - b/4`.
const WINDOW_RATIO: f64 = 1.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BumpProfile {
    pub a: f64,
    pub eps: f64,
    /// May underflow to 0 when `2a/eps` is large; `log_b` is authoritative.
    pub b: f64,
    pub log_b: f64,
    pub c: f64,
    /// Nominal smoothing half-width `b/4` in chart units.
    pub w: f64,
    /// Half-width of each blend window in log-time.
    pub w_log: f64,
    /// Measured `sup |t psi'(t)|`.
    pub slope_sup: f64,
}

fn smoothstep(u: f64) -> f64 {
    u * u * u * (u * (6.0 * u - 15.0) + 10.0)
}

fn smoothstep_integral(u: f64) -> f64 {
    let u4 = u * u * u * u;
    u4 * (u * (u - 3.0) + 2.5)
}

pub fn make_profile(a: f64, eps: f64) -> Result<BumpProfile, DeformationError> {
    if !(a > 0.0 && eps > 0.0 && a.is_finite() && eps.is_finite()) {
        return Err(DeformationError::BadParameter { a, eps });
    }
    let w_log = WINDOW_RATIO.ln();
    let ratio = 2.0 * a / eps;
    if ratio <= 2.0 * w_log {
        return Err(DeformationError::WindowsOverlap {
            ratio,
            needed: 2.0 * w_log,
        });
    }
    let log_b = (eps / 2.0).ln() - ratio;
    let b = log_b.exp();
    let p = BumpProfile {
        a,
        eps,
        b,
        log_b,
        c: (eps / 2.0) * (eps / 2.0).ln(),
        w: b / 4.0,
        w_log,
        slope_sup: 0.0,
    };
    let sup = p.measure_slope_sup(20_000);
    if sup >= eps {
        return Err(DeformationError::SlopeBound { sup, eps });
    }
    Ok(BumpProfile {
        slope_sup: sup,
        ..p
    })
}

impl BumpProfile {
    fn tau_hi(&self) -> f64 {
        (self.eps / 2.0).ln()
    }

    /// `(psi(tau), tau psi'(tau))` in log-time, up to the factor `eps/2`.
    fn log_time(&self, tau: f64) -> (f64, f64) {
        let (lo, hi, w) = (self.log_b, self.tau_hi(), self.w_log);
        let total = hi - lo;
        if tau <= lo - w {
            (total, 0.0)
        } else if tau < lo + w {
            let u = (tau - (lo - w)) / (2.0 * w);
            (total - 2.0 * w * smoothstep_integral(u), smoothstep(u))
        } else if tau <= hi - w {
            (total - w - (tau - (lo + w)), 1.0)
        } else if tau < hi + w {
            let u = (tau - (hi - w)) / (2.0 * w);
            let f = total - w + 2.0 * w * (u - smoothstep_integral(u));
            (total - f, 1.0 - smoothstep(u))
        } else {
            (0.0, 0.0)
        }
    }

    pub fn psi(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return self.a;
        }
        if t >= self.eps {
            return 0.0;
        }
        0.5 * self.eps * self.log_time(t.ln()).0
    }

    /// `t psi'(t)`, well defined down to `t = 0`.
    pub fn t_psi_slope(&self, t: f64) -> f64 {
        if t <= 0.0 || t >= self.eps {
            return 0.0;
        }
        -0.5 * self.eps * self.log_time(t.ln()).1
    }

    pub fn psi_slope(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        self.t_psi_slope(t) / t
    }

    /// Start and end of the exact log branch.
    pub fn log_branch(&self) -> (f64, f64) {
        (
            (self.log_b + self.w_log).exp(),
            (self.tau_hi() - self.w_log).exp(),
        )
    }

    /// Blend window bounds `[(lo, hi); 2]` in chart units.
    pub fn blend_windows(&self) -> [(f64, f64); 2] {
        let (lo, hi, w) = (self.log_b, self.tau_hi(), self.w_log);
        [((lo - w).exp(), (lo + w).exp()), ((hi - w).exp(), (hi + w).exp())]
    }

    fn measure_slope_sup(&self, samples: usize) -> f64 {
        let lo = self.log_b - 2.0 * self.w_log;
        let hi = self.eps.ln();
        (0..=samples)
            .map(|i| {
                let tau = lo + (hi - lo) * i as f64 / samples as f64;
                self.t_psi_slope(tau.exp()).abs()
            })
            .fold(0.0, f64::max)
    }

    /// `(t, psi, t psi')` on a log-spaced grid reaching from below the flat
    /// part to past the support.
    pub fn curve(&self, samples: usize) -> Vec<[f64; 3]> {
        let lo = self.log_b - 3.0 * self.w_log;
        let hi = (2.0 * self.eps).ln();
        (0..=samples)
            .map(|i| {
                let t = (lo + (hi - lo) * i as f64 / samples.max(1) as f64).exp();
                [t, self.psi(t), self.t_psi_slope(t)]
            })
            .collect()
    }
}

/// An oriented 2-plane with orthonormal basis `(e1, e2)`; `R_theta` rotates
/// `e1` towards `e2` and fixes the orthogonal complement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationPlane {
    pub e1: Vec9,
    pub e2: Vec9,
}

impl RotationPlane {
    pub fn new(e1: Vec9, e2: Vec9) -> Result<Self, DeformationError> {
        let defect = (e1.norm() - 1.0)
            .abs()
            .max((e2.norm() - 1.0).abs())
            .max(e1.dot(&e2).abs());
        if defect > 1e-12 {
            return Err(DeformationError::NotOrthonormal(defect));
        }
        Ok(RotationPlane { e1, e2 })
    }

    pub fn coordinate(i: usize, j: usize) -> Self {
        let mut e1 = Vec9::zeros();
        let mut e2 = Vec9::zeros();
        e1[i] = 1.0;
        e2[j] = 1.0;
        RotationPlane::new(e1, e2).expect("distinct coordinate axes")
    }

    fn projector(&self) -> Mat9 {
        self.e1 * self.e1.transpose() + self.e2 * self.e2.transpose()
    }

    fn generator(&self) -> Mat9 {
        self.e2 * self.e1.transpose() - self.e1 * self.e2.transpose()
    }

    pub fn rotation(&self, theta: f64) -> Mat9 {
        Mat9::identity() + self.projector() * (theta.cos() - 1.0) + self.generator() * theta.sin()
    }

    pub fn rotation_derivative(&self, theta: f64) -> Mat9 {
        self.projector() * (-theta.sin()) + self.generator() * theta.cos()
    }

    pub fn rotate(&self, theta: f64, x: &Vec9) -> Vec9 {
        let (p1, p2) = (self.e1.dot(x), self.e2.dot(x));
        let (s, c) = theta.sin_cos();
        x + self.e1 * ((c - 1.0) * p1 - s * p2) + self.e2 * (s * p1 + (c - 1.0) * p2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalRotationMap {
    pub profile: BumpProfile,
    pub plane: RotationPlane,
}

impl LocalRotationMap {
    pub fn new(profile: BumpProfile, plane: RotationPlane) -> Self {
        LocalRotationMap { profile, plane }
    }

    pub fn support_radius(&self) -> f64 {
        self.profile.eps
    }

    pub fn h_eval(&self, x: &Vec9) -> Vec9 {
        let r = x.norm();
        if r >= self.profile.eps {
            return *x;
        }
        self.plane.rotate(self.profile.psi(r), x)
    }

    pub fn h_inverse(&self, x: &Vec9) -> Vec9 {
        let r = x.norm();
        if r >= self.profile.eps {
            return *x;
        }
        self.plane.rotate(-self.profile.psi(r), x)
    }

    /// `Dh_x = R_psi + (r psi'(r)) (R'_psi x / r)(x / r)^T`.
    pub fn h_jacobian(&self, x: &Vec9) -> Mat9 {
        let r = x.norm();
        if r >= self.profile.eps {
            return Mat9::identity();
        }
        let psi = self.profile.psi(r);
        let rot = self.plane.rotation(psi);
        let ts = self.profile.t_psi_slope(r);
        if r == 0.0 || ts == 0.0 {
            return rot;
        }
        let xr = x / r;
        rot + (self.plane.rotation_derivative(psi) * xr) * xr.transpose() * ts
    }
}

/// `g = h o f`, with `h` acting in the exponential chart at the identity
/// coset.
#[derive(Clone, Debug)]
pub struct DeformedMap {
    pub base: AnosovMap,
    pub local: LocalRotationMap,
}

impl DeformedMap {
    pub fn new(base: AnosovMap, local: LocalRotationMap) -> Result<Self, DeformationError> {
        let chart = base.lattice.chart_radius();
        let radius = local.support_radius();
        if radius > chart {
            return Err(DeformationError::SupportExceedsChart { radius, chart });
        }
        Ok(DeformedMap { base, local })
    }

    pub fn in_support(&self, x: &GroupElement) -> bool {
        x.log.norm() < self.local.support_radius()
    }

    /// Frame derivative of `h` at the reduced point `y`.
    pub fn h_frame_derivative(&self, y: &GroupElement) -> Mat9 {
        if !self.in_support(y) {
            return Mat9::identity();
        }
        let w = y.log;
        let hw = LieVector(self.local.h_eval(&w.0));
        frame_from_chart(&hw) * self.local.h_jacobian(&w.0) * chart_from_frame(&w)
    }
}

impl Dynamics for DeformedMap {
    fn step(&self, x: &GroupElement) -> GroupElement {
        let y = self.base.step(x);
        if self.in_support(&y) {
            GroupElement::from_log(LieVector(self.local.h_eval(&y.log.0)))
        } else {
            y
        }
    }

    fn step_inverse(&self, x: &GroupElement) -> GroupElement {
        let x = self.base.lattice.reduce(x);
        let y = if self.in_support(&x) {
            GroupElement::from_log(LieVector(self.local.h_inverse(&x.log.0)))
        } else {
            x
        };
        self.base.step_inverse(&y)
    }

    fn derivative(&self, x: &GroupElement) -> Mat9 {
        let y = self.base.step(x);
        self.h_frame_derivative(&y) * self.base.automorphism.matrix()
    }
}

/// Constants of the perturbation argument: `K` bounds the derivatives of
/// every `R_theta B` and their inverses, `eta` is the admissible derivative
/// perturbation, and the rotation may only be supported on
/// `eps <= min(eta / (2 + K), chart / K^(2n))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpinningConstants {
    pub k: f64,
    pub eta: f64,
    pub n: u32,
    pub eps_from_eta: f64,
    pub eps_from_chart: f64,
    pub eps_max: f64,
    pub eps_used: f64,
    pub within_bound: bool,
}

impl SpinningConstants {
    pub fn compute(base: &Mat9, eta: f64, n: u32, chart_radius: f64, eps_used: f64) -> Self {
        let sv = base.singular_values();
        let smax = sv.max();
        let smin = sv.min();
        let k = smax.max(1.0 / smin);
        let eps_from_eta = eta / (2.0 + k);
        let eps_from_chart = chart_radius / k.powi(2 * n as i32);
        let eps_max = eps_from_eta.min(eps_from_chart);
        SpinningConstants {
            k,
            eta,
            n,
            eps_from_eta,
            eps_from_chart,
            eps_max,
            eps_used,
            within_bound: eps_used <= eps_max,
        }
    }
}
