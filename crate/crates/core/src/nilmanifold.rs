//! The 2-step nilpotent group `G = H x H x H` (three Heisenberg factors), the
//! lattice built from `Z[l1]` and its Galois conjugates, and the hyperbolic
//! automorphism acting on `Gamma \ G`.
//!
//! Points are stored in exponential coordinates of the first kind. Because the
//! algebra is 2-step nilpotent the BCH series terminates:
//! `log(exp(u) exp(v)) = u + v + [u, v] / 2`.
//!
//! Cosets are taken on the left (`x ~ gamma x`) so that the left-invariant
//! frame descends to the quotient; derivatives are always expressed in that
//! frame.

use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algebraic::{EigenData, EigenLabel, IntCubic};

pub const DIM: usize = 9;
pub type Mat9 = SMatrix<f64, DIM, DIM>;
pub type Vec9 = SVector<f64, DIM>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NilError {
    #[error("lattice generator matrix is singular")]
    SingularLattice,
    #[error("eigen data carries no characteristic polynomial")]
    MissingPolynomial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Slot {
    X,
    Y,
    Z,
}

/// Position of `X_i`, `Y_i` or `Z_i` in the ordered basis
/// `(X1, Y1, Z1, X2, Y2, Z2, X3, Y3, Z3)`; `factor` is 1-based.
pub fn basis_index(slot: Slot, factor: usize) -> usize {
    assert!((1..=3).contains(&factor), "factor must be 1, 2 or 3");
    let s = match slot {
        Slot::X => 0,
        Slot::Y => 1,
        Slot::Z => 2,
    };
    3 * (factor - 1) + s
}

pub const BASIS_NAMES: [&str; DIM] = ["X1", "Y1", "Z1", "X2", "Y2", "Z2", "X3", "Y3", "Z3"];

/// An element of the Lie algebra in the ordered 9-basis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LieVector(pub Vec9);

impl LieVector {
    pub fn zero() -> Self {
        LieVector(Vec9::zeros())
    }

    pub fn basis(slot: Slot, factor: usize) -> Self {
        let mut v = Vec9::zeros();
        v[basis_index(slot, factor)] = 1.0;
        LieVector(v)
    }

    pub fn from_array(a: [f64; DIM]) -> Self {
        LieVector(Vec9::from(a))
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

impl Add for LieVector {
    type Output = LieVector;
    fn add(self, rhs: LieVector) -> LieVector {
        LieVector(self.0 + rhs.0)
    }
}

impl Sub for LieVector {
    type Output = LieVector;
    fn sub(self, rhs: LieVector) -> LieVector {
        LieVector(self.0 - rhs.0)
    }
}

impl Neg for LieVector {
    type Output = LieVector;
    fn neg(self) -> LieVector {
        LieVector(-self.0)
    }
}

impl Mul<f64> for LieVector {
    type Output = LieVector;
    fn mul(self, rhs: f64) -> LieVector {
        LieVector(self.0 * rhs)
    }
}

/// `[X_i, Y_i] = Z_i`; every other bracket of basis elements vanishes.
pub fn bracket(u: &LieVector, v: &LieVector) -> LieVector {
    let mut out = Vec9::zeros();
    for f in 0..3 {
        let (x, y, z) = (3 * f, 3 * f + 1, 3 * f + 2);
        out[z] = u.0[x] * v.0[y] - u.0[y] * v.0[x];
    }
    LieVector(out)
}

/// Matrix of `v -> [w, v]`.
pub fn ad_matrix(w: &LieVector) -> Mat9 {
    let mut m = Mat9::zeros();
    for f in 0..3 {
        let (x, y, z) = (3 * f, 3 * f + 1, 3 * f + 2);
        m[(z, y)] = w.0[x];
        m[(z, x)] = -w.0[y];
    }
    m
}

/// Change of frame at `exp(w)`: maps left-invariant components to
/// exponential-chart components, `J(w) = I + ad_w / 2`.
pub fn chart_from_frame(w: &LieVector) -> Mat9 {
    Mat9::identity() + ad_matrix(w) * 0.5
}

/// Inverse of [`chart_from_frame`]; exact because `ad_w` squares to zero.
pub fn frame_from_chart(w: &LieVector) -> Mat9 {
    Mat9::identity() - ad_matrix(w) * 0.5
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupElement {
    pub log: LieVector,
}

impl GroupElement {
    pub fn identity() -> Self {
        GroupElement {
            log: LieVector::zero(),
        }
    }

    pub fn from_log(log: LieVector) -> Self {
        GroupElement { log }
    }

    pub fn inverse(&self) -> Self {
        GroupElement { log: -self.log }
    }

    pub fn mul(&self, other: &GroupElement) -> GroupElement {
        bch_multiply(self, other)
    }

    pub fn log_norm(&self) -> f64 {
        self.log.norm()
    }
}

pub fn bch_multiply(u: &GroupElement, v: &GroupElement) -> GroupElement {
    let half = bracket(&u.log, &v.log) * 0.5;
    GroupElement {
        log: u.log + v.log + half,
    }
}

/// Diagonal automorphism scaling `X_i, Y_i` by `l_i` and `Z_i` by `l_i^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Automorphism {
    pub diag: [f64; DIM],
}

impl Automorphism {
    pub fn from_eigenvalues(l: [f64; 3]) -> Self {
        let mut diag = [0.0; DIM];
        for f in 0..3 {
            diag[3 * f] = l[f];
            diag[3 * f + 1] = l[f];
            diag[3 * f + 2] = l[f] * l[f];
        }
        Automorphism { diag }
    }

    pub fn from_eigen_data(e: &EigenData) -> Self {
        Self::from_eigenvalues(e.values())
    }

    pub fn apply(&self, u: &LieVector) -> LieVector {
        LieVector(u.0.component_mul(&Vec9::from(self.diag)))
    }

    pub fn apply_inverse(&self, u: &LieVector) -> LieVector {
        LieVector(u.0.component_div(&Vec9::from(self.diag)))
    }

    pub fn apply_group(&self, x: &GroupElement) -> GroupElement {
        GroupElement::from_log(self.apply(&x.log))
    }

    pub fn matrix(&self) -> Mat9 {
        Mat9::from_diagonal(&Vec9::from(self.diag))
    }

    pub fn inverse_matrix(&self) -> Mat9 {
        Mat9::from_diagonal(&Vec9::from(self.diag.map(|d| 1.0 / d)))
    }

    pub fn determinant(&self) -> f64 {
        self.diag.iter().product()
    }
}

/// Exact lattice element `v x sigma(v) x sigma^2(v)` with
/// `v = (x, y, z_half / 2)`, each coordinate in `Z[l1]` as `p + q l + r l^2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatticeElement {
    pub x: [i64; 3],
    pub y: [i64; 3],
    pub z_half: [i64; 3],
}

impl LatticeElement {
    pub fn zero() -> Self {
        LatticeElement {
            x: [0; 3],
            y: [0; 3],
            z_half: [0; 3],
        }
    }

    /// The nine Z-basis elements, ordered (X: 1, l, l^2), (Y: ...), (Z: ...).
    pub fn generators() -> [LatticeElement; DIM] {
        let mut out = [LatticeElement::zero(); DIM];
        for k in 0..3 {
            out[k].x[k] = 1;
            out[3 + k].y[k] = 1;
            out[6 + k].z_half[k] = 1;
        }
        out
    }

    pub fn from_coefficients(c: &[i64; DIM]) -> Self {
        LatticeElement {
            x: [c[0], c[1], c[2]],
            y: [c[3], c[4], c[5]],
            z_half: [c[6], c[7], c[8]],
        }
    }

    pub fn coefficients(&self) -> [i64; DIM] {
        let mut c = [0; DIM];
        c[..3].copy_from_slice(&self.x);
        c[3..6].copy_from_slice(&self.y);
        c[6..].copy_from_slice(&self.z_half);
        c
    }

    /// Group product, exact: the bracket term lands in `1/2 Z[l1]`.
    pub fn bch(&self, other: &LatticeElement, p: &IntCubic) -> LatticeElement {
        let xy = p.mul_mod(self.x, other.y);
        let yx = p.mul_mod(self.y, other.x);
        let mut z_half = [0; 3];
        for k in 0..3 {
            z_half[k] = self.z_half[k] + other.z_half[k] + xy[k] - yx[k];
        }
        LatticeElement {
            x: add3(self.x, other.x),
            y: add3(self.y, other.y),
            z_half,
        }
    }

    /// Image under the automorphism: multiply by `l` on X, Y and `l^2` on Z.
    pub fn automorphism(&self, p: &IntCubic) -> LatticeElement {
        let l = [0, 1, 0];
        let l2 = [0, 0, 1];
        LatticeElement {
            x: p.mul_mod(self.x, l),
            y: p.mul_mod(self.y, l),
            z_half: p.mul_mod(self.z_half, l2),
        }
    }

    pub fn embed(&self, lambdas: [f64; 3]) -> LieVector {
        let ev = |c: [i64; 3], l: f64| c[0] as f64 + c[1] as f64 * l + c[2] as f64 * l * l;
        let mut v = Vec9::zeros();
        for label in EigenLabel::ALL {
            let f = label.index();
            let l = lambdas[f];
            v[3 * f] = ev(self.x, l);
            v[3 * f + 1] = ev(self.y, l);
            v[3 * f + 2] = 0.5 * ev(self.z_half, l);
        }
        LieVector(v)
    }
}

fn add3(a: [i64; 3], b: [i64; 3]) -> [i64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// The lattice `log Gamma` in the Lie algebra, with a reduced basis for
/// approximate fundamental-domain reduction.
#[derive(Clone, Debug)]
pub struct Lattice {
    pub lambdas: [f64; 3],
    pub poly: IntCubic,
    /// Columns are the embedded Z-basis generators.
    pub generators: Mat9,
    /// LLL-reduced basis (columns) spanning the same lattice.
    pub reduced: Mat9,
    gram_schmidt: Mat9,
    generators_lu: nalgebra::LU<f64, nalgebra::Const<DIM>, nalgebra::Const<DIM>>,
}

impl Lattice {
    pub fn new(e: &EigenData) -> Result<Self, NilError> {
        let poly = e.poly.ok_or(NilError::MissingPolynomial)?;
        let lambdas = e.values();
        let gens = LatticeElement::generators();
        let generators = Mat9::from_fn(|i, j| gens[j].embed(lambdas).0[i]);
        let det = generators.determinant();
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(NilError::SingularLattice);
        }
        let reduced = lll_reduce(&generators, 0.99);
        let gram_schmidt = gram_schmidt(&reduced);
        Ok(Lattice {
            lambdas,
            poly,
            generators,
            reduced,
            gram_schmidt,
            generators_lu: generators.lu(),
        })
    }

    pub fn embed(&self, g: &LatticeElement) -> LieVector {
        g.embed(self.lambdas)
    }

    /// Integer coordinates of `w` in the generator basis and the residual
    /// left after rounding.
    pub fn integer_coordinates(&self, w: &LieVector) -> ([i64; DIM], f64) {
        let c = self
            .generators_lu
            .solve(&w.0)
            .unwrap_or_else(|| Vec9::from_element(f64::NAN));
        let rounded = c.map(|v| v.round());
        let residual = (self.generators * rounded - w.0).norm();
        let mut out = [0i64; DIM];
        for i in 0..DIM {
            out[i] = rounded[i] as i64;
        }
        (out, residual)
    }

    pub fn shortest_generator_norm(&self) -> f64 {
        (0..DIM)
            .map(|j| self.reduced.column(j).norm())
            .fold(f64::INFINITY, f64::min)
    }

    /// Radius of the exponential chart around the identity coset; balls of
    /// this radius embed in the quotient.
    pub fn chart_radius(&self) -> f64 {
        0.25 * self.shortest_generator_norm()
    }

    /// Babai nearest-plane lattice vector for `w` in the reduced basis.
    fn nearest_plane(&self, w: &Vec9) -> Vec9 {
        let mut t = *w;
        let mut v = Vec9::zeros();
        for i in (0..DIM).rev() {
            let bs = self.gram_schmidt.column(i);
            let c = (t.dot(&bs) / bs.dot(&bs)).round();
            if c != 0.0 {
                let b = self.reduced.column(i);
                t -= b * c;
                v += b * c;
            }
        }
        v
    }

    /// Greedy representative of the coset `Gamma x`: nearest-plane rounding
    /// followed by one BCH correction pass. Never increases the log-norm.
    /// Not a canonical fundamental domain.
    pub fn reduce(&self, x: &GroupElement) -> GroupElement {
        let mut y = *x;
        for _ in 0..2 {
            let v = self.nearest_plane(&y.log.0);
            if v.iter().all(|c| *c == 0.0) {
                break;
            }
            let cand = bch_multiply(&GroupElement::from_log(LieVector(-v)), &y);
            if cand.log_norm() < y.log_norm() {
                y = cand;
            } else {
                break;
            }
        }
        y
    }
}

fn gram_schmidt(b: &Mat9) -> Mat9 {
    let mut out = *b;
    for i in 0..DIM {
        let mut v = b.column(i).into_owned();
        for j in 0..i {
            let u = out.column(j).into_owned();
            v -= u * (b.column(i).dot(&u) / u.dot(&u));
        }
        out.set_column(i, &v);
    }
    out
}

/// Floating-point LLL on the columns of `basis`.
fn lll_reduce(basis: &Mat9, delta: f64) -> Mat9 {
    let mut b = *basis;
    let mut k = 1;
    let mut guard = 0;
    while k < DIM && guard < 100_000 {
        guard += 1;
        for j in (0..k).rev() {
            let gs = gram_schmidt(&b);
            let bj = gs.column(j).into_owned();
            let mu = b.column(k).dot(&bj) / bj.dot(&bj);
            let r = mu.round();
            if r != 0.0 {
                let col = b.column(k) - b.column(j) * r;
                b.set_column(k, &col);
            }
        }
        let gs = gram_schmidt(&b);
        let bk = gs.column(k).norm_squared();
        let bk1 = gs.column(k - 1).norm_squared();
        let mu = b.column(k).dot(&gs.column(k - 1)) / bk1;
        if bk >= (delta - mu * mu) * bk1 {
            k += 1;
        } else {
            b.swap_columns(k, k - 1);
            k = (k - 1).max(1);
        }
    }
    b
}

/// A diffeomorphism of `Gamma \ G` with its derivative in the left-invariant
/// frame.
pub trait Dynamics: Sync {
    fn step(&self, x: &GroupElement) -> GroupElement;
    fn step_inverse(&self, x: &GroupElement) -> GroupElement;
    fn derivative(&self, x: &GroupElement) -> Mat9;

    /// Derivative of the inverse map at `x`, i.e. `(D_{g^-1 x} g)^{-1}`.
    fn derivative_inverse(&self, x: &GroupElement) -> Mat9 {
        let prev = self.step_inverse(x);
        self.derivative(&prev)
            .try_inverse()
            .expect("derivative of a diffeomorphism is invertible")
    }
}

/// The Anosov map induced by the automorphism.
#[derive(Clone, Debug)]
pub struct AnosovMap {
    pub automorphism: Automorphism,
    pub lattice: Lattice,
}

impl AnosovMap {
    pub fn new(e: &EigenData) -> Result<Self, NilError> {
        Ok(AnosovMap {
            automorphism: Automorphism::from_eigen_data(e),
            lattice: Lattice::new(e)?,
        })
    }
}

impl Dynamics for AnosovMap {
    fn step(&self, x: &GroupElement) -> GroupElement {
        self.lattice.reduce(&self.automorphism.apply_group(x))
    }

    fn step_inverse(&self, x: &GroupElement) -> GroupElement {
        let y = self.automorphism.apply_inverse(&x.log);
        self.lattice.reduce(&GroupElement::from_log(y))
    }

    fn derivative(&self, _x: &GroupElement) -> Mat9 {
        self.automorphism.matrix()
    }

    fn derivative_inverse(&self, _x: &GroupElement) -> Mat9 {
        self.automorphism.inverse_matrix()
    }
}

/// Derivative of `map` at `x` in the left-invariant frame.
pub fn frame_derivative<D: Dynamics + ?Sized>(map: &D, x: &GroupElement) -> Mat9 {
    map.derivative(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebraic::{IntegerMatrix, DEFAULT_ROOT_TOL};

    fn standard() -> EigenData {
        EigenData::certify(&IntegerMatrix::STANDARD, DEFAULT_ROOT_TOL).unwrap()
    }

    #[test]
    fn bracket_of_basis_elements() {
        let x1 = LieVector::basis(Slot::X, 1);
        let y1 = LieVector::basis(Slot::Y, 1);
        let x2 = LieVector::basis(Slot::X, 2);
        assert_eq!(bracket(&x1, &y1), LieVector::basis(Slot::Z, 1));
        assert_eq!(bracket(&x1, &x2), LieVector::zero());
        assert_eq!(bracket(&y1, &x1), -LieVector::basis(Slot::Z, 1));
        assert_eq!(bracket(&LieVector::basis(Slot::Z, 1), &y1), LieVector::zero());
    }

    #[test]
    fn ad_matrix_agrees_with_bracket() {
        let w = LieVector::from_array([0.3, -1.2, 0.7, 2.0, 0.1, -0.4, 1.1, 0.9, 3.0]);
        let v = LieVector::from_array([1.0, 0.5, -2.0, -0.3, 0.8, 0.0, 0.25, -1.5, 1.0]);
        assert_eq!(ad_matrix(&w) * v.0, bracket(&w, &v).0);
        let j = chart_from_frame(&w) * frame_from_chart(&w);
        assert!((j - Mat9::identity()).norm() < 1e-15);
    }

    #[test]
    fn bch_of_x_and_y() {
        let u = GroupElement::from_log(LieVector::basis(Slot::X, 1));
        let v = GroupElement::from_log(LieVector::basis(Slot::Y, 1));
        let w = bch_multiply(&u, &v);
        let want = LieVector::basis(Slot::X, 1)
            + LieVector::basis(Slot::Y, 1)
            + LieVector::basis(Slot::Z, 1) * 0.5;
        assert_eq!(w.log, want);
    }

    #[test]
    fn identity_and_inverse() {
        let u = GroupElement::from_log(LieVector::from_array([
            0.2, -0.1, 0.5, 1.0, 2.0, -3.0, 0.0, 0.4, 0.6,
        ]));
        assert_eq!(u.mul(&GroupElement::identity()), u);
        assert_eq!(u.mul(&u.inverse()).log, LieVector::zero());
    }

    #[test]
    fn automorphism_scales_basis() {
        let e = standard();
        let b = Automorphism::from_eigen_data(&e);
        let l = e.values();
        assert_eq!(b.apply(&LieVector::basis(Slot::X, 1)).0[0], l[0]);
        assert_eq!(b.apply(&LieVector::basis(Slot::Z, 3)).0[8], l[2] * l[2]);
        assert!((b.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn automorphism_preserves_bracket_on_basis_pairs() {
        let b = Automorphism::from_eigen_data(&standard());
        for i in 0..DIM {
            for j in 0..DIM {
                let mut u = LieVector::zero();
                u.0[i] = 1.0;
                let mut v = LieVector::zero();
                v.0[j] = 1.0;
                let lhs = b.apply(&bracket(&u, &v));
                let rhs = bracket(&b.apply(&u), &b.apply(&v));
                assert!((lhs.0 - rhs.0).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn automorphism_is_a_group_homomorphism() {
        let b = Automorphism::from_eigen_data(&standard());
        let u = GroupElement::from_log(LieVector::basis(Slot::X, 1));
        let v = GroupElement::from_log(LieVector::basis(Slot::Y, 1));
        let lhs = b.apply_group(&u.mul(&v));
        let rhs = b.apply_group(&u).mul(&b.apply_group(&v));
        assert!((lhs.log.0 - rhs.log.0).norm() < 1e-15);
    }

    #[test]
    fn exact_lattice_products_match_embedding() {
        let e = standard();
        let lat = Lattice::new(&e).unwrap();
        let gens = LatticeElement::generators();
        for a in &gens {
            for b in &gens {
                let exact = lat.embed(&a.bch(b, &lat.poly));
                let float = bch_multiply(
                    &GroupElement::from_log(lat.embed(a)),
                    &GroupElement::from_log(lat.embed(b)),
                );
                assert!((exact.0 - float.log.0).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn generators_are_recovered_exactly() {
        let lat = Lattice::new(&standard()).unwrap();
        for (j, g) in LatticeElement::generators().iter().enumerate() {
            let (c, res) = lat.integer_coordinates(&lat.embed(g));
            let mut want = [0; DIM];
            want[j] = 1;
            assert_eq!(c, want);
            assert!(res < 1e-12);
        }
    }

    #[test]
    fn reduced_basis_spans_the_same_lattice() {
        let lat = Lattice::new(&standard()).unwrap();
        for j in 0..DIM {
            let (_, res) = lat.integer_coordinates(&LieVector(lat.reduced.column(j).into_owned()));
            assert!(res < 1e-9);
        }
        let ratio = lat.reduced.determinant().abs() / lat.generators.determinant().abs();
        assert!((ratio - 1.0).abs() < 1e-9);
    }

    #[test]
    fn generators_reduce_to_identity() {
        let lat = Lattice::new(&standard()).unwrap();
        for g in LatticeElement::generators() {
            let x = GroupElement::from_log(lat.embed(&g));
            let r = lat.reduce(&x);
            assert!(r.log_norm() < 1e-9, "{:?}", r);
        }
        assert_eq!(lat.reduce(&GroupElement::identity()), GroupElement::identity());
    }

    #[test]
    fn reduction_never_increases_norm() {
        let lat = Lattice::new(&standard()).unwrap();
        let mut seed = 7u64;
        for _ in 0..500 {
            let mut a = [0.0; DIM];
            for c in a.iter_mut() {
                seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                *c = ((seed >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 40.0;
            }
            let x = GroupElement::from_log(LieVector::from_array(a));
            let r = lat.reduce(&x);
            assert!(r.log_norm() <= x.log_norm());
        }
    }

    #[test]
    fn anosov_derivative_is_constant() {
        let e = standard();
        let f = AnosovMap::new(&e).unwrap();
        let x = GroupElement::from_log(LieVector::from_array([0.1; DIM]));
        assert_eq!(frame_derivative(&f, &x), f.automorphism.matrix());
        let back = f.step_inverse(&f.step(&x));
        assert!((back.log.0 - x.log.0).norm() < 1e-12);
    }
}
