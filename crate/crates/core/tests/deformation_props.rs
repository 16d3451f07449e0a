use nilspin::algebraic::{EigenData, IntegerMatrix, DEFAULT_ROOT_TOL};
use nilspin::deformation::*;
use nilspin::nilmanifold::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn local(a: f64, eps: f64) -> LocalRotationMap {
    LocalRotationMap::new(make_profile(a, eps).unwrap(), RotationPlane::coordinate(3, 8))
}

fn random_direction(rng: &mut ChaCha8Rng) -> Vec9 {
    loop {
        let v = Vec9::from_fn(|_, _| rng.random_range(-1.0..1.0));
        if v.norm() > 1e-3 {
            return v / v.norm();
        }
    }
}

/// Log-uniform radius in `[lo, hi]`.
fn radius(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (lo.ln() + (hi.ln() - lo.ln()) * rng.random::<f64>()).exp()
}

fn fd_jacobian(m: &LocalRotationMap, x: &Vec9) -> Mat9 {
    let step = 1e-6 * x.norm();
    let mut j = Mat9::zeros();
    for k in 0..DIM {
        let mut e = Vec9::zeros();
        e[k] = step;
        let col = (m.h_eval(&(x + e)) - m.h_eval(&(x - e))) / (2.0 * step);
        j.set_column(k, &col);
    }
    j
}

#[test]
fn analytic_jacobian_matches_finite_differences() {
    let m = local(0.3, 0.05);
    let p = m.profile;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let [(l0, l1), (u0, u1)] = p.blend_windows();
    let mut radii: Vec<f64> = vec![p.b, l0, l1, p.eps / 2.0, u0, u1, 0.99 * p.eps];
    while radii.len() < 100 {
        radii.push(radius(&mut rng, 0.5 * p.b, 1.5 * p.eps));
    }
    for r in radii {
        let x = random_direction(&mut rng) * r;
        let a = m.h_jacobian(&x);
        let n = fd_jacobian(&m, &x);
        let rel = (a - n).norm() / a.norm();
        assert!(rel < 1e-6, "r = {r:e}, rel = {rel:e}");
    }
}

#[test]
fn determinant_norm_and_rotation_bounds() {
    let m = local(0.3, 0.05);
    let eps = m.profile.eps;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..1000 {
        let x = random_direction(&mut rng) * radius(&mut rng, 1e-9, 0.1);
        let j = m.h_jacobian(&x);
        assert!((j.determinant() - 1.0).abs() < 1e-9);
        assert!((m.h_eval(&x).norm() - x.norm()).abs() < 1e-15);
        let theta = m.profile.psi(x.norm());
        assert!((0.0..=m.profile.a).contains(&theta));
        let dev = (j - m.plane.rotation(theta)).svd(false, false).singular_values.max();
        assert!(dev < eps);
        assert!((m.h_inverse(&m.h_eval(&x)) - x).norm() < 1e-15);
    }
}

#[test]
fn mean_value_bound() {
    let p = make_profile(0.3, 0.05).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..10_000 {
        let t = radius(&mut rng, 1e-9, 0.1);
        let s = radius(&mut rng, t, 0.2);
        assert!((p.psi(s) - p.psi(t)).abs() < p.eps * (s / t));
        assert!(p.psi(s) <= p.psi(t));
    }
}

#[test]
fn derivative_variation_bound() {
    // Pairs are ordered with |x| >= |y|.
    let m = local(0.3, 0.05);
    let eps = m.profile.eps;
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..10_000 {
        let mut rx = radius(&mut rng, 1e-9, 0.1);
        let mut ry = radius(&mut rng, 1e-9, 0.1);
        if rx < ry {
            std::mem::swap(&mut rx, &mut ry);
        }
        let x = random_direction(&mut rng) * rx;
        let y = random_direction(&mut rng) * ry;
        let d = (m.h_jacobian(&x) - m.h_jacobian(&y)).svd(false, false).singular_values.max();
        assert!(d < (2.0 + rx / ry) * eps);
    }
}

fn deformed(a: f64, eps: f64) -> DeformedMap {
    let e = EigenData::certify(&IntegerMatrix::STANDARD, DEFAULT_ROOT_TOL).unwrap();
    DeformedMap::new(AnosovMap::new(&e).unwrap(), local(a, eps)).unwrap()
}

#[test]
fn derivative_at_fixed_point_is_rotated_base() {
    let g = deformed(0.6, 0.05);
    let want = g.local.plane.rotation(0.6) * g.base.automorphism.matrix();
    let got = frame_derivative(&g, &GroupElement::identity());
    assert!((got - want).norm() < 1e-15);
}

#[test]
fn agrees_with_base_away_from_support() {
    let g = deformed(0.6, 0.05);
    let x = GroupElement::from_log(LieVector::from_array([0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
    assert!(!g.in_support(&g.base.step(&x)));
    assert_eq!(g.step(&x), g.base.step(&x));
    assert_eq!(g.derivative(&x), g.base.automorphism.matrix());
}

#[test]
fn frame_derivative_matches_group_differences() {
    let g = deformed(0.6, 0.05);
    let binv = g.base.automorphism.inverse_matrix();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..50 {
        // Points whose image lands inside the support ball.
        let target = random_direction(&mut rng) * radius(&mut rng, 1e-3, 0.045);
        let x = GroupElement::from_log(LieVector(binv * target));
        let d = g.derivative(&x);
        assert!((d.determinant() - 1.0).abs() < 1e-9);
        let gx = g.step(&x);
        let step = 1e-7;
        let mut fd = Mat9::zeros();
        for k in 0..DIM {
            let mut v = LieVector::zero();
            v.0[k] = step;
            let xp = x.mul(&GroupElement::from_log(v));
            let xm = x.mul(&GroupElement::from_log(-v));
            let dp = gx.inverse().mul(&g.step(&xp)).log;
            let dm = gx.inverse().mul(&g.step(&xm)).log;
            fd.set_column(k, &((dp.0 - dm.0) / (2.0 * step)));
        }
        let rel = (fd - d).norm() / d.norm();
        assert!(rel < 1e-5, "rel = {rel:e}");
    }
}

#[test]
fn inverse_undoes_step() {
    let g = deformed(0.6, 0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..200 {
        let x = GroupElement::from_log(LieVector(random_direction(&mut rng) * radius(&mut rng, 1e-6, 0.05)));
        let back = g.step_inverse(&g.step(&x));
        assert!((back.log.0 - x.log.0).norm() < 1e-10);
    }
}

#[test]
fn oversized_support_is_rejected() {
    let e = EigenData::certify(&IntegerMatrix::STANDARD, DEFAULT_ROOT_TOL).unwrap();
    let err = DeformedMap::new(AnosovMap::new(&e).unwrap(), local(3.0, 0.5)).unwrap_err();
    assert!(matches!(err, DeformationError::SupportExceedsChart { .. }));
}

#[test]
fn spinning_constants_for_the_standard_map() {
    let e = EigenData::certify(&IntegerMatrix::STANDARD, DEFAULT_ROOT_TOL).unwrap();
    let b = Automorphism::from_eigen_data(&e).matrix();
    let l = e.values();
    let c = SpinningConstants::compute(&b, 1e-3, 2, 0.2, 0.05);
    assert!((c.k - l[2] * l[2]).abs() < 1e-9);
    assert!(c.eps_max <= 1e-3 / (2.0 + c.k));
    assert!(!c.within_bound);
}
