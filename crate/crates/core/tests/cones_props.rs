use nalgebra::{DMatrix, DVector};
use nilspin::algebraic::{EigenData, IntegerMatrix};
use nilspin::cones::*;
use nilspin::deformation::{make_profile, DeformedMap, LocalRotationMap};
use nilspin::linalg::orthonormalize;
use nilspin::nilmanifold::{AnosovMap, Dynamics, GroupElement, LieVector, DIM};
use nilspin::planner::{center_rotation_plan, Plane, SinglePlanePlan};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const S: f64 = 0.025;

struct Setup {
    eig: EigenData,
    plan: SinglePlanePlan,
    base: AnosovMap,
}

fn setup() -> Setup {
    let eig = EigenData::certify(&IntegerMatrix::STANDARD, 1e-12).unwrap();
    let plan = center_rotation_plan(&eig, S).unwrap();
    let base = AnosovMap::new(&eig).unwrap();
    Setup { eig, plan, base }
}

fn deformed(s: &Setup, radius: f64) -> DeformedMap {
    let local = LocalRotationMap::new(make_profile(s.plan.angle, radius).unwrap(), s.plan.plane);
    DeformedMap::new(s.base.clone(), local).unwrap()
}

fn family(s: &Setup, grid: usize) -> MapFamily {
    MapFamily {
        base: to_dmatrix(&s.base.automorphism.matrix()),
        plane: Plane::from_rotation_plane(&s.plan.plane),
        a: s.plan.angle,
        grid,
    }
}

fn gaussian_unit(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    let v = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = v.norm();
    v / norm
}

#[test]
fn s_procedure_margin_bounds_sampled_image_cone() {
    let s = setup();
    let specs = standard_splittings(&s.eig, 1.0 + S);
    let b = to_dmatrix(&s.base.automorphism.matrix());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for spec in &specs {
        let t = spec.beta().powi(2);
        let l = b.pow(2);
        let c1 = image_cone(&l, t).unwrap();
        let c2 = cone_from_map(&l, t).unwrap();
        let r = compactly_contained(&c1, &c2);
        assert!(r.margin > 0.0);
        let mut inside = 0;
        let mut min_value = f64::INFINITY;
        for _ in 0..100_000 {
            // Images of random vectors of C2 land in C1; their mix with
            // random directions covers the rest of C1.
            let v = gaussian_unit(&mut rng, DIM);
            let w = &l * &v;
            let w = if c1.value(&v) >= 0.0 { v } else { w.normalize() };
            if c1.value(&w) >= 0.0 {
                inside += 1;
                min_value = min_value.min(c2.value(&w));
            }
        }
        assert!(inside > 1000, "{inside}");
        assert!(min_value >= r.margin - 1e-12, "{} {min_value} {}", spec.name, r.margin);
    }
}

#[test]
fn failed_containment_witness_violates() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let l = DMatrix::from_fn(DIM, DIM, |_, _| rng.sample::<f64, _>(StandardNormal));
        let sv = l.singular_values();
        let (lo, hi) = (sv.min(), sv.max());
        let t_small = lo + 0.3 * (hi - lo);
        let t_large = lo + 0.6 * (hi - lo);
        let outer = cone_from_map(&l, t_small).unwrap();
        let inner = cone_from_map(&l, t_large).unwrap();
        assert!(compactly_contained(&inner, &outer).contained());
        let r = compactly_contained(&outer, &inner);
        assert!(!r.contained());
        let w = DVector::from_vec(r.witness.expect("failure carries a witness"));
        assert!(outer.value(&w) >= -1e-9);
        assert!(inner.value(&w) < 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn larger_threshold_is_compactly_inside(seed in 0u64..10_000, f1 in 0.2f64..0.45, f2 in 0.55f64..0.8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = DMatrix::from_fn(DIM, DIM, |_, _| rng.sample::<f64, _>(StandardNormal));
        let sv = l.singular_values();
        let (lo, hi) = (sv.min(), sv.max());
        let outer = cone_from_map(&l, lo + f1 * (hi - lo)).unwrap();
        let inner = cone_from_map(&l, lo + f2 * (hi - lo)).unwrap();
        prop_assert!(compactly_contained(&inner, &outer).margin > 0.0);
    }

    #[test]
    fn splitting_distance_is_a_metric(seed in 0u64..100_000, d in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sub = |k: usize| orthonormalize(&DMatrix::from_fn(DIM, k, |_, _| rng.sample::<f64, _>(StandardNormal)));
        let mk = |e1: DMatrix<f64>, e2: DMatrix<f64>| SplittingAt { e1, e2, iterates_e1: 0, iterates_e2: 0, converged: true };
        let a = mk(sub(d), sub(DIM - d));
        let b = mk(sub(d), sub(DIM - d));
        let c = mk(sub(d), sub(DIM - d));
        let ab = splitting_distance(&a, &b).unwrap();
        prop_assert!(splitting_distance(&a, &a).unwrap() < 1e-14);
        prop_assert!((ab - splitting_distance(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(ab > 0.0);
        let ac = splitting_distance(&a, &c).unwrap();
        let bc = splitting_distance(&b, &c).unwrap();
        prop_assert!(ac <= ab + bc + 1e-12);
        // Same spans, different bases.
        let mix = orthonormalize(&(&a.e1 * DMatrix::from_fn(d, d, |i, j| if i == j { 2.0 } else { 0.3 })));
        let a2 = mk(mix, a.e2.clone());
        prop_assert!(splitting_distance(&a, &a2).unwrap() < 1e-7);
    }

    #[test]
    fn cocycle_is_multiplicative(value in 0.01f64..40.0, m in 0u64..200, n in 0u64..200) {
        let r = ConstantRate { value };
        let x = GroupElement::identity();
        let y = GroupElement::from_log(LieVector::from_array([0.1; DIM]));
        let joint = r.cocycle(&x, m + n);
        let split = r.cocycle(&y, n).mul(&r.cocycle(&x, m)).unwrap();
        prop_assert_eq!(joint, split);
        prop_assert_eq!(joint.value(), split.value());
    }
}

#[test]
fn splitting_distance_of_orthogonal_lines_and_mismatch() {
    let e1 = coordinate_basis(&[0]);
    let e2 = coordinate_basis(&[1]);
    let rest = coordinate_basis(&[2, 3, 4, 5, 6, 7, 8]);
    let rest2 = coordinate_basis(&[0, 3, 4, 5, 6, 7, 8]);
    let mk = |e1: DMatrix<f64>, e2: DMatrix<f64>| SplittingAt { e1, e2, iterates_e1: 0, iterates_e2: 0, converged: true };
    let d = splitting_distance(&mk(e1.clone(), rest.clone()), &mk(e2, rest2)).unwrap();
    assert!((d - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
    let bad = mk(coordinate_basis(&[0, 1]), coordinate_basis(&[2, 3, 4, 5, 6, 7, 8]));
    assert!(matches!(
        splitting_distance(&mk(e1, rest), &bad),
        Err(ConeError::DimensionMismatch(1, 2))
    ));
}

#[test]
fn domination_exponents_are_frozen() {
    let s = setup();
    let specs = standard_splittings(&s.eig, 1.0 + S);
    let fam = family(&s, 1024);
    let ns: Vec<u32> = specs
        .iter()
        .map(|spec| find_domination_exponent(&fam, spec, 64, MARGIN_FLOOR).unwrap().n)
        .collect();
    assert_eq!(ns, vec![2, 1]);
    // Diagonal margins from a 40-digit max-min oracle over the pencil.
    let w = find_domination_exponent(&fam, &specs[0], 64, MARGIN_FLOOR).unwrap();
    assert!((w.margin_f - 0.480711711092437461).abs() < 1e-9);
    let w = find_domination_exponent(&fam, &specs[1], 64, MARGIN_FLOOR).unwrap();
    assert!((w.margin_f - 2.99726159055977461).abs() < 1e-9);
    let pure_f = MapFamily { a: 0.0, grid: 1, ..fam.clone() };
    let w = find_domination_exponent(&pure_f, &specs[0], 64, MARGIN_FLOOR).unwrap();
    assert_eq!(w.n, 1);
    assert!((w.margin - 0.131535734724412707).abs() < 1e-9, "{}", w.margin);
    match find_domination_exponent(&fam, &specs[0], 1, MARGIN_FLOOR) {
        Err(ConeError::Exhausted { curve, best, .. }) => {
            assert_eq!(curve.len(), 1);
            assert!(best < 0.0);
        }
        other => panic!("expected exhaustion, got {other:?}"),
    }
}

#[test]
fn eigenvalue_on_threshold_never_compact() {
    let b = DMatrix::from_diagonal(&DVector::from_vec(vec![0.3, 0.5, 2.0, 3.0]));
    let spec = SplittingSpec {
        name: "edge".into(),
        e1_axes: vec![0, 1],
        e2_axes: vec![2, 3],
        lo: 0.5,
        hi: 2.0,
    };
    // Threshold exactly at the weak unstable eigenvalue.
    let on_edge = SplittingSpec { lo: 0.5, hi: 2.0f64.powf(1.5) / 0.5f64.sqrt(), ..spec };
    assert!((on_edge.beta() - 2.0).abs() < 1e-12);
    let plane = Plane::new(
        DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]),
        DVector::from_vec(vec![0.0, 1.0, 0.0, 0.0]),
    )
    .unwrap();
    let fam = MapFamily { base: b, plane, a: 0.0, grid: 1 };
    assert!(find_domination_exponent(&fam, &on_edge, 12, MARGIN_FLOOR).is_err());
}

#[test]
fn zero_margin_gives_zero_radius() {
    let l = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 3.0]));
    assert_eq!(delta_bound(&l, 1.0, 0.0, 1.0), 0.0);
    assert!(delta_bound(&l, 1.0, 0.5, 1.0) > 0.0);
}

#[test]
fn cocycle_products_of_f_and_g() {
    let s = setup();
    let g = deformed(&s, 0.05);
    let b = s.base.automorphism.matrix();
    let x = GroupElement::from_log(LieVector::from_array([0.3, -0.2, 0.1, 0.05, 0.4, -0.3, 0.2, 0.1, -0.1]));
    let (p, _) = cocycle_product(&s.base, &x, 3);
    assert_eq!(p, b * b * b);
    // The orbit segment of x stays off the support, so g agrees with f.
    let mut y = x;
    for _ in 0..3 {
        y = g.step(&y);
        assert!(!g.in_support(&y));
    }
    let (p, _) = cocycle_product(&g, &x, 3);
    assert_eq!(p, b * b * b);
    let q = GroupElement::identity();
    let rot = s.plan.plane.rotation(s.plan.angle) * b;
    let (p, _) = cocycle_product(&g, &q, 3);
    assert!((p - rot * rot * rot).norm() < 1e-9 * rot.norm().powi(3));
}

#[test]
fn extraction_for_f_recovers_coordinate_subspaces() {
    let s = setup();
    let specs = standard_splittings(&s.eig, 1.0 + S);
    let opts = ExtractOptions::default();
    for p in sample_points(&s.base, &s.base.lattice, 0.05, 32) {
        for spec in &specs {
            let at = extract_splitting_at(&s.base, spec, &p.point, &opts);
            assert!(at.converged);
            let reference = SplittingAt {
                e1: spec.e1_basis(),
                e2: spec.e2_basis(),
                iterates_e1: 0,
                iterates_e2: 0,
                converged: true,
            };
            assert_eq!(splitting_distance(&at, &reference).unwrap(), 0.0);
        }
    }
}

#[test]
fn extraction_for_g_is_invariant_dominated_and_transverse() {
    let s = setup();
    let g = deformed(&s, 0.05);
    let specs = standard_splittings(&s.eig, 1.0 + S);
    let opts = ExtractOptions::default();
    let n = 2;
    for p in sample_points(&g, &s.base.lattice, 0.05, 96) {
        for spec in &specs {
            let at = extract_splitting_at(&g, spec, &p.point, &opts);
            assert!(at.converged);
            assert!(at.transversality() > 0.1);
            assert!(invariance_defect(&g, spec, &p.point, n, &opts) < 1e-8);
            let (l, _) = cocycle_product(&g, &p.point, n);
            let bound = (spec.beta() / spec.alpha()).powi(n as i32) * (1.0 - 1e-6);
            assert!(domination_ratio(&to_dmatrix(&l), &at) >= bound);
            assert!(orbit_cone_margin(&g, spec, &p.point, n) > 0.0);
        }
    }
}

#[test]
fn unperturbed_rates_match_eigenvalues() {
    let s = setup();
    let specs = standard_splittings(&s.eig, 1.0 + S);
    let opts = ExtractOptions::default();
    let rates: Vec<SampleRates> = sample_points(&s.base, &s.base.lattice, 0.05, 64)
        .iter()
        .map(|p| {
            let a = extract_splitting_at(&s.base, &specs[0], &p.point, &opts);
            let c = extract_splitting_at(&s.base, &specs[1], &p.point, &opts);
            let (l, _) = cocycle_product(&s.base, &p.point, 2);
            SampleRates::measure(&to_dmatrix(&l), &ThreeSplitting::assemble(&a, &c), 2)
        })
        .collect();
    let r = bunching_report(&rates, 2, 0.05, s.eig.values());
    assert!((r.nu - 0.283118582857948557).abs() < 1e-6);
    assert!((r.nu_hat - 0.120614758428183232).abs() < 1e-6);
    assert!((r.gamma * r.gamma_hat - 1.0).abs() < 1e-9);
    assert!(r.bunched && r.all_bullets_hold);
}

#[test]
fn fabricated_splitting_fails_bunching() {
    let rates = vec![SampleRates {
        stable: BundleRates { min: 0.5, max: 0.9 },
        center: BundleRates { min: 0.5, max: 1.0 },
        unstable: BundleRates { min: 10.0, max: 10.0 },
    }];
    let r = bunching_report(&rates, 1, 0.05, [0.3, 0.5, 10.0]);
    assert!((r.nu - 0.9).abs() < 1e-15);
    assert!((r.gamma * r.gamma_hat - 0.5).abs() < 1e-15);
    assert!(!r.bunched);
    let stable = &r.bullets[0];
    assert!(!stable.holds);
    assert_eq!(stable.witness_sample, 0);
}

#[test]
fn trichotomy_holds_for_small_support() {
    let s = setup();
    let radius = 1e-13;
    let g = deformed(&s, radius);
    let fam = family(&s, 1024);
    let specs = standard_splittings(&s.eig, 1.0 + S);
    let w = find_domination_exponent(&fam, &specs[0], 64, MARGIN_FLOOR).unwrap();
    let delta = delta_bound(&fam.power(w.worst_theta, w.n), specs[0].beta().powi(w.n as i32), w.margin, w.lambda_at_worst);
    assert!(delta > 0.0);
    let touches = |y: &GroupElement| g.base.step(y).log.norm() < radius;
    let mut near = 0;
    for p in sample_points(&g, &s.base.lattice, radius, 128) {
        let t = trichotomy(&g, &touches, &fam, &p.point, w.n, delta);
        assert_ne!(t.case, TrichotomyCase::Neither, "{:?} at {:?}", t, p.kind);
        near += (t.case == TrichotomyCase::NearRotation) as usize;
    }
    assert!(near > 0);
}
