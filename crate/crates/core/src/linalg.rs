//! Dense linear-algebra helpers shared by the planner and the certifier.

use nalgebra::{Complex, DMatrix, DVector};

pub type C64 = Complex<f64>;

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

pub fn min_singular_value(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().min()
}

/// Orthonormal basis of the column span by Gram-Schmidt with one
/// reorthogonalization pass. Assumes full column rank. Unlike Householder
/// QR it returns scaled coordinate columns exactly as unit coordinate
/// vectors, so invariant coordinate subspaces are reproduced without
/// rounding.
pub fn orthonormalize(cols: &DMatrix<f64>) -> DMatrix<f64> {
    let mut q = cols.clone();
    for j in 0..q.ncols() {
        for _ in 0..2 {
            for i in 0..j {
                let r = q.column(i).dot(&q.column(j));
                if r != 0.0 {
                    let qi = q.column(i).into_owned();
                    q.column_mut(j).axpy(-r, &qi, 1.0);
                }
            }
        }
        let norm = q.column(j).norm();
        q.column_mut(j).unscale_mut(norm);
    }
    q
}

/// Largest principal angle between two subspaces of equal dimension, given
/// by orthonormal bases.
pub fn principal_angle(q1: &DMatrix<f64>, q2: &DMatrix<f64>) -> f64 {
    assert_eq!(q1.shape(), q2.shape(), "subspaces must have equal dimension");
    if q1.ncols() == 0 {
        return 0.0;
    }
    let proj = q1.transpose() * q2;
    let resid = q2 - q1 * &proj;
    let sin = spectral_norm(&resid).min(1.0);
    let cos = min_singular_value(&proj).min(1.0);
    sin.atan2(cos)
}

/// Eigenvalues sorted by modulus, ascending; ties broken by argument.
pub fn eigenvalues(a: &DMatrix<f64>) -> Vec<C64> {
    let mut v: Vec<C64> = a.clone().complex_eigenvalues().iter().copied().collect();
    v.sort_by(|x, y| {
        x.norm()
            .total_cmp(&y.norm())
            .then(x.im.total_cmp(&y.im))
    });
    v
}

pub fn moduli(a: &DMatrix<f64>) -> Vec<f64> {
    eigenvalues(a).iter().map(|z| z.norm()).collect()
}

/// Groups eigenvalues closer than `tol` (relative to the spectral scale).
fn clusters(values: &[C64], tol: f64) -> Vec<(C64, usize)> {
    let scale = values.iter().map(|z| z.norm()).fold(1.0, f64::max);
    let mut out: Vec<(C64, usize)> = Vec::new();
    for z in values {
        match out.iter_mut().find(|(c, _)| (c - z).norm() <= tol * scale) {
            Some((_, k)) => *k += 1,
            None => out.push((*z, 1)),
        }
    }
    out
}

/// Unit right singular vectors for the `k` smallest singular values of
/// `m`, together with the largest of those singular values.
fn near_nullspace(m: &DMatrix<C64>, k: usize) -> (Vec<DVector<C64>>, f64) {
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested");
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let worst = idx[..k]
        .iter()
        .map(|&i| svd.singular_values[i])
        .fold(0.0, f64::max);
    let vecs = idx[..k]
        .iter()
        .map(|&i| v_t.row(i).adjoint().into_owned())
        .collect();
    (vecs, worst)
}

/// Full eigen-decomposition `A V = V diag(values)` of a real matrix.
/// Returns `None` when `A` is numerically defective.
pub struct EigenDecomposition {
    pub values: Vec<C64>,
    pub vectors: DMatrix<C64>,
}

impl EigenDecomposition {
    pub fn compute(a: &DMatrix<f64>) -> Option<Self> {
        let n = a.nrows();
        let vals = eigenvalues(a);
        let scale = spectral_norm(a).max(1.0);
        let ac: DMatrix<C64> = a.map(|x| C64::new(x, 0.0));
        let mut values = Vec::with_capacity(n);
        let mut vectors = Vec::with_capacity(n);
        for (z, k) in clusters(&vals, 1e-8) {
            let shifted = &ac - DMatrix::<C64>::identity(n, n) * z;
            let (vs, worst) = near_nullspace(&shifted, k);
            if worst > 1e-7 * scale {
                return None;
            }
            for v in vs {
                values.push(z);
                vectors.push(v);
            }
        }
        let vectors = DMatrix::from_columns(&vectors);
        Some(EigenDecomposition { values, vectors })
    }

    /// `kappa(V) = sigma_max / sigma_min`; infinite when singular.
    pub fn condition(&self) -> f64 {
        let sv = self.vectors.clone().svd(false, false).singular_values;
        let lo = sv.min();
        if lo <= 0.0 {
            f64::INFINITY
        } else {
            sv.max() / lo
        }
    }

    /// Orthonormal basis of the real invariant subspace belonging to the
    /// eigenvalues selected by `keep`. Complex pairs contribute their real
    /// and imaginary parts.
    pub fn real_invariant_subspace(&self, keep: impl Fn(C64) -> bool) -> DMatrix<f64> {
        let n = self.vectors.nrows();
        let mut cols: Vec<DVector<f64>> = Vec::new();
        for (j, z) in self.values.iter().enumerate() {
            if !keep(*z) || z.im < 0.0 {
                continue;
            }
            let v = self.vectors.column(j);
            // Rotate the phase so the real part carries the largest weight.
            let pivot = v.iter().copied().max_by(|a, b| a.norm().total_cmp(&b.norm())).unwrap();
            let phase = if pivot.norm() > 0.0 { pivot.conj() / pivot.norm() } else { C64::new(1.0, 0.0) };
            let w = v * phase;
            cols.push(w.map(|c| c.re));
            if z.im > 0.0 {
                cols.push(w.map(|c| c.im));
            }
        }
        if cols.is_empty() {
            return DMatrix::zeros(n, 0);
        }
        orthonormalize(&DMatrix::from_columns(&cols))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn principal_angle_of_coordinate_planes() {
        let e = DMatrix::<f64>::identity(3, 3);
        let a = e.columns(0, 1).into_owned();
        let b = e.columns(1, 1).into_owned();
        assert!((principal_angle(&a, &b) - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert_eq!(principal_angle(&a, &a), 0.0);
        let c = DMatrix::from_column_slice(3, 1, &[1.0, 1.0, 0.0]) / 2f64.sqrt();
        assert!((principal_angle(&a, &c) - std::f64::consts::FRAC_PI_4).abs() < 1e-15);
    }

    #[test]
    fn orthonormalize_keeps_coordinate_columns_exact() {
        let mut m = DMatrix::<f64>::zeros(4, 2);
        m[(1, 0)] = -0.37;
        m[(3, 1)] = 28.5;
        let q = orthonormalize(&m);
        assert_eq!(q[(1, 0)], -1.0);
        assert_eq!(q[(3, 1)], 1.0);
        assert_eq!(q.iter().filter(|x| **x != 0.0).count(), 2);
        let g = DMatrix::from_fn(6, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 + 0.1 * (i as f64 - j as f64).powi(2));
        let q = orthonormalize(&g);
        assert!((q.transpose() * &q - DMatrix::identity(3, 3)).norm() < 1e-14);
    }

    #[test]
    fn decomposition_of_rotation_block() {
        let a = DMatrix::from_row_slice(3, 3, &[0.0, -2.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 5.0]);
        let d = EigenDecomposition::compute(&a).unwrap();
        let ac = a.map(|x| C64::new(x, 0.0));
        for (j, z) in d.values.iter().enumerate() {
            let v = d.vectors.column(j);
            assert!((&ac * v - v * *z).norm() < 1e-12);
        }
        let plane = d.real_invariant_subspace(|z| z.norm() < 3.0);
        assert_eq!(plane.ncols(), 2);
        assert!(plane.row(2).norm() < 1e-12);
    }

    #[test]
    fn repeated_eigenvalue_is_not_defective_when_diagonal() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 2.0, 3.0]));
        let d = EigenDecomposition::compute(&a).unwrap();
        assert!((d.condition() - 1.0).abs() < 1e-12);
        let j = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!(EigenDecomposition::compute(&j).is_none());
    }
}
