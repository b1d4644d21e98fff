//! Deterministic sampling sequences and small dense linear-algebra helpers.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

const PRIMES: [u64; 24] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
];

/// Van der Corput radical inverse of `index` in the given base.
pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut scale = inv;
    let mut out = 0.0;
    while index > 0 {
        out += (index % base) as f64 * scale;
        index /= base;
        scale *= inv;
    }
    out
}

/// Point `index` of the Halton sequence in `[0, 1)^dim`.
///
/// Index 0 is the origin; callers usually start at 1.
pub fn halton(index: u64, dim: usize) -> Vec<f64> {
    assert!(dim <= PRIMES.len(), "halton sequence supports at most {} dims", PRIMES.len());
    (0..dim).map(|i| radical_inverse(index, PRIMES[i])).collect()
}

/// Deterministic, roughly uniform unit vectors in `R^dim`.
///
/// `dim == 1` always yields the two signs `+1, -1` regardless of `count`;
/// `dim == 0` yields nothing.
pub fn sphere_directions(dim: usize, count: usize) -> Vec<DVector<f64>> {
    match dim {
        0 => Vec::new(),
        1 => vec![DVector::from_element(1, 1.0), DVector::from_element(1, -1.0)],
        2 => (0..count)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / count as f64;
                DVector::from_vec(vec![a.cos(), a.sin()])
            })
            .collect(),
        3 => {
            // Fibonacci lattice.
            let golden = PI * (3.0 - 5f64.sqrt());
            (0..count)
                .map(|i| {
                    let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
                    let r = (1.0 - z * z).max(0.0).sqrt();
                    let a = golden * i as f64;
                    DVector::from_vec(vec![r * a.cos(), r * a.sin(), z])
                })
                .collect()
        }
        _ => {
            let pairs = dim.div_ceil(2);
            (1..=count as u64)
                .map(|i| {
                    let u = halton(i, 2 * pairs);
                    let mut v = Vec::with_capacity(2 * pairs);
                    for j in 0..pairs {
                        let r = (-2.0 * (1.0 - u[2 * j]).ln()).sqrt();
                        let a = 2.0 * PI * u[2 * j + 1];
                        v.push(r * a.cos());
                        v.push(r * a.sin());
                    }
                    v.truncate(dim);
                    let v = DVector::from_vec(v);
                    let n = v.norm();
                    if n > 0.0 {
                        v / n
                    } else {
                        let mut e = DVector::zeros(dim);
                        e[0] = 1.0;
                        e
                    }
                })
                .collect()
        }
    }
}

/// Orthonormal basis (as columns) of the orthogonal complement of `d` in `R^k`.
pub fn complement_basis(d: &DVector<f64>) -> DMatrix<f64> {
    let k = d.len();
    let mut out: Vec<DVector<f64>> = Vec::with_capacity(k.saturating_sub(1));
    let unit = d / d.norm();
    for i in 0..k {
        let mut e = DVector::zeros(k);
        e[i] = 1.0;
        let mut v = &e - &unit * unit.dot(&e);
        for b in &out {
            v -= b * b.dot(&v);
        }
        let n = v.norm();
        if n > 1e-8 {
            out.push(v / n);
        }
        if out.len() + 1 == k {
            break;
        }
    }
    if out.is_empty() {
        DMatrix::zeros(k, 0)
    } else {
        DMatrix::from_columns(&out)
    }
}

/// Gram-Schmidt on `vectors`, dropping vectors that are numerically dependent.
pub fn orthonormalize(vectors: &[DVector<f64>], drop_tol: f64) -> Vec<DVector<f64>> {
    let mut out: Vec<DVector<f64>> = Vec::new();
    for v in vectors {
        let scale = v.norm();
        if scale == 0.0 {
            continue;
        }
        let mut w = v.clone();
        for _ in 0..2 {
            for b in &out {
                w -= b * b.dot(&w);
            }
        }
        if w.norm() > drop_tol * scale {
            let n = w.norm();
            out.push(w / n);
        }
    }
    out
}

/// Closest matrix with orthonormal columns (the polar factor `U V^T`).
///
/// Continuous in its argument, so frames built this way vary smoothly
/// along a family of subspaces.
pub fn polar_orthonormalize(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.ncols() == 0 {
        return m.clone();
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("svd computes U");
    let v_t = svd.v_t.expect("svd computes V^T");
    u * v_t
}

/// Root of a continuous function on a sign-changing bracket by the Illinois
/// variant of regula falsi.
///
/// Returns the abscissa once `|f| <= f_tol` or the bracket width drops below
/// `x_tol`. Errors with the function's error type; `None` if the bracket does
/// not change sign.
pub fn illinois_root<E>(
    mut f: impl FnMut(f64) -> Result<f64, E>,
    mut a: f64,
    mut b: f64,
    x_tol: f64,
    f_tol: f64,
    max_iter: usize,
) -> Result<Option<f64>, E> {
    let mut fa = f(a)?;
    let mut fb = f(b)?;
    if fa == 0.0 {
        return Ok(Some(a));
    }
    if fb == 0.0 {
        return Ok(Some(b));
    }
    if fa.signum() == fb.signum() {
        return Ok(None);
    }
    let mut side = 0i8;
    let mut c = 0.5 * (a + b);
    for _ in 0..max_iter {
        c = (a * fb - b * fa) / (fb - fa);
        if !c.is_finite() || c <= a.min(b) || c >= a.max(b) {
            c = 0.5 * (a + b);
        }
        let fc = f(c)?;
        if fc.abs() <= f_tol || (b - a).abs() <= x_tol {
            return Ok(Some(c));
        }
        if fc.signum() == fb.signum() {
            b = c;
            fb = fc;
            if side == -1 {
                fa *= 0.5;
            }
            side = -1;
        } else {
            a = c;
            fa = fc;
            if side == 1 {
                fb *= 0.5;
            }
            side = 1;
        }
    }
    Ok(Some(c))
}

/// Local tangent plane of a sampled hypersurface from displacement vectors,
/// returned as `(normal, singular values descending)`.
pub fn fit_hyperplane(displacements: &[DVector<f64>], dim: usize) -> (DVector<f64>, Vec<f64>) {
    let mut cov = DMatrix::zeros(dim, dim);
    for d in displacements {
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let normal = eig.eigenvectors.column(order[dim - 1]).into_owned();
    let values = order.iter().map(|&i| eig.eigenvalues[i].max(0.0).sqrt()).collect();
    (normal, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radical_inverse_base_two() {
        assert_eq!(radical_inverse(1, 2), 0.5);
        assert_eq!(radical_inverse(2, 2), 0.25);
        assert_eq!(radical_inverse(3, 2), 0.75);
    }

    #[test]
    fn sphere_directions_are_unit() {
        for dim in 1..6 {
            for d in sphere_directions(dim, 17) {
                assert!((d.norm() - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(sphere_directions(1, 99).len(), 2);
        assert!(sphere_directions(0, 5).is_empty());
    }

    #[test]
    fn complement_is_orthonormal() {
        let d = DVector::from_vec(vec![0.3, -0.4, 0.2, 0.8]);
        let b = complement_basis(&d);
        assert_eq!(b.ncols(), 3);
        let g = b.transpose() * &b;
        assert!((g - DMatrix::identity(3, 3)).amax() < 1e-12);
        assert!((b.transpose() * d).amax() < 1e-12);
    }

    #[test]
    fn polar_factor_of_orthonormal_is_itself() {
        let m = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 0.0]);
        assert!((polar_orthonormalize(&m) - &m).amax() < 1e-14);
        let skew = DMatrix::from_column_slice(2, 1, &[0.0, 3.0]);
        let p = polar_orthonormalize(&skew);
        assert!((p[(1, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn illinois_finds_cube_root() {
        let r = illinois_root::<()>(|x| Ok(x * x * x - 2.0), 0.0, 2.0, 1e-14, 1e-14, 200)
            .unwrap()
            .unwrap();
        assert!((r - 2f64.cbrt()).abs() < 1e-12);
        assert!(illinois_root::<()>(|x| Ok(x * x + 1.0), -1.0, 1.0, 1e-9, 1e-9, 10)
            .unwrap()
            .is_none());
    }
}
