//! Small dense linear-algebra helpers on top of `nalgebra`.
//!
//! All matrices in this crate are desk-scale (m ≤ ~10), so these routines
//! favour exactness on 1×1 and 2×2 inputs over asymptotic speed.

use crate::{Mat, Vect};

/// Largest singular value.
pub fn spectral_norm(a: &Mat) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    if a.nrows() == 1 && a.ncols() == 1 {
        return a[(0, 0)].abs();
    }
    a.singular_values().iter().copied().fold(0.0, f64::max)
}

/// Smallest and largest singular values, in that order.
pub fn singular_extremes(a: &Mat) -> (f64, f64) {
    let sv = a.singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    (min, max)
}

/// Spectral radius of a square matrix; complex pairs contribute their modulus.
pub fn spectral_radius(a: &Mat) -> f64 {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    match n {
        0 => 0.0,
        1 => a[(0, 0)].abs(),
        2 => {
            let (p, q, r, s) = (a[(0, 0)], a[(0, 1)], a[(1, 0)], a[(1, 1)]);
            let tr = p + s;
            let det = p * s - q * r;
            let disc = 0.25 * tr * tr - det;
            if disc >= 0.0 {
                let root = disc.sqrt();
                let half = 0.5 * tr;
                (half + root).abs().max((half - root).abs())
            } else {
                // complex pair: |λ|² = det
                det.abs().sqrt()
            }
        }
        _ => a
            .clone()
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max),
    }
}

/// Eigenvalues of a square matrix as (re, im) pairs.
pub fn eigenvalues(a: &Mat) -> Vec<(f64, f64)> {
    if a.nrows() == 1 {
        return vec![(a[(0, 0)], 0.0)];
    }
    a.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| (z.re, z.im))
        .collect()
}

/// Smallest eigenvalue of the symmetric part `(A + Aᵀ)/2`.
pub fn min_sym_eigenvalue(a: &Mat) -> f64 {
    let sym = (a + a.transpose()) * 0.5;
    if sym.nrows() == 1 {
        return sym[(0, 0)];
    }
    sym.symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Induced ∞-norm: maximum absolute row sum.
pub fn inf_norm(a: &Mat) -> f64 {
    a.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn vec_inf_norm(v: &Vect) -> f64 {
    v.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

/// Unit vector spanning (approximately) the null space of `a`, taken as the
/// right singular vector of the smallest singular value.
pub fn null_vector(a: &Mat) -> Vect {
    let n = a.ncols();
    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested v_t");
    let (idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    Vect::from_iterator(n, v_t.row(idx).iter().copied())
}

/// `‖y‖₂²` for `y = a x`, without allocating.
#[inline]
pub fn image_norm_sq(a: &Mat, x: &[f64]) -> f64 {
    let (rows, cols) = a.shape();
    let data = a.as_slice();
    let mut total = 0.0;
    for i in 0..rows {
        let mut acc = 0.0;
        for (j, xj) in x.iter().enumerate().take(cols) {
            acc += data[j * rows + i] * xj;
        }
        total += acc * acc;
    }
    total
}
