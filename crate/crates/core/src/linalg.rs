//! Small dense complex Hermitian kernels for capacitance matrices.
//!
//! Matrices are row-major `n x n` slices. Sizes here are tiny (the rank of
//! the low-rank covariance), so plain loops beat any library dispatch.

use num_complex::Complex64;

use crate::error::{Error, Result};

const JITTER_START: f64 = 1e-12;
const JITTER_MAX: f64 = 1e-6;

/// In-place lower Cholesky factorization `A = L L^H`. The strict upper
/// triangle is zeroed. Returns false if a pivot is not positive.
pub fn cholesky_in_place(a: &mut [Complex64], n: usize) -> bool {
    debug_assert_eq!(a.len(), n * n);
    for j in 0..n {
        let mut d = a[j * n + j].re;
        for k in 0..j {
            d -= a[j * n + k].norm_sqr();
        }
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = Complex64::new(d, 0.0);
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k].conj();
            }
            a[i * n + j] = s / d;
        }
        for k in j + 1..n {
            a[j * n + k] = Complex64::new(0.0, 0.0);
        }
    }
    true
}

/// Cholesky with the escalating diagonal jitter policy: on failure add
/// `1e-12 * trace / n`, then ten times more, up to `1e-6 * trace / n`.
/// Returns the factor and the jitter that was applied (0 if none).
pub fn cholesky_jittered(a: &[Complex64], n: usize) -> Result<(Vec<Complex64>, f64)> {
    let mut l = a.to_vec();
    if cholesky_in_place(&mut l, n) {
        return Ok((l, 0.0));
    }
    let mean_diag = (0..n).map(|i| a[i * n + i].re).sum::<f64>() / n.max(1) as f64;
    let mut factor = JITTER_START;
    while factor <= JITTER_MAX * (1.0 + 1e-9) {
        let jitter = factor * mean_diag.abs();
        l.copy_from_slice(a);
        for i in 0..n {
            l[i * n + i] += jitter;
        }
        if cholesky_in_place(&mut l, n) {
            return Ok((l, jitter));
        }
        factor *= 10.0;
    }
    Err(Error::NumericalDegeneracy(format!(
        "capacitance matrix of size {n} is not positive definite (mean diagonal {mean_diag:e})"
    )))
}

/// Solves `L x = b` in place.
pub fn solve_lower(l: &[Complex64], n: usize, b: &mut [Complex64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solves `L^H x = b` in place.
pub fn solve_lower_adjoint(l: &[Complex64], n: usize, b: &mut [Complex64]) {
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i].conj() * b[k];
        }
        b[i] = s / l[i * n + i].re;
    }
}

/// `log det A = 2 sum log diag(L)`.
pub fn log_det_from_cholesky(l: &[Complex64], n: usize) -> f64 {
    2.0 * (0..n).map(|i| l[i * n + i].re.ln()).sum::<f64>()
}

/// Inverse of `A = L L^H` as a dense row-major matrix.
pub fn inverse_from_cholesky(l: &[Complex64], n: usize) -> Vec<Complex64> {
    let mut inv = vec![Complex64::new(0.0, 0.0); n * n];
    let mut col = vec![Complex64::new(0.0, 0.0); n];
    for j in 0..n {
        col.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        col[j] = Complex64::new(1.0, 0.0);
        solve_lower(l, n, &mut col);
        solve_lower_adjoint(l, n, &mut col);
        for i in 0..n {
            inv[i * n + j] = col[i];
        }
    }
    inv
}

/// `x^H y`.
#[inline]
pub fn dot_h(x: &[Complex64], y: &[Complex64]) -> Complex64 {
    debug_assert_eq!(x.len(), y.len());
    let mut re = 0.0;
    let mut im = 0.0;
    for (a, b) in x.iter().zip(y) {
        re += a.re * b.re + a.im * b.im;
        im += a.re * b.im - a.im * b.re;
    }
    Complex64::new(re, im)
}

#[inline]
pub fn norm_sqr(x: &[Complex64]) -> f64 {
    x.iter().map(|v| v.re * v.re + v.im * v.im).sum()
}
