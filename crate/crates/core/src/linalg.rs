//! Small dense complex linear-algebra helpers on top of `faer`.

use faer::{Mat, MatRef, Side};
use num_complex::Complex64;

pub type CMat = Mat<Complex64>;

pub(crate) const ZERO: Complex64 = Complex64::new(0.0, 0.0);
pub(crate) const I: Complex64 = Complex64::new(0.0, 1.0);

pub fn identity(n: usize) -> CMat {
    Mat::from_fn(n, n, |i, j| if i == j { Complex64::new(1.0, 0.0) } else { ZERO })
}

/// Largest singular value by power iteration on `A^H A`.
pub fn spectral_norm(a: MatRef<'_, Complex64>) -> f64 {
    let (m, n) = (a.nrows(), a.ncols());
    if m == 0 || n == 0 {
        return 0.0;
    }
    // deterministic start with weight on every column
    let mut x = Mat::<Complex64>::from_fn(n, 1, |i, _| {
        Complex64::new(1.0 + 0.37 * (i as f64 * 0.61).sin(), 0.11 * (i as f64 * 1.3).cos())
    });
    let mut norm = frobenius(x.as_ref());
    scale_in_place(&mut x, 1.0 / norm);
    let mut estimate = 0.0;
    for _ in 0..1000 {
        let y = a * &x;
        let z = a.adjoint() * &y;
        norm = frobenius(z.as_ref());
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm.sqrt();
        x = z;
        scale_in_place(&mut x, 1.0 / norm);
        if (next - estimate).abs() <= 1e-14 * next {
            return next;
        }
        estimate = next;
    }
    estimate
}

/// Largest |eigenvalue| of a Hermitian matrix.
pub fn hermitian_spectral_norm(a: MatRef<'_, Complex64>) -> f64 {
    match a.self_adjoint_eigenvalues(Side::Lower) {
        Ok(ev) => ev.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        Err(_) => f64::NAN,
    }
}

pub fn frobenius(a: MatRef<'_, Complex64>) -> f64 {
    let mut sum = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            sum += a[(i, j)].norm_sqr();
        }
    }
    sum.sqrt()
}

pub fn scale_in_place(a: &mut CMat, factor: f64) {
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            a[(i, j)] *= factor;
        }
    }
}

pub fn column_vector(values: &[Complex64]) -> CMat {
    Mat::from_fn(values.len(), 1, |i, _| values[i])
}

pub fn column_values(a: MatRef<'_, Complex64>, col: usize) -> Vec<Complex64> {
    (0..a.nrows()).map(|i| a[(i, col)]).collect()
}

/// `A B` where `B` is a column vector stored as a slice.
pub fn mat_vec(a: MatRef<'_, Complex64>, x: &[Complex64]) -> Vec<Complex64> {
    let product = a * column_vector(x);
    column_values(product.as_ref(), 0)
}

fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm(a: &[Complex64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

/// `exp(i t H) v` for Hermitian `H` given only through `apply`, by Lanczos
/// with full reorthogonalization. Stops once the a-posteriori error estimate
/// falls below `tol * |v|`; `None` if that needs more than `max_dim` vectors.
pub fn hermitian_exp_action(
    apply: impl Fn(&[Complex64]) -> Vec<Complex64>,
    v: &[Complex64],
    t: f64,
    tol: f64,
    max_dim: usize,
) -> Option<Vec<Complex64>> {
    let n = v.len();
    let beta0 = norm(v);
    if beta0 == 0.0 {
        return Some(vec![ZERO; n]);
    }
    let max_dim = max_dim.min(n).max(1);
    let mut basis: Vec<Vec<Complex64>> = vec![v.iter().map(|x| x / beta0).collect()];
    let (mut alpha, mut beta) = (Vec::<f64>::new(), Vec::<f64>::new());
    let mut next_check = 16;
    loop {
        let m = basis.len();
        let mut w = apply(&basis[m - 1]);
        let a = dot(&basis[m - 1], &w).re;
        alpha.push(a);
        // two passes of classical Gram-Schmidt against the whole basis
        for _ in 0..2 {
            for q in &basis {
                let c = dot(q, &w);
                w.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
            }
        }
        let b = norm(&w);
        let exhausted = b <= 1e-13 * a.abs().max(1.0) || m == n;
        if exhausted || m >= next_check || m == max_dim {
            let coeffs = tridiagonal_exp_first_column(&alpha, &beta, t);
            let estimate = if exhausted { 0.0 } else { b * coeffs[m - 1].norm() };
            if estimate <= tol {
                let mut out = vec![ZERO; n];
                for (q, c) in basis.iter().zip(&coeffs) {
                    out.iter_mut().zip(q).for_each(|(x, y)| *x += c * y * beta0);
                }
                return Some(out);
            }
            if m == max_dim {
                return None;
            }
            next_check = (next_check + 4).min(max_dim);
        }
        beta.push(b);
        basis.push(w.into_iter().map(|x| x / b).collect());
    }
}

/// `exp(i t T) e_1` for the real symmetric tridiagonal `T`.
fn tridiagonal_exp_first_column(alpha: &[f64], beta: &[f64], t: f64) -> Vec<Complex64> {
    let m = alpha.len();
    let tri = Mat::<f64>::from_fn(m, m, |i, j| {
        if i == j {
            alpha[i]
        } else if i == j + 1 {
            beta[j]
        } else if j == i + 1 {
            beta[i]
        } else {
            0.0
        }
    });
    let eig = tri.self_adjoint_eigen(Side::Lower).expect("symmetric tridiagonal eigen-decomposition");
    let (z, s) = (eig.U(), eig.S().column_vector());
    (0..m)
        .map(|i| (0..m).map(|k| Complex64::from_polar(z[(i, k)] * z[(0, k)], t * s[k])).sum())
        .collect()
}
