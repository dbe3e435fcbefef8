//! Shared numerical kernels: matrix norms, guarded inversion, fixed-step
//! Runge-Kutta drivers and composite Simpson quadrature.
//!
//! One norm convention is used everywhere: the induced 2-norm for matrices
//! and the Euclidean norm for vectors, so that all certified constants are
//! mutually coherent.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Condition number threshold above which a matrix is treated as singular.
pub const COND_LIMIT: f64 = 1e12;

/// Induced 2-norm (largest singular value).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 && m.ncols() == 1 {
        return m[(0, 0)].abs();
    }
    m.clone().singular_values().max()
}

/// 2-norm condition number; `f64::INFINITY` when the smallest singular value
/// vanishes.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Inverse by LU with partial pivoting, rejected when the condition number
/// exceeds [`COND_LIMIT`].
pub fn checked_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let cond = condition_number(m);
    if !cond.is_finite() || cond > COND_LIMIT {
        return Err(Error::Singular { cond });
    }
    m.clone()
        .try_inverse()
        .ok_or(Error::Singular { cond: f64::INFINITY })
}

/// One classical Runge-Kutta step for `X' = f(t, X)` on matrices.
fn rk4_step_mat<F>(f: &F, t: f64, h: f64, x: &DMatrix<f64>) -> Result<DMatrix<f64>>
where
    F: Fn(f64, &DMatrix<f64>) -> Result<DMatrix<f64>>,
{
    let k1 = f(t, x)?;
    let k2 = f(t + 0.5 * h, &(x + &k1 * (0.5 * h)))?;
    let k3 = f(t + 0.5 * h, &(x + &k2 * (0.5 * h)))?;
    let k4 = f(t + h, &(x + &k3 * h))?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

fn rk4_step_vec<F>(f: &F, t: f64, h: f64, x: &DVector<f64>) -> Result<DVector<f64>>
where
    F: Fn(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let k1 = f(t, x)?;
    let k2 = f(t + 0.5 * h, &(x + &k1 * (0.5 * h)))?;
    let k3 = f(t + 0.5 * h, &(x + &k2 * (0.5 * h)))?;
    let k4 = f(t + h, &(x + &k3 * h))?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

/// Integrates `X' = f(t, X)` from `t0` to `t1` (either direction) with fixed
/// steps of magnitude at most `h_max`.
pub fn integrate_matrix<F>(
    f: F,
    t0: f64,
    t1: f64,
    x0: DMatrix<f64>,
    h_max: f64,
) -> Result<DMatrix<f64>>
where
    F: Fn(f64, &DMatrix<f64>) -> Result<DMatrix<f64>>,
{
    let span = t1 - t0;
    if span == 0.0 {
        return Ok(x0);
    }
    let n = (span.abs() / h_max).ceil().max(1.0) as usize;
    let h = span / n as f64;
    let mut x = x0;
    let mut t = t0;
    for _ in 0..n {
        x = rk4_step_mat(&f, t, h, &x)?;
        t += h;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix integration"));
    }
    Ok(x)
}

/// Vector counterpart of [`integrate_matrix`], with a fallible right-hand
/// side (nonlinearities may reject their inputs).
pub fn integrate_vector<F>(
    f: F,
    t0: f64,
    t1: f64,
    x0: DVector<f64>,
    h_max: f64,
) -> Result<DVector<f64>>
where
    F: Fn(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let span = t1 - t0;
    if span == 0.0 {
        return Ok(x0);
    }
    let n = (span.abs() / h_max).ceil().max(1.0) as usize;
    let h = span / n as f64;
    let mut x = x0;
    let mut t = t0;
    for _ in 0..n {
        x = rk4_step_vec(&f, t, h, &x)?;
        t += h;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("vector integration"));
    }
    Ok(x)
}

/// Nodes and weights of composite Simpson quadrature on `[a, b]` with an even
/// number of subintervals of length at most `h_max`. Degenerate spans yield a
/// single zero-weight node.
pub fn simpson_rule(a: f64, b: f64, h_max: f64) -> (Vec<f64>, Vec<f64>) {
    let len = b - a;
    if len.abs() < 1e-300 {
        return (vec![a], vec![0.0]);
    }
    let mut n = (len.abs() / h_max).ceil() as usize;
    n = n.max(2);
    if n % 2 == 1 {
        n += 1;
    }
    let h = len / n as f64;
    let mut nodes = Vec::with_capacity(n + 1);
    let mut weights = Vec::with_capacity(n + 1);
    for i in 0..=n {
        nodes.push(if i == n { b } else { a + h * i as f64 });
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        weights.push(w * h / 3.0);
    }
    (nodes, weights)
}

/// Composite Simpson quadrature of a scalar function.
pub fn simpson_scalar<F>(mut f: F, a: f64, b: f64, h_max: f64) -> f64
where
    F: FnMut(f64) -> f64,
{
    let (nodes, weights) = simpson_rule(a, b, h_max);
    nodes.iter().zip(&weights).map(|(&s, &w)| w * f(s)).sum()
}

/// Splits `[a, b]` at the interior points of `cuts` (sorted, deduplicated) and
/// returns the resulting closed pieces.
pub fn split_at(a: f64, b: f64, cuts: &[f64]) -> Vec<(f64, f64)> {
    let mut pts: Vec<f64> = cuts
        .iter()
        .copied()
        .filter(|&c| c > a + 1e-14 && c < b - 1e-14)
        .collect();
    pts.sort_by(|x, y| x.partial_cmp(y).unwrap());
    pts.dedup_by(|x, y| (*x - *y).abs() < 1e-14);
    let mut pieces = Vec::with_capacity(pts.len() + 1);
    let mut lo = a;
    for p in pts {
        pieces.push((lo, p));
        lo = p;
    }
    pieces.push((lo, b));
    pieces
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn spectral_norm_matches_diag() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![-3.0, 2.0]));
        assert_relative_eq!(spectral_norm(&m), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn checked_inverse_rejects_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(checked_inverse(&m), Err(Error::Singular { .. })));
    }

    #[test]
    fn rk4_scalar_exponential() {
        let x = integrate_matrix(
            |_t, x: &DMatrix<f64>| Ok(-x.clone()),
            1.0,
            2.0,
            DMatrix::identity(1, 1),
            5e-3,
        )
        .unwrap();
        assert_relative_eq!(x[(0, 0)], (-1.0f64).exp(), epsilon = 1e-10);
    }

    #[test]
    fn rk4_backward_reverses() {
        let x = integrate_matrix(
            |_t, x: &DMatrix<f64>| Ok(-x.clone()),
            2.0,
            1.0,
            DMatrix::identity(1, 1),
            5e-3,
        )
        .unwrap();
        assert_relative_eq!(x[(0, 0)], 1.0f64.exp(), epsilon = 1e-9);
    }

    #[test]
    fn simpson_exact_on_cubics() {
        let v = simpson_scalar(|s| s * s * s - 2.0 * s, 0.0, 2.0, 0.5);
        assert_relative_eq!(v, 0.0, epsilon = 1e-13);
    }

    #[test]
    fn simpson_matches_sine_integral() {
        let v = simpson_scalar(|s| s.sin(), 0.0, std::f64::consts::PI, 1e-2);
        assert_relative_eq!(v, 2.0, epsilon = 1e-9);
    }

    #[test]
    fn split_at_interior_only() {
        let pieces = split_at(0.0, 3.0, &[-1.0, 0.0, 1.0, 2.5, 3.0, 7.0]);
        assert_eq!(pieces, vec![(0.0, 1.0), (1.0, 2.5), (2.5, 3.0)]);
    }
}
