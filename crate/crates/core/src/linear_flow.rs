//! The linear system `y'(t) = A(t) y(t) + A0(t) y(gamma(t))` and its solution
//! operator: the fundamental matrix of the pure ODE part, the interval
//! matrices `J` and `E`, the growth condition (C) and the transition matrix
//! `Z(t, tau)` assembled from products of `E`-factors across grid intervals.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exprlang::{EvalEnv, Expr};
use crate::grid::Grid;
use crate::numerics::{
    checked_inverse, condition_number, integrate_matrix, simpson_rule, spectral_norm,
};
use crate::CertifiedBound;

/// Matrix-valued function of time with expression entries (row major).
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixExpr {
    n: usize,
    entries: Vec<Expr>,
}

impl MatrixExpr {
    pub fn new(n: usize, entries: Vec<Expr>) -> Result<Self> {
        if n == 0 || entries.len() != n * n {
            return Err(Error::Domain(format!(
                "a {n}x{n} matrix needs {} entries, got {}",
                n * n,
                entries.len()
            )));
        }
        for e in &entries {
            if let Some(v) = e.free_vars().iter().find(|v| **v != crate::exprlang::Var::T) {
                return Err(Error::Domain(format!(
                    "matrix entries may only depend on t; `{e}` uses {v}"
                )));
            }
        }
        Ok(MatrixExpr { n, entries })
    }

    pub fn constant(m: &DMatrix<f64>) -> Result<Self> {
        let entries = m.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>())
            .map(Expr::constant)
            .collect();
        Self::new(m.nrows(), entries)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[Expr] {
        &self.entries
    }

    pub fn eval(&self, t: f64) -> Result<DMatrix<f64>> {
        let env = EvalEnv::time(t);
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                m[(i, j)] = self.entries[i * self.n + j].eval(&env)?;
            }
        }
        Ok(m)
    }
}

/// The linear DEPCAG data: coefficient matrices, their certified sup-norm
/// bounds and the deviation grid. Immutable; all operations are pure.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub dim: usize,
    pub a: MatrixExpr,
    pub a0: MatrixExpr,
    pub m: CertifiedBound,
    pub m0: CertifiedBound,
    pub grid: Grid,
}

impl LinearSystem {
    pub fn new(
        a: MatrixExpr,
        a0: MatrixExpr,
        m: CertifiedBound,
        m0: CertifiedBound,
        grid: Grid,
    ) -> Result<Self> {
        if a.dim() != a0.dim() {
            return Err(Error::Domain(format!(
                "A is {}x{0} but A0 is {}x{1}",
                a.dim(),
                a0.dim()
            )));
        }
        Ok(LinearSystem { dim: a.dim(), a, a0, m, m0, grid })
    }

    /// Fixed integration step: small relative to the interval length, never
    /// above 1e-2.
    pub fn ode_step(&self) -> f64 {
        (self.grid.theta() / 200.0).min(1e-2)
    }

    /// Quadrature step for interval integrals.
    pub fn quad_step(&self) -> f64 {
        (self.grid.theta() / 50.0).min(0.02)
    }
}

/// Per-interval data of condition (C).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntervalRho {
    pub k: i64,
    pub rho_plus_a: f64,
    pub rho_minus_a: f64,
    pub rho_plus_a0: f64,
    pub rho_minus_a0: f64,
}

/// Report of the growth condition (C) over an inspected window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionCReport {
    pub window: (i64, i64),
    pub nu_plus: f64,
    pub nu_minus: f64,
    pub rho_a: f64,
    pub satisfied: bool,
    pub per_interval: Vec<IntervalRho>,
}

/// `Phi(t, s)`: solution of `X' = A(t) X`, `X(s) = I`, integrated directly
/// from `s` so that no global inverse is ever formed. Steps are clipped at
/// grid breakpoints.
pub fn fundamental_matrix(sys: &LinearSystem, t: f64, s: f64) -> Result<DMatrix<f64>> {
    let mut x = DMatrix::identity(sys.dim, sys.dim);
    if t == s {
        return Ok(x);
    }
    let h = sys.ode_step();
    for (a, b) in clipped_pieces(&sys.grid, s, t)? {
        x = integrate_matrix(|u, m| Ok(sys.a.eval(u)? * m), a, b, x, h)?;
    }
    Ok(x)
}

/// Integration pieces from `from` to `to` (signed order), split at grid
/// breakpoints.
fn clipped_pieces(grid: &Grid, from: f64, to: f64) -> Result<Vec<(f64, f64)>> {
    let (lo, hi) = if from <= to { (from, to) } else { (to, from) };
    let (k_lo, k_hi) = grid.interval_range(lo, hi)?;
    let mut cuts = Vec::new();
    for k in (k_lo + 1)..=k_hi {
        cuts.push(grid.t_at(k)?);
    }
    let mut pieces = crate::numerics::split_at(lo, hi, &cuts);
    if from > to {
        pieces.reverse();
        for p in &mut pieces {
            *p = (p.1, p.0);
        }
    }
    Ok(pieces)
}

/// Index of a closed interval `[t_i, t_{i+1}]` containing both points, if any.
pub fn same_closed_interval(grid: &Grid, a: f64, b: f64) -> Result<i64> {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    let i = grid.interval_index(lo)?;
    if hi <= grid.t_at(i + 1)? {
        Ok(i)
    } else {
        Err(Error::DifferentIntervals { what: "interval matrix", t: a, tau: b })
    }
}

/// `J(t, tau) = I + integral_tau^t Phi(tau, s) A0(s) ds`, both arguments in
/// one closed grid interval. The integrand's left factor is propagated along
/// the quadrature nodes by the adjoint equation.
pub fn j_matrix(sys: &LinearSystem, t: f64, tau: f64) -> Result<DMatrix<f64>> {
    same_closed_interval(&sys.grid, t, tau)?;
    let n = sys.dim;
    let (nodes, weights) = simpson_rule(tau, t, sys.quad_step());
    let h = sys.ode_step();
    let mut psi = DMatrix::identity(n, n); // Phi(tau, s), s = tau
    let mut acc = DMatrix::zeros(n, n);
    let mut s_prev = tau;
    for (&s, &w) in nodes.iter().zip(&weights) {
        psi = integrate_matrix(|u, m| Ok(-m * sys.a.eval(u)?), s_prev, s, psi, h)?;
        acc += (&psi * sys.a0.eval(s)?) * w;
        s_prev = s;
    }
    Ok(DMatrix::identity(n, n) + acc)
}

/// `E(t, tau) = Phi(t, tau) + integral_tau^t Phi(t, s) A0(s) ds`, computed by
/// one backward propagation of `Phi(t, .)` so the route is independent of the
/// product identity `E = Phi J`.
pub fn e_matrix(sys: &LinearSystem, t: f64, tau: f64) -> Result<DMatrix<f64>> {
    same_closed_interval(&sys.grid, t, tau)?;
    e_matrix_unchecked(sys, t, tau)
}

pub(crate) fn e_matrix_unchecked(sys: &LinearSystem, t: f64, tau: f64) -> Result<DMatrix<f64>> {
    let n = sys.dim;
    let (nodes, weights) = simpson_rule(tau, t, sys.quad_step());
    let h = sys.ode_step();
    // Walk s from t down the node list; xi = Phi(t, s).
    let mut xi = DMatrix::identity(n, n);
    let mut s_prev = t;
    let mut acc = DMatrix::zeros(n, n);
    for (&s, &w) in nodes.iter().zip(&weights).rev() {
        xi = integrate_matrix(|u, m| Ok(-m * sys.a.eval(u)?), s_prev, s, xi, h)?;
        acc += (&xi * sys.a0.eval(s)?) * w;
        s_prev = s;
    }
    xi = integrate_matrix(|u, m| Ok(-m * sys.a.eval(u)?), s_prev, tau, xi, h)?;
    Ok(xi + acc)
}

/// Evaluates condition (C) on the interval window and the constant
/// `rho(A) = sup_k rho_k^+(A) rho_k^-(A)`.
pub fn check_condition_c(sys: &LinearSystem, window: (i64, i64)) -> Result<ConditionCReport> {
    let (k_lo, k_hi) = window;
    if k_lo > k_hi {
        return Err(Error::Domain("condition (C) window is empty".into()));
    }
    let h = sys.quad_step();
    let mut per_interval = Vec::with_capacity((k_hi - k_lo + 1) as usize);
    let (mut nu_plus, mut nu_minus, mut rho_a) = (0.0f64, 0.0f64, 0.0f64);
    for k in k_lo..=k_hi {
        let (tk, zk, tk1) = (sys.grid.t_at(k)?, sys.grid.zeta_at(k)?, sys.grid.t_at(k + 1)?);
        let mut quad_err = None;
        let mut norm_int = |q: &MatrixExpr, a: f64, b: f64| -> f64 {
            crate::numerics::simpson_scalar(
                |s| match q.eval(s) {
                    Ok(m) => spectral_norm(&m),
                    Err(e) => {
                        quad_err.get_or_insert(e);
                        0.0
                    }
                },
                a,
                b,
                h,
            )
        };
        let row = IntervalRho {
            k,
            rho_plus_a: norm_int(&sys.a, tk, zk).exp(),
            rho_minus_a: norm_int(&sys.a, zk, tk1).exp(),
            rho_plus_a0: norm_int(&sys.a0, tk, zk).exp(),
            rho_minus_a0: norm_int(&sys.a0, zk, tk1).exp(),
        };
        if let Some(e) = quad_err {
            return Err(e);
        }
        nu_plus = nu_plus.max(row.rho_plus_a * row.rho_plus_a0.ln());
        nu_minus = nu_minus.max(row.rho_minus_a * row.rho_minus_a0.ln());
        rho_a = rho_a.max(row.rho_plus_a * row.rho_minus_a);
        per_interval.push(row);
    }
    Ok(ConditionCReport {
        window,
        nu_plus,
        nu_minus,
        rho_a,
        satisfied: nu_plus < 1.0 && nu_minus < 1.0,
        per_interval,
    })
}

fn invert_factor(m: &DMatrix<f64>, interval: i64) -> Result<DMatrix<f64>> {
    checked_inverse(m).map_err(|_| Error::SingularFactor {
        interval,
        cond: condition_number(m),
    })
}

/// Transition matrix `Z(t, tau)` of the linear DEPCAG, as a product of
/// `E`-factors: within the interval holding `tau`, across whole intervals,
/// and a final partial step in the interval holding `t`. For `t < tau` the
/// factors of the forward product are inverted and composed in reverse, which
/// makes `Z(t, s) = Z(s, t)^{-1}` hold by construction.
pub fn transition_matrix(sys: &LinearSystem, t: f64, tau: f64) -> Result<DMatrix<f64>> {
    if t == tau {
        return Ok(DMatrix::identity(sys.dim, sys.dim));
    }
    let grid = &sys.grid;
    let j = grid.interval_index(t)?;
    let i = grid.interval_index(tau)?;
    let e_at = |u: f64, k: i64| -> Result<DMatrix<f64>> {
        e_matrix_unchecked(sys, u, grid.zeta_at(k)?)
    };

    if j == i {
        // Same interval: E(t, zeta_i) E(tau, zeta_i)^{-1}.
        return Ok(e_at(t, i)? * invert_factor(&e_at(tau, i)?, i)?);
    }

    if t > tau {
        // tau -> t_{i+1}, bridges, then t_j -> t.
        let mut acc = e_at(grid.t_at(i + 1)?, i)? * invert_factor(&e_at(tau, i)?, i)?;
        for k in (i + 1)..j {
            acc = e_at(grid.t_at(k + 1)?, k)? * invert_factor(&e_at(grid.t_at(k)?, k)?, k)? * acc;
        }
        Ok(e_at(t, j)? * invert_factor(&e_at(grid.t_at(j)?, j)?, j)? * acc)
    } else {
        // tau -> t_i backward, inverted bridges, then t_{j+1} -> t.
        let mut acc = e_at(grid.t_at(i)?, i)? * invert_factor(&e_at(tau, i)?, i)?;
        for k in ((j + 1)..i).rev() {
            acc = e_at(grid.t_at(k)?, k)? * invert_factor(&e_at(grid.t_at(k + 1)?, k)?, k)? * acc;
        }
        Ok(e_at(t, j)? * invert_factor(&e_at(grid.t_at(j + 1)?, j)?, j)? * acc)
    }
}

/// Guard used by callers that assemble many factors: condition (C) holding on
/// the spanned window keeps every factor invertible.
pub fn assert_condition_c(sys: &LinearSystem, window: (i64, i64)) -> Result<ConditionCReport> {
    let report = check_condition_c(sys, window)?;
    if !report.satisfied {
        return Err(Error::ConditionC {
            lo: window.0,
            hi: window.1,
            nu_plus: report.nu_plus,
            nu_minus: report.nu_minus,
        });
    }
    Ok(report)
}

impl std::fmt::Display for ConditionCReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "(C) on [{}, {}]: nu+ = {:.6}, nu- = {:.6}, rho(A) = {:.6} => {}",
            self.window.0,
            self.window.1,
            self.nu_plus,
            self.nu_minus,
            self.rho_a,
            if self.satisfied { "satisfied" } else { "violated" }
        )
    }
}
