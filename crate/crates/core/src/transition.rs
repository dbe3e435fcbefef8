//! Precomputed transition-matrix tables over a fixed window of grid
//! intervals.
//!
//! One propagation pass per interval stores `Phi(u, t_k)`, its inverse (kept
//! by the adjoint equation, never by matrix inversion) and the accumulated
//! integral `Omega(u) = int_{t_k}^u Phi(s, t_k)^{-1} A0(s) ds` at a caller
//! supplied node set. Every interval matrix then assembles algebraically:
//!
//! ```text
//! E(u, v)   = Phi(u, t_k) (Psi(v) + Omega(u) - Omega(v))
//! Phi(u, v) = Phi(u, t_k) Psi(v)
//! ```
//!
//! Breakpoint-to-breakpoint products are anchored at the interval containing
//! time zero, so `Z(t, 0)` and `Z(0, s)` are one partial step plus a cached
//! product. Expanding directions are handled by composing inverted one-step
//! factors instead of inverting long products, which keeps every inversion at
//! single-interval condition numbers.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linear_flow::{e_matrix_unchecked, LinearSystem};
use crate::numerics::{checked_inverse, condition_number, integrate_matrix};

/// Stored propagation data of one grid interval.
pub struct IntervalPass {
    pub k: i64,
    pub t_left: f64,
    pub t_right: f64,
    pub zeta: f64,
    pub nodes: Vec<f64>,
    /// `Phi(nodes[q], t_left)`.
    pub phi: Vec<DMatrix<f64>>,
    /// `Phi(t_left, nodes[q])`, propagated by the adjoint equation.
    pub psi: Vec<DMatrix<f64>>,
    /// `int_{t_left}^{nodes[q]} psi(s) A0(s) ds`.
    pub omega: Vec<DMatrix<f64>>,
    pub zeta_pos: usize,
}

impl IntervalPass {
    fn build(sys: &LinearSystem, k: i64, extra_nodes: &[f64]) -> Result<IntervalPass> {
        let n = sys.dim;
        let t_left = sys.grid.t_at(k)?;
        let t_right = sys.grid.t_at(k + 1)?;
        let zeta = sys.grid.zeta_at(k)?;
        let mut nodes = vec![t_left, zeta, t_right];
        nodes.extend(
            extra_nodes
                .iter()
                .copied()
                .filter(|&u| u >= t_left && u <= t_right),
        );
        nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());
        nodes.dedup_by(|a, b| (*a - *b).abs() < 1e-13);

        let h = sys.ode_step();
        let mut phi = Vec::with_capacity(nodes.len());
        let mut psi = Vec::with_capacity(nodes.len());
        let mut omega = Vec::with_capacity(nodes.len());
        let mut cur_phi = DMatrix::identity(n, n);
        let mut cur_psi = DMatrix::identity(n, n);
        let mut cur_omega = DMatrix::<f64>::zeros(n, n);
        phi.push(cur_phi.clone());
        psi.push(cur_psi.clone());
        omega.push(cur_omega.clone());
        for gap in nodes.windows(2).map(|w| (w[0], w[1])) {
            let (u, v) = gap;
            // Substep the gap with an even count so the Omega increment gets
            // Simpson weights on the sub-nodes.
            let mut m = ((v - u) / h).ceil() as usize;
            m = m.max(2);
            if m % 2 == 1 {
                m += 1;
            }
            let hs = (v - u) / m as f64;
            let mut sub_psi_a0 = Vec::with_capacity(m + 1);
            sub_psi_a0.push(&cur_psi * sys.a0.eval(u)?);
            for j in 0..m {
                let a = u + hs * j as f64;
                let b = if j == m - 1 { v } else { u + hs * (j + 1) as f64 };
                cur_phi = integrate_matrix(|s, x| Ok(sys.a.eval(s)? * x), a, b, cur_phi, h)?;
                cur_psi = integrate_matrix(|s, x| Ok(-x * sys.a.eval(s)?), a, b, cur_psi, h)?;
                sub_psi_a0.push(&cur_psi * sys.a0.eval(b)?);
            }
            for (j, term) in sub_psi_a0.iter().enumerate() {
                let w = if j == 0 || j == m {
                    1.0
                } else if j % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                cur_omega += term * (w * hs / 3.0);
            }
            phi.push(cur_phi.clone());
            psi.push(cur_psi.clone());
            omega.push(cur_omega.clone());
        }

        let zeta_pos = nodes
            .iter()
            .position(|&u| (u - zeta).abs() < 1e-12)
            .expect("zeta is a node by construction");
        Ok(IntervalPass { k, t_left, t_right, zeta, nodes, phi, psi, omega, zeta_pos })
    }

    /// `E(nodes[qt], nodes[qv])`.
    pub fn e(&self, qt: usize, qv: usize) -> DMatrix<f64> {
        &self.phi[qt] * (&self.psi[qv] + &self.omega[qt] - &self.omega[qv])
    }

    /// `Phi(nodes[qt], nodes[qv])`.
    pub fn phi_between(&self, qt: usize, qv: usize) -> DMatrix<f64> {
        &self.phi[qt] * &self.psi[qv]
    }

    pub fn node_index(&self, u: f64) -> Option<usize> {
        self.nodes
            .binary_search_by(|a| a.partial_cmp(&u).unwrap())
            .ok()
            .or_else(|| self.nodes.iter().position(|&a| (a - u).abs() < 1e-12))
    }
}

/// Transition tables over the closed interval window `[k_lo, k_hi]`.
pub struct TransitionTables {
    pub k_lo: i64,
    pub k_hi: i64,
    pub passes: Vec<IntervalPass>,
    /// `E(t_k, zeta_k)` and its inverse.
    e_left: Vec<DMatrix<f64>>,
    e_left_inv: Vec<DMatrix<f64>>,
    /// One-step factors `Z(t_{k+1}, t_k)` and `Z(t_k, t_{k+1})`.
    bridge: Vec<DMatrix<f64>>,
    bridge_inv: Vec<DMatrix<f64>>,
    /// `Z(t_k, t_{n0})` and `Z(t_{n0}, t_k)` for breakpoints `k_lo..=k_hi+1`.
    y: Vec<DMatrix<f64>>,
    y_inv: Vec<DMatrix<f64>>,
    /// Interval containing time zero, the anchor of `Z(., 0)`.
    pub n0: i64,
    p0: DMatrix<f64>,
    p0_inv: DMatrix<f64>,
}

impl TransitionTables {
    /// Builds the tables; `extra_nodes` (sorted or not) become stored pass
    /// nodes in their respective intervals. The window must cover time zero.
    pub fn build(sys: &LinearSystem, window: (i64, i64), extra_nodes: &[f64]) -> Result<Self> {
        let (k_lo, k_hi) = window;
        if k_lo > k_hi {
            return Err(Error::Domain("transition window is empty".into()));
        }
        let n0 = sys.grid.interval_index(0.0).map_err(|_| {
            Error::Domain("the grid window must contain t = 0 (dichotomy anchor)".into())
        })?;
        if n0 < k_lo || n0 > k_hi {
            return Err(Error::Domain(format!(
                "transition window [{k_lo}, {k_hi}] must contain the anchor interval {n0}"
            )));
        }

        let count = (k_hi - k_lo + 1) as usize;
        let mut passes = Vec::with_capacity(count);
        let mut e_left = Vec::with_capacity(count);
        let mut e_left_inv = Vec::with_capacity(count);
        let mut bridge = Vec::with_capacity(count);
        let mut bridge_inv = Vec::with_capacity(count);
        for k in k_lo..=k_hi {
            let pass = IntervalPass::build(sys, k, extra_nodes)?;
            let el = pass.e(0, pass.zeta_pos);
            let er = pass.e(pass.nodes.len() - 1, pass.zeta_pos);
            let el_inv = invert_interval_factor(&el, k)?;
            let er_inv = invert_interval_factor(&er, k)?;
            bridge.push(&er * &el_inv);
            bridge_inv.push(&el * &er_inv);
            e_left.push(el);
            e_left_inv.push(el_inv);
            passes.push(pass);
        }

        let dim = sys.dim;
        let anchor = (n0 - k_lo) as usize;
        let mut y = vec![DMatrix::identity(dim, dim); count + 1];
        let mut y_inv = vec![DMatrix::identity(dim, dim); count + 1];
        for idx in anchor..count {
            y[idx + 1] = &bridge[idx] * &y[idx];
            y_inv[idx + 1] = &y_inv[idx] * &bridge_inv[idx];
        }
        for idx in (0..anchor).rev() {
            y[idx] = &bridge_inv[idx] * &y[idx + 1];
            y_inv[idx] = &y_inv[idx + 1] * &bridge[idx];
        }

        // Partial step from the anchor breakpoint to time zero.
        let e0 = e_matrix_unchecked(sys, 0.0, sys.grid.zeta_at(n0)?)?;
        let p0 = &e0 * &e_left_inv[anchor];
        let p0_inv = &e_left[anchor] * invert_interval_factor(&e0, n0)?;

        Ok(TransitionTables {
            k_lo,
            k_hi,
            passes,
            e_left,
            e_left_inv,
            bridge,
            bridge_inv,
            y,
            y_inv,
            n0,
            p0,
            p0_inv,
        })
    }

    fn idx(&self, k: i64) -> Result<usize> {
        if k < self.k_lo || k > self.k_hi {
            return Err(Error::IndexOutOfWindow { k });
        }
        Ok((k - self.k_lo) as usize)
    }

    pub fn pass(&self, k: i64) -> Result<&IntervalPass> {
        Ok(&self.passes[self.idx(k)?])
    }

    /// `Z(t_k, t_{n0})` for a breakpoint in `k_lo..=k_hi + 1`.
    pub fn y_at(&self, k: i64) -> Result<&DMatrix<f64>> {
        if k < self.k_lo || k > self.k_hi + 1 {
            return Err(Error::IndexOutOfWindow { k });
        }
        Ok(&self.y[(k - self.k_lo) as usize])
    }

    pub fn y_inv_at(&self, k: i64) -> Result<&DMatrix<f64>> {
        if k < self.k_lo || k > self.k_hi + 1 {
            return Err(Error::IndexOutOfWindow { k });
        }
        Ok(&self.y_inv[(k - self.k_lo) as usize])
    }

    /// `Z(u, t_{i(u)})`: the partial step within one interval, freshly
    /// integrated for an arbitrary query point.
    pub fn part(&self, sys: &LinearSystem, u: f64) -> Result<DMatrix<f64>> {
        let k = sys.grid.interval_index(u)?;
        self.part_in(sys, u, k)
    }

    /// Same with a caller-located interval (`u` in the closure of `I_k`).
    pub fn part_in(&self, sys: &LinearSystem, u: f64, k: i64) -> Result<DMatrix<f64>> {
        let idx = self.idx(k)?;
        let e_u = e_matrix_unchecked(sys, u, self.passes[idx].zeta)?;
        Ok(&e_u * &self.e_left_inv[idx])
    }

    /// `Z(t_{i(u)}, u)`.
    pub fn part_inv(&self, sys: &LinearSystem, u: f64) -> Result<DMatrix<f64>> {
        let k = sys.grid.interval_index(u)?;
        let idx = self.idx(k)?;
        let e_u = e_matrix_unchecked(sys, u, self.passes[idx].zeta)?;
        Ok(&self.e_left[idx] * invert_interval_factor(&e_u, k)?)
    }

    /// Same as [`Self::part`] but for a stored pass node (no integration).
    pub fn part_at_node(&self, k: i64, q: usize) -> Result<DMatrix<f64>> {
        let idx = self.idx(k)?;
        let pass = &self.passes[idx];
        Ok(pass.e(q, pass.zeta_pos) * &self.e_left_inv[idx])
    }

    /// `Z(u, t_{n0})` for arbitrary `u` in the window.
    pub fn z_rel(&self, sys: &LinearSystem, u: f64) -> Result<DMatrix<f64>> {
        let k = sys.grid.interval_index(u)?;
        Ok(self.part(sys, u)? * self.y_at(k)?)
    }

    /// `Z(t_{n0}, u)`.
    pub fn z_rel_inv(&self, sys: &LinearSystem, u: f64) -> Result<DMatrix<f64>> {
        let k = sys.grid.interval_index(u)?;
        Ok(self.y_inv_at(k)? * self.part_inv(sys, u)?)
    }

    /// `Z(t, 0)`.
    pub fn z_to_zero(&self, sys: &LinearSystem, t: f64) -> Result<DMatrix<f64>> {
        Ok(self.z_rel(sys, t)? * &self.p0_inv)
    }

    /// `Z(t, 0)` with a caller-located interval.
    pub fn z_to_zero_in(&self, sys: &LinearSystem, t: f64, k: i64) -> Result<DMatrix<f64>> {
        Ok(self.part_in(sys, t, k)? * self.y_at(k)? * &self.p0_inv)
    }

    /// `Z(t_{n0}, 0)`: anchor breakpoint to time zero.
    pub fn p0_inv(&self) -> &DMatrix<f64> {
        &self.p0_inv
    }

    /// `Z(0, s)`.
    pub fn z_from_zero(&self, sys: &LinearSystem, s: f64) -> Result<DMatrix<f64>> {
        Ok(&self.p0 * self.z_rel_inv(sys, s)?)
    }

    /// `Z(t, tau)` through the anchor.
    pub fn z(&self, sys: &LinearSystem, t: f64, tau: f64) -> Result<DMatrix<f64>> {
        if t == tau {
            return Ok(DMatrix::identity(sys.dim, sys.dim));
        }
        Ok(self.z_rel(sys, t)? * self.z_rel_inv(sys, tau)?)
    }

    /// `Z(0, t_k)` for a breakpoint anchor of the Green kernel.
    pub fn z_zero_to_breakpoint(&self, k: i64) -> Result<DMatrix<f64>> {
        Ok(&self.p0 * self.y_inv_at(k)?)
    }

    /// One-step factors `Z(t_{k+1}, t_k)` over the window.
    pub fn bridges(&self) -> &[DMatrix<f64>] {
        &self.bridge
    }
}

fn invert_interval_factor(m: &DMatrix<f64>, interval: i64) -> Result<DMatrix<f64>> {
    checked_inverse(m).map_err(|_| Error::SingularFactor {
        interval,
        cond: condition_number(m),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exprlang::parse;
    use crate::grid::Grid;
    use crate::linear_flow::{transition_matrix, MatrixExpr};
    use crate::CertifiedBound;
    use approx::assert_relative_eq;

    fn scalar_system(a: &str, a0: &str) -> LinearSystem {
        LinearSystem::new(
            MatrixExpr::new(1, vec![parse(a).unwrap()]).unwrap(),
            MatrixExpr::new(1, vec![parse(a0).unwrap()]).unwrap(),
            CertifiedBound::analytic(1.0).unwrap(),
            CertifiedBound::analytic(1.0).unwrap(),
            Grid::builtin_family("floor", &[]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn tables_match_direct_transition() {
        let sys = scalar_system("-1", "0.1");
        let tables = TransitionTables::build(&sys, (-5, 5), &[]).unwrap();
        for (t, tau) in [(2.5, 0.7), (0.3, 1.9), (-0.5, -2.25), (4.0, -4.0), (-3.3, 3.3)] {
            let a = tables.z(&sys, t, tau).unwrap()[(0, 0)];
            let b = transition_matrix(&sys, t, tau).unwrap()[(0, 0)];
            assert_relative_eq!(a, b, epsilon = 1e-9, max_relative = 1e-9);
        }
    }

    #[test]
    fn tables_cocycle_through_zero() {
        let sys = scalar_system("-1", "0.1");
        let tables = TransitionTables::build(&sys, (-4, 4), &[]).unwrap();
        let t = 3.25;
        let s = -2.1;
        let z = tables.z(&sys, t, s).unwrap()[(0, 0)];
        let z1 = tables.z_to_zero(&sys, t).unwrap()[(0, 0)];
        let z2 = tables.z_from_zero(&sys, s).unwrap()[(0, 0)];
        assert_relative_eq!(z, z1 * z2, epsilon = 1e-10, max_relative = 1e-10);
    }

    #[test]
    fn saddle_directions_do_not_overflow() {
        // Expanding direction handled by one-step inverse composition.
        let a = MatrixExpr::new(
            2,
            vec![parse("-1").unwrap(), parse("0").unwrap(), parse("0").unwrap(), parse("1").unwrap()],
        )
        .unwrap();
        let sys = LinearSystem::new(
            a,
            MatrixExpr::constant(&nalgebra::DMatrix::zeros(2, 2)).unwrap(),
            CertifiedBound::analytic(1.0).unwrap(),
            CertifiedBound::analytic(0.0).unwrap(),
            Grid::builtin_family("floor", &[]).unwrap(),
        )
        .unwrap();
        let tables = TransitionTables::build(&sys, (-30, 30), &[]).unwrap();
        let z = tables.z(&sys, -20.0, 20.0).unwrap();
        // Phi(-20, 20) = diag(e^40, e^-40)
        assert_relative_eq!(z[(0, 0)].ln(), 40.0, epsilon = 1e-6);
        assert_relative_eq!(z[(1, 1)].ln(), -40.0, epsilon = 1e-6);
    }

    #[test]
    fn pass_nodes_assemble_interval_matrices() {
        let sys = scalar_system("-1", "0.1");
        let extra = [0.25, 0.5, 0.75];
        let tables = TransitionTables::build(&sys, (0, 0), &extra).unwrap();
        let pass = tables.pass(0).unwrap();
        let q = pass.node_index(0.75).unwrap();
        let direct = crate::linear_flow::e_matrix(&sys, 0.75, 0.0).unwrap();
        assert_relative_eq!(
            pass.e(q, 0)[(0, 0)],
            direct[(0, 0)],
            epsilon = 1e-9
        );
        let qf = pass.node_index(0.25).unwrap();
        let phi = pass.phi_between(q, qf)[(0, 0)];
        assert_relative_eq!(phi, (-0.5f64).exp(), epsilon = 1e-9);
    }
}
