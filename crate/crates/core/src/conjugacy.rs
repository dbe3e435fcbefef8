//! Construction and numerical certification of the conjugacy maps between
//! the linear system and its quasilinear perturbation.
//!
//! `H(t, xi) = xi + chi(t; (t, xi))` comes from one Green quadrature along
//! the nonlinear trajectory; `L(t, nu) = nu + vartheta(t; (t, nu))` comes
//! from a Picard iteration on the fixed-point equation for `vartheta`, which
//! contracts with factor `Gamma* = 2 K rho* (l1 + l2) / alpha < 1`.
//!
//! The engine precomputes, once per window, the kernel ingredients at a fixed
//! quadrature node set (Simpson inside every smooth piece, pieces cut at
//! breakpoints and frozen points). Each Picard sweep then costs one pass of
//! forcing evaluations plus per-interval prefix sums, so iterate counts stay
//! cheap. Every returned value carries an error bar made of the truncation
//! tail, a quadrature allowance and the contraction remainder; the iteration
//! stops once the remainder estimate reaches `picard_tol * Gamma*` and blends
//! the last two iterates so the achieved accuracy tracks `picard_tol`
//! continuously rather than jumping with the iteration count.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dichotomy::{DichotomySpec, GreenContext};
use crate::dynamics::{evaluate_conditions, integrate_span, Nonlinearity, TheoremConditions, Trajectory};
use crate::error::{Error, Result};
use crate::linear_flow::LinearSystem;
use crate::numerics::simpson_rule;

/// Engine knobs; see [`EngineSettings::defaults`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EngineSettings {
    /// Truncation horizon of every Green integral.
    pub horizon: f64,
    pub picard_tol: f64,
    /// Quadrature step; `None` picks `min(theta / 50, 0.02)`.
    pub quad_step: Option<f64>,
    pub picard_cap: usize,
}

impl EngineSettings {
    pub fn defaults(alpha: f64, theta: f64) -> Self {
        EngineSettings {
            horizon: crate::bounded::TruncationPolicy::default_horizon(alpha, theta),
            picard_tol: 1e-3,
            quad_step: None,
            picard_cap: 1000,
        }
    }
}

struct QNode {
    s: f64,
    w: f64,
    mesh_idx: usize,
    /// `Z(0, anchor) Phi(anchor, s)` with the piece's own anchor breakpoint.
    v: DMatrix<f64>,
    /// `Phi(t_k, s)` within the node's interval.
    psi: DMatrix<f64>,
}

struct Piece {
    interval_idx: usize,
    lo: f64,
    hi: f64,
    q_range: (usize, usize),
}

struct MeshPoint {
    s: f64,
    /// Right-convention interval index (clamped at the window edge).
    interval_idx: usize,
    z_to_zero: DMatrix<f64>,
    /// `Phi(s, t_j)` for the point's interval `j`.
    phi_from_left: DMatrix<f64>,
}

struct SweepSums {
    piece: Vec<DVector<f64>>,
    prefix: Vec<DVector<f64>>,
    suffix: Vec<DVector<f64>>,
}

struct IntervalInfo {
    t_l: f64,
    t_r: f64,
    zeta: f64,
    zeta_mesh: usize,
    adv_piece: usize,
    del_piece: usize,
}

struct EngineShared {
    ctx: GreenContext,
    f: Nonlinearity,
    cond: TheoremConditions,
    span: (f64, f64),
    qnodes: Vec<QNode>,
    pieces: Vec<Piece>,
    mesh: Vec<MeshPoint>,
    intervals: Vec<IntervalInfo>,
}

/// The conjugacy engine; immutable after construction, cheap to clone.
#[derive(Clone)]
pub struct ConjugacyEngine {
    shared: Arc<EngineShared>,
    pub picard_tol: f64,
    pub horizon: f64,
    pub picard_cap: usize,
}

/// A value with its error bar decomposition.
#[derive(Debug, Clone)]
pub struct MapValue {
    pub value: DVector<f64>,
    pub error_bar: f64,
    pub tail: f64,
    pub quad_allowance: f64,
    pub picard_remainder: f64,
    pub iterations: usize,
}

impl ConjugacyEngine {
    /// Builds the engine for evaluations at times inside `query_span`; the
    /// working window widens by the truncation horizon on both sides and the
    /// contraction budget `Gamma* < 1` is enforced.
    pub fn new(
        sys: LinearSystem,
        f: Nonlinearity,
        dicho: DichotomySpec,
        query_span: (f64, f64),
        settings: EngineSettings,
    ) -> Result<Self> {
        if f.dim() != sys.dim {
            return Err(Error::Domain(format!(
                "nonlinearity has dimension {}, system has {}",
                f.dim(),
                sys.dim
            )));
        }
        if !(settings.picard_tol > 0.0) {
            return Err(Error::Domain("picard_tol must be positive".into()));
        }
        let horizon = settings.horizon;
        if !(horizon > 0.0) {
            return Err(Error::Domain("truncation horizon must be positive".into()));
        }
        let span_req = (query_span.0 - horizon, query_span.1 + horizon);
        let step = settings
            .quad_step
            .unwrap_or_else(|| (sys.grid.theta() / 50.0).min(0.02));

        // Quadrature node positions: Simpson meshes per smooth piece.
        let (k_lo, k_hi) = sys.grid.interval_range(span_req.0, span_req.1)?;
        let mut positions: Vec<f64> = Vec::new();
        let mut raw_pieces: Vec<(usize, f64, f64, Vec<f64>, Vec<f64>)> = Vec::new();
        for k in k_lo..=k_hi {
            let (t_l, zeta, t_r) =
                (sys.grid.t_at(k)?, sys.grid.zeta_at(k)?, sys.grid.t_at(k + 1)?);
            for (lo, hi) in [(t_l, zeta), (zeta, t_r)] {
                let (nodes, weights) = simpson_rule(lo, hi, step);
                positions.extend_from_slice(&nodes);
                raw_pieces.push(((k - k_lo) as usize, lo, hi, nodes, weights));
            }
        }

        let ctx = GreenContext::with_nodes(sys, dicho, span_req, &positions)?;
        let cond = evaluate_conditions(&ctx.sys, &f, &ctx.dicho, (k_lo, k_hi))?;
        if !cond.flags.fpt {
            return Err(Error::Domain(format!(
                "contraction budget violated: Gamma* = {:.6} >= 1 (fpt condition fails)",
                cond.gamma_star
            )));
        }

        // Deduplicated mesh with right-convention interval data.
        let mut mesh_s: Vec<f64> = positions.clone();
        mesh_s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        mesh_s.dedup_by(|a, b| (*a - *b).abs() < 1e-13);
        let tables = ctx.tables();
        let mut mesh = Vec::with_capacity(mesh_s.len());
        for &s in &mesh_s {
            let k = ctx.sys.grid.interval_index(s).map(|k| k.min(k_hi)).unwrap_or(k_hi);
            let pass = tables.pass(k)?;
            let q = pass.node_index(s).ok_or_else(|| {
                Error::Domain(format!("mesh point {s} missing from interval pass {k}"))
            })?;
            mesh.push(MeshPoint {
                s,
                interval_idx: (k - k_lo) as usize,
                z_to_zero: tables.part_at_node(k, q)? * tables.y_at(k)? * tables.p0_inv(),
                phi_from_left: pass.phi[q].clone(),
            });
        }
        let mesh_index = |s: f64| -> Result<usize> {
            mesh.binary_search_by(|m| m.s.partial_cmp(&s).unwrap())
                .map_err(|_| Error::Domain(format!("node {s} missing from mesh")))
        };

        // Flattened quadrature nodes with kernel ingredients.
        let mut qnodes = Vec::new();
        let mut pieces = Vec::with_capacity(raw_pieces.len());
        for (interval_idx, lo, hi, nodes, weights) in raw_pieces {
            let k = k_lo + interval_idx as i64;
            let pass = tables.pass(k)?;
            let advanced = (lo - pass.t_left).abs() < 1e-12 && (hi - pass.zeta).abs() < 1e-12;
            let anchor_k = if advanced { k } else { k + 1 };
            let z0a = tables.z_zero_to_breakpoint(anchor_k)?;
            // Phi(anchor, s) = Phi(anchor, t_k) Phi(t_k, s).
            let anchor_shift = if advanced {
                DMatrix::identity(ctx.sys.dim, ctx.sys.dim)
            } else {
                pass.phi[pass.nodes.len() - 1].clone()
            };
            let pre = z0a * anchor_shift;
            let start = qnodes.len();
            for (&s, &w) in nodes.iter().zip(&weights) {
                let q = pass.node_index(s).ok_or_else(|| {
                    Error::Domain(format!("quadrature node {s} missing from pass {k}"))
                })?;
                qnodes.push(QNode {
                    s,
                    w,
                    mesh_idx: mesh_index(s)?,
                    v: &pre * &pass.psi[q],
                    psi: pass.psi[q].clone(),
                });
            }
            pieces.push(Piece { interval_idx, lo, hi, q_range: (start, qnodes.len()) });
        }

        let mut intervals = Vec::with_capacity((k_hi - k_lo + 1) as usize);
        for k in k_lo..=k_hi {
            let idx = (k - k_lo) as usize;
            let pass = tables.pass(k)?;
            intervals.push(IntervalInfo {
                t_l: pass.t_left,
                t_r: pass.t_right,
                zeta: pass.zeta,
                zeta_mesh: mesh_index(pass.zeta)?,
                adv_piece: 2 * idx,
                del_piece: 2 * idx + 1,
            });
        }

        let span = (ctx.sys.grid.t_at(k_lo)?, ctx.sys.grid.t_at(k_hi + 1)?);
        Ok(ConjugacyEngine {
            shared: Arc::new(EngineShared { ctx, f, cond, span, qnodes, pieces, mesh, intervals }),
            picard_tol: settings.picard_tol,
            horizon,
            picard_cap: settings.picard_cap,
        })
    }

    pub fn with_picard_tol(&self, picard_tol: f64) -> Result<Self> {
        if !(picard_tol > 0.0) {
            return Err(Error::Domain("picard_tol must be positive".into()));
        }
        Ok(ConjugacyEngine { picard_tol, ..self.clone() })
    }

    pub fn conditions(&self) -> &TheoremConditions {
        &self.shared.cond
    }

    pub fn context(&self) -> &GreenContext {
        &self.shared.ctx
    }

    pub fn span(&self) -> (f64, f64) {
        self.shared.span
    }

    fn tail_at(&self, t: f64, sup: f64) -> f64 {
        let sh = &self.shared;
        let d = &sh.ctx.dicho;
        let scale = d.k * sh.ctx.rho_star * sup / d.alpha;
        scale * ((-d.alpha * (t - sh.span.0)).exp() + (-d.alpha * (sh.span.1 - t)).exp())
    }

    fn quad_allowance(&self, sup: f64) -> f64 {
        let sh = &self.shared;
        let step = sh.pieces.iter().fold(0.0f64, |acc, p| {
            let (a, b) = p.q_range;
            if b - a > 1 { acc.max((p.hi - p.lo) / (b - a - 1) as f64) } else { acc }
        });
        step * step * sh.ctx.dicho.k * sh.ctx.rho_star * sup
    }

    /// Per-piece weighted sums of the kernel-prepared integrand, plus prefix
    /// and suffix accumulations over whole intervals; computed once per
    /// integrand (i.e. once per Picard sweep).
    fn piece_sums(&self, values: &[DVector<f64>]) -> SweepSums {
        let sh = &self.shared;
        let n = sh.ctx.sys.dim;
        let piece: Vec<DVector<f64>> = sh
            .pieces
            .iter()
            .map(|pc| {
                let mut s = DVector::zeros(n);
                for q in &sh.qnodes[pc.q_range.0..pc.q_range.1] {
                    s += &q.v * &values[q.mesh_idx] * q.w;
                }
                s
            })
            .collect();
        let n_int = sh.intervals.len();
        let interval_sum: Vec<DVector<f64>> = (0..n_int)
            .map(|i| &piece[2 * i] + &piece[2 * i + 1])
            .collect();
        let mut prefix = vec![DVector::zeros(n); n_int];
        for i in 1..n_int {
            prefix[i] = &prefix[i - 1] + &interval_sum[i - 1];
        }
        let mut suffix = vec![DVector::zeros(n); n_int];
        for i in (0..n_int.saturating_sub(1)).rev() {
            suffix[i] = &suffix[i + 1] + &interval_sum[i + 1];
        }
        SweepSums { piece, prefix, suffix }
    }

    /// Green quadrature `integral G(t, s) F(s) ds` over the whole window for
    /// one evaluation point, from per-node integrand values and their sums.
    #[allow(clippy::too_many_arguments)]
    fn assemble(
        &self,
        sums: &SweepSums,
        t: f64,
        interval_idx: usize,
        z0_t: &DMatrix<f64>,
        phi_left_t: &DMatrix<f64>,
        f_at_t: &DVector<f64>,
        values: &[DVector<f64>],
    ) -> DVector<f64> {
        let sh = &self.shared;
        let n = sh.ctx.sys.dim;
        let p = &sh.ctx.dicho.p;
        let id = DMatrix::identity(n, n);
        let p_pre = z0_t * p;
        let m_pre = z0_t * (&id - p);

        let info = &sh.intervals[interval_idx];
        let mut acc = &p_pre * &sums.prefix[interval_idx] - &m_pre * &sums.suffix[interval_idx];
        if t > info.zeta {
            // anchored advanced piece, split delayed piece
            acc += &p_pre * &sums.piece[info.adv_piece];
            acc += self.split_piece(
                &sh.pieces[info.del_piece],
                t,
                1.0,
                phi_left_t,
                f_at_t,
                values,
                true,
            );
        } else {
            // split advanced piece, anchored delayed piece
            acc -= &m_pre * &sums.piece[info.del_piece];
            acc += self.split_piece(
                &sh.pieces[info.adv_piece],
                t,
                -1.0,
                phi_left_t,
                f_at_t,
                values,
                false,
            );
        }
        acc
    }

    /// Trapezoid over the piece containing the evaluation point. For
    /// `left_active` the kernel is `sign * Phi(t, s)` on `[lo, t)` and zero
    /// after; otherwise zero before `t` and `sign * Phi(t, s)` on `[t, hi)`.
    #[allow(clippy::too_many_arguments)]
    fn split_piece(
        &self,
        piece: &Piece,
        t: f64,
        sign: f64,
        phi_left_t: &DMatrix<f64>,
        f_at_t: &DVector<f64>,
        values: &[DVector<f64>],
        left_active: bool,
    ) -> DVector<f64> {
        let sh = &self.shared;
        let n = sh.ctx.sys.dim;
        let (a, b) = if left_active { (piece.lo, t) } else { (t, piece.hi) };
        let mut acc = DVector::zeros(n);
        if b - a < 1e-14 {
            return acc;
        }
        let kernel_at = |q: &QNode| (phi_left_t * &q.psi) * &values[q.mesh_idx];
        let nodes = &sh.qnodes[piece.q_range.0..piece.q_range.1];
        let mut prev: Option<(f64, DVector<f64>)> = None;
        for q in nodes {
            if q.s < a - 1e-14 || q.s > b + 1e-14 {
                continue;
            }
            let val = kernel_at(q);
            if let Some((sp, vp)) = &prev {
                acc += (&*vp + &val) * (0.5 * (q.s - sp));
            } else if q.s > a + 1e-14 {
                // sliver from the cut point (the cut is the evaluation time,
                // where the kernel limit is the identity)
                acc += (f_at_t + &val) * (0.5 * (q.s - a));
            }
            prev = Some((q.s, val));
        }
        if let Some((sp, vp)) = prev {
            if b > sp + 1e-14 {
                acc += (&vp + f_at_t) * (0.5 * (b - sp));
            }
        }
        acc * sign
    }

    /// `chi(t; (tau, xi))`: the unique bounded correction along the nonlinear
    /// trajectory through `(tau, xi)`.
    pub fn chi(&self, tau: f64, xi: &DVector<f64>, t: f64) -> Result<MapValue> {
        let sh = &self.shared;
        self.check_eval_time(t)?;
        let traj = integrate_span(&sh.ctx.sys, Some(&sh.f), tau, xi, sh.span.0, sh.span.1)?;
        let values = self.forcing_values(&traj)?;
        let sums = self.piece_sums(&values);
        let (interval_idx, z0_t, phi_left_t) = self.eval_point(t)?;
        let j = interval_idx;
        let frozen = traj.eval(sh.intervals[j].zeta)?;
        let f_at_t = sh.f.eval(t, &traj.eval(t)?, &frozen)?;
        let value = -self.assemble(&sums, t, j, &z0_t, &phi_left_t, &f_at_t, &values);
        let mu = sh.cond.mu;
        let tail = self.tail_at(t, mu);
        let quad = self.quad_allowance(mu);
        Ok(MapValue {
            value,
            error_bar: tail + quad,
            tail,
            quad_allowance: quad,
            picard_remainder: 0.0,
            iterations: 0,
        })
    }

    fn forcing_values(&self, traj: &Trajectory) -> Result<Vec<DVector<f64>>> {
        let sh = &self.shared;
        let mut x_mesh = Vec::with_capacity(sh.mesh.len());
        for m in &sh.mesh {
            x_mesh.push(traj.eval(m.s)?);
        }
        let mut out = Vec::with_capacity(sh.mesh.len());
        for (mi, m) in sh.mesh.iter().enumerate() {
            let frozen = &x_mesh[sh.intervals[m.interval_idx].zeta_mesh];
            out.push(sh.f.eval(m.s, &x_mesh[mi], frozen)?);
        }
        Ok(out)
    }

    fn check_eval_time(&self, t: f64) -> Result<()> {
        let (lo, hi) = self.shared.span;
        if t < lo || t > hi {
            return Err(Error::OutOfWindow { t });
        }
        Ok(())
    }

    /// Kernel ingredients at an arbitrary evaluation time. The right window
    /// edge is treated as the closure of the last covered interval.
    fn eval_point(&self, t: f64) -> Result<(usize, DMatrix<f64>, DMatrix<f64>)> {
        let sh = &self.shared;
        let grid = &sh.ctx.sys.grid;
        let tables = sh.ctx.tables();
        let k = match grid.interval_index(t) {
            Ok(k) => k.min(tables.k_hi),
            Err(_) if (t - sh.span.1).abs() < 1e-9 => tables.k_hi,
            Err(e) => return Err(e),
        };
        let interval_idx = (k - tables.k_lo) as usize;
        let z0_t = tables.z_to_zero_in(&sh.ctx.sys, t, k)?;
        let phi_left = crate::linear_flow::fundamental_matrix(&sh.ctx.sys, t, grid.t_at(k)?)?;
        Ok((interval_idx, z0_t, phi_left))
    }

    /// `vartheta(t; (tau, nu))` by Picard iteration on the whole mesh.
    pub fn vartheta(&self, tau: f64, nu: &DVector<f64>, t: f64) -> Result<MapValue> {
        let sh = &self.shared;
        self.check_eval_time(t)?;
        let n = sh.ctx.sys.dim;
        let gamma = sh.cond.gamma_star;

        // Linear trajectory values on the mesh: y(s) = Z(s, 0) Z(0, tau) nu.
        let u0 = sh.ctx.z_from_zero(tau)? * nu;
        let y_mesh: Vec<DVector<f64>> =
            sh.mesh.iter().map(|m| &m.z_to_zero * &u0).collect();

        // Iterate until the contraction remainder estimate drops below the
        // accuracy target, keeping the whole trail.
        let target = self.picard_tol * gamma;
        let stop_increment = self.picard_tol * (1.0 - gamma);
        let mut trail: Vec<Vec<DVector<f64>>> = vec![vec![DVector::zeros(n); sh.mesh.len()]];
        let mut increments: Vec<f64> = Vec::new();
        let mut stopped = false;
        for _ in 0..self.picard_cap {
            let next = self.sweep(trail.last().unwrap(), &y_mesh)?;
            let inc = trail
                .last()
                .unwrap()
                .iter()
                .zip(&next)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0f64, f64::max);
            increments.push(inc);
            trail.push(next);
            if inc < stop_increment || inc == 0.0 {
                stopped = true;
                break;
            }
        }
        if !stopped {
            return Err(Error::PicardCap {
                cap: self.picard_cap,
                increment: increments.last().copied().unwrap_or(f64::NAN),
            });
        }

        // Error estimates along the trail: with contraction factor gamma,
        // ||phi_j - phi_inf|| <= inc_{j+1} / (1 - gamma), and the final
        // iterate satisfies ||phi_k - phi_inf|| <= inc_k gamma / (1 - gamma).
        // The returned function is the blend of the first bracketing pair so
        // its remainder sits at `target`; the achieved accuracy then tracks
        // picard_tol continuously instead of jumping with the sweep count.
        let k = increments.len();
        let denom = (1.0 - gamma).max(1e-12);
        let err_of = |j: usize| -> f64 {
            if j < k {
                increments[j] / denom
            } else {
                increments[k - 1] * gamma / denom
            }
        };
        let (final_phi, remainder) = {
            let mut pick = None;
            for j in 1..=k {
                if err_of(j) < target && err_of(j - 1) >= target {
                    pick = Some(j);
                    break;
                }
            }
            match pick {
                Some(j) => {
                    let (err_a, err_b) = (err_of(j - 1), err_of(j));
                    let w = ((err_a - target) / (err_a - err_b)).clamp(0.0, 1.0);
                    let blended: Vec<DVector<f64>> = trail[j - 1]
                        .iter()
                        .zip(&trail[j])
                        .map(|(a, b)| a + (b - a) * w)
                        .collect();
                    (blended, (1.0 - w) * err_a + w * err_b)
                }
                // Either everything already sits below target (take the last
                // iterate) or the target is zero with exact convergence.
                None => {
                    let rem = err_of(k);
                    (trail.pop().unwrap(), rem)
                }
            }
        };

        let value = self.interp_mesh(&final_phi, t);
        let mu = sh.cond.mu;
        let tail = self.tail_at(t, mu);
        let quad = self.quad_allowance(mu);
        Ok(MapValue {
            value,
            error_bar: remainder + tail + quad,
            tail,
            quad_allowance: quad,
            picard_remainder: remainder,
            iterations: increments.len(),
        })
    }

    /// Increment trace of the raw Picard iteration (diagnostics).
    pub fn picard_increments(&self, tau: f64, nu: &DVector<f64>) -> Result<Vec<f64>> {
        let sh = &self.shared;
        let n = sh.ctx.sys.dim;
        let u0 = sh.ctx.z_from_zero(tau)? * nu;
        let y_mesh: Vec<DVector<f64>> =
            sh.mesh.iter().map(|m| &m.z_to_zero * &u0).collect();
        let mut phi: Vec<DVector<f64>> = vec![DVector::zeros(n); sh.mesh.len()];
        let mut increments = Vec::new();
        for _ in 0..self.picard_cap {
            let next = self.sweep(&phi, &y_mesh)?;
            let inc = phi
                .iter()
                .zip(&next)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0f64, f64::max);
            increments.push(inc);
            phi = next;
            if inc < self.picard_tol * (1.0 - sh.cond.gamma_star) {
                break;
            }
        }
        Ok(increments)
    }

    /// One application of the integral operator to a mesh iterate.
    fn sweep(&self, phi: &[DVector<f64>], y_mesh: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        let sh = &self.shared;
        // Integrand at every mesh point (piece-local frozen values).
        let mut forcing = Vec::with_capacity(sh.mesh.len());
        for (mi, m) in sh.mesh.iter().enumerate() {
            let zm = sh.intervals[m.interval_idx].zeta_mesh;
            let x = &y_mesh[mi] + &phi[mi];
            let frozen = &y_mesh[zm] + &phi[zm];
            forcing.push(sh.f.eval(m.s, &x, &frozen)?);
        }
        let sums = self.piece_sums(&forcing);
        let mut out = Vec::with_capacity(sh.mesh.len());
        for (mi, m) in sh.mesh.iter().enumerate() {
            out.push(self.assemble(
                &sums,
                m.s,
                m.interval_idx,
                &m.z_to_zero,
                &m.phi_from_left,
                &forcing[mi],
                &forcing,
            ));
        }
        Ok(out)
    }

    fn interp_mesh(&self, values: &[DVector<f64>], t: f64) -> DVector<f64> {
        let sh = &self.shared;
        let pos = sh.mesh.partition_point(|m| m.s <= t);
        if pos == 0 {
            return values[0].clone();
        }
        if pos == sh.mesh.len() {
            return values[values.len() - 1].clone();
        }
        let (a, b) = (&sh.mesh[pos - 1], &sh.mesh[pos]);
        let w = (t - a.s) / (b.s - a.s);
        &values[pos - 1] * (1.0 - w) + &values[pos] * w
    }

    /// `H(t, xi) = xi + chi(t; (t, xi))`.
    pub fn h_map(&self, t: f64, xi: &DVector<f64>) -> Result<MapValue> {
        let mut r = self.chi(t, xi, t)?;
        r.value += xi;
        Ok(r)
    }

    /// `L(t, nu) = nu + vartheta(t; (t, nu))`.
    pub fn l_map(&self, t: f64, nu: &DVector<f64>) -> Result<MapValue> {
        let mut r = self.vartheta(t, nu, t)?;
        r.value += nu;
        Ok(r)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InverseRow {
    pub t: f64,
    pub point: Vec<f64>,
    pub lh_residual: f64,
    pub hl_residual: f64,
    pub combined_bar: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InverseReport {
    pub rows: Vec<InverseRow>,
    pub max_residual: f64,
    pub pass: bool,
}

/// Checks `L(t, H(t, xi)) = xi` and `H(t, L(t, xi)) = xi` on sample points;
/// residuals must stay within ten times the combined error bars.
pub fn certify_inverse(
    engine: &ConjugacyEngine,
    samples: &[DVector<f64>],
    ts: &[f64],
) -> Result<InverseReport> {
    let mut rows = Vec::with_capacity(samples.len() * ts.len());
    let mut max_residual = 0.0f64;
    for &t in ts {
        for xi in samples {
            let h = engine.h_map(t, xi)?;
            let lh = engine.l_map(t, &h.value)?;
            let lh_residual = (&lh.value - xi).norm();
            let l = engine.l_map(t, xi)?;
            let hl = engine.h_map(t, &l.value)?;
            let hl_residual = (&hl.value - xi).norm();
            let combined_bar = h.error_bar + lh.error_bar + l.error_bar + hl.error_bar;
            let pass = lh_residual <= 10.0 * (h.error_bar + lh.error_bar)
                && hl_residual <= 10.0 * (l.error_bar + hl.error_bar);
            max_residual = max_residual.max(lh_residual).max(hl_residual);
            rows.push(InverseRow {
                t,
                point: xi.iter().copied().collect(),
                lh_residual,
                hl_residual,
                combined_bar,
                pass,
            });
        }
    }
    let pass = rows.iter().all(|r| r.pass);
    Ok(InverseReport { rows, max_residual, pass })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MappingRow {
    pub t: f64,
    pub fd_residual: f64,
    pub proximity: f64,
    pub proximity_bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MappingReport {
    pub rows: Vec<MappingRow>,
    pub max_fd_residual: f64,
    pub pass: bool,
}

/// Certifies that `t -> H[t, x(t, tau, xi)]` solves the linear system: the
/// finite-difference residual of the linear DEPCAG along the mapped
/// trajectory stays below `fd_tol`, and the mapped trajectory stays within
/// the `2 mu K rho* / alpha` tube around the nonlinear one.
pub fn certify_solution_mapping(
    engine: &ConjugacyEngine,
    tau: f64,
    xi: &DVector<f64>,
    t_samples: &[f64],
    fd_tol: f64,
) -> Result<MappingReport> {
    let sh = &engine.shared;
    let sys = &sh.ctx.sys;
    let traj = integrate_span(sys, Some(&sh.f), tau, xi, sh.span.0, sh.span.1)?;
    let values = engine.forcing_values(&traj)?;

    // chi evaluated with the shared trajectory: the correction at time u.
    let sums = engine.piece_sums(&values);
    let chi_at = |u: f64| -> Result<DVector<f64>> {
        let (j, z0, phi_left) = engine.eval_point(u)?;
        let frozen = traj.eval(sh.intervals[j].zeta)?;
        let f_at = sh.f.eval(u, &traj.eval(u)?, &frozen)?;
        Ok(-engine.assemble(&sums, u, j, &z0, &phi_left, &f_at, &values))
    };
    let h_at = |u: f64| -> Result<DVector<f64>> { Ok(traj.eval(u)? + chi_at(u)?) };

    let d = &sh.ctx.dicho;
    let bound = 2.0 * sh.cond.mu * d.k * sh.ctx.rho_star / d.alpha;
    let bar = engine.tail_at(tau, sh.cond.mu) + engine.quad_allowance(sh.cond.mu);
    let delta = 5e-3 * sys.grid.theta().min(1.0);

    let mut rows = Vec::with_capacity(t_samples.len());
    let mut max_fd = 0.0f64;
    for &t in t_samples {
        // keep the stencil inside one interval
        let k = sys.grid.interval_index(t)?;
        let (a, b) = (sys.grid.t_at(k)?, sys.grid.t_at(k + 1)?);
        let tc = t.clamp(a + 2.0 * delta, b - 2.0 * delta);
        let hm = h_at(tc - delta)?;
        let hp = h_at(tc + delta)?;
        let h0 = h_at(tc)?;
        let dh = (&hp - &hm) / (2.0 * delta);
        let h_frozen = h_at(sys.grid.gamma(tc)?)?;
        let rhs = sys.a.eval(tc)? * &h0 + sys.a0.eval(tc)? * &h_frozen;
        let fd_residual = (&dh - rhs).norm();
        let proximity = (&h0 - traj.eval(tc)?).norm();
        max_fd = max_fd.max(fd_residual);
        rows.push(MappingRow {
            t: tc,
            fd_residual,
            proximity,
            proximity_bound: bound + bar,
            pass: fd_residual <= fd_tol && proximity <= bound + bar,
        });
    }
    let pass = rows.iter().all(|r| r.pass);
    Ok(MappingReport { rows, max_fd_residual: max_fd, pass })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HolderRow {
    pub delta: f64,
    pub measured_h: f64,
    pub allowed_h: f64,
    pub implied_exponent_h: f64,
    pub measured_l: f64,
    pub allowed_l: f64,
    pub implied_exponent_l: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HolderReport {
    pub exponent_h: f64,
    pub coeff_h: f64,
    pub exponent_l: f64,
    pub coeff_l: f64,
    pub rows: Vec<HolderRow>,
    pub pass: bool,
}

/// Measures Holder continuity of `H` and `L` in the state variable against
/// the closed-form coefficients and exponents.
pub fn holder_certify(
    engine: &ConjugacyEngine,
    t: f64,
    deltas: &[f64],
    base_points: usize,
    rng: &mut ChaCha8Rng,
) -> Result<HolderReport> {
    let cond = engine.conditions();
    if !cond.flags.alfa {
        return Err(Error::Domain(
            "the rate comparison condition fails: Holder exponents are undefined".into(),
        ));
    }
    if deltas.iter().any(|&d| !(0.0 < d && d < 1.0)) {
        return Err(Error::Domain("Holder deltas must lie in (0, 1)".into()));
    }
    let (p1, p2) = (cond.p1.unwrap(), cond.p2.unwrap());
    let (k, alpha, rho_star) = (cond.k, cond.alpha, cond.rho_star);
    let (l1, l2, mu, theta) = (cond.ell1, cond.ell2, cond.mu, cond.theta);
    let gamma = cond.gamma_star;
    let exponent_h = alpha / p1;
    let exponent_l = alpha / p2;
    let coeff_h =
        1.0 + 2.0 * k * rho_star * (l1 + l2 * (p1 * theta).exp()) / (p1 - alpha)
            + 4.0 * mu * k * rho_star / alpha;
    let coeff_l = 1.0
        + (2.0 * k * rho_star * (l1 + l2 * (p2 * theta).exp()) / (p2 - alpha)
            + 4.0 * mu * k / alpha)
            / (1.0 - gamma);

    let n = engine.shared.ctx.sys.dim;
    let mut rows = Vec::new();
    for &delta in deltas {
        for _ in 0..base_points {
            let xi = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let mut dir = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            if dir.norm() < 1e-9 {
                dir = DVector::from_element(n, 1.0);
            }
            dir /= dir.norm();
            let xi2 = &xi + &dir * delta;

            let h1 = engine.h_map(t, &xi)?;
            let h2 = engine.h_map(t, &xi2)?;
            let measured_h = (&h1.value - &h2.value).norm();
            let allowed_h = coeff_h * delta.powf(exponent_h) + h1.error_bar + h2.error_bar;

            let l1v = engine.l_map(t, &xi)?;
            let l2v = engine.l_map(t, &xi2)?;
            let measured_l = (&l1v.value - &l2v.value).norm();
            let allowed_l = coeff_l * delta.powf(exponent_l) + l1v.error_bar + l2v.error_bar;

            let implied = |m: f64| if m > 0.0 { m.ln() / delta.ln() } else { f64::INFINITY };
            rows.push(HolderRow {
                delta,
                measured_h,
                allowed_h,
                implied_exponent_h: implied(measured_h),
                measured_l,
                allowed_l,
                implied_exponent_l: implied(measured_l),
                pass: measured_h <= allowed_h && measured_l <= allowed_l,
            });
        }
    }
    let pass = rows.iter().all(|r| r.pass);
    Ok(HolderReport { exponent_h, coeff_h, exponent_l, coeff_l, rows, pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dichotomy::DichotomySource;
    use crate::exprlang::parse;
    use crate::grid::Grid;
    use crate::linear_flow::MatrixExpr;
    use crate::CertifiedBound;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn scalar_engine(
        a: &str,
        a0: &str,
        f_expr: &str,
        bounds: (f64, f64, f64),
        p: f64,
        alpha: f64,
        query: (f64, f64),
        tol: f64,
    ) -> ConjugacyEngine {
        let m = parse(a).unwrap().eval(&crate::exprlang::EvalEnv::time(0.3)).unwrap().abs();
        let m0 = parse(a0).unwrap().eval(&crate::exprlang::EvalEnv::time(0.3)).unwrap().abs();
        let sys = LinearSystem::new(
            MatrixExpr::new(1, vec![parse(a).unwrap()]).unwrap(),
            MatrixExpr::new(1, vec![parse(a0).unwrap()]).unwrap(),
            CertifiedBound::analytic(m).unwrap(),
            CertifiedBound::analytic(m0).unwrap(),
            Grid::builtin_family("floor", &[]).unwrap(),
        )
        .unwrap();
        let f = Nonlinearity::new(
            vec![parse(f_expr).unwrap()],
            CertifiedBound::analytic(bounds.0).unwrap(),
            CertifiedBound::analytic(bounds.1).unwrap(),
            CertifiedBound::analytic(bounds.2).unwrap(),
        )
        .unwrap();
        let dicho = DichotomySpec::new(
            DMatrix::from_element(1, 1, p),
            1.0,
            alpha,
            DichotomySource::UserSupplied,
        )
        .unwrap();
        let mut settings = EngineSettings::defaults(alpha, 1.0);
        settings.picard_tol = tol;
        ConjugacyEngine::new(sys, f, dicho, query, settings).unwrap()
    }

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_vec(vec![x])
    }

    #[test]
    fn identity_maps_for_zero_perturbation() {
        let e = scalar_engine("-1", "0", "0", (0.0, 0.0, 0.0), 1.0, 1.0, (0.0, 1.0), 1e-3);
        let h = e.h_map(0.5, &v1(0.7)).unwrap();
        assert_relative_eq!(h.value[0], 0.7);
        let l = e.l_map(0.5, &v1(-0.4)).unwrap();
        assert_relative_eq!(l.value[0], -0.4);
        assert_eq!(l.iterations, 1);
        let rep = certify_inverse(&e, &[v1(0.3), v1(-1.2)], &[0.25, 0.75]).unwrap();
        assert!(rep.pass);
        assert_relative_eq!(rep.max_residual, 0.0);
    }

    #[test]
    fn constant_perturbation_closed_forms() {
        // f = mu0: chi = -mu0, vartheta = mu0, H = xi - mu0, L = nu + mu0.
        let mu0 = 0.05;
        let e = scalar_engine("-1", "0", "0.05", (mu0, 0.0, 0.0), 1.0, 1.0, (0.0, 1.0), 1e-4);
        let chi = e.chi(0.4, &v1(0.9), 0.4).unwrap();
        assert!((chi.value[0] + mu0).abs() <= chi.error_bar + 1e-6, "chi = {}", chi.value[0]);
        let th = e.vartheta(0.4, &v1(0.9), 0.4).unwrap();
        assert!((th.value[0] - mu0).abs() <= th.error_bar + 1e-6, "vartheta = {}", th.value[0]);
        let h = e.h_map(0.4, &v1(0.9)).unwrap();
        assert!((h.value[0] - (0.9 - mu0)).abs() <= h.error_bar + 1e-6);
        let l = e.l_map(0.4, &v1(0.9)).unwrap();
        assert!((l.value[0] - (0.9 + mu0)).abs() <= l.error_bar + 1e-6);
        let rep = certify_inverse(&e, &[v1(0.9)], &[0.4]).unwrap();
        assert!(rep.pass);
    }

    #[test]
    fn chi_respects_mu_bound() {
        let e = scalar_engine(
            "-1",
            "0.1",
            "0.01*tanh(x1)",
            (0.01, 0.0105, 0.0),
            1.0,
            0.8,
            (0.0, 2.0),
            1e-3,
        );
        let cond = e.conditions();
        let cap = 2.0 * cond.mu * cond.k * cond.rho_star / cond.alpha;
        for (i, xi) in [-3.0, -0.4, 0.9, 5.0].iter().enumerate() {
            let t = 0.4 * i as f64;
            let chi = e.chi(t, &v1(*xi), t).unwrap();
            assert!(
                chi.value[0].abs() <= cap + chi.error_bar,
                "chi = {} exceeds {cap}",
                chi.value[0]
            );
        }
    }

    #[test]
    fn picard_increments_decay_geometrically() {
        let e = scalar_engine(
            "-1",
            "0.1",
            "0.01*tanh(x1)",
            (0.01, 0.0105, 0.0),
            1.0,
            0.8,
            (0.0, 1.0),
            1e-9,
        );
        let incs = e.picard_increments(0.3, &v1(1.1)).unwrap();
        assert!(incs.len() >= 3, "{incs:?}");
        let gamma = e.conditions().gamma_star;
        for w in incs.windows(2) {
            if w[0] > 1e-13 {
                assert!(
                    w[1] <= w[0] * gamma * (1.0 + 1e-6),
                    "increments not contracting at rate {gamma}: {w:?}"
                );
            }
        }
    }

    #[test]
    fn inverse_residuals_track_picard_tol() {
        let e = scalar_engine(
            "-1",
            "0.1",
            "0.01*tanh(x1)",
            (0.01, 0.0105, 0.0),
            1.0,
            0.8,
            (0.0, 1.0),
            1e-3,
        );
        let samples: Vec<DVector<f64>> = (0..6).map(|i| v1(-1.0 + 0.45 * i as f64)).collect();
        let ts = [0.3, 0.8];
        let coarse = certify_inverse(&e, &samples, &ts).unwrap();
        assert!(coarse.pass);
        let fine = certify_inverse(&e.with_picard_tol(5e-4).unwrap(), &samples, &ts).unwrap();
        assert!(fine.pass);
        let ratio = fine.max_residual / coarse.max_residual;
        assert!(
            (0.2..=0.9).contains(&ratio),
            "residual ratio {ratio} (coarse {}, fine {})",
            coarse.max_residual,
            fine.max_residual
        );
    }

    #[test]
    fn mapped_trajectory_solves_linear_system() {
        let e = scalar_engine(
            "-1",
            "0.1",
            "0.01*tanh(x1)",
            (0.01, 0.0105, 0.0),
            1.0,
            0.8,
            (0.0, 3.0),
            1e-3,
        );
        let ts: Vec<f64> = (0..15).map(|i| 0.2 * i as f64 + 0.05).collect();
        let rep = certify_solution_mapping(&e, 0.0, &v1(0.8), &ts, 1e-3).unwrap();
        assert!(rep.pass, "max fd residual {}", rep.max_fd_residual);
    }

    #[test]
    fn holder_certification() {
        let e = scalar_engine(
            "-1",
            "0.1",
            "0.01*tanh(x1)",
            (0.01, 0.0105, 0.0),
            1.0,
            0.8,
            (0.0, 1.0),
            1e-4,
        );
        let cond = e.conditions();
        assert!(cond.flags.alfa, "alpha_upper = {:?}", cond.alpha_upper);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rep = holder_certify(&e, 0.5, &[1e-2, 1e-3, 1e-4], 4, &mut rng).unwrap();
        assert!(rep.pass);
        assert!(rep.exponent_h > 0.0 && rep.exponent_h < 1.0);
        assert!(rep.coeff_h > 1.0 && rep.coeff_l > 1.0);
    }

    #[test]
    fn engine_rejects_broken_contraction() {
        let sys = LinearSystem::new(
            MatrixExpr::new(1, vec![parse("-1").unwrap()]).unwrap(),
            MatrixExpr::new(1, vec![parse("0").unwrap()]).unwrap(),
            CertifiedBound::analytic(1.0).unwrap(),
            CertifiedBound::analytic(0.0).unwrap(),
            Grid::builtin_family("floor", &[]).unwrap(),
        )
        .unwrap();
        // Lipschitz constants far too large for the budget.
        let f = Nonlinearity::new(
            vec![parse("2*tanh(x1)").unwrap()],
            CertifiedBound::analytic(2.0).unwrap(),
            CertifiedBound::analytic(2.0).unwrap(),
            CertifiedBound::analytic(0.0).unwrap(),
        )
        .unwrap();
        let dicho = DichotomySpec::new(
            DMatrix::from_element(1, 1, 1.0),
            1.0,
            1.0,
            DichotomySource::UserSupplied,
        )
        .unwrap();
        let settings = EngineSettings::defaults(1.0, 1.0);
        assert!(ConjugacyEngine::new(sys, f, dicho, (0.0, 1.0), settings).is_err());
    }
}
