//! Initial value problems for the linear and quasilinear DEPCAG, the scalar
//! conditions of the equivalence theorems, the hybrid Gronwall bound and
//! continuity envelopes with respect to initial data.
//!
//! Inside one interval the frozen value `x(zeta_i)` enters the right-hand
//! side. When `zeta_i` lies ahead of the integration front the interval is
//! solved by a fixed-point sub-iteration on that frozen vector; the smallness
//! condition `v < 1` is exactly the contraction budget that makes it
//! converge.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dichotomy::DichotomySpec;
use crate::error::{Error, Result};
use crate::exprlang::{EvalEnv, Expr, Var};
use crate::grid::Grid;
use crate::linear_flow::{check_condition_c, LinearSystem};
use crate::numerics::simpson_scalar;
use crate::CertifiedBound;

/// Bounded Lipschitz perturbation `f(t, x, y)` with certified constants.
#[derive(Debug, Clone)]
pub struct Nonlinearity {
    components: Vec<Expr>,
    pub mu: CertifiedBound,
    pub ell1: CertifiedBound,
    pub ell2: CertifiedBound,
}

impl Nonlinearity {
    pub fn new(
        components: Vec<Expr>,
        mu: CertifiedBound,
        ell1: CertifiedBound,
        ell2: CertifiedBound,
    ) -> Result<Self> {
        let n = components.len();
        if n == 0 {
            return Err(Error::Domain("a nonlinearity needs at least one component".into()));
        }
        for c in &components {
            for v in c.free_vars() {
                let bad = match v {
                    Var::T => false,
                    Var::X(i) | Var::Y(i) => i >= n,
                };
                if bad {
                    return Err(Error::Domain(format!(
                        "component `{c}` uses {v} but the state dimension is {n}"
                    )));
                }
            }
        }
        Ok(Nonlinearity { components, mu, ell1, ell2 })
    }

    /// The zero perturbation (all certified constants vanish).
    pub fn zero(n: usize) -> Nonlinearity {
        Nonlinearity {
            components: vec![Expr::Const(0.0); n],
            mu: CertifiedBound::analytic(0.0).unwrap(),
            ell1: CertifiedBound::analytic(0.0).unwrap(),
            ell2: CertifiedBound::analytic(0.0).unwrap(),
        }
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[Expr] {
        &self.components
    }

    pub fn eval(&self, t: f64, x: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        let env = EvalEnv { t, x: x.as_slice(), y: y.as_slice() };
        let mut out = DVector::zeros(self.components.len());
        for (i, c) in self.components.iter().enumerate() {
            out[i] = c.eval(&env)?;
        }
        Ok(out)
    }
}

/// `(e^x - 1) / x`, continuously extended by 1 at zero.
fn phi_ratio(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        x.exp_m1() / x
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConditionFlags {
    /// `2 (l1 + l2) K rho* < alpha`
    pub fpt: bool,
    /// `v < 1`
    pub schema0: bool,
    /// `v~ < 1`
    pub schema0b: bool,
    /// `alpha < min(p1, p2)`
    pub alfa: bool,
    /// `2 (l1 + l2) K e^{alpha theta} < alpha` (A = 0 variant)
    pub fpt_cor2: bool,
    /// `alpha < min(p1~, p2~)` (A = 0 variant)
    pub alfa_cor2: bool,
}

/// Every scalar constant of the equivalence theorems, computed from certified
/// bounds. `None` marks quantities undefined because a smallness condition
/// failed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoremConditions {
    pub theta: f64,
    pub m: f64,
    pub m0: f64,
    pub mu: f64,
    pub ell1: f64,
    pub ell2: f64,
    pub k: f64,
    pub alpha: f64,
    pub rho_a: f64,
    pub rho_star: f64,
    pub f1_theta: f64,
    pub f0_theta: f64,
    pub v: f64,
    pub v_tilde: f64,
    pub fpt_lhs: f64,
    pub p1: Option<f64>,
    pub p2: Option<f64>,
    pub alpha_upper: Option<f64>,
    pub gamma_star: f64,
    // A = 0 variants.
    pub v0_tilde: f64,
    pub u0_tilde: f64,
    pub p1_tilde: Option<f64>,
    pub p2_tilde: Option<f64>,
    pub fpt_cor2_lhs: f64,
    pub flags: ConditionFlags,
}

/// Evaluates all theorem conditions; `rho_a` comes from condition (C) over
/// the given interval window.
pub fn evaluate_conditions(
    sys: &LinearSystem,
    f: &Nonlinearity,
    dicho: &DichotomySpec,
    window: (i64, i64),
) -> Result<TheoremConditions> {
    let rho_a = check_condition_c(sys, window)?.rho_a;
    let theta = sys.grid.theta();
    let (m, m0) = (sys.m.value, sys.m0.value);
    let (mu, ell1, ell2) = (f.mu.value, f.ell1.value, f.ell2.value);
    let (k, alpha) = (dicho.k, dicho.alpha);
    let rho_star = rho_a * (alpha * theta).exp();

    let eta1 = m + ell1;
    let eta2 = m0 + ell2;
    let f1_theta = phi_ratio(eta1 * theta);
    let f0_theta = phi_ratio(m * theta);
    let v = f1_theta * eta2 * theta;
    let v_tilde = f0_theta * m0 * theta;
    let p1 = (v < 1.0).then(|| eta1 + eta2 * (eta1 * theta).exp() / (1.0 - v));
    let p2 = (v_tilde < 1.0).then(|| m + m0 * (m * theta).exp() / (1.0 - v_tilde));
    let alpha_upper = p1.zip(p2).map(|(a, b)| a.min(b));
    let fpt_lhs = 2.0 * (ell1 + ell2) * k * rho_star;
    let gamma_star = fpt_lhs / alpha;

    let v0_tilde = phi_ratio(ell1 * theta) * eta2 * theta;
    let u0_tilde = eta2 * theta;
    let p1_tilde = (v0_tilde < 1.0).then(|| ell1 + eta2 * (ell1 * theta).exp() / (1.0 - v0_tilde));
    let p2_tilde = (u0_tilde < 1.0).then(|| m0 / (1.0 - u0_tilde));
    let fpt_cor2_lhs = 2.0 * (ell1 + ell2) * k * (alpha * theta).exp();

    let flags = ConditionFlags {
        fpt: fpt_lhs < alpha,
        schema0: v < 1.0,
        schema0b: v_tilde < 1.0,
        alfa: alpha_upper.is_some_and(|u| alpha < u),
        fpt_cor2: fpt_cor2_lhs < alpha,
        alfa_cor2: p1_tilde.zip(p2_tilde).is_some_and(|(a, b)| alpha < a.min(b)),
    };
    Ok(TheoremConditions {
        theta,
        m,
        m0,
        mu,
        ell1,
        ell2,
        k,
        alpha,
        rho_a,
        rho_star,
        f1_theta,
        f0_theta,
        v,
        v_tilde,
        fpt_lhs,
        p1,
        p2,
        alpha_upper,
        gamma_star,
        v0_tilde,
        u0_tilde,
        p1_tilde,
        p2_tilde,
        fpt_cor2_lhs,
        flags,
    })
}

#[derive(Debug, Clone)]
struct TrajNode {
    t: f64,
    x: DVector<f64>,
    dx: DVector<f64>,
}

/// A continuous trajectory sampled on the integration mesh. Breakpoints carry
/// two nodes (left and right limits of the derivative); evaluation between
/// nodes is cubic Hermite.
#[derive(Debug, Clone)]
pub struct Trajectory {
    nodes: Vec<TrajNode>,
}

impl Trajectory {
    pub fn span(&self) -> (f64, f64) {
        (self.nodes[0].t, self.nodes[self.nodes.len() - 1].t)
    }

    pub fn samples(&self) -> impl Iterator<Item = (f64, &DVector<f64>)> {
        self.nodes.iter().map(|n| (n.t, &n.x))
    }

    pub fn eval(&self, t: f64) -> Result<DVector<f64>> {
        let (lo, hi) = self.span();
        if t < lo - 1e-9 || t > hi + 1e-9 {
            return Err(Error::OutOfWindow { t });
        }
        let pos = self.nodes.partition_point(|n| n.t <= t);
        if pos == 0 {
            return Ok(self.nodes[0].x.clone());
        }
        if pos == self.nodes.len() {
            return Ok(self.nodes[pos - 1].x.clone());
        }
        let (a, b) = (&self.nodes[pos - 1], &self.nodes[pos]);
        let h = b.t - a.t;
        if h <= 0.0 {
            return Ok(b.x.clone());
        }
        let s = (t - a.t) / h;
        let (s2, s3) = (s * s, s * s * s);
        Ok(&a.x * (2.0 * s3 - 3.0 * s2 + 1.0)
            + &a.dx * ((s3 - 2.0 * s2 + s) * h)
            + &b.x * (-2.0 * s3 + 3.0 * s2)
            + &b.dx * ((s3 - s2) * h))
    }
}

const SUB_ITERATION_TOL: f64 = 1e-12;
const SUB_ITERATION_CAP: usize = 100;

/// Sub-iteration state for one interval: solves the interval IVP anchored at
/// `(anchor_t, anchor_x)` (any point of the closed interval) and returns mesh
/// nodes covering the whole interval.
fn solve_interval(
    sys: &LinearSystem,
    f: Option<&Nonlinearity>,
    k: i64,
    anchor_t: f64,
    anchor_x: &DVector<f64>,
) -> Result<Vec<TrajNode>> {
    let grid = &sys.grid;
    let (t_l, t_r, zeta) = (grid.t_at(k)?, grid.t_at(k + 1)?, grid.zeta_at(k)?);
    let h = sys.ode_step();

    let mesh = |a: f64, b: f64| -> Vec<f64> {
        // strictly monotone node list from a to b including zeta
        let mut v = vec![a];
        let n = ((b - a).abs() / h).ceil().max(1.0) as usize;
        for i in 1..=n {
            v.push(a + (b - a) * i as f64 / n as f64);
        }
        if (zeta - a.min(b)) > 1e-13 && (a.max(b) - zeta) > 1e-13 {
            v.push(zeta);
            v.sort_by(|p, q| p.partial_cmp(q).unwrap());
            if a > b {
                v.reverse();
            }
            v.dedup_by(|p, q| (*p - *q).abs() < 1e-13);
        }
        v
    };
    let fwd_mesh = mesh(anchor_t, t_r);
    let bwd_mesh = mesh(anchor_t, t_l);

    let rhs = |t: f64, x: &DVector<f64>, c: &DVector<f64>| -> Result<DVector<f64>> {
        let mut dx = sys.a.eval(t)? * x + sys.a0.eval(t)? * c;
        if let Some(nl) = f {
            dx += nl.eval(t, x, c)?;
        }
        Ok(dx)
    };

    // Fixed point on the frozen vector c = x(zeta). The tolerance is
    // relative to the state magnitude; trajectories grow exponentially on
    // long backward spans and an absolute cutoff would be unreachable there.
    let mut c = anchor_x.clone();
    let mut fwd_vals: Vec<DVector<f64>> = Vec::new();
    let mut bwd_vals: Vec<DVector<f64>> = Vec::new();
    let mut converged = false;
    let mut last_delta = f64::INFINITY;
    for _ in 0..SUB_ITERATION_CAP {
        let march = |nodes: &[f64], c: &DVector<f64>| -> Result<Vec<DVector<f64>>> {
            let mut vals = vec![anchor_x.clone()];
            for w in nodes.windows(2) {
                let x = vals.last().unwrap().clone();
                vals.push(crate::numerics::integrate_vector(
                    |t, x| rhs(t, x, c),
                    w[0],
                    w[1],
                    x,
                    h,
                )?);
            }
            Ok(vals)
        };
        fwd_vals = march(&fwd_mesh, &c)?;
        bwd_vals = march(&bwd_mesh, &c)?;
        let at_zeta = value_at(&fwd_mesh, &fwd_vals, &bwd_mesh, &bwd_vals, zeta)?;
        last_delta = (&at_zeta - &c).norm();
        let scale = 1.0 + c.norm().max(anchor_x.norm());
        c = at_zeta;
        if last_delta < SUB_ITERATION_TOL * scale {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SubIteration { interval: k, delta: last_delta });
    }

    // Assemble ascending nodes over [t_l, t_r] with derivatives under the
    // converged frozen vector.
    let mut nodes = Vec::with_capacity(fwd_mesh.len() + bwd_mesh.len());
    for (t, x) in bwd_mesh.iter().zip(&bwd_vals).skip(1).rev() {
        nodes.push(TrajNode { t: *t, x: x.clone(), dx: rhs(*t, x, &c)? });
    }
    for (t, x) in fwd_mesh.iter().zip(&fwd_vals) {
        nodes.push(TrajNode { t: *t, x: x.clone(), dx: rhs(*t, x, &c)? });
    }
    Ok(nodes)
}

fn value_at(
    fwd_mesh: &[f64],
    fwd_vals: &[DVector<f64>],
    bwd_mesh: &[f64],
    bwd_vals: &[DVector<f64>],
    t: f64,
) -> Result<DVector<f64>> {
    for (u, v) in fwd_mesh.iter().zip(fwd_vals) {
        if (u - t).abs() < 1e-12 {
            return Ok(v.clone());
        }
    }
    for (u, v) in bwd_mesh.iter().zip(bwd_vals) {
        if (u - t).abs() < 1e-12 {
            return Ok(v.clone());
        }
    }
    Err(Error::Domain(format!("frozen point {t} missing from interval mesh")))
}

/// Integrates the DEPCAG initial value problem from `(tau, xi)` until
/// `t_end` (either direction).
pub fn integrate_depcag(
    sys: &LinearSystem,
    f: Option<&Nonlinearity>,
    tau: f64,
    xi: &DVector<f64>,
    t_end: f64,
) -> Result<Trajectory> {
    integrate_span(sys, f, tau, xi, tau.min(t_end), tau.max(t_end))
}

/// Integrates from `(tau, xi)` over the whole span `[lo, hi]` containing
/// `tau`, continuing interval by interval in both directions.
pub fn integrate_span(
    sys: &LinearSystem,
    f: Option<&Nonlinearity>,
    tau: f64,
    xi: &DVector<f64>,
    lo: f64,
    hi: f64,
) -> Result<Trajectory> {
    if !(lo <= tau && tau <= hi) {
        return Err(Error::Domain(format!(
            "anchor tau = {tau} must lie inside the requested span [{lo}, {hi}]"
        )));
    }
    if xi.len() != sys.dim {
        return Err(Error::Domain(format!(
            "initial value has dimension {}, system has {}",
            xi.len(),
            sys.dim
        )));
    }
    let grid = &sys.grid;
    let (k_lo, k_hi) = grid.interval_range(lo, hi)?;
    let k0 = grid.interval_index(tau)?;

    let mut per_interval: Vec<Vec<TrajNode>> = Vec::new();
    let first = solve_interval(sys, f, k0, tau, xi)?;
    per_interval.push(first);

    // march right
    for k in (k0 + 1)..=k_hi {
        let prev = per_interval.last().unwrap();
        let entry = prev.last().unwrap().x.clone();
        per_interval.push(solve_interval(sys, f, k, grid.t_at(k)?, &entry)?);
    }
    // march left
    let mut left: Vec<Vec<TrajNode>> = Vec::new();
    for k in (k_lo..k0).rev() {
        let prev_first = left
            .last()
            .map(|seg: &Vec<TrajNode>| seg.first().unwrap().x.clone())
            .unwrap_or_else(|| per_interval[0].first().unwrap().x.clone());
        left.push(solve_interval(sys, f, k, grid.t_at(k + 1)?, &prev_first)?);
    }

    let mut nodes = Vec::new();
    for seg in left.into_iter().rev().chain(per_interval) {
        nodes.extend(seg);
    }
    // Adjacent intervals both carry the shared breakpoint; keep both copies
    // (left and right derivative) but drop exact value duplicates in t order.
    nodes.sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap());
    Ok(Trajectory { nodes })
}

/// Hybrid Gronwall envelope data.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GronwallBound {
    /// `sup_i int_{t_i}^{zeta_i} eta2(s) e^{int_s^{zeta_i} eta1} ds`, must be < 1.
    pub w: f64,
    pub bound: f64,
}

/// The DEPCAG Gronwall bound
/// `C exp(int_tau^t eta1 + (1 - w)^{-1} int_tau^t eta2(s) e^{int_{t_i(s)}^{gamma(s)} eta1} ds)`.
pub fn gronwall_bound(
    eta1: &dyn Fn(f64) -> f64,
    eta2: &dyn Fn(f64) -> f64,
    c: f64,
    grid: &Grid,
    tau: f64,
    t: f64,
) -> Result<GronwallBound> {
    if t < tau {
        return Err(Error::Domain("the Gronwall bound runs forward: t >= tau".into()));
    }
    let (k_lo, k_hi) = grid.interval_range(tau, t)?;
    let h = (grid.theta() / 50.0).min(0.02);

    let mut w = 0.0f64;
    let mut gamma_factor = Vec::new(); // e^{int_{t_k}^{zeta_k} eta1} per interval
    for k in k_lo..=k_hi {
        let (a, z) = (grid.t_at(k)?, grid.zeta_at(k)?);
        let inner = |s: f64| simpson_scalar(eta1, s, z, h);
        w = w.max(simpson_scalar(|s| eta2(s) * inner(s).exp(), a, z, h));
        gamma_factor.push(simpson_scalar(eta1, a, z, h).exp());
    }
    if w >= 1.0 {
        return Err(Error::GronwallInapplicable { w });
    }

    let mut exponent = simpson_scalar(eta1, tau, t, h);
    for k in k_lo..=k_hi {
        let (a, b) = (grid.t_at(k)?.max(tau), grid.t_at(k + 1)?.min(t));
        if b <= a {
            continue;
        }
        let factor = gamma_factor[(k - k_lo) as usize];
        exponent += simpson_scalar(|s| eta2(s) * factor, a, b, h) / (1.0 - w);
    }
    Ok(GronwallBound { w, bound: c * exponent.exp() })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvelopeRow {
    pub delta_in: f64,
    pub delta_out: f64,
    pub envelope: f64,
    /// `envelope - delta_out`; nonnegative when the bound holds.
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvelopeReport {
    pub p: f64,
    pub tau: f64,
    pub t: f64,
    pub rows: Vec<EnvelopeRow>,
    pub pass: bool,
}

/// Integrates trajectory pairs and checks
/// `|x(t,tau,xi') - x(t,tau,xi)| <= |xi - xi'| e^{p |t - tau|}` with the
/// caller-selected envelope exponent.
pub fn continuity_envelope_check(
    sys: &LinearSystem,
    f: Option<&Nonlinearity>,
    pairs: &[(DVector<f64>, DVector<f64>)],
    tau: f64,
    t: f64,
    p: f64,
) -> Result<EnvelopeReport> {
    let mut rows = Vec::with_capacity(pairs.len());
    for (xi, xi2) in pairs {
        let a = integrate_depcag(sys, f, tau, xi, t)?.eval(t)?;
        let b = integrate_depcag(sys, f, tau, xi2, t)?.eval(t)?;
        let delta_in = (xi - xi2).norm();
        let delta_out = (a - b).norm();
        let envelope = delta_in * (p * (t - tau).abs()).exp();
        let pass = delta_out <= envelope * (1.0 + 1e-9) + 1e-12;
        rows.push(EnvelopeRow { delta_in, delta_out, envelope, margin: envelope - delta_out, pass });
    }
    let pass = rows.iter().all(|r| r.pass);
    Ok(EnvelopeReport { p, tau, t, rows, pass })
}
