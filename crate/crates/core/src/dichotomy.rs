//! Exponential dichotomies for the linear DEPCAG, in both flavours: the
//! global one on the transition matrix (`||Z_p(t,s)|| <= K e^{-alpha|t-s|}`
//! with `Z_p` projected through the anchor at time zero) and the discrete one
//! on the breakpoint-to-breakpoint difference system. The two notions are
//! independent; verdicts are always reported side by side and never merged.
//!
//! Also home of the piecewise Green kernel and its certified exponential
//! bound `||G(t,s)|| <= K rho* e^{-alpha|t-s|}`, `rho* = rho(A) e^{alpha theta}`.

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linear_flow::{
    assert_condition_c, fundamental_matrix, transition_matrix, ConditionCReport, LinearSystem,
};
use crate::numerics::spectral_norm;
use crate::transition::TransitionTables;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DichotomySource {
    UserSupplied,
    DiscreteSpectral,
}

/// Projection, constant and rate of the global dichotomy.
#[derive(Debug, Clone)]
pub struct DichotomySpec {
    pub p: DMatrix<f64>,
    pub k: f64,
    pub alpha: f64,
    pub source: DichotomySource,
}

const PROJECTION_TOL: f64 = 1e-10;

fn check_projection(p: &DMatrix<f64>) -> Result<()> {
    if !p.is_square() {
        return Err(Error::Domain("projection must be square".into()));
    }
    let defect = spectral_norm(&(p * p - p));
    if defect > PROJECTION_TOL {
        return Err(Error::Domain(format!(
            "not a projection: ||P^2 - P|| = {defect:.3e} > {PROJECTION_TOL:.0e}"
        )));
    }
    Ok(())
}

impl DichotomySpec {
    pub fn new(p: DMatrix<f64>, k: f64, alpha: f64, source: DichotomySource) -> Result<Self> {
        check_projection(&p)?;
        if !(k >= 1.0) {
            return Err(Error::Domain(format!("dichotomy constant K must be >= 1, got {k}")));
        }
        if !(alpha > 0.0) {
            return Err(Error::Domain(format!("dichotomy rate alpha must be > 0, got {alpha}")));
        }
        Ok(DichotomySpec { p, k, alpha, source })
    }

    pub fn with_k(&self, k: f64) -> Result<Self> {
        DichotomySpec::new(self.p.clone(), k, self.alpha, self.source)
    }
}

/// Discrete dichotomy data of the breakpoint difference system.
#[derive(Debug, Clone)]
pub struct DiscreteDichotomy {
    pub p_hat: DMatrix<f64>,
    pub k_hat: f64,
    pub r: f64,
    /// The worst sampled ratio sits at the largest available separation,
    /// which suggests `r` does not actually dominate the decay.
    pub edge_dominated: bool,
}

/// Linear system plus dichotomy data and the derived Green-bound constant.
pub struct GreenContext {
    pub sys: LinearSystem,
    pub dicho: DichotomySpec,
    pub rho_a: f64,
    pub rho_star: f64,
    pub condition_c: ConditionCReport,
    pub window: (i64, i64),
    pub(crate) tables: TransitionTables,
}

impl GreenContext {
    /// Verifies condition (C) over the window covering `[lo, hi]`, builds the
    /// transition tables and fixes `rho* = rho(A) e^{alpha theta}`.
    pub fn new(sys: LinearSystem, dicho: DichotomySpec, span: (f64, f64)) -> Result<Self> {
        Self::with_nodes(sys, dicho, span, &[])
    }

    /// Same, with extra stored pass nodes for table-driven quadrature.
    pub fn with_nodes(
        sys: LinearSystem,
        dicho: DichotomySpec,
        span: (f64, f64),
        extra_nodes: &[f64],
    ) -> Result<Self> {
        if dicho.p.nrows() != sys.dim {
            return Err(Error::Domain(format!(
                "projection is {}x{0} but the system dimension is {}",
                dicho.p.nrows(),
                sys.dim
            )));
        }
        let window = sys.grid.interval_range(span.0, span.1)?;
        let condition_c = assert_condition_c(&sys, window)?;
        let tables = TransitionTables::build(&sys, window, extra_nodes)?;
        let rho_a = condition_c.rho_a;
        let rho_star = rho_a * (dicho.alpha * sys.grid.theta()).exp();
        Ok(GreenContext { sys, dicho, rho_a, rho_star, condition_c, window, tables })
    }

    /// Rebuilds the context with a different certified constant `K`
    /// (projection, rate and tables are unchanged).
    pub fn with_k(self, k: f64) -> Result<Self> {
        let dicho = self.dicho.with_k(k)?;
        Ok(GreenContext { dicho, ..self })
    }

    pub fn tables(&self) -> &TransitionTables {
        &self.tables
    }

    /// `Z(t, 0)` through the cached breakpoint products.
    pub fn z_to_zero(&self, t: f64) -> Result<DMatrix<f64>> {
        self.tables.z_to_zero(&self.sys, t)
    }

    /// `Z(0, s)`.
    pub fn z_from_zero(&self, s: f64) -> Result<DMatrix<f64>> {
        self.tables.z_from_zero(&self.sys, s)
    }

    /// Projected transition operator: `Z(t,0) P Z(0,s)` for `t >= s` and
    /// `-Z(t,0) (I - P) Z(0,s)` for `s > t`.
    pub fn zp(&self, t: f64, s: f64) -> Result<DMatrix<f64>> {
        let zt = self.z_to_zero(t)?;
        let zs = self.z_from_zero(s)?;
        Ok(self.zp_from_parts(&zt, &zs, t >= s))
    }

    pub(crate) fn zp_from_parts(
        &self,
        zt: &DMatrix<f64>,
        zs: &DMatrix<f64>,
        t_ge_s: bool,
    ) -> DMatrix<f64> {
        let n = self.sys.dim;
        if t_ge_s {
            zt * &self.dicho.p * zs
        } else {
            -(zt * (DMatrix::identity(n, n) - &self.dicho.p) * zs)
        }
    }

    /// The piecewise Green kernel. Branch anchors depend on where `s` falls
    /// relative to its interval's frozen point and on whether `t` lies left
    /// or right of its own frozen point.
    pub fn green(&self, t: f64, s: f64) -> Result<DMatrix<f64>> {
        let grid = &self.sys.grid;
        let j = grid.interval_index(t)?;
        let r = grid.interval_index(s)?;
        let zeta_j = grid.zeta_at(j)?;
        let n = self.sys.dim;

        if r == j {
            if t > zeta_j {
                // advanced part of the interval already passed
                if s < zeta_j {
                    let anchor = grid.t_at(j)?;
                    return Ok(self.zp(t, anchor)? * fundamental_matrix(&self.sys, anchor, s)?);
                }
                if s < t {
                    return fundamental_matrix(&self.sys, t, s);
                }
                return Ok(DMatrix::zeros(n, n));
            }
            // t in [t_j, zeta_j]
            if s < t {
                return Ok(DMatrix::zeros(n, n));
            }
            if s < zeta_j {
                return Ok(-fundamental_matrix(&self.sys, t, s)?);
            }
            let anchor = grid.t_at(j + 1)?;
            return Ok(self.zp(t, anchor)? * fundamental_matrix(&self.sys, anchor, s)?);
        }

        let zeta_r = grid.zeta_at(r)?;
        let anchor = if s < zeta_r { grid.t_at(r)? } else { grid.t_at(r + 1)? };
        Ok(self.zp(t, anchor)? * fundamental_matrix(&self.sys, anchor, s)?)
    }
}

/// Outcome of sampling the dichotomy inequality over a window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ed1Report {
    pub window: (i64, i64),
    pub samples_per_interval: usize,
    pub k: f64,
    pub alpha: f64,
    /// Largest sampled `||Z_p(t,s)|| e^{alpha |t-s|}`.
    pub worst_ratio: f64,
    pub worst_at: (f64, f64),
    pub pass: bool,
}

/// Samples `(t, s)` pairs over the window and compares the worst ratio
/// against the certified constant.
pub fn verify_ed1(
    ctx: &GreenContext,
    window: (i64, i64),
    samples_per_interval: usize,
) -> Result<Ed1Report> {
    if samples_per_interval < 4 {
        return Err(Error::Domain(format!(
            "verify_ed1 needs at least 4 samples per interval, got {samples_per_interval}"
        )));
    }
    let grid = &ctx.sys.grid;
    let mut points = Vec::new();
    for k in window.0..=window.1 {
        let (a, b) = (grid.t_at(k)?, grid.t_at(k + 1)?);
        for m in 0..samples_per_interval {
            points.push(a + (b - a) * m as f64 / samples_per_interval as f64);
        }
    }
    let mut zt = Vec::with_capacity(points.len());
    let mut zs = Vec::with_capacity(points.len());
    for &u in &points {
        zt.push(ctx.z_to_zero(u)?);
        zs.push(ctx.z_from_zero(u)?);
    }
    let alpha = ctx.dicho.alpha;
    let mut worst = f64::NEG_INFINITY;
    let mut worst_at = (points[0], points[0]);
    for (it, &t) in points.iter().enumerate() {
        for (is, &s) in points.iter().enumerate() {
            let zp = ctx.zp_from_parts(&zt[it], &zs[is], t >= s);
            let ratio = spectral_norm(&zp) * (alpha * (t - s).abs()).exp();
            if ratio > worst {
                worst = ratio;
                worst_at = (t, s);
            }
        }
    }
    Ok(Ed1Report {
        window,
        samples_per_interval,
        k: ctx.dicho.k,
        alpha,
        worst_ratio: worst,
        worst_at,
        pass: worst <= ctx.dicho.k * (1.0 + 1e-6),
    })
}

/// One-step matrices `Z(t_{n+1}, t_n)` of the breakpoint difference system.
pub fn discrete_reduction(sys: &LinearSystem, window: (i64, i64)) -> Result<Vec<DMatrix<f64>>> {
    assert_condition_c(sys, window)?;
    let mut out = Vec::with_capacity((window.1 - window.0 + 1) as usize);
    for n in window.0..=window.1 {
        out.push(transition_matrix(sys, sys.grid.t_at(n + 1)?, sys.grid.t_at(n)?)?);
    }
    Ok(out)
}

const UNIT_CIRCLE_TOL: f64 = 1e-9;

/// Spectral splitting for a constant-coefficient reduction: all matrices must
/// coincide; the projection onto the `|lambda| < 1` eigenspace is computed by
/// a contour integral of the resolvent over the unit circle.
pub fn find_discrete_dichotomy(mats: &[DMatrix<f64>]) -> Result<DiscreteDichotomy> {
    let b = constant_matrix(mats)?;
    let n = b.nrows();
    let eigs = b.complex_eigenvalues();
    let mut r_sharp = 0.0f64;
    let mut any_inside = false;
    let mut any_outside = false;
    for lam in eigs.iter() {
        let m = lam.norm();
        if (m - 1.0).abs() < UNIT_CIRCLE_TOL {
            return Err(Error::NoDichotomy { modulus: m });
        }
        if m < 1.0 {
            any_inside = true;
            r_sharp = r_sharp.max(m);
        } else {
            any_outside = true;
            r_sharp = r_sharp.max(1.0 / m);
        }
    }
    let mut r = r_sharp * 1.01;
    if r >= 1.0 {
        r = 0.5 * (r_sharp + 1.0);
    }

    let p_hat = if !any_outside {
        DMatrix::identity(n, n)
    } else if !any_inside {
        DMatrix::zeros(n, n)
    } else {
        riesz_projection(&b)?
    };
    check_projection(&p_hat)?;

    let b_inv = crate::numerics::checked_inverse(&b)?;
    let complement = DMatrix::identity(n, n) - &p_hat;
    // B commutes with its own spectral projection, so B^d P = (P B)^d P; the
    // re-projection after every multiply keeps rounding noise from leaking
    // into the opposite (exponentially amplified) subspace.
    let mut k_hat = 1.0f64;
    let mut fwd = p_hat.clone();
    let mut bwd = complement.clone();
    let mut rd = 1.0;
    for _ in 0..=50 {
        k_hat = k_hat.max(spectral_norm(&fwd) / rd);
        k_hat = k_hat.max(spectral_norm(&bwd) / rd);
        fwd = &p_hat * (&b * fwd);
        bwd = &complement * (&b_inv * bwd);
        rd *= r;
    }
    Ok(DiscreteDichotomy { p_hat, k_hat, r, edge_dominated: false })
}

/// Verifies a user-supplied projection and rate against a (possibly
/// non-constant) reduction, reporting the minimal constant attaining the two
/// dichotomy inequalities over the window.
pub fn verify_discrete_dichotomy(
    mats: &[DMatrix<f64>],
    p_hat: &DMatrix<f64>,
    r: f64,
) -> Result<DiscreteDichotomy> {
    if mats.is_empty() {
        return Err(Error::Domain("empty reduction".into()));
    }
    check_projection(p_hat)?;
    if !(0.0 < r && r < 1.0) {
        return Err(Error::Domain(format!("discrete rate must lie in (0, 1), got {r}")));
    }
    let n = mats[0].nrows();
    let count = mats.len();
    // Cauchy matrices relative to the window start, with inverses accumulated
    // step by step.
    let mut y = vec![DMatrix::identity(n, n)];
    let mut y_inv = vec![DMatrix::identity(n, n)];
    for m in mats {
        y.push(m * y.last().unwrap());
        y_inv.push(y_inv.last().unwrap() * crate::numerics::checked_inverse(m)?);
    }
    let complement = DMatrix::identity(n, n) - p_hat;
    let mut k_hat = 1.0f64;
    let mut worst_sep = 0usize;
    for a in 0..=count {
        for b in 0..=count {
            let sep = a.abs_diff(b);
            let ratio = if a >= b {
                spectral_norm(&(&y[a] * p_hat * &y_inv[b])) / r.powi(sep as i32)
            } else {
                spectral_norm(&(&y[a] * &complement * &y_inv[b])) / r.powi(sep as i32)
            };
            if ratio > k_hat {
                k_hat = ratio;
                worst_sep = sep;
            }
        }
    }
    Ok(DiscreteDichotomy {
        p_hat: p_hat.clone(),
        k_hat,
        r,
        edge_dominated: worst_sep == count && count > 0,
    })
}

fn constant_matrix(mats: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let first = mats.first().ok_or_else(|| Error::Domain("empty reduction".into()))?;
    let scale = 1.0 + spectral_norm(first);
    for m in &mats[1..] {
        if spectral_norm(&(m - first)) > 1e-8 * scale {
            return Err(Error::NonConstantReduction);
        }
    }
    Ok(first.clone())
}

/// Riesz projection `(2 pi i)^{-1} oint (lambda I - B)^{-1} d lambda` over the
/// unit circle, by the trapezoid rule (spectrally accurate for spectra off
/// the circle).
fn riesz_projection(b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = b.nrows();
    let bc = b.map(|v| Complex::new(v, 0.0));
    let quad_points = 256;
    let mut acc = DMatrix::<Complex<f64>>::zeros(n, n);
    for q in 0..quad_points {
        let th = 2.0 * std::f64::consts::PI * q as f64 / quad_points as f64;
        let lam = Complex::new(th.cos(), th.sin());
        let resolvent = (DMatrix::<Complex<f64>>::identity(n, n) * lam - &bc)
            .try_inverse()
            .ok_or(Error::NoDichotomy { modulus: 1.0 })?;
        acc += resolvent * lam;
    }
    Ok(acc.map(|z| z.re / quad_points as f64))
}

/// Conjugates a discrete projection to the time-zero anchor of the global
/// dichotomy: `P = Z(0, t_{n0}) P_hat Z(t_{n0}, 0)`.
pub fn promote_projection(
    sys: &LinearSystem,
    window: (i64, i64),
    dd: &DiscreteDichotomy,
) -> Result<DMatrix<f64>> {
    let tables = TransitionTables::build(sys, window, &[])?;
    let anchor = sys.grid.t_at(tables.n0)?;
    let z0a = tables.z_from_zero(sys, anchor)?;
    let za0 = tables.z_to_zero(sys, anchor)?;
    let p = &z0a * &dd.p_hat * &za0;
    check_projection(&p)?;
    Ok(p)
}

pub(crate) fn mat_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exprlang::parse;
    use crate::grid::Grid;
    use crate::linear_flow::MatrixExpr;
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

    fn scalar_ctx(a: &str, a0: &str, p: f64, k: f64, alpha: f64) -> GreenContext {
        let sys = scalar_system(a, a0);
        let dicho = DichotomySpec::new(
            DMatrix::from_element(1, 1, p),
            k,
            alpha,
            DichotomySource::UserSupplied,
        )
        .unwrap();
        GreenContext::new(sys, dicho, (-8.0, 8.0)).unwrap()
    }

    #[test]
    fn projection_validation() {
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.5]);
        assert!(check_projection(&p).is_err());
        // Oblique projections are fine.
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 0.0]);
        assert!(check_projection(&p).is_ok());
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(check_projection(&p).is_ok());
    }

    #[test]
    fn zp_examples() {
        // stable scalar, P = 1: Z_p(1, 0) = e^{-1}
        let ctx = scalar_ctx("-1", "0", 1.0, 1.0, 1.0);
        assert_relative_eq!(ctx.zp(1.0, 0.0).unwrap()[(0, 0)], (-1.0f64).exp(), epsilon = 1e-8);
        // unstable scalar, P = 0: Z_p(0, 1) = -Z(0,0)(I-P)Z(0,1) = -e^{-1}
        let ctx = scalar_ctx("1", "0", 0.0, 1.0, 1.0);
        assert_relative_eq!(ctx.zp(0.0, 1.0).unwrap()[(0, 0)], -(-1.0f64).exp(), epsilon = 1e-8);
        // P = I and t >= s reduces to the cocycle
        let ctx = scalar_ctx("-1", "0.1", 1.0, 1.0, 0.8);
        let z = transition_matrix(&ctx.sys, 2.5, 0.5).unwrap();
        assert_relative_eq!(ctx.zp(2.5, 0.5).unwrap()[(0, 0)], z[(0, 0)], epsilon = 1e-8);
    }

    #[test]
    fn zp_projected_cocycle() {
        let ctx = scalar_ctx("-1", "0.1", 1.0, 1.0, 0.8);
        // zp(t, u) Z(u, s) = zp(t, s) for t >= u >= s
        let (t, u, s) = (3.2, 1.1, -2.4);
        let lhs = ctx.zp(t, u).unwrap()[(0, 0)]
            * transition_matrix(&ctx.sys, u, s).unwrap()[(0, 0)];
        assert_relative_eq!(lhs, ctx.zp(t, s).unwrap()[(0, 0)], epsilon = 1e-7);
    }

    #[test]
    fn verify_ed1_pass_and_fail() {
        let ctx = scalar_ctx("-1", "0", 1.0, 1.0, 1.0);
        let rep = verify_ed1(&ctx, (-4, 3), 5).unwrap();
        assert!(rep.pass, "worst ratio {}", rep.worst_ratio);
        assert_relative_eq!(rep.worst_ratio, 1.0, epsilon = 1e-6);

        // A rate stronger than the true decay fails.
        let ctx = scalar_ctx("-1", "0", 1.0, 1.0, 1.5);
        let rep = verify_ed1(&ctx, (-4, 3), 5).unwrap();
        assert!(!rep.pass);

        // No hyperbolicity at all: Z = I, ratios grow with |t - s|.
        let ctx = scalar_ctx("0", "0", 1.0, 1.0, 0.5);
        let rep = verify_ed1(&ctx, (-4, 3), 5).unwrap();
        assert!(!rep.pass);
        assert!(rep.worst_ratio > 10.0);
    }

    #[test]
    fn discrete_reduction_closed_forms() {
        let sys = scalar_system("-1", "0");
        let mats = discrete_reduction(&sys, (-3, 2)).unwrap();
        for m in &mats {
            assert_relative_eq!(m[(0, 0)], (-1.0f64).exp(), epsilon = 1e-8);
        }
        let sys = scalar_system("-1", "0.1");
        let mats = discrete_reduction(&sys, (0, 4)).unwrap();
        for m in &mats {
            assert_relative_eq!(m[(0, 0)], 0.4310914971, epsilon = 1e-6);
        }
    }

    #[test]
    fn find_discrete_dichotomy_scalar() {
        let mats = vec![DMatrix::from_element(1, 1, 0.431091); 6];
        let dd = find_discrete_dichotomy(&mats).unwrap();
        assert_relative_eq!(dd.p_hat[(0, 0)], 1.0, epsilon = 1e-10);
        assert_relative_eq!(dd.r, 0.431091 * 1.01, epsilon = 1e-9);
        assert!(dd.r <= 0.44);
        assert_relative_eq!(dd.k_hat, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn find_discrete_dichotomy_saddle() {
        let b = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 2.0]);
        let dd = find_discrete_dichotomy(&[b.clone(), b]).unwrap();
        assert_relative_eq!(dd.p_hat[(0, 0)], 1.0, epsilon = 1e-8);
        assert_relative_eq!(dd.p_hat[(1, 1)], 0.0, epsilon = 1e-8);
        assert_relative_eq!(dd.p_hat[(0, 1)], 0.0, epsilon = 1e-8);
        assert_relative_eq!(dd.r, 0.505, epsilon = 1e-9);
        assert_relative_eq!(dd.k_hat, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn find_discrete_dichotomy_projection_commutes() {
        let b = DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.0, 4.0]);
        let dd = find_discrete_dichotomy(&[b.clone()]).unwrap();
        let comm = &b * &dd.p_hat - &dd.p_hat * &b;
        assert!(spectral_norm(&comm) < 1e-8);
    }

    #[test]
    fn unit_circle_eigenvalue_is_rejected() {
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.5]);
        assert!(matches!(
            find_discrete_dichotomy(&[b]),
            Err(Error::NoDichotomy { .. })
        ));
    }

    #[test]
    fn non_constant_reduction_requires_explicit_data() {
        let mats = vec![
            DMatrix::from_element(1, 1, 0.3),
            DMatrix::from_element(1, 1, 0.5),
        ];
        assert!(matches!(
            find_discrete_dichotomy(&mats),
            Err(Error::NonConstantReduction)
        ));
        let dd =
            verify_discrete_dichotomy(&mats, &DMatrix::from_element(1, 1, 1.0), 0.6).unwrap();
        assert!(dd.k_hat >= 1.0 && !dd.edge_dominated);
    }

    #[test]
    fn green_branch_examples() {
        // Zero branch: s just above t inside t's interval.
        let ctx = scalar_ctx("-1", "0", 1.0, 1.0, 1.0);
        let g = ctx.green(2.5, 2.7).unwrap();
        assert_relative_eq!(g[(0, 0)], 0.0);
        // Closed-form composition: G(2.5, 0.5) = Z_p(2.5, 1) Phi(1, 0.5) = e^{-2}.
        let g = ctx.green(2.5, 0.5).unwrap();
        assert_relative_eq!(g[(0, 0)], (-2.0f64).exp(), epsilon = 1e-7);
    }

    #[test]
    fn green_advanced_branch_sign() {
        // On a grid with interior zeta, t in [t_j, zeta_j) and s in [t, zeta_j)
        // picks -Phi(t, s).
        let sys = LinearSystem::new(
            MatrixExpr::new(1, vec![parse("-1").unwrap()]).unwrap(),
            MatrixExpr::new(1, vec![parse("0").unwrap()]).unwrap(),
            CertifiedBound::analytic(1.0).unwrap(),
            CertifiedBound::analytic(0.0).unwrap(),
            Grid::builtin_family("floor_half", &[]).unwrap(),
        )
        .unwrap();
        let dicho = DichotomySpec::new(
            DMatrix::from_element(1, 1, 1.0),
            1.0,
            1.0,
            DichotomySource::UserSupplied,
        )
        .unwrap();
        let ctx = GreenContext::new(sys, dicho, (-6.0, 6.0)).unwrap();
        let (t, s) = (2.1, 2.3); // both in [2, 2.5), s in [t, zeta)
        let g = ctx.green(t, s).unwrap();
        let phi = fundamental_matrix(&ctx.sys, t, s).unwrap();
        assert_relative_eq!(g[(0, 0)], -phi[(0, 0)], epsilon = 1e-10);
        // and s in [t_j, t) gives zero
        assert_relative_eq!(ctx.green(2.3, 2.1).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn green_exponential_bound() {
        let ctx = scalar_ctx("-1", "0.1", 1.0, 1.1, 0.8);
        let bound = ctx.dicho.k * ctx.rho_star;
        for i in -12..12 {
            for j in -12..12 {
                let (t, s) = (0.62 * i as f64, 0.62 * j as f64);
                let g = ctx.green(t, s).unwrap()[(0, 0)].abs();
                let cap = bound * (-ctx.dicho.alpha * (t - s).abs()).exp();
                assert!(g <= cap * (1.0 + 1e-6), "|G({t},{s})| = {g} > {cap}");
            }
        }
    }

    #[test]
    fn promote_projection_identity_anchor() {
        // Floor grid anchors at t_0 = 0, so the promotion is the identity map.
        let sys = scalar_system("-1", "0.1");
        let dd = find_discrete_dichotomy(&discrete_reduction(&sys, (-3, 3)).unwrap()).unwrap();
        let p = promote_projection(&sys, (-3, 3), &dd).unwrap();
        assert_relative_eq!(p[(0, 0)], 1.0, epsilon = 1e-10);
    }
}
