//! The deviation-argument structure: breakpoint sequence `{t_i}`, frozen
//! argument values `{zeta_i}` and the step function `gamma(t) = zeta_{i(t)}`
//! for `t` in `[t_i, t_{i+1})`.
//!
//! Built-in families extend to every integer index by an affine formula;
//! explicit windows store a finite slice and reject queries outside it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Built-in grids. Each row is `t_k = stride * k + offset`,
/// `zeta_k = t_k + zeta_shift`, with `0 <= zeta_shift <= stride` so that
/// `t_k <= zeta_k <= t_{k+1}` holds for every index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineFamily {
    pub name: String,
    pub stride: f64,
    pub offset: f64,
    pub zeta_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GridKind {
    BuiltinFamily(AffineFamily),
    ExplicitWindow {
        t: Vec<f64>,
        zeta: Vec<f64>,
        first_index: i64,
    },
}

/// Immutable after construction; interval membership is half-open
/// `[t_i, t_{i+1})`, ties at `t_{i+1}` belong to the next interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    kind: GridKind,
    theta: f64,
}

impl Grid {
    /// Builds one of the named families. `params` is family specific:
    /// `floor_minus_j`/`floor_plus_j` take `[j]`, `alpha_h` takes
    /// `[alpha, h]`, `m_j` takes `[m, j]`; the rest take none.
    pub fn builtin_family(name: &str, params: &[f64]) -> Result<Grid> {
        let fam = |stride: f64, offset: f64, zeta_shift: f64| AffineFamily {
            name: name.to_string(),
            stride,
            offset,
            zeta_shift,
        };
        let family = match name {
            "floor" => {
                expect_params(name, params, 0)?;
                fam(1.0, 0.0, 0.0)
            }
            "floor_minus_j" => {
                expect_params(name, params, 1)?;
                let j = params[0];
                if j != 0.0 {
                    return Err(Error::GridParams(format!(
                        "floor_minus_j requires j = 0: with j = {j} the frozen value zeta_k = k - j \
                         leaves [t_k, t_{{k+1}}] and (B1) fails"
                    )));
                }
                fam(1.0, 0.0, -j)
            }
            "floor_plus_j" => {
                expect_params(name, params, 1)?;
                let j = params[0];
                if !(0.0..=1.0).contains(&j) {
                    return Err(Error::GridParams(format!(
                        "floor_plus_j requires 0 <= j <= 1 to keep zeta_k = k + j inside \
                         [t_k, t_{{k+1}}] (B1); got j = {j}"
                    )));
                }
                fam(1.0, 0.0, j)
            }
            "floor_half" => {
                expect_params(name, params, 0)?;
                fam(1.0, 0.0, 0.5)
            }
            "even_round" => {
                expect_params(name, params, 0)?;
                fam(2.0, 0.0, 1.0)
            }
            "alpha_h" => {
                expect_params(name, params, 2)?;
                let (alpha, h) = (params[0], params[1]);
                if alpha <= 0.0 || h <= 0.0 {
                    return Err(Error::GridParams(format!(
                        "alpha_h requires alpha > 0 and h > 0; got alpha = {alpha}, h = {h}"
                    )));
                }
                fam(alpha * h, 0.0, 0.0)
            }
            "m_j" => {
                expect_params(name, params, 2)?;
                let (m, j) = (params[0], params[1]);
                if !(m > j && j > 0.0) {
                    return Err(Error::GridParams(format!(
                        "m_j requires m > j > 0; got m = {m}, j = {j}"
                    )));
                }
                fam(m, -j, j)
            }
            other => return Err(Error::UnknownFamily(other.to_string())),
        };
        Ok(Grid {
            theta: family.stride,
            kind: GridKind::BuiltinFamily(family),
        })
    }

    /// Finite slice of the sequences; `first_index` is the index of `t[0]`.
    /// Validates (B1) and strict ordering; `theta` is the largest interval
    /// length in the window.
    pub fn explicit_window(t: Vec<f64>, zeta: Vec<f64>, first_index: i64) -> Result<Grid> {
        if t.len() < 2 {
            return Err(Error::GridParams(
                "an explicit window needs at least two breakpoints".into(),
            ));
        }
        if zeta.len() != t.len() - 1 {
            return Err(Error::GridParams(format!(
                "zeta must have one entry per interval: got {} breakpoints and {} zeta values",
                t.len(),
                zeta.len()
            )));
        }
        let mut theta: f64 = 0.0;
        for i in 0..t.len() - 1 {
            if !(t[i] < t[i + 1]) {
                return Err(Error::GridParams(format!(
                    "breakpoints must be strictly increasing: t[{i}] = {} >= t[{}] = {}",
                    t[i],
                    i + 1,
                    t[i + 1]
                )));
            }
            if !(t[i] <= zeta[i] && zeta[i] <= t[i + 1]) {
                return Err(Error::GridParams(format!(
                    "(B1) violated at interval {i}: zeta = {} outside [{}, {}]",
                    zeta[i],
                    t[i],
                    t[i + 1]
                )));
            }
            theta = theta.max(t[i + 1] - t[i]);
        }
        Ok(Grid {
            kind: GridKind::ExplicitWindow { t, zeta, first_index },
            theta,
        })
    }

    /// Uniform bound on interval lengths (exact for built-in families).
    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn kind(&self) -> &GridKind {
        &self.kind
    }

    /// Breakpoint `t_k`.
    pub fn t_at(&self, k: i64) -> Result<f64> {
        match &self.kind {
            GridKind::BuiltinFamily(f) => Ok(f.stride * k as f64 + f.offset),
            GridKind::ExplicitWindow { t, first_index, .. } => {
                let idx = k - first_index;
                if idx < 0 || idx as usize >= t.len() {
                    return Err(Error::IndexOutOfWindow { k });
                }
                Ok(t[idx as usize])
            }
        }
    }

    /// Frozen argument value `zeta_k` of interval `k`.
    pub fn zeta_at(&self, k: i64) -> Result<f64> {
        match &self.kind {
            GridKind::BuiltinFamily(f) => {
                Ok(f.stride * k as f64 + f.offset + f.zeta_shift)
            }
            GridKind::ExplicitWindow { zeta, first_index, .. } => {
                let idx = k - first_index;
                if idx < 0 || idx as usize >= zeta.len() {
                    return Err(Error::IndexOutOfWindow { k });
                }
                Ok(zeta[idx as usize])
            }
        }
    }

    /// The unique `i` with `t` in `[t_i, t_{i+1})`.
    pub fn interval_index(&self, t: f64) -> Result<i64> {
        if !t.is_finite() {
            return Err(Error::OutOfWindow { t });
        }
        match &self.kind {
            GridKind::BuiltinFamily(f) => {
                let mut k = ((t - f.offset) / f.stride).floor() as i64;
                // Correct floating point wobble against the actual breakpoints.
                while t < self.t_at(k)? {
                    k -= 1;
                }
                while t >= self.t_at(k + 1)? {
                    k += 1;
                }
                Ok(k)
            }
            GridKind::ExplicitWindow { t: ts, first_index, .. } => {
                if t < ts[0] || t >= ts[ts.len() - 1] {
                    return Err(Error::OutOfWindow { t });
                }
                let pos = ts.partition_point(|&b| b <= t);
                Ok(first_index + pos as i64 - 1)
            }
        }
    }

    /// `gamma(t) = zeta_{i(t)}`.
    pub fn gamma(&self, t: f64) -> Result<f64> {
        self.zeta_at(self.interval_index(t)?)
    }

    /// Number of breakpoints strictly inside `(tau, t)`.
    pub fn count_breakpoints(&self, tau: f64, t: f64) -> Result<i64> {
        if tau > t {
            return Err(Error::Domain(format!(
                "count_breakpoints requires tau <= t; got tau = {tau}, t = {t}"
            )));
        }
        match &self.kind {
            GridKind::BuiltinFamily(f) => {
                let mut k_min = ((tau - f.offset) / f.stride).floor() as i64 + 1;
                while self.t_at(k_min)? <= tau {
                    k_min += 1;
                }
                while k_min > i64::MIN + 1 && self.t_at(k_min - 1)? > tau {
                    k_min -= 1;
                }
                let mut k_max = ((t - f.offset) / f.stride).ceil() as i64 - 1;
                while self.t_at(k_max)? >= t {
                    k_max -= 1;
                }
                while self.t_at(k_max + 1)? < t {
                    k_max += 1;
                }
                Ok((k_max - k_min + 1).max(0))
            }
            GridKind::ExplicitWindow { t: ts, .. } => {
                if tau < ts[0] || t > ts[ts.len() - 1] {
                    return Err(Error::OutOfWindow { t: if tau < ts[0] { tau } else { t } });
                }
                let lo = ts.partition_point(|&b| b <= tau);
                let hi = ts.partition_point(|&b| b < t);
                Ok((hi - lo) as i64)
            }
        }
    }

    /// Whether interval `k` (and both its endpoints) is represented.
    pub fn covers_interval(&self, k: i64) -> bool {
        self.t_at(k).is_ok() && self.t_at(k + 1).is_ok()
    }

    /// Interval indices whose union covers `[lo, hi]`; errors when the grid
    /// window is narrower than the requested span.
    pub fn interval_range(&self, lo: f64, hi: f64) -> Result<(i64, i64)> {
        let k_lo = self.interval_index(lo)?;
        let k_hi = match self.interval_index(hi) {
            Ok(k) => k,
            // hi exactly at the right edge of an explicit window is allowed.
            Err(_) => {
                let k = self.interval_index(hi - 1e-12)?;
                if (self.t_at(k + 1)? - hi).abs() > 1e-9 {
                    return Err(Error::OutOfWindow { t: hi });
                }
                k
            }
        };
        Ok((k_lo, k_hi))
    }
}

fn expect_params(name: &str, params: &[f64], n: usize) -> Result<()> {
    if params.len() != n {
        return Err(Error::GridParams(format!(
            "family `{name}` expects {n} parameter(s), got {}",
            params.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn floor_family_matches_table() {
        let g = Grid::builtin_family("floor", &[]).unwrap();
        assert_relative_eq!(g.theta(), 1.0);
        assert_relative_eq!(g.t_at(3).unwrap(), 3.0);
        assert_relative_eq!(g.zeta_at(3).unwrap(), 3.0);
        assert_relative_eq!(g.gamma(2.7).unwrap(), 2.0);
    }

    #[test]
    fn even_round_family_matches_table() {
        let g = Grid::builtin_family("even_round", &[]).unwrap();
        assert_relative_eq!(g.theta(), 2.0);
        assert_relative_eq!(g.t_at(1).unwrap(), 2.0);
        assert_relative_eq!(g.zeta_at(1).unwrap(), 3.0);
        assert_relative_eq!(g.gamma(0.5).unwrap(), 1.0);
        assert_eq!(g.interval_index(3.9).unwrap(), 1);
    }

    #[test]
    fn m_j_family_matches_table() {
        let g = Grid::builtin_family("m_j", &[3.0, 1.0]).unwrap();
        assert_relative_eq!(g.theta(), 3.0);
        assert_relative_eq!(g.t_at(1).unwrap(), 2.0);
        assert_relative_eq!(g.zeta_at(1).unwrap(), 3.0);
        // brute force: t_k = 3k - 1 <= -0.5 < 3(k+1) - 1 forces k = 0
        assert_relative_eq!(g.gamma(-0.5).unwrap(), 0.0);
    }

    #[test]
    fn family_errors() {
        assert!(matches!(
            Grid::builtin_family("cantor", &[]),
            Err(Error::UnknownFamily(_))
        ));
        assert!(matches!(
            Grid::builtin_family("m_j", &[1.0, 3.0]),
            Err(Error::GridParams(_))
        ));
        assert!(matches!(
            Grid::builtin_family("floor_minus_j", &[1.0]),
            Err(Error::GridParams(_))
        ));
        assert!(Grid::builtin_family("floor_plus_j", &[1.0]).is_ok());
    }

    #[test]
    fn interval_boundaries_are_half_open() {
        let g = Grid::builtin_family("floor", &[]).unwrap();
        assert_eq!(g.interval_index(2.0).unwrap(), 2);
        assert_eq!(g.interval_index(2.999).unwrap(), 2);
        assert_eq!(g.interval_index(-0.001).unwrap(), -1);
    }

    #[test]
    fn count_breakpoints_examples() {
        let g = Grid::builtin_family("floor", &[]).unwrap();
        assert_eq!(g.count_breakpoints(0.5, 3.5).unwrap(), 3);
        assert_eq!(g.count_breakpoints(1.0, 1.5).unwrap(), 0);
        let e = Grid::builtin_family("even_round", &[]).unwrap();
        assert_eq!(e.count_breakpoints(-1.0, 5.0).unwrap(), 3);
    }

    #[test]
    fn explicit_window_bounds() {
        let g = Grid::explicit_window(vec![-1.0, 0.5, 2.0], vec![0.0, 1.0], -10).unwrap();
        assert_relative_eq!(g.theta(), 1.5);
        assert_eq!(g.interval_index(-1.0).unwrap(), -10);
        assert_eq!(g.interval_index(1.0).unwrap(), -9);
        assert_relative_eq!(g.gamma(0.7).unwrap(), 1.0);
        assert!(matches!(g.gamma(2.0), Err(Error::OutOfWindow { .. })));
        assert!(matches!(g.gamma(-1.1), Err(Error::OutOfWindow { .. })));
    }

    #[test]
    fn explicit_window_rejects_b1_violations() {
        assert!(Grid::explicit_window(vec![0.0, 1.0], vec![1.5], 0).is_err());
        assert!(Grid::explicit_window(vec![0.0, 0.0], vec![0.0], 0).is_err());
        assert!(Grid::explicit_window(vec![0.0, 1.0, 2.0], vec![0.5], 0).is_err());
    }

    #[test]
    fn gamma_constant_on_each_interval() {
        for (name, params) in [
            ("floor", &[][..]),
            ("floor_half", &[][..]),
            ("even_round", &[][..]),
            ("m_j", &[3.0, 1.0][..]),
            ("alpha_h", &[0.5, 0.8][..]),
        ] {
            let g = Grid::builtin_family(name, params).unwrap();
            for k in -5..5 {
                let a = g.t_at(k).unwrap();
                let b = g.t_at(k + 1).unwrap();
                let z = g.zeta_at(k).unwrap();
                assert!(a < b && a <= z && z <= b, "(B1) fails for {name} at {k}");
                assert!(b - a <= g.theta() + 1e-12, "(B4) fails for {name} at {k}");
                for m in 0..7 {
                    let t = a + (b - a) * (m as f64 / 7.0);
                    assert_relative_eq!(g.gamma(t).unwrap(), z);
                    assert_eq!(g.interval_index(t).unwrap(), k);
                }
            }
        }
    }

    #[test]
    fn gamma_deviation_bound() {
        // |gamma(s) - t| <= theta + |t - s| for every sampled pair.
        let g = Grid::builtin_family("m_j", &[3.0, 1.0]).unwrap();
        let theta = g.theta();
        for i in -40..40 {
            for j in -40..40 {
                let s = i as f64 * 0.37;
                let t = j as f64 * 0.53;
                let gs = g.gamma(s).unwrap();
                assert!((gs - t).abs() <= theta + (t - s).abs() + 1e-12);
            }
        }
    }
}
