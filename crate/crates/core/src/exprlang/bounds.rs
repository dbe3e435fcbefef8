//! Certified sup-norm and Lipschitz bounds by dense sampling with a recorded
//! inflation factor.
//!
//! The downstream theorems only require *some* valid upper bound for each
//! constant, so the certification method (analytic vs sampled, with sample
//! count and inflation) is carried along in every report rather than hidden.

use serde::{Deserialize, Serialize};

use super::{EvalEnv, Expr, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BoundMethod {
    Analytic,
    GridSample { samples: usize, inflation: f64 },
}

/// An upper estimate of a sup-norm constant together with how it was derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertifiedBound {
    pub value: f64,
    pub method: BoundMethod,
}

impl CertifiedBound {
    pub fn analytic(value: f64) -> Result<Self> {
        if !(value.is_finite() && value >= 0.0) {
            return Err(Error::Domain(format!(
                "a certified bound must be finite and nonnegative, got {value}"
            )));
        }
        Ok(CertifiedBound { value, method: BoundMethod::Analytic })
    }
}

/// Which state block a Lipschitz estimate differentiates against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarBlock {
    X,
    Y,
}

/// Sampling intervals per variable kind. All `x<k>` share one interval, all
/// `y<k>` another.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarRanges {
    pub t: (f64, f64),
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl VarRanges {
    pub fn new(t: (f64, f64), x: (f64, f64), y: (f64, f64)) -> Result<Self> {
        for (name, (lo, hi)) in [("t", t), ("x", x), ("y", y)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Domain(format!(
                    "invalid sampling range for {name}: [{lo}, {hi}]"
                )));
            }
        }
        Ok(VarRanges { t, x, y })
    }

    fn of(&self, v: Var) -> (f64, f64) {
        match v {
            Var::T => self.t,
            Var::X(_) => self.x,
            Var::Y(_) => self.y,
        }
    }
}

fn check_sampling(samples: usize, inflation: f64) -> Result<()> {
    if samples < 100 {
        return Err(Error::Domain(format!(
            "bound certification needs at least 100 samples, got {samples}"
        )));
    }
    if !(inflation >= 1.0) {
        return Err(Error::Domain(format!(
            "inflation factor must be >= 1, got {inflation}"
        )));
    }
    Ok(())
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 || lo == hi {
        return vec![0.5 * (lo + hi)];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// A uniform grid over the free variables of the expressions; the per-axis
/// count shrinks with the dimension so the total stays near `samples`.
struct SampleGrid {
    vars: Vec<Var>,
    axes: Vec<Vec<f64>>,
}

impl SampleGrid {
    fn new(vars: Vec<Var>, ranges: &VarRanges, samples: usize) -> SampleGrid {
        let d = vars.len();
        let per_axis = if d <= 1 {
            samples
        } else {
            ((samples as f64).powf(1.0 / d as f64).round() as usize).max(4)
        };
        let axes = vars
            .iter()
            .map(|&v| {
                let (lo, hi) = ranges.of(v);
                linspace(lo, hi, per_axis)
            })
            .collect();
        SampleGrid { vars, axes }
    }

    fn for_each(&self, mut f: impl FnMut(&Assignment) -> Result<()>) -> Result<()> {
        let mut asg = Assignment::new(&self.vars);
        if self.vars.is_empty() {
            return f(&asg);
        }
        let mut idx = vec![0usize; self.vars.len()];
        loop {
            for (slot, (&i, axis)) in idx.iter().zip(&self.axes).enumerate() {
                asg.set(slot, axis[i]);
            }
            f(&asg)?;
            let mut carry = 0;
            loop {
                idx[carry] += 1;
                if idx[carry] < self.axes[carry].len() {
                    break;
                }
                idx[carry] = 0;
                carry += 1;
                if carry == idx.len() {
                    return Ok(());
                }
            }
        }
    }
}

/// Dense variable assignment sized to the largest mentioned index.
struct Assignment {
    vars: Vec<Var>,
    t: f64,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl Assignment {
    fn new(vars: &[Var]) -> Assignment {
        let dim = |pick: fn(&Var) -> Option<usize>| {
            vars.iter().filter_map(pick).max().map_or(0, |i| i + 1)
        };
        Assignment {
            vars: vars.to_vec(),
            t: 0.0,
            x: vec![0.0; dim(|v| if let Var::X(i) = v { Some(*i) } else { None })],
            y: vec![0.0; dim(|v| if let Var::Y(i) = v { Some(*i) } else { None })],
        }
    }

    fn set(&mut self, slot: usize, value: f64) {
        match self.vars[slot] {
            Var::T => self.t = value,
            Var::X(i) => self.x[i] = value,
            Var::Y(i) => self.y[i] = value,
        }
    }

    fn env(&self) -> EvalEnv<'_> {
        EvalEnv { t: self.t, x: &self.x, y: &self.y }
    }
}

/// Sampled maximum of `|e|` over a uniform grid of the free-variable ranges,
/// multiplied by `inflation`.
pub fn bound_abs(
    e: &Expr,
    ranges: &VarRanges,
    samples: usize,
    inflation: f64,
) -> Result<CertifiedBound> {
    check_sampling(samples, inflation)?;
    let value = sample_max(&[e.clone()], ranges, samples, |vals, _| Ok(vals[0].abs()))?;
    Ok(CertifiedBound {
        value: value * inflation,
        method: BoundMethod::GridSample { samples, inflation },
    })
}

/// Sampled maximum of the Euclidean norm of a vector of expressions.
pub fn bound_vector_sup(
    components: &[Expr],
    ranges: &VarRanges,
    samples: usize,
    inflation: f64,
) -> Result<CertifiedBound> {
    check_sampling(samples, inflation)?;
    let value = sample_max(components, ranges, samples, |vals, _| {
        Ok(vals.iter().map(|v| v * v).sum::<f64>().sqrt())
    })?;
    Ok(CertifiedBound {
        value: value * inflation,
        method: BoundMethod::GridSample { samples, inflation },
    })
}

fn sample_max(
    components: &[Expr],
    ranges: &VarRanges,
    samples: usize,
    reduce: impl Fn(&[f64], &Assignment) -> Result<f64>,
) -> Result<f64> {
    let mut vars = std::collections::BTreeSet::new();
    for c in components {
        vars.extend(c.free_vars());
    }
    let grid = SampleGrid::new(vars.into_iter().collect(), ranges, samples);
    let mut max = 0.0f64;
    let mut vals = vec![0.0; components.len()];
    grid.for_each(|asg| {
        for (v, c) in vals.iter_mut().zip(components) {
            *v = c.eval(&asg.env())?;
        }
        max = max.max(reduce(&vals, asg)?);
        Ok(())
    })?;
    Ok(max)
}

/// Sampled block-Lipschitz estimate: the largest difference quotient of the
/// vector function along each coordinate of the named block, times
/// `inflation`. Quotients are taken between consecutive grid nodes, so a
/// linear expression `c*x1` reports exactly `|c| * inflation`.
pub fn lipschitz_estimate(
    components: &[Expr],
    wrt: VarBlock,
    ranges: &VarRanges,
    samples: usize,
    inflation: f64,
) -> Result<CertifiedBound> {
    check_sampling(samples, inflation)?;
    let mut vars = std::collections::BTreeSet::new();
    for c in components {
        vars.extend(c.free_vars());
    }
    let block_vars: Vec<Var> = vars
        .iter()
        .copied()
        .filter(|v| match wrt {
            VarBlock::X => matches!(v, Var::X(_)),
            VarBlock::Y => matches!(v, Var::Y(_)),
        })
        .collect();
    // No dependence on the block at all: the certified constant is zero.
    if block_vars.is_empty() {
        return Ok(CertifiedBound {
            value: 0.0,
            method: BoundMethod::GridSample { samples, inflation },
        });
    }

    let mut worst = 0.0f64;
    for &walk in &block_vars {
        let others: Vec<Var> = vars.iter().copied().filter(|&v| v != walk).collect();
        // Walk `samples` nodes along one coordinate over a coarse grid of the
        // remaining variables.
        let base_budget = (samples / 4).clamp(16, 256);
        let grid = SampleGrid::new(others, ranges, base_budget);
        let (lo, hi) = ranges.of(walk);
        let axis = linspace(lo, hi, samples.max(2));
        let mut prev = vec![0.0; components.len()];
        let mut cur = vec![0.0; components.len()];
        grid.for_each(|asg| {
            let mut asg_env = AssignmentWithWalk::new(asg, walk, axis[0]);
            for (v, c) in prev.iter_mut().zip(components) {
                *v = c.eval(&asg_env.env())?;
            }
            for pair in axis.windows(2) {
                asg_env.value = pair[1];
                for (v, c) in cur.iter_mut().zip(components) {
                    *v = c.eval(&asg_env.env())?;
                }
                let dv = cur
                    .iter()
                    .zip(&prev)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                let dx = pair[1] - pair[0];
                if dx > 0.0 {
                    worst = worst.max(dv / dx);
                }
                std::mem::swap(&mut prev, &mut cur);
            }
            Ok(())
        })?;
    }
    Ok(CertifiedBound {
        value: worst * inflation,
        method: BoundMethod::GridSample { samples, inflation },
    })
}

struct AssignmentWithWalk<'a> {
    base: &'a Assignment,
    walk: Var,
    value: f64,
    scratch: (f64, Vec<f64>, Vec<f64>),
}

impl<'a> AssignmentWithWalk<'a> {
    fn new(base: &'a Assignment, walk: Var, value: f64) -> Self {
        AssignmentWithWalk { base, walk, value, scratch: (0.0, Vec::new(), Vec::new()) }
    }

    fn env(&mut self) -> EvalEnv<'_> {
        // Clone the small vectors and override the walked slot; sampling
        // budgets are tiny.
        let mut t = self.base.t;
        let need = |i: usize, len: usize| (i + 1).max(len);
        let (mut x, mut y) = (self.base.x.clone(), self.base.y.clone());
        match self.walk {
            Var::T => t = self.value,
            Var::X(i) => {
                x.resize(need(i, x.len()), 0.0);
                x[i] = self.value;
            }
            Var::Y(i) => {
                y.resize(need(i, y.len()), 0.0);
                y[i] = self.value;
            }
        }
        self.scratch = (t, x, y);
        EvalEnv {
            t: self.scratch.0,
            x: &self.scratch.1,
            y: &self.scratch.2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exprlang::parse;
    use approx::assert_relative_eq;

    fn ranges() -> VarRanges {
        VarRanges::new((0.0, 10.0), (-50.0, 50.0), (-50.0, 50.0)).unwrap()
    }

    #[test]
    fn bound_abs_sine() {
        let e = parse("sin(t)").unwrap();
        let b = bound_abs(&e, &ranges(), 1000, 1.1).unwrap();
        assert!(b.value >= 1.0 && b.value <= 1.1, "got {}", b.value);
    }

    #[test]
    fn bound_abs_zero() {
        let e = parse("0").unwrap();
        let b = bound_abs(&e, &ranges(), 500, 2.0).unwrap();
        assert_relative_eq!(b.value, 0.0);
    }

    #[test]
    fn bound_abs_tanh() {
        let e = parse("tanh(x1)").unwrap();
        let b = bound_abs(&e, &ranges(), 1000, 1.05).unwrap();
        assert!(b.value >= 0.9999 && b.value <= 1.05, "got {}", b.value);
    }

    #[test]
    fn bound_abs_monotone_in_inflation() {
        let e = parse("cos(t) * t").unwrap();
        let b1 = bound_abs(&e, &ranges(), 400, 1.0).unwrap();
        let b2 = bound_abs(&e, &ranges(), 400, 1.3).unwrap();
        assert!(b2.value >= b1.value);
        assert_relative_eq!(b2.value, b1.value * 1.3, epsilon = 1e-12);
    }

    #[test]
    fn bound_abs_dominates_coarser_subgrid() {
        // 1001 nodes contain every 101-node subgrid sample (step 10).
        let e = parse("sin(3*t) + t/7").unwrap();
        let fine = bound_abs(&e, &ranges(), 1001, 1.0).unwrap();
        let mut coarse_max = 0.0f64;
        for i in 0..101 {
            let t = 10.0 * i as f64 / 100.0;
            coarse_max = coarse_max.max(e.eval(&EvalEnv::time(t)).unwrap().abs());
        }
        assert!(fine.value >= coarse_max - 1e-15);
    }

    #[test]
    fn lipschitz_tanh_near_one() {
        let e = parse("tanh(x1)").unwrap();
        let b = lipschitz_estimate(&[e], VarBlock::X, &ranges(), 1000, 1.05).unwrap();
        assert!(b.value > 0.95 && b.value <= 1.05, "got {}", b.value);
    }

    #[test]
    fn lipschitz_linear_exact() {
        let e = parse("0.1*y1").unwrap();
        let b = lipschitz_estimate(&[e], VarBlock::Y, &ranges(), 500, 1.2).unwrap();
        assert_relative_eq!(b.value, 0.1 * 1.2, epsilon = 1e-9);
        let e = parse("-2.5*x1 + t").unwrap();
        let b = lipschitz_estimate(&[e], VarBlock::X, &ranges(), 300, 1.0).unwrap();
        assert_relative_eq!(b.value, 2.5, epsilon = 1e-9);
    }

    #[test]
    fn lipschitz_no_dependence_is_zero() {
        let e = parse("sin(t)").unwrap();
        let b = lipschitz_estimate(&[e], VarBlock::X, &ranges(), 200, 1.5).unwrap();
        assert_relative_eq!(b.value, 0.0);
    }

    #[test]
    fn sampling_preconditions() {
        let e = parse("t").unwrap();
        assert!(bound_abs(&e, &ranges(), 99, 1.0).is_err());
        assert!(bound_abs(&e, &ranges(), 100, 0.5).is_err());
    }
}
