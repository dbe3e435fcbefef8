//! Small arithmetic expression language for time-dependent matrix entries and
//! nonlinearity components.
//!
//! Variables are `t`, `x1..xn`, `y1..yn`; operators `+ - * / ^` with `^`
//! right-associative above `*`; functions `sin cos exp tanh abs min max`.
//! Since unary minus is an atom production, `-a^b` parses as `(-a)^b`; write
//! `-(a^b)` for the other reading.

mod bounds;
mod parse;

pub use bounds::{
    bound_abs, bound_vector_sup, lipschitz_estimate, BoundMethod, CertifiedBound, VarBlock,
    VarRanges,
};
pub use parse::parse;

use std::collections::BTreeSet;
use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Var {
    T,
    /// `x<k>` with 1-based display index; stored 0-based.
    X(usize),
    /// `y<k>`, same convention.
    Y(usize),
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::T => write!(f, "t"),
            Var::X(i) => write!(f, "x{}", i + 1),
            Var::Y(i) => write!(f, "y{}", i + 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Tanh,
    Abs,
    Min,
    Max,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Tanh => "tanh",
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

/// Variable bindings for evaluation. `x` and `y` are the state blocks.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalEnv<'a> {
    pub t: f64,
    pub x: &'a [f64],
    pub y: &'a [f64],
}

impl<'a> EvalEnv<'a> {
    pub fn time(t: f64) -> Self {
        EvalEnv { t, x: &[], y: &[] }
    }

    fn get(&self, v: Var) -> Option<f64> {
        match v {
            Var::T => Some(self.t),
            Var::X(i) => self.x.get(i).copied(),
            Var::Y(i) => self.y.get(i).copied(),
        }
    }
}

impl Expr {
    pub fn constant(v: f64) -> Expr {
        if v < 0.0 {
            Expr::Neg(Box::new(Expr::Const(-v)))
        } else {
            Expr::Const(v)
        }
    }

    /// IEEE double evaluation; division by zero or a non-finite result is an
    /// error carrying the offending subexpression.
    pub fn eval(&self, env: &EvalEnv) -> Result<f64> {
        let v = match self {
            Expr::Const(c) => *c,
            Expr::Var(var) => env.get(*var).ok_or_else(|| Error::Eval {
                expr: var.to_string(),
                reason: "unbound variable".into(),
            })?,
            Expr::Neg(e) => -e.eval(env)?,
            Expr::Bin(op, a, b) => {
                let x = a.eval(env)?;
                let y = b.eval(env)?;
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => {
                        if y == 0.0 {
                            return Err(Error::Eval {
                                expr: self.to_string(),
                                reason: "division by zero".into(),
                            });
                        }
                        x / y
                    }
                    BinOp::Pow => x.powf(y),
                }
            }
            Expr::Call(f, args) => {
                let a = args[0].eval(env)?;
                match f {
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Exp => a.exp(),
                    Func::Tanh => a.tanh(),
                    Func::Abs => a.abs(),
                    Func::Min => a.min(args[1].eval(env)?),
                    Func::Max => a.max(args[1].eval(env)?),
                }
            }
        };
        if !v.is_finite() {
            return Err(Error::Eval {
                expr: self.to_string(),
                reason: format!("non-finite result {v}"),
            });
        }
        Ok(v)
    }

    pub fn free_vars(&self) -> BTreeSet<Var> {
        let mut set = BTreeSet::new();
        self.collect_vars(&mut set);
        set
    }

    fn collect_vars(&self, set: &mut BTreeSet<Var>) {
        match self {
            Expr::Const(_) => {}
            Expr::Var(v) => {
                set.insert(*v);
            }
            Expr::Neg(e) => e.collect_vars(set),
            Expr::Bin(_, a, b) => {
                a.collect_vars(set);
                b.collect_vars(set);
            }
            Expr::Call(_, args) => {
                for a in args {
                    a.collect_vars(set);
                }
            }
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
            Expr::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
            Expr::Bin(BinOp::Pow, ..) => 3,
            Expr::Neg(_) => 4,
            _ => 5,
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn paren(f: &mut fmt::Formatter<'_>, e: &Expr, need: bool) -> fmt::Result {
            if need {
                write!(f, "(")?;
                fmt::Display::fmt(e, f)?;
                write!(f, ")")
            } else {
                fmt::Display::fmt(e, f)
            }
        }
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Neg(e) => {
                write!(f, "-")?;
                // The operand of unary minus must be an atom again.
                paren(f, e, e.precedence() < 4)
            }
            Expr::Bin(op, a, b) => {
                let (sym, prec) = match op {
                    BinOp::Add => ("+", 1),
                    BinOp::Sub => ("-", 1),
                    BinOp::Mul => ("*", 2),
                    BinOp::Div => ("/", 2),
                    BinOp::Pow => ("^", 3),
                };
                if *op == BinOp::Pow {
                    // Base must be an atom, exponent a factor.
                    paren(f, a, a.precedence() < 4)?;
                    write!(f, " {sym} ")?;
                    paren(f, b, b.precedence() < 3)
                } else {
                    paren(f, a, a.precedence() < prec)?;
                    write!(f, " {sym} ")?;
                    // Left associativity: the right operand needs parens at
                    // equal precedence.
                    paren(f, b, b.precedence() <= prec)
                }
            }
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    fmt::Display::fmt(a, f)?;
                }
                write!(f, ")")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn eval_examples() {
        let e = parse("sin(t)").unwrap();
        assert_relative_eq!(e.eval(&EvalEnv::time(0.0)).unwrap(), 0.0);
        let e = parse("exp(t)").unwrap();
        assert_relative_eq!(
            e.eval(&EvalEnv::time(1.0)).unwrap(),
            std::f64::consts::E,
            epsilon = 1e-12
        );
        let e = parse("x1*y1 + t").unwrap();
        let env = EvalEnv { t: 1.0, x: &[2.0], y: &[3.0] };
        assert_relative_eq!(e.eval(&env).unwrap(), 7.0);
    }

    #[test]
    fn pow_is_right_associative() {
        let e = parse("2 ^ 3 ^ 2").unwrap();
        assert_relative_eq!(e.eval(&EvalEnv::default()).unwrap(), 512.0);
    }

    #[test]
    fn division_by_zero_is_reported() {
        let e = parse("1/(t - 1)").unwrap();
        let err = e.eval(&EvalEnv::time(1.0)).unwrap_err();
        assert!(matches!(err, Error::Eval { .. }), "{err}");
    }

    #[test]
    fn unbound_variable_is_reported() {
        let e = parse("x2 + 1").unwrap();
        let env = EvalEnv { t: 0.0, x: &[1.0], y: &[] };
        assert!(e.eval(&env).is_err());
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            prop_oneof![Just(0.0), Just(1.0), Just(2.5), Just(0.125), Just(3.0)]
                .prop_map(Expr::Const),
            prop_oneof![
                Just(Var::T),
                Just(Var::X(0)),
                Just(Var::X(1)),
                Just(Var::Y(0))
            ]
            .prop_map(Expr::Var),
        ];
        leaf.prop_recursive(4, 48, 4, |inner| {
            prop_oneof![
                inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
                (
                    prop_oneof![
                        Just(BinOp::Add),
                        Just(BinOp::Sub),
                        Just(BinOp::Mul),
                        Just(BinOp::Div),
                        Just(BinOp::Pow)
                    ],
                    inner.clone(),
                    inner.clone()
                )
                    .prop_map(|(op, a, b)| Expr::Bin(op, Box::new(a), Box::new(b))),
                (
                    prop_oneof![
                        Just(Func::Sin),
                        Just(Func::Cos),
                        Just(Func::Exp),
                        Just(Func::Tanh),
                        Just(Func::Abs)
                    ],
                    inner.clone()
                )
                    .prop_map(|(f, a)| Expr::Call(f, vec![a])),
                (prop_oneof![Just(Func::Min), Just(Func::Max)], inner.clone(), inner)
                    .prop_map(|(f, a, b)| Expr::Call(f, vec![a, b])),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_parse_roundtrip(e in arb_expr()) {
            let printed = e.to_string();
            let reparsed = parse(&printed).unwrap();
            prop_assert_eq!(&reparsed, &e, "printed as `{}`", printed);
        }
    }
}
