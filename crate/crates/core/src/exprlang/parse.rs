//! Recursive-descent parser for the expression grammar:
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := atom ('^' factor)?
//! atom   := number | ident | func '(' args ')' | '(' expr ')' | '-' atom
//! ```
//!
//! Function arity and identifier names are checked here, so a parsed tree is
//! always structurally valid.

use super::{BinOp, Expr, Func, Var};
use crate::error::{Error, Result};

pub fn parse(src: &str) -> Result<Expr> {
    let mut p = Parser { src: src.as_bytes(), pos: 0 };
    p.skip_ws();
    let e = p.expr()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.err("unexpected trailing input"));
    }
    Ok(e)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, message: &str) -> Error {
        Error::Parse { offset: self.pos, message: message.to_string() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            self.skip_ws();
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                let rhs = self.term()?;
                lhs = Expr::Bin(BinOp::Add, Box::new(lhs), Box::new(rhs));
            } else if self.eat(b'-') {
                let rhs = self.term()?;
                lhs = Expr::Bin(BinOp::Sub, Box::new(lhs), Box::new(rhs));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.factor()?;
        loop {
            if self.eat(b'*') {
                let rhs = self.factor()?;
                lhs = Expr::Bin(BinOp::Mul, Box::new(lhs), Box::new(rhs));
            } else if self.eat(b'/') {
                let rhs = self.factor()?;
                lhs = Expr::Bin(BinOp::Div, Box::new(lhs), Box::new(rhs));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn factor(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if self.eat(b'^') {
            let exp = self.factor()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                self.skip_ws();
                let inner = self.atom()?;
                Ok(Expr::Neg(Box::new(inner)))
            }
            Some(b'(') => {
                self.pos += 1;
                self.skip_ws();
                let e = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.err("expected `)`"));
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.ident(),
            _ => Err(self.err("expected a number, identifier or `(`")),
        }
    }

    fn number(&mut self) -> Result<Expr> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.peek() == Some(b'.') {
            self.pos += 1;
            while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                self.pos += 1;
            }
        }
        if matches!(self.peek(), Some(b'e' | b'E')) {
            let mark = self.pos;
            self.pos += 1;
            if matches!(self.peek(), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            if self.peek().is_some_and(|c| c.is_ascii_digit()) {
                while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                    self.pos += 1;
                }
            } else {
                // `2e` was the start of something else, back off.
                self.pos = mark;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        let value: f64 = text.parse().map_err(|_| Error::Parse {
            offset: start,
            message: format!("invalid number literal `{text}`"),
        })?;
        self.skip_ws();
        Ok(Expr::Const(value))
    }

    fn ident(&mut self) -> Result<Expr> {
        let start = self.pos;
        while self
            .peek()
            .is_some_and(|c| c.is_ascii_alphanumeric() || c == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos])
            .unwrap()
            .to_string();
        self.skip_ws();

        if self.peek() == Some(b'(') {
            let func = match name.as_str() {
                "sin" => Func::Sin,
                "cos" => Func::Cos,
                "exp" => Func::Exp,
                "tanh" => Func::Tanh,
                "abs" => Func::Abs,
                "min" => Func::Min,
                "max" => Func::Max,
                _ => {
                    return Err(Error::Parse {
                        offset: start,
                        message: format!("unknown function `{name}`"),
                    })
                }
            };
            self.pos += 1;
            self.skip_ws();
            let mut args = vec![self.expr()?];
            while self.eat(b',') {
                args.push(self.expr()?);
            }
            if !self.eat(b')') {
                return Err(self.err("expected `)` or `,` in argument list"));
            }
            if args.len() != func.arity() {
                return Err(Error::Parse {
                    offset: start,
                    message: format!(
                        "`{}` takes {} argument(s), got {}",
                        func.name(),
                        func.arity(),
                        args.len()
                    ),
                });
            }
            return Ok(Expr::Call(func, args));
        }

        let var = parse_var(&name).ok_or_else(|| Error::Parse {
            offset: start,
            message: format!("unknown identifier `{name}` (expected t, x<k> or y<k>)"),
        })?;
        Ok(Expr::Var(var))
    }
}

fn parse_var(name: &str) -> Option<Var> {
    if name == "t" {
        return Some(Var::T);
    }
    let (head, tail) = name.split_at(1);
    let idx: usize = tail.parse().ok().filter(|&k| k >= 1)?;
    match head {
        "x" => Some(Var::X(idx - 1)),
        "y" => Some(Var::Y(idx - 1)),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_examples() {
        let e = parse("sin(t) + 2").unwrap();
        assert_eq!(
            e,
            Expr::Bin(
                BinOp::Add,
                Box::new(Expr::Call(Func::Sin, vec![Expr::Var(Var::T)])),
                Box::new(Expr::Const(2.0)),
            )
        );
        let e = parse("tanh(x1 - y1)/2").unwrap();
        assert_eq!(
            e,
            Expr::Bin(
                BinOp::Div,
                Box::new(Expr::Call(
                    Func::Tanh,
                    vec![Expr::Bin(
                        BinOp::Sub,
                        Box::new(Expr::Var(Var::X(0))),
                        Box::new(Expr::Var(Var::Y(0))),
                    )]
                )),
                Box::new(Expr::Const(2.0)),
            )
        );
    }

    #[test]
    fn errors_carry_byte_offsets() {
        match parse("1 + @") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(parse("foo(t)"), Err(Error::Parse { .. })));
        assert!(matches!(parse("sin(t, 1)"), Err(Error::Parse { .. })));
        assert!(matches!(parse("min(t)"), Err(Error::Parse { .. })));
        assert!(matches!(parse("z3 + 1"), Err(Error::Parse { .. })));
        assert!(matches!(parse("x0"), Err(Error::Parse { .. })));
        assert!(matches!(parse("(1 + 2"), Err(Error::Parse { .. })));
    }

    #[test]
    fn scientific_notation() {
        assert_eq!(parse("1e-3").unwrap(), Expr::Const(1e-3));
        assert_eq!(parse("2.5E2").unwrap(), Expr::Const(250.0));
    }

    #[test]
    fn unary_minus_binds_tighter_than_pow() {
        // `-a` is an atom, so it is a valid power base: -2^2 = (-2)^2.
        let e = parse("-2^2").unwrap();
        assert_eq!(
            e,
            Expr::Bin(
                BinOp::Pow,
                Box::new(Expr::Neg(Box::new(Expr::Const(2.0)))),
                Box::new(Expr::Const(2.0)),
            )
        );
    }
}
