//! Expression language for the model functions `f`, `r` and `n0`.
//!
//! Grammar (whitespace is insignificant):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := ('-' | '+') unary | power
//! power   := primary ('^' unary)?          right associative, binds tighter than unary minus
//! primary := number | 'x' | 'pi' | name '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! Functions: `neg exp ln sin cos sqrt abs` take one argument. `ind(a, b)` is
//! the indicator of the closed interval `[a, b]`; `ind(a, b, lc, rc)` sets each
//! end closed (`1`) or open (`0`). Indicator bounds must not depend on `x`.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnaryOp {
    Neg,
    Exp,
    Ln,
    Sin,
    Cos,
    Sqrt,
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

/// Which one-sided limit to take at indicator breakpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Side {
    /// Use the declared open/closed flags.
    #[default]
    Exact,
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var,
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
    /// Indicator of an interval with closed/open end flags.
    Indicator {
        lo: f64,
        hi: f64,
        lo_closed: bool,
        hi_closed: bool,
    },
    /// Derivative of an indicator: zero away from `lo` and `hi`, undefined at them.
    Jump { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { offset: usize, name: String },
}

impl ParseError {
    pub fn offset(&self) -> usize {
        match self {
            ParseError::Syntax { offset, .. } | ParseError::UnknownIdentifier { offset, .. } => {
                *offset
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum EvalError {
    #[error("logarithm of non-positive value {0} at x = {1}")]
    LogDomain(f64, f64),
    #[error("square root of negative value {0} at x = {1}")]
    SqrtDomain(f64, f64),
    #[error("division by zero at x = {0}")]
    DivisionByZero(f64),
    #[error("derivative undefined at indicator breakpoint x = {0}")]
    Breakpoint(f64),
    #[error("non-finite value at x = {0}")]
    NonFinite(f64),
}

pub fn parse_expression(text: &str) -> Result<Expr, ParseError> {
    let mut p = Parser { src: text.as_bytes(), pos: 0 };
    let e = p.expr()?;
    p.skip_ws();
    if p.pos < p.src.len() {
        return Err(p.syntax("unexpected trailing input"));
    }
    Ok(e)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn syntax(&self, message: &str) -> ParseError {
        ParseError::Syntax { offset: self.pos, message: message.to_string() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                lhs = Expr::Binary(BinaryOp::Add, Box::new(lhs), Box::new(self.term()?));
            } else if self.eat(b'-') {
                lhs = Expr::Binary(BinaryOp::Sub, Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat(b'*') {
                lhs = Expr::Binary(BinaryOp::Mul, Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat(b'/') {
                lhs = Expr::Binary(BinaryOp::Div, Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.eat(b'-') {
            return Ok(Expr::Unary(UnaryOp::Neg, Box::new(self.unary()?)));
        }
        if self.eat(b'+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.primary()?;
        if self.eat(b'^') {
            let exponent = self.unary()?;
            return Ok(Expr::Binary(BinaryOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            None => Err(self.syntax("unexpected end of input")),
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.syntax("expected `)`"));
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.identifier(),
            Some(_) => Err(self.syntax("unexpected character")),
        }
    }

    fn number(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        let s = self.src;
        let mut i = self.pos;
        while i < s.len() && (s[i].is_ascii_digit() || s[i] == b'.') {
            i += 1;
        }
        if i < s.len() && (s[i] == b'e' || s[i] == b'E') {
            let mut j = i + 1;
            if j < s.len() && (s[j] == b'+' || s[j] == b'-') {
                j += 1;
            }
            if j < s.len() && s[j].is_ascii_digit() {
                while j < s.len() && s[j].is_ascii_digit() {
                    j += 1;
                }
                i = j;
            }
        }
        let text = std::str::from_utf8(&s[start..i]).expect("ascii");
        match text.parse::<f64>() {
            Ok(v) => {
                self.pos = i;
                Ok(Expr::Const(v))
            }
            Err(_) => Err(ParseError::Syntax {
                offset: start,
                message: format!("malformed number `{text}`"),
            }),
        }
    }

    fn identifier(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii").to_string();
        match name.as_str() {
            "x" => return Ok(Expr::Var),
            "pi" => return Ok(Expr::Const(std::f64::consts::PI)),
            _ => {}
        }
        let unary = match name.as_str() {
            "neg" => Some(UnaryOp::Neg),
            "exp" => Some(UnaryOp::Exp),
            "ln" => Some(UnaryOp::Ln),
            "sin" => Some(UnaryOp::Sin),
            "cos" => Some(UnaryOp::Cos),
            "sqrt" => Some(UnaryOp::Sqrt),
            "abs" => Some(UnaryOp::Abs),
            "ind" => None,
            _ => return Err(ParseError::UnknownIdentifier { offset: start, name }),
        };
        if !self.eat(b'(') {
            return Err(self.syntax("expected `(` after function name"));
        }
        let mut args = vec![(self.pos_after_ws(), self.expr()?)];
        while self.eat(b',') {
            args.push((self.pos_after_ws(), self.expr()?));
        }
        if !self.eat(b')') {
            return Err(self.syntax("expected `)`"));
        }
        match unary {
            Some(op) => {
                if args.len() != 1 {
                    return Err(ParseError::Syntax {
                        offset: start,
                        message: format!("`{name}` takes one argument"),
                    });
                }
                Ok(Expr::Unary(op, Box::new(args.pop().expect("one arg").1)))
            }
            None => self.indicator(start, args),
        }
    }

    fn pos_after_ws(&mut self) -> usize {
        self.skip_ws();
        self.pos
    }

    fn indicator(&self, start: usize, args: Vec<(usize, Expr)>) -> Result<Expr, ParseError> {
        if args.len() != 2 && args.len() != 4 {
            return Err(ParseError::Syntax {
                offset: start,
                message: "`ind` takes 2 or 4 arguments".into(),
            });
        }
        let mut vals = Vec::with_capacity(4);
        for (offset, e) in &args {
            if e.depends_on_x() {
                return Err(ParseError::Syntax {
                    offset: *offset,
                    message: "indicator arguments must be constant".into(),
                });
            }
            let v = e.eval(0.0).map_err(|err| ParseError::Syntax {
                offset: *offset,
                message: err.to_string(),
            })?;
            vals.push((*offset, v));
        }
        let flag = |(offset, v): (usize, f64)| -> Result<bool, ParseError> {
            if v == 0.0 {
                Ok(false)
            } else if v == 1.0 {
                Ok(true)
            } else {
                Err(ParseError::Syntax { offset, message: "end flag must be 0 or 1".into() })
            }
        };
        let (lo_closed, hi_closed) =
            if vals.len() == 4 { (flag(vals[2])?, flag(vals[3])?) } else { (true, true) };
        let (lo, hi) = (vals[0].1, vals[1].1);
        if lo > hi {
            return Err(ParseError::Syntax {
                offset: vals[1].0,
                message: "indicator bounds must satisfy lo <= hi".into(),
            });
        }
        Ok(Expr::Indicator { lo, hi, lo_closed, hi_closed })
    }
}

fn indicator_value(x: f64, lo: f64, hi: f64, lo_closed: bool, hi_closed: bool, side: Side) -> f64 {
    let inside = match side {
        Side::Exact => {
            (x > lo || (lo_closed && x == lo)) && (x < hi || (hi_closed && x == hi))
        }
        Side::Right => x >= lo && x < hi,
        Side::Left => x > lo && x <= hi,
    };
    if inside {
        1.0
    } else {
        0.0
    }
}

fn unary_value(op: UnaryOp, v: f64) -> f64 {
    match op {
        UnaryOp::Neg => -v,
        UnaryOp::Exp => v.exp(),
        UnaryOp::Ln => v.ln(),
        UnaryOp::Sin => v.sin(),
        UnaryOp::Cos => v.cos(),
        UnaryOp::Sqrt => v.sqrt(),
        UnaryOp::Abs => v.abs(),
    }
}

fn binary_value(op: BinaryOp, a: f64, b: f64) -> f64 {
    match op {
        BinaryOp::Add => a + b,
        BinaryOp::Sub => a - b,
        BinaryOp::Mul => a * b,
        BinaryOp::Div => a / b,
        BinaryOp::Pow => a.powf(b),
    }
}

impl Expr {
    pub fn constant(v: f64) -> Expr {
        Expr::Const(v)
    }

    pub fn depends_on_x(&self) -> bool {
        match self {
            Expr::Const(_) => false,
            Expr::Var | Expr::Indicator { .. } | Expr::Jump { .. } => true,
            Expr::Unary(_, a) => a.depends_on_x(),
            Expr::Binary(_, a, b) => a.depends_on_x() || b.depends_on_x(),
        }
    }

    /// Evaluate with domain checks.
    pub fn eval(&self, x: f64) -> Result<f64, EvalError> {
        self.eval_side(x, Side::Exact)
    }

    /// Evaluate with domain checks, taking one-sided limits at indicator breakpoints.
    pub fn eval_side(&self, x: f64, side: Side) -> Result<f64, EvalError> {
        let v = match self {
            Expr::Const(c) => *c,
            Expr::Var => x,
            Expr::Indicator { lo, hi, lo_closed, hi_closed } => {
                indicator_value(x, *lo, *hi, *lo_closed, *hi_closed, side)
            }
            Expr::Jump { lo, hi } => {
                if side == Side::Exact && (x == *lo || x == *hi) {
                    return Err(EvalError::Breakpoint(x));
                }
                0.0
            }
            Expr::Unary(op, a) => {
                let v = a.eval_side(x, side)?;
                match op {
                    UnaryOp::Ln if v <= 0.0 => return Err(EvalError::LogDomain(v, x)),
                    UnaryOp::Sqrt if v < 0.0 => return Err(EvalError::SqrtDomain(v, x)),
                    _ => unary_value(*op, v),
                }
            }
            Expr::Binary(op, a, b) => {
                let u = a.eval_side(x, side)?;
                let w = b.eval_side(x, side)?;
                if *op == BinaryOp::Div && w == 0.0 {
                    return Err(EvalError::DivisionByZero(x));
                }
                binary_value(*op, u, w)
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::NonFinite(x))
        }
    }

    /// Symbolic derivative with respect to `x`.
    pub fn differentiate(&self) -> Expr {
        use Expr::*;
        match self {
            Const(_) => Const(0.0),
            Var => Const(1.0),
            Indicator { lo, hi, .. } => Jump { lo: *lo, hi: *hi },
            Jump { lo, hi } => Jump { lo: *lo, hi: *hi },
            Unary(op, a) => {
                let da = a.differentiate();
                let a = (**a).clone();
                let inner = match op {
                    UnaryOp::Neg => return neg(da),
                    UnaryOp::Exp => Unary(UnaryOp::Exp, Box::new(a)),
                    UnaryOp::Ln => return div(da, a),
                    UnaryOp::Sin => Unary(UnaryOp::Cos, Box::new(a)),
                    UnaryOp::Cos => neg(Unary(UnaryOp::Sin, Box::new(a))),
                    UnaryOp::Sqrt => {
                        return div(da, mul(Const(2.0), Unary(UnaryOp::Sqrt, Box::new(a))))
                    }
                    UnaryOp::Abs => div(a.clone(), Unary(UnaryOp::Abs, Box::new(a))),
                };
                mul(inner, da)
            }
            Binary(op, a, b) => {
                let (da, db) = (a.differentiate(), b.differentiate());
                let (a, b) = ((**a).clone(), (**b).clone());
                match op {
                    BinaryOp::Add => add(da, db),
                    BinaryOp::Sub => sub(da, db),
                    BinaryOp::Mul => add(mul(da, b), mul(a, db)),
                    BinaryOp::Div => div(sub(mul(da, b.clone()), mul(a, db)), mul(b.clone(), b)),
                    BinaryOp::Pow => match b {
                        Const(c) => {
                            let lowered = if c == 2.0 { a.clone() } else { pow(a, Const(c - 1.0)) };
                            mul(mul(Const(c), lowered), da)
                        }
                        _ => {
                            let ln_a = Unary(UnaryOp::Ln, Box::new(a.clone()));
                            let bracket = add(mul(db, ln_a), div(mul(b.clone(), da), a.clone()));
                            mul(pow(a, b), bracket)
                        }
                    },
                }
            }
        }
    }

    /// Breakpoints of indicators occurring in the expression.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.collect_breakpoints(&mut out);
        out.sort_by(f64::total_cmp);
        out.dedup();
        out
    }

    fn collect_breakpoints(&self, out: &mut Vec<f64>) {
        match self {
            Expr::Indicator { lo, hi, .. } | Expr::Jump { lo, hi } => {
                out.push(*lo);
                out.push(*hi);
            }
            Expr::Unary(_, a) => a.collect_breakpoints(out),
            Expr::Binary(_, a, b) => {
                a.collect_breakpoints(out);
                b.collect_breakpoints(out);
            }
            Expr::Const(_) | Expr::Var => {}
        }
    }

    /// Replace every occurrence of `x` by `inner`.
    pub fn substitute(&self, inner: &Expr) -> Expr {
        match self {
            Expr::Var => inner.clone(),
            Expr::Unary(op, a) => Expr::Unary(*op, Box::new(a.substitute(inner))),
            Expr::Binary(op, a, b) => {
                Expr::Binary(*op, Box::new(a.substitute(inner)), Box::new(b.substitute(inner)))
            }
            other => other.clone(),
        }
    }

    pub fn compile(&self) -> Program {
        Program::new(self)
    }
}

// Simplifying constructors used by `differentiate`.

pub fn add(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x + y),
        (Expr::Const(z), _) if *z == 0.0 => b,
        (_, Expr::Const(z)) if *z == 0.0 => a,
        _ => Expr::Binary(BinaryOp::Add, Box::new(a), Box::new(b)),
    }
}

pub fn sub(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x - y),
        (_, Expr::Const(z)) if *z == 0.0 => a,
        (Expr::Const(z), _) if *z == 0.0 => neg(b),
        _ => Expr::Binary(BinaryOp::Sub, Box::new(a), Box::new(b)),
    }
}

pub fn mul(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x * y),
        (Expr::Const(z), _) | (_, Expr::Const(z)) if *z == 0.0 => Expr::Const(0.0),
        (Expr::Const(o), _) if *o == 1.0 => b,
        (_, Expr::Const(o)) if *o == 1.0 => a,
        _ => Expr::Binary(BinaryOp::Mul, Box::new(a), Box::new(b)),
    }
}

pub fn div(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(z), _) if *z == 0.0 => Expr::Const(0.0),
        (_, Expr::Const(o)) if *o == 1.0 => a,
        (Expr::Const(x), Expr::Const(y)) if *y != 0.0 => Expr::Const(x / y),
        _ => Expr::Binary(BinaryOp::Div, Box::new(a), Box::new(b)),
    }
}

pub fn pow(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (_, Expr::Const(o)) if *o == 1.0 => a,
        (_, Expr::Const(z)) if *z == 0.0 => Expr::Const(1.0),
        _ => Expr::Binary(BinaryOp::Pow, Box::new(a), Box::new(b)),
    }
}

pub fn neg(a: Expr) -> Expr {
    match a {
        Expr::Const(c) => Expr::Const(-c),
        Expr::Unary(UnaryOp::Neg, inner) => *inner,
        other => Expr::Unary(UnaryOp::Neg, Box::new(other)),
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => {
                if *c < 0.0 {
                    write!(f, "({c:?})")
                } else {
                    write!(f, "{c:?}")
                }
            }
            Expr::Var => write!(f, "x"),
            Expr::Indicator { lo, hi, lo_closed, hi_closed } => write!(
                f,
                "ind({:?}, {:?}, {}, {})",
                lo, hi, *lo_closed as u8, *hi_closed as u8
            ),
            // Only produced by differentiation; printed as the indicator's derivative.
            Expr::Jump { lo, hi } => write!(f, "(0*ind({lo:?}, {hi:?}))"),
            Expr::Unary(op, a) => {
                let name = match op {
                    UnaryOp::Neg => return write!(f, "(-{a})"),
                    UnaryOp::Exp => "exp",
                    UnaryOp::Ln => "ln",
                    UnaryOp::Sin => "sin",
                    UnaryOp::Cos => "cos",
                    UnaryOp::Sqrt => "sqrt",
                    UnaryOp::Abs => "abs",
                };
                write!(f, "{name}({a})")
            }
            Expr::Binary(op, a, b) => {
                let sym = match op {
                    BinaryOp::Add => "+",
                    BinaryOp::Sub => "-",
                    BinaryOp::Mul => "*",
                    BinaryOp::Div => "/",
                    BinaryOp::Pow => "^",
                };
                write!(f, "({a} {sym} {b})")
            }
        }
    }
}

impl Serialize for Expr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        parse_expression(&text).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy)]
enum Instr {
    Const(f64),
    Var,
    Unary(UnaryOp),
    Binary(BinaryOp),
    Indicator { lo: f64, hi: f64, lo_closed: bool, hi_closed: bool },
    Zero,
}

const STACK: usize = 64;

/// Postfix form of an [`Expr`] for fast unchecked evaluation.
///
/// Domain errors surface as NaN or infinities; indicator derivatives evaluate to zero.
#[derive(Debug, Clone)]
pub struct Program {
    code: Vec<Instr>,
    fallback: Option<Expr>,
}

impl Program {
    fn new(e: &Expr) -> Program {
        let mut code = Vec::new();
        let depth = emit(e, &mut code);
        let fallback = if depth > STACK { Some(e.clone()) } else { None };
        Program { code, fallback }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        self.eval_side(x, Side::Exact)
    }

    pub fn eval_side(&self, x: f64, side: Side) -> f64 {
        if let Some(e) = &self.fallback {
            return e.eval_side(x, side).unwrap_or(f64::NAN);
        }
        let mut stack = [0.0f64; STACK];
        let mut sp = 0usize;
        for ins in &self.code {
            match *ins {
                Instr::Const(c) => {
                    stack[sp] = c;
                    sp += 1;
                }
                Instr::Var => {
                    stack[sp] = x;
                    sp += 1;
                }
                Instr::Zero => {
                    stack[sp] = 0.0;
                    sp += 1;
                }
                Instr::Indicator { lo, hi, lo_closed, hi_closed } => {
                    stack[sp] = indicator_value(x, lo, hi, lo_closed, hi_closed, side);
                    sp += 1;
                }
                Instr::Unary(op) => stack[sp - 1] = unary_value(op, stack[sp - 1]),
                Instr::Binary(op) => {
                    sp -= 1;
                    stack[sp - 1] = binary_value(op, stack[sp - 1], stack[sp]);
                }
            }
        }
        stack[0]
    }
}

fn emit(e: &Expr, code: &mut Vec<Instr>) -> usize {
    match e {
        Expr::Const(c) => {
            code.push(Instr::Const(*c));
            1
        }
        Expr::Var => {
            code.push(Instr::Var);
            1
        }
        Expr::Jump { .. } => {
            code.push(Instr::Zero);
            1
        }
        Expr::Indicator { lo, hi, lo_closed, hi_closed } => {
            code.push(Instr::Indicator {
                lo: *lo,
                hi: *hi,
                lo_closed: *lo_closed,
                hi_closed: *hi_closed,
            });
            1
        }
        Expr::Unary(op, a) => {
            let d = emit(a, code);
            code.push(Instr::Unary(*op));
            d
        }
        Expr::Binary(op, a, b) => {
            let da = emit(a, code);
            let db = emit(b, code);
            code.push(Instr::Binary(*op));
            da.max(db + 1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn ev(s: &str, x: f64) -> f64 {
        parse_expression(s).unwrap().eval(x).unwrap()
    }

    #[test]
    fn parses_model_examples() {
        assert_eq!(ev("x*(1-x)", 0.5), 0.25);
        assert_eq!(ev("6 - 0.5*x", 1.0), 5.5);
        assert_eq!(ev("6*ind(0,1)", 0.5), 6.0);
        assert_eq!(ev("6*ind(0,1)", 1.5), 0.0);
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(ev("-x^2", 3.0), -9.0);
        assert_eq!(ev("2^3^2", 0.0), 512.0);
        assert_eq!(ev("2^-1", 0.0), 0.5);
        assert_eq!(ev("1-2-3", 0.0), -4.0);
        assert_eq!(ev("8/4/2", 0.0), 1.0);
        assert_eq!(ev("1.5e2 + 2E-1", 0.0), 150.2);
        assert_relative_eq!(ev("sin(pi/2) + cos(0) + sqrt(4) + abs(neg(3)) + ln(exp(2))", 0.0), 9.0);
    }

    #[test]
    fn indicator_flags_and_sides() {
        let e = parse_expression("ind(0, 1, 0, 1)").unwrap();
        assert_eq!(e.eval(0.0).unwrap(), 0.0);
        assert_eq!(e.eval(1.0).unwrap(), 1.0);
        assert_eq!(e.eval_side(0.0, Side::Right).unwrap(), 1.0);
        assert_eq!(e.eval_side(1.0, Side::Right).unwrap(), 0.0);
        assert_eq!(e.eval_side(1.0, Side::Left).unwrap(), 1.0);
        assert_eq!(ev("ind(0,1)", 0.0), 1.0);
    }

    #[test]
    fn errors_carry_offsets() {
        match parse_expression("x + foo(2)") {
            Err(ParseError::UnknownIdentifier { offset, name }) => {
                assert_eq!(offset, 4);
                assert_eq!(name, "foo");
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(parse_expression("x + * 2").unwrap_err().offset(), 4);
        assert_eq!(parse_expression("(x + 1").unwrap_err().offset(), 6);
        assert!(parse_expression("ind(x, 1)").is_err());
        assert!(parse_expression("ind(2, 1)").is_err());
        assert!(parse_expression("exp(1, 2)").is_err());
        assert!(parse_expression("").is_err());
    }

    #[test]
    fn domain_errors_are_reported() {
        assert!(matches!(parse_expression("ln(x)").unwrap().eval(0.0), Err(EvalError::LogDomain(..))));
        assert!(matches!(parse_expression("sqrt(x)").unwrap().eval(-1.0), Err(EvalError::SqrtDomain(..))));
        assert!(matches!(parse_expression("1/x").unwrap().eval(0.0), Err(EvalError::DivisionByZero(_))));
    }

    #[test]
    fn derivative_examples() {
        let d = parse_expression("x*(1-x)").unwrap().differentiate();
        assert_eq!(d.eval(1.0).unwrap(), -1.0);
        let d = parse_expression("6-4*x").unwrap().differentiate();
        assert_eq!(d.eval(0.3).unwrap(), -4.0);
        let d = parse_expression("exp(x)").unwrap().differentiate();
        assert_eq!(d.eval(0.0).unwrap(), 1.0);
        let d = parse_expression("x^x").unwrap().differentiate();
        assert_relative_eq!(d.eval(2.0).unwrap(), 4.0 * (2f64.ln() + 1.0), max_relative = 1e-14);
    }

    #[test]
    fn indicator_derivative_is_undefined_only_at_breakpoints() {
        let d = parse_expression("6*ind(0,1)").unwrap().differentiate();
        assert_eq!(d.eval(0.5).unwrap(), 0.0);
        assert!(matches!(d.eval(1.0), Err(EvalError::Breakpoint(_))));
        assert_eq!(d.eval_side(1.0, Side::Left).unwrap(), 0.0);
    }

    #[test]
    fn display_round_trips() {
        for s in ["x*(1-x)", "-x^2 + 3", "6*ind(0,1,0,1)", "exp(-x)/(1+x^2)", "2^-1"] {
            let e = parse_expression(s).unwrap();
            let again = parse_expression(&e.to_string()).unwrap();
            for x in [-0.7, 0.0, 0.3, 1.0, 2.5] {
                let (a, b) = (e.eval(x), again.eval(x));
                assert_eq!(a, b, "{s} at {x}");
            }
        }
    }

    #[test]
    fn program_matches_tree() {
        let e = parse_expression("exp(-x)*sin(3*x) + x^3/(1+x^2) - 2*ind(-1, 0.5)").unwrap();
        let p = e.compile();
        for i in 0..100 {
            let x = -2.0 + 0.04 * i as f64;
            assert_eq!(p.eval(x), e.eval(x).unwrap());
        }
    }

    fn leaf() -> impl Strategy<Value = Expr> {
        prop_oneof![(-3.0f64..3.0).prop_map(Expr::Const), Just(Expr::Var)]
    }

    fn smooth_expr() -> impl Strategy<Value = Expr> {
        leaf().prop_recursive(4, 24, 2, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone()).prop_map(|(a, b)| add(a, b)),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| sub(a, b)),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| mul(a, b)),
                (inner.clone(), 0u8..4).prop_map(|(a, k)| pow(a, Expr::Const(k as f64))),
                // keep exponentials bounded
                inner
                    .clone()
                    .prop_map(|a| Expr::Unary(UnaryOp::Exp, Box::new(Expr::Unary(UnaryOp::Sin, Box::new(a))))),
                inner.prop_map(|a| Expr::Unary(UnaryOp::Exp, Box::new(mul(Expr::Const(0.3), a)))),
            ]
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn derivative_matches_central_difference(e in smooth_expr(), x in -1.5f64..1.5) {
            let h = 1e-4;
            let central = |h: f64| match (e.eval(x + h), e.eval(x - h)) {
                (Ok(fp), Ok(fm)) if fp.abs() < 1e3 && fm.abs() < 1e3 => Some((fp - fm) / (2.0 * h)),
                _ => None,
            };
            let (Some(d1), Some(d2), Some(d4)) = (central(h), central(h / 2.0), central(h / 4.0)) else {
                return Ok(());
            };
            let d = e.differentiate().eval(x).unwrap();
            // Two Richardson steps: truncation error O(h^6).
            let r1 = (4.0 * d2 - d1) / 3.0;
            let r2 = (4.0 * d4 - d2) / 3.0;
            let fd = (16.0 * r2 - r1) / 15.0;
            // Rapidly oscillating compositions defeat any fixed step; allow the spread of
            // the extrapolants as the difference error estimate.
            let spread = (r2 - r1).abs();
            prop_assert!((d - fd).abs() <= 1e-6 * (1.0 + d.abs()) + spread, "{e} at {x}: {d} vs {fd}");
        }

        #[test]
        fn display_parse_round_trip(e in smooth_expr(), x in -1.5f64..1.5) {
            let again = parse_expression(&e.to_string()).unwrap();
            let (a, b) = (e.eval(x), again.eval(x));
            prop_assert_eq!(a.is_ok(), b.is_ok());
            if let (Ok(a), Ok(b)) = (a, b) { prop_assert_eq!(a, b); }
        }
    }
}
