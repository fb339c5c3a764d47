use std::fmt;

use super::VarContext;
use crate::scalar::{Elementary, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
            BinOp::Pow => 4,
        }
    }
}

/// Function tags accepted in call syntax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Atan,
    Atan2,
    Exp,
    Ln,
    Sqrt,
    Pow,
}

impl Func {
    pub const ALL: [Func; 9] = [
        Func::Sin,
        Func::Cos,
        Func::Tan,
        Func::Atan,
        Func::Atan2,
        Func::Exp,
        Func::Ln,
        Func::Sqrt,
        Func::Pow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Atan => "atan",
            Func::Atan2 => "atan2",
            Func::Exp => "exp",
            Func::Ln => "ln",
            Func::Sqrt => "sqrt",
            Func::Pow => "pow",
        }
    }

    pub fn from_name(name: &str) -> Option<Func> {
        Func::ALL.into_iter().find(|f| f.name() == name)
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Atan2 | Func::Pow => 2,
            _ => 1,
        }
    }

    fn elementary(self) -> Option<Elementary> {
        Some(match self {
            Func::Sin => Elementary::Sin,
            Func::Cos => Elementary::Cos,
            Func::Tan => Elementary::Tan,
            Func::Atan => Elementary::Atan,
            Func::Exp => Elementary::Exp,
            Func::Ln => Elementary::Ln,
            Func::Sqrt => Elementary::Sqrt,
            Func::Atan2 | Func::Pow => return None,
        })
    }
}

/// Expression tree. Variables are indices into the [`VarContext`] the
/// expression was parsed against.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(usize),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

/// Why an evaluation left the domain of a function.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DomainFault {
    #[error("division by zero")]
    DivisionByZero,
    #[error("ln of non-positive argument {0}")]
    LogNonPositive(f64),
    #[error("sqrt of negative argument {0}")]
    SqrtNegative(f64),
    #[error("atan2(0, 0) is undefined")]
    Atan2Origin,
    #[error("{0} produced a non-finite value")]
    NonFinite(&'static str),
}

impl Expr {
    fn precedence(&self) -> u8 {
        match self {
            Expr::Binary(op, _, _) => op.precedence(),
            Expr::Neg(_) => 3,
            Expr::Const(_) | Expr::Var(_) | Expr::Call(_, _) => 5,
        }
    }

    /// Largest variable index referenced, if any.
    pub fn max_var(&self) -> Option<usize> {
        match self {
            Expr::Const(_) => None,
            Expr::Var(i) => Some(*i),
            Expr::Neg(e) => e.max_var(),
            Expr::Binary(_, a, b) => a.max_var().max(b.max_var()),
            Expr::Call(_, args) => args.iter().filter_map(Expr::max_var).max(),
        }
    }

    pub fn references(&self, var: usize) -> bool {
        match self {
            Expr::Const(_) => false,
            Expr::Var(i) => *i == var,
            Expr::Neg(e) => e.references(var),
            Expr::Binary(_, a, b) => a.references(var) || b.references(var),
            Expr::Call(_, args) => args.iter().any(|a| a.references(var)),
        }
    }

    pub fn eval<S: Scalar>(&self, vars: &[S]) -> Result<S, DomainFault> {
        let out = match self {
            Expr::Const(c) => S::constant(*c),
            Expr::Var(i) => vars[*i],
            Expr::Neg(e) => -e.eval(vars)?,
            Expr::Binary(op, a, b) => {
                let lhs = a.eval(vars)?;
                match (op, b.as_ref()) {
                    (BinOp::Pow, Expr::Const(c)) => pow_const(lhs, *c)?,
                    _ => binary(*op, lhs, b.eval(vars)?)?,
                }
            }
            Expr::Call(f, args) => match (f, args.as_slice()) {
                (Func::Atan2, [y, x]) => {
                    let (y, x) = (y.eval(vars)?, x.eval(vars)?);
                    if y.primal() == 0.0 && x.primal() == 0.0 {
                        return Err(DomainFault::Atan2Origin);
                    }
                    y.atan2_with(x)
                }
                (Func::Pow, [a, Expr::Const(c)]) => pow_const(a.eval(vars)?, *c)?,
                (Func::Pow, [a, b]) => binary(BinOp::Pow, a.eval(vars)?, b.eval(vars)?)?,
                (f, [a]) => {
                    let a = a.eval(vars)?;
                    match f {
                        Func::Ln if a.primal() <= 0.0 => {
                            return Err(DomainFault::LogNonPositive(a.primal()))
                        }
                        Func::Sqrt if a.primal() < 0.0 => {
                            return Err(DomainFault::SqrtNegative(a.primal()))
                        }
                        _ => {}
                    }
                    let e = f.elementary().expect("unary tag");
                    let v = a.apply(e);
                    if !v.all_finite() {
                        return Err(DomainFault::NonFinite(f.name()));
                    }
                    v
                }
                _ => unreachable!("arity is validated at parse time"),
            },
        };
        Ok(out)
    }

    /// Infix rendering with minimal parentheses. Re-parsing the output
    /// against the same context yields a structurally equal tree.
    pub fn render(&self, ctx: &VarContext) -> String {
        let mut out = String::new();
        self.write(ctx, &mut out);
        out
    }

    fn write(&self, ctx: &VarContext, out: &mut String) {
        match self {
            Expr::Const(c) => out.push_str(&format!("{c:?}")),
            Expr::Var(i) => out.push_str(ctx.name(*i)),
            Expr::Neg(e) => {
                out.push('-');
                write_child(e, ctx, out, e.precedence() < 3);
            }
            Expr::Binary(op, a, b) => {
                let p = op.precedence();
                let (left_paren, right_paren) = if *op == BinOp::Pow {
                    (a.precedence() <= p, b.precedence() < 3)
                } else {
                    (a.precedence() < p, b.precedence() <= p)
                };
                write_child(a, ctx, out, left_paren);
                out.push(' ');
                out.push_str(op.symbol());
                out.push(' ');
                write_child(b, ctx, out, right_paren);
            }
            Expr::Call(f, args) => {
                out.push_str(f.name());
                out.push('(');
                for (k, a) in args.iter().enumerate() {
                    if k > 0 {
                        out.push_str(", ");
                    }
                    a.write(ctx, out);
                }
                out.push(')');
            }
        }
    }
}

fn write_child(e: &Expr, ctx: &VarContext, out: &mut String, paren: bool) {
    if paren {
        out.push('(');
    }
    e.write(ctx, out);
    if paren {
        out.push(')');
    }
}

fn binary<S: Scalar>(op: BinOp, a: S, b: S) -> Result<S, DomainFault> {
    let v = match op {
        BinOp::Add => a + b,
        BinOp::Sub => a - b,
        BinOp::Mul => a * b,
        BinOp::Div => {
            if b.primal() == 0.0 {
                return Err(DomainFault::DivisionByZero);
            }
            a / b
        }
        BinOp::Pow => {
            let v = a.pow_real(b);
            if !v.all_finite() {
                return Err(DomainFault::NonFinite("pow"));
            }
            v
        }
    };
    Ok(v)
}

fn pow_const<S: Scalar>(base: S, exponent: f64) -> Result<S, DomainFault> {
    let v = if exponent.fract() == 0.0 && exponent.abs() <= 64.0 {
        if exponent < 0.0 && base.primal() == 0.0 {
            return Err(DomainFault::DivisionByZero);
        }
        base.pow_int(exponent as i32)
    } else {
        base.pow_real(S::constant(exponent))
    };
    if !v.all_finite() {
        return Err(DomainFault::NonFinite("pow"));
    }
    Ok(v)
}

/// Wraps an expression with its context for `Display`.
pub struct Rendered<'a>(pub &'a Expr, pub &'a VarContext);

impl fmt::Display for Rendered<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.render(self.1))
    }
}
