//! Expression language: parsing, evaluation and forward-mode derivatives.

mod ast;
mod parse;

use nalgebra::DMatrix;

pub use ast::{BinOp, DomainFault, Expr, Func, Rendered};
pub use parse::parse_expression;

use crate::scalar::{Dual, Real, Scalar};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExprError {
    #[error("syntax error at offset {pos}: expected {expected}")]
    Syntax { pos: usize, expected: String },
    #[error("unknown variable '{0}'")]
    UnknownVariable(String),
    #[error("unknown function '{name}' at offset {pos}")]
    UnknownFunction { name: String, pos: usize },
    #[error("function {func} takes {want} argument(s), got {got}")]
    Arity {
        func: &'static str,
        got: usize,
        want: usize,
    },
    #[error("duplicate variable name '{0}'")]
    DuplicateVariable(String),
    #[error("invalid variable name '{0}'")]
    InvalidName(String),
    #[error("expected a point of dimension {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("domain error in component {component}: {fault}")]
    Domain { component: usize, fault: DomainFault },
}

/// Ordered list of variable names an expression may refer to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VarContext {
    names: Vec<String>,
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl VarContext {
    pub fn new<I, S>(names: I) -> Result<Self, ExprError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut out: Vec<String> = Vec::new();
        for n in names {
            let n = n.into();
            if !is_identifier(&n) || Func::from_name(&n).is_some() {
                return Err(ExprError::InvalidName(n));
            }
            if out.contains(&n) {
                return Err(ExprError::DuplicateVariable(n));
            }
            out.push(n);
        }
        Ok(Self { names: out })
    }

    fn generated(names: Vec<String>) -> Self {
        Self { names }
    }

    /// `x1..xn, p1..pn`: arguments of an implicit system map `F(x, p)`.
    pub fn implicit(n: usize) -> Self {
        let mut names: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
        names.extend((1..=n).map(|i| format!("p{i}")));
        Self::generated(names)
    }

    /// `x1..xn, u1..um`: arguments of an explicit vector field `f(x, u)`.
    pub fn explicit(n: usize, m: usize) -> Self {
        let mut names: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
        names.extend((1..=m).map(|i| format!("u{i}")));
        Self::generated(names)
    }

    /// `y{order}_{channel}` for orders `0..levels` and channels `1..=m`,
    /// level-major.
    pub fn jet(m: usize, levels: usize) -> Self {
        Self::generated(jet_names("y", m, levels))
    }

    /// `x{order}_{component}` for orders `0..levels` and components `1..=n`.
    pub fn state_jet(n: usize, levels: usize) -> Self {
        Self::generated(jet_names("x", n, levels))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

fn jet_names(prefix: &str, width: usize, levels: usize) -> Vec<String> {
    (0..levels)
        .flat_map(|k| (1..=width).map(move |j| format!("{prefix}{k}_{j}")))
        .collect()
}

/// Splits a jet variable name `y{order}_{channel}` into `(order, channel)`.
pub fn parse_jet_name(name: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix('y')?;
    let (order, channel) = rest.split_once('_')?;
    let well_formed = |s: &str| {
        !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()) && (s == "0" || !s.starts_with('0'))
    };
    if !well_formed(order) || !well_formed(channel) {
        return None;
    }
    let channel: usize = channel.parse().ok()?;
    (channel >= 1).then_some((order.parse().ok()?, channel))
}

/// A vector-valued map `R^k -> R^l` given by one expression per component.
///
/// Immutable once built; evaluation takes `&self` and is safe to share
/// across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothMap {
    ctx: VarContext,
    components: Vec<Expr>,
}

impl SmoothMap {
    pub fn new(ctx: VarContext, components: Vec<Expr>) -> Self {
        debug_assert!(components
            .iter()
            .all(|c| c.max_var().is_none_or(|i| i < ctx.len())));
        Self { ctx, components }
    }

    pub fn parse<S: AsRef<str>>(ctx: VarContext, texts: &[S]) -> Result<Self, ExprError> {
        let components = texts
            .iter()
            .map(|t| parse_expression(t.as_ref(), &ctx))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { ctx, components })
    }

    pub fn context(&self) -> &VarContext {
        &self.ctx
    }

    pub fn components(&self) -> &[Expr] {
        &self.components
    }

    pub fn input_dim(&self) -> usize {
        self.ctx.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.len()
    }

    pub fn render(&self) -> Vec<String> {
        self.components.iter().map(|c| c.render(&self.ctx)).collect()
    }

    fn check_dim(&self, got: usize) -> Result<(), ExprError> {
        if got != self.input_dim() {
            return Err(ExprError::Dimension {
                expected: self.input_dim(),
                got,
            });
        }
        Ok(())
    }

    fn eval_with<S: Scalar>(&self, args: &[S]) -> Result<Vec<S>, ExprError> {
        self.components
            .iter()
            .enumerate()
            .map(|(component, e)| {
                e.eval(args)
                    .map_err(|fault| ExprError::Domain { component, fault })
            })
            .collect()
    }

    /// Componentwise evaluation over any [`Scalar`].
    pub fn eval<S: Scalar>(&self, point: &[S]) -> Result<Vec<S>, ExprError> {
        self.check_dim(point.len())?;
        self.eval_with(point)
    }

    /// Exact `l × k` Jacobian via one forward-mode pass per input.
    pub fn jacobian<T: Real>(&self, point: &[T]) -> Result<DMatrix<T>, ExprError> {
        self.check_dim(point.len())?;
        let (l, k) = (self.output_dim(), self.input_dim());
        let mut jac = DMatrix::zeros(l, k);
        let mut args: Vec<Dual<T>> = point.iter().map(|&v| Dual::constant_of(v)).collect();
        for j in 0..k {
            args[j] = Dual::variable(point[j]);
            let out = self.eval_with(&args)?;
            for (i, o) in out.into_iter().enumerate() {
                jac[(i, j)] = o.eps;
            }
            args[j] = Dual::constant_of(point[j]);
        }
        Ok(jac)
    }

    /// Central-difference Jacobian with step `h`.
    pub fn fd_jacobian<T: Real>(&self, point: &[T], h: T) -> Result<DMatrix<T>, ExprError> {
        self.check_dim(point.len())?;
        let (l, k) = (self.output_dim(), self.input_dim());
        let mut jac = DMatrix::zeros(l, k);
        let mut probe = point.to_vec();
        let two_h = h + h;
        for j in 0..k {
            probe[j] = point[j] + h;
            let plus = self.eval_with(&probe)?;
            probe[j] = point[j] - h;
            let minus = self.eval_with(&probe)?;
            probe[j] = point[j];
            for i in 0..l {
                jac[(i, j)] = (plus[i] - minus[i]) / two_h;
            }
        }
        Ok(jac)
    }

    /// `d/dε J(point + ε·dir)` at `ε = 0`, via nested duals.
    pub fn directional_second<T: Real>(
        &self,
        point: &[T],
        dir: &[T],
    ) -> Result<DMatrix<T>, ExprError> {
        self.check_dim(point.len())?;
        self.check_dim(dir.len())?;
        let (l, k) = (self.output_dim(), self.input_dim());
        let mut out = DMatrix::zeros(l, k);
        let inner = |j: usize| Dual::new(point[j], dir[j]);
        let mut args: Vec<Dual<Dual<T>>> = (0..k).map(|j| Dual::constant_of(inner(j))).collect();
        for j in 0..k {
            args[j] = Dual::new(inner(j), Dual::constant_of(T::constant(1.0)));
            let vals = self.eval_with(&args)?;
            for (i, v) in vals.into_iter().enumerate() {
                out[(i, j)] = v.eps.eps;
            }
            args[j] = Dual::constant_of(inner(j));
        }
        Ok(out)
    }
}
