//! Implicit control systems `F(x, ẋ) = 0` with an explicit parameterization
//! `ẋ = f(x, u)` of the admissible velocities.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::expr::{ExprError, SmoothMap, VarContext};
use crate::numlin::{
    gauss_newton_solve, null_space, subspace_contains, svd_rank, DiffMap, GaussNewtonOptions,
    NumError, DEFAULT_INCLUSION_TOL, DEFAULT_RANK_TOL,
};
use crate::sampling::GaussianStream;
use crate::scalar::{lit, Real};

pub const DEFAULT_CONSISTENCY_TOL: f64 = 1e-9;
pub const EQUILIBRIUM_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SystemError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("consistency failure at sample {sample}: {check} (residual {residual:e})")]
    ConsistencyFailure {
        sample: usize,
        check: ConsistencyCheck,
        residual: f64,
    },
    #[error("equilibrium search did not converge (residual {residual:e})")]
    NoConvergence { residual: f64 },
    #[error(transparent)]
    Domain(#[from] ExprError),
    #[error(transparent)]
    Numeric(#[from] NumError),
}

/// Which standing assumption a consistency sample violated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyCheck {
    /// `F(x, f(x, u)) = 0`
    Parameterization,
    /// `rank ∂F/∂p = n − m`
    ImplicitRank,
    /// `Im ∂f/∂u = Ker ∂F/∂p` and `rank ∂f/∂u = m`
    InputKernel,
}

impl fmt::Display for ConsistencyCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConsistencyCheck::Parameterization => "F(x, f(x,u)) != 0",
            ConsistencyCheck::ImplicitRank => "rank dF/dp != n - m",
            ConsistencyCheck::InputKernel => "Im df/du != Ker dF/dp",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitSystem {
    n: usize,
    m: usize,
    implicit: SmoothMap,
    explicit: SmoothMap,
}

impl ImplicitSystem {
    /// `implicit` must be a map over [`VarContext::implicit`] with `n − m`
    /// components; `explicit` a map over [`VarContext::explicit`] with `n`.
    pub fn new(n: usize, m: usize, implicit: SmoothMap, explicit: SmoothMap) -> Result<Self, SystemError> {
        if m == 0 || m > n {
            return Err(SystemError::Dimension(format!(
                "input dimension must satisfy 0 < m <= n, got n = {n}, m = {m}"
            )));
        }
        if implicit.context() != &VarContext::implicit(n) || implicit.output_dim() != n - m {
            return Err(SystemError::Dimension(format!(
                "F must map (x1..x{n}, p1..p{n}) to {} components, got {}",
                n - m,
                implicit.output_dim()
            )));
        }
        if explicit.context() != &VarContext::explicit(n, m) || explicit.output_dim() != n {
            return Err(SystemError::Dimension(format!(
                "f must map (x1..x{n}, u1..u{m}) to {n} components, got {}",
                explicit.output_dim()
            )));
        }
        Ok(Self {
            n,
            m,
            implicit,
            explicit,
        })
    }

    /// Parses `F` and `f` component lists.
    pub fn parse<S: AsRef<str>>(n: usize, m: usize, implicit: &[S], explicit: &[S]) -> Result<Self, SystemError> {
        let big_f = SmoothMap::parse(VarContext::implicit(n), implicit)?;
        let f = SmoothMap::parse(VarContext::explicit(n, m), explicit)?;
        Self::new(n, m, big_f, f)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn implicit(&self) -> &SmoothMap {
        &self.implicit
    }

    pub fn explicit(&self) -> &SmoothMap {
        &self.explicit
    }

    fn concat<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
        a.iter().chain(b).copied().collect()
    }

    /// `F(x, p)`.
    pub fn residual<T: Real>(&self, x: &[T], p: &[T]) -> Result<DVector<T>, ExprError> {
        Ok(DVector::from_vec(self.implicit.eval(&Self::concat(x, p))?))
    }

    /// `(∂F/∂x, ∂F/∂p)` at `(x, p)`.
    pub fn implicit_jacobians<T: Real>(&self, x: &[T], p: &[T]) -> Result<(DMatrix<T>, DMatrix<T>), ExprError> {
        let j = self.implicit.jacobian(&Self::concat(x, p))?;
        let n = self.n;
        Ok((j.columns(0, n).into_owned(), j.columns(n, n).into_owned()))
    }

    /// `f(x, u)`.
    pub fn velocity<T: Real>(&self, x: &[T], u: &[T]) -> Result<DVector<T>, ExprError> {
        Ok(DVector::from_vec(self.explicit.eval(&Self::concat(x, u))?))
    }

    /// `(∂f/∂x, ∂f/∂u)` at `(x, u)`.
    pub fn explicit_jacobians<T: Real>(&self, x: &[T], u: &[T]) -> Result<(DMatrix<T>, DMatrix<T>), ExprError> {
        let j = self.explicit.jacobian(&Self::concat(x, u))?;
        Ok((
            j.columns(0, self.n).into_owned(),
            j.columns(self.n, self.m).into_owned(),
        ))
    }
}

/// `u ↦ f(x, u)` for a fixed state.
pub struct InputMap<'a, T> {
    sys: &'a ImplicitSystem,
    x: &'a [T],
}

impl<'a, T: Real> InputMap<'a, T> {
    pub fn new(sys: &'a ImplicitSystem, x: &'a [T]) -> Self {
        Self { sys, x }
    }
}

impl<T: Real> DiffMap<T> for InputMap<'_, T> {
    fn input_dim(&self) -> usize {
        self.sys.m
    }

    fn output_dim(&self) -> usize {
        self.sys.n
    }

    fn value(&self, u: &[T]) -> Result<DVector<T>, ExprError> {
        self.sys.velocity(self.x, u)
    }

    fn jacobian(&self, u: &[T]) -> Result<DMatrix<T>, ExprError> {
        Ok(self.sys.explicit_jacobians(self.x, u)?.1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumPoint<T> {
    pub x: DVector<T>,
    pub u: DVector<T>,
    /// `‖f(x, u)‖`
    pub residual: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarietyPoint<T> {
    pub x: DVector<T>,
    pub p: DVector<T>,
    pub u: DVector<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarietySample<T> {
    pub points: Vec<VarietyPoint<T>>,
    pub seed: u64,
    pub scale: f64,
}

/// Per-sample maxima gathered by [`check_consistency`].
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ConsistencyReport {
    pub samples: usize,
    pub seed: u64,
    pub tol: f64,
    pub max_parameterization_residual: f64,
    pub implicit_rank: usize,
    pub input_rank: usize,
    /// Largest of the two inclusion residuals between `Im ∂f/∂u` and `Ker ∂F/∂p`.
    pub max_kernel_residual: f64,
}

/// Verifies the standing assumptions on seeded Gaussian `(x, u)` samples:
/// `F(x, f(x,u)) = 0`, `rank ∂F/∂p = n − m` and `Im ∂f/∂u = Ker ∂F/∂p`.
///
/// Only the rank-`m` immersion of `u ↦ f(x, u)` is checked; fiberwise
/// injectivity is not numerically decidable.
pub fn check_consistency(
    sys: &ImplicitSystem,
    n_samples: usize,
    seed: u64,
    scale: f64,
    tol: f64,
) -> Result<ConsistencyReport, SystemError> {
    let mut stream = GaussianStream::new(seed, scale);
    let mut report = ConsistencyReport {
        samples: n_samples,
        seed,
        tol,
        max_parameterization_residual: 0.0,
        implicit_rank: sys.n - sys.m,
        input_rank: sys.m,
        max_kernel_residual: 0.0,
    };
    let rank_tol = DEFAULT_RANK_TOL;
    for sample in 0..n_samples {
        let x: DVector<f64> = stream.next_vector(sys.n);
        let u: DVector<f64> = stream.next_vector(sys.m);
        let p = sys.velocity(x.as_slice(), u.as_slice())?;
        let fail = |check, residual| SystemError::ConsistencyFailure {
            sample,
            check,
            residual,
        };

        let res = sys.residual(x.as_slice(), p.as_slice())?.norm();
        report.max_parameterization_residual = report.max_parameterization_residual.max(res);
        if res > tol {
            return Err(fail(ConsistencyCheck::Parameterization, res));
        }

        let (_, jp) = sys.implicit_jacobians(x.as_slice(), p.as_slice())?;
        let rank = svd_rank(&jp, rank_tol)?.rank;
        if rank != sys.n - sys.m {
            return Err(fail(ConsistencyCheck::ImplicitRank, rank as f64));
        }

        let (_, b) = sys.explicit_jacobians(x.as_slice(), u.as_slice())?;
        let input_rank = svd_rank(&b, rank_tol)?.rank;
        let kernel = null_space(&jp, rank_tol)?;
        let forward = subspace_contains(&kernel, &b, DEFAULT_INCLUSION_TOL)?;
        let backward = subspace_contains(&b, &kernel, DEFAULT_INCLUSION_TOL)?;
        let kres = forward.residual.max(backward.residual);
        report.max_kernel_residual = report.max_kernel_residual.max(kres);
        if input_rank != sys.m || !forward.contained || !backward.contained {
            return Err(fail(ConsistencyCheck::InputKernel, kres));
        }
    }
    Ok(report)
}

/// Gauss-Newton solve of `f(x, u) = 0` in `(x, u)` jointly.
pub fn find_equilibrium<T: Real>(
    sys: &ImplicitSystem,
    x_guess: &DVector<T>,
    u_guess: &DVector<T>,
) -> Result<EquilibriumPoint<T>, SystemError> {
    let init = DVector::from_iterator(sys.n + sys.m, x_guess.iter().chain(u_guess.iter()).copied());
    let opts = GaussNewtonOptions {
        tol: lit(EQUILIBRIUM_TOL),
        ..Default::default()
    };
    let res = gauss_newton_solve(&sys.explicit, &DVector::zeros(sys.n), &init, &opts)?;
    if !res.converged {
        return Err(SystemError::NoConvergence {
            residual: res.residual_norm.primal(),
        });
    }
    Ok(EquilibriumPoint {
        x: res.solution.rows(0, sys.n).into_owned(),
        u: res.solution.rows(sys.n, sys.m).into_owned(),
        residual: res.residual_norm,
    })
}

/// Solves `f(x₀, u) = 0` for `u` with the state held fixed.
pub fn equilibrium_input<T: Real>(
    sys: &ImplicitSystem,
    x0: &DVector<T>,
    u_guess: &DVector<T>,
) -> Result<EquilibriumPoint<T>, SystemError> {
    let map = InputMap::new(sys, x0.as_slice());
    let opts = GaussNewtonOptions {
        tol: lit(EQUILIBRIUM_TOL),
        ..Default::default()
    };
    let res = gauss_newton_solve(&map, &DVector::zeros(sys.n), u_guess, &opts)?;
    if !res.converged {
        return Err(SystemError::NoConvergence {
            residual: res.residual_norm.primal(),
        });
    }
    Ok(EquilibriumPoint {
        x: x0.clone(),
        u: res.solution,
        residual: res.residual_norm,
    })
}

/// Draws `x ~ N(0, scale² I)`, `u ~ N(0, scale² I)` and sets `p = f(x, u)`.
pub fn sample_variety<T: Real>(
    sys: &ImplicitSystem,
    n_samples: usize,
    seed: u64,
    scale: f64,
) -> Result<VarietySample<T>, SystemError> {
    let mut stream = GaussianStream::new(seed, scale);
    let mut points = Vec::with_capacity(n_samples);
    for sample in 0..n_samples {
        let x: DVector<T> = stream.next_vector(sys.n);
        let u: DVector<T> = stream.next_vector(sys.m);
        let p = sys.velocity(x.as_slice(), u.as_slice())?;
        let res = sys.residual(x.as_slice(), p.as_slice())?.norm().primal();
        if res > DEFAULT_CONSISTENCY_TOL {
            return Err(SystemError::ConsistencyFailure {
                sample,
                check: ConsistencyCheck::Parameterization,
                residual: res,
            });
        }
        points.push(VarietyPoint { x, p, u });
    }
    Ok(VarietySample {
        points,
        seed,
        scale,
    })
}
