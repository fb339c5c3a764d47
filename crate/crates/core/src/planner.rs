//! Flat trajectory planning: a polynomial flat output meeting prescribed
//! boundary jets, the state and input trajectories it induces through `φ`,
//! and pointwise verification of `F(x, ẋ) = 0` along them.
//!
//! Derivatives of `y` come from the polynomial exactly. Finite differences
//! appear only in the optional `ψ` round trip, which needs derivatives of `x`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::expr::{ExprError, SmoothMap, VarContext};
use crate::jet::{check_dims, total_derivative, JetError, JetPoint, ParameterFunction};
use crate::numlin::{gauss_newton_solve, pinv_solve, solve_linear, GaussNewtonOptions, NumError};
use crate::scalar::{lit, Real};
use crate::system::{ImplicitSystem, InputMap};

pub const INPUT_TOL: f64 = 1e-9;
pub const DEFAULT_ROUNDTRIP_TOL: f64 = 1e-4;
/// Grid nodes required per order of `ψ` for the finite-difference round trip.
pub const NODES_PER_PSI_ORDER: usize = 50;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlanError {
    #[error("horizon must be positive and finite, got {0}")]
    InvalidHorizon(f64),
    #[error("degree {degree} is below the minimum {min} for boundary jets with {levels} levels")]
    DegreeTooLow { degree: usize, min: usize, levels: usize },
    #[error("t = {t} lies outside [0, {horizon}]")]
    OutOfHorizon { t: f64, horizon: f64 },
    #[error("psi of order {order} needs at least {needed} grid intervals, got {got}")]
    InsufficientGrid { order: usize, needed: usize, got: usize },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error(transparent)]
    Numeric(#[from] NumError),
    #[error(transparent)]
    Jet(#[from] JetError),
    #[error(transparent)]
    Domain(#[from] ExprError),
}

/// One polynomial per flat channel on `[0, T]`, coefficients in ascending powers.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyPath<T> {
    coeffs: Vec<DVector<T>>,
    levels: usize,
    horizon: T,
}

impl<T: Real> PolyPath<T> {
    pub fn channels(&self) -> usize {
        self.coeffs.len()
    }

    pub fn degree(&self) -> usize {
        self.coeffs[0].len() - 1
    }

    pub fn horizon(&self) -> T {
        self.horizon
    }

    /// Number of jet levels produced by [`eval_flat_jet`].
    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn coefficients(&self, channel: usize) -> &DVector<T> {
        &self.coeffs[channel]
    }

    fn derivative_at(&self, channel: usize, order: usize, t: T) -> T {
        let c = &self.coeffs[channel];
        let mut acc = T::zero();
        for j in (order..c.len()).rev() {
            acc = acc * t + c[j] * lit(falling_factorial(j, order));
        }
        acc
    }
}

/// `j! / (j − k)!`
fn falling_factorial(j: usize, k: usize) -> f64 {
    ((j + 1 - k)..=j).map(|v| v as f64).product()
}

/// Fits per-channel polynomials of `degree` matching `start` at `t = 0` and
/// `end` at `t = horizon` through every level of the jets.
///
/// With `degree = 2L − 1` for `L` levels the interpolation system is square;
/// higher degrees return the minimum-norm coefficient vector.
pub fn fit_flat_path<T: Real>(
    start: &JetPoint<T>,
    end: &JetPoint<T>,
    horizon: T,
    degree: usize,
) -> Result<PolyPath<T>, PlanError> {
    let (m, levels) = (start.width(), start.levels());
    if end.width() != m || end.levels() != levels {
        return Err(PlanError::Dimension(format!(
            "start jet has {levels} levels of width {m}, end jet has {} of width {}",
            end.levels(),
            end.width()
        )));
    }
    if !(horizon.is_finite() && horizon > T::zero()) {
        return Err(PlanError::InvalidHorizon(horizon.primal()));
    }
    let min = 2 * levels - 1;
    if degree < min {
        return Err(PlanError::DegreeTooLow { degree, min, levels });
    }
    let mut a = DMatrix::zeros(2 * levels, degree + 1);
    for k in 0..levels {
        a[(k, k)] = lit(falling_factorial(k, k));
        let mut power = T::one();
        for j in k..=degree {
            a[(levels + k, j)] = power * lit(falling_factorial(j, k));
            power *= horizon;
        }
    }
    let mut coeffs = Vec::with_capacity(m);
    for ch in 0..m {
        let b = DVector::from_iterator(
            2 * levels,
            (0..levels).map(|k| start.level(k)[ch]).chain((0..levels).map(|k| end.level(k)[ch])),
        );
        let c = if degree == min {
            solve_linear(&a, &b)?
        } else {
            pinv_solve(&a, &b, lit(1e-13))?
        };
        coeffs.push(c);
    }
    Ok(PolyPath {
        coeffs,
        levels,
        horizon,
    })
}

/// `(y, ẏ, …, y^{(L−1)})(t)` from the polynomial.
pub fn eval_flat_jet<T: Real>(path: &PolyPath<T>, t: T) -> Result<JetPoint<T>, PlanError> {
    if !(t >= T::zero() && t <= path.horizon) {
        return Err(PlanError::OutOfHorizon {
            t: t.primal(),
            horizon: path.horizon.primal(),
        });
    }
    let m = path.channels();
    let data = DVector::from_iterator(
        m * path.levels,
        (0..path.levels).flat_map(|k| (0..m).map(move |ch| (k, ch))).map(|(k, ch)| path.derivative_at(ch, k, t)),
    );
    Ok(JetPoint::from_flat(m, data)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryNode<T> {
    pub t: T,
    pub jet: JetPoint<T>,
    pub x: Option<DVector<T>>,
    pub xdot: Option<DVector<T>>,
    pub u: Option<DVector<T>>,
    /// `‖F(x, ẋ)‖`
    pub residual: Option<T>,
    /// `‖f(x, u) − ẋ‖`
    pub input_residual: Option<T>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub nodes: Vec<TrajectoryNode<T>>,
}

impl<T: Real> Trajectory<T> {
    pub fn max_residual(&self) -> Option<f64> {
        self.nodes.iter().filter_map(|n| n.residual.map(|r| r.primal())).reduce(f64::max)
    }

    pub fn failed_nodes(&self) -> usize {
        self.nodes.iter().filter(|n| n.error.is_some()).count()
    }

    pub fn inputs_recovered(&self) -> bool {
        self.nodes.iter().all(|n| n.u.is_some())
    }
}

/// Uniform grid `t_k = T·k/N`, `k = 0..=N`, with the last node exactly `T`.
pub fn uniform_grid<T: Real>(horizon: T, grid_n: usize) -> Vec<T> {
    let n = grid_n.max(1);
    (0..=n)
        .map(|k| if k == n { horizon } else { horizon * lit(k as f64) / lit(n as f64) })
        .collect()
}

/// States `x = φ(jet)` and velocities `ẋ = 𝓛φ(jet)` on a uniform grid, with
/// the implicit residual at each node. Failures are recorded per node.
pub fn synthesize_trajectory<T: Real>(
    sys: &ImplicitSystem,
    pf: &ParameterFunction,
    path: &PolyPath<T>,
    grid_n: usize,
) -> Result<Trajectory<T>, PlanError> {
    check_dims(sys, pf)?;
    if path.channels() != pf.m() || path.levels() != pf.levels() {
        return Err(PlanError::Dimension(format!(
            "path has {} channels and {} levels, phi needs {} and {}",
            path.channels(),
            path.levels(),
            pf.m(),
            pf.levels()
        )));
    }
    let mut nodes = Vec::with_capacity(grid_n + 1);
    for t in uniform_grid(path.horizon, grid_n) {
        let jet = eval_flat_jet(path, t)?;
        let mut node = TrajectoryNode {
            t,
            jet,
            x: None,
            xdot: None,
            u: None,
            residual: None,
            input_residual: None,
            error: None,
        };
        let outcome = (|| -> Result<(DVector<T>, DVector<T>, T), JetError> {
            let x = DVector::from_vec(pf.map().eval(node.jet.head())?);
            let xdot = total_derivative(pf, &node.jet)?;
            let res = sys.residual(x.as_slice(), xdot.as_slice())?.norm();
            Ok((x, xdot, res))
        })();
        match outcome {
            Ok((x, xdot, res)) => {
                node.x = Some(x);
                node.xdot = Some(xdot);
                node.residual = Some(res);
            }
            Err(e) => node.error = Some(e.to_string()),
        }
        nodes.push(node);
    }
    Ok(Trajectory { nodes })
}

/// Solves `f(x, u) = ẋ` for `u` at each node by Gauss-Newton, warm-started
/// from the previous node. Nodes that do not reach [`INPUT_TOL`] keep `u`
/// empty and carry an error.
pub fn recover_inputs<T: Real>(sys: &ImplicitSystem, mut traj: Trajectory<T>) -> Trajectory<T> {
    let opts = GaussNewtonOptions {
        tol: lit(INPUT_TOL),
        ..Default::default()
    };
    let mut guess = DVector::zeros(sys.m());
    for node in traj.nodes.iter_mut() {
        let (Some(x), Some(xdot)) = (&node.x, &node.xdot) else {
            continue;
        };
        let map = InputMap::new(sys, x.as_slice());
        match gauss_newton_solve(&map, xdot, &guess, &opts) {
            Ok(sol) if sol.converged => {
                guess = sol.solution.clone();
                node.input_residual = Some(sol.residual_norm);
                node.u = Some(sol.solution);
            }
            Ok(sol) => {
                node.input_residual = Some(sol.residual_norm);
                node.error = Some(format!(
                    "input recovery did not converge (residual {:e})",
                    sol.residual_norm.primal()
                ));
            }
            Err(e) => node.error = Some(format!("input recovery failed: {e}")),
        }
    }
    traj
}

/// User-supplied inverse `y = ψ(x, ẋ, …, x^{(s)})` over `x{k}_{j}` names.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatOutputMap {
    psi: SmoothMap,
    order: usize,
}

impl FlatOutputMap {
    pub fn parse<S: AsRef<str>>(n: usize, m: usize, order: usize, components: &[S]) -> Result<Self, PlanError> {
        Self::new(n, m, order, SmoothMap::parse(VarContext::state_jet(n, order + 1), components)?)
    }

    pub fn new(n: usize, m: usize, order: usize, psi: SmoothMap) -> Result<Self, PlanError> {
        if psi.context() != &VarContext::state_jet(n, order + 1) {
            return Err(PlanError::Dimension(format!("psi must be a map over x0_1..x{order}_{n}")));
        }
        if psi.output_dim() != m {
            return Err(PlanError::Dimension(format!(
                "psi has {} components, expected m = {m}",
                psi.output_dim()
            )));
        }
        Ok(Self { psi, order })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn map(&self) -> &SmoothMap {
        &self.psi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundtripReport {
    pub order: usize,
    pub nodes_checked: usize,
    pub max_error: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Central difference weights for the `order`-th derivative on unit
/// spacing, over offsets `−w..=w`.
fn central_stencil(order: usize) -> Vec<f64> {
    // Even orders: binomial second-difference powers. Odd orders: that
    // stencil convolved with the centered first difference.
    let even = order - order % 2;
    let mut stencil = vec![1.0];
    for _ in 0..even / 2 {
        stencil = convolve(&stencil, &[1.0, -2.0, 1.0]);
    }
    if order % 2 == 1 {
        stencil = convolve(&stencil, &[-0.5, 0.0, 0.5]);
    }
    stencil
}

fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// Rebuilds `y` from the synthesized states through `ψ`, differencing `x` on
/// the grid where `ψ` needs derivatives. Only nodes whose whole stencil lies
/// on the grid are checked.
pub fn roundtrip_check<T: Real>(
    psi: &FlatOutputMap,
    traj: &Trajectory<T>,
    tol: f64,
) -> Result<RoundtripReport, PlanError> {
    let s = psi.order;
    let intervals = traj.nodes.len().saturating_sub(1);
    let needed = NODES_PER_PSI_ORDER * s;
    if intervals < needed || traj.nodes.len() < 2 {
        return Err(PlanError::InsufficientGrid {
            order: s,
            needed: needed.max(1),
            got: intervals,
        });
    }
    let h = traj.nodes[1].t - traj.nodes[0].t;
    let stencils: Vec<Vec<f64>> = (0..=s).map(central_stencil).collect();
    let half = stencils.iter().map(|st| st.len() / 2).max().unwrap_or(0);
    let mut max_error: f64 = 0.0;
    let mut checked = 0;
    for k in half..traj.nodes.len() - half {
        let window = &traj.nodes[k - half..=k + half];
        let Some(xs) = window.iter().map(|n| n.x.as_ref()).collect::<Option<Vec<_>>>() else {
            continue;
        };
        let mut args = Vec::with_capacity(xs[0].len() * (s + 1));
        for (order, st) in stencils.iter().enumerate() {
            let w = st.len() / 2;
            let scale = T::one() / h.pow_int(order as i32);
            let mut d = DVector::zeros(xs[0].len());
            for (off, c) in st.iter().enumerate() {
                d += xs[half - w + off] * lit::<T>(*c);
            }
            args.extend((d * scale).iter().copied());
        }
        let Ok(y) = psi.psi.eval(&args) else {
            continue;
        };
        let target = traj.nodes[k].jet.level(0);
        let err = y.iter().zip(target).map(|(a, b)| (*a - *b).primal().powi(2)).sum::<f64>().sqrt();
        max_error = max_error.max(err);
        checked += 1;
    }
    Ok(RoundtripReport {
        order: s,
        nodes_checked: checked,
        max_error,
        tol,
        pass: checked > 0 && max_error <= tol,
    })
}

/// Serializable snapshot of a trajectory; missing entries are `null`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryExport {
    pub columns: Vec<String>,
    pub nodes: Vec<NodeExport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeExport {
    pub t: f64,
    pub y: Vec<f64>,
    pub x: Option<Vec<f64>>,
    pub xdot: Option<Vec<f64>>,
    pub u: Option<Vec<f64>>,
    pub residual: Option<f64>,
    pub input_residual: Option<f64>,
    pub error: Option<String>,
}

fn to_f64<T: Real>(v: &DVector<T>) -> Vec<f64> {
    v.iter().map(|x| x.primal()).collect()
}

impl<T: Real> Trajectory<T> {
    pub fn csv_header(&self, n: usize, m: usize) -> Vec<String> {
        let levels = self.nodes.first().map_or(0, |n| n.jet.levels());
        let mut cols = vec!["t".to_string()];
        cols.extend(VarContext::jet(m, levels).names().iter().cloned());
        cols.extend((1..=n).map(|i| format!("x{i}")));
        cols.extend((1..=n).map(|i| format!("xdot{i}")));
        cols.extend((1..=m).map(|i| format!("u{i}")));
        cols.push("residual".into());
        cols
    }

    pub fn export(&self, n: usize, m: usize) -> TrajectoryExport {
        TrajectoryExport {
            columns: self.csv_header(n, m),
            nodes: self
                .nodes
                .iter()
                .map(|node| NodeExport {
                    t: node.t.primal(),
                    y: to_f64(node.jet.as_flat()),
                    x: node.x.as_ref().map(to_f64),
                    xdot: node.xdot.as_ref().map(to_f64),
                    u: node.u.as_ref().map(to_f64),
                    residual: node.residual.map(|r| r.primal()),
                    input_residual: node.input_residual.map(|r| r.primal()),
                    error: node.error.clone(),
                })
                .collect(),
        }
    }

    /// Comma-separated table with a fixed header; unavailable values are empty.
    pub fn write_csv<W: std::io::Write>(&self, n: usize, m: usize, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.csv_header(n, m))?;
        let cells = |v: Option<Vec<f64>>, len: usize| -> Vec<String> {
            match v {
                Some(v) => v.iter().map(|x| format!("{x:?}")).collect(),
                None => vec![String::new(); len],
            }
        };
        for node in self.export(n, m).nodes {
            let mut row = vec![format!("{:?}", node.t)];
            row.extend(node.y.iter().map(|v| format!("{v:?}")));
            row.extend(cells(node.x, n));
            row.extend(cells(node.xdot, n));
            row.extend(cells(node.u, m));
            row.push(node.residual.map_or(String::new(), |r| format!("{r:?}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}
