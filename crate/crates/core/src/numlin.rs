//! Dense linear-algebra and local-solver primitives.
//!
//! Singular values come from a one-sided Jacobi SVD, which keeps full
//! relative accuracy on the small, often exactly structured matrices the
//! checks produce.
//!
//! Rank decisions are relative: a singular value counts when it is at least
//! `tol_rel · σ_max`, and a matrix with `σ_max = 0` has rank 0.

use nalgebra::{DMatrix, DVector};

use crate::expr::{ExprError, SmoothMap};
use crate::scalar::{lit, Real};

pub const DEFAULT_RANK_TOL: f64 = 1e-8;
pub const DEFAULT_INCLUSION_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumError {
    #[error("matrix or vector contains non-finite entries")]
    NonFiniteInput,
    #[error("matrix is singular to working precision")]
    SingularMatrix,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error(transparent)]
    Domain(#[from] ExprError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankResult<T> {
    pub rank: usize,
    /// Descending.
    pub singular_values: Vec<T>,
    pub threshold: T,
}

fn ensure_finite<T: Real>(m: &DMatrix<T>) -> Result<(), NumError> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumError::NonFiniteInput)
    }
}

fn abs<T: Real>(v: T) -> T {
    if v < T::zero() {
        -v
    } else {
        v
    }
}

const MAX_JACOBI_SWEEPS: usize = 80;

/// One-sided (Hestenes) Jacobi SVD of a tall matrix `a` (rows ≥ cols).
/// Returns `(w, v)` with `a·v = w`, the columns of `w` mutually orthogonal
/// and `v` orthogonal.
fn hestenes<T: Real>(a: &DMatrix<T>) -> (DMatrix<T>, DMatrix<T>) {
    let n = a.ncols();
    let mut w = a.clone();
    let mut v = DMatrix::<T>::identity(n, n);
    let eps = T::eps();
    for _ in 0..MAX_JACOBI_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let alpha = w.column(i).norm_squared();
                let beta = w.column(j).norm_squared();
                let gamma = w.column(i).dot(&w.column(j));
                if gamma == T::zero() || abs(gamma) <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (gamma + gamma);
                let sign = if zeta >= T::zero() { T::one() } else { -T::one() };
                let t = sign / (abs(zeta) + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                for (mat, rows) in [(&mut w, a.nrows()), (&mut v, n)] {
                    for r in 0..rows {
                        let (x, y) = (mat[(r, i)], mat[(r, j)]);
                        mat[(r, i)] = c * x - s * y;
                        mat[(r, j)] = s * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    (w, v)
}

/// Thin SVD `a = u·diag(σ)·v_t` with σ sorted descending. Columns of `u`
/// (rows of `v_t`) belonging to zero singular values are not meaningful.
fn sorted_svd<T: Real>(a: &DMatrix<T>) -> (DMatrix<T>, Vec<T>, DMatrix<T>) {
    let (rows, cols) = a.shape();
    let k = rows.min(cols);
    if k == 0 {
        return (DMatrix::zeros(rows, 0), Vec::new(), DMatrix::zeros(0, cols));
    }
    let tall = rows >= cols;
    let work = if tall { a.clone() } else { a.transpose() };
    let (w, v) = hestenes(&work);
    let norms: Vec<T> = (0..k).map(|c| w.column(c).norm()).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).unwrap_or(std::cmp::Ordering::Equal));
    let sigma: Vec<T> = order.iter().map(|&i| norms[i]).collect();
    let left = DMatrix::from_fn(work.nrows(), k, |r, c| {
        let s = norms[order[c]];
        if s > T::zero() {
            w[(r, order[c])] / s
        } else {
            T::zero()
        }
    });
    let right = DMatrix::from_fn(work.ncols(), k, |r, c| v[(r, order[c])]);
    if tall {
        (left, sigma, right.transpose())
    } else {
        (right, sigma, left.transpose())
    }
}

fn rank_of<T: Real>(sigma: &[T], tol_rel: T) -> (usize, T) {
    let smax = sigma.first().copied().unwrap_or_else(T::zero);
    let threshold = tol_rel * smax;
    if smax <= T::zero() {
        return (0, threshold);
    }
    (sigma.iter().filter(|&&s| s >= threshold).count(), threshold)
}

pub fn svd_rank<T: Real>(m: &DMatrix<T>, tol_rel: T) -> Result<RankResult<T>, NumError> {
    ensure_finite(m)?;
    let (_, singular_values, _) = sorted_svd(m);
    let (rank, threshold) = rank_of(&singular_values, tol_rel);
    Ok(RankResult {
        rank,
        singular_values,
        threshold,
    })
}

/// Orthonormal basis (as columns) of the column space of `m` at numerical rank.
pub fn orthonormal_basis<T: Real>(m: &DMatrix<T>, tol_rel: T) -> Result<DMatrix<T>, NumError> {
    ensure_finite(m)?;
    let (u, sigma, _) = sorted_svd(m);
    let (rank, _) = rank_of(&sigma, tol_rel);
    Ok(u.columns(0, rank).into_owned())
}

/// Orthonormal basis of `ker m`, computed as the orthogonal complement of
/// the row space.
pub fn null_space<T: Real>(m: &DMatrix<T>, tol_rel: T) -> Result<DMatrix<T>, NumError> {
    let rows = orthonormal_basis(&m.transpose(), tol_rel)?;
    let k = m.ncols();
    let complement = DMatrix::<T>::identity(k, k) - &rows * rows.transpose();
    // The complement projector has eigenvalues exactly 0 or 1, so any fixed
    // threshold in between separates them.
    orthonormal_basis(&complement, lit(0.5))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inclusion<T> {
    pub contained: bool,
    pub residual: T,
}

/// Tests `Im m ⊂ span k` through the residual
/// `‖(I − QQᵀ) m‖_F / max(1, ‖m‖_F)`, `Q` an orthonormal basis of `span k`.
pub fn subspace_contains<T: Real>(
    k: &DMatrix<T>,
    m: &DMatrix<T>,
    tol: T,
) -> Result<Inclusion<T>, NumError> {
    if k.nrows() != m.nrows() {
        return Err(NumError::DimensionMismatch(format!(
            "span has {} rows, tested matrix has {}",
            k.nrows(),
            m.nrows()
        )));
    }
    ensure_finite(m)?;
    let q = orthonormal_basis(k, lit(DEFAULT_RANK_TOL))?;
    let leftover = m - &q * (q.transpose() * m);
    let residual = leftover.norm() / m.norm().max(T::one());
    Ok(Inclusion {
        contained: residual <= tol,
        residual,
    })
}

/// Minimum-norm least-squares solution of `a x = b` using the SVD
/// pseudo-inverse at relative threshold `tol_rel`.
pub fn pinv_solve<T: Real>(a: &DMatrix<T>, b: &DVector<T>, tol_rel: T) -> Result<DVector<T>, NumError> {
    ensure_finite(a)?;
    if a.nrows() != b.len() {
        return Err(NumError::DimensionMismatch(format!(
            "matrix has {} rows, right-hand side has {} entries",
            a.nrows(),
            b.len()
        )));
    }
    let (u, sigma, v_t) = sorted_svd(a);
    let (rank, _) = rank_of(&sigma, tol_rel);
    let mut x = DVector::zeros(a.ncols());
    for (i, &s) in sigma.iter().enumerate().take(rank) {
        let coef = u.column(i).dot(b) / s;
        x += v_t.row(i).transpose() * coef;
    }
    Ok(x)
}

/// Solves a square system, refusing matrices that are singular to working
/// precision.
pub fn solve_linear<T: Real>(a: &DMatrix<T>, b: &DVector<T>) -> Result<DVector<T>, NumError> {
    if !a.is_square() || a.nrows() != b.len() {
        return Err(NumError::DimensionMismatch(format!(
            "expected square system, got {}x{} with rhs of length {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    ensure_finite(a)?;
    let n = a.nrows();
    if n == 0 {
        return Ok(DVector::zeros(0));
    }
    let (_, sigma, _) = sorted_svd(a);
    let smin = sigma[sigma.len() - 1];
    if smin <= sigma[0] * T::eps() * lit(n as f64) {
        return Err(NumError::SingularMatrix);
    }
    a.clone().full_piv_lu().solve(b).ok_or(NumError::SingularMatrix)
}

/// A differentiable map usable by [`gauss_newton_solve`].
pub trait DiffMap<T: Real> {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn value(&self, x: &[T]) -> Result<DVector<T>, ExprError>;
    fn jacobian(&self, x: &[T]) -> Result<DMatrix<T>, ExprError>;
}

impl<T: Real> DiffMap<T> for SmoothMap {
    fn input_dim(&self) -> usize {
        SmoothMap::input_dim(self)
    }

    fn output_dim(&self) -> usize {
        SmoothMap::output_dim(self)
    }

    fn value(&self, x: &[T]) -> Result<DVector<T>, ExprError> {
        Ok(DVector::from_vec(self.eval(x)?))
    }

    fn jacobian(&self, x: &[T]) -> Result<DMatrix<T>, ExprError> {
        SmoothMap::jacobian(self, x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussNewtonOptions<T> {
    pub max_iter: usize,
    pub tol: T,
    /// Halve the step while the residual does not decrease.
    pub damping: bool,
    pub rank_tol: T,
}

impl<T: Real> Default for GaussNewtonOptions<T> {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol: lit(1e-10),
            damping: true,
            rank_tol: lit(DEFAULT_RANK_TOL),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult<T> {
    pub solution: DVector<T>,
    pub residual_norm: T,
    pub iterations: usize,
    pub converged: bool,
}

impl<T: Real> SolveResult<T> {
    pub fn into_converged(self) -> Result<Self, NumError> {
        if self.converged {
            Ok(self)
        } else {
            Err(NumError::NoConvergence {
                iterations: self.iterations,
                residual: self.residual_norm.primal(),
            })
        }
    }
}

const MAX_HALVINGS: usize = 40;

/// Solves `map(x) = target` from `init` by Gauss-Newton with pseudo-inverse
/// steps. Non-convergence is reported through the flag, with the best
/// iterate; only a domain error at `init` is an `Err`.
pub fn gauss_newton_solve<T: Real, M: DiffMap<T> + ?Sized>(
    map: &M,
    target: &DVector<T>,
    init: &DVector<T>,
    opts: &GaussNewtonOptions<T>,
) -> Result<SolveResult<T>, NumError> {
    if init.len() != map.input_dim() || target.len() != map.output_dim() {
        return Err(NumError::DimensionMismatch(format!(
            "map is R^{} -> R^{}, got init of length {} and target of length {}",
            map.input_dim(),
            map.output_dim(),
            init.len(),
            target.len()
        )));
    }
    let mut x = init.clone();
    let mut r = target - map.value(x.as_slice())?;
    let mut norm = r.norm();
    let mut iterations = 0;
    while norm > opts.tol && iterations < opts.max_iter {
        let jac = match map.jacobian(x.as_slice()) {
            Ok(j) => j,
            Err(_) => break,
        };
        let step = pinv_solve(&jac, &r, opts.rank_tol)?;
        let mut alpha = T::one();
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand = &x + &step * alpha;
            if let Ok(v) = map.value(cand.as_slice()) {
                let rc = target - v;
                let nc = rc.norm();
                if nc.is_finite() && (nc < norm || !opts.damping) {
                    accepted = Some((cand, rc, nc));
                    break;
                }
            }
            if !opts.damping {
                break;
            }
            alpha *= lit(0.5);
        }
        let Some((cand, rc, nc)) = accepted else {
            break;
        };
        x = cand;
        r = rc;
        norm = nc;
        iterations += 1;
    }
    Ok(SolveResult {
        converged: norm <= opts.tol,
        solution: x,
        residual_norm: norm,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::VarContext;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    #[test]
    fn rank_of_zero_matrix() {
        let r = svd_rank(&DMatrix::<f64>::zeros(3, 3), 1e-8).unwrap();
        assert_eq!(r.rank, 0);
    }

    #[test]
    fn rank_of_jordan_block() {
        let r = svd_rank(&mat(2, 2, &[0.0, 1.0, 0.0, 0.0]), 1e-8).unwrap();
        assert_eq!(r.rank, 1);
        assert_eq!(r.singular_values, vec![1.0, 0.0]);
    }

    #[test]
    fn rank_of_double_integrator_phi_jacobian() {
        // Gaussian elimination by hand: rows 2 and 3 coincide, the rest are
        // unit vectors in distinct columns, so three pivots remain.
        let m = mat(4, 3, &[1., 0., 0., 0., 1., 0., 0., 1., 0., 0., 0., 1.]);
        assert_eq!(svd_rank(&m, 1e-8).unwrap().rank, 3);
    }

    #[test]
    fn singular_value_at_threshold_counts() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.5]));
        assert_eq!(svd_rank(&m, 0.5).unwrap().rank, 2);
        assert_eq!(svd_rank(&m, 0.5000001).unwrap().rank, 1);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let m = mat(1, 2, &[1.0, f64::NAN]);
        assert_eq!(svd_rank(&m, 1e-8), Err(NumError::NonFiniteInput));
        assert_eq!(orthonormal_basis(&m, 1e-8), Err(NumError::NonFiniteInput));
    }

    #[test]
    fn basis_of_single_column() {
        let q = orthonormal_basis(&mat(2, 1, &[0.0, 2.0]), 1e-8).unwrap();
        assert_eq!(q.ncols(), 1);
        assert!(q[(0, 0)].abs() < 1e-15);
        assert!((q[(1, 0)].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn basis_of_identity() {
        let q = orthonormal_basis(&DMatrix::<f64>::identity(4, 4), 1e-8).unwrap();
        assert_eq!(q.ncols(), 4);
        assert!((q.transpose() * &q - DMatrix::identity(4, 4)).norm() < 1e-12);
    }

    #[test]
    fn basis_of_rank_two_outer_product_sum() {
        let a = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let b = DVector::from_vec(vec![0.3, 1.0, -1.0]);
        let c = DVector::from_vec(vec![0.0, 1.0, 1.0, -1.0]);
        let d = DVector::from_vec(vec![2.0, 0.0, 1.0]);
        let m = &a * b.transpose() + &c * d.transpose();
        let q = orthonormal_basis(&m, 1e-8).unwrap();
        assert_eq!(q.ncols(), 2);
        let projected = &q * (q.transpose() * &m);
        assert!((projected - &m).norm() < 1e-10);
    }

    #[test]
    fn inclusion_examples() {
        let k = mat(2, 1, &[0.0, 1.0]);
        let inc = subspace_contains(&k, &mat(2, 1, &[0.0, 1.0]), 1e-8).unwrap();
        assert!(inc.contained);
        assert!(inc.residual <= 1e-15);
        let inc = subspace_contains(&k, &mat(2, 1, &[1.0, 0.0]), 1e-8).unwrap();
        assert!(!inc.contained);
        assert!((inc.residual - 1.0).abs() < 1e-15);
    }

    #[test]
    fn double_integrator_krylov_inclusion() {
        let a = mat(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = mat(2, 1, &[0.0, 1.0]);
        let ab = &a * &b;
        assert_eq!(ab, mat(2, 1, &[1.0, 0.0]));
        let k = DMatrix::from_columns(&[b.column(0).into_owned(), ab.column(0).into_owned()]);
        assert!(subspace_contains(&k, &mat(2, 1, &[1.0, 0.0]), 1e-8).unwrap().contained);
    }

    #[test]
    fn inclusion_in_empty_span() {
        let k = DMatrix::<f64>::zeros(2, 0);
        let inc = subspace_contains(&k, &mat(2, 1, &[3.0, 4.0]), 1e-8).unwrap();
        assert!((inc.residual - 1.0).abs() < 1e-15);
        let inc = subspace_contains(&k, &DMatrix::zeros(2, 1), 1e-8).unwrap();
        assert!(inc.contained);
    }

    #[test]
    fn null_space_of_row() {
        let n = null_space(&mat(1, 3, &[1.0, 0.0, 0.0]), 1e-8).unwrap();
        assert_eq!(n.ncols(), 2);
        assert!(n.row(0).norm() < 1e-15);
        let full = null_space(&DMatrix::<f64>::zeros(0, 3), 1e-8).unwrap();
        assert_eq!(full.ncols(), 3);
    }

    #[test]
    fn linear_solves() {
        let b = DVector::from_vec(vec![1.5, -2.0]);
        assert_eq!(solve_linear(&DMatrix::identity(2, 2), &b).unwrap(), b);
        let x = solve_linear(&mat(2, 2, &[2.0, 0.0, 0.0, 4.0]), &DVector::from_vec(vec![2.0, 8.0])).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 2.0]);
        assert_eq!(
            solve_linear(&mat(2, 2, &[1.0, 2.0, 2.0, 4.0]), &b),
            Err(NumError::SingularMatrix)
        );
        assert!(matches!(
            solve_linear(&mat(1, 2, &[1.0, 2.0]), &b),
            Err(NumError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn gauss_newton_on_linear_map_takes_one_step() {
        let ctx = VarContext::new(["a", "b"]).unwrap();
        let map = SmoothMap::parse(ctx, &["2*a + b", "a - 3*b"]).unwrap();
        let target = DVector::from_vec(vec![1.0, -2.0]);
        let res = gauss_newton_solve(&map, &target, &DVector::<f64>::zeros(2), &GaussNewtonOptions::default()).unwrap();
        assert!(res.converged);
        assert_eq!(res.iterations, 1);
        assert!((res.solution[0] - 1.0 / 7.0).abs() < 1e-14);
        assert!((res.solution[1] - 5.0 / 7.0).abs() < 1e-14);
    }

    #[test]
    fn gauss_newton_recovers_pendulum_input() {
        // u = xdot2 + sin x1 = 0.5 + sin(pi/6) = 1
        let f = SmoothMap::parse(VarContext::explicit(2, 1), &["x2", "-sin(x1) + u1"]).unwrap();
        let x1 = std::f64::consts::FRAC_PI_6;
        let ctx = VarContext::new(["u1"]).unwrap();
        let fixed = SmoothMap::parse(ctx, &[format!("-sin({x1:?}) + u1")]).unwrap();
        let res = gauss_newton_solve(
            &fixed,
            &DVector::from_vec(vec![0.5]),
            &DVector::<f64>::zeros(1),
            &GaussNewtonOptions::default(),
        )
        .unwrap();
        assert!(res.converged);
        assert!((res.solution[0] - 1.0).abs() < 1e-10);
        let v = f.eval(&[x1, 0.2, res.solution[0]]).unwrap();
        assert!((v[1] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn gauss_newton_flags_unreachable_target() {
        let ctx = VarContext::new(["a"]).unwrap();
        let map = SmoothMap::parse(ctx, &["a^2 + 1"]).unwrap();
        let res = gauss_newton_solve(
            &map,
            &DVector::from_vec(vec![0.0]),
            &DVector::from_vec(vec![0.5]),
            &GaussNewtonOptions::default(),
        )
        .unwrap();
        assert!(!res.converged);
        assert!(res.residual_norm >= 1.0 - 1e-12);
        assert!(matches!(res.into_converged(), Err(NumError::NoConvergence { .. })));
    }

    #[test]
    fn gauss_newton_domain_error_at_init() {
        let ctx = VarContext::new(["a"]).unwrap();
        let map = SmoothMap::parse(ctx, &["ln(a)"]).unwrap();
        let res = gauss_newton_solve(
            &map,
            &DVector::from_vec(vec![0.0]),
            &DVector::from_vec(vec![-1.0]),
            &GaussNewtonOptions::default(),
        );
        assert!(matches!(res, Err(NumError::Domain(_))));
    }

    #[test]
    fn works_in_single_precision() {
        let m = DMatrix::<f32>::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(svd_rank(&m, 1e-5).unwrap().rank, 2);
    }
}
