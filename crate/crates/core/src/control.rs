//! Linearization at equilibria and the controllability consequences of a
//! flat parameterization.
//!
//! Differentiating `F(φ, 𝓛φ) ≡ 0` in `y_i` and using
//! `∂_{y_i}(𝓛g) = 𝓛(∂_{y_i}g) + ∂_{y_{i−1}}g` gives, with `J_x = ∂F/∂x` and
//! `J_p = ∂F/∂p` at `Φ(jet)`:
//!
//! ```text
//! (i)   J_x·∂φ/∂y₀ + J_p·𝓛(∂φ/∂y₀)                 = 0
//! (ii)  J_x·∂φ/∂y_i + J_p·𝓛(∂φ/∂y_i) + J_p·∂φ/∂y_{i−1} = 0,  1 ≤ i ≤ r
//! (iii) J_p·∂φ/∂y_r                                  = 0
//! ```
//!
//! At rest the `𝓛` terms drop out. Since `Ker J_p = Im B` and
//! `J_x = −J_p·A`, the identities force `Im ∂φ/∂y_i ⊂ span{B, …, A^{r−i}B}`,
//! and because the blocks of `dφ` span `R^n` the Kalman rank is `n`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::expr::ExprError;
use crate::jet::{check_dims, JetError, JetPoint, ParameterFunction};
use crate::numlin::{subspace_contains, svd_rank, NumError, RankResult, DEFAULT_RANK_TOL};
use crate::scalar::{lit, Real};
use crate::system::{EquilibriumPoint, ImplicitSystem};

/// Largest `‖f(x₀, u₀)‖` accepted as an equilibrium by [`linearize`].
pub const EQUILIBRIUM_ACCEPT_TOL: f64 = 1e-8;
pub const DEFAULT_IDENTITY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ControlError {
    #[error("not an equilibrium: |f(x0, u0)| = {residual:e}")]
    NotAnEquilibrium { residual: f64 },
    #[error("linearization invariant violated: {what} (residual {residual:e})")]
    InvariantViolation { what: &'static str, residual: f64 },
    #[error("phi(y0, 0, .., 0) is {distance:e} away from the equilibrium state")]
    MismatchedEquilibrium { distance: f64 },
    #[error(transparent)]
    Domain(#[from] ExprError),
    #[error(transparent)]
    Numeric(#[from] NumError),
    #[error(transparent)]
    Jet(#[from] JetError),
}

/// `A = ∂f/∂x`, `B = ∂f/∂u` at an equilibrium, together with how well the
/// implicit and explicit descriptions agree there.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization<T> {
    pub x0: DVector<T>,
    pub u0: DVector<T>,
    pub a: DMatrix<T>,
    pub b: DMatrix<T>,
    /// `‖∂F/∂x + ∂F/∂p·A‖_F`
    pub flow_residual: T,
    /// `‖∂F/∂p·B‖_F`; together with `rank B = m` this gives `Im B = Ker ∂F/∂p`.
    pub kernel_residual: T,
    pub input_rank: usize,
}

/// Linearizes `f` at `eq` and checks both compatibility invariants against `tol`.
pub fn linearize<T: Real>(
    sys: &ImplicitSystem,
    eq: &EquilibriumPoint<T>,
    tol: f64,
) -> Result<Linearization<T>, ControlError> {
    let (x0, u0) = (eq.x.as_slice(), eq.u.as_slice());
    let drift = sys.velocity(x0, u0)?;
    let drift_norm = drift.norm().primal();
    if drift_norm > EQUILIBRIUM_ACCEPT_TOL {
        return Err(ControlError::NotAnEquilibrium { residual: drift_norm });
    }
    let (a, b) = sys.explicit_jacobians(x0, u0)?;
    let (jx, jp) = sys.implicit_jacobians(x0, drift.as_slice())?;
    let flow_residual = (&jx + &jp * &a).norm();
    if flow_residual.primal() > tol {
        return Err(ControlError::InvariantViolation {
            what: "dF/dx + dF/dp A != 0",
            residual: flow_residual.primal(),
        });
    }
    let kernel_residual = (&jp * &b).norm();
    let input_rank = svd_rank(&b, lit(DEFAULT_RANK_TOL))?.rank;
    if kernel_residual.primal() > tol || input_rank != sys.m() {
        return Err(ControlError::InvariantViolation {
            what: "Im df/du != Ker dF/dp",
            residual: kernel_residual.primal(),
        });
    }
    Ok(Linearization {
        x0: eq.x.clone(),
        u0: eq.u.clone(),
        a,
        b,
        flow_residual,
        kernel_residual,
        input_rank,
    })
}

/// `[B, AB, …, A^{blocks−1}B]`.
pub fn controllability_matrix<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>, blocks: usize) -> DMatrix<T> {
    let (n, m) = b.shape();
    let mut out = DMatrix::zeros(n, m * blocks);
    let mut power = b.clone();
    for k in 0..blocks {
        out.columns_mut(k * m, m).copy_from(&power);
        power = a * power;
    }
    out
}

/// Rank of `[B, AB, …, A^{n−1}B]`.
pub fn kalman_rank<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>, tol_rel: T) -> Result<RankResult<T>, NumError> {
    if a.nrows() != a.ncols() || a.nrows() != b.nrows() {
        return Err(NumError::DimensionMismatch(format!(
            "A is {}x{}, B is {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    svd_rank(&controllability_matrix(a, b, a.nrows()), tol_rel)
}

/// Frobenius norms of identities (i)–(iii), indexed by the level `i` they
/// differentiate in: entry `0` is (i), entries `1..=r` are (ii) and entry
/// `r + 1` is (iii).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityResiduals {
    pub levels: Vec<f64>,
    pub max_residual: f64,
    pub tol: f64,
    pub pass: bool,
}

impl IdentityResiduals {
    fn new(levels: Vec<f64>, tol: f64) -> Self {
        let max_residual = levels.iter().copied().fold(0.0, f64::max);
        Self {
            pass: max_residual <= tol,
            levels,
            max_residual,
            tol,
        }
    }
}

/// Identities (i)–(iii) at an arbitrary jet, with the `𝓛(∂φ/∂y_i)` terms
/// taken from nested forward differentiation.
pub fn check_structure_identities<T: Real>(
    sys: &ImplicitSystem,
    pf: &ParameterFunction,
    jet: &JetPoint<T>,
    tol: f64,
) -> Result<IdentityResiduals, ControlError> {
    check_dims(sys, pf)?;
    let d = pf.derivatives(jet)?;
    let (jx, jp) = sys.implicit_jacobians(d.value.as_slice(), d.total.as_slice())?;
    let r = pf.r();
    let mut levels = Vec::with_capacity(r + 2);
    for i in 0..=r {
        let mut e = &jx * d.block(i) + &jp * d.lie_block(i);
        if i >= 1 {
            e += &jp * d.block(i - 1);
        }
        levels.push(e.norm().primal());
    }
    levels.push((&jp * d.block(r)).norm().primal());
    Ok(IdentityResiduals::new(levels, tol))
}

/// Identities (i)–(iii) at the rest jet `(y₀, 0, …, 0)`, where `p = 0` and
/// the total-derivative terms vanish.
pub fn check_equilibrium_identities<T: Real>(
    sys: &ImplicitSystem,
    pf: &ParameterFunction,
    y0: &DVector<T>,
    tol: f64,
) -> Result<IdentityResiduals, ControlError> {
    check_dims(sys, pf)?;
    let (n, m, r) = (pf.n(), pf.m(), pf.r());
    let mut head = vec![T::zero(); m * (r + 1)];
    head[..m].copy_from_slice(y0.as_slice());
    let x0 = pf.map().eval(&head)?;
    let jac = pf.map().jacobian(&head)?;
    let (jx, jp) = sys.implicit_jacobians(&x0, &vec![T::zero(); n])?;
    let block = |i: usize| jac.columns(i * m, m);
    let mut levels = Vec::with_capacity(r + 2);
    levels.push((&jx * block(0)).norm().primal());
    for i in 1..=r {
        levels.push((&jx * block(i) + &jp * block(i - 1)).norm().primal());
    }
    levels.push((&jp * block(r)).norm().primal());
    Ok(IdentityResiduals::new(levels, tol))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainLink {
    pub level: usize,
    /// Number of Krylov blocks `B, AB, …` spanning the target space.
    pub krylov_blocks: usize,
    pub residual: f64,
    pub contained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainReport {
    /// Ordered from level `r` down to level `0`.
    pub inclusions: Vec<ChainLink>,
    pub stacked_rank: usize,
    pub state_dim: usize,
    pub generates_state_space: bool,
    pub kalman_rank: usize,
    pub tol: f64,
    pub pass: bool,
}

/// Checks `Im ∂φ/∂y_i ⊂ span{B, …, A^{min(r−i, n−1)}B}` for `i = r, …, 0`
/// at the equilibrium `eq = (φ(y₀, 0, …, 0), u₀)`, then whether the blocks of
/// `dφ` together span `R^n`.
pub fn check_chain_inclusions<T: Real>(
    sys: &ImplicitSystem,
    pf: &ParameterFunction,
    eq: &EquilibriumPoint<T>,
    y0: &DVector<T>,
    tol: f64,
) -> Result<ChainReport, ControlError> {
    check_dims(sys, pf)?;
    let (n, m, r) = (pf.n(), pf.m(), pf.r());
    let mut head = vec![T::zero(); m * (r + 1)];
    head[..m].copy_from_slice(y0.as_slice());
    let x0 = DVector::from_vec(pf.map().eval(&head)?);
    let distance = (&x0 - &eq.x).norm().primal();
    if distance > tol {
        return Err(ControlError::MismatchedEquilibrium { distance });
    }
    let lin = linearize(sys, eq, tol.max(EQUILIBRIUM_ACCEPT_TOL))?;
    let jac = pf.map().jacobian(&head)?;
    let mut inclusions = Vec::with_capacity(r + 1);
    for i in (0..=r).rev() {
        let blocks = (r - i).min(n - 1) + 1;
        let krylov = controllability_matrix(&lin.a, &lin.b, blocks);
        let target = jac.columns(i * m, m).into_owned();
        let inc = subspace_contains(&krylov, &target, lit(tol))?;
        inclusions.push(ChainLink {
            level: i,
            krylov_blocks: blocks,
            residual: inc.residual.primal(),
            contained: inc.contained,
        });
    }
    let stacked_rank = svd_rank(&jac, lit(DEFAULT_RANK_TOL))?.rank;
    let kalman = kalman_rank(&lin.a, &lin.b, lit(DEFAULT_RANK_TOL))?.rank;
    let generates = stacked_rank == n;
    Ok(ChainReport {
        pass: generates && inclusions.iter().all(|l| l.contained),
        inclusions,
        stacked_rank,
        state_dim: n,
        generates_state_space: generates,
        kalman_rank: kalman,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn di() -> (ImplicitSystem, ParameterFunction) {
        (
            ImplicitSystem::parse(2, 1, &["p1 - x2"], &["x2", "u1"]).unwrap(),
            ParameterFunction::parse(1, 2, 1, &["y0_1", "y1_1"]).unwrap(),
        )
    }

    fn pendulum() -> (ImplicitSystem, ParameterFunction) {
        (
            ImplicitSystem::parse(2, 1, &["p1 - x2"], &["x2", "-sin(x1) + u1"]).unwrap(),
            ParameterFunction::parse(1, 2, 1, &["y0_1", "y1_1"]).unwrap(),
        )
    }

    fn mass_point() -> (ImplicitSystem, ParameterFunction) {
        (
            ImplicitSystem::parse(4, 2, &["p1 - x3", "p2 - x4"], &["x3", "x4", "u1", "u2"]).unwrap(),
            ParameterFunction::parse(2, 4, 1, &["y0_1", "y0_2", "y1_1", "y1_2"]).unwrap(),
        )
    }

    fn eq(x: &[f64], u: &[f64]) -> EquilibriumPoint<f64> {
        EquilibriumPoint {
            x: DVector::from_column_slice(x),
            u: DVector::from_column_slice(u),
            residual: 0.0,
        }
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn linearize_examples() {
        let lin = linearize(&di().0, &eq(&[0.0, 0.0], &[0.0]), 1e-10).unwrap();
        assert_eq!(lin.a, DMatrix::from_row_slice(2, 2, &[0., 1., 0., 0.]));
        assert_eq!(lin.b, DMatrix::from_row_slice(2, 1, &[0., 1.]));
        let lin = linearize(&pendulum().0, &eq(&[0.0, 0.0], &[0.0]), 1e-10).unwrap();
        assert_eq!(lin.a, DMatrix::from_row_slice(2, 2, &[0., 1., -1., 0.]));
        let lin = linearize(&pendulum().0, &eq(&[0.4, 0.0], &[0.4_f64.sin()]), 1e-10).unwrap();
        assert_relative_eq!(lin.a[(1, 0)], -0.4_f64.cos(), epsilon = 1e-15);
        assert_relative_eq!(lin.a[(1, 0)], -0.9211, epsilon = 1e-4);
        assert_eq!(lin.input_rank, 1);
    }

    #[test]
    fn linearize_rejects_non_equilibria_and_mismatched_pairs() {
        assert!(matches!(
            linearize(&di().0, &eq(&[0.0, 1.0], &[0.0]), 1e-10),
            Err(ControlError::NotAnEquilibrium { .. })
        ));
        // F says ẋ₁ = x₂ + x₁ while f says ẋ₁ = x₂.
        let bad = ImplicitSystem::parse(2, 1, &["p1 - x2 - x1"], &["x2", "u1"]).unwrap();
        assert!(matches!(
            linearize(&bad, &eq(&[0.0, 0.0], &[0.0]), 1e-10),
            Err(ControlError::InvariantViolation { .. })
        ));
    }

    #[test]
    fn kalman_examples() {
        let a = DMatrix::from_row_slice(2, 2, &[0., 1., 0., 0.]);
        let b = DMatrix::from_row_slice(2, 1, &[0., 1.]);
        assert_eq!(controllability_matrix(&a, &b, 2), DMatrix::from_row_slice(2, 2, &[0., 1., 1., 0.]));
        assert_eq!(kalman_rank(&a, &b, 1e-8).unwrap().rank, 2);
        let pa = DMatrix::from_row_slice(2, 2, &[0., 1., -(0.4_f64.cos()), 0.]);
        assert_eq!(kalman_rank(&pa, &b, 1e-8).unwrap().rank, 2);
        let i2 = DMatrix::<f64>::identity(2, 2);
        let e1 = DMatrix::from_row_slice(2, 1, &[1., 0.]);
        assert_eq!(kalman_rank(&i2, &e1, 1e-8).unwrap().rank, 1);
    }

    #[test]
    fn structure_identities_of_double_integrator() {
        let (sys, pf) = di();
        let jet = JetPoint::from_flat(1, v(&[0.3, -1.2, 0.8])).unwrap();
        let rep = check_structure_identities(&sys, &pf, &jet, 1e-10).unwrap();
        assert_eq!(rep.levels, vec![0.0, 0.0, 0.0]);
        assert!(rep.pass);
    }

    #[test]
    fn broken_phi_breaks_identity_two() {
        let sys = di().0;
        let pf = ParameterFunction::parse(1, 2, 1, &["y0_1", "2*y1_1"]).unwrap();
        let jet = JetPoint::from_flat(1, v(&[0.3, 0.7, -0.2])).unwrap();
        let rep = check_structure_identities(&sys, &pf, &jet, 1e-10).unwrap();
        assert_eq!(rep.levels[1], 1.0);
        assert!(!rep.pass);
    }

    #[test]
    fn structure_identities_on_guarded_unicycle() {
        let sys = ImplicitSystem::parse(3, 2, &["p1*sin(x3) - p2*cos(x3)"], &["u1*cos(x3)", "u1*sin(x3)", "u2"]).unwrap();
        let pf = ParameterFunction::parse(2, 3, 1, &["y0_1", "y0_2", "atan2(y1_2, y1_1)"]).unwrap();
        let jet = JetPoint::from_flat(2, v(&[0.2, -0.3, 0.5, 0.9, -1.1, 0.4])).unwrap();
        let rep = check_structure_identities(&sys, &pf, &jet, 1e-8).unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn equilibrium_identities_examples() {
        let (sys, pf) = di();
        let rep = check_equilibrium_identities(&sys, &pf, &v(&[0.3]), 1e-10).unwrap();
        assert_eq!(rep.levels, vec![0.0, 0.0, 0.0]);
        let (sys, pf) = mass_point();
        let rep = check_equilibrium_identities(&sys, &pf, &v(&[0.3, -2.0]), 1e-10).unwrap();
        assert!(rep.levels.iter().all(|r| *r == 0.0));
        let (sys, pf) = pendulum();
        let rep = check_equilibrium_identities(&sys, &pf, &v(&[0.4]), 1e-12).unwrap();
        assert!(rep.pass);
    }

    #[test]
    fn equilibrium_identities_agree_with_general_path_at_rest() {
        let (sys, pf) = pendulum();
        for y0 in [-1.3, 0.0, 0.4, 2.2] {
            let jet = JetPoint::equilibrium(&v(&[y0]), pf.levels()).unwrap();
            let general = check_structure_identities(&sys, &pf, &jet, 1e-10).unwrap();
            let rest = check_equilibrium_identities(&sys, &pf, &v(&[y0]), 1e-10).unwrap();
            for (a, b) in general.levels.iter().zip(&rest.levels) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn unicycle_equilibrium_identities_raise_domain_error() {
        let sys = ImplicitSystem::parse(3, 2, &["p1*sin(x3) - p2*cos(x3)"], &["u1*cos(x3)", "u1*sin(x3)", "u2"]).unwrap();
        let pf = ParameterFunction::parse(2, 3, 1, &["y0_1", "y0_2", "atan2(y1_2, y1_1)"]).unwrap();
        assert!(matches!(
            check_equilibrium_identities(&sys, &pf, &v(&[0.0, 0.0]), 1e-10),
            Err(ControlError::Domain(_))
        ));
    }

    #[test]
    fn chain_of_double_integrator() {
        let (sys, pf) = di();
        let rep = check_chain_inclusions(&sys, &pf, &eq(&[0.3, 0.0], &[0.0]), &v(&[0.3]), 1e-8).unwrap();
        assert!(rep.pass);
        assert_eq!(rep.inclusions.iter().map(|l| (l.level, l.krylov_blocks)).collect::<Vec<_>>(), vec![(1, 1), (0, 2)]);
        assert_eq!(rep.stacked_rank, 2);
        assert_eq!(rep.kalman_rank, 2);
    }

    #[test]
    fn chain_of_mass_point() {
        let (sys, pf) = mass_point();
        let rep = check_chain_inclusions(&sys, &pf, &eq(&[1.0, -1.0, 0.0, 0.0], &[0.0, 0.0]), &v(&[1.0, -1.0]), 1e-8).unwrap();
        assert!(rep.pass);
        assert_eq!(rep.stacked_rank, 4);
        assert_eq!(rep.kalman_rank, 4);
    }

    #[test]
    fn chain_of_degenerate_phi_fails_to_generate() {
        let sys = di().0;
        let pf = ParameterFunction::parse(1, 2, 1, &["y0_1", "y0_1"]).unwrap();
        let rep = check_chain_inclusions(&sys, &pf, &eq(&[0.0, 0.0], &[0.0]), &v(&[0.0]), 1e-8).unwrap();
        assert!(!rep.pass);
        assert_eq!(rep.stacked_rank, 1);
        assert!(!rep.generates_state_space);
    }

    #[test]
    fn chain_requires_matching_equilibrium() {
        let (sys, pf) = di();
        assert!(matches!(
            check_chain_inclusions(&sys, &pf, &eq(&[1.0, 0.0], &[0.0]), &v(&[0.3]), 1e-8),
            Err(ControlError::MismatchedEquilibrium { .. })
        ));
    }

    #[test]
    fn krylov_truncation_for_long_chains() {
        // r = 3 on a 2-state system: level 0 would need A³B, truncated to AB.
        let sys = di().0;
        let pf = ParameterFunction::parse(1, 2, 3, &["y0_1 + y3_1 * 0", "y1_1"]).unwrap();
        let rep = check_chain_inclusions(&sys, &pf, &eq(&[0.5, 0.0], &[0.0]), &v(&[0.5]), 1e-8).unwrap();
        assert_eq!(rep.inclusions.last().unwrap().krylov_blocks, 2);
        assert!(rep.pass);
    }

    proptest! {
        #[test]
        fn kalman_rank_is_similarity_invariant(
            a in proptest::collection::vec(-2.0f64..2.0, 9),
            b in proptest::collection::vec(-2.0f64..2.0, 3),
            t in proptest::collection::vec(-1.0f64..1.0, 9),
        ) {
            let a = DMatrix::from_row_slice(3, 3, &a);
            let b = DMatrix::from_row_slice(3, 1, &b);
            // Diagonally dominant, hence well conditioned.
            let t = DMatrix::from_row_slice(3, 3, &t) * 0.3 + DMatrix::identity(3, 3) * 2.0;
            let t_inv = t.clone().try_inverse().unwrap();
            let before = kalman_rank(&a, &b, 1e-8).unwrap().rank;
            let after = kalman_rank(&(&t * &a * t_inv), &(&t * &b), 1e-8).unwrap().rank;
            prop_assert_eq!(before, after);
        }

        #[test]
        fn chain_pass_implies_kalman(y0 in -3.0f64..3.0) {
            let (sys, pf) = pendulum();
            let e = eq(&[y0, 0.0], &[y0.sin()]);
            let rep = check_chain_inclusions(&sys, &pf, &e, &v(&[y0]), 1e-8).unwrap();
            prop_assert!(rep.pass);
            prop_assert_eq!(rep.kalman_rank, 2);
        }
    }
}
