//! Jets of the flat output, the total derivative, and the checks that a
//! candidate parameter function `φ(y₀, …, y_r)` certifies flatness.
//!
//! A jet is a tuple `(y₀, …, y_{r+1})` of vectors in `R^m` treated as free
//! coordinates. The total derivative of a function `g(y₀, …, y_r)` is
//! `𝓛g = Σᵢ ∂g/∂yᵢ · y_{i+1}`; the map `Φ(jet) = (φ, 𝓛φ)` sends jets to
//! points `(x, ẋ)` and must land on the variety `F(x, p) = 0`.
//!
//! Every check here is pointwise on seeded samples. Passing is local
//! numerical evidence over the sampled region, not a proof.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::expr::{parse_expression, ExprError, SmoothMap, VarContext};
use crate::numlin::{gauss_newton_solve, svd_rank, DiffMap, GaussNewtonOptions, NumError};
use crate::sampling::GaussianStream;
use crate::scalar::{lit, Real};
use crate::system::{find_equilibrium, ImplicitSystem, SystemError, VarietySample};

pub const DEFAULT_PDE_TOL: f64 = 1e-8;
pub const PROBE_LABEL: &str = "probe (local evidence, not a proof)";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum JetError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("jet contains non-finite entries")]
    NonFinite,
    #[error("invalid guard: {0}")]
    Guard(String),
    #[error(transparent)]
    Domain(#[from] ExprError),
    #[error(transparent)]
    Numeric(#[from] NumError),
    #[error(transparent)]
    System(#[from] SystemError),
}

/// Candidate flat parameterization `x = φ(y₀, …, y_r)`.
///
/// The variable context covers levels `0..=r` only, so `φ` cannot depend on
/// `y_{r+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterFunction {
    m: usize,
    n: usize,
    r: usize,
    phi: SmoothMap,
}

impl ParameterFunction {
    pub fn new(m: usize, n: usize, r: usize, phi: SmoothMap) -> Result<Self, JetError> {
        if m == 0 {
            return Err(JetError::Dimension("flat output dimension m must be positive".into()));
        }
        if phi.context() != &VarContext::jet(m, r + 1) {
            return Err(JetError::Dimension(format!(
                "phi must be a map over y0_1..y{r}_{m}"
            )));
        }
        if phi.output_dim() != n {
            return Err(JetError::Dimension(format!(
                "phi has {} components, expected n = {n}",
                phi.output_dim()
            )));
        }
        Ok(Self { m, n, r, phi })
    }

    pub fn parse<S: AsRef<str>>(m: usize, n: usize, r: usize, components: &[S]) -> Result<Self, JetError> {
        let phi = SmoothMap::parse(VarContext::jet(m, r + 1), components)?;
        Self::new(m, n, r, phi)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn map(&self) -> &SmoothMap {
        &self.phi
    }

    /// Number of jet levels `r + 2` consumed by `Φ`.
    pub fn levels(&self) -> usize {
        self.r + 2
    }

    fn check_jet<T: Real>(&self, jet: &JetPoint<T>) -> Result<(), JetError> {
        if jet.m != self.m || jet.levels() != self.levels() {
            return Err(JetError::Dimension(format!(
                "expected a jet with {} levels of width {}, got {} levels of width {}",
                self.levels(),
                self.m,
                jet.levels(),
                jet.m
            )));
        }
        Ok(())
    }

    /// `φ` together with its Jacobian blocks and their total derivatives.
    pub fn derivatives<T: Real>(&self, jet: &JetPoint<T>) -> Result<JetDerivatives<T>, JetError> {
        self.check_jet(jet)?;
        let head = jet.head();
        let shift = jet.shifted();
        let value = DVector::from_vec(self.phi.eval(head)?);
        let jac = self.phi.jacobian(head)?;
        let lie_jac = self.phi.directional_second(head, shift)?;
        let total = &jac * DVector::from_column_slice(shift);
        Ok(JetDerivatives {
            m: self.m,
            value,
            jac,
            lie_jac,
            total,
        })
    }
}

/// `φ`, `∂φ/∂(y₀..y_r)`, the column-wise total derivative of that Jacobian,
/// and `𝓛φ`, all at one jet.
#[derive(Debug, Clone, PartialEq)]
pub struct JetDerivatives<T> {
    m: usize,
    pub value: DVector<T>,
    pub jac: DMatrix<T>,
    pub lie_jac: DMatrix<T>,
    pub total: DVector<T>,
}

impl<T: Real> JetDerivatives<T> {
    /// `∂φ/∂y_i` (n × m).
    pub fn block(&self, i: usize) -> DMatrix<T> {
        self.jac.columns(i * self.m, self.m).into_owned()
    }

    /// `𝓛(∂φ/∂y_i)` (n × m).
    pub fn lie_block(&self, i: usize) -> DMatrix<T> {
        self.lie_jac.columns(i * self.m, self.m).into_owned()
    }
}

/// Flat-output jet `(y₀, …, y_{L−1})`, stored level-major.
#[derive(Debug, Clone, PartialEq)]
pub struct JetPoint<T> {
    m: usize,
    data: DVector<T>,
}

impl<T: Real> JetPoint<T> {
    pub fn from_levels(levels: &[DVector<T>]) -> Result<Self, JetError> {
        let m = levels.first().map_or(0, |l| l.len());
        if m == 0 || levels.iter().any(|l| l.len() != m) {
            return Err(JetError::Dimension("jet levels must share a positive width".into()));
        }
        let data = DVector::from_iterator(levels.len() * m, levels.iter().flat_map(|l| l.iter().copied()));
        Self::from_flat(m, data)
    }

    pub fn from_flat(m: usize, data: DVector<T>) -> Result<Self, JetError> {
        if m == 0 || !data.len().is_multiple_of(m) || data.is_empty() {
            return Err(JetError::Dimension(format!(
                "flat jet of length {} does not split into levels of width {m}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(JetError::NonFinite);
        }
        Ok(Self { m, data })
    }

    /// `(y₀, 0, …, 0)` with `levels` levels.
    pub fn equilibrium(y0: &DVector<T>, levels: usize) -> Result<Self, JetError> {
        let m = y0.len();
        let mut data = DVector::zeros(m * levels.max(1));
        data.rows_mut(0, m).copy_from(y0);
        Self::from_flat(m, data)
    }

    pub fn width(&self) -> usize {
        self.m
    }

    pub fn levels(&self) -> usize {
        self.data.len() / self.m
    }

    pub fn level(&self, k: usize) -> &[T] {
        &self.data.as_slice()[k * self.m..(k + 1) * self.m]
    }

    pub fn as_flat(&self) -> &DVector<T> {
        &self.data
    }

    /// Levels `0..L−1`: the arguments of `φ`.
    pub fn head(&self) -> &[T] {
        &self.data.as_slice()[..self.data.len() - self.m]
    }

    /// Levels `1..L`: the direction of the total derivative.
    pub fn shifted(&self) -> &[T] {
        &self.data.as_slice()[self.m..]
    }

    /// Jet of `t ↦ y(c t)`: level `k` is multiplied by `c^k`.
    pub fn time_scaled(&self, c: T) -> Self {
        let mut data = self.data.clone();
        let mut factor = T::one();
        for level in data.as_mut_slice().chunks_mut(self.m) {
            for v in level.iter_mut() {
                *v *= factor;
            }
            factor *= c;
        }
        Self { m: self.m, data }
    }
}

/// `𝓛φ = Σᵢ ∂φ/∂yᵢ · y_{i+1}`.
pub fn total_derivative<T: Real>(pf: &ParameterFunction, jet: &JetPoint<T>) -> Result<DVector<T>, JetError> {
    pf.check_jet(jet)?;
    let jac = pf.phi.jacobian(jet.head())?;
    Ok(jac * DVector::from_column_slice(jet.shifted()))
}

/// `Φ(jet) = (φ(y₀..y_r), 𝓛φ(y₀..y_{r+1}))`.
pub fn phi_big<T: Real>(pf: &ParameterFunction, jet: &JetPoint<T>) -> Result<(DVector<T>, DVector<T>), JetError> {
    pf.check_jet(jet)?;
    let x = DVector::from_vec(pf.phi.eval(jet.head())?);
    Ok((x, total_derivative(pf, jet)?))
}

/// `2n × m(r+2)` Jacobian of `Φ`. The lower block uses
/// `∂(𝓛φ)/∂y_i = 𝓛(∂φ/∂y_i) + ∂φ/∂y_{i−1}`.
pub fn phi_big_jacobian<T: Real>(pf: &ParameterFunction, jet: &JetPoint<T>) -> Result<DMatrix<T>, JetError> {
    let d = pf.derivatives(jet)?;
    let (n, m) = (pf.n, pf.m);
    let head_cols = m * (pf.r + 1);
    let mut out = DMatrix::zeros(2 * n, head_cols + m);
    out.view_mut((0, 0), (n, head_cols)).copy_from(&d.jac);
    out.view_mut((n, 0), (n, head_cols)).copy_from(&d.lie_jac);
    let shifted = out.view((n, m), (n, head_cols)) + &d.jac;
    out.view_mut((n, m), (n, head_cols)).copy_from(&shifted);
    Ok(out)
}

/// `F(φ, 𝓛φ)` at a jet: the pointwise residual of the flatness PDE.
pub fn pde_residual<T: Real>(
    sys: &ImplicitSystem,
    pf: &ParameterFunction,
    jet: &JetPoint<T>,
) -> Result<DVector<T>, JetError> {
    check_dims(sys, pf)?;
    let (x, p) = phi_big(pf, jet)?;
    Ok(sys.residual(x.as_slice(), p.as_slice())?)
}

pub fn check_dims(sys: &ImplicitSystem, pf: &ParameterFunction) -> Result<(), JetError> {
    if sys.n() != pf.n || sys.m() != pf.m {
        return Err(JetError::Dimension(format!(
            "system has (n, m) = ({}, {}), parameter function has ({}, {})",
            sys.n(),
            sys.m(),
            pf.n,
            pf.m
        )));
    }
    Ok(())
}

/// `Φ` as a differentiable map on flattened jets.
pub struct PhiMap<'a> {
    pf: &'a ParameterFunction,
}

impl<'a> PhiMap<'a> {
    pub fn new(pf: &'a ParameterFunction) -> Self {
        Self { pf }
    }
}

impl<T: Real> DiffMap<T> for PhiMap<'_> {
    fn input_dim(&self) -> usize {
        self.pf.m * self.pf.levels()
    }

    fn output_dim(&self) -> usize {
        2 * self.pf.n
    }

    fn value(&self, x: &[T]) -> Result<DVector<T>, ExprError> {
        let jet = JetPoint::from_flat(self.pf.m, DVector::from_column_slice(x)).map_err(jet_to_expr)?;
        let (a, b) = phi_big(self.pf, &jet).map_err(jet_to_expr)?;
        Ok(DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied()))
    }

    fn jacobian(&self, x: &[T]) -> Result<DMatrix<T>, ExprError> {
        let jet = JetPoint::from_flat(self.pf.m, DVector::from_column_slice(x)).map_err(jet_to_expr)?;
        phi_big_jacobian(self.pf, &jet).map_err(jet_to_expr)
    }
}

/// `y₀ ↦ φ(y₀, 0, …, 0)`.
pub struct EquilibriumChart<'a> {
    pf: &'a ParameterFunction,
}

impl<'a> EquilibriumChart<'a> {
    pub fn new(pf: &'a ParameterFunction) -> Self {
        Self { pf }
    }

    fn head<T: Real>(&self, y0: &[T]) -> Vec<T> {
        let mut head = vec![T::zero(); self.pf.m * (self.pf.r + 1)];
        head[..self.pf.m].copy_from_slice(y0);
        head
    }
}

impl<T: Real> DiffMap<T> for EquilibriumChart<'_> {
    fn input_dim(&self) -> usize {
        self.pf.m
    }

    fn output_dim(&self) -> usize {
        self.pf.n
    }

    fn value(&self, y0: &[T]) -> Result<DVector<T>, ExprError> {
        Ok(DVector::from_vec(self.pf.phi.eval(&self.head(y0))?))
    }

    fn jacobian(&self, y0: &[T]) -> Result<DMatrix<T>, ExprError> {
        let jac = self.pf.phi.jacobian(&self.head(y0))?;
        Ok(jac.columns(0, self.pf.m).into_owned())
    }
}

fn jet_to_expr(e: JetError) -> ExprError {
    match e {
        JetError::Domain(e) => e,
        other => ExprError::Dimension {
            expected: 0,
            got: other.to_string().len(),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Comparison {
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = "<")]
    Lt,
}

/// Predicate `lhs ⋈ rhs` over jets (levels `0..=r+1`) delimiting where the
/// chart is checked.
#[derive(Debug, Clone, PartialEq)]
pub struct Guard {
    text: String,
    difference: SmoothMap,
    cmp: Comparison,
}

impl Guard {
    pub fn parse(text: &str, m: usize, levels: usize) -> Result<Self, JetError> {
        let ops = [(">=", Comparison::Ge), ("<=", Comparison::Le), (">", Comparison::Gt), ("<", Comparison::Lt)];
        let (at, op, cmp) = ops
            .iter()
            .filter_map(|(op, cmp)| text.find(op).map(|at| (at, *op, *cmp)))
            .min_by_key(|(at, op, _)| (*at, std::cmp::Reverse(op.len())))
            .ok_or_else(|| JetError::Guard(format!("'{text}' has no comparison operator (>=, <=, >, <)")))?;
        let (lhs, rhs) = (&text[..at], &text[at + op.len()..]);
        if rhs.contains(['<', '>']) {
            return Err(JetError::Guard(format!("'{text}' has more than one comparison")));
        }
        let ctx = VarContext::jet(m, levels);
        let lhs = parse_expression(lhs, &ctx)?;
        let rhs = parse_expression(rhs, &ctx)?;
        let difference = SmoothMap::new(
            ctx,
            vec![crate::expr::Expr::Binary(crate::expr::BinOp::Sub, Box::new(lhs), Box::new(rhs))],
        );
        Ok(Self {
            text: text.trim().to_string(),
            difference,
            cmp,
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn holds<T: Real>(&self, jet: &JetPoint<T>) -> Result<bool, ExprError> {
        let d = self.difference.eval(jet.as_flat().as_slice())?[0].primal();
        Ok(match self.cmp {
            Comparison::Ge => d >= 0.0,
            Comparison::Le => d <= 0.0,
            Comparison::Gt => d > 0.0,
            Comparison::Lt => d < 0.0,
        })
    }
}

/// Seeded Gaussian jet sampler with optional rejection by a guard.
#[derive(Debug, Clone)]
pub struct JetSampler {
    pub n_samples: usize,
    pub seed: u64,
    pub scale: f64,
    pub guard: Option<Guard>,
    /// Draws allowed per requested sample before giving up.
    pub max_draws_per_sample: usize,
}

impl JetSampler {
    pub fn new(n_samples: usize, seed: u64, scale: f64) -> Self {
        Self {
            n_samples,
            seed,
            scale,
            guard: None,
            max_draws_per_sample: 1000,
        }
    }

    pub fn with_guard(mut self, guard: Option<Guard>) -> Self {
        self.guard = guard;
        self
    }

    pub fn draw<T: Real>(&self, m: usize, levels: usize) -> SampledJets<T> {
        let mut stream = GaussianStream::new(self.seed, self.scale);
        let mut jets = Vec::with_capacity(self.n_samples);
        let mut rejected = 0;
        let budget = self.n_samples.saturating_mul(self.max_draws_per_sample);
        let mut draws = 0;
        while jets.len() < self.n_samples && draws < budget {
            draws += 1;
            let jet = JetPoint {
                m,
                data: stream.next_vector(m * levels),
            };
            let keep = match &self.guard {
                None => true,
                Some(g) => g.holds(&jet).unwrap_or(false),
            };
            if keep {
                jets.push(jet);
            } else {
                rejected += 1;
            }
        }
        SampledJets {
            exhausted: jets.len() < self.n_samples,
            jets,
            rejected,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampledJets<T> {
    pub jets: Vec<JetPoint<T>>,
    pub rejected: usize,
    /// The guard rejected so much that fewer jets than requested were drawn.
    pub exhausted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleFault {
    pub sample: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplingInfo {
    pub requested: usize,
    pub evaluated: usize,
    pub rejected_by_guard: usize,
    pub seed: u64,
    pub scale: f64,
    pub guard: Option<String>,
}

impl SamplingInfo {
    fn new<T>(sampler: &JetSampler, drawn: &SampledJets<T>) -> Self {
        Self {
            requested: sampler.n_samples,
            evaluated: drawn.jets.len(),
            rejected_by_guard: drawn.rejected,
            seed: sampler.seed,
            scale: sampler.scale,
            guard: sampler.guard.as_ref().map(|g| g.text.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PdeReport {
    pub sampling: SamplingInfo,
    pub tol: f64,
    pub max_residual: f64,
    pub argmax_sample: Option<usize>,
    /// Largest `‖∂φ/∂(y₀..y_r)‖_∞` seen; large values flag an ill-conditioned chart.
    pub max_chart_jacobian: f64,
    pub domain_errors: Vec<SampleFault>,
    pub pass: bool,
}

/// Maximum of `‖F(φ, 𝓛φ)‖` over sampled (guarded) jets.
pub fn check_parameter_function<T: Real>(
    sys: &ImplicitSystem,
    pf: &ParameterFunction,
    sampler: &JetSampler,
    tol: f64,
) -> Result<PdeReport, JetError> {
    check_dims(sys, pf)?;
    let drawn = sampler.draw::<T>(pf.m, pf.levels());
    let mut report = PdeReport {
        sampling: SamplingInfo::new(sampler, &drawn),
        tol,
        max_residual: 0.0,
        argmax_sample: None,
        max_chart_jacobian: 0.0,
        domain_errors: Vec::new(),
        pass: false,
    };
    for (sample, jet) in drawn.jets.iter().enumerate() {
        let outcome = pde_residual(sys, pf, jet).and_then(|r| Ok((r, pf.phi.jacobian(jet.head())?)));
        match outcome {
            Ok((res, jac)) => {
                let norm = res.norm().primal();
                if report.argmax_sample.is_none() || norm > report.max_residual {
                    report.max_residual = norm;
                    report.argmax_sample = Some(sample);
                }
                let jnorm = jac.iter().fold(0.0_f64, |a, v| a.max(v.primal().abs()));
                report.max_chart_jacobian = report.max_chart_jacobian.max(jnorm);
            }
            Err(e) => report.domain_errors.push(SampleFault {
                sample,
                message: e.to_string(),
            }),
        }
    }
    report.pass = !drawn.exhausted && report.domain_errors.is_empty() && report.max_residual <= tol;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubmersionSample {
    pub sample: usize,
    pub residual: f64,
    pub rank_dphi_big: usize,
    pub rank_dphi: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubmersionReport {
    pub sampling: SamplingInfo,
    pub tol_res: f64,
    pub tol_rank: f64,
    pub required_rank: usize,
    pub state_dim: usize,
    pub max_residual: f64,
    pub min_rank_dphi_big: Option<usize>,
    pub min_rank_dphi: Option<usize>,
    /// Samples where `rank dφ < n`.
    pub rank_dphi_violations: usize,
    pub domain_errors: Vec<SampleFault>,
    pub per_sample: Vec<SubmersionSample>,
    pub pass: bool,
}

/// At each sampled jet: `Φ(jet)` lies on the variety and `rank dΦ = n + m`.
/// Also records `rank dφ`, which must equal `n` wherever `Φ` is a submersion.
pub fn check_submersion<T: Real>(
    sys: &ImplicitSystem,
    pf: &ParameterFunction,
    sampler: &JetSampler,
    tol_res: f64,
    tol_rank: f64,
) -> Result<SubmersionReport, JetError> {
    check_dims(sys, pf)?;
    let drawn = sampler.draw::<T>(pf.m, pf.levels());
    let required = pf.n + pf.m;
    let mut report = SubmersionReport {
        sampling: SamplingInfo::new(sampler, &drawn),
        tol_res,
        tol_rank,
        required_rank: required,
        state_dim: pf.n,
        max_residual: 0.0,
        min_rank_dphi_big: None,
        min_rank_dphi: None,
        rank_dphi_violations: 0,
        domain_errors: Vec::new(),
        per_sample: Vec::with_capacity(drawn.jets.len()),
        pass: false,
    };
    for (sample, jet) in drawn.jets.iter().enumerate() {
        let outcome = (|| -> Result<SubmersionSample, JetError> {
            let residual = pde_residual(sys, pf, jet)?.norm().primal();
            let big = phi_big_jacobian(pf, jet)?;
            let rank_dphi_big = svd_rank(&big, lit(tol_rank))?.rank;
            let small = big.view((0, 0), (pf.n, pf.m * (pf.r + 1))).into_owned();
            let rank_dphi = svd_rank(&small, lit(tol_rank))?.rank;
            Ok(SubmersionSample {
                sample,
                residual,
                rank_dphi_big,
                rank_dphi,
                pass: residual <= tol_res && rank_dphi_big == required,
            })
        })();
        match outcome {
            Ok(s) => {
                report.max_residual = report.max_residual.max(s.residual);
                report.min_rank_dphi_big = Some(report.min_rank_dphi_big.map_or(s.rank_dphi_big, |r| r.min(s.rank_dphi_big)));
                report.min_rank_dphi = Some(report.min_rank_dphi.map_or(s.rank_dphi, |r| r.min(s.rank_dphi)));
                if s.rank_dphi < pf.n {
                    report.rank_dphi_violations += 1;
                }
                report.per_sample.push(s);
            }
            Err(e) => report.domain_errors.push(SampleFault {
                sample,
                message: e.to_string(),
            }),
        }
    }
    report.pass = !drawn.exhausted
        && report.domain_errors.is_empty()
        && report.per_sample.iter().all(|s| s.pass);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumMapOptions {
    pub n_samples: usize,
    pub seed: u64,
    pub scale: f64,
    pub tol: f64,
    pub tol_rank: f64,
    /// Minimum `‖y₀ − y₀′‖` for a pair to enter the injectivity probe.
    pub min_pair_distance: f64,
    /// Pairs whose image separation ratio falls to this level count as collisions.
    pub injectivity_tol: f64,
    pub guard: Option<Guard>,
}

impl EquilibriumMapOptions {
    pub fn new(n_samples: usize, seed: u64, scale: f64) -> Self {
        Self {
            n_samples,
            seed,
            scale,
            tol: 1e-10,
            tol_rank: crate::numlin::DEFAULT_RANK_TOL,
            min_pair_distance: 1e-3 * scale,
            injectivity_tol: 1e-8,
            guard: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquilibriumMapReport {
    pub samples: usize,
    pub seed: u64,
    pub scale: f64,
    pub tol: f64,
    pub max_equilibrium_residual: f64,
    pub required_rank: usize,
    pub min_rank: Option<usize>,
    pub pairs_tested: usize,
    pub min_separation_ratio: Option<f64>,
    pub inversion_attempts: usize,
    pub inversion_successes: usize,
    pub domain_errors: Vec<SampleFault>,
    /// The guard rejects every equilibrium jet that was evaluated.
    pub guard_excludes_equilibria: bool,
    pub note: &'static str,
    pub pass: bool,
}

/// Local evidence that `y₀ ↦ φ(y₀, 0, …, 0)` is a diffeomorphism onto the
/// equilibrium variety `F(x, 0) = 0`: image on the variety, rank `m`,
/// pairwise injectivity on the sample, and Gauss-Newton inversion onto
/// equilibria found independently from `f(x, u) = 0`.
pub fn check_equilibrium_map<T: Real>(
    sys: &ImplicitSystem,
    pf: &ParameterFunction,
    opts: &EquilibriumMapOptions,
) -> Result<EquilibriumMapReport, JetError> {
    check_dims(sys, pf)?;
    let (n, m) = (pf.n, pf.m);
    let chart = EquilibriumChart::new(pf);
    let mut stream = GaussianStream::new(opts.seed, opts.scale);
    let mut report = EquilibriumMapReport {
        samples: opts.n_samples,
        seed: opts.seed,
        scale: opts.scale,
        tol: opts.tol,
        max_equilibrium_residual: 0.0,
        required_rank: m,
        min_rank: None,
        pairs_tested: 0,
        min_separation_ratio: None,
        inversion_attempts: 0,
        inversion_successes: 0,
        domain_errors: Vec::new(),
        guard_excludes_equilibria: false,
        note: "local evidence",
        pass: false,
    };
    let zero_p = vec![T::zero(); n];
    let mut images: Vec<(DVector<T>, DVector<T>)> = Vec::new();
    let mut guard_hits = 0;
    let mut residual_ok = true;
    for sample in 0..opts.n_samples {
        let y0: DVector<T> = stream.next_vector(m);
        let outcome = (|| -> Result<(DVector<T>, usize, f64), JetError> {
            let x0 = DiffMap::<T>::value(&chart, y0.as_slice())?;
            let res = sys.residual(x0.as_slice(), &zero_p)?.norm().primal();
            let jac = DiffMap::<T>::jacobian(&chart, y0.as_slice())?;
            let rank = svd_rank(&jac, lit(opts.tol_rank))?.rank;
            Ok((x0, rank, res))
        })();
        match outcome {
            Ok((x0, rank, res)) => {
                report.max_equilibrium_residual = report.max_equilibrium_residual.max(res);
                residual_ok &= res <= opts.tol;
                report.min_rank = Some(report.min_rank.map_or(rank, |r| r.min(rank)));
                images.push((y0.clone(), x0));
            }
            Err(e) => report.domain_errors.push(SampleFault {
                sample,
                message: e.to_string(),
            }),
        }
        if let Some(g) = &opts.guard {
            let jet = JetPoint::equilibrium(&y0, pf.levels())?;
            if g.holds(&jet).unwrap_or(false) {
                guard_hits += 1;
            }
        }
    }
    report.guard_excludes_equilibria = opts.guard.is_some() && guard_hits == 0;

    let mut min_ratio: Option<f64> = None;
    for a in 0..images.len() {
        for b in (a + 1)..images.len() {
            let dy = (&images[a].0 - &images[b].0).norm().primal();
            if dy < opts.min_pair_distance {
                continue;
            }
            let dx = (&images[a].1 - &images[b].1).norm().primal();
            report.pairs_tested += 1;
            let ratio = dx / dy;
            min_ratio = Some(min_ratio.map_or(ratio, |r| r.min(ratio)));
        }
    }
    report.min_separation_ratio = min_ratio;

    let gn = GaussNewtonOptions {
        tol: lit(opts.tol),
        ..Default::default()
    };
    for (y0, _) in &images {
        let xg: DVector<T> = stream.next_vector(n);
        let ug: DVector<T> = stream.next_vector(sys.m());
        report.inversion_attempts += 1;
        let Ok(eq) = find_equilibrium(sys, &xg, &ug) else {
            continue;
        };
        if let Ok(sol) = gauss_newton_solve(&chart, &eq.x, y0, &gn) {
            if sol.converged {
                report.inversion_successes += 1;
            }
        }
    }

    report.pass = report.domain_errors.is_empty()
        && !images.is_empty()
        && residual_ok
        && report.min_rank == Some(m)
        && min_ratio.is_none_or(|r| r > opts.injectivity_tol)
        && report.inversion_successes == report.inversion_attempts;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurjectivityReport {
    pub label: &'static str,
    pub targets: usize,
    pub restarts: usize,
    pub seed: u64,
    pub tol: f64,
    pub reached: usize,
    pub success_fraction: f64,
    /// Worst over targets of the best residual over restarts.
    pub worst_residual: f64,
}

/// For each `(x, p)` on the variety, tries to solve `Φ(jet) = (x, p)` by
/// Gauss-Newton from `restarts` seeded jets.
pub fn surjectivity_probe<T: Real>(
    pf: &ParameterFunction,
    variety: &VarietySample<T>,
    restarts: usize,
    seed: u64,
    scale: f64,
    tol: f64,
) -> SurjectivityReport {
    let map = PhiMap::new(pf);
    let dim = pf.m * pf.levels();
    let mut stream = GaussianStream::new(seed, scale);
    let gn = GaussNewtonOptions {
        tol: lit(tol),
        ..Default::default()
    };
    let mut reached = 0;
    let mut worst: f64 = 0.0;
    for point in &variety.points {
        let target = DVector::from_iterator(2 * pf.n, point.x.iter().chain(point.p.iter()).copied());
        let mut best = f64::INFINITY;
        for _ in 0..restarts {
            let init: DVector<T> = stream.next_vector(dim);
            if let Ok(sol) = gauss_newton_solve(&map, &target, &init, &gn) {
                best = best.min(sol.residual_norm.primal());
            }
        }
        if best <= tol {
            reached += 1;
        }
        worst = worst.max(best);
    }
    let targets = variety.points.len();
    SurjectivityReport {
        label: PROBE_LABEL,
        targets,
        restarts,
        seed,
        tol,
        reached,
        success_fraction: if targets == 0 { 0.0 } else { reached as f64 / targets as f64 },
        worst_residual: worst,
    }
}

/// Commutation bracket norms `‖∂_{y_i}(𝓛g) − 𝓛(∂_{y_i}g) − ∂_{y_{i−1}}g‖`
/// for `i = 0..=r+1` (the last term absent at `i = 0`), taken over all
/// components of `φ`. The first term is a Richardson-extrapolated central
/// difference of [`total_derivative`] (steps `h` and `h/2`), so it is
/// independent of the nested dual route used for `𝓛(∂g/∂y_i)`.
pub fn commutation_brackets<T: Real>(
    pf: &ParameterFunction,
    jet: &JetPoint<T>,
    h: T,
) -> Result<Vec<T>, JetError> {
    let d = pf.derivatives(jet)?;
    let m = pf.m;
    let levels = pf.levels();
    let mut out = Vec::with_capacity(levels);
    for i in 0..levels {
        let mut fd = DMatrix::zeros(pf.n, m);
        for c in 0..m {
            let idx = i * m + c;
            let central = |step: T| -> Result<DVector<T>, JetError> {
                let mut plus = jet.data.clone();
                plus[idx] += step;
                let mut minus = jet.data.clone();
                minus[idx] -= step;
                let tp = total_derivative(pf, &JetPoint::from_flat(m, plus)?)?;
                let tm = total_derivative(pf, &JetPoint::from_flat(m, minus)?)?;
                Ok((tp - tm) / (step + step))
            };
            let coarse = central(h)?;
            let fine = central(h / lit(2.0))?;
            fd.set_column(c, &((fine * lit::<T>(4.0) - coarse) / lit::<T>(3.0)));
        }
        let lie = if i <= pf.r { d.lie_block(i) } else { DMatrix::zeros(pf.n, m) };
        let lower = if i >= 1 { d.block(i - 1) } else { DMatrix::zeros(pf.n, m) };
        out.push((fd - lie - lower).norm());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn di_sys() -> ImplicitSystem {
        ImplicitSystem::parse(2, 1, &["p1 - x2"], &["x2", "u1"]).unwrap()
    }

    fn di_phi() -> ParameterFunction {
        ParameterFunction::parse(1, 2, 1, &["y0_1", "y1_1"]).unwrap()
    }

    fn unicycle_sys() -> ImplicitSystem {
        ImplicitSystem::parse(3, 2, &["p1*sin(x3) - p2*cos(x3)"], &["u1*cos(x3)", "u1*sin(x3)", "u2"]).unwrap()
    }

    fn unicycle_phi() -> ParameterFunction {
        ParameterFunction::parse(2, 3, 1, &["y0_1", "y0_2", "atan2(y1_2, y1_1)"]).unwrap()
    }

    fn jet(m: usize, v: &[f64]) -> JetPoint<f64> {
        JetPoint::from_flat(m, DVector::from_column_slice(v)).unwrap()
    }

    #[test]
    fn phi_cannot_see_the_last_level() {
        assert!(matches!(
            ParameterFunction::parse(1, 2, 1, &["y0_1", "y2_1"]),
            Err(JetError::Domain(ExprError::UnknownVariable(_)))
        ));
        assert!(matches!(
            ParameterFunction::parse(1, 2, 1, &["y0_1"]),
            Err(JetError::Dimension(_))
        ));
    }

    #[test]
    fn total_derivative_examples() {
        let t = total_derivative(&di_phi(), &jet(1, &[0.3, 0.7, -0.2])).unwrap();
        assert_eq!(t.as_slice(), &[0.7, -0.2]);
        let t = total_derivative(&unicycle_phi(), &jet(2, &[0.0, 0.0, 1.0, 0.0, 0.0, 2.0])).unwrap();
        assert_eq!(t.as_slice(), &[1.0, 0.0, 2.0]);
        let t = total_derivative(&unicycle_phi(), &jet(2, &[1.0, 2.0, 3.0, 4.0, 0.0, 0.0])).unwrap();
        assert_eq!(t.as_slice(), &[3.0, 4.0, 0.0]);
    }

    #[test]
    fn total_derivative_vanishes_at_rest() {
        let pf = ParameterFunction::parse(1, 2, 1, &["sin(y0_1) + y1_1^2", "exp(y0_1) * y1_1"]).unwrap();
        let t = total_derivative(&pf, &jet(1, &[0.4, 0.0, 0.0])).unwrap();
        assert_eq!(t.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn wrong_jet_shape_is_rejected() {
        assert!(matches!(
            total_derivative(&di_phi(), &jet(1, &[0.3, 0.7])),
            Err(JetError::Dimension(_))
        ));
        assert!(matches!(
            JetPoint::from_flat(1, DVector::from_vec(vec![f64::NAN])),
            Err(JetError::NonFinite)
        ));
    }

    #[test]
    fn phi_big_examples() {
        let (x, p) = phi_big(&di_phi(), &jet(1, &[0.3, 0.7, -0.2])).unwrap();
        assert_eq!((x.as_slice(), p.as_slice()), (&[0.3, 0.7][..], &[0.7, -0.2][..]));
        let (x, p) = phi_big(&unicycle_phi(), &jet(2, &[1.0, 2.0, 1.0, 0.0, 0.0, 2.0])).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 2.0, 0.0]);
        assert_eq!(p.as_slice(), &[1.0, 0.0, 2.0]);
        let constant = ParameterFunction::parse(1, 2, 1, &["1.5", "-2"]).unwrap();
        let (x, p) = phi_big(&constant, &jet(1, &[0.0, 0.0, 0.0])).unwrap();
        assert_eq!((x.as_slice(), p.as_slice()), (&[1.5, -2.0][..], &[0.0, 0.0][..]));
    }

    #[test]
    fn phi_big_jacobian_of_double_integrator() {
        let j = phi_big_jacobian(&di_phi(), &jet(1, &[0.3, 0.7, -0.2])).unwrap();
        let expected = DMatrix::from_row_slice(4, 3, &[1., 0., 0., 0., 1., 0., 0., 1., 0., 0., 0., 1.]);
        assert_eq!(j, expected);
    }

    #[test]
    fn phi_big_jacobian_matches_finite_differences() {
        let pf = unicycle_phi();
        let map = PhiMap::new(&pf);
        let x = [0.3, -0.1, 0.8, 0.5, -0.4, 1.2];
        let j = DiffMap::<f64>::jacobian(&map, &x).unwrap();
        let h = 1e-6;
        for c in 0..6 {
            let mut plus = x;
            plus[c] += h;
            let mut minus = x;
            minus[c] -= h;
            let d = (DiffMap::<f64>::value(&map, &plus).unwrap() - DiffMap::<f64>::value(&map, &minus).unwrap()) / (2.0 * h);
            for r in 0..6 {
                assert!((d[r] - j[(r, c)]).abs() < 1e-7, "({r}, {c})");
            }
        }
    }

    #[test]
    fn pde_residual_examples() {
        let r = pde_residual(&di_sys(), &di_phi(), &jet(1, &[0.3, 0.7, -0.2])).unwrap();
        assert_eq!(r[0], 0.0);
        let broken = ParameterFunction::parse(1, 2, 1, &["y0_1", "2*y1_1"]).unwrap();
        let r = pde_residual(&di_sys(), &broken, &jet(1, &[0.3, 0.7, -0.2])).unwrap();
        assert!((r[0] + 0.7).abs() < 1e-15);
    }

    #[test]
    fn pde_check_on_guarded_unicycle() {
        let guard = Guard::parse("y1_1^2 + y1_2^2 >= 0.01", 2, 3).unwrap();
        let sampler = JetSampler::new(100, 5, 1.0).with_guard(Some(guard));
        let rep = check_parameter_function::<f64>(&unicycle_sys(), &unicycle_phi(), &sampler, 1e-8).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(rep.max_residual <= 1e-12);
        assert_eq!(rep.sampling.evaluated, 100);
        assert_eq!(rep.sampling.guard.as_deref(), Some("y1_1^2 + y1_2^2 >= 0.01"));
    }

    #[test]
    fn unguarded_unicycle_conditioning_grows_near_rest() {
        // ‖∂θ/∂y₁‖ = 1/‖y₁‖, so a sampler hugging y₁ = 0 sees a large chart
        // Jacobian even though the residual stays at roundoff.
        let sampler = JetSampler::new(200, 11, 1e-3);
        let rep = check_parameter_function::<f64>(&unicycle_sys(), &unicycle_phi(), &sampler, 1e-8).unwrap();
        assert!(rep.max_chart_jacobian > 1e3);
        let wide = JetSampler::new(200, 11, 1.0).with_guard(Some(Guard::parse("y1_1^2 + y1_2^2 >= 0.01", 2, 3).unwrap()));
        let rep_wide = check_parameter_function::<f64>(&unicycle_sys(), &unicycle_phi(), &wide, 1e-8).unwrap();
        assert!(rep_wide.max_chart_jacobian <= 10.0 + 1e-12);
    }

    #[test]
    fn guard_parsing() {
        let g = Guard::parse("y2_1 > 0", 1, 3).unwrap();
        assert!(g.holds(&jet(1, &[0.0, 0.0, 1.0])).unwrap());
        assert!(!g.holds(&jet(1, &[0.0, 0.0, 0.0])).unwrap());
        let g = Guard::parse("y0_1 <= 1", 1, 3).unwrap();
        assert!(g.holds(&jet(1, &[1.0, 0.0, 0.0])).unwrap());
        assert!(matches!(Guard::parse("y0_1 + 1", 1, 3), Err(JetError::Guard(_))));
        assert!(matches!(Guard::parse("y0_1 < 1 < 2", 1, 3), Err(JetError::Guard(_))));
        assert!(matches!(Guard::parse("y3_1 < 1", 1, 3), Err(JetError::Domain(_))));
    }

    #[test]
    fn exhausted_guard_fails_the_check() {
        let sampler = JetSampler {
            max_draws_per_sample: 3,
            ..JetSampler::new(10, 1, 1.0)
        }
        .with_guard(Some(Guard::parse("y0_1 > 100", 1, 3).unwrap()));
        let rep = check_parameter_function::<f64>(&di_sys(), &di_phi(), &sampler, 1e-8).unwrap();
        assert_eq!(rep.sampling.evaluated, 0);
        assert!(!rep.pass);
    }

    #[test]
    fn submersion_of_double_integrator() {
        let rep = check_submersion::<f64>(&di_sys(), &di_phi(), &JetSampler::new(20, 1, 1.0), 1e-10, 1e-8).unwrap();
        assert!(rep.pass);
        assert_eq!(rep.min_rank_dphi_big, Some(3));
        assert_eq!(rep.min_rank_dphi, Some(2));
        assert_eq!(rep.rank_dphi_violations, 0);
    }

    #[test]
    fn degenerate_phi_has_rank_deficient_dphi() {
        let pf = ParameterFunction::parse(1, 2, 1, &["y0_1", "y0_1"]).unwrap();
        let rep = check_submersion::<f64>(&di_sys(), &pf, &JetSampler::new(20, 1, 1.0), 1e-10, 1e-8).unwrap();
        assert!(!rep.pass);
        assert_eq!(rep.min_rank_dphi, Some(1));
        assert_eq!(rep.rank_dphi_violations, 20);
    }

    #[test]
    fn equilibrium_map_of_double_integrator() {
        let rep = check_equilibrium_map::<f64>(&di_sys(), &di_phi(), &EquilibriumMapOptions::new(10, 3, 1.0)).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert_eq!(rep.min_rank, Some(1));
        assert_eq!(rep.inversion_successes, 10);
        assert!((rep.min_separation_ratio.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equilibrium_map_of_unicycle_hits_atan2_origin() {
        let rep = check_equilibrium_map::<f64>(&unicycle_sys(), &unicycle_phi(), &EquilibriumMapOptions::new(5, 3, 1.0)).unwrap();
        assert!(!rep.pass);
        assert_eq!(rep.domain_errors.len(), 5);
        assert!(rep.domain_errors[0].message.contains("atan2(0, 0)"));
    }

    #[test]
    fn equilibrium_map_flags_guard_exclusion() {
        let mut opts = EquilibriumMapOptions::new(5, 3, 1.0);
        opts.guard = Some(Guard::parse("y1_1^2 >= 0.01", 1, 3).unwrap());
        let rep = check_equilibrium_map::<f64>(&di_sys(), &di_phi(), &opts).unwrap();
        assert!(rep.guard_excludes_equilibria);
    }

    #[test]
    fn surjectivity_of_double_integrator_and_degenerate_phi() {
        let sys = di_sys();
        let variety = crate::system::sample_variety::<f64>(&sys, 20, 2, 1.0).unwrap();
        let rep = surjectivity_probe(&di_phi(), &variety, 3, 4, 1.0, 1e-8);
        assert_eq!(rep.success_fraction, 1.0);
        let degenerate = ParameterFunction::parse(1, 2, 1, &["y0_1", "y0_1"]).unwrap();
        let rep = surjectivity_probe(&degenerate, &variety, 3, 4, 1.0, 1e-8);
        assert_eq!(rep.success_fraction, 0.0);
        assert_eq!(rep.label, PROBE_LABEL);
    }

    #[test]
    fn brackets_vanish_on_a_nonlinear_chart() {
        let pf = ParameterFunction::parse(1, 2, 2, &["sin(y0_1) * y1_1 + y2_1^2", "atan(y1_1 * y0_1)"]).unwrap();
        let b = commutation_brackets(&pf, &jet(1, &[0.3, -0.6, 0.9, 1.1]), 1e-4).unwrap();
        assert_eq!(b.len(), 4);
        assert!(b.iter().all(|v| *v < 1e-8), "{b:?}");
    }

    #[test]
    fn time_scaling_scales_the_total_derivative() {
        let pf = unicycle_phi();
        let j = jet(2, &[0.3, -0.2, 0.5, 0.9, -1.0, 0.4]);
        let a = total_derivative(&pf, &j).unwrap();
        let b = total_derivative(&pf, &j.time_scaled(2.5)).unwrap();
        assert!((b - a * 2.5).norm() < 1e-12);
    }
}
