//! Runs every check on a spec file and assembles the versioned report.
//!
//! Blocks run in a fixed order, each on its own sub-seed of the run seed,
//! so a report is a pure function of the spec bytes and the options.

use std::fmt;

use nalgebra::DVector;
use serde::Serialize;
use serde_json::{json, Value};

use crate::control::{check_chain_inclusions, check_equilibrium_identities, check_structure_identities, kalman_rank, linearize};
use crate::jet::{
    check_equilibrium_map, check_parameter_function, check_submersion, surjectivity_probe, EquilibriumChart,
    EquilibriumMapOptions, JetPoint, JetSampler,
};
use crate::numlin::{svd_rank, DiffMap};
use crate::planner::{
    fit_flat_path, recover_inputs, roundtrip_check, synthesize_trajectory, PlanError, RoundtripReport, Trajectory,
    TrajectoryExport,
};
use crate::sampling::{sub_seed, GaussianStream};
use crate::spec_file::{CheckOptions, PlanOptions, SpecFile};
use crate::system::{check_consistency, equilibrium_input, find_equilibrium, sample_variety, EquilibriumPoint};

pub const SCHEMA: &str = "flatcert.check/v1";
pub const PLAN_SCHEMA: &str = "flatcert.plan/v1";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Tolerance for `∂F/∂x + ∂F/∂p·A = 0` and `∂F/∂p·B = 0` at equilibria.
const LINEARIZATION_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Inconclusive,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Inconclusive => "INCONCLUSIVE",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    #[serde(rename = "CRITERION SATISFIED")]
    Satisfied,
    #[serde(rename = "CRITERION FAILED")]
    Failed,
    #[serde(rename = "INCONCLUSIVE")]
    Inconclusive,
}

impl Verdict {
    pub fn exit_code(self) -> i32 {
        match self {
            Verdict::Satisfied => 0,
            Verdict::Failed => 1,
            Verdict::Inconclusive => 3,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Satisfied => "CRITERION SATISFIED",
            Verdict::Failed => "CRITERION FAILED",
            Verdict::Inconclusive => "INCONCLUSIVE",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Block {
    pub name: &'static str,
    pub mandatory: bool,
    pub status: Status,
    pub verdict: String,
    pub evidence: Value,
}

impl Block {
    fn new(name: &'static str, mandatory: bool, status: Status, verdict: String, evidence: Value) -> Self {
        Self {
            name,
            mandatory,
            status,
            verdict,
            evidence,
        }
    }

    fn error(name: &'static str, mandatory: bool, message: String) -> Self {
        let evidence = json!({ "error": message });
        Self::new(name, mandatory, Status::Fail, message, evidence)
    }
}

fn pass_if(ok: bool) -> Status {
    if ok {
        Status::Pass
    } else {
        Status::Fail
    }
}

/// Any failing mandatory block fails the criterion; otherwise any
/// inconclusive mandatory block makes the run inconclusive.
pub fn overall_verdict(blocks: &[Block]) -> Verdict {
    let mandatory = || blocks.iter().filter(|b| b.mandatory);
    if mandatory().any(|b| b.status == Status::Fail) {
        Verdict::Failed
    } else if mandatory().any(|b| b.status == Status::Inconclusive) {
        Verdict::Inconclusive
    } else {
        Verdict::Satisfied
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub schema: &'static str,
    pub tool_version: &'static str,
    pub spec_name: Option<String>,
    pub spec_hash: String,
    pub seed: u64,
    pub guard: Option<String>,
    pub options: CheckOptions,
    pub blocks: Vec<Block>,
    pub verdict: Verdict,
    pub exit_code: i32,
}

impl CheckReport {
    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn render_table(&self) -> String {
        let mut out = format!(
            "flatcert {} check: {} (spec sha256 {})\n",
            self.tool_version,
            self.spec_name.as_deref().unwrap_or("unnamed"),
            &self.spec_hash[..12.min(self.spec_hash.len())]
        );
        out.push_str(&format!(
            "seed {}, {} jets, scale {}, guard: {}\n\n",
            self.seed,
            self.options.samples,
            self.options.scale,
            self.guard.as_deref().unwrap_or("none")
        ));
        for b in &self.blocks {
            out.push_str(&format!(
                "  {:<24} {:<10} {:<13} {}\n",
                b.name,
                if b.mandatory { "mandatory" } else { "info" },
                b.status.to_string(),
                b.verdict
            ));
        }
        out.push_str(&format!("\n{}\n", self.verdict));
        out
    }
}

/// Runs every block on `spec` with `opts`.
pub fn run_check(spec: &SpecFile, opts: &CheckOptions) -> CheckReport {
    let o = opts;
    let mut blocks = vec![consistency_block(spec, o), pde_block(spec, o)];
    blocks.extend(submersion_blocks(spec, o));
    blocks.push(equilibrium_map_block(spec, o));

    let y0s = equilibrium_samples(spec, o);
    blocks.push(equilibrium_identities_block(spec, o, &y0s));
    let (chain, equilibria) = chain_block(spec, o, &y0s);
    blocks.push(chain);
    blocks.push(kalman_block(spec, o, equilibria));
    blocks.push(structure_block(spec, o));
    blocks.push(probe_block(spec, o));

    let verdict = overall_verdict(&blocks);
    CheckReport {
        schema: SCHEMA,
        tool_version: TOOL_VERSION,
        spec_name: spec.name.clone(),
        spec_hash: spec.hash.clone(),
        seed: o.seed,
        guard: spec.guard.as_ref().map(|g| g.text().to_string()),
        options: o.clone(),
        blocks,
        verdict,
        exit_code: verdict.exit_code(),
    }
}

fn sampler(spec: &SpecFile, o: &CheckOptions, stream: u64) -> JetSampler {
    JetSampler::new(o.samples, sub_seed(o.seed, stream), o.scale).with_guard(spec.guard.clone())
}

fn guard_note(spec: &SpecFile) -> String {
    spec.guard.as_ref().map_or(String::new(), |g| format!(" on guard `{}`", g.text()))
}

fn consistency_block(spec: &SpecFile, o: &CheckOptions) -> Block {
    match check_consistency(&spec.system, o.samples, sub_seed(o.seed, 1), o.scale, o.consistency_tol) {
        Ok(r) => Block::new(
            "consistency",
            false,
            Status::Pass,
            format!(
                "F(x, f(x,u)) <= {:.3e} on {} samples; rank dF/dp = {}, rank df/du = {}",
                r.max_parameterization_residual, r.samples, r.implicit_rank, r.input_rank
            ),
            json!(r),
        ),
        Err(e) => Block::error("consistency", false, e.to_string()),
    }
}

fn pde_block(spec: &SpecFile, o: &CheckOptions) -> Block {
    match check_parameter_function::<f64>(&spec.system, &spec.flat, &sampler(spec, o, 2), o.pde_tol) {
        Ok(r) => {
            let mut verdict = format!(
                "max |F(phi, L phi)| = {:.3e} over {} jets{} (tol {:e})",
                r.max_residual,
                r.sampling.evaluated,
                guard_note(spec),
                r.tol
            );
            if !r.domain_errors.is_empty() {
                verdict.push_str(&format!(
                    "; {} domain errors, first: {}",
                    r.domain_errors.len(),
                    r.domain_errors[0].message
                ));
            }
            if r.sampling.evaluated < r.sampling.requested {
                verdict.push_str("; guard rejected too many draws");
            }
            Block::new("pde", true, pass_if(r.pass), verdict, json!(r))
        }
        Err(e) => Block::error("pde", true, e.to_string()),
    }
}

fn submersion_blocks(spec: &SpecFile, o: &CheckOptions) -> Vec<Block> {
    let r = match check_submersion::<f64>(&spec.system, &spec.flat, &sampler(spec, o, 3), o.pde_tol, o.rank_tol) {
        Ok(r) => r,
        Err(e) => {
            return vec![
                Block::error("submersion", true, e.to_string()),
                Block::error("dphi_rank", false, e.to_string()),
            ]
        }
    };
    let rank = |v: Option<usize>| v.map_or("-".to_string(), |r| r.to_string());
    let mut verdict = format!(
        "min rank dPhi = {} (need n+m = {}), max residual {:.3e} over {} jets{}",
        rank(r.min_rank_dphi_big),
        r.required_rank,
        r.max_residual,
        r.per_sample.len(),
        guard_note(spec)
    );
    if !r.domain_errors.is_empty() {
        verdict.push_str(&format!("; {} domain errors", r.domain_errors.len()));
    }
    let dphi = Block::new(
        "dphi_rank",
        false,
        pass_if(r.rank_dphi_violations == 0 && r.min_rank_dphi.is_some()),
        format!(
            "min rank dphi = {} (need n = {}); {} samples below",
            rank(r.min_rank_dphi),
            r.state_dim,
            r.rank_dphi_violations
        ),
        json!({
            "min_rank_dphi": r.min_rank_dphi,
            "state_dim": r.state_dim,
            "rank_dphi_violations": r.rank_dphi_violations,
        }),
    );
    vec![Block::new("submersion", true, pass_if(r.pass), verdict, json!(r)), dphi]
}

fn equilibrium_map_block(spec: &SpecFile, o: &CheckOptions) -> Block {
    let opts = EquilibriumMapOptions {
        tol: o.equilibrium_tol,
        tol_rank: o.rank_tol,
        guard: spec.guard.clone(),
        ..EquilibriumMapOptions::new(o.equilibrium_samples, sub_seed(o.seed, 4), o.scale)
    };
    let r = match check_equilibrium_map::<f64>(&spec.system, &spec.flat, &opts) {
        Ok(r) => r,
        Err(e) => return Block::error("equilibrium_map", true, e.to_string()),
    };
    let (status, verdict) = if let Some(first) = r.domain_errors.first() {
        (
            Status::Fail,
            format!(
                "phi(y0, 0, .., 0) undefined at {} of {} rest jets: {}",
                r.domain_errors.len(),
                r.samples,
                first.message
            ),
        )
    } else if r.guard_excludes_equilibria {
        (
            Status::Inconclusive,
            "the guard excludes every rest jet; the equilibrium leg was not evaluated".to_string(),
        )
    } else {
        (
            pass_if(r.pass),
            format!(
                "rank {} (need m = {}), residual {:.3e}, min separation ratio {}, inverted {}/{} equilibria (local evidence)",
                r.min_rank.map_or("-".into(), |v| v.to_string()),
                r.required_rank,
                r.max_equilibrium_residual,
                r.min_separation_ratio.map_or("-".into(), |v| format!("{v:.3e}")),
                r.inversion_successes,
                r.inversion_attempts
            ),
        )
    };
    Block::new("equilibrium_map", true, status, verdict, json!(r))
}

fn equilibrium_samples(spec: &SpecFile, o: &CheckOptions) -> Vec<DVector<f64>> {
    let mut stream = GaussianStream::new(sub_seed(o.seed, 5), o.scale);
    (0..o.equilibrium_samples).map(|_| stream.next_vector(spec.flat.m())).collect()
}

fn max_per_level(acc: &mut Vec<f64>, levels: &[f64]) {
    acc.resize(acc.len().max(levels.len()), 0.0);
    for (a, v) in acc.iter_mut().zip(levels) {
        *a = a.max(*v);
    }
}

fn equilibrium_identities_block(spec: &SpecFile, o: &CheckOptions, y0s: &[DVector<f64>]) -> Block {
    let mut worst = Vec::new();
    for (sample, y0) in y0s.iter().enumerate() {
        match check_equilibrium_identities(&spec.system, &spec.flat, y0, o.identity_tol) {
            Ok(r) => max_per_level(&mut worst, &r.levels),
            Err(e) => {
                return Block::new(
                    "equilibrium_identities",
                    true,
                    Status::Fail,
                    format!("rest jet {sample}: {e}"),
                    json!({ "error": e.to_string(), "sample": sample }),
                )
            }
        }
    }
    let max = worst.iter().copied().fold(0.0, f64::max);
    Block::new(
        "equilibrium_identities",
        true,
        pass_if(max <= o.identity_tol),
        format!("max residual {:.3e} over {} rest jets (tol {:e})", max, y0s.len(), o.identity_tol),
        json!({ "samples": y0s.len(), "tol": o.identity_tol, "max_residual_by_level": worst, "max_residual": max }),
    )
}

fn chain_block(spec: &SpecFile, o: &CheckOptions, y0s: &[DVector<f64>]) -> (Block, Vec<EquilibriumPoint<f64>>) {
    let chart = EquilibriumChart::new(&spec.flat);
    let (n, m, r) = (spec.system.n(), spec.flat.m(), spec.flat.r());
    let mut equilibria = Vec::new();
    let mut worst: Vec<f64> = vec![0.0; r + 1];
    let mut min_stacked = usize::MAX;
    let mut all_pass = true;
    let mut kalman_implied = true;
    let mut skipped = 0;
    let mut first_error: Option<(usize, String)> = None;
    for (sample, y0) in y0s.iter().enumerate() {
        let outcome = (|| -> Result<_, String> {
            let x0 = DiffMap::<f64>::value(&chart, y0.as_slice()).map_err(|e| e.to_string())?;
            let eq = equilibrium_input(&spec.system, &x0, &DVector::zeros(spec.system.m())).map_err(|e| e.to_string())?;
            let rep = check_chain_inclusions(&spec.system, &spec.flat, &eq, y0, o.inclusion_tol).map_err(|e| e.to_string())?;
            Ok((eq, rep))
        })();
        match outcome {
            Ok((eq, rep)) => {
                for link in &rep.inclusions {
                    worst[link.level] = worst[link.level].max(link.residual);
                }
                min_stacked = min_stacked.min(rep.stacked_rank);
                all_pass &= rep.pass;
                kalman_implied &= !rep.pass || rep.kalman_rank == n;
                equilibria.push(eq);
            }
            Err(message) => {
                // No linearization to test against, but the blocks of dphi can
                // still be checked for generating the state space.
                let mut head = vec![0.0; m * (r + 1)];
                head[..m].copy_from_slice(y0.as_slice());
                if let Ok(rank) = spec.flat.map().jacobian(&head).map_err(|e| e.to_string()).and_then(|jac| {
                    svd_rank(&jac, o.rank_tol).map(|s| s.rank).map_err(|e| e.to_string())
                }) {
                    min_stacked = min_stacked.min(rank);
                }
                all_pass = false;
                skipped += 1;
                first_error.get_or_insert((sample, message));
            }
        }
    }
    let max = worst.iter().copied().fold(0.0, f64::max);
    let stacked = (min_stacked != usize::MAX).then_some(min_stacked);
    let generates = stacked == Some(n);
    let mut verdict = format!("max inclusion residual {:.3e} (tol {:e}); ", max, o.inclusion_tol);
    match stacked {
        Some(_) if generates => verdict.push_str(&format!("blocks of dphi span R^{n}")),
        Some(k) => verdict.push_str(&format!("blocks of dphi do not generate R^{n}: stacked rank {k}")),
        None => verdict.push_str("stacked rank unavailable"),
    }
    if let Some((sample, message)) = &first_error {
        verdict.push_str(&format!("; {skipped} rest jets unusable (jet {sample}: {message})"));
    }
    let block = Block::new(
        "chain_inclusions",
        true,
        pass_if(all_pass && !y0s.is_empty()),
        verdict,
        json!({
            "samples": y0s.len(),
            "tol": o.inclusion_tol,
            "max_residual_by_level": worst,
            "min_stacked_rank": stacked,
            "state_dim": n,
            "kalman_rank_full_where_chain_passes": kalman_implied,
            "unusable_rest_jets": skipped,
            "first_error": first_error.map(|(_, m)| m),
        }),
    );
    (block, equilibria)
}

fn kalman_block(spec: &SpecFile, o: &CheckOptions, from_phi: Vec<EquilibriumPoint<f64>>) -> Block {
    let sys = &spec.system;
    let (source, equilibria) = if from_phi.is_empty() {
        let mut stream = GaussianStream::new(sub_seed(o.seed, 7), o.scale);
        let found: Vec<_> = (0..o.equilibrium_samples)
            .filter_map(|_| {
                let x: DVector<f64> = stream.next_vector(sys.n());
                let u: DVector<f64> = stream.next_vector(sys.m());
                find_equilibrium(sys, &x, &u).ok()
            })
            .collect();
        ("search", found)
    } else {
        ("phi", from_phi)
    };
    if equilibria.is_empty() {
        return Block::new(
            "kalman",
            true,
            Status::Inconclusive,
            "no equilibrium found to linearize at".into(),
            json!({ "source": source, "equilibria": 0 }),
        );
    }
    let mut ranks = Vec::with_capacity(equilibria.len());
    for eq in &equilibria {
        let rank = linearize(sys, eq, LINEARIZATION_TOL)
            .map_err(|e| e.to_string())
            .and_then(|lin| kalman_rank(&lin.a, &lin.b, o.rank_tol).map_err(|e| e.to_string()));
        match rank {
            Ok(r) => ranks.push(r.rank),
            Err(message) => return Block::error("kalman", true, message),
        }
    }
    let n = sys.n();
    let min = ranks.iter().copied().min().unwrap_or(0);
    let source_note = if source == "phi" { "phi(y0, 0, .., 0)" } else { "f(x, u) = 0" };
    Block::new(
        "kalman",
        true,
        pass_if(min == n),
        format!(
            "min rank [B AB .. A^(n-1)B] = {min} (need n = {n}) at {} equilibria from {source_note}",
            ranks.len()
        ),
        json!({ "source": source, "equilibria": ranks.len(), "min_rank": min, "state_dim": n }),
    )
}

fn structure_block(spec: &SpecFile, o: &CheckOptions) -> Block {
    let drawn = sampler(spec, o, 8).draw::<f64>(spec.flat.m(), spec.flat.levels());
    let mut worst = Vec::new();
    let mut errors = 0;
    for jet in &drawn.jets {
        match check_structure_identities(&spec.system, &spec.flat, jet, o.structure_tol) {
            Ok(r) => max_per_level(&mut worst, &r.levels),
            Err(_) => errors += 1,
        }
    }
    let max = worst.iter().copied().fold(0.0, f64::max);
    let mut verdict = format!(
        "max residual {:.3e} over {} jets{} (tol {:e})",
        max,
        drawn.jets.len(),
        guard_note(spec),
        o.structure_tol
    );
    if errors > 0 {
        verdict.push_str(&format!("; {errors} domain errors"));
    }
    Block::new(
        "structure_identities",
        false,
        pass_if(errors == 0 && !drawn.exhausted && max <= o.structure_tol),
        verdict,
        json!({
            "samples": drawn.jets.len(),
            "tol": o.structure_tol,
            "max_residual_by_level": worst,
            "max_residual": max,
            "domain_errors": errors,
        }),
    )
}

fn probe_block(spec: &SpecFile, o: &CheckOptions) -> Block {
    let variety = match sample_variety::<f64>(&spec.system, o.probe_targets, sub_seed(o.seed, 9), o.scale) {
        Ok(v) => v,
        Err(e) => return Block::error("surjectivity_probe", false, e.to_string()),
    };
    let r = surjectivity_probe(&spec.flat, &variety, o.probe_restarts, sub_seed(o.seed, 10), o.scale, o.probe_tol);
    Block::new(
        "surjectivity_probe",
        false,
        pass_if(r.reached == r.targets),
        format!(
            "{}: reached {}/{} variety points with {} restarts each",
            r.label, r.reached, r.targets, r.restarts
        ),
        json!(r),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanReport {
    pub schema: &'static str,
    pub tool_version: &'static str,
    pub spec_name: Option<String>,
    pub spec_hash: String,
    pub options: PlanOptions,
    pub coefficients: Vec<Vec<f64>>,
    pub nodes: usize,
    pub max_residual: Option<f64>,
    pub failed_nodes: usize,
    pub inputs_recovered: bool,
    /// Nodes whose jet violates the spec's guard.
    pub guard_violations: Option<usize>,
    pub roundtrip: Option<RoundtripReport>,
    pub roundtrip_error: Option<String>,
    pub pass: bool,
    #[serde(skip)]
    pub trajectory: Trajectory<f64>,
}

impl PlanReport {
    pub fn exit_code(&self) -> i32 {
        if self.pass {
            0
        } else {
            1
        }
    }

    /// Summary plus the full trajectory.
    pub fn to_json(&self, n: usize, m: usize) -> String {
        #[derive(Serialize)]
        struct Full<'a> {
            #[serde(flatten)]
            report: &'a PlanReport,
            trajectory: TrajectoryExport,
        }
        let full = Full {
            report: self,
            trajectory: self.trajectory.export(n, m),
        };
        let mut s = serde_json::to_string_pretty(&full).expect("plan serializes");
        s.push('\n');
        s
    }

    pub fn render_summary(&self) -> String {
        let mut out = format!(
            "flatcert {} plan: {} over [0, {}], degree {}, {} nodes\n",
            self.tool_version,
            self.spec_name.as_deref().unwrap_or("unnamed"),
            self.options.horizon,
            self.options.degree,
            self.nodes
        );
        out.push_str(&format!(
            "  max |F(x, xdot)| = {} (tol {:e})\n",
            self.max_residual.map_or("-".into(), |r| format!("{r:.3e}")),
            self.options.tol
        ));
        out.push_str(&format!(
            "  failed nodes: {}, inputs recovered: {}\n",
            self.failed_nodes, self.inputs_recovered
        ));
        if let Some(v) = self.guard_violations {
            out.push_str(&format!("  nodes outside the guard: {v}\n"));
        }
        if let Some(rt) = &self.roundtrip {
            out.push_str(&format!(
                "  psi round trip: max error {:.3e} on {} nodes (tol {:e}) {}\n",
                rt.max_error,
                rt.nodes_checked,
                rt.tol,
                if rt.pass { "PASS" } else { "FAIL" }
            ));
        }
        if let Some(e) = &self.roundtrip_error {
            out.push_str(&format!("  psi round trip not run: {e}\n"));
        }
        out.push_str(if self.pass { "PLAN VERIFIED\n" } else { "PLAN FAILED\n" });
        out
    }
}

fn jet_from_levels(levels: &[Vec<f64>]) -> Result<JetPoint<f64>, PlanError> {
    let rows: Vec<DVector<f64>> = levels.iter().map(|l| DVector::from_column_slice(l)).collect();
    Ok(JetPoint::from_levels(&rows)?)
}

/// Fits, synthesizes, recovers inputs, and runs the `ψ` round trip when
/// the spec declares `ψ`. Passes when every node has a residual within
/// `tol` and a recovered input.
pub fn run_plan(spec: &SpecFile, opts: &PlanOptions) -> Result<PlanReport, PlanError> {
    let start = jet_from_levels(&opts.start)?;
    let end = jet_from_levels(&opts.end)?;
    let path = fit_flat_path(&start, &end, opts.horizon, opts.degree)?;
    let traj = synthesize_trajectory(&spec.system, &spec.flat, &path, opts.grid)?;
    let traj = recover_inputs(&spec.system, traj);
    let guard_violations = spec
        .guard
        .as_ref()
        .map(|g| traj.nodes.iter().filter(|n| !g.holds(&n.jet).unwrap_or(false)).count());
    let (roundtrip, roundtrip_error) = match &spec.psi {
        None => (None, None),
        Some(psi) => match roundtrip_check(psi, &traj, opts.roundtrip_tol) {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        },
    };
    let max_residual = traj.max_residual();
    let failed_nodes = traj.failed_nodes();
    let inputs_recovered = traj.inputs_recovered();
    let pass = failed_nodes == 0 && inputs_recovered && max_residual.is_some_and(|r| r <= opts.tol);
    Ok(PlanReport {
        schema: PLAN_SCHEMA,
        tool_version: TOOL_VERSION,
        spec_name: spec.name.clone(),
        spec_hash: spec.hash.clone(),
        options: opts.clone(),
        coefficients: (0..path.channels()).map(|c| path.coefficients(c).iter().copied().collect()).collect(),
        nodes: traj.nodes.len(),
        max_residual,
        failed_nodes,
        inputs_recovered,
        guard_violations,
        roundtrip,
        roundtrip_error,
        pass,
        trajectory: traj,
    })
}
