//! Spec files: a system, a candidate parameter function and run settings
//! in TOML.
//!
//! ```toml
//! [system]
//! name = "double_integrator"
//! n = 2
//! m = 1
//! F = ["p1 - x2"]          # n - m components over x1..xn, p1..pn
//! f = ["x2", "u1"]         # n components over x1..xn, u1..um
//!
//! [flat]
//! r = 1
//! phi = ["y0_1", "y1_1"]   # n components over y0_1..y{r}_{m}
//! guard = "y1_1^2 >= 0.01" # optional, over y0_1..y{r+1}_{m}
//! psi = ["x0_1"]           # optional, m components over x0_1..x{s}_{n}
//! psi_order = 0
//!
//! [check]                  # every key optional
//! samples = 100
//! seed = 7
//!
//! [plan]                   # optional; jets list levels 0..r+1, each of width m
//! start = [[0.0], [0.0], [0.0]]
//! end = [[1.0], [0.0], [0.0]]
//! T = 1.0
//! ```

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Spanned;

use crate::expr::{ExprError, SmoothMap, VarContext};
use crate::jet::{Guard, JetError, ParameterFunction};
use crate::planner::FlatOutputMap;
use crate::system::ImplicitSystem;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SpecError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: {key}: {message}")]
    Dimension { line: usize, key: String, message: String },
    #[error("line {line}: {key}: {source}")]
    Expression {
        line: usize,
        key: String,
        #[source]
        source: ExprError,
    },
    #[error("line {line}: {key}: {message}")]
    Invalid { line: usize, key: String, message: String },
}

/// Sampling sizes, seeds and tolerances for `check`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOptions {
    pub samples: usize,
    pub seed: u64,
    pub scale: f64,
    pub pde_tol: f64,
    pub rank_tol: f64,
    pub equilibrium_tol: f64,
    pub identity_tol: f64,
    pub structure_tol: f64,
    pub inclusion_tol: f64,
    pub consistency_tol: f64,
    pub equilibrium_samples: usize,
    pub probe_targets: usize,
    pub probe_restarts: usize,
    pub probe_tol: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            samples: 100,
            seed: 0,
            scale: 1.0,
            pde_tol: crate::jet::DEFAULT_PDE_TOL,
            rank_tol: crate::numlin::DEFAULT_RANK_TOL,
            equilibrium_tol: 1e-10,
            identity_tol: crate::control::DEFAULT_IDENTITY_TOL,
            structure_tol: 1e-8,
            inclusion_tol: crate::numlin::DEFAULT_INCLUSION_TOL,
            consistency_tol: crate::system::DEFAULT_CONSISTENCY_TOL,
            equilibrium_samples: 20,
            probe_targets: 50,
            probe_restarts: 5,
            probe_tol: 1e-8,
        }
    }
}

/// Boundary jets and grid for `plan`. Jets are listed level by level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanOptions {
    pub start: Vec<Vec<f64>>,
    pub end: Vec<Vec<f64>>,
    pub horizon: f64,
    pub degree: usize,
    pub grid: usize,
    pub tol: f64,
    pub roundtrip_tol: f64,
}

#[derive(Debug, Clone)]
pub struct SpecFile {
    pub name: Option<String>,
    pub system: ImplicitSystem,
    pub flat: ParameterFunction,
    pub guard: Option<Guard>,
    pub psi: Option<FlatOutputMap>,
    pub check: CheckOptions,
    pub plan: Option<PlanOptions>,
    /// Hex SHA-256 of the file bytes.
    pub hash: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    system: Spanned<RawSystem>,
    flat: Spanned<RawFlat>,
    check: Option<Spanned<RawCheck>>,
    plan: Option<Spanned<RawPlan>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSystem {
    name: Option<String>,
    n: usize,
    m: Spanned<usize>,
    #[serde(rename = "F")]
    implicit: Spanned<Vec<String>>,
    #[serde(rename = "f")]
    explicit: Spanned<Vec<String>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFlat {
    m: Option<Spanned<usize>>,
    r: usize,
    phi: Spanned<Vec<String>>,
    guard: Option<Spanned<String>>,
    psi: Option<Spanned<Vec<String>>>,
    psi_order: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCheck {
    samples: Option<usize>,
    seed: Option<u64>,
    scale: Option<f64>,
    pde_tol: Option<f64>,
    rank_tol: Option<f64>,
    equilibrium_tol: Option<f64>,
    identity_tol: Option<f64>,
    structure_tol: Option<f64>,
    inclusion_tol: Option<f64>,
    consistency_tol: Option<f64>,
    equilibrium_samples: Option<usize>,
    probe_targets: Option<usize>,
    probe_restarts: Option<usize>,
    probe_tol: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPlan {
    start: Spanned<Vec<Vec<f64>>>,
    end: Spanned<Vec<Vec<f64>>>,
    #[serde(rename = "T")]
    horizon: Option<f64>,
    degree: Option<usize>,
    grid: Option<usize>,
    tol: Option<f64>,
    roundtrip_tol: Option<f64>,
}

pub fn load_spec(path: &Path) -> Result<SpecFile, SpecError> {
    let text = std::fs::read_to_string(path).map_err(|e| SpecError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_spec(&text)
}

pub fn parse_spec(text: &str) -> Result<SpecFile, SpecError> {
    let lines = LineIndex::new(text);
    let raw: RawSpec = toml::from_str(text).map_err(|e| lines.toml_error(&e))?;
    let hash = hex::encode(Sha256::digest(text.as_bytes()));

    let sys = raw.system.get_ref();
    let (n, m) = (sys.n, *sys.m.get_ref());
    if m == 0 || m > n {
        return Err(lines.dimension(sys.m.span(), "system.m", format!("need 0 < m <= n, got m = {m}, n = {n}")));
    }
    let implicit = parse_list(&lines, &sys.implicit, "system.F", n - m, VarContext::implicit(n))?;
    let explicit = parse_list(&lines, &sys.explicit, "system.f", n, VarContext::explicit(n, m))?;
    let system = ImplicitSystem::new(n, m, implicit, explicit)
        .map_err(|e| lines.dimension(raw.system.span(), "system", e.to_string()))?;

    let flat = raw.flat.get_ref();
    if let Some(fm) = &flat.m {
        if *fm.get_ref() != m {
            return Err(lines.dimension(fm.span(), "flat.m", format!("flat output width {} differs from system.m = {m}", fm.get_ref())));
        }
    }
    let r = flat.r;
    let phi = parse_list(&lines, &flat.phi, "flat.phi", n, VarContext::jet(m, r + 1))?;
    let pf = ParameterFunction::new(m, n, r, phi).map_err(|e| lines.dimension(flat.phi.span(), "flat.phi", e.to_string()))?;

    let guard = match &flat.guard {
        None => None,
        Some(g) => Some(Guard::parse(g.get_ref(), m, r + 2).map_err(|e| match e {
            JetError::Domain(source) => SpecError::Expression {
                line: lines.line(g.span()),
                key: "flat.guard".into(),
                source,
            },
            other => SpecError::Invalid {
                line: lines.line(g.span()),
                key: "flat.guard".into(),
                message: other.to_string(),
            },
        })?),
    };

    let psi = match &flat.psi {
        None => None,
        Some(list) => {
            let order = flat.psi_order.unwrap_or(0);
            let map = parse_list(&lines, list, "flat.psi", m, VarContext::state_jet(n, order + 1))?;
            Some(FlatOutputMap::new(n, m, order, map).map_err(|e| lines.dimension(list.span(), "flat.psi", e.to_string()))?)
        }
    };

    let check = match &raw.check {
        None => CheckOptions::default(),
        Some(c) => check_options(&lines, c)?,
    };

    let plan = match &raw.plan {
        None => None,
        Some(p) => Some(plan_options(&lines, p, m, r)?),
    };

    Ok(SpecFile {
        name: sys.name.clone(),
        system,
        flat: pf,
        guard,
        psi,
        check,
        plan,
        hash,
    })
}

fn parse_list(
    lines: &LineIndex,
    list: &Spanned<Vec<String>>,
    key: &str,
    expected: usize,
    ctx: VarContext,
) -> Result<SmoothMap, SpecError> {
    let items = list.get_ref();
    if items.len() != expected {
        return Err(lines.dimension(
            list.span(),
            key,
            format!("expected {expected} expressions, got {}", items.len()),
        ));
    }
    SmoothMap::parse(ctx, items).map_err(|source| SpecError::Expression {
        line: lines.line(list.span()),
        key: key.into(),
        source,
    })
}

fn check_options(lines: &LineIndex, raw: &Spanned<RawCheck>) -> Result<CheckOptions, SpecError> {
    let c = raw.get_ref();
    let d = CheckOptions::default();
    let opts = CheckOptions {
        samples: c.samples.unwrap_or(d.samples),
        seed: c.seed.unwrap_or(d.seed),
        scale: c.scale.unwrap_or(d.scale),
        pde_tol: c.pde_tol.unwrap_or(d.pde_tol),
        rank_tol: c.rank_tol.unwrap_or(d.rank_tol),
        equilibrium_tol: c.equilibrium_tol.unwrap_or(d.equilibrium_tol),
        identity_tol: c.identity_tol.unwrap_or(d.identity_tol),
        structure_tol: c.structure_tol.unwrap_or(d.structure_tol),
        inclusion_tol: c.inclusion_tol.unwrap_or(d.inclusion_tol),
        consistency_tol: c.consistency_tol.unwrap_or(d.consistency_tol),
        equilibrium_samples: c.equilibrium_samples.unwrap_or(d.equilibrium_samples),
        probe_targets: c.probe_targets.unwrap_or(d.probe_targets),
        probe_restarts: c.probe_restarts.unwrap_or(d.probe_restarts),
        probe_tol: c.probe_tol.unwrap_or(d.probe_tol),
    };
    let invalid = |key: &str, message: &str| SpecError::Invalid {
        line: lines.line(raw.span()),
        key: format!("check.{key}"),
        message: message.into(),
    };
    if opts.samples == 0 || opts.equilibrium_samples == 0 {
        return Err(invalid("samples", "sample counts must be positive"));
    }
    if !(opts.scale.is_finite() && opts.scale > 0.0) {
        return Err(invalid("scale", "scale must be positive"));
    }
    let tols = [
        opts.pde_tol,
        opts.rank_tol,
        opts.equilibrium_tol,
        opts.identity_tol,
        opts.structure_tol,
        opts.inclusion_tol,
        opts.consistency_tol,
        opts.probe_tol,
    ];
    if tols.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(invalid("tol", "tolerances must be finite and non-negative"));
    }
    Ok(opts)
}

fn plan_options(lines: &LineIndex, raw: &Spanned<RawPlan>, m: usize, r: usize) -> Result<PlanOptions, SpecError> {
    let p = raw.get_ref();
    for (key, jet) in [("plan.start", &p.start), ("plan.end", &p.end)] {
        let levels = jet.get_ref();
        if levels.len() != r + 2 || levels.iter().any(|l| l.len() != m) {
            return Err(lines.dimension(
                jet.span(),
                key,
                format!("expected {} levels of {m} values each", r + 2),
            ));
        }
    }
    let opts = PlanOptions {
        start: p.start.get_ref().clone(),
        end: p.end.get_ref().clone(),
        horizon: p.horizon.unwrap_or(1.0),
        degree: p.degree.unwrap_or(2 * r + 3),
        grid: p.grid.unwrap_or(1000),
        tol: p.tol.unwrap_or(1e-8),
        roundtrip_tol: p.roundtrip_tol.unwrap_or(crate::planner::DEFAULT_ROUNDTRIP_TOL),
    };
    let invalid = |key: &str, message: String| SpecError::Invalid {
        line: lines.line(raw.span()),
        key: format!("plan.{key}"),
        message,
    };
    if !(opts.horizon.is_finite() && opts.horizon > 0.0) {
        return Err(invalid("T", format!("horizon must be positive, got {}", opts.horizon)));
    }
    if opts.degree < 2 * r + 3 {
        return Err(invalid("degree", format!("degree must be at least {}", 2 * r + 3)));
    }
    if opts.grid == 0 {
        return Err(invalid("grid", "grid must have at least one interval".into()));
    }
    Ok(opts)
}

/// Maps byte offsets to 1-based line numbers and section names.
struct LineIndex<'a> {
    text: &'a str,
}

impl<'a> LineIndex<'a> {
    fn new(text: &'a str) -> Self {
        Self { text }
    }

    fn line_at(&self, offset: usize) -> usize {
        let end = offset.min(self.text.len());
        self.text.as_bytes()[..end].iter().filter(|b| **b == b'\n').count() + 1
    }

    fn line(&self, span: Range<usize>) -> usize {
        self.line_at(span.start)
    }

    fn section_before(&self, line: usize) -> Option<&str> {
        self.text
            .lines()
            .take(line)
            .filter_map(|l| {
                let l = l.trim();
                l.strip_prefix('[').and_then(|s| s.strip_suffix(']')).map(str::trim)
            })
            .last()
    }

    fn dimension(&self, span: Range<usize>, key: &str, message: String) -> SpecError {
        SpecError::Dimension {
            line: self.line(span),
            key: key.into(),
            message,
        }
    }

    fn toml_error(&self, e: &toml::de::Error) -> SpecError {
        let line = e.span().map_or(1, |s| self.line_at(s.start));
        let message = e.message().to_string();
        if let Some(rest) = message.strip_prefix("unknown field `") {
            let field = rest.split('`').next().unwrap_or_default();
            let key = match self.section_before(line) {
                Some(section) if section != field => format!("{section}.{field}"),
                _ => field.to_string(),
            };
            return SpecError::UnknownKey { line, key };
        }
        SpecError::Parse { line, message }
    }
}
