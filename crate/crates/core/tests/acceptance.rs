//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fail.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use flatcert::catalog;
use flatcert::expr::SmoothMap;
use flatcert::jet::{commutation_brackets, JetSampler};
use flatcert::planner::{fit_flat_path, synthesize_trajectory};
use flatcert::report::{run_check, run_plan, CheckReport};
use flatcert::sampling::{sub_seed, GaussianStream};
use flatcert::spec_file::{load_spec, parse_spec, SpecFile};
use flatcert::JetPoint;
use nalgebra::{DMatrix, DVector};
use serde_json::Value;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn spec(name: &str) -> SpecFile {
    parse_spec(catalog::get(name).unwrap().text).unwrap()
}

fn degenerate() -> SpecFile {
    load_spec(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/degenerate_phi.flat")).unwrap()
}

fn evidence<'a>(report: &'a CheckReport, block: &str) -> Result<&'a Value, String> {
    report.block(block).map(|b| &b.evidence).ok_or_else(|| format!("no {block} block"))
}

fn num(v: &Value, key: &str) -> Result<f64, String> {
    v[key].as_f64().ok_or_else(|| format!("{key} missing in {v}"))
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_flatcert")
}

/// Writes a catalog entry into `dir` and returns its path.
fn catalog_file(dir: &Path, name: &str) -> PathBuf {
    catalog::write_entry(name, dir).unwrap()
}

fn run_cli(args: &[&std::ffi::OsStr]) -> Result<(i32, Duration), String> {
    let started = Instant::now();
    let out = Command::new(binary()).args(args).output().map_err(|e| e.to_string())?;
    Ok((out.status.code().unwrap_or(-1), started.elapsed()))
}

fn catalog_positives() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut notes = Vec::new();
    for name in ["double_integrator", "planar_mass_point", "pendulum"] {
        let path = catalog_file(dir.path(), name);
        let (code, elapsed) = run_cli(&["check".as_ref(), path.as_os_str()])?;
        ensure(code == 0, || format!("{name}: exit {code}"))?;
        ensure(elapsed < Duration::from_secs(5), || format!("{name}: took {elapsed:?}"))?;

        let s = spec(name);
        let (n, m) = (s.system.n(), s.system.m());
        let report = run_check(&s, &s.check);
        for block in report.blocks.iter().filter(|b| b.mandatory) {
            ensure(block.status == flatcert::report::Status::Pass, || format!("{name}: {} {}", block.name, block.verdict))?;
        }
        let pde = num(evidence(&report, "pde")?, "max_residual")?;
        ensure(pde <= 1e-10, || format!("{name}: pde {pde:e}"))?;
        let sub = evidence(&report, "submersion")?;
        ensure(sub["min_rank_dphi_big"] == n + m, || format!("{name}: rank dPhi {}", sub["min_rank_dphi_big"]))?;
        let jets = sub["per_sample"].as_array().map_or(0, Vec::len);
        ensure(jets == 100, || format!("{name}: {jets} jets"))?;
        let eq = evidence(&report, "equilibrium_map")?;
        ensure(eq["min_rank"] == m, || format!("{name}: equilibrium rank {}", eq["min_rank"]))?;
        let ident = num(evidence(&report, "equilibrium_identities")?, "max_residual")?;
        ensure(ident <= 1e-10, || format!("{name}: identities {ident:e}"))?;
        let chain = evidence(&report, "chain_inclusions")?["max_residual_by_level"]
            .as_array()
            .ok_or("chain residuals missing")?
            .iter()
            .filter_map(Value::as_f64)
            .fold(0.0, f64::max);
        ensure(chain <= 1e-8, || format!("{name}: chain {chain:e}"))?;
        let kalman = evidence(&report, "kalman")?;
        ensure(kalman["min_rank"] == n, || format!("{name}: kalman {}", kalman["min_rank"]))?;
        notes.push(format!("{name} pde {pde:.1e} in {:.2}s", elapsed.as_secs_f64()));
    }
    Ok(notes.join(", "))
}

fn unicycle_singular_chart() -> Outcome {
    let s = spec("unicycle");
    let guard = s.guard.as_ref().ok_or("unicycle has no guard")?;
    ensure(guard.text().replace(' ', "") == "y1_1^2+y1_2^2>=0.01", || format!("guard `{}`", guard.text()))?;
    let report = run_check(&s, &s.check);
    for name in ["pde", "submersion"] {
        let b = report.block(name).ok_or("missing block")?;
        ensure(b.status == flatcert::report::Status::Pass, || format!("{name}: {}", b.verdict))?;
    }
    let pde = num(evidence(&report, "pde")?, "max_residual")?;
    ensure(pde <= 1e-10, || format!("pde {pde:e}"))?;
    let sub = num(evidence(&report, "submersion")?, "max_residual")?;
    ensure(sub <= 1e-10, || format!("submersion residual {sub:e}"))?;
    let eq = report.block("equilibrium_map").ok_or("missing block")?;
    ensure(eq.status == flatcert::report::Status::Fail, || format!("equilibrium_map {:?}", eq.status))?;
    ensure(eq.verdict.contains("atan2(0, 0)"), || format!("equilibrium_map: {}", eq.verdict))?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (code, _) = run_cli(&["check".as_ref(), catalog_file(dir.path(), "unicycle").as_os_str()])?;
    ensure(code == 1, || format!("exit {code}"))?;
    Ok(format!("pde {pde:.1e} on guard; equilibrium_map: {}", eq.verdict))
}

fn defective_phi_residual() -> Outcome {
    let s = spec("broken_phi_fixture");
    let o = &s.check;
    let report = run_check(&s, o);
    let pde = report.block("pde").ok_or("missing block")?;
    ensure(pde.status == flatcert::report::Status::Fail, || "pde did not fail".into())?;
    let measured = num(&pde.evidence, "max_residual")?;
    // Closed form: F(phi, L phi) = y1 - 2 y1 = -y1.
    let cloud = JetSampler::new(o.samples, sub_seed(o.seed, 2), o.scale).draw::<f64>(1, s.flat.levels());
    let analytic = cloud.jets.iter().map(|j| j.level(1)[0].abs()).fold(0.0, f64::max);
    let rel = (measured - analytic).abs() / analytic;
    ensure(rel <= 0.05, || format!("measured {measured} vs analytic {analytic}"))?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (code, _) = run_cli(&["check".as_ref(), catalog_file(dir.path(), "broken_phi_fixture").as_os_str()])?;
    ensure(code == 1, || format!("exit {code}"))?;
    Ok(format!("max residual {measured:.6} vs max|y1| {analytic:.6} (rel {rel:.1e})"))
}

/// Every smooth map in the catalog, labelled.
fn catalog_maps() -> Vec<(String, SmoothMap, Option<flatcert::jet::Guard>)> {
    let mut maps = Vec::new();
    for e in catalog::ENTRIES {
        let s = spec(e.name);
        maps.push((format!("{}.f", e.name), s.system.explicit().clone(), None));
        maps.push((format!("{}.F", e.name), s.system.implicit().clone(), None));
        maps.push((format!("{}.phi", e.name), s.flat.map().clone(), s.guard.clone()));
        if let Some(psi) = &s.psi {
            maps.push((format!("{}.psi", e.name), psi.map().clone(), None));
        }
    }
    maps
}

/// Seeded points where the map evaluates; guarded maps read the point as a jet head.
fn seeded_points(map: &SmoothMap, guard: Option<&flatcert::jet::Guard>, m: usize, seed: u64, count: usize) -> Vec<Vec<f64>> {
    let mut stream = GaussianStream::new(seed, 1.0);
    let mut out = Vec::new();
    while out.len() < count {
        let p: DVector<f64> = stream.next_vector(map.input_dim());
        if let Some(g) = guard {
            let mut padded = p.as_slice().to_vec();
            padded.extend(std::iter::repeat_n(0.0, m));
            let jet = JetPoint::from_flat(m, DVector::from_vec(padded)).unwrap();
            if !g.holds(&jet).unwrap_or(false) {
                continue;
            }
        }
        if map.eval(p.as_slice()).is_ok() {
            out.push(p.as_slice().to_vec());
        }
    }
    out
}

fn ad_against_fd() -> Outcome {
    let mut worst_first: f64 = 0.0;
    let mut worst_second: f64 = 0.0;
    let mut count = 0;
    for (label, map, guard) in catalog_maps() {
        let m = guard.as_ref().map_or(0, |_| 2);
        for p in seeded_points(&map, guard.as_ref(), m, 2024, 100) {
            let ad = map.jacobian(&p).map_err(|e| format!("{label}: {e}"))?;
            let fd = map.fd_jacobian(&p, 1e-6).map_err(|e| format!("{label}: {e}"))?;
            let bound = (1e-6 * ad.abs().row_sum().max()).max(1e-8);
            let err = (&ad - &fd).amax();
            ensure(err <= bound, || format!("{label} at {p:?}: {err:e} > {bound:e}"))?;
            worst_first = worst_first.max(err / bound);

            // FD of the AD Jacobian along a fixed direction.
            let dir: Vec<f64> = (0..p.len()).map(|i| 1.0 - 0.37 * i as f64).collect();
            let h = 1e-5;
            let shift = |s: f64| p.iter().zip(&dir).map(|(x, d)| x + s * h * d).collect::<Vec<_>>();
            let jp = map.jacobian(&shift(1.0)).map_err(|e| e.to_string())?;
            let jm = map.jacobian(&shift(-1.0)).map_err(|e| e.to_string())?;
            let fd2: DMatrix<f64> = (jp - jm) / (2.0 * h);
            let second = map.directional_second(&p, &dir).map_err(|e| e.to_string())?;
            let err2 = (&second - &fd2).amax();
            ensure(err2 <= 1e-5, || format!("{label}: directional second {err2:e}"))?;
            worst_second = worst_second.max(err2);
            count += 1;
        }
    }
    Ok(format!(
        "{count} points; worst first-order error {worst_first:.1e} of bound, worst second-order {worst_second:.1e}"
    ))
}

fn commutation() -> Outcome {
    let mut specs: Vec<SpecFile> = catalog::ENTRIES.iter().map(|e| spec(e.name)).collect();
    specs.push(degenerate());
    let mut worst: f64 = 0.0;
    for s in &specs {
        let jets = JetSampler::new(20, 31, 1.0)
            .with_guard(s.guard.clone())
            .draw::<f64>(s.flat.m(), s.flat.levels())
            .jets;
        ensure(jets.len() == 20, || "guard exhausted".into())?;
        for jet in &jets {
            let brackets = commutation_brackets(&s.flat, jet, 1e-4).map_err(|e| e.to_string())?;
            ensure(brackets.len() == s.flat.r() + 2, || "bracket count".into())?;
            for (i, b) in brackets.iter().enumerate() {
                ensure(*b <= 1e-7, || format!("{:?} level {i}: {b:e}", s.name))?;
                worst = worst.max(*b);
            }
        }
    }
    Ok(format!("worst bracket {worst:.1e} over {} parameter functions", specs.len()))
}

fn chain_implies_kalman() -> Outcome {
    let mut passing = Vec::new();
    let mut specs: Vec<SpecFile> = catalog::ENTRIES.iter().map(|e| spec(e.name)).collect();
    specs.push(degenerate());
    for s in &specs {
        let report = run_check(s, &s.check);
        let chain = report.block("chain_inclusions").ok_or("missing block")?;
        if chain.status == flatcert::report::Status::Pass {
            let kalman = evidence(&report, "kalman")?;
            ensure(kalman["min_rank"] == s.system.n(), || format!("{:?}: counterexample {kalman}", s.name))?;
            ensure(chain.evidence["kalman_rank_full_where_chain_passes"] == true, || "per-jet counterexample".into())?;
            passing.push(s.name.clone().unwrap_or_default());
        }
    }
    let d = degenerate();
    let report = run_check(&d, &d.check);
    let chain = report.block("chain_inclusions").ok_or("missing block")?;
    ensure(chain.status == flatcert::report::Status::Fail, || "degenerate chain passed".into())?;
    let stacked = &chain.evidence["min_stacked_rank"];
    ensure(*stacked == 1, || format!("degenerate stacked rank {stacked}"))?;
    Ok(format!("chain passes on {} with full Kalman rank; degenerate stacked rank 1", passing.join(", ")))
}

fn planner() -> Outcome {
    let s = spec("double_integrator");
    let plan = s.plan.clone().ok_or("no plan")?;
    let levels = |v: &Vec<Vec<f64>>| {
        JetPoint::from_levels(&v.iter().map(|l| DVector::from_column_slice(l)).collect::<Vec<_>>()).unwrap()
    };
    let path = fit_flat_path(&levels(&plan.start), &levels(&plan.end), 1.0, 5).map_err(|e| e.to_string())?;
    let quintic = [0.0, 0.0, 0.0, 10.0, -15.0, 6.0];
    let coeffs = path.coefficients(0);
    let cerr = coeffs.iter().zip(quintic).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(coeffs.len() == 6 && cerr <= 1e-10, || format!("coefficients {coeffs}"))?;
    let traj = synthesize_trajectory(&s.system, &s.flat, &path, 1000).map_err(|e| e.to_string())?;
    ensure(traj.nodes.len() == 1001, || "node count".into())?;
    let res = traj.max_residual().ok_or("residual missing")?;
    ensure(res <= 1e-13, || format!("residual {res:e}"))?;

    let p = spec("pendulum");
    let report = run_plan(&p, p.plan.as_ref().ok_or("no plan")?).map_err(|e| e.to_string())?;
    let u = |i: usize| report.trajectory.nodes[i].u.as_ref().map(|u| u[0]);
    let (u0, u1) = (u(0).ok_or("no u at start")?, u(report.trajectory.nodes.len() - 1).ok_or("no u at end")?);
    ensure(u0.abs() <= 1e-9, || format!("start input {u0}"))?;
    ensure((u1 - 0.4f64.sin()).abs() <= 1e-9, || format!("end input {u1}"))?;
    Ok(format!("coefficient error {cerr:.1e}, residual {res:.1e}, pendulum u(T) - sin 0.4 = {:.1e}", u1 - 0.4f64.sin()))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut checked = Vec::new();
    for e in catalog::ENTRIES {
        let path = catalog_file(dir.path(), e.name);
        let mut outputs = Vec::new();
        for run in 0..2 {
            let json = dir.path().join(format!("{}-{run}.json", e.name));
            run_cli(&["check".as_ref(), path.as_os_str(), "--seed".as_ref(), "42".as_ref(), "--json".as_ref(), json.as_os_str()])?;
            outputs.push(std::fs::read(&json).map_err(|e| e.to_string())?);
        }
        ensure(outputs[0] == outputs[1], || format!("{} differs between runs", e.name))?;
        checked.push(e.name);
    }
    Ok(format!("byte-identical reports for {}", checked.join(", ")))
}

fn probe() -> Outcome {
    let fraction = |s: &SpecFile| -> Result<f64, String> {
        let report = run_check(s, &s.check);
        let ev = evidence(&report, "surjectivity_probe")?;
        ensure(ev["targets"] == 50 && ev["restarts"] == 5, || format!("probe size {ev}"))?;
        num(ev, "success_fraction")
    };
    let di = fraction(&spec("double_integrator"))?;
    let planar = fraction(&spec("planar_mass_point"))?;
    let degen = fraction(&degenerate())?;
    ensure(di == 1.0 && planar == 1.0, || format!("positives {di}, {planar}"))?;
    ensure(degen < 0.05, || format!("degenerate {degen}"))?;
    Ok(format!("double_integrator {di}, planar_mass_point {planar}, degenerate {degen}"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("catalog positives", catalog_positives),
        ("unicycle singular chart", unicycle_singular_chart),
        ("defective phi residual", defective_phi_residual),
        ("AD against finite differences", ad_against_fd),
        ("commutation identity", commutation),
        ("chain inclusions imply Kalman rank", chain_implies_kalman),
        ("planner", planner),
        ("determinism", determinism),
        ("surjectivity probe", probe),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("PASS criterion {}: {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {}: {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} acceptance criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
