use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flatcert::catalog;
use flatcert::report::{run_check, run_plan};
use flatcert::spec_file::load_spec;

/// Exit status for malformed specs, IO failures and bad requests.
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "flatcert", version, about = "Numerical certification of flat parameterizations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a parameter function against the system in a spec file.
    Check {
        spec: PathBuf,
        /// Number of sampled jets per block.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Tolerance for the on-variety residual checks.
        #[arg(long)]
        tol: Option<f64>,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Plan a flat trajectory between the spec's boundary jets and verify it.
    Plan {
        spec: PathBuf,
        /// Horizon.
        #[arg(long = "T")]
        horizon: Option<f64>,
        /// Number of grid intervals.
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// List built-in specs, or write one to the working directory.
    Catalog { name: Option<String> },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Check {
            spec,
            samples,
            seed,
            tol,
            json,
        } => check(&spec, samples, seed, tol, json.as_deref()),
        Command::Plan {
            spec,
            horizon,
            grid,
            csv,
            json,
        } => plan(&spec, horizon, grid, csv.as_deref(), json.as_deref()),
        Command::Catalog { name } => catalog_cmd(name.as_deref()),
    };
    ExitCode::from(code)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), u8> {
    std::fs::write(path, contents).map_err(|e| {
        eprintln!("error: cannot write {}: {e}", path.display());
        EXIT_USAGE
    })
}

fn check(spec_path: &Path, samples: Option<usize>, seed: Option<u64>, tol: Option<f64>, json: Option<&Path>) -> u8 {
    let spec = match load_spec(spec_path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {}: {e}", spec_path.display());
            return EXIT_USAGE;
        }
    };
    let mut opts = spec.check.clone();
    if let Some(n) = samples {
        if n == 0 {
            eprintln!("error: --samples must be positive");
            return EXIT_USAGE;
        }
        opts.samples = n;
    }
    if let Some(s) = seed {
        opts.seed = s;
    }
    if let Some(t) = tol {
        if !(t.is_finite() && t >= 0.0) {
            eprintln!("error: --tol must be finite and non-negative");
            return EXIT_USAGE;
        }
        opts.pde_tol = t;
    }
    let report = run_check(&spec, &opts);
    print!("{}", report.render_table());
    if let Some(path) = json {
        if let Err(code) = write_file(path, report.to_json().as_bytes()) {
            return code;
        }
    }
    report.exit_code as u8
}

fn plan(spec_path: &Path, horizon: Option<f64>, grid: Option<usize>, csv: Option<&Path>, json: Option<&Path>) -> u8 {
    let spec = match load_spec(spec_path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {}: {e}", spec_path.display());
            return EXIT_USAGE;
        }
    };
    let Some(mut opts) = spec.plan.clone() else {
        eprintln!("error: {} has no [plan] section", spec_path.display());
        return EXIT_USAGE;
    };
    if let Some(t) = horizon {
        opts.horizon = t;
    }
    if let Some(g) = grid {
        opts.grid = g;
    }
    let report = match run_plan(&spec, &opts) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    print!("{}", report.render_summary());
    let (n, m) = (spec.system.n(), spec.system.m());
    if let Some(path) = csv {
        let mut buf = Vec::new();
        if let Err(e) = report.trajectory.write_csv(n, m, &mut buf) {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
        if let Err(code) = write_file(path, &buf) {
            return code;
        }
    }
    if let Some(path) = json {
        if let Err(code) = write_file(path, report.to_json(n, m).as_bytes()) {
            return code;
        }
    }
    report.exit_code() as u8
}

fn catalog_cmd(name: Option<&str>) -> u8 {
    match name {
        None => {
            for e in catalog::ENTRIES {
                println!("{:<20} {}", e.name, e.summary);
            }
            0
        }
        Some(name) => match catalog::write_entry(name, Path::new(".")) {
            Ok(path) => {
                println!("wrote {}", path.display());
                0
            }
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_USAGE
            }
        },
    }
}
