use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use coalescence::cell::{solve_cell, CellProblem};
use coalescence::covariance::IsotropicCovariance;
use coalescence::harness::{builtin_plan, execute, run_plan, Config, ExperimentPlan, Operation, PlanScale, BUILTIN_PLANS};
use coalescence::histogram::Histogram;
use coalescence::macro_pde::{solve_macro, MacroProblem};
use coalescence::particles::{read_mass_curve, run, snapshot_files};
use coalescence::physics::PhysicalParams;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "coalescence", version, about = "Particle coalescence under correlated noise")]
struct Cli {
    /// Worker threads for parallel sections.
    #[arg(long, global = true, env = "COALESCENCE_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Shared JSON config with per-module sections.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run the particle system; writes the mass curve and histogram snapshots.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        /// Comma separated snapshot times; overrides the config.
        #[arg(long, value_delimiter = ',')]
        snapshots: Option<Vec<f64>>,
        /// Disable interaction.
        #[arg(long)]
        free: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Solve the cell problem.
    Cell {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        /// Write nodal values as x,y,z,u rows.
        #[arg(long)]
        dump_u: Option<PathBuf>,
    },
    /// Capacity of the configured set, with optional ξ and R₀ scans.
    Capacity {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        /// lo,hi,n: geometric ξ values.
        #[arg(long, value_delimiter = ',', num_args = 1)]
        xi_scan: Option<Vec<f64>>,
        /// lo,hi,n: geometric R₀ values for the cell route (uses the `cell` section).
        #[arg(long, value_delimiter = ',', num_args = 1)]
        r0_scan: Option<Vec<f64>>,
    },
    /// Solve the limit equation; writes the mass curve and projected snapshots.
    Pde {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        snapshots: Option<Vec<f64>>,
        /// Take the histogram geometry from an existing snapshot CSV.
        #[arg(long)]
        geometry_from: Option<PathBuf>,
    },
    /// L¹ distance between simulated and PDE snapshots.
    Compare {
        #[arg(long)]
        sim: PathBuf,
        #[arg(long)]
        pde: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fail when any snapshot distance exceeds this.
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Derived parameters and reference rates for a physical setting.
    Physics {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment plan from a file or a built-in plan by name.
    Plan {
        #[arg(long, conflicts_with = "builtin", required_unless_present = "builtin")]
        file: Option<PathBuf>,
        #[arg(long)]
        builtin: Option<String>,
        /// Coarse resolution for built-in plans.
        #[arg(long)]
        quick: bool,
        /// Output directory for built-in plans.
        #[arg(long, default_value = "coalescence-out")]
        outputs_dir: PathBuf,
        /// Report path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)?).with_context(|| format!("writing {}", path.display()))
}

fn geometric(spec: &[f64], name: &str) -> Result<Vec<f64>> {
    let &[lo, hi, n] = spec else { bail!("--{name} expects lo,hi,n") };
    if !(lo > 0.0 && hi > lo && n >= 2.0 && n.fract() == 0.0) {
        bail!("--{name} needs 0 < lo < hi and an integer n ≥ 2");
    }
    let n = n as usize;
    Ok((0..n).map(|k| lo * (hi / lo).powf(k as f64 / (n - 1) as f64)).collect())
}

fn load(cfg: &ConfigArg) -> Result<Config> {
    Config::load(&cfg.config).with_context(|| format!("loading {}", cfg.config.display()))
}

/// Returns whether all declared tolerances were met.
fn dispatch(command: Command) -> Result<bool> {
    match command {
        Command::Simulate { cfg, out, snapshots, free, seed } => {
            let c = load(&cfg)?;
            let section = c.section("simulate", &c.simulate)?;
            let mut params = section.params.clone();
            params.interaction &= !free;
            if let Some(s) = seed {
                params.seed = s;
            }
            let times = snapshots.unwrap_or_else(|| section.snapshot_times.clone());
            let series = run(&params, &c.covariance().build()?, &times)?;
            series.write(&out)?;
            eprintln!(
                "alive fraction {:.6} after {} pair events",
                series.masses.last().copied().unwrap_or(1.0),
                series.annihilated_pairs
            );
        }
        Command::Cell { cfg, out, dump_u } => {
            let c = load(&cfg)?;
            let config = *c.section("cell", &c.cell)?;
            let covariance = c.covariance();
            if let Some(path) = dump_u {
                let iso = IsotropicCovariance::new(&covariance.density()?);
                let sol = solve_cell(&CellProblem::new(&config, &iso)?)?;
                let mut w = std::io::BufWriter::new(fs::File::create(&path)?);
                writeln!(w, "x,y,z,u")?;
                for i in 0..sol.grid.len() {
                    let p = sol.grid.point(i);
                    writeln!(w, "{},{},{},{}", p[0], p[1], p[2], sol.u[i])?;
                }
            }
            write_json(&out, &execute(&Operation::Cell { config, covariance }, &[], Path::new("."))?)?;
        }
        Command::Capacity { cfg, out, xi_scan, r0_scan } => {
            let c = load(&cfg)?;
            let config = c.section("capacity", &c.capacity)?.clone();
            let covariance = c.covariance();
            let dir = Path::new(".");
            let mut report = json!({
                "capacity": execute(&Operation::Capacity { config: config.clone(), covariance: covariance.clone() }, &[], dir)?
            });
            if let Some(spec) = xi_scan {
                let xi_values = geometric(&spec, "xi-scan")?;
                report["xi_scan"] = execute(&Operation::XiScan { config, covariance: covariance.clone(), xi_values }, &[], dir)?;
            }
            if let Some(spec) = r0_scan {
                let cell = *c.section("cell", &c.cell)?;
                let r0_values = geometric(&spec, "r0-scan")?;
                report["r0_scan"] = execute(&Operation::CellLimit { config: cell, covariance, r0_values }, &[], dir)?;
            }
            write_json(&out, &report)?;
        }
        Command::Pde { cfg, out, snapshots, geometry_from } => {
            let c = load(&cfg)?;
            let section = c.section("pde", &c.pde)?;
            let mut model = section.model.clone();
            if let Some(s) = snapshots {
                model.snapshot_times = s;
            }
            let geometry = match (geometry_from, section.histogram) {
                (Some(p), _) => Histogram::read(&p)?.geometry,
                (None, Some(h)) => h.geometry()?,
                (None, None) => bail!("pde needs a `histogram` section or --geometry-from"),
            };
            let sol = solve_macro(&MacroProblem::new(&model)?)?;
            sol.write_series(&out, &geometry)?;
            eprintln!("mass {:.6}, balance defect {:.2e}", sol.history.last().unwrap().mass, sol.mass_balance_defect());
        }
        Command::Compare { sim, pde, out, tolerance } => {
            let (sa, pa) = (snapshot_files(&sim), snapshot_files(&pde));
            if sa.len() != pa.len() {
                bail!("snapshot counts differ: {} simulated, {} PDE", sa.len(), pa.len());
            }
            let mut rows = Vec::new();
            let mut worst = 0.0f64;
            for (k, (a, b)) in sa.iter().zip(&pa).enumerate() {
                let (ha, hb) = (Histogram::read(a)?, Histogram::read(b)?);
                let l1 = ha.l1_distance(&hb)?;
                worst = worst.max(l1);
                rows.push(json!({ "k": k, "t_sim": ha.t, "t_pde": hb.t, "l1": l1 }));
            }
            let end = |p: &Path| -> Result<f64> { Ok(read_mass_curve(p)?.last().map_or(f64::NAN, |r| r.1)) };
            let passed = tolerance.is_none_or(|t| worst <= t);
            write_json(
                &out,
                &json!({
                    "snapshots": rows,
                    "max_l1": worst,
                    "alive_fraction": { "sim": end(&sim)?, "pde": end(&pde)? },
                    "tolerance": tolerance,
                    "passed": passed,
                }),
            )?;
            return Ok(passed);
        }
        Command::Physics { params, out } => {
            let p: PhysicalParams = serde_json::from_str(&fs::read_to_string(&params)?)
                .with_context(|| format!("parsing {}", params.display()))?;
            write_json(&out, &execute(&Operation::Physics { params: p }, &[], Path::new("."))?)?;
        }
        Command::Plan { file, builtin, quick, outputs_dir, out } => {
            let plan = match (file, builtin) {
                (Some(f), _) => ExperimentPlan::load(&f).with_context(|| format!("loading {}", f.display()))?,
                (None, Some(name)) => {
                    let scale = if quick { PlanScale::Quick } else { PlanScale::Full };
                    builtin_plan(&name, scale, &outputs_dir).with_context(|| format!("built-in plans: {}", BUILTIN_PLANS.join(", ")))?
                }
                (None, None) => unreachable!(),
            };
            let report = run_plan(&plan)?;
            for c in &report.comparisons {
                eprintln!("{}: {} ({} {})", c.name, if c.passed { "pass" } else { "FAIL" }, c.value, c.criterion);
            }
            let text = serde_json::to_string_pretty(&report)?;
            match out {
                Some(p) => fs::write(p, text)?,
                None => println!("{text}"),
            }
            return Ok(report.passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
