//! Config schema, experiment plans, artifact cache and reports.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::capacity::{cap_dirichlet, cap_from_cell_limit, xi_limit_scan, CapacityConfig, CapacityProblem};
use crate::cell::{solve_cell, CellConfig, CellProblem};
use crate::covariance::{structure_function, IsotropicCovariance, SpectralSpec};
use crate::error::{invalid, Error, Result};
use crate::fv::GridSpec;
use crate::histogram::HistogramGeometry;
use crate::macro_pde::{solve_macro, MacroConfig, MacroProblem, PeriodicGrid};
use crate::particles::{run, ScalingMode, SimConfig};
use crate::physics::{
    dissipative_structure, inertial_structure, log_log_slope, reference_rates, saffman_turner_rate, to_abstract,
    PhysicalParams,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Histogram onto which PDE snapshots are projected.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeHistogram {
    pub half_width: f64,
    pub bin: f64,
}

impl PdeHistogram {
    pub fn geometry(&self) -> Result<HistogramGeometry> {
        HistogramGeometry::centered(self.half_width, self.bin)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub params: SimConfig,
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeSection {
    pub model: MacroConfig,
    #[serde(default)]
    pub histogram: Option<PdeHistogram>,
}

/// Shared configuration file, one optional section per module.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub covariance: Option<SpectralSpec>,
    #[serde(default)]
    pub simulate: Option<SimulateSection>,
    #[serde(default)]
    pub cell: Option<CellConfig>,
    #[serde(default)]
    pub capacity: Option<CapacityConfig>,
    #[serde(default)]
    pub pde: Option<PdeSection>,
    #[serde(default)]
    pub physics: Option<PhysicalParams>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn covariance(&self) -> SpectralSpec {
        self.covariance.clone().unwrap_or_default()
    }

    pub fn section<'a, T>(&'a self, name: &str, s: &'a Option<T>) -> Result<&'a T> {
        s.as_ref().ok_or_else(|| Error::InvalidConfig(format!("config has no `{name}` section")))
    }
}

/// Structure function used by the Saffman-Turner sweep.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureLaw {
    /// `2u_η² Tr ω(L a/η)` from the covariance module.
    #[default]
    Model,
    Dissipative,
    Inertial,
}

/// Particle-vs-PDE comparison at fixed `λ = N ε`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceSpec {
    /// `n_particles`, `eps_radius`, `seed` and `scaling_mode` are overridden per run.
    pub base: SimConfig,
    pub lambda: f64,
    pub n_values: Vec<usize>,
    #[serde(default)]
    pub covariance: SpectralSpec,
    #[serde(default)]
    pub pde_grid: PeriodicGrid,
    #[serde(default)]
    pub cell_grid: GridSpec,
    /// Use this `R̄` instead of `λ R̄_cell(R₀/λ)`.
    #[serde(default)]
    pub rbar: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceLevel {
    pub n: usize,
    pub eps_radius: f64,
    pub bin: f64,
    pub l1: Vec<f64>,
    pub mean_l1: f64,
    pub mean_alive_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub rbar: f64,
    pub diffusivity: f64,
    pub pde_alive_fraction: f64,
    pub levels: Vec<ConvergenceLevel>,
    pub mean_l1: Vec<f64>,
    pub monotone_decreasing: bool,
}

/// `λ R̄_cell(R₀/λ)`, the rate of the limit equation when `N ε = λ`.
pub fn scaled_rbar(cell: &CellConfig, lambda: f64, covariance: &SpectralSpec) -> Result<f64> {
    let iso = IsotropicCovariance::new(&covariance.density()?);
    let cfg = CellConfig { r0: cell.r0 / lambda, ..*cell };
    Ok(lambda * solve_cell(&CellProblem::new(&cfg, &iso)?)?.rbar_theta)
}

/// L¹ distance between particle histograms and the limit density at `base.t_end`.
pub fn particle_vs_pde(spec: &ConvergenceSpec, seeds: &[u64]) -> Result<ConvergenceReport> {
    if seeds.is_empty() || spec.n_values.is_empty() {
        return invalid("convergence study needs seeds and particle counts");
    }
    if !(spec.lambda > 0.0) {
        return Err(Error::NonPositive("lambda".into()));
    }
    let b = &spec.base;
    let rbar = match spec.rbar {
        Some(r) => r,
        None => {
            let cell = CellConfig {
                sigma0: b.sigma0,
                sigma: b.sigma,
                xi: b.xi,
                r0: b.r0,
                theta: b.theta,
                grid: spec.cell_grid,
                solver: Default::default(),
            };
            scaled_rbar(&cell, spec.lambda, &spec.covariance)?
        }
    };
    let diffusivity = 0.5 * (b.sigma0 * b.sigma0 + b.sigma * b.sigma);
    let macro_cfg = MacroConfig {
        diffusivity,
        rbar,
        f0: b.f0,
        grid: spec.pde_grid,
        dt: None,
        t_end: b.t_end,
        snapshot_times: vec![b.t_end],
        record_every: None,
    };
    let pde = solve_macro(&MacroProblem::new(&macro_cfg)?)?;
    let field = &pde.snapshots[0];
    let model = spec.covariance.build()?;
    let jobs: Vec<(usize, u64)> = spec.n_values.iter().flat_map(|&n| seeds.iter().map(move |&s| (n, s))).collect();
    let runs: Vec<(f64, f64)> = jobs
        .par_iter()
        .map(|&(n, seed)| {
            let cfg = SimConfig {
                n_particles: n,
                eps_radius: spec.lambda / n as f64,
                seed,
                scaling_mode: ScalingMode::Free,
                ..b.clone()
            };
            let series = run(&cfg, &model, &[b.t_end])?;
            let hist = &series.snapshots[0];
            let target = pde.to_histogram(field, hist.geometry.clone());
            Ok((hist.l1_distance(&target)?, *series.masses.last().unwrap()))
        })
        .collect::<Result<_>>()?;
    let levels: Vec<ConvergenceLevel> = spec
        .n_values
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let chunk = &runs[k * seeds.len()..(k + 1) * seeds.len()];
            let l1: Vec<f64> = chunk.iter().map(|r| r.0).collect();
            let m = seeds.len() as f64;
            Ok(ConvergenceLevel {
                n,
                eps_radius: spec.lambda / n as f64,
                bin: b.histogram.geometry(n)?.bin,
                mean_l1: l1.iter().sum::<f64>() / m,
                mean_alive_fraction: chunk.iter().map(|r| r.1).sum::<f64>() / m,
                l1,
            })
        })
        .collect::<Result<_>>()?;
    let mean_l1: Vec<f64> = levels.iter().map(|l| l.mean_l1).collect();
    let monotone_decreasing = mean_l1.windows(2).all(|w| w[1] < w[0]);
    Ok(ConvergenceReport {
        rbar,
        diffusivity,
        pde_alive_fraction: pde.history.last().unwrap().mass,
        levels,
        mean_l1,
        monotone_decreasing,
    })
}

/// One module operation with its configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "module", rename_all = "snake_case", deny_unknown_fields)]
pub enum Operation {
    Cell {
        config: CellConfig,
        #[serde(default)]
        covariance: SpectralSpec,
    },
    Capacity {
        config: CapacityConfig,
        #[serde(default)]
        covariance: SpectralSpec,
    },
    CellLimit {
        config: CellConfig,
        #[serde(default)]
        covariance: SpectralSpec,
        r0_values: Vec<f64>,
    },
    XiScan {
        config: CapacityConfig,
        #[serde(default)]
        covariance: SpectralSpec,
        xi_values: Vec<f64>,
    },
    /// One run per plan seed.
    Simulate {
        config: SimConfig,
        #[serde(default)]
        covariance: SpectralSpec,
        #[serde(default)]
        snapshot_times: Vec<f64>,
    },
    Pde {
        config: MacroConfig,
        #[serde(default)]
        histogram: Option<PdeHistogram>,
    },
    /// Runs over all plan seeds.
    Convergence { spec: ConvergenceSpec },
    /// Sweep of `a = y η/L` over `y_values`.
    SaffmanTurner {
        params: PhysicalParams,
        #[serde(default)]
        covariance: SpectralSpec,
        #[serde(default)]
        law: StructureLaw,
        y_values: Vec<f64>,
    },
    Physics { params: PhysicalParams },
}

impl Operation {
    pub fn module(&self) -> &'static str {
        match self {
            Operation::Cell { .. } => "cell",
            Operation::Capacity { .. } => "capacity",
            Operation::CellLimit { .. } => "cell_limit",
            Operation::XiScan { .. } => "xi_scan",
            Operation::Simulate { .. } => "simulate",
            Operation::Pde { .. } => "pde",
            Operation::Convergence { .. } => "convergence",
            Operation::SaffmanTurner { .. } => "saffman_turner",
            Operation::Physics { .. } => "physics",
        }
    }

    fn seeded(&self) -> bool {
        matches!(self, Operation::Simulate { .. } | Operation::Convergence { .. })
    }
}

/// Copy a number from an earlier stage output into this stage's operation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Binding {
    /// JSON pointer into the outputs, starting with the stage id.
    pub from: String,
    /// JSON pointer into the operation object.
    pub to: String,
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub id: String,
    pub op: Operation,
    #[serde(default)]
    pub inputs: Vec<Binding>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Increasing,
    Decreasing,
}

/// Check on stage outputs; pointers start with a stage id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Comparison {
    /// `|a − b| / |b| ≤ tolerance`.
    RelativeDifference { name: String, a: String, b: String, tolerance: f64 },
    /// `|a − b| ≤ tolerance`.
    AbsoluteDifference { name: String, a: String, b: String, tolerance: f64 },
    Within {
        name: String,
        value: String,
        #[serde(default)]
        min: Option<f64>,
        #[serde(default)]
        max: Option<f64>,
    },
    /// Strict monotonicity of a numeric array.
    Monotone { name: String, values: String, direction: Direction },
    IsTrue { name: String, value: String },
}

impl Comparison {
    pub fn name(&self) -> &str {
        match self {
            Comparison::RelativeDifference { name, .. }
            | Comparison::AbsoluteDifference { name, .. }
            | Comparison::Within { name, .. }
            | Comparison::Monotone { name, .. }
            | Comparison::IsTrue { name, .. } => name,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub name: String,
    pub stages: Vec<Stage>,
    pub seeds: Vec<u64>,
    pub outputs_dir: PathBuf,
    #[serde(default)]
    pub comparisons: Vec<Comparison>,
}

impl ExperimentPlan {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return invalid("plan seeds must be non-empty");
        }
        let mut seen = BTreeSet::new();
        for s in &self.stages {
            if s.id.is_empty() || s.id.contains('/') {
                return invalid(format!("bad stage id `{}`", s.id));
            }
            for b in &s.inputs {
                let src = pointer_stage(&b.from);
                if !seen.contains(src) {
                    return invalid(format!("stage `{}` binds from `{}`, which is not an earlier stage", s.id, b.from));
                }
            }
            if !seen.insert(s.id.as_str()) {
                return invalid(format!("duplicate stage id `{}`", s.id));
            }
        }
        for c in &self.comparisons {
            let ptrs: Vec<&String> = match c {
                Comparison::RelativeDifference { a, b, .. } | Comparison::AbsoluteDifference { a, b, .. } => vec![a, b],
                Comparison::Within { value, .. } | Comparison::IsTrue { value, .. } => vec![value],
                Comparison::Monotone { values, .. } => vec![values],
            };
            for p in ptrs {
                if !seen.contains(pointer_stage(p)) {
                    return invalid(format!("comparison `{}` refers to unknown stage in `{p}`", c.name()));
                }
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        Ok(digest(&serde_json::to_value(self)?))
    }
}

fn pointer_stage(p: &str) -> &str {
    p.trim_start_matches('/').split('/').next().unwrap_or("")
}

fn digest(v: &Value) -> String {
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub id: String,
    pub module: String,
    pub config_hash: String,
    pub cache_hit: bool,
    pub output: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub name: String,
    pub value: Value,
    pub criterion: String,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub plan: String,
    pub plan_hash: String,
    pub tool_version: String,
    pub seeds: Vec<u64>,
    pub stages: Vec<StageReport>,
    pub comparisons: Vec<ComparisonResult>,
    pub passed: bool,
}

impl Report {
    pub fn cache_hits(&self) -> usize {
        self.stages.iter().filter(|s| s.cache_hit).count()
    }

    fn outputs(&self) -> Value {
        Value::Object(self.stages.iter().map(|s| (s.id.clone(), s.output.clone())).collect())
    }
}

/// Run stages in order, reusing cached outputs keyed by the resolved stage config.
pub fn run_plan(plan: &ExperimentPlan) -> Result<Report> {
    plan.validate()?;
    let cache_dir = plan.outputs_dir.join("cache");
    fs::create_dir_all(&cache_dir)?;
    let mut report = Report {
        plan: plan.name.clone(),
        plan_hash: plan.hash()?,
        tool_version: TOOL_VERSION.to_string(),
        seeds: plan.seeds.clone(),
        stages: Vec::new(),
        comparisons: Vec::new(),
        passed: true,
    };
    for stage in &plan.stages {
        let attributed = |e: Error| Error::Stage { stage: stage.id.clone(), source: Box::new(e) };
        let (op, op_json) = resolve(stage, &report.outputs()).map_err(attributed)?;
        let key = json!({ "version": TOOL_VERSION, "op": op_json, "seeds": if op.seeded() { json!(plan.seeds) } else { Value::Null } });
        let hash = digest(&key);
        let cached = cache_dir.join(format!("{hash}.json"));
        let (output, cache_hit) = if cached.exists() {
            (serde_json::from_str(&fs::read_to_string(&cached)?)?, true)
        } else {
            let dir = plan.outputs_dir.join("artifacts").join(&hash);
            fs::create_dir_all(&dir)?;
            let out = execute(&op, &plan.seeds, &dir).map_err(attributed)?;
            fs::write(&cached, serde_json::to_string_pretty(&out)?)?;
            (out, false)
        };
        report.stages.push(StageReport { id: stage.id.clone(), module: op.module().into(), config_hash: hash, cache_hit, output });
    }
    let outputs = report.outputs();
    for c in &plan.comparisons {
        let r = evaluate(c, &outputs)?;
        report.passed &= r.passed;
        report.comparisons.push(r);
    }
    Ok(report)
}

fn resolve(stage: &Stage, outputs: &Value) -> Result<(Operation, Value)> {
    let mut v = serde_json::to_value(&stage.op)?;
    for b in &stage.inputs {
        let x = lookup_number(outputs, &b.from)? * b.scale;
        let slot = v.pointer_mut(&b.to).ok_or_else(|| Error::InvalidConfig(format!("binding target `{}` not found", b.to)))?;
        *slot = json!(x);
    }
    let op: Operation = serde_json::from_value(v.clone())?;
    Ok((op, v))
}

fn lookup<'a>(outputs: &'a Value, p: &str) -> Result<&'a Value> {
    outputs.pointer(p).ok_or_else(|| Error::InvalidConfig(format!("pointer `{p}` not found in outputs")))
}

fn lookup_number(outputs: &Value, p: &str) -> Result<f64> {
    lookup(outputs, p)?.as_f64().ok_or_else(|| Error::InvalidConfig(format!("`{p}` is not a number")))
}

fn evaluate(c: &Comparison, outputs: &Value) -> Result<ComparisonResult> {
    let res = |value: Value, criterion: String, passed: bool| ComparisonResult { name: c.name().to_string(), value, criterion, passed };
    Ok(match c {
        Comparison::RelativeDifference { a, b, tolerance, .. } => {
            let (x, y) = (lookup_number(outputs, a)?, lookup_number(outputs, b)?);
            let d = (x - y).abs() / y.abs();
            res(json!(d), format!("≤ {tolerance}"), d <= *tolerance)
        }
        Comparison::AbsoluteDifference { a, b, tolerance, .. } => {
            let d = (lookup_number(outputs, a)? - lookup_number(outputs, b)?).abs();
            res(json!(d), format!("≤ {tolerance}"), d <= *tolerance)
        }
        Comparison::Within { value, min, max, .. } => {
            let x = lookup_number(outputs, value)?;
            let ok = min.is_none_or(|m| x >= m) && max.is_none_or(|m| x <= m);
            res(json!(x), format!("in [{}, {}]", min.unwrap_or(f64::NEG_INFINITY), max.unwrap_or(f64::INFINITY)), ok)
        }
        Comparison::Monotone { values, direction, .. } => {
            let arr = lookup(outputs, values)?
                .as_array()
                .ok_or_else(|| Error::InvalidConfig(format!("`{values}` is not an array")))?;
            let xs: Vec<f64> = arr.iter().filter_map(Value::as_f64).collect();
            if xs.len() != arr.len() {
                return invalid(format!("`{values}` is not a numeric array"));
            }
            let ok = xs.windows(2).all(|w| match direction {
                Direction::Increasing => w[1] > w[0],
                Direction::Decreasing => w[1] < w[0],
            });
            res(json!(xs), format!("strictly {direction:?}").to_lowercase(), ok)
        }
        Comparison::IsTrue { value, .. } => {
            let v = lookup(outputs, value)?;
            res(v.clone(), "true".into(), v.as_bool() == Some(true))
        }
    })
}

/// Execute one operation; files go to `dir`.
pub fn execute(op: &Operation, seeds: &[u64], dir: &Path) -> Result<Value> {
    Ok(match op {
        Operation::Cell { config, covariance } => {
            let iso = IsotropicCovariance::new(&covariance.density()?);
            let sol = solve_cell(&CellProblem::new(config, &iso)?)?;
            let (lo, hi) = sol.min_max();
            json!({
                "rbar_theta": sol.rbar_theta,
                "rbar_laplace": sol.rbar_laplace,
                "residual": sol.residual_norm,
                "grid_stats": sol.stats,
                "u_min": lo,
                "u_max": hi,
                "decay": { "inner": sol.decay_fit().inner, "outer": sol.decay_fit().outer },
            })
        }
        Operation::Capacity { config, covariance } => {
            let iso = IsotropicCovariance::new(&covariance.density()?);
            let r = cap_dirichlet(&CapacityProblem::new(config, &iso)?)?;
            let (lo, hi) = r.minimizer.min_max();
            json!({
                "cap_value": r.cap_value,
                "samples": r.samples,
                "energy_residual": r.energy_residual,
                "flux_value": r.flux_value,
                "phi_min": lo,
                "phi_max": hi,
            })
        }
        Operation::CellLimit { config, covariance, r0_values } => {
            let iso = IsotropicCovariance::new(&covariance.density()?);
            serde_json::to_value(cap_from_cell_limit(&CellProblem::new(config, &iso)?, r0_values)?)?
        }
        Operation::XiScan { config, covariance, xi_values } => {
            let iso = IsotropicCovariance::new(&covariance.density()?);
            let s = xi_limit_scan(&CapacityProblem::new(config, &iso)?, xi_values)?;
            let first = s.points.first().map_or(f64::NAN, |p| p.cap);
            let last = s.points.last().map_or(f64::NAN, |p| p.cap);
            let mut v = serde_json::to_value(&s)?;
            v["caps"] = json!(s.points.iter().map(|p| p.cap).collect::<Vec<_>>());
            v["lower_rel"] = json!((first / s.lower - 1.0).abs());
            v["upper_rel"] = json!((last / s.upper - 1.0).abs());
            v
        }
        Operation::Simulate { config, covariance, snapshot_times } => {
            let model = covariance.build()?;
            let runs: Vec<Value> = seeds
                .par_iter()
                .map(|&seed| {
                    let cfg = SimConfig { seed, ..config.clone() };
                    let series = run(&cfg, &model, snapshot_times)?;
                    let path = dir.join(format!("series_seed{seed}.csv"));
                    series.write(&path)?;
                    Ok(json!({
                        "seed": seed,
                        "alive_fraction": series.masses.last(),
                        "annihilations_per_particle": series.annihilations_per_particle(cfg.n_particles),
                        "series": path,
                    }))
                })
                .collect::<Result<_>>()?;
            let mean = runs.iter().filter_map(|r| r["alive_fraction"].as_f64()).sum::<f64>() / runs.len() as f64;
            json!({ "runs": runs, "mean_alive_fraction": mean })
        }
        Operation::Pde { config, histogram } => {
            let prob = MacroProblem::new(config)?;
            let sol = solve_macro(&prob)?;
            let mut files = Vec::new();
            if let Some(h) = histogram {
                let g = h.geometry()?;
                for (k, s) in sol.snapshots.iter().enumerate() {
                    let path = dir.join(format!("pde_snap{k}.csv"));
                    sol.to_histogram(s, g.clone()).write(&path)?;
                    files.push(path);
                }
            }
            let last = sol.history.last().unwrap();
            json!({
                "steps": prob.steps,
                "dt": prob.dt,
                "mass_end": last.mass,
                "mass_balance_defect": sol.mass_balance_defect(),
                "boundary_ratio": sol.boundary_ratio,
                "snapshots": files,
            })
        }
        Operation::Convergence { spec } => serde_json::to_value(particle_vs_pde(spec, seeds)?)?,
        Operation::SaffmanTurner { params, covariance, law, y_values } => {
            params.validate()?;
            let scales = params.flow_scales();
            let model = covariance.build()?;
            let s2: Box<dyn Fn(f64) -> f64> = match law {
                StructureLaw::Model => Box::new(move |r| structure_function(&model, r, &scales)),
                StructureLaw::Dissipative => Box::new(dissipative_structure(params)),
                StructureLaw::Inertial => Box::new(inertial_structure(params)),
            };
            let points: Vec<(f64, f64)> = y_values
                .iter()
                .map(|&y| {
                    let p = PhysicalParams { a: y * scales.eta / scales.big_l, ..*params };
                    (p.a, saffman_turner_rate(&p, &s2))
                })
                .collect();
            json!({ "points": points, "slope": log_log_slope(&points) })
        }
        Operation::Physics { params } => json!({
            "abstract": to_abstract(params)?,
            "kolmogorov": params.kolmogorov(),
            "stokes": params.stokes(),
            "rates": reference_rates(params)?,
        }),
    })
}

/// Resolution of the built-in plans.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanScale {
    /// Coarse grids and small ensembles for smoke runs.
    Quick,
    Full,
}

pub const BUILTIN_PLANS: [&str; 4] = ["three_routes", "xi_scan", "saffman_turner", "n_convergence"];

fn cell_grid(scale: PlanScale) -> GridSpec {
    match scale {
        PlanScale::Quick => GridSpec { stretch: 1.2, ..GridSpec::default() },
        PlanScale::Full => GridSpec::default(),
    }
}

fn capacity_grid(scale: PlanScale) -> Option<GridSpec> {
    match scale {
        PlanScale::Quick => Some(GridSpec { h0: 0.125, core_radius: 1.25, domain_radius: 50.0, stretch: 1.2, octant: true }),
        PlanScale::Full => None,
    }
}

/// Particle setting used by the convergence study and the simulation route.
pub fn convergence_base() -> SimConfig {
    SimConfig {
        n_particles: 1000,
        eps_radius: 0.16,
        xi: 1.0,
        sigma: 0.2,
        sigma0: 0.2,
        r0: 2.0,
        dt: 2e-3,
        t_end: 0.5,
        scaling_mode: ScalingMode::Free,
        ..SimConfig::default()
    }
}

/// Covariance used by particle runs: fewer modes keep the field synthesis cheap.
pub fn particle_covariance() -> SpectralSpec {
    SpectralSpec::GaussianBump { kappa: 1.0, cutoff_k: 6.0, n_modes: 128, seed: 1 }
}

pub fn convergence_spec(scale: PlanScale) -> ConvergenceSpec {
    let n_values = match scale {
        PlanScale::Quick => vec![250, 1000],
        PlanScale::Full => vec![1000, 4000, 16000],
    };
    ConvergenceSpec {
        base: convergence_base(),
        lambda: 160.0,
        n_values,
        covariance: particle_covariance(),
        pde_grid: PeriodicGrid { half_width: 2.5, cells: 64 },
        cell_grid: cell_grid(scale),
        rbar: None,
    }
}

pub fn builtin_plan(name: &str, scale: PlanScale, outputs_dir: &Path) -> Result<ExperimentPlan> {
    let seeds = match scale {
        PlanScale::Quick => vec![1, 2],
        PlanScale::Full => (1..=8).collect(),
    };
    let (stages, comparisons) = match name {
        "three_routes" => three_routes(scale),
        "xi_scan" => {
            let config = CapacityConfig { grid: capacity_grid(scale), ..CapacityConfig::default() };
            let xi_values = vec![1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3];
            (
                vec![Stage { id: "scan".into(), op: Operation::XiScan { config, covariance: SpectralSpec::default(), xi_values }, inputs: vec![] }],
                vec![
                    Comparison::Within { name: "xi_to_zero".into(), value: "/scan/lower_rel".into(), min: None, max: Some(0.03) },
                    Comparison::Within { name: "xi_to_infinity".into(), value: "/scan/upper_rel".into(), min: None, max: Some(0.03) },
                    Comparison::IsTrue { name: "monotone_where_ordered".into(), value: "/scan/monotone_where_ordered".into() },
                ],
            )
        }
        "saffman_turner" => {
            let params = PhysicalParams { nu: 1.5e-5, eps_diss: 1e-2, a: 1e-5, big_l: 0.1, rho0: 1e-5, tau_p: 1e-3, u_p: 1e-3, n: 1e9 };
            let y_values: Vec<f64> = (0..=10).map(|k| 1e-3 * 10f64.powf(0.1 * k as f64)).collect();
            let st = |id: &str, law: StructureLaw| Stage {
                id: id.into(),
                op: Operation::SaffmanTurner { params, covariance: SpectralSpec::default(), law, y_values: y_values.clone() },
                inputs: vec![],
            };
            (
                vec![st("model", StructureLaw::Model), st("inertial", StructureLaw::Inertial)],
                vec![
                    Comparison::Within { name: "dissipative_slope".into(), value: "/model/slope".into(), min: Some(2.95), max: Some(3.05) },
                    Comparison::Within {
                        name: "inertial_slope".into(),
                        value: "/inertial/slope".into(),
                        min: Some(5.0 / 3.0 - 0.05),
                        max: Some(5.0 / 3.0 + 0.05),
                    },
                ],
            )
        }
        "n_convergence" => (
            vec![Stage { id: "convergence".into(), op: Operation::Convergence { spec: convergence_spec(scale) }, inputs: vec![] }],
            vec![Comparison::Monotone {
                name: "l1_decreases_with_n".into(),
                values: "/convergence/mean_l1".into(),
                direction: Direction::Decreasing,
            }],
        ),
        other => return invalid(format!("unknown built-in plan `{other}`; known: {}", BUILTIN_PLANS.join(", "))),
    };
    Ok(ExperimentPlan { name: name.into(), stages, seeds, outputs_dir: outputs_dir.to_path_buf(), comparisons })
}

fn three_routes(scale: PlanScale) -> (Vec<Stage>, Vec<Comparison>) {
    let cell = CellConfig { grid: cell_grid(scale), ..CellConfig::default() };
    let r0_values = vec![1e2, 1e3, 1e4, 1e5];
    let capacity = CapacityConfig { grid: capacity_grid(scale), ..CapacityConfig::default() };
    let base = convergence_base();
    let lambda = 160.0;
    let (n, alive_tolerance) = match scale {
        PlanScale::Quick => (1000, 0.04),
        PlanScale::Full => (4000, 0.02),
    };
    let sim = SimConfig { n_particles: n, eps_radius: lambda / n as f64, ..base.clone() };
    let mean_field = CellConfig {
        sigma0: base.sigma0,
        sigma: base.sigma,
        xi: base.xi,
        r0: base.r0 / lambda,
        theta: base.theta,
        grid: cell_grid(scale),
        solver: Default::default(),
    };
    let macro_cfg = MacroConfig {
        diffusivity: 0.5 * (base.sigma0 * base.sigma0 + base.sigma * base.sigma),
        rbar: 0.0,
        f0: base.f0,
        grid: PeriodicGrid { half_width: 2.5, cells: 64 },
        dt: None,
        t_end: base.t_end,
        snapshot_times: vec![],
        record_every: None,
    };
    let stages = vec![
        Stage { id: "cell_limit".into(), op: Operation::CellLimit { config: cell, covariance: SpectralSpec::default(), r0_values }, inputs: vec![] },
        Stage { id: "capacity".into(), op: Operation::Capacity { config: capacity, covariance: SpectralSpec::default() }, inputs: vec![] },
        Stage { id: "cell".into(), op: Operation::Cell { config: mean_field, covariance: SpectralSpec::default() }, inputs: vec![] },
        Stage {
            id: "pde".into(),
            op: Operation::Pde { config: macro_cfg, histogram: None },
            inputs: vec![Binding { from: "/cell/rbar_theta".into(), to: "/config/rbar".into(), scale: lambda }],
        },
        Stage {
            id: "simulation".into(),
            op: Operation::Simulate { config: sim, covariance: particle_covariance(), snapshot_times: vec![] },
            inputs: vec![],
        },
    ];
    let comparisons = vec![
        Comparison::RelativeDifference {
            name: "cell_limit_vs_capacity".into(),
            a: "/cell_limit/largest".into(),
            b: "/capacity/cap_value".into(),
            tolerance: 0.05,
        },
        Comparison::AbsoluteDifference {
            name: "simulation_vs_pde_alive_fraction".into(),
            a: "/simulation/mean_alive_fraction".into(),
            b: "/pde/mass_end".into(),
            tolerance: alive_tolerance,
        },
    ];
    (stages, comparisons)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_sections_reject_unknown_keys() {
        assert!(serde_json::from_str::<Config>(r#"{"cel": {}}"#).is_err());
        let c: Config = serde_json::from_str(r#"{"physics": {"nu":1,"eps_diss":1,"a":1,"big_l":1,"rho0":1,"tau_p":1,"u_p":1,"n":1}}"#).unwrap();
        assert!(c.physics.is_some());
        assert!(c.section("cell", &c.cell).is_err());
        let bad = r#"{"module":"physics","params":{"nu":1,"eps_diss":1,"a":1,"big_l":1,"rho0":1,"tau_p":1,"u_p":1,"n":1},"extra":1}"#;
        assert!(serde_json::from_str::<Operation>(bad).is_err());
    }

    #[test]
    fn builtin_plans_validate() {
        let dir = Path::new("/nonexistent");
        for name in BUILTIN_PLANS {
            for scale in [PlanScale::Quick, PlanScale::Full] {
                let p = builtin_plan(name, scale, dir).unwrap();
                p.validate().unwrap();
                let back: ExperimentPlan = serde_json::from_value(serde_json::to_value(&p).unwrap()).unwrap();
                assert_eq!(back, p);
            }
        }
        assert!(builtin_plan("nope", PlanScale::Quick, dir).is_err());
    }

    #[test]
    fn plan_validation_catches_bad_references() {
        let dir = Path::new("/nonexistent");
        let mut p = builtin_plan("three_routes", PlanScale::Quick, dir).unwrap();
        p.stages.swap(2, 3);
        assert!(p.validate().is_err());
        let mut p = builtin_plan("xi_scan", PlanScale::Quick, dir).unwrap();
        p.seeds.clear();
        assert!(p.validate().is_err());
    }

    #[test]
    fn comparisons_evaluate() {
        let out = json!({"a": {"x": 1.0, "y": 1.04, "v": [3.0, 2.0, 1.0], "ok": true}});
        let rel = Comparison::RelativeDifference { name: "r".into(), a: "/a/y".into(), b: "/a/x".into(), tolerance: 0.05 };
        assert!(evaluate(&rel, &out).unwrap().passed);
        let abs = Comparison::AbsoluteDifference { name: "d".into(), a: "/a/y".into(), b: "/a/x".into(), tolerance: 0.01 };
        assert!(!evaluate(&abs, &out).unwrap().passed);
        let mono = Comparison::Monotone { name: "m".into(), values: "/a/v".into(), direction: Direction::Decreasing };
        assert!(evaluate(&mono, &out).unwrap().passed);
        let within = Comparison::Within { name: "w".into(), value: "/a/x".into(), min: Some(1.5), max: None };
        assert!(!evaluate(&within, &out).unwrap().passed);
        assert!(evaluate(&Comparison::IsTrue { name: "t".into(), value: "/a/ok".into() }, &out).unwrap().passed);
        assert!(evaluate(&Comparison::IsTrue { name: "t".into(), value: "/a/missing".into() }, &out).is_err());
    }

    #[test]
    fn bindings_overwrite_operation_fields() {
        let stage = Stage {
            id: "pde".into(),
            op: Operation::Pde { config: MacroConfig::default(), histogram: None },
            inputs: vec![Binding { from: "/cell/rbar_theta".into(), to: "/config/rbar".into(), scale: 3.0 }],
        };
        let (op, _) = resolve(&stage, &json!({"cell": {"rbar_theta": 0.5}})).unwrap();
        match op {
            Operation::Pde { config, .. } => assert_eq!(config.rbar, 1.5),
            _ => unreachable!(),
        }
    }

    #[test]
    fn rerun_hits_cache_and_report_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let params = PhysicalParams { nu: 1.5e-5, eps_diss: 1e-2, a: 1e-5, big_l: 0.1, rho0: 1e-5, tau_p: 1e-3, u_p: 1e-3, n: 1e9 };
        let plan = ExperimentPlan {
            name: "tiny".into(),
            stages: vec![Stage { id: "phys".into(), op: Operation::Physics { params }, inputs: vec![] }],
            seeds: vec![7],
            outputs_dir: dir.path().to_path_buf(),
            comparisons: vec![],
        };
        let first = run_plan(&plan).unwrap();
        assert!(first.passed);
        assert_eq!(first.cache_hits(), 0);
        let second = run_plan(&plan).unwrap();
        assert_eq!(second.cache_hits(), 1);
        assert_eq!(first.stages[0].output, second.stages[0].output);
        assert_eq!(first.stages[0].config_hash, second.stages[0].config_hash);
        assert_eq!(first.plan_hash, second.plan_hash);
        let other = ExperimentPlan { seeds: vec![8], ..plan };
        assert_eq!(run_plan(&other).unwrap().cache_hits(), 1);
    }
}
