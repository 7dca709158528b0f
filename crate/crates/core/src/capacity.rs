//! Generalized capacity `Cap(K, A) = inf ∫∇ψᵀA∇ψ` over `ψ ≥ 1` on `K`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::{solve_cell, CellProblem};
use crate::covariance::{OmegaField, Uncorrelated};
use crate::error::{invalid, Error, Result};
use crate::fv::{solve_constrained, Grid3, GridSpec, SolverSpec, Stencil};

/// Smallest retained fraction of a cut edge.
const MIN_CUT: f64 = 1e-2;
const SPHERE_POINTS: usize = 4000;

/// Compact set `K`; only balls centred at the origin are supported.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CompactSet {
    Ball { radius: f64 },
    /// Support of θ, the closed unit ball.
    ThetaSupport,
}

impl Default for CompactSet {
    fn default() -> Self {
        CompactSet::ThetaSupport
    }
}

impl CompactSet {
    pub fn radius(&self) -> f64 {
        match *self {
            CompactSet::Ball { radius } => radius,
            CompactSet::ThetaSupport => 1.0,
        }
    }

    pub fn contains(&self, x: &Vector3<f64>) -> bool {
        x.norm() <= self.radius()
    }

    /// Default grid resolving the set: `h = ρ/16`, fine core to `1.25ρ`, `L = 50ρ`.
    pub fn default_grid(&self) -> GridSpec {
        let rho = self.radius();
        GridSpec { h0: rho / 16.0, core_radius: 1.25 * rho, domain_radius: 50.0 * rho, stretch: 1.12, octant: true }
    }

    /// Fraction along `a → b` where the segment leaves `K`, for `a` outside and `b` inside.
    fn cut_fraction(&self, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
        let rho = self.radius();
        let d = b - a;
        let qa = d.norm_squared();
        let qb = 2.0 * a.dot(&d);
        let qc = a.norm_squared() - rho * rho;
        let disc = (qb * qb - 4.0 * qa * qc).max(0.0);
        ((-qb - disc.sqrt()) / (2.0 * qa)).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacityConfig {
    #[serde(default)]
    pub set: CompactSet,
    pub sigma0: f64,
    pub sigma: f64,
    pub xi: f64,
    /// Defaults to `set.default_grid()`.
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub solver: SolverSpec,
    /// Richardson extrapolation in `1/L` from `L` and `2L`.
    #[serde(default = "yes")]
    pub extrapolate: bool,
}

fn yes() -> bool {
    true
}

impl Default for CapacityConfig {
    fn default() -> Self {
        Self {
            set: CompactSet::default(),
            sigma0: 0.5,
            sigma: 0.5,
            xi: 1.0,
            grid: None,
            solver: SolverSpec::default(),
            extrapolate: true,
        }
    }
}

#[derive(Clone, Copy)]
pub struct CapacityProblem<'a> {
    pub set: CompactSet,
    pub sigma0: f64,
    pub sigma: f64,
    pub xi: f64,
    pub omega: &'a dyn OmegaField,
    pub grid: GridSpec,
    pub solver: SolverSpec,
    pub extrapolate: bool,
}

impl<'a> CapacityProblem<'a> {
    pub fn new(cfg: &CapacityConfig, omega: &'a dyn OmegaField) -> Result<Self> {
        let p = Self {
            set: cfg.set,
            sigma0: cfg.sigma0,
            sigma: cfg.sigma,
            xi: cfg.xi,
            omega,
            grid: cfg.grid.unwrap_or_else(|| cfg.set.default_grid()),
            solver: cfg.solver,
            extrapolate: cfg.extrapolate,
        };
        p.validate()?;
        Ok(p)
    }

    /// `A = λ² I` on the same set and grid.
    pub fn identity(&self, lambda2: f64) -> CapacityProblem<'static> {
        static NONE: Uncorrelated = Uncorrelated;
        CapacityProblem {
            set: self.set,
            sigma0: lambda2.sqrt(),
            sigma: 0.0,
            xi: 1.0,
            omega: &NONE,
            grid: self.grid,
            solver: self.solver,
            extrapolate: self.extrapolate,
        }
    }

    pub fn with_xi(&self, xi: f64) -> Self {
        Self { xi, ..*self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0 > 0.0) {
            return Err(Error::NonPositive("sigma0".into()));
        }
        if !(self.xi > 0.0) {
            return Err(Error::NonPositive("xi".into()));
        }
        if !(self.sigma >= 0.0) {
            return invalid("sigma must be non-negative");
        }
        if !(self.set.radius() > 0.0) {
            return Err(Error::NonPositive("set radius".into()));
        }
        if self.set.radius() >= 0.5 * self.grid.domain_radius {
            return Err(Error::SetTouchesBoundary);
        }
        Ok(())
    }

    pub fn coefficient(&self, x: &Vector3<f64>) -> Matrix3<f64> {
        let s2 = self.sigma * self.sigma;
        let mut a = Matrix3::identity() * (self.sigma0 * self.sigma0);
        if s2 > 0.0 {
            a += self.omega.omega(&(x * self.xi)) * s2;
        }
        a
    }
}

/// Equilibrium potential on one grid.
#[derive(Clone, Debug)]
pub struct Minimizer {
    pub grid: Grid3,
    pub phi: Vec<f64>,
}

impl Minimizer {
    pub fn min_max(&self) -> (f64, f64) {
        self.phi.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSample {
    pub domain_radius: f64,
    pub cap: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug)]
pub struct CapacityResult {
    pub cap_value: f64,
    /// Raw energies per truncation radius, finest first.
    pub samples: Vec<DomainSample>,
    pub minimizer: Minimizer,
    pub energy_residual: f64,
    /// `∫ n·A∇φ` over a sphere of radius `1.5ρ` on the first grid.
    pub flux_value: f64,
}

struct Solved {
    minimizer: Minimizer,
    energy: f64,
    residual: f64,
    iterations: usize,
}

fn solve_on(prob: &CapacityProblem, spec: &GridSpec) -> Result<Solved> {
    let grid = spec.build()?;
    let n = grid.len();
    let inside: Vec<bool> = (0..n).map(|i| prob.set.contains(&grid.point(i))).collect();
    if (0..n).any(|i| inside[i] && (grid.is_outer_boundary(i) || grid.is_boundary_layer(i))) {
        return Err(Error::SetTouchesBoundary);
    }
    let set = prob.set;
    let g = &grid;
    let inside_ref = &inside;
    let cut = move |i: usize, j: usize| {
        if inside_ref[i] == inside_ref[j] {
            return 1.0;
        }
        let (a, b) = if inside_ref[i] { (j, i) } else { (i, j) };
        1.0 / set.cut_fraction(&g.point(a), &g.point(b)).max(MIN_CUT)
    };
    let coef = |x: &Vector3<f64>| prob.coefficient(x);
    let k = Stencil::assemble(&grid, &coef, Some(&cut))?;
    let mut phi: Vec<f64> = inside.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let free: Vec<bool> = (0..n).map(|i| !inside[i] && !grid.is_outer_boundary(i)).collect();
    let rhs = vec![0.0; n];
    let st = solve_constrained(&k, &rhs, &mut phi, &free, &prob.solver)?;
    let energy = grid.symmetry_factor() * k.energy(&phi);
    Ok(Solved { minimizer: Minimizer { grid, phi }, energy, residual: st.residual, iterations: st.iterations })
}

/// Energy of the equality-constrained Dirichlet minimizer, `φ = 1` on `K`, `0` outside the box.
pub fn cap_dirichlet(prob: &CapacityProblem) -> Result<CapacityResult> {
    prob.validate()?;
    let first = solve_on(prob, &prob.grid)?;
    let mut samples =
        vec![DomainSample { domain_radius: first.minimizer.grid.outer_radius(), cap: first.energy, iterations: first.iterations }];
    let mut cap_value = first.energy;
    let mut residual = first.residual;
    if prob.extrapolate {
        let wide = GridSpec { domain_radius: 2.0 * prob.grid.domain_radius, ..prob.grid };
        let second = solve_on(prob, &wide)?;
        let l1 = samples[0].domain_radius;
        let l2 = second.minimizer.grid.outer_radius();
        cap_value = (l2 * second.energy - l1 * first.energy) / (l2 - l1);
        residual = residual.max(second.residual);
        samples.push(DomainSample { domain_radius: l2, cap: second.energy, iterations: second.iterations });
    }
    let flux_value = sphere_flux(prob, &first.minimizer, 1.5 * prob.set.radius());
    Ok(CapacityResult { cap_value, samples, minimizer: first.minimizer, energy_residual: residual, flux_value })
}

/// Second-order nodal gradient; normal derivative vanishes on octant symmetry planes.
fn nodal_gradient(grid: &Grid3, f: &[f64]) -> [Vec<f64>; 3] {
    let n = grid.len();
    let dims = grid.dims();
    let mut out = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for (d, g) in out.iter_mut().enumerate() {
        let x = &grid.axes[d].nodes;
        let stride = match d {
            0 => 1,
            1 => dims[0],
            _ => dims[0] * dims[1],
        };
        for (idx, gi) in g.iter_mut().enumerate() {
            let c = grid.ijk(idx)[d];
            *gi = if c == 0 {
                if grid.octant {
                    0.0
                } else {
                    (f[idx + stride] - f[idx]) / (x[1] - x[0])
                }
            } else if c + 1 == dims[d] {
                (f[idx] - f[idx - stride]) / (x[c] - x[c - 1])
            } else {
                let hm = x[c] - x[c - 1];
                let hp = x[c + 1] - x[c];
                (hm * hm * (f[idx + stride] - f[idx]) + hp * hp * (f[idx] - f[idx - stride])) / (hm * hp * (hm + hp))
            };
        }
    }
    out
}

/// Quasi-uniform points on the unit sphere.
pub fn fibonacci_sphere(m: usize) -> Vec<Vector3<f64>> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..m)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / m as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            Vector3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

fn sphere_flux(prob: &CapacityProblem, m: &Minimizer, radius: f64) -> f64 {
    let grad = nodal_gradient(&m.grid, &m.phi);
    let pts = fibonacci_sphere(SPHERE_POINTS);
    let w = 4.0 * PI * radius * radius / pts.len() as f64;
    let total: f64 = pts
        .par_iter()
        .map(|n| {
            let x = n * radius;
            let mut g = Vector3::zeros();
            for d in 0..3 {
                let v = m.grid.interpolate(&grad[d], &x);
                g[d] = if m.grid.octant && x[d] < 0.0 { -v } else { v };
            }
            -(n.dot(&(prob.coefficient(&x) * g)))
        })
        .sum();
    w * total
}

/// `4π ρ`, the capacity of a ball for `A = I`.
pub fn ball_capacity(radius: f64) -> f64 {
    4.0 * PI * radius
}

/// Rough estimate `4π·⅓Tr A(ρ)·ρ` with `A` sampled on the sphere.
pub fn trace_heuristic(prob: &CapacityProblem) -> f64 {
    let rho = prob.set.radius();
    let pts = fibonacci_sphere(200);
    let tr: f64 = pts.iter().map(|n| prob.coefficient(&(n * rho)).trace()).sum::<f64>() / pts.len() as f64;
    4.0 * PI * tr / 3.0 * rho
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellLimit {
    /// `(R₀, R̄(R₀))` in increasing `R₀`.
    pub points: Vec<(f64, f64)>,
    pub largest: f64,
    /// Aitken extrapolation of the last three points, when they are geometric in `R₀`
    /// and the increments contract.
    pub saturation: Option<f64>,
    pub monotone: bool,
}

/// `R̄(R₀)` from independent cell solves, approaching `Cap(supp θ, A)` as `R₀ → ∞`.
pub fn cap_from_cell_limit(base: &CellProblem, r0_sequence: &[f64]) -> Result<CellLimit> {
    if r0_sequence.is_empty() || r0_sequence.windows(2).any(|w| !(w[1] > w[0])) {
        return invalid("R0 sequence must be non-empty and strictly increasing");
    }
    let points: Vec<(f64, f64)> = r0_sequence
        .par_iter()
        .map(|&r0| {
            let p = CellProblem { r0, ..*base };
            solve_cell(&p).map(|s| (r0, s.rbar_theta))
        })
        .collect::<Result<_>>()?;
    let largest = points.last().map(|p| p.1).unwrap_or(0.0);
    let monotone = points.windows(2).all(|w| w[1].1 >= w[0].1);
    let saturation = aitken(&points);
    Ok(CellLimit { points, largest, saturation, monotone })
}

fn aitken(points: &[(f64, f64)]) -> Option<f64> {
    let n = points.len();
    if n < 3 {
        return None;
    }
    let [(x0, y0), (x1, y1), (x2, y2)] = [points[n - 3], points[n - 2], points[n - 1]];
    if ((x2 / x1) / (x1 / x0) - 1.0).abs() > 1e-9 {
        return None;
    }
    let (d1, d2) = (y1 - y0, y2 - y1);
    let q = d2 / d1;
    if !(d1 > 0.0 && q > 0.0 && q < 1.0) {
        return None;
    }
    Some(y2 + d2 * q / (1.0 - q))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XiPoint {
    pub xi: f64,
    pub cap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XiScan {
    pub points: Vec<XiPoint>,
    /// `σ₀² Cap(K, I)` on the same grid.
    pub lower: f64,
    /// `(σ₀² + σ²) Cap(K, I)` on the same grid.
    pub upper: f64,
    /// Whether `ω(ξ_k x) ≼ ω(ξ_{k+1} x)` held at every cube centre, per consecutive pair.
    pub ordering_holds: Vec<bool>,
    /// Whether `cap` does not decrease across each pair whose ordering holds.
    pub monotone_where_ordered: bool,
}

/// Capacity across `ξ`, with the discrete `ξ → 0` and `ξ → ∞` limits.
pub fn xi_limit_scan(base: &CapacityProblem, xi_values: &[f64]) -> Result<XiScan> {
    if xi_values.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::NonPositive("xi".into()));
    }
    let mut xis = xi_values.to_vec();
    xis.sort_by(f64::total_cmp);
    let ident = cap_dirichlet(&base.identity(1.0))?.cap_value;
    let s0 = base.sigma0 * base.sigma0;
    let lower = s0 * ident;
    let upper = (s0 + base.sigma * base.sigma) * ident;
    let points: Vec<XiPoint> = xis
        .par_iter()
        .map(|&xi| cap_dirichlet(&base.with_xi(xi)).map(|r| XiPoint { xi, cap: r.cap_value }))
        .collect::<Result<_>>()?;
    let grid = base.grid.build()?;
    let ordering_holds: Vec<bool> = xis.windows(2).map(|w| omega_ordered(base.omega, &grid, w[0], w[1])).collect();
    let monotone_where_ordered =
        points.windows(2).zip(&ordering_holds).all(|(w, &ord)| !ord || w[1].cap >= w[0].cap * (1.0 - 1e-9));
    Ok(XiScan { points, lower, upper, ordering_holds, monotone_where_ordered })
}

/// `ω(ξ₁x) ≼ ω(ξ₂x)` at every cube centre of `grid`.
pub fn omega_ordered(omega: &dyn OmegaField, grid: &Grid3, xi1: f64, xi2: f64) -> bool {
    (0..grid.cube_count()).into_par_iter().all(|c| {
        let x = grid.cube_center(c);
        let d = omega.omega(&(x * xi2)) - omega.omega(&(x * xi1));
        d.symmetric_eigenvalues().min() >= -1e-10
    })
}
