//! Cell problem `σ₀²Δu + σ²∇·(ω(ξx)∇u) = R₀θ(1+u)`, `u → 0` at infinity.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::covariance::OmegaField;
use crate::error::{invalid, Error, Result};
use crate::fv::{solve_constrained, Grid3, GridSpec, SolveStats, SolverSpec, Stencil};
use crate::kernel::{KernelTheta, ThetaProfile};

/// Boundary-layer ratio above which the domain is reported too small.
pub const DOMAIN_RATIO: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    pub sigma0: f64,
    pub sigma: f64,
    pub xi: f64,
    pub r0: f64,
    #[serde(default)]
    pub theta: ThetaProfile,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub solver: SolverSpec,
}

impl Default for CellConfig {
    fn default() -> Self {
        Self {
            sigma0: 0.5,
            sigma: 0.5,
            xi: 1.0,
            r0: 1.0,
            theta: ThetaProfile::default(),
            grid: GridSpec::default(),
            solver: SolverSpec::default(),
        }
    }
}

/// Cell problem bound to a covariance evaluator.
#[derive(Clone, Copy)]
pub struct CellProblem<'a> {
    pub sigma0: f64,
    pub sigma: f64,
    pub xi: f64,
    pub r0: f64,
    pub theta: KernelTheta,
    pub omega: &'a dyn OmegaField,
    pub grid: GridSpec,
    pub solver: SolverSpec,
}

impl<'a> CellProblem<'a> {
    pub fn new(cfg: &CellConfig, omega: &'a dyn OmegaField) -> Result<Self> {
        let p = Self {
            sigma0: cfg.sigma0,
            sigma: cfg.sigma,
            xi: cfg.xi,
            r0: cfg.r0,
            theta: KernelTheta::new(cfg.theta)?,
            omega,
            grid: cfg.grid,
            solver: cfg.solver,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0 > 0.0) {
            return Err(Error::NonPositive("sigma0".into()));
        }
        if !(self.xi > 0.0) {
            return Err(Error::NonPositive("xi".into()));
        }
        if !(self.sigma >= 0.0 && self.r0 >= 0.0) {
            return invalid("sigma and r0 must be non-negative");
        }
        if self.grid.domain_radius <= 2.0 * self.theta.support_radius() {
            return invalid("domain radius must exceed twice the kernel support");
        }
        Ok(())
    }

    /// `A(x) = σ₀²I + σ²ω(ξx)`.
    pub fn coefficient(&self, x: &Vector3<f64>) -> Matrix3<f64> {
        let s0 = self.sigma0 * self.sigma0;
        if self.sigma == 0.0 {
            return Matrix3::identity() * s0;
        }
        Matrix3::identity() * s0 + self.omega.omega(&(x * self.xi)) * (self.sigma * self.sigma)
    }

    /// `σ₀² + σ²`, the coefficient far from the origin.
    pub fn total_diffusivity(&self) -> f64 {
        self.sigma0 * self.sigma0 + self.sigma * self.sigma
    }
}

/// Discrete cell system `(K_A + R₀VΘ) u = -R₀Vθ` with Dirichlet 0 on the outer boundary.
pub struct CellSystem {
    pub grid: Grid3,
    pub operator: Stencil,
    pub rhs: Vec<f64>,
    pub free: Vec<bool>,
    pub theta_nodal: Vec<f64>,
}

/// The assembled matrix is the negative of `∇·(A∇) - R₀θ`, so it is symmetric positive definite.
pub fn assemble_operator(prob: &CellProblem) -> Result<CellSystem> {
    prob.validate()?;
    let grid = prob.grid.build()?;
    let coef = |x: &Vector3<f64>| prob.coefficient(x);
    let mut operator = Stencil::assemble(&grid, &coef, None)?;
    let n = grid.len();
    let theta_nodal = nodal_theta(&grid, &prob.theta);
    let react: Vec<f64> = (0..n).map(|i| prob.r0 * grid.dual_volume(i) * theta_nodal[i]).collect();
    operator.add_diagonal(&react);
    let rhs = react.iter().map(|v| -v).collect();
    let free = (0..n).map(|i| !grid.is_outer_boundary(i)).collect();
    Ok(CellSystem { grid, operator, rhs, free, theta_nodal })
}

/// Nodal values of θ rescaled so that the grid quadrature of θ is exactly 1.
pub fn nodal_theta(grid: &Grid3, theta: &KernelTheta) -> Vec<f64> {
    let raw: Vec<f64> = (0..grid.len()).map(|i| theta.value(&grid.point(i))).collect();
    let mass = grid.integrate_nodal(&raw);
    raw.into_iter().map(|v| v / mass).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridStats {
    pub nodes: usize,
    pub dims: [usize; 3],
    pub h0: f64,
    pub outer_radius: f64,
    pub stencil_width: usize,
    pub iterations: usize,
}

#[derive(Clone, Debug)]
pub struct CellSolution {
    pub grid: Grid3,
    pub u: Vec<f64>,
    pub residual_norm: f64,
    pub rbar_theta: f64,
    pub rbar_laplace: f64,
    pub stats: GridStats,
}

impl CellSolution {
    pub fn min_max(&self) -> (f64, f64) {
        self.u.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
    }

    pub fn max_abs(&self) -> f64 {
        self.u.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `max |u| |x|` on the inner and outer halves of the domain.
    pub fn decay_fit(&self) -> DecayFit {
        let half = 0.5 * self.grid.outer_radius();
        let mut fit = DecayFit { inner: 0.0, outer: 0.0 };
        for i in 0..self.grid.len() {
            let p = self.grid.point(i);
            let r = p.amax();
            let m = self.u[i].abs() * p.norm().max(1.0);
            if r >= half {
                fit.outer = fit.outer.max(m);
            } else {
                fit.inner = fit.inner.max(m);
            }
        }
        fit
    }

    /// Nodal value at a grid node nearest to `x` (in the computed octant if symmetric).
    pub fn value_near(&self, x: &Vector3<f64>) -> f64 {
        let q = if self.grid.octant { x.abs() } else { *x };
        let mut idx = [0usize; 3];
        for d in 0..3 {
            let n = &self.grid.axes[d].nodes;
            let p = n.partition_point(|&v| v < q[d]).min(n.len() - 1);
            idx[d] = if p > 0 && (q[d] - n[p - 1]).abs() < (n[p] - q[d]).abs() { p - 1 } else { p };
        }
        self.u[self.grid.index(idx[0], idx[1], idx[2])]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub inner: f64,
    pub outer: f64,
}

pub fn solve_cell(prob: &CellProblem) -> Result<CellSolution> {
    let sys = assemble_operator(prob)?;
    let n = sys.grid.len();
    let mut u = vec![0.0; n];
    let st: SolveStats = solve_constrained(&sys.operator, &sys.rhs, &mut u, &sys.free, &prob.solver)?;
    let max = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max > 0.0 {
        let layer = (0..n).filter(|&i| sys.grid.is_boundary_layer(i)).fold(0.0f64, |m, i| m.max(u[i].abs()));
        if layer > DOMAIN_RATIO * max {
            return Err(Error::DomainTooSmall { ratio: layer / max });
        }
    }
    let stats = GridStats {
        nodes: n,
        dims: sys.grid.dims(),
        h0: prob.grid.h0,
        outer_radius: sys.grid.outer_radius(),
        stencil_width: sys.operator.width(),
        iterations: st.iterations,
    };
    let mut sol = CellSolution { grid: sys.grid, u, residual_norm: st.residual, rbar_theta: 0.0, rbar_laplace: 0.0, stats };
    let (a, b) = compute_rbar(&sol, prob)?;
    sol.rbar_theta = a;
    sol.rbar_laplace = b;
    Ok(sol)
}

/// `(∫R₀θ(1+u), (σ₀²+σ²)∫Δ_h u)`, the second with the 7-point Laplacian.
pub fn compute_rbar(sol: &CellSolution, prob: &CellProblem) -> Result<(f64, f64)> {
    let g = &sol.grid;
    let n = g.len();
    let nodal = nodal_theta(g, &prob.theta);
    let theta: Vec<f64> = (0..n).map(|i| prob.r0 * nodal[i] * (1.0 + sol.u[i])).collect();
    let rbar_theta = g.integrate_nodal(&theta);
    let lap = Stencil::assemble(g, &|_| Matrix3::identity(), None)?;
    let mut ku = vec![0.0; n];
    lap.apply(&sol.u, &mut ku);
    let sum: f64 = (0..n).filter(|&i| !g.is_outer_boundary(i)).map(|i| ku[i]).sum();
    let rbar_laplace = -prob.total_diffusivity() * g.symmetry_factor() * sum;
    Ok((rbar_theta, rbar_laplace))
}

/// `u^ε(x) = ε⁻¹ u(x/ε)` on the grid scaled by ε.
#[derive(Clone, Debug)]
pub struct ScaledField {
    pub grid: Grid3,
    pub values: Vec<f64>,
}

pub fn rescale_solution(sol: &CellSolution, eps_radius: f64) -> ScaledField {
    let g = &sol.grid;
    let axes = [g.axes[0].scaled(eps_radius), g.axes[1].scaled(eps_radius), g.axes[2].scaled(eps_radius)];
    ScaledField { grid: Grid3::new(axes, g.octant), values: sol.u.iter().map(|v| v / eps_radius).collect() }
}

impl ScaledField {
    /// `sup |u^ε(x)| (|x| ∨ ε)`.
    pub fn decay_constant(&self, eps_radius: f64) -> f64 {
        (0..self.grid.len())
            .map(|i| self.values[i].abs() * self.grid.point(i).norm().max(eps_radius))
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::Uncorrelated;

    fn small_grid() -> GridSpec {
        GridSpec { h0: 0.125, core_radius: 1.25, domain_radius: 200.0, stretch: 1.15, octant: true }
    }

    #[test]
    fn zero_rate_gives_zero_solution() {
        let cfg = CellConfig { r0: 0.0, grid: small_grid(), ..CellConfig::default() };
        let sol = solve_cell(&CellProblem::new(&cfg, &Uncorrelated).unwrap()).unwrap();
        assert!(sol.u.iter().all(|&v| v == 0.0));
        assert_eq!((sol.rbar_theta, sol.rbar_laplace), (0.0, 0.0));
    }

    #[test]
    fn sigma_zero_operator_is_scaled_laplacian_plus_reaction() {
        let cfg = CellConfig { sigma: 0.0, sigma0: 0.7, r0: 3.0, grid: small_grid(), ..CellConfig::default() };
        let prob = CellProblem::new(&cfg, &Uncorrelated).unwrap();
        let sys = assemble_operator(&prob).unwrap();
        let lap = Stencil::assemble(&sys.grid, &|_| Matrix3::identity(), None).unwrap();
        assert_eq!(sys.operator.width(), 7);
        for i in (0..sys.grid.len()).step_by(97) {
            let v = sys.grid.dual_volume(i);
            let react = 3.0 * v * sys.theta_nodal[i];
            let d = sys.operator.diagonal(i);
            assert!((d - 0.49 * lap.diagonal(i) - react).abs() < 1e-12 * d);
            for o in &sys.operator.offsets {
                if *o != [0, 0, 0] {
                    let c = lap.coefficient(i, *o);
                    assert!((sys.operator.coefficient(i, *o) - 0.49 * c).abs() <= 1e-12 * c.abs());
                }
            }
        }
    }

    #[test]
    fn small_rate_is_linear() {
        let cfg = CellConfig { r0: 1e-6, grid: small_grid(), ..CellConfig::default() };
        let sol = solve_cell(&CellProblem::new(&cfg, &Uncorrelated).unwrap()).unwrap();
        assert!((sol.rbar_theta / 1e-6 - 1.0).abs() < 1e-2);
        assert!(sol.rbar_theta < 1e-6);
    }

    #[test]
    fn rescaling_scales_sup_norm() {
        let cfg = CellConfig { grid: small_grid(), ..CellConfig::default() };
        let sol = solve_cell(&CellProblem::new(&cfg, &Uncorrelated).unwrap()).unwrap();
        let id = rescale_solution(&sol, 1.0);
        assert_eq!(id.values, sol.u);
        assert_eq!(id.grid, sol.grid);
        let m = sol.max_abs();
        let d1 = id.decay_constant(1.0);
        for eps in [0.1, 0.01] {
            let s = rescale_solution(&sol, eps);
            assert!((s.max_abs() - m / eps).abs() <= 1e-12 * m / eps);
            assert!(s.decay_constant(eps) <= d1 * (1.0 + 1e-9));
        }
    }
}
