//! Physical parameters, their abstract counterparts and order-of-magnitude rates.
//!
//! All rates are bare products with unit constants.

use serde::{Deserialize, Serialize};

use crate::covariance::FlowScales;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicalParams {
    /// Kinematic viscosity `ν`.
    pub nu: f64,
    /// Mean dissipation rate `ε`.
    pub eps_diss: f64,
    /// Particle radius.
    pub a: f64,
    /// Macroscopic length.
    pub big_l: f64,
    /// Volume-occupation constant `ρ₀ = N a`.
    pub rho0: f64,
    pub tau_p: f64,
    pub u_p: f64,
    /// Number density.
    pub n: f64,
}

impl PhysicalParams {
    pub fn validate(&self) -> Result<()> {
        let fields =
            [("nu", self.nu), ("eps_diss", self.eps_diss), ("a", self.a), ("big_l", self.big_l), ("rho0", self.rho0), ("tau_p", self.tau_p), ("u_p", self.u_p), ("n", self.n)];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::NonPositive(name.into()));
            }
        }
        Ok(())
    }

    pub fn kolmogorov(&self) -> KolmogorovScales {
        KolmogorovScales {
            eta: (self.nu.powi(3) / self.eps_diss).powf(0.25),
            tau_eta: (self.nu / self.eps_diss).sqrt(),
            u_eta: (self.nu * self.eps_diss).powf(0.25),
        }
    }

    pub fn stokes(&self) -> f64 {
        self.tau_p / self.kolmogorov().tau_eta
    }

    pub fn flow_scales(&self) -> FlowScales {
        let k = self.kolmogorov();
        FlowScales { u_eta: k.u_eta, eta: k.eta, big_l: self.big_l }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KolmogorovScales {
    pub eta: f64,
    pub tau_eta: f64,
    pub u_eta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbstractParams {
    pub eps_radius: f64,
    pub sigma: f64,
    pub sigma0: f64,
    pub xi: f64,
    /// `N = 1/ε`.
    pub n_particles: f64,
}

/// `ε = a/ρ₀`, `σ = u_η√τ_η`, `σ₀ = u_P√τ_P`, `ξ = (L/ρ₀)(a/η)`.
pub fn to_abstract(p: &PhysicalParams) -> Result<AbstractParams> {
    p.validate()?;
    let k = p.kolmogorov();
    let eps_radius = p.a / p.rho0;
    Ok(AbstractParams {
        eps_radius,
        sigma: k.u_eta * k.tau_eta.sqrt(),
        sigma0: p.u_p * p.tau_p.sqrt(),
        xi: p.big_l / p.rho0 * p.a / k.eta,
        n_particles: 1.0 / eps_radius,
    })
}

/// `R = (R̄/N) n²`.
pub fn physical_rate(rbar: f64, n_particles: f64, n: f64) -> f64 {
    rbar / n_particles * n * n
}

/// `τ_η S₂(a) a n²`.
pub fn saffman_turner_rate(p: &PhysicalParams, structure_fn: &dyn Fn(f64) -> f64) -> f64 {
    p.kolmogorov().tau_eta * structure_fn(p.a) * p.a * p.n * p.n
}

/// Dissipative-range law `S₂(r) = (ε/ν) r²`.
pub fn dissipative_structure(p: &PhysicalParams) -> impl Fn(f64) -> f64 {
    let g = p.eps_diss / p.nu;
    move |r| g * r * r
}

/// Inertial-range law `S₂(r) = ε^{2/3} r^{2/3}`.
pub fn inertial_structure(p: &PhysicalParams) -> impl Fn(f64) -> f64 {
    let e = p.eps_diss.powf(2.0 / 3.0);
    move |r| e * r.powf(2.0 / 3.0)
}

/// `⅓ Tr A(ρ₀) ρ₀`.
pub fn capacity_heuristic(p: &PhysicalParams, a_trace_at_rho0: f64) -> f64 {
    a_trace_at_rho0 * p.rho0 / 3.0
}

/// `Tr A(ρ₀) = 3u_P²τ_P + τ_η S₂(a)/2`, since `Tr D(a) = S₂(a)/2`.
pub fn trace_at_rho0(p: &PhysicalParams, structure_fn: &dyn Fn(f64) -> f64) -> f64 {
    3.0 * p.u_p * p.u_p * p.tau_p + 0.5 * p.kolmogorov().tau_eta * structure_fn(p.a)
}

/// The simplified capacity estimate `τ_η S₂(a) ρ₀`.
pub fn simplified_capacity(p: &PhysicalParams, structure_fn: &dyn Fn(f64) -> f64) -> f64 {
    p.kolmogorov().tau_eta * structure_fn(p.a) * p.rho0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRate {
    pub value: f64,
    /// False for laws outside the non-inertial reduction.
    pub covered_by_theory: bool,
}

/// `u_η/√St`, which the non-inertial model does not reproduce.
pub fn abrahamson_rate(p: &PhysicalParams) -> ReferenceRate {
    ReferenceRate { value: p.kolmogorov().u_eta / p.stokes().sqrt(), covered_by_theory: false }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRates {
    pub saffman_turner: ReferenceRate,
    pub inertial_range: ReferenceRate,
    /// `R = (R̄/N)n²` with `R̄ = ⅓TrA(ρ₀)ρ₀` and the dissipative structure function.
    pub capacity_heuristic: ReferenceRate,
    pub abrahamson: ReferenceRate,
}

pub fn reference_rates(p: &PhysicalParams) -> Result<ReferenceRates> {
    let abs = to_abstract(p)?;
    let dis = dissipative_structure(p);
    let rbar = capacity_heuristic(p, trace_at_rho0(p, &dis));
    let covered = |value| ReferenceRate { value, covered_by_theory: true };
    Ok(ReferenceRates {
        saffman_turner: covered(saffman_turner_rate(p, &dis)),
        inertial_range: covered(saffman_turner_rate(p, &inertial_structure(p))),
        capacity_heuristic: covered(physical_rate(rbar, abs.n_particles, p.n)),
        abrahamson: abrahamson_rate(p),
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x.ln(), b + y.ln()));
    let (mx, my) = (sx / n, sy / n);
    let (num, den) = points.iter().fold((0.0, 0.0), |(a, b), (x, y)| {
        let dx = x.ln() - mx;
        (a + dx * (y.ln() - my), b + dx * dx)
    });
    num / den
}
