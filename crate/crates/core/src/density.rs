//! Initial densities with bounded support.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::quadrature::integrate;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensitySpec {
    UniformBall { radius: f64 },
    /// `∝ (1 - r²/R²)²` on the ball of radius R.
    Bump { radius: f64 },
    /// Centered Gaussian restricted to a ball; the radius is mandatory.
    TruncatedGaussian {
        std: f64,
        #[serde(default)]
        radius: Option<f64>,
    },
}

impl Default for DensitySpec {
    fn default() -> Self {
        DensitySpec::Bump { radius: 1.0 }
    }
}

/// Bounded probability density supported in a ball centered at the origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitialDensity {
    pub spec: DensitySpec,
    radius: f64,
    normalization: f64,
}

impl InitialDensity {
    pub fn new(spec: DensitySpec) -> Result<Self> {
        let (radius, normalization) = match spec {
            DensitySpec::UniformBall { radius } => {
                check_radius(radius)?;
                (radius, 3.0 / (4.0 * PI * radius.powi(3)))
            }
            DensitySpec::Bump { radius } => {
                check_radius(radius)?;
                (radius, 105.0 / (32.0 * PI * radius.powi(3)))
            }
            DensitySpec::TruncatedGaussian { std, radius } => {
                let radius = radius.ok_or(Error::UnboundedSupport)?;
                check_radius(radius)?;
                if !(std > 0.0) {
                    return Err(Error::NonPositive("std".into()));
                }
                let mass = integrate(|r| 4.0 * PI * r * r * (-0.5 * r * r / (std * std)).exp(), 0.0, radius, 64, 10);
                (radius, 1.0 / mass)
            }
        };
        Ok(Self { spec, radius, normalization })
    }

    pub fn support_radius(&self) -> f64 {
        self.radius
    }

    pub fn value_r(&self, r: f64) -> f64 {
        if r > self.radius {
            return 0.0;
        }
        let shape = match self.spec {
            DensitySpec::UniformBall { .. } => 1.0,
            DensitySpec::Bump { radius } => {
                let t = 1.0 - (r / radius).powi(2);
                t * t
            }
            DensitySpec::TruncatedGaussian { std, .. } => (-0.5 * r * r / (std * std)).exp(),
        };
        self.normalization * shape
    }

    pub fn value(&self, x: &Vector3<f64>) -> f64 {
        self.value_r(x.norm())
    }

    pub fn max_value(&self) -> f64 {
        self.normalization
    }

    /// Rejection sample from the bounding ball.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector3<f64> {
        loop {
            let p = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if p.norm_squared() > 1.0 {
                continue;
            }
            let x = p * self.radius;
            if matches!(self.spec, DensitySpec::UniformBall { .. })
                || rng.random::<f64>() * self.normalization < self.value(&x)
            {
                return x;
            }
        }
    }
}

fn check_radius(r: f64) -> Result<()> {
    if r > 0.0 && r.is_finite() {
        Ok(())
    } else {
        invalid(format!("support radius must be positive and finite, got {r}"))
    }
}
