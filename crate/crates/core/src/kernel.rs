//! Radial interaction kernel θ with unit support.

use std::f64::consts::PI;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::quadrature::gauss_legendre;

/// Shape of θ on [0, 1]; every profile vanishes at 0 and at 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case", deny_unknown_fields)]
pub enum ThetaProfile {
    /// Piecewise linear `min(1, r/w) · min(1, (1-r)/w)`.
    Ramp { width: f64 },
    /// `r²(1 - r²)`.
    Polynomial,
}

impl Default for ThetaProfile {
    fn default() -> Self {
        ThetaProfile::Ramp { width: 0.1 }
    }
}

impl ThetaProfile {
    fn shape(&self, r: f64) -> f64 {
        if !(0.0..1.0).contains(&r) {
            return 0.0;
        }
        match *self {
            ThetaProfile::Ramp { width } => (r / width).min(1.0) * ((1.0 - r) / width).min(1.0),
            ThetaProfile::Polynomial => r * r * (1.0 - r * r),
        }
    }

    fn breakpoints(&self) -> Vec<f64> {
        match *self {
            ThetaProfile::Ramp { width } => vec![0.0, width, 1.0 - width, 1.0],
            ThetaProfile::Polynomial => vec![0.0, 1.0],
        }
    }
}

/// Normalized kernel, `∫θ = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelTheta {
    pub profile: ThetaProfile,
    pub normalization: f64,
}

impl KernelTheta {
    pub fn new(profile: ThetaProfile) -> Result<Self> {
        if let ThetaProfile::Ramp { width } = profile {
            if !(width > 0.0 && width <= 0.5) {
                return invalid(format!("ramp width must lie in (0, 0.5], got {width}"));
            }
        }
        let raw = Self { profile, normalization: 1.0 };
        Ok(Self { normalization: 1.0 / raw.radial_integral(|_| 1.0), ..raw })
    }

    pub const fn support_radius(&self) -> f64 {
        1.0
    }

    pub fn value_r(&self, r: f64) -> f64 {
        self.normalization * self.profile.shape(r)
    }

    pub fn value(&self, x: &Vector3<f64>) -> f64 {
        self.value_r(x.norm())
    }

    /// `θ^ε(x) = ε⁻³ θ(x/ε)`.
    pub fn scaled_value(&self, x: &Vector3<f64>, eps: f64) -> f64 {
        self.value_r(x.norm() / eps) / (eps * eps * eps)
    }

    pub fn max_value(&self) -> f64 {
        match self.profile {
            ThetaProfile::Ramp { .. } => self.normalization,
            ThetaProfile::Polynomial => 0.25 * self.normalization,
        }
    }

    /// `4π ∫₀¹ θ(r) h(r) r² dr`, exact for polynomial `h` of low degree.
    pub fn radial_integral(&self, h: impl Fn(f64) -> f64) -> f64 {
        let (x, w) = gauss_legendre(12);
        let b = self.profile.breakpoints();
        let mut acc = 0.0;
        for win in b.windows(2) {
            let (lo, hi) = (win[0], win[1]);
            let half = 0.5 * (hi - lo);
            for (xi, wi) in x.iter().zip(&w) {
                let r = lo + half * (xi + 1.0);
                acc += half * wi * self.value_r(r) * h(r) * r * r;
            }
        }
        4.0 * PI * acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn kernels_are_normalized() {
        for p in [ThetaProfile::default(), ThetaProfile::Ramp { width: 0.5 }, ThetaProfile::Polynomial] {
            let k = KernelTheta::new(p).unwrap();
            let n = 400;
            let h = 1.0 / n as f64;
            let mut s = 0.0;
            for i in 0..n {
                let r = (i as f64 + 0.5) * h;
                s += 4.0 * PI * k.value_r(r) * r * r * h;
            }
            assert!((s - 1.0).abs() < 1e-4, "{p:?}: {s}");
            assert!((k.radial_integral(|_| 1.0) - 1.0).abs() < 1e-12);
        }
        let poly = KernelTheta::new(ThetaProfile::Polynomial).unwrap();
        assert!((poly.normalization - 35.0 / (8.0 * PI)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_width() {
        assert!(KernelTheta::new(ThetaProfile::Ramp { width: 0.0 }).is_err());
        assert!(KernelTheta::new(ThetaProfile::Ramp { width: 0.7 }).is_err());
    }

    proptest! {
        #[test]
        fn kernel_is_radial_nonnegative_and_vanishes_at_origin(
            x in -1.5f64..1.5, y in -1.5f64..1.5, z in -1.5f64..1.5, w in 0.05f64..0.5
        ) {
            for p in [ThetaProfile::Ramp { width: w }, ThetaProfile::Polynomial] {
                let k = KernelTheta::new(p).unwrap();
                let v = Vector3::new(x, y, z);
                prop_assert!(k.value(&v) >= 0.0);
                prop_assert!(k.value(&v) <= k.max_value() * (1.0 + 1e-12));
                prop_assert_eq!(k.value(&v), k.value(&-v));
                prop_assert_eq!(k.value(&Vector3::zeros()), 0.0);
                if v.norm() >= 1.0 {
                    prop_assert_eq!(k.value(&v), 0.0);
                }
            }
        }
    }
}
