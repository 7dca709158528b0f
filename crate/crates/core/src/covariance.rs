//! Isotropic divergence-free covariance models and Gaussian field increments.
//!
//! The covariance is `C(x) = ∫ g(|z|) (I - ẑẑᵀ) cos(z·x) dz`, normalized so that
//! `C(0) = I`. Two evaluation routes are provided: the finite mode sum used for
//! field synthesis, and the exact radial form via spherical Bessel kernels.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::Composite;

pub const MIN_MODES: usize = 8;
const NORM_TOL: f64 = 1e-6;
const TABLE_POINTS: usize = 4096;
/// Threshold defining the numerical correlation length.
pub const DECAY_THRESHOLD: f64 = 1e-3;

/// JSON form of a spectral density together with its mode count and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpectralSpec {
    GaussianBump { kappa: f64, cutoff_k: f64, n_modes: usize, seed: u64 },
    /// `(k/κ)² exp(-k²/(2κ²))`, whose covariance decays like a Gaussian.
    WeightedGaussianBump { kappa: f64, cutoff_k: f64, n_modes: usize, seed: u64 },
    Indicator { cutoff_k: f64, n_modes: usize, seed: u64 },
}

impl Default for SpectralSpec {
    fn default() -> Self {
        SpectralSpec::GaussianBump { kappa: 1.0, cutoff_k: 6.0, n_modes: 4096, seed: 1 }
    }
}

impl SpectralSpec {
    pub fn n_modes(&self) -> usize {
        match *self {
            SpectralSpec::GaussianBump { n_modes, .. }
            | SpectralSpec::WeightedGaussianBump { n_modes, .. }
            | SpectralSpec::Indicator { n_modes, .. } => n_modes,
        }
    }

    pub fn seed(&self) -> u64 {
        match *self {
            SpectralSpec::GaussianBump { seed, .. }
            | SpectralSpec::WeightedGaussianBump { seed, .. }
            | SpectralSpec::Indicator { seed, .. } => seed,
        }
    }

    pub fn density(&self) -> Result<SpectralDensity> {
        match *self {
            SpectralSpec::GaussianBump { kappa, cutoff_k, .. } => {
                SpectralDensity::normalized(SpectralProfile::GaussianBump { kappa }, cutoff_k)
            }
            SpectralSpec::WeightedGaussianBump { kappa, cutoff_k, .. } => {
                SpectralDensity::normalized(SpectralProfile::WeightedGaussianBump { kappa }, cutoff_k)
            }
            SpectralSpec::Indicator { cutoff_k, .. } => {
                SpectralDensity::normalized(SpectralProfile::Indicator, cutoff_k)
            }
        }
    }

    pub fn build(&self) -> Result<CovarianceModel> {
        build_covariance_model(&self.density()?, self.n_modes(), self.seed())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case")]
pub enum SpectralProfile {
    /// `exp(-k²/(2κ²))`
    GaussianBump { kappa: f64 },
    /// `(k/κ)² exp(-k²/(2κ²))`
    WeightedGaussianBump { kappa: f64 },
    /// constant on the ball
    Indicator,
}

impl SpectralProfile {
    fn value(&self, k: f64) -> f64 {
        match *self {
            SpectralProfile::GaussianBump { kappa } => (-0.5 * k * k / (kappa * kappa)).exp(),
            SpectralProfile::WeightedGaussianBump { kappa } => {
                let q = k * k / (kappa * kappa);
                q * (-0.5 * q).exp()
            }
            SpectralProfile::Indicator => 1.0,
        }
    }

    fn decay_range(&self, cutoff_k: f64) -> f64 {
        match *self {
            SpectralProfile::GaussianBump { kappa } => 40.0 / kappa,
            SpectralProfile::WeightedGaussianBump { kappa } => 12.0 / kappa,
            SpectralProfile::Indicator => 100.0 / cutoff_k,
        }
    }
}

/// Radial spectral density `g(|z|)`, truncated at `cutoff_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralDensity {
    pub profile: SpectralProfile,
    pub cutoff_k: f64,
    pub normalization: f64,
}

impl SpectralDensity {
    /// Density scaled so that `C(0) = I`, i.e. `(2/3)‖g‖ = 1`.
    pub fn normalized(profile: SpectralProfile, cutoff_k: f64) -> Result<Self> {
        if !(cutoff_k > 0.0 && cutoff_k.is_finite()) {
            return Err(Error::NonPositive("cutoff_k".into()));
        }
        if let SpectralProfile::GaussianBump { kappa } | SpectralProfile::WeightedGaussianBump { kappa } = profile {
            if !(kappa > 0.0 && kappa.is_finite()) {
                return Err(Error::NonPositive("kappa".into()));
            }
        }
        let raw = Self { profile, cutoff_k, normalization: 1.0 };
        let c = 1.0 / ((2.0 / 3.0) * raw.l1_norm());
        Ok(Self { normalization: c, ..raw })
    }

    pub fn g(&self, k: f64) -> f64 {
        if (0.0..=self.cutoff_k).contains(&k) {
            self.normalization * self.profile.value(k)
        } else {
            0.0
        }
    }

    fn radial_rule(&self) -> Composite {
        Composite::new(0.0, self.cutoff_k, 32, 10)
    }

    /// `4π ∫ g(k) k^{2+p} dk`.
    pub fn radial_moment(&self, p: i32) -> f64 {
        4.0 * PI * self.radial_rule().integrate(|k| self.g(k) * k.powi(2 + p))
    }

    /// `‖g‖_{L¹(ℝ³)}`.
    pub fn l1_norm(&self) -> f64 {
        self.radial_moment(0)
    }

    pub fn is_normalized(&self) -> bool {
        ((2.0 / 3.0) * self.l1_norm() - 1.0).abs() <= NORM_TOL
    }

    /// `4π ∫ g(k) k² K(kr) dk` for a radial kernel `K`.
    fn hankel(&self, rule: &Composite, r: f64, kernel: fn(f64) -> f64) -> f64 {
        4.0 * PI * rule.integrate(|k| self.g(k) * k * k * kernel(k * r))
    }
}

/// `2/3 - 2 j₁(s)/s`: longitudinal part of `ω`.
fn ell_l(s: f64) -> f64 {
    if s < 0.1 {
        let s2 = s * s;
        s2 * (1.0 / 15.0 - s2 * (1.0 / 420.0 - s2 / 22680.0))
    } else {
        let j1s = (s.sin() - s * s.cos()) / (s * s * s);
        2.0 / 3.0 - 2.0 * j1s
    }
}

/// `2/3 - (j₀(s) - j₁(s)/s)`: transverse part of `ω`.
fn ell_n(s: f64) -> f64 {
    if s < 0.1 {
        let s2 = s * s;
        s2 * (2.0 / 15.0 - s2 * (1.0 / 140.0 - s2 / 5670.0))
    } else {
        let j0 = s.sin() / s;
        let j1s = (s.sin() - s * s.cos()) / (s * s * s);
        2.0 / 3.0 - (j0 - j1s)
    }
}

/// Evaluation of `ω = I - C` at a point.
pub trait OmegaField: Sync {
    fn omega(&self, y: &Vector3<f64>) -> Matrix3<f64>;
}

/// `C ≡ 0`, i.e. `ω ≡ I`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Uncorrelated;

impl OmegaField for Uncorrelated {
    fn omega(&self, _y: &Vector3<f64>) -> Matrix3<f64> {
        Matrix3::identity()
    }
}

/// Radial representation `C(x) = C_N(r) I + (C_L(r) - C_N(r)) x̂x̂ᵀ`, tabulated.
#[derive(Clone, Debug)]
pub struct IsotropicCovariance {
    dr: f64,
    r_max: f64,
    /// `ω_L(r)/r²` on the table nodes.
    omega_l: Vec<f64>,
    /// `ω_N(r)/r²` on the table nodes.
    omega_n: Vec<f64>,
    r_series: f64,
    moments: [f64; 3],
    correlation_length: f64,
}

impl IsotropicCovariance {
    pub fn new(spec: &SpectralDensity) -> Self {
        let r_max = spec.profile.decay_range(spec.cutoff_k);
        let dr = r_max / TABLE_POINTS as f64;
        let panels = 32 + (spec.cutoff_k * r_max / PI).ceil() as usize;
        let rule = Composite::new(0.0, spec.cutoff_k, panels, 10);
        let (omega_l, omega_n): (Vec<f64>, Vec<f64>) = (0..=TABLE_POINTS)
            .into_par_iter()
            .map(|i| {
                let r = i as f64 * dr;
                (spec.hankel(&rule, r, ell_l), spec.hankel(&rule, r, ell_n))
            })
            .unzip();
        let moments = [spec.radial_moment(2), spec.radial_moment(4), spec.radial_moment(6)];
        let reduce = |v: Vec<f64>, c0: f64| -> Vec<f64> {
            v.iter()
                .enumerate()
                .map(|(i, w)| if i == 0 { c0 } else { w / (i as f64 * dr).powi(2) })
                .collect()
        };
        let mut correlation_length = 0.0;
        for i in (0..=TABLE_POINTS).rev() {
            let cl = 1.0 - omega_l[i];
            let cn = 1.0 - omega_n[i];
            if cl.abs().max(cn.abs()) >= DECAY_THRESHOLD {
                correlation_length = (i + 1) as f64 * dr;
                break;
            }
        }
        Self {
            dr,
            r_max,
            omega_l: reduce(omega_l, moments[0] / 15.0),
            omega_n: reduce(omega_n, 2.0 * moments[0] / 15.0),
            r_series: 0.05 / spec.cutoff_k,
            moments,
            correlation_length,
        }
    }

    /// Longitudinal and transverse parts `(ω_L(r), ω_N(r))`.
    pub fn omega_radial(&self, r: f64) -> (f64, f64) {
        if r < self.r_series {
            let r2 = r * r;
            let [m2, m4, m6] = self.moments;
            let wl = r2 * (m2 / 15.0 - r2 * (m4 / 420.0 - r2 * m6 / 22680.0));
            let wn = r2 * (2.0 * m2 / 15.0 - r2 * (m4 / 140.0 - r2 * m6 / 5670.0));
            return (wl, wn);
        }
        if r >= self.r_max {
            return (1.0, 1.0);
        }
        let t = r / self.dr;
        let i = (t as usize).clamp(1, TABLE_POINTS - 2);
        let f = t - i as f64;
        let cubic = |v: &[f64]| {
            let (p0, p1, p2, p3) = (v[i - 1], v[i], v[i + 1], v[i + 2]);
            let c1 = 0.5 * (p2 - p0);
            let c2 = p0 - 2.5 * p1 + 2.0 * p2 - 0.5 * p3;
            let c3 = 0.5 * (p3 - p0) + 1.5 * (p1 - p2);
            r * r * (p1 + f * (c1 + f * (c2 + f * c3)))
        };
        (cubic(&self.omega_l), cubic(&self.omega_n))
    }

    /// `(C_L(r), C_N(r))`.
    pub fn covariance_radial(&self, r: f64) -> (f64, f64) {
        let (wl, wn) = self.omega_radial(r);
        (1.0 - wl, 1.0 - wn)
    }

    pub fn covariance(&self, x: &Vector3<f64>) -> Matrix3<f64> {
        Matrix3::identity() - self.omega(x)
    }

    /// `Tr ω(x)` as a function of `|x|`.
    pub fn omega_trace(&self, r: f64) -> f64 {
        let (wl, wn) = self.omega_radial(r);
        wl + 2.0 * wn
    }

    /// Radius beyond which every entry of `C` stays below 1e-3.
    pub fn correlation_length(&self) -> f64 {
        self.correlation_length
    }

    /// Largest radius at which `C` is not treated as exactly zero.
    pub fn support_radius(&self) -> f64 {
        self.r_max
    }
}

impl OmegaField for IsotropicCovariance {
    fn omega(&self, y: &Vector3<f64>) -> Matrix3<f64> {
        let r = y.norm();
        let (wl, wn) = self.omega_radial(r);
        if r == 0.0 {
            return Matrix3::zeros();
        }
        let e = y / r;
        Matrix3::identity() * wn + (e * e.transpose()) * (wl - wn)
    }
}

/// Covariance model with a finite set of quadrature modes.
#[derive(Clone, Debug)]
pub struct CovarianceModel {
    pub spectral: SpectralDensity,
    pub wavevectors: Vec<Vector3<f64>>,
    /// Quadrature volume `Δ³k` attached to each mode.
    pub dk3: Vec<f64>,
    pub projectors: Vec<Matrix3<f64>>,
    pub isotropic: IsotropicCovariance,
}

/// Projector onto the plane orthogonal to `k`.
pub fn projector(k: &Vector3<f64>) -> Matrix3<f64> {
    let kh = k.normalize();
    Matrix3::identity() - kh * kh.transpose()
}

fn project(k: &Vector3<f64>, v: Vector3<f64>) -> Vector3<f64> {
    let kh = k.normalize();
    let w = v - kh * kh.dot(&v);
    w - kh * kh.dot(&w)
}

/// Inverse of the radial distribution with density `∝ k² g(k)` on [0, K].
struct RadialSampler {
    edges: Vec<f64>,
    cdf: Vec<f64>,
    rule: (Vec<f64>, Vec<f64>),
}

impl RadialSampler {
    const CELLS: usize = 1024;

    fn new(spec: &SpectralDensity) -> Self {
        let rule = crate::quadrature::gauss_legendre(10);
        let h = spec.cutoff_k / Self::CELLS as f64;
        let edges: Vec<f64> = (0..=Self::CELLS).map(|i| i as f64 * h).collect();
        let mut s = Self { edges, cdf: vec![0.0; Self::CELLS + 1], rule };
        for i in 0..Self::CELLS {
            let part = s.partial(spec, s.edges[i], s.edges[i + 1]);
            s.cdf[i + 1] = s.cdf[i] + part;
        }
        s
    }

    fn partial(&self, spec: &SpectralDensity, a: f64, b: f64) -> f64 {
        let (x, w) = &self.rule;
        let half = 0.5 * (b - a);
        x.iter()
            .zip(w)
            .map(|(x, w)| {
                let k = a + half * (x + 1.0);
                half * w * spec.g(k) * k * k
            })
            .sum()
    }

    fn sample(&self, spec: &SpectralDensity, u: f64) -> f64 {
        let target = u * self.cdf[Self::CELLS];
        let i = match self.cdf.partition_point(|&c| c <= target) {
            0 => 0,
            p => (p - 1).min(Self::CELLS - 1),
        };
        let (mut lo, mut hi) = (self.edges[i], self.edges[i + 1]);
        let base = self.cdf[i];
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if base + self.partial(spec, self.edges[i], mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Plastic-number Kronecker increments for a 3D low-discrepancy sequence.
fn kronecker_alpha() -> [f64; 3] {
    let phi3: f64 = 1.220_744_084_605_759_6;
    [1.0 / phi3, 1.0 / (phi3 * phi3), 1.0 / (phi3 * phi3 * phi3)]
}

/// Build the mode quadrature for `spec`.
pub fn build_covariance_model(spec: &SpectralDensity, n_modes: usize, rng_seed: u64) -> Result<CovarianceModel> {
    if n_modes < MIN_MODES {
        return Err(Error::TooFewModes { got: n_modes, min: MIN_MODES });
    }
    if !spec.is_normalized() {
        return Err(Error::NotNormalized((2.0 / 3.0) * spec.l1_norm()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let shift: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let alpha = kronecker_alpha();
    let sampler = RadialSampler::new(spec);
    let norm = spec.l1_norm();
    let mut wavevectors = Vec::with_capacity(n_modes);
    let mut dk3 = Vec::with_capacity(n_modes);
    for j in 0..n_modes {
        let u: Vec<f64> = (0..3).map(|d| (shift[d] + (j + 1) as f64 * alpha[d]).fract()).collect();
        let k = sampler.sample(spec, u[0]).max(1e-12 * spec.cutoff_k);
        let cos_t = 2.0 * u[1] - 1.0;
        let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
        let phi = 2.0 * PI * u[2];
        wavevectors.push(Vector3::new(k * sin_t * phi.cos(), k * sin_t * phi.sin(), k * cos_t));
        dk3.push(norm / (n_modes as f64 * spec.g(k)));
    }
    let projectors = wavevectors.iter().map(projector).collect();
    Ok(CovarianceModel {
        spectral: spec.clone(),
        wavevectors,
        dk3,
        projectors,
        isotropic: IsotropicCovariance::new(spec),
    })
}

impl CovarianceModel {
    pub fn n_modes(&self) -> usize {
        self.wavevectors.len()
    }

    /// `g(k_j) Δ³k_j`.
    pub fn mode_weight(&self, j: usize) -> f64 {
        self.spectral.g(self.wavevectors[j].norm()) * self.dk3[j]
    }

    /// `Σ_j g(k_j) Δ³k_j`, the quadrature of `‖g‖`.
    pub fn weight_sum(&self) -> f64 {
        (0..self.n_modes()).map(|j| self.mode_weight(j)).sum()
    }

    /// Mode-sum covariance `Σ_j g(k_j)Δ³k P(k_j) cos(k_j·x)`.
    pub fn evaluate_covariance(&self, x: &Vector3<f64>) -> Matrix3<f64> {
        let mut c = Matrix3::zeros();
        for (j, (k, p)) in self.wavevectors.iter().zip(&self.projectors).enumerate() {
            c += p * (self.mode_weight(j) * k.dot(x).cos());
        }
        c
    }

    /// `I - C(x)` from the mode sum.
    pub fn evaluate_omega(&self, x: &Vector3<f64>) -> Matrix3<f64> {
        Matrix3::identity() - self.evaluate_covariance(x)
    }

    pub fn correlation_length(&self) -> f64 {
        self.isotropic.correlation_length()
    }

    /// Write `r, C11, C22, C33, trace` for `x = r e₁` using the mode sum.
    pub fn write_table_csv(&self, path: &Path, radii: &[f64]) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["r", "C11", "C22", "C33", "trace"])?;
        for &r in radii {
            let c = self.evaluate_covariance(&Vector3::new(r, 0.0, 0.0));
            w.write_record(&[r, c[(0, 0)], c[(1, 1)], c[(2, 2)], c.trace()].map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

impl OmegaField for CovarianceModel {
    fn omega(&self, y: &Vector3<f64>) -> Matrix3<f64> {
        self.evaluate_omega(y)
    }
}

/// One Gaussian increment of the common noise over a time step `dt`,
/// evaluated at `x` as `√dt Σ_j (a_j cos(k_j·x s) + b_j sin(k_j·x s))`.
#[derive(Clone, Debug)]
pub struct FieldRealization {
    /// Per mode `(k_j, a_j, b_j)`.
    pub modes: Vec<(Vector3<f64>, Vector3<f64>, Vector3<f64>)>,
    /// Multiplier applied to the spatial argument.
    pub scale: f64,
    pub dt: f64,
    soa: [Vec<f64>; 9],
}

impl FieldRealization {
    /// Build from raw modes; amplitudes are projected onto `k⊥`.
    pub fn from_modes(modes: Vec<(Vector3<f64>, Vector3<f64>, Vector3<f64>)>, scale: f64, dt: f64) -> Self {
        let modes: Vec<_> = modes.into_iter().map(|(k, a, b)| (k, project(&k, a), project(&k, b))).collect();
        let sdt = dt.max(0.0).sqrt();
        let mut soa: [Vec<f64>; 9] = Default::default();
        for (k, a, b) in &modes {
            for d in 0..3 {
                soa[d].push(k[d] * scale);
                soa[3 + d].push(a[d] * sdt);
                soa[6 + d].push(b[d] * sdt);
            }
        }
        Self { modes, scale, dt, soa }
    }

    pub fn evaluate(&self, x: &Vector3<f64>) -> Vector3<f64> {
        let [kx, ky, kz, ax, ay, az, bx, by, bz] = &self.soa;
        let (mut ux, mut uy, mut uz) = (0.0, 0.0, 0.0);
        for j in 0..kx.len() {
            let (s, c) = (kx[j] * x[0] + ky[j] * x[1] + kz[j] * x[2]).sin_cos();
            ux += ax[j] * c + bx[j] * s;
            uy += ay[j] * c + by[j] * s;
            uz += az[j] * c + bz[j] * s;
        }
        Vector3::new(ux, uy, uz)
    }

    /// Maximum of `|k·v|/|k|` over stored amplitudes.
    pub fn max_divergence_defect(&self) -> f64 {
        self.modes
            .iter()
            .map(|(k, a, b)| {
                let kh = k.normalize();
                kh.dot(a).abs().max(kh.dot(b).abs())
            })
            .fold(0.0, f64::max)
    }
}

/// Draw one increment of the common noise.
pub fn sample_increment<R: Rng + ?Sized>(model: &CovarianceModel, dt: f64, scale: f64, rng: &mut R) -> FieldRealization {
    let mut modes = Vec::with_capacity(model.n_modes());
    for (j, k) in model.wavevectors.iter().enumerate() {
        let amp = model.mode_weight(j).sqrt();
        let mut draw = || Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        let a: Vector3<f64> = draw() * amp;
        let b: Vector3<f64> = draw() * amp;
        modes.push((*k, a, b));
    }
    FieldRealization::from_modes(modes, scale, dt)
}

/// Evaluate an increment at many points.
pub fn evaluate_field(real: &FieldRealization, points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    if points.len() < 64 {
        points.iter().map(|p| real.evaluate(p)).collect()
    } else {
        points.par_iter().map(|p| real.evaluate(p)).collect()
    }
}

/// Physical scales entering the structure function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowScales {
    pub u_eta: f64,
    pub eta: f64,
    pub big_l: f64,
}

/// `2 u_η² Tr(I - C(L r/η))`, independent of direction by isotropy.
pub fn structure_function(model: &CovarianceModel, r: f64, scales: &FlowScales) -> f64 {
    2.0 * scales.u_eta * scales.u_eta * model.isotropic.omega_trace(scales.big_l * r / scales.eta)
}

/// Write a covariance table using the radial form.
pub fn write_isotropic_table<W: Write>(iso: &IsotropicCovariance, out: W, radii: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["r", "C11", "C22", "C33", "trace"])?;
    for &r in radii {
        let (cl, cn) = iso.covariance_radial(r);
        w.write_record(&[r, cl, cn, cn, cl + 2.0 * cn].map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
