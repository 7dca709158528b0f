//! Annihilating particle system driven by common and idiosyncratic noise.

use std::path::Path;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::covariance::{evaluate_field, sample_increment, CovarianceModel};
use crate::density::{DensitySpec, InitialDensity};
use crate::error::{invalid, Error, Result};
use crate::histogram::{Histogram, HistogramGeometry};
use crate::kernel::{KernelTheta, ThetaProfile};
use crate::neighbors::pairs_within;

/// Upper bound on `max pair rate × dt`.
pub const MAX_RATE_DT: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    /// Enforce `N ε = 1`.
    #[default]
    #[serde(alias = "paper")]
    MeanFreePath,
    /// Any `ε`; used for regime experiments.
    Free,
}

/// Histogram recipe: bin side `bandwidth_c · N^{-1/5}` on `[-half_width, half_width]³`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramSpec {
    pub half_width: f64,
    pub bandwidth_c: f64,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self { half_width: 2.0, bandwidth_c: 1.0 }
    }
}

impl HistogramSpec {
    pub fn geometry(&self, n: usize) -> Result<HistogramGeometry> {
        HistogramGeometry::centered(self.half_width, self.bandwidth_c * (n as f64).powf(-0.2))
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n_particles: usize,
    pub eps_radius: f64,
    pub xi: f64,
    pub sigma: f64,
    pub sigma0: f64,
    pub r0: f64,
    pub dt: f64,
    pub t_end: f64,
    #[serde(default)]
    pub theta: ThetaProfile,
    #[serde(default)]
    pub f0: DensitySpec,
    pub seed: u64,
    #[serde(default)]
    pub scaling_mode: ScalingMode,
    #[serde(default = "default_true")]
    pub interaction: bool,
    #[serde(default)]
    pub histogram: HistogramSpec,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_particles: 1000,
            eps_radius: 1e-3,
            xi: 1.0,
            sigma: 0.2,
            sigma0: 0.2,
            r0: 1.0,
            dt: 1e-3,
            t_end: 0.5,
            theta: ThetaProfile::default(),
            f0: DensitySpec::default(),
            seed: 1,
            scaling_mode: ScalingMode::MeanFreePath,
            interaction: true,
            histogram: HistogramSpec::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return invalid("n_particles must be positive");
        }
        for (name, v) in [("eps_radius", self.eps_radius), ("xi", self.xi), ("dt", self.dt), ("sigma0", self.sigma0)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::NonPositive(name.into()));
            }
        }
        if !(self.sigma >= 0.0 && self.r0 >= 0.0) {
            return invalid("sigma and r0 must be non-negative");
        }
        if self.t_end < self.dt {
            return invalid("t_end must be at least dt");
        }
        if self.scaling_mode == ScalingMode::MeanFreePath {
            let p = self.n_particles as f64 * self.eps_radius;
            if (p - 1.0).abs() > 1e-9 {
                return invalid(format!("scaling_mode = mean_free_path requires N·eps_radius = 1, got {p}"));
            }
        }
        Ok(())
    }

    pub fn kernel(&self) -> Result<KernelTheta> {
        KernelTheta::new(self.theta)
    }

    /// `(R₀/N) ε⁻³ max θ`, the largest possible pair rate.
    pub fn max_pair_rate(&self) -> Result<f64> {
        Ok(self.r0 / self.n_particles as f64 * self.kernel()?.max_value() / self.eps_radius.powi(3))
    }

    pub fn n_steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }
}

/// Independent random streams owned by one simulation.
#[derive(Clone, Debug, PartialEq)]
pub struct RngStreams {
    pub field: ChaCha8Rng,
    pub brownian: ChaCha8Rng,
    pub jumps: ChaCha8Rng,
}

impl RngStreams {
    fn stream(seed: u64, id: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(id);
        r
    }

    pub fn new(seed: u64) -> Self {
        Self { field: Self::stream(seed, 1), brownian: Self::stream(seed, 2), jumps: Self::stream(seed, 3) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSystemState {
    pub positions: Vec<Vector3<f64>>,
    pub alive: Vec<bool>,
    pub t: f64,
    pub rng_streams: RngStreams,
}

impl ParticleSystemState {
    pub fn n_alive(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }

    pub fn alive_indices(&self) -> Vec<usize> {
        (0..self.alive.len()).filter(|&i| self.alive[i]).collect()
    }
}

pub fn init_state(cfg: &SimConfig) -> Result<ParticleSystemState> {
    cfg.validate()?;
    let f0 = InitialDensity::new(cfg.f0)?;
    let mut rng = RngStreams::stream(cfg.seed, 0);
    let positions = (0..cfg.n_particles).map(|_| f0.sample(&mut rng)).collect();
    Ok(ParticleSystemState {
        positions,
        alive: vec![true; cfg.n_particles],
        t: 0.0,
        rng_streams: RngStreams::new(cfg.seed),
    })
}

/// One Euler-Maruyama step `x ← x + σ ΔW(ξx/ε) + σ₀ √dt ζ` for alive particles.
pub fn step_diffusion(state: &mut ParticleSystemState, cfg: &SimConfig, model: &CovarianceModel) {
    let idx = state.alive_indices();
    if cfg.sigma > 0.0 {
        let real = sample_increment(model, cfg.dt, cfg.xi / cfg.eps_radius, &mut state.rng_streams.field);
        let pts: Vec<Vector3<f64>> = idx.iter().map(|&i| state.positions[i]).collect();
        let dw = evaluate_field(&real, &pts);
        for (&i, w) in idx.iter().zip(&dw) {
            state.positions[i] += w * cfg.sigma;
        }
    }
    if cfg.sigma0 > 0.0 {
        let s = cfg.sigma0 * cfg.dt.sqrt();
        let rng = &mut state.rng_streams.brownian;
        for &i in &idx {
            let z = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
            state.positions[i] += z * s;
        }
    }
    state.t += cfg.dt;
}

/// Outcome of one coalescence step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CoalescenceStats {
    pub candidate_pairs: usize,
    pub annihilated_pairs: usize,
}

/// Pairwise annihilation with probability `1 - exp(-r_ij dt)` in a shuffled order.
pub fn step_coalescence(state: &mut ParticleSystemState, cfg: &SimConfig) -> Result<CoalescenceStats> {
    let bound = cfg.max_pair_rate()? * cfg.dt;
    if bound > MAX_RATE_DT {
        return Err(Error::DtTooLarge(bound));
    }
    if cfg.r0 == 0.0 {
        return Ok(CoalescenceStats::default());
    }
    let kernel = cfg.kernel()?;
    let idx = state.alive_indices();
    let pts: Vec<Vector3<f64>> = idx.iter().map(|&i| state.positions[i]).collect();
    let scale = cfg.r0 / cfg.n_particles as f64;
    let mut cand: Vec<(usize, usize, f64)> = pairs_within(&pts, cfg.eps_radius)
        .into_iter()
        .filter_map(|(a, b)| {
            let r = scale * kernel.scaled_value(&(pts[a] - pts[b]), cfg.eps_radius);
            (r > 0.0).then_some((idx[a], idx[b], r))
        })
        .collect();
    let rng = &mut state.rng_streams.jumps;
    cand.shuffle(rng);
    let mut stats = CoalescenceStats { candidate_pairs: cand.len(), annihilated_pairs: 0 };
    for (i, j, r) in cand {
        let u: f64 = rng.random();
        if state.alive[i] && state.alive[j] && u < -(-r * cfg.dt).exp_m1() {
            state.alive[i] = false;
            state.alive[j] = false;
            stats.annihilated_pairs += 1;
        }
    }
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalSeries {
    pub times: Vec<f64>,
    pub masses: Vec<f64>,
    pub snapshots: Vec<Histogram>,
    /// Number of alive pairs closer than ε at each step.
    pub pair_counts: Vec<usize>,
    pub annihilated_pairs: usize,
}

impl EmpiricalSeries {
    /// Mean number of annihilation events per initial particle.
    pub fn annihilations_per_particle(&self, n: usize) -> f64 {
        2.0 * self.annihilated_pairs as f64 / n as f64
    }

    pub fn write(&self, csv_path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(csv_path)?;
        w.write_record(["t", "alive_fraction"])?;
        for (t, m) in self.times.iter().zip(&self.masses) {
            w.write_record(&[t.to_string(), m.to_string()])?;
        }
        w.flush()?;
        for (k, h) in self.snapshots.iter().enumerate() {
            h.write(&snapshot_path(csv_path, k))?;
        }
        Ok(())
    }
}

/// Read a `(t, alive_fraction)` curve written by [`EmpiricalSeries::write`].
pub fn read_mass_curve(csv_path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut r = csv::Reader::from_path(csv_path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Existing snapshot files next to a series CSV, in order.
pub fn snapshot_files(path: &Path) -> Vec<std::path::PathBuf> {
    (0..).map(|k| snapshot_path(path, k)).take_while(|p| p.exists()).collect()
}

/// `<stem>_snap<k>.csv` next to `path`.
pub fn snapshot_path(path: &Path, k: usize) -> std::path::PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("series");
    path.with_file_name(format!("{stem}_snap{k}.csv"))
}

/// Step indices at which snapshots requested at `times` are taken.
pub fn snapshot_steps(times: &[f64], dt: f64, n_steps: usize) -> Result<Vec<usize>> {
    times
        .iter()
        .map(|&t| {
            if !(t >= 0.0) {
                return invalid(format!("snapshot time {t} is negative"));
            }
            let k = (t / dt).round() as usize;
            if k > n_steps {
                return invalid(format!("snapshot time {t} beyond the horizon"));
            }
            Ok(k)
        })
        .collect()
}

/// Alternate diffusion and coalescence up to `t_end`.
pub fn run(cfg: &SimConfig, model: &CovarianceModel, snapshot_times: &[f64]) -> Result<EmpiricalSeries> {
    let mut state = init_state(cfg)?;
    let n_steps = cfg.n_steps();
    let snaps = snapshot_steps(snapshot_times, cfg.dt, n_steps)?;
    let geometry = cfg.histogram.geometry(cfg.n_particles)?;
    let n = cfg.n_particles;
    let mut series = EmpiricalSeries {
        times: vec![0.0],
        masses: vec![1.0],
        snapshots: Vec::new(),
        pair_counts: Vec::new(),
        annihilated_pairs: 0,
    };
    let mut slots: Vec<Option<Histogram>> = vec![None; snaps.len()];
    let take = |state: &ParticleSystemState, step: usize, slots: &mut [Option<Histogram>]| {
        for (k, _) in snaps.iter().enumerate().filter(|(_, &s)| s == step) {
            let pts: Vec<&Vector3<f64>> = state.alive_indices().into_iter().map(|i| &state.positions[i]).collect();
            slots[k] = Some(Histogram::from_points(geometry.clone(), pts, n, step as f64 * cfg.dt));
        }
    };
    take(&state, 0, &mut slots);
    for step in 1..=n_steps {
        step_diffusion(&mut state, cfg, model);
        if cfg.interaction {
            let st = step_coalescence(&mut state, cfg)?;
            series.pair_counts.push(st.candidate_pairs);
            series.annihilated_pairs += st.annihilated_pairs;
        }
        series.times.push(step as f64 * cfg.dt);
        series.masses.push(state.n_alive() as f64 / n as f64);
        take(&state, step, &mut slots);
    }
    series.snapshots = slots.into_iter().flatten().collect();
    Ok(series)
}
