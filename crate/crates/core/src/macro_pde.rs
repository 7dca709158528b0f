//! Limit equation `∂t f = D Δf − R̄ f²` on a periodic box.

use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{DensitySpec, InitialDensity};
use crate::error::{invalid, Error, Result};
use crate::histogram::{Histogram, HistogramGeometry};
use crate::particles::snapshot_path;

/// Sub-samples per axis when averaging a continuous function over a cell or bin.
const SUBSAMPLES: usize = 4;

/// Cell-centred periodic grid on `[-L, L]³`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeriodicGrid {
    pub half_width: f64,
    pub cells: usize,
}

impl Default for PeriodicGrid {
    fn default() -> Self {
        Self { half_width: 3.0, cells: 64 }
    }
}

impl PeriodicGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.half_width > 0.0) {
            return Err(Error::NonPositive("half_width".into()));
        }
        if self.cells < 4 {
            return invalid("periodic grid needs at least 4 cells per axis");
        }
        Ok(())
    }

    pub fn h(&self) -> f64 {
        2.0 * self.half_width / self.cells as f64
    }

    pub fn len(&self) -> usize {
        self.cells.pow(3)
    }

    pub fn is_empty(&self) -> bool {
        self.cells == 0
    }

    pub fn cell_volume(&self) -> f64 {
        self.h().powi(3)
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.cells * (j + self.cells * k)
    }

    pub fn ijk(&self, idx: usize) -> [usize; 3] {
        let n = self.cells;
        [idx % n, (idx / n) % n, idx / (n * n)]
    }

    pub fn center(&self, idx: usize) -> Vector3<f64> {
        let h = self.h();
        let c = self.ijk(idx);
        Vector3::new(
            -self.half_width + (c[0] as f64 + 0.5) * h,
            -self.half_width + (c[1] as f64 + 0.5) * h,
            -self.half_width + (c[2] as f64 + 0.5) * h,
        )
    }

    pub fn integrate(&self, f: &[f64]) -> f64 {
        self.cell_volume() * f.iter().sum::<f64>()
    }

    /// Largest stable explicit step `h²/(6D)`.
    pub fn cfl_limit(&self, diffusivity: f64) -> f64 {
        self.h() * self.h() / (6.0 * diffusivity)
    }

    /// Periodic trilinear interpolation of a cell-centred field.
    pub fn interpolate(&self, f: &[f64], x: &Vector3<f64>) -> f64 {
        let n = self.cells as isize;
        let h = self.h();
        let mut base = [0isize; 3];
        let mut t = [0.0; 3];
        for d in 0..3 {
            let u = (x[d] + self.half_width) / h - 0.5;
            let fl = u.floor();
            base[d] = fl as isize;
            t[d] = u - fl;
        }
        let wrap = |v: isize| v.rem_euclid(n) as usize;
        let mut acc = 0.0;
        for c in 0..8usize {
            let o = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
            let w: f64 = (0..3).map(|d| if o[d] == 1 { t[d] } else { 1.0 - t[d] }).product();
            if w != 0.0 {
                let idx = self.index(
                    wrap(base[0] + o[0] as isize),
                    wrap(base[1] + o[1] as isize),
                    wrap(base[2] + o[2] as isize),
                );
                acc += w * f[idx];
            }
        }
        acc
    }

    /// True for cells on a face of the box.
    pub fn is_face(&self, idx: usize) -> bool {
        self.ijk(idx).iter().any(|&c| c == 0 || c + 1 == self.cells)
    }

    /// Cell averages of `f` by midpoint sub-sampling.
    pub fn cell_averages(&self, f: impl Fn(&Vector3<f64>) -> f64 + Sync) -> Vec<f64> {
        let h = self.h();
        let s = SUBSAMPLES;
        (0..self.len())
            .into_par_iter()
            .map(|idx| {
                let c = self.center(idx);
                let mut acc = 0.0;
                for a in 0..s {
                    for b in 0..s {
                        for e in 0..s {
                            let off = |k: usize| ((k as f64 + 0.5) / s as f64 - 0.5) * h;
                            acc += f(&(c + Vector3::new(off(a), off(b), off(e))));
                        }
                    }
                }
                acc / (s * s * s) as f64
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MacroConfig {
    pub diffusivity: f64,
    pub rbar: f64,
    #[serde(default)]
    pub f0: DensitySpec,
    #[serde(default)]
    pub grid: PeriodicGrid,
    /// Defaults to 0.9 of the explicit stability limit.
    #[serde(default)]
    pub dt: Option<f64>,
    pub t_end: f64,
    /// Defaults to `[t_end]`.
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
    /// Keep the full field every this many steps (for weak residuals).
    #[serde(default)]
    pub record_every: Option<usize>,
}

impl Default for MacroConfig {
    fn default() -> Self {
        Self {
            diffusivity: 0.5,
            rbar: 1.0,
            f0: DensitySpec::default(),
            grid: PeriodicGrid::default(),
            dt: None,
            t_end: 0.5,
            snapshot_times: Vec::new(),
            record_every: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MacroProblem {
    pub diffusivity: f64,
    pub rbar: f64,
    pub grid: PeriodicGrid,
    pub f0: Vec<f64>,
    pub dt: f64,
    pub steps: usize,
    pub snapshot_times: Vec<f64>,
    pub record_every: Option<usize>,
}

impl MacroProblem {
    /// Initial data are cell averages of `f0`, rescaled to unit grid mass.
    pub fn new(cfg: &MacroConfig) -> Result<Self> {
        cfg.grid.validate()?;
        let density = InitialDensity::new(cfg.f0)?;
        if density.support_radius() >= cfg.grid.half_width {
            return invalid("initial density support does not fit in the periodic box");
        }
        let mut f0 = cfg.grid.cell_averages(|x| density.value(x));
        let mass = cfg.grid.integrate(&f0);
        f0.iter_mut().for_each(|v| *v /= mass);
        Self::from_field(cfg.grid, f0, cfg.diffusivity, cfg.rbar, cfg.dt, cfg.t_end, &cfg.snapshot_times, cfg.record_every)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_field(
        grid: PeriodicGrid,
        f0: Vec<f64>,
        diffusivity: f64,
        rbar: f64,
        dt: Option<f64>,
        t_end: f64,
        snapshot_times: &[f64],
        record_every: Option<usize>,
    ) -> Result<Self> {
        grid.validate()?;
        if f0.len() != grid.len() {
            return invalid(format!("initial field has {} cells, grid has {}", f0.len(), grid.len()));
        }
        if !(diffusivity > 0.0) {
            return Err(Error::NonPositive("diffusivity".into()));
        }
        if !(rbar >= 0.0) {
            return invalid("rbar must be non-negative");
        }
        if !(t_end > 0.0) {
            return Err(Error::NonPositive("t_end".into()));
        }
        if let Some(v) = f0.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::NegativeDensity(*v));
        }
        let mass = grid.integrate(&f0);
        if (mass - 1.0).abs() > 1e-9 {
            return invalid(format!("initial density must have unit mass, got {mass}"));
        }
        let limit = grid.cfl_limit(diffusivity);
        let target = dt.unwrap_or(0.9 * limit);
        if !(target > 0.0) {
            return Err(Error::NonPositive("dt".into()));
        }
        let steps = (t_end / target - 1e-9).ceil().max(1.0) as usize;
        let dt = t_end / steps as f64;
        if dt > limit * (1.0 + 1e-12) {
            return Err(Error::Cfl { dt, limit });
        }
        let mut snaps: Vec<f64> = if snapshot_times.is_empty() { vec![t_end] } else { snapshot_times.to_vec() };
        if snaps.iter().any(|&t| !(0.0..=t_end * (1.0 + 1e-12)).contains(&t)) {
            return invalid("snapshot times must lie in [0, t_end]");
        }
        snaps.sort_by(f64::total_cmp);
        if record_every == Some(0) {
            return invalid("record_every must be positive");
        }
        Ok(Self { diffusivity, rbar, grid, f0, dt, steps, snapshot_times: snaps, record_every })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub t: f64,
    pub values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MassRecord {
    pub t: f64,
    pub mass: f64,
    /// `∫ f²`.
    pub square: f64,
}

#[derive(Clone, Debug)]
pub struct MacroSolution {
    pub grid: PeriodicGrid,
    pub diffusivity: f64,
    pub rbar: f64,
    pub dt: f64,
    pub snapshots: Vec<Field>,
    /// One entry per step, including `t = 0`.
    pub history: Vec<MassRecord>,
    /// Fields every `record_every` steps, starting at `t = 0`.
    pub records: Vec<Field>,
    /// Largest face value over the run divided by the initial peak.
    pub boundary_ratio: f64,
}

impl MacroSolution {
    /// `|M(T) − M(0) + R̄ ∫₀ᵀ∫f²| / (M(0) T)` with the trapezoid rule in time.
    pub fn mass_balance_defect(&self) -> f64 {
        let h = &self.history;
        let (first, last) = (h[0], h[h.len() - 1]);
        let loss: f64 = h.windows(2).map(|w| 0.5 * (w[1].t - w[0].t) * (w[0].square + w[1].square)).sum();
        (last.mass - first.mass + self.rbar * loss).abs() / (first.mass * (last.t - first.t))
    }

    pub fn snapshot_at(&self, t: f64) -> Option<&Field> {
        self.snapshots.iter().min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
    }

    /// Mass curve and projected snapshots in the particle series layout.
    pub fn write_series(&self, csv_path: &Path, geometry: &HistogramGeometry) -> Result<()> {
        let mut w = csv::Writer::from_path(csv_path)?;
        w.write_record(["t", "alive_fraction"])?;
        for r in &self.history {
            w.write_record(&[r.t.to_string(), r.mass.to_string()])?;
        }
        w.flush()?;
        for (k, s) in self.snapshots.iter().enumerate() {
            self.to_histogram(s, geometry.clone()).write(&snapshot_path(csv_path, k))?;
        }
        Ok(())
    }

    /// Bin averages of a field on a histogram geometry.
    pub fn to_histogram(&self, field: &Field, geometry: HistogramGeometry) -> Histogram {
        project(&self.grid, field, geometry)
    }
}

pub fn project(grid: &PeriodicGrid, field: &Field, geometry: HistogramGeometry) -> Histogram {
    let s = SUBSAMPLES;
    let density = (0..geometry.len())
        .into_par_iter()
        .map(|b| {
            let lo = geometry.lower_corner(b);
            let mut acc = 0.0;
            for i in 0..s {
                for j in 0..s {
                    for k in 0..s {
                        let off = |m: usize| (m as f64 + 0.5) / s as f64 * geometry.bin;
                        let x = lo + Vector3::new(off(i), off(j), off(k));
                        let inside = x.iter().all(|v| v.abs() < grid.half_width);
                        if inside {
                            acc += grid.interpolate(&field.values, &x);
                        }
                    }
                }
            }
            acc / (s * s * s) as f64
        })
        .collect();
    Histogram { geometry, t: field.t, density }
}

fn diffuse(grid: &PeriodicGrid, f: &[f64], out: &mut [f64], lambda: f64) {
    let n = grid.cells;
    out.par_chunks_mut(n * n).enumerate().for_each(|(k, plane)| {
        let km = (k + n - 1) % n;
        let kp = (k + 1) % n;
        for j in 0..n {
            let jm = (j + n - 1) % n;
            let jp = (j + 1) % n;
            for i in 0..n {
                let im = (i + n - 1) % n;
                let ip = (i + 1) % n;
                let c = f[grid.index(i, j, k)];
                let sum = f[grid.index(im, j, k)]
                    + f[grid.index(ip, j, k)]
                    + f[grid.index(i, jm, k)]
                    + f[grid.index(i, jp, k)]
                    + f[grid.index(i, j, km)]
                    + f[grid.index(i, j, kp)];
                plane[i + n * j] = c + lambda * (sum - 6.0 * c);
            }
        }
    });
}

/// Exact flow of `ḟ = −R̄ f²` over `tau`.
fn react(f: &mut [f64], rbar: f64, tau: f64) {
    if rbar == 0.0 {
        return;
    }
    f.par_iter_mut().for_each(|v| *v /= 1.0 + rbar * tau * *v);
}

fn mass_record(grid: &PeriodicGrid, f: &[f64], t: f64) -> MassRecord {
    let (m, q) = f.par_iter().map(|v| (*v, v * v)).reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let vol = grid.cell_volume();
    MassRecord { t, mass: vol * m, square: vol * q }
}

/// Strang splitting: half reaction, explicit diffusion, half reaction.
pub fn solve_macro(prob: &MacroProblem) -> Result<MacroSolution> {
    let grid = prob.grid;
    let dt = prob.dt;
    let lambda = prob.diffusivity * dt / (grid.h() * grid.h());
    let mut f = prob.f0.clone();
    let mut scratch = vec![0.0; f.len()];
    let peak = f.iter().cloned().fold(0.0, f64::max);
    let face_max = |f: &[f64]| (0..f.len()).filter(|&i| grid.is_face(i)).fold(0.0f64, |m, i| m.max(f[i]));
    let mut boundary = face_max(&f);
    let snap_steps: Vec<usize> = prob.snapshot_times.iter().map(|t| (t / dt).round() as usize).collect();
    let mut snapshots = Vec::new();
    let mut records = Vec::new();
    let mut history = vec![mass_record(&grid, &f, 0.0)];
    let keep = |step: usize, f: &[f64], snapshots: &mut Vec<Field>, records: &mut Vec<Field>| {
        let t = step as f64 * dt;
        for _ in snap_steps.iter().filter(|&&s| s == step) {
            snapshots.push(Field { t, values: f.to_vec() });
        }
        if let Some(every) = prob.record_every {
            if step % every == 0 {
                records.push(Field { t, values: f.to_vec() });
            }
        }
    };
    keep(0, &f, &mut snapshots, &mut records);
    for step in 1..=prob.steps {
        react(&mut f, prob.rbar, 0.5 * dt);
        diffuse(&grid, &f, &mut scratch, lambda);
        std::mem::swap(&mut f, &mut scratch);
        react(&mut f, prob.rbar, 0.5 * dt);
        let min = f.par_iter().cloned().reduce(|| f64::INFINITY, f64::min);
        if min < 0.0 {
            return Err(Error::NegativeDensity(min));
        }
        history.push(mass_record(&grid, &f, step as f64 * dt));
        boundary = boundary.max(face_max(&f));
        keep(step, &f, &mut snapshots, &mut records);
    }
    Ok(MacroSolution {
        grid,
        diffusivity: prob.diffusivity,
        rbar: prob.rbar,
        dt,
        snapshots,
        history,
        records,
        boundary_ratio: if peak > 0.0 { boundary / peak } else { 0.0 },
    })
}

/// Compactly supported `C²` test function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestFunction {
    Constant { value: f64 },
    /// `(1 − |x−c|²/r²)³₊`.
    Bump { center: [f64; 3], radius: f64 },
}

impl TestFunction {
    pub fn value(&self, x: &Vector3<f64>) -> f64 {
        match *self {
            TestFunction::Constant { value } => value,
            TestFunction::Bump { center, radius } => {
                let s = (x - Vector3::from(center)).norm_squared() / (radius * radius);
                if s >= 1.0 {
                    0.0
                } else {
                    (1.0 - s).powi(3)
                }
            }
        }
    }

    pub fn laplacian(&self, x: &Vector3<f64>) -> f64 {
        match *self {
            TestFunction::Constant { .. } => 0.0,
            TestFunction::Bump { center, radius } => {
                let r2 = radius * radius;
                let s = (x - Vector3::from(center)).norm_squared() / r2;
                if s >= 1.0 {
                    0.0
                } else {
                    (24.0 * (1.0 - s) * s - 18.0 * (1.0 - s) * (1.0 - s)) / r2
                }
            }
        }
    }

    /// A constant plus five bumps of radius `scale` around the origin.
    pub fn panel(scale: f64) -> Vec<TestFunction> {
        let h = 0.5 * scale;
        let q = 0.3 * scale;
        let mut v = vec![TestFunction::Constant { value: 1.0 }];
        for c in [[0.0, 0.0, 0.0], [h, 0.0, 0.0], [0.0, -h, 0.0], [0.0, 0.0, h], [q, q, -q]] {
            v.push(TestFunction::Bump { center: c, radius: scale });
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakResidual {
    /// `max_t |∫f(t)φ − ∫f₀φ − ∫₀ᵗ∫(D fΔφ − R̄f²φ)|` per test function.
    pub per_test: Vec<f64>,
    pub max: f64,
}

/// Weak-form defect of a recorded series, trapezoid rule in time. The series
/// must start at `t = 0`.
pub fn weak_residual(
    series: &[Field],
    grid: &PeriodicGrid,
    tests: &[TestFunction],
    diffusivity: f64,
    rbar: f64,
) -> Result<WeakResidual> {
    if series.is_empty() || series[0].t != 0.0 {
        return invalid("weak residual needs a series starting at t = 0");
    }
    let vol = grid.cell_volume();
    let centers: Vec<Vector3<f64>> = (0..grid.len()).map(|i| grid.center(i)).collect();
    let per_test = tests
        .par_iter()
        .map(|tf| {
            let phi: Vec<f64> = centers.iter().map(|x| tf.value(x)).collect();
            let lap: Vec<f64> = centers.iter().map(|x| tf.laplacian(x)).collect();
            let pair = |f: &[f64]| vol * f.iter().zip(&phi).map(|(a, b)| a * b).sum::<f64>();
            let rate = |f: &[f64]| {
                vol * f
                    .iter()
                    .zip(phi.iter().zip(&lap))
                    .map(|(v, (p, l))| diffusivity * v * l - rbar * v * v * p)
                    .sum::<f64>()
            };
            let p0 = pair(&series[0].values);
            let mut prev_rate = rate(&series[0].values);
            let mut acc = 0.0;
            let mut worst = 0.0f64;
            for w in series.windows(2) {
                let r = rate(&w[1].values);
                acc += 0.5 * (w[1].t - w[0].t) * (prev_rate + r);
                prev_rate = r;
                worst = worst.max((pair(&w[1].values) - p0 - acc).abs());
            }
            worst
        })
        .collect::<Vec<f64>>();
    let max = per_test.iter().cloned().fold(0.0, f64::max);
    Ok(WeakResidual { per_test, max })
}
