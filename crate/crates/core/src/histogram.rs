//! Cubic-bin density histograms shared by the particle and PDE routes.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramGeometry {
    pub origin: [f64; 3],
    pub bin: f64,
    pub dims: [usize; 3],
}

impl HistogramGeometry {
    /// Box `[-W, W]³` (rounded up to whole bins) with side `bin`.
    pub fn centered(half_width: f64, bin: f64) -> Result<Self> {
        if !(bin > 0.0 && half_width > 0.0) {
            return invalid("histogram bin and half width must be positive");
        }
        let n = (2.0 * half_width / bin).ceil() as usize;
        let o = -0.5 * n as f64 * bin;
        Ok(Self { origin: [o; 3], bin, dims: [n; 3] })
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bin_volume(&self) -> f64 {
        self.bin.powi(3)
    }

    pub fn linear(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + self.dims[0] * (iy + self.dims[1] * iz)
    }

    pub fn unravel(&self, i: usize) -> [usize; 3] {
        let ix = i % self.dims[0];
        let iy = (i / self.dims[0]) % self.dims[1];
        [ix, iy, i / (self.dims[0] * self.dims[1])]
    }

    pub fn index_of(&self, x: &Vector3<f64>) -> Option<usize> {
        let mut idx = [0usize; 3];
        for d in 0..3 {
            let t = ((x[d] - self.origin[d]) / self.bin).floor();
            if t < 0.0 || t >= self.dims[d] as f64 {
                return None;
            }
            idx[d] = t as usize;
        }
        Some(self.linear(idx[0], idx[1], idx[2]))
    }

    pub fn lower_corner(&self, i: usize) -> Vector3<f64> {
        let [ix, iy, iz] = self.unravel(i);
        Vector3::new(
            self.origin[0] + ix as f64 * self.bin,
            self.origin[1] + iy as f64 * self.bin,
            self.origin[2] + iz as f64 * self.bin,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub geometry: HistogramGeometry,
    pub t: f64,
    pub density: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    geometry: HistogramGeometry,
    t: f64,
}

impl Histogram {
    pub fn zeros(geometry: HistogramGeometry, t: f64) -> Self {
        let n = geometry.len();
        Self { geometry, t, density: vec![0.0; n] }
    }

    /// Counts divided by `n_total · bin³`, so total mass is the surviving fraction.
    pub fn from_points<'a>(
        geometry: HistogramGeometry,
        points: impl IntoIterator<Item = &'a Vector3<f64>>,
        n_total: usize,
        t: f64,
    ) -> Self {
        let mut h = Self::zeros(geometry, t);
        let w = 1.0 / (n_total as f64 * h.geometry.bin_volume());
        for p in points {
            if let Some(i) = h.geometry.index_of(p) {
                h.density[i] += w;
            }
        }
        h
    }

    pub fn mass(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.geometry.bin_volume()
    }

    pub fn l1_distance(&self, other: &Histogram) -> Result<f64> {
        if self.geometry != other.geometry {
            return invalid("histogram geometries differ");
        }
        let s: f64 = self.density.iter().zip(&other.density).map(|(a, b)| (a - b).abs()).sum();
        Ok(s * self.geometry.bin_volume())
    }

    pub fn sidecar_path(csv_path: &Path) -> PathBuf {
        csv_path.with_extension("json")
    }

    /// Writes `ix,iy,iz,density` rows and a JSON sidecar with the geometry.
    pub fn write(&self, csv_path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(csv_path)?;
        w.write_record(["ix", "iy", "iz", "density"])?;
        for (i, v) in self.density.iter().enumerate() {
            let [ix, iy, iz] = self.geometry.unravel(i);
            w.write_record(&[ix.to_string(), iy.to_string(), iz.to_string(), v.to_string()])?;
        }
        w.flush()?;
        let side = Sidecar { geometry: self.geometry.clone(), t: self.t };
        std::fs::write(Self::sidecar_path(csv_path), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn read(csv_path: &Path) -> Result<Self> {
        let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(Self::sidecar_path(csv_path))?)?;
        let mut h = Self::zeros(side.geometry, side.t);
        let mut r = csv::Reader::from_path(csv_path)?;
        for rec in r.deserialize() {
            let (ix, iy, iz, v): (usize, usize, usize, f64) = rec?;
            if ix >= h.geometry.dims[0] || iy >= h.geometry.dims[1] || iz >= h.geometry.dims[2] {
                return invalid(format!("bin ({ix},{iy},{iz}) outside the declared geometry"));
            }
            let i = h.geometry.linear(ix, iy, iz);
            h.density[i] = v;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_through_csv() {
        let g = HistogramGeometry::centered(1.0, 0.5).unwrap();
        let pts = [Vector3::new(0.1, 0.2, -0.3), Vector3::new(-0.9, 0.9, 0.0), Vector3::new(5.0, 0.0, 0.0)];
        let h = Histogram::from_points(g, pts.iter(), 4, 0.25);
        assert!((h.mass() - 0.5).abs() < 1e-12);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        h.write(&p).unwrap();
        let back = Histogram::read(&p).unwrap();
        assert_eq!(back, h);
        assert_eq!(h.l1_distance(&back).unwrap(), 0.0);
    }

    #[test]
    fn index_and_corner_agree() {
        let g = HistogramGeometry::centered(2.0, 0.3).unwrap();
        for i in [0, 17, g.len() - 1] {
            let c = g.lower_corner(i) + Vector3::repeat(0.5 * g.bin);
            assert_eq!(g.index_of(&c), Some(i));
        }
    }
}
