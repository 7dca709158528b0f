//! Graded Cartesian grids, energy-based finite-volume stencils and PCG.
//!
//! The operator is assembled cube by cube from the quadratic form
//! `∫ ∇uᵀ A ∇u`, so it is symmetric, conservative and positive semi-definite
//! whenever `A` is. For `A = I` it reduces to the 7-point Laplacian.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Sorted node coordinates along one axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub nodes: Vec<f64>,
}

impl Axis {
    /// Nodes `0, h0, .., ≥ core` then geometric growth by `stretch` up to `≥ radius`.
    pub fn graded(h0: f64, core: f64, radius: f64, stretch: f64) -> Result<Self> {
        if !(h0 > 0.0 && radius > h0 && stretch >= 1.0 && core >= 0.0) {
            return invalid(format!("bad axis spec h0={h0} core={core} radius={radius} stretch={stretch}"));
        }
        let mut nodes = vec![0.0];
        let n_core = (core.min(radius) / h0 - 1e-9).ceil().max(1.0) as usize;
        for i in 1..=n_core {
            nodes.push(i as f64 * h0);
        }
        let mut h = h0;
        while *nodes.last().unwrap() < radius * (1.0 - 1e-12) {
            h *= stretch;
            nodes.push(nodes.last().unwrap() + h);
        }
        Ok(Self { nodes })
    }

    pub fn uniform(lo: f64, hi: f64, cells: usize) -> Self {
        let h = (hi - lo) / cells as f64;
        Self { nodes: (0..=cells).map(|i| lo + i as f64 * h).collect() }
    }

    /// Reflect a half-axis starting at 0 onto the negative side.
    pub fn mirrored(&self) -> Self {
        let mut nodes: Vec<f64> = self.nodes.iter().rev().map(|x| -x).collect();
        nodes.extend(self.nodes.iter().skip(1));
        Self { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn spacing(&self, i: usize) -> f64 {
        self.nodes[i + 1] - self.nodes[i]
    }

    /// Length of the dual interval around node `i`.
    pub fn dual(&self, i: usize) -> f64 {
        let left = if i > 0 { self.spacing(i - 1) } else { 0.0 };
        let right = if i + 1 < self.len() { self.spacing(i) } else { 0.0 };
        0.5 * (left + right)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { nodes: self.nodes.iter().map(|x| x * s).collect() }
    }
}

/// Radially graded grid: fine core, geometric stretching outside.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub h0: f64,
    pub core_radius: f64,
    pub domain_radius: f64,
    pub stretch: f64,
    /// Solve on the positive octant using reflection symmetry.
    #[serde(default = "default_octant")]
    pub octant: bool,
}

fn default_octant() -> bool {
    true
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { h0: 1.0 / 16.0, core_radius: 1.25, domain_radius: 200.0, stretch: 1.12, octant: true }
    }
}

impl GridSpec {
    pub fn build(&self) -> Result<Grid3> {
        let half = Axis::graded(self.h0, self.core_radius, self.domain_radius, self.stretch)?;
        let axis = if self.octant { half } else { half.mirrored() };
        Ok(Grid3::new([axis.clone(), axis.clone(), axis], self.octant))
    }
}

/// Tensor-product node grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid3 {
    pub axes: [Axis; 3],
    /// Nodes on the coordinate planes are symmetry planes rather than boundaries.
    pub octant: bool,
    dims: [usize; 3],
}

impl Grid3 {
    pub fn new(axes: [Axis; 3], octant: bool) -> Self {
        let dims = [axes[0].len(), axes[1].len(), axes[2].len()];
        Self { axes, octant, dims }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn ijk(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        [i, j, idx / (self.dims[0] * self.dims[1])]
    }

    pub fn point(&self, idx: usize) -> Vector3<f64> {
        let [i, j, k] = self.ijk(idx);
        Vector3::new(self.axes[0].nodes[i], self.axes[1].nodes[j], self.axes[2].nodes[k])
    }

    pub fn dual_volume(&self, idx: usize) -> f64 {
        let [i, j, k] = self.ijk(idx);
        self.axes[0].dual(i) * self.axes[1].dual(j) * self.axes[2].dual(k)
    }

    /// Multiplicity of the computed region in the full domain.
    pub fn symmetry_factor(&self) -> f64 {
        if self.octant {
            8.0
        } else {
            1.0
        }
    }

    pub fn is_outer_boundary(&self, idx: usize) -> bool {
        let c = self.ijk(idx);
        (0..3).any(|d| c[d] + 1 == self.dims[d] || (!self.octant && c[d] == 0))
    }

    /// Nodes that are not on the outer boundary but have a boundary neighbour.
    pub fn is_boundary_layer(&self, idx: usize) -> bool {
        if self.is_outer_boundary(idx) {
            return false;
        }
        let c = self.ijk(idx);
        (0..3).any(|d| c[d] + 2 == self.dims[d] || (!self.octant && c[d] == 1))
    }

    /// Smallest distance from the origin to the outer boundary.
    pub fn outer_radius(&self) -> f64 {
        (0..3)
            .map(|d| {
                let n = &self.axes[d].nodes;
                if self.octant {
                    n[n.len() - 1]
                } else {
                    n[n.len() - 1].min(-n[0])
                }
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn cube_count(&self) -> usize {
        (self.dims[0] - 1) * (self.dims[1] - 1) * (self.dims[2] - 1)
    }

    /// Lower corner node and sizes of cube `c`.
    pub fn cube(&self, c: usize) -> ([usize; 3], [f64; 3]) {
        let cx = self.dims[0] - 1;
        let cy = self.dims[1] - 1;
        let i = c % cx;
        let j = (c / cx) % cy;
        let k = c / (cx * cy);
        let h = [self.axes[0].spacing(i), self.axes[1].spacing(j), self.axes[2].spacing(k)];
        ([i, j, k], h)
    }

    pub fn cube_center(&self, c: usize) -> Vector3<f64> {
        let ([i, j, k], h) = self.cube(c);
        Vector3::new(
            self.axes[0].nodes[i] + 0.5 * h[0],
            self.axes[1].nodes[j] + 0.5 * h[1],
            self.axes[2].nodes[k] + 0.5 * h[2],
        )
    }

    /// Trilinear interpolation of a nodal field; octant grids are reflected.
    /// Points outside the grid are clamped to it.
    pub fn interpolate(&self, f: &[f64], x: &Vector3<f64>) -> f64 {
        let mut base = [0usize; 3];
        let mut t = [0.0; 3];
        for d in 0..3 {
            let n = &self.axes[d].nodes;
            let v = if self.octant { x[d].abs() } else { x[d] };
            let v = v.clamp(n[0], n[n.len() - 1]);
            let i = n.partition_point(|&y| y <= v).clamp(1, n.len() - 1) - 1;
            base[d] = i;
            t[d] = (v - n[i]) / (n[i + 1] - n[i]);
        }
        let mut acc = 0.0;
        for c in 0..8 {
            let o = corner_offset(c);
            let w: f64 = (0..3).map(|d| if o[d] == 1 { t[d] } else { 1.0 - t[d] }).product();
            if w != 0.0 {
                acc += w * f[self.index(base[0] + o[0], base[1] + o[1], base[2] + o[2])];
            }
        }
        acc
    }

    /// Volume-weighted sum `Σ V_i f_i` over the full (unfolded) domain.
    pub fn integrate_nodal(&self, f: &[f64]) -> f64 {
        self.symmetry_factor() * (0..self.len()).map(|i| self.dual_volume(i) * f[i]).sum::<f64>()
    }
}

/// Local corner `c = bx + 2by + 4bz` of a cube.
fn corner_offset(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, (c >> 2) & 1]
}

/// Structured symmetric operator with up to 27 neighbours per node.
#[derive(Clone, Debug)]
pub struct Stencil {
    dims: [usize; 3],
    pub offsets: Vec<[i32; 3]>,
    lin: Vec<isize>,
    center: usize,
    lower: Vec<usize>,
    upper: Vec<usize>,
    /// Row-major `len × offsets.len()`.
    coefs: Vec<f64>,
}

fn offset_slot(o: [i32; 3]) -> usize {
    ((o[0] + 1) + 3 * (o[1] + 1) + 9 * (o[2] + 1)) as usize
}

impl Stencil {
    /// Assemble `∫∇uᵀA∇v`; `edge_scale(a, b)` multiplies the axial energy of edge `a–b`.
    pub fn assemble(
        grid: &Grid3,
        coef: &(dyn Fn(&Vector3<f64>) -> Matrix3<f64> + Sync),
        edge_scale: Option<&(dyn Fn(usize, usize) -> f64 + Sync)>,
    ) -> Result<Self> {
        let n = grid.len();
        let nc = grid.cube_count();
        let mats: Vec<Matrix3<f64>> = (0..nc).into_par_iter().map(|c| coef(&grid.cube_center(c))).collect();
        for (c, a) in mats.iter().enumerate() {
            if !(a - a.transpose()).iter().all(|v| v.abs() <= 1e-12 * (1.0 + a.norm())) {
                return invalid("coefficient matrix is not symmetric");
            }
            let e = a.symmetric_eigenvalues().min();
            if e < -1e-12 {
                let p = grid.cube_center(c);
                return Err(Error::NotPsd { point: [p[0], p[1], p[2]], min_eig: e });
            }
        }
        let mut full = vec![0.0; n * 27];
        let mut local = [[0.0f64; 8]; 8];
        for (c, a) in mats.iter().enumerate() {
            let (base, h) = grid.cube(c);
            let vol = h[0] * h[1] * h[2];
            let node = |k: usize| {
                let o = corner_offset(k);
                grid.index(base[0] + o[0], base[1] + o[1], base[2] + o[2])
            };
            for row in local.iter_mut() {
                row.fill(0.0);
            }
            let scale = |k: usize, l: usize| edge_scale.map_or(1.0, |f| f(node(k), node(l)));
            let mut add_edge = |k: usize, l: usize, w: f64| {
                let w = w * scale(k, l);
                local[k][k] += w;
                local[l][l] += w;
                local[k][l] -= w;
                local[l][k] -= w;
            };
            let mut axis = [a[(0, 0)], a[(1, 1)], a[(2, 2)]];
            for d in 0..3 {
                for e in 0..3 {
                    if e != d {
                        axis[d] -= a[(d, e)].abs() * h[d] / h[e];
                    }
                }
            }
            let monotone = axis.iter().zip(0..3).all(|(&v, d)| v >= -1e-14 * a[(d, d)].abs());
            for d in 0..3 {
                let coef = if monotone { axis[d].max(0.0) } else { a[(d, d)] };
                let w = vol * coef / (4.0 * h[d] * h[d]);
                for k in 0..8 {
                    if k & (1 << d) == 0 {
                        add_edge(k, k | (1 << d), w);
                    }
                }
            }
            if monotone {
                // Cross terms as face-diagonal edges aligned with the sign of a_de.
                for d in 0..3 {
                    for e in d + 1..3 {
                        let ade = a[(d, e)];
                        if ade == 0.0 {
                            continue;
                        }
                        let w = vol * ade.abs() / (2.0 * h[d] * h[e]);
                        for k in 0..8 {
                            if k & (1 << d) != 0 {
                                continue;
                            }
                            let up = k & (1 << e) == 0;
                            if up != (ade > 0.0) {
                                continue;
                            }
                            add_edge(k, (k | (1 << d)) ^ (1 << e), w);
                        }
                    }
                }
            } else {
                for d in 0..3 {
                    for e in 0..3 {
                        if d == e || a[(d, e)] == 0.0 {
                            continue;
                        }
                        let w = vol * a[(d, e)] / (16.0 * h[d] * h[e]);
                        for k in 0..8 {
                            let gk = if k & (1 << d) != 0 { 1.0 } else { -1.0 };
                            for l in 0..8 {
                                let gl = if l & (1 << e) != 0 { 1.0 } else { -1.0 };
                                local[k][l] += w * gk * gl;
                            }
                        }
                    }
                }
            }
            for k in 0..8 {
                let ok = corner_offset(k);
                let row = node(k);
                for l in 0..8 {
                    let ol = corner_offset(l);
                    let o = [ol[0] as i32 - ok[0] as i32, ol[1] as i32 - ok[1] as i32, ol[2] as i32 - ok[2] as i32];
                    full[row * 27 + offset_slot(o)] += local[k][l];
                }
            }
        }
        let mut used = [false; 27];
        for row in full.chunks(27) {
            for (s, v) in row.iter().enumerate() {
                if *v != 0.0 {
                    used[s] = true;
                }
            }
        }
        used[offset_slot([0, 0, 0])] = true;
        let mut offsets = Vec::new();
        let mut slots = Vec::new();
        for oz in -1..=1 {
            for oy in -1..=1 {
                for ox in -1..=1 {
                    let o = [ox, oy, oz];
                    if used[offset_slot(o)] {
                        offsets.push(o);
                        slots.push(offset_slot(o));
                    }
                }
            }
        }
        let m = offsets.len();
        let mut coefs = vec![0.0; n * m];
        for i in 0..n {
            for (col, &s) in slots.iter().enumerate() {
                coefs[i * m + col] = full[i * 27 + s];
            }
        }
        Ok(Self::from_parts(grid.dims(), offsets, coefs))
    }

    fn from_parts(dims: [usize; 3], offsets: Vec<[i32; 3]>, coefs: Vec<f64>) -> Self {
        let lin: Vec<isize> = offsets
            .iter()
            .map(|o| o[0] as isize + dims[0] as isize * (o[1] as isize + dims[1] as isize * o[2] as isize))
            .collect();
        let center = lin.iter().position(|&l| l == 0).expect("center offset");
        let lower = (0..lin.len()).filter(|&c| lin[c] < 0).collect();
        let upper = (0..lin.len()).filter(|&c| lin[c] > 0).collect();
        Self { dims, offsets, lin, center, lower, upper, coefs }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.offsets.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.width();
        &self.coefs[i * m..(i + 1) * m]
    }

    /// Coefficient coupling node `i` to node `i + offset`.
    pub fn coefficient(&self, i: usize, offset: [i32; 3]) -> f64 {
        self.offsets.iter().position(|&o| o == offset).map_or(0.0, |c| self.row(i)[c])
    }

    pub fn diagonal(&self, i: usize) -> f64 {
        self.row(i)[self.center]
    }

    pub fn add_diagonal(&mut self, d: &[f64]) {
        let m = self.width();
        for (i, v) in d.iter().enumerate() {
            self.coefs[i * m + self.center] += v;
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { coefs: self.coefs.iter().map(|c| c * s).collect(), ..self.clone() }
    }

    #[inline]
    fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        let row = self.row(i);
        let mut acc = 0.0;
        for (c, &a) in row.iter().enumerate() {
            if a != 0.0 {
                acc += a * x[(i as isize + self.lin[c]) as usize];
            }
        }
        acc
    }

    /// `y = K x`.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.par_iter_mut().enumerate().with_min_len(4096).for_each(|(i, yi)| *yi = self.row_dot(i, x));
    }

    /// `(K x)_i` for a single row.
    pub fn apply_row(&self, i: usize, x: &[f64]) -> f64 {
        self.row_dot(i, x)
    }

    /// `xᵀ K x`.
    pub fn energy(&self, x: &[f64]) -> f64 {
        (0..self.len()).into_par_iter().with_min_len(4096).map(|i| x[i] * self.row_dot(i, x)).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preconditioner {
    Jacobi,
    SymmetricGaussSeidel,
    /// Diagonal ILU on the stencil pattern, matching the diagonal.
    Dilu,
    /// Relaxed modified ILU, matching row sums with relaxation 0.95.
    #[default]
    Mic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    pub tol: f64,
    pub max_iter: usize,
    #[serde(default)]
    pub preconditioner: Preconditioner,
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self { tol: 1e-9, max_iter: 20000, preconditioner: Preconditioner::Mic }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub iterations: usize,
    pub residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.par_iter().zip(b).with_min_len(8192).map(|(x, y)| x * y).sum()
}

/// Pivots `d` of `M = (D + L) D⁻¹ (D + U)` restricted to free nodes.
fn factor(k: &Stencil, free: &[bool], kind: Preconditioner) -> Vec<f64> {
    let n = k.len();
    let alpha = match kind {
        Preconditioner::Jacobi | Preconditioner::SymmetricGaussSeidel => {
            return (0..n).map(|i| k.diagonal(i)).collect();
        }
        Preconditioner::Dilu => 0.0,
        Preconditioner::Mic => 0.95,
    };
    let neighbour = |i: usize, c: usize| (i as isize + k.lin[c]) as usize;
    let upper_sum: Vec<f64> = (0..n)
        .map(|j| {
            if !free[j] {
                return 0.0;
            }
            let row = k.row(j);
            k.upper.iter().filter(|&&c| row[c] != 0.0 && free[neighbour(j, c)]).map(|&c| row[c]).sum()
        })
        .collect();
    let mut d = vec![0.0; n];
    for i in 0..n {
        if !free[i] {
            continue;
        }
        let row = k.row(i);
        let aii = row[k.center];
        let (mut plain, mut modified) = (aii, aii);
        for &c in &k.lower {
            let a = row[c];
            if a == 0.0 {
                continue;
            }
            let j = neighbour(i, c);
            if !free[j] {
                continue;
            }
            plain -= a * a / d[j];
            modified -= a * (a + alpha * (upper_sum[j] - a)) / d[j];
        }
        d[i] = if modified > 0.05 * aii { modified } else { plain.max(0.05 * aii) };
    }
    d
}

fn precondition(k: &Stencil, free: &[bool], kind: Preconditioner, d: &[f64], r: &[f64], z: &mut [f64]) {
    if kind == Preconditioner::Jacobi {
        for i in 0..r.len() {
            z[i] = if free[i] { r[i] / d[i] } else { 0.0 };
        }
        return;
    }
    z.fill(0.0);
    for i in 0..r.len() {
        if !free[i] {
            continue;
        }
        let row = k.row(i);
        let mut s = r[i];
        for &c in &k.lower {
            let a = row[c];
            if a != 0.0 {
                s -= a * z[(i as isize + k.lin[c]) as usize];
            }
        }
        z[i] = s / d[i];
    }
    for i in (0..r.len()).rev() {
        if !free[i] {
            continue;
        }
        let row = k.row(i);
        let mut s = 0.0;
        for &c in &k.upper {
            let a = row[c];
            if a != 0.0 {
                s += a * z[(i as isize + k.lin[c]) as usize];
            }
        }
        z[i] -= s / d[i];
    }
}

/// Solve `K_ff x_f = b_f` by preconditioned CG; entries of `x` at fixed nodes are left untouched.
pub fn pcg(k: &Stencil, b: &[f64], x: &mut [f64], free: &[bool], spec: &SolverSpec) -> Result<SolveStats> {
    let n = k.len();
    let mut r = vec![0.0; n];
    let mut xf: Vec<f64> = (0..n).map(|i| if free[i] { x[i] } else { 0.0 }).collect();
    k.apply(&xf, &mut r);
    for i in 0..n {
        r[i] = if free[i] { b[i] - r[i] } else { 0.0 };
    }
    let bnorm = (0..n).filter(|&i| free[i]).map(|i| b[i] * b[i]).sum::<f64>().sqrt();
    if bnorm == 0.0 {
        for i in 0..n {
            if free[i] {
                x[i] = 0.0;
            }
        }
        return Ok(SolveStats { iterations: 0, residual: 0.0 });
    }
    let d = factor(k, free, spec.preconditioner);
    let mut z = vec![0.0; n];
    precondition(k, free, spec.preconditioner, &d, &r, &mut z);
    let mut p = z.clone();
    let mut q = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut rel = dot(&r, &r).sqrt() / bnorm;
    let mut it = 0;
    while rel > spec.tol {
        if it >= spec.max_iter {
            return Err(Error::NoConvergence { iterations: it, residual: rel });
        }
        k.apply(&p, &mut q);
        for i in 0..n {
            if !free[i] {
                q[i] = 0.0;
            }
        }
        let alpha = rz / dot(&p, &q);
        xf.par_iter_mut().zip(&p).with_min_len(8192).for_each(|(x, p)| *x += alpha * p);
        r.par_iter_mut().zip(&q).with_min_len(8192).for_each(|(r, q)| *r -= alpha * q);
        rel = dot(&r, &r).sqrt() / bnorm;
        precondition(k, free, spec.preconditioner, &d, &r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.par_iter_mut().zip(&z).with_min_len(8192).for_each(|(p, z)| *p = z + beta * *p);
        it += 1;
    }
    for i in 0..n {
        if free[i] {
            x[i] = xf[i];
        }
    }
    Ok(SolveStats { iterations: it, residual: rel })
}

/// Solve `K x = rhs` on free nodes with `x` prescribed on the others.
///
/// On entry `x` holds the prescribed values at fixed nodes; on exit it holds the solution.
pub fn solve_constrained(k: &Stencil, rhs: &[f64], x: &mut [f64], free: &[bool], spec: &SolverSpec) -> Result<SolveStats> {
    let n = k.len();
    let fixed: Vec<f64> = (0..n).map(|i| if free[i] { 0.0 } else { x[i] }).collect();
    let mut kx = vec![0.0; n];
    k.apply(&fixed, &mut kx);
    let b: Vec<f64> = (0..n).map(|i| if free[i] { rhs[i] - kx[i] } else { 0.0 }).collect();
    let mut d = vec![0.0; n];
    let stats = pcg(k, &b, &mut d, free, spec)?;
    for i in 0..n {
        x[i] = if free[i] { d[i] } else { fixed[i] };
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(_: &Vector3<f64>) -> Matrix3<f64> {
        Matrix3::identity()
    }

    #[test]
    fn graded_axis_reaches_radius() {
        let a = Axis::graded(0.1, 1.0, 20.0, 1.2).unwrap();
        assert_eq!(a.nodes[0], 0.0);
        assert!((a.nodes[10] - 1.0).abs() < 1e-12);
        assert!(*a.nodes.last().unwrap() >= 20.0);
        assert!((a.spacing(a.len() - 2) / a.spacing(a.len() - 3) - 1.2).abs() < 1e-12);
        let m = a.mirrored();
        assert_eq!(m.len(), 2 * a.len() - 1);
        let total: f64 = (0..m.len()).map(|i| m.dual(i)).sum();
        assert!((total - 2.0 * a.nodes.last().unwrap()).abs() < 1e-9);
    }

    #[test]
    fn identity_gives_seven_point_laplacian_on_graded_grid() {
        let axis = Axis::graded(0.2, 0.6, 3.0, 1.3).unwrap();
        let g = Grid3::new([axis.clone(), axis.clone(), axis], true);
        let k = Stencil::assemble(&g, &identity, None).unwrap();
        assert_eq!(k.width(), 7);
        let [nx, ny, nz] = g.dims();
        for kk in 1..nz - 1 {
            for j in 1..ny - 1 {
                for i in 1..nx - 1 {
                    let idx = g.index(i, j, kk);
                    let c = [i, j, kk];
                    let mut diag = 0.0;
                    for d in 0..3 {
                        let ax = &g.axes[d];
                        let (hm, hp) = (ax.spacing(c[d] - 1), ax.spacing(c[d]));
                        let others: f64 = (0..3).filter(|&e| e != d).map(|e| g.axes[e].dual(c[e])).product();
                        let mut o = [0; 3];
                        o[d] = -1;
                        let km = k.coefficient(idx, o);
                        o[d] = 1;
                        let kp = k.coefficient(idx, o);
                        assert!((km + others / hm).abs() < 1e-12, "{km} vs {}", -others / hm);
                        assert!((kp + others / hp).abs() < 1e-12);
                        diag += others * (1.0 / hm + 1.0 / hp);
                    }
                    assert!((k.diagonal(idx) - diag).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn constant_coefficient_rows_sum_to_zero() {
        let axis = Axis::uniform(-1.0, 1.0, 8);
        let g = Grid3::new([axis.clone(), axis.clone(), axis], false);
        let a = Matrix3::new(2.0, 0.3, -0.2, 0.3, 1.5, 0.1, -0.2, 0.1, 1.0);
        let k = Stencil::assemble(&g, &move |_| a, None).unwrap();
        assert_eq!(k.width(), 13);
        check_rows(&g, &k);
        let strong = Matrix3::new(1.0, 0.6, 0.6, 0.6, 1.0, 0.6, 0.6, 0.6, 1.0);
        let k = Stencil::assemble(&g, &move |_| strong, None).unwrap();
        assert_eq!(k.width(), 27);
        check_rows(&g, &k);
    }

    #[test]
    fn diagonally_dominant_coefficient_gives_m_matrix() {
        let axis = Axis::graded(0.1, 0.5, 3.0, 1.1).unwrap();
        let g = Grid3::new([axis.clone(), axis.clone(), axis], true);
        let k = Stencil::assemble(
            &g,
            &|x: &Vector3<f64>| {
                let n = x.normalize();
                Matrix3::identity() + 0.4 * n * n.transpose()
            },
            None,
        )
        .unwrap();
        for i in 0..g.len() {
            for (c, &v) in k.row(i).iter().enumerate() {
                if c != k.center {
                    assert!(v <= 0.0, "positive off-diagonal {v}");
                }
            }
        }
    }

    fn check_rows(g: &Grid3, k: &Stencil) {
        let ones = vec![1.0; g.len()];
        let mut y = vec![0.0; g.len()];
        k.apply(&ones, &mut y);
        assert!(y.iter().all(|v| v.abs() < 1e-12));
        let lin: Vec<f64> = (0..g.len()).map(|i| g.point(i).dot(&Vector3::new(1.0, -2.0, 0.5))).collect();
        k.apply(&lin, &mut y);
        for i in 0..g.len() {
            if !g.is_outer_boundary(i) {
                assert!(y[i].abs() < 1e-12);
            }
        }
        for i in 0..g.len() {
            for (c, o) in k.offsets.iter().enumerate() {
                let [x, yy, z] = g.ijk(i);
                let j = [x as i32 + o[0], yy as i32 + o[1], z as i32 + o[2]];
                if j.iter().zip(g.dims()).all(|(&v, n)| v >= 0 && (v as usize) < n) {
                    let jj = g.index(j[0] as usize, j[1] as usize, j[2] as usize);
                    assert!((k.row(i)[c] - k.coefficient(jj, [-o[0], -o[1], -o[2]])).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn rejects_indefinite_coefficients() {
        let axis = Axis::uniform(0.0, 1.0, 2);
        let g = Grid3::new([axis.clone(), axis.clone(), axis], true);
        let bad = |_: &Vector3<f64>| Matrix3::from_diagonal(&Vector3::new(1.0, -0.5, 1.0));
        assert!(matches!(Stencil::assemble(&g, &bad, None), Err(Error::NotPsd { .. })));
    }

    fn mms_error(cells: usize, prec: Preconditioner) -> f64 {
        let axis = Axis::uniform(0.0, 2.0, cells);
        let g = Grid3::new([axis.clone(), axis.clone(), axis], true);
        let k = Stencil::assemble(&g, &identity, None).unwrap();
        let exact = |p: Vector3<f64>| (-p.norm_squared()).exp();
        let source = |p: Vector3<f64>| -(4.0 * p.norm_squared() - 6.0) * (-p.norm_squared()).exp();
        let n = g.len();
        let free: Vec<bool> = (0..n).map(|i| !g.is_outer_boundary(i)).collect();
        let rhs: Vec<f64> = (0..n).map(|i| g.dual_volume(i) * source(g.point(i))).collect();
        let mut x: Vec<f64> = (0..n).map(|i| if free[i] { 0.0 } else { exact(g.point(i)) }).collect();
        let spec = SolverSpec { preconditioner: prec, ..SolverSpec::default() };
        solve_constrained(&k, &rhs, &mut x, &free, &spec).unwrap();
        (0..n).map(|i| (x[i] - exact(g.point(i))).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn manufactured_solution_converges_at_second_order() {
        let e1 = mms_error(12, Preconditioner::SymmetricGaussSeidel);
        let e2 = mms_error(24, Preconditioner::SymmetricGaussSeidel);
        for p in [Preconditioner::Jacobi, Preconditioner::Dilu, Preconditioner::Mic] {
            assert!((e2 - mms_error(24, p)).abs() < 1e-8);
        }
        let order = (e1 / e2).log2();
        assert!(order >= 1.9, "order {order} ({e1}, {e2})");
    }

    #[test]
    fn pcg_reports_non_convergence() {
        let axis = Axis::uniform(0.0, 1.0, 10);
        let g = Grid3::new([axis.clone(), axis.clone(), axis], true);
        let k = Stencil::assemble(&g, &identity, None).unwrap();
        let free: Vec<bool> = (0..g.len()).map(|i| !g.is_outer_boundary(i)).collect();
        let b = vec![1.0; g.len()];
        let mut x = vec![0.0; g.len()];
        let spec = SolverSpec { max_iter: 2, ..SolverSpec::default() };
        assert!(matches!(pcg(&k, &b, &mut x, &free, &spec), Err(Error::NoConvergence { .. })));
    }
}
