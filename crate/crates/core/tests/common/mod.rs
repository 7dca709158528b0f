#![allow(dead_code)]

use std::f64::consts::PI;

use coalescence::covariance::{evaluate_field, sample_increment, CovarianceModel};
use coalescence::fv::{solve_constrained, Axis, Grid3, SolverSpec, Stencil};
use coalescence::kernel::{KernelTheta, ThetaProfile};
use coalescence::macro_pde::{solve_macro, weak_residual, MacroProblem, PeriodicGrid, TestFunction};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Radial cell problem for `A = σ₀² I`: with `v = r u`, `v'' = (R₀/σ₀²) θ (r + v)`,
/// `v(0) = 0` and `v'(1) = 0` (θ vanishes outside the unit ball).
/// Returns `R₀ ∫θ(1+u) = 4π R₀ ∫ θ (r² + r v) dr`.
pub fn radial_rbar(theta: ThetaProfile, sigma0: f64, r0: f64, cells: usize) -> f64 {
    let k = KernelTheta::new(theta).unwrap();
    let kappa = r0 / (sigma0 * sigma0);
    let h = 1.0 / cells as f64;
    let n = cells;
    // unknowns v_1..v_n
    let r = |i: usize| i as f64 * h;
    let mut sub = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut sup = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    for row in 0..n {
        let i = row + 1;
        let th = k.value_r(r(i));
        diag[row] = -2.0 / (h * h) - kappa * th;
        rhs[row] = kappa * th * r(i);
        if row > 0 {
            sub[row] = 1.0 / (h * h);
        }
        if row + 1 < n {
            sup[row] = 1.0 / (h * h);
        } else {
            sub[row] = 2.0 / (h * h);
        }
    }
    for row in 1..n {
        let m = sub[row] / diag[row - 1];
        diag[row] -= m * sup[row - 1];
        rhs[row] -= m * rhs[row - 1];
    }
    let mut v = vec![0.0; n + 1];
    v[n] = rhs[n - 1] / diag[n - 1];
    for row in (0..n - 1).rev() {
        v[row + 1] = (rhs[row] - sup[row] * v[row + 2]) / diag[row];
    }
    let f = |i: usize| k.value_r(r(i)) * (r(i) * r(i) + r(i) * v[i]);
    let integral = h * ((1..n).map(f).sum::<f64>() + 0.5 * (f(0) + f(n)));
    4.0 * PI * r0 * integral
}

/// Max nodal error of the finite-volume solve of `−∇·(a(x) M ∇u) = s` with
/// `u = exp(−|x|²)`, `a = 1 + x₁²/4`, on `[−2, 2]³` with `cells` per axis.
pub fn elliptic_mms_error(cells: usize) -> f64 {
    let m = Matrix3::new(1.0, 0.3, 0.2, 0.3, 1.2, 0.1, 0.2, 0.1, 0.9);
    let a = |x: &Vector3<f64>| 1.0 + 0.25 * x[0] * x[0];
    let exact = |x: &Vector3<f64>| (-x.norm_squared()).exp();
    let source = |x: &Vector3<f64>| {
        let u = exact(x);
        let hess = (x * x.transpose() * 4.0 - Matrix3::identity() * 2.0) * u;
        let grad = -2.0 * x * u;
        let grad_a = Vector3::new(0.5 * x[0], 0.0, 0.0);
        -(a(x) * m.component_mul(&hess).sum() + grad_a.dot(&(m * grad)))
    };
    let axis = Axis::uniform(-2.0, 2.0, cells);
    let g = Grid3::new([axis.clone(), axis.clone(), axis], false);
    let coef = move |x: &Vector3<f64>| m * a(x);
    let k = Stencil::assemble(&g, &coef, None).unwrap();
    let n = g.len();
    let free: Vec<bool> = (0..n).map(|i| !g.is_outer_boundary(i)).collect();
    let rhs: Vec<f64> = (0..n).map(|i| g.dual_volume(i) * source(&g.point(i))).collect();
    let mut x: Vec<f64> = (0..n).map(|i| if free[i] { 0.0 } else { exact(&g.point(i)) }).collect();
    solve_constrained(&k, &rhs, &mut x, &free, &SolverSpec { tol: 1e-12, ..SolverSpec::default() }).unwrap();
    (0..n).map(|i| (x[i] - exact(&g.point(i))).abs()).fold(0.0, f64::max)
}

fn gaussian(std: f64) -> impl Fn(&Vector3<f64>) -> f64 {
    move |x| (-x.norm_squared() / (2.0 * std * std)).exp() / (2.0 * PI * std * std).powf(1.5)
}

fn unit_mass_gaussian(grid: &PeriodicGrid, std: f64) -> Vec<f64> {
    let mut f0 = grid.cell_averages(gaussian(std));
    let m = grid.integrate(&f0);
    f0.iter_mut().for_each(|v| *v /= m);
    f0
}

/// L¹ error of the pure-diffusion solve against the Gaussian heat kernel at `t = 0.2`.
pub fn heat_l1_error(cells: usize) -> f64 {
    let grid = PeriodicGrid { half_width: 3.0, cells };
    let prob = MacroProblem::from_field(grid, unit_mass_gaussian(&grid, 0.4), 0.5, 0.0, None, 0.2, &[], None).unwrap();
    let sol = solve_macro(&prob).unwrap();
    let exact = grid.cell_averages(gaussian((0.16f64 + 2.0 * 0.5 * 0.2).sqrt()));
    grid.cell_volume() * sol.snapshots[0].values.iter().zip(&exact).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Largest weak-form residual of the reaction-diffusion solve over a panel of test functions.
pub fn reaction_weak_residual(cells: usize, rbar: f64) -> f64 {
    let grid = PeriodicGrid { half_width: 3.0, cells };
    let prob = MacroProblem::from_field(grid, unit_mass_gaussian(&grid, 0.4), 0.5, rbar, None, 0.2, &[], Some(1)).unwrap();
    let sol = solve_macro(&prob).unwrap();
    weak_residual(&sol.records, &grid, &TestFunction::panel(1.5), 0.5, rbar).unwrap().max
}

pub struct FieldCheck {
    pub pairs: usize,
    /// Pairs whose trace statistic lies within 3 standard errors.
    pub trace_pass: usize,
    /// Matrix entries (9 per pair) within 3 standard errors.
    pub entry_pass: usize,
}

/// Empirical `E[W(x) W(y)ᵀ]` of unit-time increments against the mode-sum covariance `C(x − y)`.
pub fn field_statistics(model: &CovarianceModel, pairs: usize, samples: usize, seed: u64) -> FieldCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(2 * pairs);
    for _ in 0..pairs {
        let x = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let dir = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0f64)).normalize();
        let y = x + dir * rng.random_range(0.0..3.0);
        points.push(x);
        points.push(y);
    }
    let mut sum = vec![Matrix3::<f64>::zeros(); pairs];
    let mut sq = vec![Matrix3::<f64>::zeros(); pairs];
    let mut tr = vec![(0.0, 0.0); pairs];
    for _ in 0..samples {
        let inc = sample_increment(model, 1.0, 1.0, &mut rng);
        let w = evaluate_field(&inc, &points);
        for p in 0..pairs {
            let m = w[2 * p] * w[2 * p + 1].transpose();
            sum[p] += m;
            sq[p] += m.component_mul(&m);
            let t = m.trace();
            tr[p].0 += t;
            tr[p].1 += t * t;
        }
    }
    let ns = samples as f64;
    let within = |s: f64, s2: f64, target: f64| {
        let mean = s / ns;
        let se = ((s2 / ns - mean * mean).max(0.0) / (ns - 1.0)).sqrt();
        (mean - target).abs() <= 3.0 * se
    };
    let (mut trace_pass, mut entry_pass) = (0, 0);
    for p in 0..pairs {
        let c = model.evaluate_covariance(&(points[2 * p] - points[2 * p + 1]));
        trace_pass += within(tr[p].0, tr[p].1, c.trace()) as usize;
        entry_pass += (0..9).filter(|&e| within(sum[p][e], sq[p][e], c[e])).count();
    }
    FieldCheck { pairs, trace_pass, entry_pass }
}
