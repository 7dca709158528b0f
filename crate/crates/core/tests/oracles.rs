mod common;

use coalescence::cell::{solve_cell, CellConfig, CellProblem};
use coalescence::covariance::{SpectralSpec, Uncorrelated};
use coalescence::fv::GridSpec;
use coalescence::kernel::ThetaProfile;
use coalescence::neighbors::{pairs_within, pairs_within_brute};
use nalgebra::Vector3;
use proptest::prelude::*;

#[test]
fn radial_oracle_is_grid_converged() {
    let a = common::radial_rbar(ThetaProfile::default(), 0.5, 10.0, 2000);
    let b = common::radial_rbar(ThetaProfile::default(), 0.5, 10.0, 4000);
    assert!((a / b - 1.0).abs() < 1e-5, "{a} {b}");
    // small R₀: R̄ ≈ R₀
    let s = common::radial_rbar(ThetaProfile::Polynomial, 1.0, 1e-4, 2000);
    assert!((s / 1e-4 - 1.0).abs() < 1e-4, "{s}");
}

#[test]
fn uncorrelated_cell_matches_radial_oracle_on_coarse_grid() {
    let cfg = CellConfig {
        sigma0: 0.5,
        sigma: 0.0,
        r0: 10.0,
        grid: GridSpec { h0: 0.125, domain_radius: 400.0, stretch: 1.2, ..GridSpec::default() },
        ..CellConfig::default()
    };
    let sol = solve_cell(&CellProblem::new(&cfg, &Uncorrelated).unwrap()).unwrap();
    let oracle = common::radial_rbar(cfg.theta, cfg.sigma0, cfg.r0, 4000);
    let rel = (sol.rbar_theta / oracle - 1.0).abs();
    eprintln!("3d {} oracle {oracle} rel {rel}", sol.rbar_theta);
    assert!(rel < 0.02, "3d {} oracle {oracle}", sol.rbar_theta);
}

#[test]
fn elliptic_mms_second_order() {
    let (a, b) = (common::elliptic_mms_error(8), common::elliptic_mms_error(16));
    eprintln!("{a} {b} {}", (a / b).log2());
    assert!((a / b).log2() >= 1.8, "{a} {b}");
}

#[test]
fn field_increments_match_covariance_small() {
    let model = SpectralSpec::GaussianBump { kappa: 1.0, cutoff_k: 6.0, n_modes: 128, seed: 3 }.build().unwrap();
    let c = common::field_statistics(&model, 40, 2000, 11);
    assert!(c.trace_pass as f64 >= 0.9 * c.pairs as f64, "{}", c.trace_pass);
    assert!(c.entry_pass as f64 >= 0.9 * 9.0 * c.pairs as f64, "{}", c.entry_pass);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]
    #[test]
    fn spatial_hash_equals_brute_force(
        pts in prop::collection::vec((-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64), 0..200),
        radius in 0.01..2.0f64,
    ) {
        let p: Vec<Vector3<f64>> = pts.iter().map(|&(x, y, z)| Vector3::new(x, y, z)).collect();
        let mut a = pairs_within(&p, radius);
        let mut b = pairs_within_brute(&p, radius);
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
    }
}
