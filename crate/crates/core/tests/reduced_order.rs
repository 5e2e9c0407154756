use gmmdo_core::do_engine::{inner_weights, moments, orthonormality_error, reorthonormalize};
use gmmdo_core::flow::face_velocities_for_tracers;
use gmmdo_core::twin::{generate_truth, ExperimentConfig};
use gmmdo_core::verify::do_monte_carlo;
use gmmdo_core::{DOState, Domain, DomainConfig, Dynamics, FlowSolver, ParamDeviations, ParamId, Transport};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn flat(nx: usize, nz: usize) -> Domain {
    Domain::new(&DomainConfig {
        nx,
        nz,
        lx: 3.0,
        lz: 1.0,
        ridge_height: 0.0,
        ridge_center: 1.5,
        ..DomainConfig::default()
    })
    .unwrap()
}

#[test]
fn linear_transport_matches_monte_carlo() {
    let r = do_monte_carlo(&mut ChaCha8Rng::seed_from_u64(21)).unwrap();
    assert!(r.passed, "{}", r.detail);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Re-orthonormalization changes the basis but not any realization.
    #[test]
    fn reorthonormalization_preserves_realizations(seed in 0..10_000u64, s in 1..6usize, dup in any::<bool>()) {
        let domain = flat(6, 4);
        let w = inner_weights(&domain, &[1.0, 0.5]).unwrap();
        let n = 2 * domain.grid.n_cells();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut modes = DMatrix::from_fn(n, s, |_, _| rng.random_range(-1.0..1.0));
        if dup && s > 1 {
            let c = modes.column(0).clone_owned();
            modes.set_column(s - 1, &(c * 2.0));
        }
        let mut coeffs = DMatrix::from_fn(30, s, |_, _| rng.random_range(-1.0..1.0));
        let before = &modes * coeffs.transpose();
        reorthonormalize(&mut modes, &mut coeffs, &w);
        prop_assert!(orthonormality_error(&modes, &w) <= 1e-10);
        let after = &modes * coeffs.transpose();
        prop_assert!((after - before).amax() <= 1e-10);
    }
}

#[test]
fn moments_match_reconstructed_ensemble() {
    let domain = flat(5, 4);
    let nc = domain.grid.n_cells();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, s, r) = (2 * nc, 3, 50);
    let mut coeffs = DMatrix::from_fn(r, s, |_, _| rng.random_range(-1.0..1.0));
    for mut c in coeffs.column_iter_mut() {
        let m = c.sum() / r as f64;
        c.add_scalar_mut(-m);
    }
    let st = DOState {
        mean: DVector::from_fn(n, |_, _| rng.random_range(0.0..1.0)),
        modes: DMatrix::from_fn(n, s, |_, _| rng.random_range(-1.0..1.0)),
        coeffs,
        sigma_nd: vec![1.0, 1.0],
        time: 0.0,
    };
    let (mean, std) = moments(&st, 2);
    for i in 0..n {
        let xs: Vec<f64> = (0..r).map(|o| st.realization(o)[i]).collect();
        let m = xs.iter().sum::<f64>() / r as f64;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / r as f64;
        assert!((mean.data[i] - m).abs() < 1e-12);
        assert!((std.data[i] - v.sqrt()).abs() < 1e-12);
    }
}

/// A single sample with no modes follows exactly the truth trajectory.
#[test]
fn collapsed_ensemble_reproduces_truth() {
    let mut cfg = ExperimentConfig::preset(1).unwrap().scaled(0.2).unwrap();
    cfg.time.t_end = 3.0;
    cfg.observations.start = 1.0;
    cfg.observations.end = 3.0;
    let truth = generate_truth(&cfg).unwrap();
    let domain = Domain::new(&cfg.domain).unwrap();
    let dt = cfg.time.dt;
    let solver = FlowSolver::new(&domain, cfg.flow, dt).unwrap();
    let mut flow = solver.initial_state().unwrap();
    let tr = Transport::new(&domain, cfg.numerics.advection, cfg.numerics.kappa, dt).unwrap();
    let mut dynamics = Dynamics::new(&domain, cfg.stochastic.model, cfg.bio, tr, dt, None).unwrap();
    let n = truth.initial.len();
    let mut st = DOState {
        mean: DVector::from_vec(truth.initial.clone()),
        modes: DMatrix::zeros(n, 0),
        coeffs: DMatrix::zeros(1, 0),
        sigma_nd: vec![1.0; 3],
        time: 0.0,
    };
    let samples = DMatrix::from_row_slice(1, 2, &[3.6, 1.0]);
    let dev = ParamDeviations::from_samples(vec![ParamId::Lambda], 1, 0, 0, &samples);
    for _ in 0..cfg.n_steps() {
        solver.step(&mut flow).unwrap();
        dynamics.advance(&mut st, &dev, &face_velocities_for_tracers(&flow)).unwrap();
    }
    let gap = st
        .mean
        .iter()
        .zip(&truth.final_state)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(gap <= 1e-10, "gap {gap:e}");
}
