use gmmdo_core::do_engine::{inner_weights, moments};
use gmmdo_core::filter::{assimilate, bilinear_stencil, FilterConfig, ObservationBatch};
use gmmdo_core::flow::face_velocities_for_tracers;
use gmmdo_core::twin::{
    count_modes, density_mode, generate_truth, initial_ensemble, kde_grid, kde_pdf, observe, rmse, run_experiment,
    truth_from_initial, ExperimentConfig, ParamValue, RunOptions, TruthConfig,
};
use gmmdo_core::{DOState, Domain, Dynamics, FlowSolver, ModelId, ParamId, Transport};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn tiny(id: u8) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(id).unwrap().scaled(0.25).unwrap();
    cfg.stochastic.n_r = 120;
    cfg
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2).zip(y.windows(2)).map(|(a, b)| 0.5 * (a[1] - a[0]) * (b[0] + b[1])).sum()
}

#[test]
fn truth_parameters_follow_the_experiment_definitions() {
    let p1 = ExperimentConfig::preset(1).unwrap();
    assert_eq!(p1.truth_params().lambda, 3.6);
    assert_eq!(p1.truth.alpha, vec![1.0]);
    let p4 = ExperimentConfig::preset(4).unwrap();
    let t = p4.truth_params();
    assert_eq!((t.lambda, t.xi, t.rm, t.gamma), (1.5, 0.04, 0.6, 0.14));
    assert_eq!(p4.truth.alpha, vec![0.0]);
    assert_eq!(p4.flow.reynolds, 500.0);
}

#[test]
fn zero_biology_stays_zero() {
    let mut cfg = tiny(1);
    cfg.time.t_end = 5.0;
    let domain = Domain::new(&cfg.domain).unwrap();
    let n = 3 * domain.grid.n_cells();
    let tr = truth_from_initial(&cfg, &domain, vec![0.0; n]).unwrap();
    assert!(tr.final_state.iter().all(|v| *v == 0.0));
}

#[test]
fn noise_free_observations_interpolate_the_truth() {
    let mut cfg = tiny(1);
    cfg.observations.noise_std = 0.0;
    let domain = Domain::new(&cfg.domain).unwrap();
    let truth = generate_truth(&cfg).unwrap();
    let batch = observe(&cfg, &domain, &truth.states[0], truth.times[0], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let nc = domain.grid.n_cells();
    assert_eq!(batch.values.len(), 6);
    for ((x, z), y) in cfg.observations.locations().iter().zip(&batch.values) {
        let st = bilinear_stencil(&domain, *x, *z).unwrap();
        let direct: f64 = st.iter().map(|(c, w)| w * truth.states[0][2 * nc + c]).sum();
        assert_eq!(*y, direct);
    }
}

#[test]
fn observation_noise_has_the_configured_spread() {
    let cfg = tiny(1);
    let domain = Domain::new(&cfg.domain).unwrap();
    let state = vec![0.3; 3 * domain.grid.n_cells()];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut devs = Vec::new();
    while devs.len() < 10_000 {
        let b = observe(&cfg, &domain, &state, 5.0, &mut rng).unwrap();
        devs.extend(b.values.iter().map(|v| v - 0.3));
    }
    devs.truncate(10_000);
    let n = devs.len() as f64;
    let m = devs.iter().sum::<f64>() / n;
    let sd = (devs.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / (n - 1.0)).sqrt();
    // Standard error of a sample standard deviation is sigma / sqrt(2 (n - 1)).
    let se = 0.05 / (2.0 * (n - 1.0)).sqrt();
    assert!((sd - 0.05).abs() < 3.0 * se, "sd {sd}");
}

#[test]
fn rmse_oracles() {
    let cfg = tiny(1);
    let domain = Domain::new(&cfg.domain).unwrap();
    let nc = domain.grid.n_cells();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let truth: Vec<f64> = (0..nc).map(|_| rng.random_range(0.0..1.0)).collect();
    let exact = DOState {
        mean: DVector::from_vec(truth.clone()),
        modes: DMatrix::zeros(nc, 0),
        coeffs: DMatrix::zeros(4, 0),
        sigma_nd: vec![1.0],
        time: 0.0,
    };
    assert_eq!(rmse(&domain, &exact, &truth, 0), 0.0);
    let biased = DOState {
        mean: DVector::from_iterator(nc, truth.iter().map(|v| v + 0.25)),
        ..exact.clone()
    };
    assert!((rmse(&domain, &biased, &truth, 0) - 0.25).abs() < 1e-14);

    let (s, r) = (3, 40);
    let mut coeffs = DMatrix::from_fn(r, s, |_, _| rng.random_range(-1.0..1.0));
    for mut c in coeffs.column_iter_mut() {
        let m = c.sum() / r as f64;
        c.add_scalar_mut(-m);
    }
    let st = DOState {
        mean: DVector::from_fn(nc, |_, _| rng.random_range(0.0..1.0)),
        modes: DMatrix::from_fn(nc, s, |_, _| rng.random_range(-0.3..0.3)),
        coeffs,
        sigma_nd: vec![1.0],
        time: 0.0,
    };
    let vol = domain.grid.cell_volume();
    let mut acc = 0.0;
    for o in 0..r {
        let x = st.realization(o);
        for c in 0..nc {
            if domain.fluid(c) {
                acc += vol * (x[c] - truth[c]).powi(2);
            }
        }
    }
    let direct = (acc / (r as f64 * domain.fluid_area)).sqrt();
    assert!((rmse(&domain, &st, &truth, 0) - direct).abs() < 1e-12);
}

#[test]
fn kde_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let s: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
    let g = kde_grid(&s, 200);
    let d = kde_pdf(&s, &g);
    assert!((trapezoid(&g, &d) - 1.0).abs() < 1e-3);
    let worst = g
        .iter()
        .zip(&d)
        .map(|(x, p)| (p - (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()).abs())
        .fold(0.0, f64::max);
    assert!(worst < 0.02, "{worst}");

    let two: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { 1.0 } else { 3.0 }).collect();
    let g = kde_grid(&two, 400);
    let d = kde_pdf(&two, &g);
    assert_eq!(count_modes(&d, 0.1), 2);
    assert!((density_mode(&g, &d) - 1.0).abs() < 0.05 || (density_mode(&g, &d) - 3.0).abs() < 0.05);
    assert!((trapezoid(&g, &d) - 1.0).abs() < 1e-3);
}

/// One run at toy size: normalization, completeness and diagnostics.
#[test]
fn report_is_normalized_and_complete() {
    let cfg = tiny(1);
    let out = run_experiment(&cfg, RunOptions::default()).unwrap();
    assert!(out.failure.is_none());
    let res = out.result;
    let rep = &res.report;
    let t0 = cfg.observations.times()[0];
    for name in rep.series_names() {
        let s = rep.series(&name);
        let per_time = if name.starts_with("mode_var") { s.len() } else { 11 };
        assert_eq!(s.len(), per_time, "{name}");
        if name.starts_with("prior_rmse_norm:") {
            assert_eq!(s[0], (t0, 1.0), "{name}");
        }
    }
    for q in ["N", "P", "Z", "Lambda", "alpha0"] {
        assert!(rep.series(&format!("rmse_norm:{q}")).len() == 11);
    }
    assert!(res.diagnostics.max_orthonormality <= 1e-8);
    assert!(res.diagnostics.max_divergence <= 1e-8);
    assert_eq!(res.updates.len(), 11);
}

/// Without updates the normalized errors stay near one. Checked at desk resolution; the
/// quarter-scale grid lets P drift to 1.2 around t = 15.
#[test]
fn control_run_without_assimilation() {
    let mut cfg = ExperimentConfig::preset(1).unwrap().scaled(0.5).unwrap();
    cfg.stochastic.n_r = 500;
    cfg.filter.enabled = false;
    let rep = run_experiment(&cfg, RunOptions::default()).unwrap().result.report;
    for q in ["N", "P", "Z", "Lambda", "alpha0"] {
        for (t, v) in rep.series(&format!("rmse_norm:{q}")) {
            assert!((v - 1.0).abs() <= 0.2, "{q} at {t}: {v}");
        }
    }
    assert!(rep.series("k").is_empty());
}

/// Perfect-model twin: Gaussian state prior on a complete basis, known parameters, truth drawn
/// from the prior ensemble, near-exact data at every fluid cell of every tracer. Every
/// tracer error must drop at each update.
#[test]
fn self_consistent_updates_reduce_error() {
    let mut cfg = tiny(1);
    cfg.domain.nx = 5;
    cfg.domain.nz = 4;
    cfg.stochastic.n_r = 400;
    let domain = Domain::new(&cfg.domain).unwrap();
    let nc = domain.grid.n_cells();
    let (init, mut dev, _, _) = initial_ensemble(&cfg, &domain).unwrap();
    // Known parameters: every deviation is zero and the truth runs with the means.
    assert_eq!((dev.theta_ids.clone(), dev.n_alpha, dev.n_params()), (vec![ParamId::Lambda], 1, 2));
    dev.means = vec![3.6, 1.0];
    dev.devs.fill(0.0);
    cfg.truth = TruthConfig {
        model: ModelId::NpzQuadMort,
        params: vec![ParamValue { param: ParamId::Lambda, value: 3.6 }],
        alpha: vec![1.0],
        beta: vec![],
    };

    let w = inner_weights(&domain, &init.sigma_nd).unwrap();
    let active: Vec<usize> = (0..w.len()).filter(|i| w[*i] > 0.0).collect();
    let r = init.n_samples();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut modes = DMatrix::zeros(w.len(), active.len());
    let mut coeffs = DMatrix::zeros(r, active.len());
    for (j, i) in active.iter().enumerate() {
        modes[(*i, j)] = 1.0 / w[*i].sqrt();
        // Five percent relative spread keeps every realization positive.
        let sd = 0.05 * init.mean[*i];
        for o in 0..r {
            let z: f64 = StandardNormal.sample(&mut rng);
            coeffs[(o, j)] = w[*i].sqrt() * sd * z;
        }
        let m = coeffs.column(j).mean();
        coeffs.column_mut(j).add_scalar_mut(-m);
    }
    let mut state = DOState { modes, coeffs, ..init };
    let truth = truth_from_initial(&cfg, &domain, state.realization(0).as_slice().to_vec()).unwrap();

    let dt = cfg.time.dt;
    let solver = FlowSolver::new(&domain, cfg.flow, dt).unwrap();
    let mut flow = solver.initial_state().unwrap();
    let tr = Transport::new(&domain, cfg.numerics.advection, cfg.numerics.kappa, dt).unwrap();
    let mut dynamics = Dynamics::new(&domain, cfg.stochastic.model, cfg.bio, tr, dt, None).unwrap();
    // Stencil cells index the tracer-major state, so one batch covers every tracer.
    let stencils: Vec<_> = active.iter().map(|i| vec![(*i, 1.0)]).collect();
    let mut next = 0;
    for step in 1..=cfg.n_steps() {
        solver.step(&mut flow).unwrap();
        dynamics.advance(&mut state, &dev, &face_velocities_for_tracers(&flow)).unwrap();
        let t = step as f64 * dt;
        if next < truth.times.len() && (t - truth.times[next]).abs() <= 0.5 * dt {
            let ts = &truth.states[next];
            let errors = |st: &DOState| {
                (0..3)
                    .map(|k| rmse(&domain, st, &ts[k * nc..(k + 1) * nc], k))
                    .collect::<Vec<_>>()
            };
            let before = errors(&state);
            let batch = ObservationBatch {
                time: t,
                tracer: 0,
                values: active.iter().map(|i| ts[*i]).collect(),
                stencils: stencils.clone(),
                noise_var: vec![1e-10; active.len()],
            };
            assimilate(&mut state, &mut dev, &batch, &FilterConfig::default(), &mut rng).unwrap();
            let after = errors(&state);
            for k in 0..3 {
                assert!(after[k] < before[k], "t {t} tracer {k}: {} -> {}", before[k], after[k]);
            }
            assert!(dev.devs.iter().all(|v| *v == 0.0));
            next += 1;
        }
    }
    assert_eq!(next, 11);
    let (_, std) = moments(&state, 3);
    assert!(std.data.iter().all(|v| v.is_finite()));
}
