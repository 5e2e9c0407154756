//! Fast self-checks run by the command-line `verify` gate.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_chacha::ChaCha8Rng;

use crate::balance::{equilibrium_profile, JointSample};
use crate::bgc::{jacobians_fd_check, rates_into, BioParams, CheckPoint, ModelId};
use crate::do_engine::{inner_weights, reorthonormalize, DOState, Dynamics, ParamDeviations};
use crate::error::Result;
use crate::flow::{face_velocities_for_tracers, FlowConfig, FlowSolver};
use crate::geometry::{Domain, DomainConfig};
use crate::gmm::{fit_em, select_k_bic, update_mixture, EmConfig, GaussianMixture};
use crate::model_space::PiecewiseBasis;
use crate::transport::{AdvectionScheme, Transport};
use crate::twin::{row_heights, ExperimentConfig};

pub const ALL_MODELS: [ModelId; 6] = [
    ModelId::Npz,
    ModelId::Npzd,
    ModelId::Nnpzd,
    ModelId::NpzQuadMort,
    ModelId::NpzdUnified,
    ModelId::NnpzdQuadMort,
];

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Random admissible point: positive tracers, light in `[0, Vm]`, parameters within a factor
/// of two of the defaults, formulation and complexity parameters in `[0, 1]`.
pub fn random_point<R: Rng + ?Sized>(model: ModelId, rng: &mut R) -> CheckPoint {
    let base = BioParams::default();
    let mut p = base;
    for id in crate::bgc::ParamId::ALL {
        p.set(id, base.get(id) * rng.random_range(0.5..2.0));
    }
    p.gamma_eg = rng.random_range(0.0..1.0);
    CheckPoint {
        x: (0..model.n_tracers()).map(|_| rng.random_range(1e-4..1.0)).collect(),
        g: rng.random_range(0.0..p.vm),
        params: p,
        alpha: (0..model.n_alpha()).map(|_| rng.random::<f64>()).collect(),
        beta: (0..model.n_beta()).map(|_| rng.random::<f64>()).collect(),
    }
}

pub fn conservation(rng: &mut ChaCha8Rng, n: usize) -> CheckResult {
    let basis = PiecewiseBasis::uniform(0.0, 0.3, 10).expect("valid basis");
    let mut worst = 0.0f64;
    for model in ALL_MODELS {
        for _ in 0..n {
            let pt = random_point(model, rng);
            let gamma: Vec<f64> = (0..basis.n_nodes()).map(|_| rng.random_range(0.0..0.08)).collect();
            let mut r = vec![0.0; model.n_tracers()];
            rates_into(model, &pt.x, pt.g, &pt.params, &pt.alpha, &pt.beta, Some((&basis, &gamma)), &mut r);
            let scale = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if scale > 0.0 {
                worst = worst.max(r.iter().sum::<f64>().abs() / scale);
            }
        }
    }
    CheckResult {
        name: "conservation",
        passed: worst <= 1e-12,
        detail: format!("max |sum S| / max |S| = {worst:.2e}"),
    }
}

pub fn jacobians(rng: &mut ChaCha8Rng, n: usize) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for model in ALL_MODELS {
        for _ in 0..n {
            worst = worst.max(jacobians_fd_check(model, &random_point(model, rng), 1e-6)?);
        }
    }
    Ok(CheckResult {
        name: "jacobians",
        passed: worst < 1e-6,
        detail: format!("max scaled gap to central differences = {worst:.2e}"),
    })
}

pub fn basis(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let b = PiecewiseBasis::uniform(0.0, 0.3, 10)?;
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let z = rng.random_range(-0.1..0.4);
        let s: f64 = (0..b.n_nodes()).map(|k| b.eval(k, z)).sum();
        worst = worst.max((s - 1.0).abs());
        let (a, c) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let g: Vec<f64> = b.nodes().iter().map(|x| a * x + c).collect();
        let zc = b.clamp(z).0;
        worst = worst.max((b.expand(&g, z) - (a * zc + c)).abs());
    }
    Ok(CheckResult {
        name: "basis",
        passed: worst <= 1e-14,
        detail: format!("partition-of-unity and affine reproduction error = {worst:.2e}"),
    })
}

pub fn kalman_equivalence(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let d = 4;
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let cov = &a * a.transpose() + DMatrix::identity(d, d) * 0.1;
    let mu = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
    let h = DMatrix::from_fn(2, d, |_, _| rng.random_range(-1.0..1.0));
    let y = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
    let r = [0.3, 0.2];
    let prior = GaussianMixture {
        weights: vec![1.0],
        means: vec![mu.clone()],
        covs: vec![cov.clone()],
    };
    let post = update_mixture(&prior, &h, &y, &r)?;
    let rm = DMatrix::from_diagonal(&DVector::from_column_slice(&r));
    let s = &h * &cov * h.transpose() + rm;
    let k = &cov * h.transpose() * s.try_inverse().expect("innovation covariance is invertible");
    let m = &mu + &k * (&y - &h * &mu);
    let c = (DMatrix::identity(d, d) - &k * &h) * &cov;
    let gap = (&post.mixture.means[0] - m).amax().max((&post.mixture.covs[0] - c).amax());
    Ok(CheckResult {
        name: "kalman",
        passed: gap <= 1e-12,
        detail: format!("single-component update vs Kalman = {gap:.2e}"),
    })
}

pub fn em_monotone(rng: &mut ChaCha8Rng, datasets: usize) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for _ in 0..datasets {
        let k = rng.random_range(2..5);
        let x = DMatrix::from_fn(200, 3, |i, _| (i % 3) as f64 * 2.0 + rng.random_range(-1.0..1.0));
        let fit = fit_em(&x, k, &EmConfig::default(), rng)?;
        let mut bounds = fit.restarts.clone();
        bounds.push(fit.trace.len());
        let mut lo = 0;
        for hi in bounds {
            for w in fit.trace[lo..hi.max(lo)].windows(2) {
                worst = worst.max((w[0] - w[1]) / w[0].abs().max(1.0));
            }
            lo = hi;
        }
    }
    Ok(CheckResult {
        name: "em-monotone",
        passed: worst <= 1e-12,
        detail: format!("largest relative log-likelihood decrease = {worst:.2e}"),
    })
}

pub fn do_monte_carlo(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let cfg = DomainConfig {
        nx: 30,
        nz: 10,
        lx: 3.0,
        lz: 1.0,
        ridge_height: 0.0,
        ridge_center: 1.5,
        ..DomainConfig::default()
    };
    let domain = Domain::new(&cfg)?;
    let dt = 0.01;
    let solver = FlowSolver::new(&domain, FlowConfig::default(), dt)?;
    let mut flow = solver.initial_state()?;
    let tr = Transport::new(&domain, AdvectionScheme::Upwind, 1e-3, dt)?;
    let mut dynamics = Dynamics::new(&domain, ModelId::Npz, BioParams::default(), tr, dt, None)?;
    dynamics.reactions = false;
    let (n, r) = (dynamics.n_state(), 12);
    let nc = domain.grid.n_cells();
    let ens = DMatrix::from_fn(n, r, |i, _| if domain.fluid(i % nc) { rng.random_range(0.0..1.0) } else { 0.0 });
    let mean = ens.column_sum() / r as f64;
    let mut modes = ens.clone();
    for mut c in modes.column_iter_mut() {
        c -= &mean;
    }
    let mut coeffs = DMatrix::identity(r, r);
    let w = inner_weights(&domain, &[1.0; 3])?;
    reorthonormalize(&mut modes, &mut coeffs, &w);
    let mut st = DOState {
        mean,
        modes,
        coeffs,
        sigma_nd: vec![1.0; 3],
        time: 0.0,
    };
    let dev = ParamDeviations::from_samples(vec![], 0, 0, 0, &DMatrix::zeros(r, 0));
    let mut mc = ens;
    for _ in 0..100 {
        solver.step(&mut flow)?;
        let vel = face_velocities_for_tracers(&flow);
        dynamics.advance(&mut st, &dev, &vel)?;
        for mut c in mc.column_iter_mut() {
            dynamics.transport_state(c.as_mut_slice(), &vel);
        }
    }
    let mut gap = 0.0f64;
    for o in 0..r {
        gap = gap.max((st.realization(o) - mc.column(o)).amax());
    }
    Ok(CheckResult {
        name: "do-monte-carlo",
        passed: gap <= 1e-8,
        detail: format!("max gap between reconstructed and direct realizations = {gap:.2e}"),
    })
}

pub fn equilibria(rng: &mut ChaCha8Rng, per_experiment: usize) -> Result<CheckResult> {
    let mut worst_res = 0.0f64;
    let mut worst_sum = 0.0f64;
    let mut failures = 0;
    for id in 1..=4u8 {
        let cfg = ExperimentConfig::preset(id)?.scaled(0.25)?;
        let domain = Domain::new(&cfg.domain)?;
        let basis = cfg.basis()?;
        let heights = row_heights(&domain);
        let tp = cfg.biomass_profile();
        for _ in 0..per_experiment {
            let mut p = cfg.bio;
            for u in &cfg.stochastic.theta {
                p.set(u.param, rng.random_range(u.lo..=u.hi));
            }
            let m = cfg.stochastic.model;
            let s = JointSample {
                params: p,
                alpha: (0..m.n_alpha()).map(|_| rng.random_range(0..2) as f64).collect(),
                beta: (0..m.n_beta()).map(|_| rng.random_range(0..2) as f64).collect(),
                gamma: basis.as_ref().map(|b| b.nodes().iter().map(|z| 0.2 * z * z).collect()),
            };
            match equilibrium_profile(m, &s, basis.as_ref(), &tp, &heights, cfg.domain.lz, rng) {
                Ok(prof) => {
                    worst_res = worst_res.max(prof.max_residual);
                    for (row, z) in prof.values.iter().zip(&heights) {
                        worst_sum = worst_sum.max((row.iter().sum::<f64>() - tp.at(*z)).abs());
                    }
                }
                Err(_) => failures += 1,
            }
        }
    }
    Ok(CheckResult {
        name: "equilibria",
        passed: failures == 0 && worst_res <= 1e-8 && worst_sum == 0.0,
        detail: format!("residual {worst_res:.2e}, biomass gap {worst_sum:.2e}, failures {failures}"),
    })
}

/// Posterior of a two-component prior under a scalar observation against Bayes' rule on a
/// dense grid, in one and two dimensions; reports the larger total-variation distance.
pub fn mixture_grid_oracle() -> Result<CheckResult> {
    let prior1 = GaussianMixture {
        weights: vec![0.35, 0.65],
        means: vec![DVector::from_element(1, -1.5), DVector::from_element(1, 1.0)],
        covs: vec![DMatrix::from_element(1, 1, 0.4), DMatrix::from_element(1, 1, 0.9)],
    };
    let post1 = update_mixture(&prior1, &DMatrix::from_element(1, 1, 1.0), &DVector::from_element(1, 0.3), &[0.5])?;
    let (lo, hi, n) = (-10.0, 10.0, 20001);
    let dx = (hi - lo) / (n - 1) as f64;
    let mut bayes = Vec::with_capacity(n);
    let mut model = Vec::with_capacity(n);
    for i in 0..n {
        let x = DVector::from_element(1, lo + i as f64 * dx);
        let lik = -0.5 * (0.3 - x[0]).powi(2) / 0.5;
        bayes.push((prior1.log_pdf(&x) + lik).exp());
        model.push(post1.mixture.log_pdf(&x).exp());
    }
    let tv1 = total_variation(&bayes, &model, dx);

    let c = |a: f64, b: f64, r: f64| DMatrix::from_row_slice(2, 2, &[a, r, r, b]);
    let prior2 = GaussianMixture {
        weights: vec![0.5, 0.5],
        means: vec![DVector::from_vec(vec![-1.0, 0.5]), DVector::from_vec(vec![1.5, -0.5])],
        covs: vec![c(0.5, 0.3, 0.1), c(0.4, 0.6, -0.2)],
    };
    let h = DMatrix::from_row_slice(1, 2, &[0.7, -0.4]);
    let post2 = update_mixture(&prior2, &h, &DVector::from_element(1, 0.2), &[0.3])?;
    let (lo, hi, n) = (-6.0, 6.0, 801);
    let d = (hi - lo) / (n - 1) as f64;
    let mut bayes = Vec::with_capacity(n * n);
    let mut model = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let x = DVector::from_vec(vec![lo + i as f64 * d, lo + j as f64 * d]);
            let lik = -0.5 * (0.2 - (&h * &x)[0]).powi(2) / 0.3;
            bayes.push((prior2.log_pdf(&x) + lik).exp());
            model.push(post2.mixture.log_pdf(&x).exp());
        }
    }
    let tv2 = total_variation(&bayes, &model, d * d);
    let tv = tv1.max(tv2);
    Ok(CheckResult {
        name: "mixture-grid",
        passed: tv < 1e-3,
        detail: format!("total variation to grid Bayes: 1-D {tv1:.2e}, 2-D {tv2:.2e}"),
    })
}

fn total_variation(unnormalized: &[f64], density: &[f64], cell: f64) -> f64 {
    let z: f64 = unnormalized.iter().sum::<f64>() * cell;
    0.5 * unnormalized.iter().zip(density).map(|(b, m)| (b / z - m).abs()).sum::<f64>() * cell
}

/// Order selection on well-separated clusters with one and two true components.
pub fn bic_recovery(seeds: u64) -> Result<CheckResult> {
    let mut hits = [0usize; 2];
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        for (slot, k_true) in [1usize, 2].into_iter().enumerate() {
            let x = DMatrix::from_fn(400, 2, |i, j| {
                let centre = if k_true == 2 && i % 2 == 1 { 6.0 } else { 0.0 };
                let e: f64 = StandardNormal.sample(&mut rng);
                centre * (1.0 - j as f64 * 0.5) + e
            });
            if select_k_bic(&x, 6, 3, &EmConfig::default(), &mut rng)?.k == k_true {
                hits[slot] += 1;
            }
        }
    }
    let need = (seeds * 9).div_ceil(10) as usize;
    Ok(CheckResult {
        name: "bic-recovery",
        passed: hits.iter().all(|h| *h >= need),
        detail: format!("K=1 recovered {}/{seeds}, K=2 recovered {}/{seeds}", hits[0], hits[1]),
    })
}

/// Runs every suite with a fixed seed.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(vec![
        conservation(&mut rng, 1000),
        jacobians(&mut rng, 1000)?,
        basis(&mut rng)?,
        kalman_equivalence(&mut rng)?,
        mixture_grid_oracle()?,
        em_monotone(&mut rng, 50)?,
        bic_recovery(20)?,
        do_monte_carlo(&mut rng)?,
        equilibria(&mut rng, 200)?,
    ])
}
