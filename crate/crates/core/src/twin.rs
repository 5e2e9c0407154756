//! Twin experiments: a deterministic truth, noisy sparse observations of it, and the
//! forecast-assimilate loop of the stochastic model, with the learning metrics.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::balance::{
    draw_balanced, equilibrium_profile, init_do_from_profiles, profile_sigma, BiomassProfile, EquilibriumProfile,
    InitReport, JointSample,
};
use crate::bgc::{BioParams, ModelId, ParamId};
use crate::do_engine::{moments, DOState, Dynamics, ParamDeviations};
use crate::error::{Error, Result};
use crate::filter::{assimilate, bilinear_stencil, posterior_presence_probability, FilterConfig, ObservationBatch, UpdateReport};
use crate::flow::{face_velocities_for_tracers, FlowConfig, FlowSolver, FlowState};
use crate::geometry::{Domain, DomainConfig};
use crate::gmm::EmConfig;
use crate::model_space::{sample_discrete_prior, sample_gamma_prior, GammaPrior, PiecewiseBasis};
use crate::transport::{AdvectionScheme, Transport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub dt: f64,
    pub t_end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamValue {
    pub param: ParamId,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniformPrior {
    pub param: ParamId,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthConfig {
    pub model: ModelId,
    #[serde(default)]
    pub params: Vec<ParamValue>,
    #[serde(default)]
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnknownFunctionConfig {
    pub lo: f64,
    pub hi: f64,
    pub intervals: usize,
    pub g_max: f64,
    pub smoothness: f64,
    pub pin_first: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StochasticConfig {
    pub model: ModelId,
    #[serde(default)]
    pub theta: Vec<UniformPrior>,
    /// Probability that the formulation parameter equals one.
    #[serde(default)]
    pub alpha_p1: Option<f64>,
    /// Probability that the complexity parameter equals one.
    #[serde(default)]
    pub beta_p1: Option<f64>,
    #[serde(default)]
    pub unknown: Option<UnknownFunctionConfig>,
    pub n_s: usize,
    pub n_r: usize,
    /// Fill modes beyond the initial ensemble rank with zero-coefficient directions.
    pub pad_modes: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationConfig {
    pub tracer: String,
    pub count: usize,
    pub x_lo: f64,
    pub x_hi: f64,
    /// Sensor heights above the bottom, cycled over the sensors.
    pub heights: Vec<f64>,
    pub start: f64,
    pub interval: f64,
    pub end: f64,
    pub noise_std: f64,
}

impl ObservationConfig {
    pub fn times(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut k = 0;
        loop {
            let t = self.start + self.interval * k as f64;
            if t > self.end + 1e-9 {
                break;
            }
            out.push(t);
            k += 1;
        }
        out
    }

    pub fn locations(&self) -> Vec<(f64, f64)> {
        (0..self.count)
            .map(|o| {
                let x = if self.count > 1 {
                    self.x_lo + (self.x_hi - self.x_lo) * o as f64 / (self.count - 1) as f64
                } else {
                    0.5 * (self.x_lo + self.x_hi)
                };
                (x, self.heights[o % self.heights.len()])
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSettings {
    pub enabled: bool,
    pub k_max: usize,
    pub patience: usize,
    pub em_tol: f64,
    pub em_max_iter: usize,
}

impl Default for FilterSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            k_max: 15,
            patience: 3,
            em_tol: 1e-8,
            em_max_iter: 500,
        }
    }
}

impl FilterSettings {
    pub fn filter_config(&self) -> FilterConfig {
        FilterConfig {
            k_max: self.k_max,
            patience: self.patience,
            em: EmConfig {
                tol: self.em_tol,
                max_iter: self.em_max_iter,
                ..EmConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericsConfig {
    pub advection: AdvectionScheme,
    pub kappa: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiomassConfig {
    pub surface: f64,
    pub bottom: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: u8,
    pub seed: u64,
    pub domain: DomainConfig,
    pub flow: FlowConfig,
    pub time: TimeConfig,
    pub numerics: NumericsConfig,
    pub biomass: BiomassConfig,
    /// Non-dimensional parameters shared by truth and stochastic model before overrides.
    pub bio: BioParams,
    pub truth: TruthConfig,
    pub stochastic: StochasticConfig,
    pub observations: ObservationConfig,
    pub filter: FilterSettings,
}

fn npz_observations(tracer: &str, count: usize, start: f64, interval: f64, noise_std: f64) -> ObservationConfig {
    ObservationConfig {
        tracer: tracer.into(),
        count,
        x_lo: 9.5,
        x_hi: 13.5,
        heights: vec![1.8, 1.4],
        start,
        interval,
        end: 25.0,
        noise_std,
    }
}

impl ExperimentConfig {
    /// Full-resolution settings of the four reference experiments.
    pub fn preset(id: u8) -> Result<Self> {
        let lambda = |v: f64| ParamValue {
            param: ParamId::Lambda,
            value: v,
        };
        let mut cfg = Self {
            id,
            seed: 1,
            domain: DomainConfig::default(),
            flow: FlowConfig::default(),
            time: TimeConfig {
                dt: 1.0 / 120.0,
                t_end: 25.0,
            },
            numerics: NumericsConfig {
                advection: AdvectionScheme::TvdMc,
                kappa: 0.0,
            },
            biomass: BiomassConfig {
                surface: 1.0 / 3.0,
                bottom: 1.0,
            },
            bio: BioParams::default(),
            truth: TruthConfig {
                model: ModelId::NpzQuadMort,
                params: vec![lambda(3.6)],
                alpha: vec![1.0],
                beta: vec![],
            },
            stochastic: StochasticConfig {
                model: ModelId::NpzQuadMort,
                theta: vec![UniformPrior {
                    param: ParamId::Lambda,
                    lo: 3.0,
                    hi: 6.0,
                }],
                alpha_p1: Some(0.5),
                beta_p1: None,
                unknown: None,
                n_s: 20,
                n_r: 10_000,
                pad_modes: true,
            },
            observations: npz_observations("Z", 6, 5.0, 2.0, 0.05),
            filter: FilterSettings::default(),
        };
        match id {
            1 => {}
            2 => {
                cfg.truth = TruthConfig {
                    model: ModelId::NpzdUnified,
                    params: vec![lambda(3.6)],
                    alpha: vec![],
                    beta: vec![0.0],
                };
                cfg.stochastic.model = ModelId::NpzdUnified;
                cfg.stochastic.alpha_p1 = None;
                cfg.stochastic.beta_p1 = Some(0.5);
                cfg.stochastic.n_s = 40;
            }
            3 => {
                cfg.bio.lambda = 3.9;
                cfg.bio.gamma_eg = 0.2;
                cfg.truth.params.clear();
                cfg.stochastic = StochasticConfig {
                    model: ModelId::Npz,
                    theta: vec![],
                    alpha_p1: None,
                    beta_p1: None,
                    unknown: Some(UnknownFunctionConfig {
                        lo: 0.0,
                        hi: 0.3,
                        intervals: 10,
                        g_max: 0.08,
                        smoothness: 0.35 * 0.08,
                        pin_first: true,
                    }),
                    n_s: 20,
                    n_r: 1_000,
                    pad_modes: true,
                };
                cfg.observations = npz_observations("N", 8, 1.0, 2.0, 0.035);
            }
            4 => {
                cfg.flow.reynolds = 500.0;
                let v = |param, value| ParamValue { param, value };
                cfg.truth = TruthConfig {
                    model: ModelId::NnpzdQuadMort,
                    params: vec![
                        lambda(1.5),
                        v(ParamId::Xi, 0.04),
                        v(ParamId::Rm, 0.6),
                        v(ParamId::Gamma, 0.14),
                    ],
                    alpha: vec![0.0],
                    beta: vec![],
                };
                let u = |param, lo, hi| UniformPrior { param, lo, hi };
                cfg.stochastic.model = ModelId::NnpzdQuadMort;
                cfg.stochastic.theta = vec![
                    u(ParamId::Xi, 0.01, 0.08),
                    u(ParamId::Gamma, 0.125, 0.15),
                    u(ParamId::Rm, 0.52, 0.72),
                    u(ParamId::Lambda, 1.4, 2.2),
                ];
                cfg.stochastic.n_s = 15;
                cfg.observations = npz_observations("P", 9, 2.0, 1.0, 0.04);
            }
            _ => return Err(Error::Config(format!("unknown experiment id {id}"))),
        }
        Ok(cfg)
    }

    /// Uniform reduction: grid counts and ensemble size scale by `s`, the time step by `1/s`
    /// so the Courant number is unchanged.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Config(format!("scale {s} must be positive")));
        }
        let mut out = self.clone();
        let round = |n: usize| ((n as f64 * s).round() as usize).max(1);
        out.domain.nx = round(self.domain.nx);
        out.domain.nz = round(self.domain.nz);
        out.stochastic.n_r = round(self.stochastic.n_r);
        out.time.dt = self.time.dt / s;
        Ok(out)
    }

    pub fn biomass_profile(&self) -> BiomassProfile {
        BiomassProfile {
            surface: self.biomass.surface,
            bottom: self.biomass.bottom,
            depth: self.domain.lz,
        }
    }

    pub fn truth_params(&self) -> BioParams {
        let mut p = self.bio;
        for v in &self.truth.params {
            p.set(v.param, v.value);
        }
        p
    }

    pub fn basis(&self) -> Result<Option<PiecewiseBasis>> {
        self.stochastic
            .unknown
            .map(|u| PiecewiseBasis::uniform(u.lo, u.hi, u.intervals))
            .transpose()
    }

    pub fn n_steps(&self) -> usize {
        (self.time.t_end / self.time.dt).round() as usize
    }

    /// Index of the observed tracer in the truth and stochastic models.
    pub fn observed_tracers(&self) -> Result<(usize, usize)> {
        let name = &self.observations.tracer;
        let t = self.truth.model.tracer_index(name);
        let s = self.stochastic.model.tracer_index(name);
        match (t, s) {
            (Some(t), Some(s)) => Ok((t, s)),
            _ => Err(Error::Config(format!("observed tracer {name} missing from a model"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let domain = Domain::new(&self.domain)?;
        self.truth_params().validate()?;
        self.bio.validate()?;
        self.biomass_profile().validate()?;
        if !(self.time.dt > 0.0 && self.time.t_end > 0.0) {
            return Err(Error::Config("time step and end time must be positive".into()));
        }
        let st = &self.stochastic;
        if st.alpha_p1.is_some() != (st.model.n_alpha() > 0) {
            return Err(Error::Config("formulation prior must match the stochastic model".into()));
        }
        if st.beta_p1.is_some() != (st.model.n_beta() > 0) {
            return Err(Error::Config("complexity prior must match the stochastic model".into()));
        }
        if self.truth.alpha.len() < self.truth.model.n_alpha() || self.truth.beta.len() < self.truth.model.n_beta() {
            return Err(Error::MissingParameter("true formulation or complexity parameter"));
        }
        if st.theta.iter().any(|p| !(p.hi > p.lo)) {
            return Err(Error::Config("uniform priors need hi > lo".into()));
        }
        if st.n_r <= st.n_s || st.n_s == 0 {
            return Err(Error::Config(format!("need 0 < n_s ({}) < n_r ({})", st.n_s, st.n_r)));
        }
        self.basis()?;
        self.observed_tracers()?;
        let obs = &self.observations;
        if obs.count == 0 || obs.heights.is_empty() || !(obs.noise_std >= 0.0) || !(obs.interval > 0.0) {
            return Err(Error::Config("observation settings incomplete".into()));
        }
        let times = obs.times();
        if times.is_empty() || times.iter().any(|t| *t <= 0.0 || *t > self.time.t_end + 1e-9) {
            return Err(Error::Config("observation times must lie in (0, t_end]".into()));
        }
        for (x, z) in obs.locations() {
            bilinear_stencil(&domain, x, z)?;
        }
        Ok(())
    }
}

/// Independent random stream derived from the run seed.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const STREAM_TRUTH: u64 = 1;
const STREAM_OBS: u64 = 2;
const STREAM_PRIOR: u64 = 3;
const STREAM_FILTER: u64 = 4;

/// Cell-centre heights of the grid rows, bottom first.
pub fn row_heights(domain: &Domain) -> Vec<f64> {
    (0..domain.grid.nz).map(|j| domain.grid.z_center(j)).collect()
}

/// Horizontally uniform tracer-major state from a profile; solid cells hold zero.
pub fn fields_from_profile(domain: &Domain, profile: &EquilibriumProfile, n_tracers: usize) -> Vec<f64> {
    let nc = domain.grid.n_cells();
    let mut out = vec![0.0; n_tracers * nc];
    for c in 0..nc {
        if domain.fluid(c) {
            let j = c / domain.grid.nx;
            for k in 0..n_tracers {
                out[k * nc + c] = profile.values[j][k];
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthTrajectory {
    pub model: ModelId,
    pub times: Vec<f64>,
    /// Tracer-major states at `times`.
    pub states: Vec<Vec<f64>>,
    pub flows: Vec<FlowState>,
    pub initial: Vec<f64>,
    pub final_state: Vec<f64>,
}

/// Integrates the truth and keeps snapshots at the observation times.
pub fn generate_truth(cfg: &ExperimentConfig) -> Result<TruthTrajectory> {
    let domain = Domain::new(&cfg.domain)?;
    let p = cfg.truth_params();
    let sample = JointSample {
        params: p,
        alpha: cfg.truth.alpha.clone(),
        beta: cfg.truth.beta.clone(),
        gamma: None,
    };
    let mut rng = stream(cfg.seed, STREAM_TRUTH);
    let prof = equilibrium_profile(
        cfg.truth.model,
        &sample,
        None,
        &cfg.biomass_profile(),
        &row_heights(&domain),
        cfg.domain.lz,
        &mut rng,
    )?;
    let initial = fields_from_profile(&domain, &prof, cfg.truth.model.n_tracers());
    truth_from_initial(cfg, &domain, initial)
}

/// Truth integration from a given initial state.
pub fn truth_from_initial(cfg: &ExperimentConfig, domain: &Domain, initial: Vec<f64>) -> Result<TruthTrajectory> {
    let dt = cfg.time.dt;
    let solver = FlowSolver::new(domain, cfg.flow, dt)?;
    let mut flow = solver.initial_state()?;
    let transport = Transport::new(domain, cfg.numerics.advection, cfg.numerics.kappa, dt)?;
    let mut dynamics = Dynamics::new(domain, cfg.truth.model, cfg.truth_params(), transport, dt, None)?;
    let obs_times = cfg.observations.times();
    let mut out = TruthTrajectory {
        model: cfg.truth.model,
        times: Vec::new(),
        states: Vec::new(),
        flows: Vec::new(),
        initial: initial.clone(),
        final_state: Vec::new(),
    };
    let mut state = initial;
    let mut next = 0;
    for step in 1..=cfg.n_steps() {
        solver.step(&mut flow)?;
        let vel = face_velocities_for_tracers(&flow);
        dynamics
            .deterministic_step(&mut state, &dynamics.bio.clone(), &cfg.truth.alpha, &cfg.truth.beta, None, &vel)
            .map_err(|e| with_time(e, step as f64 * dt))?;
        let t = step as f64 * dt;
        if next < obs_times.len() && (t - obs_times[next]).abs() <= 0.5 * dt {
            out.times.push(obs_times[next]);
            out.states.push(state.clone());
            out.flows.push(flow.clone());
            next += 1;
        }
    }
    out.final_state = state;
    Ok(out)
}

fn with_time(e: Error, time: f64) -> Error {
    match e {
        Error::NonFinite { term, .. } => Error::NonFinite { term, time },
        other => other,
    }
}

/// Noisy bilinear samples of the observed truth tracer.
///
/// The stored noise variance is floored at `1e-12` so a zero-noise override still yields a
/// valid batch; the values themselves are noise-free in that case.
pub fn observe<R: Rng + ?Sized>(
    cfg: &ExperimentConfig,
    domain: &Domain,
    truth_state: &[f64],
    time: f64,
    rng: &mut R,
) -> Result<ObservationBatch> {
    let (ti, si) = cfg.observed_tracers()?;
    let nc = domain.grid.n_cells();
    let std = cfg.observations.noise_std;
    let mut stencils = Vec::new();
    let mut values = Vec::new();
    for (x, z) in cfg.observations.locations() {
        let st = bilinear_stencil(domain, x, z)?;
        let clean: f64 = st.iter().map(|(c, w)| w * truth_state[ti * nc + c]).sum();
        let noise: f64 = if std > 0.0 { std * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
        values.push(clean + noise);
        stencils.push(st);
    }
    let n = values.len();
    Ok(ObservationBatch {
        time,
        tracer: si,
        values,
        stencils,
        noise_var: vec![(std * std).max(1e-12); n],
    })
}

/// `sqrt(|D|^-1 sum vol E[(phi_k - truth)^2])` over fluid cells, from mean bias and DO variance.
pub fn rmse(domain: &Domain, state: &DOState, truth_field: &[f64], tracer: usize) -> f64 {
    let nc = domain.grid.n_cells();
    let off = tracer * nc;
    let c = state.coeff_covariance();
    let block = state.modes.rows(off, nc);
    let var = (&block * &c).component_mul(&block).column_sum();
    let vol = domain.grid.cell_volume();
    let mut acc = 0.0;
    for cell in 0..nc {
        if domain.fluid(cell) {
            let b = state.mean[off + cell] - truth_field[cell];
            acc += vol * (b * b + var[cell].max(0.0));
        }
    }
    (acc / domain.fluid_area).sqrt()
}

/// `sqrt((mean - truth)^2 + var)` of a parameter column.
pub fn param_rmse(samples: &[f64], truth: f64) -> f64 {
    let (m, v) = mean_var(samples);
    ((m - truth) * (m - truth) + v).sqrt()
}

pub fn mean_var(samples: &[f64]) -> (f64, f64) {
    let n = samples.len().max(1) as f64;
    let m = samples.iter().sum::<f64>() / n;
    let v = samples.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v)
}

/// Silverman's rule `0.9 min(sd, IQR / 1.34) n^(-1/5)`; falls back to whichever spread is positive.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return 0.0;
    }
    let (_, v) = mean_var(samples);
    let sd = v.sqrt();
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
    };
    let iqr = (q(0.75) - q(0.25)) / 1.34;
    let spread = match (sd > 0.0, iqr > 0.0) {
        (true, true) => sd.min(iqr),
        (true, false) => sd,
        (false, true) => iqr,
        (false, false) => 0.0,
    };
    0.9 * spread * (n as f64).powf(-0.2)
}

/// Gaussian kernel density on `grid`; the bandwidth is at least the grid spacing.
pub fn kde_pdf(samples: &[f64], grid: &[f64]) -> Vec<f64> {
    let spacing = if grid.len() > 1 {
        (grid[grid.len() - 1] - grid[0]).abs() / (grid.len() - 1) as f64
    } else {
        1.0
    };
    let h = silverman_bandwidth(samples).max(spacing);
    let n = samples.len().max(1) as f64;
    let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    grid.iter()
        .map(|x| samples.iter().map(|s| (-0.5 * ((x - s) / h).powi(2)).exp()).sum::<f64>() * norm)
        .collect()
}

/// Evenly spaced grid covering the samples plus four bandwidths on each side.
pub fn kde_grid(samples: &[f64], points: usize) -> Vec<f64> {
    let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut h = silverman_bandwidth(samples);
    if !(h > 0.0) {
        h = 1e-3 * lo.abs().max(1.0);
    }
    let (a, b) = (lo - 4.0 * h, hi + 4.0 * h);
    (0..points).map(|i| a + (b - a) * i as f64 / (points - 1) as f64).collect()
}

/// Number of interior local maxima whose height exceeds `frac` of the global maximum.
pub fn count_modes(density: &[f64], frac: f64) -> usize {
    let top = density.iter().cloned().fold(0.0, f64::max);
    (1..density.len().saturating_sub(1))
        .filter(|&i| density[i] > density[i - 1] && density[i] >= density[i + 1] && density[i] > frac * top)
        .count()
}

/// Grid point of the density maximum.
pub fn density_mode(grid: &[f64], density: &[f64]) -> f64 {
    let i = (0..density.len()).fold(0, |b, i| if density[i] > density[b] { i } else { b });
    grid[i]
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub time: f64,
    pub series: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdeRecord {
    pub time: f64,
    pub stage: String,
    pub param: String,
    pub x: f64,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub experiment: u8,
    pub seed: u64,
    pub records: Vec<MetricRecord>,
    pub kde: Vec<KdeRecord>,
}

impl MetricsReport {
    pub fn push(&mut self, time: f64, series: impl Into<String>, value: f64) {
        self.records.push(MetricRecord {
            time,
            series: series.into(),
            value,
        });
    }

    /// `(time, value)` pairs of one series in insertion order.
    pub fn series(&self, name: &str) -> Vec<(f64, f64)> {
        self.records.iter().filter(|r| r.series == name).map(|r| (r.time, r.value)).collect()
    }

    pub fn last(&self, name: &str) -> Option<f64> {
        self.records.iter().rev().find(|r| r.series == name).map(|r| r.value)
    }

    pub fn series_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for r in &self.records {
            if !names.contains(&r.series) {
                names.push(r.series.clone());
            }
        }
        names
    }

    /// Density snapshot of one parameter at a time and stage.
    pub fn density(&self, time: f64, stage: &str, param: &str) -> (Vec<f64>, Vec<f64>) {
        self.kde
            .iter()
            .filter(|k| k.stage == stage && k.param == param && (k.time - time).abs() < 1e-9)
            .map(|k| (k.x, k.density))
            .unzip()
    }
}

/// Field snapshot kept in memory for output.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub time: f64,
    pub label: String,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunDiagnostics {
    pub steps: usize,
    pub max_orthonormality: f64,
    pub max_divergence: f64,
    pub max_courant: f64,
    pub replaced_modes: usize,
    pub recenterings: usize,
    pub clamped_evaluations: usize,
    pub init_rejected: usize,
    pub init_attempted: usize,
    pub gamma_acceptance: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub report: MetricsReport,
    pub updates: Vec<UpdateReport>,
    pub state: DOState,
    pub params: ParamDeviations,
    pub truth: TruthTrajectory,
    pub init: InitReport,
    pub diagnostics: RunDiagnostics,
    pub snapshots: Vec<Snapshot>,
    /// True value of every stochastic parameter column.
    pub param_truth: Vec<f64>,
}

/// Completed result, or the partial result and the error that stopped the run.
pub struct RunOutcome {
    pub result: ExperimentResult,
    pub failure: Option<Error>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunOptions {
    /// Keep mean, standard-deviation and truth fields at every assimilation time.
    pub keep_snapshots: bool,
}

fn draw_sample<R: Rng + ?Sized>(
    cfg: &ExperimentConfig,
    basis: Option<&PiecewiseBasis>,
    gamma_prior: Option<&GammaPrior>,
    rng: &mut R,
    accept: &mut (usize, f64),
) -> Result<JointSample> {
    let st = &cfg.stochastic;
    let mut params = cfg.bio;
    for p in &st.theta {
        params.set(p.param, rng.random_range(p.lo..=p.hi));
    }
    let alpha = match st.alpha_p1 {
        Some(p1) => sample_discrete_prior(p1, 1, rng)?,
        None => vec![],
    };
    let beta = match st.beta_p1 {
        Some(p1) => sample_discrete_prior(p1, 1, rng)?,
        None => vec![],
    };
    let gamma = match (basis, gamma_prior) {
        (Some(b), Some(gp)) => {
            let (mut g, rate) = sample_gamma_prior(b, gp, 1, rng)?;
            accept.0 += 1;
            accept.1 += rate;
            Some(g.remove(0))
        }
        _ => None,
    };
    Ok(JointSample {
        params,
        alpha,
        beta,
        gamma,
    })
}

/// True value of each stochastic parameter column `[theta | alpha | beta | gamma]`.
///
/// Expansion parameters take the truth's quadratic zooplankton loss at the basis nodes.
pub fn parameter_truth(cfg: &ExperimentConfig, basis: Option<&PiecewiseBasis>) -> Vec<f64> {
    let tp = cfg.truth_params();
    let mut out: Vec<f64> = cfg.stochastic.theta.iter().map(|p| tp.get(p.param)).collect();
    if cfg.stochastic.model.n_alpha() > 0 {
        out.push(cfg.truth.alpha.first().copied().unwrap_or(0.0));
    }
    if cfg.stochastic.model.n_beta() > 0 {
        out.push(cfg.truth.beta.first().copied().unwrap_or(0.0));
    }
    if let Some(b) = basis {
        out.extend(b.nodes().iter().map(|z| true_unknown_function(cfg, *z)));
    }
    out
}

/// The truth's zooplankton loss beyond the linear term, as a function of `Z`.
pub fn true_unknown_function(cfg: &ExperimentConfig, z: f64) -> f64 {
    let a = if cfg.truth.model.n_alpha() > 0 {
        cfg.truth.alpha.first().copied().unwrap_or(0.0)
    } else {
        0.0
    };
    a * cfg.truth_params().gamma_q * z * z
}

/// Truth state mapped onto the stochastic model's tracers by name; absent tracers are zero.
pub fn truth_in_model_space(cfg: &ExperimentConfig, nc: usize, truth: &[f64]) -> Vec<Vec<f64>> {
    cfg.stochastic
        .model
        .tracer_names()
        .iter()
        .map(|name| match cfg.truth.model.tracer_index(name) {
            Some(k) => truth[k * nc..(k + 1) * nc].to_vec(),
            None => vec![0.0; nc],
        })
        .collect()
}

/// Largest gap between the posterior-mean unknown function and the truth on `[lo, hi]`.
pub fn unknown_function_error(cfg: &ExperimentConfig, basis: &PiecewiseBasis, gamma_mean: &[f64], lo: f64, hi: f64) -> f64 {
    (0..=200)
        .map(|i| {
            let z = lo + (hi - lo) * i as f64 / 200.0;
            (basis.expand(gamma_mean, z) - true_unknown_function(cfg, z)).abs()
        })
        .fold(0.0, f64::max)
}

struct Recorder<'a> {
    cfg: &'a ExperimentConfig,
    domain: &'a Domain,
    basis: Option<&'a PiecewiseBasis>,
    names: Vec<String>,
    param_truth: Vec<f64>,
    norm: Option<Vec<f64>>,
}

impl Recorder<'_> {
    /// Raw RMSE of every tracked quantity: tracers first, then parameter columns.
    fn raw(&self, state: &DOState, dev: &ParamDeviations, truth: &[f64]) -> Vec<f64> {
        let nc = self.domain.grid.n_cells();
        let mapped = truth_in_model_space(self.cfg, nc, truth);
        let mut out: Vec<f64> = (0..mapped.len()).map(|k| rmse(self.domain, state, &mapped[k], k)).collect();
        for j in 0..dev.n_params() {
            out.push(param_rmse(&dev.column_samples(j), self.param_truth[j]));
        }
        out
    }

    fn record(
        &mut self,
        report: &mut MetricsReport,
        stage: &str,
        t: f64,
        state: &DOState,
        dev: &ParamDeviations,
        truth: &[f64],
    ) {
        let raw = self.raw(state, dev, truth);
        if self.norm.is_none() {
            self.norm = Some(raw.clone());
        }
        let norm = self.norm.as_ref().expect("set above");
        let prefix = if stage == "prior" { "prior_" } else { "" };
        let tracer_names = self.cfg.stochastic.model.tracer_names();
        let labels: Vec<String> = tracer_names.iter().map(|s| s.to_string()).chain(self.names.iter().cloned()).collect();
        for (q, label) in labels.iter().enumerate() {
            report.push(t, format!("{prefix}rmse:{label}"), raw[q]);
            let n = if norm[q] > 0.0 { raw[q] / norm[q] } else { f64::NAN };
            report.push(t, format!("{prefix}rmse_norm:{label}"), n);
        }
        for (j, name) in self.names.iter().enumerate() {
            let col = dev.column_samples(j);
            let (m, v) = mean_var(&col);
            report.push(t, format!("{prefix}mean:{name}"), m);
            report.push(t, format!("{prefix}std:{name}"), v.sqrt());
            if name.starts_with("alpha") || name.starts_with("beta") {
                report.push(t, format!("{prefix}presence:{name}"), posterior_presence_probability(&col));
            }
            let grid = kde_grid(&col, 200);
            let dens = kde_pdf(&col, &grid);
            for (x, d) in grid.iter().zip(dens) {
                report.kde.push(KdeRecord {
                    time: t,
                    stage: stage.into(),
                    param: name.clone(),
                    x: *x,
                    density: d,
                });
            }
        }
        if let Some(b) = self.basis {
            let g0 = dev.gamma_offset();
            let gm = &dev.means[g0..g0 + dev.n_gamma];
            report.push(t, format!("{prefix}unknown_max_error"), unknown_function_error(self.cfg, b, gm, 0.0, 0.2));
        }
        if stage != "prior" {
            let mut ev: Vec<f64> = state.coeff_covariance().diagonal().iter().copied().collect();
            ev.sort_by(|a, b| b.total_cmp(a));
            for (i, v) in ev.iter().enumerate() {
                report.push(t, format!("mode_var:{i}"), *v);
            }
        }
    }
}

/// Balanced initial ensemble of the stochastic model.
pub fn initial_ensemble(
    cfg: &ExperimentConfig,
    domain: &Domain,
) -> Result<(DOState, ParamDeviations, InitReport, RunDiagnostics)> {
    let basis = cfg.basis()?;
    let gamma_prior = cfg.stochastic.unknown.map(|u| GammaPrior {
        g_max: u.g_max,
        smoothness: u.smoothness,
        pin_first: u.pin_first,
    });
    let model = cfg.stochastic.model;
    let mut rng = stream(cfg.seed, STREAM_PRIOR);
    let mut accept = (0usize, 0.0f64);
    let mut draw_err = None;
    let heights = row_heights(domain);
    let ens = draw_balanced(
        model,
        cfg.stochastic.n_r,
        basis.as_ref(),
        &cfg.biomass_profile(),
        &heights,
        cfg.domain.lz,
        &mut rng,
        |r| match draw_sample(cfg, basis.as_ref(), gamma_prior.as_ref(), r, &mut accept) {
            Ok(s) => s,
            Err(e) => {
                draw_err.get_or_insert(e);
                JointSample {
                    params: cfg.bio,
                    alpha: vec![0.0; model.n_alpha()],
                    beta: vec![0.0; model.n_beta()],
                    gamma: basis.as_ref().map(|b| vec![0.0; b.n_nodes()]),
                }
            }
        },
    )?;
    if let Some(e) = draw_err {
        return Err(e);
    }
    let theta_ids: Vec<ParamId> = cfg.stochastic.theta.iter().map(|p| p.param).collect();
    let n_gamma = basis.as_ref().map_or(0, |b| b.n_nodes());
    let n_params = theta_ids.len() + model.n_alpha() + model.n_beta() + n_gamma;
    let mut samples = DMatrix::zeros(ens.samples.len(), n_params);
    for (o, s) in ens.samples.iter().enumerate() {
        let mut row: Vec<f64> = theta_ids.iter().map(|id| s.params.get(*id)).collect();
        row.extend(&s.alpha);
        row.extend(&s.beta);
        if let Some(g) = &s.gamma {
            row.extend(g);
        }
        for (j, v) in row.iter().enumerate() {
            samples[(o, j)] = *v;
        }
    }
    let dev = ParamDeviations::from_samples(theta_ids, model.n_alpha(), model.n_beta(), n_gamma, &samples);
    let sigma = profile_sigma(domain, &ens.profiles, model.n_tracers());
    let (state, init) = init_do_from_profiles(
        domain,
        &ens.profiles,
        model.n_tracers(),
        cfg.stochastic.n_s,
        &sigma,
        cfg.stochastic.pad_modes,
    )?;
    let diag = RunDiagnostics {
        init_rejected: ens.rejected,
        init_attempted: ens.attempted,
        gamma_acceptance: if accept.0 > 0 { accept.1 / accept.0 as f64 } else { 1.0 },
        ..RunDiagnostics::default()
    };
    Ok((state, dev, init, diag))
}

/// Balanced initialization, then repeated forecast to each observation time and update.
///
/// Configuration and initialization errors are returned directly; failures during the loop
/// come back with the partial report.
pub fn run_experiment(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let domain = Domain::new(&cfg.domain)?;
    let truth = generate_truth(cfg)?;
    let basis = cfg.basis()?;
    let (mut state, mut dev, init, mut diagnostics) = initial_ensemble(cfg, &domain)?;
    let dt = cfg.time.dt;
    let solver = FlowSolver::new(&domain, cfg.flow, dt)?;
    let mut flow = solver.initial_state()?;
    let transport = Transport::new(&domain, cfg.numerics.advection, cfg.numerics.kappa, dt)?;
    let mut dynamics = Dynamics::new(&domain, cfg.stochastic.model, cfg.bio, transport, dt, basis.clone())?;
    let mut obs_rng = stream(cfg.seed, STREAM_OBS);
    let mut filter_rng = stream(cfg.seed, STREAM_FILTER);
    let filter_cfg = cfg.filter.filter_config();
    let param_truth = parameter_truth(cfg, basis.as_ref());
    let mut recorder = Recorder {
        cfg,
        domain: &domain,
        basis: basis.as_ref(),
        names: dev.names(),
        param_truth: param_truth.clone(),
        norm: None,
    };
    let mut report = MetricsReport {
        experiment: cfg.id,
        seed: cfg.seed,
        ..MetricsReport::default()
    };
    let mut updates = Vec::new();
    let mut snapshots = Vec::new();
    let nt = cfg.stochastic.model.n_tracers();
    let nc = domain.grid.n_cells();
    let mut failure = None;
    let mut next = 0;

    for step in 1..=cfg.n_steps() {
        let t = step as f64 * dt;
        let stepped = solver.step(&mut flow).and_then(|fd| {
            diagnostics.max_divergence = diagnostics.max_divergence.max(fd.max_divergence);
            diagnostics.max_courant = diagnostics.max_courant.max(fd.courant);
            let vel = face_velocities_for_tracers(&flow);
            dynamics.advance(&mut state, &dev, &vel)
        });
        match stepped {
            Ok(sd) => {
                diagnostics.steps = step;
                diagnostics.max_orthonormality = diagnostics.max_orthonormality.max(sd.orthonormality);
                diagnostics.replaced_modes += sd.replaced_modes;
                diagnostics.recenterings += sd.recentered as usize;
                diagnostics.clamped_evaluations += sd.clamped_evaluations;
            }
            Err(e) => {
                failure = Some(with_time(e, t));
                break;
            }
        }
        if next < truth.times.len() && (t - truth.times[next]).abs() <= 0.5 * dt {
            let tk = truth.times[next];
            let truth_state = &truth.states[next];
            recorder.record(&mut report, "prior", tk, &state, &dev, truth_state);
            if cfg.filter.enabled {
                let batch = match observe(cfg, &domain, truth_state, tk, &mut obs_rng) {
                    Ok(b) => b,
                    Err(e) => {
                        failure = Some(e);
                        break;
                    }
                };
                match assimilate(&mut state, &mut dev, &batch, &filter_cfg, &mut filter_rng) {
                    Ok(u) => {
                        report.push(tk, "k", u.k as f64);
                        report.push(tk, "innovation_norm", u.innovation_norm);
                        report.push(tk, "normalized_innovation", u.normalized_innovation);
                        report.push(tk, "log_evidence", u.log_evidence);
                        report.push(tk, "posterior_misfit", u.posterior_misfit);
                        updates.push(u);
                    }
                    Err(e) => {
                        failure = Some(e);
                        break;
                    }
                }
            }
            recorder.record(&mut report, "posterior", tk, &state, &dev, truth_state);
            if opts.keep_snapshots {
                let (mean, std) = moments(&state, nt);
                snapshots.push(Snapshot {
                    time: tk,
                    label: "mean".into(),
                    data: mean.data,
                });
                snapshots.push(Snapshot {
                    time: tk,
                    label: "std".into(),
                    data: std.data,
                });
                snapshots.push(Snapshot {
                    time: tk,
                    label: "truth".into(),
                    data: truth_in_model_space(cfg, nc, truth_state).concat(),
                });
            }
            next += 1;
        }
    }
    Ok(RunOutcome {
        result: ExperimentResult {
            config: cfg.clone(),
            report,
            updates,
            state,
            params: dev,
            truth,
            init,
            diagnostics,
            snapshots,
            param_truth,
        },
        failure,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn experiment_one_schedule() {
        let cfg = ExperimentConfig::preset(1).unwrap();
        let t = cfg.observations.times();
        assert_eq!(t.len(), 11);
        assert_eq!(t[0], 5.0);
        assert_eq!(*t.last().unwrap(), 25.0);
        assert_eq!(cfg.observations.locations().len(), 6);
    }

    #[test]
    fn half_scale_grid() {
        let cfg = ExperimentConfig::preset(1).unwrap().scaled(0.5).unwrap();
        assert_eq!((cfg.domain.nx, cfg.domain.nz), (150, 15));
        assert_eq!(cfg.stochastic.n_r, 5000);
    }

    #[test]
    fn presets_validate() {
        for id in 1..=4 {
            ExperimentConfig::preset(id).unwrap().scaled(0.5).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn pure_bias_rmse() {
        assert!((param_rmse(&[2.0; 10], 1.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kde_of_constant_is_one_peak() {
        let s = vec![0.7; 50];
        let g = kde_grid(&s, 101);
        let d = kde_pdf(&s, &g);
        assert_eq!(count_modes(&d, 0.1), 1);
        assert!((density_mode(&g, &d) - 0.7).abs() < 1e-3);
    }
}
