//! Plankton reaction kinetics with analytic sensitivities.
//!
//! Every term moves nitrogen from one pool to another, so the rates of a model sum to
//! zero for any state and parameter values.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_space::PiecewiseBasis;

pub const MAX_TRACERS: usize = 5;
pub const N_THETA: usize = 10;
const MAX_FLUXES: usize = 12;

/// Concentration scale (mmol N m^-3) used to non-dimensionalize tracers.
pub const CONCENTRATION_SCALE: f64 = 30.0;
/// Length scale (m) used to non-dimensionalize depth.
pub const LENGTH_SCALE: f64 = 50.0;

/// Non-dimensional biological parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BioParams {
    pub k_w: f64,
    pub alpha_pi: f64,
    pub i0: f64,
    pub vm: f64,
    pub ku: f64,
    pub xi: f64,
    pub gamma: f64,
    pub gamma_q: f64,
    pub rm: f64,
    pub lambda: f64,
    pub gamma_eg: f64,
    pub phi: f64,
    pub psi_i: f64,
    pub omega: f64,
}

/// Biological parameters in the units of the reference table
/// (mmol N m^-3 for concentrations, m^-1 for attenuation, day^-1 for rates).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimensionalBioParams {
    pub k_w: f64,
    pub alpha_pi: f64,
    pub i0: f64,
    pub vm: f64,
    pub ku: f64,
    pub xi: f64,
    pub gamma: f64,
    pub gamma_q: f64,
    pub rm: f64,
    pub lambda: f64,
    pub gamma_eg: f64,
    pub phi: f64,
    pub psi_i: f64,
    pub omega: f64,
}

impl Default for DimensionalBioParams {
    fn default() -> Self {
        Self {
            k_w: 0.067,
            alpha_pi: 0.025,
            i0: 158.075,
            vm: 1.5,
            ku: 1.0,
            xi: 0.1,
            gamma: 0.145,
            gamma_q: 0.2,
            rm: 0.52,
            lambda: 0.12,
            gamma_eg: 0.3,
            phi: 1.03,
            psi_i: 1.46,
            omega: 0.25,
        }
    }
}

impl DimensionalBioParams {
    /// Inverse-concentration parameters scale by the concentration scale, `k_w` by the
    /// length scale, and `gamma_q` is already a coefficient on the scaled `Z^2`.
    pub fn to_nondim(&self) -> BioParams {
        BioParams {
            k_w: self.k_w * LENGTH_SCALE,
            alpha_pi: self.alpha_pi,
            i0: self.i0,
            vm: self.vm,
            ku: self.ku / CONCENTRATION_SCALE,
            xi: self.xi,
            gamma: self.gamma,
            gamma_q: self.gamma_q,
            rm: self.rm,
            lambda: self.lambda * CONCENTRATION_SCALE,
            gamma_eg: self.gamma_eg,
            phi: self.phi,
            psi_i: self.psi_i * CONCENTRATION_SCALE,
            omega: self.omega,
        }
    }
}

impl Default for BioParams {
    fn default() -> Self {
        DimensionalBioParams::default().to_nondim()
    }
}

impl BioParams {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.k_w, self.alpha_pi, self.i0, self.vm, self.xi, self.gamma, self.gamma_q,
            self.rm, self.lambda, self.phi, self.psi_i, self.omega,
        ];
        if rates.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("biological rates must be non-negative".into()));
        }
        if !(self.ku > 0.0) {
            return Err(Error::Config("half-saturation Ku must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma_eg) {
            return Err(Error::Config("egested fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn get(&self, id: ParamId) -> f64 {
        match id {
            ParamId::Ku => self.ku,
            ParamId::Xi => self.xi,
            ParamId::Gamma => self.gamma,
            ParamId::GammaQ => self.gamma_q,
            ParamId::Rm => self.rm,
            ParamId::Lambda => self.lambda,
            ParamId::GammaEg => self.gamma_eg,
            ParamId::Phi => self.phi,
            ParamId::PsiI => self.psi_i,
            ParamId::Omega => self.omega,
        }
    }

    pub fn set(&mut self, id: ParamId, v: f64) {
        match id {
            ParamId::Ku => self.ku = v,
            ParamId::Xi => self.xi = v,
            ParamId::Gamma => self.gamma = v,
            ParamId::GammaQ => self.gamma_q = v,
            ParamId::Rm => self.rm = v,
            ParamId::Lambda => self.lambda = v,
            ParamId::GammaEg => self.gamma_eg = v,
            ParamId::Phi => self.phi = v,
            ParamId::PsiI => self.psi_i = v,
            ParamId::Omega => self.omega = v,
        }
    }
}

/// Regular parameters that may be treated as uncertain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamId {
    Ku,
    Xi,
    Gamma,
    GammaQ,
    Rm,
    Lambda,
    GammaEg,
    Phi,
    PsiI,
    Omega,
}

impl ParamId {
    pub const ALL: [ParamId; N_THETA] = [
        ParamId::Ku,
        ParamId::Xi,
        ParamId::Gamma,
        ParamId::GammaQ,
        ParamId::Rm,
        ParamId::Lambda,
        ParamId::GammaEg,
        ParamId::Phi,
        ParamId::PsiI,
        ParamId::Omega,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamId::Ku => "Ku",
            ParamId::Xi => "Xi",
            ParamId::Gamma => "Gamma",
            ParamId::GammaQ => "GammaQ",
            ParamId::Rm => "Rm",
            ParamId::Lambda => "Lambda",
            ParamId::GammaEg => "gamma_eg",
            ParamId::Phi => "Phi",
            ParamId::PsiI => "PsiI",
            ParamId::Omega => "Omega",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelId {
    Npz,
    Npzd,
    Nnpzd,
    /// NPZ with an optional quadratic zooplankton mortality weighted by `alpha`.
    NpzQuadMort,
    /// NPZ and NPZD unified by the complexity parameter `beta`; the fourth tracer is `beta * D`.
    NpzdUnified,
    /// NNPZD with an optional quadratic zooplankton mortality weighted by `alpha`.
    NnpzdQuadMort,
}

impl ModelId {
    pub fn n_tracers(self) -> usize {
        self.tracer_names().len()
    }

    pub fn tracer_names(self) -> &'static [&'static str] {
        match self {
            ModelId::Npz | ModelId::NpzQuadMort => &["N", "P", "Z"],
            ModelId::Npzd => &["N", "P", "Z", "D"],
            ModelId::NpzdUnified => &["N", "P", "Z", "Dp"],
            ModelId::Nnpzd | ModelId::NnpzdQuadMort => &["NO3", "NH4", "P", "Z", "D"],
        }
    }

    pub fn n_alpha(self) -> usize {
        matches!(self, ModelId::NpzQuadMort | ModelId::NnpzdQuadMort) as usize
    }

    pub fn n_beta(self) -> usize {
        matches!(self, ModelId::NpzdUnified) as usize
    }

    pub fn tracer_index(self, name: &str) -> Option<usize> {
        self.tracer_names().iter().position(|n| *n == name)
    }

    pub fn zooplankton(self) -> usize {
        self.tracer_index("Z").expect("every model carries zooplankton")
    }

    /// Pool receiving the unknown-function loss from zooplankton.
    pub fn recycling_pool(self) -> usize {
        match self {
            ModelId::Nnpzd | ModelId::NnpzdQuadMort => 1,
            _ => 0,
        }
    }
}

/// Rates and sensitivities of the reaction terms at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct ReactionEval {
    pub rates: Vec<f64>,
    pub jac_state: DMatrix<f64>,
    pub jac_theta: DMatrix<f64>,
    pub jac_alpha: DMatrix<f64>,
    pub jac_beta: DMatrix<f64>,
    pub jac_gamma: DMatrix<f64>,
    /// Count of negative input concentrations.
    pub negative_inputs: usize,
}

/// Light limitation `Vm a I / sqrt(Vm^2 + a^2 I^2)` with `I = I0 exp(k_w depth)`, `depth <= 0`.
pub fn light_g(optical_depth: f64, p: &BioParams) -> f64 {
    let ai = p.alpha_pi * p.i0 * (p.k_w * optical_depth).exp();
    p.vm * ai / (p.vm * p.vm + ai * ai).sqrt()
}

#[derive(Debug, Clone, Copy)]
struct Flux {
    from: usize,
    to: usize,
    value: f64,
    d_state: [f64; MAX_TRACERS],
    d_theta: [f64; N_THETA],
    d_alpha: f64,
    d_beta: f64,
    /// Set on the unknown-function term, whose sensitivity to `gamma_k` is `Psi_k(Z)`.
    unknown_function: bool,
}

impl Flux {
    fn new(from: usize, to: usize) -> Self {
        Self {
            from,
            to,
            value: 0.0,
            d_state: [0.0; MAX_TRACERS],
            d_theta: [0.0; N_THETA],
            d_alpha: 0.0,
            d_beta: 0.0,
            unknown_function: false,
        }
    }

    /// Same flux scaled by a constant-free factor `s` whose derivative is handled by the caller.
    fn scaled(mut self, s: f64, from: usize, to: usize) -> Self {
        self.from = from;
        self.to = to;
        self.value *= s;
        self.d_state.iter_mut().for_each(|v| *v *= s);
        self.d_theta.iter_mut().for_each(|v| *v *= s);
        self.d_alpha *= s;
        self.d_beta *= s;
        self
    }
}

struct FluxSet {
    fluxes: [Flux; MAX_FLUXES],
    len: usize,
}

impl FluxSet {
    fn new() -> Self {
        Self {
            fluxes: [Flux::new(0, 0); MAX_FLUXES],
            len: 0,
        }
    }

    fn push(&mut self, f: Flux) {
        self.fluxes[self.len] = f;
        self.len += 1;
    }

    fn iter(&self) -> impl Iterator<Item = &Flux> {
        self.fluxes[..self.len].iter()
    }
}

/// Linear loss `rate * x[pool]` from `pool` to `to`.
fn linear(pool: usize, to: usize, x: &[f64], rate: f64, id: ParamId) -> Flux {
    let mut f = Flux::new(pool, to);
    f.value = rate * x[pool];
    f.d_state[pool] = rate;
    f.d_theta[id.index()] = x[pool];
    f
}

/// Michaelis-Menten uptake `G P n / (n + Ku)` from nutrient `n` to `p`.
fn uptake(n: usize, ph: usize, x: &[f64], g: f64, ku: f64) -> Flux {
    let mut f = Flux::new(n, ph);
    let den = x[n] + ku;
    let lim = x[n] / den;
    f.value = g * x[ph] * lim;
    f.d_state[n] = g * x[ph] * ku / (den * den);
    f.d_state[ph] = g * lim;
    f.d_theta[ParamId::Ku.index()] = -g * x[ph] * x[n] / (den * den);
    f
}

/// Total Ivlev grazing `Rm Z (1 - exp(-Lambda P))`, booked as a loss from `P`.
fn grazing(ph: usize, z: usize, x: &[f64], p: &BioParams) -> Flux {
    let mut f = Flux::new(ph, z);
    let e = (-p.lambda * x[ph]).exp();
    f.value = p.rm * x[z] * (1.0 - e);
    f.d_state[ph] = p.rm * x[z] * p.lambda * e;
    f.d_state[z] = p.rm * (1.0 - e);
    f.d_theta[ParamId::Rm.index()] = x[z] * (1.0 - e);
    f.d_theta[ParamId::Lambda.index()] = p.rm * x[z] * x[ph] * e;
    f
}

/// Splits grazing into ingestion `(1 - s) G` to `z` and egestion `s G` to `sink`,
/// where `s = gamma_eg * b` and `b` is a complexity multiplier (`1` when absent).
fn split_grazing(set: &mut FluxSet, graze: Flux, z: usize, sink: usize, p: &BioParams, b: f64, beta_sensitive: bool) {
    let s = p.gamma_eg * b;
    let mut ing = graze.scaled(1.0 - s, graze.from, z);
    ing.d_theta[ParamId::GammaEg.index()] = -b * graze.value;
    let mut eg = graze.scaled(s, graze.from, sink);
    eg.d_theta[ParamId::GammaEg.index()] = b * graze.value;
    if beta_sensitive {
        ing.d_beta = -p.gamma_eg * graze.value;
        eg.d_beta = p.gamma_eg * graze.value;
    }
    set.push(ing);
    set.push(eg);
}

fn quadratic_mortality(z: usize, to: usize, x: &[f64], p: &BioParams, a: f64) -> Flux {
    let mut f = Flux::new(z, to);
    f.value = a * p.gamma_q * x[z] * x[z];
    f.d_state[z] = 2.0 * a * p.gamma_q * x[z];
    f.d_theta[ParamId::GammaQ.index()] = a * x[z] * x[z];
    f.d_alpha = p.gamma_q * x[z] * x[z];
    f
}

fn fluxes(
    model: ModelId,
    x: &[f64],
    g: f64,
    p: &BioParams,
    alpha: &[f64],
    beta: &[f64],
    unknown: Option<(&PiecewiseBasis, &[f64])>,
) -> FluxSet {
    let mut set = FluxSet::new();
    match model {
        ModelId::Npz | ModelId::NpzQuadMort => {
            let (n, ph, z) = (0, 1, 2);
            set.push(uptake(n, ph, x, g, p.ku));
            set.push(linear(ph, n, x, p.xi, ParamId::Xi));
            set.push(linear(z, n, x, p.gamma, ParamId::Gamma));
            split_grazing(&mut set, grazing(ph, z, x, p), z, n, p, 1.0, false);
            if model == ModelId::NpzQuadMort {
                set.push(quadratic_mortality(z, n, x, p, alpha[0]));
            }
        }
        ModelId::Npzd => {
            let (n, ph, z, d) = (0, 1, 2, 3);
            set.push(uptake(n, ph, x, g, p.ku));
            set.push(linear(d, n, x, p.phi, ParamId::Phi));
            set.push(linear(z, n, x, p.gamma, ParamId::Gamma));
            set.push(linear(ph, d, x, p.xi, ParamId::Xi));
            split_grazing(&mut set, grazing(ph, z, x, p), z, d, p, 1.0, false);
        }
        ModelId::NpzdUnified => {
            let (n, ph, z, d) = (0, 1, 2, 3);
            let b = beta[0];
            set.push(uptake(n, ph, x, g, p.ku));
            set.push(linear(d, n, x, p.phi, ParamId::Phi));
            set.push(linear(z, n, x, p.gamma, ParamId::Gamma));
            let mort = linear(ph, n, x, p.xi, ParamId::Xi);
            let mut to_n = mort.scaled(1.0 - b, ph, n);
            to_n.d_beta = -mort.value;
            let mut to_d = mort.scaled(b, ph, d);
            to_d.d_beta = mort.value;
            set.push(to_n);
            set.push(to_d);
            split_grazing(&mut set, grazing(ph, z, x, p), z, d, p, b, true);
        }
        ModelId::Nnpzd | ModelId::NnpzdQuadMort => {
            let (no3, nh4, ph, z, d) = (0, 1, 2, 3, 4);
            set.push(linear(nh4, no3, x, p.omega, ParamId::Omega));
            let mut f = uptake(no3, ph, x, g, p.ku);
            let inhib = (-p.psi_i * x[nh4]).exp();
            let v = f.value;
            f = f.scaled(inhib, no3, ph);
            f.d_state[nh4] = -p.psi_i * v * inhib;
            f.d_theta[ParamId::PsiI.index()] = -x[nh4] * v * inhib;
            set.push(f);
            set.push(uptake(nh4, ph, x, g, p.ku));
            set.push(linear(d, nh4, x, p.phi, ParamId::Phi));
            set.push(linear(z, nh4, x, p.gamma, ParamId::Gamma));
            set.push(linear(ph, d, x, p.xi, ParamId::Xi));
            split_grazing(&mut set, grazing(ph, z, x, p), z, d, p, 1.0, false);
            if model == ModelId::NnpzdQuadMort {
                set.push(quadratic_mortality(z, nh4, x, p, alpha[0]));
            }
        }
    }
    if let Some((basis, gamma)) = unknown {
        let z = model.zooplankton();
        let mut f = Flux::new(z, model.recycling_pool());
        f.value = basis.expand(gamma, x[z]);
        f.d_state[z] = basis.slope(gamma, x[z]);
        f.unknown_function = true;
        set.push(f);
    }
    set
}

fn check_inputs(
    model: ModelId,
    x: &[f64],
    alpha: &[f64],
    beta: &[f64],
    unknown: Option<(&PiecewiseBasis, &[f64])>,
) -> Result<()> {
    if x.len() != model.n_tracers() {
        return Err(Error::Dimension {
            context: "tracer vector",
            expected: model.n_tracers(),
            got: x.len(),
        });
    }
    if alpha.len() < model.n_alpha() {
        return Err(Error::MissingParameter("formulation parameter alpha"));
    }
    if beta.len() < model.n_beta() {
        return Err(Error::MissingParameter("complexity parameter beta"));
    }
    if let Some((basis, gamma)) = unknown {
        if gamma.len() != basis.n_nodes() {
            return Err(Error::Dimension {
                context: "expansion parameters",
                expected: basis.n_nodes(),
                got: gamma.len(),
            });
        }
    }
    Ok(())
}

/// Rates and all sensitivities at one point. `theta_ids` selects the columns of `jac_theta`.
#[allow(clippy::too_many_arguments)]
pub fn source(
    model: ModelId,
    x: &[f64],
    g: f64,
    p: &BioParams,
    alpha: &[f64],
    beta: &[f64],
    unknown: Option<(&PiecewiseBasis, &[f64])>,
    theta_ids: &[ParamId],
) -> Result<ReactionEval> {
    check_inputs(model, x, alpha, beta, unknown)?;
    let n = model.n_tracers();
    let n_gamma = unknown.map_or(0, |(b, _)| b.n_nodes());
    let mut ev = ReactionEval {
        rates: vec![0.0; n],
        jac_state: DMatrix::zeros(n, n),
        jac_theta: DMatrix::zeros(n, theta_ids.len()),
        jac_alpha: DMatrix::zeros(n, model.n_alpha()),
        jac_beta: DMatrix::zeros(n, model.n_beta()),
        jac_gamma: DMatrix::zeros(n, n_gamma),
        negative_inputs: x.iter().filter(|v| **v < 0.0).count(),
    };
    let set = fluxes(model, x, g, p, alpha, beta, unknown);
    for f in set.iter() {
        for (pool, sign) in [(f.from, -1.0), (f.to, 1.0)] {
            ev.rates[pool] += sign * f.value;
            for k in 0..n {
                ev.jac_state[(pool, k)] += sign * f.d_state[k];
            }
            for (c, id) in theta_ids.iter().enumerate() {
                ev.jac_theta[(pool, c)] += sign * f.d_theta[id.index()];
            }
            if model.n_alpha() > 0 {
                ev.jac_alpha[(pool, 0)] += sign * f.d_alpha;
            }
            if model.n_beta() > 0 {
                ev.jac_beta[(pool, 0)] += sign * f.d_beta;
            }
            if f.unknown_function {
                let (basis, _) = unknown.expect("unknown-function flux implies a basis");
                let z = x[model.zooplankton()];
                for k in 0..n_gamma {
                    ev.jac_gamma[(pool, k)] += sign * basis.eval(k, z);
                }
            }
        }
    }
    Ok(ev)
}

/// Allocation-free rates, used in the inner loops of the integrators.
pub fn rates_into(
    model: ModelId,
    x: &[f64],
    g: f64,
    p: &BioParams,
    alpha: &[f64],
    beta: &[f64],
    unknown: Option<(&PiecewiseBasis, &[f64])>,
    out: &mut [f64],
) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for f in fluxes(model, x, g, p, alpha, beta, unknown).iter() {
        out[f.from] -= f.value;
        out[f.to] += f.value;
    }
}

/// Rates, state Jacobian and parameter columns `[theta_ids | alpha | beta]` without allocation.
pub struct LocalLinearization {
    pub rates: [f64; MAX_TRACERS],
    pub jac: [[f64; MAX_TRACERS]; MAX_TRACERS],
    pub jac_params: [[f64; N_THETA + 2]; MAX_TRACERS],
}

pub fn linearize(
    model: ModelId,
    x: &[f64],
    g: f64,
    p: &BioParams,
    alpha: &[f64],
    beta: &[f64],
    theta_ids: &[ParamId],
) -> LocalLinearization {
    let mut out = LocalLinearization {
        rates: [0.0; MAX_TRACERS],
        jac: [[0.0; MAX_TRACERS]; MAX_TRACERS],
        jac_params: [[0.0; N_THETA + 2]; MAX_TRACERS],
    };
    let nt = theta_ids.len();
    let na = model.n_alpha();
    for f in fluxes(model, x, g, p, alpha, beta, None).iter() {
        for (pool, sign) in [(f.from, -1.0), (f.to, 1.0)] {
            out.rates[pool] += sign * f.value;
            for k in 0..MAX_TRACERS {
                out.jac[pool][k] += sign * f.d_state[k];
            }
            for (c, id) in theta_ids.iter().enumerate() {
                out.jac_params[pool][c] += sign * f.d_theta[id.index()];
            }
            if na > 0 {
                out.jac_params[pool][nt] += sign * f.d_alpha;
            }
            if model.n_beta() > 0 {
                out.jac_params[pool][nt + na] += sign * f.d_beta;
            }
        }
    }
    out
}

/// Point at which the Jacobians are compared against central differences.
#[derive(Debug, Clone)]
pub struct CheckPoint {
    pub x: Vec<f64>,
    pub g: f64,
    pub params: BioParams,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Largest scaled gap between analytic and central-difference sensitivities
/// with respect to state, all regular parameters, `alpha` and `beta`.
pub fn jacobians_fd_check(model: ModelId, pt: &CheckPoint, h: f64) -> Result<f64> {
    let ids = ParamId::ALL;
    let ev = source(model, &pt.x, pt.g, &pt.params, &pt.alpha, &pt.beta, None, &ids)?;
    let n = model.n_tracers();
    let rates = |x: &[f64], p: &BioParams, a: &[f64], b: &[f64]| {
        let mut out = vec![0.0; n];
        rates_into(model, x, pt.g, p, a, b, None, &mut out);
        out
    };
    let mut worst = 0.0f64;
    let mut compare = |analytic: f64, plus: f64, minus: f64, step: f64| {
        let fd = (plus - minus) / (2.0 * step);
        let scale = analytic.abs().max(fd.abs()).max(1.0);
        worst = worst.max((analytic - fd).abs() / scale);
    };
    for k in 0..n {
        let (mut xp, mut xm) = (pt.x.clone(), pt.x.clone());
        xp[k] += h;
        xm[k] -= h;
        let (rp, rm) = (rates(&xp, &pt.params, &pt.alpha, &pt.beta), rates(&xm, &pt.params, &pt.alpha, &pt.beta));
        for i in 0..n {
            compare(ev.jac_state[(i, k)], rp[i], rm[i], h);
        }
    }
    for (c, id) in ids.iter().enumerate() {
        let (mut pp, mut pm) = (pt.params, pt.params);
        pp.set(*id, pt.params.get(*id) + h);
        pm.set(*id, pt.params.get(*id) - h);
        let (rp, rm) = (rates(&pt.x, &pp, &pt.alpha, &pt.beta), rates(&pt.x, &pm, &pt.alpha, &pt.beta));
        for i in 0..n {
            compare(ev.jac_theta[(i, c)], rp[i], rm[i], h);
        }
    }
    for (which, len) in [(0, model.n_alpha()), (1, model.n_beta())] {
        for k in 0..len {
            let (mut ap, mut am) = (pt.alpha.clone(), pt.alpha.clone());
            let (mut bp, mut bm) = (pt.beta.clone(), pt.beta.clone());
            if which == 0 {
                ap[k] += h;
                am[k] -= h;
            } else {
                bp[k] += h;
                bm[k] -= h;
            }
            let (rp, rm) = (rates(&pt.x, &pt.params, &ap, &bp), rates(&pt.x, &pt.params, &am, &bm));
            let jac = if which == 0 { &ev.jac_alpha } else { &ev.jac_beta };
            for i in 0..n {
                compare(jac[(i, k)], rp[i], rm[i], h);
            }
        }
    }
    Ok(worst)
}
