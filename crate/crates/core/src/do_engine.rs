//! Dynamically orthogonal reduced-order propagation of stochastic tracer fields.
//!
//! A realization is `mean + modes * y(omega)` with modes orthonormal under the
//! normalized inner product and zero-mean coefficients. State vectors are tracer-major:
//! entry `k * n_cells + c` holds tracer `k` at cell `c`. Solid cells hold zero.
//!
//! One step is split as: transport of mean and modes with coefficients fixed (exact for a
//! linear transport operator), re-orthonormalization, then the reaction stage: explicit
//! Euler for mean and modes, and a four-stage Runge-Kutta step for the coefficients with
//! mean and modes frozen.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bgc::{self, BioParams, ModelId, ParamId, MAX_TRACERS};
use crate::error::{Error, Result};
use crate::flow::FaceVelocities;
use crate::geometry::Domain;
use crate::model_space::PiecewiseBasis;
use crate::transport::Transport;

/// Per-cell concentrations of every tracer, tracer-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TracerFields {
    pub n_tracers: usize,
    pub n_cells: usize,
    pub data: Vec<f64>,
}

impl TracerFields {
    pub fn zeros(n_tracers: usize, n_cells: usize) -> Self {
        Self {
            n_tracers,
            n_cells,
            data: vec![0.0; n_tracers * n_cells],
        }
    }

    pub fn tracer(&self, k: usize) -> &[f64] {
        &self.data[k * self.n_cells..(k + 1) * self.n_cells]
    }

    pub fn tracer_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.n_cells..(k + 1) * self.n_cells]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DOState {
    pub mean: DVector<f64>,
    /// `n_state x n_s`, one mode per column.
    pub modes: DMatrix<f64>,
    /// `n_r x n_s`, one realization per row.
    pub coeffs: DMatrix<f64>,
    pub sigma_nd: Vec<f64>,
    pub time: f64,
}

impl DOState {
    pub fn n_modes(&self) -> usize {
        self.modes.ncols()
    }

    pub fn n_samples(&self) -> usize {
        self.coeffs.nrows()
    }

    pub fn mean_fields(&self, n_tracers: usize) -> TracerFields {
        TracerFields {
            n_tracers,
            n_cells: self.mean.len() / n_tracers,
            data: self.mean.as_slice().to_vec(),
        }
    }

    /// Realization `omega` as a state vector.
    pub fn realization(&self, omega: usize) -> DVector<f64> {
        &self.mean + &self.modes * self.coeffs.row(omega).transpose()
    }

    /// Coefficient covariance `E[y y^T]` with the `1/n_r` convention.
    pub fn coeff_covariance(&self) -> DMatrix<f64> {
        self.coeffs.tr_mul(&self.coeffs) / self.n_samples().max(1) as f64
    }
}

/// Uncertain parameters split into means and per-sample deviations.
///
/// Column order is `[theta | alpha | beta | gamma]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamDeviations {
    pub theta_ids: Vec<ParamId>,
    pub n_alpha: usize,
    pub n_beta: usize,
    pub n_gamma: usize,
    pub means: Vec<f64>,
    /// `n_r x n_params`.
    pub devs: DMatrix<f64>,
}

impl ParamDeviations {
    pub fn n_theta(&self) -> usize {
        self.theta_ids.len()
    }

    pub fn n_params(&self) -> usize {
        self.means.len()
    }

    pub fn alpha_offset(&self) -> usize {
        self.n_theta()
    }

    pub fn beta_offset(&self) -> usize {
        self.n_theta() + self.n_alpha
    }

    pub fn gamma_offset(&self) -> usize {
        self.n_theta() + self.n_alpha + self.n_beta
    }

    /// Number of leading columns entering the first-order closure (`theta`, `alpha`, `beta`).
    pub fn n_linearized(&self) -> usize {
        self.gamma_offset()
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.theta_ids.iter().map(|id| id.name().to_string()).collect();
        names.extend((0..self.n_alpha).map(|k| format!("alpha{k}")));
        names.extend((0..self.n_beta).map(|k| format!("beta{k}")));
        names.extend((0..self.n_gamma).map(|k| format!("gamma{k}")));
        names
    }

    /// Value of parameter column `j` for sample `omega`.
    pub fn sample(&self, omega: usize, j: usize) -> f64 {
        self.means[j] + self.devs[(omega, j)]
    }

    pub fn column_samples(&self, j: usize) -> Vec<f64> {
        (0..self.devs.nrows()).map(|w| self.sample(w, j)).collect()
    }

    /// Builds deviations from full samples (`n_r x n_params`), removing the sample mean.
    pub fn from_samples(
        theta_ids: Vec<ParamId>,
        n_alpha: usize,
        n_beta: usize,
        n_gamma: usize,
        samples: &DMatrix<f64>,
    ) -> Self {
        let r = samples.nrows().max(1) as f64;
        let means: Vec<f64> = samples.column_iter().map(|c| c.sum() / r).collect();
        let mut devs = samples.clone();
        for (j, m) in means.iter().enumerate() {
            devs.column_mut(j).add_scalar_mut(-m);
        }
        Self {
            theta_ids,
            n_alpha,
            n_beta,
            n_gamma,
            means,
            devs,
        }
    }

    /// Biological parameters with the uncertain regular entries set to their means.
    pub fn mean_bio(&self, base: &BioParams) -> BioParams {
        let mut p = *base;
        for (k, id) in self.theta_ids.iter().enumerate() {
            p.set(*id, self.means[k]);
        }
        p
    }
}

/// Normalized inner-product weights: `vol / (|D| sigma_k^2)` on fluid cells, zero elsewhere.
pub fn inner_weights(domain: &Domain, sigma_nd: &[f64]) -> Result<DVector<f64>> {
    if sigma_nd.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Config("normalization weights must be positive".into()));
    }
    let nc = domain.grid.n_cells();
    let vol = domain.grid.cell_volume();
    let mut w = DVector::zeros(nc * sigma_nd.len());
    for (k, s) in sigma_nd.iter().enumerate() {
        for c in 0..nc {
            if domain.fluid(c) {
                w[k * nc + c] = vol / (domain.fluid_area * s * s);
            }
        }
    }
    Ok(w)
}

pub fn inner_product(domain: &Domain, a: &TracerFields, b: &TracerFields, sigma_nd: &[f64]) -> Result<f64> {
    if a.data.len() != b.data.len() || a.n_tracers != sigma_nd.len() {
        return Err(Error::Dimension {
            context: "inner product operands",
            expected: a.data.len(),
            got: b.data.len(),
        });
    }
    let w = inner_weights(domain, sigma_nd)?;
    Ok(a.data.iter().zip(&b.data).zip(w.iter()).map(|((x, y), w)| x * y * w).sum())
}

/// `A^T diag(w) B`.
pub fn weighted_gram(a: &DMatrix<f64>, w: &DVector<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut wb = b.clone();
    for mut col in wb.column_iter_mut() {
        col.component_mul_assign(w);
    }
    a.tr_mul(&wb)
}

/// Largest entry of `|M^T W M - I|`.
pub fn orthonormality_error(modes: &DMatrix<f64>, w: &DVector<f64>) -> f64 {
    let g = weighted_gram(modes, w, modes);
    let mut worst = 0.0f64;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ReorthReport {
    /// Modes replaced because their direction had (numerically) zero norm.
    pub replaced: usize,
    pub min_eigenvalue: f64,
}

/// Restores orthonormality of `modes` and co-rotates `coeffs` so `modes * coeffs^T` is unchanged.
///
/// Full-rank modes use the symmetric transform `M^{-1/2}`, which is the identity on already
/// orthonormal modes. Directions whose Gram eigenvalue falls below `1e-12` of the largest are
/// dropped and refilled with weighted-orthonormal fields carrying zero coefficients.
pub fn reorthonormalize(modes: &mut DMatrix<f64>, coeffs: &mut DMatrix<f64>, w: &DVector<f64>) -> ReorthReport {
    let s = modes.ncols();
    if s == 0 {
        return ReorthReport::default();
    }
    let gram = weighted_gram(modes, w, modes);
    let eig = SymmetricEigen::new(gram);
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let lmin = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let tol = 1e-12 * lmax.max(f64::MIN_POSITIVE);
    let v = &eig.eigenvectors;
    if lmin > tol {
        let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
        let sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
        let t_modes = v * inv_sqrt * v.transpose();
        let t_coeffs = v * sqrt * v.transpose();
        *modes = &*modes * t_modes;
        *coeffs = &*coeffs * t_coeffs;
        return ReorthReport {
            replaced: 0,
            min_eigenvalue: lmin,
        };
    }
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let kept: Vec<usize> = order.iter().copied().filter(|&k| eig.eigenvalues[k] > tol).collect();
    let n = modes.nrows();
    let mut new_modes = DMatrix::zeros(n, s);
    let mut new_coeffs = DMatrix::zeros(coeffs.nrows(), s);
    for (slot, &k) in kept.iter().enumerate() {
        let l = eig.eigenvalues[k];
        let dir = v.column(k);
        new_modes.set_column(slot, &(&*modes * dir / l.sqrt()));
        new_coeffs.set_column(slot, &(&*coeffs * dir * l.sqrt()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0f11);
    for slot in kept.len()..s {
        loop {
            let mut cand = DVector::from_fn(n, |i, _| if w[i] > 0.0 { rng.random::<f64>() - 0.5 } else { 0.0 });
            for _ in 0..2 {
                for j in 0..slot {
                    let col = new_modes.column(j);
                    let proj = col.component_mul(w).dot(&cand);
                    cand -= col * proj;
                }
            }
            let norm = cand.component_mul(w).dot(&cand).sqrt();
            if norm > 1e-8 {
                new_modes.set_column(slot, &(cand / norm));
                break;
            }
        }
    }
    *modes = new_modes;
    *coeffs = new_coeffs;
    ReorthReport {
        replaced: s - kept.len(),
        min_eigenvalue: lmin.max(0.0),
    }
}

/// Pseudo-inverse of a symmetric positive semi-definite matrix; eigenvalues at or below
/// `1e-10 * trace / n` are discarded. Returns the inverse and the retained condition number.
pub fn floored_pinv(c: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let n = c.nrows();
    if n == 0 {
        return (DMatrix::zeros(0, 0), 1.0);
    }
    let floor = 1e-10 * c.trace() / n as f64;
    let eig = SymmetricEigen::new(c.clone());
    let v = &eig.eigenvectors;
    let mut inv = DMatrix::zeros(n, n);
    let (mut lmax, mut lmin) = (0.0f64, f64::INFINITY);
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        if l > floor && l > 0.0 {
            lmax = lmax.max(l);
            lmin = lmin.min(l);
            let col = v.column(k);
            inv += col * col.transpose() / l;
        }
    }
    let cond = if lmin.is_finite() { lmax / lmin } else { f64::INFINITY };
    (inv, cond)
}

/// Per-tracer mean and standard-deviation fields.
pub fn moments(state: &DOState, n_tracers: usize) -> (TracerFields, TracerFields) {
    let c = state.coeff_covariance();
    let pc = &state.modes * c;
    let var = pc.component_mul(&state.modes).column_sum();
    let n_cells = state.mean.len() / n_tracers;
    (
        TracerFields {
            n_tracers,
            n_cells,
            data: state.mean.as_slice().to_vec(),
        },
        TracerFields {
            n_tracers,
            n_cells,
            data: var.iter().map(|v| v.max(0.0).sqrt()).collect(),
        },
    )
}

/// Time-independent context shared by the truth and the reduced-order integrators.
pub struct Dynamics {
    pub domain: Domain,
    pub model: ModelId,
    pub bio: BioParams,
    pub dt: f64,
    /// Light factor per grid row.
    pub light: Vec<f64>,
    /// Basis of the unknown function, if the model carries one.
    pub basis: Option<PiecewiseBasis>,
    /// Disables the reaction stage (pure transport).
    pub reactions: bool,
    transport: Transport,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepDiagnostics {
    /// Gram drift `|M^T W M - I|` after transport, before re-orthonormalization.
    pub gram_drift_transport: f64,
    /// Gram drift after the reaction stage, before re-orthonormalization.
    pub gram_drift_reaction: f64,
    pub orthonormality: f64,
    pub replaced_modes: usize,
    pub covariance_condition: f64,
    pub negative_mean_cells: usize,
    pub clamped_evaluations: usize,
    pub recentered: bool,
}

impl Dynamics {
    pub fn new(
        domain: &Domain,
        model: ModelId,
        bio: BioParams,
        transport: Transport,
        dt: f64,
        basis: Option<PiecewiseBasis>,
    ) -> Result<Self> {
        bio.validate()?;
        let g = domain.grid;
        let light = (0..g.nz).map(|j| bgc::light_g(g.z_center(j) - g.lz, &bio)).collect();
        Ok(Self {
            domain: domain.clone(),
            model,
            bio,
            dt,
            light,
            basis,
            reactions: true,
            transport,
        })
    }

    pub fn n_tracers(&self) -> usize {
        self.model.n_tracers()
    }

    pub fn n_cells(&self) -> usize {
        self.domain.grid.n_cells()
    }

    pub fn n_state(&self) -> usize {
        self.n_tracers() * self.n_cells()
    }

    pub fn transport(&self) -> &Transport {
        &self.transport
    }

    /// Transports every tracer of a state vector in place.
    pub fn transport_state(&mut self, state: &mut [f64], vel: &FaceVelocities) {
        let nc = self.n_cells();
        for k in 0..self.n_tracers() {
            self.transport.apply(&mut state[k * nc..(k + 1) * nc], vel, self.dt);
        }
    }

    /// Reaction rates of a state vector at fixed parameters, written into `out`.
    pub fn reaction_rates(
        &self,
        state: &[f64],
        params: &BioParams,
        alpha: &[f64],
        beta: &[f64],
        gamma: Option<&[f64]>,
        out: &mut [f64],
    ) {
        let nc = self.n_cells();
        let nt = self.n_tracers();
        let unknown = match (&self.basis, gamma) {
            (Some(b), Some(g)) => Some((b, g)),
            _ => None,
        };
        let mut x = [0.0; MAX_TRACERS];
        let mut r = [0.0; MAX_TRACERS];
        out.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..nc {
            if !self.domain.fluid(c) {
                continue;
            }
            for k in 0..nt {
                x[k] = state[k * nc + c];
            }
            let g = self.light[c / self.domain.grid.nx];
            bgc::rates_into(self.model, &x[..nt], g, params, alpha, beta, unknown, &mut r[..nt]);
            for k in 0..nt {
                out[k * nc + c] = r[k];
            }
        }
    }

    /// One deterministic step: transport, then explicit Euler reactions.
    pub fn deterministic_step(
        &mut self,
        state: &mut [f64],
        params: &BioParams,
        alpha: &[f64],
        beta: &[f64],
        gamma: Option<&[f64]>,
        vel: &FaceVelocities,
    ) -> Result<()> {
        self.transport_state(state, vel);
        if self.reactions {
            let mut rates = vec![0.0; state.len()];
            self.reaction_rates(state, params, alpha, beta, gamma, &mut rates);
            for (s, r) in state.iter_mut().zip(&rates) {
                *s += self.dt * r;
            }
        }
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                term: "deterministic tracer step",
                time: f64::NAN,
            });
        }
        Ok(())
    }

    /// Advances the reduced-order state by one step.
    pub fn advance(&mut self, st: &mut DOState, dev: &ParamDeviations, vel: &FaceVelocities) -> Result<StepDiagnostics> {
        let w = inner_weights(&self.domain, &st.sigma_nd)?;
        let mut diag = StepDiagnostics::default();
        let time = st.time;
        let check = |m: &DMatrix<f64>, term: &'static str| -> Result<()> {
            if m.iter().all(|v| v.is_finite()) {
                Ok(())
            } else {
                Err(Error::NonFinite { term, time })
            }
        };

        self.transport_state(st.mean.as_mut_slice(), vel);
        for i in 0..st.n_modes() {
            let mut col = st.modes.column_mut(i);
            let slice = col.as_mut_slice();
            self.transport_state(slice, vel);
        }
        check(&st.modes, "mode transport")?;
        diag.gram_drift_transport = orthonormality_error(&st.modes, &w);
        diag.replaced_modes += reorthonormalize(&mut st.modes, &mut st.coeffs, &w).replaced;

        if self.reactions {
            diag.gram_drift_reaction = self.reaction_stage(st, dev, &w, &mut diag)?;
            diag.replaced_modes += reorthonormalize(&mut st.modes, &mut st.coeffs, &w).replaced;
        }

        let r = st.n_samples().max(1) as f64;
        let means: Vec<f64> = st.coeffs.column_iter().map(|c| c.sum() / r).collect();
        let drift = st.coeffs.column_iter().zip(&means).any(|(c, m)| {
            let var = c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / r;
            m.abs() > 1e-3 * var.sqrt()
        });
        if drift {
            let m = DVector::from_vec(means);
            st.mean += &st.modes * &m;
            for mut row in st.coeffs.row_iter_mut() {
                row -= m.transpose();
            }
            diag.recentered = true;
        }

        check(&st.coeffs, "coefficient update")?;
        if st.mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { term: "mean update", time });
        }
        diag.orthonormality = orthonormality_error(&st.modes, &w);
        diag.negative_mean_cells = st.mean.iter().filter(|v| **v < 0.0).count();
        st.time += self.dt;
        Ok(diag)
    }

    fn reaction_stage(
        &self,
        st: &mut DOState,
        dev: &ParamDeviations,
        w: &DVector<f64>,
        diag: &mut StepDiagnostics,
    ) -> Result<f64> {
        let dt = self.dt;
        let nc = self.n_cells();
        let nt = self.n_tracers();
        let s = st.n_modes();
        let r = st.n_samples();
        let n_lin = dev.n_linearized();
        let p_mean = dev.mean_bio(&self.bio);
        let alpha = &dev.means[dev.alpha_offset()..dev.alpha_offset() + dev.n_alpha];
        let beta = &dev.means[dev.beta_offset()..dev.beta_offset() + dev.n_beta];

        let n = self.n_state();
        let mut rates = DVector::zeros(n);
        let mut j_phi = DMatrix::zeros(n, s);
        let mut s_p = DMatrix::zeros(n, n_lin);
        let mut x = [0.0; MAX_TRACERS];
        for c in 0..nc {
            if !self.domain.fluid(c) {
                continue;
            }
            for k in 0..nt {
                x[k] = st.mean[k * nc + c];
            }
            let g = self.light[c / self.domain.grid.nx];
            let lin = bgc::linearize(self.model, &x[..nt], g, &p_mean, alpha, beta, &dev.theta_ids);
            for k in 0..nt {
                rates[k * nc + c] = lin.rates[k];
                for q in 0..n_lin {
                    s_p[(k * nc + c, q)] = lin.jac_params[k][q];
                }
            }
            for i in 0..s {
                let mut col = j_phi.column_mut(i);
                for k in 0..nt {
                    let mut acc = 0.0;
                    for l in 0..nt {
                        acc += lin.jac[k][l] * st.modes[(l * nc + c, i)];
                    }
                    col[k * nc + c] = acc;
                }
            }
        }

        let cyy = st.coeff_covariance();
        let (cinv, cond) = floored_pinv(&cyy);
        diag.covariance_condition = cond;

        let d_lin = dev.devs.columns(0, n_lin).into_owned();
        let c_dy = d_lin.tr_mul(&st.coeffs) / r.max(1) as f64;

        let mut q = j_phi.clone();
        if n_lin > 0 {
            q += &s_p * (&c_dy * &cinv);
        }
        let b = weighted_gram(&st.modes, w, &j_phi);
        let e = weighted_gram(&st.modes, w, &s_p);
        let mut forcing = &d_lin * e.transpose();

        let mut mean_unknown = DVector::zeros(n);
        if let (Some(basis), true) = (&self.basis, dev.n_gamma > 0) {
            let sv = self.unknown_term(st, dev, basis, w, &mut diag.clamped_evaluations);
            mean_unknown = sv.mean;
            q += &sv.cov_with_y * &cinv;
            forcing += sv.fluct_proj;
        }

        let proj = weighted_gram(&st.modes, w, &q);
        let new_modes = &st.modes + (&q - &st.modes * proj) * dt;

        let a = b.transpose() * dt;
        let eye = DMatrix::<f64>::identity(s, s);
        let a2 = &a * &a;
        let a3 = &a2 * &a;
        let a4 = &a3 * &a;
        let m1 = &eye + &a + &a2 / 2.0 + &a3 / 6.0 + &a4 / 24.0;
        let m2 = (&eye + &a / 2.0 + &a2 / 6.0 + &a3 / 24.0) * dt;
        st.coeffs = &st.coeffs * m1 + forcing * m2;

        st.mean += (rates + mean_unknown) * dt;
        st.modes = new_modes;
        Ok(orthonormality_error(&st.modes, w))
    }

    /// Monte-Carlo statistics of the unknown-function term over all realizations.
    fn unknown_term(
        &self,
        st: &DOState,
        dev: &ParamDeviations,
        basis: &PiecewiseBasis,
        w: &DVector<f64>,
        clamped: &mut usize,
    ) -> UnknownStats {
        let nc = self.n_cells();
        let n = self.n_state();
        let s = st.n_modes();
        let r = st.n_samples();
        let zi = self.model.zooplankton();
        let ri = self.model.recycling_pool();
        let fluid: Vec<usize> = (0..nc).filter(|&c| self.domain.fluid(c)).collect();
        let m = fluid.len();

        let mut phi_z = DMatrix::zeros(m, s);
        let mut proj_w = DMatrix::zeros(m, s);
        for (a, &c) in fluid.iter().enumerate() {
            for i in 0..s {
                let pz = st.modes[(zi * nc + c, i)];
                phi_z[(a, i)] = pz;
                proj_w[(a, i)] = w[ri * nc + c] * st.modes[(ri * nc + c, i)] - w[zi * nc + c] * pz;
            }
        }
        let mut f = &st.coeffs * phi_z.transpose();
        let g0 = dev.gamma_offset();
        let mut gamma = vec![0.0; dev.n_gamma];
        for omega in 0..r {
            for (k, g) in gamma.iter_mut().enumerate() {
                *g = dev.means[g0 + k] + dev.devs[(omega, g0 + k)];
            }
            for (a, &c) in fluid.iter().enumerate() {
                let z = st.mean[zi * nc + c] + f[(omega, a)];
                if basis.clamp(z).1 {
                    *clamped += 1;
                }
                f[(omega, a)] = basis.expand(&gamma, z);
            }
        }
        let rr = r.max(1) as f64;
        let fbar: Vec<f64> = f.column_iter().map(|col| col.sum() / rr).collect();
        for (a, mbar) in fbar.iter().enumerate() {
            f.column_mut(a).add_scalar_mut(-mbar);
        }
        let mut mean = DVector::zeros(n);
        for (a, &c) in fluid.iter().enumerate() {
            mean[zi * nc + c] -= fbar[a];
            mean[ri * nc + c] += fbar[a];
        }
        let ey = f.tr_mul(&st.coeffs) / rr;
        let mut cov_with_y = DMatrix::zeros(n, s);
        for (a, &c) in fluid.iter().enumerate() {
            for i in 0..s {
                cov_with_y[(zi * nc + c, i)] -= ey[(a, i)];
                cov_with_y[(ri * nc + c, i)] += ey[(a, i)];
            }
        }
        UnknownStats {
            mean,
            cov_with_y,
            fluct_proj: f * proj_w,
        }
    }
}

struct UnknownStats {
    mean: DVector<f64>,
    cov_with_y: DMatrix<f64>,
    fluct_proj: DMatrix<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>() - 0.5)
    }

    #[test]
    fn orthonormal_modes_pass_through() {
        let w = DVector::from_element(30, 1.0 / 30.0);
        let mut modes = random_matrix(30, 4, 1);
        let mut coeffs = random_matrix(50, 4, 2);
        reorthonormalize(&mut modes, &mut coeffs, &w);
        let (m0, c0) = (modes.clone(), coeffs.clone());
        reorthonormalize(&mut modes, &mut coeffs, &w);
        assert!((&modes - &m0).amax() < 1e-12);
        assert!((&coeffs - &c0).amax() < 1e-12);
    }

    #[test]
    fn duplicated_mode_is_replaced_and_reconstruction_kept() {
        let w = DVector::from_element(30, 1.0 / 30.0);
        let mut modes = random_matrix(30, 3, 3);
        let dup = modes.column(0).into_owned();
        modes.set_column(1, &dup);
        let mut coeffs = random_matrix(40, 3, 4);
        let before = &modes * coeffs.transpose();
        let rep = reorthonormalize(&mut modes, &mut coeffs, &w);
        assert_eq!(rep.replaced, 1);
        assert!(orthonormality_error(&modes, &w) < 1e-12);
        assert!((&modes * coeffs.transpose() - before).amax() < 1e-10);
    }

    #[test]
    fn pinv_discards_null_directions() {
        let c = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.0, 0.5]));
        let (inv, _) = floored_pinv(&c);
        assert!((inv[(0, 0)] - 0.5).abs() < 1e-14);
        assert_eq!(inv[(1, 1)], 0.0);
        assert!((inv[(2, 2)] - 2.0).abs() < 1e-14);
    }
}
