//! Mixture-model update of the augmented parameter and coefficient ensemble at an
//! observation time.
//!
//! Augmented columns are ordered `[theta | alpha | beta | gamma | Y]`. Parameters carry unit
//! modes, so the projected observation operator is `[0 | H * modes]`.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;

use crate::do_engine::{DOState, ParamDeviations};
use crate::error::{Error, Result};
use crate::geometry::Domain;
use crate::gmm::{select_k_bic, update_mixture, EmConfig, GaussianMixture, Whitening};

/// Cell indices and bilinear weights into one tracer field.
pub type Stencil = Vec<(usize, f64)>;

/// Bilinear stencil between the four cell centres surrounding `(x, z)`.
///
/// Points outside the cell-centre hull or touching a solid cell are rejected.
pub fn bilinear_stencil(domain: &Domain, x: f64, z: f64) -> Result<Stencil> {
    let g = domain.grid;
    let fi = x / g.dx - 0.5;
    let fj = z / g.dz - 0.5;
    if !(fi >= 0.0 && fj >= 0.0 && fi <= (g.nx - 1) as f64 && fj <= (g.nz - 1) as f64) {
        return Err(Error::Config(format!("observation point ({x}, {z}) outside the domain")));
    }
    let i0 = (fi.floor() as usize).min(g.nx - 2);
    let j0 = (fj.floor() as usize).min(g.nz - 2);
    let (tx, tz) = (fi - i0 as f64, fj - j0 as f64);
    let mut st = Vec::with_capacity(4);
    for (di, dj, w) in [
        (0, 0, (1.0 - tx) * (1.0 - tz)),
        (1, 0, tx * (1.0 - tz)),
        (0, 1, (1.0 - tx) * tz),
        (1, 1, tx * tz),
    ] {
        let c = g.cell(i0 + di, j0 + dj);
        if w > 0.0 {
            if !domain.fluid(c) {
                return Err(Error::Config(format!("observation point ({x}, {z}) touches a solid cell")));
            }
            st.push((c, w));
        }
    }
    Ok(st)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBatch {
    pub time: f64,
    pub tracer: usize,
    pub values: Vec<f64>,
    pub stencils: Vec<Stencil>,
    /// Diagonal of the noise covariance.
    pub noise_var: Vec<f64>,
}

impl ObservationBatch {
    pub fn validate(&self) -> Result<()> {
        let n = self.values.len();
        if self.stencils.len() != n || self.noise_var.len() != n {
            return Err(Error::Dimension {
                context: "observation batch",
                expected: n,
                got: self.stencils.len().min(self.noise_var.len()),
            });
        }
        if self.noise_var.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::Config("observation noise variances must be positive".into()));
        }
        for st in &self.stencils {
            let total: f64 = st.iter().map(|(_, w)| w).sum();
            if st.is_empty() || (total - 1.0).abs() > 1e-12 {
                return Err(Error::Config("stencil weights must sum to one".into()));
            }
        }
        Ok(())
    }

    /// Applies the observation operator to a tracer-major state vector.
    pub fn apply(&self, state: &[f64], n_cells: usize) -> Vec<f64> {
        let off = self.tracer * n_cells;
        self.stencils
            .iter()
            .map(|st| st.iter().map(|(c, w)| w * state[off + c]).sum())
            .collect()
    }
}

/// Joint parameter and coefficient samples.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedEnsemble {
    /// `n_r x (n_params + n_s)`.
    pub samples: DMatrix<f64>,
    pub n_params: usize,
}

impl AugmentedEnsemble {
    pub fn new(state: &DOState, dev: &ParamDeviations) -> Result<Self> {
        let r = state.n_samples();
        if dev.devs.nrows() != r {
            return Err(Error::Dimension {
                context: "parameter deviations rows",
                expected: r,
                got: dev.devs.nrows(),
            });
        }
        let (p, s) = (dev.n_params(), state.n_modes());
        let mut samples = DMatrix::zeros(r, p + s);
        samples.columns_mut(0, p).copy_from(&dev.devs);
        samples.columns_mut(p, s).copy_from(&state.coeffs);
        Ok(Self { samples, n_params: p })
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    /// `[0 | H * modes]`.
    pub fn projected_operator(&self, state: &DOState, obs: &ObservationBatch, n_cells: usize) -> DMatrix<f64> {
        let s = state.n_modes();
        let off = obs.tracer * n_cells;
        let mut h = DMatrix::zeros(obs.values.len(), self.n_params + s);
        for (o, st) in obs.stencils.iter().enumerate() {
            for i in 0..s {
                h[(o, self.n_params + i)] = st.iter().map(|(c, w)| w * state.modes[(off + c, i)]).sum();
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    pub k_max: usize,
    /// Consecutive BIC increases that end the order search.
    pub patience: usize,
    pub em: EmConfig,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            k_max: 15,
            patience: 3,
            em: EmConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateReport {
    pub time: f64,
    pub k: usize,
    pub forced_single: bool,
    pub bic_scores: Vec<(usize, f64)>,
    pub prior_weights: Vec<f64>,
    pub posterior_weights: Vec<f64>,
    /// `y - H mean` before the update.
    pub innovation: Vec<f64>,
    pub innovation_norm: f64,
    /// Innovation norm in the metric of the prior predictive covariance.
    pub normalized_innovation: f64,
    pub log_evidence: f64,
    pub jitter: f64,
    pub em_iterations: usize,
    pub dropped_components: usize,
    /// Mean-state shift applied to the parameter block.
    pub parameter_shift: Vec<f64>,
    /// Norm of the innovation after the update.
    pub posterior_misfit: f64,
}

/// Prior mixture of the augmented ensemble in original coordinates and the order search.
pub fn fit_prior<R: Rng + ?Sized>(
    ens: &AugmentedEnsemble,
    cfg: &FilterConfig,
    rng: &mut R,
) -> Result<(GaussianMixture, crate::gmm::BicSelection)> {
    let wt = Whitening::fit(&ens.samples);
    let xw = wt.apply(&ens.samples);
    let sel = select_k_bic(&xw, cfg.k_max, cfg.patience, &cfg.em, rng)?;
    Ok((wt.unapply(&sel.fit.mixture), sel))
}

/// Bayesian update at one observation time; writes the posterior back into `state` and `dev`.
pub fn assimilate<R: Rng + ?Sized>(
    state: &mut DOState,
    dev: &mut ParamDeviations,
    obs: &ObservationBatch,
    cfg: &FilterConfig,
    rng: &mut R,
) -> Result<UpdateReport> {
    obs.validate()?;
    let n_cells = state.mean.len() / state.sigma_nd.len();
    if obs.tracer >= state.sigma_nd.len() {
        return Err(Error::Config(format!("observed tracer {} not in the model", obs.tracer)));
    }
    let ens = AugmentedEnsemble::new(state, dev)?;
    let h = ens.projected_operator(state, obs, n_cells);
    let hm = obs.apply(state.mean.as_slice(), n_cells);
    let innovation = DVector::from_iterator(hm.len(), obs.values.iter().zip(&hm).map(|(y, m)| y - m));

    let (prior, sel) = fit_prior(&ens, cfg, rng)?;
    let post = update_mixture(&prior, &h, &innovation, &obs.noise_var)?;

    let pred = &h * prior.covariance() * h.transpose()
        + DMatrix::from_diagonal(&DVector::from_column_slice(&obs.noise_var));
    let normalized_innovation = Cholesky::new(pred)
        .map(|c| innovation.dot(&c.solve(&innovation)).sqrt())
        .unwrap_or(f64::NAN);

    let r = state.n_samples();
    let mut x = post.mixture.sample(r, rng);
    let rr = r.max(1) as f64;
    let mut shift = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / rr));
    for mut row in x.row_iter_mut() {
        row -= shift.transpose();
    }
    // Columns without spread (a pinned node, say) carry no uncertainty; the eigenvalue floor
    // must not turn them into noise.
    for (j, col) in ens.samples.column_iter().enumerate() {
        if col.iter().all(|v| *v == col[0]) {
            shift[j] = 0.0;
            x.column_mut(j).fill(col[0]);
        }
    }
    let p = ens.n_params;
    let s = state.n_modes();
    let y_shift = shift.rows(p, s).into_owned();
    state.mean += &state.modes * &y_shift;
    for j in 0..p {
        dev.means[j] += shift[j];
    }
    dev.devs.copy_from(&x.columns(0, p));
    state.coeffs.copy_from(&x.columns(p, s));

    let hm_post = obs.apply(state.mean.as_slice(), n_cells);
    let posterior_misfit = obs
        .values
        .iter()
        .zip(&hm_post)
        .map(|(y, m)| (y - m) * (y - m))
        .sum::<f64>()
        .sqrt();
    Ok(UpdateReport {
        time: obs.time,
        k: prior.k(),
        forced_single: sel.forced_single,
        bic_scores: sel.scores,
        prior_weights: prior.weights.clone(),
        posterior_weights: post.mixture.weights.clone(),
        innovation_norm: innovation.norm(),
        innovation: innovation.as_slice().to_vec(),
        normalized_innovation,
        log_evidence: post.log_evidence,
        jitter: post.jitter,
        em_iterations: sel.fit.iterations,
        dropped_components: sel.fit.dropped,
        parameter_shift: shift.rows(0, p).iter().copied().collect(),
        posterior_misfit,
    })
}

/// Fraction of samples above 0.5.
pub fn posterior_presence_probability(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    samples.iter().filter(|v| **v > 0.5).count() as f64 / samples.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DomainConfig;

    #[test]
    fn presence_extremes() {
        assert_eq!(posterior_presence_probability(&[1.0; 10]), 1.0);
        assert_eq!(posterior_presence_probability(&[0.0; 10]), 0.0);
    }

    #[test]
    fn stencil_weights_sum_to_one() {
        let d = Domain::new(&DomainConfig {
            nx: 40,
            nz: 10,
            ..DomainConfig::default()
        })
        .unwrap();
        let st = bilinear_stencil(&d, 11.3, 1.7).unwrap();
        let total: f64 = st.iter().map(|(_, w)| w).sum();
        assert!((total - 1.0).abs() < 1e-14);
        assert!(bilinear_stencil(&d, 7.5, 0.1).is_err());
        assert!(bilinear_stencil(&d, 30.0, 1.0).is_err());
    }
}
