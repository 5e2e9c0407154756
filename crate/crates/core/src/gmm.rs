//! Gaussian mixtures: EM fitting on whitened samples, BIC order selection, the conjugate
//! update under a linear Gaussian observation, and sampling.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

impl GaussianMixture {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim());
        for (w, mu) in self.weights.iter().zip(&self.means) {
            m += mu * *w;
        }
        m
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let m = self.mean();
        let d = self.dim();
        let mut c = DMatrix::zeros(d, d);
        for ((w, mu), s) in self.weights.iter().zip(&self.means).zip(&self.covs) {
            let dm = mu - &m;
            c += (s + &dm * dm.transpose()) * *w;
        }
        c
    }

    /// Log density at `x`.
    pub fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        let terms: Vec<f64> = (0..self.k())
            .map(|j| self.weights[j].ln() + gaussian_log_pdf(x, &self.means[j], &self.covs[j]))
            .collect();
        log_sum_exp(&terms)
    }

    /// Draws `n` samples, one per row.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> DMatrix<f64> {
        let d = self.dim();
        let factors: Vec<DMatrix<f64>> = self.covs.iter().map(|c| psd_factor(c)).collect();
        let mut cum = Vec::with_capacity(self.k());
        let mut acc = 0.0;
        for w in &self.weights {
            acc += w;
            cum.push(acc);
        }
        let mut out = DMatrix::zeros(n, d);
        for i in 0..n {
            let u: f64 = rng.random::<f64>() * acc;
            let j = cum.partition_point(|c| *c <= u).min(self.k() - 1);
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = &self.means[j] + &factors[j] * z;
            out.set_row(i, &x.transpose());
        }
        out
    }

    fn check(&self) -> Result<()> {
        if self.k() == 0 || self.means.len() != self.k() || self.covs.len() != self.k() {
            return Err(Error::Config("mixture needs matching weights, means and covariances".into()));
        }
        Ok(())
    }
}

/// Lower factor `L` with `L L^T = c`, clipping negative eigenvalues when `c` is only semi-definite.
fn psd_factor(c: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = Cholesky::new(c.clone()) {
        return ch.l();
    }
    let eig = SymmetricEigen::new(c.clone());
    let sq = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sq)
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn gaussian_log_pdf(x: &DVector<f64>, mu: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let d = x.len() as f64;
    let ch = Cholesky::new(cov.clone()).unwrap_or_else(|| {
        let mut c = cov.clone();
        floor_eigenvalues(&mut c, 1e-12 * (cov.trace().abs() / d).max(1e-300));
        Cholesky::new(c).expect("floored covariance is positive definite")
    });
    let diff = x - mu;
    let z = ch.l().solve_lower_triangular(&diff).expect("non-singular factor");
    let logdet = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (d * (2.0 * PI).ln() + logdet + z.norm_squared())
}

/// Raises every eigenvalue of a symmetric matrix to at least `floor`. Returns whether any changed.
pub fn floor_eigenvalues(c: &mut DMatrix<f64>, floor: f64) -> bool {
    let sym = (&*c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|l| *l >= floor) {
        *c = sym;
        return false;
    }
    let l = eig.eigenvalues.map(|l| l.max(floor));
    *c = &eig.eigenvectors * DMatrix::from_diagonal(&l) * eig.eigenvectors.transpose();
    true
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// Relative eigenvalue floor applied to each component covariance.
    pub floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
            floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmFit {
    pub mixture: GaussianMixture,
    pub log_likelihood: f64,
    /// Log-likelihood after every iteration.
    pub trace: Vec<f64>,
    /// Trace indices at which a collapsed component was re-seeded or removed;
    /// monotonicity holds between consecutive entries.
    pub restarts: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    /// Components removed after a second collapse.
    pub dropped: usize,
}

/// Per-column centering and scaling that maps samples to unit variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Whitening {
    pub center: DVector<f64>,
    pub scale: DVector<f64>,
}

impl Whitening {
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let r = x.nrows().max(1) as f64;
        let center = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / r));
        let scale = DVector::from_iterator(
            x.ncols(),
            x.column_iter().zip(center.iter()).map(|(c, m)| {
                let var = c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / r;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            }),
        );
        Self { center, scale }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col.add_scalar_mut(-self.center[j]);
            col /= self.scale[j];
        }
        out
    }

    /// Maps a mixture fitted in whitened coordinates back to the original ones.
    pub fn unapply(&self, m: &GaussianMixture) -> GaussianMixture {
        let s = DMatrix::from_diagonal(&self.scale);
        GaussianMixture {
            weights: m.weights.clone(),
            means: m.means.iter().map(|mu| &self.center + mu.component_mul(&self.scale)).collect(),
            covs: m.covs.iter().map(|c| &s * c * &s).collect(),
        }
    }
}

/// Greedy farthest-point seeds: a random first sample, then repeatedly the sample farthest
/// from all chosen seeds.
fn farthest_point_seeds<R: Rng + ?Sized>(x: &DMatrix<f64>, k: usize, rng: &mut R) -> Vec<usize> {
    let r = x.nrows();
    let mut seeds = vec![rng.random_range(0..r)];
    let mut dist: Vec<f64> = (0..r).map(|i| (x.row(i) - x.row(seeds[0])).norm_squared()).collect();
    while seeds.len() < k {
        let (next, _) = dist
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, d)| if *d > acc.1 { (i, *d) } else { acc });
        seeds.push(next);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min((x.row(i) - x.row(next)).norm_squared());
        }
    }
    seeds
}

fn sample_covariance(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let r = x.nrows().max(1) as f64;
    let mean = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / r));
    let mut xc = x.clone();
    for (j, mut col) in xc.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    (mean, xc.tr_mul(&xc) / r)
}

struct EStep {
    log_resp: DMatrix<f64>,
    row_log_likelihood: Vec<f64>,
    log_likelihood: f64,
}

fn e_step(x: &DMatrix<f64>, m: &GaussianMixture) -> EStep {
    let (r, d) = (x.nrows(), x.ncols());
    let k = m.k();
    let mut log_resp = DMatrix::zeros(r, k);
    for j in 0..k {
        let ch = Cholesky::new(m.covs[j].clone()).unwrap_or_else(|| {
            let mut c = m.covs[j].clone();
            let f = 1e-12 * (c.trace() / d as f64).max(1e-300);
            floor_eigenvalues(&mut c, f);
            Cholesky::new(c).expect("floored covariance is positive definite")
        });
        let l = ch.l();
        let logdet = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let mut xc = x.transpose();
        for mut col in xc.column_iter_mut() {
            col -= &m.means[j];
        }
        let z = l.solve_lower_triangular(&xc).expect("non-singular factor");
        let base = m.weights[j].ln() - 0.5 * (d as f64 * (2.0 * PI).ln() + logdet);
        for (i, col) in z.column_iter().enumerate() {
            log_resp[(i, j)] = base - 0.5 * col.norm_squared();
        }
    }
    let mut total = 0.0;
    let mut row = vec![0.0; k];
    let mut row_log_likelihood = Vec::with_capacity(r);
    for i in 0..r {
        for j in 0..k {
            row[j] = log_resp[(i, j)];
        }
        let lse = log_sum_exp(&row);
        total += lse;
        row_log_likelihood.push(lse);
        for j in 0..k {
            log_resp[(i, j)] -= lse;
        }
    }
    EStep {
        log_resp,
        row_log_likelihood,
        log_likelihood: total,
    }
}

/// Maximization step; returns the mixture and the indices of collapsed components.
fn m_step(x: &DMatrix<f64>, log_resp: &DMatrix<f64>, floor: f64) -> (GaussianMixture, Vec<usize>) {
    let (r, d) = (x.nrows(), x.ncols());
    let k = log_resp.ncols();
    let mut mix = GaussianMixture {
        weights: Vec::with_capacity(k),
        means: Vec::with_capacity(k),
        covs: Vec::with_capacity(k),
    };
    let mut collapsed = Vec::new();
    for j in 0..k {
        let resp: Vec<f64> = (0..r).map(|i| log_resp[(i, j)].exp()).collect();
        let nk: f64 = resp.iter().sum();
        let weight = nk / r as f64;
        if weight < 1e-6 || nk < 2.0 {
            collapsed.push(j);
        }
        let nk_safe = nk.max(f64::MIN_POSITIVE);
        let mut mean = DVector::zeros(d);
        for (i, w) in resp.iter().enumerate() {
            mean += x.row(i).transpose() * *w;
        }
        mean /= nk_safe;
        let mut xc = x.clone();
        for (i, mut row) in xc.row_iter_mut().enumerate() {
            row -= mean.transpose();
            row *= resp[i].sqrt();
        }
        let mut cov = xc.tr_mul(&xc) / nk_safe;
        let f = floor * (cov.trace() / d as f64).max(1.0);
        floor_eigenvalues(&mut cov, f);
        mix.weights.push(weight);
        mix.means.push(mean);
        mix.covs.push(cov);
    }
    (mix, collapsed)
}

/// Expectation-maximization for a `k`-component mixture on the rows of `x`.
///
/// Rows are expected in whitened coordinates; the floor is relative to the component
/// trace per dimension, bounded below by the whitened unit scale.
pub fn fit_em<R: Rng + ?Sized>(x: &DMatrix<f64>, k: usize, cfg: &EmConfig, rng: &mut R) -> Result<EmFit> {
    let (r, d) = (x.nrows(), x.ncols());
    if k == 0 || r == 0 || d == 0 {
        return Err(Error::Config("EM needs k >= 1 and a non-empty sample".into()));
    }
    let (gmean, mut gcov) = sample_covariance(x);
    let gfloor = cfg.floor * (gcov.trace() / d as f64).max(1.0);
    floor_eigenvalues(&mut gcov, gfloor);
    if k == 1 {
        let mix = GaussianMixture {
            weights: vec![1.0],
            means: vec![gmean],
            covs: vec![gcov],
        };
        let ll = e_step(x, &mix).log_likelihood;
        return Ok(EmFit {
            mixture: mix,
            log_likelihood: ll,
            trace: vec![ll],
            restarts: Vec::new(),
            iterations: 0,
            converged: true,
            dropped: 0,
        });
    }

    let seeds = farthest_point_seeds(x, k.min(r), rng);
    let mut log_resp = DMatrix::from_element(r, seeds.len(), f64::NEG_INFINITY);
    for i in 0..r {
        let nearest = seeds
            .iter()
            .enumerate()
            .map(|(j, &s)| (j, (x.row(i) - x.row(s)).norm_squared()))
            .fold((0, f64::INFINITY), |acc, (j, dd)| if dd < acc.1 { (j, dd) } else { acc })
            .0;
        log_resp[(i, nearest)] = 0.0;
    }
    let (mut mix, mut collapsed) = m_step(x, &log_resp, cfg.floor);
    let mut reseeded = vec![false; mix.k()];
    let mut trace = Vec::new();
    let mut restarts = Vec::new();
    let mut dropped = 0;
    let mut converged = false;
    let mut iterations = 0;
    let mut prev = f64::NEG_INFINITY;
    loop {
        if !collapsed.is_empty() {
            restarts.push(trace.len());
            let mut keep = Vec::new();
            let row_ll = e_step(x, &mix).row_log_likelihood;
            let worst = row_ll
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |acc, (i, v)| if *v < acc.1 { (i, *v) } else { acc })
                .0;
            for j in 0..mix.k() {
                if !collapsed.contains(&j) {
                    keep.push(j);
                } else if !reseeded[j] {
                    reseeded[j] = true;
                    keep.push(j);
                    mix.means[j] = x.row(worst).transpose();
                    mix.covs[j] = gcov.clone();
                    mix.weights[j] = 1.0 / mix.k() as f64;
                } else {
                    dropped += 1;
                }
            }
            mix = GaussianMixture {
                weights: keep.iter().map(|&j| mix.weights[j]).collect(),
                means: keep.iter().map(|&j| mix.means[j].clone()).collect(),
                covs: keep.iter().map(|&j| mix.covs[j].clone()).collect(),
            };
            reseeded = keep.iter().map(|&j| reseeded[j]).collect();
            let total: f64 = mix.weights.iter().sum();
            mix.weights.iter_mut().for_each(|w| *w /= total);
            prev = f64::NEG_INFINITY;
        }
        let es = e_step(x, &mix);
        trace.push(es.log_likelihood);
        if iterations >= cfg.max_iter {
            break;
        }
        if prev.is_finite() && (es.log_likelihood - prev) <= cfg.tol * prev.abs() {
            converged = true;
            break;
        }
        prev = es.log_likelihood;
        let (next, c) = m_step(x, &es.log_resp, cfg.floor);
        mix = next;
        collapsed = c;
        iterations += 1;
    }
    let log_likelihood = *trace.last().expect("at least one E-step");
    Ok(EmFit {
        mixture: mix,
        log_likelihood,
        trace,
        restarts,
        iterations,
        converged,
        dropped,
    })
}

pub fn bic(log_likelihood: f64, k: usize, dim: usize, n: usize) -> f64 {
    let p = (k - 1) + k * dim + k * dim * (dim + 1) / 2;
    -2.0 * log_likelihood + p as f64 * (n as f64).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BicSelection {
    pub k: usize,
    pub fit: EmFit,
    /// `(K, BIC)` for every order tried.
    pub scores: Vec<(usize, f64)>,
    /// Set when too few samples forced a single component.
    pub forced_single: bool,
}

/// Ascends `K = 1..=k_max` and keeps the BIC minimizer; stops after `patience` consecutive increases.
pub fn select_k_bic<R: Rng + ?Sized>(
    x: &DMatrix<f64>,
    k_max: usize,
    patience: usize,
    cfg: &EmConfig,
    rng: &mut R,
) -> Result<BicSelection> {
    let (r, d) = (x.nrows(), x.ncols());
    if k_max == 0 {
        return Err(Error::Config("BIC search needs k_max >= 1".into()));
    }
    if r < d + 2 {
        let fit = fit_em(x, 1, cfg, rng)?;
        let score = bic(fit.log_likelihood, 1, d, r);
        return Ok(BicSelection {
            k: 1,
            fit,
            scores: vec![(1, score)],
            forced_single: true,
        });
    }
    let mut best: Option<(f64, EmFit)> = None;
    let mut scores = Vec::new();
    let mut last = f64::INFINITY;
    let mut rises = 0;
    for k in 1..=k_max.min(r) {
        let fit = fit_em(x, k, cfg, rng)?;
        let kk = fit.mixture.k();
        let score = bic(fit.log_likelihood, kk, d, r);
        scores.push((k, score));
        if score > last {
            rises += 1;
        } else {
            rises = 0;
        }
        last = score;
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, fit));
        }
        if rises >= patience {
            break;
        }
    }
    let (_, fit) = best.expect("at least one order tried");
    Ok(BicSelection {
        k: fit.mixture.k(),
        fit,
        scores,
        forced_single: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixturePosterior {
    pub mixture: GaussianMixture,
    /// Log marginal likelihood of the observation.
    pub log_evidence: f64,
    /// Jitter added to the observation variances, zero when none was needed.
    pub jitter: f64,
}

/// Component-wise conjugate update of a mixture prior under `y = H x + v`, `v ~ N(0, diag(r))`.
pub fn update_mixture(prior: &GaussianMixture, h: &DMatrix<f64>, y: &DVector<f64>, r: &[f64]) -> Result<MixturePosterior> {
    prior.check()?;
    let ny = y.len();
    if h.nrows() != ny || r.len() != ny || h.ncols() != prior.dim() {
        return Err(Error::Dimension {
            context: "observation operator",
            expected: prior.dim(),
            got: h.ncols(),
        });
    }
    let rmat = DMatrix::from_diagonal(&DVector::from_column_slice(r));
    let mut logw = Vec::with_capacity(prior.k());
    let mut means = Vec::with_capacity(prior.k());
    let mut covs = Vec::with_capacity(prior.k());
    let mut jitter = 0.0;
    for j in 0..prior.k() {
        let sh = &prior.covs[j] * h.transpose();
        let mut s = h * &sh + &rmat;
        s = (&s + s.transpose()) * 0.5;
        let ch = match Cholesky::new(s.clone()) {
            Some(c) => c,
            None => {
                let eps = 1e-12 * (s.trace() / ny as f64).abs().max(1e-300);
                jitter = eps;
                for i in 0..ny {
                    s[(i, i)] += eps;
                }
                Cholesky::new(s.clone()).ok_or(Error::Solver {
                    context: "innovation covariance",
                    residual: eps,
                })?
            }
        };
        let innov = y - h * &prior.means[j];
        let sinv_innov = ch.solve(&innov);
        let gain_t = ch.solve(&sh.transpose());
        let mean = &prior.means[j] + sh * &sinv_innov;
        let kh = gain_t.transpose() * h;
        let eye = DMatrix::<f64>::identity(prior.dim(), prior.dim());
        let mut cov = (eye - kh) * &prior.covs[j];
        cov = (&cov + cov.transpose()) * 0.5;
        let logdet = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let ll = -0.5 * (ny as f64 * (2.0 * PI).ln() + logdet + innov.dot(&sinv_innov));
        logw.push(prior.weights[j].ln() + ll);
        means.push(mean);
        covs.push(cov);
    }
    let lse = log_sum_exp(&logw);
    let mut weights: Vec<f64> = logw.iter().map(|l| (l - lse).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(MixturePosterior {
        mixture: GaussianMixture { weights, means, covs },
        log_evidence: lse,
        jitter,
    })
}
