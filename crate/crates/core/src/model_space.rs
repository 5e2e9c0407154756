//! Formulation, complexity and expansion parameters, and the piecewise-linear basis
//! used to represent an unknown function of one tracer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hat functions on strictly increasing nodes. Indices are zero-based: `k = 0..n_nodes()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseBasis {
    nodes: Vec<f64>,
}

impl PiecewiseBasis {
    pub fn new(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 || nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config(
                "basis nodes must be at least two strictly increasing values".into(),
            ));
        }
        Ok(Self { nodes })
    }

    /// `intervals` equal intervals on `[lo, hi]`.
    pub fn uniform(lo: f64, hi: f64, intervals: usize) -> Result<Self> {
        if intervals == 0 || !(hi > lo) {
            return Err(Error::Config("basis range must be non-empty".into()));
        }
        let h = (hi - lo) / intervals as f64;
        let mut nodes: Vec<f64> = (0..=intervals).map(|k| lo + h * k as f64).collect();
        nodes[intervals] = hi;
        Self::new(nodes)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn range(&self) -> (f64, f64) {
        (self.nodes[0], self.nodes[self.nodes.len() - 1])
    }

    /// Clamps into the basis range; the flag reports whether clamping occurred.
    pub fn clamp(&self, phi: f64) -> (f64, bool) {
        let (lo, hi) = self.range();
        if phi < lo {
            (lo, true)
        } else if phi > hi {
            (hi, true)
        } else {
            (phi, false)
        }
    }

    /// Interval `k` with `nodes[k] <= phi <= nodes[k + 1]` for an in-range `phi`.
    fn interval(&self, phi: f64) -> usize {
        let n = self.nodes.len();
        match self.nodes.partition_point(|&x| x <= phi) {
            0 => 0,
            p if p >= n => n - 2,
            p => p - 1,
        }
    }

    /// `Psi_k(phi)`, evaluated after clamping `phi` into range.
    pub fn eval(&self, k: usize, phi: f64) -> f64 {
        let (phi, _) = self.clamp(phi);
        let m = self.interval(phi);
        let (a, b) = (self.nodes[m], self.nodes[m + 1]);
        let t = (phi - a) / (b - a);
        if k == m {
            1.0 - t
        } else if k == m + 1 {
            t
        } else {
            0.0
        }
    }

    /// Interpolant through `(nodes[k], gamma[k])`, evaluated after clamping.
    pub fn expand(&self, gamma: &[f64], phi: f64) -> f64 {
        let (phi, _) = self.clamp(phi);
        let m = self.interval(phi);
        let (a, b) = (self.nodes[m], self.nodes[m + 1]);
        let t = (phi - a) / (b - a);
        gamma[m] * (1.0 - t) + gamma[m + 1] * t
    }

    /// Derivative of `expand` in `phi`; zero outside the range, right-sided at nodes.
    pub fn slope(&self, gamma: &[f64], phi: f64) -> f64 {
        let (_, clamped) = self.clamp(phi);
        if clamped {
            return 0.0;
        }
        let m = self.interval(phi);
        (gamma[m + 1] - gamma[m]) / (self.nodes[m + 1] - self.nodes[m])
    }
}

pub fn basis_eval(basis: &PiecewiseBasis, k: usize, phi: f64) -> f64 {
    basis.eval(k, phi)
}

pub fn expand_f(basis: &PiecewiseBasis, gamma: &[f64], phi: f64) -> f64 {
    basis.expand(gamma, phi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaPrior {
    pub g_max: f64,
    /// Upper bound on `|gamma[k+1] - 2 gamma[k] + gamma[k-1]|`.
    pub smoothness: f64,
    pub pin_first: bool,
}

/// Draws node ordinates uniformly in `[0, g_max]` subject to the second-difference bound.
///
/// Ordinates are drawn left to right, each uniform on the part of `[0, g_max]` that keeps
/// the newest second difference within the bound; a draw whose admissible interval is
/// empty restarts. Returns the samples and the fraction of attempts that completed.
pub fn sample_gamma_prior<R: Rng + ?Sized>(
    basis: &PiecewiseBasis,
    prior: &GammaPrior,
    n: usize,
    rng: &mut R,
) -> Result<(Vec<Vec<f64>>, f64)> {
    if !(prior.g_max > 0.0) || n == 0 || !(prior.smoothness >= 0.0) {
        return Err(Error::Config(
            "gamma prior needs g_max > 0, n >= 1 and a non-negative smoothness bound".into(),
        ));
    }
    let m = basis.n_nodes();
    let max_attempts = (n as f64 * 1e4).ceil() as usize + 100;
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Infeasible(format!(
                "gamma prior acceptance rate below 1e-4 ({} of {} attempts)",
                out.len(),
                attempts - 1
            )));
        }
        let mut g: Vec<f64> = Vec::with_capacity(m);
        let mut ok = true;
        for k in 0..m {
            let (lo, hi) = if k == 0 && prior.pin_first {
                (0.0, 0.0)
            } else if k < 2 {
                (0.0, prior.g_max)
            } else {
                let pred = 2.0 * g[k - 1] - g[k - 2];
                (
                    (pred - prior.smoothness).max(0.0),
                    (pred + prior.smoothness).min(prior.g_max),
                )
            };
            if lo > hi {
                ok = false;
                break;
            }
            g.push(if hi > lo { rng.random_range(lo..=hi) } else { lo });
        }
        if ok {
            out.push(g);
        }
    }
    Ok((out, n as f64 / attempts as f64))
}

/// Bernoulli draws with success probability `p1`.
pub fn sample_discrete_prior<R: Rng + ?Sized>(p1: f64, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&p1) {
        return Err(Error::Config(format!("probability {p1} outside [0, 1]")));
    }
    Ok((0..n)
        .map(|_| if rng.random::<f64>() < p1 { 1.0 } else { 0.0 })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hat_apex_and_support() {
        let b = PiecewiseBasis::uniform(0.0, 0.3, 10).unwrap();
        for k in 0..11 {
            for j in 0..11 {
                let v = b.eval(k, b.nodes()[j]);
                assert_eq!(v, if j == k { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn quadratic_node_values_interpolate() {
        let b = PiecewiseBasis::uniform(0.0, 0.3, 10).unwrap();
        let g: Vec<f64> = b.nodes().iter().map(|z| 0.2 * z * z).collect();
        assert!((b.expand(&g, 0.15) - 0.0045).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_is_clamped() {
        let b = PiecewiseBasis::uniform(0.0, 0.3, 10).unwrap();
        let g = vec![1.0; 11];
        assert_eq!(b.expand(&g, -1.0), 1.0);
        assert_eq!(b.clamp(0.5), (0.3, true));
    }

    #[test]
    fn discrete_prior_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_discrete_prior(1.0, 100, &mut rng).unwrap().iter().all(|v| *v == 1.0));
        assert!(sample_discrete_prior(0.0, 100, &mut rng).unwrap().iter().all(|v| *v == 0.0));
        assert!(sample_discrete_prior(1.5, 1, &mut rng).is_err());
    }

    #[test]
    fn zero_bound_gives_affine_samples() {
        let b = PiecewiseBasis::uniform(0.0, 0.3, 10).unwrap();
        let prior = GammaPrior { g_max: 0.08, smoothness: 0.0, pin_first: true };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (s, _) = sample_gamma_prior(&b, &prior, 50, &mut rng).unwrap();
        for g in s {
            assert_eq!(g[0], 0.0);
            for k in 1..10 {
                assert!((g[k + 1] - 2.0 * g[k] + g[k - 1]).abs() < 1e-15);
            }
        }
    }
}
