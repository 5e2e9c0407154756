//! Symmetric positive-definite banded matrices with a Cholesky factorization.

use crate::error::{Error, Result};

/// Lower band storage: row `i` keeps columns `i - bw ..= i` at offsets `0 ..= bw`.
#[derive(Debug, Clone)]
pub struct BandedSpd {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandedSpd {
    /// Assembles from `(row, col, value)` triplets; duplicates add, upper entries are ignored.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let bw = triplets
            .iter()
            .filter(|(r, c, _)| r >= c)
            .map(|(r, c, _)| r - c)
            .max()
            .unwrap_or(0);
        let mut data = vec![0.0; n * (bw + 1)];
        for &(r, c, v) in triplets {
            if r >= c {
                data[r * (bw + 1) + (c + bw - r)] += v;
            }
        }
        Self { n, bw, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (r, c) = if r >= c { (r, c) } else { (c, r) };
        if r - c > self.bw {
            0.0
        } else {
            self.data[r * (self.bw + 1) + (c + self.bw - r)]
        }
    }

    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        let w = self.bw + 1;
        y.iter_mut().for_each(|v| *v = 0.0);
        for r in 0..self.n {
            let lo = r.saturating_sub(self.bw);
            for c in lo..=r {
                let a = self.data[r * w + (c + self.bw - r)];
                y[r] += a * x[c];
                if c != r {
                    y[c] += a * x[r];
                }
            }
        }
    }

    pub fn factor(&self) -> Result<BandedCholesky> {
        let (n, bw) = (self.n, self.bw);
        let w = bw + 1;
        let mut l = self.data.clone();
        for r in 0..n {
            let lo = r.saturating_sub(bw);
            for c in lo..=r {
                let mut s = l[r * w + (c + bw - r)];
                let k_lo = lo.max(c.saturating_sub(bw));
                for k in k_lo..c {
                    s -= l[r * w + (k + bw - r)] * l[c * w + (k + bw - c)];
                }
                if c == r {
                    if !(s > 0.0) {
                        return Err(Error::Solver {
                            context: "banded Cholesky (matrix not positive definite)",
                            residual: s,
                        });
                    }
                    l[r * w + bw] = s.sqrt();
                } else {
                    l[r * w + (c + bw - r)] = s / l[c * w + bw];
                }
            }
        }
        Ok(BandedCholesky { n, bw, l })
    }
}

#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    l: Vec<f64>,
}

impl BandedCholesky {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Overwrites `b` with the solution of `A x = b`.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let (n, bw) = (self.n, self.bw);
        let w = bw + 1;
        for r in 0..n {
            let lo = r.saturating_sub(bw);
            let mut s = b[r];
            for k in lo..r {
                s -= self.l[r * w + (k + bw - r)] * b[k];
            }
            b[r] = s / self.l[r * w + bw];
        }
        for r in (0..n).rev() {
            let mut s = b[r];
            let hi = (r + bw).min(n - 1);
            for k in r + 1..=hi {
                s -= self.l[k * w + (r + bw - k)] * b[k];
            }
            b[r] = s / self.l[r * w + bw];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn matches_dense_solve() {
        let n = 40;
        let bw = 5;
        let mut trip = Vec::new();
        let mut dense = DMatrix::<f64>::zeros(n, n);
        for r in 0..n {
            for c in r.saturating_sub(bw)..r {
                let v = -(((r * 7 + c * 3) % 5) as f64) * 0.1 - 0.05;
                trip.push((r, c, v));
                trip.push((c, r, v));
                dense[(r, c)] = v;
                dense[(c, r)] = v;
            }
        }
        for r in 0..n {
            let off: f64 = (0..n).filter(|&c| c != r).map(|c| dense[(r, c)].abs()).sum();
            trip.push((r, r, off + 1.0));
            dense[(r, r)] = off + 1.0;
        }
        let a = BandedSpd::from_triplets(n, &trip);
        assert_eq!(a.bandwidth(), bw);
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let mut x = b.clone();
        a.factor().unwrap().solve_in_place(&mut x);
        let reference = dense.lu().solve(&DVector::from_vec(b)).unwrap();
        for i in 0..n {
            assert!((x[i] - reference[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn indefinite_is_rejected() {
        let a = BandedSpd::from_triplets(2, &[(0, 0, 1.0), (1, 1, -1.0)]);
        assert!(a.factor().is_err());
    }
}
