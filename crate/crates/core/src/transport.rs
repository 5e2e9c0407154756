//! Flux-form tracer advection with a monotonized-central limiter and implicit diffusion.
//!
//! Boundary conditions are zero-Neumann on every boundary, including the obstacle.
//! Solid cells carry zero and never exchange flux.

use serde::{Deserialize, Serialize};

use crate::banded::{BandedCholesky, BandedSpd};
use crate::error::Result;
use crate::flow::FaceVelocities;
use crate::geometry::Domain;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdvectionScheme {
    #[default]
    TvdMc,
    /// First-order upwind; linear in the advected field.
    Upwind,
}

/// Monotonized-central limiter.
pub fn mc_limiter(r: f64) -> f64 {
    (2.0 * r).min(0.5 * (1.0 + r)).min(2.0).max(0.0)
}

/// Face value from the four-point line `[a-1, a, b, b+1]` straddling the face between `a` and `b`.
///
/// `None` marks a value that is unavailable; a missing far-upwind value drops to first order.
pub fn face_value(line: [Option<f64>; 4], vel: f64, scheme: AdvectionScheme) -> f64 {
    let (far, up, down) = if vel >= 0.0 {
        (line[0], line[1], line[2])
    } else {
        (line[3], line[2], line[1])
    };
    let up = match (up, down) {
        (Some(u), _) => u,
        (None, Some(d)) => return d,
        (None, None) => return 0.0,
    };
    if scheme == AdvectionScheme::Upwind {
        return up;
    }
    match (far, down) {
        (Some(f), Some(d)) => {
            let jump = d - up;
            if jump == 0.0 {
                return up;
            }
            let r = (up - f) / jump;
            up + 0.5 * mc_limiter(r) * jump
        }
        _ => up,
    }
}

pub struct Transport {
    domain: Domain,
    scheme: AdvectionScheme,
    diffusion: Option<BandedCholesky>,
    /// Fluid cell ids in solver order (z fastest).
    order: Vec<usize>,
    scratch_flux_u: Vec<f64>,
    scratch_flux_w: Vec<f64>,
    scratch_rhs: Vec<f64>,
}

impl Transport {
    pub fn new(domain: &Domain, scheme: AdvectionScheme, kappa: f64, dt: f64) -> Result<Self> {
        let g = domain.grid;
        let mut order = Vec::new();
        let mut index = vec![usize::MAX; g.n_cells()];
        for i in 0..g.nx {
            for j in 0..g.nz {
                let c = g.cell(i, j);
                if domain.fluid(c) {
                    index[c] = order.len();
                    order.push(c);
                }
            }
        }
        let diffusion = if kappa > 0.0 {
            let cx = dt * kappa / (g.dx * g.dx);
            let cz = dt * kappa / (g.dz * g.dz);
            let mut trip = Vec::new();
            for (k, &c) in order.iter().enumerate() {
                let (i, j) = ((c % g.nx) as isize, (c / g.nx) as isize);
                let mut diag = 1.0;
                for (di, dj, coef) in [(-1, 0, cx), (1, 0, cx), (0, -1, cz), (0, 1, cz)] {
                    if domain.fluid_at(i + di, j + dj) {
                        let n = g.cell((i + di) as usize, (j + dj) as usize);
                        diag += coef;
                        trip.push((k, index[n], -coef));
                    }
                }
                trip.push((k, k, diag));
            }
            Some(BandedSpd::from_triplets(order.len(), &trip).factor()?)
        } else {
            None
        };
        Ok(Self {
            domain: domain.clone(),
            scheme,
            diffusion,
            order,
            scratch_flux_u: vec![0.0; g.n_u()],
            scratch_flux_w: vec![0.0; g.n_w()],
            scratch_rhs: Vec::new(),
        })
    }

    pub fn scheme(&self) -> AdvectionScheme {
        self.scheme
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    /// Explicit advection followed by implicit diffusion of one scalar field in place.
    pub fn apply(&mut self, field: &mut [f64], vel: &FaceVelocities, dt: f64) {
        self.advect(field, vel, dt);
        self.diffuse(field);
    }

    pub fn advect(&mut self, field: &mut [f64], vel: &FaceVelocities, dt: f64) {
        let g = self.domain.grid;
        let d = &self.domain;
        let val = |i: isize, j: isize| -> Option<f64> {
            if d.fluid_at(i, j) {
                Some(field[g.cell(i as usize, j as usize)])
            } else {
                None
            }
        };
        for j in 0..g.nz {
            for i in 0..=g.nx {
                let f = g.u_face(i, j);
                let v = vel.u[f];
                let (ii, jj) = (i as isize, j as isize);
                self.scratch_flux_u[f] = if i == 0 {
                    val(0, jj).map_or(0.0, |p| v * p)
                } else if i == g.nx {
                    val(ii - 1, jj).map_or(0.0, |p| v * p)
                } else if d.fluid_at(ii - 1, jj) && d.fluid_at(ii, jj) {
                    let line = [val(ii - 2, jj), val(ii - 1, jj), val(ii, jj), val(ii + 1, jj)];
                    v * face_value(line, v, self.scheme)
                } else {
                    0.0
                };
            }
        }
        for j in 0..=g.nz {
            for i in 0..g.nx {
                let f = g.w_face(i, j);
                let v = vel.w[f];
                let (ii, jj) = (i as isize, j as isize);
                self.scratch_flux_w[f] = if j == 0 || j == g.nz {
                    0.0
                } else if d.fluid_at(ii, jj - 1) && d.fluid_at(ii, jj) {
                    let line = [val(ii, jj - 2), val(ii, jj - 1), val(ii, jj), val(ii, jj + 1)];
                    v * face_value(line, v, self.scheme)
                } else {
                    0.0
                };
            }
        }
        let (rx, rz) = (dt / g.dx, dt / g.dz);
        for j in 0..g.nz {
            for i in 0..g.nx {
                let c = g.cell(i, j);
                if !d.fluid(c) {
                    continue;
                }
                let fu = &self.scratch_flux_u;
                let fw = &self.scratch_flux_w;
                field[c] -= rx * (fu[g.u_face(i + 1, j)] - fu[g.u_face(i, j)])
                    + rz * (fw[g.w_face(i, j + 1)] - fw[g.w_face(i, j)]);
            }
        }
    }

    pub fn diffuse(&mut self, field: &mut [f64]) {
        let Some(chol) = &self.diffusion else {
            return;
        };
        self.scratch_rhs.clear();
        self.scratch_rhs.extend(self.order.iter().map(|&c| field[c]));
        chol.solve_in_place(&mut self.scratch_rhs);
        for (k, &c) in self.order.iter().enumerate() {
            field[c] = self.scratch_rhs[k];
        }
    }

    /// Net inflow of `field` through the open boundaries over one step, given the pre-step field.
    pub fn boundary_inflow(&self, field: &[f64], vel: &FaceVelocities, dt: f64) -> f64 {
        let g = self.domain.grid;
        let mut total = 0.0;
        for j in 0..g.nz {
            let (a, b) = (g.cell(0, j), g.cell(g.nx - 1, j));
            if self.domain.fluid(a) {
                total += vel.u[g.u_face(0, j)] * field[a] * g.dz;
            }
            if self.domain.fluid(b) {
                total -= vel.u[g.u_face(g.nx, j)] * field[b] * g.dz;
            }
        }
        total * dt
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn limiter_values() {
        assert_eq!(mc_limiter(-1.0), 0.0);
        assert_eq!(mc_limiter(0.25), 0.5);
        assert_eq!(mc_limiter(1.0), 1.0);
        assert_eq!(mc_limiter(10.0), 2.0);
    }

    #[test]
    fn face_value_is_bounded_by_neighbours() {
        let line = [Some(0.0), Some(1.0), Some(3.0), Some(4.0)];
        let v = face_value(line, 1.0, AdvectionScheme::TvdMc);
        assert!((1.0..=3.0).contains(&v));
        assert_eq!(face_value(line, 1.0, AdvectionScheme::Upwind), 1.0);
        assert_eq!(face_value(line, -1.0, AdvectionScheme::Upwind), 3.0);
        assert_eq!(face_value([None, Some(2.0), Some(5.0), None], 1.0, AdvectionScheme::TvdMc), 2.0);
    }
}
