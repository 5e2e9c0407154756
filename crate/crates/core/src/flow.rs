//! Incompressible 2-D flow on the staggered grid: explicit limited advection,
//! implicit viscosity and an incremental pressure projection.
//!
//! Face classes: the inlet carries `u = U`, the outlet is zero-gradient with `p = 0`
//! imposed at the boundary face, top and bottom are free-slip walls and every face
//! touching a solid cell is held at zero.

use serde::{Deserialize, Serialize};

use crate::banded::{BandedCholesky, BandedSpd};
use crate::error::{Error, Result};
use crate::geometry::Domain;
use crate::transport::{face_value, AdvectionScheme};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub reynolds: f64,
    pub inflow: f64,
    pub cfl_limit: f64,
    #[serde(default)]
    pub momentum_advection: AdvectionScheme,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            reynolds: 1.0,
            inflow: 1.0,
            cfl_limit: 1.0,
            momentum_advection: AdvectionScheme::TvdMc,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    /// x-velocity on vertical faces, indexed by `GridSpec::u_face`.
    pub u: Vec<f64>,
    /// z-velocity on horizontal faces, indexed by `GridSpec::w_face`.
    pub w: Vec<f64>,
    /// Pressure at cell centers.
    pub p: Vec<f64>,
    pub time: f64,
}

/// Advecting velocities on tracer-cell faces; identical layout to `FlowState`.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceVelocities {
    pub u: Vec<f64>,
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowDiagnostics {
    pub courant: f64,
    pub max_divergence: f64,
    pub pressure_residual: f64,
    pub kinetic_energy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Face {
    Unknown(usize),
    Inlet,
    Outlet,
    /// Boundary wall or face touching a solid cell; value fixed at zero.
    Wall,
}

pub struct FlowSolver {
    domain: Domain,
    cfg: FlowConfig,
    dt: f64,
    u_faces: Vec<Face>,
    w_faces: Vec<Face>,
    u_ids: Vec<usize>,
    w_ids: Vec<usize>,
    visc_u: BandedCholesky,
    visc_w: BandedCholesky,
    visc_u_bc: Vec<f64>,
    p_ids: Vec<usize>,
    p_index: Vec<usize>,
    poisson: BandedSpd,
    poisson_chol: BandedCholesky,
}

impl FlowSolver {
    pub fn new(domain: &Domain, cfg: FlowConfig, dt: f64) -> Result<Self> {
        if !(cfg.reynolds > 0.0 && dt > 0.0 && cfg.cfl_limit > 0.0) {
            return Err(Error::Config(
                "Reynolds number, time step and CFL limit must be positive".into(),
            ));
        }
        let g = domain.grid;
        let nu = 1.0 / cfg.reynolds;

        let mut u_faces = vec![Face::Wall; g.n_u()];
        let mut u_ids = Vec::new();
        for i in 0..=g.nx {
            for j in 0..g.nz {
                let (ii, jj) = (i as isize, j as isize);
                let f = g.u_face(i, j);
                u_faces[f] = if i == 0 {
                    if domain.fluid_at(0, jj) {
                        Face::Inlet
                    } else {
                        Face::Wall
                    }
                } else if i == g.nx {
                    if domain.fluid_at(ii - 1, jj) {
                        Face::Outlet
                    } else {
                        Face::Wall
                    }
                } else if domain.fluid_at(ii - 1, jj) && domain.fluid_at(ii, jj) {
                    u_ids.push(f);
                    Face::Unknown(u_ids.len() - 1)
                } else {
                    Face::Wall
                };
            }
        }
        let mut w_faces = vec![Face::Wall; g.n_w()];
        let mut w_ids = Vec::new();
        for i in 0..g.nx {
            for j in 1..g.nz {
                let (ii, jj) = (i as isize, j as isize);
                if domain.fluid_at(ii, jj - 1) && domain.fluid_at(ii, jj) {
                    let f = g.w_face(i, j);
                    w_ids.push(f);
                    w_faces[f] = Face::Unknown(w_ids.len() - 1);
                }
            }
        }

        let cx = dt * nu / (g.dx * g.dx);
        let cz = dt * nu / (g.dz * g.dz);

        let mut trip = Vec::new();
        let mut visc_u_bc = vec![0.0; u_ids.len()];
        for (k, &f) in u_ids.iter().enumerate() {
            let (i, j) = (f % (g.nx + 1), f / (g.nx + 1));
            let mut diag = 1.0;
            for ni in [i - 1, i + 1] {
                match u_faces[g.u_face(ni, j)] {
                    Face::Unknown(n) => {
                        diag += cx;
                        trip.push((k, n, -cx));
                    }
                    Face::Inlet => {
                        diag += cx;
                        visc_u_bc[k] += cx * cfg.inflow;
                    }
                    Face::Outlet => {}
                    Face::Wall => diag += cx,
                }
            }
            for nj in [j as isize - 1, j as isize + 1] {
                if nj < 0 || nj >= g.nz as isize {
                    continue;
                }
                match u_faces[g.u_face(i, nj as usize)] {
                    Face::Unknown(n) => {
                        diag += cz;
                        trip.push((k, n, -cz));
                    }
                    _ => diag += 2.0 * cz,
                }
            }
            trip.push((k, k, diag));
        }
        let visc_u = BandedSpd::from_triplets(u_ids.len(), &trip).factor()?;

        trip.clear();
        for (k, &f) in w_ids.iter().enumerate() {
            let (i, j) = (f % g.nx, f / g.nx);
            let mut diag = 1.0;
            for nj in [j - 1, j + 1] {
                match w_faces[g.w_face(i, nj)] {
                    Face::Unknown(n) => {
                        diag += cz;
                        trip.push((k, n, -cz));
                    }
                    _ => diag += cz,
                }
            }
            for ni in [i as isize - 1, i as isize + 1] {
                if ni >= g.nx as isize {
                    continue;
                }
                if ni < 0 {
                    diag += 2.0 * cx;
                    continue;
                }
                match w_faces[g.w_face(ni as usize, j)] {
                    Face::Unknown(n) => {
                        diag += cx;
                        trip.push((k, n, -cx));
                    }
                    _ => diag += 2.0 * cx,
                }
            }
            trip.push((k, k, diag));
        }
        let visc_w = BandedSpd::from_triplets(w_ids.len(), &trip).factor()?;

        let mut p_ids = Vec::new();
        let mut p_index = vec![usize::MAX; g.n_cells()];
        for i in 0..g.nx {
            for j in 0..g.nz {
                let c = g.cell(i, j);
                if domain.fluid(c) {
                    p_index[c] = p_ids.len();
                    p_ids.push(c);
                }
            }
        }
        trip.clear();
        let (ax, az) = (1.0 / (g.dx * g.dx), 1.0 / (g.dz * g.dz));
        for (k, &c) in p_ids.iter().enumerate() {
            let (i, j) = ((c % g.nx) as isize, (c / g.nx) as isize);
            let mut diag = 0.0;
            for (di, dj, a) in [(-1, 0, ax), (1, 0, ax), (0, -1, az), (0, 1, az)] {
                if domain.fluid_at(i + di, j + dj) {
                    diag += a;
                    trip.push((k, p_index[g.cell((i + di) as usize, (j + dj) as usize)], -a));
                }
            }
            if i as usize == g.nx - 1 {
                diag += 2.0 * ax;
            }
            trip.push((k, k, diag));
        }
        let poisson = BandedSpd::from_triplets(p_ids.len(), &trip);
        let poisson_chol = poisson.factor()?;

        Ok(Self {
            domain: domain.clone(),
            cfg,
            dt,
            u_faces,
            w_faces,
            u_ids,
            w_ids,
            visc_u,
            visc_w,
            visc_u_bc,
            p_ids,
            p_index,
            poisson,
            poisson_chol,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn config(&self) -> &FlowConfig {
        &self.cfg
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    /// Uniform inflow on every open face followed by one projection; pressure starts at zero.
    pub fn initial_state(&self) -> Result<FlowState> {
        let g = self.domain.grid;
        let mut u = vec![0.0; g.n_u()];
        for (f, kind) in self.u_faces.iter().enumerate() {
            if *kind != Face::Wall {
                u[f] = self.cfg.inflow;
            }
        }
        let mut state = FlowState {
            u,
            w: vec![0.0; g.n_w()],
            p: vec![0.0; g.n_cells()],
            time: 0.0,
        };
        self.project(&mut state)?;
        state.p.iter_mut().for_each(|p| *p = 0.0);
        Ok(state)
    }

    pub fn courant(&self, s: &FlowState) -> f64 {
        let g = self.domain.grid;
        let cu = s.u.iter().fold(0.0f64, |m, v| m.max(v.abs())) * self.dt / g.dx;
        let cw = s.w.iter().fold(0.0f64, |m, v| m.max(v.abs())) * self.dt / g.dz;
        cu.max(cw)
    }

    pub fn divergence(&self, s: &FlowState) -> Vec<f64> {
        let g = self.domain.grid;
        let mut div = vec![0.0; g.n_cells()];
        for j in 0..g.nz {
            for i in 0..g.nx {
                let c = g.cell(i, j);
                if self.domain.fluid(c) {
                    div[c] = (s.u[g.u_face(i + 1, j)] - s.u[g.u_face(i, j)]) / g.dx
                        + (s.w[g.w_face(i, j + 1)] - s.w[g.w_face(i, j)]) / g.dz;
                }
            }
        }
        div
    }

    pub fn max_divergence(&self, s: &FlowState) -> f64 {
        self.divergence(s).iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn kinetic_energy(&self, s: &FlowState) -> f64 {
        let g = self.domain.grid;
        0.5 * g.cell_volume()
            * (s.u.iter().map(|v| v * v).sum::<f64>() + s.w.iter().map(|v| v * v).sum::<f64>())
    }

    pub fn face_velocities(&self, s: &FlowState) -> FaceVelocities {
        face_velocities_for_tracers(s)
    }

    /// Advances one time step of length `dt`.
    pub fn step(&self, s: &mut FlowState) -> Result<FlowDiagnostics> {
        let courant = self.courant(s);
        if !(courant <= self.cfg.cfl_limit) {
            return Err(Error::Cfl {
                courant,
                limit: self.cfg.cfl_limit,
                time: s.time,
            });
        }
        let g = self.domain.grid;
        let dt = self.dt;
        let (adv_u, adv_w) = self.advection(s);

        let mut rhs: Vec<f64> = self
            .u_ids
            .iter()
            .enumerate()
            .map(|(k, &f)| {
                let (i, j) = (f % (g.nx + 1), f / (g.nx + 1));
                let dpdx = (s.p[g.cell(i, j)] - s.p[g.cell(i - 1, j)]) / g.dx;
                s.u[f] + dt * (adv_u[k] - dpdx) + self.visc_u_bc[k]
            })
            .collect();
        self.visc_u.solve_in_place(&mut rhs);
        for (k, &f) in self.u_ids.iter().enumerate() {
            s.u[f] = rhs[k];
        }

        let mut rhs: Vec<f64> = self
            .w_ids
            .iter()
            .enumerate()
            .map(|(k, &f)| {
                let (i, j) = (f % g.nx, f / g.nx);
                let dpdz = (s.p[g.cell(i, j)] - s.p[g.cell(i, j - 1)]) / g.dz;
                s.w[f] + dt * (adv_w[k] - dpdz)
            })
            .collect();
        self.visc_w.solve_in_place(&mut rhs);
        for (k, &f) in self.w_ids.iter().enumerate() {
            s.w[f] = rhs[k];
        }

        for j in 0..g.nz {
            match self.u_faces[g.u_face(g.nx, j)] {
                Face::Outlet => s.u[g.u_face(g.nx, j)] = s.u[g.u_face(g.nx - 1, j)],
                _ => s.u[g.u_face(g.nx, j)] = 0.0,
            }
            if self.u_faces[g.u_face(0, j)] == Face::Inlet {
                s.u[g.u_face(0, j)] = self.cfg.inflow;
            }
        }

        let pressure_residual = self.project(s)?;
        s.time += dt;
        for v in s.u.iter().chain(s.w.iter()).chain(s.p.iter()) {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    term: "flow step",
                    time: s.time,
                });
            }
        }
        Ok(FlowDiagnostics {
            courant,
            max_divergence: self.max_divergence(s),
            pressure_residual,
            kinetic_energy: self.kinetic_energy(s),
        })
    }

    /// Removes the divergence of `s` in place and returns the relative Poisson residual.
    fn project(&self, s: &mut FlowState) -> Result<f64> {
        let g = self.domain.grid;
        let dt = self.dt;
        let div = self.divergence(s);
        let b: Vec<f64> = self.p_ids.iter().map(|&c| -div[c] / dt).collect();
        let mut phi = b.clone();
        self.poisson_chol.solve_in_place(&mut phi);
        let mut ax = vec![0.0; phi.len()];
        self.poisson.mul_vec(&phi, &mut ax);
        let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rnorm = ax
            .iter()
            .zip(&b)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let residual = if bnorm > 0.0 { rnorm / bnorm } else { rnorm };
        if residual > 1e-10 {
            return Err(Error::Solver {
                context: "pressure Poisson",
                residual,
            });
        }
        let phi_at = |c: usize| phi[self.p_index[c]];
        for &f in &self.u_ids {
            let (i, j) = (f % (g.nx + 1), f / (g.nx + 1));
            s.u[f] -= dt * (phi_at(g.cell(i, j)) - phi_at(g.cell(i - 1, j))) / g.dx;
        }
        for j in 0..g.nz {
            let f = g.u_face(g.nx, j);
            if self.u_faces[f] == Face::Outlet {
                s.u[f] -= dt * (-2.0 * phi_at(g.cell(g.nx - 1, j))) / g.dx;
            }
        }
        for &f in &self.w_ids {
            let (i, j) = (f % g.nx, f / g.nx);
            s.w[f] -= dt * (phi_at(g.cell(i, j)) - phi_at(g.cell(i, j - 1))) / g.dz;
        }
        for (k, &c) in self.p_ids.iter().enumerate() {
            s.p[c] += phi[k];
        }
        Ok(residual)
    }

    /// Momentum advection tendencies `-div(u u)` on the unknown faces.
    fn advection(&self, s: &FlowState) -> (Vec<f64>, Vec<f64>) {
        let g = self.domain.grid;
        let scheme = self.cfg.momentum_advection;
        let (nx, nz) = (g.nx as isize, g.nz as isize);
        let uval = |i: isize, j: isize| -> Option<f64> {
            if i < 0 || i > nx {
                return None;
            }
            let j = j.clamp(0, nz - 1);
            match self.u_faces[g.u_face(i as usize, j as usize)] {
                Face::Wall => Some(0.0),
                _ => Some(s.u[g.u_face(i as usize, j as usize)]),
            }
        };
        let wval = |i: isize, j: isize| -> Option<f64> {
            if j < 0 || j > nz {
                return None;
            }
            if i < 0 {
                return Some(0.0);
            }
            let i = i.min(nx - 1);
            match self.w_faces[g.w_face(i as usize, j as usize)] {
                Face::Unknown(_) => Some(s.w[g.w_face(i as usize, j as usize)]),
                _ => Some(0.0),
            }
        };
        let uvel = |i: isize, j: isize| s.u[g.u_face(i as usize, j as usize)];
        let wvel = |i: isize, j: isize| s.w[g.w_face(i as usize, j as usize)];

        let mut adv_u = vec![0.0; self.u_ids.len()];
        for (k, &f) in self.u_ids.iter().enumerate() {
            let (i, j) = ((f % (g.nx + 1)) as isize, (f / (g.nx + 1)) as isize);
            let flux_x = |a: isize| {
                let v = 0.5 * (uvel(a, j) + uvel(a + 1, j));
                v * face_value([uval(a - 1, j), uval(a, j), uval(a + 1, j), uval(a + 2, j)], v, scheme)
            };
            let flux_z = |b: isize| {
                if b < 0 || b >= nz {
                    return 0.0;
                }
                let v = 0.5 * (wvel(i - 1, b + 1) + wvel(i, b + 1));
                let line = [uval(i, b - 1), uval(i, b), uval(i, b + 1), uval(i, b + 2)];
                let line = [
                    if b - 1 < 0 { None } else { line[0] },
                    line[1],
                    if b + 1 >= nz { line[1] } else { line[2] },
                    if b + 2 >= nz { None } else { line[3] },
                ];
                v * face_value(line, v, scheme)
            };
            adv_u[k] = -(flux_x(i) - flux_x(i - 1)) / g.dx - (flux_z(j) - flux_z(j - 1)) / g.dz;
        }

        let mut adv_w = vec![0.0; self.w_ids.len()];
        for (k, &f) in self.w_ids.iter().enumerate() {
            let (i, j) = ((f % g.nx) as isize, (f / g.nx) as isize);
            let flux_z = |b: isize| {
                let v = 0.5 * (wvel(i, b) + wvel(i, b + 1));
                v * face_value([wval(i, b - 1), wval(i, b), wval(i, b + 1), wval(i, b + 2)], v, scheme)
            };
            let flux_x = |a: isize| {
                let v = 0.5 * (uvel(a + 1, j - 1) + uvel(a + 1, j));
                let far = if a + 2 >= nx { None } else { wval(a + 2, j) };
                v * face_value([wval(a - 1, j), wval(a, j), wval(a + 1, j), far], v, scheme)
            };
            adv_w[k] = -(flux_z(j) - flux_z(j - 1)) / g.dz - (flux_x(i) - flux_x(i - 1)) / g.dx;
        }
        (adv_u, adv_w)
    }
}

pub fn face_velocities_for_tracers(s: &FlowState) -> FaceVelocities {
    FaceVelocities {
        u: s.u.clone(),
        w: s.w.clone(),
    }
}

/// Discrete divergence of face velocities over fluid cells.
pub fn face_divergence(domain: &Domain, v: &FaceVelocities) -> Vec<f64> {
    let g = domain.grid;
    let mut div = vec![0.0; g.n_cells()];
    for j in 0..g.nz {
        for i in 0..g.nx {
            let c = g.cell(i, j);
            if domain.fluid(c) {
                div[c] = (v.u[g.u_face(i + 1, j)] - v.u[g.u_face(i, j)]) / g.dx
                    + (v.w[g.w_face(i, j + 1)] - v.w[g.w_face(i, j)]) / g.dz;
            }
        }
    }
    div
}
