//! Ridge domain on a uniform staggered grid.
//!
//! Cells are indexed row-major with `x` fastest: `c = j * nx + i`, `j = 0` at the bottom.
//! The free surface sits at `z = lz`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub nx: usize,
    pub nz: usize,
    pub lx: f64,
    pub lz: f64,
    pub ridge_height: f64,
    pub ridge_width: f64,
    pub ridge_center: f64,
}

impl Default for DomainConfig {
    fn default() -> Self {
        Self {
            nx: 300,
            nz: 30,
            lx: 20.0,
            lz: 2.0,
            ridge_height: 1.0,
            ridge_width: 1.0,
            ridge_center: 7.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub nx: usize,
    pub nz: usize,
    pub lx: f64,
    pub lz: f64,
    pub dx: f64,
    pub dz: f64,
}

impl GridSpec {
    pub fn n_cells(&self) -> usize {
        self.nx * self.nz
    }

    pub fn cell(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn x_center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.dx
    }

    pub fn z_center(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.dz
    }

    pub fn cell_volume(&self) -> f64 {
        self.dx * self.dz
    }

    /// Number of x-velocity faces, `(nx + 1) * nz`.
    pub fn n_u(&self) -> usize {
        (self.nx + 1) * self.nz
    }

    /// Number of z-velocity faces, `nx * (nz + 1)`.
    pub fn n_w(&self) -> usize {
        self.nx * (self.nz + 1)
    }

    pub fn u_face(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    pub fn w_face(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Fluid,
    Solid,
    /// Solid cell sharing a face with at least one fluid cell.
    Ghost,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeMask {
    pub kinds: Vec<CellKind>,
    pub height: f64,
    pub width: f64,
    pub center: f64,
}

impl RidgeMask {
    pub fn profile(&self, x: f64) -> f64 {
        ridge_profile(self.height, self.width, self.center, x)
    }

    pub fn is_fluid(&self, c: usize) -> bool {
        self.kinds[c] == CellKind::Fluid
    }

    pub fn n_fluid(&self) -> usize {
        self.kinds.iter().filter(|k| **k == CellKind::Fluid).count()
    }

    pub fn n_solid(&self) -> usize {
        self.kinds.len() - self.n_fluid()
    }
}

pub fn ridge_profile(height: f64, width: f64, center: f64, x: f64) -> f64 {
    let s = (x - center) / width;
    height * (-s * s).exp()
}

/// Grid, mask and the fluid-cell bookkeeping every solver needs.
#[derive(Debug, Clone)]
pub struct Domain {
    pub grid: GridSpec,
    pub mask: RidgeMask,
    /// Fluid cell count per row `j`.
    pub fluid_per_row: Vec<usize>,
    /// Total fluid area `|D|`.
    pub fluid_area: f64,
}

impl Domain {
    pub fn fluid(&self, c: usize) -> bool {
        self.mask.is_fluid(c)
    }

    /// Fluid test that treats out-of-range indices as non-fluid.
    pub fn fluid_at(&self, i: isize, j: isize) -> bool {
        let g = &self.grid;
        i >= 0
            && j >= 0
            && (i as usize) < g.nx
            && (j as usize) < g.nz
            && self.mask.is_fluid(g.cell(i as usize, j as usize))
    }
}

pub fn build_domain(cfg: &DomainConfig) -> Result<(GridSpec, RidgeMask)> {
    let positive = [cfg.lx, cfg.lz, cfg.ridge_width];
    if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Config(
            "domain length, height and ridge width must be positive".into(),
        ));
    }
    if !(cfg.ridge_height.is_finite() && cfg.ridge_height >= 0.0) {
        return Err(Error::Config("ridge height must be non-negative".into()));
    }
    if cfg.ridge_height >= cfg.lz {
        return Err(Error::Config(format!(
            "ridge height {} reaches the domain height {}",
            cfg.ridge_height, cfg.lz
        )));
    }
    if !(cfg.ridge_center > 0.0 && cfg.ridge_center < cfg.lx) {
        return Err(Error::Config(format!(
            "ridge center {} outside (0, {})",
            cfg.ridge_center, cfg.lx
        )));
    }
    if cfg.nx < 4 || cfg.nz < 4 {
        return Err(Error::Config(format!(
            "grid {}x{} too small; need at least 4x4",
            cfg.nx, cfg.nz
        )));
    }
    let grid = GridSpec {
        nx: cfg.nx,
        nz: cfg.nz,
        lx: cfg.lx,
        lz: cfg.lz,
        dx: cfg.lx / cfg.nx as f64,
        dz: cfg.lz / cfg.nz as f64,
    };
    let mut kinds = vec![CellKind::Fluid; grid.n_cells()];
    for j in 0..grid.nz {
        for i in 0..grid.nx {
            let h = ridge_profile(
                cfg.ridge_height,
                cfg.ridge_width,
                cfg.ridge_center,
                grid.x_center(i),
            );
            if grid.z_center(j) < h {
                kinds[grid.cell(i, j)] = CellKind::Solid;
            }
        }
    }
    let solid = kinds.clone();
    for j in 0..grid.nz {
        for i in 0..grid.nx {
            let c = grid.cell(i, j);
            if solid[c] == CellKind::Fluid {
                continue;
            }
            let touches_fluid = [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)]
                .iter()
                .any(|(di, dj)| {
                    let (a, b) = (i as isize + di, j as isize + dj);
                    a >= 0
                        && b >= 0
                        && (a as usize) < grid.nx
                        && (b as usize) < grid.nz
                        && solid[grid.cell(a as usize, b as usize)] == CellKind::Fluid
                });
            if touches_fluid {
                kinds[c] = CellKind::Ghost;
            }
        }
    }
    let mask = RidgeMask {
        kinds,
        height: cfg.ridge_height,
        width: cfg.ridge_width,
        center: cfg.ridge_center,
    };
    Ok((grid, mask))
}

impl Domain {
    pub fn new(cfg: &DomainConfig) -> Result<Self> {
        let (grid, mask) = build_domain(cfg)?;
        let mut fluid_per_row = vec![0; grid.nz];
        for (j, row) in fluid_per_row.iter_mut().enumerate() {
            *row = (0..grid.nx)
                .filter(|&i| mask.is_fluid(grid.cell(i, j)))
                .count();
        }
        if fluid_per_row.iter().any(|&n| n == 0) {
            return Err(Error::Config("a grid row contains no fluid cell".into()));
        }
        let fluid_area = mask.n_fluid() as f64 * grid.cell_volume();
        Ok(Self {
            grid,
            mask,
            fluid_per_row,
            fluid_area,
        })
    }
}
