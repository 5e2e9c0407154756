//! Balanced initial conditions: per-sample biogeochemical equilibria under a prescribed
//! total-biomass profile, compressed into a reduced-order state by a weighted SVD.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::bgc::{self, BioParams, ModelId};
use crate::do_engine::{inner_weights, reorthonormalize, DOState};
use crate::error::{Error, Result};
use crate::geometry::Domain;
use crate::model_space::PiecewiseBasis;

/// Total nitrogen against height above the bottom, linear between the two ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiomassProfile {
    pub surface: f64,
    pub bottom: f64,
    pub depth: f64,
}

impl Default for BiomassProfile {
    fn default() -> Self {
        Self {
            surface: 1.0 / 3.0,
            bottom: 1.0,
            depth: 2.0,
        }
    }
}

impl BiomassProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.surface > 0.0 && self.bottom > 0.0 && self.depth > 0.0) {
            return Err(Error::Config("total biomass must be positive".into()));
        }
        Ok(())
    }

    /// Total biomass at height `z` above the bottom.
    pub fn at(&self, z: f64) -> f64 {
        let t = (z / self.depth).clamp(0.0, 1.0);
        self.bottom + (self.surface - self.bottom) * t
    }
}

/// One joint draw of everything the reaction terms depend on.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSample {
    pub params: BioParams,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Root {
    pub x: Vec<f64>,
    /// Largest absolute reaction rate at `x`.
    pub residual: f64,
    pub iterations: usize,
}

/// Residual vector with the first rate replaced by the biomass constraint, and its Jacobian.
fn system(
    model: ModelId,
    s: &JointSample,
    basis: Option<&PiecewiseBasis>,
    g: f64,
    total: f64,
    x: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let unknown = match (basis, &s.gamma) {
        (Some(b), Some(gm)) => Some((b, gm.as_slice())),
        _ => None,
    };
    let ev = bgc::source(model, x, g, &s.params, &s.alpha, &s.beta, unknown, &[])?;
    let mut f = DVector::from_vec(ev.rates);
    let mut j = ev.jac_state;
    f[0] = x.iter().sum::<f64>() - total;
    j.row_mut(0).fill(1.0);
    Ok((f, j))
}

fn max_rate(model: ModelId, s: &JointSample, basis: Option<&PiecewiseBasis>, g: f64, x: &[f64]) -> f64 {
    let unknown = match (basis, &s.gamma) {
        (Some(b), Some(gm)) => Some((b, gm.as_slice())),
        _ => None,
    };
    let mut out = vec![0.0; x.len()];
    bgc::rates_into(model, x, g, &s.params, &s.alpha, &s.beta, unknown, &mut out);
    out.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Moves the rounding gap into one entry so the left-to-right sum equals `total` exactly.
///
/// The largest entry absorbs the gap first. If rounding of the partial sums defeats that, the
/// last entry is solved for, and as a final resort each entry is walked one ulp at a time.
fn enforce_total(x: &mut [f64], total: f64) {
    let gap = |x: &[f64]| total - x.iter().sum::<f64>();
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|a, b| x[*b].total_cmp(&x[*a]));
    let Some(&imax) = order.first() else {
        return;
    };
    for _ in 0..4 {
        let g = gap(x);
        if g == 0.0 {
            return;
        }
        x[imax] += g;
    }
    // The summed total is one rounding of `prefix + last`, so the last entry can be solved
    // for directly and nudged by a few ulps.
    let last = x.len() - 1;
    let prefix: f64 = x[..last].iter().sum();
    let keep = x[last];
    let mut y = total - prefix;
    for _ in 0..8 {
        if y < 0.0 {
            break;
        }
        x[last] = y;
        let g = gap(x);
        if g == 0.0 {
            return;
        }
        y = if g > 0.0 { y.next_up() } else { y.next_down() };
    }
    x[last] = keep;
    for &i in &order {
        let keep = x[i];
        for _ in 0..16 {
            let g = gap(x);
            if g == 0.0 {
                return;
            }
            let next = if g > 0.0 { x[i].next_up() } else { x[i].next_down() };
            if next < 0.0 {
                break;
            }
            x[i] = next;
        }
        x[i] = keep;
    }
}

/// Damped Newton on the non-negative orthant, falling back to Levenberg-Marquardt steps
/// when no Newton step reduces the residual.
pub fn solve_equilibrium(
    model: ModelId,
    s: &JointSample,
    basis: Option<&PiecewiseBasis>,
    g: f64,
    total: f64,
    start: &[f64],
) -> Result<Option<Root>> {
    const TOL: f64 = 1e-13;
    let n = model.n_tracers();
    if start.len() != n {
        return Err(Error::Dimension {
            context: "equilibrium start",
            expected: n,
            got: start.len(),
        });
    }
    let mut x: Vec<f64> = start.iter().map(|v| v.max(0.0)).collect();
    let mut mu = 1e-3;
    for it in 0..200 {
        let (f, j) = system(model, s, basis, g, total, &x)?;
        let fnorm = f.norm();
        if f.amax() <= TOL {
            enforce_total(&mut x, total);
            return Ok(Some(Root {
                residual: max_rate(model, s, basis, g, &x),
                x,
                iterations: it,
            }));
        }
        let trial = |d: &DVector<f64>, lam: f64| -> Result<(Vec<f64>, f64)> {
            let xt: Vec<f64> = x.iter().zip(d.iter()).map(|(a, b)| (a - lam * b).max(0.0)).collect();
            let (ft, _) = system(model, s, basis, g, total, &xt)?;
            Ok((xt, ft.norm()))
        };
        let mut accepted = None;
        if let Some(d) = j.clone().lu().solve(&f) {
            let mut lam = 1.0;
            for _ in 0..30 {
                let (xt, nt) = trial(&d, lam)?;
                if nt < fnorm * (1.0 - 1e-4 * lam) {
                    accepted = Some(xt);
                    break;
                }
                lam *= 0.5;
            }
        }
        if accepted.is_none() {
            let jtj = j.tr_mul(&j);
            let jtf = j.tr_mul(&f);
            while mu < 1e12 {
                let mut a = jtj.clone();
                for k in 0..n {
                    a[(k, k)] += mu * (1.0 + jtj[(k, k)]);
                }
                if let Some(d) = a.lu().solve(&jtf) {
                    let (xt, nt) = trial(&d, 1.0)?;
                    if nt < fnorm {
                        accepted = Some(xt);
                        mu = (mu * 0.1).max(1e-12);
                        break;
                    }
                }
                mu *= 10.0;
            }
        }
        match accepted {
            Some(xt) => x = xt,
            None => break,
        }
    }
    let (f, _) = system(model, s, basis, g, total, &x)?;
    if f.amax() <= 1e-11 {
        enforce_total(&mut x, total);
        return Ok(Some(Root {
            residual: max_rate(model, s, basis, g, &x),
            x,
            iterations: 200,
        }));
    }
    Ok(None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumProfile {
    /// `values[j][k]`: tracer `k` at grid row `j` (bottom row first).
    pub values: Vec<Vec<f64>>,
    /// Rows where no coexistence root was found and a boundary root was accepted.
    pub boundary_rows: usize,
    pub max_residual: f64,
}

/// Uniform point on the scaled simplex `{x >= 0, sum x = total}`.
fn simplex_point<R: Rng + ?Sized>(n: usize, total: f64, rng: &mut R) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| total * v / s).collect()
}

/// Equilibrium at every grid row, solved bottom-up with warm starts plus random restarts.
///
/// Among converged non-negative roots, those with every tracer at least `1e-6` are preferred;
/// within the preferred set the root with the largest zooplankton wins.
pub fn equilibrium_profile<R: Rng + ?Sized>(
    model: ModelId,
    sample: &JointSample,
    basis: Option<&PiecewiseBasis>,
    total: &BiomassProfile,
    heights: &[f64],
    lz: f64,
    rng: &mut R,
) -> Result<EquilibriumProfile> {
    total.validate()?;
    sample.params.validate()?;
    let n = model.n_tracers();
    let zi = model.zooplankton();
    let mut values = Vec::with_capacity(heights.len());
    let mut boundary_rows = 0;
    let mut max_residual = 0.0f64;
    let mut warm: Option<Vec<f64>> = None;
    for &z in heights {
        let t = total.at(z);
        let g = bgc::light_g(z - lz, &sample.params);
        let mut starts = Vec::with_capacity(6);
        if let Some(w) = &warm {
            let sw: f64 = w.iter().sum();
            starts.push(w.iter().map(|v| v * t / sw).collect::<Vec<_>>());
        }
        for _ in 0..5 {
            starts.push(simplex_point(n, t, rng));
        }
        let mut best: Option<(bool, Root)> = None;
        for st in &starts {
            let Some(root) = solve_equilibrium(model, sample, basis, g, t, st)? else {
                continue;
            };
            if root.x.iter().any(|v| *v < 0.0) {
                continue;
            }
            let interior = root.x.iter().all(|v| *v >= 1e-6);
            let better = match &best {
                None => true,
                Some((bi, br)) => (interior && !bi) || (interior == *bi && root.x[zi] > br.x[zi]),
            };
            if better {
                best = Some((interior, root));
            }
        }
        let Some((interior, root)) = best else {
            return Err(Error::Infeasible(format!("no non-negative equilibrium at height {z}")));
        };
        if !interior {
            boundary_rows += 1;
        }
        max_residual = max_residual.max(root.residual);
        warm = Some(root.x.clone());
        values.push(root.x);
    }
    Ok(EquilibriumProfile {
        values,
        boundary_rows,
        max_residual,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalancedEnsemble {
    pub samples: Vec<JointSample>,
    pub profiles: Vec<EquilibriumProfile>,
    pub rejected: usize,
    pub attempted: usize,
}

/// Draws joint samples until `n` have admissible equilibria on every row.
///
/// Fails once rejections exceed half of the attempts (checked after at least `n` attempts).
pub fn draw_balanced<R, F>(
    model: ModelId,
    n: usize,
    basis: Option<&PiecewiseBasis>,
    total: &BiomassProfile,
    heights: &[f64],
    lz: f64,
    rng: &mut R,
    mut draw: F,
) -> Result<BalancedEnsemble>
where
    R: Rng + ?Sized,
    F: FnMut(&mut R) -> JointSample,
{
    let mut out = BalancedEnsemble {
        samples: Vec::with_capacity(n),
        profiles: Vec::with_capacity(n),
        rejected: 0,
        attempted: 0,
    };
    while out.samples.len() < n {
        out.attempted += 1;
        let s = draw(rng);
        match equilibrium_profile(model, &s, basis, total, heights, lz, rng) {
            Ok(p) if p.max_residual <= 1e-8 => {
                out.samples.push(s);
                out.profiles.push(p);
            }
            Ok(_) | Err(Error::Infeasible(_)) => out.rejected += 1,
            Err(e) => return Err(e),
        }
        if out.attempted >= n && 2 * out.rejected > out.attempted {
            return Err(Error::TooManyRejections {
                rejected: out.rejected,
                attempted: out.attempted,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitReport {
    pub requested_modes: usize,
    /// Modes carrying ensemble variance.
    pub rank_modes: usize,
    /// Zero-coefficient modes added to reach the requested count.
    pub padded_modes: usize,
    /// Fraction of total weighted variance captured by the retained modes.
    pub retained_variance: f64,
    pub singular_values: Vec<f64>,
}

fn build_state(
    domain: &Domain,
    mean: DVector<f64>,
    basis_cols: DMatrix<f64>,
    coeffs: DMatrix<f64>,
    sigma_nd: Vec<f64>,
    requested: usize,
    pad: bool,
    sv: Vec<f64>,
    retained: f64,
) -> Result<(DOState, InitReport)> {
    let rank = basis_cols.ncols();
    let s = if pad { requested } else { rank };
    let n = mean.len();
    let r = coeffs.nrows();
    let mut modes = DMatrix::zeros(n, s);
    let mut y = DMatrix::zeros(r, s);
    modes.columns_mut(0, rank).copy_from(&basis_cols);
    y.columns_mut(0, rank).copy_from(&coeffs);
    if s > rank {
        let w = inner_weights(domain, &sigma_nd)?;
        reorthonormalize(&mut modes, &mut y, &w);
    }
    Ok((
        DOState {
            mean,
            modes,
            coeffs: y,
            sigma_nd,
            time: 0.0,
        },
        InitReport {
            requested_modes: requested,
            rank_modes: rank,
            padded_modes: s - rank,
            retained_variance: retained,
            singular_values: sv,
        },
    ))
}

/// Truncated weighted SVD of `B` (rows are samples); returns `(U S, V, singular values, retained)`
/// keeping at most `n_s` directions above the numerical rank threshold.
fn truncated_svd(b: DMatrix<f64>, n_s: usize) -> (DMatrix<f64>, DMatrix<f64>, Vec<f64>, f64) {
    let svd = b.svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &c| svd.singular_values[c].total_cmp(&svd.singular_values[a]));
    let sv: Vec<f64> = order.iter().map(|&k| svd.singular_values[k]).collect();
    let smax = sv.first().copied().unwrap_or(0.0);
    let rank = sv.iter().filter(|v| **v > 1e-12 * smax && **v > 0.0).count();
    let keep = n_s.min(rank);
    let total: f64 = sv.iter().map(|v| v * v).sum();
    let kept: f64 = sv[..keep].iter().map(|v| v * v).sum();
    let mut us = DMatrix::zeros(u.nrows(), keep);
    let mut v = DMatrix::zeros(vt.ncols(), keep);
    for (slot, &k) in order[..keep].iter().enumerate() {
        us.set_column(slot, &(u.column(k) * svd.singular_values[k]));
        v.set_column(slot, &vt.row(k).transpose());
    }
    let retained = if total > 0.0 { kept / total } else { 1.0 };
    (us, v, sv, retained)
}

/// Reduced-order state from realized fields (`n_state x n_r`, one realization per column).
///
/// Modes are the leading left singular vectors of the normalized, mean-removed ensemble. When
/// the ensemble rank is below `n_s` the mode count is reduced, unless `pad` asks for
/// zero-coefficient orthonormal modes to fill the remainder.
pub fn init_do_from_ensemble(
    domain: &Domain,
    fields: &DMatrix<f64>,
    n_s: usize,
    sigma_nd: &[f64],
    pad: bool,
) -> Result<(DOState, InitReport)> {
    let (n, r) = (fields.nrows(), fields.ncols());
    if n != sigma_nd.len() * domain.grid.n_cells() {
        return Err(Error::Dimension {
            context: "ensemble state length",
            expected: sigma_nd.len() * domain.grid.n_cells(),
            got: n,
        });
    }
    if r <= n_s {
        return Err(Error::Config(format!("need more realizations ({r}) than modes ({n_s})")));
    }
    let w = inner_weights(domain, sigma_nd)?;
    let mean = fields.column_sum() / r as f64;
    let mut b = fields.transpose();
    for mut row in b.row_iter_mut() {
        row -= mean.transpose();
    }
    let sq = w.map(f64::sqrt);
    for (j, mut col) in b.column_iter_mut().enumerate() {
        col *= sq[j];
    }
    let (coeffs, v, sv, retained) = truncated_svd(b, n_s);
    let mut modes = v;
    for (i, mut row) in modes.row_iter_mut().enumerate() {
        if sq[i] > 0.0 {
            row /= sq[i];
        } else {
            row.fill(0.0);
        }
    }
    build_state(domain, mean, modes, coeffs, sigma_nd.to_vec(), n_s, pad, sv, retained)
}

/// Domain-averaged ensemble standard deviation per tracer of horizontally uniform profiles.
///
/// Tracers without spread take the largest spread of the others, or one if none has any.
pub fn profile_sigma(domain: &Domain, profiles: &[EquilibriumProfile], n_tracers: usize) -> Vec<f64> {
    let nz = domain.grid.nz;
    let r = profiles.len().max(1) as f64;
    let cell_area = domain.grid.cell_volume();
    let mut sig = vec![0.0; n_tracers];
    for (k, s) in sig.iter_mut().enumerate() {
        let mut acc = 0.0;
        for j in 0..nz {
            let m: f64 = profiles.iter().map(|p| p.values[j][k]).sum::<f64>() / r;
            let var: f64 = profiles.iter().map(|p| (p.values[j][k] - m).powi(2)).sum::<f64>() / r;
            acc += var * domain.fluid_per_row[j] as f64 * cell_area;
        }
        *s = (acc / domain.fluid_area).sqrt();
    }
    let top = sig.iter().cloned().fold(0.0, f64::max);
    let fill = if top > 0.0 { top } else { 1.0 };
    for s in &mut sig {
        if *s <= 1e-12 * fill {
            *s = fill;
        }
    }
    sig
}

/// Same decomposition as [`init_do_from_ensemble`] for horizontally uniform profiles,
/// computed on one weighted column per row instead of every cell.
pub fn init_do_from_profiles(
    domain: &Domain,
    profiles: &[EquilibriumProfile],
    n_tracers: usize,
    n_s: usize,
    sigma_nd: &[f64],
    pad: bool,
) -> Result<(DOState, InitReport)> {
    let g = domain.grid;
    let (nz, nc) = (g.nz, g.n_cells());
    let r = profiles.len();
    if r <= n_s {
        return Err(Error::Config(format!("need more realizations ({r}) than modes ({n_s})")));
    }
    if sigma_nd.len() != n_tracers || profiles.iter().any(|p| p.values.len() != nz) {
        return Err(Error::Dimension {
            context: "profile ensemble",
            expected: nz,
            got: profiles.first().map_or(0, |p| p.values.len()),
        });
    }
    let m = n_tracers * nz;
    let mut mean_col = vec![0.0; m];
    for p in profiles {
        for j in 0..nz {
            for k in 0..n_tracers {
                mean_col[k * nz + j] += p.values[j][k] / r as f64;
            }
        }
    }
    let weight = |k: usize, j: usize| {
        domain.fluid_per_row[j] as f64 * g.cell_volume() / (domain.fluid_area * sigma_nd[k] * sigma_nd[k])
    };
    let mut b = DMatrix::zeros(r, m);
    for (o, p) in profiles.iter().enumerate() {
        for j in 0..nz {
            for k in 0..n_tracers {
                b[(o, k * nz + j)] = (p.values[j][k] - mean_col[k * nz + j]) * weight(k, j).sqrt();
            }
        }
    }
    let (coeffs, v, sv, retained) = truncated_svd(b, n_s);
    let rank = v.ncols();
    let mut mean = DVector::zeros(n_tracers * nc);
    let mut modes = DMatrix::zeros(n_tracers * nc, rank);
    for c in 0..nc {
        if !domain.fluid(c) {
            continue;
        }
        let j = c / g.nx;
        for k in 0..n_tracers {
            mean[k * nc + c] = mean_col[k * nz + j];
            let sw = weight(k, j).sqrt();
            for i in 0..rank {
                modes[(k * nc + c, i)] = v[(k * nz + j, i)] / sw;
            }
        }
    }
    build_state(domain, mean, modes, coeffs, sigma_nd.to_vec(), n_s, pad, sv, retained)
}

/// Seeded generator used for per-experiment initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
