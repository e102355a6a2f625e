//! Stochastic heat equation on `[0, 1]` with Neumann boundary: kernel bounds,
//! explicit Walsh simulation, the freezing decomposition `u = u_eps + I_eps + J_eps`
//! and the regularity verdict for point evaluations `(u(T, x_1), ..., u(T, x_d))`.
//!
//! Discretization: cell centres `x_c = (c + 1/2) dx`, reflected ghost cells,
//! explicit Euler in time with cell noise `N(0, dt/dx)`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::balance::{curve_report, dk_distance, BalanceParams, BalanceReport, CurvePoint, ParticleMeasure, TestDictionary};
use crate::gridfn::{composite_gauss, fit_rate, mean_se, rng_stream, slope, RateFit};
use crate::sde_lab::{clog_profile, lacunary_fast, lacunary_weights, mixture_grid, CoefficientClass, Domain, ModulusCheck, SdeModel};
use crate::young_orlicz::weighted_sobolev_orlicz_norm;
use crate::{Error, Result};

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// `du = d_xx u dt + sigma(u) W(dt, dx) + b(u) dt` with Neumann boundary and `u(0) = u0`.
#[derive(Clone)]
pub struct HeatModel {
    sigma: ScalarFn,
    drift: ScalarFn,
    u0: ScalarFn,
    floor: f64,
    sigma_bound: f64,
    drift_bound: f64,
    h: Option<f64>,
    log_offset: f64,
    label: String,
}

impl std::fmt::Debug for HeatModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HeatModel")
            .field("label", &self.label)
            .field("floor", &self.floor)
            .field("sigma_bound", &self.sigma_bound)
            .field("h", &self.h)
            .finish()
    }
}

const PROBE: f64 = 10.0;

impl HeatModel {
    /// Checks boundedness of `sigma`, `b` and records the floor `c_sigma = min sigma` on `[-10, 10]`.
    pub fn new(sigma: ScalarFn, drift: ScalarFn, u0: ScalarFn, h: Option<f64>, log_offset: f64, label: &str) -> Result<Self> {
        let probes: Vec<f64> = (0..=4000).map(|i| -PROBE + 2.0 * PROBE * i as f64 / 4000.0).collect();
        let s: Vec<f64> = probes.iter().map(|&u| sigma(u)).collect();
        let b: Vec<f64> = probes.iter().map(|&u| drift(u)).collect();
        if s.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("coefficients must be finite".into()));
        }
        if (0..=100).any(|i| !u0(i as f64 / 100.0).is_finite()) {
            return Err(Error::InvalidArgument("initial condition must be finite".into()));
        }
        let floor = s.iter().copied().fold(f64::INFINITY, f64::min);
        let sigma_bound = s.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let drift_bound = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
        Ok(HeatModel { sigma, drift, u0, floor, sigma_bound, drift_bound, h, log_offset, label: label.into() })
    }

    /// `sigma = s`, drift `b`, `u0 = 0`.
    pub fn additive(s: f64, drift: ScalarFn) -> Result<Self> {
        HeatModel::new(Arc::new(move |_| s), drift, Arc::new(|_| 0.0), None, 0.0, "additive")
    }

    /// `sigma = 0`, `b = 0`: the deterministic heat flow of `u0`.
    pub fn deterministic(u0: ScalarFn) -> Result<Self> {
        HeatModel::new(Arc::new(|_| 0.0), zero(), u0, None, 0.0, "deterministic")
    }

    /// `sigma(u) = c0 + c1 g(|u - u*|)` with the capped log profile `g`.
    pub fn clog_profile(c0: f64, c1: f64, h: f64, center: f64, drift: ScalarFn) -> Result<Self> {
        if !(h > 0.0) {
            return Err(Error::InvalidArgument("need h > 0".into()));
        }
        HeatModel::new(Arc::new(move |u| c0 + c1 * clog_profile((u - center).abs(), h)), drift, default_u0(), Some(h), 0.0, "clog_profile")
    }

    /// `sigma(u) = c0 + c1 L(u)` with the lacunary modulation of offset `c`.
    pub fn lacunary(c0: f64, c1: f64, h: f64, offset: f64, drift: ScalarFn) -> Result<Self> {
        if !(h > 0.0) || !(offset >= 0.0) {
            return Err(Error::InvalidArgument("need h > 0 and offset >= 0".into()));
        }
        let w = lacunary_weights(h, offset);
        let (sp, cp) = 0.11f64.sin_cos();
        HeatModel::new(
            Arc::new(move |u| c0 + c1 * lacunary_fast(u, &w, sp, cp)),
            drift,
            default_u0(),
            Some(h),
            offset * std::f64::consts::LN_2,
            "lacunary",
        )
    }

    pub fn with_initial(mut self, u0: ScalarFn) -> Self {
        self.u0 = u0;
        self
    }

    pub fn with_drift(self, drift: ScalarFn) -> Result<Self> {
        HeatModel::new(self.sigma, drift, self.u0, self.h, self.log_offset, &self.label)
    }

    pub fn sigma(&self, u: f64) -> f64 {
        (self.sigma)(u)
    }

    pub fn drift(&self, u: f64) -> f64 {
        (self.drift)(u)
    }

    pub fn initial(&self, x: f64) -> f64 {
        (self.u0)(x)
    }

    /// `c_sigma` on the probe grid.
    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn sigma_bound(&self) -> f64 {
        self.sigma_bound
    }

    pub fn drift_bound(&self) -> f64 {
        self.drift_bound
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Log-modulus probe of `sigma` (the same check as for diffusion coefficients).
    pub fn modulus_check(&self, n_pairs: usize, seed: u64) -> Option<ModulusCheck> {
        let h = self.h?;
        let s = self.sigma.clone();
        let m = SdeModel::new(
            1,
            1,
            Arc::new(move |_, x: &[f64], o: &mut [f64]| o[0] = s(x[0])),
            Arc::new(|_, _, o: &mut [f64]| o[0] = 0.0),
            CoefficientClass::CLog { h, log_offset: self.log_offset },
            Domain::Whole,
            &self.label,
        )
        .ok()?;
        Some(m.modulus_check(h, n_pairs, seed))
    }
}

fn zero() -> ScalarFn {
    Arc::new(|_| 0.0)
}

/// `u0(x) = cos(pi x) / 2`.
pub fn default_u0() -> ScalarFn {
    Arc::new(|x| 0.5 * (PI * x).cos())
}

/// Neumann heat kernel for `d_t = d_xx` on `[0, 1]`.
///
/// Cosine series truncated when the next factor `exp(-n^2 pi^2 t)` drops below `1e-14`
/// (at most `max_terms`); for `t < 1e-4` the image sum.
pub fn neumann_kernel(t: f64, x: f64, y: f64, max_terms: usize) -> f64 {
    if !(t > 0.0) {
        return f64::NAN;
    }
    if t < 1e-4 {
        let g = |z: f64| (-z * z / (4.0 * t)).exp() / (4.0 * PI * t).sqrt();
        let mut acc = 0.0;
        for k in -3i32..=3 {
            let s = 2.0 * k as f64;
            acc += g(x - y + s) + g(x + y + s);
        }
        return acc;
    }
    let mut acc = 1.0;
    for n in 1..=max_terms.max(1) {
        let nf = n as f64;
        let e = (-nf * nf * PI * PI * t).exp();
        if e < 1e-14 {
            break;
        }
        acc += 2.0 * e * (nf * PI * x).cos() * (nf * PI * y).cos();
    }
    acc
}

const KERNEL_TERMS: usize = 4000;

/// `int_0^eps int_0^1 G_s(x, z) G_s(y, z) dz ds = int_0^eps G_{2s}(x, y) ds`, by `s = v^2`.
pub fn kernel_energy(eps: f64, x: f64, y: f64) -> f64 {
    let (v, w) = composite_gauss(0.0, eps.sqrt(), 64, 8);
    v.iter().zip(&w).map(|(&v, &w)| w * 2.0 * v * neumann_kernel(2.0 * v * v, x, y, KERNEL_TERMS)).sum()
}

/// (INEG1) ratio `int_{t-eps}^t int G^2 / sqrt(eps)`.
pub fn ineg1_ratio(eps: f64, x: f64) -> f64 {
    kernel_energy(eps, x, x) / eps.sqrt()
}

/// Two-sided (INEG2) table: extreme eigenvalues of the kernel Gram matrix over `sqrt(eps)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovarianceTable {
    pub points: Vec<f64>,
    /// `(eps, min eigenvalue / sqrt(eps), max eigenvalue / sqrt(eps))`.
    pub rows: Vec<(f64, f64, f64)>,
}

impl CovarianceTable {
    pub fn lower(&self) -> f64 {
        self.rows.iter().map(|r| r.1).fold(f64::INFINITY, f64::min)
    }

    pub fn upper(&self) -> f64 {
        self.rows.iter().map(|r| r.2).fold(0.0, f64::max)
    }
}

/// Minimum spacing of evaluation points (including the walls).
pub const MIN_SPACING: f64 = 1e-3;

fn check_points(points: &[f64]) -> Result<()> {
    if points.is_empty() || points.len() > 3 {
        return Err(Error::InvalidArgument("need 1 to 3 points".into()));
    }
    if points.iter().any(|&x| !(x > 0.0 && x < 1.0)) {
        return Err(Error::InvalidArgument("points must lie in (0, 1)".into()));
    }
    if points.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("points must be strictly increasing".into()));
    }
    let gap = points.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    if gap < MIN_SPACING {
        return Err(Error::PointsTooClose(gap));
    }
    Ok(())
}

pub fn covariance_bounds(points: &[f64], eps_grid: &[f64]) -> Result<CovarianceTable> {
    check_points(points)?;
    let d = points.len();
    let rows = eps_grid
        .iter()
        .map(|&eps| {
            let g = DMatrix::from_fn(d, d, |i, j| kernel_energy(eps, points[i], points[j]));
            let ev = g.symmetric_eigen().eigenvalues;
            (eps, ev.min() / eps.sqrt(), ev.max() / eps.sqrt())
        })
        .collect();
    Ok(CovarianceTable { points: points.to_vec(), rows })
}

/// Explicit-scheme grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HeatGrid {
    pub nx: usize,
    pub nt: usize,
    pub t: f64,
    pub dx: f64,
    pub dt: f64,
}

impl HeatGrid {
    /// Requires `nt >= 4 nx^2 T`.
    pub fn new(t: f64, nx: usize, nt: usize) -> Result<Self> {
        if !(t > 0.0) || nx < 4 {
            return Err(Error::InvalidArgument("need T > 0 and nx >= 4".into()));
        }
        let need = (4.0 * (nx * nx) as f64 * t).ceil() as usize;
        if nt < need {
            return Err(Error::UnstableGrid(need));
        }
        Ok(HeatGrid { nx, nt, t, dx: 1.0 / nx as f64, dt: t / nt as f64 })
    }

    /// The smallest stable `nt`.
    pub fn stable(t: f64, nx: usize) -> Result<Self> {
        HeatGrid::new(t, nx, (4.0 * (nx * nx) as f64 * t).ceil() as usize)
    }

    pub fn centre(&self, c: usize) -> f64 {
        (c as f64 + 0.5) * self.dx
    }

    /// Cell containing `x`.
    pub fn cell(&self, x: f64) -> usize {
        ((x * self.nx as f64).floor() as usize).min(self.nx - 1)
    }

    fn window_steps(&self, eps: &[f64]) -> Result<Vec<usize>> {
        eps.iter()
            .map(|&e| {
                let k = (e / self.dt).round() as usize;
                if !(e > 0.0) || k == 0 || k >= self.nt || ((k as f64) * self.dt - e).abs() > 1e-9 * e {
                    return Err(Error::InvalidArgument(format!("eps = {e} must be a positive multiple of dt below T")));
                }
                Ok(k)
            })
            .collect()
    }
}

fn laplacian(u: &[f64], out: &mut [f64], inv_dx2: f64) {
    let n = u.len();
    for c in 0..n {
        let l = if c == 0 { u[0] } else { u[c - 1] };
        let r = if c + 1 == n { u[n - 1] } else { u[c + 1] };
        out[c] = (l - 2.0 * u[c] + r) * inv_dx2;
    }
}

/// Endpoint profiles `u(T, x_c)`, row-major by realization.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatField {
    pub grid: HeatGrid,
    pub n_real: usize,
    pub profiles: Vec<f64>,
}

impl HeatField {
    pub fn profile(&self, r: usize) -> &[f64] {
        &self.profiles[r * self.grid.nx..(r + 1) * self.grid.nx]
    }

    /// Values at the cell containing `x`.
    pub fn at(&self, x: f64) -> Vec<f64> {
        let c = self.grid.cell(x);
        (0..self.n_real).map(|r| self.profile(r)[c]).collect()
    }
}

pub fn walsh_simulate(model: &HeatModel, t: f64, nx: usize, nt: usize, n_real: usize, seed: u64) -> Result<HeatField> {
    let grid = HeatGrid::new(t, nx, nt)?;
    let recs: Vec<Vec<f64>> = (0..n_real as u64).into_par_iter().map(|r| run(model, grid, &[], &[], seed, r).profile).collect();
    Ok(HeatField { grid, n_real, profiles: recs.concat() })
}

#[derive(Debug, Clone)]
struct Run {
    profile: Vec<f64>,
    /// `u(T)` at the point cells.
    u: Vec<f64>,
    /// Per window, at the point cells: `u_eps`, `I_eps`, `J_eps`, conditional mean, `u(T - eps)`.
    v: Vec<Vec<f64>>,
    i: Vec<Vec<f64>>,
    j: Vec<Vec<f64>>,
    mean: Vec<Vec<f64>>,
    snap: Vec<Vec<f64>>,
    /// Per window: `sigma^2(u(T - eps))` on all cells.
    frozen: Vec<Vec<f64>>,
    residual: f64,
}

fn run(model: &HeatModel, grid: HeatGrid, windows: &[usize], cells: &[usize], seed: u64, real: u64) -> Run {
    let nx = grid.nx;
    let nw = windows.len();
    let inv_dx2 = 1.0 / (grid.dx * grid.dx);
    let noise_sd = (grid.dt / grid.dx).sqrt();
    let mut rng = rng_stream(seed, real);
    let mut u: Vec<f64> = (0..nx).map(|c| model.initial(grid.centre(c))).collect();
    let starts: Vec<usize> = windows.iter().map(|k| grid.nt - k).collect();
    let mut fields: Vec<[Vec<f64>; 4]> = vec![[vec![0.0; nx], vec![0.0; nx], vec![0.0; nx], vec![0.0; nx]]; nw];
    let mut frozen: Vec<Vec<f64>> = vec![vec![0.0; nx]; nw];
    let mut snap: Vec<Vec<f64>> = vec![Vec::new(); nw];
    let mut lap = vec![0.0; nx];
    let mut s = vec![0.0; nx];
    let mut b = vec![0.0; nx];
    let mut xi = vec![0.0; nx];
    for k in 0..grid.nt {
        for w in 0..nw {
            if starts[w] == k {
                fields[w][0].copy_from_slice(&u);
                fields[w][1].iter_mut().for_each(|v| *v = 0.0);
                fields[w][2].iter_mut().for_each(|v| *v = 0.0);
                fields[w][3].copy_from_slice(&u);
                for c in 0..nx {
                    frozen[w][c] = model.sigma(u[c]);
                }
                snap[w] = cells.iter().map(|&c| u[c]).collect();
            }
        }
        for v in xi.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = z * noise_sd;
        }
        for c in 0..nx {
            s[c] = model.sigma(u[c]);
            b[c] = model.drift(u[c]);
        }
        for w in 0..nw {
            if starts[w] > k {
                continue;
            }
            let [fv, fi, fj, fm] = &mut fields[w];
            laplacian(fv, &mut lap, inv_dx2);
            for c in 0..nx {
                fv[c] += grid.dt * lap[c] + frozen[w][c] * xi[c];
            }
            laplacian(fi, &mut lap, inv_dx2);
            for c in 0..nx {
                fi[c] += grid.dt * lap[c] + (s[c] - frozen[w][c]) * xi[c];
            }
            laplacian(fj, &mut lap, inv_dx2);
            for c in 0..nx {
                fj[c] += grid.dt * (lap[c] + b[c]);
            }
            laplacian(fm, &mut lap, inv_dx2);
            for c in 0..nx {
                fm[c] += grid.dt * lap[c];
            }
        }
        laplacian(&u, &mut lap, inv_dx2);
        for c in 0..nx {
            u[c] += grid.dt * (lap[c] + b[c]) + s[c] * xi[c];
        }
    }
    let mut residual = 0.0f64;
    for f in &fields {
        for c in 0..nx {
            residual = residual.max((u[c] - f[0][c] - f[1][c] - f[2][c]).abs());
        }
    }
    for f in frozen.iter_mut() {
        f.iter_mut().for_each(|v| *v *= *v);
    }
    let pick = |v: &Vec<f64>| cells.iter().map(|&c| v[c]).collect::<Vec<f64>>();
    Run {
        u: pick(&u),
        v: fields.iter().map(|f| pick(&f[0])).collect(),
        i: fields.iter().map(|f| pick(&f[1])).collect(),
        j: fields.iter().map(|f| pick(&f[2])).collect(),
        mean: fields.iter().map(|f| pick(&f[3])).collect(),
        snap,
        frozen,
        residual,
        profile: u,
    }
}

/// `M_c^{ij} = sum_{l < K} (P^l e_i)_c (P^l e_j)_c dt/dx` for each window length `K`:
/// the conditional covariance of `u_eps` at the point cells is `sum_c M_c sigma^2(u_c(T - eps))`.
fn adjoint_weights(grid: HeatGrid, windows: &[usize], cells: &[usize]) -> Vec<Vec<f64>> {
    let nx = grid.nx;
    let d = cells.len();
    let inv_dx2 = 1.0 / (grid.dx * grid.dx);
    let kmax = windows.iter().copied().max().unwrap_or(0);
    let mut r: Vec<Vec<f64>> = cells
        .iter()
        .map(|&c| {
            let mut e = vec![0.0; nx];
            e[c] = 1.0;
            e
        })
        .collect();
    let mut acc = vec![0.0; nx * d * d];
    let mut out = vec![Vec::new(); windows.len()];
    let mut lap = vec![0.0; nx];
    let scale = grid.dt / grid.dx;
    for l in 0..kmax {
        for c in 0..nx {
            for a in 0..d {
                for bb in 0..d {
                    acc[(c * d + a) * d + bb] += r[a][c] * r[bb][c] * scale;
                }
            }
        }
        for (w, &k) in windows.iter().enumerate() {
            if k == l + 1 {
                out[w] = acc.clone();
            }
        }
        for ra in r.iter_mut() {
            laplacian(ra, &mut lap, inv_dx2);
            for c in 0..nx {
                ra[c] += grid.dt * lap[c];
            }
        }
    }
    out
}

fn conditional_cov(m: &[f64], frozen: &[f64], d: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(d, d);
    for (c, s2) in frozen.iter().enumerate() {
        for a in 0..d {
            for b in 0..d {
                out[(a, b)] += m[(c * d + a) * d + b] * s2;
            }
        }
    }
    out
}

/// Simulation controls for the heat experiments.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatOptions {
    pub nx: usize,
    /// Time steps; defaults to the smallest stable value.
    pub nt: Option<usize>,
    pub n_real: usize,
    pub seed: u64,
    /// Lattice node budget for mixture-density norms.
    pub max_nodes: usize,
    /// At most this many `eps` get a measured norm.
    pub max_measured: usize,
}

impl Default for HeatOptions {
    fn default() -> Self {
        HeatOptions { nx: 64, nt: None, n_real: 2000, seed: 1, max_nodes: 40_000, max_measured: 3 }
    }
}

impl HeatOptions {
    fn grid(&self, t: f64) -> Result<HeatGrid> {
        match self.nt {
            Some(nt) => HeatGrid::new(t, self.nx, nt),
            None => HeatGrid::stable(t, self.nx),
        }
    }
}

/// `eps = eps_max 2^{-j}`, `j < count`.
pub fn dyadic_eps(eps_max: f64, count: usize) -> Vec<f64> {
    crate::gridfn::geometric(eps_max, 0.5, count)
}

/// Moments of the decomposition at one `eps`, at the first point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct S4Row {
    pub eps: f64,
    pub e_i2: f64,
    pub e_i2_se: f64,
    pub e_j2: f64,
    pub e_j2_se: f64,
    /// `E|u(T) - u(T - eps)|^2`.
    pub increment_m2: f64,
    /// `eta = eps^{1/16}` and `P(|u(T) - u(T - eps)| > eta)`.
    pub eta: f64,
    pub tail: f64,
    pub tail_se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct S4Report {
    pub points: Vec<f64>,
    pub rows: Vec<S4Row>,
    /// Max over realizations, windows and cells of `|u - u_eps - I_eps - J_eps|`.
    pub recombination_residual: f64,
    /// Power fit of `E|I_eps|^2` on `eps` (absent when `I = 0`).
    pub fit_i2: Option<RateFit>,
    /// Slope of `ln(E|I|^2 / eps^{1/2})` on `ln|ln eps|`.
    pub log_slope_naive: f64,
    /// Slope of `ln(E|I|^2 / eps^{1/2})` on `ln(l0 + |ln eps| / 4)`, `l0` the model's log offset.
    pub log_slope_offset: f64,
    /// `max_eps E|u(T) - u(T - eps)|^2 / eps^{1/2}`.
    pub chebyshev_constant: f64,
    /// `max_eps tail / (C eps^{1/2} / eta^2)`.
    pub chebyshev_ratio: f64,
}

/// The freezing decomposition on shared noise with its moment report (first point).
pub fn s4_decomposition(model: &HeatModel, t: f64, eps_grid: &[f64], points: &[f64], opts: &HeatOptions) -> Result<S4Report> {
    check_points(points)?;
    let grid = opts.grid(t)?;
    let windows = grid.window_steps(eps_grid)?;
    let cells: Vec<usize> = points.iter().map(|&x| grid.cell(x)).collect();
    let runs: Vec<Run> =
        (0..opts.n_real as u64).into_par_iter().map(|r| run(model, grid, &windows, &cells, opts.seed, r)).collect();
    let residual = runs.iter().map(|r| r.residual).fold(0.0, f64::max);
    let mut rows = Vec::new();
    for (w, &eps) in eps_grid.iter().enumerate() {
        let i2: Vec<f64> = runs.iter().map(|r| r.i[w][0].powi(2)).collect();
        let j2: Vec<f64> = runs.iter().map(|r| r.j[w][0].powi(2)).collect();
        let inc: Vec<f64> = runs.iter().map(|r| r.u[0] - r.snap[w][0]).collect();
        let eta = eps.powf(1.0 / 16.0);
        let hits: Vec<f64> = inc.iter().map(|v| if v.abs() > eta { 1.0 } else { 0.0 }).collect();
        let ((ei, sei), (ej, sej)) = (mean_se(&i2), mean_se(&j2));
        let (tail, tail_se) = mean_se(&hits);
        rows.push(S4Row {
            eps,
            e_i2: ei,
            e_i2_se: sei,
            e_j2: ej,
            e_j2_se: sej,
            increment_m2: inc.iter().map(|v| v * v).sum::<f64>() / inc.len() as f64,
            eta,
            tail,
            tail_se,
        });
    }
    let e: Vec<f64> = rows.iter().map(|r| r.eps).collect();
    let i2: Vec<f64> = rows.iter().map(|r| r.e_i2).collect();
    let fit_i2 = if i2.iter().all(|v| *v > 0.0) && e.len() >= 4 { fit_rate(&e, &i2).ok() } else { None };
    let y: Vec<f64> = rows.iter().map(|r| (r.e_i2 / r.eps.sqrt()).ln()).collect();
    let (log_slope_naive, log_slope_offset) = if fit_i2.is_some() {
        let xn: Vec<f64> = e.iter().map(|v| v.ln().abs().ln()).collect();
        let xo: Vec<f64> = e.iter().map(|v| (model.log_offset + 0.25 * v.ln().abs()).ln()).collect();
        (slope(&xn, &y), slope(&xo, &y))
    } else {
        (f64::NAN, f64::NAN)
    };
    let cheb = rows.iter().map(|r| r.increment_m2 / r.eps.sqrt()).fold(0.0, f64::max);
    let ratio = rows.iter().map(|r| r.tail / (cheb * r.eps.sqrt() / (r.eta * r.eta))).fold(0.0, f64::max);
    Ok(S4Report {
        points: points.to_vec(),
        rows,
        recombination_residual: residual,
        fit_i2,
        log_slope_naive,
        log_slope_offset,
        chebyshev_constant: cheb,
        chebyshev_ratio: ratio,
    })
}

/// Variance of `u(T, x_c)` for the additive scheme with `sigma = 1` (exact for the discretization).
pub fn scheme_variance(grid: HeatGrid, x: f64) -> f64 {
    let w = adjoint_weights(grid, &[grid.nt], &[grid.cell(x)]);
    w[0].iter().sum()
}

#[derive(Debug, Clone)]
pub struct SpdeOutput {
    pub report: BalanceReport,
    pub eps: Vec<f64>,
    pub d1_upper: Vec<f64>,
    pub d1_lower: Vec<f64>,
    /// `(eps, measured ||p_{U_eps}||_{2m,2m,e})`.
    pub norms: Vec<(f64, f64)>,
    pub calibration: f64,
    /// Per `eps`: extreme eigenvalues of `Sigma(U_eps) / sqrt(eps)` over realizations.
    pub covariance_ratios: Vec<(f64, f64, f64)>,
    pub recombination_residual: f64,
}

/// Balance check for `U = (u(T, x_1), .., u(T, x_d))`.
///
/// `U_eps` is conditionally Gaussian given the field at `T - eps`, with covariance
/// `sum_c M_c sigma^2(u_c(T - eps))`; the mixture density's `||.||_{2m,2m,e}` is measured
/// where the lattice fits the node budget and `R_eps = C eps^{-m/2}` is calibrated from it.
/// `d_1(U, U_eps)` is bounded by the coupling `E min(2, |I_eps + J_eps|_1)`.
pub fn spde_verdict(
    model: &HeatModel,
    points: &[f64],
    t: f64,
    params: &BalanceParams,
    eps_grid: &[f64],
    opts: &HeatOptions,
) -> Result<SpdeOutput> {
    check_points(points)?;
    if !(model.floor() > 0.0) {
        return Err(Error::InvalidArgument("ellipticity floor c_sigma must be positive".into()));
    }
    let grid = opts.grid(t)?;
    let windows = grid.window_steps(eps_grid)?;
    let cells: Vec<usize> = points.iter().map(|&x| grid.cell(x)).collect();
    if cells.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::PointsTooClose(grid.dx));
    }
    let d = points.len();
    let runs: Vec<Run> =
        (0..opts.n_real as u64).into_par_iter().map(|r| run(model, grid, &windows, &cells, opts.seed, r)).collect();
    let adj = adjoint_weights(grid, &windows, &cells);
    let residual = runs.iter().map(|r| r.residual).fold(0.0, f64::max);
    let u_pos: Vec<f64> = runs.iter().flat_map(|r| r.u.iter().copied()).collect();
    let mu = ParticleMeasure::empirical(d, u_pos.clone())?;
    let center: Vec<f64> = (0..d).map(|a| runs.iter().map(|r| r.u[a]).sum::<f64>() / runs.len() as f64).collect();
    let spread = (0..d)
        .map(|a| {
            let v: Vec<f64> = runs.iter().map(|r| r.u[a]).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
        })
        .fold(0.0, f64::max)
        .max(1e-3);
    let dict = TestDictionary::standard(d, &center, spread, 1)?;
    let order = 2 * params.m;
    let mut d1_upper = Vec::new();
    let mut d1_lower = Vec::new();
    let mut norms = Vec::new();
    let mut cov_ratios = Vec::new();
    for (w, &eps) in eps_grid.iter().enumerate() {
        let terms: Vec<f64> =
            runs.iter().map(|r| (0..d).map(|a| (r.i[w][a] + r.j[w][a]).abs()).sum::<f64>().min(2.0)).collect();
        d1_upper.push(terms.iter().sum::<f64>() / terms.len() as f64);
        let nu = ParticleMeasure::empirical(d, runs.iter().flat_map(|r| r.v[w].iter().copied()).collect())?;
        d1_lower.push(dk_distance(&mu, &nu, 1, &dict)?.lower);
        let comps: Vec<(Vec<f64>, DMatrix<f64>)> =
            runs.iter().map(|r| (r.mean[w].clone(), conditional_cov(&adj[w], &r.frozen[w], d))).collect();
        let mut lo_ev = f64::INFINITY;
        let mut hi_ev = 0.0f64;
        for c in &comps {
            let ev = c.1.clone().symmetric_eigen().eigenvalues;
            lo_ev = lo_ev.min(ev.min());
            hi_ev = hi_ev.max(ev.max());
        }
        cov_ratios.push((eps, lo_ev / eps.sqrt(), hi_ev / eps.sqrt()));
        if norms.len() >= opts.max_measured || lo_ev <= 0.0 {
            continue;
        }
        let sd_min = lo_ev.sqrt();
        let pad: Vec<f64> = (0..d).map(|a| 6.0 * comps.iter().map(|c| c.1[(a, a)]).fold(0.0, f64::max).sqrt()).collect();
        let lo: Vec<f64> =
            (0..d).map(|a| comps.iter().map(|c| c.0[a]).fold(f64::INFINITY, f64::min) - pad[a]).collect();
        let hi: Vec<f64> =
            (0..d).map(|a| comps.iter().map(|c| c.0[a]).fold(f64::NEG_INFINITY, f64::max) + pad[a]).collect();
        let width = (0..d).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        let per_sd = if d == 1 { 5.0 } else { 3.0 };
        let nodes = (width * per_sd / sd_min).ceil() as usize + 1;
        if (nodes as f64).powi(d as i32) > opts.max_nodes as f64 {
            continue;
        }
        let g = mixture_grid(&comps, comps.len(), &lo, &hi, nodes, &|_| 1.0)?;
        norms.push((eps, weighted_sobolev_orlicz_norm(&g, order, order, &params.e)?));
    }
    if norms.is_empty() {
        return Err(Error::GridTooCoarse("no eps admits a density lattice under the node budget".into()));
    }
    let expo = params.m as f64 / 2.0;
    let calibration = norms.iter().map(|(e, n)| n * e.powf(expo)).fold(0.0, f64::max);
    let pts: Vec<CurvePoint> = eps_grid
        .iter()
        .enumerate()
        .map(|(w, &e)| CurvePoint {
            r: calibration * e.powf(-expo),
            dk: d1_upper[w],
            dk_lower: Some(d1_lower[w]),
            norm: norms.iter().find(|n| n.0 == e).map(|n| n.1),
        })
        .collect();
    let mut prov = BTreeMap::new();
    prov.insert("pipeline".into(), serde_json::json!("spde"));
    prov.insert("model".into(), serde_json::json!(model.label));
    prov.insert("points".into(), serde_json::json!(points));
    prov.insert("cell_centres".into(), serde_json::json!(cells.iter().map(|&c| grid.centre(c)).collect::<Vec<_>>()));
    prov.insert("grid".into(), serde_json::to_value(grid).unwrap_or_default());
    prov.insert("n_real".into(), serde_json::json!(opts.n_real));
    prov.insert("seed".into(), serde_json::json!(opts.seed));
    prov.insert("eps".into(), serde_json::json!(eps_grid));
    prov.insert("measured_norms".into(), serde_json::json!(norms));
    prov.insert("norm_calibration".into(), serde_json::json!(calibration));
    prov.insert("covariance_ratios".into(), serde_json::json!(cov_ratios));
    prov.insert("recombination_residual".into(), serde_json::json!(residual));
    prov.insert("c_sigma".into(), serde_json::json!(model.floor()));
    let report = curve_report(&pts, params, d, dict.defect(), "upper (coupling)", prov)?;
    Ok(SpdeOutput {
        report,
        eps: eps_grid.to_vec(),
        d1_upper,
        d1_lower,
        norms,
        calibration,
        covariance_ratios: cov_ratios,
        recombination_residual: residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `int_0^eps int_0^1 G_s(x, y)^2 dy ds` by direct quadrature in `y` and `s = v^2`.
    fn energy_direct(eps: f64, x: f64) -> f64 {
        let (v, wv) = composite_gauss(0.0, eps.sqrt(), 48, 8);
        v.iter()
            .zip(&wv)
            .map(|(&v, &w)| {
                let s = v * v;
                let l = 12.0 * s.sqrt();
                let (y, wy) = composite_gauss((x - l).max(0.0), (x + l).min(1.0), 40, 8);
                let inner: f64 = y.iter().zip(&wy).map(|(&y, &u)| u * neumann_kernel(s, x, y, KERNEL_TERMS).powi(2)).sum();
                w * 2.0 * v * inner
            })
            .sum()
    }

    #[test]
    fn kernel_mass_and_symmetry() {
        let (y, wy) = composite_gauss(0.0, 1.0, 400, 8);
        for &t in &[5e-5, 2e-4, 0.01, 0.3] {
            for &x in &[0.0, 0.13, 0.5, 0.97] {
                let mass: f64 = y.iter().zip(&wy).map(|(&y, &w)| w * neumann_kernel(t, x, y, KERNEL_TERMS)).sum();
                assert!((mass - 1.0).abs() < 1e-12, "t = {t}, x = {x}: {mass}");
                let (a, b) = (neumann_kernel(t, x, 0.41, KERNEL_TERMS), neumann_kernel(t, 0.41, x, KERNEL_TERMS));
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
        // both forms agree where they meet
        for &(x, y) in &[(0.3, 0.31), (0.01, 0.0), (0.5, 0.5)] {
            let t = 1e-4;
            let series = neumann_kernel(t * (1.0 + 1e-12), x, y, KERNEL_TERMS);
            let image = neumann_kernel(t * (1.0 - 1e-12), x, y, KERNEL_TERMS);
            assert!((series - image).abs() < 1e-8 * series.max(1.0), "{series} {image}");
        }
    }

    #[test]
    fn ineg1_two_sided() {
        let mut ratios = Vec::new();
        for k in 0..=6 {
            let eps = 1e-5 * 10f64.powf(k as f64 / 2.0);
            let r = ineg1_ratio(eps, 0.3);
            let direct = energy_direct(eps, 0.3) / eps.sqrt();
            assert!((r - direct).abs() < 1e-6 * r, "{eps}: {r} vs {direct}");
            ratios.push(r);
        }
        // interior point: (2 pi)^{-1/2} for small eps
        assert!((ratios[0] - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-6);
        let (lo, hi) = ratios.iter().fold((f64::INFINITY, 0.0f64), |a, &r| (a.0.min(r), a.1.max(r)));
        assert!(lo > 0.35 && hi < 0.45, "{ratios:?}");
    }

    #[test]
    fn ineg2_depends_on_spacing() {
        let eps: Vec<f64> = (0..=6).map(|k| 1e-5 * 10f64.powf(k as f64 / 2.0)).collect();
        let wide = covariance_bounds(&[0.3, 0.7], &eps).unwrap();
        assert!(wide.lower() > 0.2 && wide.upper() < 1.0, "{wide:?}");
        let one = covariance_bounds(&[0.3], &eps).unwrap();
        for (r, e) in one.rows.iter().zip(&eps) {
            assert!((r.1 - ineg1_ratio(*e, 0.3)).abs() < 1e-12 && r.1 == r.2);
        }
        let mut prev = f64::INFINITY;
        for gap in [0.4, 0.1, 0.02, 0.005] {
            let t = covariance_bounds(&[0.5 - gap / 2.0, 0.5 + gap / 2.0], &eps).unwrap();
            assert!(t.lower() < prev, "gap {gap}");
            prev = t.lower();
        }
        assert!(matches!(covariance_bounds(&[0.5, 0.5005], &eps), Err(Error::PointsTooClose(_))));
    }

    #[test]
    fn unstable_grid_is_rejected() {
        let m = HeatModel::additive(1.0, zero()).unwrap();
        assert_eq!(walsh_simulate(&m, 0.05, 32, 100, 1, 1).unwrap_err(), Error::UnstableGrid(205));
    }

    #[test]
    fn deterministic_flow_matches_kernel() {
        let m = HeatModel::deterministic(Arc::new(|x| (PI * x).cos() + 0.3 * (3.0 * PI * x).cos())).unwrap();
        let t = 0.05;
        let f = walsh_simulate(&m, t, 128, 3277, 1, 1).unwrap();
        let (y, wy) = composite_gauss(0.0, 1.0, 200, 8);
        for c in (0..128).step_by(9) {
            let x = f.grid.centre(c);
            let exact: f64 =
                y.iter().zip(&wy).map(|(&y, &w)| w * neumann_kernel(t, x, y, KERNEL_TERMS) * m.initial(y)).sum();
            assert!((f.profile(0)[c] - exact).abs() < 1e-4, "{x}: {} {exact}", f.profile(0)[c]);
        }
    }

    #[test]
    fn additive_variance_matches_quadrature() {
        let m = HeatModel::additive(1.0, zero()).unwrap();
        let t = 0.05;
        let f = walsh_simulate(&m, t, 64, 820, 4000, 2).unwrap();
        let v = f.at(0.3);
        let (mu, _) = mean_se(&v);
        let sq: Vec<f64> = v.iter().map(|x| (x - mu).powi(2)).collect();
        let (var, se) = mean_se(&sq);
        let scheme = scheme_variance(f.grid, 0.3);
        assert!((var - scheme).abs() < 3.0 * se, "{var} {scheme} {se}");
        // the continuum value differs from the scheme by O(dx)
        let cont = kernel_energy(t, f.grid.centre(f.grid.cell(0.3)), f.grid.centre(f.grid.cell(0.3)));
        assert!((scheme - cont).abs() < 0.5 * f.grid.dx, "{scheme} {cont}");
    }

    #[test]
    fn refinement_changes_little() {
        let m = HeatModel::clog_profile(1.0, 0.5, 1.0, 0.2, Arc::new(|u: f64| 0.5 * u.cos())).unwrap();
        let t = 0.02;
        let stat = |nx: usize| {
            let g = HeatGrid::stable(t, nx).unwrap();
            let f = walsh_simulate(&m, t, nx, g.nt, 1500, 3).unwrap();
            let c: Vec<f64> = f.at(0.5).iter().map(|u| u.cos()).collect();
            mean_se(&c)
        };
        let ((a, sa), (b, sb)) = (stat(64), stat(128));
        assert!((a - b).abs() < 2.0 * 2.0 * (sa * sa + sb * sb).sqrt(), "{a} {b} {sa} {sb}");
    }

    #[test]
    fn decomposition_recombines() {
        let m = HeatModel::lacunary(1.0, 0.2, 1.0, 4.0, Arc::new(|u: f64| 0.5 * u.cos())).unwrap();
        let opts = HeatOptions { nx: 32, n_real: 100, ..HeatOptions::default() };
        let rep = s4_decomposition(&m, 0.5, &dyadic_eps(0.25, 5), &[0.3, 0.7], &opts).unwrap();
        assert!(rep.recombination_residual < 1e-10, "{}", rep.recombination_residual);
        assert!(rep.rows.iter().all(|r| r.e_i2 > 0.0 && r.e_j2 > 0.0));
        // |J| <= ||b|| eps
        assert!(rep.rows.iter().all(|r| r.e_j2.sqrt() <= 0.5 * r.eps * (1.0 + 1e-9)));
        assert!(rep.chebyshev_ratio <= 1.0 + 1e-12);
        // constant sigma: I = 0; b = 0: J = 0
        let c = HeatModel::additive(0.7, zero()).unwrap();
        let rc = s4_decomposition(&c, 0.5, &dyadic_eps(0.25, 5), &[0.5], &opts).unwrap();
        assert!(rc.rows.iter().all(|r| r.e_i2 == 0.0 && r.e_j2 == 0.0));
        assert!(rc.fit_i2.is_none());
    }

    #[test]
    fn conditional_covariance_is_exact() {
        // additive model: U_eps - mean is exactly Gaussian with the adjoint covariance
        let m = HeatModel::additive(1.3, zero()).unwrap();
        let grid = HeatGrid::stable(0.1, 32).unwrap();
        let windows = grid.window_steps(&[0.05]).unwrap();
        let cells = vec![grid.cell(0.3), grid.cell(0.7)];
        let adj = adjoint_weights(grid, &windows, &cells);
        let runs: Vec<Run> = (0..20_000u64).map(|r| run(&m, grid, &windows, &cells, 4, r)).collect();
        let cov = conditional_cov(&adj[0], &runs[0].frozen[0], 2);
        for (a, b) in [(0, 0), (0, 1), (1, 1)] {
            let p: Vec<f64> = runs.iter().map(|r| (r.v[0][a] - r.mean[0][a]) * (r.v[0][b] - r.mean[0][b])).collect();
            let (v, se) = mean_se(&p);
            assert!((v - cov[(a, b)]).abs() < 3.0 * se, "{a}{b}: {v} {} {se}", cov[(a, b)]);
        }
        let full = adjoint_weights(grid, &[grid.nt], &cells[..1]);
        assert!((full[0].iter().sum::<f64>() * 1.69 - conditional_cov(&adjoint_weights(grid, &[grid.nt], &cells[..1])[0], &vec![1.69; 32], 1)[(0, 0)]).abs() < 1e-12);
    }

    #[test]
    fn model_checks() {
        let m = HeatModel::clog_profile(1.0, 0.5, 1.0, 0.0, zero()).unwrap();
        assert!((m.floor() - 1.0).abs() < 1e-12 && m.sigma_bound() <= 1.5);
        assert!(m.modulus_check(2000, 1).unwrap().certified);
        assert!(HeatModel::additive(1.0, zero()).unwrap().modulus_check(10, 1).is_none());
        let bad = HeatModel::new(Arc::new(|u: f64| 1.0 / u), zero(), default_u0(), None, 0.0, "bad");
        assert!(bad.is_err());
        let p = BalanceParams::new(0, 1, 3, crate::young_orlicz::YoungFunction::log_entropy());
        let det = HeatModel::deterministic(default_u0()).unwrap();
        assert!(spde_verdict(&det, &[0.5], 0.5, &p, &dyadic_eps(0.25, 6), &HeatOptions::default()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn kernel_is_positive_and_symmetric(t in 1e-5f64..1.0, x in 0.0f64..1.0, y in 0.0f64..1.0) {
                let a = neumann_kernel(t, x, y, KERNEL_TERMS);
                let b = neumann_kernel(t, y, x, KERNEL_TERMS);
                prop_assert!(a > -1e-12);
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }

            #[test]
            fn gram_is_psd(x in 0.05f64..0.45, gap in 0.01f64..0.5, eps in 1e-5f64..1e-2) {
                let t = covariance_bounds(&[x, x + gap], &[eps]).unwrap();
                prop_assert!(t.rows[0].1 > 0.0 && t.rows[0].1 <= t.rows[0].2);
            }
        }
    }
}
