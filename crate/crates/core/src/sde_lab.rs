//! Diffusions with log-modulus coefficients, stopped Euler paths, the
//! frozen-Gaussian approximation and the elliptic and kinetic pipelines.
//!
//! One Euler simulation per path serves every `delta`: the path records
//! `X_{T-delta}`, `X_{(T-delta) ^ tau}` and the Brownian increment over
//! `[T - delta, T]` for each window, so all approximants share the noise.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::balance::{curve_report, BalanceParams, BalanceReport, CurvePoint, ParticleMeasure};
use crate::gridfn::{fit_rate, mean_se, plateau, plateau_deriv, rng_stream, slope, GridFunction, Lattice, RateFit};
use crate::ibp::{gaussian_ibp_weights, measure_sobolev_norm, mt_density, weight_radius, Estimate, GaussianWeights, IbpSample, PsiRadius};
use crate::young_orlicz::{weighted_sobolev_orlicz_norm, YoungFunction};
use crate::{Error, Result};

/// `f(t, x, out)`; `out` is `d x N` row-major for diffusion coefficients and `d` for drifts.
pub type CoefFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// A time-independent vector field on `R^d`.
pub type VectorField = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoefficientClass {
    Lipschitz,
    /// Modulus `|sigma(x) - sigma(y)| <~ (log_offset + |ln|x - y||)^{-(2+h)}`.
    CLog { h: f64, log_offset: f64 },
    HormanderKinetic,
}

/// State space with exit-time stopping.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Domain {
    Whole,
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
}

impl Domain {
    /// Open-set membership.
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Domain::Whole => true,
            Domain::Box { lo, hi } => x.iter().zip(lo.iter().zip(hi)).all(|(v, (a, b))| *v > *a && *v < *b),
            Domain::Ball { center, radius } => dist2(x, center) < radius * radius,
        }
    }

    /// Euclidean distance from `y` to the complement.
    pub fn distance_to_complement(&self, y: &[f64]) -> f64 {
        match self {
            Domain::Whole => f64::INFINITY,
            Domain::Box { lo, hi } => {
                y.iter().zip(lo.iter().zip(hi)).map(|(v, (a, b))| (v - a).min(b - v)).fold(f64::INFINITY, f64::min).max(0.0)
            }
            Domain::Ball { center, radius } => (radius - dist2(y, center).sqrt()).max(0.0),
        }
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// `dX = sum_j sigma_j(t, X) dW^j + b(t, X) dt`, stopped on leaving the domain.
#[derive(Clone)]
pub struct SdeModel {
    dim: usize,
    noise_dim: usize,
    sigma: CoefFn,
    drift: CoefFn,
    class: CoefficientClass,
    domain: Domain,
    growth: f64,
    label: String,
}

impl std::fmt::Debug for SdeModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SdeModel")
            .field("label", &self.label)
            .field("dim", &self.dim)
            .field("noise_dim", &self.noise_dim)
            .field("class", &self.class)
            .field("domain", &self.domain)
            .field("growth", &self.growth)
            .finish()
    }
}

const GROWTH_PROBE_RADIUS: f64 = 10.0;

impl SdeModel {
    /// Validates the linear-growth bound on a probe grid and stores its constant.
    pub fn new(
        dim: usize,
        noise_dim: usize,
        sigma: CoefFn,
        drift: CoefFn,
        class: CoefficientClass,
        domain: Domain,
        label: &str,
    ) -> Result<Self> {
        if dim == 0 || noise_dim == 0 {
            return Err(Error::InvalidArgument("dimensions must be positive".into()));
        }
        match &domain {
            Domain::Box { lo, hi } if lo.len() != dim || hi.len() != dim => {
                return Err(Error::DimensionMismatch(lo.len(), dim))
            }
            Domain::Ball { center, .. } if center.len() != dim => return Err(Error::DimensionMismatch(center.len(), dim)),
            _ => {}
        }
        let mut m = SdeModel { dim, noise_dim, sigma, drift, class, domain, growth: 0.0, label: label.to_string() };
        let growth = m.probe_growth();
        if !growth.is_finite() {
            return Err(Error::InvalidArgument("coefficients are not finite on the probe grid".into()));
        }
        m.growth = growth;
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn class(&self) -> &CoefficientClass {
        &self.class
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// `C_T` with `|b| + sum_j |sigma_j| <= C_T (1 + |x|)` on the probe grid.
    pub fn growth_constant(&self) -> f64 {
        self.growth
    }

    pub fn with_domain(mut self, domain: Domain) -> Result<Self> {
        if let Domain::Ball { center, .. } = &domain {
            if center.len() != self.dim {
                return Err(Error::DimensionMismatch(center.len(), self.dim));
            }
        }
        self.domain = domain;
        Ok(self)
    }

    pub fn sigma_at(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim * self.noise_dim];
        (self.sigma)(t, x, &mut out);
        out
    }

    pub fn drift_at(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        (self.drift)(t, x, &mut out);
        out
    }

    /// `sigma sigma^*(t, x)`.
    pub fn diffusion_matrix(&self, t: f64, x: &[f64]) -> DMatrix<f64> {
        let s = DMatrix::from_row_slice(self.dim, self.noise_dim, &self.sigma_at(t, x));
        &s * s.transpose()
    }

    fn probe_points(&self) -> Vec<Vec<f64>> {
        let per: usize = if self.dim <= 2 { 9 } else { 3 };
        let mut pts = Vec::new();
        let total = per.pow(self.dim as u32);
        for flat in 0..total {
            let mut rem = flat;
            let mut p = vec![0.0; self.dim];
            for c in p.iter_mut() {
                let i = rem % per;
                rem /= per;
                *c = -GROWTH_PROBE_RADIUS + 2.0 * GROWTH_PROBE_RADIUS * i as f64 / (per - 1) as f64;
            }
            pts.push(p);
        }
        pts
    }

    fn probe_growth(&self) -> f64 {
        let mut c = 0.0f64;
        for x in self.probe_points() {
            for t in [0.0, 1.0] {
                let b = self.drift_at(t, &x);
                let s = self.sigma_at(t, &x);
                let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                let ns: f64 = (0..self.noise_dim)
                    .map(|j| (0..self.dim).map(|i| s[i * self.noise_dim + j].powi(2)).sum::<f64>().sqrt())
                    .sum();
                let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                c = c.max((nb + ns) / (1.0 + nx));
            }
        }
        c
    }

    /// Whether `|b| + sum_j |sigma_j| <= c (1 + |x|)` on the probe grid.
    pub fn check_linear_growth(&self, c: f64) -> bool {
        self.probe_growth() <= c * (1.0 + 1e-12)
    }

    /// Largest ratio `|sigma(t,x) - sigma(s,y)| / (|ln|x-y||^{-(2+h)} + |ln|t-s||^{-(2+h)})`
    /// over random probe pairs with separations in `[1e-8, 0.3]`.
    pub fn modulus_check(&self, h: f64, n_pairs: usize, seed: u64) -> ModulusCheck {
        use rand::Rng;
        let mut rng = rng_stream(seed, 0x6d6f64);
        let mut worst = 0.0f64;
        let mut worst_sep = f64::NAN;
        let space_ratio = |x: &[f64], y: &[f64]| {
            let a = self.sigma_at(0.0, x);
            let b = self.sigma_at(0.0, y);
            let diff = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            diff / dist2(x, y).sqrt().ln().abs().powf(-(2.0 + h))
        };
        let mut top: Vec<(f64, Vec<f64>, Vec<f64>)> = Vec::new();
        for _ in 0..n_pairs {
            let x: Vec<f64> = (0..self.dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let u = 10f64.powf(rng.gen_range(-8.0..(0.3f64).log10()));
            let dir: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let nd = dir.iter().map(|v: &f64| v * v).sum::<f64>().sqrt().max(1e-300);
            let y: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + u * b / nd).collect();
            let t = rng.gen_range(0.0..1.0);
            let s = t + 10f64.powf(rng.gen_range(-8.0..-1.0));
            let a = self.sigma_at(t, &x);
            let b = self.sigma_at(s, &y);
            let diff = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            let bound = u.ln().abs().powf(-(2.0 + h)) + (s - t).ln().abs().powf(-(2.0 + h));
            let ratio = diff / bound;
            if ratio > worst {
                worst = ratio;
                worst_sep = u;
            }
            top.push((space_ratio(&x, &y), x, y));
            if top.len() > 64 {
                top.sort_by(|a, b| b.0.total_cmp(&a.0));
                top.truncate(8);
            }
        }
        top.sort_by(|a, b| b.0.total_cmp(&a.0));
        top.truncate(8);
        // zoom: halve the pair towards the half with the larger increment
        for (_, mut x, mut y) in top {
            for _ in 0..40 {
                let mid: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 0.5 * (a + b)).collect();
                let dl = dist2(&self.sigma_at(0.0, &x), &self.sigma_at(0.0, &mid));
                let dr = dist2(&self.sigma_at(0.0, &mid), &self.sigma_at(0.0, &y));
                if dl >= dr {
                    y = mid;
                } else {
                    x = mid;
                }
                let u = dist2(&x, &y).sqrt();
                if u < 1e-12 {
                    break;
                }
                let ratio = space_ratio(&x, &y);
                if ratio > worst {
                    worst = ratio;
                    worst_sep = u;
                }
            }
        }
        ModulusCheck { h, pairs: n_pairs, constant: worst, worst_separation: worst_sep, certified: worst < MODULUS_CAP }
    }
}

/// Ratio cap below which the log-modulus bound is taken as certified.
pub const MODULUS_CAP: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModulusCheck {
    pub h: f64,
    pub pairs: usize,
    /// Empirical constant `C`.
    pub constant: f64,
    pub worst_separation: f64,
    pub certified: bool,
}

fn zero_drift() -> CoefFn {
    Arc::new(|_, _, out: &mut [f64]| out.iter_mut().for_each(|v| *v = 0.0))
}

/// Constant `sigma` (row-major `d x N`), zero drift.
pub fn constant_model(dim: usize, noise_dim: usize, sigma: Vec<f64>, domain: Domain) -> Result<SdeModel> {
    if sigma.len() != dim * noise_dim {
        return Err(Error::DimensionMismatch(sigma.len(), dim * noise_dim));
    }
    let s: CoefFn = Arc::new(move |_, _, out: &mut [f64]| out.copy_from_slice(&sigma));
    SdeModel::new(dim, noise_dim, s, zero_drift(), CoefficientClass::Lipschitz, domain, "constant")
}

/// `dX = -theta X dt + s dW` in one dimension.
pub fn ou_model(theta: f64, s: f64) -> Result<SdeModel> {
    let sig: CoefFn = Arc::new(move |_, _, out: &mut [f64]| out[0] = s);
    let drift: CoefFn = Arc::new(move |_, x: &[f64], out: &mut [f64]| out[0] = -theta * x[0]);
    SdeModel::new(1, 1, sig, drift, CoefficientClass::Lipschitz, Domain::Whole, "ou")
}

/// Terms of the lacunary sum.
pub const LACUNARY_TERMS: usize = 40;

/// `L(x) = sum_{j=1}^{J} ((1 + c) / (j + c))^{3+h} sin(2^j x + phase)`: bounded, with modulus of
/// continuity of order `(c ln 2 + |ln u|)^{-(2+h)}` and no better.
pub fn lacunary(x: f64, h: f64, offset: f64, phase: f64) -> f64 {
    let (sp, cp) = phase.sin_cos();
    lacunary_fast(x, &lacunary_weights(h, offset), sp, cp)
}

pub(crate) fn lacunary_weights(h: f64, offset: f64) -> Vec<f64> {
    (1..=LACUNARY_TERMS).map(|j| ((1.0 + offset) / (j as f64 + offset)).powf(3.0 + h)).collect()
}

pub(crate) fn lacunary_fast(x: f64, w: &[f64], sp: f64, cp: f64) -> f64 {
    let (mut s, mut c) = (2.0 * x).sin_cos();
    let mut acc = 0.0;
    for &wj in w {
        acc += wj * (s * cp + c * sp);
        let s2 = 2.0 * s * c;
        c = c * c - s * s;
        s = s2;
    }
    acc
}

/// Diagonal `sigma_ii(x) = c0 + c1 L(x_i)` with the lacunary modulation `L` of offset `c`,
/// zero drift. Requires `c0 > |c1| sum_j w_j` so that `sigma` stays elliptic.
pub fn lacunary_clog_model(dim: usize, c0: f64, c1: f64, h: f64, offset: f64, domain: Domain) -> Result<SdeModel> {
    if !(offset >= 0.0) {
        return Err(Error::InvalidArgument("offset must be >= 0".into()));
    }
    let w = lacunary_weights(h, offset);
    let amplitude: f64 = w.iter().sum::<f64>() * c1.abs();
    if !(h > 0.0) || !(c0 > amplitude) {
        return Err(Error::InvalidArgument(format!("need h > 0 and c0 > {amplitude:.4}")));
    }
    let phases: Vec<(f64, f64)> = (0..dim).map(|i| (0.37 * i as f64 + 0.11).sin_cos()).collect();
    let s: CoefFn = Arc::new(move |_, x: &[f64], out: &mut [f64]| {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (i, (sp, cp)) in phases.iter().enumerate() {
            out[i * dim + i] = c0 + c1 * lacunary_fast(x[i], &w, *sp, *cp);
        }
    });
    SdeModel::new(dim, dim, s, zero_drift(), CoefficientClass::CLog { h, log_offset: offset * std::f64::consts::LN_2 }, domain, "lacunary_clog")
}

/// `g(u) = (1 + ln^2 u)^{-(2+h)/2}`: equals `|ln u|^{-(2+h)}` to leading order as `u -> 0`,
/// smooth for `u > 0` and capped by 1.
pub fn clog_profile(u: f64, h: f64) -> f64 {
    if u <= 0.0 {
        return 0.0;
    }
    let y = 1.0 + u.ln().powi(2);
    if h == 1.0 {
        return 1.0 / (y * y.sqrt());
    }
    y.powf(-(2.0 + h) / 2.0)
}

/// Diagonal `sigma_ii = c0 + c1 g(|x_i - x*_i|)` with the capped log profile `g`, zero drift.
pub fn clog_bump_model(dim: usize, c0: f64, c1: f64, h: f64, center: Vec<f64>, domain: Domain) -> Result<SdeModel> {
    if center.len() != dim {
        return Err(Error::DimensionMismatch(center.len(), dim));
    }
    if !(h > 0.0) || !(c0 > c1.abs()) {
        return Err(Error::InvalidArgument("need h > 0 and c0 > |c1|".into()));
    }
    let s: CoefFn = Arc::new(move |_, x: &[f64], out: &mut [f64]| {
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..dim {
            out[i * dim + i] = c0 + c1 * clog_profile((x[i] - center[i]).abs(), h);
        }
    });
    SdeModel::new(dim, dim, s, zero_drift(), CoefficientClass::CLog { h, log_offset: 0.0 }, domain, "clog_bump")
}

/// Diagonal `sigma_ii = c0 + c1 sin(x_i)`, zero drift.
pub fn lipschitz_model(dim: usize, c0: f64, c1: f64, domain: Domain) -> Result<SdeModel> {
    if !(c0 > c1.abs()) {
        return Err(Error::InvalidArgument("need c0 > |c1|".into()));
    }
    let s: CoefFn = Arc::new(move |_, x: &[f64], out: &mut [f64]| {
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..dim {
            out[i * dim + i] = c0 + c1 * x[i].sin();
        }
    });
    SdeModel::new(dim, dim, s, zero_drift(), CoefficientClass::Lipschitz, domain, "lipschitz")
}

/// `dX_1 = dW`, `dX_2 = X_1 dt`.
pub fn kinetic_model(domain: Domain) -> Result<SdeModel> {
    let s: CoefFn = Arc::new(|_, _, out: &mut [f64]| {
        out[0] = 1.0;
        out[1] = 0.0;
    });
    let b: CoefFn = Arc::new(|_, x: &[f64], out: &mut [f64]| {
        out[0] = 0.0;
        out[1] = x[0];
    });
    SdeModel::new(2, 1, s, b, CoefficientClass::HormanderKinetic, domain, "kinetic")
}

/// Euler endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct EulerPaths {
    pub dim: usize,
    /// `X_{T ^ tau}`, row-major.
    pub endpoints: Vec<f64>,
    /// `X_T` of the scheme continued past the exit.
    pub unstopped: Vec<f64>,
    pub exited: Vec<bool>,
    /// Grid exit time, `NaN` when the path stays.
    pub exit_time: Vec<f64>,
}

impl EulerPaths {
    pub fn len(&self) -> usize {
        self.exited.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exited.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.endpoints[i * self.dim..(i + 1) * self.dim]
    }

    pub fn exit_fraction(&self) -> f64 {
        self.exited.iter().filter(|&&e| e).count() as f64 / self.len().max(1) as f64
    }
}

#[derive(Debug, Clone)]
struct PathRecord {
    stopped: Vec<f64>,
    unstopped: Vec<f64>,
    exit_step: Option<usize>,
    /// Per window: `X_{T-delta}`.
    start: Vec<f64>,
    /// Per window: `X_{(T-delta) ^ tau}`.
    start_stopped: Vec<f64>,
    /// Per window: `W_T - W_{T-delta}`.
    dw: Vec<f64>,
    /// Per window: `max |X_t - X_{T-delta}|` over grid times in the window.
    sup_dev: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Grid {
    dt: f64,
    steps: usize,
}

fn time_grid(t: f64, dt: f64) -> Result<Grid> {
    if !(t > 0.0) || !(dt > 0.0) || dt > t / 10.0 * (1.0 + 1e-12) {
        return Err(Error::InvalidArgument(format!("need 0 < dt <= T/10 (T = {t}, dt = {dt})")));
    }
    let steps = (t / dt).round() as usize;
    if ((steps as f64) * dt - t).abs() > 1e-9 * t {
        return Err(Error::InvalidArgument("T/dt must be an integer".into()));
    }
    Ok(Grid { dt: t / steps as f64, steps })
}

fn window_steps(grid: Grid, deltas: &[f64]) -> Result<Vec<usize>> {
    deltas
        .iter()
        .map(|&d| {
            let k = (d / grid.dt).round() as usize;
            if !(d > 0.0) || k == 0 || k >= grid.steps || ((k as f64) * grid.dt - d).abs() > 1e-9 * d {
                return Err(Error::InvalidArgument(format!("delta = {d} must be a positive multiple of dt below T")));
            }
            Ok(grid.steps - k)
        })
        .collect()
}

fn simulate_path(model: &SdeModel, x0: &[f64], grid: Grid, starts: &[usize], seed: u64, path: u64) -> PathRecord {
    let (d, nn) = (model.dim, model.noise_dim);
    let nw = starts.len();
    let mut rng = rng_stream(seed, path);
    let mut x = x0.to_vec();
    let mut stopped: Option<Vec<f64>> = if model.domain.contains(x0) { None } else { Some(x0.to_vec()) };
    let mut exit_step = stopped.as_ref().map(|_| 0);
    let mut rec = PathRecord {
        stopped: Vec::new(),
        unstopped: Vec::new(),
        exit_step: None,
        start: vec![0.0; nw * d],
        start_stopped: vec![0.0; nw * d],
        dw: vec![0.0; nw * nn],
        sup_dev: vec![0.0; nw],
    };
    let mut sig = vec![0.0; d * nn];
    let mut b = vec![0.0; d];
    let mut dw = vec![0.0; nn];
    let sq = grid.dt.sqrt();
    for i in 0..grid.steps {
        let t = i as f64 * grid.dt;
        for (w, &s) in starts.iter().enumerate() {
            if s == i {
                rec.start[w * d..(w + 1) * d].copy_from_slice(&x);
                let st = stopped.as_deref().unwrap_or(&x);
                rec.start_stopped[w * d..(w + 1) * d].copy_from_slice(st);
            }
        }
        for v in dw.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = z * sq;
        }
        (model.sigma)(t, &x, &mut sig);
        (model.drift)(t, &x, &mut b);
        for r in 0..d {
            let mut inc = b[r] * grid.dt;
            for j in 0..nn {
                inc += sig[r * nn + j] * dw[j];
            }
            x[r] += inc;
        }
        for (w, &s) in starts.iter().enumerate() {
            if s <= i {
                for j in 0..nn {
                    rec.dw[w * nn + j] += dw[j];
                }
                let dev = dist2(&x, &rec.start[w * d..(w + 1) * d]).sqrt();
                rec.sup_dev[w] = rec.sup_dev[w].max(dev);
            }
        }
        if stopped.is_none() && !model.domain.contains(&x) {
            stopped = Some(x.clone());
            exit_step = Some(i + 1);
        }
    }
    rec.stopped = stopped.unwrap_or_else(|| x.clone());
    rec.unstopped = x;
    rec.exit_step = exit_step;
    rec
}

fn simulate(model: &SdeModel, x0: &[f64], grid: Grid, starts: &[usize], n_paths: usize, seed: u64) -> Result<Vec<PathRecord>> {
    if x0.len() != model.dim {
        return Err(Error::DimensionMismatch(x0.len(), model.dim));
    }
    if n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be positive".into()));
    }
    Ok((0..n_paths as u64).into_par_iter().map(|p| simulate_path(model, x0, grid, starts, seed, p)).collect())
}

/// Euler-Maruyama endpoints `X_{T ^ tau}`, exits detected at grid times (no bridge correction).
pub fn euler_simulate(model: &SdeModel, x0: &[f64], t: f64, dt: f64, n_paths: usize, seed: u64) -> Result<EulerPaths> {
    let grid = time_grid(t, dt)?;
    let recs = simulate(model, x0, grid, &[], n_paths, seed)?;
    Ok(EulerPaths {
        dim: model.dim,
        endpoints: recs.iter().flat_map(|r| r.stopped.iter().copied()).collect(),
        unstopped: recs.iter().flat_map(|r| r.unstopped.iter().copied()).collect(),
        exited: recs.iter().map(|r| r.exit_step.is_some()).collect(),
        exit_time: recs.iter().map(|r| r.exit_step.map_or(f64::NAN, |s| s as f64 * grid.dt)).collect(),
    })
}

/// Frozen-Gaussian endpoints `X^delta_T = X_{(T-delta)^tau} + sigma(T-delta, X_{T-delta})(W_T - W_{T-delta})`.
#[derive(Debug, Clone)]
pub struct FrozenSample {
    pub delta: f64,
    /// Endpoints with their exact conditional IBP weights.
    pub ibp: IbpSample,
    pub measure: ParticleMeasure,
    /// Conditional means `X_{(T-delta)^tau}`, row-major.
    pub means: Vec<f64>,
    /// Conditional covariances `delta sigma sigma^*(X_{T-delta})`.
    pub covariances: Vec<DMatrix<f64>>,
    /// `X_{T^tau}` of the same paths, row-major.
    pub reference: Vec<f64>,
    /// Indices of the kept paths in simulation order.
    pub kept: Vec<usize>,
    pub excluded: usize,
}

impl FrozenSample {
    /// `sum_i w_i gamma_{C_i}(y - m_i)` with equal weights.
    pub fn mixture_density(&self, y: &[f64]) -> f64 {
        let d = self.ibp.dim;
        let n = self.covariances.len() as f64;
        self.covariances
            .iter()
            .enumerate()
            .map(|(i, c)| gaussian_pdf(y, &self.means[i * d..(i + 1) * d], c))
            .sum::<f64>()
            / n
    }
}

fn gaussian_pdf(y: &[f64], m: &[f64], c: &DMatrix<f64>) -> f64 {
    let d = y.len();
    let Some(ch) = c.clone().cholesky() else { return 0.0 };
    let r = nalgebra::DVector::from_iterator(d, y.iter().zip(m).map(|(a, b)| a - b));
    let z = ch.l().solve_lower_triangular(&r).unwrap_or(r);
    let det_sqrt: f64 = ch.l().diagonal().iter().product();
    (-0.5 * z.norm_squared()).exp() / ((2.0 * std::f64::consts::PI).powf(d as f64 / 2.0) * det_sqrt)
}

/// Share of paths allowed to have a degenerate freeze.
pub const DEGENERATE_SHARE: f64 = 1e-3;

/// Frozen-Gaussian approximation at one `delta`. `dt` must divide `delta` and `T`.
#[allow(clippy::too_many_arguments)]
pub fn frozen_gaussian(
    model: &SdeModel,
    x0: &[f64],
    t: f64,
    delta: f64,
    dt: f64,
    n_paths: usize,
    order: usize,
    seed: u64,
) -> Result<FrozenSample> {
    if !(delta > 0.0 && delta < t) {
        return Err(Error::InvalidArgument(format!("need 0 < delta < T (delta = {delta})")));
    }
    let grid = time_grid(t, dt)?;
    let starts = window_steps(grid, &[delta])?;
    let recs = simulate(model, x0, grid, &starts, n_paths, seed)?;
    freeze_window(model, &recs, t, delta, 0, order)
}

fn freeze_window(model: &SdeModel, recs: &[PathRecord], t: f64, delta: f64, w: usize, order: usize) -> Result<FrozenSample> {
    let (d, nn) = (model.dim, model.noise_dim);
    let tf = t - delta;
    type Row = (Vec<f64>, Vec<f64>, DMatrix<f64>, Vec<f64>);
    let rows: Vec<Option<Row>> = recs
        .par_iter()
        .map(|r| {
            let start = &r.start[w * d..(w + 1) * d];
            let mean = r.start_stopped[w * d..(w + 1) * d].to_vec();
            let s = model.sigma_at(tf, start);
            let mut y = mean.clone();
            for (i, yi) in y.iter_mut().enumerate() {
                for j in 0..nn {
                    *yi += s[i * nn + j] * r.dw[w * nn + j];
                }
            }
            let cov = model.diffusion_matrix(tf, start) * delta;
            let gw = GaussianWeights::new(&cov, order).ok()?;
            let h = gw.eval(&y, &mean);
            Some((y, mean, cov, h))
        })
        .collect();
    let excluded = rows.iter().filter(|r| r.is_none()).count();
    if excluded as f64 > DEGENERATE_SHARE * recs.len() as f64 {
        return Err(Error::DegenerateFreeze(excluded));
    }
    let alphas = crate::gridfn::multi_indices(d, order);
    let mut positions = Vec::new();
    let mut means = Vec::new();
    let mut covs = Vec::new();
    let mut hs = Vec::new();
    let mut reference = Vec::new();
    let mut kept = Vec::new();
    for (i, row) in rows.into_iter().enumerate() {
        if let Some((y, m, c, h)) = row {
            positions.extend(y);
            means.extend(m);
            covs.push(c);
            hs.push(h);
            reference.extend_from_slice(&recs[i].stopped);
            kept.push(i);
        }
    }
    let ibp = IbpSample::from_rows(d, positions, &alphas, &hs, order, &format!("frozen-gaussian delta={delta:e}"));
    let measure = ParticleMeasure::empirical(d, ibp.positions.clone())?;
    Ok(FrozenSample { delta, ibp, measure, means, covariances: covs, reference, kept, excluded })
}

/// Plateau localization `psi(y) = plateau(|y - y0|, r/2, r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Localizer {
    pub y0: Vec<f64>,
    pub r: f64,
}

impl Localizer {
    pub fn eval(&self, y: &[f64]) -> f64 {
        plateau(dist2(y, &self.y0).sqrt(), 0.5 * self.r, self.r)
    }

    /// Lipschitz factor of `phi psi` for `||phi||_{1,inf} <= 1`, with respect to `|.|_1`.
    pub fn coupling_lipschitz(&self) -> f64 {
        let max_d = (0..=2000)
            .map(|i| plateau_deriv(self.r * (0.5 + 0.5 * i as f64 / 2000.0), 0.5 * self.r, self.r).abs())
            .fold(0.0, f64::max);
        1.0 + max_d * 1.01
    }
}

/// Per-path term of the localized coupling bound on `d_1(psi mu, psi mu_delta)`.
fn coupling_term(a: &[f64], b: &[f64], psi: &Localizer, lip: f64, indicator: bool) -> f64 {
    let pa = psi.eval(a);
    if !indicator {
        return pa;
    }
    let pb = psi.eval(b);
    let l1: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
    (pa + pb).min(lip * l1)
}

/// Localized coupling distance at every window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceCurve {
    pub deltas: Vec<f64>,
    pub d1: Vec<f64>,
    pub se: Vec<f64>,
}

fn frozen_endpoint(model: &SdeModel, r: &PathRecord, t: f64, delta: f64, w: usize) -> Vec<f64> {
    let (d, nn) = (model.dim, model.noise_dim);
    let s = model.sigma_at(t - delta, &r.start[w * d..(w + 1) * d]);
    let mut y = r.start_stopped[w * d..(w + 1) * d].to_vec();
    for (i, yi) in y.iter_mut().enumerate() {
        for j in 0..nn {
            *yi += s[i * nn + j] * r.dw[w * nn + j];
        }
    }
    y
}

/// `indicator_radius`: keep the frozen endpoint only when `|X_{T-delta} - y0| < indicator_radius`.
fn distance_curve(
    model: &SdeModel,
    recs: &[PathRecord],
    t: f64,
    deltas: &[f64],
    psi: &Localizer,
    indicator_radius: f64,
) -> DistanceCurve {
    let d = model.dim;
    let lip = psi.coupling_lipschitz();
    let mut out = DistanceCurve { deltas: deltas.to_vec(), d1: Vec::new(), se: Vec::new() };
    for (w, &delta) in deltas.iter().enumerate() {
        let terms: Vec<f64> = recs
            .par_iter()
            .map(|r| {
                let keep = dist2(&r.start[w * d..(w + 1) * d], &psi.y0).sqrt() < indicator_radius;
                let y = frozen_endpoint(model, r, t, delta, w);
                coupling_term(&r.stopped, &y, psi, lip, keep)
            })
            .collect();
        let (m, se) = mean_se(&terms);
        out.d1.push(m);
        out.se.push(se);
    }
    out
}

/// Simulation controls shared by the pipelines.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimOptions {
    pub n_paths: usize,
    /// Euler step; defaults to `min(delta) / 4`.
    pub dt: Option<f64>,
    pub seed: u64,
    /// Cap on lattice nodes per axis for density norms.
    pub max_grid: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { n_paths: 20_000, dt: None, seed: 1, max_grid: 1601 }
    }
}

fn pick_dt(deltas: &[f64], opts: &SimOptions, div: f64) -> f64 {
    opts.dt.unwrap_or_else(|| deltas.iter().copied().fold(f64::INFINITY, f64::min) / div)
}

fn check_deltas(deltas: &[f64], t: f64) -> Result<()> {
    if deltas.is_empty() {
        return Err(Error::InvalidArgument("empty delta grid".into()));
    }
    if let Some(d) = deltas.iter().find(|&&d| !(d > 0.0 && d < t)) {
        return Err(Error::InvalidArgument(format!("need 0 < delta < T, got {d}")));
    }
    Ok(())
}

/// `delta = delta_max 2^{-j}`, `j < count`.
pub fn dyadic_deltas(delta_max: f64, count: usize) -> Vec<f64> {
    crate::gridfn::geometric(delta_max, 0.5, count)
}

/// Fit of the localized distance against `delta`.
#[derive(Debug, Clone, Serialize)]
pub struct Lemma10Fit {
    pub curve: DistanceCurve,
    pub fit: RateFit,
    /// Slope of `ln(d_1 / delta^{1/2})` on `ln(l0 + |ln delta| / 2)`, `l0` the model's log offset.
    pub log_power_at_half: f64,
    pub log_offset: f64,
    pub dt: f64,
    pub n_paths: usize,
}

/// `d_1(psi mu, psi mu_delta)` across `delta` with its power and log-power fits.
#[allow(clippy::too_many_arguments)]
pub fn lemma10_rate(
    model: &SdeModel,
    x0: &[f64],
    y0: &[f64],
    r: f64,
    t: f64,
    deltas: &[f64],
    opts: &SimOptions,
) -> Result<Lemma10Fit> {
    check_deltas(deltas, t)?;
    check_localization(model, y0, r)?;
    let dt = pick_dt(deltas, opts, 4.0);
    let grid = time_grid(t, dt)?;
    let starts = window_steps(grid, deltas)?;
    let recs = simulate(model, x0, grid, &starts, opts.n_paths, opts.seed)?;
    let psi = Localizer { y0: y0.to_vec(), r };
    let curve = distance_curve(model, &recs, t, deltas, &psi, f64::INFINITY);
    let fit = fit_rate(&curve.deltas, &curve.d1)?;
    let l0 = match model.class {
        CoefficientClass::CLog { log_offset, .. } => log_offset,
        _ => 0.0,
    };
    let x: Vec<f64> = deltas.iter().map(|d| (l0 + 0.5 * d.ln().abs()).ln()).collect();
    let y: Vec<f64> = deltas.iter().zip(&curve.d1).map(|(d, v)| (v / d.sqrt()).ln()).collect();
    Ok(Lemma10Fit { log_power_at_half: slope(&x, &y), log_offset: l0, curve, fit, dt: grid.dt, n_paths: opts.n_paths })
}

fn check_localization(model: &SdeModel, y0: &[f64], r: f64) -> Result<()> {
    if y0.len() != model.dim {
        return Err(Error::DimensionMismatch(y0.len(), model.dim));
    }
    if !(r > 0.0) || !(r < model.domain.distance_to_complement(y0) / 2.0) {
        return Err(Error::InvalidArgument("need 0 < r < d(y0, complement) / 2".into()));
    }
    Ok(())
}

/// Tail of the window oscillation: `P(sup_{[T-delta,T]} |X_t - X_{T-delta}| > level)` per `delta`.
pub fn oscillation_tail(
    model: &SdeModel,
    x0: &[f64],
    t: f64,
    deltas: &[f64],
    level: f64,
    opts: &SimOptions,
) -> Result<Vec<(f64, f64)>> {
    check_deltas(deltas, t)?;
    let grid = time_grid(t, pick_dt(deltas, opts, 4.0))?;
    let starts = window_steps(grid, deltas)?;
    let recs = simulate(model, x0, grid, &starts, opts.n_paths, opts.seed)?;
    Ok(deltas
        .iter()
        .enumerate()
        .map(|(w, &d)| (d, recs.iter().filter(|r| r.sup_dev[w] > level).count() as f64 / recs.len() as f64))
        .collect())
}

/// Lattice density `psi(y) n^{-1} sum_{i in A} gamma_{C_i}(y - m_i)` on `[y0 - r, y0 + r]^d`.
fn localized_mixture_grid(
    comps: &[(Vec<f64>, DMatrix<f64>)],
    n_total: usize,
    psi: &Localizer,
    nodes: usize,
) -> Result<GridFunction> {
    let lo: Vec<f64> = psi.y0.iter().map(|v| v - psi.r).collect();
    let hi: Vec<f64> = psi.y0.iter().map(|v| v + psi.r).collect();
    mixture_grid(comps, n_total, &lo, &hi, nodes, &|y| psi.eval(y))
}

/// `post(y) n^{-1} sum_i gamma_{C_i}(y - m_i)` on the box `[lo, hi]` with `nodes` per axis;
/// each component is summed over its 8-sd window.
pub(crate) fn mixture_grid(
    comps: &[(Vec<f64>, DMatrix<f64>)],
    n_total: usize,
    lo: &[f64],
    hi: &[f64],
    nodes: usize,
    post: &(dyn Fn(&[f64]) -> f64 + Sync),
) -> Result<GridFunction> {
    let d = lo.len();
    let lat = Lattice::new(lo, hi, &vec![nodes; d])?;
    let h: Vec<f64> = (0..d).map(|c| lat.spacing(c)).collect();
    let strides = lat.strides().to_vec();
    let chunk = 256;
    let partial: Vec<Vec<f64>> = comps
        .par_chunks(chunk)
        .map(|block| {
            let mut acc = vec![0.0; lat.len()];
            let mut idx = vec![0usize; d];
            let mut pt = vec![0.0; d];
            for (m, c) in block {
                let Some(ch) = c.clone().cholesky() else { continue };
                let l = ch.l();
                let inv = ch.inverse();
                let norm = 1.0 / ((2.0 * std::f64::consts::PI).powf(d as f64 / 2.0) * l.diagonal().iter().product::<f64>());
                let mut lo_i = vec![0usize; d];
                let mut hi_i = vec![0usize; d];
                let mut empty = false;
                for a in 0..d {
                    let w = 8.0 * c[(a, a)].sqrt();
                    let a0 = ((m[a] - w - lo[a]) / h[a]).floor().max(0.0);
                    let a1 = ((m[a] + w - lo[a]) / h[a]).ceil().min((nodes - 1) as f64);
                    if a1 < a0 {
                        empty = true;
                    }
                    lo_i[a] = a0 as usize;
                    hi_i[a] = a1.max(0.0) as usize;
                }
                if empty {
                    continue;
                }
                idx.copy_from_slice(&lo_i);
                loop {
                    for a in 0..d {
                        pt[a] = lo[a] + idx[a] as f64 * h[a] - m[a];
                    }
                    let mut q = 0.0;
                    for a in 0..d {
                        for b in 0..d {
                            q += pt[a] * inv[(a, b)] * pt[b];
                        }
                    }
                    let flat: usize = (0..d).map(|a| idx[a] * strides[a]).sum();
                    acc[flat] += norm * (-0.5 * q).exp();
                    let mut a = 0;
                    loop {
                        if a == d {
                            break;
                        }
                        if idx[a] < hi_i[a] {
                            idx[a] += 1;
                            break;
                        }
                        idx[a] = lo_i[a];
                        a += 1;
                    }
                    if a == d {
                        break;
                    }
                }
            }
            acc
        })
        .collect();
    let mut vals = vec![0.0; lat.len()];
    for p in &partial {
        for (v, a) in vals.iter_mut().zip(p) {
            *v += a;
        }
    }
    let mut pt = vec![0.0; d];
    for (flat, v) in vals.iter_mut().enumerate() {
        lat.point(flat, &mut pt);
        *v *= post(&pt) / n_total as f64;
    }
    GridFunction::new(lat, vals)
}

/// Output of [`theorem9_pipeline`].
#[derive(Debug, Clone)]
pub struct Theorem9Output {
    pub report: BalanceReport,
    pub curve: DistanceCurve,
    /// `(delta, measured norm)` where the density lattice fit under the cap.
    pub norms: Vec<(f64, f64)>,
    /// `C` in `R_delta = C delta^{-(2m+q)/2}`.
    pub calibration: f64,
}

/// Localized balance check for an elliptic `c_log` diffusion.
///
/// For each `delta` the localized frozen-Gaussian law `nu_delta` is compared with `psi mu`
/// through a pathwise coupling; `||p_delta||_{2m+q, 2m, e}` is computed from the explicit
/// mixture density where the lattice fits under `max_grid`, and `R_delta` is the calibrated
/// bound `C delta^{-(2m+q)/2}` with `C` the largest measured `norm * delta^{(2m+q)/2}`.
#[allow(clippy::too_many_arguments)]
pub fn theorem9_pipeline(
    model: &SdeModel,
    x0: &[f64],
    y0: &[f64],
    r: f64,
    t: f64,
    params: &BalanceParams,
    deltas: &[f64],
    opts: &SimOptions,
) -> Result<Theorem9Output> {
    check_deltas(deltas, t)?;
    check_localization(model, y0, r)?;
    if !matches!(model.class, CoefficientClass::CLog { .. } | CoefficientClass::Lipschitz) {
        return Err(Error::InvalidArgument("theorem9_pipeline needs an elliptic c_log model".into()));
    }
    let a0 = model.diffusion_matrix(t, y0);
    if a0.clone().symmetric_eigen().eigenvalues.iter().any(|&l| !(l > 1e-12)) {
        return Err(Error::SingularCovariance);
    }
    let d = model.dim;
    let dt = pick_dt(deltas, opts, 4.0);
    let grid = time_grid(t, dt)?;
    let starts = window_steps(grid, deltas)?;
    let recs = simulate(model, x0, grid, &starts, opts.n_paths, opts.seed)?;
    let psi = Localizer { y0: y0.to_vec(), r };
    let curve = distance_curve(model, &recs, t, deltas, &psi, 2.0 * r);
    let order = 2 * params.m + params.q;
    let exponent = order as f64 / 2.0;
    let mut norms = Vec::new();
    for (w, &delta) in deltas.iter().enumerate() {
        if d > 2 {
            break;
        }
        let comps: Vec<(Vec<f64>, DMatrix<f64>)> = recs
            .iter()
            .filter(|rc| dist2(&rc.start[w * d..(w + 1) * d], y0).sqrt() < 2.0 * r)
            .map(|rc| (rc.start_stopped[w * d..(w + 1) * d].to_vec(), model.diffusion_matrix(t - delta, &rc.start[w * d..(w + 1) * d]) * delta))
            .collect();
        if comps.is_empty() {
            continue;
        }
        let sd_min = comps
            .iter()
            .map(|c| c.1.clone().symmetric_eigen().eigenvalues.min())
            .fold(f64::INFINITY, f64::min)
            .max(0.0)
            .sqrt();
        let h = sd_min / 5.0;
        let nodes = ((2.0 * r / h).ceil() as usize + 1).max(33);
        let cap = if d == 1 { opts.max_grid } else { (opts.max_grid as f64).sqrt().floor() as usize };
        if nodes > cap {
            continue;
        }
        let g = localized_mixture_grid(&comps, recs.len(), &psi, nodes)?;
        norms.push((delta, weighted_sobolev_orlicz_norm(&g, order, 2 * params.m, &params.e)?));
    }
    if norms.is_empty() {
        return Err(Error::GridTooCoarse("no delta admits a density lattice under max_grid".into()));
    }
    let calibration = norms.iter().map(|(dl, n)| n * dl.powf(exponent)).fold(0.0, f64::max);
    let points: Vec<CurvePoint> = deltas
        .iter()
        .zip(&curve.d1)
        .map(|(&dl, &dk)| CurvePoint {
            r: calibration * dl.powf(-exponent),
            dk,
            dk_lower: None,
            norm: norms.iter().find(|n| n.0 == dl).map(|n| n.1),
        })
        .collect();
    let mut prov = BTreeMap::new();
    prov.insert("pipeline".into(), serde_json::json!("theorem9_pipeline"));
    prov.insert("model".into(), serde_json::json!(model.label));
    prov.insert("class".into(), serde_json::to_value(&model.class).unwrap_or_default());
    prov.insert("n_paths".into(), serde_json::json!(opts.n_paths));
    prov.insert("dt".into(), serde_json::json!(grid.dt));
    prov.insert("seed".into(), serde_json::json!(opts.seed));
    prov.insert("y0".into(), serde_json::json!(y0));
    prov.insert("r".into(), serde_json::json!(r));
    prov.insert("T".into(), serde_json::json!(t));
    prov.insert("deltas".into(), serde_json::json!(deltas));
    prov.insert("d1_se".into(), serde_json::json!(curve.se));
    prov.insert("measured_norms".into(), serde_json::json!(norms));
    prov.insert("norm_calibration".into(), serde_json::json!(calibration));
    prov.insert(
        "exit_fraction".into(),
        serde_json::json!(recs.iter().filter(|r| r.exit_step.is_some()).count() as f64 / recs.len() as f64),
    );
    let report = curve_report(&points, params, d, 0.0, "upper (coupling)", prov)?;
    Ok(Theorem9Output { report, curve, norms, calibration })
}

/// Bracket sets `A_0, A_1, ...` and the ellipticity functional `Lambda_k`.
#[derive(Clone)]
pub struct HormanderSpec {
    dim: usize,
    fields: Vec<VectorField>,
    drift0: VectorField,
    step: f64,
}

impl std::fmt::Debug for HormanderSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HormanderSpec").field("dim", &self.dim).field("fields", &self.fields.len()).finish()
    }
}

fn bracket(v: VectorField, w: VectorField, h: f64) -> VectorField {
    Arc::new(move |x: &[f64]| {
        let dir = |f: &VectorField, along: &[f64]| -> Vec<f64> {
            let xp: Vec<f64> = x.iter().zip(along).map(|(a, b)| a + h * b).collect();
            let xm: Vec<f64> = x.iter().zip(along).map(|(a, b)| a - h * b).collect();
            f(&xp).iter().zip(f(&xm)).map(|(p, m)| (p - m) / (2.0 * h)).collect()
        };
        let vx = v(x);
        let wx = w(x);
        let a = dir(&w, &vx);
        let b = dir(&v, &wx);
        a.iter().zip(b).map(|(p, q)| p - q).collect()
    })
}

impl HormanderSpec {
    /// Fields `sigma_1..sigma_N` and the Stratonovich drift `sigma_0`.
    pub fn new(dim: usize, fields: Vec<VectorField>, drift0: VectorField) -> Self {
        HormanderSpec { dim, fields, drift0, step: 1e-4 }
    }

    /// From a time-homogeneous model: `sigma_0 = b - 1/2 sum_j D sigma_j sigma_j`.
    pub fn from_model(model: &SdeModel) -> Self {
        let (d, nn) = (model.dim, model.noise_dim);
        let fields: Vec<VectorField> = (0..nn)
            .map(|j| {
                let m = model.clone();
                Arc::new(move |x: &[f64]| {
                    let s = m.sigma_at(0.0, x);
                    (0..d).map(|i| s[i * nn + j]).collect::<Vec<f64>>()
                }) as VectorField
            })
            .collect();
        let m = model.clone();
        let fs = fields.clone();
        let h = 1e-5;
        let drift0: VectorField = Arc::new(move |x: &[f64]| {
            let mut b = m.drift_at(0.0, x);
            for f in &fs {
                let v = f(x);
                let xp: Vec<f64> = x.iter().zip(&v).map(|(a, c)| a + h * c).collect();
                let xm: Vec<f64> = x.iter().zip(&v).map(|(a, c)| a - h * c).collect();
                for (bi, (p, q)) in b.iter_mut().zip(f(&xp).iter().zip(f(&xm))) {
                    *bi -= 0.5 * (p - q) / (2.0 * h);
                }
            }
            b
        });
        HormanderSpec::new(d, fields, drift0)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `A_0 = {sigma_1..sigma_N}`, `A_{l+1} = {[sigma_j, phi] : phi in A_l, j = 0..N}`.
    pub fn bracket_sets(&self, k: usize) -> Vec<Vec<VectorField>> {
        let mut out = vec![self.fields.clone()];
        let mut all = vec![self.drift0.clone()];
        all.extend(self.fields.iter().cloned());
        for _ in 0..k {
            let prev = out.last().expect("A_0 present");
            let next: Vec<VectorField> =
                prev.iter().flat_map(|phi| all.iter().map(|s| bracket(s.clone(), phi.clone(), self.step))).collect();
            out.push(next);
        }
        out
    }

    /// `Lambda_k(x) = inf_{|xi| = 1} sum_{phi in A_0 u .. u A_k} <phi(x), xi>^2`.
    pub fn lambda(&self, k: usize, x: &[f64]) -> f64 {
        let mut g = DMatrix::<f64>::zeros(self.dim, self.dim);
        for set in self.bracket_sets(k) {
            for phi in set {
                let v = nalgebra::DVector::from_vec(phi(x));
                g += &v * v.transpose();
            }
        }
        g.symmetric_eigen().eigenvalues.min().max(0.0)
    }

    /// Smallest `Lambda_k` over the probes.
    pub fn min_lambda(&self, k: usize, probes: &[Vec<f64>]) -> f64 {
        probes.iter().map(|x| self.lambda(k, x)).fold(f64::INFINITY, f64::min)
    }
}

/// `Cov` of the kinetic Euler window with `K` steps of size `dt`.
pub fn kinetic_window_covariance(k: usize, dt: f64) -> DMatrix<f64> {
    let kf = k as f64;
    let v1 = kf * dt;
    let c12 = dt * dt * kf * (kf - 1.0) / 2.0;
    let v2 = dt.powi(3) * (kf - 1.0) * kf * (2.0 * kf - 1.0) / 6.0;
    DMatrix::from_row_slice(2, 2, &[v1, c12, c12, v2])
}

/// Law of the continuous kinetic pair at time `t` from the origin.
pub fn kinetic_covariance(t: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[t, t * t / 2.0, t * t / 2.0, t.powi(3) / 3.0])
}

/// Kinetic pipeline settings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KineticSettings {
    pub t: f64,
    pub deltas: Vec<f64>,
    /// Radius of the ball `Gamma` centred at the origin.
    pub domain_radius: f64,
    pub y0: Vec<f64>,
    pub r: f64,
    /// Particles for the mode-density check.
    pub mode_particles: usize,
    pub sim: SimOptions,
}

impl Default for KineticSettings {
    fn default() -> Self {
        KineticSettings {
            t: 1.0,
            deltas: dyadic_deltas(0.25, 6),
            domain_radius: 1.6,
            y0: vec![0.0, 0.0],
            r: 0.75,
            mode_particles: 1_000_000,
            sim: SimOptions { n_paths: 20_000, dt: None, seed: 7, max_grid: 0 },
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct KineticOutput {
    pub lambda0: f64,
    pub lambda1: f64,
    pub curve: DistanceCurve,
    /// Slope of `ln d_1` on `ln delta` over the positive points (`inf` when at most one is positive).
    pub distance_exponent: f64,
    /// `(q, slope of ln ||1||_{W^{q,p}} on ln delta, local slopes)`, `p = 2(d+1)`.
    pub norm_scaling: Vec<(usize, f64, Vec<f64>)>,
    pub weight_radii: Vec<f64>,
    pub mode_density: Estimate,
    pub mode_exact: f64,
    /// `||p_T||_{W^{q,e}}` of the explicit Gaussian law on a lattice.
    pub known_density_norm: f64,
    pub known_density_regular: bool,
    pub verdict_agrees: bool,
    #[serde(skip)]
    pub report: BalanceReport,
}

/// Kinetic Hörmander model: bracket ellipticity, frozen approximants with exact weights,
/// distance decay, weight-norm scaling and the `H~_q` statistic.
pub fn hormander_kinetic_pipeline(settings: &KineticSettings, params: &BalanceParams) -> Result<KineticOutput> {
    let t = settings.t;
    check_deltas(&settings.deltas, t)?;
    let model = kinetic_model(Domain::Ball { center: vec![0.0, 0.0], radius: settings.domain_radius })?;
    check_localization(&model, &settings.y0, settings.r)?;
    let spec = HormanderSpec::from_model(&model);
    let probes: Vec<Vec<f64>> = [-1.0, 0.0, 1.0].iter().flat_map(|&a| [-1.0, 0.0, 1.0].map(|b| vec![a, b])).collect();
    let lambda0 = spec.min_lambda(0, &probes);
    let lambda1 = spec.min_lambda(1, &probes);

    let dt = pick_dt(&settings.deltas, &settings.sim, 8.0);
    let grid = time_grid(t, dt)?;
    let starts = window_steps(grid, &settings.deltas)?;
    let recs = simulate(&model, &[0.0, 0.0], grid, &starts, settings.sim.n_paths, settings.sim.seed)?;
    let psi = Localizer { y0: settings.y0.clone(), r: settings.r };
    let lip = psi.coupling_lipschitz();
    let order = 2 * params.m + params.q;
    let p = 2.0 * 3.0;
    let mut curve = DistanceCurve { deltas: settings.deltas.clone(), d1: Vec::new(), se: Vec::new() };
    let mut radii = Vec::new();
    let mut norm_rows: Vec<Vec<f64>> = vec![Vec::new(); 2];
    for (w, &delta) in settings.deltas.iter().enumerate() {
        let k = grid.steps - starts[w];
        let cov = kinetic_window_covariance(k, grid.dt);
        let gw = GaussianWeights::new(&cov, order.max(2))?;
        let mut positions = Vec::with_capacity(2 * recs.len());
        let mut rows = Vec::with_capacity(recs.len());
        let mut terms = Vec::with_capacity(recs.len());
        for r in &recs {
            let s = &r.start[2 * w..2 * w + 2];
            let g1 = r.unstopped[0] - s[0];
            let g2 = r.unstopped[1] - s[1] - s[0] * delta;
            let m0 = &r.start_stopped[2 * w..2 * w + 2];
            let mean = [m0[0], m0[1] + m0[0] * delta];
            // before the exit the continuation is the unstopped path itself
            let y = if r.exit_step.map_or(true, |e| e > starts[w]) {
                [r.unstopped[0], r.unstopped[1]]
            } else {
                [mean[0] + g1, mean[1] + g2]
            };
            rows.push(gw.eval(&y, &mean));
            positions.extend_from_slice(&y);
            terms.push(coupling_term(&r.stopped, &y, &psi, lip, true));
        }
        let (m, se) = mean_se(&terms);
        curve.d1.push(m);
        curve.se.push(se);
        let alphas: Vec<Vec<usize>> = gw.alphas().cloned().collect();
        let s = IbpSample::from_rows(2, positions, &alphas, &rows, gw.order(), "kinetic-frozen");
        radii.push(weight_radius(&s, params.m, params.q)?);
        for q in 1..=2 {
            norm_rows[q - 1].push(measure_sobolev_norm(&s, q, p)?.norm_m);
        }
    }
    let pos: Vec<(f64, f64)> =
        curve.deltas.iter().zip(&curve.d1).filter(|(_, v)| **v > 0.0).map(|(d, v)| (d.ln(), v.ln())).collect();
    let distance_exponent = if pos.len() >= 2 {
        slope(&pos.iter().map(|v| v.0).collect::<Vec<_>>(), &pos.iter().map(|v| v.1).collect::<Vec<_>>())
    } else {
        f64::INFINITY
    };
    let ld: Vec<f64> = settings.deltas.iter().map(|d| d.ln()).collect();
    let norm_scaling = norm_rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let ln: Vec<f64> = row.iter().map(|v| v.ln()).collect();
            let local = ld.windows(2).zip(ln.windows(2)).map(|(a, b)| (b[1] - b[0]) / (a[1] - a[0])).collect();
            (i + 1, slope(&ld, &ln), local)
        })
        .collect();

    let exact_cov = kinetic_covariance(t);
    let mode_sample = gaussian_ibp_weights(&[0.0, 0.0], &exact_cov, 1, settings.mode_particles, settings.sim.seed ^ 0x6d6f6465)?;
    let mode_density = mt_density(&mode_sample, &[0.0, 0.0], PsiRadius::default())?;
    let mode_exact = 1.0 / (2.0 * std::f64::consts::PI * exact_cov.determinant().sqrt());

    let known = known_kinetic_norm(t, params.q, &params.e)?;
    let points: Vec<CurvePoint> = radii
        .iter()
        .zip(&curve.d1)
        .map(|(&r, &dk)| CurvePoint { r, dk, dk_lower: None, norm: Some(r) })
        .collect();
    let mut prov = BTreeMap::new();
    prov.insert("pipeline".into(), serde_json::json!("hormander_kinetic"));
    prov.insert("statistic".into(), serde_json::json!("H~_q: R = c_{2m+q,2(d+1)} m_{2(d+1+m)}^{1/2}"));
    prov.insert("n_paths".into(), serde_json::json!(settings.sim.n_paths));
    prov.insert("dt".into(), serde_json::json!(grid.dt));
    prov.insert("seed".into(), serde_json::json!(settings.sim.seed));
    prov.insert("T".into(), serde_json::json!(t));
    prov.insert("deltas".into(), serde_json::json!(settings.deltas));
    prov.insert("d1_se".into(), serde_json::json!(curve.se));
    prov.insert("lambda0".into(), serde_json::json!(lambda0));
    prov.insert("lambda1".into(), serde_json::json!(lambda1));
    prov.insert("known_density_norm".into(), serde_json::json!(known));
    let report = curve_report(&points, params, 2, 0.0, "upper (coupling)", prov)?;
    let known_density_regular = known.is_finite();
    let verdict_agrees = (report.verdict == crate::balance::Verdict::Regular) == known_density_regular;
    Ok(KineticOutput {
        lambda0,
        lambda1,
        curve,
        distance_exponent,
        norm_scaling,
        weight_radii: radii,
        mode_density,
        mode_exact,
        known_density_norm: known,
        known_density_regular,
        verdict_agrees,
        report,
    })
}

fn known_kinetic_norm(t: f64, q: usize, e: &YoungFunction) -> Result<f64> {
    let c = kinetic_covariance(t);
    let w: Vec<f64> = (0..2).map(|i| 9.0 * c[(i, i)].sqrt()).collect();
    let lat = Lattice::new(&[-w[0], -w[1]], &[w[0], w[1]], &[161, 161])?;
    let g = GridFunction::from_fn(lat, |y| gaussian_pdf(y, &[0.0, 0.0], &c))?;
    weighted_sobolev_orlicz_norm(&g, q, 0, e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridfn::{ks_test, normal_cdf};

    fn brownian() -> SdeModel {
        constant_model(1, 1, vec![1.0], Domain::Whole).unwrap()
    }

    #[test]
    fn brownian_endpoint_is_gaussian() {
        let p = euler_simulate(&brownian(), &[0.3], 1.0, 0.1, 100_000, 3).unwrap();
        let (_, pv) = ks_test(&p.endpoints, |x| normal_cdf(x - 0.3));
        assert!(pv > 0.01, "p = {pv}");
        assert_eq!(p.exit_fraction(), 0.0);
    }

    #[test]
    fn ou_keeps_stationary_moments() {
        let m = ou_model(1.0, 2f64.sqrt()).unwrap();
        let n = 20_000;
        let mut rng = rng_stream(5, 0);
        let starts: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let ends: Vec<f64> = starts
            .iter()
            .enumerate()
            .map(|(i, &x)| euler_simulate(&m, &[x], 1.0, 0.01, 1, 1000 + i as u64).unwrap().endpoints[0])
            .collect();
        let (mu, se) = mean_se(&ends);
        assert!(mu.abs() < 3.0 * se, "{mu} {se}");
        let sq: Vec<f64> = ends.iter().map(|v| v * v).collect();
        let (m2, se2) = mean_se(&sq);
        // Euler's stationary variance for this OU is 1 / (1 - dt / 2)
        let want = 1.0 / (1.0 - 0.005);
        assert!((m2 - want).abs() < 3.0 * se2, "{m2} {se2}");
    }

    #[test]
    fn weak_error_halves_with_dt() {
        // dX = -X dt + dW from 1: E cos X_T = cos(e^{-T}) exp(-(1 - e^{-2T}) / 4)
        let m = SdeModel::new(
            1,
            1,
            Arc::new(|_, _, o: &mut [f64]| o[0] = 1.0),
            Arc::new(|_, x: &[f64], o: &mut [f64]| o[0] = -x[0]),
            CoefficientClass::Lipschitz,
            Domain::Whole,
            "ou",
        )
        .unwrap();
        let t: f64 = 1.0;
        let exact = (-t).exp().cos() * (-(1.0 - (-2.0 * t).exp()) / 4.0).exp();
        let n = 400_000;
        let err = |dt: f64| {
            let p = euler_simulate(&m, &[1.0], t, dt, n, 9).unwrap();
            p.endpoints.iter().map(|x| x.cos()).sum::<f64>() / n as f64 - exact
        };
        let (e1, e2) = (err(0.1), err(0.05));
        let ratio = e1 / e2;
        assert!(ratio > 1.5 && ratio < 2.7, "{e1} {e2} {ratio}");
    }

    #[test]
    fn stopping_and_localization() {
        let m = constant_model(1, 1, vec![1.0], Domain::Box { lo: vec![-1.0], hi: vec![1.0] }).unwrap();
        let p = euler_simulate(&m, &[0.0], 1.0, 0.001, 4000, 2).unwrap();
        assert!(p.exit_fraction() > 0.5);
        let psi = Localizer { y0: vec![0.0], r: 0.45 };
        for i in 0..p.len() {
            assert_eq!(p.exited[i], !m.domain().contains(p.point(i)));
            let lhs = psi.eval(p.point(i));
            let rhs = if p.exited[i] { 0.0 } else { psi.eval(&p.unstopped[i..i + 1]) };
            assert_eq!(lhs, rhs);
        }
        // a domain containing every path reproduces the unstopped law
        let big = m.clone().with_domain(Domain::Box { lo: vec![-50.0], hi: vec![50.0] }).unwrap();
        let q = euler_simulate(&big, &[0.0], 1.0, 0.001, 4000, 2).unwrap();
        assert_eq!(q.endpoints, p.unstopped);
    }

    #[test]
    fn growth_and_modulus_checks() {
        let m = lacunary_clog_model(1, 2.0, 1.0, 1.0, 0.0, Domain::Whole).unwrap();
        assert!(m.growth_constant() < 3.2 && m.check_linear_growth(3.2));
        let mc = m.modulus_check(1.0, 4000, 1);
        assert!(mc.certified && mc.constant > 0.01, "{mc:?}");
        let jump = SdeModel::new(
            1,
            1,
            Arc::new(|_, x: &[f64], o: &mut [f64]| o[0] = if x[0] > 0.123 { 2.0 } else { 1.0 }),
            zero_drift(),
            CoefficientClass::CLog { h: 1.0, log_offset: 0.0 },
            Domain::Whole,
            "jump",
        )
        .unwrap();
        let mj = jump.modulus_check(1.0, 20_000, 1);
        assert!(!mj.certified, "{mj:?}");
        assert!(lacunary_clog_model(1, 1.0, 1.0, 1.0, 0.0, Domain::Whole).is_err());
        let bump = clog_bump_model(1, 2.0, 1.0, 1.0, vec![0.0], Domain::Whole).unwrap();
        assert!(bump.modulus_check(1.0, 4000, 2).certified);
    }

    #[test]
    fn lacunary_matches_direct_sum() {
        for &x in &[0.0, 0.3, -1.7, 2.9] {
            let direct: f64 = (1..=20)
                .map(|j| (3.0 / (j as f64 + 2.0)).powi(4) * ((2f64).powi(j) * x + 0.5).sin())
                .sum();
            let tail: f64 = (21..=LACUNARY_TERMS).map(|j| (3.0 / (j as f64 + 2.0)).powi(4)).sum();
            assert!((lacunary(x, 1.0, 2.0, 0.5) - direct).abs() <= tail + 1e-9, "{x}");
        }
    }

    #[test]
    fn constant_sigma_freezing_is_exact() {
        let m = constant_model(2, 2, vec![1.0, 0.2, 0.0, 0.7], Domain::Whole).unwrap();
        let fz = frozen_gaussian(&m, &[0.0, 0.0], 1.0, 0.25, 0.05, 2000, 1, 4).unwrap();
        for i in 0..fz.kept.len() {
            for c in 0..2 {
                assert!((fz.ibp.point(i)[c] - fz.reference[2 * i + c]).abs() < 1e-12);
            }
        }
        let psi = Localizer { y0: vec![0.0, 0.0], r: 1.0 };
        let grid = time_grid(1.0, 0.05).unwrap();
        let starts = window_steps(grid, &[0.25, 0.1]).unwrap();
        let recs = simulate(&m, &[0.0, 0.0], grid, &starts, 500, 4).unwrap();
        let c = distance_curve(&m, &recs, 1.0, &[0.25, 0.1], &psi, f64::INFINITY);
        assert!(c.d1.iter().all(|v| *v < 1e-12), "{:?}", c.d1);
    }

    #[test]
    fn frozen_moments_match_euler() {
        let m = lacunary_clog_model(1, 2.0, 1.0, 1.0, 0.0, Domain::Whole).unwrap();
        let n = 40_000;
        let fz = frozen_gaussian(&m, &[0.0], 1.0, 0.1, 0.005, n, 2, 11).unwrap();
        let eu = euler_simulate(&m, &[0.0], 1.0, 0.005, n, 12).unwrap();
        let (a, sa) = mean_se(&fz.ibp.positions);
        let (b, sb) = mean_se(&eu.endpoints);
        assert!((a - b).abs() < 3.0 * (sa * sa + sb * sb).sqrt(), "{a} {b}");
        let qa: Vec<f64> = fz.ibp.positions.iter().map(|v| (v - a).powi(2)).collect();
        let qb: Vec<f64> = eu.endpoints.iter().map(|v| (v - b).powi(2)).collect();
        let ((va, sva), (vb, svb)) = (mean_se(&qa), mean_se(&qb));
        assert!((va - vb).abs() < 3.0 * (sva * sva + svb * svb).sqrt(), "{va} {vb}");
        // per-path covariance is delta sigma sigma^*(X_{T-delta}); the mixture has unit mass
        let grid = time_grid(1.0, 0.005).unwrap();
        let recs = simulate(&m, &[0.0], grid, &window_steps(grid, &[0.1]).unwrap(), 50, 11).unwrap();
        for (i, r) in recs.iter().enumerate() {
            let s = m.sigma_at(0.9, &r.start);
            assert!((fz.covariances[i][(0, 0)] - 0.1 * s[0] * s[0]).abs() < 1e-15);
        }
        let small = FrozenSample {
            covariances: fz.covariances[..300].to_vec(),
            means: fz.means[..300].to_vec(),
            ..fz.clone()
        };
        let mass: f64 = (0..=4000).map(|i| -8.0 + 16.0 * i as f64 / 4000.0).map(|y| small.mixture_density(&[y]) * 16.0 / 4000.0).sum();
        assert!((mass - 1.0).abs() < 1e-3, "{mass}");
        // pooled variance = mean conditional variance + variance of the means
        let (cv, scv) = mean_se(&fz.covariances.iter().map(|c| c[(0, 0)]).collect::<Vec<_>>());
        let (mm, _) = mean_se(&fz.means);
        let vm: Vec<f64> = fz.means.iter().map(|v| (v - mm).powi(2)).collect();
        let (vmm, svm) = mean_se(&vm);
        assert!((cv + vmm - va).abs() < 3.0 * (scv * scv + svm * svm + sva * sva).sqrt(), "{cv} {vmm} {va}");
    }

    #[test]
    fn degenerate_freeze_is_reported() {
        let m = constant_model(2, 1, vec![1.0, 0.0], Domain::Whole).unwrap();
        assert!(matches!(frozen_gaussian(&m, &[0.0, 0.0], 1.0, 0.25, 0.05, 100, 1, 1), Err(Error::DegenerateFreeze(100))));
        assert!(frozen_gaussian(&brownian(), &[0.0], 1.0, 1.0, 0.05, 10, 1, 1).is_err());
    }

    #[test]
    fn oscillation_tail_decays() {
        let m = lipschitz_model(1, 1.0, 0.5, Domain::Whole).unwrap();
        let opts = SimOptions { n_paths: 20_000, dt: Some(0.25 / 64.0), seed: 3, max_grid: 0 };
        let tail = oscillation_tail(&m, &[0.0], 1.0, &dyadic_deltas(0.25, 5), 0.5, &opts).unwrap();
        let pts: Vec<(f64, f64)> = tail.iter().filter(|v| v.1 > 0.0).map(|v| (v.0.ln(), v.1.ln())).collect();
        let s = slope(&pts.iter().map(|v| v.0).collect::<Vec<_>>(), &pts.iter().map(|v| v.1).collect::<Vec<_>>());
        assert!(s >= 1.0, "{tail:?} {s}");
    }

    #[test]
    fn lemma10_lipschitz_rate_and_guard() {
        let m = lipschitz_model(1, 2.0, 1.0, Domain::Box { lo: vec![-10.0], hi: vec![10.0] }).unwrap();
        let opts = SimOptions { n_paths: 5000, dt: None, seed: 21, max_grid: 0 };
        let fit = lemma10_rate(&m, &[0.0], &[0.0], 1.0, 0.5, &dyadic_deltas(0.125, 6), &opts).unwrap();
        assert!(fit.fit.exponent >= 0.5, "{:?}", fit.fit);
        assert!(lemma10_rate(&m, &[0.0], &[0.0], 1.0, 0.5, &[0.5, 0.25], &opts).is_err());
        assert!(lemma10_rate(&m, &[0.0], &[9.5], 1.0, 0.5, &[0.25, 0.125], &opts).is_err());
    }

    #[test]
    fn kinetic_brackets() {
        let m = kinetic_model(Domain::Whole).unwrap();
        let spec = HormanderSpec::from_model(&m);
        for x in [[0.0, 0.0], [1.5, -2.0]] {
            assert!(spec.lambda(0, &x).abs() < 1e-12);
            assert!((spec.lambda(1, &x) - 1.0).abs() < 1e-6);
        }
        let sets = spec.bracket_sets(1);
        let v = sets[1][0](&[0.3, 0.1]);
        assert!(v[0].abs() < 1e-8 && (v[1].abs() - 1.0).abs() < 1e-8, "{v:?}");
    }

    #[test]
    fn kinetic_window_matches_euler() {
        let k = 10;
        let dt = 0.01;
        let c = kinetic_window_covariance(k, dt);
        let m = kinetic_model(Domain::Whole).unwrap();
        let p = euler_simulate(&m, &[0.0, 0.0], k as f64 * dt, dt, 200_000, 5).unwrap();
        let x2: Vec<f64> = (0..p.len()).map(|i| p.point(i)[1].powi(2)).collect();
        let x12: Vec<f64> = (0..p.len()).map(|i| p.point(i)[0] * p.point(i)[1]).collect();
        let ((v2, s2), (v12, s12)) = (mean_se(&x2), mean_se(&x12));
        assert!((v2 - c[(1, 1)]).abs() < 3.0 * s2 && (v12 - c[(0, 1)]).abs() < 3.0 * s12, "{v2} {v12} {c}");
        let limit = kinetic_window_covariance(4000, 1.0 / 4000.0);
        assert!((limit - kinetic_covariance(1.0)).abs().max() < 1e-3);
    }

    #[test]
    fn kinetic_pipeline_small() {
        let mut s = KineticSettings::default();
        s.sim.n_paths = 4000;
        s.mode_particles = 200_000;
        let mut p = BalanceParams::new(0, 1, 1, YoungFunction::log_entropy());
        p.a = 1.1;
        let o = hormander_kinetic_pipeline(&s, &p).unwrap();
        assert!(o.lambda0.abs() < 1e-12 && o.lambda1 >= 1.0 - 1e-6);
        assert!(o.distance_exponent >= 1.0, "{:?}", o.curve);
        for (q, sl, local) in &o.norm_scaling {
            assert!(*sl < 0.0, "q = {q}: {sl}");
            assert!(local.iter().all(|l| (l - sl).abs() < 0.3 * sl.abs()), "{local:?}");
        }
        assert!((o.mode_density.value - o.mode_exact).abs() < 3.0 * o.mode_density.se);
        assert!(o.verdict_agrees);
        let bad = KineticSettings { r: 1.0, ..s };
        assert!(hormander_kinetic_pipeline(&bad, &p).is_err());
    }

    #[test]
    fn theorem9_guards() {
        let p = BalanceParams::new(0, 1, 1, YoungFunction::log_entropy());
        let dom = Domain::Box { lo: vec![-10.0], hi: vec![10.0] };
        let m = clog_bump_model(1, 2.0, 1.0, 1.0, vec![0.0], dom.clone()).unwrap();
        let o = SimOptions { n_paths: 10, ..SimOptions::default() };
        assert!(theorem9_pipeline(&m, &[0.0], &[0.0], 1.0, 0.5, &p, &[0.5], &o).is_err());
        assert!(theorem9_pipeline(&m, &[0.0], &[0.0], 6.0, 0.5, &p, &[0.25], &o).is_err());
        let k = kinetic_model(Domain::Whole).unwrap();
        assert!(theorem9_pipeline(&k, &[0.0, 0.0], &[0.0, 0.0], 1.0, 0.5, &p, &[0.25], &o).is_err());
        // too few points for the statistic
        let short = theorem9_pipeline(&m, &[0.0], &[0.0], 1.0, 0.5, &p, &dyadic_deltas(0.25, 3), &o);
        assert!(matches!(short, Err(Error::CurveTooShort(_))), "{short:?}");
    }

    #[test]
    fn paths_do_not_depend_on_workers() {
        let m = lacunary_clog_model(1, 2.0, 1.0, 1.0, 0.0, Domain::Whole).unwrap();
        let a = euler_simulate(&m, &[0.0], 1.0, 0.01, 300, 8).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| euler_simulate(&m, &[0.0], 1.0, 0.01, 300, 8).unwrap());
        assert_eq!((a.endpoints, a.exited), (b.endpoints, b.exited));
        let one = euler_simulate(&m, &[0.0], 1.0, 0.01, 1, 8).unwrap();
        assert_eq!(one.unstopped[0], a.unstopped[0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn lacunary_is_bounded(x in -20.0f64..20.0, h in 0.2f64..3.0, c in 0.0f64..12.0) {
                let amp: f64 = lacunary_weights(h, c).iter().sum();
                prop_assert!(lacunary(x, h, c, 0.3).abs() <= amp + 1e-9);
            }

            #[test]
            fn coupling_term_is_sandwiched(a in -2.0f64..2.0, b in -2.0f64..2.0, r in 0.2f64..1.5) {
                let psi = Localizer { y0: vec![0.0], r };
                let lip = psi.coupling_lipschitz();
                let t = coupling_term(&[a], &[b], &psi, lip, true);
                let diff = (psi.eval(&[a]) - psi.eval(&[b])).abs();
                prop_assert!(t >= diff - 1e-12 && t <= psi.eval(&[a]) + psi.eval(&[b]) + 1e-12);
            }

            #[test]
            fn domain_distance_is_consistent(x in -3.0f64..3.0, y in -3.0f64..3.0) {
                let boxd = Domain::Box { lo: vec![-1.0, -2.0], hi: vec![1.5, 2.0] };
                let ball = Domain::Ball { center: vec![0.5, 0.0], radius: 1.7 };
                for d in [boxd, ball] {
                    let p = [x, y];
                    prop_assert_eq!(d.distance_to_complement(&p) > 0.0, d.contains(&p));
                }
            }

            #[test]
            fn kinetic_window_covariance_is_spd(k in 2usize..400, dt in 1e-4f64..0.1) {
                let c = kinetic_window_covariance(k, dt);
                prop_assert!(c.symmetric_eigen().eigenvalues.min() > 0.0);
            }
        }
    }
}
