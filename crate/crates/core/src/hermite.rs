//! Hermite functions, the dyadic mixtures `H_n^a` and their kernel bounds.

use std::sync::Arc;

use crate::balance::ParticleMeasure;
use crate::gridfn::{plateau, smooth_step, GridFunction, Lattice};
use crate::{Error, Result};

const LN_PI: f64 = 1.144_729_885_849_400_2;
const RESCALE: f64 = 1e150;

/// Streams `h_0(t), ..., h_nmax(t)` into `out` (length `nmax + 1`).
///
/// The recurrence runs on rescaled values with the exponent carried
/// separately, so far tails that underflow `h_0` are still reached.
pub fn hermite_all(nmax: usize, t: f64, out: &mut [f64]) {
    let mut log_s = -0.5 * t * t - 0.25 * LN_PI;
    let mut scale = log_s.exp();
    let emit = |p: f64, log_s: f64, scale: f64| -> f64 {
        if p == 0.0 {
            0.0
        } else if log_s > -700.0 {
            p * scale
        } else {
            let l = p.abs().ln() + log_s;
            if l < -745.0 {
                0.0
            } else {
                l.exp().copysign(p)
            }
        }
    };
    let mut prev = 0.0;
    let mut cur = 1.0;
    out[0] = emit(cur, log_s, scale);
    for j in 0..nmax {
        let next = t * (2.0 / (j + 1) as f64).sqrt() * cur - (j as f64 / (j + 1) as f64).sqrt() * prev;
        prev = cur;
        cur = next;
        if cur.abs() > RESCALE {
            cur /= RESCALE;
            prev /= RESCALE;
            log_s += RESCALE.ln();
            scale = log_s.exp();
        }
        out[j + 1] = emit(cur, log_s, scale);
    }
}

/// Normalized Hermite function `h_n(t)`.
pub fn hermite_h(n: usize, t: f64) -> f64 {
    let mut buf = vec![0.0; n + 1];
    hermite_all(n, t, &mut buf);
    buf[n]
}

/// Values and first two derivatives of `h_0..h_nmax` at `t`.
pub fn hermite_all_derivs(nmax: usize, t: f64, h: &mut [f64], dh: &mut [f64], d2h: &mut [f64]) {
    let mut ext = vec![0.0; nmax + 2];
    hermite_all(nmax + 1, t, &mut ext);
    for j in 0..=nmax {
        let lower = if j == 0 { 0.0 } else { (j as f64 / 2.0).sqrt() * ext[j - 1] };
        h[j] = ext[j];
        dh[j] = lower - ((j + 1) as f64 / 2.0).sqrt() * ext[j + 1];
        d2h[j] = (t * t - (2 * j + 1) as f64) * ext[j];
    }
}

/// Gauss-Hermite rule for `int g(x) dx`, exact when `g = e^{-x^2} P` with `deg P < 2n`.
///
/// Returns nodes and the weights already multiplied by `e^{x^2}`, so
/// `sum w_k h_i(x_k) h_j(x_k)` integrates products of Hermite functions.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let mut buf = vec![0.0; n + 1];
    let mut z = 0.0;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-0.16667),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        for _ in 0..100 {
            hermite_all(n, z, &mut buf);
            let (hn, hn1) = (buf[n], buf[n - 1]);
            let dh = (2.0 * n as f64).sqrt() * hn1 - z * hn;
            let dz = hn / dh;
            z -= dz;
            if dz.abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        hermite_all(n, z, &mut buf);
        x[i] = z;
        x[n - 1 - i] = -z;
        let wi = 1.0 / (n as f64 * buf[n - 1] * buf[n - 1]);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

/// The smooth cutoff `a` supported in `[1/4, 4]` with `a(t) + a(4t) = 1` on `[1/4, 1]`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CutoffA;

impl CutoffA {
    pub fn eval(&self, t: f64) -> f64 {
        if t <= 0.25 || t >= 4.0 {
            0.0
        } else if t <= 1.0 {
            smooth_step((t - 0.25) / 0.75)
        } else {
            1.0 - smooth_step((t / 4.0 - 0.25) / 0.75)
        }
    }

    /// `||a||_l = sum_{i <= l} sup |a^(i)|`, derivatives by repeated finite differences.
    pub fn norm(&self, l: usize) -> f64 {
        let n = 40_000;
        let h = 4.0 / n as f64;
        let mut v: Vec<f64> = (0..=n).map(|i| self.eval(i as f64 * h)).collect();
        let mut total = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for _ in 0..l {
            v = v.windows(3).map(|w| (w[2] - w[0]) / (2.0 * h)).collect();
            total += v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        }
        total
    }
}

/// Hermite indices `j` in level `n` with their weights `a(j / 4^n)`.
pub fn level_coefficients(a: &CutoffA, n: usize) -> Vec<(usize, f64)> {
    let s = 4f64.powi(n as i32);
    let lo = if n == 0 { 1 } else { 4usize.pow(n as u32 - 1) + 1 };
    let hi = 4usize.pow(n as u32 + 1) - 1;
    (lo..=hi).map(|j| (j, a.eval(j as f64 / s))).filter(|(_, c)| *c != 0.0).collect()
}

const ENUM_BUDGET: usize = 200_000;

/// Precomputed dyadic levels `0..=n_max` in dimension `d`.
#[derive(Debug, Clone)]
pub struct DyadicBlockSet {
    dim: usize,
    n_max: usize,
    cutoff: CutoffA,
    coeffs: Vec<Vec<(usize, f64)>>,
}

impl DyadicBlockSet {
    pub fn new(dim: usize, n_max: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        if n_max > 7 {
            return Err(Error::LevelTooLarge(n_max));
        }
        let cutoff = CutoffA;
        let coeffs = (0..=n_max).map(|n| level_coefficients(&cutoff, n)).collect();
        Ok(DyadicBlockSet { dim, n_max, cutoff, coeffs })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn n_max(&self) -> usize {
        self.n_max
    }
    pub fn cutoff(&self) -> &CutoffA {
        &self.cutoff
    }

    pub fn coefficients(&self, n: usize) -> Result<&[(usize, f64)]> {
        self.coeffs.get(n).map(|v| v.as_slice()).ok_or(Error::LevelTooLarge(n))
    }

    /// Largest Hermite level touched by block `n`.
    pub fn top_index(n: usize) -> usize {
        4usize.pow(n as u32 + 1) - 1
    }

    fn check_budget(&self, n: usize) -> Result<()> {
        if n > self.n_max {
            return Err(Error::LevelTooLarge(n));
        }
        if self.dim >= 2 {
            let jmax = Self::top_index(n);
            // number of multi-indices with |alpha| <= jmax
            let mut count = 1usize;
            for i in 1..=self.dim {
                count = count.saturating_mul(jmax + i) / i;
            }
            if count > ENUM_BUDGET {
                return Err(Error::LevelTooLarge(n));
            }
        }
        Ok(())
    }

    /// `H_n^a(x, y) = sum_j a(j/4^n) sum_{|alpha| = j} H_alpha(x) H_alpha(y)`.
    pub fn block_kernel(&self, n: usize, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check_budget(n)?;
        if x.len() != self.dim || y.len() != self.dim {
            return Err(Error::DimensionMismatch(x.len(), self.dim));
        }
        let jmax = Self::top_index(n);
        let levels = level_products(x, y, jmax);
        Ok(self.coeffs[n].iter().map(|&(j, c)| c * levels[j]).sum())
    }

    /// `d^order/dx^order H_n^a(x, y)` in dimension one, `order <= 2`.
    pub fn block_kernel_dx(&self, n: usize, order: usize, x: f64, y: f64) -> Result<f64> {
        if self.dim != 1 {
            return Err(Error::DimensionMismatch(self.dim, 1));
        }
        if order > 2 {
            return Err(Error::InvalidArgument("derivative order above 2".into()));
        }
        self.check_budget(n)?;
        let jmax = Self::top_index(n);
        let mut hx = vec![0.0; jmax + 1];
        let mut d1 = vec![0.0; jmax + 1];
        let mut d2 = vec![0.0; jmax + 1];
        hermite_all_derivs(jmax, x, &mut hx, &mut d1, &mut d2);
        let mut hy = vec![0.0; jmax + 1];
        hermite_all(jmax, y, &mut hy);
        let dx = [&hx, &d1, &d2][order];
        Ok(self.coeffs[n].iter().map(|&(j, c)| c * dx[j] * hy[j]).sum())
    }
}

/// `L_j = sum_{|alpha| = j} H_alpha(x) H_alpha(y)` for `j <= jmax`.
fn level_products(x: &[f64], y: &[f64], jmax: usize) -> Vec<f64> {
    let mut hx = vec![0.0; jmax + 1];
    let mut hy = vec![0.0; jmax + 1];
    let mut acc: Option<Vec<f64>> = None;
    for (xi, yi) in x.iter().zip(y) {
        hermite_all(jmax, *xi, &mut hx);
        hermite_all(jmax, *yi, &mut hy);
        let u: Vec<f64> = hx.iter().zip(&hy).map(|(a, b)| a * b).collect();
        acc = Some(match acc {
            None => u,
            Some(prev) => {
                let mut out = vec![0.0; jmax + 1];
                for (i, p) in prev.iter().enumerate() {
                    if *p == 0.0 {
                        continue;
                    }
                    for (k, uk) in u.iter().enumerate().take(jmax + 1 - i) {
                        out[i + k] += p * uk;
                    }
                }
                out
            }
        });
    }
    acc.unwrap_or_default()
}

/// Hermite coefficients `c_alpha = int H_alpha f` of a lattice function (d = 1 or 2).
#[derive(Debug, Clone)]
pub struct HermiteCoefficients {
    dim: usize,
    jmax: usize,
    /// Row-major `(jmax + 1)^d` table.
    coeffs: Vec<f64>,
}

impl HermiteCoefficients {
    pub fn jmax(&self) -> usize {
        self.jmax
    }
    pub fn values(&self) -> &[f64] {
        &self.coeffs
    }
    /// Coefficient of `H_alpha`.
    pub fn get(&self, alpha: &[usize]) -> f64 {
        let mut flat = 0;
        for &a in alpha {
            flat = flat * (self.jmax + 1) + a;
        }
        self.coeffs[flat]
    }
}

fn check_resolution(lat: &Lattice, jmax: usize) -> Result<()> {
    let limit = 0.9 * std::f64::consts::PI / ((2 * jmax + 1) as f64).sqrt();
    for a in 0..lat.dim() {
        if lat.spacing(a) > limit {
            return Err(Error::GridTooCoarse(format!(
                "axis {a}: spacing {:.3e} above {limit:.3e} needed to resolve Hermite index {jmax}",
                lat.spacing(a)
            )));
        }
    }
    Ok(())
}

fn axis_table(lat: &Lattice, axis: usize, jmax: usize) -> Vec<f64> {
    let n = lat.shape()[axis];
    let mut table = vec![0.0; n * (jmax + 1)];
    for i in 0..n {
        hermite_all(jmax, lat.coord(axis, i), &mut table[i * (jmax + 1)..(i + 1) * (jmax + 1)]);
    }
    table
}

/// Trapezoid Hermite transform on the native lattice.
pub fn hermite_transform(f: &GridFunction, jmax: usize) -> Result<HermiteCoefficients> {
    let lat = f.lattice().clone();
    check_resolution(&lat, jmax)?;
    let w = lat.weights();
    match lat.dim() {
        1 => {
            let mut coeffs = vec![0.0; jmax + 1];
            let mut buf = vec![0.0; jmax + 1];
            for (i, (&v, &wi)) in f.values().iter().zip(w).enumerate() {
                if v == 0.0 {
                    continue;
                }
                hermite_all(jmax, lat.coord(0, i), &mut buf);
                let s = v * wi;
                for (c, b) in coeffs.iter_mut().zip(&buf) {
                    *c += s * b;
                }
            }
            Ok(HermiteCoefficients { dim: 1, jmax, coeffs })
        }
        2 => {
            let (n0, n1) = (lat.shape()[0], lat.shape()[1]);
            if (n0 + n1) * (jmax + 1) > 20_000_000 {
                return Err(Error::LevelTooLarge(jmax));
            }
            let t0 = axis_table(&lat, 0, jmax);
            let t1 = axis_table(&lat, 1, jmax);
            let m = jmax + 1;
            // contract axis 1 first: g[i0][b] = sum_i1 w f h_b(x1)
            let mut g = vec![0.0; n0 * m];
            for i0 in 0..n0 {
                for i1 in 0..n1 {
                    let idx = i0 * n1 + i1;
                    let s = f.values()[idx] * w[idx];
                    if s == 0.0 {
                        continue;
                    }
                    let row = &t1[i1 * m..(i1 + 1) * m];
                    let dst = &mut g[i0 * m..(i0 + 1) * m];
                    for (d, r) in dst.iter_mut().zip(row) {
                        *d += s * r;
                    }
                }
            }
            let mut coeffs = vec![0.0; m * m];
            for i0 in 0..n0 {
                let row0 = &t0[i0 * m..(i0 + 1) * m];
                let gi = &g[i0 * m..(i0 + 1) * m];
                for a in 0..m {
                    let ha = row0[a];
                    if ha == 0.0 {
                        continue;
                    }
                    let dst = &mut coeffs[a * m..(a + 1) * m];
                    for (d, gb) in dst.iter_mut().zip(gi) {
                        *d += ha * gb;
                    }
                }
            }
            Ok(HermiteCoefficients { dim: 2, jmax, coeffs })
        }
        d => Err(Error::InvalidArgument(format!("Hermite transform supports d <= 2, got {d}"))),
    }
}

/// `x -> sum_alpha m(|alpha|) c_alpha H_alpha(x)` on `lat`.
pub fn hermite_synthesize(
    c: &HermiteCoefficients,
    multiplier: &dyn Fn(usize) -> f64,
    lat: &Arc<Lattice>,
) -> Result<GridFunction> {
    if lat.dim() != c.dim {
        return Err(Error::DimensionMismatch(lat.dim(), c.dim));
    }
    let jmax = c.jmax;
    let mult: Vec<f64> = (0..=2 * jmax).map(multiplier).collect();
    match c.dim {
        1 => {
            let scaled: Vec<f64> = c.coeffs.iter().enumerate().map(|(j, v)| v * mult[j]).collect();
            let mut buf = vec![0.0; jmax + 1];
            let values = (0..lat.len())
                .map(|i| {
                    hermite_all(jmax, lat.coord(0, i), &mut buf);
                    buf.iter().zip(&scaled).map(|(a, b)| a * b).sum()
                })
                .collect();
            GridFunction::new(lat.clone(), values)
        }
        2 => {
            let m = jmax + 1;
            let (n0, n1) = (lat.shape()[0], lat.shape()[1]);
            let t0 = axis_table(lat, 0, jmax);
            let t1 = axis_table(lat, 1, jmax);
            // s[a][i1] = sum_b m(a + b) c_ab h_b(x1_i1)
            let mut s = vec![0.0; m * n1];
            for a in 0..m {
                for b in 0..m {
                    let v = c.coeffs[a * m + b] * mult[a + b];
                    if v == 0.0 {
                        continue;
                    }
                    for i1 in 0..n1 {
                        s[a * n1 + i1] += v * t1[i1 * m + b];
                    }
                }
            }
            let mut values = vec![0.0; n0 * n1];
            for i0 in 0..n0 {
                for a in 0..m {
                    let ha = t0[i0 * m + a];
                    if ha == 0.0 {
                        continue;
                    }
                    for i1 in 0..n1 {
                        values[i0 * n1 + i1] += ha * s[a * n1 + i1];
                    }
                }
            }
            GridFunction::new(lat.clone(), values)
        }
        d => Err(Error::InvalidArgument(format!("Hermite synthesis supports d <= 2, got {d}"))),
    }
}

/// `x -> int H_n^a(x, y) f(y) dy` on the lattice of `f`.
pub fn block_convolve(blocks: &DyadicBlockSet, n: usize, f: &GridFunction) -> Result<GridFunction> {
    blocks.check_budget(n)?;
    if f.dim() != blocks.dim() {
        return Err(Error::DimensionMismatch(f.dim(), blocks.dim()));
    }
    let jmax = DyadicBlockSet::top_index(n);
    let c = hermite_transform(f, jmax)?;
    let s = 4f64.powi(n as i32);
    let a = *blocks.cutoff();
    hermite_synthesize(&c, &|j| a.eval(j as f64 / s), f.lattice())
}

/// `c_0 H_0 + sum_{n <= big_n} H_n^a * f`.
///
/// The blocks only cover indices `j >= 1`; the ground-state projection is
/// added so that the sum converges to `f` itself.
pub fn reconstruct(blocks: &DyadicBlockSet, big_n: usize, f: &GridFunction) -> Result<GridFunction> {
    blocks.check_budget(big_n)?;
    let jmax = DyadicBlockSet::top_index(big_n);
    let c = hermite_transform(f, jmax)?;
    let a = *blocks.cutoff();
    let mult = move |j: usize| -> f64 {
        if j == 0 {
            return 1.0;
        }
        (0..=big_n).map(|n| a.eval(j as f64 / 4f64.powi(n as i32))).sum()
    };
    hermite_synthesize(&c, &mult, f.lattice())
}

/// `H_alpha` sampled on a lattice.
pub fn hermite_grid(alpha: &[usize], lat: &Arc<Lattice>) -> Result<GridFunction> {
    if alpha.len() != lat.dim() {
        return Err(Error::DimensionMismatch(alpha.len(), lat.dim()));
    }
    GridFunction::from_fn(lat.clone(), |x| alpha.iter().zip(x).map(|(&a, &t)| hermite_h(a, t)).product())
}

/// Sup over interior nodes of `|(-Delta + |x|^2) H_alpha - (2|alpha| + d) H_alpha|`.
pub fn eigen_check(alpha: &[usize], lat: &Arc<Lattice>) -> Result<f64> {
    let d = lat.dim();
    let h = hermite_grid(alpha, lat)?;
    let mut lap = vec![0.0; lat.len()];
    for axis in 0..d {
        let mut order = vec![0; d];
        order[axis] = 2;
        let dd = h.derivative(&order)?;
        for (l, v) in lap.iter_mut().zip(dd.values()) {
            *l += v;
        }
    }
    let lambda = (2 * alpha.iter().sum::<usize>() + d) as f64;
    let weights = lat.buffered_weights(&vec![2; d]);
    let mut x = vec![0.0; d];
    let mut worst = 0.0f64;
    for i in 0..lat.len() {
        if weights[i] == 0.0 {
            continue;
        }
        lat.point(i, &mut x);
        let r2: f64 = x.iter().map(|v| v * v).sum();
        let res = -lap[i] + r2 * h.values()[i] - lambda * h.values()[i];
        worst = worst.max(res.abs());
    }
    Ok(worst)
}

/// Per-level `sup |d^alpha_x H_n^a(x, y)| (1 + 2^n |x - y|)^k / 2^{n(alpha + 1)}` (d = 1).
pub fn kernel_bound_ratio(blocks: &DyadicBlockSet, alpha: usize, k: u32) -> Result<Vec<f64>> {
    if blocks.dim() != 1 {
        return Err(Error::DimensionMismatch(blocks.dim(), 1));
    }
    if alpha > 2 {
        return Err(Error::InvalidArgument("derivative order above 2".into()));
    }
    let offsets = [0.0, 0.25, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0, 24.0];
    let mut out = Vec::with_capacity(blocks.n_max() + 1);
    for n in 0..=blocks.n_max() {
        let jmax = DyadicBlockSet::top_index(n);
        let scale = 2f64.powi(n as i32);
        let reach = 1.05 * ((2 * jmax + 1) as f64).sqrt();
        let nx = 241;
        let mut hx = vec![0.0; jmax + 1];
        let mut d1 = vec![0.0; jmax + 1];
        let mut d2 = vec![0.0; jmax + 1];
        let mut hy = vec![0.0; jmax + 1];
        let coeffs = &blocks.coeffs[n];
        let mut best = 0.0f64;
        for i in 0..nx {
            let x = -reach + 2.0 * reach * i as f64 / (nx - 1) as f64;
            hermite_all_derivs(jmax, x, &mut hx, &mut d1, &mut d2);
            let dx = [&hx, &d1, &d2][alpha];
            for &s in &offsets {
                for sign in [1.0, -1.0] {
                    if s == 0.0 && sign < 0.0 {
                        continue;
                    }
                    let y = x + sign * s / scale;
                    hermite_all(jmax, y, &mut hy);
                    let v: f64 = coeffs.iter().map(|&(j, c)| c * dx[j] * hy[j]).sum();
                    let r = v.abs() * (1.0 + s).powi(k as i32) / scale.powi(alpha as i32 + 1);
                    best = best.max(r);
                }
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Density of `T*_delta mu`: `Phi_delta(y) sum_i w_i gamma_delta(X_i - y)` on `lat`.
pub fn regularize(mu: &ParticleMeasure, delta: f64, lat: &Arc<Lattice>) -> Result<GridFunction> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta must lie in (0, 1), got {delta}")));
    }
    let d = mu.dim();
    if lat.dim() != d {
        return Err(Error::DimensionMismatch(lat.dim(), d));
    }
    let norm = (2.0 * std::f64::consts::PI * delta).powf(-0.5 * d as f64);
    let cut2 = 80.0 * delta;
    let r_in = 1.0 / delta;
    let mut y = vec![0.0; d];
    let mut values = vec![0.0; lat.len()];
    for (i, v) in values.iter_mut().enumerate() {
        lat.point(i, &mut y);
        let r = y.iter().map(|t| t * t).sum::<f64>().sqrt();
        let cut = plateau(r, r_in, r_in + 1.0);
        if cut == 0.0 {
            continue;
        }
        let mut acc = 0.0;
        for p in 0..mu.len() {
            let x = mu.point(p);
            let d2: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < cut2 {
                acc += mu.weights()[p] * (-0.5 * d2 / delta).exp();
            }
        }
        *v = cut * norm * acc;
    }
    GridFunction::new(lat.clone(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridfn::{rng_stream, slope};
    use rand_distr::{Distribution, StandardNormal};

    /// Direct evaluation with exact integer coefficients of the physicists' `H_n`.
    fn direct_h(n: usize, t: f64) -> f64 {
        // H_{n+1} = 2t H_n - 2n H_{n-1} on integer coefficient vectors
        let mut prev: Vec<i128> = vec![1];
        let mut cur: Vec<i128> = vec![0, 2];
        if n == 0 {
            return std::f64::consts::PI.powf(-0.25) * (-t * t / 2.0).exp();
        }
        for k in 1..n {
            let mut next = vec![0i128; k + 2];
            for (i, c) in cur.iter().enumerate() {
                next[i + 1] += 2 * c;
            }
            for (i, c) in prev.iter().enumerate() {
                next[i] -= 2 * k as i128 * c;
            }
            prev = cur;
            cur = next;
        }
        let val: f64 = cur.iter().enumerate().map(|(i, &c)| c as f64 * t.powi(i as i32)).sum();
        let fact: f64 = (1..=n).map(|i| i as f64).product();
        val * (-t * t / 2.0).exp() / (2f64.powi(n as i32) * fact * std::f64::consts::PI.sqrt()).sqrt()
    }

    #[test]
    fn ground_state_value() {
        assert!((hermite_h(0, 0.0) - 0.751_125_544_464_942_5).abs() < 1e-15);
    }

    #[test]
    fn matches_direct_formula() {
        for t in [0.5, 1.0, 2.0] {
            assert!((hermite_h(5, t) - direct_h(5, t)).abs() < 1e-14, "t={t}");
        }
        for n in [0, 1, 7, 12] {
            assert!((hermite_h(n, 1.3) - direct_h(n, 1.3)).abs() < 1e-13);
        }
    }

    #[test]
    fn far_tail_does_not_vanish_spuriously() {
        // the classical turning point of h_n is sqrt(2n + 1)
        let n = 10_000;
        let t = 0.95 * ((2 * n + 1) as f64).sqrt();
        let v = hermite_h(n, t);
        assert!(v.is_finite() && v.abs() > 1e-6, "{v}");
        assert_eq!(hermite_h(3, 60.0), 0.0);
    }

    #[test]
    fn orthonormal_by_gauss_hermite() {
        let (x, w) = gauss_hermite(129);
        let nmax = 64;
        let vals: Vec<Vec<f64>> = x
            .iter()
            .map(|&t| {
                let mut b = vec![0.0; nmax + 1];
                hermite_all(nmax, t, &mut b);
                b
            })
            .collect();
        let mut worst = 0.0f64;
        for n in 0..=nmax {
            for m in 0..=nmax {
                let g: f64 = (0..x.len()).map(|k| w[k] * vals[k][n] * vals[k][m]).sum();
                let target = if n == m { 1.0 } else { 0.0 };
                worst = worst.max((g - target).abs());
            }
        }
        assert!(worst < 1e-8, "{worst}");
    }

    #[test]
    fn cutoff_properties() {
        let a = CutoffA;
        for i in 0..=3000 {
            let t = 0.25 + 0.75 * i as f64 / 3000.0;
            assert!((a.eval(t) + a.eval(4.0 * t) - 1.0).abs() < 1e-10);
        }
        assert_eq!(a.eval(0.25), 0.0);
        assert_eq!(a.eval(0.1), 0.0);
        assert_eq!(a.eval(4.0), 0.0);
        assert_eq!(a.eval(7.0), 0.0);
        let nmax = 6;
        let top = 4f64.powi(nmax);
        for i in 0..=5000 {
            let t = (top.ln() * i as f64 / 5000.0).exp();
            let s: f64 = (0..=nmax + 1).map(|n| a.eval(t / 4f64.powi(n))).sum();
            assert!((s - 1.0).abs() < 1e-10, "t={t}");
        }
        assert!(a.norm(2).is_finite() && a.norm(2) > a.norm(0));
    }

    #[test]
    fn level_tables() {
        let a = CutoffA;
        for n in 0..5 {
            for (j, _) in level_coefficients(&a, n) {
                let t = j as f64 / 4f64.powi(n as i32);
                assert!(t > 0.25 && t < 4.0);
            }
        }
        let blocks = DyadicBlockSet::new(1, 4).unwrap();
        for n in 0..=4 {
            for m in n + 2..=4 {
                let a: Vec<usize> = blocks.coefficients(n).unwrap().iter().map(|p| p.0).collect();
                let b: Vec<usize> = blocks.coefficients(m).unwrap().iter().map(|p| p.0).collect();
                assert!(a.iter().all(|j| !b.contains(j)));
            }
        }
    }

    #[test]
    fn eigen_residuals() {
        let lat = Lattice::new(&[-8.0], &[8.0], &[1601]).unwrap();
        let r = eigen_check(&[0], &lat).unwrap();
        assert!(r < 1e-4, "{r}");
        let lat2 = Lattice::new(&[-6.0, -6.0], &[6.0, 6.0], &[301, 301]).unwrap();
        let r2 = eigen_check(&[1, 1], &lat2).unwrap();
        assert!(r2 < 1e-3, "{r2}");
        let fine = Lattice::new(&[-8.0], &[8.0], &[3201]).unwrap();
        let ratio = r / eigen_check(&[0], &fine).unwrap();
        assert!((3.5..=4.5).contains(&ratio), "{ratio}");
    }

    #[test]
    fn kernel_small_sum() {
        let blocks = DyadicBlockSet::new(1, 3).unwrap();
        let a = CutoffA;
        let v = blocks.block_kernel(0, &[0.0], &[0.0]).unwrap();
        let h2 = hermite_h(2, 0.0);
        assert!((v - a.eval(2.0) * h2 * h2).abs() < 1e-15);
        let (x, y) = (0.7, -1.3);
        assert_eq!(blocks.block_kernel(2, &[x], &[y]).unwrap(), blocks.block_kernel(2, &[y], &[x]).unwrap());
        assert!(matches!(blocks.block_kernel(4, &[0.0], &[0.0]), Err(Error::LevelTooLarge(4))));
    }

    #[test]
    fn kernel_trace() {
        let blocks = DyadicBlockSet::new(1, 2).unwrap();
        for n in 0..=2 {
            let lat = Lattice::new(&[-14.0], &[14.0], &[2801]).unwrap();
            let diag = GridFunction::from_fn(lat, |x| blocks.block_kernel(n, x, x).unwrap()).unwrap();
            let expect: f64 = blocks.coefficients(n).unwrap().iter().map(|p| p.1).sum();
            assert!((diag.integrate() - expect).abs() < 1e-8, "n={n}");
        }
    }

    #[test]
    fn kernel_2d_matches_enumeration() {
        let blocks = DyadicBlockSet::new(2, 3).unwrap();
        let x = [0.3, -0.8];
        let y = [1.1, 0.2];
        let mut direct = 0.0;
        for &(j, c) in blocks.coefficients(1).unwrap() {
            for a0 in 0..=j {
                let a1 = j - a0;
                direct +=
                    c * hermite_h(a0, x[0]) * hermite_h(a0, y[0]) * hermite_h(a1, x[1]) * hermite_h(a1, y[1]);
            }
        }
        assert!((blocks.block_kernel(1, &x, &y).unwrap() - direct).abs() < 1e-13);
        let big = DyadicBlockSet::new(2, 5).unwrap();
        assert!(matches!(big.block_kernel(5, &x, &y), Err(Error::LevelTooLarge(5))));
    }

    #[test]
    fn kernel_derivative_by_differences() {
        let blocks = DyadicBlockSet::new(1, 2).unwrap();
        let (x, y, h) = (0.4, 0.1, 1e-4);
        let k = |t: f64| blocks.block_kernel(1, &[t], &[y]).unwrap();
        let d1 = (k(x + h) - k(x - h)) / (2.0 * h);
        let d2 = (k(x + h) - 2.0 * k(x) + k(x - h)) / (h * h);
        assert!((blocks.block_kernel_dx(1, 1, x, y).unwrap() - d1).abs() < 1e-6);
        assert!((blocks.block_kernel_dx(1, 2, x, y).unwrap() - d2).abs() < 1e-4);
    }

    #[test]
    fn convolve_single_modes() {
        let blocks = DyadicBlockSet::new(1, 2).unwrap();
        let lat = Lattice::new(&[-12.0], &[12.0], &[801]).unwrap();
        let h2 = GridFunction::from_fn(lat.clone(), |x| hermite_h(2, x[0])).unwrap();
        let out = block_convolve(&blocks, 0, &h2).unwrap();
        let a2 = CutoffA.eval(2.0);
        for (o, v) in out.values().iter().zip(h2.values()) {
            assert!((o - a2 * v).abs() < 1e-10);
        }
        let h20 = GridFunction::from_fn(lat, |x| hermite_h(20, x[0])).unwrap();
        let out = block_convolve(&blocks, 0, &h20).unwrap();
        assert!(out.sup_norm() < 1e-10);
    }

    #[test]
    fn coarse_grid_guard() {
        let blocks = DyadicBlockSet::new(1, 4).unwrap();
        let lat = Lattice::new(&[-10.0], &[10.0], &[101]).unwrap();
        let f = GridFunction::from_fn(lat, |x| (-x[0] * x[0]).exp()).unwrap();
        assert!(matches!(block_convolve(&blocks, 4, &f), Err(Error::GridTooCoarse(_))));
    }

    #[test]
    fn blocks_far_apart_are_orthogonal() {
        let blocks = DyadicBlockSet::new(1, 3).unwrap();
        let lat = Lattice::new(&[-12.0], &[12.0], &[1201]).unwrap();
        let f = GridFunction::from_fn(lat, |x| (-(x[0] - 1.0).powi(2)).exp() * (3.0 * x[0]).cos()).unwrap();
        for (n, m) in [(0, 2), (1, 3), (0, 3)] {
            let inner = block_convolve(&blocks, m, &f).unwrap();
            let both = block_convolve(&blocks, n, &inner).unwrap();
            assert!(both.l2_norm() < 1e-9 * f.l2_norm(), "{n},{m}");
        }
    }

    #[test]
    fn reconstruction_converges_monotonically() {
        let blocks = DyadicBlockSet::new(1, 4).unwrap();
        let lat = Lattice::new(&[-12.0], &[12.0], &[1601]).unwrap();
        let f = GridFunction::from_fn(lat, |x| x[0] * (-(x[0] - 0.5).powi(2)).exp()).unwrap();
        let mut prev = f64::INFINITY;
        for n in 0..=4 {
            let r = reconstruct(&blocks, n, &f).unwrap();
            let err = f.zip_with(&r, |a, b| a - b).unwrap().l2_norm();
            assert!(err <= prev * (1.0 + 1e-12) + 1e-13, "n={n}: {err} > {prev}");
            prev = err;
        }
        assert!(prev < 1e-6, "{prev}");
    }

    #[test]
    fn reconstruction_matches_truncated_series() {
        // partial-sum oracle: direct Hermite series truncated at 4^{N+1} terms
        let blocks = DyadicBlockSet::new(1, 3).unwrap();
        let lat = Lattice::new(&[-10.0], &[10.0], &[1201]).unwrap();
        let f = GridFunction::from_fn(lat.clone(), |x| (-(x[0] + 0.7).powi(2) / 0.8).exp()).unwrap();
        let r = reconstruct(&blocks, 3, &f).unwrap();
        let c = hermite_transform(&f, 255).unwrap();
        let series = hermite_synthesize(&c, &|j| if j <= 255 { 1.0 } else { 0.0 }, &lat).unwrap();
        let e1 = f.zip_with(&r, |a, b| a - b).unwrap().l2_norm();
        let e2 = f.zip_with(&series, |a, b| a - b).unwrap().l2_norm();
        assert!(e1 < 1e-3 && e2 < 1e-3, "{e1} {e2}");
    }

    #[test]
    fn two_dim_transform_round_trip() {
        let blocks = DyadicBlockSet::new(2, 2).unwrap();
        let lat = Lattice::new(&[-9.0, -9.0], &[9.0, 9.0], &[151, 151]).unwrap();
        let f = GridFunction::from_fn(lat, |x| (-(x[0] - 0.3).powi(2) - 0.5 * (x[1] + 0.2).powi(2)).exp()).unwrap();
        let r = reconstruct(&blocks, 2, &f).unwrap();
        let err = f.zip_with(&r, |a, b| a - b).unwrap().l2_norm();
        assert!(err < 1e-3 * f.l2_norm(), "{err}");
    }

    #[test]
    fn bound_ratios_flat_in_n() {
        let blocks = DyadicBlockSet::new(1, 4).unwrap();
        for (alpha, k) in [(0, 0), (1, 2)] {
            let r = kernel_bound_ratio(&blocks, alpha, k).unwrap();
            let ns: Vec<f64> = (0..r.len()).map(|n| n as f64).collect();
            let logs: Vec<f64> = r.iter().map(|v| v.ln()).collect();
            let s = slope(&ns[1..], &logs[1..]);
            assert!(s.abs() < 0.1, "alpha={alpha} k={k} ratios {r:?}");
        }
    }

    #[test]
    fn regularize_peak_and_mass() {
        let delta = 0.04;
        let lat = Lattice::new(&[-3.0], &[3.0], &[1201]).unwrap();
        let mu = ParticleMeasure::dirac(&[0.0]);
        let p = regularize(&mu, delta, &lat).unwrap();
        let peak = p.values()[600];
        assert!((peak - (2.0 * std::f64::consts::PI * delta).powf(-0.5)).abs() < 1e-12);
        let mu = ParticleMeasure::new(1, vec![-0.5, 0.2, 0.9], vec![0.2, 0.5, 0.3]).unwrap();
        let p = regularize(&mu, 0.01, &lat).unwrap();
        assert!((p.integrate() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn regularize_samples_close_to_density() {
        let mut rng = rng_stream(21, 0);
        let xs: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mu = ParticleMeasure::empirical(1, xs).unwrap();
        let lat = Lattice::new(&[-6.0], &[6.0], &[601]).unwrap();
        let p = regularize(&mu, 0.05, &lat).unwrap();
        let err = GridFunction::from_fn(lat, |x| (-x[0] * x[0] / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt())
            .unwrap()
            .zip_with(&p, |a, b| a - b)
            .unwrap()
            .l1_norm();
        assert!(err < 0.05, "{err}");
    }
}
