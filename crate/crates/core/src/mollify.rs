//! Compactly supported kernels with vanishing moments and the mollification rates.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::balance::TestDictionary;
use crate::gridfn::{composite_gauss, slope, GridFunction, Lattice};
use crate::young_orlicz::{weighted_sobolev_orlicz_norm, YoungFunction};
use crate::{Error, Result};

/// Minimum lattice nodes per kernel radius along each axis.
pub const MIN_NODES_PER_RADIUS: f64 = 6.0;

/// `phi(y) = p(|y|^2) chi(|y|)` on the unit ball with all moments `1 <= |alpha| <= M` vanishing.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperKernel {
    dim: usize,
    order: usize,
    /// Coefficients of `p` in powers of `|y|^2`.
    coeffs: Vec<f64>,
    condition: f64,
}

/// `exp(-1/(1 - r^2))` for `r < 1`, zero beyond.
#[inline]
pub fn bump(r: f64) -> f64 {
    if r >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - r * r)).exp()
    }
}

fn sphere_area(d: usize) -> f64 {
    match d {
        1 => 2.0,
        2 => 2.0 * std::f64::consts::PI,
        _ => 2.0 * std::f64::consts::PI.powf(d as f64 / 2.0) / statrs::function::gamma::gamma(d as f64 / 2.0),
    }
}

/// `int_0^1 r^j chi(r) dr` by composite Gauss-Legendre.
fn radial_moment(j: usize) -> f64 {
    let (x, w) = composite_gauss(0.0, 1.0, 64, 16);
    x.iter().zip(&w).map(|(r, wi)| wi * r.powi(j as i32) * bump(*r)).sum()
}

pub fn build_superkernel(d: usize, m: usize) -> Result<SuperKernel> {
    if !(1..=2).contains(&d) {
        return Err(Error::InvalidArgument(format!("super kernels for d <= 2, got {d}")));
    }
    if m > 12 {
        return Err(Error::InvalidArgument(format!("moment order {m} > 12")));
    }
    // odd moments vanish by symmetry; the even ones up to 2 * ceil(M/2) are imposed
    let deg = m.div_ceil(2);
    let n = deg + 1;
    let gram = DMatrix::from_fn(n, n, |j, i| radial_moment(2 * (i + j) + d - 1));
    let sv = gram.clone().svd(false, false).singular_values;
    let condition = sv.max() / sv.min();
    if !(condition < 1e12) {
        return Err(Error::SingularMomentSystem(condition));
    }
    let mut rhs = DVector::zeros(n);
    rhs[0] = 1.0 / sphere_area(d);
    let sol = gram.full_piv_lu().solve(&rhs).ok_or(Error::SingularMomentSystem(condition))?;
    Ok(SuperKernel { dim: d, order: m, coeffs: sol.iter().cloned().collect(), condition })
}

impl SuperKernel {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Moment order `M` requested at construction.
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Condition number of the moment system.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    #[inline]
    pub fn eval(&self, y: &[f64]) -> f64 {
        let r2: f64 = y.iter().map(|v| v * v).sum();
        if r2 >= 1.0 {
            return 0.0;
        }
        let p = self.coeffs.iter().rev().fold(0.0, |acc, c| acc * r2 + c);
        p * bump(r2.sqrt())
    }

    /// `phi_delta(y) = delta^{-d} phi(y / delta)`.
    pub fn eval_scaled(&self, y: &[f64], delta: f64) -> f64 {
        let z: Vec<f64> = y.iter().map(|v| v / delta).collect();
        self.eval(&z) / delta.powi(self.dim as i32)
    }

    /// `int y^alpha phi(y) dy` by tensor Gauss-Legendre on `[-1, 1]^d`.
    pub fn moment(&self, alpha: &[usize]) -> f64 {
        let (x, w) = composite_gauss(-1.0, 1.0, 48, 16);
        match self.dim {
            1 => x.iter().zip(&w).map(|(t, wi)| wi * t.powi(alpha[0] as i32) * self.eval(&[*t])).sum(),
            _ => {
                let mut acc = 0.0;
                for (a, wa) in x.iter().zip(&w) {
                    for (b, wb) in x.iter().zip(&w) {
                        acc += wa * wb * a.powi(alpha[0] as i32) * b.powi(alpha[1] as i32) * self.eval(&[*a, *b]);
                    }
                }
                acc
            }
        }
    }
}

/// `f * phi_delta` by direct quadrature on the lattice (`f` extended by zero).
///
/// The kernel polynomial is re-solved on the lattice stencil: unit discrete mass and vanishing
/// discrete radial moments, so polynomials of degree `<= 2 ceil(M/2) + 1` are reproduced in `d = 1`.
pub fn mollify(f: &GridFunction, kern: &SuperKernel, delta: f64) -> Result<GridFunction> {
    let lat = f.lattice();
    let d = lat.dim();
    if d != kern.dim() {
        return Err(Error::DimensionMismatch(d, kern.dim()));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidArgument(format!("delta = {delta} outside (0, 1]")));
    }
    let mut reach = Vec::with_capacity(d);
    for a in 0..d {
        let h = lat.spacing(a);
        if delta / h < MIN_NODES_PER_RADIUS {
            return Err(Error::GridTooCoarse(format!("{:.1} nodes per kernel radius on axis {a}", delta / h)));
        }
        if 2.0 * delta >= lat.hi()[a] - lat.lo()[a] {
            return Err(Error::MarginTooSmall);
        }
        reach.push((delta / h).floor() as isize);
    }
    let h: Vec<f64> = (0..d).map(|a| lat.spacing(a)).collect();
    // stencil offsets and weights
    let mut offsets: Vec<Vec<isize>> = vec![vec![]];
    for &r in &reach {
        offsets = offsets.into_iter().flat_map(|o| (-r..=r).map(move |i| [o.clone(), vec![i]].concat())).collect();
    }
    let mut stencil: Vec<(Vec<isize>, f64)> = Vec::new();
    let mut radii: Vec<f64> = Vec::new();
    for o in offsets {
        let r2: f64 = o.iter().zip(&h).map(|(&i, hi)| (i as f64 * hi / delta).powi(2)).sum();
        if r2 < 1.0 {
            radii.push(r2);
            stencil.push((o, 0.0));
        }
    }
    // the polynomial is re-solved on the stencil so the lattice moments vanish
    let n = kern.coeffs().len();
    let gram = DMatrix::from_fn(n, n, |j, i| radii.iter().map(|&r2| r2.powi((i + j) as i32) * bump(r2.sqrt())).sum::<f64>());
    let mut rhs = DVector::zeros(n);
    rhs[0] = 1.0;
    let c = gram.full_piv_lu().solve(&rhs).ok_or(Error::SingularMomentSystem(f64::INFINITY))?;
    for ((_, w), &r2) in stencil.iter_mut().zip(&radii) {
        *w = c.iter().rev().fold(0.0, |acc, ci| acc * r2 + ci) * bump(r2.sqrt());
    }
    let shape = lat.shape().to_vec();
    let strides = lat.strides().to_vec();
    let vals = f.values();
    let out: Vec<f64> = (0..lat.len())
        .into_par_iter()
        .map(|flat| {
            let mut idx = vec![0usize; d];
            lat.index_of(flat, &mut idx);
            let mut acc = 0.0;
            'outer: for (o, w) in &stencil {
                let mut src = 0usize;
                for a in 0..d {
                    // f(x - y)
                    let j = idx[a] as isize - o[a];
                    if j < 0 || j >= shape[a] as isize {
                        continue 'outer;
                    }
                    src += j as usize * strides[a];
                }
                acc += w * vals[src];
            }
            acc
        })
        .collect();
    f.with_values(out)
}

/// Indices of lattice nodes at distance `>= delta` from the boundary on every axis.
pub fn interior_mask(lat: &Arc<Lattice>, delta: f64) -> Vec<bool> {
    let d = lat.dim();
    let mut x = vec![0.0; d];
    (0..lat.len())
        .map(|i| {
            lat.point(i, &mut x);
            (0..d).all(|a| x[a] - lat.lo()[a] >= delta - 1e-12 && lat.hi()[a] - x[a] >= delta - 1e-12)
        })
        .collect()
}

/// A measured rate: values along a `delta` sweep and their log-log slope.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RateCheck {
    pub deltas: Vec<f64>,
    pub values: Vec<f64>,
    /// Slope of `ln value` against `ln delta`.
    pub slope: f64,
}

fn log_slope(deltas: &[f64], values: &[f64]) -> Result<f64> {
    if deltas.len() < 4 {
        return Err(Error::InvalidArgument("rate sweeps need >= 4 deltas".into()));
    }
    if values.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::NonPositiveData);
    }
    let x: Vec<f64> = deltas.iter().map(|v| v.ln()).collect();
    let y: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    Ok(slope(&x, &y))
}

/// `delta -> d_k(f, f_delta)` estimated from below by the dictionary; slope contract `>= q + k - 0.3`.
///
/// `||f||_{q,l,(e)}` is recorded as the first value's scale only; the rate is what is checked.
pub fn rate_kk2(
    f: &GridFunction,
    kern: &SuperKernel,
    q: usize,
    k: usize,
    dict: &TestDictionary,
    deltas: &[f64],
) -> Result<RateCheck> {
    if kern.order() < q + k {
        return Err(Error::InvalidArgument(format!("kernel order {} < q + k = {}", kern.order(), q + k)));
    }
    let values = deltas
        .iter()
        .map(|&dl| {
            let g = mollify(f, kern, dl)?;
            let diff = f.zip_with(&g, |a, b| a - b)?;
            dict.dual_norm(&diff, k)
        })
        .collect::<Result<Vec<f64>>>()?;
    let slope = log_slope(deltas, &values)?;
    Ok(RateCheck { deltas: deltas.to_vec(), values, slope })
}

/// `delta -> ||f_delta||_{n,l,(e)}`; slope contract `>= -(n - q) - 0.3`.
pub fn rate_kk3(
    f: &GridFunction,
    kern: &SuperKernel,
    n: usize,
    q: usize,
    l: usize,
    e: &YoungFunction,
    deltas: &[f64],
) -> Result<RateCheck> {
    if n < q {
        return Err(Error::InvalidArgument(format!("n = {n} < q = {q}")));
    }
    let values = deltas
        .iter()
        .map(|&dl| weighted_sobolev_orlicz_norm(&mollify(f, kern, dl)?, n, l, e))
        .collect::<Result<Vec<f64>>>()?;
    let slope = log_slope(deltas, &values)?;
    Ok(RateCheck { deltas: deltas.to_vec(), values, slope })
}
