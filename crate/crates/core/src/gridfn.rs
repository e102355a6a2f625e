//! Shared numerical substrate.
//!
//! Lattice functions with product-trapezoid weights, finite differences,
//! tensor cubic sampling, a handful of quadrature rules, the rate fitter
//! used by every slope contract, and counter-based RNG streams.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Uniform rectangular lattice over a box, nodes on the corners.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    lo: Vec<f64>,
    hi: Vec<f64>,
    n: Vec<usize>,
    strides: Vec<usize>,
    weights: Vec<f64>,
}

impl Lattice {
    pub fn new(lo: &[f64], hi: &[f64], n: &[usize]) -> Result<Arc<Lattice>> {
        let d = lo.len();
        if d == 0 || hi.len() != d || n.len() != d {
            return Err(Error::InvalidGrid("corner/shape lengths differ".into()));
        }
        for a in 0..d {
            if !(lo[a].is_finite() && hi[a].is_finite() && hi[a] > lo[a]) {
                return Err(Error::InvalidGrid(format!("axis {a}: need lo < hi")));
            }
            if n[a] < 2 {
                return Err(Error::InvalidGrid(format!("axis {a}: need >= 2 points")));
            }
        }
        let mut strides = vec![1usize; d];
        for a in (0..d.saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * n[a + 1];
        }
        let len: usize = n.iter().product();
        let axis_w: Vec<Vec<f64>> = (0..d)
            .map(|a| {
                let h = (hi[a] - lo[a]) / (n[a] - 1) as f64;
                (0..n[a])
                    .map(|i| if i == 0 || i == n[a] - 1 { 0.5 * h } else { h })
                    .collect()
            })
            .collect();
        let mut weights = vec![1.0; len];
        for (flat, w) in weights.iter_mut().enumerate() {
            let mut rem = flat;
            for a in 0..d {
                let i = rem / strides[a];
                rem %= strides[a];
                *w *= axis_w[a][i];
            }
        }
        Ok(Arc::new(Lattice { lo: lo.to_vec(), hi: hi.to_vec(), n: n.to_vec(), strides, weights }))
    }

    /// Lattice whose nodes sit at cell midpoints of `[lo, hi]` split into `cells` cells.
    pub fn midpoint(lo: &[f64], hi: &[f64], cells: &[usize]) -> Result<Arc<Lattice>> {
        let d = lo.len();
        let mut l = Vec::with_capacity(d);
        let mut h = Vec::with_capacity(d);
        for a in 0..d {
            let s = (hi[a] - lo[a]) / cells[a] as f64;
            l.push(lo[a] + 0.5 * s);
            h.push(hi[a] - 0.5 * s);
        }
        Lattice::new(&l, &h, cells)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }
    pub fn len(&self) -> usize {
        self.weights.len()
    }
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
    pub fn shape(&self) -> &[usize] {
        &self.n
    }
    pub fn lo(&self) -> &[f64] {
        &self.lo
    }
    pub fn hi(&self) -> &[f64] {
        &self.hi
    }
    pub fn strides(&self) -> &[usize] {
        &self.strides
    }
    pub fn spacing(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / (self.n[axis] - 1) as f64
    }
    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        self.lo[axis] + i as f64 * self.spacing(axis)
    }
    pub fn coords(&self, axis: usize) -> Vec<f64> {
        (0..self.n[axis]).map(|i| self.coord(axis, i)).collect()
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.hi[a] - self.lo[a]).product()
    }

    /// Per-axis lattice index of a flat index.
    pub fn index_of(&self, flat: usize, out: &mut [usize]) {
        let mut rem = flat;
        for a in 0..self.dim() {
            out[a] = rem / self.strides[a];
            rem %= self.strides[a];
        }
    }

    pub fn point(&self, flat: usize, out: &mut [f64]) {
        let mut rem = flat;
        for a in 0..self.dim() {
            let i = rem / self.strides[a];
            rem %= self.strides[a];
            out[a] = self.coord(a, i);
        }
    }

    /// All lattice points, flattened row-major (`len * dim`).
    pub fn points(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; self.len() * d];
        for (flat, chunk) in out.chunks_mut(d).enumerate() {
            self.point(flat, chunk);
        }
        out
    }

    /// Quadrature weights with `buffer[a]` nodes at both ends of axis `a` zeroed.
    pub fn buffered_weights(&self, buffer: &[usize]) -> Vec<f64> {
        let d = self.dim();
        let mut idx = vec![0usize; d];
        let mut w = self.weights.clone();
        for (flat, wi) in w.iter_mut().enumerate() {
            self.index_of(flat, &mut idx);
            for a in 0..d {
                if idx[a] < buffer[a] || idx[a] + buffer[a] >= self.n[a] {
                    *wi = 0.0;
                    break;
                }
            }
        }
        w
    }
}

/// Real function sampled on a [`Lattice`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    lattice: Arc<Lattice>,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(lattice: Arc<Lattice>, values: Vec<f64>) -> Result<Self> {
        if values.len() != lattice.len() {
            return Err(Error::InvalidGrid(format!(
                "{} values for {} nodes",
                values.len(),
                lattice.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid(format!("value {i} is not finite")));
        }
        Ok(GridFunction { lattice, values })
    }

    pub fn from_fn(lattice: Arc<Lattice>, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let d = lattice.dim();
        let mut x = vec![0.0; d];
        let values = (0..lattice.len())
            .map(|i| {
                lattice.point(i, &mut x);
                f(&x)
            })
            .collect();
        GridFunction::new(lattice, values)
    }

    pub fn zeros(lattice: Arc<Lattice>) -> Self {
        let n = lattice.len();
        GridFunction { lattice, values: vec![0.0; n] }
    }

    pub fn lattice(&self) -> &Arc<Lattice> {
        &self.lattice
    }
    pub fn dim(&self) -> usize {
        self.lattice.dim()
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        GridFunction::new(self.lattice.clone(), values)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        GridFunction { lattice: self.lattice.clone(), values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_with(&self, other: &GridFunction, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.same_lattice(other)?;
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Ok(GridFunction { lattice: self.lattice.clone(), values })
    }

    fn same_lattice(&self, other: &GridFunction) -> Result<()> {
        if Arc::ptr_eq(&self.lattice, &other.lattice) || *self.lattice == *other.lattice {
            Ok(())
        } else {
            Err(Error::InvalidGrid("functions live on different lattices".into()))
        }
    }

    pub fn integrate(&self) -> f64 {
        self.values.iter().zip(self.lattice.weights()).map(|(v, w)| v * w).sum()
    }

    pub fn inner(&self, other: &GridFunction) -> Result<f64> {
        self.same_lattice(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .zip(self.lattice.weights())
            .map(|((a, b), w)| a * b * w)
            .sum())
    }

    pub fn l1_norm(&self) -> f64 {
        self.values.iter().zip(self.lattice.weights()).map(|(v, w)| v.abs() * w).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().zip(self.lattice.weights()).map(|(v, w)| v * v * w).sum::<f64>().sqrt()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Partial derivative `d^alpha` by second-order finite differences.
    ///
    /// Along an axis, order `j` applies the three-point second difference
    /// `j / 2` times, preceded by one central first difference when `j` is odd.
    /// Box edges use one-sided second-order stencils.
    pub fn derivative(&self, alpha: &[usize]) -> Result<GridFunction> {
        let d = self.dim();
        if alpha.len() != d {
            return Err(Error::DimensionMismatch(alpha.len(), d));
        }
        let mut vals = self.values.clone();
        for (axis, &order) in alpha.iter().enumerate() {
            if order == 0 {
                continue;
            }
            let n = self.lattice.shape()[axis];
            if n < 2 * order + 3 || n < 4 {
                return Err(Error::GridTooCoarse(format!(
                    "axis {axis} has {n} points, order {order} needs {}",
                    (2 * order + 3).max(4)
                )));
            }
            let h = self.lattice.spacing(axis);
            if order % 2 == 1 {
                vals = self.axis_pass(&vals, axis, h, false);
            }
            for _ in 0..order / 2 {
                vals = self.axis_pass(&vals, axis, h, true);
            }
        }
        GridFunction::new(self.lattice.clone(), vals)
    }

    fn axis_pass(&self, vals: &[f64], axis: usize, h: f64, second: bool) -> Vec<f64> {
        let lat = &self.lattice;
        let n = lat.shape()[axis];
        let stride = lat.strides()[axis];
        let mut out = vec![0.0; vals.len()];
        let outer = vals.len() / n;
        let mut buf = vec![0.0; n];
        for line in 0..outer {
            // start of the line: flat index with the axis coordinate zero
            let base = (line / stride) * stride * n + line % stride;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = vals[base + i * stride];
            }
            for i in 0..n {
                let v = if second {
                    let h2 = h * h;
                    if i == 0 {
                        (2.0 * buf[0] - 5.0 * buf[1] + 4.0 * buf[2] - buf[3]) / h2
                    } else if i == n - 1 {
                        (2.0 * buf[n - 1] - 5.0 * buf[n - 2] + 4.0 * buf[n - 3] - buf[n - 4]) / h2
                    } else {
                        (buf[i + 1] - 2.0 * buf[i] + buf[i - 1]) / h2
                    }
                } else if i == 0 {
                    (-3.0 * buf[0] + 4.0 * buf[1] - buf[2]) / (2.0 * h)
                } else if i == n - 1 {
                    (3.0 * buf[n - 1] - 4.0 * buf[n - 2] + buf[n - 3]) / (2.0 * h)
                } else {
                    (buf[i + 1] - buf[i - 1]) / (2.0 * h)
                };
                out[base + i * stride] = v;
            }
        }
        out
    }

    /// Tensor cubic Lagrange interpolation; zero outside the box.
    pub fn sample(&self, x: &[f64]) -> f64 {
        let lat = &self.lattice;
        let d = lat.dim();
        let mut base = vec![0usize; d];
        let mut wts = vec![[0.0f64; 4]; d];
        for a in 0..d {
            let n = lat.shape()[a];
            let h = lat.spacing(a);
            let s = (x[a] - lat.lo()[a]) / h;
            if !(s >= 0.0 && s <= (n - 1) as f64) {
                return 0.0;
            }
            let i0 = (s.floor() as isize - 1).clamp(0, n as isize - 4) as usize;
            let t = s - i0 as f64;
            base[a] = i0;
            for k in 0..4 {
                let mut l = 1.0;
                for m in 0..4 {
                    if m != k {
                        l *= (t - m as f64) / (k as f64 - m as f64);
                    }
                }
                wts[a][k] = l;
            }
        }
        let total = 4usize.pow(d as u32);
        let mut acc = 0.0;
        for c in 0..total {
            let mut rem = c;
            let mut flat = 0;
            let mut w = 1.0;
            for a in 0..d {
                let k = rem % 4;
                rem /= 4;
                flat += (base[a] + k) * lat.strides()[a];
                w *= wts[a][k];
            }
            acc += w * self.values[flat];
        }
        acc
    }
}

/// All multi-indices `alpha` in `d` variables with `|alpha| <= k`, graded order.
pub fn multi_indices(d: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for total in 0..=k {
        let mut cur = vec![0usize; d];
        fill_level(&mut out, &mut cur, 0, total);
    }
    out
}

/// Multi-indices with `|alpha| == k` exactly.
pub fn multi_indices_exact(d: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = vec![0usize; d];
    fill_level(&mut out, &mut cur, 0, k);
    out
}

fn fill_level(out: &mut Vec<Vec<usize>>, cur: &mut Vec<usize>, pos: usize, left: usize) {
    if pos + 1 == cur.len() {
        cur[pos] = left;
        out.push(cur.clone());
        return;
    }
    for v in (0..=left).rev() {
        cur[pos] = v;
        fill_level(out, cur, pos + 1, left - v);
    }
    cur[pos] = 0;
}

/// Smooth step `S(u) = s(u) / (s(u) + s(1 - u))`, `s(u) = exp(-1/u)` for `u > 0`.
pub fn smooth_step(u: f64) -> f64 {
    if u <= 0.0 {
        return 0.0;
    }
    if u >= 1.0 {
        return 1.0;
    }
    let a = (-1.0 / u).exp();
    let b = (-1.0 / (1.0 - u)).exp();
    a / (a + b)
}

/// Derivative of [`smooth_step`].
pub fn smooth_step_deriv(u: f64) -> f64 {
    if u <= 0.0 || u >= 1.0 {
        return 0.0;
    }
    // S = 1 / (1 + exp(g)), g = 1/u - 1/(1-u), so S' = -g' / (4 cosh^2(g/2))
    let g = 1.0 / u - 1.0 / (1.0 - u);
    let dg = -1.0 / (u * u) - 1.0 / ((1.0 - u) * (1.0 - u));
    let c = (0.5 * g).cosh();
    -dg / (4.0 * c * c)
}

/// Radial plateau: 1 for `r <= r_in`, 0 for `r >= r_out`, smooth in between.
pub fn plateau(r: f64, r_in: f64, r_out: f64) -> f64 {
    1.0 - smooth_step((r - r_in) / (r_out - r_in))
}

/// Radial derivative of [`plateau`].
pub fn plateau_deriv(r: f64, r_in: f64, r_out: f64) -> f64 {
    -smooth_step_deriv((r - r_in) / (r_out - r_in)) / (r_out - r_in)
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (1.0, 0.0);
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = ((2 * j + 1) as f64 * z * p2 - j as f64 * p3) / (j + 1) as f64;
            }
            dp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Composite Gauss-Legendre rule on `[a, b]` with `panels` panels of `order` nodes.
pub fn composite_gauss(a: f64, b: f64, panels: usize, order: usize) -> (Vec<f64>, Vec<f64>) {
    let (gx, gw) = gauss_legendre(order);
    let h = (b - a) / panels as f64;
    let mut x = Vec::with_capacity(panels * order);
    let mut w = Vec::with_capacity(panels * order);
    for p in 0..panels {
        let c = a + (p as f64 + 0.5) * h;
        for (xi, wi) in gx.iter().zip(&gw) {
            x.push(c + 0.5 * h * xi);
            w.push(0.5 * h * wi);
        }
    }
    (x, w)
}

const GK_X: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];
const GK_WK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const GK_WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

fn gk15(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = GK_WK[7] * fc;
    let mut g = GK_WG[3] * fc;
    for i in 0..7 {
        let dx = h * GK_X[i];
        let s = f(c - dx) + f(c + dx);
        k += GK_WK[i] * s;
        if i % 2 == 1 {
            g += GK_WG[i / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Adaptive Gauss-Kronrod quadrature of `f` on `[a, b]`.
pub fn integrate_adaptive(f: &dyn Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64) -> f64 {
    let mut stack = vec![(a, b)];
    let mut total = 0.0;
    let mut pieces = Vec::new();
    let (whole, _) = gk15(f, a, b);
    let scale = whole.abs().max(1e-300);
    let mut evals = 0usize;
    while let Some((l, r)) = stack.pop() {
        let (v, err) = gk15(f, l, r);
        evals += 1;
        let width = (r - l) / (b - a);
        if err <= rel_tol * scale * width.max(1e-6) || evals > 20_000 || (r - l) < 1e-14 * (b - a).abs() {
            pieces.push(v);
        } else {
            let m = 0.5 * (l + r);
            stack.push((l, m));
            stack.push((m, r));
        }
    }
    pieces.sort_by(|x, y| x.abs().partial_cmp(&y.abs()).unwrap_or(std::cmp::Ordering::Equal));
    for p in pieces {
        total += p;
    }
    total
}

/// Adaptive quadrature on `[a, inf)` through `t = a + u / (1 - u)`.
pub fn integrate_semi_infinite(f: &dyn Fn(f64) -> f64, a: f64, rel_tol: f64) -> f64 {
    let g = |u: f64| {
        if u >= 1.0 {
            return 0.0;
        }
        let om = 1.0 - u;
        let v = f(a + u / om) / (om * om);
        if v.is_finite() {
            v
        } else {
            0.0
        }
    };
    integrate_adaptive(&g, 0.0, 1.0, rel_tol)
}

/// Result of a log-log rate fit.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RateFit {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Slope of `ln y` on `ln x`.
    pub exponent: f64,
    /// Leave-one-out (jackknife) 95% half width.
    pub exponent_ci: f64,
    /// Polynomial exponent of the joint fit on `(ln x, ln|ln x|)`.
    pub joint_exponent: f64,
    pub joint_exponent_ci: f64,
    /// Log-power of the joint fit.
    pub log_power: f64,
    pub log_power_ci: f64,
    /// RMS residual of the power-only fit.
    pub residual_rms: f64,
}

fn lstsq(cols: &[Vec<f64>], y: &[f64]) -> Option<Vec<f64>> {
    let p = cols.len();
    let n = y.len();
    let a = nalgebra::DMatrix::from_fn(n, p, |i, j| cols[j][i]);
    let b = nalgebra::DVector::from_row_slice(y);
    let svd = a.svd(true, true);
    let sol = svd.solve(&b, 1e-13).ok()?;
    Some(sol.iter().copied().collect())
}

/// Least squares of `ln y` on `ln x` and on `(ln x, ln|ln x|)`.
pub fn fit_rate(x: &[f64], y: &[f64]) -> Result<RateFit> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument("x and y lengths differ".into()));
    }
    if x.len() < 4 {
        return Err(Error::InvalidArgument("need at least 4 points".into()));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::NonPositiveData);
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let llx: Vec<f64> = lx.iter().map(|v| v.abs().max(1e-300).ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = x.len();
    let ones = vec![1.0; n];

    let simple = |idx: &[usize]| -> Option<Vec<f64>> {
        let c0: Vec<f64> = idx.iter().map(|_| 1.0).collect();
        let c1: Vec<f64> = idx.iter().map(|&i| lx[i]).collect();
        let yy: Vec<f64> = idx.iter().map(|&i| ly[i]).collect();
        lstsq(&[c0, c1], &yy)
    };
    let joint = |idx: &[usize]| -> Option<Vec<f64>> {
        let c0: Vec<f64> = idx.iter().map(|_| 1.0).collect();
        let c1: Vec<f64> = idx.iter().map(|&i| lx[i]).collect();
        let c2: Vec<f64> = idx.iter().map(|&i| llx[i]).collect();
        let yy: Vec<f64> = idx.iter().map(|&i| ly[i]).collect();
        lstsq(&[c0, c1, c2], &yy)
    };
    let all: Vec<usize> = (0..n).collect();
    let s = simple(&all).ok_or(Error::NonPositiveData)?;
    let j = joint(&all).ok_or(Error::NonPositiveData)?;
    let resid: f64 = (0..n).map(|i| (ly[i] - s[0] * ones[i] - s[1] * lx[i]).powi(2)).sum::<f64>() / n as f64;

    let mut loo_s = Vec::new();
    let mut loo_j = Vec::new();
    let mut loo_l = Vec::new();
    for drop in 0..n {
        let idx: Vec<usize> = (0..n).filter(|&i| i != drop).collect();
        if let Some(v) = simple(&idx) {
            loo_s.push(v[1]);
        }
        if idx.len() >= 4 {
            if let Some(v) = joint(&idx) {
                loo_j.push(v[1]);
                loo_l.push(v[2]);
            }
        }
    }
    let jack = |v: &[f64]| -> f64 {
        if v.len() < 2 {
            return f64::INFINITY;
        }
        let m = v.len() as f64;
        let mean = v.iter().sum::<f64>() / m;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() * (m - 1.0) / m;
        1.96 * var.sqrt()
    };
    Ok(RateFit {
        x: x.to_vec(),
        y: y.to_vec(),
        exponent: s[1],
        exponent_ci: jack(&loo_s),
        joint_exponent: j[1],
        joint_exponent_ci: jack(&loo_j),
        log_power: j[2],
        log_power_ci: jack(&loo_l),
        residual_rms: resid.sqrt(),
    })
}

/// Plain least-squares slope of `y` on `x`.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Deterministic counter-based generator for the stream `key` of `seed`.
///
/// ChaCha keystreams are indexed by (key, stream, block counter), so the draws
/// depend only on `(seed, key)` and never on scheduling.
pub fn rng_stream(seed: u64, key: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key);
    rng
}

/// Mix two identifiers into one stream key.
pub fn stream_key(a: u64, b: u64) -> u64 {
    let mut z = a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Kolmogorov-Smirnov statistic and asymptotic p-value against `cdf`.
pub fn ks_test(samples: &[f64], cdf: impl Fn(f64) -> f64) -> (f64, f64) {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = s.len() as f64;
    let mut d = 0.0f64;
    for (i, &v) in s.iter().enumerate() {
        let f = cdf(v);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let sq = n.sqrt();
    let lambda = (sq + 0.12 + 0.11 / sq) * d;
    let mut p = 0.0;
    for k in 1..200 {
        let term = 2.0 * (-1.0f64).powi(k - 1) * (-2.0 * (k as f64).powi(2) * lambda * lambda).exp();
        p += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    (d, p.clamp(0.0, 1.0))
}

/// Standard normal distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Mean and standard error of a sample.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, f64::INFINITY);
    }
    let var = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Geometric grid `start * ratio^i`, `i < count`.
pub fn geometric(start: f64, ratio: f64, count: usize) -> Vec<f64> {
    (0..count).map(|i| start * ratio.powi(i as i32)).collect()
}
