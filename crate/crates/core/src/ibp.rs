//! Integration-by-parts weights for explicit Gaussian models and the density
//! representation through the Poisson kernel.
//!
//! Weights follow the convention `E[d_alpha f(F)] = E[f(F) H_alpha]`, so for
//! `F ~ N(0, 1)` the first two weights are `F` and `F^2 - 1`. The signed weights
//! in the `(-1)^{|alpha|}` convention are `(-1)^{|alpha|} H_alpha`; norms do not see the sign.
//!
//! With `psi` a radial plateau (1 on `B_1`, 0 off `B_2`) the density is
//!
//! ```text
//! p(x) = sum_i E[ dQ_i(X - x) (psi(X - x) H_i - (d_i psi)(X - x)) ]
//! ```

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::function::gamma::gamma;

use crate::balance::ParticleMeasure;
use crate::gridfn::{mean_se, multi_indices, plateau, plateau_deriv, rng_stream};
use crate::{Error, Result};

const BLOCK: usize = 4096;

/// Polynomial in `u` stored as exponent vector to coefficient.
#[derive(Debug, Clone, Default, PartialEq)]
struct Poly(BTreeMap<Vec<u32>, f64>);

impl Poly {
    fn one(d: usize) -> Self {
        let mut m = BTreeMap::new();
        m.insert(vec![0; d], 1.0);
        Poly(m)
    }

    fn add(&mut self, e: Vec<u32>, c: f64) {
        *self.0.entry(e).or_insert(0.0) += c;
    }

    fn eval(&self, u: &[f64]) -> f64 {
        self.0
            .iter()
            .map(|(e, c)| c * e.iter().zip(u).map(|(&k, &v)| v.powi(k as i32)).product::<f64>())
            .sum()
    }
}

/// The weight polynomials `H_alpha(u)`, `u = Sigma^{-1}(F - mean)`, for `|alpha| <= m`.
///
/// `H_{alpha + e_i} = H_alpha u_i - sum_j P_ij dH_alpha/du_j` with `P = Sigma^{-1}`.
#[derive(Debug, Clone)]
pub struct GaussianWeights {
    dim: usize,
    order: usize,
    precision: DMatrix<f64>,
    chol: DMatrix<f64>,
    polys: Vec<(Vec<usize>, Poly)>,
}

impl GaussianWeights {
    pub fn new(cov: &DMatrix<f64>, order: usize) -> Result<Self> {
        let d = cov.nrows();
        if d == 0 || cov.ncols() != d {
            return Err(Error::DimensionMismatch(cov.nrows(), cov.ncols()));
        }
        let sym = (cov + cov.transpose()) * 0.5;
        let eig = sym.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&l| !(l > 1e-12)) {
            return Err(Error::SingularCovariance);
        }
        let chol = sym.clone().cholesky().ok_or(Error::SingularCovariance)?;
        let precision = chol.inverse();
        let mut polys: Vec<(Vec<usize>, Poly)> = Vec::new();
        let mut index: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        for alpha in multi_indices(d, order) {
            let p = match alpha.iter().position(|&a| a > 0) {
                None => Poly::one(d),
                Some(i) => {
                    let mut prev_a = alpha.clone();
                    prev_a[i] -= 1;
                    let prev = &polys[index[&prev_a]].1;
                    let mut out = Poly::default();
                    for (e, &c) in &prev.0 {
                        let mut e2 = e.clone();
                        e2[i] += 1;
                        out.add(e2, c);
                        for j in 0..d {
                            if e[j] > 0 && precision[(i, j)] != 0.0 {
                                let mut e3 = e.clone();
                                e3[j] -= 1;
                                out.add(e3, -precision[(i, j)] * c * e[j] as f64);
                            }
                        }
                    }
                    out.0.retain(|_, c| *c != 0.0);
                    out
                }
            };
            index.insert(alpha.clone(), polys.len());
            polys.push((alpha, p));
        }
        Ok(GaussianWeights { dim: d, order, precision, chol: chol.l(), polys })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alphas(&self) -> impl Iterator<Item = &Vec<usize>> {
        self.polys.iter().map(|p| &p.0)
    }

    /// `u = Sigma^{-1}(y - mean)`.
    pub fn score(&self, y: &[f64], mean: &[f64]) -> Vec<f64> {
        let r = DVector::from_iterator(self.dim, y.iter().zip(mean).map(|(a, b)| a - b));
        (&self.precision * r).iter().cloned().collect()
    }

    /// All weights at `y`, in the order of [`GaussianWeights::alphas`].
    pub fn eval(&self, y: &[f64], mean: &[f64]) -> Vec<f64> {
        let u = self.score(y, mean);
        self.polys.iter().map(|(_, p)| p.eval(&u)).collect()
    }

    /// `mean + L z`.
    pub fn sample_from(&self, mean: &[f64], z: &[f64]) -> Vec<f64> {
        let v = &self.chol * DVector::from_column_slice(z);
        mean.iter().zip(v.iter()).map(|(a, b)| a + b).collect()
    }
}

/// Particles with IBP weight samples for each `|alpha| <= order`.
#[derive(Debug, Clone, PartialEq)]
pub struct IbpSample {
    pub dim: usize,
    pub positions: Vec<f64>,
    pub weights: BTreeMap<Vec<usize>, Vec<f64>>,
    pub order: usize,
    pub tag: String,
}

impl IbpSample {
    pub fn len(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weight(&self, alpha: &[usize]) -> Result<&[f64]> {
        self.weights.get(alpha).map(|v| v.as_slice()).ok_or_else(|| Error::WeightsMissing(alpha.to_vec()))
    }

    /// Assemble from per-particle weight rows that share the alpha order of `alphas`.
    pub fn from_rows(dim: usize, positions: Vec<f64>, alphas: &[Vec<usize>], rows: &[Vec<f64>], order: usize, tag: &str) -> Self {
        let mut weights = BTreeMap::new();
        for (k, a) in alphas.iter().enumerate() {
            weights.insert(a.clone(), rows.iter().map(|r| r[k]).collect());
        }
        IbpSample { dim, positions, weights, order, tag: tag.to_string() }
    }

    /// Equal-weight empirical measure carrying the nonzero-order weights.
    pub fn to_measure(&self) -> Result<ParticleMeasure> {
        let mut mu = ParticleMeasure::empirical(self.dim, self.positions.clone())?;
        for (a, h) in &self.weights {
            if a.iter().any(|&v| v > 0) {
                mu = mu.with_ibp_weights(a.clone(), h.clone())?;
            }
        }
        Ok(mu)
    }
}

/// Weights `H_alpha` for `F ~ N(mean, cov)`, `|alpha| <= order`.
pub fn gaussian_ibp_weights(mean: &[f64], cov: &DMatrix<f64>, order: usize, n_samples: usize, seed: u64) -> Result<IbpSample> {
    gaussian_mixture_ibp_weights(&[(1.0, mean.to_vec(), cov.clone())], order, n_samples, seed)
}

/// Mixture sampling with the weights of the drawn component (a conditional IBP formula).
pub fn gaussian_mixture_ibp_weights(
    components: &[(f64, Vec<f64>, DMatrix<f64>)],
    order: usize,
    n_samples: usize,
    seed: u64,
) -> Result<IbpSample> {
    if components.is_empty() {
        return Err(Error::InvalidArgument("empty mixture".into()));
    }
    let d = components[0].1.len();
    let gw: Vec<GaussianWeights> = components
        .iter()
        .map(|(_, m, c)| {
            if m.len() != d || c.nrows() != d {
                return Err(Error::DimensionMismatch(m.len(), d));
            }
            GaussianWeights::new(c, order)
        })
        .collect::<Result<_>>()?;
    let total: f64 = components.iter().map(|c| c.0).sum();
    if !(total > 0.0) || components.iter().any(|c| c.0 < 0.0) {
        return Err(Error::InvalidArgument("mixture weights must be nonnegative".into()));
    }
    let mut cum = Vec::with_capacity(components.len());
    let mut acc = 0.0;
    for c in components {
        acc += c.0 / total;
        cum.push(acc);
    }
    let alphas: Vec<Vec<usize>> = gw[0].alphas().cloned().collect();
    let blocks: Vec<(Vec<f64>, Vec<Vec<f64>>)> = (0..n_samples.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            use rand::Rng;
            let mut rng = rng_stream(seed, b as u64);
            let lo = b * BLOCK;
            let hi = (lo + BLOCK).min(n_samples);
            let mut pos = Vec::with_capacity((hi - lo) * d);
            let mut rows = Vec::with_capacity(hi - lo);
            let mut z = vec![0.0; d];
            for _ in lo..hi {
                let c = if cum.len() == 1 {
                    0
                } else {
                    let u: f64 = rng.gen();
                    cum.iter().position(|&t| u < t).unwrap_or(cum.len() - 1)
                };
                for v in z.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                let x = gw[c].sample_from(&components[c].1, &z);
                rows.push(gw[c].eval(&x, &components[c].1));
                pos.extend(x);
            }
            (pos, rows)
        })
        .collect();
    let mut positions = Vec::with_capacity(n_samples * d);
    let mut rows = Vec::with_capacity(n_samples);
    for (p, r) in blocks {
        positions.extend(p);
        rows.extend(r);
    }
    let tag = if components.len() == 1 { "gaussian" } else { "gaussian-mixture" };
    Ok(IbpSample::from_rows(d, positions, &alphas, &rows, order, tag))
}

/// One axis of a smoke-test function: derivatives of every order in closed form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Axis1 {
    Cos { freq: f64, phase: f64 },
    Gauss { center: f64, width: f64 },
}

/// Probabilists' Hermite polynomial `He_n`.
pub fn hermite_he(n: usize, x: f64) -> f64 {
    let (mut a, mut b) = (1.0, x);
    if n == 0 {
        return 1.0;
    }
    for k in 1..n {
        let c = x * b - k as f64 * a;
        a = b;
        b = c;
    }
    b
}

impl Axis1 {
    pub fn deriv(&self, n: usize, t: f64) -> f64 {
        match *self {
            Axis1::Cos { freq, phase } => freq.powi(n as i32) * (freq * t + phase + n as f64 * std::f64::consts::FRAC_PI_2).cos(),
            Axis1::Gauss { center, width } => {
                let u = (t - center) / width;
                let sgn = if n % 2 == 0 { 1.0 } else { -1.0 };
                sgn * hermite_he(n, u) * (-0.5 * u * u).exp() / width.powi(n as i32)
            }
        }
    }
}

/// Product test function `f(x) = prod_i f_i(x_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmokeFn(pub Vec<Axis1>);

impl SmokeFn {
    pub fn deriv(&self, alpha: &[usize], x: &[f64]) -> f64 {
        self.0.iter().zip(alpha).zip(x).map(|((f, &a), &t)| f.deriv(a, t)).product()
    }

    /// The fixed five-function dictionary.
    pub fn dictionary(d: usize) -> Vec<SmokeFn> {
        let mk = |g: &dyn Fn(usize) -> Axis1| SmokeFn((0..d).map(g).collect());
        vec![
            mk(&|i| Axis1::Cos { freq: 1.0, phase: 0.3 * i as f64 }),
            mk(&|i| Axis1::Cos { freq: 0.5 + 0.25 * i as f64, phase: 1.0 }),
            mk(&|_| Axis1::Gauss { center: 0.0, width: 1.0 }),
            mk(&|i| Axis1::Gauss { center: 0.5 - i as f64, width: 2.0 }),
            mk(&|i| if i == 0 { Axis1::Cos { freq: 0.7, phase: 0.0 } } else { Axis1::Gauss { center: 0.0, width: 1.5 } }),
        ]
    }
}

/// One row of the IBP identity check.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct IdentityRow {
    pub alpha: Vec<usize>,
    pub function: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub se: f64,
}

impl IdentityRow {
    pub fn holds(&self, nse: f64) -> bool {
        (self.lhs - self.rhs).abs() <= nse * self.se + 1e-12 * (1.0 + self.lhs.abs())
    }
}

/// `E[d_alpha f(F)]` against `E[f(F) H_alpha]` for every weight and dictionary function.
pub fn ibp_identity(s: &IbpSample, funcs: &[SmokeFn]) -> Vec<IdentityRow> {
    let zero = vec![0; s.dim];
    let mut rows = Vec::new();
    for (alpha, h) in s.weights.iter().filter(|(a, _)| a.iter().any(|&v| v > 0)) {
        for (fi, f) in funcs.iter().enumerate() {
            let n = s.len();
            let mut l = Vec::with_capacity(n);
            let mut r = Vec::with_capacity(n);
            let mut diff = Vec::with_capacity(n);
            for i in 0..n {
                let x = s.point(i);
                let a = f.deriv(alpha, x);
                let b = f.deriv(&zero, x) * h[i];
                l.push(a);
                r.push(b);
                diff.push(a - b);
            }
            let (lhs, _) = mean_se(&l);
            let (rhs, _) = mean_se(&r);
            let (_, se) = mean_se(&diff);
            rows.push(IdentityRow { alpha: alpha.clone(), function: fi, lhs, rhs, se });
        }
    }
    rows
}

/// Measure-Sobolev quantities read off the weight moments.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SobolevNorm {
    pub m: usize,
    pub p: f64,
    /// `(1 + sum_{1<=|alpha|<=m} E|H_alpha|^p)^{1/p}`.
    pub norm_m: f64,
    /// Same with `m = 1`.
    pub norm_1: f64,
    /// `(d - 1) / (1 - d/p)`.
    pub k_dp: f64,
    /// `norm_1^{k_dp} norm_m`.
    pub c_mp: f64,
    /// `E|H_alpha|^p` with standard errors.
    pub moments: Vec<(Vec<usize>, f64, f64)>,
}

pub fn measure_sobolev_norm(s: &IbpSample, m: usize, p: f64) -> Result<SobolevNorm> {
    let d = s.dim as f64;
    if !(p > d) {
        return Err(Error::InvalidArgument(format!("p = {p} must exceed d = {d}")));
    }
    let mut moments = Vec::new();
    let (mut sum_m, mut sum_1) = (1.0, 1.0);
    for alpha in multi_indices(s.dim, m).into_iter().filter(|a| a.iter().any(|&v| v > 0)) {
        let h = s.weight(&alpha)?;
        let v: Vec<f64> = h.iter().map(|x| x.abs().powf(p)).collect();
        let (mean, se) = mean_se(&v);
        sum_m += mean;
        if alpha.iter().sum::<usize>() == 1 {
            sum_1 += mean;
        }
        moments.push((alpha, mean, se));
    }
    let norm_m = sum_m.powf(1.0 / p);
    let norm_1 = sum_1.powf(1.0 / p);
    let k_dp = (d - 1.0) / (1.0 - d / p);
    Ok(SobolevNorm { m, p, norm_m, norm_1, k_dp, c_mp: norm_1.powf(k_dp) * norm_m, moments })
}

/// `m_k(mu) = E(1 + |X|)^k` with its standard error.
pub fn moment_factor(s: &IbpSample, k: f64) -> (f64, f64) {
    let v: Vec<f64> = (0..s.len()).map(|i| (1.0 + norm(s.point(i))).powf(k)).collect();
    mean_se(&v)
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Area of the unit sphere in `R^d`.
pub fn sphere_area(d: usize) -> f64 {
    2.0 * std::f64::consts::PI.powf(d as f64 / 2.0) / gamma(d as f64 / 2.0)
}

/// `grad Q_d(x)` with `Laplace Q_d = delta_0` (`Q_1 = x_+`).
pub fn poisson_kernel_grad(d: usize, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != d || d == 0 {
        return Err(Error::DimensionMismatch(x.len(), d));
    }
    if d == 1 {
        return Ok(vec![if x[0] > 0.0 { 1.0 } else { 0.0 }]);
    }
    let r = norm(x);
    if r == 0.0 {
        return Err(Error::SingularPoint);
    }
    let c = 1.0 / (sphere_area(d) * r.powi(d as i32));
    Ok(x.iter().map(|v| c * v).collect())
}

/// Plateau radii for the localization `psi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsiRadius {
    pub inner: f64,
    pub outer: f64,
}

impl Default for PsiRadius {
    fn default() -> Self {
        PsiRadius { inner: 1.0, outer: 2.0 }
    }
}

/// Minimum number of particles in `B_outer(x)`.
pub const MIN_NEAR: usize = 100;

/// Density estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

/// Poisson-kernel density estimate at `x`.
pub fn mt_density(s: &IbpSample, x: &[f64], psi: PsiRadius) -> Result<Estimate> {
    let d = s.dim;
    if x.len() != d {
        return Err(Error::DimensionMismatch(x.len(), d));
    }
    let mut h = Vec::with_capacity(d);
    for i in 0..d {
        let mut a = vec![0; d];
        a[i] = 1;
        h.push(s.weight(&a)?);
    }
    let n = s.len();
    let mut near = 0usize;
    let mut vals = vec![0.0; n];
    let mut y = vec![0.0; d];
    for (j, val) in vals.iter_mut().enumerate() {
        let p = s.point(j);
        for i in 0..d {
            y[i] = p[i] - x[i];
        }
        let r = norm(&y);
        if r >= psi.outer {
            continue;
        }
        near += 1;
        if r == 0.0 {
            continue;
        }
        let g = poisson_kernel_grad(d, &y)?;
        let ps = plateau(r, psi.inner, psi.outer);
        let dps = plateau_deriv(r, psi.inner, psi.outer);
        let mut acc = 0.0;
        for i in 0..d {
            acc += g[i] * (ps * h[i][j] - dps * y[i] / r);
        }
        *val = acc;
    }
    if near < MIN_NEAR {
        return Err(Error::TooFewParticlesNearX(near));
    }
    let (value, se) = mean_se(&vals);
    Ok(Estimate { value, se })
}

/// `sup_x sum_i (E|dQ_i(x - X)|^{p/(p-1)})^{(p-1)/p}` over `probes`.
pub fn theta_p(s: &IbpSample, p: f64, probes: &[Vec<f64>]) -> Result<f64> {
    let d = s.dim;
    let q = p / (p - 1.0);
    let mut best = 0.0f64;
    for x in probes {
        let mut acc = vec![0.0; d];
        let mut y = vec![0.0; d];
        for j in 0..s.len() {
            let pt = s.point(j);
            for i in 0..d {
                y[i] = x[i] - pt[i];
            }
            if let Ok(g) = poisson_kernel_grad(d, &y) {
                for i in 0..d {
                    acc[i] += g[i].abs().powf(q);
                }
            }
        }
        let n = s.len() as f64;
        best = best.max(acc.iter().map(|a| (a / n).powf(1.0 / q)).sum());
    }
    Ok(best)
}

/// Ratio table of a density bound.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct DensityBoundTable {
    /// `c_{m,2p}` with `p = d + 1`.
    pub c: f64,
    /// `m_k^{1/2}`.
    pub moment: f64,
    /// `(alpha, x, |d_alpha p(x)| / (c m_k^{1/2} u_{k/2}(x)))`.
    pub rows: Vec<(Vec<usize>, Vec<f64>, f64)>,
}

impl DensityBoundTable {
    pub fn max_ratio(&self) -> f64 {
        self.rows.iter().map(|r| r.2).fold(0.0, f64::max)
    }

    /// Largest ratio over probes with `|x|` in `[lo, hi]`.
    pub fn max_ratio_in(&self, lo: f64, hi: f64) -> f64 {
        self.rows.iter().filter(|r| (lo..=hi).contains(&norm(&r.1))).map(|r| r.2).fold(0.0, f64::max)
    }
}

/// Tabulate `|d_alpha p(x)| / (c_{m,2p} m_k^{1/2} u_{k/2}(x))` for `|alpha| <= m - 1`.
///
/// `density(alpha, x)` supplies the derivatives of the density.
pub fn density_bound_check(
    s: &IbpSample,
    m: usize,
    k: usize,
    probes: &[Vec<f64>],
    density: &dyn Fn(&[usize], &[f64]) -> f64,
) -> Result<DensityBoundTable> {
    if m == 0 {
        return Err(Error::InvalidArgument("m >= 1".into()));
    }
    let p = s.dim as f64 + 1.0;
    let c = measure_sobolev_norm(s, m, 2.0 * p)?.c_mp;
    let moment = moment_factor(s, k as f64).0.sqrt();
    let mut rows = Vec::new();
    for alpha in multi_indices(s.dim, m - 1) {
        for x in probes {
            let u = (1.0 + norm(x)).powf(-(k as f64) / 2.0);
            rows.push((alpha.clone(), x.clone(), density(&alpha, x).abs() / (c * moment * u)));
        }
    }
    Ok(DensityBoundTable { c, moment, rows })
}

/// `c_{2m+q, 2(d+1)}(mu) m_{2(d+1+m)}^{1/2}(mu)`: the radius of the weight-controlled class.
pub fn weight_radius(s: &IbpSample, m: usize, q: usize) -> Result<f64> {
    let d = s.dim;
    let c = measure_sobolev_norm(s, 2 * m + q, 2.0 * (d as f64 + 1.0))?.c_mp;
    Ok(c * moment_factor(s, 2.0 * (d + 1 + m) as f64).0.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn eye(d: usize) -> DMatrix<f64> {
        DMatrix::identity(d, d)
    }

    #[test]
    fn one_dimensional_weights_are_hermite_polynomials() {
        let s = gaussian_ibp_weights(&[0.0], &eye(1), 3, 1000, 1).unwrap();
        for i in 0..s.len() {
            let f = s.point(i)[0];
            assert!((s.weight(&[1]).unwrap()[i] - f).abs() < 1e-14);
            assert!((s.weight(&[2]).unwrap()[i] - (f * f - 1.0)).abs() < 1e-13);
            assert!((s.weight(&[3]).unwrap()[i] - (f * f * f - 3.0 * f)).abs() < 1e-12);
        }
        let stein = ibp_identity(&gaussian_ibp_weights(&[0.0], &eye(1), 1, 100_000, 2).unwrap(), &[SmokeFn(vec![Axis1::Cos {
            freq: 1.0,
            phase: -PI / 2.0,
        }])]);
        assert!(stein[0].holds(3.0), "{:?}", stein[0]);
    }

    #[test]
    fn mixed_weight_for_diagonal_covariance() {
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]));
        let s = gaussian_ibp_weights(&[0.0, 0.0], &cov, 2, 50_000, 3).unwrap();
        let h = s.weight(&[1, 1]).unwrap();
        for i in 0..100 {
            let p = s.point(i);
            assert!((h[i] - p[0] * p[1] / 4.0).abs() < 1e-13);
        }
        for row in ibp_identity(&s, &SmokeFn::dictionary(2)) {
            assert!(row.holds(3.0), "{row:?}");
        }
        assert!(s.weight(&[0, 3]).is_err());
    }

    #[test]
    fn correlated_identity_and_determinism() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 2.0]);
        let s = gaussian_ibp_weights(&[0.5, -1.0], &cov, 2, 60_000, 4).unwrap();
        for row in ibp_identity(&s, &SmokeFn::dictionary(2)) {
            assert!(row.holds(3.5), "{row:?}");
        }
        let a = gaussian_ibp_weights(&[0.5, -1.0], &cov, 2, 9000, 4).unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| gaussian_ibp_weights(&[0.5, -1.0], &cov, 2, 9000, 4).unwrap());
        assert_eq!(a, b);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(gaussian_ibp_weights(&[0.0, 0.0], &bad, 1, 10, 0).unwrap_err(), Error::SingularCovariance);
    }

    #[test]
    fn sobolev_norm_against_absolute_moments() {
        let s = gaussian_ibp_weights(&[0.0, 0.0], &eye(2), 1, 200_000, 5).unwrap();
        let n = measure_sobolev_norm(&s, 1, 3.0).unwrap();
        let abs3 = 2.0 * (2.0 / PI).sqrt();
        for (_, mean, se) in &n.moments {
            assert!((mean - abs3).abs() < 3.0 * se, "{mean} vs {abs3}");
        }
        let want = (1.0 + 2.0 * abs3).powf(1.0 / 3.0);
        assert!((n.norm_m - want).abs() < 0.01);
        assert!((n.k_dp - 3.0).abs() < 1e-12);
        assert!(measure_sobolev_norm(&s, 2, 3.0).is_err());
        assert!(measure_sobolev_norm(&s, 1, 2.0).is_err());
        // H = Sigma^{-1} F scales like 1/sigma
        let s2 = gaussian_ibp_weights(&[0.0, 0.0], &(eye(2) * 9.0), 1, 200_000, 5).unwrap();
        for ((_, a, _), (_, b, _)) in s.weights.iter().zip(&s2.weights).filter(|(x, _)| x.0.iter().sum::<usize>() == 1).map(|(x, y)| {
            let m = |h: &[f64]| h.iter().map(|v| v.abs()).sum::<f64>() / h.len() as f64;
            ((x.0, m(x.1), 0), (y.0, m(y.1), 0))
        }) {
            assert!((b / a - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn poisson_kernel_normalization() {
        let g = poisson_kernel_grad(2, &[1.0, 0.0]).unwrap();
        assert!((g[0] - 1.0 / (2.0 * PI)).abs() < 1e-15 && g[1] == 0.0);
        assert_eq!(poisson_kernel_grad(2, &[0.0, 0.0]).unwrap_err(), Error::SingularPoint);
        assert_eq!(poisson_kernel_grad(1, &[0.3]).unwrap(), vec![1.0]);
        assert_eq!(poisson_kernel_grad(1, &[-0.3]).unwrap(), vec![0.0]);
        // flux through circles that do and do not enclose the origin
        for &(cx, cy, r, want) in &[(0.3, 0.1, 0.7, 1.0), (2.0, 0.5, 0.7, 0.0), (0.0, 0.0, 3.0, 1.0)] {
            let n = 4096;
            let mut flux = 0.0;
            for j in 0..n {
                let t = 2.0 * PI * j as f64 / n as f64;
                let (nx, ny) = (t.cos(), t.sin());
                let g = poisson_kernel_grad(2, &[cx + r * nx, cy + r * ny]).unwrap();
                flux += (g[0] * nx + g[1] * ny) * r * 2.0 * PI / n as f64;
            }
            assert!((flux - want).abs() < 1e-6, "{flux}");
        }
        // d = 3 flux through the unit sphere
        let mut flux = 0.0;
        let (nt, np) = (400, 400);
        for i in 0..nt {
            let th = PI * (i as f64 + 0.5) / nt as f64;
            for j in 0..np {
                let ph = 2.0 * PI * j as f64 / np as f64;
                let nrm = [th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()];
                let g = poisson_kernel_grad(3, &nrm).unwrap();
                let dot: f64 = g.iter().zip(&nrm).map(|(a, b)| a * b).sum();
                flux += dot * th.sin() * (PI / nt as f64) * (2.0 * PI / np as f64);
            }
        }
        assert!((flux - 1.0).abs() < 1e-4);
    }

    #[test]
    fn one_dimensional_kernel_reproduces_f() {
        // f(x) = int f'(y) 1_{y > x} ... with a sign: -int f'(y) Q_1'(y - x) dy = f(x) for decaying f
        let f = |t: f64| (-t * t).exp();
        let fp = |t: f64| -2.0 * t * (-t * t).exp();
        for &x in &[-0.7, 0.0, 1.3] {
            let g = |y: f64| fp(y) * poisson_kernel_grad(1, &[y - x]).unwrap()[0];
            let v = crate::gridfn::integrate_adaptive(&g, x, 12.0, 1e-12);
            assert!((-v - f(x)).abs() < 1e-10);
        }
    }

    #[test]
    fn density_representation_known_values() {
        let s = gaussian_ibp_weights(&[0.0, 0.0], &eye(2), 1, 1_000_000, 6).unwrap();
        let e0 = mt_density(&s, &[0.0, 0.0], PsiRadius::default()).unwrap();
        assert!((e0.value - 1.0 / (2.0 * PI)).abs() < 3.0 * e0.se, "{e0:?}");
        let e1 = mt_density(&s, &[1.0, 0.0], PsiRadius::default()).unwrap();
        let w1 = (-0.5f64).exp() / (2.0 * PI);
        assert!((e1.value - w1).abs() < 3.0 * e1.se, "{e1:?}");
        let far = gaussian_ibp_weights(&[0.0, 0.0], &eye(2), 1, 1000, 6).unwrap();
        assert!(matches!(mt_density(&far, &[12.0, 0.0], PsiRadius::default()), Err(Error::TooFewParticlesNearX(_))));
        let s1 = gaussian_ibp_weights(&[0.0], &eye(1), 1, 200_000, 7).unwrap();
        let e = mt_density(&s1, &[0.4], PsiRadius::default()).unwrap();
        let want = (-0.08f64).exp() / (2.0 * PI).sqrt();
        assert!((e.value - want).abs() < 3.0 * e.se);
    }

    #[test]
    fn density_representation_for_a_mixture() {
        let comps = vec![(0.5, vec![-1.0, 0.0], eye(2)), (0.5, vec![1.0, 0.0], eye(2))];
        let s = gaussian_mixture_ibp_weights(&comps, 1, 1_000_000, 8).unwrap();
        let want = |x: &[f64]| {
            comps.iter().map(|(w, m, _)| w * (-0.5 * ((x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2))).exp() / (2.0 * PI)).sum::<f64>()
        };
        for x in [[0.0, 0.0], [0.5, 0.5]] {
            let e = mt_density(&s, &x, PsiRadius::default()).unwrap();
            assert!((e.value - want(&x)).abs() < 3.0 * e.se, "{x:?} {e:?} {}", want(&x));
        }
    }

    #[test]
    fn density_representation_integrates_to_one() {
        let s = gaussian_ibp_weights(&[0.0, 0.0], &eye(2), 1, 100_000, 9).unwrap();
        let h = 0.5;
        let mut total = 0.0;
        for i in -8..=8 {
            for j in -8..=8 {
                if let Ok(e) = mt_density(&s, &[i as f64 * h, j as f64 * h], PsiRadius::default()) {
                    total += e.value * h * h;
                }
            }
        }
        assert!((total - 1.0).abs() < 0.05, "{total}");
    }

    fn gauss_deriv(sigma: f64) -> impl Fn(&[usize], &[f64]) -> f64 {
        move |alpha: &[usize], x: &[f64]| {
            alpha
                .iter()
                .zip(x)
                .map(|(&a, &t)| {
                    let u = t / sigma;
                    let sgn = if a % 2 == 0 { 1.0 } else { -1.0 };
                    sgn * hermite_he(a, u) * (-0.5 * u * u).exp() / ((2.0 * PI).sqrt() * sigma.powi(a as i32 + 1))
                })
                .product()
        }
    }

    #[test]
    fn density_bound_ratios_stay_bounded() {
        let probes: Vec<Vec<f64>> = (0..=10).flat_map(|i| [vec![0.5 * i as f64, 0.0], vec![0.3 * i as f64, 0.3 * i as f64]]).collect();
        let mut maxes = Vec::new();
        for &sigma in &[0.5, 1.0, 2.0] {
            let s = gaussian_ibp_weights(&[0.0, 0.0], &(eye(2) * (sigma * sigma)), 2, 100_000, 10).unwrap();
            let t = density_bound_check(&s, 2, 4, &probes, &gauss_deriv(sigma)).unwrap();
            let near = t.max_ratio_in(0.9, 1.1);
            let far = t.max_ratio_in(4.9, 5.1);
            assert!(far <= 10.0 * near.max(1e-300), "sigma {sigma}: far {far} near {near}");
            maxes.push(t.max_ratio());
        }
        let spread = maxes.iter().cloned().fold(0.0, f64::max) / maxes.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(maxes.iter().all(|m| m.is_finite() && *m < 1.0) && spread < 100.0, "{maxes:?}");
    }

    #[test]
    fn moment_factor_closed_form() {
        for &sigma in &[0.5, 1.0, 2.0] {
            let s = gaussian_ibp_weights(&[0.0], &(eye(1) * (sigma * sigma)), 1, 200_000, 11).unwrap();
            let k = 4;
            // E(1 + |X|)^k = sum_j C(k, j) sigma^j 2^{j/2} Gamma((j+1)/2) / sqrt(pi)
            let mut want = 0.0;
            let mut binom = 1.0;
            for j in 0..=k {
                want += binom * sigma.powi(j) * 2f64.powf(j as f64 / 2.0) * gamma((j as f64 + 1.0) / 2.0) / PI.sqrt();
                binom = binom * (k - j) as f64 / (j + 1) as f64;
            }
            let (m, se) = moment_factor(&s, k as f64);
            assert!((m - want).abs() < 3.0 * se, "{m} {want} {se}");
        }
    }

    #[test]
    fn theta_bound_across_variances() {
        let probes: Vec<Vec<f64>> = (0..5).map(|i| vec![0.5 * i as f64, 0.1]).collect();
        let mut ratios = Vec::new();
        for &sigma in &[0.5, 1.0, 2.0] {
            let s = gaussian_ibp_weights(&[0.0, 0.0], &(eye(2) * (sigma * sigma)), 1, 40_000, 12).unwrap();
            let th = theta_p(&s, 3.0, &probes).unwrap();
            let n = measure_sobolev_norm(&s, 1, 3.0).unwrap();
            ratios.push(th / n.norm_1.powf(n.k_dp));
        }
        assert!(ratios.iter().all(|r| r.is_finite() && *r > 0.0 && *r < 10.0), "{ratios:?}");
    }
}
