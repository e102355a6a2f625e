//! Dual distances, the balance functional and regularity verdicts.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::gridfn::{fit_rate, slope, GridFunction, Lattice};
use crate::young_orlicz::{weighted_sobolev_orlicz_norm, YoungFunction};
use crate::{Error, Result};

type Density = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Weighted point cloud standing for a finite signed measure.
#[derive(Clone)]
pub struct ParticleMeasure {
    dim: usize,
    positions: Vec<f64>,
    weights: Vec<f64>,
    density: Option<Density>,
    ibp_weights: BTreeMap<Vec<usize>, Vec<f64>>,
}

impl fmt::Debug for ParticleMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParticleMeasure")
            .field("dim", &self.dim)
            .field("particles", &self.weights.len())
            .field("mass", &self.total_mass())
            .field("has_density", &self.density.is_some())
            .finish()
    }
}

impl ParticleMeasure {
    /// `positions` is row-major, `dim` coordinates per particle.
    pub fn new(dim: usize, positions: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || positions.len() != dim * weights.len() {
            return Err(Error::DimensionMismatch(positions.len(), dim * weights.len()));
        }
        if positions.iter().chain(&weights).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite particle data".into()));
        }
        Ok(ParticleMeasure { dim, positions, weights, density: None, ibp_weights: BTreeMap::new() })
    }

    /// Empirical probability measure with equal weights.
    pub fn empirical(dim: usize, positions: Vec<f64>) -> Result<Self> {
        let n = positions.len() / dim.max(1);
        let w = if n == 0 { 0.0 } else { 1.0 / n as f64 };
        Self::new(dim, positions, vec![w; n])
    }

    pub fn dirac(x: &[f64]) -> Self {
        ParticleMeasure::new(x.len(), x.to_vec(), vec![1.0]).expect("finite point")
    }

    /// Quadrature measure of a lattice density, keeping the interpolant as its density.
    pub fn from_grid(g: &GridFunction) -> Self {
        let lat = g.lattice();
        let w: Vec<f64> = g.values().iter().zip(lat.weights()).map(|(v, q)| v * q).collect();
        let g2 = g.clone();
        ParticleMeasure::new(lat.dim(), lat.points(), w).expect("lattice data is finite").with_density(move |x| g2.sample(x))
    }

    /// Attach the exact density when it is known.
    pub fn with_density(mut self, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.density = Some(Arc::new(f));
        self
    }

    pub fn with_ibp_weights(mut self, alpha: Vec<usize>, h: Vec<f64>) -> Result<Self> {
        if alpha.len() != self.dim {
            return Err(Error::DimensionMismatch(alpha.len(), self.dim));
        }
        if h.len() != self.len() {
            return Err(Error::DimensionMismatch(h.len(), self.len()));
        }
        self.ibp_weights.insert(alpha, h);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn len(&self) -> usize {
        self.weights.len()
    }
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
    pub fn positions(&self) -> &[f64] {
        &self.positions
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn point(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }
    pub fn density(&self) -> Option<&Density> {
        self.density.as_ref()
    }
    pub fn ibp_weights(&self, alpha: &[usize]) -> Option<&[f64]> {
        self.ibp_weights.get(alpha).map(|v| v.as_slice())
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn total_variation(&self) -> f64 {
        self.weights.iter().map(|w| w.abs()).sum()
    }

    /// `int phi d mu`.
    pub fn integrate(&self, phi: impl Fn(&[f64]) -> f64) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.len() {
            acc += self.weights[i] * phi(self.point(i));
        }
        acc
    }
}

/// One-dimensional atom `e^{-u^2/2} (A(u) cos(w u + p) + B(u) sin(w u + p))`, `u = (t - c)/s`.
#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub center: f64,
    pub width: f64,
    pub freq: f64,
    pub phase: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

fn poly_eval(c: &[f64], u: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, v| acc * u + v)
}

fn poly_deriv(c: &[f64]) -> Vec<f64> {
    c.iter().enumerate().skip(1).map(|(i, v)| i as f64 * v).collect()
}

fn poly_axpy(out: &mut Vec<f64>, c: &[f64], s: f64, shift: usize) {
    if out.len() < c.len() + shift {
        out.resize(c.len() + shift, 0.0);
    }
    for (i, v) in c.iter().enumerate() {
        out[i + shift] += s * v;
    }
}

impl Atom {
    pub fn gaussian(center: f64, width: f64) -> Self {
        Atom { center, width, freq: 0.0, phase: 0.0, a: vec![1.0], b: vec![] }
    }

    /// `h_n((t - c)/s)` up to the `e^{-u^2/2}` factor kept in the atom.
    pub fn hermite(n: usize, center: f64, width: f64) -> Self {
        // normalized physicists' polynomial coefficients by the three-term recurrence
        let mut prev = vec![std::f64::consts::PI.powf(-0.25)];
        let mut cur = vec![0.0, std::f64::consts::SQRT_2 * prev[0]];
        if n == 0 {
            return Atom { center, width, freq: 0.0, phase: 0.0, a: prev, b: vec![] };
        }
        for j in 1..n {
            let mut next = vec![0.0; j + 2];
            let c1 = (2.0 / (j + 1) as f64).sqrt();
            let c2 = (j as f64 / (j + 1) as f64).sqrt();
            for (i, v) in cur.iter().enumerate() {
                next[i + 1] += c1 * v;
            }
            for (i, v) in prev.iter().enumerate() {
                next[i] -= c2 * v;
            }
            prev = cur;
            cur = next;
        }
        Atom { center, width, freq: 0.0, phase: 0.0, a: cur, b: vec![] }
    }

    pub fn wave(center: f64, width: f64, freq: f64, phase: f64) -> Self {
        Atom { center, width, freq: freq * width, phase, a: vec![1.0], b: vec![] }
    }

    /// Phase-shifted copy with a sine carrier (`cos(. - pi/2)`).
    pub fn quadrature(&self) -> Self {
        let mut q = self.clone();
        q.phase -= std::f64::consts::FRAC_PI_2;
        q
    }

    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        let u = (t - self.center) / self.width;
        let g = (-0.5 * u * u).exp();
        if g == 0.0 {
            return 0.0;
        }
        if self.freq == 0.0 {
            let s = self.phase.cos();
            let base = poly_eval(&self.a, u) * s;
            let extra = if self.b.is_empty() { 0.0 } else { poly_eval(&self.b, u) * self.phase.sin() };
            return g * (base + extra);
        }
        let arg = self.freq * u + self.phase;
        g * (poly_eval(&self.a, u) * arg.cos() + poly_eval(&self.b, u) * arg.sin())
    }

    /// Exact `d/dt` in the same closed form.
    pub fn derivative(&self) -> Self {
        // d/du: A' - uA + wB on cos, B' - uB - wA on sin; then divide by s
        let mut na = poly_deriv(&self.a);
        poly_axpy(&mut na, &self.a, -1.0, 1);
        poly_axpy(&mut na, &self.b, self.freq, 0);
        let mut nb = poly_deriv(&self.b);
        poly_axpy(&mut nb, &self.b, -1.0, 1);
        poly_axpy(&mut nb, &self.a, -self.freq, 0);
        let inv = 1.0 / self.width;
        na.iter_mut().for_each(|v| *v *= inv);
        nb.iter_mut().for_each(|v| *v *= inv);
        Atom { a: na, b: nb, ..self.clone() }
    }

    /// `sup_t |atom(t)|` by a dense scan refined with golden sections.
    pub fn sup(&self) -> f64 {
        Factor::from(self.clone()).sup()
    }
}

/// Linear combination of atoms on one axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub parts: Vec<(f64, Atom)>,
}

impl From<Atom> for Factor {
    fn from(a: Atom) -> Self {
        Factor { parts: vec![(1.0, a)] }
    }
}

impl Factor {
    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        self.parts.iter().map(|(c, a)| c * a.eval(t)).sum()
    }

    pub fn derivative(&self) -> Self {
        Factor { parts: self.parts.iter().map(|(c, a)| (*c, a.derivative())).collect() }
    }

    pub fn sup(&self) -> f64 {
        let span = 14.0;
        let lo = self.parts.iter().map(|(_, a)| a.center - span * a.width).fold(f64::INFINITY, f64::min);
        let hi = self.parts.iter().map(|(_, a)| a.center + span * a.width).fold(f64::NEG_INFINITY, f64::max);
        let wmin = self.parts.iter().map(|(_, a)| a.width).fold(f64::INFINITY, f64::min);
        let step = wmin * 2.0 * span / 4000.0;
        let n = ((hi - lo) / step).ceil() as usize + 1;
        let f = |t: f64| self.eval(t).abs();
        let mut cands: Vec<(f64, f64)> = Vec::new();
        let (mut prev2, mut prev1) = (0.0, 0.0);
        for i in 0..n {
            let v = f(lo + i as f64 * step);
            if i >= 2 && prev1 >= prev2 && prev1 >= v {
                cands.push((lo + (i - 1) as f64 * step, prev1));
            }
            prev2 = prev1;
            prev1 = v;
        }
        cands.push((hi, prev1));
        cands.sort_by(|x, y| y.1.total_cmp(&x.1));
        let mut top = cands.first().map_or(0.0, |c| c.1);
        let r = 0.5 * (5f64.sqrt() - 1.0);
        for &(t0, _) in cands.iter().take(4) {
            let (mut a, mut b) = (t0 - step, t0 + step);
            for _ in 0..60 {
                let c = b - r * (b - a);
                let d = a + r * (b - a);
                if f(c) > f(d) {
                    b = d;
                } else {
                    a = c;
                }
            }
            top = top.max(f(0.5 * (a + b)));
        }
        top
    }
}

/// Smooth test function on `R^d`: a sum of separable products of atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct TestFunction {
    pub label: String,
    pub terms: Vec<(f64, Vec<Factor>)>,
    /// Upper bounds of `||phi||_{k,inf}` for `k = 0..=k_max`.
    pub norms: Vec<f64>,
}

impl TestFunction {
    fn new(label: String, terms: Vec<(f64, Vec<Factor>)>, k_max: usize) -> Self {
        let d = terms[0].1.len();
        // derivative sups per term, axis and order
        let sups: Vec<Vec<Vec<f64>>> = terms
            .iter()
            .map(|(_, atoms)| {
                atoms
                    .iter()
                    .map(|atom| {
                        let mut cur = atom.clone();
                        let mut out = Vec::with_capacity(k_max + 1);
                        for _ in 0..=k_max {
                            out.push(cur.sup());
                            cur = cur.derivative();
                        }
                        out
                    })
                    .collect()
            })
            .collect();
        let mut norms = Vec::with_capacity(k_max + 1);
        let mut acc = 0.0;
        for k in 0..=k_max {
            for alpha in crate::gridfn::multi_indices_exact(d, k) {
                let mut bound = 0.0;
                for (t, (c, _)) in terms.iter().enumerate() {
                    let prod: f64 = alpha.iter().enumerate().map(|(i, &a)| sups[t][i][a]).product();
                    bound += c.abs() * prod;
                }
                acc += bound;
            }
            // the first-order norm guard makes later ratios conservative
            norms.push(acc * (1.0 + 1e-9));
        }
        TestFunction { label, terms, norms }
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|(c, atoms)| c * atoms.iter().zip(x).map(|(a, &t)| a.eval(t)).product::<f64>()).sum()
    }

    pub fn norm(&self, k: usize) -> Option<f64> {
        self.norms.get(k).copied()
    }
}

/// Finite family realizing the `d_k` supremum from below.
#[derive(Debug, Clone)]
pub struct TestDictionary {
    dim: usize,
    k_max: usize,
    functions: Vec<TestFunction>,
    center: Vec<f64>,
    scale: f64,
}

impl TestDictionary {
    pub fn from_functions(dim: usize, k_max: usize, functions: Vec<TestFunction>) -> Result<Self> {
        for f in &functions {
            if f.terms.iter().any(|(_, a)| a.len() != dim) {
                return Err(Error::DimensionMismatch(f.terms[0].1.len(), dim));
            }
            if f.norms.len() <= k_max || f.norms.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::InvalidArgument(format!("bad norms for {}", f.label)));
            }
        }
        Ok(TestDictionary { dim, k_max, functions, center: vec![0.0; dim], scale: 1.0 })
    }

    /// Gaussians, rescaled Hermite functions and enveloped waves around `center` at length scale `scale`.
    pub fn standard(dim: usize, center: &[f64], scale: f64, k_max: usize) -> Result<Self> {
        if center.len() != dim {
            return Err(Error::DimensionMismatch(center.len(), dim));
        }
        if !(1..=3).contains(&dim) {
            return Err(Error::InvalidArgument(format!("dictionary supports d <= 3, got {dim}")));
        }
        let mut fns = Vec::new();
        let widths = [0.25, 0.5, 1.0, 2.0, 4.0];
        let offsets: Vec<f64> = match dim {
            1 => (-4..=4).map(|i| 0.5 * i as f64).collect(),
            _ => vec![-1.0, 0.0, 1.0],
        };
        let grid_centers = |offs: &[f64], w: f64| -> Vec<Vec<f64>> {
            let mut out = vec![vec![]];
            for axis in 0..dim {
                let mut next = Vec::new();
                for p in &out {
                    for o in offs {
                        let mut q = p.clone();
                        q.push(center[axis] + o * scale * w.max(1.0));
                        next.push(q);
                    }
                }
                out = next;
            }
            out
        };
        for &w in &widths {
            for c in grid_centers(&offsets, w) {
                let atoms = c.iter().map(|&ci| Atom::gaussian(ci, w * scale).into()).collect();
                fns.push(TestFunction::new(format!("gauss w={w} c={c:?}"), vec![(1.0, atoms)], k_max));
            }
        }
        let hermite_orders: Vec<Vec<usize>> = crate::gridfn::multi_indices(dim, if dim == 1 { 6 } else { 3 })
            .into_iter()
            .filter(|a| a.iter().sum::<usize>() > 0)
            .collect();
        let h_offsets: Vec<f64> = if dim == 1 { vec![-1.0, -0.5, 0.0, 0.5, 1.0] } else { vec![0.0] };
        for &w in &[0.5, 1.0, 2.0, 4.0] {
            for c in grid_centers(&h_offsets, w) {
                for alpha in &hermite_orders {
                    let atoms = alpha.iter().zip(&c).map(|(&n, &ci)| Atom::hermite(n, ci, w * scale).into()).collect();
                    fns.push(TestFunction::new(format!("hermite {alpha:?} w={w} c={c:?}"), vec![(1.0, atoms)], k_max));
                }
            }
        }
        for axis in 0..dim {
            for &w in &[0.1, 0.25, 0.5] {
                for &sep in &[-4.0, -2.0, -1.0, -0.5, 0.5, 1.0, 2.0, 4.0] {
                    let mut factors: Vec<Factor> = center.iter().map(|&c| Atom::gaussian(c, w * scale).into()).collect();
                    let c = center[axis];
                    factors[axis] = Factor {
                        parts: vec![(1.0, Atom::gaussian(c, w * scale)), (-1.0, Atom::gaussian(c + sep * scale, w * scale))],
                    };
                    fns.push(TestFunction::new(format!("dipole axis={axis} w={w} sep={sep}"), vec![(1.0, factors)], k_max));
                }
            }
        }
        let dirs: Vec<Vec<f64>> = match dim {
            1 => vec![vec![1.0]],
            2 => vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![1.0, -1.0]],
            _ => (0..3).map(|i| (0..3).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect(),
        };
        for &freq in &[0.5, 1.0, 2.0] {
            for &w in &[1.0, 2.0] {
                for dir in &dirs {
                    for phase in [0.0, std::f64::consts::FRAC_PI_2] {
                        let omega: Vec<f64> = dir.iter().map(|v| v * freq / scale).collect();
                        fns.push(TestFunction::new(
                            format!("wave f={freq} w={w} dir={dir:?} p={phase:.3}"),
                            wave_terms(center, w * scale, &omega, phase)
                                .into_iter()
                                .map(|(c, atoms)| (c, atoms.into_iter().map(Factor::from).collect()))
                                .collect(),
                            k_max,
                        ));
                    }
                }
            }
        }
        let mut dict = TestDictionary::from_functions(dim, k_max, fns)?;
        dict.center = center.to_vec();
        dict.scale = scale;
        Ok(dict)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn k_max(&self) -> usize {
        self.k_max
    }
    pub fn len(&self) -> usize {
        self.functions.len()
    }
    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }
    pub fn functions(&self) -> &[TestFunction] {
        &self.functions
    }

    /// `int phi_j d(mu - nu)` for every dictionary element.
    pub fn moments_diff(&self, mu: &ParticleMeasure, nu: &ParticleMeasure) -> Vec<f64> {
        self.functions.par_iter().map(|f| mu.integrate(|x| f.eval(x)) - nu.integrate(|x| f.eval(x))).collect()
    }

    /// `max_j |int phi_j g| / ||phi_j||_{k,inf}` for a signed lattice density `g`.
    pub fn dual_norm(&self, g: &crate::gridfn::GridFunction, k: usize) -> Result<f64> {
        if g.dim() != self.dim {
            return Err(Error::DimensionMismatch(g.dim(), self.dim));
        }
        if k > self.k_max {
            return Err(Error::InvalidArgument(format!("dictionary covers k <= {}", self.k_max)));
        }
        let lat = g.lattice();
        let pts = lat.points();
        let w = lat.weights();
        let mut best = 0.0f64;
        for f in &self.functions {
            let mut acc = 0.0;
            for (i, (v, wi)) in g.values().iter().zip(w).enumerate() {
                if *v != 0.0 {
                    acc += v * wi * f.eval(&pts[i * self.dim..(i + 1) * self.dim]);
                }
            }
            best = best.max(acc.abs() / f.norms[k]);
        }
        Ok(best)
    }

    /// `1 - d_0(delta_c, delta_{c + s e_1}) / 2`: the shortfall against the exact total variation 2.
    pub fn defect(&self) -> f64 {
        let a = self.center.clone();
        let mut b = self.center.clone();
        b[0] += self.scale;
        let diffs = self.moments_diff(&ParticleMeasure::dirac(&a), &ParticleMeasure::dirac(&b));
        let est = diffs.iter().zip(&self.functions).map(|(d, f)| d.abs() / f.norms[0]).fold(0.0f64, f64::max);
        (1.0 - est / 2.0).max(0.0)
    }
}

/// `cos(omega . x + phase)` under a product Gaussian envelope as separable terms.
fn wave_terms(center: &[f64], width: f64, omega: &[f64], phase: f64) -> Vec<(f64, Vec<Atom>)> {
    // track products representing cos(S) and sin(S) while S accumulates axis phases
    let mut cs: Vec<(f64, Vec<Atom>)> = vec![(phase.cos(), vec![])];
    let mut sn: Vec<(f64, Vec<Atom>)> = vec![(phase.sin(), vec![])];
    for (&c, &w) in center.iter().zip(omega) {
        let cos_t = Atom::wave(c, width, w, 0.0);
        let sin_t = cos_t.quadrature();
        let push = |list: &[(f64, Vec<Atom>)], atom: &Atom, sign: f64, out: &mut Vec<(f64, Vec<Atom>)>| {
            for (coef, atoms) in list {
                let mut a = atoms.clone();
                a.push(atom.clone());
                out.push((sign * coef, a));
            }
        };
        let mut nc = Vec::new();
        let mut ns = Vec::new();
        push(&cs, &cos_t, 1.0, &mut nc);
        push(&sn, &cos_t, 1.0, &mut ns);
        if w != 0.0 {
            push(&sn, &sin_t, -1.0, &mut nc);
            push(&cs, &sin_t, 1.0, &mut ns);
        }
        nc.retain(|t| t.0.abs() > 1e-14);
        ns.retain(|t| t.0.abs() > 1e-14);
        cs = nc;
        sn = ns;
    }
    cs
}

/// Two-sided information on `d_k(mu, nu)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DistanceEstimate {
    /// Certified lower bound from the dictionary.
    pub lower: f64,
    /// Coupling upper bound `d_k <= d_1 <= d_W` (`d = 1`, `k >= 1`, equal positive masses).
    pub upper: Option<f64>,
    /// Index of the maximizing dictionary element.
    pub argmax: usize,
}

impl DistanceEstimate {
    /// The value entering series: the upper bound when known.
    pub fn conservative(&self) -> f64 {
        self.upper.unwrap_or(self.lower)
    }
}

pub fn dk_distance(mu: &ParticleMeasure, nu: &ParticleMeasure, k: usize, dict: &TestDictionary) -> Result<DistanceEstimate> {
    if mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch(mu.dim(), nu.dim()));
    }
    if mu.dim() != dict.dim() {
        return Err(Error::DimensionMismatch(mu.dim(), dict.dim()));
    }
    if k > dict.k_max() {
        return Err(Error::InvalidArgument(format!("dictionary covers k <= {}", dict.k_max())));
    }
    let diffs = dict.moments_diff(mu, nu);
    let (mut lower, mut argmax) = (0.0f64, 0usize);
    for (j, (d, f)) in diffs.iter().zip(dict.functions()).enumerate() {
        let r = d.abs() / f.norms[k];
        if r > lower {
            lower = r;
            argmax = j;
        }
    }
    let upper = if k >= 1 { wasserstein_1d(mu, nu).map(|w| w.max(lower)) } else { None };
    Ok(DistanceEstimate { lower, upper, argmax })
}

/// `W_1` between two nonnegative one-dimensional measures of equal mass, as `int |F - G|`.
///
/// A measure carrying a density gets the piecewise-linear CDF through the cell midpoints of its
/// particles (second-order for lattice quadratures); one without gets its step CDF. The integral of
/// `|F - G|` over the merged knots is exact for these representations.
pub fn wasserstein_1d(mu: &ParticleMeasure, nu: &ParticleMeasure) -> Option<f64> {
    if mu.dim() != 1 || nu.dim() != 1 || mu.is_empty() || nu.is_empty() {
        return None;
    }
    let tol = -1e-12 * mu.total_variation().max(nu.total_variation());
    if mu.weights().iter().chain(nu.weights()).any(|&w| w < tol) {
        return None;
    }
    let (ma, mb) = (mu.total_mass(), nu.total_mass());
    if (ma - mb).abs() > 1e-6 * ma.max(mb).max(1e-300) {
        return None;
    }
    let fa = Cdf::of(mu);
    let fb = Cdf::of(nu);
    let mut knots: Vec<f64> = fa.x.iter().chain(&fb.x).cloned().collect();
    knots.sort_by(f64::total_cmp);
    knots.dedup();
    let mut acc = 0.0;
    for w in knots.windows(2) {
        let (a, b) = (w[0], w[1]);
        // both CDFs are affine on (a, b); evaluate limits from inside
        let da = fa.right(a) - fb.right(a);
        let db = fa.left(b) - fb.left(b);
        let len = b - a;
        acc += if da * db >= 0.0 {
            0.5 * len * (da.abs() + db.abs())
        } else {
            0.5 * len * (da * da + db * db) / (da.abs() + db.abs())
        };
    }
    Some(acc)
}

struct Cdf {
    x: Vec<f64>,
    /// Value just right of each knot.
    v: Vec<f64>,
    linear: bool,
}

impl Cdf {
    fn of(m: &ParticleMeasure) -> Cdf {
        let mut pts: Vec<(f64, f64)> = m.positions().iter().cloned().zip(m.weights().iter().cloned()).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(pts.len());
        for (x, w) in pts {
            match merged.last_mut() {
                Some(last) if last.0 == x => last.1 += w,
                _ => merged.push((x, w)),
            }
        }
        let n = merged.len();
        if m.density().is_none() || n < 2 {
            let mut cum = 0.0;
            let (mut x, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
            for (p, w) in merged {
                cum += w;
                x.push(p);
                v.push(cum);
            }
            return Cdf { x, v, linear: false };
        }
        let mut x = Vec::with_capacity(n + 2);
        let mut v = Vec::with_capacity(n + 2);
        x.push(merged[0].0 - 0.5 * (merged[1].0 - merged[0].0));
        v.push(0.0);
        let mut cum = 0.0;
        for &(p, w) in &merged {
            x.push(p);
            v.push(cum + 0.5 * w);
            cum += w;
        }
        x.push(merged[n - 1].0 + 0.5 * (merged[n - 1].0 - merged[n - 2].0));
        v.push(cum);
        Cdf { x, v, linear: true }
    }

    fn eval(&self, t: f64, right: bool) -> f64 {
        let i = if right { self.x.partition_point(|&p| p <= t) } else { self.x.partition_point(|&p| p < t) };
        if i == 0 {
            return 0.0;
        }
        if !self.linear || i == self.x.len() {
            return self.v[i - 1];
        }
        let (x0, x1) = (self.x[i - 1], self.x[i]);
        self.v[i - 1] + (self.v[i] - self.v[i - 1]) * (t - x0) / (x1 - x0)
    }

    fn right(&self, t: f64) -> f64 {
        self.eval(t, true)
    }

    fn left(&self, t: f64) -> f64 {
        self.eval(t, false)
    }
}

/// Upper bound on `d_1(mu, nu)` from a coupling `(X_i, Y_i)` with weights `w_i`:
/// `sum_i w_i min(2, L |X_i - Y_i|_inf)`, `L` the Lipschitz factor of a localization.
pub fn coupling_d1_upper(x: &[f64], y: &[f64], dim: usize, weights: &[f64], lipschitz: f64) -> Result<f64> {
    if x.len() != y.len() || x.len() != dim * weights.len() {
        return Err(Error::DimensionMismatch(x.len(), dim * weights.len()));
    }
    let l = lipschitz.max(1.0);
    Ok(weights
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let r = (0..dim).map(|c| (x[i * dim + c] - y[i * dim + c]).abs()).fold(0.0, f64::max);
            w.abs() * (2.0f64).min(l * r)
        })
        .sum())
}

/// Exponents and Young function of the balance functional.
#[derive(Debug, Clone)]
pub struct BalanceParams {
    pub q: usize,
    pub k: usize,
    pub m: usize,
    pub e: YoungFunction,
    pub a: f64,
    /// Cap on the number of levels.
    pub n_cap: usize,
}

impl BalanceParams {
    pub fn new(q: usize, k: usize, m: usize, e: YoungFunction) -> Self {
        BalanceParams { q, k, m, e, a: 1.5, n_cap: 12 }
    }
}

/// One level of the truncated functional.
#[derive(Debug, Clone, Serialize)]
pub struct LevelRow {
    pub n: usize,
    /// `||p_{mu_n}||_{2m+q,2m,(e)}`.
    pub r_n: f64,
    pub dk_lower: f64,
    pub dk_upper: Option<f64>,
    /// `2^{n(q+k)} beta_e(2^{nd}) d_k`.
    pub distance_term: f64,
    /// `2^{-2nm} ||p_{mu_n}||`.
    pub norm_term: f64,
}

/// Truncated value of the balance functional.
#[derive(Debug, Clone, Serialize)]
pub struct PiValue {
    pub value: f64,
    pub distance_sum: f64,
    pub norm_sum: f64,
    /// Geometric extrapolation of the neglected tail (`inf` when terms stop decaying).
    pub tail_bound: f64,
    /// Adaptive stop rule met before the cap.
    pub converged: bool,
    /// Fitted `log2` growth per level of the combined terms over the top half.
    pub growth: f64,
    /// Distance terms used the coupling upper bound at every level.
    pub distance_upper_side: bool,
    pub levels: Vec<LevelRow>,
}

fn geometric_tail(terms: &[f64]) -> f64 {
    let n = terms.len();
    if n == 0 {
        return 0.0;
    }
    let last = terms[n - 1];
    if last == 0.0 {
        return 0.0;
    }
    if n < 2 || terms[n - 2] <= 0.0 {
        return f64::INFINITY;
    }
    let r = last / terms[n - 2];
    if r >= 1.0 {
        f64::INFINITY
    } else {
        last * r / (1.0 - r)
    }
}

/// `log2` slope of positive terms against `n` over the top half.
fn growth_rate(terms: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = terms
        .iter()
        .enumerate()
        .skip(terms.len() / 2)
        .filter(|(_, t)| **t > 0.0)
        .map(|(i, t)| (i as f64, t.log2()))
        .collect();
    if pts.len() < 2 {
        return f64::NEG_INFINITY;
    }
    let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    slope(&x, &y)
}

/// `pi_{q,k,m,e}` truncated adaptively; level `n` uses `approximants[n - 1]`.
pub fn pi_functional(
    mu: &ParticleMeasure,
    approximants: &[GridFunction],
    params: &BalanceParams,
    dict: &TestDictionary,
    n_levels: usize,
) -> Result<PiValue> {
    if approximants.len() < n_levels {
        return Err(Error::InvalidArgument(format!("{} approximants for {} levels", approximants.len(), n_levels)));
    }
    let d = mu.dim();
    let BalanceParams { q, k, m, ref e, .. } = *params;
    let n_levels = n_levels.min(params.n_cap);
    let mut levels = Vec::new();
    let (mut s1, mut s2) = (0.0, 0.0);
    let mut converged = false;
    let mut upper_side = true;
    for n in 1..=n_levels {
        let p = &approximants[n - 1];
        if p.dim() != d {
            return Err(Error::DimensionMismatch(p.dim(), d));
        }
        let nu = ParticleMeasure::from_grid(p);
        let dist = dk_distance(mu, &nu, k, dict)?;
        upper_side &= dist.upper.is_some();
        let r_n = weighted_sobolev_orlicz_norm(p, 2 * m + q, 2 * m, e)?;
        let nf = n as f64;
        let t1 = (nf * (q + k) as f64).exp2() * e.beta((nf * d as f64).exp2()) * dist.conservative();
        let t2 = (-2.0 * nf * m as f64).exp2() * r_n;
        s1 += t1;
        s2 += t2;
        levels.push(LevelRow { n, r_n, dk_lower: dist.lower, dk_upper: dist.upper, distance_term: t1, norm_term: t2 });
        if n >= 3 && t1 + t2 < 1e-3 * (s1 + s2) {
            converged = true;
            break;
        }
    }
    let t1s: Vec<f64> = levels.iter().map(|l| l.distance_term).collect();
    let t2s: Vec<f64> = levels.iter().map(|l| l.norm_term).collect();
    let both: Vec<f64> = t1s.iter().zip(&t2s).map(|(a, b)| a + b).collect();
    let tail_bound = geometric_tail(&t1s) + geometric_tail(&t2s);
    Ok(PiValue {
        value: s1 + s2,
        distance_sum: s1,
        norm_sum: s2,
        tail_bound,
        converged,
        growth: growth_rate(&both).max(growth_rate(&t1s)).max(growth_rate(&t2s)),
        distance_upper_side: upper_side,
        levels,
    })
}

/// Verdict threshold on the fitted slope of the `H_q` statistic.
pub const HQ_SLOPE_THRESHOLD: f64 = 0.05;
/// Verdict threshold on the `log2` growth per level of the balance terms.
pub const PI_GROWTH_THRESHOLD: f64 = -0.05;

#[derive(Debug, Clone, Serialize)]
pub struct HqStatistic {
    /// `(R, statistic)` along the curve.
    pub values: Vec<(f64, f64)>,
    /// Max over the top half of the curve.
    pub limsup: f64,
    /// Slope of `ln statistic` against `ln R` over the top half.
    pub slope: f64,
    pub threshold: f64,
    pub regular: bool,
}

/// The `H_q(k, m, e)` statistic `L_a(R)^{1+(k+q)/2m} beta_e(L_a(R)^{d/2m}) d_k / R`, `L_a(R) = R (ln R)^a`.
pub fn hypothesis_hq_statistic(
    curve: &[(f64, f64)],
    q: usize,
    k: usize,
    m: usize,
    e: &YoungFunction,
    a: f64,
    dim: usize,
) -> Result<HqStatistic> {
    if curve.len() < 6 {
        return Err(Error::CurveTooShort(format!("{} points, need 6", curve.len())));
    }
    if curve.windows(2).any(|w| w[1].0 <= w[0].0) || curve[0].0 <= 1.0 {
        return Err(Error::InvalidArgument("curve must be sorted with R > 1".into()));
    }
    let span = curve[curve.len() - 1].0 / curve[0].0;
    if span < 1e3 {
        return Err(Error::CurveTooShort(format!("R spans {span:.1}x, need 1e3")));
    }
    if !(a > 1.0) || m == 0 {
        return Err(Error::InvalidArgument("need a > 1 and m >= 1".into()));
    }
    let theta = (k + q) as f64 / (2 * m) as f64;
    let values: Vec<(f64, f64)> = curve
        .iter()
        .map(|&(r, dk)| {
            let la = r * r.ln().powf(a);
            let s = la.powf(1.0 + theta) * e.beta(la.powf(dim as f64 / (2 * m) as f64)) * dk / r;
            (r, s)
        })
        .collect();
    let top = &values[values.len() / 2..];
    let limsup = top.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
    let pos: Vec<&(f64, f64)> = top.iter().filter(|v| v.1 > 0.0).collect();
    let slope_v = if pos.len() >= 2 {
        let x: Vec<f64> = pos.iter().map(|v| v.0.ln()).collect();
        let y: Vec<f64> = pos.iter().map(|v| v.1.ln()).collect();
        slope(&x, &y)
    } else {
        f64::NEG_INFINITY
    };
    Ok(HqStatistic {
        regular: limsup.is_finite() && slope_v <= HQ_SLOPE_THRESHOLD,
        values,
        limsup,
        slope: slope_v,
        threshold: HQ_SLOPE_THRESHOLD,
    })
}

/// One approximation level seen from the Fourier side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FourierLevel {
    /// `|E e^{i xi F_n}|`.
    pub char_abs: f64,
    /// `E|F - F_n|`.
    pub approx_err: f64,
    /// `E|H_k(F_n)|`.
    pub ibp_weight: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FourierBalance {
    pub xi: Vec<f64>,
    /// `min_n (xi E|F - F_n| + xi^{-k} E|H_k(F_n)|)`.
    pub bound: Vec<f64>,
    /// Optimizing level per `xi`.
    pub argmin: Vec<usize>,
    /// Decay exponent of the bound in `xi`.
    pub exponent: f64,
    pub exponent_ci: f64,
}

impl FourierBalance {
    /// `|p^(xi)| <~ xi^{-s}` is square integrable in `R^d` only if `s > d/2`.
    pub fn square_integrable(&self, dim: usize) -> bool {
        self.exponent > dim as f64 / 2.0
    }
}

pub fn fourier_balance(samples: &[(f64, Vec<FourierLevel>)], k: usize) -> Result<FourierBalance> {
    let mut xi = Vec::new();
    let mut bound = Vec::new();
    let mut argmin = Vec::new();
    for (x, levels) in samples {
        let x = x.abs();
        let (j, b) = levels
            .iter()
            .map(|l| x * l.approx_err + x.powi(-(k as i32)) * l.ibp_weight)
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (j, b)| if b < acc.1 { (j, b) } else { acc });
        if b.is_finite() && b > 0.0 {
            xi.push(x);
            bound.push(b);
            argmin.push(j);
        }
    }
    let span = xi.iter().cloned().fold(0.0, f64::max) / xi.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(span >= 100.0) {
        return Err(Error::CurveTooShort(format!("xi spans {span:.1}x, need 1e2")));
    }
    let fit = fit_rate(&xi, &bound)?;
    Ok(FourierBalance { xi, bound, argmin, exponent: -fit.exponent, exponent_ci: fit.exponent_ci })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Regular,
    Inconclusive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Regular => "regular",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportParams {
    pub q: usize,
    pub k: usize,
    pub m: usize,
    pub e: String,
    pub a: f64,
    pub dim: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BalanceReport {
    pub params: ReportParams,
    pub levels: Vec<LevelRow>,
    pub pi: f64,
    pub pi_tail_bound: f64,
    pub pi_converged: bool,
    /// Which statistic decided the verdict: `"hq"` or `"pi-growth"`.
    pub statistic_kind: String,
    pub statistic: f64,
    pub threshold: f64,
    pub hq: Option<HqStatistic>,
    pub verdict: Verdict,
    /// Bound recorded for a regular verdict (`C` not estimated).
    pub density_bound: Option<String>,
    pub dictionary_defect: f64,
    pub distance_side: String,
    /// Variance of the cross-validated regularization, when one was built.
    pub cv_delta: Option<f64>,
    pub provenance: BTreeMap<String, serde_json::Value>,
    #[serde(skip)]
    pub density: Option<GridFunction>,
}

impl BalanceReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Least-squares cross-validation score of a Gaussian smoothing of variance `delta`.
pub fn lscv_score(mu: &ParticleMeasure, delta: f64) -> f64 {
    let d = mu.dim();
    let n = mu.len();
    let stride = (n / 1500).max(1);
    let idx: Vec<usize> = (0..n).step_by(stride).collect();
    let mass: f64 = idx.iter().map(|&i| mu.weights()[i]).sum();
    let gauss = |r2: f64, var: f64| (-0.5 * r2 / var).exp() / (2.0 * std::f64::consts::PI * var).powf(0.5 * d as f64);
    let (mut sq, mut loo, mut loo_w) = (0.0, 0.0, 0.0);
    for &i in &idx {
        for &j in &idx {
            let r2: f64 = (0..d).map(|c| (mu.point(i)[c] - mu.point(j)[c]).powi(2)).sum();
            let wij = mu.weights()[i] * mu.weights()[j] / (mass * mass);
            sq += wij * gauss(r2, 2.0 * delta);
            if i != j {
                loo += wij * gauss(r2, delta);
                loo_w += wij;
            }
        }
    }
    let self_w: f64 = idx.iter().map(|&i| (mu.weights()[i] / mass).powi(2)).sum();
    sq - 2.0 * loo * (1.0 - self_w) / loo_w.max(1e-300)
}

/// Materialize `p_mu` by Gaussian regularization at the LSCV-optimal variance.
pub fn cv_density(mu: &ParticleMeasure, points_per_axis: usize) -> Result<Option<(f64, GridFunction)>> {
    if mu.len() < 20 || mu.dim() > 2 || mu.weights().iter().any(|&w| w < 0.0) {
        return Ok(None);
    }
    let d = mu.dim();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for i in 0..mu.len() {
        for c in 0..d {
            lo[c] = lo[c].min(mu.point(i)[c]);
            hi[c] = hi[c].max(mu.point(i)[c]);
        }
    }
    let width = (0..d).map(|c| hi[c] - lo[c]).fold(0.0, f64::max).max(1e-6);
    let grid = crate::gridfn::geometric((width * 1e-3).powi(2), 1.5, 24);
    let best = grid
        .iter()
        .map(|&dl| (dl, lscv_score(mu, dl)))
        .fold((grid[0], f64::INFINITY), |acc, v| if v.1 < acc.1 { v } else { acc });
    let pad = 4.0 * best.0.sqrt();
    let lo: Vec<f64> = lo.iter().map(|v| v - pad).collect();
    let hi: Vec<f64> = hi.iter().map(|v| v + pad).collect();
    let lat = Lattice::new(&lo, &hi, &vec![points_per_axis; d])?;
    Ok(Some((best.0, crate::hermite::regularize(mu, best.0, &lat)?)))
}

/// Verdict procedure: `pi` on the supplied sequence, the `H_q` statistic when the norm curve allows it.
pub fn theorem2c_verdict(
    mu: &ParticleMeasure,
    approximants: &[GridFunction],
    params: &BalanceParams,
    dict: &TestDictionary,
) -> Result<BalanceReport> {
    let n = approximants.len().min(params.n_cap);
    let pi = pi_functional(mu, approximants, params, dict, n)?;
    let mut curve: Vec<(f64, f64)> =
        pi.levels.iter().map(|l| (l.r_n, l.dk_upper.unwrap_or(l.dk_lower))).filter(|c| c.0 > 1.0).collect();
    curve.sort_by(|a, b| a.0.total_cmp(&b.0));
    curve.dedup_by(|a, b| a.0 <= b.0);
    let hq = hypothesis_hq_statistic(&curve, params.q, params.k, params.m, &params.e, params.a, mu.dim()).ok();
    let pi_ok = pi.tail_bound.is_finite() && pi.growth <= PI_GROWTH_THRESHOLD || pi.converged;
    let (kind, statistic, threshold, regular) = match &hq {
        Some(h) => ("hq", h.slope, h.threshold, h.regular && pi.tail_bound.is_finite()),
        None => ("pi-growth", pi.growth, PI_GROWTH_THRESHOLD, pi_ok),
    };
    let verdict = if regular { Verdict::Regular } else { Verdict::Inconclusive };
    let density_bound = regular.then(|| {
        format!(
            "||p_mu||_(W^{{{},{}}}) <= C * {:.6e} (C: universal constant, not estimated)",
            params.q,
            params.e.label(),
            pi.value + pi.tail_bound
        )
    });
    let cv = cv_density(mu, if mu.dim() == 1 { 801 } else { 101 })?;
    let mut provenance = BTreeMap::new();
    provenance.insert("particles".into(), serde_json::json!(mu.len()));
    provenance.insert("levels".into(), serde_json::json!(pi.levels.len()));
    provenance.insert("dictionary_size".into(), serde_json::json!(dict.len()));
    provenance.insert(
        "approximant_grids".into(),
        serde_json::json!(approximants.iter().take(n).map(|g| g.lattice().shape().to_vec()).collect::<Vec<_>>()),
    );
    Ok(BalanceReport {
        params: ReportParams {
            q: params.q,
            k: params.k,
            m: params.m,
            e: params.e.label(),
            a: params.a,
            dim: mu.dim(),
        },
        pi: pi.value,
        pi_tail_bound: pi.tail_bound,
        pi_converged: pi.converged,
        statistic_kind: kind.into(),
        statistic,
        threshold,
        hq,
        verdict,
        density_bound,
        dictionary_defect: dict.defect(),
        distance_side: if pi.distance_upper_side { "upper (coupling)" } else { "lower (dictionary)" }.into(),
        cv_delta: cv.as_ref().map(|c| c.0),
        density: cv.map(|c| c.1),
        provenance,
        levels: pi.levels,
    })
}

/// One point of an approximation curve `(R, d_k)` produced by a pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub r: f64,
    /// Distance used by the statistic (upper side when available).
    pub dk: f64,
    /// Dictionary lower bound, when computed.
    pub dk_lower: Option<f64>,
    /// Measured norm of the approximant density, when computed.
    pub norm: Option<f64>,
}

/// Report for a pipeline that supplies its own `(R, d_k)` curve: the verdict is the `H_q` statistic.
pub fn curve_report(
    points: &[CurvePoint],
    params: &BalanceParams,
    dim: usize,
    dictionary_defect: f64,
    distance_side: &str,
    mut provenance: BTreeMap<String, serde_json::Value>,
) -> Result<BalanceReport> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.r.total_cmp(&b.r));
    let curve: Vec<(f64, f64)> = pts.iter().map(|p| (p.r, p.dk)).collect();
    let hq = hypothesis_hq_statistic(&curve, params.q, params.k, params.m, &params.e, params.a, dim)?;
    let levels = pts
        .iter()
        .zip(&hq.values)
        .enumerate()
        .map(|(i, (p, v))| LevelRow {
            n: i + 1,
            r_n: p.r,
            dk_lower: p.dk_lower.unwrap_or(p.dk),
            dk_upper: Some(p.dk),
            distance_term: v.1,
            norm_term: p.norm.unwrap_or(f64::NAN),
        })
        .collect();
    let verdict = if hq.regular { Verdict::Regular } else { Verdict::Inconclusive };
    let density_bound = hq.regular.then(|| {
        format!(
            "||p_mu||_(W^{{{},{}}}) <= C * {:.6e} (C: universal constant, not estimated)",
            params.q,
            params.e.label(),
            hq.limsup
        )
    });
    provenance.insert("curve_points".into(), serde_json::json!(pts.len()));
    Ok(BalanceReport {
        params: ReportParams { q: params.q, k: params.k, m: params.m, e: params.e.label(), a: params.a, dim },
        levels,
        pi: f64::NAN,
        pi_tail_bound: f64::NAN,
        pi_converged: false,
        statistic_kind: "hq".into(),
        statistic: hq.slope,
        threshold: hq.threshold,
        verdict,
        density_bound,
        dictionary_defect,
        distance_side: distance_side.into(),
        cv_delta: None,
        provenance,
        density: None,
        hq: Some(hq),
    })
}
