//! K-functional harness on the pair `X = l^1(w) ⊂ Y = l^1`.
//!
//! For this pair `K(y, t) = sum_i |y_i| min(1, t w_i)` exactly, so the interpolation norms,
//! the approximation functional and the distance curve `d_Y(y, B_X(R))` are all computable
//! without quadrature error in `y`.

use statrs::function::gamma::{gamma, gamma_ur};

use crate::gridfn::{integrate_adaptive, slope};
use crate::young_orlicz::YoungFunction;
use crate::{Error, Result};

/// Weighted `l^1` inside `l^1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPair {
    weights: Vec<f64>,
}

impl ToyPair {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidArgument("toy weights must be finite and positive".into()));
        }
        Ok(ToyPair { weights })
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `||y||_Y <= C ||y||_X` with `C = 1 / min w_i`.
    pub fn embedding_constant(&self) -> f64 {
        1.0 / self.weights.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn norm_y(&self, y: &[f64]) -> f64 {
        y.iter().map(|v| v.abs()).sum()
    }

    pub fn norm_x(&self, y: &[f64]) -> f64 {
        y.iter().zip(&self.weights).map(|(v, w)| v.abs() * w).sum()
    }

    fn check(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.dim() {
            return Err(Error::DimensionMismatch(y.len(), self.dim()));
        }
        Ok(())
    }
}

/// `K(y, t) = inf_x ||y - x||_Y + t ||x||_X`.
pub fn k_functional(pair: &ToyPair, y: &[f64], t: f64) -> Result<f64> {
    pair.check(y)?;
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!("t = {t} must be positive")));
    }
    Ok(y.iter().zip(pair.weights()).map(|(v, w)| v.abs() * (t * w).min(1.0)).sum())
}

/// Per-block growth test shared by the series: ten consecutive blocks with `S_j >= 10 S_{j-10}`.
fn grows_without_bound(partial: &[f64]) -> bool {
    let mut run = 0;
    for j in 10..partial.len() {
        if partial[j - 10] > 0.0 && partial[j] >= 10.0 * partial[j - 10] {
            run += 1;
            if run >= 10 {
                return true;
            }
        } else {
            run = 0;
        }
    }
    false
}

/// `int_0^1 t^{-gamma} |ln t|^b min(1, t w) dt / t` for one coordinate.
fn gamma_b_weight(w: f64, gamma_: f64, b: f64) -> f64 {
    let s = 1.0 - gamma_;
    // t < 1/w: w int_0^{1/w} t^{-gamma} |ln t|^b dt, an upper incomplete gamma in u = -ln t
    let u0 = w.ln().max(0.0);
    let q = if u0 > 0.0 { gamma_ur(b + 1.0, s * u0) } else { 1.0 };
    let lower = w * gamma(b + 1.0) * q / s.powf(b + 1.0);
    if w <= 1.0 {
        return lower;
    }
    // 1/w < t < 1: int_0^{ln w} e^{gamma u} u^b du
    let upper = integrate_adaptive(&|u: f64| (gamma_ * u).exp() * u.powf(b), 0.0, u0, 1e-12);
    lower + upper
}

/// `|y|_{gamma,b} = int_0^1 t^{-gamma} |ln t|^b K(y,t) dt/t`.
pub fn gamma_b_norm(pair: &ToyPair, y: &[f64], gamma_: f64, b: f64) -> Result<f64> {
    pair.check(y)?;
    if !(0.0..1.0).contains(&gamma_) {
        return Err(Error::Divergent);
    }
    if !(b >= 0.0) {
        return Err(Error::InvalidArgument(format!("b = {b} must be >= 0")));
    }
    let mut terms: Vec<(f64, f64)> = y
        .iter()
        .zip(pair.weights())
        .filter(|(v, _)| **v != 0.0)
        .map(|(v, &w)| (w, v.abs() * gamma_b_weight(w, gamma_, b)))
        .collect();
    terms.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut partial = Vec::with_capacity(terms.len());
    let mut acc = 0.0;
    for (_, t) in &terms {
        acc += t;
        partial.push(acc);
    }
    if grows_without_bound(&partial) {
        return Err(Error::Divergent);
    }
    Ok(acc)
}

/// `sum_n min(2^{n theta} n^a, w 2^{-2nm})`, the per-coordinate cost in `rho`.
fn rho_weight(w: f64, theta: f64, m: usize, a: f64) -> f64 {
    let mut partial = Vec::new();
    let mut acc = 0.0;
    for n in 1..=4000usize {
        let nf = n as f64;
        let c = (nf * theta).exp2() * nf.powf(a);
        let x = w * (-2.0 * nf * m as f64).exp2();
        let t = c.min(x);
        acc += t;
        partial.push(acc);
        if t < 1e-12 * acc {
            return acc;
        }
        if grows_without_bound(&partial) {
            return f64::INFINITY;
        }
    }
    f64::INFINITY
}

/// `rho_{theta,m,a}(y) = inf over (x_n) of sum_n 2^{n theta} n^a ||y - x_n||_Y + 2^{-2nm} ||x_n||_X`.
///
/// The infimum decouples over levels and coordinates with `x_{n,i} in {0, y_i}`; `inf` flags divergence.
pub fn rho_norm(pair: &ToyPair, y: &[f64], theta: f64, m: usize, a: f64) -> Result<f64> {
    pair.check(y)?;
    if !(theta > 0.0) || m == 0 || !(a >= 0.0) {
        return Err(Error::InvalidArgument("need theta > 0, m >= 1, a >= 0".into()));
    }
    let mut terms: Vec<(f64, f64)> = y
        .iter()
        .zip(pair.weights())
        .filter(|(v, _)| **v != 0.0)
        .map(|(v, &w)| (w, v.abs() * rho_weight(w, theta, m, a)))
        .collect();
    terms.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut partial = Vec::with_capacity(terms.len());
    let mut acc = 0.0;
    for (_, t) in &terms {
        acc += t;
        partial.push(acc);
    }
    if !acc.is_finite() || grows_without_bound(&partial) {
        return Ok(f64::INFINITY);
    }
    Ok(acc)
}

/// The minimizing sequence of `rho`, level `n = 1..=levels`.
pub fn rho_minimizer(pair: &ToyPair, y: &[f64], theta: f64, m: usize, a: f64, levels: usize) -> Result<Vec<Vec<f64>>> {
    pair.check(y)?;
    Ok((1..=levels)
        .map(|n| {
            let nf = n as f64;
            let c = (nf * theta).exp2() * nf.powf(a);
            y.iter()
                .zip(pair.weights())
                .map(|(&v, &w)| if w * (-2.0 * nf * m as f64).exp2() <= c { v } else { 0.0 })
                .collect()
        })
        .collect())
}

/// `pi_{theta,m,a}(y, (x_n))` over the supplied levels.
pub fn pi_toy(pair: &ToyPair, y: &[f64], xs: &[Vec<f64>], theta: f64, m: usize, a: f64) -> Result<f64> {
    pair.check(y)?;
    let mut acc = 0.0;
    for (i, x) in xs.iter().enumerate() {
        pair.check(x)?;
        let nf = (i + 1) as f64;
        let diff: Vec<f64> = y.iter().zip(x).map(|(a, b)| a - b).collect();
        acc += (nf * theta).exp2() * nf.powf(a) * pair.norm_y(&diff) + (-2.0 * nf * m as f64).exp2() * pair.norm_x(x);
    }
    Ok(acc)
}

/// Best approximation in `B_X(R)`: fill coordinates in increasing weight order.
pub fn waterfill(pair: &ToyPair, y: &[f64], r: f64) -> Result<(f64, Vec<f64>)> {
    pair.check(y)?;
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&i, &j| pair.weights()[i].total_cmp(&pair.weights()[j]));
    let mut x = vec![0.0; y.len()];
    let mut budget = r.max(0.0);
    let mut dist = 0.0;
    for i in order {
        let w = pair.weights()[i];
        let cost = w * y[i].abs();
        if cost <= budget {
            x[i] = y[i];
            budget -= cost;
        } else {
            let frac = budget / cost;
            x[i] = y[i] * frac;
            dist += y[i].abs() * (1.0 - frac);
            budget = 0.0;
        }
    }
    Ok((dist, x))
}

/// `d_Y(y, B_X(R))`.
pub fn distance_to_ball(pair: &ToyPair, y: &[f64], r: f64) -> Result<f64> {
    waterfill(pair, y, r).map(|p| p.0)
}

/// Element whose distance curve interpolates `d(R_i) = curve(R_i)` at `R_i = 2^i`, `i = 1..=levels`.
pub fn synthesize(curve: impl Fn(f64) -> f64, levels: usize) -> Result<(ToyPair, Vec<f64>)> {
    let mut w = Vec::with_capacity(levels);
    let mut y = Vec::with_capacity(levels);
    let mut prev_r = 0.0;
    let mut prev_d = curve(1.0);
    // the first coordinate carries what is left at R = 1
    for i in 1..=levels {
        let r = (i as f64).exp2();
        let d = curve(r);
        let dy = prev_d - d;
        if !(dy > 0.0) {
            return Err(Error::InvalidArgument(format!("curve must decrease strictly (R = {r})")));
        }
        y.push(dy);
        w.push((r - prev_r) / dy);
        prev_r = r;
        prev_d = d;
    }
    // tail mass beyond the last knot sits on a coordinate that is never filled
    y.push(prev_d);
    w.push(f64::MAX / 4.0);
    Ok((ToyPair::new(w)?, y))
}

/// Outcome of the two-sided norm comparison.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct NormEquivalence {
    pub gamma: f64,
    pub b: f64,
    /// Smallest `C` with `rho <= C |y|_{gamma,b}` over the samples.
    pub c_lower: f64,
    /// Smallest `C` with `|y|_{gamma,b} <= C (||y||_Y + rho)`.
    pub c_upper: f64,
    /// `max(c_lower, c_upper)`: one constant for both sides.
    pub c: f64,
    /// The constant produced by the proof: `max(2C'/alpha_*, 2^{2m+theta+a+1} alpha^*)` with `C'` measured.
    pub proof_constant: f64,
    /// Samples where both sides were flagged infinite.
    pub both_infinite: usize,
    /// Samples flagged infinite on one side only.
    pub inconsistent: usize,
}

pub fn prop_norm_equivalence(pair: &ToyPair, samples: &[Vec<f64>], theta: f64, m: usize, a: f64) -> Result<NormEquivalence> {
    let mf = m as f64;
    let gamma_ = theta / (2.0 * mf + theta);
    let b = 2.0 * mf * a / (2.0 * mf + theta);
    let (mut c_lower, mut c_upper) = (0.0f64, 0.0f64);
    let (mut both, mut bad) = (0, 0);
    for y in samples {
        let rho = rho_norm(pair, y, theta, m, a)?;
        let kb = match gamma_b_norm(pair, y, gamma_, b) {
            Ok(v) => v,
            Err(Error::Divergent) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        match (rho.is_finite(), kb.is_finite()) {
            (false, false) => both += 1,
            (true, true) => {
                if rho > 0.0 {
                    c_lower = c_lower.max(rho / kb);
                    c_upper = c_upper.max(kb / (pair.norm_y(y) + rho));
                }
            }
            _ => bad += 1,
        }
    }
    // |ln t_n|^b / t_n^gamma against n^a 2^{n theta}
    let mut c_ratio = 1.0f64;
    for n in 1..=200usize {
        let nf = n as f64;
        let lt = a * nf.ln() + nf * (2.0 * mf + theta) * std::f64::consts::LN_2;
        let r = lt.powf(b) * nf.powf(a * theta / (2.0 * mf + theta)) / nf.powf(a);
        c_ratio = c_ratio.max(r).max(1.0 / r);
    }
    let alpha_lo = 1.0 - (-(2.0 * mf + theta)).exp2();
    let alpha_hi = 1.0 - (-(2.0 * mf + theta + a)).exp2();
    let proof_constant = (2.0 * c_ratio / alpha_lo).max((2.0 * mf + theta + a + 1.0).exp2() * alpha_hi * c_ratio);
    Ok(NormEquivalence {
        gamma: gamma_,
        b,
        c_lower,
        c_upper,
        c: c_lower.max(c_upper),
        proof_constant,
        both_infinite: both,
        inconsistent: bad,
    })
}

/// Result of the balance-space inclusion test.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct InclusionWitness {
    pub alpha: f64,
    pub beta: f64,
    /// Slope of `ln(R^alpha (ln R)^beta d_Y(y, B_X(R)))` against `ln ln R` over the top half.
    pub b_trend: f64,
    pub in_b: bool,
    /// Per-level terms of `pi(y, (x_{R_n}))`, `R_n = n^{-2} 2^{2nm}`.
    pub terms: Vec<f64>,
    pub partial_sum: f64,
    /// Fitted power-law decay of the terms over the top half (`inf` once they vanish).
    pub decay: f64,
    pub converges: bool,
}

/// Trend threshold for `B_{alpha,beta}` membership (slope in `ln ln R`).
pub const B_TREND_THRESHOLD: f64 = 0.1;

pub fn prop_balance_inclusion(
    pair: &ToyPair,
    y: &[f64],
    theta: f64,
    m: usize,
    a: f64,
    levels: usize,
) -> Result<InclusionWitness> {
    let mf = m as f64;
    let alpha = theta / (2.0 * mf);
    let beta = 2.0 + a + theta / mf;
    // B condition on R = 2^j well past R = e
    let mut x = Vec::new();
    let mut s = Vec::new();
    let jmax = (2.0 * mf * levels as f64).ceil() as usize;
    for j in 4..=jmax {
        let r = (j as f64).exp2();
        let d = distance_to_ball(pair, y, r)?;
        let stat = r.powf(alpha) * r.ln().powf(beta) * d;
        if stat > 0.0 {
            x.push(r.ln().ln());
            s.push(stat.ln());
        }
    }
    let b_trend = if x.len() >= 4 {
        let h = x.len() / 2;
        slope(&x[h..], &s[h..])
    } else {
        f64::NEG_INFINITY
    };
    let mut terms = Vec::with_capacity(levels);
    for n in 1..=levels {
        let nf = n as f64;
        let r_n = (2.0 * nf * mf).exp2() / (nf * nf);
        let (d, xn) = waterfill(pair, y, r_n)?;
        terms.push((nf * theta).exp2() * nf.powf(a) * d + (-2.0 * nf * mf).exp2() * pair.norm_x(&xn));
    }
    let partial_sum: f64 = terms.iter().sum();
    let decay = power_decay(&terms);
    Ok(InclusionWitness {
        alpha,
        beta,
        b_trend,
        in_b: b_trend <= B_TREND_THRESHOLD,
        converges: decay > 1.05,
        terms,
        partial_sum,
        decay,
    })
}

/// `s` in `t_n ~ C n^{-s}` over the top half of positive terms.
fn power_decay(terms: &[f64]) -> f64 {
    let h = terms.len() / 2;
    let pts: Vec<(f64, f64)> =
        terms.iter().enumerate().skip(h).filter(|(_, t)| **t > 0.0).map(|(i, t)| (((i + 1) as f64).ln(), t.ln())).collect();
    if pts.len() < 2 {
        return f64::INFINITY;
    }
    let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    -slope(&x, &y)
}

/// One level of the witness chain.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct BalanceChainRow {
    pub n: usize,
    pub r_n: f64,
    pub l_a: f64,
    /// `(2m)^a 2^{2nm} >= L_a(R_n)`.
    pub upper_ok: bool,
    /// `L_a(R_n) >= 2^{2nm}`.
    pub lower_ok: bool,
    /// `beta_e(L_a(R_n)^{d/2m}) >= beta_e(2^{nd})`.
    pub beta_ok: bool,
    /// `2^{n theta} beta_e(2^{nd}) ||y - x_n||_Y`.
    pub distance_term: f64,
    /// `C (2m)^a / n^a` with `C` measured on the curve.
    pub distance_bound: f64,
    /// `2^{-2nm} ||x_n||_X <= n^{-a}`.
    pub norm_ok: bool,
}

/// The chain of inequalities behind the witness sequence `R_n = n^{-a} 2^{2nm}` under `H(theta, m, e)`.
pub fn lemma_balance_chain(
    pair: &ToyPair,
    y: &[f64],
    theta: f64,
    m: usize,
    e: &YoungFunction,
    a: f64,
    dim: usize,
    levels: usize,
) -> Result<(f64, Vec<BalanceChainRow>)> {
    if !(a > 1.0) {
        return Err(Error::InvalidArgument("H needs a > 1".into()));
    }
    let mf = m as f64;
    let df = dim as f64;
    let la = |r: f64| r * r.ln().powf(a);
    let h_stat = |r: f64, d: f64| la(r).powf(1.0 + theta / (2.0 * mf)) * e.beta(la(r).powf(df / (2.0 * mf))) * d / r;
    let mut rows = Vec::with_capacity(levels);
    let mut c = 0.0f64;
    let mut data = Vec::with_capacity(levels);
    for n in 1..=levels {
        let nf = n as f64;
        let r_n = (2.0 * nf * mf).exp2() / nf.powf(a);
        let (d, xn) = waterfill(pair, y, r_n)?;
        if r_n > std::f64::consts::E {
            c = c.max(h_stat(r_n, d));
        }
        data.push((n, r_n, d, pair.norm_x(&xn)));
    }
    for (n, r_n, d, xnorm) in data {
        let nf = n as f64;
        let l = if r_n > 1.0 { la(r_n) } else { f64::NAN };
        let two = (2.0 * nf * mf).exp2();
        rows.push(BalanceChainRow {
            n,
            r_n,
            l_a: l,
            upper_ok: (2.0 * mf).powf(a) * two >= l,
            lower_ok: l >= two,
            beta_ok: e.beta(l.powf(df / (2.0 * mf))) >= e.beta((nf * df).exp2()) * (1.0 - 1e-12),
            distance_term: (nf * theta).exp2() * e.beta((nf * df).exp2()) * d,
            distance_bound: c * (2.0 * mf).powf(a) / nf.powf(a),
            norm_ok: (-2.0 * nf * mf).exp2() * xnorm <= nf.powf(-a) * (1.0 + 1e-12),
        });
    }
    Ok((c, rows))
}
