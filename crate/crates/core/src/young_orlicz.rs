//! Young functions and Orlicz norms on lattice functions.

use std::fmt;
use std::sync::Arc;

use crate::gridfn::{multi_indices, GridFunction};
use crate::{Error, Result};

type Eval = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Which family a [`YoungFunction`] belongs to.
#[derive(Debug, Clone, PartialEq)]
pub enum YoungKind {
    Power(f64),
    /// `(1 + |t|) ln(1 + |t|)`
    LogEntropy,
    /// `(1 + |t|) ln(1 + ln(1 + |t|))`
    LogLog,
    Conjugate(Box<YoungKind>),
    User(String),
}

/// Convex symmetric gauge with certified growth constants.
#[derive(Clone)]
pub struct YoungFunction {
    kind: YoungKind,
    eval: Eval,
    lambda: f64,
    monotone_slope: bool,
}

impl fmt::Debug for YoungFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("YoungFunction")
            .field("label", &self.label())
            .field("lambda", &self.lambda)
            .field("monotone_slope", &self.monotone_slope)
            .finish()
    }
}

/// Log-spaced certification grid on `[1e-8, 1e8]`.
fn cert_grid() -> impl Iterator<Item = f64> {
    (0..=1600).map(|i| 10f64.powf(-8.0 + i as f64 * 0.01))
}

struct Certificate {
    lambda: f64,
    monotone_slope: bool,
    increasing: bool,
    symmetric: bool,
    origin: bool,
}

fn certify(e: &dyn Fn(f64) -> f64) -> Certificate {
    let origin = e(0.0).abs() < 1e-300;
    let mut lambda = 1.0f64;
    let mut monotone_slope = true;
    let mut increasing = true;
    let mut symmetric = true;
    let mut prev_val = 0.0;
    let mut prev_slope = 0.0;
    for s in cert_grid() {
        let v = e(s);
        if !(v.is_finite() && v > prev_val) {
            increasing = false;
        }
        let vm = e(-s);
        if (vm - v).abs() > 1e-12 * v.abs() {
            symmetric = false;
        }
        let v2 = e(2.0 * s);
        let r = if v > 0.0 { v2 / v } else { f64::INFINITY };
        lambda = lambda.max(r);
        let slope = v / s;
        if slope < prev_slope * (1.0 - 1e-12) {
            monotone_slope = false;
        }
        prev_slope = slope;
        prev_val = v;
    }
    Certificate { lambda, monotone_slope, increasing, symmetric, origin }
}

impl YoungFunction {
    /// `e_p(t) = |t|^p`, `p > 1`.
    pub fn power(p: f64) -> Result<Self> {
        if !(p > 1.0 && p.is_finite()) {
            return Err(Error::NotYoung(format!("power needs p > 1, got {p}")));
        }
        Ok(YoungFunction {
            kind: YoungKind::Power(p),
            eval: Arc::new(move |t: f64| t.abs().powf(p)),
            lambda: 2f64.powf(p),
            monotone_slope: true,
        })
    }

    pub fn log_entropy() -> Self {
        Self::builtin(YoungKind::LogEntropy, Arc::new(|t: f64| {
            let a = t.abs();
            (1.0 + a) * a.ln_1p()
        }))
    }

    pub fn loglog() -> Self {
        Self::builtin(YoungKind::LogLog, Arc::new(|t: f64| {
            let a = t.abs();
            (1.0 + a) * a.ln_1p().ln_1p()
        }))
    }

    fn builtin(kind: YoungKind, eval: Eval) -> Self {
        let c = certify(eval.as_ref());
        YoungFunction { kind, eval, lambda: c.lambda, monotone_slope: c.monotone_slope }
    }

    /// User-supplied gauge; rejected unless it passes the grid certification.
    pub fn user(label: &str, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Result<Self> {
        let eval: Eval = Arc::new(f);
        let c = certify(eval.as_ref());
        let fail = |why: &str| Err(Error::NotYoung(format!("{label}: {why}")));
        if !c.origin {
            return fail("e(0) != 0");
        }
        if !c.symmetric {
            return fail("not even");
        }
        if !c.increasing {
            return fail("not strictly increasing on (0, inf)");
        }
        if !c.lambda.is_finite() || c.lambda > 1e6 {
            return fail("doubling condition fails");
        }
        if !c.monotone_slope {
            return fail("e(s)/s is not nondecreasing");
        }
        Ok(YoungFunction { kind: YoungKind::User(label.to_string()), eval, lambda: c.lambda, monotone_slope: true })
    }

    pub fn kind(&self) -> &YoungKind {
        &self.kind
    }

    pub fn label(&self) -> String {
        fn name(k: &YoungKind) -> String {
            match k {
                YoungKind::Power(p) => format!("power({p})"),
                YoungKind::LogEntropy => "log_entropy".into(),
                YoungKind::LogLog => "loglog".into(),
                YoungKind::Conjugate(inner) => format!("conjugate({})", name(inner)),
                YoungKind::User(s) => format!("user({s})"),
            }
        }
        name(&self.kind)
    }

    /// Empirical doubling constant `sup e(2s)/e(s)` on the certification grid.
    pub fn doubling_constant(&self) -> f64 {
        self.lambda
    }

    /// Whether both growth conditions hold on the certification grid.
    pub fn is_certified(&self) -> bool {
        self.lambda.is_finite() && self.monotone_slope
    }

    pub fn monotone_slope(&self) -> bool {
        self.monotone_slope
    }

    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        (self.eval)(t)
    }

    /// Legendre conjugate `e*(s) = sup_t (|s| t - e(t))`.
    ///
    /// The result is not certified: the conjugate of `e_log` is flat near 0
    /// and grows exponentially, so its flags are reported as measured.
    pub fn conjugate(&self) -> YoungFunction {
        let kind = YoungKind::Conjugate(Box::new(self.kind.clone()));
        let eval: Eval = match self.kind {
            YoungKind::Power(p) => {
                let q = p / (p - 1.0);
                let c = (p - 1.0) * p.powf(-p / (p - 1.0));
                Arc::new(move |s: f64| c * s.abs().powf(q))
            }
            YoungKind::LogEntropy => Arc::new(|s: f64| {
                let a = s.abs();
                if a <= 1.0 {
                    0.0
                } else {
                    (a - 1.0).exp_m1() - (a - 1.0)
                }
            }),
            _ => {
                let base = self.eval.clone();
                Arc::new(move |s: f64| legendre_sup(base.as_ref(), s.abs()))
            }
        };
        let c = certify(eval.as_ref());
        YoungFunction { kind, eval, lambda: c.lambda, monotone_slope: c.monotone_slope }
    }

    /// `e^{-1}(a) = sup { c >= 0 : e(c) <= a }`.
    pub fn inverse(&self, a: f64) -> f64 {
        if a <= 0.0 && self.eval(1e-300) > 0.0 {
            return 0.0;
        }
        let mut hi = 1.0;
        while self.eval(hi) <= a {
            hi *= 2.0;
            if hi > 1e300 {
                return f64::INFINITY;
            }
        }
        let mut lo = 0.0;
        if self.eval(0.5 * hi) <= a {
            lo = 0.5 * hi;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.eval(mid) <= a {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * hi {
                break;
            }
        }
        lo
    }

    /// Fundamental function `beta_e(R) = R / e^{-1}(R)`.
    pub fn beta(&self, r: f64) -> f64 {
        r / self.inverse(r)
    }

    /// `phi_e(r) = 1 / e^{-1}(1/r)`.
    pub fn phi(&self, r: f64) -> f64 {
        1.0 / self.inverse(1.0 / r)
    }
}

/// `sup_{t >= 0} (s t - e(t))` by bracketing and golden-section search.
fn legendre_sup(e: &(dyn Fn(f64) -> f64 + Send + Sync), s: f64) -> f64 {
    if s == 0.0 {
        return 0.0;
    }
    let g = |t: f64| s * t - e(t);
    let mut hi = 1.0;
    // g is concave with g(0) = 0: march until it turns down
    while g(hi) >= g(0.5 * hi) {
        hi *= 2.0;
        if hi > 1e200 {
            return f64::INFINITY;
        }
    }
    let mut a = 0.0;
    let mut b = hi;
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut gc, mut gd) = (g(c), g(d));
    for _ in 0..300 {
        if gc > gd {
            b = d;
            d = c;
            gd = gc;
            c = b - r * (b - a);
            gc = g(c);
        } else {
            a = c;
            c = d;
            gc = gd;
            d = a + r * (b - a);
            gd = g(d);
        }
        if (b - a) <= 1e-14 * b.max(1e-300) {
            break;
        }
    }
    g(0.5 * (a + b)).max(0.0)
}

fn modular(values: &[f64], weights: &[f64], e: &YoungFunction, c: f64) -> f64 {
    let inv = 1.0 / c;
    let mut acc = 0.0;
    for (v, w) in values.iter().zip(weights) {
        if *w != 0.0 && *v != 0.0 {
            acc += w * e.eval(v * inv);
        }
    }
    acc
}

const OVERFLOW_GUARD: f64 = 1e250;

/// Luxembourg norm of sampled values under explicit quadrature weights.
pub fn luxembourg_norm_weighted(values: &[f64], weights: &[f64], e: &YoungFunction) -> Result<f64> {
    let l1: f64 = values.iter().zip(weights).map(|(v, w)| v.abs() * w).sum();
    let sup = values.iter().zip(weights).filter(|(_, w)| **w != 0.0).fold(0.0f64, |m, (v, _)| m.max(v.abs()));
    if sup == 0.0 {
        return Ok(0.0);
    }
    let seed = l1 + sup;
    let f = |c: f64| -> f64 {
        let m = modular(values, weights, e, c);
        if m.is_finite() && m < OVERFLOW_GUARD {
            m
        } else {
            f64::INFINITY
        }
    };
    // bracket: g(lo) > 1 >= g(hi)
    let mut hi = seed;
    let mut ghi = f(hi);
    let mut steps = 0;
    while ghi > 1.0 {
        hi *= 2.0;
        ghi = f(hi);
        steps += 1;
        if steps > 2000 || !hi.is_finite() {
            return Err(Error::NonIntegrable);
        }
    }
    let mut lo = hi * 0.5;
    let mut glo = f(lo);
    steps = 0;
    while glo <= 1.0 {
        hi = lo;
        ghi = glo;
        lo *= 0.5;
        glo = f(lo);
        steps += 1;
        if steps > 2000 {
            return Ok(hi);
        }
    }
    // Illinois on u = ln c with bisection whenever the secant is unusable
    let (mut ua, mut ub) = (lo.ln(), hi.ln());
    let (mut fa, mut fb) = (glo - 1.0, ghi - 1.0);
    let mut side = 0i8;
    for _ in 0..200 {
        if (ub - ua) <= 1e-11 {
            break;
        }
        let mut u = if fa.is_finite() {
            ub - fb * (ub - ua) / (fb - fa)
        } else {
            0.5 * (ua + ub)
        };
        if !(u > ua && u < ub) {
            u = 0.5 * (ua + ub);
        }
        let fu = f(u.exp()) - 1.0;
        if fu > 0.0 {
            ua = u;
            fa = fu;
            if side == -1 {
                fb *= 0.5;
            }
            side = -1;
        } else {
            ub = u;
            fb = fu;
            if side == 1 && fa.is_finite() {
                fa *= 0.5;
            }
            side = 1;
        }
        if fu.abs() < 1e-13 {
            ub = u;
            break;
        }
    }
    Ok(ub.exp())
}

/// `inf { c > 0 : sum w e(f/c) <= 1 }` with the lattice trapezoid weights.
pub fn luxembourg_norm(f: &GridFunction, e: &YoungFunction) -> Result<f64> {
    luxembourg_norm_weighted(f.values(), f.lattice().weights(), e)
}

/// Edge buffer excluded from derivative norms of order `k`.
pub fn derivative_buffer(k: usize) -> usize {
    if k == 0 {
        0
    } else {
        k.max(2)
    }
}

/// Which norm is applied to each `x^gamma d_alpha f` term.
#[derive(Debug, Clone, Copy)]
enum Term<'a> {
    Orlicz(&'a YoungFunction),
    Sup,
}

fn sobolev_sum(f: &GridFunction, k: usize, l: usize, term: Term<'_>) -> Result<f64> {
    let d = f.dim();
    let lat = f.lattice().clone();
    let buffer = derivative_buffer(k);
    let weights = if buffer == 0 { lat.weights().to_vec() } else { lat.buffered_weights(&vec![buffer; d]) };
    let points = lat.points();
    let gammas = multi_indices(d, l);
    let mut total = 0.0;
    let mut scratch = vec![0.0; lat.len()];
    for alpha in multi_indices(d, k) {
        let g = if alpha.iter().all(|&a| a == 0) { f.clone() } else { f.derivative(&alpha)? };
        for gamma in &gammas {
            for (i, s) in scratch.iter_mut().enumerate() {
                let mut m = g.values()[i];
                for (a, &p) in gamma.iter().enumerate() {
                    if p > 0 {
                        m *= points[i * d + a].powi(p as i32);
                    }
                }
                *s = m;
            }
            total += match term {
                Term::Orlicz(e) => luxembourg_norm_weighted(&scratch, &weights, e)?,
                Term::Sup => scratch
                    .iter()
                    .zip(&weights)
                    .filter(|(_, w)| **w != 0.0)
                    .fold(0.0f64, |m, (v, _)| m.max(v.abs())),
            };
        }
    }
    Ok(total)
}

/// `sum_{|gamma| <= l} sum_{|alpha| <= k} || x^gamma d_alpha f ||_(e)`.
pub fn weighted_sobolev_orlicz_norm(f: &GridFunction, k: usize, l: usize, e: &YoungFunction) -> Result<f64> {
    sobolev_sum(f, k, l, Term::Orlicz(e))
}

/// `||f||_{k,(e)}`, the unweighted Sobolev-Orlicz norm.
pub fn sobolev_orlicz_norm(f: &GridFunction, k: usize, e: &YoungFunction) -> Result<f64> {
    sobolev_sum(f, k, 0, Term::Orlicz(e))
}

/// `||f||_{k,inf} = sum_{|alpha| <= k} sup |d_alpha f|`.
pub fn sobolev_sup_norm(f: &GridFunction, k: usize) -> Result<f64> {
    sobolev_sum(f, k, 0, Term::Sup)
}

/// `2 ||f||_(e) ||g||_(e*) - |int f g|`; nonnegative by the Hölder inequality.
pub fn holder_defect(f: &GridFunction, g: &GridFunction, e: &YoungFunction) -> Result<f64> {
    let nf = luxembourg_norm(f, e)?;
    let ng = luxembourg_norm(g, &e.conjugate())?;
    let ip = f.inner(g)?;
    Ok(2.0 * nf * ng - ip.abs())
}
