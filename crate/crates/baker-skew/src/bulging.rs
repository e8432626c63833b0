//! Order of growth in the first variable and the sampled bulging certificate:
//! the choice of the radius `epsilon` and orbit-bound verification on
//! `U_{r,R} x D(0, epsilon)`.

use num_complex::{Complex, Complex64};
use num_traits::Zero;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::complex::{lift, lower, modulus};
use crate::error::{Error, Result};
use crate::maps::{eval_skew, log_abs_perturbation, BaseMap, Perturbation, SkewProduct};
use crate::scalar::Real;

pub const DEFAULT_BOUNDARY_SAMPLES: usize = 4096;
const W_ANGLES: usize = 64;
const RHO_GRID_STEP: f64 = 0.01;
const GROWTH_CHECK_POINTS: usize = 400;
const GROWTH_CHECK_DECADES: f64 = 8.0;
const GROWTH_CHECK_ANGLES: usize = 1024;
const SUPER_SCAN_STEPS: usize = 256;
const SUPER_TAIL: usize = 64;

/// `log M(r1, r2; h)` sampled on the distinguished boundary
/// `{|z| = r1, |w| = r2}`.
pub fn max_log_modulus(h: &Perturbation, r1: f64, r2: f64, boundary_samples: usize) -> Result<f64> {
    if !(r1 > 0.0 && r2 > 0.0) {
        return Err(Error::Precondition(format!("radii must be positive, got {r1}, {r2}")));
    }
    if boundary_samples < 256 {
        return Err(Error::Precondition(format!("need at least 256 boundary samples, got {boundary_samples}")));
    }
    let w_angles = if h.depends_on_w() { W_ANGLES } else { 1 };
    let mut best = f64::NEG_INFINITY;
    for i in 0..boundary_samples {
        let z = Complex64::from_polar(r1, std::f64::consts::TAU * i as f64 / boundary_samples as f64);
        for j in 0..w_angles {
            let w = Complex64::from_polar(r2, std::f64::consts::TAU * j as f64 / w_angles as f64);
            let v = log_abs_perturbation(h, z, w)?;
            if v.is_nan() {
                return Err(Error::Range("log |h| is not a number".into()));
            }
            best = best.max(v);
        }
    }
    Ok(best)
}

/// `M(r1, r2; h)`; a range error when it exceeds the representable range.
pub fn max_modulus(h: &Perturbation, r1: f64, r2: f64, boundary_samples: usize) -> Result<f64> {
    let l = max_log_modulus(h, r1, r2, boundary_samples)?;
    let m = l.exp();
    if !m.is_finite() {
        return Err(Error::Range(format!("maximum modulus e^{l} exceeds the representable range")));
    }
    Ok(m)
}

pub fn log_spaced_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct OrderEstimate {
    pub slope: f64,
    pub intercept: f64,
    pub r_grid: Vec<f64>,
    pub r2: f64,
    /// Root-mean-square residual of the regression.
    pub residual: f64,
    /// Slopes between consecutive grid points.
    pub local_slopes: Vec<f64>,
}

fn least_squares_line(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    (slope, intercept, (rss / n).sqrt())
}

/// Least-squares slope of `log log M(r, r2; h)` against `log r`.
pub fn estimate_order(h: &Perturbation, r2: f64, r_grid: &[f64]) -> Result<OrderEstimate> {
    estimate_order_with(h, r2, r_grid, DEFAULT_BOUNDARY_SAMPLES)
}

pub fn estimate_order_with(h: &Perturbation, r2: f64, r_grid: &[f64], samples: usize) -> Result<OrderEstimate> {
    if r_grid.len() < 5 {
        return Err(Error::Precondition(format!("order grid needs at least 5 radii, got {}", r_grid.len())));
    }
    if r_grid.windows(2).any(|w| !(w[1] > w[0])) || !(r_grid[0] > 0.0) {
        return Err(Error::Precondition("order grid must be positive and strictly increasing".into()));
    }
    if r_grid[r_grid.len() - 1] / r_grid[0] < 100.0 * (1.0 - 1e-12) {
        return Err(Error::Precondition("order grid must span at least two decades".into()));
    }
    let mut x = Vec::with_capacity(r_grid.len());
    let mut y = Vec::with_capacity(r_grid.len());
    for &r in r_grid {
        let l = max_log_modulus(h, r, r2, samples)?;
        if !(l > 0.0) {
            return Err(Error::Precondition(format!("M({r}, {r2}) <= 1, log log undefined")));
        }
        x.push(r.ln());
        y.push(l.ln());
    }
    let (slope, intercept, residual) = least_squares_line(&x, &y);
    let local_slopes = x.windows(2).zip(y.windows(2)).map(|(a, b)| (b[1] - b[0]) / (a[1] - a[0])).collect();
    Ok(OrderEstimate { slope, intercept, r_grid: r_grid.to_vec(), r2, residual, local_slopes })
}

/// Default `tau = (1 - rho1) / 2` for the sub-exponential branch.
pub fn default_tau(rho1: f64) -> f64 {
    (1.0 - rho1) / 2.0
}

#[derive(Clone, Debug, Serialize)]
pub struct GrowthCheck {
    pub exponent: f64,
    #[serde(rename = "L")]
    pub l: f64,
    pub holds: bool,
    /// Smallest sampled `sigma^exponent - log M(sigma, delta_g; h)`.
    pub margin: f64,
    pub worst_sigma: f64,
}

/// Checks `M(sigma, delta_g; h) <= e^{sigma^exponent}` for `sigma >= L` on a
/// logarithmic grid spanning eight decades.
pub fn check_growth(h: &Perturbation, exponent: f64, l: f64, delta_g: f64) -> Result<GrowthCheck> {
    let grid = log_spaced_grid(l, l * 10f64.powf(GROWTH_CHECK_DECADES), GROWTH_CHECK_POINTS);
    let mut margin = f64::INFINITY;
    let mut worst = l;
    for &s in &grid {
        let m = s.powf(exponent) - max_log_modulus(h, s, delta_g, GROWTH_CHECK_ANGLES)?;
        if m < margin {
            margin = m;
            worst = s;
        }
    }
    Ok(GrowthCheck { exponent, l, holds: margin > 0.0, margin, worst_sigma: worst })
}

#[derive(Clone, Debug, Serialize)]
pub struct ExponentChoice {
    pub rho1: f64,
    pub rho_plus_tau: f64,
    pub default_used: bool,
    pub growth: GrowthCheck,
}

/// Picks `rho1 + tau < 1` so that the growth hypothesis holds from `L` on:
/// the default `tau` when it suffices, otherwise the smallest exponent on a
/// 0.01 grid above it.
pub fn select_exponent(h: &Perturbation, rho1: f64, l: f64, delta_g: f64) -> Result<ExponentChoice> {
    if !(rho1 < 1.0) {
        return Err(Error::Precondition(format!("sub-exponential branch needs rho1 < 1, got {rho1}")));
    }
    let s0 = rho1 + default_tau(rho1);
    let growth = check_growth(h, s0, l, delta_g)?;
    if growth.holds {
        return Ok(ExponentChoice { rho1, rho_plus_tau: s0, default_used: true, growth });
    }
    let first = (s0 / RHO_GRID_STEP).floor() as i64 + 1;
    let last = (1.0 / RHO_GRID_STEP).round() as i64;
    for i in first..last {
        let s = i as f64 * RHO_GRID_STEP;
        let growth = check_growth(h, s, l, delta_g)?;
        if growth.holds {
            return Ok(ExponentChoice { rho1, rho_plus_tau: s, default_used: false, growth });
        }
    }
    Err(Error::Precondition(format!(
        "no exponent below 1 bounds the growth of h from L = {l}; increase L"
    )))
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct EpsilonChoice {
    #[serde(rename = "N")]
    pub n: u64,
    pub epsilon: f64,
    /// `log epsilon`, exact even when `epsilon` underflows a standard float.
    pub log_epsilon: f64,
    /// Largest value of the epsilon-free factor over `k < N`, as a logarithm.
    pub log_max_factor: f64,
}

impl EpsilonChoice {
    pub fn epsilon_in<T: Real>(&self) -> T {
        T::from_f64(self.log_epsilon).exp()
    }
}

fn finish_epsilon(n: u64, log_eps: f64, log_max_factor: f64) -> EpsilonChoice {
    EpsilonChoice { n, epsilon: log_eps.exp(), log_epsilon: log_eps, log_max_factor }
}

/// Sub-exponential branch: `N` and `epsilon` with
/// `e^{(R + 2k|a|)^{rho+tau}} alpha^k epsilon < Re(a)/4` for every `k`.
pub fn find_epsilon(a: Complex64, alpha: f64, rho_plus_tau: f64, r_big: f64, delta_g: f64) -> Result<EpsilonChoice> {
    if !(rho_plus_tau < 1.0) {
        return Err(Error::Precondition(format!("rho + tau must be < 1, got {rho_plus_tau}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Precondition(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let s = rho_plus_tau;
    let abs_a = a.norm();
    let la = alpha.ln();
    let thr = (a.re / 4.0).ln();
    let phi = |k: f64| (r_big + 2.0 * k * abs_a).powf(s) + k * la;
    // phi is concave in k; its maximum on k >= 0 sits where the derivative vanishes.
    let peak = if s > 0.0 {
        let x = (-la / (2.0 * abs_a * s)).powf(1.0 / (s - 1.0));
        ((x - r_big) / (2.0 * abs_a)).max(0.0)
    } else {
        0.0
    };
    let k0 = if phi(peak.ceil()) > phi(peak.floor()) { peak.ceil() } else { peak.floor() };
    let cap = 0.0f64.min(delta_g.ln());
    if phi(k0) < thr {
        return Ok(finish_epsilon(0, cap - std::f64::consts::LN_2, f64::NEG_INFINITY));
    }
    // phi decreases past k0: bracket the last k with phi(k) >= thr, then bisect.
    let mut lo = k0;
    let mut step = 1.0;
    let mut hi = lo + step;
    while phi(hi) >= thr {
        lo = hi;
        step *= 2.0;
        hi = lo + step;
    }
    while hi - lo > 1.0 {
        let mid = ((lo + hi) / 2.0).floor();
        if mid <= lo || mid >= hi {
            // Integers this large are no longer all representable.
            break;
        }
        if phi(mid) >= thr {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let n = lo + 1.0;
    let log_max = phi(k0);
    let candidate = thr - log_max - std::f64::consts::LN_2;
    let log_eps = if candidate < cap { candidate } else { cap - std::f64::consts::LN_2 };
    Ok(finish_epsilon(n as u64, log_eps, log_max))
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SuperAttractingBudget {
    pub d: u32,
    #[serde(rename = "C_g")]
    pub c_g: f64,
    #[serde(rename = "C")]
    pub c: f64,
    pub t: f64,
}

impl SuperAttractingBudget {
    pub fn new(d: u32, c_g: f64, t: f64) -> Result<Self> {
        if d < 2 || !(c_g > 0.0) || !(t > 0.0) {
            return Err(Error::Precondition(format!("bad super-attracting budget d={d}, C_g={c_g}, t={t}")));
        }
        let c = c_g.ln() / (1.0 - d as f64);
        if !((1.0 / t).ln() + c > 0.0) {
            return Err(Error::Precondition(format!("need log(1/t) + C > 0, got t={t}, C={c}")));
        }
        Ok(Self { d, c_g, c, t })
    }

    /// Budget for `g = w^d q` with `t = min(1, e^C) / 2`.
    pub fn for_base(g: &BaseMap) -> Result<Self> {
        let d = g.local_degree();
        let c_g = g
            .super_constant()
            .ok_or_else(|| Error::Precondition("base map is not super-attracting".into()))?;
        let c = c_g.ln() / (1.0 - d as f64);
        Self::new(d, c_g, 0.5 * c.exp().min(1.0))
    }
}

/// Super-attracting branch: `N` and `epsilon < min(t, delta_g)` with
/// `e^{(R + 2k|a|)^{rho1+1}} e^C e^{-d^k (log(1/epsilon) + C)} < Re(a)/4`
/// for every `k`.
pub fn find_epsilon_super(
    a: Complex64,
    budget: &SuperAttractingBudget,
    rho1: f64,
    r_big: f64,
    delta_g: f64,
) -> Result<EpsilonChoice> {
    if !rho1.is_finite() {
        return Err(Error::Precondition("rho1 must be finite".into()));
    }
    let p = rho1 + 1.0;
    let d = budget.d as f64;
    let c = budget.c;
    let thr = (a.re / 4.0).ln();
    let abs_a = a.norm();
    let log_factor = |k: usize, log_inv_eps: f64| {
        (r_big + 2.0 * k as f64 * abs_a).powf(p) + c - d.powi(k as i32) * (log_inv_eps + c)
    };
    let log_inv_t = (1.0 / budget.t).ln();
    let mut last_bad: Option<usize> = None;
    for k in 0..SUPER_SCAN_STEPS {
        if log_factor(k, log_inv_t) >= thr {
            last_bad = Some(k);
        }
    }
    let n = last_bad.map_or(0, |k| k + 1);
    if n + SUPER_TAIL > SUPER_SCAN_STEPS {
        return Err(Error::Range(format!("super-attracting scan did not settle within {SUPER_SCAN_STEPS} steps")));
    }
    // Required log(1/epsilon) for each k < N.
    let mut need = (1.0 / budget.t.min(delta_g)).ln();
    let mut log_max = f64::NEG_INFINITY;
    for k in 0..n {
        let poly = (r_big + 2.0 * k as f64 * abs_a).powf(p);
        let req = (poly + c - thr) / d.powi(k as i32) - c;
        log_max = log_max.max(poly + c);
        need = need.max(req);
    }
    let log_eps = -need - std::f64::consts::LN_2;
    Ok(finish_epsilon(n as u64, log_eps, log_max))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Subexp,
    Super,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    RealPartBound,
    ModulusBound,
    Overflow,
}

#[derive(Clone, Debug, Serialize)]
pub struct Violation {
    pub sample: usize,
    pub probe: bool,
    pub z0: [f64; 2],
    pub w0: [f64; 2],
    pub step: usize,
    pub kind: ViolationKind,
    pub re_z: f64,
    pub abs_z: f64,
    pub bound: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BulgeCertificate {
    pub branch: Branch,
    pub a: [f64; 2],
    pub alpha: f64,
    pub rho_plus_tau: f64,
    #[serde(rename = "L")]
    pub l: f64,
    pub r: f64,
    #[serde(rename = "R")]
    pub r_big: f64,
    #[serde(rename = "N")]
    pub n: u64,
    pub epsilon: f64,
    pub log_epsilon: f64,
    #[serde(rename = "K_steps")]
    pub k_steps: usize,
    pub sample_count: usize,
    pub probe_count: usize,
    pub violation_count: usize,
    /// First recorded violations, at most one per orbit.
    pub violations: Vec<Violation>,
    /// Smallest `Re z_k - (r + k Re(a)/4)` over all steps and samples.
    pub min_real_margin: f64,
    /// Smallest `R + 2k|a| - |z_k|` over all steps and samples.
    pub min_modulus_margin: f64,
    pub worst_sample: Option<usize>,
    pub passed: bool,
}

/// Parameters of a bulging certificate prior to verification.
#[derive(Clone, Debug)]
pub struct BulgeSetup {
    pub branch: Branch,
    pub alpha: f64,
    pub rho_plus_tau: f64,
    pub l: f64,
    pub r: f64,
    pub r_big: f64,
    pub eps: EpsilonChoice,
    pub k_steps: usize,
    pub sample_count: usize,
}

impl BulgeSetup {
    pub fn validate(&self, a: Complex64) -> Result<()> {
        if !(self.l <= self.r && self.r < self.r_big) {
            return Err(Error::Precondition(format!(
                "need L <= r < R, got L={}, r={}, R={}",
                self.l, self.r, self.r_big
            )));
        }
        if !(self.l > (2.0 / a.re).ln()) {
            return Err(Error::Precondition(format!("need L > log(2/Re a) = {}", (2.0 / a.re).ln())));
        }
        Ok(())
    }
}

/// Stratified (grid plus jitter) samples of `U_{r,R} = {Re z > r, |z| < R}`
/// paired with `w` uniform in the unit disk; the caller scales `w` by epsilon.
pub fn sample_box(r: f64, r_big: f64, count: usize, seed: u64) -> Vec<(Complex64, Complex64)> {
    let y = (r_big * r_big - r * r).max(0.0).sqrt();
    let (w, h) = (r_big - r, 2.0 * y);
    if count == 0 || !(w > 0.0 && h > 0.0) {
        return Vec::new();
    }
    let frac = {
        // Area of the circular segment over the bounding box.
        let theta = 2.0 * (y / r_big).atan2(r / r_big);
        0.5 * r_big * r_big * (theta - theta.sin()) / (w * h)
    };
    let cells = ((count as f64 / frac.max(1e-3)).sqrt().ceil() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        for i in 0..cells {
            for j in 0..cells {
                let x = r + w * (i as f64 + rng.gen::<f64>()) / cells as f64;
                let yy = -y + h * (j as f64 + rng.gen::<f64>()) / cells as f64;
                let z = Complex64::new(x, yy);
                let u: f64 = rng.gen();
                let t: f64 = rng.gen();
                if x > r && z.norm() < r_big && out.len() < count {
                    out.push((z, Complex64::from_polar(u.sqrt(), std::f64::consts::TAU * t)));
                }
            }
        }
    }
    out
}

struct Outcome {
    real_margin: f64,
    modulus_margin: f64,
    violation: Option<Violation>,
}

fn check_orbit<T: Real>(
    map: &SkewProduct,
    setup: &BulgeSetup,
    idx: usize,
    probe: bool,
    z0: Complex<T>,
    w0: Complex<T>,
) -> Outcome {
    let a = map.f.a;
    let mut p = (z0, w0);
    let z0f = lower(&p.0);
    let w0f = lower(&p.1);
    let mut real_margin = f64::INFINITY;
    let mut modulus_margin = f64::INFINITY;
    let record = |step: usize, kind: ViolationKind, re_z: f64, abs_z: f64, bound: f64| Violation {
        sample: idx,
        probe,
        z0: [z0f.re, z0f.im],
        w0: [w0f.re, w0f.im],
        step,
        kind,
        re_z,
        abs_z,
        bound,
    };
    for k in 0..=setup.k_steps {
        if k > 0 {
            match eval_skew(map, &p) {
                Ok(next) => p = next,
                Err(_) => {
                    return Outcome {
                        real_margin,
                        modulus_margin,
                        violation: Some(record(k, ViolationKind::Overflow, f64::NAN, f64::INFINITY, f64::NAN)),
                    }
                }
            }
        }
        let re_bound = setup.r + k as f64 * a.re / 4.0;
        let abs_bound = setup.r_big + 2.0 * k as f64 * a.norm();
        let re = p.0.re.to_f64();
        let abs = modulus(&p.0).to_f64();
        let rm = re - re_bound;
        let mm = abs_bound - abs;
        real_margin = real_margin.min(rm);
        modulus_margin = modulus_margin.min(mm);
        // Literal form of the escape-rate bound: |z_k| >= Re z_k > r + k Re(a)/4.
        if !(rm > 0.0) || !(abs >= re) {
            return Outcome { real_margin, modulus_margin, violation: Some(record(k, ViolationKind::RealPartBound, re, abs, re_bound)) };
        }
        if !(mm > 0.0) {
            return Outcome { real_margin, modulus_margin, violation: Some(record(k, ViolationKind::ModulusBound, re, abs, abs_bound)) };
        }
    }
    Outcome { real_margin, modulus_margin, violation: None }
}

/// Verifies both orbit bounds of the bulging lemma on explicit unit-disk
/// samples (scaled by epsilon) and on extra probe points taken verbatim.
pub fn verify_bulge_bounds_on<T: Real>(
    map: &SkewProduct,
    setup: &BulgeSetup,
    samples: &[(Complex64, Complex64)],
    probes: &[(Complex64, Complex64)],
) -> Result<BulgeCertificate> {
    setup.validate(map.f.a)?;
    let eps: T = setup.eps.epsilon_in();
    if samples.iter().any(|s| !s.1.is_zero()) && eps.is_zero() {
        return Err(Error::Range("epsilon underflows at this precision; use extended precision".into()));
    }
    let mut jobs: Vec<(usize, bool, Complex<T>, Complex<T>)> = samples
        .iter()
        .enumerate()
        .map(|(i, (z, u))| {
            let w = lift::<T>(*u) * Complex::new(eps.clone(), T::zero());
            (i, false, lift::<T>(*z), w)
        })
        .collect();
    jobs.extend(probes.iter().enumerate().map(|(i, (z, w))| (samples.len() + i, true, lift::<T>(*z), lift::<T>(*w))));
    let outcomes: Vec<Outcome> = jobs
        .into_par_iter()
        .map(|(i, probe, z, w)| check_orbit(map, setup, i, probe, z, w))
        .collect();
    let mut violations = Vec::new();
    let mut min_real = f64::INFINITY;
    let mut min_mod = f64::INFINITY;
    let mut worst: Option<(usize, f64)> = None;
    for (i, o) in outcomes.into_iter().enumerate() {
        min_real = min_real.min(o.real_margin);
        min_mod = min_mod.min(o.modulus_margin);
        let score = if o.violation.is_some() { f64::NEG_INFINITY } else { o.real_margin.min(o.modulus_margin) };
        if worst.map_or(true, |(_, s)| score < s) {
            worst = Some((i, score));
        }
        if let Some(v) = o.violation {
            violations.push(v);
        }
    }
    let a = map.f.a;
    Ok(BulgeCertificate {
        branch: setup.branch,
        a: [a.re, a.im],
        alpha: setup.alpha,
        rho_plus_tau: setup.rho_plus_tau,
        l: setup.l,
        r: setup.r,
        r_big: setup.r_big,
        n: setup.eps.n,
        epsilon: setup.eps.epsilon,
        log_epsilon: setup.eps.log_epsilon,
        k_steps: setup.k_steps,
        sample_count: samples.len(),
        probe_count: probes.len(),
        violation_count: violations.len(),
        passed: violations.is_empty(),
        violations,
        min_real_margin: min_real,
        min_modulus_margin: min_mod,
        worst_sample: worst.map(|w| w.0),
    })
}

/// Samples `setup.sample_count` stratified points and verifies the bounds.
pub fn verify_bulge_bounds<T: Real>(
    map: &SkewProduct,
    setup: &BulgeSetup,
    probes: &[(Complex64, Complex64)],
    seed: u64,
) -> Result<BulgeCertificate> {
    let samples = sample_box(setup.r, setup.r_big, setup.sample_count, seed);
    verify_bulge_bounds_on::<T>(map, setup, &samples, probes)
}

/// Point `index` of the sample set used by [`verify_bulge_bounds`] (samples
/// first, then probes), with `w` already scaled.
pub fn sample_point(
    setup: &BulgeSetup,
    probes: &[(Complex64, Complex64)],
    seed: u64,
    index: usize,
) -> Option<(Complex64, Complex64)> {
    let samples = sample_box(setup.r, setup.r_big, setup.sample_count, seed);
    if index < samples.len() {
        let (z, u) = samples[index];
        Some((z, u * setup.eps.epsilon))
    } else {
        probes.get(index - samples.len()).copied()
    }
}

/// Grid used when the order of `h` is estimated inside [`plan_bulging`].
pub fn default_order_grid() -> Vec<f64> {
    log_spaced_grid(1e2, 1e4, 21)
}

#[derive(Clone, Debug)]
pub struct BulgeRequest {
    pub l: f64,
    pub r: f64,
    pub r_big: f64,
    pub k_steps: usize,
    pub sample_count: usize,
    /// Order of `h` in `z`; estimated on [`default_order_grid`] when absent.
    pub rho1: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct BulgePlan {
    pub branch: Branch,
    pub rho1: f64,
    pub order: Option<OrderEstimate>,
    pub exponent: Option<ExponentChoice>,
    pub epsilon: EpsilonChoice,
}

/// Chooses the branch from the local degree of `g`, then the exponent and
/// `(N, epsilon)`, and returns the setup ready for verification.
pub fn plan_bulging(map: &SkewProduct, req: &BulgeRequest) -> Result<(BulgeSetup, BulgePlan)> {
    let g = &map.g;
    let (rho1, order) = match req.rho1 {
        Some(r) => (r, None),
        None => {
            let est = estimate_order(&map.h, g.delta_g, &default_order_grid())?;
            (est.slope, Some(est))
        }
    };
    let (branch, rho_plus_tau, exponent, eps) = if g.local_degree() >= 2 {
        let budget = SuperAttractingBudget::for_base(g)?;
        let eps = find_epsilon_super(map.f.a, &budget, rho1, req.r_big, g.delta_g)?;
        (Branch::Super, rho1 + 1.0, None, eps)
    } else {
        let choice = select_exponent(&map.h, rho1, req.l, g.delta_g)?;
        let eps = find_epsilon(map.f.a, g.alpha, choice.rho_plus_tau, req.r_big, g.delta_g)?;
        (Branch::Subexp, choice.rho_plus_tau, Some(choice), eps)
    };
    let setup = BulgeSetup {
        branch,
        alpha: g.alpha,
        rho_plus_tau,
        l: req.l,
        r: req.r,
        r_big: req.r_big,
        eps,
        k_steps: req.k_steps,
        sample_count: req.sample_count,
    };
    setup.validate(map.f.a)?;
    Ok((setup, BulgePlan { branch, rho1, order, exponent, epsilon: eps }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::FatouMap;
    use crate::scalar::Ext;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn cube() -> Perturbation {
        Perturbation::PolyZ(vec![c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)])
    }

    fn bulging_map() -> SkewProduct {
        SkewProduct { f: FatouMap::unit(), h: cube(), g: BaseMap::linear(c(0.5, 0.0), 0.9).unwrap() }
    }

    #[test]
    fn max_modulus_examples() {
        let z5 = Perturbation::PolyZ(vec![c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]);
        assert!((max_modulus(&z5, 10.0, 1.0, 4096).unwrap() - 1e5).abs() < 1e-6);
        let r: f64 = 7.5;
        assert!((max_modulus(&Perturbation::Exp(1), r, 0.3, 4096).unwrap() - r.exp()).abs() < 1e-9 * r.exp());
        let zw = Perturbation::PolyZW(vec![vec![], vec![c(0.0, 0.0), c(1.0, 0.0)]]);
        assert!((max_modulus(&zw, 3.0, 2.0, 4096).unwrap() - 6.0).abs() < 1e-12);
        assert!(matches!(max_modulus(&Perturbation::Exp(1), 1000.0, 1.0, 4096), Err(Error::Range(_))));
        assert!(max_modulus(&zw, 3.0, 2.0, 100).is_err());
    }

    #[test]
    fn order_of_exponentials_and_polynomials() {
        let grid = log_spaced_grid(1e2, 1e4, 21);
        let e1 = estimate_order(&Perturbation::Exp(1), 1.0, &grid).unwrap();
        assert!((e1.slope - 1.0).abs() < 0.01, "{}", e1.slope);
        let e2 = estimate_order(&Perturbation::Exp(2), 1.0, &grid).unwrap();
        assert!((e2.slope - 2.0).abs() < 0.01, "{}", e2.slope);
        let z5 = Perturbation::PolyZ(vec![c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]);
        let p = estimate_order(&z5, 1.0, &grid).unwrap();
        // Oracle: log log M = log 5 + log log r, so the slope is the LS slope of log t.
        let t: Vec<f64> = grid.iter().map(|r| r.ln()).collect();
        let y: Vec<f64> = t.iter().map(|t| t.ln()).collect();
        let (oracle, _, _) = least_squares_line(&t, &y);
        assert!((p.slope - oracle).abs() < 1e-9);
        assert!(p.slope < 0.15);
        assert!(p.local_slopes.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn order_rejects_bad_grids() {
        assert!(estimate_order(&Perturbation::Exp(1), 1.0, &[100.0, 200.0, 300.0]).is_err());
        assert!(estimate_order(&Perturbation::Exp(1), 1.0, &log_spaced_grid(100.0, 500.0, 6)).is_err());
        let small = Perturbation::PolyZ(vec![c(0.5, 0.0)]);
        assert!(estimate_order(&small, 1.0, &log_spaced_grid(1e2, 1e4, 6)).is_err());
    }

    #[test]
    fn epsilon_example() {
        let e = find_epsilon(c(1.0, 0.0), 0.5, 0.5, 10.0, 1.0).unwrap();
        assert_eq!(e.n, 10);
        // Oracle by direct scan of the factor.
        let factor = |k: f64| (10.0 + 2.0 * k).sqrt().exp() * 0.5f64.powf(k);
        assert!(factor(9.0) > 0.25 && factor(10.0) < 0.25);
        assert!((0..100).skip(10).all(|k| factor(k as f64) < 0.25));
        let max = (0..10).map(|k| factor(k as f64)).fold(0.0, f64::max);
        assert!((max - 23.6).abs() < 0.05);
        assert!((e.epsilon - 0.125 / max).abs() < 1e-12);
        assert!((e.epsilon - 0.0053).abs() < 1e-4);
        for k in 0..200 {
            assert!(factor(k as f64) * e.epsilon < 0.25);
        }
    }

    #[test]
    fn epsilon_terminates_near_one() {
        for alpha in [0.99, 0.9999, 1.0 - 1e-9] {
            let e = find_epsilon(c(1.0, 0.0), alpha, 0.5, 10.0, 1.0).unwrap();
            assert!(e.n > 0);
            assert!(e.epsilon < 1.0);
        }
        assert!(find_epsilon(c(1.0, 0.0), 0.5, 1.0, 10.0, 1.0).is_err());
    }

    #[test]
    fn super_epsilon_example() {
        let g = BaseMap::monomial(2, 0.9).unwrap();
        let budget = SuperAttractingBudget::for_base(&g).unwrap();
        assert_eq!(budget.c, 0.0);
        assert!((1.0 / budget.t).ln() + budget.c > 0.0);
        let e = find_epsilon_super(c(1.0, 0.0), &budget, 2.0, 10.0, 0.9).unwrap();
        assert!(e.n > 0);
        assert!(e.log_epsilon < (0.25f64).ln() - 1000.0);
        assert!(e.log_epsilon < budget.t.ln());
        // Oracle: the reduced inequality e^{(10+2k)^3} eps^{2^k} < 1/4, in logs.
        for k in 0..60 {
            let lhs = (10.0 + 2.0 * k as f64).powi(3) + 2f64.powi(k) * e.log_epsilon;
            assert!(lhs < 0.25f64.ln(), "k={k}");
        }
        let eps: Ext = e.epsilon_in();
        assert!(eps > Ext::zero());
    }

    fn subexp_setup(map: &SkewProduct, l: f64, r: f64, r_big: f64, k_steps: usize, samples: usize) -> BulgeSetup {
        let choice = select_exponent(&map.h, 0.0, l, map.g.delta_g).unwrap();
        let eps = find_epsilon(map.f.a, map.g.alpha, choice.rho_plus_tau, r_big, map.g.delta_g).unwrap();
        BulgeSetup {
            branch: Branch::Subexp,
            alpha: map.g.alpha,
            rho_plus_tau: choice.rho_plus_tau,
            l,
            r,
            r_big,
            eps,
            k_steps,
            sample_count: samples,
        }
    }

    #[test]
    fn default_tau_is_too_small_at_l_ten() {
        let g = check_growth(&cube(), 0.5, 10.0, 0.9).unwrap();
        assert!(!g.holds);
        let choice = select_exponent(&cube(), 0.0, 10.0, 0.9).unwrap();
        assert!(!choice.default_used);
        // Oracle: sigma^s >= 3 log sigma on [10, inf) first holds at s = log(3 log 10)/log 10.
        let s_min = (3.0 * 10f64.ln()).ln() / 10f64.ln();
        assert!(choice.rho_plus_tau >= s_min && choice.rho_plus_tau < s_min + 0.011);
    }

    #[test]
    fn bulging_map_passes_small() {
        let map = bulging_map();
        let setup = subexp_setup(&map, 10.0, 10.0, 20.0, 60, 200);
        let cert = verify_bulge_bounds::<f64>(&map, &setup, &[], 3).unwrap();
        assert!(cert.passed, "{:?}", cert.violations.first());
        assert!(cert.min_real_margin > 0.0);
    }

    #[test]
    fn fiber_samples_have_fiber_margin() {
        let map = bulging_map();
        let setup = subexp_setup(&map, 10.0, 10.0, 20.0, 40, 0);
        let probes: Vec<_> = sample_box(10.0, 20.0, 50, 9).into_iter().map(|(z, _)| (z, c(0.0, 0.0))).collect();
        let cert = verify_bulge_bounds_on::<f64>(&map, &setup, &[], &probes).unwrap();
        assert!(cert.passed);
        // On the fiber each step gains at least Re(a) - e^{-L} over z_0.
        assert!(cert.min_real_margin >= 0.0);
    }

    #[test]
    fn super_branch_in_extended_precision() {
        crate::scalar::set_extended_digits(40);
        let g = BaseMap::monomial(2, 0.9).unwrap();
        let map = SkewProduct { f: FatouMap::unit(), h: Perturbation::Exp(2), g: g.clone() };
        let budget = SuperAttractingBudget::for_base(&g).unwrap();
        let eps = find_epsilon_super(map.f.a, &budget, 2.0, 20.0, g.delta_g).unwrap();
        let setup = BulgeSetup {
            branch: Branch::Super,
            alpha: g.alpha,
            rho_plus_tau: 3.0,
            l: 10.0,
            r: 10.0,
            r_big: 20.0,
            eps,
            k_steps: 12,
            sample_count: 12,
        };
        let cert = verify_bulge_bounds::<Ext>(&map, &setup, &[], 5).unwrap();
        assert!(cert.passed, "{:?}", cert.violations.first());
        assert!(matches!(verify_bulge_bounds::<f64>(&map, &setup, &[], 5), Err(Error::Range(_))));
    }

    #[test]
    fn strata_cover_the_box() {
        let pts = sample_box(10.0, 20.0, 1000, 42);
        assert_eq!(pts.len(), 1000);
        assert!(pts.iter().all(|(z, w)| z.re > 10.0 && z.norm() < 20.0 && w.norm() < 1.0));
        assert_eq!(pts, sample_box(10.0, 20.0, 1000, 42));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn shrinking_epsilon_keeps_a_pass(scale in 0.0f64..1.0) {
            let map = bulging_map();
            let setup = subexp_setup(&map, 10.0, 10.0, 20.0, 40, 60);
            let samples = sample_box(10.0, 20.0, 60, 11);
            let base = verify_bulge_bounds_on::<f64>(&map, &setup, &samples, &[]).unwrap();
            prop_assert!(base.passed);
            let shrunk: Vec<_> = samples.iter().map(|(z, u)| (*z, u * scale)).collect();
            let cert = verify_bulge_bounds_on::<f64>(&map, &setup, &shrunk, &[]).unwrap();
            prop_assert!(cert.passed);
        }

        #[test]
        fn order_is_independent_of_r2(k in 1u32..3, r2 in prop::sample::select(vec![0.5, 1.0, 2.0])) {
            let grid = log_spaced_grid(1e2, 1e4, 11);
            let h = Perturbation::Exp(k);
            let base = estimate_order_with(&h, 1.0, &grid, 512).unwrap();
            let other = estimate_order_with(&h, r2, &grid, 512).unwrap();
            prop_assert!((base.slope - other.slope).abs() <= 0.02);
        }
    }
}
