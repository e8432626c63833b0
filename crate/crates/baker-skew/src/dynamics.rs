//! Orbit iteration, escape/return classification, and checks of the
//! one-dimensional orbit lemmas for the Fatou map.

use num_complex::{Complex, Complex64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::complex::{lower, modulus};
use crate::error::{Error, Result};
use crate::maps::{eval_fatou, eval_skew, FatouMap, SkewProduct};
use crate::scalar::Real;

/// Length of the monotone-growth window that certifies escape.
pub const ESCAPE_WINDOW: usize = 10;
/// Pairs sampled per disk in [`verify_onedim`].
pub const ONEDIM_PAIRS_PER_DISK: usize = 100;
/// Grid step used by [`choose_x0`].
pub const X0_GRID_STEP: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "step", rename_all = "snake_case")]
pub enum Verdict {
    Escaped(usize),
    Returned(usize),
    BudgetExhausted,
    /// Arithmetic left the representable range at this step.
    Overflow(usize),
}

impl Verdict {
    pub fn label(&self) -> String {
        match self {
            Self::Escaped(k) => format!("escaped at step {k}"),
            Self::Returned(k) => format!("returned at step {k}"),
            Self::BudgetExhausted => "budget exhausted".into(),
            Self::Overflow(k) => format!("overflow at step {k}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct OrbitTrace<T: Real> {
    pub points: Vec<(Complex<T>, Complex<T>)>,
    pub verdict: Verdict,
}

impl<T: Real> OrbitTrace<T> {
    pub fn abs_z(&self, k: usize) -> f64 {
        modulus(&self.points[k].0).to_f64()
    }

    pub fn re_z(&self, k: usize) -> f64 {
        self.points[k].0.re.to_f64()
    }

    pub fn abs_w(&self, k: usize) -> f64 {
        modulus(&self.points[k].1).to_f64()
    }

    /// CSV with columns `k,re_z,im_z,abs_z,re_w,im_w`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,re_z,im_z,abs_z,re_w,im_w\n");
        for (k, (z, w)) in self.points.iter().enumerate() {
            let z = lower(z);
            let w = lower(w);
            out.push_str(&format!(
                "{k},{},{},{},{},{}\n",
                fmt17(z.re),
                fmt17(z.im),
                fmt17(z.norm()),
                fmt17(w.re),
                fmt17(w.im)
            ));
        }
        out
    }
}

/// Fixed 17-significant-digit rendering used in CSV artifacts.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Iterates `map` from `p0`. Escape needs `Re z_k > escape_re` with strictly
/// increasing real parts over the last [`ESCAPE_WINDOW`] steps; return needs
/// `|z_k| <= return_radius` with `k >= 1`.
pub fn iterate<T: Real>(
    map: &SkewProduct,
    p0: (Complex<T>, Complex<T>),
    max_steps: usize,
    escape_re: f64,
    return_radius: f64,
) -> Result<OrbitTrace<T>> {
    if !(escape_re > return_radius && return_radius > 0.0) {
        return Err(Error::Precondition(format!(
            "need escape_re > return_radius > 0, got {escape_re} and {return_radius}"
        )));
    }
    let esc = T::from_f64(escape_re);
    let ret = T::from_f64(return_radius);
    let mut points = Vec::with_capacity(max_steps.min(1 << 16) + 1);
    points.push(p0);
    let mut rising = 0usize;
    for k in 1..=max_steps {
        let prev = points.last().expect("non-empty trace");
        let next = match eval_skew(map, prev) {
            Ok(p) => p,
            Err(Error::Range(_)) => return Ok(OrbitTrace { points, verdict: Verdict::Overflow(k) }),
            Err(e) => return Err(e),
        };
        if next.0.re > prev.0.re {
            rising += 1;
        } else {
            rising = 0;
        }
        let escaped = next.0.re > esc && rising >= ESCAPE_WINDOW;
        let returned = modulus(&next.0) <= ret;
        points.push(next);
        if returned {
            return Ok(OrbitTrace { points, verdict: Verdict::Returned(k) });
        }
        if escaped {
            return Ok(OrbitTrace { points, verdict: Verdict::Escaped(k) });
        }
    }
    Ok(OrbitTrace { points, verdict: Verdict::BudgetExhausted })
}

/// `1 / (1 - e^{-1/2})`, the closed form of `sum_j e^{-j/2}`.
pub fn geometric_factor() -> f64 {
    1.0 / (1.0 - (-0.5f64).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct X0Choice {
    pub x0: f64,
    /// `delta - e^{-x0} / (1 - e^{-1/2})`.
    pub sum_margin: f64,
    /// `delta - e^{-x0 + 4 delta}`.
    pub exp_margin: f64,
}

pub fn onedim_margins(x0: f64, delta: f64) -> (f64, f64) {
    (delta - (-x0).exp() * geometric_factor(), delta - (-x0 + 4.0 * delta).exp())
}

/// Smallest `x0` on the 0.05 grid above `log 2` with both closed-form
/// preconditions of the orbit lemma.
pub fn choose_x0(delta: f64) -> Result<X0Choice> {
    if !(delta > 0.0 && delta <= 0.1) {
        return Err(Error::Precondition(format!("delta must lie in (0, 1/10], got {delta}")));
    }
    let mut n = (std::f64::consts::LN_2 / X0_GRID_STEP).floor() as i64;
    loop {
        let x0 = n as f64 / 20.0;
        if x0 > std::f64::consts::LN_2 {
            let (sum_margin, exp_margin) = onedim_margins(x0, delta);
            if sum_margin > 0.0 && exp_margin > 0.0 {
                return Ok(X0Choice { x0, sum_margin, exp_margin });
            }
        }
        n += 1;
    }
}

/// Orbit of `x0` under `f(x) = x + 1 + e^{-x}`: `x_0, ..., x_count-1`.
pub fn real_orbit(x0: f64, count: usize) -> Vec<f64> {
    let f = FatouMap::unit();
    let mut out = Vec::with_capacity(count);
    let mut x = x0;
    for _ in 0..count {
        out.push(x);
        x = eval_fatou::<f64>(&f, &Complex64::new(x, 0.0)).expect("real orbit stays finite").re;
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct OneDimFailure {
    pub k: usize,
    pub check: String,
    pub value: f64,
    pub bound: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct OneDimCertificate {
    pub x0: f64,
    pub delta: f64,
    #[serde(rename = "K")]
    pub k_steps: usize,
    pub max_deviation: f64,
    /// Largest excess of the deviation over the partial-sum bound.
    pub partial_sum_excess: f64,
    /// Largest sampled `|f(z) - f(z~)|` over the disks, against `10 delta`.
    pub max_disk_difference: f64,
    pub precondition_margins: (f64, f64),
    pub drift_range: (f64, f64),
    pub passed: bool,
    pub failures: Vec<OneDimFailure>,
}

fn sample_disk(rng: &mut ChaCha8Rng, center: f64, radius: f64) -> Complex64 {
    let r = radius * rng.gen::<f64>().sqrt();
    let t = rng.gen::<f64>() * std::f64::consts::TAU;
    Complex64::new(center, 0.0) + Complex64::from_polar(r, t)
}

/// Checks `x_k in (x0 + k - delta, x0 + k + delta)`, the partial-sum
/// deviation bound, the real drift `f(x) - x in (1, 1.5)`, and
/// `|f(z) - f(z~)| < 10 delta` on sampled pairs in each closed disk
/// `D(x0 + k, 4 delta)`.
pub fn verify_onedim(x0: f64, delta: f64, k_steps: usize, seed: u64) -> OneDimCertificate {
    let f = FatouMap::unit();
    let margins = onedim_margins(x0, delta);
    let mut failures = Vec::new();
    if !(x0 > std::f64::consts::LN_2) {
        failures.push(OneDimFailure { k: 0, check: "x0 > log 2".into(), value: x0, bound: std::f64::consts::LN_2 });
    }
    if !(margins.0 > 0.0) {
        failures.push(OneDimFailure {
            k: 0,
            check: "sum precondition".into(),
            value: (-x0).exp() * geometric_factor(),
            bound: delta,
        });
    }
    if !(margins.1 > 0.0) {
        failures.push(OneDimFailure {
            k: 0,
            check: "exponential precondition".into(),
            value: (-x0 + 4.0 * delta).exp(),
            bound: delta,
        });
    }
    let xs = real_orbit(x0, k_steps + 1);
    let mut max_deviation = 0.0f64;
    let mut excess = f64::NEG_INFINITY;
    let mut partial = 0.0f64;
    let mut drift = (f64::INFINITY, f64::NEG_INFINITY);
    // x_k - x0 - k equals sum_{j<k} e^{-x_j}; summing that series and the
    // bound series in the same order keeps the comparison exact.
    let mut series = 0.0f64;
    for (k, &x) in xs.iter().enumerate() {
        let dev = (x - (x0 + k as f64)).abs();
        max_deviation = max_deviation.max(dev);
        if !(dev < delta) {
            failures.push(OneDimFailure { k, check: "interval bound".into(), value: dev, bound: delta });
        }
        excess = excess.max(series - partial);
        if !(series <= partial) {
            failures.push(OneDimFailure { k, check: "partial-sum bound".into(), value: series, bound: partial });
        }
        partial += (-x0 - k as f64 / 2.0).exp();
        let e = (-x).exp();
        series += e;
        if k + 1 < xs.len() {
            // f(x) - x = 1 + e^{-x}; the excess over 1 is tested directly
            // because 1 + e^{-x} rounds to 1 once x is large.
            drift = (drift.0.min(1.0 + e), drift.1.max(1.0 + e));
            if x > std::f64::consts::LN_2 && !(e > 0.0 && e < 0.5) {
                failures.push(OneDimFailure { k, check: "real drift".into(), value: 1.0 + e, bound: 1.5 });
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_diff = 0.0f64;
    for k in 0..=k_steps {
        let c = x0 + k as f64;
        for _ in 0..ONEDIM_PAIRS_PER_DISK {
            let z = sample_disk(&mut rng, c, 4.0 * delta);
            let zt = sample_disk(&mut rng, c, 4.0 * delta);
            let d = match (eval_fatou(&f, &z), eval_fatou(&f, &zt)) {
                (Ok(a), Ok(b)) => (a - b).norm(),
                _ => f64::INFINITY,
            };
            max_diff = max_diff.max(d);
            if !(d < 10.0 * delta) {
                failures.push(OneDimFailure { k, check: "disk difference".into(), value: d, bound: 10.0 * delta });
            }
        }
    }
    OneDimCertificate {
        x0,
        delta,
        k_steps,
        max_deviation,
        partial_sum_excess: excess,
        max_disk_difference: max_diff,
        precondition_margins: margins,
        drift_range: drift,
        passed: failures.is_empty(),
        failures,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AbsorbingReport {
    pub a: (f64, f64),
    #[serde(rename = "R")]
    pub r: f64,
    pub samples: usize,
    pub violations: usize,
    /// Smallest sampled `Re f(z) - R`.
    pub min_margin: f64,
    pub passed: bool,
}

/// Samples `Re z in (R, R + 100)`, `|Im z| <= 100` and checks `Re f(z) > R`.
pub fn verify_absorbing(a: Complex64, r: f64, samples: usize, seed: u64) -> Result<AbsorbingReport> {
    if !(r > a.re.ln().abs()) {
        return Err(Error::Precondition(format!("need R > |log Re a| = {}, got {r}", a.re.ln().abs())));
    }
    let f = FatouMap::new(a)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut min_margin = f64::INFINITY;
    for _ in 0..samples {
        let z = Complex64::new(r + 100.0 * rng.gen::<f64>(), 200.0 * rng.gen::<f64>() - 100.0);
        let margin = eval_fatou(&f, &z).map(|v| v.re - r).unwrap_or(f64::NEG_INFINITY);
        min_margin = min_margin.min(margin);
        if !(margin > 0.0) {
            violations += 1;
        }
    }
    Ok(AbsorbingReport { a: (a.re, a.im), r, samples, violations, min_margin, passed: violations == 0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::{BaseMap, Perturbation};
    use proptest::prelude::*;

    fn fiber_map() -> SkewProduct {
        SkewProduct {
            f: FatouMap::unit(),
            h: Perturbation::Zero,
            g: BaseMap::linear(Complex64::new(0.5, 0.0), 0.9).unwrap(),
        }
    }

    #[test]
    fn choose_x0_matches_closed_forms() {
        for (delta, expected) in [(0.1, 3.25), (0.05, 3.95)] {
            // Independent oracle: the smaller of the two tight thresholds,
            // rounded up to the next multiple of 0.05.
            let t1 = (geometric_factor() / delta).ln();
            let t2 = 4.0 * delta - delta.ln();
            let oracle = ((t1.max(t2) / 0.05).floor() + 1.0) * 0.05;
            let c = choose_x0(delta).unwrap();
            assert!((c.x0 - expected).abs() < 1e-12, "{delta}: {}", c.x0);
            assert!((c.x0 - oracle).abs() < 1e-9);
            assert!(c.sum_margin > 0.0 && c.exp_margin > 0.0);
            assert!(c.x0 > std::f64::consts::LN_2);
        }
        assert!((geometric_factor() - 2.5415).abs() < 1e-4);
        assert!(choose_x0(0.2).is_err());
    }

    #[test]
    fn onedim_passes_at_default() {
        let cert = verify_onedim(3.25, 0.1, 200, 42);
        assert!(cert.passed, "{:?}", cert.failures);
        assert!(cert.max_deviation < 0.1);
        assert!(cert.max_disk_difference < 1.0);
        assert!(cert.partial_sum_excess <= 1e-10);
    }

    #[test]
    fn onedim_flags_bad_x0() {
        let cert = verify_onedim(0.70, 0.1, 20, 42);
        assert!(!cert.passed);
        assert!(cert.failures.iter().any(|f| f.check == "sum precondition"));
        assert!(((-0.7f64).exp() * geometric_factor() - 1.262).abs() < 1e-3);
    }

    #[test]
    fn absorbing_examples() {
        for (a, r) in [(1.0, 1.0), (1.0, 0.01), (0.1, 3.0), (1.0, 0.5)] {
            let rep = verify_absorbing(Complex64::new(a, 0.0), r, 10_000, 7).unwrap();
            assert!(rep.passed, "a={a} R={r}");
        }
        assert!(verify_absorbing(Complex64::new(0.1, 0.0), 2.0, 10, 7).is_err());
    }

    #[test]
    fn fiber_orbit_escapes_on_schedule() {
        let tr = iterate::<f64>(&fiber_map(), (Complex64::new(3.0, 0.0), Complex64::new(0.0, 0.0)), 100, 1e6, 1e-3)
            .unwrap();
        assert_eq!(tr.verdict, Verdict::BudgetExhausted);
        assert_eq!(tr.points.len(), 101);
        assert!((tr.re_z(100) - 103.0).abs() < 0.1);
        for k in 0..100 {
            assert!(tr.re_z(k + 1) > tr.re_z(k));
            assert_eq!(tr.points[k].0.im, 0.0);
        }
        let tr = iterate::<f64>(&fiber_map(), (Complex64::new(3.0, 0.0), Complex64::new(0.0, 0.0)), 100, 50.0, 1e-3)
            .unwrap();
        assert!(matches!(tr.verdict, Verdict::Escaped(k) if k >= ESCAPE_WINDOW));
    }

    #[test]
    fn iterate_reports_overflow() {
        let map = SkewProduct {
            f: FatouMap::unit(),
            h: Perturbation::PolyZ(vec![Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0)]),
            g: BaseMap::linear(Complex64::new(0.5, 0.0), 0.9).unwrap(),
        };
        let tr = iterate::<f64>(&map, (Complex64::new(3.25, 0.0), Complex64::new(0.45, 0.0)), 100, 1e300, 1e-3).unwrap();
        assert!(matches!(tr.verdict, Verdict::Overflow(_)));
    }

    #[test]
    fn csv_columns() {
        let tr = iterate::<f64>(&fiber_map(), (Complex64::new(3.0, 0.0), Complex64::new(0.2, 0.0)), 3, 1e6, 1e-3).unwrap();
        let csv = tr.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("k,re_z,im_z,abs_z,re_w,im_w"));
        assert_eq!(lines.count(), 4);
    }

    proptest! {
        #[test]
        fn half_plane_never_returns(re in 0.7f64..30.0, im in -30.0f64..30.0) {
            let tr = iterate::<f64>(&fiber_map(), (Complex64::new(re, im), Complex64::new(0.0, 0.0)), 60, 1e9, 0.5).unwrap();
            prop_assert!(!matches!(tr.verdict, Verdict::Returned(_)));
            for k in 0..tr.points.len() - 1 {
                prop_assert!(tr.re_z(k + 1) > tr.re_z(k));
            }
        }

        #[test]
        fn traces_are_deterministic(re in 0.0f64..10.0, im in -5.0f64..5.0, w in 0.0f64..0.5) {
            let p0 = (Complex64::new(re, im), Complex64::new(w, 0.0));
            let a = iterate::<f64>(&fiber_map(), p0, 50, 1e9, 1e-6).unwrap();
            let b = iterate::<f64>(&fiber_map(), p0, 50, 1e9, 1e-6).unwrap();
            prop_assert_eq!(a.to_csv(), b.to_csv());
        }

        #[test]
        fn real_drift_bounds(x in 0.7f64..200.0) {
            let step = real_orbit(x, 2)[1] - x;
            prop_assert!((step - 1.0 - (-x).exp()).abs() < 1e-12);
            let e = (-x).exp();
            prop_assert!(e > 0.0 && 1.0 + e < 1.5);
        }
    }
}
