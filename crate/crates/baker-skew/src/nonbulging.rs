//! Finite-stage construction of a perturbation `h` for which orbits starting
//! at `(x0, w_n)` come back to the disk of radius 3 after `n + 1` steps, while
//! the fiber `w = 0` keeps the escaping orbit of the Fatou map.
//!
//! Stage `k` adds `a_k b_k` to `h_{k-1}`, where `a_k = c_k - h_0`,
//! `c_k = -x_{k+1} / g^k(w_k)`, and `b_k` is a least-squares polynomial seed
//! that is close to 1 on `D_k` and close to 0 on `H_k` and on the later disks,
//! sharpened by iterating `b -> b^2 (3 - 2b)`. That iteration fixes 0 and 1
//! superattractively, so each step squares the seed error while tripling the
//! degree. The complement `1 - b` is carried alongside `b` so that values near
//! 1 keep full relative accuracy.

use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use num_complex::{Complex, Complex64};
use num_traits::{One, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::complex::{finite, lift, lower, real};
use crate::dynamics::{self, choose_x0, real_orbit, Verdict};
use crate::error::{Error, Result};
use crate::maps::{eval_base, eval_fatou, iterate_base, BaseConfig, BaseMap, FatouMap, Perturbation, SkewProduct};
use crate::runge::{
    fit_auto, AutoFitOptions, AutoFitStep, BasisKind, CompactSet, CompactSetUnion, Evaluator, PolynomialApproximant,
    Target,
};
use crate::scalar::{Ext, PrecisionConfig, Real};

/// Certified seed error needed before sharpening.
pub const SEED_TARGET: f64 = 0.2;
/// The sharpening majorant `t -> t^2 (3 + 2t)` contracts only below this value.
pub const SHARPEN_LIMIT: f64 = 0.2808;
/// Extra factor demanded of the sharpened error below the stage budget.
pub const SHARPEN_MARGIN: f64 = 8.673_617_379_884_035e-19; // 2^-60
pub const MAX_SHARPEN_DEPTH: u32 = 64;
pub const PROBE_COUNT: usize = 8;
pub const PROBE_DEGREE: usize = 6;
pub const INTERIOR_SAMPLES: usize = 512;
pub const MAX_DELTA_HALVINGS: usize = 60;
/// Smallest `|w|` tried before giving up on the halving grid.
pub const W_FLOOR: f64 = 1e-300;
/// Orbit closeness required when choosing `w_k`, as a fraction of `delta`.
pub const W_MARGIN: f64 = 0.9;
/// Fiber control orbit length.
pub const FIBER_STEPS: usize = 200;

/// `D_k`: closed disk of radius `4 delta` about `x0 + k`.
pub fn disk_set(x0: f64, delta: f64, k: usize) -> CompactSet {
    CompactSet::disk(Complex64::new(x0 + k as f64, 0.0), 4.0 * delta)
}

/// `H_k = {-k <= Re z <= x0 + k - 1/2, |Im z| <= k + 1}`.
pub fn rect_set(x0: f64, k: usize) -> CompactSet {
    CompactSet::rect(-(k as f64), x0 + k as f64 - 0.5, k as f64 + 1.0)
}

/// Boundary and interior sample points used for sup norms over a set.
pub fn sup_samples(set: &CompactSet, boundary: usize, interior: usize, seed: u64) -> Vec<Complex64> {
    let mut pts = set.boundary(boundary, 0.0);
    pts.extend(set.interior(interior, seed));
    pts
}

fn p2(z: Complex64) -> [f64; 2] {
    [z.re, z.im]
}

fn c2(v: [f64; 2]) -> Complex64 {
    Complex64::new(v[0], v[1])
}

/// One sharpened seed with its coefficient.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SharpenedTerm {
    pub stage: usize,
    /// `a_k = c_k - h_0`.
    pub coefficient: [f64; 2],
    pub seed: PolynomialApproximant,
    pub depth: u32,
    /// Certified seed error before sharpening.
    pub seed_error: f64,
    /// Majorant of the sharpened error.
    pub sharpened_error: f64,
}

impl SharpenedTerm {
    /// Degree of the sharpened polynomial, `3^depth` times the seed degree.
    pub fn degree(&self) -> f64 {
        3f64.powi(self.depth as i32) * self.seed.degree as f64
    }
}

/// `(b, 1 - b)` after `depth` sharpening steps, starting from the seed value `s`.
pub fn sharpen<T: Real>(s: Complex<T>, depth: u32) -> (Complex<T>, Complex<T>) {
    let one = Complex::<T>::one();
    let two = real::<T>(2.0);
    let mut b = s.clone();
    let mut bc = one.clone() - s;
    for _ in 0..depth {
        let nb = b.clone() * b.clone() * (one.clone() + two.clone() * bc.clone());
        let nbc = bc.clone() * bc.clone() * (one.clone() + two.clone() * b);
        b = nb;
        bc = nbc;
    }
    (b, bc)
}

fn sharpen64(s: Complex64, depth: u32) -> (Complex64, Complex64) {
    let mut b = s;
    let mut bc = 1.0 - s;
    for _ in 0..depth {
        let nb = b * b * (1.0 + 2.0 * bc);
        bc = bc * bc * (1.0 + 2.0 * b);
        b = nb;
    }
    (b, bc)
}

/// Sharpening depth bringing the majorant from `theta` to at most `target`.
pub fn sharpen_depth(theta: f64, target: f64) -> Result<(u32, f64)> {
    if !(theta < SHARPEN_LIMIT) {
        return Err(Error::Precondition(format!(
            "seed error {theta:.3e} is not below the sharpening limit {SHARPEN_LIMIT}"
        )));
    }
    let mut t = theta;
    let mut m = 0;
    while t > target {
        if m == MAX_SHARPEN_DEPTH {
            return Err(Error::Precondition(format!("sharpening needs more than {MAX_SHARPEN_DEPTH} steps")));
        }
        t = t * t * (3.0 + 2.0 * t);
        m += 1;
    }
    Ok((m, t))
}

/// `h = h_0 + sum_k a_k b_k`, a polynomial in `z` alone.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StagedPerturbation {
    pub h0: [f64; 2],
    pub terms: Vec<SharpenedTerm>,
    #[serde(skip)]
    evaluators: OnceLock<Vec<Evaluator>>,
}

impl StagedPerturbation {
    pub fn constant(h0: Complex64) -> Self {
        Self { h0: p2(h0), terms: Vec::new(), evaluators: OnceLock::new() }
    }

    pub fn with_term(&self, term: SharpenedTerm) -> Self {
        let mut terms = self.terms.clone();
        terms.push(term);
        Self { h0: self.h0, terms, evaluators: OnceLock::new() }
    }

    /// The perturbation after stage `k`.
    pub fn prefix(&self, k: usize) -> Self {
        Self { h0: self.h0, terms: self.terms.iter().filter(|t| t.stage <= k).cloned().collect(), evaluators: OnceLock::new() }
    }

    pub fn degree(&self) -> f64 {
        self.terms.iter().map(SharpenedTerm::degree).fold(0.0, f64::max)
    }

    fn evaluators(&self) -> &[Evaluator] {
        self.evaluators.get_or_init(|| self.terms.iter().map(|t| t.seed.evaluator()).collect())
    }

    pub fn eval<T: Real>(&self, z: &Complex<T>) -> Result<Complex<T>> {
        let mut acc = lift::<T>(c2(self.h0));
        for t in &self.terms {
            let s = t.seed.eval(z)?;
            let (b, _) = sharpen(s, t.depth);
            acc = acc + lift::<T>(c2(t.coefficient)) * b;
        }
        finite(acc, "staged perturbation")
    }

    pub fn eval64(&self, z: Complex64) -> Complex64 {
        self.h0_value() + self.tail64(z, 0)
    }

    pub fn h0_value(&self) -> Complex64 {
        c2(self.h0)
    }

    /// `sum_{stage >= from} a_k b_k(z)`, summed without forming `h` itself.
    pub fn tail64(&self, z: Complex64, from: usize) -> Complex64 {
        self.terms
            .iter()
            .zip(self.evaluators())
            .filter(|(t, _)| t.stage >= from)
            .map(|(t, ev)| c2(t.coefficient) * sharpen64(ev.eval(z), t.depth).0)
            .sum()
    }

    /// `h(z) - c_k` on `D_k`, written as `(h_0 - c_k)(1 - b_k) + sum_{j != k} a_j b_j`.
    /// For `k = 0` this is `h(z) - h_0`.
    pub fn offset64(&self, z: Complex64, k: usize, c_k: Complex64) -> Complex64 {
        let mut own = if k == 0 { Complex64::zero() } else { self.h0_value() - c_k };
        let mut others = Complex64::zero();
        let mut found = k == 0;
        for (t, ev) in self.terms.iter().zip(self.evaluators()) {
            let (b, bc) = sharpen64(ev.eval(z), t.depth);
            if t.stage == k {
                own *= bc;
                found = true;
            } else {
                others += c2(t.coefficient) * b;
            }
        }
        if found {
            own + others
        } else {
            self.eval64(z) - c_k
        }
    }
}

/// Orbit `z_0 = x0`, `z_{j+1} = f(z_j) + g^j(w) h(z_j)` for `steps` steps.
pub fn stage_orbit<T: Real>(
    f: &FatouMap,
    g: &BaseMap,
    h: &dyn Fn(&Complex<T>) -> Result<Complex<T>>,
    x0: f64,
    w: Complex64,
    steps: usize,
) -> Result<Vec<Complex<T>>> {
    let mut z = real::<T>(x0);
    let mut gw = lift::<T>(w);
    let mut out = Vec::with_capacity(steps + 1);
    out.push(z.clone());
    for _ in 0..steps {
        let next = eval_fatou(f, &z)? + gw.clone() * h(&z)?;
        z = finite(next, "stage orbit")?;
        gw = eval_base(g, &gw)?;
        out.push(z.clone());
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConstructionConfig {
    pub delta: f64,
    /// Index of the last stage; stages `0..=stages` are built.
    pub stages: usize,
    pub g: BaseConfig,
    pub precision: PrecisionConfig,
    pub seed: u64,
    pub max_seed_degree: usize,
}

impl ConstructionConfig {
    pub fn new(delta: f64, stages: usize) -> Self {
        Self {
            delta,
            stages,
            g: BaseConfig::Linear { lambda: [0.5, 0.0], delta_g: 0.9 },
            precision: PrecisionConfig::Standard,
            seed: 42,
            max_seed_degree: 512,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeResult {
    pub kind: String,
    pub deviation: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeReport {
    /// First-order amplification bound `A`.
    pub amplification_bound: f64,
    /// `min(1/2, delta / (4A))` before probing.
    pub first_order_delta: f64,
    pub halvings: usize,
    pub probes: Vec<ProbeResult>,
    pub max_deviation: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageReport {
    pub k: usize,
    /// `|w_k|` against `min(1/(k+1), delta_g)`.
    pub prop1_margin: f64,
    pub prop1_ok: bool,
    pub prop2_ok: bool,
    /// `max_{j <= k} |z_j - x_j|` along the stage-`k` orbit, below `delta` on pass.
    pub prop3_margin: f64,
    pub prop3_ok: bool,
    /// Every `z_j`, `j <= k`, lies in `D_j`.
    pub sandwich_ok: bool,
    /// Sampled `sup_{D_k} |h_k - c_k|`, below 1 on pass.
    pub prop4_margin: f64,
    pub prop4_ok: bool,
    /// Sampled `sup_{H_k} |h_k - h_{k-1}|`, below `eps_k` on pass.
    pub prop5_margin: Option<f64>,
    pub prop5_ok: bool,
    /// Certified to first order and probed; not proved.
    pub prop6_delta_probe: Option<ProbeReport>,
    pub prop6_ok: bool,
    pub amplification_bound: f64,
    pub budget_ok: bool,
    /// `|c_k| = |x_{k+1} / g^k(w_k)|`.
    pub dynamic_range: f64,
    pub seed_degree: usize,
    pub seed_error: f64,
    pub sharpen_depth: u32,
    pub effective_degree: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageState {
    pub k: usize,
    pub w_k: [f64; 2],
    pub delta_k: f64,
    pub eps_k: f64,
    /// `c_k = -x_{k+1} / g^k(w_k)`.
    pub c_k: [f64; 2],
    pub d_set: CompactSet,
    pub h_set: Option<CompactSet>,
    pub term: Option<SharpenedTerm>,
    pub report: StageReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: usize,
    pub detail: String,
    pub dynamic_range: f64,
    pub w_k: Option<[f64; 2]>,
    pub delta_k: Option<f64>,
    pub fit_history: Vec<AutoFitStep>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TelescopingRow {
    pub m: usize,
    /// `sum_{j >= m} eps_j` over built stages.
    pub sum_from_m: f64,
    /// `sum_{j > m} eps_j` over built stages.
    pub sum_after_m: f64,
    pub delta_next: f64,
    pub from_m_ok: bool,
    pub after_m_ok: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReturnRow {
    pub n: usize,
    pub w_n: [f64; 2],
    /// Sampled `sup_{H_{n+1}} |h_K - h_n|` and its bound `delta_{n+1}`.
    pub tail_sup: Option<f64>,
    pub delta_next: Option<f64>,
    pub tail_ok: bool,
    pub z_next: [f64; 2],
    pub z_next_abs: f64,
    pub total_norm: f64,
    pub bound_ok: bool,
    /// `|f(z_n) - x_{n+1}|`, below `10 delta`.
    pub step_term: f64,
    /// Sampled `sup_{D_n} |h_K - c_n|`, below 2.
    pub disk_term: f64,
    pub decomposition_ok: bool,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FiberControl {
    pub steps: usize,
    pub max_deviation: f64,
    pub verdict: String,
    pub escaped: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReturnReport {
    pub rows: Vec<ReturnRow>,
    pub telescoping: Vec<TelescopingRow>,
    pub fiber: FiberControl,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConstructionFile {
    pub config: ConstructionConfig,
    pub x0: f64,
    /// `x_0, ..., x_{K+1}`.
    pub x_orbit: Vec<f64>,
    pub stages: Vec<StageState>,
    pub failure: Option<StageFailure>,
    pub verify: Option<ReturnReport>,
    pub stage_files: Vec<String>,
    pub passed: bool,
}

impl ConstructionFile {
    /// The perturbation assembled from every built stage.
    pub fn final_perturbation(&self) -> Result<StagedPerturbation> {
        let first = self.stages.first().ok_or_else(|| Error::Config("construction has no stages".into()))?;
        let mut h = StagedPerturbation::constant(c2(first.c_k));
        for s in &self.stages[1..] {
            let t = s.term.clone().ok_or_else(|| Error::Config(format!("stage {} has no term", s.k)))?;
            h = h.with_term(t);
        }
        Ok(h)
    }

    pub fn skew_product(&self) -> Result<SkewProduct> {
        Ok(SkewProduct {
            f: FatouMap::unit(),
            h: Perturbation::Staged(Arc::new(self.final_perturbation()?)),
            g: self.config.g.build()?,
        })
    }

    pub fn w_values(&self) -> Vec<Complex64> {
        self.stages.iter().map(|s| c2(s.w_k)).collect()
    }

    /// Writes `stage_<k>.json` per stage and a `construction.json` manifest
    /// that lists them in place of the stage data.
    pub fn write(&mut self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        self.stage_files.clear();
        for s in &self.stages {
            let name = format!("stage_{}.json", s.k);
            artifact::write_json(&dir.join(&name), s)?;
            self.stage_files.push(name);
        }
        let manifest = Self { stages: Vec::new(), ..self.clone() };
        let path = dir.join("construction.json");
        artifact::write_json(&path, &manifest)?;
        Ok(path)
    }

    /// Reads a construction file, loading listed stage files from its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut file: Self = serde_json::from_str(&text)?;
        if !file.stage_files.is_empty() {
            let dir = path.parent().unwrap_or(Path::new("."));
            file.stages = file
                .stage_files
                .iter()
                .map(|name| -> Result<StageState> { Ok(serde_json::from_str(&std::fs::read_to_string(dir.join(name))?)?) })
                .collect::<Result<_>>()?;
        }
        Ok(file)
    }

    /// Reads `construction.json` and its stage files from `dir`.
    pub fn read(dir: &Path) -> Result<Self> {
        Self::load(&dir.join("construction.json"))
    }
}

struct Context {
    f: FatouMap,
    g: BaseMap,
    x0: f64,
    delta: f64,
    last: usize,
    x: Vec<f64>,
    seed: u64,
    max_seed_degree: usize,
}

impl Context {
    fn dist_to_x<T: Real>(&self, orbit: &[Complex<T>]) -> Vec<f64> {
        orbit.iter().enumerate().map(|(j, z)| (lower(z) - self.x[j]).norm()).collect()
    }
}

/// Stage 0: `w_0 = delta_g / 2`, `h_0 = -x_1 / w_0`, `delta_0 = 1/2`, `eps_0 = 1/4`.
pub fn init_stage0(delta: f64, g: &BaseMap) -> Result<(StageState, StagedPerturbation)> {
    let x0 = choose_x0(delta)?.x0;
    let x = real_orbit(x0, 2);
    let w0 = Complex64::new(g.delta_g / 2.0, 0.0);
    let c0 = -x[1] / w0;
    let h = StagedPerturbation::constant(c0);
    let prop1_margin = w0.norm();
    let prop1_ok = w0.norm() > 0.0 && w0.norm() < 1f64.min(g.delta_g);
    let prop4_margin = (h.eval64(Complex64::new(x0, 0.0)) - c0).norm();
    let report = StageReport {
        k: 0,
        prop1_margin,
        prop1_ok,
        prop2_ok: true,
        prop3_margin: 0.0,
        prop3_ok: true,
        sandwich_ok: true,
        prop4_margin,
        prop4_ok: prop4_margin < 1.0,
        prop5_margin: None,
        prop5_ok: true,
        prop6_delta_probe: None,
        prop6_ok: true,
        amplification_bound: 0.0,
        budget_ok: true,
        dynamic_range: c0.norm(),
        seed_degree: 0,
        seed_error: 0.0,
        sharpen_depth: 0,
        effective_degree: 0.0,
        passed: prop1_ok && prop4_margin < 1.0,
    };
    let state = StageState {
        k: 0,
        w_k: p2(w0),
        delta_k: 0.5,
        eps_k: 0.25,
        c_k: p2(c0),
        d_set: disk_set(x0, delta, 0),
        h_set: None,
        term: None,
        report,
    };
    Ok((state, h))
}

fn staged_fn<T: Real>(h: &StagedPerturbation) -> impl Fn(&Complex<T>) -> Result<Complex<T>> + '_ {
    move |z| h.eval(z)
}

/// Largest `w` on the halving grid from `min(1/(k+1), delta_g)/2` whose
/// `F_{h_{k-1}}` orbit from `(x0, w)` stays within `0.9 delta` of `x_j` for `j <= k`.
fn choose_w<T: Real>(ctx: &Context, h_prev: &StagedPerturbation, k: usize) -> Result<Complex64> {
    let mut w = (1.0 / (k as f64 + 1.0)).min(ctx.g.delta_g) / 2.0;
    while w > W_FLOOR {
        let wc = Complex64::new(w, 0.0);
        if let Ok(orbit) = stage_orbit::<T>(&ctx.f, &ctx.g, &staged_fn(h_prev), ctx.x0, wc, k) {
            if ctx.dist_to_x(&orbit).iter().all(|d| *d <= W_MARGIN * ctx.delta) {
                return Ok(wc);
            }
        }
        w /= 2.0;
    }
    Err(Error::Stage {
        stage: k,
        detail: format!("no w above {W_FLOOR:e} keeps the orbit close; use extended precision"),
    })
}

pub fn choose_w_k(
    delta: f64,
    g: &BaseMap,
    h_prev: &StagedPerturbation,
    k: usize,
    precision: PrecisionConfig,
) -> Result<Complex64> {
    let ctx = context(delta, g.clone(), k, 0, 0)?;
    match precision {
        PrecisionConfig::Standard => choose_w::<f64>(&ctx, h_prev, k),
        PrecisionConfig::Extended { .. } => {
            precision.activate();
            choose_w::<Ext>(&ctx, h_prev, k)
        }
    }
}

fn probe_polynomials(set: &CompactSet, samples: &[Complex64], seed: u64) -> Vec<(String, Vec<Complex64>, Complex64, f64)> {
    let (x0, x1, y0, y1) = set.bbox();
    let center = Complex64::new((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    let scale = ((x1 - x0) / 2.0).hypot((y1 - y0) / 2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![
        ("zero".to_string(), vec![Complex64::zero()], center, scale),
        ("constant".to_string(), vec![Complex64::one()], center, scale),
    ];
    for i in 0..PROBE_COUNT {
        let mut c: Vec<Complex64> =
            (0..=PROBE_DEGREE).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let sup = samples
            .iter()
            .map(|z| crate::complex::horner64(&c, (z - center) / scale).norm())
            .fold(0.0, f64::max);
        c.iter_mut().for_each(|v| *v /= sup);
        out.push((format!("random-{i}"), c, center, scale));
    }
    out
}

/// First-order bound plus probe validation for `delta_k`.
fn choose_delta<T: Real>(ctx: &Context, h_prev: &StagedPerturbation, w: Complex64, k: usize) -> Result<(f64, ProbeReport)> {
    let orbit = stage_orbit::<T>(&ctx.f, &ctx.g, &staged_fn(h_prev), ctx.x0, w, k)?;
    let gw: Vec<Complex64> = (0..k)
        .map(|i| iterate_base::<T>(&ctx.g, &lift(w), i).map(|v| lower(&v)))
        .collect::<Result<_>>()?;
    let lip: Vec<f64> = (0..k)
        .map(|i| {
            let xi = Complex64::new(ctx.x0 + i as f64, 0.0);
            let hc = h_prev.eval64(xi);
            let m = disk_set(ctx.x0, ctx.delta, i)
                .boundary(256, 0.0)
                .iter()
                .map(|z| (h_prev.eval64(*z) - hc).norm())
                .fold(0.0, f64::max);
            4.0 * m / (9.0 * ctx.delta)
        })
        .collect();
    let mut a = 0.0;
    for j in 0..k {
        let mut prod = 1.0;
        for i in j + 1..k {
            prod *= 1.0 + (-lower(&orbit[i]).re).exp() + gw[i].norm() * lip[i];
        }
        a += gw[j].norm() * prod;
    }
    if !a.is_finite() {
        return Err(Error::Stage { stage: k, detail: "amplification bound overflows; use extended precision".into() });
    }
    let first_order = if a > 0.0 { 0.5f64.min(ctx.delta / (4.0 * a)) } else { 0.5 };
    let h_set = rect_set(ctx.x0, k);
    let samples = sup_samples(&h_set, 64 * (k + 1), INTERIOR_SAMPLES, ctx.seed ^ (k as u64) << 8);
    let probes = probe_polynomials(&h_set, &samples, ctx.seed.wrapping_add(k as u64));
    let target = lower(&orbit[k]);
    let mut delta_k = first_order;
    for halvings in 0..=MAX_DELTA_HALVINGS {
        let results: Vec<ProbeResult> = probes
            .iter()
            .map(|(kind, coeffs, center, scale)| {
                let dk = delta_k;
                let h = |z: &Complex<T>| -> Result<Complex<T>> {
                    let u = (z.clone() - lift::<T>(*center)) / real::<T>(*scale);
                    let p = crate::complex::horner(coeffs, &u) * real::<T>(dk);
                    Ok(h_prev.eval(z)? + p)
                };
                let deviation = match stage_orbit::<T>(&ctx.f, &ctx.g, &h, ctx.x0, w, k) {
                    Ok(o) => (lower(&o[k]) - target).norm(),
                    Err(_) => f64::INFINITY,
                };
                ProbeResult { kind: kind.clone(), deviation }
            })
            .collect();
        let max_deviation = results.iter().map(|r| r.deviation).fold(0.0, f64::max);
        if max_deviation < ctx.delta {
            let report = ProbeReport {
                amplification_bound: a,
                first_order_delta: first_order,
                halvings,
                probes: results,
                max_deviation,
                passed: true,
            };
            return Ok((delta_k, report));
        }
        delta_k /= 2.0;
    }
    Err(Error::Stage { stage: k, detail: format!("probes fail after {MAX_DELTA_HALVINGS} halvings of delta_k") })
}

fn context(delta: f64, g: BaseMap, last: usize, seed: u64, max_seed_degree: usize) -> Result<Context> {
    let x0 = choose_x0(delta)?.x0;
    Ok(Context { f: FatouMap::unit(), g, x0, delta, last, x: real_orbit(x0, last.max(1) + 2), seed, max_seed_degree })
}

pub fn choose_delta_k(
    delta: f64,
    g: &BaseMap,
    h_prev: &StagedPerturbation,
    w_k: Complex64,
    k: usize,
    seed: u64,
) -> Result<(f64, ProbeReport)> {
    let ctx = context(delta, g.clone(), k, seed, 0)?;
    choose_delta::<f64>(&ctx, h_prev, w_k, k)
}

/// Least-squares seed: 0 on `H_k`, 1 on `D_k`, 0 on `D_{k+1}, ..., D_K`.
pub fn seed_union(x0: f64, delta: f64, k: usize, last: usize) -> Result<CompactSetUnion> {
    let mut pieces = vec![
        (rect_set(x0, k), Target::constant(Complex64::zero())),
        (disk_set(x0, delta, k), Target::constant(Complex64::one())),
    ];
    for j in k + 1..=last {
        pieces.push((disk_set(x0, delta, j), Target::constant(Complex64::zero())));
    }
    CompactSetUnion::new(pieces)
}

pub fn seed_options(delta: f64, max_degree: usize) -> AutoFitOptions {
    AutoFitOptions {
        target: SEED_TARGET,
        start_degree: 16,
        max_degree,
        kind: BasisKind::Arnoldi,
        density: 1.0 / delta,
        stagnation: 0.9,
    }
}

enum Built {
    Stage(Box<StageState>, StagedPerturbation),
    Failed(StageFailure),
}

fn build_stage<T: Real>(
    ctx: &Context,
    h_prev: &StagedPerturbation,
    history: &[StageState],
    w: Complex64,
    delta_k: f64,
    probe: ProbeReport,
) -> Result<Built> {
    let k = history.len();
    let gk = lower(&iterate_base::<T>(&ctx.g, &lift(w), k)?);
    let c_k = -ctx.x[k + 1] / gk;
    let dynamic_range = c_k.norm();
    let fail = |detail: String, fit_history: Vec<AutoFitStep>| {
        Built::Failed(StageFailure { stage: k, detail, dynamic_range, w_k: Some(p2(w)), delta_k: Some(delta_k), fit_history })
    };
    if !c_k.is_finite() {
        return Ok(fail("c_k is not representable in standard precision".into(), Vec::new()));
    }
    let min_delta = history.iter().map(|s| s.delta_k).fold(delta_k, f64::min);
    let eps_k = min_delta / 2f64.powi(k as i32 + 1);
    let a_k = c_k - h_prev.h0_value();
    let union = seed_union(ctx.x0, ctx.delta, k, ctx.last)?;
    let auto = fit_auto(&union, &seed_options(ctx.delta, ctx.max_seed_degree));
    if !auto.reached {
        let best = auto.history.iter().filter_map(|s| s.error).fold(f64::INFINITY, f64::min);
        return Ok(fail(
            format!(
                "seed fit did not reach {SEED_TARGET} (best {best:.3e}): {}; the stage needs |c_k| = {dynamic_range:.3e}",
                auto.stop_reason
            ),
            auto.history,
        ));
    }
    let seed = auto.best.expect("reached fit has a polynomial");
    let theta = seed.per_set_error.iter().copied().fold(0.0, f64::max);
    let (depth, sharpened_error) = match sharpen_depth(theta, eps_k * SHARPEN_MARGIN / a_k.norm()) {
        Ok(v) => v,
        Err(e) => return Ok(fail(e.to_string(), auto.history)),
    };
    let term = SharpenedTerm { stage: k, coefficient: p2(a_k), seed, depth, seed_error: theta, sharpened_error };
    let h = h_prev.with_term(term.clone());

    let d_set = disk_set(ctx.x0, ctx.delta, k);
    let h_set = rect_set(ctx.x0, k);
    let bound1 = (1.0 / (k as f64 + 1.0)).min(ctx.g.delta_g);
    let prop1_ok = w.norm() > 0.0 && w.norm() < bound1;
    let prop2_ok = delta_k > 0.0 && delta_k < 1.0;

    let orbit = stage_orbit::<T>(&ctx.f, &ctx.g, &staged_fn(&h), ctx.x0, w, k);
    let (prop3_margin, sandwich_ok) = match &orbit {
        Ok(o) => {
            let d = ctx.dist_to_x(o);
            let sandwich = o
                .iter()
                .enumerate()
                .all(|(j, z)| (lower(z) - Complex64::new(ctx.x0 + j as f64, 0.0)).norm() <= 4.0 * ctx.delta);
            (d.iter().copied().fold(0.0, f64::max), sandwich)
        }
        Err(_) => (f64::INFINITY, false),
    };
    let prop3_ok = prop3_margin < ctx.delta;

    let d_pts = sup_samples(&d_set, 64 * (k + 1), 64, ctx.seed ^ 0xd15c ^ k as u64);
    let prop4_margin = d_pts.par_iter().map(|z| h.offset64(*z, k, c_k).norm()).reduce(|| 0.0, nan_max);
    let prop4_ok = prop4_margin < 1.0;

    let h_pts = sup_samples(&h_set, 64 * (k + 1), INTERIOR_SAMPLES, ctx.seed ^ 0x4ec7 ^ k as u64);
    let prop5 = h_pts.par_iter().map(|z| h.tail64(*z, k).norm()).reduce(|| 0.0, nan_max);
    let prop5_ok = prop5 < eps_k;
    let prop6_ok = probe.passed;
    let budget_ok = eps_k > 0.0 && eps_k == min_delta / 2f64.powi(k as i32 + 1);
    let report = StageReport {
        k,
        prop1_margin: w.norm(),
        prop1_ok,
        prop2_ok,
        prop3_margin,
        prop3_ok,
        sandwich_ok,
        prop4_margin,
        prop4_ok,
        prop5_margin: Some(prop5),
        prop5_ok,
        amplification_bound: probe.amplification_bound,
        prop6_delta_probe: Some(probe),
        prop6_ok,
        budget_ok,
        dynamic_range,
        seed_degree: term.seed.degree,
        seed_error: theta,
        sharpen_depth: depth,
        effective_degree: term.degree(),
        passed: prop1_ok && prop2_ok && prop3_ok && sandwich_ok && prop4_ok && prop5_ok && prop6_ok && budget_ok,
    };
    let state = StageState {
        k,
        w_k: p2(w),
        delta_k,
        eps_k,
        c_k: p2(c_k),
        d_set,
        h_set: Some(h_set),
        term: Some(term),
        report,
    };
    Ok(Built::Stage(Box::new(state), h))
}

fn nan_max(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::INFINITY
    } else {
        a.max(b)
    }
}

/// Telescoping rows for `m = 0, ..., len - 2`.
pub fn telescoping(stages: &[StageState]) -> Vec<TelescopingRow> {
    (0..stages.len().saturating_sub(1))
        .map(|m| {
            let sum_after_m: f64 = stages[m + 1..].iter().map(|s| s.eps_k).sum();
            let sum_from_m = sum_after_m + stages[m].eps_k;
            let delta_next = stages[m + 1].delta_k;
            TelescopingRow {
                m,
                sum_from_m,
                sum_after_m,
                delta_next,
                from_m_ok: sum_from_m < delta_next,
                after_m_ok: sum_after_m < delta_next,
            }
        })
        .collect()
}

fn verify<T: Real>(file: &ConstructionFile) -> Result<ReturnReport> {
    let g = file.config.g.build()?;
    let f = FatouMap::unit();
    let h = file.final_perturbation()?;
    let x = &file.x_orbit;
    let delta = file.config.delta;
    let last = file.stages.len() - 1;
    let mut rows = Vec::new();
    for (n, stage) in file.stages.iter().enumerate() {
        let w = c2(stage.w_k);
        let (tail_sup, delta_next) = if n < last {
            let set = rect_set(file.x0, n + 1);
            let pts = sup_samples(&set, 64 * (n + 2), INTERIOR_SAMPLES, file.config.seed ^ 0x7a11 ^ n as u64);
            let sup = pts.par_iter().map(|z| h.tail64(*z, n + 1).norm()).reduce(|| 0.0, nan_max);
            (Some(sup), Some(file.stages[n + 1].delta_k))
        } else {
            (None, None)
        };
        let tail_ok = match (tail_sup, delta_next) {
            (Some(s), Some(d)) => s < d,
            _ => true,
        };
        let orbit = stage_orbit::<T>(&f, &g, &staged_fn(&h), file.x0, w, n + 1);
        let (z_next, total_norm, step_term) = match &orbit {
            Ok(o) => {
                let zn = lower(&o[n + 1]);
                let wn = lower(&iterate_base::<T>(&g, &lift(w), n + 1)?);
                let fz = lower(&eval_fatou(&f, &o[n])?);
                (zn, zn.norm().hypot(wn.norm()), (fz - x[n + 1]).norm())
            }
            Err(_) => (Complex64::new(f64::INFINITY, 0.0), f64::INFINITY, f64::INFINITY),
        };
        let d_pts = sup_samples(&disk_set(file.x0, delta, n), 64 * (n + 1), 64, file.config.seed ^ 0xd15c ^ n as u64);
        let c_n = c2(stage.c_k);
        let disk_term = d_pts.par_iter().map(|z| h.offset64(*z, n, c_n).norm()).reduce(|| 0.0, nan_max);
        let bound_ok = z_next.norm() <= 3.0 && total_norm < 4.0;
        let decomposition_ok = step_term < 10.0 * delta && disk_term < 2.0;
        rows.push(ReturnRow {
            n,
            w_n: stage.w_k,
            tail_sup,
            delta_next,
            tail_ok,
            z_next: p2(z_next),
            z_next_abs: z_next.norm(),
            total_norm,
            bound_ok,
            step_term,
            disk_term,
            decomposition_ok,
            passed: tail_ok && bound_ok && decomposition_ok,
        });
    }
    let map = SkewProduct { f, h: Perturbation::Staged(Arc::new(h.clone())), g };
    let start = (real::<T>(file.x0), Complex::<T>::zero());
    let trace = dynamics::iterate(&map, start, FIBER_STEPS, file.x0 + FIBER_STEPS as f64 / 2.0, 3.0)?;
    let fx = real_orbit(file.x0, trace.points.len());
    let max_deviation =
        trace.points.iter().zip(&fx).map(|(p, x)| (lower(&p.0) - x).norm()).fold(0.0, nan_max);
    let escaped = matches!(trace.verdict, Verdict::Escaped(_));
    let fiber = FiberControl { steps: trace.points.len() - 1, max_deviation, verdict: trace.verdict.label(), escaped };
    let telescoping = telescoping(&file.stages);
    let passed = rows.iter().all(|r| r.passed) && telescoping.iter().all(|t| t.after_m_ok) && escaped && max_deviation == 0.0;
    Ok(ReturnReport { rows, telescoping, fiber, passed })
}

/// Checks the return bound for every built stage `n`: the tail
/// `sup_{H_{n+1}} |h_K - h_n| < delta_{n+1}`, then `|z_{n+1}| <= 3` and
/// `|(z_{n+1}, w_{n+1})| < 4` along the `F_{h_K}` orbit of `(x0, w_n)`.
pub fn verify_return(file: &ConstructionFile) -> Result<ReturnReport> {
    if file.stages.is_empty() {
        return Err(Error::Precondition("no stages to verify".into()));
    }
    match file.config.precision {
        PrecisionConfig::Standard => verify::<f64>(file),
        p @ PrecisionConfig::Extended { .. } => {
            p.activate();
            verify::<Ext>(file)
        }
    }
}

fn run<T: Real>(config: &ConstructionConfig) -> Result<ConstructionFile> {
    let g = config.g.build()?;
    let ctx = context(config.delta, g.clone(), config.stages, config.seed, config.max_seed_degree)?;
    let (s0, mut h) = init_stage0(config.delta, &g)?;
    let mut stages = vec![s0];
    let mut failure = None;
    for k in 1..=config.stages {
        let attempt = (|| -> Result<Built> {
            let w = choose_w::<T>(&ctx, &h, k)?;
            let (delta_k, probe) = choose_delta::<T>(&ctx, &h, w, k)?;
            build_stage::<T>(&ctx, &h, &stages, w, delta_k, probe)
        })();
        match attempt {
            Ok(Built::Stage(state, next)) => {
                stages.push(*state);
                h = next;
            }
            Ok(Built::Failed(f)) => {
                failure = Some(f);
                break;
            }
            Err(e) => {
                failure = Some(StageFailure {
                    stage: k,
                    detail: e.to_string(),
                    dynamic_range: f64::NAN,
                    w_k: None,
                    delta_k: None,
                    fit_history: Vec::new(),
                });
                break;
            }
        }
    }
    let mut file = ConstructionFile {
        config: config.clone(),
        x0: ctx.x0,
        x_orbit: ctx.x.clone(),
        stages,
        failure,
        verify: None,
        stage_files: Vec::new(),
        passed: false,
    };
    let report = verify::<T>(&file)?;
    file.passed = file.failure.is_none() && file.stages.iter().all(|s| s.report.passed) && report.passed;
    file.verify = Some(report);
    Ok(file)
}

/// Builds stages `0..=config.stages`, stopping at the first stage that cannot
/// be built, and verifies the return bound for everything that was built.
pub fn run_construction(config: &ConstructionConfig) -> Result<ConstructionFile> {
    if config.stages == 0 {
        return Err(Error::Config("need at least one stage after stage 0".into()));
    }
    match config.precision {
        PrecisionConfig::Standard => run::<f64>(config),
        p @ PrecisionConfig::Extended { .. } => {
            p.activate();
            run::<Ext>(config)
        }
    }
}

/// Orbit of `(x0, w)` under a bulging map against the escape bound
/// `Re z_k > r + k Re(a) / 4`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContrastRow {
    pub w: [f64; 2],
    pub steps_checked: usize,
    /// First step violating the escape bound.
    pub first_violation: Option<usize>,
    /// Step at which the orbit left the representable range.
    pub overflow_at: Option<usize>,
    pub escaped: bool,
}

/// Iterates `map` from `(x0, w)` for `steps` steps. Leaving the
/// representable range with the bound intact up to that step counts as escape.
pub fn contrast_row(map: &SkewProduct, x0: f64, w: Complex64, r: f64, steps: usize) -> ContrastRow {
    let quarter = map.f.a.re / 4.0;
    let mut p = (Complex64::new(x0, 0.0), w);
    let mut first_violation = None;
    let mut overflow_at = None;
    let mut checked = 0;
    for k in 1..=steps {
        match crate::maps::eval_skew::<f64>(map, &p) {
            Ok(next) => p = next,
            Err(_) => {
                overflow_at = Some(k);
                break;
            }
        }
        checked = k;
        if !(p.0.re > r + k as f64 * quarter) {
            first_violation = Some(k);
            break;
        }
    }
    ContrastRow { w: p2(w), steps_checked: checked, first_violation, overflow_at, escaped: first_violation.is_none() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn half() -> BaseMap {
        BaseMap::linear(Complex64::new(0.5, 0.0), 0.9).unwrap()
    }

    #[test]
    fn stage_zero_values() {
        let (s, h) = init_stage0(0.1, &half()).unwrap();
        let x0 = choose_x0(0.1).unwrap().x0;
        let x1 = x0 + 1.0 + (-x0).exp();
        assert_eq!(s.w_k, [0.45, 0.0]);
        assert!((h.h0_value() - Complex64::new(-x1 / 0.45, 0.0)).norm() < 1e-12);
        assert_eq!(s.delta_k, 0.5);
        assert_eq!(s.eps_k, 0.25);
        assert_eq!(s.report.prop4_margin, 0.0);
        assert!(s.report.passed);
    }

    #[test]
    fn sets_are_disjoint() {
        for delta in [0.1, 0.05, 0.0125] {
            let x0 = choose_x0(delta).unwrap().x0;
            for k in 1..6 {
                let d = disk_set(x0, delta, k).distance(&rect_set(x0, k));
                assert!(d >= 0.5 - 4.0 * delta - 1e-12);
                assert!(seed_union(x0, delta, k, 5).is_ok());
            }
        }
    }

    #[test]
    fn sharpening_squares_the_error() {
        let (m, t) = sharpen_depth(0.2, 1e-30).unwrap();
        assert!(t <= 1e-30);
        let mut s = 0.2;
        for _ in 0..m {
            s = s * s * (3.0 + 2.0 * s);
        }
        assert_eq!(s, t);
        assert!(sharpen_depth(0.3, 1e-3).is_err());
        let (b, bc) = sharpen64(Complex64::new(0.9, 0.05), 6);
        assert!((b - 1.0).norm() < 1e-14 && bc.norm() < 1e-20);
        let (b, _) = sharpen64(Complex64::new(0.1, -0.05), 6);
        assert!(b.norm() < 1e-20);
        let (bx, bcx) = sharpen::<Ext>(lift(Complex64::new(0.9, 0.05)), 6);
        let (b, bc) = sharpen64(Complex64::new(0.9, 0.05), 6);
        assert!((lower(&bx) - b).norm() < 1e-14);
        assert!((lower(&bcx) - bc).norm() <= 1e-10 * bc.norm());
    }

    #[test]
    fn stage_one_w_exists_above_threshold() {
        let (_, h) = init_stage0(0.1, &half()).unwrap();
        // Brute-force oracle: with h_0 constant, z_1 = x_1 + w h_0 = x_1 (1 - w / w_0).
        let x0 = choose_x0(0.1).unwrap().x0;
        let x1 = x0 + 1.0 + (-x0).exp();
        let mut w = 0.25;
        while x1 * w / 0.45 > 0.09 {
            w /= 2.0;
        }
        let got = choose_w_k(0.1, &half(), &h, 1, PrecisionConfig::Standard).unwrap();
        assert_eq!(got, Complex64::new(w, 0.0));
        assert!(got.re > 1e-8 && got.re < 0.5);
    }

    #[test]
    fn delta_one_matches_single_term() {
        let (_, h) = init_stage0(0.1, &half()).unwrap();
        let w = choose_w_k(0.1, &half(), &h, 1, PrecisionConfig::Standard).unwrap();
        let (d, probe) = choose_delta_k(0.1, &half(), &h, w, 1, 42).unwrap();
        assert!((probe.amplification_bound - w.norm()).abs() < 1e-15);
        assert_eq!(probe.first_order_delta, 0.5f64.min(0.1 / (4.0 * w.norm())));
        assert!(d < 1.0 && probe.passed);
        let zero = probe.probes.iter().find(|p| p.kind == "zero").unwrap();
        assert_eq!(zero.deviation, 0.0);
    }

    #[test]
    fn telescoping_rows() {
        let (s0, _) = init_stage0(0.1, &half()).unwrap();
        let mut s1 = s0.clone();
        s1.k = 1;
        s1.eps_k = 0.125;
        let rows = telescoping(&[s0, s1]);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].sum_from_m, 0.375);
        assert_eq!(rows[0].sum_after_m, 0.125);
        assert!(rows[0].from_m_ok && rows[0].after_m_ok);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn sharpen_fixes_zero_and_one_neighbourhoods(re in -0.15f64..0.15, im in -0.15f64..0.15) {
            let s = Complex64::new(re, im);
            let (b, _) = sharpen64(s, 5);
            prop_assert!(b.norm() <= s.norm());
            let (_, bc) = sharpen64(1.0 - s, 5);
            prop_assert!(bc.norm() <= s.norm() + 1e-15);
        }
    }
}
