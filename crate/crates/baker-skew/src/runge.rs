//! Polynomial approximation on finite unions of pairwise disjoint disks and
//! rectangles, fitted by least squares on boundary samples and certified by a
//! denser boundary resample.

use nalgebra::{DMatrix, DVector};
use num_complex::{Complex, Complex64};
use num_traits::{One, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::complex::{finite, horner64, lift};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Certification resample density relative to the fit samples.
pub const CERTIFY_FACTOR: usize = 8;
/// A resample may exceed the fit-time certificate by at most this factor.
pub const STABILITY_FACTOR: f64 = 2.0;
const MONOMIAL_CONDITION_LIMIT: f64 = 1e14;
const ARNOLDI_BREAKDOWN: f64 = 1e-13;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CompactSet {
    Disk { center: [f64; 2], radius: f64 },
    Rect { x_min: f64, x_max: f64, y_abs: f64 },
}

impl CompactSet {
    pub fn disk(center: Complex64, radius: f64) -> Self {
        Self::Disk { center: [center.re, center.im], radius }
    }

    pub fn rect(x_min: f64, x_max: f64, y_abs: f64) -> Self {
        Self::Rect { x_min, x_max, y_abs }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Disk { radius, .. } if !(radius > 0.0) => {
                Err(Error::Precondition(format!("disk radius must be positive, got {radius}")))
            }
            Self::Rect { x_min, x_max, y_abs } if !(x_min < x_max && y_abs > 0.0) => Err(Error::Precondition(
                format!("rectangle needs x_min < x_max and y_abs > 0, got {x_min}, {x_max}, {y_abs}"),
            )),
            _ => Ok(()),
        }
    }

    pub fn perimeter(&self) -> f64 {
        match *self {
            Self::Disk { radius, .. } => std::f64::consts::TAU * radius,
            Self::Rect { x_min, x_max, y_abs } => 2.0 * (x_max - x_min) + 4.0 * y_abs,
        }
    }

    /// Bounding box `(x_min, x_max, y_min, y_max)`.
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        match *self {
            Self::Disk { center, radius } => {
                (center[0] - radius, center[0] + radius, center[1] - radius, center[1] + radius)
            }
            Self::Rect { x_min, x_max, y_abs } => (x_min, x_max, -y_abs, y_abs),
        }
    }

    pub fn contains(&self, z: Complex64) -> bool {
        match *self {
            Self::Disk { center, radius } => (z - Complex64::new(center[0], center[1])).norm() <= radius,
            Self::Rect { x_min, x_max, y_abs } => z.re >= x_min && z.re <= x_max && z.im.abs() <= y_abs,
        }
    }

    /// Euclidean distance between the two sets (0 when they meet).
    pub fn distance(&self, other: &Self) -> f64 {
        fn point_rect(p: Complex64, x_min: f64, x_max: f64, y_abs: f64) -> f64 {
            let dx = (x_min - p.re).max(0.0).max(p.re - x_max);
            let dy = (-y_abs - p.im).max(0.0).max(p.im - y_abs);
            dx.hypot(dy)
        }
        match (*self, *other) {
            (Self::Disk { center: a, radius: ra }, Self::Disk { center: b, radius: rb }) => {
                ((a[0] - b[0]).hypot(a[1] - b[1]) - ra - rb).max(0.0)
            }
            (Self::Disk { center, radius }, Self::Rect { x_min, x_max, y_abs })
            | (Self::Rect { x_min, x_max, y_abs }, Self::Disk { center, radius }) => {
                (point_rect(Complex64::new(center[0], center[1]), x_min, x_max, y_abs) - radius).max(0.0)
            }
            (Self::Rect { x_min: a0, x_max: a1, y_abs: ay }, Self::Rect { x_min: b0, x_max: b1, y_abs: by }) => {
                let dx = (b0 - a1).max(0.0).max(a0 - b1);
                let dy = ((-by) - ay).max(0.0).max((-ay) - by);
                dx.hypot(dy)
            }
        }
    }

    /// `n` points spaced uniformly in arclength, shifted by `phase` of a spacing.
    pub fn boundary(&self, n: usize, phase: f64) -> Vec<Complex64> {
        match *self {
            Self::Disk { center, radius } => {
                let c = Complex64::new(center[0], center[1]);
                (0..n)
                    .map(|j| c + Complex64::from_polar(radius, std::f64::consts::TAU * (j as f64 + phase) / n as f64))
                    .collect()
            }
            Self::Rect { x_min, x_max, y_abs } => {
                let w = x_max - x_min;
                let h = 2.0 * y_abs;
                let per = 2.0 * w + 2.0 * h;
                (0..n)
                    .map(|j| {
                        let s = per * (j as f64 + phase) / n as f64;
                        if s < w {
                            Complex64::new(x_min + s, -y_abs)
                        } else if s < w + h {
                            Complex64::new(x_max, -y_abs + (s - w))
                        } else if s < 2.0 * w + h {
                            Complex64::new(x_max - (s - w - h), y_abs)
                        } else {
                            Complex64::new(x_min, y_abs - (s - 2.0 * w - h))
                        }
                    })
                    .collect()
            }
        }
    }

    /// `n` seeded uniform points of the set.
    pub fn interior(&self, n: usize, seed: u64) -> Vec<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| match *self {
                Self::Disk { center, radius } => {
                    let r = radius * rng.gen::<f64>().sqrt();
                    Complex64::new(center[0], center[1])
                        + Complex64::from_polar(r, std::f64::consts::TAU * rng.gen::<f64>())
                }
                Self::Rect { x_min, x_max, y_abs } => Complex64::new(
                    x_min + (x_max - x_min) * rng.gen::<f64>(),
                    y_abs * (2.0 * rng.gen::<f64>() - 1.0),
                ),
            })
            .collect()
    }
}

/// Holomorphic target on one set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    Constant { value: [f64; 2] },
    /// Ascending coefficients in `z`.
    Polynomial { coeffs: Vec<[f64; 2]> },
}

impl Target {
    pub fn constant(c: Complex64) -> Self {
        Self::Constant { value: [c.re, c.im] }
    }

    pub fn polynomial(coeffs: &[Complex64]) -> Self {
        Self::Polynomial { coeffs: coeffs.iter().map(|c| [c.re, c.im]).collect() }
    }

    pub fn eval(&self, z: Complex64) -> Complex64 {
        match self {
            Self::Constant { value } => Complex64::new(value[0], value[1]),
            Self::Polynomial { coeffs } => {
                let c: Vec<Complex64> = coeffs.iter().map(|v| Complex64::new(v[0], v[1])).collect();
                horner64(&c, z)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Piece {
    pub set: CompactSet,
    pub target: Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompactSetUnion {
    pub pieces: Vec<Piece>,
}

impl CompactSetUnion {
    pub fn new(pieces: Vec<(CompactSet, Target)>) -> Result<Self> {
        let u = Self { pieces: pieces.into_iter().map(|(set, target)| Piece { set, target }).collect() };
        u.validate()?;
        Ok(u)
    }

    /// Sets must be valid and pairwise disjoint. Finitely many disjoint disks
    /// and rectangles have connected complement.
    pub fn validate(&self) -> Result<()> {
        if self.pieces.is_empty() {
            return Err(Error::Precondition("union has no sets".into()));
        }
        for p in &self.pieces {
            p.set.validate()?;
        }
        for i in 0..self.pieces.len() {
            for j in i + 1..self.pieces.len() {
                if !(self.pieces[i].set.distance(&self.pieces[j].set) > 0.0) {
                    return Err(Error::Precondition(format!("sets {i} and {j} are not disjoint")));
                }
            }
        }
        Ok(())
    }

    /// Center and half-diagonal of the bounding box of all sets.
    pub fn frame(&self) -> (Complex64, f64) {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in &self.pieces {
            let (a, b, c, d) = p.set.bbox();
            x0 = x0.min(a);
            x1 = x1.max(b);
            y0 = y0.min(c);
            y1 = y1.max(d);
        }
        let center = Complex64::new((x0 + x1) / 2.0, (y0 + y1) / 2.0);
        let scale = ((x1 - x0) / 2.0).hypot((y1 - y0) / 2.0);
        (center, scale)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    /// `((z - z_c) / s)^j`.
    ScaledMonomial,
    /// Polynomials orthonormal on the fit samples, generated by an Arnoldi
    /// recurrence in the scaled variable.
    Arnoldi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Basis {
    pub kind: BasisKind,
    pub center: [f64; 2],
    pub scale: f64,
    /// Arnoldi only: column `k` holds `H[0..=k+1][k]`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hessenberg: Vec<Vec<[f64; 2]>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolynomialApproximant {
    pub basis: Basis,
    /// Ascending coefficients in the basis.
    pub coeffs: Vec<[f64; 2]>,
    pub degree: usize,
    /// Certified sampled sup error per set, from the dense resample.
    pub per_set_error: Vec<f64>,
    /// Sup residual per set on the fit samples.
    pub fit_residual: Vec<f64>,
}

fn c64(v: [f64; 2]) -> Complex64 {
    Complex64::new(v[0], v[1])
}

fn pair(z: Complex64) -> [f64; 2] {
    [z.re, z.im]
}

struct Hessenberg {
    cols: Vec<Vec<Complex64>>,
}

impl PolynomialApproximant {
    pub fn center(&self) -> Complex64 {
        c64(self.basis.center)
    }

    pub fn coefficients(&self) -> Vec<Complex64> {
        self.coeffs.iter().map(|c| c64(*c)).collect()
    }

    fn hessenberg(&self) -> Hessenberg {
        Hessenberg {
            cols: self.basis.hessenberg.iter().map(|col| col.iter().map(|v| c64(*v)).collect()).collect(),
        }
    }

    /// Fast evaluator for repeated standard-precision use.
    pub fn evaluator(&self) -> Evaluator {
        Evaluator {
            kind: self.basis.kind,
            center: self.center(),
            scale: self.basis.scale,
            coeffs: self.coefficients(),
            h: self.hessenberg().cols,
        }
    }

    pub fn eval64(&self, z: Complex64) -> Complex64 {
        self.evaluator().eval(z)
    }

    /// Evaluation at the configured precision of `T`.
    pub fn eval<T: Real>(&self, z: &Complex<T>) -> Result<Complex<T>> {
        let u = (z.clone() - lift::<T>(self.center())) / Complex::new(T::from_f64(self.basis.scale), T::zero());
        let coeffs: Vec<Complex<T>> = self.coeffs.iter().map(|c| lift(c64(*c))).collect();
        let v = match self.basis.kind {
            BasisKind::ScaledMonomial => {
                let mut acc = Complex::<T>::zero();
                for c in coeffs.iter().rev() {
                    acc = acc * u.clone() + c.clone();
                }
                acc
            }
            BasisKind::Arnoldi => {
                let h = self.hessenberg();
                let mut w: Vec<Complex<T>> = Vec::with_capacity(coeffs.len());
                w.push(Complex::one());
                let mut acc = coeffs[0].clone();
                for (k, col) in h.cols.iter().enumerate().take(coeffs.len() - 1) {
                    let mut next = u.clone() * w[k].clone();
                    for (j, hjk) in col.iter().enumerate().take(k + 1) {
                        next = next - lift::<T>(*hjk) * w[j].clone();
                    }
                    next = next / lift::<T>(col[k + 1]);
                    acc = acc + coeffs[k + 1].clone() * next.clone();
                    w.push(next);
                }
                acc
            }
        };
        finite(v, "polynomial value")
    }
}

/// Precomputed standard-precision evaluator.
#[derive(Clone, Debug)]
pub struct Evaluator {
    kind: BasisKind,
    center: Complex64,
    scale: f64,
    coeffs: Vec<Complex64>,
    h: Vec<Vec<Complex64>>,
}

impl Evaluator {
    pub fn eval(&self, z: Complex64) -> Complex64 {
        let u = (z - self.center) / self.scale;
        match self.kind {
            BasisKind::ScaledMonomial => horner64(&self.coeffs, u),
            BasisKind::Arnoldi => {
                let n = self.coeffs.len();
                let mut w = Vec::with_capacity(n);
                w.push(Complex64::one());
                let mut acc = self.coeffs[0];
                for k in 0..n - 1 {
                    let col = &self.h[k];
                    let mut next = u * w[k];
                    for j in 0..=k {
                        next -= col[j] * w[j];
                    }
                    next /= col[k + 1];
                    acc += self.coeffs[k + 1] * next;
                    w.push(next);
                }
                acc
            }
        }
    }
}

fn sample_union(union: &CompactSetUnion, counts: &[usize], phase: f64) -> (Vec<Complex64>, Vec<Complex64>, Vec<usize>) {
    let mut z = Vec::new();
    let mut f = Vec::new();
    let mut owner = Vec::new();
    for (i, (p, &n)) in union.pieces.iter().zip(counts).enumerate() {
        for q in p.set.boundary(n, phase) {
            f.push(p.target.eval(q));
            z.push(q);
            owner.push(i);
        }
    }
    (z, f, owner)
}

fn per_set_max(values: &[f64], owner: &[usize], sets: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; sets];
    for (v, &o) in values.iter().zip(owner) {
        out[o] = if v.is_nan() { f64::INFINITY } else { out[o].max(*v) };
    }
    out
}

fn solve_monomial(u: &[Complex64], f: &[Complex64], degree: usize) -> Result<Vec<Complex64>> {
    let m = u.len();
    let n = degree + 1;
    let mut a = DMatrix::<Complex64>::zeros(m, n);
    for (i, &ui) in u.iter().enumerate() {
        let mut p = Complex64::one();
        for j in 0..n {
            a[(i, j)] = p;
            p *= ui;
        }
    }
    let b = DVector::from_column_slice(f);
    let qr = a.col_piv_qr();
    let r = qr.r();
    let d0 = r[(0, 0)].norm();
    let dn = (0..n).map(|j| r[(j, j)].norm()).fold(f64::INFINITY, f64::min);
    if !(dn > 0.0) || d0 / dn > MONOMIAL_CONDITION_LIMIT {
        return Err(Error::IllConditioned {
            degree,
            detail: format!(
                "pivoted R diagonal ratio {:.3e} exceeds {:.0e}; lower the degree or use the Arnoldi basis",
                d0 / dn,
                MONOMIAL_CONDITION_LIMIT
            ),
        });
    }
    // A P = Q R, so R y = Q^H b and x = P y.
    let rhs = qr.q().adjoint() * b;
    let mut y = r.solve_upper_triangular(&rhs).ok_or_else(|| Error::IllConditioned {
        degree,
        detail: "triangular solve failed".into(),
    })?;
    qr.p().inv_permute_rows(&mut y);
    Ok(y.iter().copied().collect())
}

fn dot_scaled(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    let s: Complex64 = a.par_chunks(4096).zip(b.par_chunks(4096)).map(|(x, y)| {
        x.iter().zip(y).map(|(p, q)| p.conj() * q).sum::<Complex64>()
    }).sum();
    s / a.len() as f64
}

fn arnoldi_fit(u: &[Complex64], f: &[Complex64], degree: usize) -> Result<(Vec<Complex64>, Vec<Vec<Complex64>>)> {
    let m = u.len();
    let mut q: Vec<Vec<Complex64>> = vec![vec![Complex64::one(); m]];
    let mut h: Vec<Vec<Complex64>> = Vec::with_capacity(degree);
    for k in 0..degree {
        let mut v: Vec<Complex64> = u.iter().zip(&q[k]).map(|(a, b)| a * b).collect();
        let mut col = vec![Complex64::zero(); k + 2];
        for _ in 0..2 {
            for j in 0..=k {
                let c = dot_scaled(&q[j], &v);
                col[j] += c;
                v.par_iter_mut().zip(q[j].par_iter()).for_each(|(x, y)| *x -= c * y);
            }
        }
        let norm = (v.iter().map(|x| x.norm_sqr()).sum::<f64>() / m as f64).sqrt();
        if !(norm > ARNOLDI_BREAKDOWN) {
            return Err(Error::IllConditioned {
                degree,
                detail: format!("Arnoldi breakdown at step {k}: too few distinct samples for this degree"),
            });
        }
        col[k + 1] = Complex64::new(norm, 0.0);
        v.iter_mut().for_each(|x| *x /= norm);
        q.push(v);
        h.push(col);
    }
    let d = q.iter().map(|col| dot_scaled(col, f)).collect();
    Ok((d, h))
}

/// Sample counts per set: at least `min_per_set`, and at least `density` per
/// unit of perimeter.
pub fn sample_counts(union: &CompactSetUnion, min_per_set: usize, density: f64) -> Vec<usize> {
    union.pieces.iter().map(|p| min_per_set.max((p.set.perimeter() * density).ceil() as usize)).collect()
}

/// Least-squares fit with `fit_samples` boundary points on each set.
pub fn fit(union: &CompactSetUnion, degree: usize, fit_samples: usize) -> Result<PolynomialApproximant> {
    fit_with(union, degree, &vec![fit_samples; union.pieces.len()], BasisKind::ScaledMonomial)
}

pub fn fit_with(
    union: &CompactSetUnion,
    degree: usize,
    counts: &[usize],
    kind: BasisKind,
) -> Result<PolynomialApproximant> {
    union.validate()?;
    if counts.len() != union.pieces.len() {
        return Err(Error::Precondition("one sample count per set is required".into()));
    }
    if let Some(&c) = counts.iter().find(|&&c| c < 4 * (degree + 1)) {
        return Err(Error::Precondition(format!(
            "need at least {} samples per set at degree {degree}, got {c}",
            4 * (degree + 1)
        )));
    }
    let (center, scale) = union.frame();
    let (z, f, owner) = sample_union(union, counts, 0.0);
    let u: Vec<Complex64> = z.iter().map(|z| (z - center) / scale).collect();
    let (coeffs, h) = match kind {
        BasisKind::ScaledMonomial => (solve_monomial(&u, &f, degree)?, Vec::new()),
        BasisKind::Arnoldi => arnoldi_fit(&u, &f, degree)?,
    };
    let mut approx = PolynomialApproximant {
        basis: Basis {
            kind,
            center: pair(center),
            scale,
            hessenberg: h.iter().map(|col| col.iter().map(|c| pair(*c)).collect()).collect(),
        },
        coeffs: coeffs.iter().map(|c| pair(*c)).collect(),
        degree,
        per_set_error: Vec::new(),
        fit_residual: Vec::new(),
    };
    let ev = approx.evaluator();
    let res: Vec<f64> = z.par_iter().zip(f.par_iter()).map(|(z, t)| (ev.eval(*z) - t).norm()).collect();
    approx.fit_residual = per_set_max(&res, &owner, union.pieces.len());
    let dense: Vec<usize> = counts.iter().map(|c| c * CERTIFY_FACTOR).collect();
    approx.per_set_error = errors_on(&ev, union, &dense, 0.5);
    Ok(approx)
}

fn errors_on(ev: &Evaluator, union: &CompactSetUnion, counts: &[usize], phase: f64) -> Vec<f64> {
    let (z, f, owner) = sample_union(union, counts, phase);
    let res: Vec<f64> = z.par_iter().zip(f.par_iter()).map(|(z, t)| (ev.eval(*z) - t).norm()).collect();
    per_set_max(&res, &owner, union.pieces.len())
}

/// Per-set sup error on `dense_samples` fresh boundary points of each set.
pub fn sup_error(p: &PolynomialApproximant, union: &CompactSetUnion, dense_samples: usize) -> Result<Vec<f64>> {
    if dense_samples < 1000 {
        return Err(Error::Precondition(format!("need at least 1000 dense samples per set, got {dense_samples}")));
    }
    Ok(errors_on(&p.evaluator(), union, &vec![dense_samples; union.pieces.len()], 0.25))
}

/// Recomputes the certificate on a fresh resample. The second value is false
/// when some set's error grew by more than [`STABILITY_FACTOR`].
pub fn recertify(p: &PolynomialApproximant, union: &CompactSetUnion, dense_samples: usize) -> Result<(Vec<f64>, bool)> {
    let fresh = sup_error(p, union, dense_samples)?;
    let stable = fresh
        .iter()
        .zip(&p.per_set_error)
        .all(|(new, old)| *new <= STABILITY_FACTOR * old.max(f64::EPSILON));
    Ok((fresh, stable))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AutoFitStep {
    pub degree: usize,
    pub error: Option<f64>,
    pub note: Option<String>,
}

#[derive(Clone, Debug)]
pub struct AutoFit {
    pub best: Option<PolynomialApproximant>,
    pub reached: bool,
    pub history: Vec<AutoFitStep>,
    pub stop_reason: String,
}

#[derive(Clone, Copy, Debug)]
pub struct AutoFitOptions {
    pub target: f64,
    pub start_degree: usize,
    pub max_degree: usize,
    pub kind: BasisKind,
    pub density: f64,
    /// Stop once doubling the degree improves the error by less than this factor.
    pub stagnation: f64,
}

/// Doubles the degree until the largest certified per-set error is below
/// `target`, the degree cap is reached, conditioning fails, or progress stalls.
pub fn fit_auto(union: &CompactSetUnion, opts: &AutoFitOptions) -> AutoFit {
    let mut history = Vec::new();
    let mut best: Option<PolynomialApproximant> = None;
    let mut degree = opts.start_degree.max(1);
    let mut prev_err = f64::INFINITY;
    loop {
        let counts = sample_counts(union, 4 * (degree + 1), opts.density);
        match fit_with(union, degree, &counts, opts.kind) {
            Ok(p) => {
                let err = p.per_set_error.iter().copied().fold(0.0, f64::max);
                history.push(AutoFitStep { degree, error: Some(err), note: None });
                let better = best.as_ref().map_or(true, |b| err < b.per_set_error.iter().copied().fold(0.0, f64::max));
                if better {
                    best = Some(p);
                }
                if err < opts.target {
                    return AutoFit { best, reached: true, history, stop_reason: "target reached".into() };
                }
                if err > opts.stagnation * prev_err {
                    return AutoFit {
                        best,
                        reached: false,
                        history,
                        stop_reason: format!("error stalled at {err:.3e} by degree {degree}"),
                    };
                }
                prev_err = err;
            }
            Err(e) => {
                history.push(AutoFitStep { degree, error: None, note: Some(e.to_string()) });
                return AutoFit { best, reached: false, history, stop_reason: e.to_string() };
            }
        }
        if degree >= opts.max_degree {
            return AutoFit { best, reached: false, history, stop_reason: format!("degree cap {} reached", opts.max_degree) };
        }
        degree = (degree * 2).min(opts.max_degree);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    pub(crate) fn two_disks() -> CompactSetUnion {
        CompactSetUnion::new(vec![
            (CompactSet::disk(c(0.0, 0.0), 1.0), Target::constant(c(1.0, 0.0))),
            (CompactSet::disk(c(5.0, 0.0), 1.0), Target::constant(c(0.0, 0.0))),
        ])
        .unwrap()
    }

    #[test]
    fn exact_recovery() {
        let target = Target::polynomial(&[c(1.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]);
        let u = CompactSetUnion::new(vec![(CompactSet::disk(c(0.0, 0.0), 1.0), target)]).unwrap();
        let p = fit(&u, 2, 64).unwrap();
        assert_eq!(p.basis.center, [0.0, 0.0]);
        assert!((p.basis.scale - std::f64::consts::SQRT_2).abs() < 1e-15);
        // Undo the scaling: coefficient j in z is coeffs[j] / s^j.
        let s = p.basis.scale;
        let raw: Vec<Complex64> = p.coefficients().iter().enumerate().map(|(j, a)| a / s.powi(j as i32)).collect();
        for (got, want) in raw.iter().zip([c(1.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]) {
            assert!((got - want).norm() < 1e-12, "{got} vs {want}");
        }
        assert!(p.per_set_error[0] < 1e-12);
        assert!(sup_error(&p, &u, 1000).unwrap()[0] < 1e-12);
    }

    #[test]
    fn two_disk_benchmark() {
        let u = two_disks();
        let p = fit(&u, 40, 4 * 41).unwrap();
        assert!(p.per_set_error.iter().all(|e| *e < 1e-2), "{:?}", p.per_set_error);
        let (fresh, stable) = recertify(&p, &u, 1000).unwrap();
        assert!(stable);
        for (a, b) in fresh.iter().zip(&p.per_set_error) {
            assert!(*a <= 2.0 * b && *b <= 2.0 * a);
        }
    }

    #[test]
    fn degree_zero_cannot_split_constants() {
        let u = two_disks();
        let p = fit(&u, 0, 64).unwrap();
        assert!(p.per_set_error.iter().all(|e| *e >= 0.5 - 1e-12));
    }

    #[test]
    fn overlap_is_rejected() {
        let r = CompactSetUnion::new(vec![
            (CompactSet::disk(c(0.0, 0.0), 1.0), Target::constant(c(1.0, 0.0))),
            (CompactSet::disk(c(1.5, 0.0), 1.0), Target::constant(c(0.0, 0.0))),
        ]);
        assert!(matches!(r, Err(Error::Precondition(_))));
        let r = CompactSetUnion::new(vec![
            (CompactSet::rect(-1.0, 1.0, 1.0), Target::constant(c(1.0, 0.0))),
            (CompactSet::disk(c(1.5, 0.0), 0.6), Target::constant(c(0.0, 0.0))),
        ]);
        assert!(r.is_err());
        assert!(fit(&two_disks(), 10, 10).is_err());
    }

    #[test]
    fn arnoldi_matches_monomial_at_low_degree() {
        let u = two_disks();
        let a = fit(&u, 20, 84).unwrap();
        let b = fit_with(&u, 20, &[84, 84], BasisKind::Arnoldi).unwrap();
        for z in [c(0.3, 0.2), c(5.5, -0.4), c(2.5, 0.0)] {
            assert!((a.eval64(z) - b.eval64(z)).norm() < 1e-8);
        }
        let ext: Complex<crate::scalar::Ext> = lift(c(0.3, 0.2));
        let v = crate::complex::lower(&b.eval(&ext).unwrap());
        assert!((v - b.eval64(c(0.3, 0.2))).norm() < 1e-12);
    }

    #[test]
    fn arnoldi_reaches_high_accuracy() {
        let u = two_disks();
        let p = fit_with(&u, 80, &[400, 400], BasisKind::Arnoldi).unwrap();
        assert!(p.per_set_error.iter().all(|e| *e < 1e-6), "{:?}", p.per_set_error);
    }

    #[test]
    fn rectangle_boundary_is_uniform() {
        let r = CompactSet::rect(-1.0, 3.0, 1.0);
        let pts = r.boundary(120, 0.0);
        assert_eq!(pts.len(), 120);
        let gaps: Vec<f64> = pts.windows(2).map(|w| (w[1] - w[0]).norm()).collect();
        let step = r.perimeter() / 120.0;
        assert!(gaps.iter().all(|g| *g <= step + 1e-12));
        assert!(pts.iter().all(|p| r.contains(*p)));
    }

    #[test]
    fn auto_fit_reaches_target() {
        let opts = AutoFitOptions {
            target: 1e-3,
            start_degree: 8,
            max_degree: 128,
            kind: BasisKind::Arnoldi,
            density: 8.0,
            stagnation: 0.95,
        };
        let out = fit_auto(&two_disks(), &opts);
        assert!(out.reached, "{}", out.stop_reason);
        assert!(out.best.unwrap().per_set_error.iter().all(|e| *e < 1e-3));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn translation_covariance(re in -20.0f64..20.0, im in -20.0f64..20.0) {
            let shift = c(re, im);
            let base = two_disks();
            let moved = CompactSetUnion::new(vec![
                (CompactSet::disk(shift, 1.0), Target::constant(c(1.0, 0.0))),
                (CompactSet::disk(c(5.0, 0.0) + shift, 1.0), Target::constant(c(0.0, 0.0))),
            ]).unwrap();
            let p = fit(&base, 16, 68).unwrap();
            let q = fit(&moved, 16, 68).unwrap();
            prop_assert!((q.center() - p.center() - shift).norm() < 1e-12);
            prop_assert!((q.basis.scale - p.basis.scale).abs() < 1e-12);
            for (a, b) in p.coefficients().iter().zip(q.coefficients()) {
                prop_assert!((a - b).norm() < 1e-8);
            }
        }
    }
}
