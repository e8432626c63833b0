//! Map families: the Fatou map, base maps with an attracting fixed point at 0,
//! perturbations, and the skew product built from them.

use std::path::Path;
use std::sync::Arc;

use num_complex::{Complex, Complex64};
use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::complex::{self, finite, horner, horner64, lift};
use crate::error::{Error, Result};
use crate::nonbulging::StagedPerturbation;
use crate::scalar::Real;

const BOUNDARY_SAMPLES: usize = 4096;

/// `f(z) = z + a + e^{-z}` with `Re a > 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FatouMap {
    pub a: Complex64,
}

impl FatouMap {
    pub fn new(a: Complex64) -> Result<Self> {
        if !(a.re > 0.0) || !a.im.is_finite() {
            return Err(Error::Config(format!("Fatou parameter needs Re a > 0, got {a}")));
        }
        Ok(Self { a })
    }

    pub fn unit() -> Self {
        Self { a: Complex64::new(1.0, 0.0) }
    }
}

pub fn eval_fatou<T: Real>(f: &FatouMap, z: &Complex<T>) -> Result<Complex<T>> {
    let e = complex::exp(&(-z.clone()));
    let e = finite(e, "e^{-z}")?;
    finite(z.clone() + lift(f.a) + e, "f(z)")
}

/// Base map variants; all fix 0.
#[derive(Clone, Debug, PartialEq)]
pub enum BaseVariant {
    Linear { lambda: Complex64 },
    /// Ascending coefficients with `p(0) = 0` and `|p'(0)| < 1`.
    Poly { coeffs: Vec<Complex64> },
    /// `w^d q(w)` with `q(0) != 0`.
    Super { d: u32, q: Vec<Complex64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseMap {
    pub variant: BaseVariant,
    pub delta_g: f64,
    /// Bound `|g(w)| <= alpha |w|` on the closed disk of radius `delta_g`.
    pub alpha: f64,
}

fn circle(radius: f64, n: usize) -> impl Iterator<Item = Complex64> {
    (0..n).map(move |j| {
        Complex64::from_polar(radius, std::f64::consts::TAU * j as f64 / n as f64)
    })
}

impl BaseMap {
    pub fn linear(lambda: Complex64, delta_g: f64) -> Result<Self> {
        Self::new(BaseVariant::Linear { lambda }, delta_g)
    }

    pub fn monomial(d: u32, delta_g: f64) -> Result<Self> {
        Self::new(BaseVariant::Super { d, q: vec![Complex64::new(1.0, 0.0)] }, delta_g)
    }

    pub fn new(variant: BaseVariant, delta_g: f64) -> Result<Self> {
        if !(delta_g > 0.0) || !delta_g.is_finite() {
            return Err(Error::Config(format!("delta_g must be positive, got {delta_g}")));
        }
        match &variant {
            BaseVariant::Linear { lambda } => {
                if lambda.norm() >= 1.0 {
                    return Err(Error::Config(format!("linear base map needs |lambda| < 1, got {lambda}")));
                }
            }
            BaseVariant::Poly { coeffs } => {
                if coeffs.is_empty() || coeffs[0] != Complex64::zero() {
                    return Err(Error::Config("polynomial base map needs p(0) = 0".into()));
                }
                if coeffs.get(1).map_or(0.0, |c| c.norm()) >= 1.0 {
                    return Err(Error::Config("polynomial base map needs |p'(0)| < 1".into()));
                }
            }
            BaseVariant::Super { d, q } => {
                if *d < 2 {
                    return Err(Error::Config(format!("super-attracting base map needs d >= 2, got {d}")));
                }
                if q.first().map_or(true, |c| *c == Complex64::zero()) {
                    return Err(Error::Config("super-attracting base map needs q(0) != 0".into()));
                }
            }
        }
        let mut g = Self { variant, delta_g, alpha: 0.0 };
        g.alpha = g.sampled_contraction();
        if !(g.alpha < 1.0) {
            return Err(Error::Config(format!(
                "base map does not contract on the disk of radius {delta_g} (alpha = {})",
                g.alpha
            )));
        }
        Ok(g)
    }

    /// `max |g(w)/w|` over the circle `|w| = delta_g`, which bounds the
    /// quotient on the whole disk by the maximum principle.
    fn sampled_contraction(&self) -> f64 {
        match &self.variant {
            BaseVariant::Linear { lambda } => lambda.norm(),
            _ => circle(self.delta_g, BOUNDARY_SAMPLES)
                .map(|w| (self.eval64(w) / w).norm())
                .fold(0.0, f64::max),
        }
    }

    pub fn eval64(&self, w: Complex64) -> Complex64 {
        match &self.variant {
            BaseVariant::Linear { lambda } => lambda * w,
            BaseVariant::Poly { coeffs } => horner64(coeffs, w),
            BaseVariant::Super { d, q } => w.powu(*d) * horner64(q, w),
        }
    }

    /// Local degree of the fixed point: 1 unless super-attracting.
    pub fn local_degree(&self) -> u32 {
        match &self.variant {
            BaseVariant::Super { d, .. } => *d,
            _ => 1,
        }
    }

    /// `C_g = max |q|` over the closed disk of radius `delta_g` for `g = w^d q`.
    pub fn super_constant(&self) -> Option<f64> {
        match &self.variant {
            BaseVariant::Super { q, .. } => Some(
                circle(self.delta_g, BOUNDARY_SAMPLES)
                    .map(|w| horner64(q, w).norm())
                    .fold(horner64(q, Complex64::zero()).norm(), f64::max),
            ),
            _ => None,
        }
    }
}

pub fn eval_base<T: Real>(g: &BaseMap, w: &Complex<T>) -> Result<Complex<T>> {
    let v = match &g.variant {
        BaseVariant::Linear { lambda } => lift::<T>(*lambda) * w.clone(),
        BaseVariant::Poly { coeffs } => horner(coeffs, w),
        BaseVariant::Super { d, q } => complex::powu(w, *d) * horner(q, w),
    };
    finite(v, "g(w)")
}

/// `g^k(w)`.
pub fn iterate_base<T: Real>(g: &BaseMap, w: &Complex<T>, k: usize) -> Result<Complex<T>> {
    let mut v = w.clone();
    for _ in 0..k {
        v = eval_base(g, &v)?;
    }
    Ok(v)
}

/// Perturbation term `h(z, w)` of the skew product.
#[derive(Clone, Debug)]
pub enum Perturbation {
    Zero,
    /// Ascending coefficients in `z`.
    PolyZ(Vec<Complex64>),
    /// `coeffs[i][j]` multiplies `z^i w^j`.
    PolyZW(Vec<Vec<Complex64>>),
    /// `e^{z^k}`, `k >= 1`.
    Exp(u32),
    /// Entire function of `w` alone, given by ascending Taylor coefficients.
    PolyW(Vec<Complex64>),
    /// A perturbation produced by the staged non-bulging construction.
    Staged(Arc<StagedPerturbation>),
}

impl Perturbation {
    pub fn exp(k: u32) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("exponential family needs k >= 1".into()));
        }
        Ok(Self::Exp(k))
    }

    pub fn depends_on_w(&self) -> bool {
        matches!(self, Self::PolyZW(c) if c.iter().any(|row| row.len() > 1)) || matches!(self, Self::PolyW(_))
    }
}

pub fn eval_perturbation<T: Real>(h: &Perturbation, z: &Complex<T>, w: &Complex<T>) -> Result<Complex<T>> {
    let v = match h {
        Perturbation::Zero => Complex::zero(),
        Perturbation::PolyZ(c) => horner(c, z),
        Perturbation::PolyZW(rows) => {
            let mut acc = Complex::<T>::zero();
            for row in rows.iter().rev() {
                acc = acc * z.clone() + horner(row, w);
            }
            acc
        }
        Perturbation::Exp(k) => complex::exp(&complex::powu(z, *k)),
        Perturbation::PolyW(c) => horner(c, w),
        Perturbation::Staged(s) => s.eval(z)?,
    };
    finite(v, "h(z, w)")
}

/// `log |h(z, w)|`, evaluated without forming `|h|` where that could overflow.
pub fn log_abs_perturbation(h: &Perturbation, z: Complex64, w: Complex64) -> Result<f64> {
    match h {
        Perturbation::Exp(k) => Ok(z.powu(*k).re),
        _ => {
            let v = eval_perturbation::<f64>(h, &z, &w)?;
            Ok(v.norm().ln())
        }
    }
}

#[derive(Clone, Debug)]
pub struct SkewProduct {
    pub f: FatouMap,
    pub h: Perturbation,
    pub g: BaseMap,
}

/// `F(z, w) = (f(z) + w h(z, w), g(w))`. On the fiber `w = 0` the perturbation
/// is not evaluated, so the first coordinate is `f(z)` exactly.
pub fn eval_skew<T: Real>(
    map: &SkewProduct,
    p: &(Complex<T>, Complex<T>),
) -> Result<(Complex<T>, Complex<T>)> {
    let (z, w) = p;
    let fz = eval_fatou(&map.f, z)?;
    let z1 = if w.is_zero() {
        fz
    } else {
        let hz = eval_perturbation(&map.h, z, w)?;
        finite(fz + w.clone() * hz, "first coordinate of F")?
    };
    Ok((z1, eval_base(&map.g, w)?))
}

// JSON configuration.

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FatouConfig {
    pub a: [f64; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum BaseConfig {
    Linear { lambda: [f64; 2], delta_g: f64 },
    Poly { coeffs: Vec<[f64; 2]>, delta_g: f64 },
    Super { d: u32, q: Vec<[f64; 2]>, delta_g: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum PerturbationConfig {
    Zero,
    PolyZ { coeffs: Vec<[f64; 2]> },
    PolyZw { coeffs: Vec<Vec<[f64; 2]>> },
    Exp { k: u32 },
    PolyW { coeffs: Vec<[f64; 2]> },
    /// Path to a construction report written by `nonbulge-construct`,
    /// relative to the configuration file.
    Staged { file: String },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SkewConfig {
    pub fatou: FatouConfig,
    pub g: BaseConfig,
    pub h: PerturbationConfig,
}

fn c64(v: &[f64; 2]) -> Complex64 {
    Complex64::new(v[0], v[1])
}

fn c64s(v: &[[f64; 2]]) -> Vec<Complex64> {
    v.iter().map(c64).collect()
}

impl BaseConfig {
    pub fn build(&self) -> Result<BaseMap> {
        match self {
            Self::Linear { lambda, delta_g } => BaseMap::linear(c64(lambda), *delta_g),
            Self::Poly { coeffs, delta_g } => BaseMap::new(BaseVariant::Poly { coeffs: c64s(coeffs) }, *delta_g),
            Self::Super { d, q, delta_g } => BaseMap::new(BaseVariant::Super { d: *d, q: c64s(q) }, *delta_g),
        }
    }
}

impl SkewConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Builds the map; `base_dir` resolves relative paths of staged perturbations.
    pub fn build(&self, base_dir: &Path) -> Result<SkewProduct> {
        let f = FatouMap::new(c64(&self.fatou.a))?;
        let g = self.g.build()?;
        let h = match &self.h {
            PerturbationConfig::Zero => Perturbation::Zero,
            PerturbationConfig::PolyZ { coeffs } => Perturbation::PolyZ(c64s(coeffs)),
            PerturbationConfig::PolyZw { coeffs } => {
                Perturbation::PolyZW(coeffs.iter().map(|row| c64s(row)).collect())
            }
            PerturbationConfig::Exp { k } => Perturbation::exp(*k)?,
            PerturbationConfig::PolyW { coeffs } => Perturbation::PolyW(c64s(coeffs)),
            PerturbationConfig::Staged { file } => {
                let report = crate::nonbulging::ConstructionFile::load(&base_dir.join(file))?;
                Perturbation::Staged(Arc::new(report.final_perturbation()?))
            }
        };
        Ok(SkewProduct { f, h, g })
    }
}
