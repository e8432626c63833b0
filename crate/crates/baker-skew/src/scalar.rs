//! Real scalars at configurable precision.
//!
//! Every numerical routine in the crate is generic over [`Real`]. Two
//! implementations are provided: `f64` and [`Ext`], a software float backed by
//! `astro-float` whose working precision is set process-wide with
//! [`set_extended_digits`].

use std::cell::RefCell;
use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Rem, Sub};
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};

use astro_float::{BigFloat, Consts, Radix, RoundingMode, Sign};
use num_traits::{Num, One, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Real scalar field used by all evaluation code.
pub trait Real:
    Clone + fmt::Debug + PartialOrd + Send + Sync + 'static + Num + Neg<Output = Self>
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(&self) -> f64;
    fn exp(&self) -> Self;
    fn ln(&self) -> Self;
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn sqrt(&self) -> Self;
    fn abs(&self) -> Self;
    fn is_finite(&self) -> bool;

    fn hypot(&self, other: &Self) -> Self {
        let a = self.abs();
        let b = other.abs();
        let (big, small) = if a >= b { (a, b) } else { (b, a) };
        if big.is_zero() {
            return big;
        }
        let q = small / big.clone();
        big * (Self::one() + q.clone() * q).sqrt()
    }

    fn max_of(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(&self) -> f64 {
        *self
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn ln(&self) -> Self {
        f64::ln(*self)
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
    fn abs(&self) -> Self {
        f64::abs(*self)
    }
    fn is_finite(&self) -> bool {
        f64::is_finite(*self)
    }
    fn hypot(&self, other: &Self) -> Self {
        f64::hypot(*self, *other)
    }
}

/// Precision used by arithmetic on [`Ext`] values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PrecisionConfig {
    Standard,
    Extended { digits: u32 },
}

impl PrecisionConfig {
    pub fn extended(digits: u32) -> Result<Self> {
        if digits < 16 {
            return Err(Error::Config(format!(
                "extended precision needs at least 16 digits, got {digits}"
            )));
        }
        Ok(Self::Extended { digits })
    }

    /// Parses `standard` or `extended:<digits>`.
    pub fn parse(s: &str) -> Result<Self> {
        if s == "standard" {
            return Ok(Self::Standard);
        }
        if let Some(d) = s.strip_prefix("extended:") {
            let digits = d
                .parse::<u32>()
                .map_err(|_| Error::Config(format!("bad digit count in precision '{s}'")))?;
            return Self::extended(digits);
        }
        Err(Error::Config(format!(
            "precision must be 'standard' or 'extended:<digits>', got '{s}'"
        )))
    }

    /// Applies the configuration to the process-wide [`Ext`] precision.
    pub fn activate(&self) {
        if let Self::Extended { digits } = self {
            set_extended_digits(*digits);
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Standard => "standard".to_string(),
            Self::Extended { digits } => format!("extended:{digits}"),
        }
    }
}

const DEFAULT_EXT_DIGITS: u32 = 40;
const RM: RoundingMode = RoundingMode::ToEven;

static EXT_BITS: AtomicUsize = AtomicUsize::new(digits_to_bits(DEFAULT_EXT_DIGITS));

thread_local! {
    static CONSTS: RefCell<Consts> = RefCell::new(Consts::new().expect("astro-float constant cache"));
}

const fn digits_to_bits(digits: u32) -> usize {
    // log2(10) < 3.33, rounded up to whole 64-bit words plus one guard word.
    let bits = (digits as usize * 333).div_ceil(100);
    (bits.div_ceil(64) + 1) * 64
}

/// Sets the working precision of [`Ext`] arithmetic, in decimal digits.
pub fn set_extended_digits(digits: u32) {
    EXT_BITS.store(digits_to_bits(digits.max(16)), AtomicOrdering::SeqCst);
}

/// Current working precision of [`Ext`] arithmetic, in bits.
pub fn extended_bits() -> usize {
    EXT_BITS.load(AtomicOrdering::SeqCst)
}

fn with_consts<R>(f: impl FnOnce(&mut Consts) -> R) -> R {
    CONSTS.with(|c| f(&mut c.borrow_mut()))
}

/// Software high-precision real.
#[derive(Clone)]
pub struct Ext(pub BigFloat);

impl Ext {
    fn p() -> usize {
        extended_bits()
    }

    pub fn parse(s: &str) -> Self {
        Ext(with_consts(|cc| BigFloat::parse(s, Radix::Dec, Self::p(), RM, cc)))
    }

    pub fn pi() -> Self {
        Ext(with_consts(|cc| cc.pi(Self::p(), RM)))
    }
}

impl fmt::Debug for Ext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for Ext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl PartialEq for Ext {
    fn eq(&self, other: &Self) -> bool {
        self.0 == other.0
    }
}

impl PartialOrd for Ext {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        self.0.partial_cmp(&other.0)
    }
}

macro_rules! ext_binop {
    ($tr:ident, $m:ident) => {
        impl $tr for Ext {
            type Output = Ext;
            fn $m(self, rhs: Ext) -> Ext {
                Ext(self.0.$m(&rhs.0, Ext::p(), RM))
            }
        }
    };
}
ext_binop!(Add, add);
ext_binop!(Sub, sub);
ext_binop!(Mul, mul);
ext_binop!(Div, div);

impl Rem for Ext {
    type Output = Ext;
    fn rem(self, rhs: Ext) -> Ext {
        Ext(self.0.rem(&rhs.0))
    }
}

impl Neg for Ext {
    type Output = Ext;
    fn neg(self) -> Ext {
        Ext(self.0.neg())
    }
}

impl Zero for Ext {
    fn zero() -> Self {
        Ext(BigFloat::from_f64(0.0, Self::p()))
    }
    fn is_zero(&self) -> bool {
        self.0.is_zero()
    }
}

impl One for Ext {
    fn one() -> Self {
        Ext(BigFloat::from_f64(1.0, Self::p()))
    }
}

impl Num for Ext {
    type FromStrRadixErr = Error;
    fn from_str_radix(s: &str, radix: u32) -> std::result::Result<Self, Error> {
        if radix != 10 {
            return Err(Error::Config(format!("unsupported radix {radix}")));
        }
        let v = Ext::parse(s);
        if v.0.is_nan() {
            return Err(Error::Config(format!("cannot parse '{s}' as a number")));
        }
        Ok(v)
    }
}

fn ldexp(mut x: f64, mut e: i64) -> f64 {
    while e > 1000 {
        x *= 2f64.powi(1000);
        e -= 1000;
        if x.is_infinite() {
            return x;
        }
    }
    while e < -1000 {
        x *= 2f64.powi(-1000);
        e += 1000;
        if x == 0.0 {
            return x;
        }
    }
    x * 2f64.powi(e as i32)
}

impl Real for Ext {
    fn from_f64(x: f64) -> Self {
        Ext(BigFloat::from_f64(x, Self::p()))
    }

    fn to_f64(&self) -> f64 {
        if self.0.is_nan() {
            return f64::NAN;
        }
        if self.0.is_inf_pos() {
            return f64::INFINITY;
        }
        if self.0.is_inf_neg() {
            return f64::NEG_INFINITY;
        }
        match self.0.as_raw_parts() {
            Some((words, _, sign, exponent, _)) => {
                let n = words.len();
                if n == 0 || words.iter().all(|w| *w == 0) {
                    return 0.0;
                }
                let hi = words[n - 1] as f64;
                let lo = if n >= 2 { words[n - 2] as f64 } else { 0.0 };
                let m = hi + lo / 2f64.powi(64);
                let v = ldexp(m, exponent as i64 - 64);
                if sign == Sign::Neg {
                    -v
                } else {
                    v
                }
            }
            None => f64::NAN,
        }
    }

    fn exp(&self) -> Self {
        Ext(with_consts(|cc| self.0.exp(Self::p(), RM, cc)))
    }
    fn ln(&self) -> Self {
        Ext(with_consts(|cc| self.0.ln(Self::p(), RM, cc)))
    }
    fn sin(&self) -> Self {
        Ext(with_consts(|cc| self.0.sin(Self::p(), RM, cc)))
    }
    fn cos(&self) -> Self {
        Ext(with_consts(|cc| self.0.cos(Self::p(), RM, cc)))
    }
    fn sqrt(&self) -> Self {
        Ext(self.0.sqrt(Self::p(), RM))
    }
    fn abs(&self) -> Self {
        Ext(self.0.abs())
    }
    fn is_finite(&self) -> bool {
        !self.0.is_nan() && !self.0.is_inf()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ext_round_trips_f64() {
        for x in [0.0, 1.0, -2.5, 3.25, 1e-300, 7.0e200, -0.1] {
            assert_eq!(Ext::from_f64(x).to_f64(), x, "{x}");
        }
    }

    #[test]
    fn ext_reaches_below_f64_range() {
        let tiny = Ext::from_f64(-1002.0).exp();
        assert!(tiny.is_finite());
        assert!(tiny > Ext::zero());
        let back = tiny.ln().to_f64();
        assert!((back + 1002.0).abs() < 1e-12);
    }

    #[test]
    fn ext_transcendentals_match_f64() {
        for x in [0.3, 1.7, -2.2, 10.0] {
            let e = Ext::from_f64(x);
            assert!((e.exp().to_f64() - x.exp()).abs() <= 1e-15 * x.exp());
            assert!((e.sin().to_f64() - x.sin()).abs() < 1e-15);
            assert!((e.cos().to_f64() - x.cos()).abs() < 1e-15);
        }
    }

    #[test]
    fn precision_parse() {
        assert_eq!(PrecisionConfig::parse("standard").unwrap(), PrecisionConfig::Standard);
        assert_eq!(
            PrecisionConfig::parse("extended:50").unwrap(),
            PrecisionConfig::Extended { digits: 50 }
        );
        assert!(PrecisionConfig::parse("extended:8").is_err());
        assert!(PrecisionConfig::parse("quad").is_err());
    }
}
