//! Complex helpers over a generic [`Real`] scalar.

use num_complex::{Complex, Complex64};
use num_traits::{One, Zero};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub fn lift<T: Real>(z: Complex64) -> Complex<T> {
    Complex::new(T::from_f64(z.re), T::from_f64(z.im))
}

pub fn lower<T: Real>(z: &Complex<T>) -> Complex64 {
    Complex64::new(z.re.to_f64(), z.im.to_f64())
}

pub fn real<T: Real>(x: f64) -> Complex<T> {
    Complex::new(T::from_f64(x), T::zero())
}

pub fn modulus<T: Real>(z: &Complex<T>) -> T {
    z.re.hypot(&z.im)
}

pub fn is_finite<T: Real>(z: &Complex<T>) -> bool {
    z.re.is_finite() && z.im.is_finite()
}

/// Returns `z` unchanged if finite, otherwise a range error naming `what`.
pub fn finite<T: Real>(z: Complex<T>, what: &str) -> Result<Complex<T>> {
    if is_finite(&z) {
        Ok(z)
    } else {
        Err(Error::Range(format!("{what} is not representable")))
    }
}

pub fn exp<T: Real>(z: &Complex<T>) -> Complex<T> {
    let r = z.re.exp();
    Complex::new(r.clone() * z.im.cos(), r * z.im.sin())
}

pub fn powu<T: Real>(z: &Complex<T>, n: u32) -> Complex<T> {
    let mut acc = Complex::<T>::one();
    let mut base = z.clone();
    let mut e = n;
    while e > 0 {
        if e & 1 == 1 {
            acc = acc * base.clone();
        }
        e >>= 1;
        if e > 0 {
            base = base.clone() * base;
        }
    }
    acc
}

/// Evaluates an ascending-degree coefficient list by nested multiplication.
pub fn horner<T: Real>(coeffs: &[Complex64], z: &Complex<T>) -> Complex<T> {
    let mut acc = Complex::<T>::zero();
    for c in coeffs.iter().rev() {
        acc = acc * z.clone() + lift(*c);
    }
    acc
}

pub fn horner64(coeffs: &[Complex64], z: Complex64) -> Complex64 {
    coeffs.iter().rev().fold(Complex64::zero(), |acc, c| acc * z + c)
}
