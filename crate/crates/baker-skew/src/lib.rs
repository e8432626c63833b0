//! Numerical companion for skew products `F(z, w) = (f(z) + w h(z, w), g(w))`
//! over the Fatou map `f(z) = z + a + e^{-z}`: orbit certificates on the
//! invariant fiber, growth-order estimates and bulging bounds for
//! perturbations of finite order, polynomial approximation on disjoint compact
//! sets, and a staged construction of a perturbation whose orbits return.

pub mod artifact;
pub mod bulging;
pub mod complex;
pub mod dynamics;
pub mod error;
pub mod maps;
pub mod nonbulging;
pub mod render;
pub mod runge;
pub mod scalar;

pub use error::{Error, Result};
