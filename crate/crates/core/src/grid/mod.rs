//! Masked planar lattices, grid fields, the geometric Laplacian and mollification.

mod domain;
mod field;
pub mod io;
mod mollify;

pub use domain::{ConformalFactor, DiscreteDomain, DomainSpec, NodeKind, Shape};
pub use field::{laplacian, ScalarField, VField};
pub use mollify::{mollify, Mollified, Mollifier};
