//! Discrete solver for the cyclic Toda system on planar lattice domains,
//! with sub/super-solution barriers, certificates and parameter sweeps.

pub mod barriers;
pub mod bundle;
pub mod certify;
pub mod error;
pub mod format;
pub mod grid;
pub mod harness;
pub mod elliptic;
pub mod linalg;
pub mod par;
pub mod solver;

pub use error::{Error, Result};
