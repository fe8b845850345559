//! Numerical laboratory for metric comparison geometry.
//!
//! The crate measures, on a small catalog of explicit Riemannian manifolds,
//! the quantities that drive curvature-versus-topology arguments: geodesics
//! and their conjugate points, triangle angle comparison, critical points of
//! distance functions, covering and packing counts, short generating systems
//! of deck lattices, excess functions, and almost-isometric fibrations built
//! from metric couplings. The `curvlab` binary exposes each measurement as a
//! reproducible experiment writing CSV and JSON-lines output.

pub mod error;
pub mod rng;

pub mod bounds;
pub mod comparison;
pub mod critical;
pub mod excess;
pub mod fibration;
pub mod geodesic;
pub mod lattice;
pub mod manifold;

pub use error::{Error, Result};
