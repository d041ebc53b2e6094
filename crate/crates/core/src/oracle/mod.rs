//! Exact small-instance verification of the identities and inequalities the
//! level-set machinery relies on: orthant probabilities by quadrature, the FKG
//! lattice condition and the Holley Hamiltonian inequality behind it, the
//! covariance form of the level derivative, influence domination, the two
//! influence-theorem bounds, the square-root trick, and the boundary-condition
//! comparison between torus and box laws.
//!
//! Everything here is deterministic given the quadrature configuration, so
//! check outcomes are reproducible bit for bit.

pub mod checks;
pub mod quadrature;

pub use checks::*;
pub use quadrature::{
    normal_pdf, normal_upper, normal_upper_inv, orthant_bounds, Quadrature, MAX_QUAD_SITES,
};
