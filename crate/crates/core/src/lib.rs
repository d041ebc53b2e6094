//! Massive Gaussian free field on finite lattices, and its level-set percolation.
//!
//! The crate simulates the centered Gaussian field whose covariance is the Green
//! function of a simple random walk killed uniformly with probability `theta` per
//! step (and, optionally, on entering an absorbing set). On top of the field it
//! provides the level-set observables used in sharp-threshold analysis: crossing
//! probabilities, translation-invariant annulus events on tori, conditional
//! influences, and the covariance form of the level derivative.
//!
//! Module map:
//!
//! * [`lattice`] — boxes in ℤᵈ with an absorbing halo, discrete tori, ℓ∞ metric,
//!   and the renormalization grid/shell geometry.
//! * [`walks`] — killed-walk quantities: Green matrices, hitting probabilities,
//!   trace Dirichlet forms, harmonic extensions.
//! * [`field`] — exact samplers (spectral on tori, factorization on boxes) and
//!   the domain-Markov conditional sampler.
//! * [`levelset`] — occupation fields, cluster labeling, crossing and annulus
//!   events, single-site pivotality.
//! * [`estimators`] — seeded Monte Carlo estimation of crossing curves,
//!   influences, level derivatives, threshold location, and decay/sharpness fits.
//! * [`oracle`] — exact small-instance verification by Gaussian quadrature:
//!   FKG/Holley conditions, the Russo-type formula, influence-domination,
//!   influence-theorem calibration, the square-root trick, and
//!   boundary-condition comparison.

pub mod error;
pub mod estimators;
pub mod field;
pub mod lattice;
pub mod levelset;
pub mod oracle;
pub mod rng;
pub mod walks;

pub use error::Error;

/// Crate-wide result type.
pub type Result<T> = std::result::Result<T, Error>;
