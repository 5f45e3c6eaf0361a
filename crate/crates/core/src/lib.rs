//! Numerical laboratory for one-dimensional dipolar XY spin chains.
//!
//! The crate is organised bottom-up:
//!
//! - [`lattice`]: ring geometry, chord/perimeter metrics and coupling matrices.
//! - [`hilbert`]: fixed-magnetization bases, matrix-free Hamiltonian action and
//!   diagonal/flip-flop observables.
//! - [`exact`]: Lanczos eigensolver, Krylov propagation, dense spectra, thermal
//!   states, dynamical structure factor and susceptibility.
//! - [`freefermion`]: Jordan-Wigner solution of nearest-neighbour chains.
//! - [`protocol`]: adiabatic ramps with quantum trajectories, snapshots,
//!   quenches, Friedel preparation and angular scans.
//! - [`analysis`]: binning, detection-error inversion and Luttinger fits.
//!
//! Units: `hbar = 1`, lattice spacing `a = 1`, energies in rad/us.

// Guards are written `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod error;
pub mod exact;
pub mod freefermion;
pub mod hilbert;
pub mod lattice;
pub mod par;
pub mod protocol;
pub mod rng;

pub use error::{Error, Result};
