//! Matrix-product-state initialized variational quantum eigensolver with
//! depolarizing-noise simulation and zero-noise extrapolation.
//!
//! The pipeline: build a spin Hamiltonian ([`model`]), find a low-bond
//! dimension ground-state approximation with DMRG ([`tensornet`]), compile it
//! into a staircase of two-qubit gates ([`compiler`]), refine the circuit
//! parameters variationally ([`vqe`]) under a noise model ([`simulator`]) and
//! mitigate the noise by extrapolation ([`zne`]). [`exactdiag`] provides the
//! reference energies.

pub mod compiler;
pub mod exactdiag;
pub mod linalg;
pub mod model;
pub mod simulator;
pub mod tensornet;
pub mod vqe;
pub mod zne;

pub use linalg::C64;
