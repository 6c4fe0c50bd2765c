//! Simulation and analysis toolkit for metastable overdamped Langevin
//! dynamics on low-dimensional model potentials.
//!
//! The dynamics is
//!
//! ```text
//! dX_t = -∇V(X_t) dt + sqrt(2/β) dW_t
//! ```
//!
//! with invariant measure μ = Z⁻¹ exp(-βV) dx. The crate provides four
//! groups of tools on top of a shared Euler-Maruyama sampler:
//!
//! * entropy-decay and log-Sobolev diagnostics ([`entropy`]),
//! * free-energy profiles and adaptive biasing force ([`free_energy`]),
//! * effective (coarse-grained) dynamics along a reaction coordinate
//!   ([`effdyn`]),
//! * quasi-stationary distributions, Fleming-Viot sampling, parallel
//!   replica and kinetic Monte Carlo ([`qsd`], [`parrep`]).
//!
//! Everything is desk scale: 1D/2D potentials, dense meshes, pinned seeds.

pub mod cli;
pub mod config;
pub mod effdyn;
pub mod entropy;
pub mod error;
pub mod free_energy;
pub mod grid;
pub mod model;
pub mod output;
pub mod parrep;
pub mod qsd;
pub mod rng;
pub mod sampler;
pub mod spectral;
pub mod stats;

pub use error::{Error, Result};
