//! Particle solver for second-order diffusion flows driven by kernel density
//! estimates.
//!
//! The library advances a cloud of `n` particles through discrete time steps.
//! Each step minimizes a relaxed objective: the free energy of the kernel
//! mixture centered at the particles, plus a movement penalty that charges
//! the p-th power of the mean particle displacement against the step size.
//! Accepting any configuration within a per-step slack of the optimum is
//! allowed, which is what makes finite-grid and direct-search optimizers
//! admissible.
//!
//! Alongside the solver, the crate carries the validation machinery needed to
//! trust it: exact discrete optimal transport at small scale, an exhaustive
//! step oracle, admissibility checks for parameter schedules, and energy
//! diagnostics. The command line binary `kdeflow` exposes runs, schedule
//! checks, oracle steps, coupling-bound sweeps, and SVG plots.
//!
//! Determinism is a design contract: fixed seeds give byte-identical output
//! files, sums are accumulated in fixed order, and all parallel fan-out
//! collects results by index.

pub mod domain;
pub mod energy;
pub mod error;
pub mod harness;
pub mod kde;
pub mod kernel;
pub mod scheme;
pub mod transport;

pub(crate) mod numeric;

pub use error::{KdeflowError, Result};
