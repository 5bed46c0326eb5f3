//! Monte Carlo discretization of decoupled forward-backward SDEs driven by
//! pure-jump Levy processes with infinite activity.
//!
//! The pipeline has two stages. Stage one replaces jumps smaller than a
//! threshold `eps` by a Brownian motion scaled with
//! `sigma(eps)^2 = ∫_{|e|<=eps} e^2 nu(de)` and simulates the remaining
//! big-jump compound Poisson part exactly ([`levy`], [`forward`]). Stage two
//! discretizes the backward equation on a regular time grid with two
//! alternative solvers ([`schemes`]): a regression-based backward Euler
//! scheme and a Malliavin-weight scheme that represents `Z` and `Gamma` as
//! conditional expectations of weighted terminal data. The [`harness`]
//! estimates the corresponding error functionals from coupled simulations and
//! fits empirical convergence rates against the known bounds.

pub mod coeffs;
pub mod error;
pub mod experiments;
pub mod forward;
pub mod harness;
pub mod levy;
pub mod mat;
pub mod quad;
pub mod regression;
pub mod report;
pub mod schemes;
pub mod stats;
pub mod stream;

pub use error::{Error, Result};
