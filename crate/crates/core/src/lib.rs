//! Numerical laboratory for zero-sum stopper vs. singular-controller games
//! on controlled diffusions with constrained control directions.
//!
//! The crate is organised around the objects of the game:
//!
//! * [`model`] — the controlled SDE coefficients and payoff functions,
//!   together with sampled validation of the standing assumptions;
//! * [`control`] — finite-activity singular controls, the constrained
//!   class where only the first `d0` coordinates are pushed, and the
//!   projection map between the two classes;
//! * [`simulate`] — Euler–Maruyama simulation of the controlled dynamics,
//!   coupled common-noise pairs and local-time estimation;
//! * [`payoff`] — Monte Carlo evaluation of the game payoff and the
//!   contact-time stopping rule;
//! * [`pde`] — a finite-difference solver for the penalised variational
//!   inequality with obstacle and gradient constraints (`d <= 2`);
//! * [`limits`] — parameter continuation, the gamma-sweep rate study and
//!   the mollification/truncation chain;
//! * [`stability`] — Monte Carlo checks of the L1-stability estimates and
//!   the local-time inequality.
//!
//! Ensemble loops are data-parallel via rayon when the `parallel` feature
//! (default) is enabled; a sequential fallback is always available and the
//! two produce bitwise identical results.

pub mod control;
pub mod error;
pub mod expr;
pub mod limits;
pub mod model;
pub mod par;
pub mod payoff;
pub mod pde;
pub mod rng;
pub mod simulate;
pub mod stability;

pub use error::SglError;
