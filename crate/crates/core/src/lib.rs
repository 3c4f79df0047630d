//! Optimal execution in a constant-product automated market maker that
//! interacts with a centralised exchange.
//!
//! The crate covers the whole pipeline:
//!
//! - [`basis`]: Legendre polynomials and least-squares projections.
//! - [`intensity`]: spread-dependent arrival rates of trades and swaps.
//! - [`market`]: constant-product swap mechanics and exact event-driven
//!   simulation of the joint market, with and without the agent.
//! - [`pide`]: difference operators, residuals and feedback control for the
//!   dimension-reduced dynamic programming equation.
//! - [`dgm`]: a from-scratch Deep Galerkin solver (gated network, forward-mode
//!   time derivative, reverse-mode parameter gradients, Adam).
//! - [`strategy`]: policy extraction and Monte-Carlo evaluation against the
//!   naive full-liquidation benchmark.
//! - [`estimation`]: inter-arrival statistics, binned estimates, elicitable
//!   logistic fits and bootstrap reliability on event logs.
//! - [`cli`]: the batch command-line driver.

// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod cli;
pub mod config;
pub mod dgm;
pub mod error;
pub mod estimation;
pub mod intensity;
pub mod market;
pub mod pide;
pub mod rng;
pub mod strategy;

pub use error::{Error, Result};
