//! Deep Galerkin solver for the normalised value function.
//!
//! The network is trained on the squared equation residual at interior
//! points plus the squared terminal mismatch at `s = 1`.

pub mod adam;
pub mod batch;
pub mod checkpoint;
pub mod dual;
pub mod loss;
pub mod network;
pub mod tape;
pub mod train;

pub use loss::{loss, loss_and_gradient, sample_interior, sample_terminal};
pub use network::{Architecture, NetworkParams};
pub use train::{toy_schedule, train, LrSchedule, TrainConfig, TrainOutcome};

use crate::pide::{NormalizedPoint, Problem, Stencil};

/// What the loss needs from an equation: the difference stencil at an
/// interior point and the terminal condition.
pub trait Equation {
    fn stencil(&self, q: &NormalizedPoint) -> Stencil;
    fn terminal(&self, q: &NormalizedPoint) -> f64;
}

impl Equation for Problem {
    fn stencil(&self, q: &NormalizedPoint) -> Stencil {
        Problem::stencil(self, q)
    }

    fn terminal(&self, q: &NormalizedPoint) -> f64 {
        self.terminal_normalized(q)
    }
}

/// `du/ds = 0` with `u(1, .) = value`: no jumps and no control.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyEquation {
    pub value: f64,
}

impl Equation for ToyEquation {
    fn stencil(&self, _q: &NormalizedPoint) -> Stencil {
        Stencil {
            dt_weight: 1.0,
            jumps: Vec::new(),
            control: None,
        }
    }

    fn terminal(&self, _q: &NormalizedPoint) -> f64 {
        self.value
    }
}
