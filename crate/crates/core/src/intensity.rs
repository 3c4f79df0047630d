//! Spread-dependent arrival rates.
//!
//! Both venues use the same logistic form: a baseline rate `A` split into two
//! sides by `A / (1 + exp(-f(delta)))`, with `f` a Legendre expansion of the
//! pool-minus-spot spread.

use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::error::{Error, Result};

/// Name of the built-in coefficient set.
pub const REFERENCE_SEP2022: &str = "reference-sep2022";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntensityParams {
    /// Baseline arrival rate of centralised-exchange trades (events/s).
    pub a_kappa: f64,
    /// Baseline arrival rate of pool swaps (events/s).
    pub a_lambda: f64,
    /// Expansion driving up-ticks of the spot price.
    pub kappa_basis: BasisSpec,
    /// Expansion driving x-for-y swaps.
    pub lambda_basis: BasisSpec,
}

impl IntensityParams {
    /// September 2022 ETH/USDC coefficients.
    pub fn reference_sep2022() -> Self {
        Self {
            a_kappa: 0.0833,
            a_lambda: 0.4166,
            kappa_basis: BasisSpec {
                coefficients: vec![0.0190, 0.2065, -0.0944, 0.0268, -0.0586],
                shift: -0.0377,
                scale: 2.5800,
            },
            lambda_basis: BasisSpec {
                coefficients: vec![0.1154, -3.3510, 0.0010, 0.1123, -0.0717],
                shift: 0.0153,
                scale: 1.7635,
            },
        }
    }

    /// Baselines kept, all spread dependence removed.
    pub fn flat(a_kappa: f64, a_lambda: f64) -> Self {
        Self {
            a_kappa,
            a_lambda,
            kappa_basis: BasisSpec::zero(4),
            lambda_basis: BasisSpec::zero(4),
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            REFERENCE_SEP2022 => Some(Self::reference_sep2022()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a_kappa > 0.0 && self.a_kappa.is_finite()) {
            return Err(Error::Config(format!("a_kappa must be positive, got {}", self.a_kappa)));
        }
        if !(self.a_lambda > 0.0 && self.a_lambda.is_finite()) {
            return Err(Error::Config(format!("a_lambda must be positive, got {}", self.a_lambda)));
        }
        self.kappa_basis.validate()?;
        self.lambda_basis.validate()
    }

    #[inline]
    pub fn kappa_plus(&self, delta: f64) -> f64 {
        self.a_kappa * logistic(self.kappa_basis.eval(delta))
    }

    #[inline]
    pub fn kappa_minus(&self, delta: f64) -> f64 {
        self.a_kappa - self.kappa_plus(delta)
    }

    #[inline]
    pub fn lambda_x(&self, delta: f64) -> f64 {
        self.a_lambda * logistic(self.lambda_basis.eval(delta))
    }

    #[inline]
    pub fn lambda_y(&self, delta: f64) -> f64 {
        self.a_lambda - self.lambda_x(delta)
    }

    /// `(kappa+, kappa-, lambda^x, lambda^y)` at one spread.
    pub fn rates(&self, delta: f64) -> Rates {
        let kp = self.kappa_plus(delta);
        let lx = self.lambda_x(delta);
        Rates {
            kappa_plus: kp,
            kappa_minus: self.a_kappa - kp,
            lambda_x: lx,
            lambda_y: self.a_lambda - lx,
        }
    }

    pub fn total(&self) -> f64 {
        self.a_kappa + self.a_lambda
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rates {
    pub kappa_plus: f64,
    pub kappa_minus: f64,
    pub lambda_x: f64,
    pub lambda_y: f64,
}

impl Rates {
    pub fn zero() -> Self {
        Self {
            kappa_plus: 0.0,
            kappa_minus: 0.0,
            lambda_x: 0.0,
            lambda_y: 0.0,
        }
    }
}

/// `1 / (1 + exp(-z))` without overflow for large `|z|`.
#[inline]
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
