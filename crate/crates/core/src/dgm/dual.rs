//! Scalar types the point-wise forward pass is generic over.

use std::ops::{Add, Mul, Sub};

pub trait Scalar: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> {
    fn constant(v: f64) -> Self;
    /// The differentiation variable; plain floats carry no tangent.
    fn variable(v: f64) -> Self;
    fn tanh(self) -> Self;
    /// Multiplication by a plain number.
    fn scale(self, c: f64) -> Self;
    fn value(self) -> f64;
}

impl Scalar for f64 {
    #[inline]
    fn constant(v: f64) -> Self {
        v
    }

    #[inline]
    fn variable(v: f64) -> Self {
        v
    }

    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }

    #[inline]
    fn scale(self, c: f64) -> Self {
        self * c
    }

    #[inline]
    fn value(self) -> f64 {
        self
    }
}

/// First-order dual number `v + d eps`, `eps^2 = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Dual {
    pub fn new(v: f64, d: f64) -> Self {
        Self { v, d }
    }

    pub fn variable(v: f64) -> Self {
        Self { v, d: 1.0 }
    }
}

impl Add for Dual {
    type Output = Dual;

    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.v + o.v, self.d + o.d)
    }
}

impl Sub for Dual {
    type Output = Dual;

    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.v - o.v, self.d - o.d)
    }
}

impl Mul for Dual {
    type Output = Dual;

    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.v * o.v, self.v * o.d + self.d * o.v)
    }
}

impl Scalar for Dual {
    #[inline]
    fn constant(v: f64) -> Self {
        Dual::new(v, 0.0)
    }

    #[inline]
    fn variable(v: f64) -> Self {
        Dual::variable(v)
    }

    #[inline]
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        Dual::new(t, (1.0 - t * t) * self.d)
    }

    #[inline]
    fn scale(self, c: f64) -> Self {
        Dual::new(self.v * c, self.d * c)
    }

    #[inline]
    fn value(self) -> f64 {
        self.v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_and_tanh_rules() {
        let x = Dual::variable(0.3);
        let y = x * x + x.scale(2.0) - Dual::constant(1.0);
        assert!((y.v - (0.09 + 0.6 - 1.0)).abs() < 1e-15);
        assert!((y.d - (0.6 + 2.0)).abs() < 1e-15);
        let t = x.tanh();
        assert!((t.d - (1.0 - 0.3f64.tanh().powi(2))).abs() < 1e-15);
    }
}
