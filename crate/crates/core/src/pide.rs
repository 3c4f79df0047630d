//! Dynamic programming equation for the liquidation problem.
//!
//! The value function is `V(t, S, r_x, r_y, z_x, z_y) = beta * z_y + v(t, S,
//! r_x, r_y, z_x)`, so everything here works on the reduced five-coordinate
//! state. `v` solves
//!
//! ```text
//! v_t + k+ D_S+ v + k- D_S- v + l^x D_x v + l^y D_y v
//!     + (beta f(r_x, r_y, zeta) + D_zeta v)_+^2 / (2 phi) = 0,
//! v(T, .) = beta f(r_x, r_y, z_x) - alpha z_x^2,
//! ```
//!
//! with all intensities evaluated at the spread `r_y / r_x - S`. Training
//! happens on the unit box through the scaling map
//! `(t, S, r_x, r_y, z_x) = (T s, S_bar x, r_bar a, S_bar r_bar b, z_bar c)`
//! and `v_tilde = v o scaling`. Because `beta = 1 / (z_bar S_bar)` and
//! `alpha = alpha' / z_bar^2`, the normalised terminal condition becomes
//! `f_tilde(a, b, c) - alpha' c^2` with no further rescaling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intensity::Rates;
use crate::market::{swap_out_unchecked, AgentParams, ModelParams};

/// Reduced state in original units: `[t, S, r_x, r_y, z_x]`.
pub type OriginalPoint = [f64; 5];
/// Reduced state on the unit box: `[s, x, a, b, c]`.
pub type NormalizedPoint = [f64; 5];

/// Lower bound of the `a` coordinate of the training box.
pub const A_MIN: f64 = 0.01;

/// Normalising constants of the training box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub s_bar: f64,
    pub r_bar: f64,
    pub z_bar: f64,
    pub alpha_prime: f64,
    pub horizon: f64,
    pub beta: f64,
    pub alpha: f64,
}

impl Scaling {
    /// `S_bar = 2 S_0`, `r_bar = 2 r^x_0`, `z_bar = z^x_0`.
    pub fn new(s0: f64, rx0: f64, zx0: f64, alpha_prime: f64, horizon: f64) -> Result<Self> {
        Self::from_bars(2.0 * s0, 2.0 * rx0, zx0, alpha_prime, horizon)
    }

    pub fn from_bars(s_bar: f64, r_bar: f64, z_bar: f64, alpha_prime: f64, horizon: f64) -> Result<Self> {
        for (name, v) in [("s_bar", s_bar), ("r_bar", r_bar), ("z_bar", z_bar), ("horizon", horizon)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(alpha_prime >= 0.0) {
            return Err(Error::Config(format!("alpha' must be non-negative, got {alpha_prime}")));
        }
        Ok(Self {
            s_bar,
            r_bar,
            z_bar,
            alpha_prime,
            horizon,
            beta: 1.0 / (z_bar * s_bar),
            alpha: alpha_prime / (z_bar * z_bar),
        })
    }

    pub fn to_normalized(&self, p: &OriginalPoint) -> NormalizedPoint {
        [
            p[0] / self.horizon,
            p[1] / self.s_bar,
            p[2] / self.r_bar,
            p[3] / (self.s_bar * self.r_bar),
            p[4] / self.z_bar,
        ]
    }

    pub fn to_original(&self, q: &NormalizedPoint) -> OriginalPoint {
        [
            q[0] * self.horizon,
            q[1] * self.s_bar,
            q[2] * self.r_bar,
            q[3] * self.s_bar * self.r_bar,
            q[4] * self.z_bar,
        ]
    }

    /// Whether a normalised point lies in the training box.
    pub fn in_box(q: &NormalizedPoint) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        unit(q[0]) && unit(q[1]) && (A_MIN..=1.0).contains(&q[2]) && unit(q[3]) && unit(q[4])
    }
}

/// A value function on the reduced state, with its time derivative.
pub trait ValueFunction {
    fn value(&self, p: &[f64; 5]) -> f64;
    /// Value and derivative in the first coordinate.
    fn value_and_dt(&self, p: &[f64; 5]) -> (f64, f64);
}

impl<F> ValueFunction for F
where
    F: Fn(&[f64; 5]) -> (f64, f64),
{
    fn value(&self, p: &[f64; 5]) -> f64 {
        self(p).0
    }

    fn value_and_dt(&self, p: &[f64; 5]) -> (f64, f64) {
        self(p)
    }
}

/// Everything the equation depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub model: ModelParams,
    pub zeta: f64,
    pub phi_run: f64,
    pub scaling: Scaling,
    /// Zero all four exogenous intensities.
    pub rates_disabled: bool,
    /// Drop the control term.
    pub control_disabled: bool,
}

impl Problem {
    pub fn new(model: ModelParams, agent: &AgentParams, scaling: Scaling) -> Self {
        Self {
            model,
            zeta: agent.zeta,
            phi_run: agent.phi_run,
            scaling,
            rates_disabled: false,
            control_disabled: false,
        }
    }

    pub fn rates(&self, spread: f64) -> Rates {
        if self.rates_disabled {
            Rates::zero()
        } else {
            self.model.intensity.rates(spread)
        }
    }

    fn fee(&self) -> f64 {
        self.model.phi_fee
    }
}

// ---------------------------------------------------------------------------
// Original coordinates.

pub fn jump_s_plus(p: &OriginalPoint, theta_plus: f64) -> OriginalPoint {
    [p[0], p[1] + theta_plus, p[2], p[3], p[4]]
}

pub fn jump_s_minus(p: &OriginalPoint, theta_minus: f64) -> OriginalPoint {
    [p[0], p[1] - theta_minus, p[2], p[3], p[4]]
}

pub fn jump_x(p: &OriginalPoint, pi_x: f64, fee: f64) -> OriginalPoint {
    [p[0], p[1], p[2] + pi_x, p[3] - swap_out_unchecked(p[2], p[3], pi_x, fee), p[4]]
}

pub fn jump_y(p: &OriginalPoint, pi_y: f64, fee: f64) -> OriginalPoint {
    [p[0], p[1], p[2] - swap_out_unchecked(p[3], p[2], pi_y, fee), p[3] + pi_y, p[4]]
}

pub fn jump_zeta(p: &OriginalPoint, zeta: f64, fee: f64) -> OriginalPoint {
    [
        p[0],
        p[1],
        p[2] + zeta,
        p[3] - swap_out_unchecked(p[2], p[3], zeta, fee),
        p[4] - zeta,
    ]
}

pub fn delta_s_plus<V: ValueFunction + ?Sized>(v: &V, p: &OriginalPoint, theta_plus: f64) -> f64 {
    v.value(&jump_s_plus(p, theta_plus)) - v.value(p)
}

pub fn delta_s_minus<V: ValueFunction + ?Sized>(v: &V, p: &OriginalPoint, theta_minus: f64) -> f64 {
    v.value(&jump_s_minus(p, theta_minus)) - v.value(p)
}

pub fn delta_x<V: ValueFunction + ?Sized>(v: &V, p: &OriginalPoint, pi_x: f64, fee: f64) -> f64 {
    v.value(&jump_x(p, pi_x, fee)) - v.value(p)
}

pub fn delta_y<V: ValueFunction + ?Sized>(v: &V, p: &OriginalPoint, pi_y: f64, fee: f64) -> f64 {
    v.value(&jump_y(p, pi_y, fee)) - v.value(p)
}

pub fn delta_zeta<V: ValueFunction + ?Sized>(v: &V, p: &OriginalPoint, zeta: f64, fee: f64) -> f64 {
    v.value(&jump_zeta(p, zeta, fee)) - v.value(p)
}

/// `beta f(r_x, r_y, z_x) - alpha z_x^2`.
pub fn terminal_value(p: &OriginalPoint, scaling: &Scaling, fee: f64) -> f64 {
    let (r_x, r_y, z_x) = (p[2], p[3], p[4]);
    scaling.beta * swap_out_unchecked(r_x, r_y, z_x, fee) - scaling.alpha * z_x * z_x
}

/// Feedback intensity `(beta f(r_x, r_y, zeta) + D_zeta v)_+ / phi`, zero when
/// the inventory cannot cover one swap.
pub fn optimal_intensity<V: ValueFunction + ?Sized>(v: &V, p: &OriginalPoint, problem: &Problem) -> f64 {
    if p[4] < problem.zeta {
        return 0.0;
    }
    let reward = problem.scaling.beta * swap_out_unchecked(p[2], p[3], problem.zeta, problem.fee());
    let gain = reward + delta_zeta(v, p, problem.zeta, problem.fee());
    gain.max(0.0) / problem.phi_run
}

/// Left-hand side of the equation at `p`, original coordinates.
pub fn pide_residual<V: ValueFunction + ?Sized>(v: &V, p: &OriginalPoint, problem: &Problem) -> f64 {
    let m = &problem.model;
    let (u, u_t) = v.value_and_dt(p);
    let r = problem.rates(p[3] / p[2] - p[1]);
    let mut lhs = u_t
        + r.kappa_plus * (v.value(&jump_s_plus(p, m.theta_plus)) - u)
        + r.kappa_minus * (v.value(&jump_s_minus(p, m.theta_minus)) - u)
        + r.lambda_x * (v.value(&jump_x(p, m.pi_x, m.phi_fee)) - u)
        + r.lambda_y * (v.value(&jump_y(p, m.pi_y, m.phi_fee)) - u);
    if !problem.control_disabled && p[4] >= problem.zeta {
        let reward = problem.scaling.beta * swap_out_unchecked(p[2], p[3], problem.zeta, m.phi_fee);
        let gain = reward + v.value(&jump_zeta(p, problem.zeta, m.phi_fee)) - u;
        lhs += gain.max(0.0).powi(2) / (2.0 * problem.phi_run);
    }
    lhs
}

// ---------------------------------------------------------------------------
// Normalised coordinates.

/// `f_tilde(a, b, pi) = b pi (1 - fee) / (a + (z_bar / r_bar) pi (1 - fee))`.
pub fn f_tilde(a: f64, b: f64, pi: f64, scaling: &Scaling, fee: f64) -> f64 {
    let net = pi * (1.0 - fee);
    b * net / (a + scaling.z_bar / scaling.r_bar * net)
}

/// `f_tilde(a, b, c) - alpha' c^2`.
pub fn terminal_value_normalized(q: &NormalizedPoint, scaling: &Scaling, fee: f64) -> f64 {
    f_tilde(q[2], q[3], q[4], scaling, fee) - scaling.alpha_prime * q[4] * q[4]
}

/// Jump targets of one interior point and the weights of each difference.
#[derive(Debug, Clone, PartialEq)]
pub struct Stencil {
    /// Coefficient of the derivative in the first coordinate.
    pub dt_weight: f64,
    /// `(target, weight)` pairs contributing `weight * (u(target) - u)`.
    pub jumps: Vec<([f64; 5], f64)>,
    pub control: Option<ControlTerm>,
}

/// Contributes `weight * (reward + u(target) - u)_+^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlTerm {
    pub target: [f64; 5],
    pub reward: f64,
    pub weight: f64,
}

impl Stencil {
    /// Residual given the network value and time derivative at the point and
    /// the values at the jump targets, in stencil order.
    pub fn residual(&self, u: f64, u_s: f64, jump_values: &[f64], control_value: Option<f64>) -> f64 {
        let mut r = self.dt_weight * u_s;
        for ((_, w), uj) in self.jumps.iter().zip(jump_values) {
            r += w * (uj - u);
        }
        if let (Some(c), Some(uc)) = (&self.control, control_value) {
            r += c.weight * (c.reward + uc - u).max(0.0).powi(2);
        }
        r
    }

    pub fn evaluate<V: ValueFunction + ?Sized>(&self, v: &V, q: &[f64; 5]) -> f64 {
        let (u, u_s) = v.value_and_dt(q);
        let jumps: Vec<f64> = self.jumps.iter().map(|(p, _)| v.value(p)).collect();
        let control = self.control.as_ref().map(|c| v.value(&c.target));
        self.residual(u, u_s, &jumps, control)
    }
}

impl Problem {
    /// Spread in price units at a normalised point, `S_bar (b / a - x)`.
    pub fn spread_normalized(&self, q: &NormalizedPoint) -> f64 {
        self.scaling.s_bar * (q[3] / q[2] - q[1])
    }

    /// Difference stencil of the normalised equation at `q`.
    pub fn stencil(&self, q: &NormalizedPoint) -> Stencil {
        let sc = &self.scaling;
        let m = &self.model;
        let fee = m.phi_fee;
        let [s, x, a, b, c] = *q;
        let r = self.rates(self.spread_normalized(q));
        let pi_x = m.pi_x / sc.r_bar;
        let pi_y = m.pi_y / (sc.s_bar * sc.r_bar);

        let mut jumps = Vec::with_capacity(4);
        if !self.rates_disabled {
            jumps.push(([s, x + m.theta_plus / sc.s_bar, a, b, c], r.kappa_plus));
            jumps.push(([s, x - m.theta_minus / sc.s_bar, a, b, c], r.kappa_minus));
            jumps.push((
                [s, x, a + pi_x, b - swap_out_unchecked(a, b, pi_x, fee), c],
                r.lambda_x,
            ));
            jumps.push((
                [s, x, a - swap_out_unchecked(b, a, pi_y, fee), b + pi_y, c],
                r.lambda_y,
            ));
        }
        let control = if self.control_disabled {
            None
        } else {
            self.control_target(q).map(|(target, reward)| ControlTerm {
                target,
                reward,
                weight: 1.0 / (2.0 * self.phi_run),
            })
        };
        Stencil {
            dt_weight: 1.0 / sc.horizon,
            jumps,
            control,
        }
    }

    /// Left-hand side of the normalised equation at `q`.
    pub fn pide_residual_normalized<V: ValueFunction + ?Sized>(&self, v: &V, q: &NormalizedPoint) -> f64 {
        self.stencil(q).evaluate(v, q)
    }

    pub fn terminal_normalized(&self, q: &NormalizedPoint) -> f64 {
        terminal_value_normalized(q, &self.scaling, self.model.phi_fee)
    }

    /// Post-swap point and scaled proceeds of one agent swap from `q`, or
    /// `None` when the inventory is below one lot.
    pub fn control_target(&self, q: &NormalizedPoint) -> Option<(NormalizedPoint, f64)> {
        let sc = &self.scaling;
        let zeta_z = self.zeta / sc.z_bar;
        if q[4] < zeta_z {
            return None;
        }
        let zeta_r = self.zeta / sc.r_bar;
        let fee = self.model.phi_fee;
        let [s, x, a, b, c] = *q;
        let target = [s, x, a + zeta_r, b - swap_out_unchecked(a, b, zeta_r, fee), c - zeta_z];
        Some((target, f_tilde(a, b, zeta_z, sc, fee)))
    }

    /// Feedback intensity `(reward + u(target) - u(q))_+ / phi` from the two
    /// network values.
    pub fn intensity_from_values(&self, reward: f64, u_target: f64, u_here: f64) -> f64 {
        (reward + u_target - u_here).max(0.0) / self.phi_run
    }

    /// Feedback intensity from a normalised value function at the normalised
    /// image of a state.
    pub fn optimal_intensity_normalized<V: ValueFunction + ?Sized>(&self, v: &V, q: &NormalizedPoint) -> f64 {
        match self.control_target(q) {
            Some((target, reward)) => self.intensity_from_values(reward, v.value(&target), v.value(q)),
            None => 0.0,
        }
    }
}

/// Pulls a normalised value function back to original coordinates:
/// `v(t, S, r_x, r_y, z_x) = w(t / T, S / S_bar, ...)`, with the time
/// derivative rescaled by `1 / T`.
pub struct Pullback<'a, W: ?Sized> {
    pub inner: &'a W,
    pub scaling: Scaling,
}

impl<W: ValueFunction + ?Sized> ValueFunction for Pullback<'_, W> {
    fn value(&self, p: &[f64; 5]) -> f64 {
        self.inner.value(&self.scaling.to_normalized(p))
    }

    fn value_and_dt(&self, p: &[f64; 5]) -> (f64, f64) {
        let (u, u_s) = self.inner.value_and_dt(&self.scaling.to_normalized(p));
        (u, u_s / self.scaling.horizon)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intensity::IntensityParams;
    use rand::{Rng, SeedableRng};

    const S0: f64 = 1300.0;
    const RY0: f64 = 5e7;

    fn problem() -> Problem {
        let model = ModelParams {
            theta_plus: 0.02,
            theta_minus: 0.02,
            pi_x: 1.0,
            pi_y: S0,
            phi_fee: 0.003,
            intensity: IntensityParams::reference_sep2022(),
        };
        let scaling = Scaling::new(S0, RY0 / S0, 40.0, 100.0, 900.0).unwrap();
        Problem {
            model,
            zeta: 2.0,
            phi_run: 2.0,
            scaling,
            rates_disabled: false,
            control_disabled: false,
        }
    }

    fn start(z_x: f64) -> OriginalPoint {
        [0.0, S0, RY0 / S0, RY0, z_x]
    }

    fn f(a: f64, b: f64, pi: f64, fee: f64) -> f64 {
        b * pi * (1.0 - fee) / (a + pi * (1.0 - fee))
    }

    #[test]
    fn scaling_constants() {
        let sc = problem().scaling;
        assert_eq!(sc.s_bar, 2600.0);
        assert_eq!(sc.z_bar, 40.0);
        assert!((sc.beta - 1.0 / 104_000.0).abs() < 1e-18);
        assert!((sc.alpha - 100.0 / 1600.0).abs() < 1e-15);
        let p = [450.0, 1300.0, 20_000.0, 3e7, 12.0];
        let back = sc.to_original(&sc.to_normalized(&p));
        for (x, y) in p.iter().zip(&back) {
            assert!((x - y).abs() <= 1e-12 * x.abs());
        }
        assert!(Scaling::in_box(&sc.to_normalized(&start(40.0))));
        assert!(!Scaling::in_box(&[0.5, 0.5, 0.005, 0.5, 0.5]));
        assert!(Scaling::new(0.0, 1.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn differences_of_simple_functions() {
        let pr = problem();
        let p = start(40.0);
        let constant = |_: &[f64; 5]| (3.0, 0.0);
        assert_eq!(delta_s_plus(&constant, &p, 0.02), 0.0);
        assert_eq!(delta_s_minus(&constant, &p, 0.02), 0.0);
        assert_eq!(delta_x(&constant, &p, 1.0, 0.003), 0.0);
        assert_eq!(delta_y(&constant, &p, S0, 0.003), 0.0);
        assert_eq!(delta_zeta(&constant, &p, 2.0, 0.003), 0.0);

        let spot = |q: &[f64; 5]| (q[1], 0.0);
        assert!((delta_s_plus(&spot, &p, 0.02) - 0.02).abs() < 1e-12);
        assert!((delta_s_minus(&spot, &p, 0.03) + 0.03).abs() < 1e-12);

        let jx = jump_x(&p, 1.0, 0.003);
        assert_eq!(jx[2], p[2] + 1.0);
        assert!((p[3] - jx[3] - f(p[2], p[3], 1.0, 0.003)).abs() < 1e-9);
        let jy = jump_y(&p, S0, 0.003);
        assert!((p[2] - jy[2] - f(p[3], p[2], S0, 0.003)).abs() < 1e-10);
        assert_eq!(jy[3], p[3] + S0);
        let jz = jump_zeta(&p, 2.0, 0.003);
        assert_eq!(jz[4], 38.0);
        assert_eq!(jz[2], p[2] + 2.0);
        assert!((p[3] - jz[3] - f(p[2], p[3], 2.0, 0.003)).abs() < 1e-9);
        let _ = pr;
    }

    #[test]
    fn delta_zeta_of_terminal_reward() {
        let sc = problem().scaling;
        let mut sc0 = sc;
        sc0.alpha = 0.0;
        let v = move |q: &[f64; 5]| (terminal_value(q, &sc0, 0.003), 0.0);
        let d = delta_zeta(&v, &start(40.0), 2.0, 0.003);
        // beta f(r_x + 2, r_y - f(r_x, r_y, 2), 38) - beta f(r_x, r_y, 40), independently evaluated.
        assert!((d + 0.024_923_781_576_189_852).abs() < 1e-15, "{d}");
    }

    #[test]
    fn terminal_values() {
        let pr = problem();
        let sc = pr.scaling;
        assert_eq!(terminal_value(&start(0.0), &sc, 0.003), 0.0);
        let mut no_pen = sc;
        no_pen.alpha = 0.0;
        let v = terminal_value(&start(40.0), &no_pen, 0.003);
        assert!((v / sc.beta - 51_790.29).abs() < 0.01);

        let mut rng = rand::rngs::StdRng::seed_from_u64(4);
        for _ in 0..200 {
            let q = [1.0, rng.gen(), rng.gen_range(0.01..1.0), rng.gen(), rng.gen()];
            let a = terminal_value_normalized(&q, &sc, 0.003);
            let b = terminal_value(&sc.to_original(&q), &sc, 0.003);
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-12), "{a} vs {b}");
        }
    }

    #[test]
    fn intensity_cases() {
        let pr = problem();
        let zero = |_: &[f64; 5]| (0.0, 0.0);
        let l = optimal_intensity(&zero, &start(40.0), &pr);
        assert!((l - 0.012_461_853_927_644_977).abs() < 1e-15, "{l}");
        assert_eq!(optimal_intensity(&zero, &start(1.0), &pr), 0.0);
        // Steep decrease along the jump pushes the bracket negative.
        let steep = |q: &[f64; 5]| (1e3 * q[4], 0.0);
        assert_eq!(optimal_intensity(&steep, &start(40.0), &pr), 0.0);

        let q = pr.scaling.to_normalized(&start(40.0));
        let ln = pr.optimal_intensity_normalized(&zero, &q);
        assert!((ln - l).abs() < 1e-15);
    }

    #[test]
    fn residual_simple_cases() {
        let pr = problem();
        let zero = |_: &[f64; 5]| (0.0, 0.0);
        let p = start(40.0);
        let r = pide_residual(&zero, &p, &pr);
        let reward = pr.scaling.beta * f(p[2], p[3], 2.0, 0.003);
        assert!((r - reward * reward / 4.0).abs() < 1e-18);

        let mut silent = pr.clone();
        silent.rates_disabled = true;
        silent.control_disabled = true;
        let g = |q: &[f64; 5]| (q[0].sin() * q[2], q[0].cos() * q[2]);
        for t in [0.0, 100.0, 899.0] {
            let p = [t, S0, 123.0, RY0, 3.0];
            assert_eq!(pide_residual(&g, &p, &silent), t.cos() * 123.0);
        }
    }

    /// A smooth test function on the unit box with random coefficients.
    struct TestFn {
        c: [f64; 12],
    }

    impl ValueFunction for TestFn {
        fn value(&self, q: &[f64; 5]) -> f64 {
            self.value_and_dt(q).0
        }

        fn value_and_dt(&self, q: &[f64; 5]) -> (f64, f64) {
            let c = &self.c;
            let [s, x, a, b, z] = *q;
            let space = c[1] * x + c[2] * a.ln() + c[3] * b + c[4] * z * z + c[5] * (x * b).sin()
                + c[6] * (a * z).cos();
            let time = c[7] * s + c[8] * s * s + c[9] * (c[10] * s).sin();
            let value = c[0] + time * (1.0 + space) + c[11] * space;
            let dtime = c[7] + 2.0 * c[8] * s + c[9] * c[10] * (c[10] * s).cos();
            (value, dtime * (1.0 + space))
        }
    }

    #[test]
    fn normalized_residual_matches_pullback() {
        let pr = problem();
        let mut rng = rand::rngs::StdRng::seed_from_u64(99);
        for _ in 0..1000 {
            let mut c = [0.0; 12];
            for v in &mut c {
                *v = rng.gen_range(-1.0..1.0);
            }
            let w = TestFn { c };
            let q = [
                rng.gen(),
                rng.gen(),
                rng.gen_range(A_MIN..1.0),
                rng.gen(),
                rng.gen(),
            ];
            let norm = pr.pide_residual_normalized(&w, &q);
            let pull = Pullback { inner: &w, scaling: pr.scaling };
            let orig = pide_residual(&pull, &pr.scaling.to_original(&q), &pr);
            let scale = norm.abs().max(orig.abs()).max(1e-300);
            assert!((norm - orig).abs() <= 1e-10 * scale, "{norm} vs {orig} at {q:?}");
        }
    }
}
