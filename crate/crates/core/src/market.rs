//! Constant-product swap mechanics and exact event-driven simulation of the
//! joint pool / centralised-exchange market.
//!
//! Exogenous events (spot up/down ticks, x-for-y and y-for-x swaps) arrive at
//! the constant total rate `A_kappa + A_lambda`; only the split between the
//! four kinds depends on the spread, so inter-arrival times are exponential
//! and the kind is drawn from the rates at the pre-event state. The agent's
//! stream is superposed as an independent candidate process at rate
//! `ell_max`, thinned by `policy(t) / ell_max`. With a zero policy the
//! exogenous part of a controlled path is bit-identical to the uncontrolled
//! path drawn from the same seed.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::Rng as _;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intensity::IntensityParams;
use crate::rng::{child_rng, Rng, Stream};

/// Header line of the event-path CSV format.
pub const EVENT_PATH_HEADER: &str = "# amm-exec event-path v1";

/// Tokens received for `pi` tokens paid into a pool holding `a` of the paid
/// token and `b` of the received token, with proportional fee `phi_fee`.
pub fn swap_out(a: f64, b: f64, pi: f64, phi_fee: f64) -> Result<f64> {
    if !(a > 0.0) || !(b > 0.0) {
        return Err(Error::domain(format!("reserves must be positive, got ({a}, {b})")));
    }
    if !(pi >= 0.0) {
        return Err(Error::domain(format!("swap amount must be non-negative, got {pi}")));
    }
    Ok(swap_out_unchecked(a, b, pi, phi_fee))
}

#[inline]
pub(crate) fn swap_out_unchecked(a: f64, b: f64, pi: f64, phi_fee: f64) -> f64 {
    let net = pi * (1.0 - phi_fee);
    b * net / (a + net)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketState {
    pub t: f64,
    /// Centralised-exchange mid price.
    pub s: f64,
    pub r_x: f64,
    pub r_y: f64,
}

impl MarketState {
    pub fn new(t: f64, s: f64, r_x: f64, r_y: f64) -> Result<Self> {
        let st = Self { t, s, r_x, r_y };
        st.validate()?;
        Ok(st)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0 && self.r_x > 0.0 && self.r_y > 0.0) || !self.t.is_finite() {
            return Err(Error::domain(format!("invalid market state {self:?}")));
        }
        Ok(())
    }

    /// Marginal pool price `r_y / r_x`.
    #[inline]
    pub fn pool_price(&self) -> f64 {
        self.r_y / self.r_x
    }

    /// Pool price minus spot price.
    #[inline]
    pub fn spread(&self) -> f64 {
        self.pool_price() - self.s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub theta_plus: f64,
    pub theta_minus: f64,
    pub pi_x: f64,
    pub pi_y: f64,
    pub phi_fee: f64,
    pub intensity: IntensityParams,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("theta_plus", self.theta_plus),
            ("theta_minus", self.theta_minus),
            ("pi_x", self.pi_x),
            ("pi_y", self.pi_y),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.phi_fee) {
            return Err(Error::Config(format!("fee must lie in [0, 1), got {}", self.phi_fee)));
        }
        self.intensity.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentState {
    pub z_x: f64,
    pub z_y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentParams {
    /// Size of each agent swap, in token x.
    pub zeta: f64,
    /// Initial token-x inventory.
    pub q: f64,
    /// Horizon in seconds.
    pub horizon: f64,
    /// Weight of the running penalty on the squared trading intensity.
    pub phi_run: f64,
    /// Terminal penalty on the squared remaining inventory.
    pub alpha: f64,
    /// Weight of terminal token-y wealth.
    pub beta: f64,
    /// Cap on the agent's intensity, used as the thinning bound.
    pub ell_max: f64,
}

impl AgentParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("zeta", self.zeta),
            ("q", self.q),
            ("horizon", self.horizon),
            ("phi_run", self.phi_run),
            ("ell_max", self.ell_max),
            ("beta", self.beta),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Pool receives `pi_x` of token x and pays out token y.
pub fn apply_swap_x(state: &MarketState, pi_x: f64, phi_fee: f64) -> Result<MarketState> {
    let out = swap_out(state.r_x, state.r_y, pi_x, phi_fee)?;
    let r_y = state.r_y - out;
    if !(r_y > 0.0) {
        return Err(Error::InfeasibleSwap(format!("token-y reserves exhausted by {out}")));
    }
    Ok(MarketState {
        r_x: state.r_x + pi_x,
        r_y,
        ..*state
    })
}

/// Pool receives `pi_y` of token y and pays out token x.
pub fn apply_swap_y(state: &MarketState, pi_y: f64, phi_fee: f64) -> Result<MarketState> {
    let out = swap_out(state.r_y, state.r_x, pi_y, phi_fee)?;
    let r_x = state.r_x - out;
    if !(r_x > 0.0) {
        return Err(Error::InfeasibleSwap(format!("token-x reserves exhausted by {out}")));
    }
    Ok(MarketState {
        r_x,
        r_y: state.r_y + pi_y,
        ..*state
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TickDirection {
    Up,
    Down,
}

pub fn apply_spot_tick(
    state: &MarketState,
    direction: TickDirection,
    theta_plus: f64,
    theta_minus: f64,
) -> Result<MarketState> {
    let s = match direction {
        TickDirection::Up => state.s + theta_plus,
        TickDirection::Down => state.s - theta_minus,
    };
    if !(s > 0.0) {
        return Err(Error::domain(format!(
            "down tick of {theta_minus} from {} leaves a non-positive price",
            state.s
        )));
    }
    Ok(MarketState { s, ..*state })
}

/// One agent swap of `zeta` token x into the pool.
pub fn agent_swap(
    market: &MarketState,
    agent: &AgentState,
    zeta: f64,
    phi_fee: f64,
) -> Result<(MarketState, AgentState)> {
    if agent.z_x < zeta {
        return Err(Error::InsufficientInventory {
            held: agent.z_x,
            required: zeta,
        });
    }
    let received = swap_out(market.r_x, market.r_y, zeta, phi_fee)?;
    let r_y = market.r_y - received;
    if !(r_y > 0.0) {
        return Err(Error::InfeasibleSwap(format!("token-y reserves exhausted by {received}")));
    }
    Ok((
        MarketState {
            r_x: market.r_x + zeta,
            r_y,
            ..*market
        },
        AgentState {
            z_x: agent.z_x - zeta,
            z_y: agent.z_y + received,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Init,
    SpotUp,
    SpotDown,
    SwapX,
    SwapY,
    Agent,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Init => "INIT",
            EventKind::SpotUp => "SPOT_UP",
            EventKind::SpotDown => "SPOT_DOWN",
            EventKind::SwapX => "SWAP_X",
            EventKind::SwapY => "SWAP_Y",
            EventKind::Agent => "AGENT",
        }
    }

    pub fn is_exogenous(self) -> bool {
        matches!(
            self,
            EventKind::SpotUp | EventKind::SpotDown | EventKind::SwapX | EventKind::SwapY
        )
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "INIT" => EventKind::Init,
            "SPOT_UP" => EventKind::SpotUp,
            "SPOT_DOWN" => EventKind::SpotDown,
            "SWAP_X" => EventKind::SwapX,
            "SWAP_Y" => EventKind::SwapY,
            "AGENT" => EventKind::Agent,
            other => return Err(format!("unknown event kind {other:?}")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventRecord {
    pub time: f64,
    pub kind: EventKind,
    pub market: MarketState,
    pub agent: AgentState,
}

/// Terminal liquidation of a controlled path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Liquidation {
    /// Inventory left at the horizon, before the lump swap.
    pub z_x_before: f64,
    pub proceeds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PolicyStats {
    /// Integral of the squared intensity over the horizon.
    pub running_cost: f64,
    /// Candidate agent events examined.
    pub candidates: usize,
    /// In-horizon agent swaps executed.
    pub agent_events: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventPath {
    pub horizon: f64,
    pub initial_market: MarketState,
    pub initial_agent: AgentState,
    pub events: Vec<EventRecord>,
    /// Set when a reserve or price constraint stopped the path early.
    pub truncated: Option<String>,
    pub liquidation: Option<Liquidation>,
    pub policy: Option<PolicyStats>,
}

impl EventPath {
    pub fn final_market(&self) -> MarketState {
        self.events.last().map_or(self.initial_market, |e| e.market)
    }

    pub fn final_agent(&self) -> AgentState {
        self.events.last().map_or(self.initial_agent, |e| e.agent)
    }

    pub fn exogenous_count(&self) -> usize {
        self.events.iter().filter(|e| e.kind.is_exogenous()).count()
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    /// Spread in effect just before each event.
    pub fn pre_event_spreads(&self) -> impl Iterator<Item = (&EventRecord, f64)> + '_ {
        let mut prev = self.initial_market;
        self.events.iter().map(move |e| {
            let d = prev.spread();
            prev = e.market;
            (e, d)
        })
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{EVENT_PATH_HEADER}")?;
        writeln!(w, "time,kind,S,r_x,r_y,z_x,z_y")?;
        let init = EventRecord {
            time: self.initial_market.t,
            kind: EventKind::Init,
            market: self.initial_market,
            agent: self.initial_agent,
        };
        for e in std::iter::once(&init).chain(&self.events) {
            writeln!(
                w,
                "{:.16e},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                e.time, e.kind, e.market.s, e.market.r_x, e.market.r_y, e.agent.z_x, e.agent.z_y
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(f)
    }
}

/// Parses the event-path CSV. Returns the records including the leading
/// `INIT` row when present.
pub fn read_event_csv<R: BufRead>(reader: R, origin: &Path) -> Result<Vec<EventRecord>> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut out = Vec::new();
    let mut header_seen = false;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !header_seen {
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols != ["time", "kind", "S", "r_x", "r_y", "z_x", "z_y"] {
                return Err(parse_err(lineno, format!("unexpected header {line:?}")));
            }
            header_seen = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 7 {
            return Err(parse_err(lineno, format!("expected 7 fields, found {}", fields.len())));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|e| parse_err(lineno, format!("field {}: {e}", i + 1)))
        };
        let kind = fields[1].parse::<EventKind>().map_err(|e| parse_err(lineno, e))?;
        let time = num(0)?;
        out.push(EventRecord {
            time,
            kind,
            market: MarketState {
                t: time,
                s: num(2)?,
                r_x: num(3)?,
                r_y: num(4)?,
            },
            agent: AgentState {
                z_x: num(5)?,
                z_y: num(6)?,
            },
        });
    }
    if !header_seen {
        return Err(parse_err(0, "missing header".into()));
    }
    Ok(out)
}

/// Feedback intensity of the agent's swap stream.
pub trait Policy {
    fn intensity(&self, t: f64, market: &MarketState, z_x: f64) -> f64;

    /// Evaluates at several times holding the state fixed.
    fn intensity_many(&self, times: &[f64], market: &MarketState, z_x: f64, out: &mut [f64]) {
        for (o, &t) in out.iter_mut().zip(times) {
            *o = self.intensity(t, market, z_x);
        }
    }

    /// Evaluates unrelated queries; implementations may vectorise.
    fn intensity_batch(&self, queries: &[PolicyQuery], out: &mut [f64]) {
        for (o, q) in out.iter_mut().zip(queries) {
            *o = self.intensity(q.t, &q.market, q.z_x);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyQuery {
    pub t: f64,
    pub market: MarketState,
    pub z_x: f64,
}

impl<F> Policy for F
where
    F: Fn(f64, &MarketState, f64) -> f64,
{
    fn intensity(&self, t: f64, market: &MarketState, z_x: f64) -> f64 {
        self(t, market, z_x)
    }
}

/// Constant intensity.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPolicy(pub f64);

impl Policy for ConstantPolicy {
    fn intensity(&self, _t: f64, _m: &MarketState, _z: f64) -> f64 {
        self.0
    }
}

fn exp_draw(rng: &mut Rng, rate: f64) -> f64 {
    Exp::new(rate).map_or(f64::INFINITY, |d| d.sample(rng))
}

fn draw_exogenous(params: &ModelParams, market: &MarketState, rng: &mut Rng) -> EventKind {
    let r = params.intensity.rates(market.spread());
    let u = rng.gen::<f64>() * params.intensity.total();
    if u < r.kappa_plus {
        EventKind::SpotUp
    } else if u < params.intensity.a_kappa {
        EventKind::SpotDown
    } else if u < params.intensity.a_kappa + r.lambda_x {
        EventKind::SwapX
    } else {
        EventKind::SwapY
    }
}

fn apply_exogenous(params: &ModelParams, market: &MarketState, kind: EventKind) -> Result<MarketState> {
    match kind {
        EventKind::SpotUp => apply_spot_tick(market, TickDirection::Up, params.theta_plus, params.theta_minus),
        EventKind::SpotDown => {
            apply_spot_tick(market, TickDirection::Down, params.theta_plus, params.theta_minus)
        }
        EventKind::SwapX => apply_swap_x(market, params.pi_x, params.phi_fee),
        EventKind::SwapY => apply_swap_y(market, params.pi_y, params.phi_fee),
        _ => unreachable!("not an exogenous event"),
    }
}

/// Random streams of one path: exogenous events and agent candidates.
pub struct PathRngs {
    pub exogenous: Rng,
    pub agent: Rng,
}

impl PathRngs {
    pub fn for_path(seed: u64, index: u64) -> Self {
        Self {
            exogenous: child_rng(seed, Stream::Path, 2 * index),
            agent: child_rng(seed, Stream::Path, 2 * index + 1),
        }
    }
}

/// Simulates the market alone on `[0, horizon]`.
pub fn simulate_uncontrolled(
    params: &ModelParams,
    initial: &MarketState,
    horizon: f64,
    seed: u64,
) -> Result<EventPath> {
    let mut rngs = PathRngs::for_path(seed, 0);
    simulate_uncontrolled_with(params, initial, horizon, &mut rngs)
}

pub fn simulate_uncontrolled_with(
    params: &ModelParams,
    initial: &MarketState,
    horizon: f64,
    rngs: &mut PathRngs,
) -> Result<EventPath> {
    params.validate()?;
    initial.validate()?;
    let mut path = EventPath {
        horizon,
        initial_market: *initial,
        initial_agent: AgentState::default(),
        events: Vec::new(),
        truncated: None,
        liquidation: None,
        policy: None,
    };
    let total = params.intensity.total();
    let mut market = *initial;
    let mut t = initial.t;
    loop {
        t += exp_draw(&mut rngs.exogenous, total);
        if t > horizon {
            break;
        }
        let kind = draw_exogenous(params, &market, &mut rngs.exogenous);
        match apply_exogenous(params, &market, kind) {
            Ok(next) => {
                market = MarketState { t, ..next };
                path.events.push(EventRecord {
                    time: t,
                    kind,
                    market,
                    agent: path.initial_agent,
                });
            }
            Err(e) => {
                path.truncated = Some(e.to_string());
                break;
            }
        }
    }
    Ok(path)
}

/// Simulates the market with the agent trading at `policy`, then liquidates
/// the remaining inventory in one swap at the horizon.
pub fn simulate_controlled<P: Policy + ?Sized>(
    params: &ModelParams,
    agent_params: &AgentParams,
    policy: &P,
    initial: &MarketState,
    initial_agent: AgentState,
    seed: u64,
) -> Result<EventPath> {
    let rngs = PathRngs::for_path(seed, 0);
    simulate_controlled_with(params, agent_params, policy, initial, initial_agent, rngs, true)
}

/// As [`simulate_controlled`] with explicit streams. `running_cost` switches
/// the quadrature of the squared intensity on or off; it does not touch the
/// random streams, so paths are identical either way.
pub fn simulate_controlled_with<P: Policy + ?Sized>(
    params: &ModelParams,
    agent_params: &AgentParams,
    policy: &P,
    initial: &MarketState,
    initial_agent: AgentState,
    rngs: PathRngs,
    running_cost: bool,
) -> Result<EventPath> {
    let mut sim = ControlledSim::new(params, agent_params, initial, initial_agent, rngs, running_cost)?;
    let mut values = [0.0; 16];
    while let Some(req) = sim.request() {
        let n = req.times.len();
        if n == 1 {
            values[0] = policy.intensity(req.times[0], &req.market, req.z_x);
        } else {
            policy.intensity_many(req.times, &req.market, req.z_x, &mut values[..n]);
        }
        sim.supply(&values[..n])?;
    }
    Ok(sim.finish())
}

/// Intensities a controlled path needs before it can continue: the policy at
/// every listed time, with the market and inventory held fixed.
#[derive(Debug, Clone, Copy)]
pub struct IntensityRequest<'a> {
    pub times: &'a [f64],
    pub market: MarketState,
    pub z_x: f64,
}

#[derive(Debug, Clone, Copy)]
enum Stage {
    /// Next event time decided; running cost not yet added.
    Top,
    AwaitCost { t: f64, half: f64 },
    AfterCost { t: f64 },
    AwaitCandidate { t: f64, u: f64 },
    Done,
}

/// A controlled path as a resumable computation. Policy values are supplied
/// from outside, so many paths can share batched policy evaluation.
///
/// The exogenous stream uses the same draw order as the uncontrolled
/// simulator (kind, then gap); agent candidates come from their own stream at
/// rate `ell_max` and are accepted with probability `ell / ell_max`.
pub struct ControlledSim<'p> {
    params: &'p ModelParams,
    zeta: f64,
    ell_max: f64,
    horizon: f64,
    total: f64,
    running_cost: bool,
    rngs: PathRngs,
    path: EventPath,
    stats: PolicyStats,
    market: MarketState,
    agent: AgentState,
    last: f64,
    next_exo: f64,
    next_agent: f64,
    stage: Stage,
    times: [f64; 16],
    n_times: usize,
}

impl<'p> ControlledSim<'p> {
    pub fn new(
        params: &'p ModelParams,
        agent_params: &AgentParams,
        initial: &MarketState,
        initial_agent: AgentState,
        mut rngs: PathRngs,
        running_cost: bool,
    ) -> Result<Self> {
        params.validate()?;
        agent_params.validate()?;
        initial.validate()?;
        let total = params.intensity.total();
        let ell_max = agent_params.ell_max;
        let last = initial.t;
        let next_exo = last + exp_draw(&mut rngs.exogenous, total);
        let next_agent = last + exp_draw(&mut rngs.agent, ell_max);
        let mut sim = Self {
            params,
            zeta: agent_params.zeta,
            ell_max,
            horizon: agent_params.horizon,
            total,
            running_cost,
            rngs,
            path: EventPath {
                horizon: agent_params.horizon,
                initial_market: *initial,
                initial_agent,
                events: Vec::new(),
                truncated: None,
                liquidation: None,
                policy: None,
            },
            stats: PolicyStats::default(),
            market: *initial,
            agent: initial_agent,
            last,
            next_exo,
            next_agent,
            stage: Stage::Top,
            times: [0.0; 16],
            n_times: 0,
        };
        sim.advance()?;
        Ok(sim)
    }

    /// The pending request, or `None` once the path is complete.
    pub fn request(&self) -> Option<IntensityRequest<'_>> {
        match self.stage {
            Stage::AwaitCost { .. } | Stage::AwaitCandidate { .. } => Some(IntensityRequest {
                times: &self.times[..self.n_times],
                market: self.market,
                z_x: self.agent.z_x,
            }),
            _ => None,
        }
    }

    /// Supplies the policy values for the pending request and runs on to the
    /// next one.
    pub fn supply(&mut self, values: &[f64]) -> Result<()> {
        assert_eq!(values.len(), self.n_times, "one value per requested time");
        for (v, t) in values.iter().zip(&self.times) {
            if !(0.0..=self.ell_max).contains(v) {
                self.stage = Stage::Done;
                return Err(Error::ContractViolation(format!(
                    "policy returned {v} outside [0, {}] at t = {t}",
                    self.ell_max
                )));
            }
        }
        match self.stage {
            Stage::AwaitCost { t, half } => {
                let (_, weights) = gauss_legendre_16();
                let acc: f64 = values.iter().zip(weights).map(|(v, w)| w * v * v).sum();
                self.stats.running_cost += acc * half;
                self.stage = Stage::AfterCost { t };
            }
            Stage::AwaitCandidate { t, u } => {
                if u < values[0] {
                    match agent_swap(&self.market, &self.agent, self.zeta, self.params.phi_fee) {
                        Ok((m, a)) => {
                            self.market = MarketState { t, ..m };
                            self.agent = a;
                            self.stats.agent_events += 1;
                            self.path.events.push(EventRecord {
                                time: t,
                                kind: EventKind::Agent,
                                market: self.market,
                                agent: self.agent,
                            });
                        }
                        Err(e) => {
                            self.path.truncated = Some(e.to_string());
                            self.stage = Stage::Done;
                            return Ok(());
                        }
                    }
                }
                self.stage = Stage::Top;
            }
            _ => panic!("no pending request"),
        }
        self.advance()
    }

    pub fn is_done(&self) -> bool {
        matches!(self.stage, Stage::Done)
    }

    /// The completed path. Panics if a request is still pending.
    pub fn finish(mut self) -> EventPath {
        assert!(self.is_done(), "path not complete");
        self.path.policy = Some(self.stats);
        self.path
    }

    fn advance(&mut self) -> Result<()> {
        loop {
            match self.stage {
                Stage::Top => {
                    let t = self.next_exo.min(self.next_agent);
                    let end = t.min(self.horizon);
                    if self.running_cost && self.agent.z_x >= self.zeta && end > self.last {
                        let (nodes, _) = gauss_legendre_16();
                        let half = 0.5 * (end - self.last);
                        let mid = 0.5 * (end + self.last);
                        for (slot, x) in self.times.iter_mut().zip(nodes) {
                            *slot = mid + half * x;
                        }
                        self.n_times = 16;
                        self.stage = Stage::AwaitCost { t, half };
                        return Ok(());
                    }
                    self.stage = Stage::AfterCost { t };
                }
                Stage::AfterCost { t } => {
                    if t > self.horizon {
                        self.liquidate()?;
                        self.stage = Stage::Done;
                        return Ok(());
                    }
                    self.last = t;
                    if self.next_exo <= self.next_agent {
                        let kind = draw_exogenous(self.params, &self.market, &mut self.rngs.exogenous);
                        self.next_exo = t + exp_draw(&mut self.rngs.exogenous, self.total);
                        match apply_exogenous(self.params, &self.market, kind) {
                            Ok(next) => {
                                self.market = MarketState { t, ..next };
                                self.path.events.push(EventRecord {
                                    time: t,
                                    kind,
                                    market: self.market,
                                    agent: self.agent,
                                });
                                self.stage = Stage::Top;
                            }
                            Err(e) => {
                                self.path.truncated = Some(e.to_string());
                                self.stage = Stage::Done;
                                return Ok(());
                            }
                        }
                    } else {
                        self.next_agent = t + exp_draw(&mut self.rngs.agent, self.ell_max);
                        // The acceptance draw is consumed even when the agent
                        // cannot trade so the stream stays aligned across
                        // inventories.
                        let u = self.rngs.agent.gen::<f64>() * self.ell_max;
                        self.stats.candidates += 1;
                        if self.agent.z_x < self.zeta {
                            self.stage = Stage::Top;
                            continue;
                        }
                        self.times[0] = t;
                        self.n_times = 1;
                        self.stage = Stage::AwaitCandidate { t, u };
                        return Ok(());
                    }
                }
                Stage::AwaitCost { .. } | Stage::AwaitCandidate { .. } | Stage::Done => return Ok(()),
            }
        }
    }

    fn liquidate(&mut self) -> Result<()> {
        let z_x_before = self.agent.z_x;
        let mut proceeds = 0.0;
        if z_x_before > 0.0 {
            let m = &self.market;
            proceeds = swap_out(m.r_x, m.r_y, z_x_before, self.params.phi_fee)?;
            self.market = MarketState {
                t: self.horizon,
                s: m.s,
                r_x: m.r_x + z_x_before,
                r_y: m.r_y - proceeds,
            };
            self.agent = AgentState {
                z_x: 0.0,
                z_y: self.agent.z_y + proceeds,
            };
            self.path.events.push(EventRecord {
                time: self.horizon,
                kind: EventKind::Agent,
                market: self.market,
                agent: self.agent,
            });
        }
        self.path.liquidation = Some(Liquidation {
            z_x_before,
            proceeds,
        });
        Ok(())
    }
}

fn gauss_legendre_16() -> &'static ([f64; 16], [f64; 16]) {
    static NODES: OnceLock<([f64; 16], [f64; 16])> = OnceLock::new();
    NODES.get_or_init(gauss_legendre::<16>)
}

/// Nodes and weights on `[-1, 1]` by Newton iteration on `L_N`.
fn gauss_legendre<const N: usize>() -> ([f64; N], [f64; N]) {
    let mut x = [0.0; N];
    let mut w = [0.0; N];
    let n = N as f64;
    for i in 0..N {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 1..N {
                let kf = k as f64;
                let p2 = ((2.0 * kf + 1.0) * z * p1 - kf * p0) / (kf + 1.0);
                p0 = p1;
                p1 = p2;
            }
            dp = n * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
    (x, w)
}

/// Realised pathwise objective: terminal wealth (after the lump swap) minus
/// the inventory penalty on the pre-lump inventory minus the running cost.
pub fn objective_realisation(path: &EventPath, agent_params: &AgentParams) -> f64 {
    let terminal = path.final_agent();
    let z_x_before = path.liquidation.map_or(terminal.z_x, |l| l.z_x_before);
    let running = path.policy.as_ref().map_or(0.0, |p| p.running_cost);
    agent_params.beta * terminal.z_y
        - agent_params.alpha * z_x_before * z_x_before
        - 0.5 * agent_params.phi_run * running
}
