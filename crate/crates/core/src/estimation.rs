//! Empirical pipeline on event logs: inter-arrival statistics, binned
//! conditional estimates, elicitable logistic fits and bootstrap reliability.
//!
//! Pool events are swaps and spot events are mid-price moves. Every event
//! carries the spread `P - S` in effect immediately before it, which is the
//! conditioning variable throughout.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::basis::{legendre_all, project_conditional_mean, BasisSpec, MAX_ORDER};
use crate::error::{Error, Result};
use crate::intensity::logistic;
use crate::market::{read_event_csv, simulate_uncontrolled_with, EventKind, EventPath, EventRecord, MarketState, ModelParams, PathRngs};
use crate::rng::{child_rng, child_seed, Stream};
use crate::strategy::quantile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Venue {
    Pool,
    Spot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Side {
    Buy,
    Sell,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Buy => "buy",
            Side::Sell => "sell",
        }
    }
}

impl FromStr for Side {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_uppercase().as_str() {
            "BUY" => Ok(Side::Buy),
            "SELL" => Ok(Side::Sell),
            other => Err(format!("unknown side {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub time: f64,
    pub venue: Venue,
    pub side: Side,
    /// Venue price just after the event.
    pub price: f64,
    /// `P - S` just before the event.
    pub spread: f64,
    /// Price change on this venue caused by the event, when the previous
    /// price on the venue is known.
    pub change: Option<f64>,
}

/// Time-ordered events of both venues.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EventLog {
    events: Vec<LogEvent>,
}

impl EventLog {
    pub fn new(events: Vec<LogEvent>) -> Result<Self> {
        for (i, e) in events.iter().enumerate() {
            if !(e.price > 0.0) || !e.price.is_finite() {
                return Err(Error::domain(format!("event {i}: price must be positive, got {}", e.price)));
            }
            if !e.time.is_finite() || !e.spread.is_finite() {
                return Err(Error::domain(format!("event {i}: non-finite time or spread")));
            }
        }
        if let Some(i) = events.windows(2).position(|w| w[1].time < w[0].time) {
            return Err(Error::domain(format!("event {}: time decreases", i + 1)));
        }
        Ok(Self { events })
    }

    pub fn events(&self) -> &[LogEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn venue(&self, venue: Venue) -> impl Iterator<Item = &LogEvent> + '_ {
        self.events.iter().filter(move |e| e.venue == venue)
    }

    /// Converts simulated records, which must start with the `INIT` row.
    /// Agent swaps move the state but are not logged, since they are not
    /// part of the exogenous flow.
    ///
    /// `SWAP_X` (the swap stream driven by `lambda_x`) is logged as a pool
    /// buy and `SWAP_Y` as a pool sell, so the buy frequency estimates
    /// `lambda_x / A_lambda`. Spot up-ticks are buys.
    pub fn from_records(records: &[EventRecord], time_offset: f64) -> Result<Self> {
        let mut out = Vec::new();
        append_records(&mut out, records, time_offset)?;
        Self::new(out)
    }

    /// Concatenates simulated paths; path `k` is shifted in time to start
    /// where path `k - 1` ended.
    pub fn from_paths(paths: &[EventPath]) -> Result<Self> {
        let mut out = Vec::new();
        let mut offset = 0.0;
        for p in paths {
            let init = EventRecord {
                time: p.initial_market.t,
                kind: EventKind::Init,
                market: p.initial_market,
                agent: p.initial_agent,
            };
            let mut records = Vec::with_capacity(p.events.len() + 1);
            records.push(init);
            records.extend_from_slice(&p.events);
            append_records(&mut out, &records, offset - p.initial_market.t)?;
            offset += p.horizon - p.initial_market.t;
        }
        Self::new(out)
    }
}

fn append_records(out: &mut Vec<LogEvent>, records: &[EventRecord], offset: f64) -> Result<()> {
    let Some(first) = records.first() else {
        return Ok(());
    };
    if first.kind != EventKind::Init {
        return Err(Error::domain("event records must start with the INIT row"));
    }
    let mut prev = first.market;
    for r in &records[1..] {
        let spread = prev.spread();
        let (venue, side) = match r.kind {
            EventKind::SwapX => (Venue::Pool, Side::Buy),
            EventKind::SwapY => (Venue::Pool, Side::Sell),
            EventKind::SpotUp => (Venue::Spot, Side::Buy),
            EventKind::SpotDown => (Venue::Spot, Side::Sell),
            EventKind::Agent | EventKind::Init => {
                prev = r.market;
                continue;
            }
        };
        let (price, before) = match venue {
            Venue::Pool => (r.market.pool_price(), prev.pool_price()),
            Venue::Spot => (r.market.s, prev.s),
        };
        out.push(LogEvent {
            time: r.time + offset,
            venue,
            side,
            price,
            spread,
            change: Some(price - before),
        });
        prev = r.market;
    }
    Ok(())
}

/// Loads an event-path CSV as written by [`EventPath::write_csv`].
pub fn load_event_csv(path: &Path) -> Result<EventLog> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_event_log(f, path)
}

pub fn read_event_log<R: BufRead>(reader: R, origin: &Path) -> Result<EventLog> {
    let records = read_event_csv(reader, origin)?;
    EventLog::from_records(&records, 0.0)
}

struct PoolRow {
    time: f64,
    side: Side,
    price: f64,
}

fn parse_error(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: line as usize,
        message: message.into(),
    }
}

fn read_table<R: std::io::Read>(reader: R, origin: &Path, columns: &[&str]) -> Result<Vec<(u64, csv::StringRecord)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| parse_error(origin, 1, e.to_string()))?
        .clone();
    let names: Vec<&str> = headers.iter().collect();
    if names != columns {
        return Err(parse_error(
            origin,
            1,
            format!("expected columns {}, found {}", columns.join(","), names.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_error(origin, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != columns.len() {
            return Err(parse_error(
                origin,
                line,
                format!("expected {} fields, found {}", columns.len(), rec.len()),
            ));
        }
        rows.push((line, rec));
    }
    Ok(rows)
}

fn field<T: FromStr>(origin: &Path, line: u64, rec: &csv::StringRecord, i: usize, name: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    rec[i]
        .parse::<T>()
        .map_err(|e| parse_error(origin, line, format!("{name}: {e}")))
}

/// Aligns a pool swap file (`time,side,price`) with a spot quote file
/// (`time,mid`).
///
/// Each pool event takes the latest mid strictly before it and the previous
/// pool price, so its spread is the one in effect before the swap. Each
/// quote whose mid moves is a spot event (up is a buy) with the latest pool
/// price strictly before it. Events lacking either reference are dropped.
pub fn load_two_file(pool: &Path, spot: &Path) -> Result<EventLog> {
    read_two_file(std::fs::File::open(pool)?, pool, std::fs::File::open(spot)?, spot)
}

pub fn read_two_file<R1: std::io::Read, R2: std::io::Read>(
    pool: R1,
    pool_origin: &Path,
    spot: R2,
    spot_origin: &Path,
) -> Result<EventLog> {
    let mut swaps = Vec::new();
    for (line, rec) in read_table(pool, pool_origin, &["time", "side", "price"])? {
        let row = PoolRow {
            time: field(pool_origin, line, &rec, 0, "time")?,
            side: field(pool_origin, line, &rec, 1, "side")?,
            price: field(pool_origin, line, &rec, 2, "price")?,
        };
        if !(row.price > 0.0) || !row.time.is_finite() {
            return Err(parse_error(pool_origin, line, "time must be finite and price positive"));
        }
        if swaps.last().is_some_and(|p: &PoolRow| p.time > row.time) {
            return Err(parse_error(pool_origin, line, "times must be non-decreasing"));
        }
        swaps.push(row);
    }
    let mut quotes: Vec<(f64, f64)> = Vec::new();
    for (line, rec) in read_table(spot, spot_origin, &["time", "mid"])? {
        let t: f64 = field(spot_origin, line, &rec, 0, "time")?;
        let mid: f64 = field(spot_origin, line, &rec, 1, "mid")?;
        if !(mid > 0.0) || !t.is_finite() {
            return Err(parse_error(spot_origin, line, "time must be finite and mid positive"));
        }
        if quotes.last().is_some_and(|q| q.0 > t) {
            return Err(parse_error(spot_origin, line, "times must be non-decreasing"));
        }
        quotes.push((t, mid));
    }

    // Latest entry with time strictly before t.
    fn before<T>(items: &[T], time: impl Fn(&T) -> f64, t: f64) -> Option<&T> {
        let k = items.partition_point(|x| time(x) < t);
        k.checked_sub(1).map(|i| &items[i])
    }

    let mut events = Vec::new();
    for (i, s) in swaps.iter().enumerate().skip(1) {
        let prev = &swaps[i - 1];
        if let Some(&(_, mid)) = before(&quotes, |q| q.0, s.time) {
            events.push(LogEvent {
                time: s.time,
                venue: Venue::Pool,
                side: s.side,
                price: s.price,
                spread: prev.price - mid,
                change: Some(s.price - prev.price),
            });
        }
    }
    for w in quotes.windows(2) {
        let ((_, m0), (t, m1)) = (w[0], w[1]);
        let side = if m1 > m0 {
            Side::Buy
        } else if m1 < m0 {
            Side::Sell
        } else {
            continue;
        };
        if let Some(p) = before(&swaps, |p| p.time, t) {
            events.push(LogEvent {
                time: t,
                venue: Venue::Spot,
                side,
                price: m1,
                spread: p.price - m0,
                change: Some(m1 - m0),
            });
        }
    }
    // Stable: pool events precede spot events at equal times.
    events.sort_by(|a, b| a.time.total_cmp(&b.time));
    EventLog::new(events)
}

// Inter-arrival statistics.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
}

impl Summary {
    /// `None` for an empty sample. The standard deviation uses `n - 1` and
    /// is 0 for a single observation.
    pub fn of(sample: &[f64]) -> Option<Self> {
        if sample.is_empty() {
            return None;
        }
        let n = sample.len() as f64;
        let mean = sample.iter().sum::<f64>() / n;
        let var = if sample.len() > 1 {
            sample.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let mut sorted = sample.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Self {
            count: sample.len(),
            mean,
            std: var.sqrt(),
            q25: quantile(&sorted, 0.25),
            q50: quantile(&sorted, 0.5),
            q75: quantile(&sorted, 0.75),
        })
    }
}

/// Gaps between consecutive pool events where `previous` is followed by
/// `next`, written `next|previous`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub next: Side,
    pub previous: Side,
    pub summary: Option<Summary>,
    /// Least-squares exponential rate; `None` when the sample is empty or
    /// has no gap inside the histogram range.
    pub rate: Option<f64>,
}

impl PairStats {
    pub fn label(&self) -> String {
        format!("{}|{}", self.next.as_str(), self.previous.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterarrivalReport {
    /// In the order buy|buy, sell|buy, buy|sell, sell|sell.
    pub pairs: Vec<PairStats>,
    /// Set when either side has fewer than two pool events.
    pub insufficient: bool,
}

/// Histogram range and bin width for the exponential fit, in seconds.
pub const RATE_FIT_RANGE: f64 = 200.0;
pub const RATE_FIT_BIN: f64 = 1.0;

pub fn interarrival_stats(log: &EventLog) -> InterarrivalReport {
    let pool: Vec<&LogEvent> = log.venue(Venue::Pool).collect();
    let order = [
        (Side::Buy, Side::Buy),
        (Side::Sell, Side::Buy),
        (Side::Buy, Side::Sell),
        (Side::Sell, Side::Sell),
    ];
    let pairs = order
        .iter()
        .map(|&(next, previous)| {
            let gaps: Vec<f64> = pool
                .windows(2)
                .filter(|w| w[0].side == previous && w[1].side == next)
                .map(|w| w[1].time - w[0].time)
                .collect();
            PairStats {
                next,
                previous,
                summary: Summary::of(&gaps),
                rate: fit_exponential_rate(&gaps),
            }
        })
        .collect();
    let buys = pool.iter().filter(|e| e.side == Side::Buy).count();
    let sells = pool.len() - buys;
    InterarrivalReport {
        pairs,
        insufficient: buys < 2 || sells < 2,
    }
}

/// Fits `lambda * exp(-lambda * tau)` to the density histogram of `gaps`
/// (1 s bins on [0, 200] s, normalised by the full sample size) by least
/// squares over the bin centres.
pub fn fit_exponential_rate(gaps: &[f64]) -> Option<f64> {
    if gaps.is_empty() {
        return None;
    }
    let bins = (RATE_FIT_RANGE / RATE_FIT_BIN) as usize;
    let mut counts = vec![0usize; bins];
    for &g in gaps {
        if (0.0..RATE_FIT_RANGE).contains(&g) {
            counts[((g / RATE_FIT_BIN) as usize).min(bins - 1)] += 1;
        }
    }
    if counts.iter().all(|c| *c == 0) {
        return None;
    }
    let norm = gaps.len() as f64 * RATE_FIT_BIN;
    let points: Vec<(f64, f64)> = counts
        .iter()
        .enumerate()
        .map(|(k, c)| ((k as f64 + 0.5) * RATE_FIT_BIN, *c as f64 / norm))
        .collect();
    let sse = |log_rate: f64| {
        let l = log_rate.exp();
        points.iter().map(|(t, d)| (d - l * (-l * t).exp()).powi(2)).sum::<f64>()
    };
    // Coarse log-spaced scan, then golden-section refinement.
    let (lo, hi) = ((1e-4f64).ln(), (20.0f64).ln());
    let steps = 400;
    let h = (hi - lo) / steps as f64;
    let best = (0..=steps)
        .map(|i| lo + i as f64 * h)
        .min_by(|a, b| sse(*a).total_cmp(&sse(*b)))
        .expect("non-empty scan");
    let (mut a, mut b) = (best - h, best + h);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut c, mut d) = (b - g * (b - a), a + g * (b - a));
    let (mut fc, mut fd) = (sse(c), sse(d));
    for _ in 0..100 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = sse(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = sse(d);
        }
    }
    Some(((a + b) / 2.0).exp())
}

// Binned estimates and fits.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Target {
    PoolReturn,
    SpotReturn,
    PBuyPool,
    PBuySpot,
}

impl Target {
    pub fn as_str(self) -> &'static str {
        match self {
            Target::PoolReturn => "POOL_RETURN",
            Target::SpotReturn => "SPOT_RETURN",
            Target::PBuyPool => "P_BUY_POOL",
            Target::PBuySpot => "P_BUY_SPOT",
        }
    }

    pub fn venue(self) -> Venue {
        match self {
            Target::PoolReturn | Target::PBuyPool => Venue::Pool,
            Target::SpotReturn | Target::PBuySpot => Venue::Spot,
        }
    }

    pub fn is_probability(self) -> bool {
        matches!(self, Target::PBuyPool | Target::PBuySpot)
    }

    /// Default fit order: 4 for probabilities, 5 for returns.
    pub fn default_order(self) -> usize {
        if self.is_probability() {
            4
        } else {
            5
        }
    }

    /// `(spread, value)` pairs: buy indicators for probabilities, price
    /// changes for returns. Events with no or zero price change are dropped
    /// from the return targets only.
    pub fn samples(self, log: &EventLog) -> Vec<(f64, f64)> {
        let events = log.venue(self.venue());
        if self.is_probability() {
            events
                .map(|e| (e.spread, if e.side == Side::Buy { 1.0 } else { 0.0 }))
                .collect()
        } else {
            events
                .filter_map(|e| e.change.filter(|c| *c != 0.0).map(|c| (e.spread, c)))
                .collect()
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Target {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_uppercase().replace('-', "_").as_str() {
            "POOL_RETURN" => Ok(Target::PoolReturn),
            "SPOT_RETURN" => Ok(Target::SpotReturn),
            "P_BUY_POOL" => Ok(Target::PBuyPool),
            "P_BUY_SPOT" => Ok(Target::PBuySpot),
            other => Err(format!("unknown target {other:?}")),
        }
    }
}

/// Fourteen bins `(lo, hi]` of width 0.25 covering (-1.75, 1.75].
pub fn default_bins() -> Vec<(f64, f64)> {
    (0..14)
        .map(|i| (-1.75 + 0.25 * i as f64, -1.5 + 0.25 * i as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinEstimate {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Sample mean or buy frequency; `None` for an empty bin.
    pub value: Option<f64>,
    /// Standard error of `value` (binomial for probabilities).
    pub std_error: Option<f64>,
}

/// Per-bin estimates over half-open bins `(lo, hi]`.
pub fn bin_estimate(log: &EventLog, target: Target, bins: &[(f64, f64)]) -> Result<Vec<BinEstimate>> {
    bin_samples(&target.samples(log), target.is_probability(), bins)
}

pub fn bin_samples(samples: &[(f64, f64)], probability: bool, bins: &[(f64, f64)]) -> Result<Vec<BinEstimate>> {
    if bins.iter().any(|(lo, hi)| !(lo < hi)) || bins.windows(2).any(|w| w[1].0 < w[0].1) {
        return Err(Error::domain("bins must be non-empty, ordered and disjoint"));
    }
    let mut acc = vec![(0usize, 0.0f64, 0.0f64); bins.len()];
    for &(d, y) in samples {
        let k = bins.partition_point(|(_, hi)| *hi < d);
        if k < bins.len() && d > bins[k].0 {
            acc[k].0 += 1;
            acc[k].1 += y;
            acc[k].2 += y * y;
        }
    }
    Ok(bins
        .iter()
        .zip(acc)
        .map(|(&(lo, hi), (n, s, s2))| {
            let (value, std_error) = if n == 0 {
                (None, None)
            } else {
                let nf = n as f64;
                let m = s / nf;
                let var = if probability {
                    m * (1.0 - m)
                } else if n > 1 {
                    ((s2 - nf * m * m) / (nf - 1.0)).max(0.0)
                } else {
                    0.0
                };
                (Some(m), Some((var / nf).sqrt()))
            };
            BinEstimate {
                lo,
                hi,
                count: n,
                value,
                std_error,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Link {
    Logistic,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub basis: BasisSpec,
    pub link: Link,
    /// Mean squared score on the fitting sample.
    pub score: f64,
    pub samples: usize,
    /// Descent iterations (0 for the closed-form identity fit).
    pub iterations: usize,
    pub gradient_norm: f64,
}

impl FitResult {
    pub fn eval(&self, delta: f64) -> f64 {
        let h = self.basis.eval(delta);
        match self.link {
            Link::Logistic => logistic(h),
            Link::Identity => h,
        }
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }
}

/// Minimum sample size for [`fit_elicitable`].
pub const MIN_FIT_SAMPLES: usize = 100;
/// Gradient-norm stopping threshold for the logistic fit.
pub const FIT_TOLERANCE: f64 = 1e-8;
const MAX_FIT_ITERATIONS: usize = 10_000;

/// `shift = -median(delta)`, `scale = max |delta + shift|`, mapping the
/// sample into [-1, 1].
pub fn shift_scale(deltas: &[f64]) -> Result<(f64, f64)> {
    if deltas.is_empty() {
        return Err(Error::DegenerateSample("no spreads".into()));
    }
    let mut sorted = deltas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let shift = -quantile(&sorted, 0.5);
    let scale = sorted
        .iter()
        .map(|d| (d + shift).abs())
        .fold(0.0, f64::max);
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::DegenerateSample("all spread values are identical".into()));
    }
    Ok((shift, scale))
}

/// Minimises the mean of `(logistic(h(delta)) - y)^2` over `h` in the
/// Legendre span of the given order. `y` must be 0/1 labels.
///
/// The descent direction is the gradient preconditioned by the Gauss-Newton
/// matrix of the score, with an Armijo backtracking line search; iterations
/// stop once the gradient norm falls below [`FIT_TOLERANCE`].
pub fn fit_elicitable(samples: &[(f64, f64)], order: usize) -> Result<FitResult> {
    if order > MAX_ORDER {
        return Err(Error::domain(format!("order {order} exceeds {MAX_ORDER}")));
    }
    if samples.len() < MIN_FIT_SAMPLES {
        return Err(Error::DegenerateSample(format!(
            "{} events, at least {MIN_FIT_SAMPLES} needed",
            samples.len()
        )));
    }
    if samples.iter().any(|(d, y)| !d.is_finite() || !(*y == 0.0 || *y == 1.0)) {
        return Err(Error::domain("labels must be 0 or 1 and spreads finite"));
    }
    let ones = samples.iter().filter(|(_, y)| *y == 1.0).count();
    if ones == 0 || ones == samples.len() {
        return Err(Error::DegenerateFit("only one class present".into()));
    }
    let deltas: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let (shift, scale) = shift_scale(&deltas)?;

    let k = order + 1;
    let n = samples.len();
    let mut design = vec![0.0; n * k];
    for (row, (d, _)) in design.chunks_exact_mut(k).zip(samples) {
        legendre_all((d + shift) / scale, row);
    }
    let labels: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let inv_n = 1.0 / n as f64;

    // Score, gradient and Gauss-Newton matrix at `c`.
    let evaluate = |c: &[f64], want_curvature: bool, grad: &mut [f64], gn: &mut [f64]| -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        gn.iter_mut().for_each(|g| *g = 0.0);
        let mut score = 0.0;
        for (row, y) in design.chunks_exact(k).zip(&labels) {
            let h: f64 = row.iter().zip(c).map(|(a, b)| a * b).sum();
            let p = logistic(h);
            let r = p - y;
            score += r * r;
            let j = p * (1.0 - p);
            let w = 2.0 * r * j;
            for (g, a) in grad.iter_mut().zip(row) {
                *g += w * a;
            }
            if want_curvature {
                let jj = 2.0 * j * j;
                for a in 0..k {
                    for b in 0..=a {
                        gn[a * k + b] += jj * row[a] * row[b];
                    }
                }
            }
        }
        grad.iter_mut().for_each(|g| *g *= inv_n);
        gn.iter_mut().for_each(|g| *g *= inv_n);
        score * inv_n
    };

    let mut c = vec![0.0; k];
    let mean = ones as f64 / n as f64;
    c[0] = (mean / (1.0 - mean)).ln();
    let mut grad = vec![0.0; k];
    let mut gn = vec![0.0; k * k];
    let mut trial_grad = vec![0.0; k];
    let mut scratch = vec![0.0; k * k];
    let mut score = evaluate(&c, true, &mut grad, &mut gn);
    let mut iterations = 0;
    let norm = |g: &[f64]| g.iter().map(|x| x * x).sum::<f64>().sqrt();

    while norm(&grad) >= FIT_TOLERANCE && iterations < MAX_FIT_ITERATIONS {
        iterations += 1;
        let dir = precondition(&gn, &grad, k);
        let slope: f64 = dir.iter().zip(&grad).map(|(d, g)| d * g).sum();
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = c.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            let s = evaluate(&trial, false, &mut trial_grad, &mut scratch);
            if s <= score + 1e-4 * step * slope {
                accepted = Some((trial, s));
                break;
            }
            step *= 0.5;
        }
        let Some((next, s)) = accepted else {
            // No decrease representable in floating point: at the optimum.
            break;
        };
        c = next;
        score = s;
        score = evaluate(&c, true, &mut grad, &mut gn).min(score);
    }
    let basis = BasisSpec::new(c, shift, scale)?;
    Ok(FitResult {
        basis,
        link: Link::Logistic,
        score,
        samples: n,
        iterations,
        gradient_norm: norm(&grad),
    })
}

/// Solves `(G + mu I) d = -g` for the lower-triangular-stored SPD `G`,
/// raising `mu` until the Cholesky factorisation succeeds.
fn precondition(gn: &[f64], grad: &[f64], k: usize) -> Vec<f64> {
    let trace: f64 = (0..k).map(|i| gn[i * k + i]).sum::<f64>() / k as f64;
    let mut mu = 1e-12 * trace.max(f64::MIN_POSITIVE);
    loop {
        if let Some(d) = cholesky_solve(gn, grad, k, mu) {
            return d.into_iter().map(|x| -x).collect();
        }
        mu *= 100.0;
        if !mu.is_finite() {
            return grad.iter().map(|g| -g).collect();
        }
    }
}

fn cholesky_solve(a: &[f64], b: &[f64], k: usize, mu: f64) -> Option<Vec<f64>> {
    let mut l = vec![0.0; k * k];
    for j in 0..k {
        let mut d = a[j * k + j] + mu;
        for p in 0..j {
            d -= l[j * k + p] * l[j * k + p];
        }
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        l[j * k + j] = d;
        for i in j + 1..k {
            let mut s = a[i * k + j];
            for p in 0..j {
                s -= l[i * k + p] * l[j * k + p];
            }
            l[i * k + j] = s / d;
        }
    }
    let mut z = b.to_vec();
    for i in 0..k {
        for p in 0..i {
            z[i] -= l[i * k + p] * z[p];
        }
        z[i] /= l[i * k + i];
    }
    for i in (0..k).rev() {
        for p in i + 1..k {
            z[i] -= l[p * k + i] * z[p];
        }
        z[i] /= l[i * k + i];
    }
    z.iter().all(|v| v.is_finite()).then_some(z)
}

/// Least-squares projection of returns on the Legendre span, identity link.
pub fn fit_projection(samples: &[(f64, f64)], order: usize) -> Result<FitResult> {
    let deltas: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let (shift, scale) = shift_scale(&deltas)?;
    let basis = project_conditional_mean(samples, order, shift, scale)?;
    let score = samples.iter().map(|(d, y)| (basis.eval(*d) - y).powi(2)).sum::<f64>() / samples.len() as f64;
    Ok(FitResult {
        basis,
        link: Link::Identity,
        score,
        samples: samples.len(),
        iterations: 0,
        gradient_norm: 0.0,
    })
}

/// Fits `target` with its link convention: logistic for probabilities,
/// identity for returns.
pub fn fit_samples(samples: &[(f64, f64)], target: Target, order: usize) -> Result<FitResult> {
    if target.is_probability() {
        fit_elicitable(samples, order)
    } else {
        fit_projection(samples, order)
    }
}

pub fn fit_target(log: &EventLog, target: Target, order: usize) -> Result<FitResult> {
    fit_samples(&target.samples(log), target, order)
}

// Bootstrap.

/// `n` evenly spaced points on `[lo, hi]`.
pub fn spread_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// 71 points on [-1.75, 1.75], spacing 0.05.
pub fn default_grid() -> Vec<f64> {
    spread_grid(-1.75, 1.75, 71)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOptions {
    pub trials: usize,
    pub fraction: f64,
    pub seed: u64,
    pub grid: Vec<f64>,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self {
            trials: 300,
            fraction: 0.8,
            seed: 0,
            grid: default_grid(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub grid: Vec<f64>,
    /// Full-sample fit on the grid.
    pub full: Vec<f64>,
    /// Per successful trial, the refit minus the full-sample fit on the grid.
    pub deviations: Vec<Vec<f64>>,
    /// Pointwise minimum and maximum of the deviations.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub failed: usize,
}

impl BootstrapResult {
    /// All `|deviation|` values over trials and grid points.
    pub fn abs_deviations(&self) -> impl Iterator<Item = f64> + '_ {
        self.deviations.iter().flatten().map(|d| d.abs())
    }

    /// Long-format CSV `trial,delta,deviation`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# amm-exec bootstrap-deviations v1")?;
        writeln!(w, "trial,delta,deviation")?;
        for (t, dev) in self.deviations.iter().enumerate() {
            for (x, d) in self.grid.iter().zip(dev) {
                writeln!(w, "{t},{x:.6},{d:.12e}")?;
            }
        }
        Ok(())
    }

    /// CSV `delta,full,lower,upper`.
    pub fn write_envelope_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# amm-exec bootstrap-envelope v1")?;
        writeln!(w, "delta,full,lower,upper")?;
        for i in 0..self.grid.len() {
            writeln!(
                w,
                "{:.6},{:.12e},{:.12e},{:.12e}",
                self.grid[i], self.full[i], self.lower[i], self.upper[i]
            )?;
        }
        Ok(())
    }
}

/// Refits on `trials` subsamples of `round(fraction * n)` drawn without
/// replacement. Trial `i` uses its own child stream, so results do not
/// depend on the number of worker threads. Failed trials are counted.
pub fn bootstrap_reliability<F>(samples: &[(f64, f64)], fit: F, opts: &BootstrapOptions) -> Result<BootstrapResult>
where
    F: Fn(&[(f64, f64)]) -> Result<FitResult> + Sync,
{
    if !(opts.fraction > 0.0 && opts.fraction <= 1.0) {
        return Err(Error::domain(format!("fraction must lie in (0, 1], got {}", opts.fraction)));
    }
    let size = (opts.fraction * samples.len() as f64).round() as usize;
    if size == 0 {
        return Err(Error::DegenerateSample("subsample would be empty".into()));
    }
    let full_fit = fit(samples)?;
    let full: Vec<f64> = opts.grid.iter().map(|d| full_fit.eval(*d)).collect();

    let trial = |i: usize| -> Option<Vec<f64>> {
        let mut rng = child_rng(opts.seed, Stream::Bootstrap, i as u64);
        let mut idx = rand::seq::index::sample(&mut rng, samples.len(), size).into_vec();
        idx.sort_unstable();
        let sub: Vec<(f64, f64)> = idx.iter().map(|&j| samples[j]).collect();
        let f = fit(&sub).ok()?;
        Some(opts.grid.iter().zip(&full).map(|(d, v)| f.eval(*d) - v).collect())
    };

    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(opts.trials.max(1));
    let mut results: Vec<Option<Vec<f64>>> = vec![None; opts.trials];
    if workers <= 1 {
        for (i, r) in results.iter_mut().enumerate() {
            *r = trial(i);
        }
    } else {
        let per = opts.trials.div_ceil(workers);
        std::thread::scope(|s| {
            for (w, chunk) in results.chunks_mut(per).enumerate() {
                let trial = &trial;
                s.spawn(move || {
                    for (j, r) in chunk.iter_mut().enumerate() {
                        *r = trial(w * per + j);
                    }
                });
            }
        });
    }
    let failed = results.iter().filter(|r| r.is_none()).count();
    let deviations: Vec<Vec<f64>> = results.into_iter().flatten().collect();
    let m = opts.grid.len();
    let fold = |init: f64, f: fn(f64, f64) -> f64| -> Vec<f64> {
        (0..m)
            .map(|j| {
                if deviations.is_empty() {
                    f64::NAN
                } else {
                    deviations.iter().map(|d| d[j]).fold(init, f)
                }
            })
            .collect()
    };
    let lower = fold(f64::INFINITY, f64::min);
    let upper = fold(f64::NEG_INFINITY, f64::max);
    Ok(BootstrapResult {
        grid: opts.grid.clone(),
        full,
        deviations,
        lower,
        upper,
        failed,
    })
}

// Curves and histograms.

/// CSV `delta,value` of a fitted curve on `grid`.
pub fn write_curve_csv<W: Write>(mut w: W, fit: &FitResult, grid: &[f64]) -> Result<()> {
    writeln!(w, "# amm-exec fit-curve v1")?;
    writeln!(w, "delta,value")?;
    for d in grid {
        writeln!(w, "{d:.6},{:.12e}", fit.eval(*d))?;
    }
    Ok(())
}

/// CSV `lo,hi,count,value,std_error`; empty bins leave the last two blank.
pub fn write_bins_csv<W: Write>(mut w: W, bins: &[BinEstimate]) -> Result<()> {
    writeln!(w, "# amm-exec binned-estimate v1")?;
    writeln!(w, "lo,hi,count,value,std_error")?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.12e}"));
    for b in bins {
        writeln!(w, "{},{},{},{},{}", b.lo, b.hi, b.count, opt(b.value), opt(b.std_error))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    /// Bounds in `ln(size)`.
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Histogram of `ln(size)` over `bins` equal-width bins spanning the sample.
pub fn log_size_histogram(sizes: &[f64], bins: usize) -> Result<Vec<HistogramBin>> {
    if bins == 0 {
        return Err(Error::domain("histogram needs at least one bin"));
    }
    if sizes.is_empty() || sizes.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::DegenerateSample("sizes must be positive and finite".into()));
    }
    let logs: Vec<f64> = sizes.iter().map(|s| s.ln()).collect();
    let lo = logs.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut hi = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for l in logs {
        counts[(((l - lo) / width) as usize).min(bins - 1)] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            lo: lo + i as f64 * width,
            hi: lo + (i + 1) as f64 * width,
            count,
        })
        .collect())
}

pub fn write_histogram_csv<W: Write>(mut w: W, bins: &[HistogramBin]) -> Result<()> {
    writeln!(w, "# amm-exec log-size-histogram v1")?;
    writeln!(w, "log_size_lo,log_size_hi,count")?;
    for b in bins {
        writeln!(w, "{:.12e},{:.12e},{}", b.lo, b.hi, b.count)?;
    }
    Ok(())
}

// Synthetic logs.

/// Uncontrolled market restarted at random spreads so that the logged
/// spreads cover a chosen window. Left alone, the pool spread drifts away
/// from zero within minutes, so one long path would sample only the tails.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticOptions {
    /// Exogenous events to log in total.
    pub events: usize,
    /// Initial spreads are uniform on this interval.
    pub spread_lo: f64,
    pub spread_hi: f64,
    /// Length of each restarted segment, in seconds.
    pub segment: f64,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        Self {
            events: 200_000,
            spread_lo: -2.0,
            spread_hi: 2.0,
            segment: 20.0,
        }
    }
}

/// Segment `k` starts from `initial` with the pool price moved to
/// `S + delta_k` at fixed `r_x`, and runs on the streams
/// `PathRngs::for_path(child_seed(seed, Synthetic, 0), k)`.
pub fn synthetic_log(model: &ModelParams, initial: &MarketState, opts: &SyntheticOptions, seed: u64) -> Result<EventLog> {
    if !(opts.segment > 0.0) || !(opts.spread_lo <= opts.spread_hi) {
        return Err(Error::domain("segment length must be positive and the spread window ordered"));
    }
    if opts.spread_lo + initial.s <= 0.0 {
        return Err(Error::domain("spread window implies a non-positive pool price"));
    }
    let root = child_seed(seed, Stream::Synthetic, 0);
    let mut spreads = child_rng(seed, Stream::Synthetic, 1);
    let mut out = Vec::with_capacity(opts.events);
    let mut k = 0u64;
    while out.len() < opts.events {
        let delta = spreads.gen_range(opts.spread_lo..=opts.spread_hi);
        let start = MarketState {
            t: 0.0,
            r_y: (initial.s + delta) * initial.r_x,
            ..*initial
        };
        let mut rngs = PathRngs::for_path(root, k);
        let path = simulate_uncontrolled_with(model, &start, opts.segment, &mut rngs)?;
        let mut records = Vec::with_capacity(path.events.len() + 1);
        records.push(EventRecord {
            time: 0.0,
            kind: EventKind::Init,
            market: start,
            agent: path.initial_agent,
        });
        records.extend_from_slice(&path.events);
        append_records(&mut out, &records, k as f64 * opts.segment)?;
        k += 1;
        if k > 1_000_000_000 {
            return Err(Error::domain("synthetic segments produce no events"));
        }
    }
    out.truncate(opts.events);
    EventLog::new(out)
}
