//! Policy extraction from a trained network and Monte-Carlo evaluation
//! against full liquidation at the start.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::dgm::batch::batch_forward;
use crate::dgm::NetworkParams;
use crate::error::{Error, Result};
use crate::market::{
    objective_realisation, swap_out, AgentParams, AgentState, ControlledSim, MarketState, ModelParams, PathRngs,
    Policy, PolicyQuery,
};
use crate::pide::{NormalizedPoint, Problem, Scaling};

/// Proceeds of swapping the whole inventory at the initial state.
pub fn naive_value(model: &ModelParams, initial: &MarketState, q: f64) -> Result<f64> {
    swap_out(initial.r_x, initial.r_y, q, model.phi_fee)
}

/// Counters accumulated by a [`NetworkPolicy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PolicyCounters {
    /// Evaluations with at least one lot of inventory.
    pub evaluations: u64,
    /// Evaluations whose raw intensity exceeded the cap.
    pub clamped: u64,
    /// Evaluations at states outside the training box.
    pub out_of_box: u64,
}

/// Feedback intensity read off a trained network.
///
/// The network is evaluated at the normalised image of the state and of the
/// state after one agent swap; the intensity is the positive part of the
/// scaled swap proceeds plus the value difference, over `phi_run`, clamped to
/// `[0, ell_max]`. States outside the training box are evaluated anyway and
/// counted.
pub struct NetworkPolicy {
    net: NetworkParams,
    problem: Problem,
    ell_max: f64,
    evaluations: AtomicU64,
    clamped: AtomicU64,
    out_of_box: AtomicU64,
}

/// Builds the feedback policy of a trained network.
pub fn policy_from_network(
    net: NetworkParams,
    model: &ModelParams,
    agent: &AgentParams,
    scaling: Scaling,
) -> Result<NetworkPolicy> {
    if net.arch.input_dim != 5 {
        return Err(Error::Config(format!(
            "network input dimension {} does not match the 5-dimensional state",
            net.arch.input_dim
        )));
    }
    agent.validate()?;
    Ok(NetworkPolicy {
        net,
        problem: Problem::new(model.clone(), agent, scaling),
        ell_max: agent.ell_max,
        evaluations: AtomicU64::new(0),
        clamped: AtomicU64::new(0),
        out_of_box: AtomicU64::new(0),
    })
}

impl NetworkPolicy {
    pub fn network(&self) -> &NetworkParams {
        &self.net
    }

    pub fn problem(&self) -> &Problem {
        &self.problem
    }

    pub fn counters(&self) -> PolicyCounters {
        PolicyCounters {
            evaluations: self.evaluations.load(Ordering::Relaxed),
            clamped: self.clamped.load(Ordering::Relaxed),
            out_of_box: self.out_of_box.load(Ordering::Relaxed),
        }
    }

    pub fn reset_counters(&self) {
        self.evaluations.store(0, Ordering::Relaxed);
        self.clamped.store(0, Ordering::Relaxed);
        self.out_of_box.store(0, Ordering::Relaxed);
    }

    fn normalized(&self, q: &PolicyQuery) -> NormalizedPoint {
        let m = &q.market;
        self.problem.scaling.to_normalized(&[q.t, m.s, m.r_x, m.r_y, q.z_x])
    }
}

impl Policy for NetworkPolicy {
    fn intensity(&self, t: f64, market: &MarketState, z_x: f64) -> f64 {
        let mut out = [0.0];
        self.intensity_batch(&[PolicyQuery { t, market: *market, z_x }], &mut out);
        out[0]
    }

    fn intensity_many(&self, times: &[f64], market: &MarketState, z_x: f64, out: &mut [f64]) {
        let queries: Vec<PolicyQuery> = times
            .iter()
            .map(|&t| PolicyQuery { t, market: *market, z_x })
            .collect();
        self.intensity_batch(&queries, out);
    }

    fn intensity_batch(&self, queries: &[PolicyQuery], out: &mut [f64]) {
        let zeta = self.problem.zeta;
        let mut points = Vec::with_capacity(2 * queries.len());
        let mut active = Vec::with_capacity(queries.len());
        let mut out_of_box = 0;
        for (i, q) in queries.iter().enumerate() {
            out[i] = 0.0;
            if q.z_x < zeta {
                continue;
            }
            let p = self.normalized(q);
            if !Scaling::in_box(&p) {
                out_of_box += 1;
            }
            let Some((target, reward)) = self.problem.control_target(&p) else {
                continue;
            };
            points.push(p);
            points.push(target);
            active.push((i, reward));
        }
        let values = batch_forward(&self.net, &points);
        let mut clamped = 0;
        for (k, (i, reward)) in active.iter().enumerate() {
            let l = self.problem.intensity_from_values(*reward, values[2 * k + 1], values[2 * k]);
            out[*i] = if l > self.ell_max {
                clamped += 1;
                self.ell_max
            } else {
                l
            };
        }
        self.evaluations.fetch_add(active.len() as u64, Ordering::Relaxed);
        self.clamped.fetch_add(clamped, Ordering::Relaxed);
        self.out_of_box.fetch_add(out_of_box, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub paths: usize,
    pub seed: u64,
    /// Integrate the squared intensity along each path so the penalised
    /// objective can be reported. Costs 16 policy evaluations per interval.
    pub running_cost: bool,
    /// Paths advanced together; their policy queries are batched.
    pub group: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            paths: 10_000,
            seed: 0,
            running_cost: false,
            group: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub seed: u64,
    pub paths: usize,
    /// Paths dropped because a state left the model's domain.
    pub excluded: usize,
    pub naive: f64,
    pub mean: f64,
    pub std_error: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
    /// Fraction of paths with terminal token y strictly above naive.
    pub win_rate: f64,
    pub mean_agent_swaps: f64,
    /// Mean inventory left for the terminal lump swap.
    pub mean_terminal_lump: f64,
    pub mean_objective: Option<f64>,
    pub clamp_rate: Option<f64>,
    pub out_of_box: Option<u64>,
    /// Terminal token-y amount per retained path, in path order.
    #[serde(skip)]
    pub terminal_z_y: Vec<f64>,
}

impl EvaluationReport {
    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    /// Per-path terminal values, one row per retained path.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# amm-exec evaluation-paths v1")?;
        writeln!(w, "path,terminal_z_y")?;
        for (i, v) in self.terminal_z_y.iter().enumerate() {
            writeln!(w, "{i},{v:.10}")?;
        }
        Ok(())
    }

    pub fn save(&self, json: &Path, csv: &Path) -> Result<()> {
        let mut j = std::io::BufWriter::new(std::fs::File::create(json)?);
        self.write_json(&mut j)?;
        writeln!(j)?;
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(csv)?))
    }
}

/// Quantile by linear interpolation between order statistics of a sorted
/// sample.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Simulates controlled paths from `initial` with inventory `agent.q` and
/// summarises the terminal token-y amounts. Path `i` uses the streams
/// `PathRngs::for_path(seed, i)`, so the report does not depend on `group`.
pub fn evaluate<P: Policy + ?Sized>(
    policy: &P,
    model: &ModelParams,
    agent: &AgentParams,
    initial: &MarketState,
    opts: &EvalOptions,
) -> Result<EvaluationReport> {
    if opts.paths == 0 {
        return Err(Error::domain("evaluation needs at least one path"));
    }
    let naive = naive_value(model, initial, agent.q)?;
    let start = AgentState { z_x: agent.q, z_y: 0.0 };
    let group = opts.group.max(1);

    let mut terminal = Vec::with_capacity(opts.paths);
    let mut objective = 0.0;
    let mut swaps = 0usize;
    let mut lump = 0.0;
    let mut excluded = 0;
    let mut queries = Vec::new();
    let mut owners = Vec::new();
    let mut values = Vec::new();

    for first in (0..opts.paths).step_by(group) {
        let last = (first + group).min(opts.paths);
        let mut sims = (first..last)
            .map(|i| {
                let rngs = PathRngs::for_path(opts.seed, i as u64);
                ControlledSim::new(model, agent, initial, start, rngs, opts.running_cost)
            })
            .collect::<Result<Vec<_>>>()?;
        loop {
            queries.clear();
            owners.clear();
            for (k, sim) in sims.iter().enumerate() {
                if let Some(req) = sim.request() {
                    for &t in req.times {
                        queries.push(PolicyQuery {
                            t,
                            market: req.market,
                            z_x: req.z_x,
                        });
                    }
                    owners.push((k, req.times.len()));
                }
            }
            if owners.is_empty() {
                break;
            }
            values.resize(queries.len(), 0.0);
            policy.intensity_batch(&queries, &mut values);
            let mut at = 0;
            for &(k, n) in &owners {
                sims[k].supply(&values[at..at + n])?;
                at += n;
            }
        }
        for sim in sims {
            let path = sim.finish();
            if path.truncated.is_some() {
                excluded += 1;
                continue;
            }
            terminal.push(path.final_agent().z_y);
            objective += objective_realisation(&path, agent);
            swaps += path.policy.as_ref().map_or(0, |p| p.agent_events);
            lump += path.liquidation.map_or(0.0, |l| l.z_x_before);
        }
    }

    if terminal.is_empty() {
        return Err(Error::DegenerateSample("every evaluation path was excluded".into()));
    }
    let n = terminal.len() as f64;
    let mean = terminal.iter().sum::<f64>() / n;
    let var = if terminal.len() > 1 {
        terminal.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let mut sorted = terminal.clone();
    sorted.sort_by(f64::total_cmp);
    let wins = terminal.iter().filter(|v| **v > naive).count();
    Ok(EvaluationReport {
        seed: opts.seed,
        paths: opts.paths,
        excluded,
        naive,
        mean,
        std_error: (var / n).sqrt(),
        q05: quantile(&sorted, 0.05),
        q50: quantile(&sorted, 0.50),
        q95: quantile(&sorted, 0.95),
        win_rate: wins as f64 / n,
        mean_agent_swaps: swaps as f64 / n,
        mean_terminal_lump: lump / n,
        mean_objective: opts.running_cost.then_some(objective / n),
        clamp_rate: None,
        out_of_box: None,
        terminal_z_y: terminal,
    })
}

/// [`evaluate`] for a network policy, with its clamp and out-of-box
/// diagnostics filled in.
pub fn evaluate_network(
    policy: &NetworkPolicy,
    model: &ModelParams,
    agent: &AgentParams,
    initial: &MarketState,
    opts: &EvalOptions,
) -> Result<EvaluationReport> {
    policy.reset_counters();
    let mut report = evaluate(policy, model, agent, initial, opts)?;
    let c = policy.counters();
    report.clamp_rate = Some(if c.evaluations == 0 {
        0.0
    } else {
        c.clamped as f64 / c.evaluations as f64
    });
    report.out_of_box = Some(c.out_of_box);
    Ok(report)
}

/// One row of a policy surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SurfacePoint {
    pub t: f64,
    pub spread: f64,
    pub z_x: f64,
    pub intensity: f64,
}

/// Intensity on a time x spread x inventory grid. The spread is moved by
/// shifting the spot price; pool reserves stay at `initial`.
pub fn policy_surface<P: Policy + ?Sized>(
    policy: &P,
    initial: &MarketState,
    times: &[f64],
    spreads: &[f64],
    inventories: &[f64],
) -> Result<Vec<SurfacePoint>> {
    let mut queries = Vec::with_capacity(times.len() * spreads.len() * inventories.len());
    let mut rows = Vec::with_capacity(queries.capacity());
    for &t in times {
        for &d in spreads {
            let market = MarketState::new(t, initial.pool_price() - d, initial.r_x, initial.r_y)?;
            for &z_x in inventories {
                queries.push(PolicyQuery { t, market, z_x });
                rows.push(SurfacePoint {
                    t,
                    spread: d,
                    z_x,
                    intensity: 0.0,
                });
            }
        }
    }
    let mut values = vec![0.0; queries.len()];
    policy.intensity_batch(&queries, &mut values);
    for (r, v) in rows.iter_mut().zip(values) {
        r.intensity = v;
    }
    Ok(rows)
}

pub fn write_surface_csv<W: Write>(mut w: W, rows: &[SurfacePoint]) -> Result<()> {
    writeln!(w, "# amm-exec policy-surface v1")?;
    writeln!(w, "t,spread,z_x,intensity")?;
    for r in rows {
        writeln!(w, "{},{},{},{:.12e}", r.t, r.spread, r.z_x, r.intensity)?;
    }
    Ok(())
}
