//! The Adam training loop.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::checkpoint;
use super::loss::{loss_and_gradient, sample_interior, sample_terminal};
use super::network::{Architecture, NetworkParams};
use super::Equation;
use crate::error::{Error, Result};
use crate::rng::{child_seed, Stream};

/// Piecewise-constant learning rate: `rates[k]` applies from `starts[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub starts: Vec<usize>,
    pub rates: Vec<f64>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            starts: vec![0, 10_000, 20_000, 30_000, 40_000],
            rates: vec![1e-4, 5e-5, 1e-5, 1e-6, 1e-7],
        }
    }
}

impl LrSchedule {
    pub fn constant(rate: f64) -> Self {
        Self {
            starts: vec![0],
            rates: vec![rate],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.starts.is_empty() || self.starts.len() != self.rates.len() || self.starts[0] != 0 {
            return Err(Error::Config("schedule needs matching starts and rates, beginning at 0".into()));
        }
        if self.starts.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("schedule starts must increase".into()));
        }
        if self.rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.rates.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Config("learning rates must be non-increasing".into()));
        }
        Ok(())
    }

    pub fn rate(&self, iteration: usize) -> f64 {
        let k = self.starts.partition_point(|s| *s <= iteration);
        self.rates[k.saturating_sub(1)]
    }
}

/// Schedule for the constant-solution toy problem: `3e-3`, then `3e-4` for
/// the last quarter of the run.
pub fn toy_schedule(iterations: usize) -> LrSchedule {
    LrSchedule {
        starts: vec![0, (3 * iterations / 4).max(1)],
        rates: vec![3e-3, 3e-4],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub batch_size: usize,
    pub iterations: usize,
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Loss is recorded every this many iterations.
    pub history_every: usize,
    /// Checkpoint cadence in iterations; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::default(),
            batch_size: 1024,
            iterations: 50_000,
            schedule: LrSchedule::default(),
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            history_every: 100,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.history_every == 0 {
            return Err(Error::Config("history interval must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::Config("invalid Adam moments".into()));
        }
        if self.checkpoint_every > 0 && self.checkpoint_dir.is_none() {
            return Err(Error::Config("checkpoint cadence set without a directory".into()));
        }
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Final parameters, or the last finite ones if training diverged.
    pub params: NetworkParams,
    pub history: Vec<HistoryRow>,
    /// Iterations completed.
    pub completed: usize,
    pub diverged: Option<Error>,
}

impl TrainOutcome {
    pub fn write_history<W: std::io::Write>(&self, w: W) -> Result<()> {
        write_history(w, &self.history)
    }
}

pub fn write_history<W: std::io::Write>(mut w: W, rows: &[HistoryRow]) -> Result<()> {
    writeln!(w, "# amm-exec loss-history v1")?;
    writeln!(w, "iteration,loss,lr")?;
    for r in rows {
        writeln!(w, "{},{:.12e},{:e}", r.iteration, r.loss, r.lr)?;
    }
    Ok(())
}

pub fn checkpoint_path(dir: &std::path::Path, iteration: usize) -> PathBuf {
    dir.join(format!("checkpoint-{iteration:06}.dgm"))
}

/// Trains from Xavier initialisation.
pub fn train<E: Equation + ?Sized>(cfg: &TrainConfig, eq: &E) -> Result<TrainOutcome> {
    let init = NetworkParams::xavier(cfg.architecture, cfg.seed);
    train_from(cfg, eq, init, |_| {})
}

/// Trains from the given parameters. `on_record` sees every history row as
/// it is produced.
pub fn train_from<E: Equation + ?Sized>(
    cfg: &TrainConfig,
    eq: &E,
    init: NetworkParams,
    mut on_record: impl FnMut(&HistoryRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if init.arch != cfg.architecture {
        return Err(Error::Config("initial parameters do not match the architecture".into()));
    }
    let mut params = init;
    let mut opt = Adam::new(params.len(), cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut history = Vec::new();
    let mut window = 0.0;
    let mut window_len = 0usize;

    for it in 0..cfg.iterations {
        let interior = sample_interior(cfg.batch_size, child_seed(cfg.seed, Stream::Interior, it as u64));
        let terminal = sample_terminal(cfg.batch_size, child_seed(cfg.seed, Stream::Terminal, it as u64));
        let lr = cfg.schedule.rate(it);
        let step = loss_and_gradient(&params, &interior, &terminal, eq).and_then(|(l, g)| {
            let mut next = params.values.clone();
            opt.step(&mut next, &g, lr);
            if next.iter().all(|v| v.is_finite()) {
                Ok((l, next))
            } else {
                Err(Error::Divergence {
                    iteration: it,
                    reason: "non-finite parameters after update".into(),
                })
            }
        });
        let (l, next) = match step {
            Ok(v) => v,
            Err(e) => {
                let e = match e {
                    Error::Divergence { reason, .. } => Error::Divergence { iteration: it, reason },
                    other => other,
                };
                if let Some(dir) = &cfg.checkpoint_dir {
                    checkpoint::save(&checkpoint_path(dir, it), &params, cfg.seed, it)?;
                }
                return Ok(TrainOutcome {
                    params,
                    history,
                    completed: it,
                    diverged: Some(e),
                });
            }
        };
        params.values = next;
        window += l;
        window_len += 1;

        if (it + 1) % cfg.history_every == 0 {
            let row = HistoryRow {
                iteration: it + 1,
                loss: window / window_len as f64,
                lr,
            };
            on_record(&row);
            history.push(row);
            window = 0.0;
            window_len = 0;
        }
        if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
            if let Some(dir) = &cfg.checkpoint_dir {
                checkpoint::save(&checkpoint_path(dir, it + 1), &params, cfg.seed, it + 1)?;
            }
        }
    }
    Ok(TrainOutcome {
        params,
        history,
        completed: cfg.iterations,
        diverged: None,
    })
}
