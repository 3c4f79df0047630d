//! Run configuration: one TOML document with a section per concern.
//!
//! Every default reproduces the reference experiment, so an empty file is a
//! valid full-scale configuration. Unknown keys are rejected and all module
//! invariants are checked at load.
//!
//! All randomness derives from the single top-level `seed`: training draws
//! its interior, terminal and initialisation streams from it, evaluation and
//! simulation draw one path stream per path index, and bootstraps one stream
//! per trial (see [`crate::rng`]).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dgm::{Architecture, LrSchedule, TrainConfig};
use crate::error::{Error, Result};
use crate::intensity::IntensityParams;
use crate::market::{AgentParams, AgentState, MarketState, ModelParams};
use crate::pide::{Problem, Scaling};
use crate::strategy::EvalOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarketSection {
    /// Initial spot price.
    pub s0: f64,
    /// Initial token-y reserves.
    pub ry0: f64,
    /// Initial token-x reserves; `ry0 / s0` when absent, so the pool starts
    /// at the spot price.
    pub rx0: Option<f64>,
    pub theta_plus: f64,
    pub theta_minus: f64,
    pub pi_x: f64,
    /// Exogenous y-swap size; `pi_x * s0` when absent.
    pub pi_y: Option<f64>,
    pub phi_fee: f64,
}

impl Default for MarketSection {
    fn default() -> Self {
        Self {
            s0: 1300.0,
            ry0: 5e7,
            rx0: None,
            theta_plus: 0.02,
            theta_minus: 0.02,
            pi_x: 1.0,
            pi_y: None,
            phi_fee: 0.003,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSection {
    /// Initial token-x inventory.
    pub q: f64,
    pub zeta: f64,
    /// Horizon in seconds.
    pub horizon: f64,
    pub phi_run: f64,
    pub ell_max: f64,
}

impl Default for AgentSection {
    fn default() -> Self {
        Self {
            q: 40.0,
            zeta: 2.0,
            horizon: 900.0,
            phi_run: 2.0,
            ell_max: 1.0,
        }
    }
}

/// Normalising constants. Absent bars default to `2 S_0`, `2 r^x_0` and
/// the initial inventory; `beta` and `alpha` are derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingSection {
    pub alpha_prime: f64,
    pub s_bar: Option<f64>,
    pub r_bar: Option<f64>,
    pub z_bar: Option<f64>,
}

impl Default for ScalingSection {
    fn default() -> Self {
        Self {
            alpha_prime: 100.0,
            s_bar: None,
            r_bar: None,
            z_bar: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub architecture: Architecture,
    pub batch_size: usize,
    pub iterations: usize,
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub history_every: usize,
    /// Periodic checkpoints into the output directory; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            architecture: d.architecture,
            batch_size: d.batch_size,
            iterations: d.iterations,
            schedule: d.schedule,
            beta1: d.beta1,
            beta2: d.beta2,
            epsilon: d.epsilon,
            history_every: d.history_every,
            checkpoint_every: d.checkpoint_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub paths: usize,
    pub running_cost: bool,
    pub group: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        let d = EvalOptions::default();
        Self {
            paths: d.paths,
            running_cost: d.running_cost,
            group: d.group,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub market: MarketSection,
    pub intensity: IntensityParams,
    pub agent: AgentSection,
    pub scaling: ScalingSection,
    pub train: TrainSection,
    pub evaluation: EvaluationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            market: MarketSection::default(),
            intensity: IntensityParams::reference_sep2022(),
            agent: AgentSection::default(),
            scaling: ScalingSection::default(),
            train: TrainSection::default(),
            evaluation: EvaluationSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model()?.validate()?;
        self.agent_params()?.validate()?;
        self.initial_market()?;
        self.train_config().validate()?;
        if self.evaluation.paths == 0 || self.evaluation.group == 0 {
            return Err(Error::Config("evaluation needs at least one path and a positive group".into()));
        }
        if self.agent.q < self.agent.zeta {
            return Err(Error::Config("initial inventory is smaller than one swap".into()));
        }
        Ok(())
    }

    pub fn rx0(&self) -> f64 {
        self.market.rx0.unwrap_or(self.market.ry0 / self.market.s0)
    }

    pub fn initial_market(&self) -> Result<MarketState> {
        MarketState::new(0.0, self.market.s0, self.rx0(), self.market.ry0)
            .map_err(|e| Error::Config(format!("initial market: {e}")))
    }

    pub fn initial_agent(&self) -> AgentState {
        AgentState {
            z_x: self.agent.q,
            z_y: 0.0,
        }
    }

    pub fn model(&self) -> Result<ModelParams> {
        let m = &self.market;
        let model = ModelParams {
            theta_plus: m.theta_plus,
            theta_minus: m.theta_minus,
            pi_x: m.pi_x,
            pi_y: m.pi_y.unwrap_or(m.pi_x * m.s0),
            phi_fee: m.phi_fee,
            intensity: self.intensity.clone(),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn scaling(&self) -> Result<Scaling> {
        let s = &self.scaling;
        Scaling::from_bars(
            s.s_bar.unwrap_or(2.0 * self.market.s0),
            s.r_bar.unwrap_or(2.0 * self.rx0()),
            s.z_bar.unwrap_or(self.agent.q),
            s.alpha_prime,
            self.agent.horizon,
        )
    }

    pub fn agent_params(&self) -> Result<AgentParams> {
        let sc = self.scaling()?;
        let a = &self.agent;
        Ok(AgentParams {
            zeta: a.zeta,
            q: a.q,
            horizon: a.horizon,
            phi_run: a.phi_run,
            alpha: sc.alpha,
            beta: sc.beta,
            ell_max: a.ell_max,
        })
    }

    pub fn problem(&self) -> Result<Problem> {
        Ok(Problem::new(self.model()?, &self.agent_params()?, self.scaling()?))
    }

    /// Training configuration with the run seed; periodic checkpoints go to
    /// the output directory.
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            architecture: t.architecture,
            batch_size: t.batch_size,
            iterations: t.iterations,
            schedule: t.schedule.clone(),
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            seed: self.seed,
            history_every: t.history_every,
            checkpoint_every: t.checkpoint_every,
            checkpoint_dir: (t.checkpoint_every > 0).then(|| self.output_dir.clone()),
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            paths: self.evaluation.paths,
            seed: self.seed,
            running_cost: self.evaluation.running_cost,
            group: self.evaluation.group,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::strategy::naive_value;

    #[test]
    fn empty_document_is_the_reference_run() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let m = cfg.initial_market().unwrap();
        assert_eq!(m.pool_price(), 1300.0);
        assert!((cfg.rx0() - 38_461.538_461_538_46).abs() < 1e-9);
        let naive = naive_value(&cfg.model().unwrap(), &m, cfg.agent.q).unwrap();
        assert!((naive - 51_790.29).abs() < 0.01);
        let a = cfg.agent_params().unwrap();
        assert_eq!(a.beta, 1.0 / (40.0 * 2600.0));
        assert_eq!(a.alpha, 100.0 / 1600.0);
        assert_eq!(cfg.model().unwrap().pi_y, 1300.0);
        let t = cfg.train_config();
        assert_eq!((t.batch_size, t.iterations), (1024, 50_000));
        assert_eq!(cfg.eval_options().paths, 10_000);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig {
            seed: 17,
            ..RunConfig::default()
        };
        cfg.train.iterations = 10;
        cfg.market.rx0 = Some(40_000.0);
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(RunConfig::from_toml_str("sed = 1"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml_str("[market]\nfee = 0.1").is_err());
        assert!(RunConfig::from_toml_str("[intensity]\na_kappa = 1.0\nextra = 2").is_err());
        assert!(RunConfig::from_toml_str("[market]\nphi_fee = 1.0").is_err());
        assert!(RunConfig::from_toml_str("[agent]\nzeta = -1.0").is_err());
        assert!(RunConfig::from_toml_str("[train]\nbatch_size = 0").is_err());
        assert!(RunConfig::from_toml_str("[train.schedule]\nstarts = [0, 10]\nrates = [1e-4, 1e-3]").is_err());
        assert!(RunConfig::from_toml_str("[evaluation]\npaths = 0").is_err());
        assert!(RunConfig::from_toml_str("[agent]\nq = 1.0").is_err());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = RunConfig::from_toml_str("seed = 3\n[agent]\nhorizon = 60.0\n[train]\niterations = 5").unwrap();
        assert_eq!(cfg.agent.horizon, 60.0);
        assert_eq!(cfg.agent.q, 40.0);
        assert_eq!(cfg.train_config().seed, 3);
        assert_eq!(cfg.eval_options().seed, 3);
        assert_eq!(cfg.scaling().unwrap().horizon, 60.0);
    }
}
