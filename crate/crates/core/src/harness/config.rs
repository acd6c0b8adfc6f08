use std::path::Path;

use diffcore::AdamConfig;
use serde::{Deserialize, Serialize};

use crate::behavior::{AcConfig, AgentMode};
use crate::envsim::EnvConfig;
use crate::harness::dataset::Explorer;
use crate::worldmodel::{LossScales, Variant, WmConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GoalKind {
    Coords,
    Visual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub explorer: Explorer,
    pub steps: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { explorer: Explorer::Scripted, steps: 50_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_goals: usize,
    pub episodes_per_goal: usize,
    pub goal_kind: GoalKind,
    /// Goals used by the periodic evaluations during training; the final
    /// evaluation always uses `n_goals`.
    pub periodic_goals: usize,
    /// Dataset windows used to measure reconstruction errors.
    pub probe_windows: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_goals: 100, episodes_per_goal: 1, goal_kind: GoalKind::Coords, periodic_goals: 16, probe_windows: 32 }
    }
}

/// Everything one offline training run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: AgentMode,
    #[serde(default = "default_train_steps")]
    pub train_steps: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    /// World-model-only updates before the actor-critic joins.
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub model: WmConfig,
    #[serde(default)]
    pub scales: LossScales,
    #[serde(default = "default_optim")]
    pub optim: AdamConfig,
    #[serde(default)]
    pub actor_critic: AcConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_mode() -> AgentMode {
    AgentMode::Pcp
}
fn default_train_steps() -> usize {
    10_000
}
fn default_eval_every() -> usize {
    500
}
fn default_batch_size() -> usize {
    16
}
fn default_seq_len() -> usize {
    16
}
fn default_optim() -> AdamConfig {
    AdamConfig { lr: 6e-4, ..Default::default() }
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            mode: default_mode(),
            train_steps: default_train_steps(),
            eval_every: default_eval_every(),
            batch_size: default_batch_size(),
            seq_len: default_seq_len(),
            warmup_steps: 0,
            env: EnvConfig::default(),
            model: WmConfig::default(),
            scales: LossScales::default(),
            optim: default_optim(),
            actor_critic: AcConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Validates and fills the settings implied by others: the model sees
    /// the environment's image size, and only the unconditioned baseline
    /// carries a reward head.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        c.env.validate()?;
        c.scales.validate()?;
        c.model.image_size = c.env.image_size;
        c.model.reward_head = c.mode == AgentMode::Baseline;
        if c.mode == AgentMode::Lcp && c.model.variant != Variant::ObjectCentric {
            return Err(Error::Config("lcp mode needs model.variant = \"object-centric\"".into()));
        }
        match (c.mode, c.eval.goal_kind) {
            (AgentMode::Baseline | AgentMode::Pcp, GoalKind::Visual) | (AgentMode::LexaCosine, GoalKind::Coords) => {
                return Err(Error::Config(format!("{} agents cannot be evaluated on {:?} goals", c.mode.name(), c.eval.goal_kind)));
            }
            _ => {}
        }
        if c.train_steps == 0 || c.eval_every == 0 {
            return Err(Error::Config("train_steps and eval_every must be positive".into()));
        }
        if c.seq_len < 2 || c.seq_len > c.env.max_episode_steps + 1 {
            return Err(Error::Config(format!("seq_len {} must lie in [2, max_episode_steps + 1]", c.seq_len)));
        }
        if c.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(c)
    }
}
