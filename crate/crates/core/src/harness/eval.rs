//! Goal-grid evaluation: every goal of a uniform grid gets its own episode,
//! and all episodes advance in lockstep so the model runs batched.

use std::path::Path;

use diffcore::{Checkpoint, SampleMode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::behavior::{encode_visual_goal, goal_state, lcp_goal_latents, render_goals, AcConfig, ActorCritic, AgentMode, Conditioning};
use crate::envsim::{normalized_score, Env, EnvConfig, GoalSpec, Observation, Pose2, GOAL_EXCLUSION_RADIUS};
use crate::harness::config::GoalKind;
use crate::worldmodel::{RssmState, WorldModel, ACTION_DIM};
use crate::{Error, Result};

/// Final distance below which an episode counts as a success.
pub const SUCCESS_THRESHOLD: f64 = 0.05;

/// Goals at the cell centres of a `k × k` grid over the workspace.
pub fn goal_grid(env: &EnvConfig, n_goals: usize) -> Result<Vec<Pose2>> {
    let k = (n_goals as f64).sqrt().round() as usize;
    if k == 0 || k * k != n_goals {
        return Err(Error::Config(format!("n_goals {n_goals} is not a perfect square")));
    }
    let e = env.workspace_half_extent;
    let cell = 2.0 * e / k as f64;
    let mut goals = Vec::with_capacity(n_goals);
    // row-major from the top-left corner, matching image layout
    for r in 0..k {
        for c in 0..k {
            let g = Pose2::new(-e + (c as f64 + 0.5) * cell, e - (r as f64 + 0.5) * cell);
            if g.norm() < GOAL_EXCLUSION_RADIUS {
                return Err(Error::Config(format!(
                    "a {k}×{k} grid puts a goal inside the origin exclusion ball; use an even side"
                )));
            }
            goals.push(g);
        }
    }
    Ok(goals)
}

/// An agent driven through a batch of lockstep episodes.
pub trait GoalAgent {
    /// Called once with every episode's goal and first observation.
    fn begin(&mut self, goals: &[Pose2], first: &[Observation]) -> Result<()>;

    /// Actions for the current observations. Scripted oracles may act on the
    /// environments directly.
    fn act(&mut self, observations: &[Observation], envs: &mut [Env]) -> Result<Vec<[f64; 2]>>;

    /// Mean value prediction at the current step, if the agent has a critic.
    fn value_estimate(&self) -> Option<f64> {
        None
    }
}

/// Never moves.
pub struct StationaryAgent;

impl GoalAgent for StationaryAgent {
    fn begin(&mut self, _: &[Pose2], _: &[Observation]) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, observations: &[Observation], _: &mut [Env]) -> Result<Vec<[f64; 2]>> {
        Ok(vec![[0.0, 0.0]; observations.len()])
    }
}

/// Teleports the object one action-scale step toward its goal each step.
pub struct OracleAgent;

impl GoalAgent for OracleAgent {
    fn begin(&mut self, _: &[Pose2], _: &[Observation]) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, observations: &[Observation], envs: &mut [Env]) -> Result<Vec<[f64; 2]>> {
        for env in envs.iter_mut() {
            let (p, g) = (env.object(), env.goal());
            let d = p.dist(g);
            let s = env.config().action_scale.min(d);
            if d > 0.0 {
                env.teleport_object(Pose2::new(p.x + (g.x - p.x) / d * s, p.y + (g.y - p.y) / d * s));
            }
        }
        Ok(vec![[0.0, 0.0]; observations.len()])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub x: f64,
    pub y: f64,
    pub mean_score: f64,
    pub success_rate: f64,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub goal_kind: GoalKind,
    pub cells: Vec<GridCell>,
    pub mean_score: f64,
    /// Standard error of the mean over goals.
    pub score_se: f64,
    pub success_rate: f64,
    pub mean_final_distance: f64,
    /// Mean value prediction per episode step (empty without a critic).
    pub value_trace: Vec<f64>,
}

/// Runs `episodes_per_goal` episodes per goal and scores the final step.
pub fn evaluate_agent(
    agent: &mut dyn GoalAgent,
    env: &EnvConfig,
    goals: &[Pose2],
    episodes_per_goal: usize,
    goal_kind: GoalKind,
    seed: u64,
) -> Result<GridResult> {
    if goals.is_empty() || episodes_per_goal == 0 {
        return Err(Error::Config("evaluation needs goals and episodes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut envs = Vec::new();
    let mut observations = Vec::new();
    let mut episode_goals = Vec::new();
    for &g in goals {
        for _ in 0..episodes_per_goal {
            let (e, obs, _) = Env::reset(env, rng.random(), Some(&GoalSpec::Coords(g)))?;
            envs.push(e);
            observations.push(obs);
            episode_goals.push(g);
        }
    }
    agent.begin(&episode_goals, &observations)?;
    let mut value_trace = Vec::new();
    while !envs[0].is_done() {
        if let Some(v) = agent.value_estimate() {
            value_trace.push(v);
        }
        let actions = agent.act(&observations, &mut envs)?;
        for (i, env) in envs.iter_mut().enumerate() {
            observations[i] = env.step(actions[i])?.observation;
        }
    }
    let mut cells = Vec::with_capacity(goals.len());
    let mut dist_sum = 0.0;
    for (gi, &g) in goals.iter().enumerate() {
        let mut scores = Vec::with_capacity(episodes_per_goal);
        let mut successes = 0;
        for env in &envs[gi * episodes_per_goal..(gi + 1) * episodes_per_goal] {
            let d = env.object().dist(g);
            dist_sum += d;
            successes += usize::from(d < SUCCESS_THRESHOLD);
            scores.push(normalized_score(env.object(), g)?);
        }
        let mean_score = scores.iter().sum::<f64>() / scores.len() as f64;
        cells.push(GridCell { x: g.x, y: g.y, mean_score, success_rate: successes as f64 / episodes_per_goal as f64, scores });
    }
    let means: Vec<f64> = cells.iter().map(|c| c.mean_score).collect();
    let (mean_score, score_se) = mean_and_se(&means);
    let success_rate = cells.iter().map(|c| c.success_rate).sum::<f64>() / cells.len() as f64;
    Ok(GridResult {
        goal_kind,
        cells,
        mean_score,
        score_se,
        success_rate,
        mean_final_distance: dist_sum / envs.len() as f64,
        value_trace,
    })
}

/// Mean and standard error `stddev / √n` (sample standard deviation; 0 for
/// a single value).
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// A trained world model with its actor-critic.
#[derive(Clone, Debug)]
pub struct AgentBundle {
    pub env: EnvConfig,
    pub model: WorldModel<f32>,
    pub behavior: ActorCritic<f32>,
}

impl AgentBundle {
    pub fn mode(&self) -> AgentMode {
        self.behavior.mode
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        if let Some(obj) = ck.metadata.as_object_mut() {
            obj.insert("kind".into(), "agent".into());
            obj.insert("mode".into(), serde_json::to_value(self.behavior.mode).expect("serializable"));
            obj.insert("env".into(), serde_json::to_value(&self.env).expect("serializable"));
            obj.insert("actor_critic".into(), serde_json::to_value(&self.behavior.config).expect("serializable"));
        }
        self.behavior.to_checkpoint_parts(&mut ck);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = WorldModel::from_checkpoint(ck)?;
        let field = |k: &str| ck.metadata.get(k).cloned().ok_or_else(|| Error::Config(format!("checkpoint lacks {k}")));
        let mode: AgentMode = serde_json::from_value(field("mode")?)?;
        let env: EnvConfig = serde_json::from_value(field("env")?)?;
        let ac_cfg: AcConfig = serde_json::from_value(field("actor_critic")?)?;
        let mut behavior = ActorCritic::new(ac_cfg, mode, &model, 0)?;
        behavior.load_checkpoint_parts(ck)?;
        Ok(Self { env, model, behavior })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Conditioning for a batch of goals given as coordinates or rendered
    /// goal observations.
    pub fn conditioning(&self, goals: &[Pose2], kind: GoalKind, seed: u64) -> Result<Conditioning<f32>> {
        let mode = self.mode();
        match (mode, kind) {
            (AgentMode::Baseline, GoalKind::Coords) => Ok(Conditioning::None),
            (AgentMode::Pcp, GoalKind::Coords) => Ok(Conditioning::pcp(goals)),
            (AgentMode::Lcp, GoalKind::Coords) => Ok(Conditioning::Lcp(lcp_goal_latents(&self.model, goals)?)),
            (AgentMode::Lcp, GoalKind::Visual) => {
                let obs = render_goals(&self.env, goals)?;
                let refs: Vec<&Observation> = obs.iter().collect();
                Ok(Conditioning::Lcp(encode_visual_goal(&self.model, &refs, seed)?))
            }
            (AgentMode::LexaCosine, GoalKind::Visual) => {
                let obs = render_goals(&self.env, goals)?;
                let refs: Vec<&Observation> = obs.iter().collect();
                Ok(Conditioning::LexaCosine(goal_state(&self.model, &refs, SampleMode::Mode, seed)?.flat()))
            }
            _ => Err(Error::Config(format!("{} agents cannot take {kind:?} goals", mode.name()))),
        }
    }
}

/// Runs a trained agent with the distribution-mode policy, filtering
/// observations through the posterior.
pub struct LearnedAgent<'a> {
    bundle: &'a AgentBundle,
    kind: GoalKind,
    rng: ChaCha8Rng,
    cond: Option<Conditioning<f32>>,
    state: Option<RssmState<f32>>,
    last_action: Tensor<f32>,
    value: Option<f64>,
    filtered: bool,
}

impl<'a> LearnedAgent<'a> {
    pub fn new(bundle: &'a AgentBundle, kind: GoalKind, seed: u64) -> Self {
        Self {
            bundle,
            kind,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cond: None,
            state: None,
            last_action: Tensor::zeros(&[0, ACTION_DIM]),
            value: None,
            filtered: false,
        }
    }

    fn filter(&mut self, observations: &[Observation]) -> Result<()> {
        let model = &self.bundle.model;
        let refs: Vec<&Observation> = observations.iter().collect();
        let embed = model.encode(&refs)?;
        let prev = match self.state.take() {
            Some(s) => s,
            None => model.initial_state(observations.len()),
        };
        let next = model.posterior_step(&prev, &self.last_action, &embed, SampleMode::Mode, &mut self.rng);
        let cond = self.cond.as_ref().expect("begin called");
        let v = self.bundle.behavior.value(&next, cond)?;
        self.value = Some(v.iter().sum::<f64>() / v.len() as f64);
        self.state = Some(next);
        self.filtered = true;
        Ok(())
    }
}

impl GoalAgent for LearnedAgent<'_> {
    fn begin(&mut self, goals: &[Pose2], first: &[Observation]) -> Result<()> {
        self.cond = Some(self.bundle.conditioning(goals, self.kind, self.rng.random())?);
        self.state = None;
        self.last_action = Tensor::zeros(&[first.len(), ACTION_DIM]);
        self.filter(first)
    }

    fn act(&mut self, observations: &[Observation], _: &mut [Env]) -> Result<Vec<[f64; 2]>> {
        if !self.filtered {
            self.filter(observations)?;
        }
        let state = self.state.as_ref().expect("filtered");
        let cond = self.cond.as_ref().expect("begin called");
        let actions = self.bundle.behavior.act(state, cond, true, &mut self.rng)?;
        let flat: Vec<f32> = actions.iter().flat_map(|a| [a[0] as f32, a[1] as f32]).collect();
        self.last_action = Tensor::from_vec(&[actions.len(), ACTION_DIM], flat)?;
        // the next call sees the observations these actions produce
        self.filtered = false;
        Ok(actions)
    }

    fn value_estimate(&self) -> Option<f64> {
        self.value
    }
}

/// Loads an agent checkpoint and evaluates it on an `n_goals` grid.
pub fn evaluate_grid(
    checkpoint: impl AsRef<Path>,
    env: &EnvConfig,
    n_goals: usize,
    episodes_per_goal: usize,
    kind: GoalKind,
    seed: u64,
) -> Result<GridResult> {
    let bundle = AgentBundle::load(checkpoint)?;
    evaluate_bundle(&bundle, env, n_goals, episodes_per_goal, kind, seed)
}

pub fn evaluate_bundle(
    bundle: &AgentBundle,
    env: &EnvConfig,
    n_goals: usize,
    episodes_per_goal: usize,
    kind: GoalKind,
    seed: u64,
) -> Result<GridResult> {
    let goals = goal_grid(env, n_goals)?;
    let mut agent = LearnedAgent::new(bundle, kind, seed);
    evaluate_agent(&mut agent, env, &goals, episodes_per_goal, kind, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::Task;

    #[test]
    fn grid_has_one_goal_per_cell() {
        let env = EnvConfig::default();
        let goals = goal_grid(&env, 100).unwrap();
        assert_eq!(goals.len(), 100);
        assert_eq!(goals[0], Pose2::new(-0.45, 0.45));
        assert!(goals.iter().all(|g| env.in_bounds(*g)));
        assert!(goal_grid(&env, 10).is_err());
        assert!(goal_grid(&env, 0).is_err());
        // odd sides put a cell centre on the origin
        assert!(goal_grid(&env, 9).is_err());
    }

    #[test]
    fn stationary_agent_scores_exp_minus_one() {
        for task in [Task::Reacher2D, Task::CubeMove2D] {
            let env = EnvConfig { task, ..Default::default() };
            let goals = goal_grid(&env, 16).unwrap();
            let res = evaluate_agent(&mut StationaryAgent, &env, &goals, 2, GoalKind::Coords, 0).unwrap();
            assert!((res.mean_score - (-1.0f64).exp()).abs() < 1e-6);
            assert_eq!(res.success_rate, 0.0);
            assert_eq!(res.cells.len(), 16);
            assert!(res.cells.iter().all(|c| c.scores.len() == 2));
        }
    }

    #[test]
    fn oracle_agent_nearly_saturates() {
        let env = EnvConfig { task: Task::CubeMove2D, ..Default::default() };
        let goals = goal_grid(&env, 100).unwrap();
        let res = evaluate_agent(&mut OracleAgent, &env, &goals, 1, GoalKind::Coords, 0).unwrap();
        assert!(res.mean_score > 0.95, "{}", res.mean_score);
        assert_eq!(res.success_rate, 1.0);
    }

    #[test]
    fn standard_error_uses_sample_deviation() {
        let (m, se) = mean_and_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_and_se(&[0.7]), (0.7, 0.0));
        assert!(mean_and_se(&[]).0.is_nan());
    }
}
