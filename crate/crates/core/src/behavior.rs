//! Imagination actor-critic with four conditioning modes.
//!
//! The policy sees the latent feature (deter ⊕ stoch) concatenated with a
//! goal encoding that depends on the mode: nothing for the unconditioned
//! baseline, goal coordinates for PCP, a goal object latent for LCP and a
//! goal feature vector for the flat cosine baseline.

use diffcore::{
    adam_step, cosine_sim_eps, Activation, AdamConfig, DenseStack, Graph, OptimState, ParamStore, Real, SampleMode,
    Tensor, Var,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envsim::{render_goal_observation, sample_goal, EnvConfig, Observation, Pose2};
use crate::worldmodel::{ObjectId, RssmState, StateVars, Variant, WorldModel, ACTION_DIM, COSINE_EPS};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentMode {
    Baseline,
    Pcp,
    Lcp,
    LexaCosine,
}

impl AgentMode {
    pub const ALL: [AgentMode; 4] = [AgentMode::Baseline, AgentMode::Pcp, AgentMode::Lcp, AgentMode::LexaCosine];

    pub fn name(self) -> &'static str {
        match self {
            AgentMode::Baseline => "baseline",
            AgentMode::Pcp => "pcp",
            AgentMode::Lcp => "lcp",
            AgentMode::LexaCosine => "lexa-cosine",
        }
    }

    /// Width of the goal encoding appended to the policy input.
    pub fn cond_dim(self, model: &WorldModel<impl Real>) -> usize {
        match self {
            AgentMode::Baseline => 0,
            AgentMode::Pcp => 2,
            AgentMode::Lcp => model.config.object_latent_dim,
            AgentMode::LexaCosine => model.config.feat_dim(),
        }
    }

    /// Checks that `model` can serve this mode.
    pub fn check_model(self, model: &WorldModel<impl Real>) -> Result<()> {
        match self {
            AgentMode::Baseline if !model.has_reward_head() => {
                Err(Error::Config("the unconditioned baseline needs a world model with a reward head".into()))
            }
            AgentMode::Lcp if model.variant() != Variant::ObjectCentric => {
                Err(Error::Config("latent conditioning needs the object-centric world model".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Per-row goal information for a batch of states.
#[derive(Clone, Debug, PartialEq)]
pub enum Conditioning<T> {
    None,
    /// Goal coordinates `[N, 2]`.
    Pcp(Tensor<T>),
    /// Goal object latents `[N, object_latent_dim]`.
    Lcp(Tensor<T>),
    /// Goal feature vectors `[N, feat_dim]`.
    LexaCosine(Tensor<T>),
}

impl<T: Real> Conditioning<T> {
    pub fn mode(&self) -> AgentMode {
        match self {
            Conditioning::None => AgentMode::Baseline,
            Conditioning::Pcp(_) => AgentMode::Pcp,
            Conditioning::Lcp(_) => AgentMode::Lcp,
            Conditioning::LexaCosine(_) => AgentMode::LexaCosine,
        }
    }

    pub fn pcp(goals: &[Pose2]) -> Self {
        let data = goals.iter().flat_map(|p| [T::lit(p.x), T::lit(p.y)]).collect();
        Conditioning::Pcp(Tensor::from_vec(&[goals.len(), 2], data).expect("sized"))
    }

    fn tensor(&self) -> Option<&Tensor<T>> {
        match self {
            Conditioning::None => None,
            Conditioning::Pcp(t) | Conditioning::Lcp(t) | Conditioning::LexaCosine(t) => Some(t),
        }
    }

    pub fn rows(&self) -> Option<usize> {
        self.tensor().map(|t| t.rows())
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        match self {
            Conditioning::None => Conditioning::None,
            Conditioning::Pcp(t) => Conditioning::Pcp(t.select_rows(rows)),
            Conditioning::Lcp(t) => Conditioning::Lcp(t.select_rows(rows)),
            Conditioning::LexaCosine(t) => Conditioning::LexaCosine(t.select_rows(rows)),
        }
    }
}

/// `−‖p̂ − g‖₂`.
pub fn reward_pcp(p_obj_hat: Pose2, p_goal: Pose2) -> f64 {
    -p_obj_hat.dist(p_goal)
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Config(format!("latent sizes differ: {} vs {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Core(diffcore::Error::Degenerate("cosine of a zero-norm latent".into())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Cosine similarity between an imagined object latent and the goal latent.
pub fn reward_lcp(s_obj_hat: &[f64], s_goal: &[f64]) -> Result<f64> {
    cosine(s_obj_hat, s_goal)
}

/// Cosine similarity between two full flat latent states.
pub fn reward_lexa_cosine<T: Real>(state: &RssmState<T>, goal_flat: &[f64]) -> Result<f64> {
    cosine(&state.flat().to_f64_vec(), goal_flat)
}

/// `R_t = r_{t+1} + γ[(1−λ) v_{t+1} + λ R_{t+1}]` with `R_H = v_H`.
/// `rewards[t]` and `values[t]` hold `r_{t+1}` and `v_{t+1}`.
pub fn lambda_returns(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    if rewards.len() != values.len() || rewards.is_empty() {
        return Err(Error::Config("rewards and values must be non-empty and equally long".into()));
    }
    let h = rewards.len();
    let mut out = vec![0.0; h];
    let mut next = values[h - 1];
    for t in (0..h).rev() {
        out[t] = rewards[t] + gamma * ((1.0 - lambda) * values[t] + lambda * next);
        next = out[t];
    }
    Ok(out)
}

/// Graph version of [`lambda_returns`] over per-step `[N, 1]` columns.
pub fn lambda_returns_g<T: Real>(g: &mut Graph<T>, rewards: &[Var], values: &[Var], gamma: f64, lambda: f64) -> Vec<Var> {
    let h = rewards.len();
    let mut out = vec![rewards[0]; h];
    let mut next = values[h - 1];
    for t in (0..h).rev() {
        let mixed_v = g.scale(values[t], T::lit(1.0 - lambda));
        let mixed_r = g.scale(next, T::lit(lambda));
        let mix = g.add(mixed_v, mixed_r);
        let disc = g.scale(mix, T::lit(gamma));
        out[t] = g.add(rewards[t], disc);
        next = out[t];
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcConfig {
    pub horizon: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub entropy_coef: f64,
    pub hidden_dim: usize,
    /// Imagination starts drawn from each batch's posterior states.
    pub starts: usize,
    pub min_std: f64,
    pub target_every: u64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub clip: f64,
    /// Divide the actor objective by a running scale of the λ-returns.
    pub normalize_returns: bool,
    /// Record the gradient norm of the entropy term alone (one extra
    /// backward pass per update).
    pub track_entropy_grad: bool,
}

impl Default for AcConfig {
    fn default() -> Self {
        Self {
            horizon: 15,
            gamma: 0.99,
            lambda: 0.95,
            entropy_coef: 1e-3,
            hidden_dim: 128,
            starts: 64,
            min_std: 0.1,
            target_every: 100,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            clip: 100.0,
            normalize_returns: true,
            track_entropy_grad: false,
        }
    }
}

/// Diagnostics of one actor-critic update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AcStats {
    pub actor_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub mean_reward: f64,
    pub mean_value: f64,
    pub mean_return: f64,
    pub actor_grad_norm: f64,
    pub entropy_grad_norm: f64,
}

/// Imagined rollout values, row-major per step (`[step][row]`).
#[derive(Clone, Debug, Default)]
pub struct ImaginedTrajectory {
    pub horizon: usize,
    pub rewards: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub returns: Vec<Vec<f64>>,
    pub actions: Vec<Vec<[f64; 2]>>,
}

/// Graph handles and diagnostics of one actor-critic objective.
pub struct Objective {
    pub actor_loss: Var,
    pub value_loss: Var,
    /// The entropy bonus alone, already inside `actor_loss`.
    pub entropy_term: Var,
    pub trajectory: ImaginedTrajectory,
    pub stats: AcStats,
    /// Running return scale after this batch.
    pub return_scale: f64,
}

/// Pluggable reward on imagined features: `(graph, feat [N, F]) -> [N, 1]`.
pub type RewardFn<'a, T> = dyn FnMut(&mut Graph<T>, Var, &Conditioning<T>) -> Result<Var> + 'a;

#[derive(Debug)]
pub struct ActorCritic<T> {
    pub config: AcConfig,
    pub mode: AgentMode,
    cond_dim: usize,
    policy: DenseStack,
    value: DenseStack,
    pub policy_store: ParamStore<T>,
    pub value_store: ParamStore<T>,
    pub target_store: ParamStore<T>,
    policy_opt: OptimState<T>,
    value_opt: OptimState<T>,
    pub updates: u64,
    return_scale: f64,
}

impl<T: Real> Clone for ActorCritic<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            mode: self.mode,
            cond_dim: self.cond_dim,
            policy: self.policy.clone(),
            value: self.value.clone(),
            policy_store: self.policy_store.clone(),
            value_store: self.value_store.clone(),
            target_store: self.target_store.clone(),
            policy_opt: self.policy_opt.clone(),
            value_opt: self.value_opt.clone(),
            updates: self.updates,
            return_scale: self.return_scale,
        }
    }
}

impl<T: Real> ActorCritic<T> {
    pub fn new(config: AcConfig, mode: AgentMode, model: &WorldModel<T>, seed: u64) -> Result<Self> {
        mode.check_model(model)?;
        if config.horizon < 1 || !(0.0..=1.0).contains(&config.gamma) || !(0.0..=1.0).contains(&config.lambda) {
            return Err(Error::Config(format!("invalid actor-critic settings: {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cond_dim = mode.cond_dim(model);
        let input = model.config.feat_dim() + cond_dim;
        let h = config.hidden_dim;
        let mut policy_store = ParamStore::new();
        let policy =
            DenseStack::new(&mut policy_store, "policy", &[input, h, h, 2 * ACTION_DIM], Activation::Relu, &mut rng);
        let mut value_store = ParamStore::new();
        let value = DenseStack::new(&mut value_store, "value", &[input, h, h, 1], Activation::Relu, &mut rng);
        let target_store = value_store.clone();
        let adam = |lr| AdamConfig { lr, clip: config.clip, ..Default::default() };
        let policy_opt = OptimState::new(&policy_store, adam(config.actor_lr));
        let value_opt = OptimState::new(&value_store, adam(config.critic_lr));
        Ok(Self {
            config,
            mode,
            cond_dim,
            policy,
            value,
            policy_store,
            value_store,
            target_store,
            policy_opt,
            value_opt,
            updates: 0,
            return_scale: 1.0,
        })
    }

    fn check_cond(&self, cond: &Conditioning<T>, rows: usize) -> Result<()> {
        if cond.mode() != self.mode {
            return Err(Error::Config(format!(
                "policy trained for {} but given {} conditioning",
                self.mode.name(),
                cond.mode().name()
            )));
        }
        if let Some(t) = cond.tensor() {
            if t.rows() != rows || t.cols() != self.cond_dim {
                return Err(Error::Config(format!(
                    "conditioning {:?} does not match {rows} states × {}",
                    t.shape(),
                    self.cond_dim
                )));
            }
        }
        Ok(())
    }

    fn input_g(&self, g: &mut Graph<T>, feat: Var, cond: &Conditioning<T>) -> Var {
        match cond.tensor() {
            None => feat,
            Some(t) => {
                let c = g.input(t.clone());
                g.concat_cols(&[feat, c])
            }
        }
    }

    /// Pre-squash mean and standard deviation, each `[N, 2]`.
    pub fn dist_g(&self, g: &mut Graph<T>, feat: Var, cond: &Conditioning<T>) -> (Var, Var) {
        let x = self.input_g(g, feat, cond);
        let out = self.policy.forward(g, &self.policy_store, x);
        let mean = g.slice_cols(out, 0, ACTION_DIM);
        let raw = g.slice_cols(out, ACTION_DIM, ACTION_DIM);
        let sp = g.softplus(raw);
        let std = g.add_scalar(sp, T::lit(self.config.min_std));
        (mean, std)
    }

    /// Reparameterised squashed-Gaussian action and its pre-squash entropy.
    fn sample_g(&self, g: &mut Graph<T>, feat: Var, cond: &Conditioning<T>, rng: &mut dyn rand::RngCore) -> (Var, Var) {
        let (mean, std) = self.dist_g(g, feat, cond);
        let rows = g.value(mean).rows();
        let noise: Vec<T> = (0..rows * ACTION_DIM).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect();
        let eps = g.input(Tensor::from_vec(&[rows, ACTION_DIM], noise).expect("sized"));
        let scaled = g.mul(std, eps);
        let pre = g.add(mean, scaled);
        let action = g.tanh(pre);
        // Gaussian entropy per row: Σ ln σ + const
        let ln_std = g.ln(std);
        let ent = g.sum_cols(ln_std);
        let half_log = 0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln()) * ACTION_DIM as f64;
        let ent = g.add_scalar(ent, T::lit(half_log));
        (action, ent)
    }

    /// Actions for a batch of states; `deterministic` uses the distribution
    /// mode.
    pub fn act(
        &self,
        state: &RssmState<T>,
        cond: &Conditioning<T>,
        deterministic: bool,
        rng: &mut impl Rng,
    ) -> Result<Vec<[f64; 2]>> {
        self.check_cond(cond, state.rows())?;
        let mut g = Graph::new();
        g.freeze(&self.policy_store);
        let s = StateVars::bind(&mut g, state);
        let feat = s.feat(&mut g);
        let action = if deterministic {
            let (mean, _) = self.dist_g(&mut g, feat, cond);
            g.tanh(mean)
        } else {
            let mut r = ChaCha8Rng::seed_from_u64(rng.random());
            self.sample_g(&mut g, feat, cond, &mut r).0
        };
        let v = g.value(action).to_f64_vec();
        Ok(v.chunks(ACTION_DIM).map(|c| [c[0], c[1]]).collect())
    }

    /// Pre-squash distribution parameters `(mean, std)` per row.
    pub fn distribution(&self, state: &RssmState<T>, cond: &Conditioning<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_cond(cond, state.rows())?;
        let mut g = Graph::new();
        let s = StateVars::bind(&mut g, state);
        let feat = s.feat(&mut g);
        let (m, sd) = self.dist_g(&mut g, feat, cond);
        Ok((g.value(m).clone(), g.value(sd).clone()))
    }

    /// Value-network prediction per row.
    pub fn value(&self, state: &RssmState<T>, cond: &Conditioning<T>) -> Result<Vec<f64>> {
        self.check_cond(cond, state.rows())?;
        let mut g = Graph::new();
        let s = StateVars::bind(&mut g, state);
        let feat = s.feat(&mut g);
        let x = self.input_g(&mut g, feat, cond);
        let v = self.value.forward(&mut g, &self.value_store, x);
        Ok(g.value(v).to_f64_vec())
    }

    /// Mode-specific reward on imagined features `[N, F]`, returning `[N, 1]`.
    pub fn reward_g(
        &self,
        g: &mut Graph<T>,
        model: &WorldModel<T>,
        feat: Var,
        cond: &Conditioning<T>,
    ) -> Result<Var> {
        match cond {
            Conditioning::None => {
                let r = model.reward_g(g, feat)?;
                Ok(g.symexp(r))
            }
            Conditioning::Pcp(goals) => {
                let p = model.decode_object_position_g(g, feat)?;
                let p = g.symexp(p);
                let goal = g.input(goals.clone());
                let d = g.sub(p, goal);
                let sq = g.square(d);
                let s = g.sum_cols(sq);
                // keeps the square root differentiable at zero distance
                let s = g.add_scalar(s, T::lit(1e-8));
                let dist = g.sqrt(s);
                Ok(g.neg(dist))
            }
            Conditioning::Lcp(goals) => {
                let lat = model.extract_g(g, feat, ObjectId::Object)?;
                let goal = g.input(goals.clone());
                Ok(cosine_sim_eps(g, lat, goal, T::lit(COSINE_EPS)))
            }
            Conditioning::LexaCosine(goals) => {
                let goal = g.input(goals.clone());
                Ok(cosine_sim_eps(g, feat, goal, T::lit(COSINE_EPS)))
            }
        }
    }

    /// One imagination update of policy and value from `starts`.
    pub fn update(
        &mut self,
        model: &WorldModel<T>,
        starts: &RssmState<T>,
        cond: &Conditioning<T>,
        rng: &mut impl Rng,
    ) -> Result<(AcStats, ImaginedTrajectory)> {
        self.update_with(model, starts, cond, SampleMode::Sample, rng, None)
    }

    /// [`update`](Self::update) with an explicit sampling mode and an optional
    /// reward override.
    pub fn update_with(
        &mut self,
        model: &WorldModel<T>,
        starts: &RssmState<T>,
        cond: &Conditioning<T>,
        mode: SampleMode,
        rng: &mut impl Rng,
        reward_override: Option<&mut RewardFn<'_, T>>,
    ) -> Result<(AcStats, ImaginedTrajectory)> {
        self.check_cond(cond, starts.rows())?;
        let mut g = Graph::new();
        let Objective { actor_loss, value_loss, entropy_term: ent_loss, trajectory: traj, stats, return_scale } =
            self.objective_g(&mut g, model, starts, cond, mode, rng, reward_override)?;
        self.return_scale = return_scale;
        let total = g.add(actor_loss, value_loss);
        let lv = g.scalar(total).as_f64();
        if !lv.is_finite() {
            return Err(Error::Core(diffcore::Error::NonFiniteGradient(format!(
                "actor-critic loss is {lv} (actor {}, value {})",
                g.scalar(actor_loss).as_f64(),
                g.scalar(value_loss).as_f64()
            ))));
        }
        let grads = g.backward(total)?;
        self.policy_store.zero_grad();
        self.value_store.zero_grad();
        grads.accumulate_into(&mut self.policy_store);
        grads.accumulate_into(&mut self.value_store);
        let mut stats = stats;
        stats.actor_grad_norm = self.policy_store.grad_norm().as_f64();
        if self.config.track_entropy_grad {
            let saved: Vec<Tensor<T>> = self.policy_store.iter().map(|(_, p)| p.grad.clone()).collect();
            self.policy_store.zero_grad();
            g.backward(ent_loss)?.accumulate_into(&mut self.policy_store);
            stats.entropy_grad_norm = self.policy_store.grad_norm().as_f64();
            let ids: Vec<_> = self.policy_store.ids().collect();
            for (id, grad) in ids.into_iter().zip(saved) {
                self.policy_store.get_mut(id).grad = grad;
            }
        }
        adam_step(&mut self.policy_store, &mut self.policy_opt)?;
        adam_step(&mut self.value_store, &mut self.value_opt)?;
        self.updates += 1;
        if self.updates % self.config.target_every.max(1) == 0 {
            self.target_store.copy_values_from(&self.value_store);
        }
        Ok((stats, traj))
    }

    /// Builds the actor and critic losses for one update.
    #[allow(clippy::too_many_arguments)]
    pub fn objective_g(
        &self,
        g: &mut Graph<T>,
        model: &WorldModel<T>,
        starts: &RssmState<T>,
        cond: &Conditioning<T>,
        mode: SampleMode,
        rng: &mut impl Rng,
        mut reward_override: Option<&mut RewardFn<'_, T>>,
    ) -> Result<Objective> {
        g.freeze(&model.store);
        g.freeze(&self.target_store);
        let cfg = self.config.clone();
        let n = starts.rows();
        let start = StateVars::bind(g, starts);
        let mut entropies = Vec::with_capacity(cfg.horizon);
        let mut feats = Vec::with_capacity(cfg.horizon);
        let mut actions = Vec::with_capacity(cfg.horizon);
        let mut state = start;
        let mut action_rng = ChaCha8Rng::seed_from_u64(rng.random());
        for _ in 0..cfg.horizon {
            let feat = state.feat(g);
            let (action, ent) = self.sample_g(g, feat, cond, &mut action_rng);
            entropies.push(ent);
            actions.push(action);
            state = model.prior_step_g(g, state, action, mode, rng).state;
            feats.push(state.feat(g));
        }
        let mut rewards = Vec::with_capacity(cfg.horizon);
        let mut values = Vec::with_capacity(cfg.horizon);
        for &f in &feats {
            let r = match reward_override.as_deref_mut() {
                Some(f_override) => f_override(g, f, cond)?,
                None => self.reward_g(g, model, f, cond)?,
            };
            rewards.push(r);
            let x = self.input_g(g, f, cond);
            values.push(self.value.forward(g, &self.target_store, x));
        }
        let returns = lambda_returns_g(g, &rewards, &values, cfg.gamma, cfg.lambda);

        // running return scale, DreamerV3-style percentile range
        let mut all: Vec<f64> = returns.iter().flat_map(|&r| g.value(r).to_f64_vec()).collect();
        all.sort_by(|a, b| a.total_cmp(b));
        let pct = |q: f64| all[((all.len() - 1) as f64 * q).round() as usize];
        let range = pct(0.95) - pct(0.05);
        let return_scale = 0.99 * self.return_scale + 0.01 * range;
        let scale = if cfg.normalize_returns { return_scale.max(1.0) } else { 1.0 };

        let ret_all = g.concat_rows(&returns);
        let ent_all = g.concat_rows(&entropies);
        let ret_mean = g.mean(ret_all);
        let ret_term = g.scale(ret_mean, T::lit(-1.0 / scale));
        let ent_mean = g.mean(ent_all);
        let ent_term = g.scale(ent_mean, T::lit(-cfg.entropy_coef));
        let actor_loss = g.add(ret_term, ent_term);

        // critic regresses the λ-returns from detached states
        let mut v_terms = Vec::with_capacity(cfg.horizon);
        let mut online_values = Vec::with_capacity(cfg.horizon);
        for (t, &f) in feats.iter().enumerate() {
            let fs = g.stop_grad(f);
            let x = self.input_g(g, fs, cond);
            let v = self.value.forward(g, &self.value_store, x);
            online_values.push(v);
            let target = g.stop_grad(returns[t]);
            let d = g.sub(v, target);
            v_terms.push(g.square(d));
        }
        let vt = g.concat_rows(&v_terms);
        let vm = g.mean(vt);
        let value_loss = g.scale(vm, T::lit(0.5));

        let col = |g: &Graph<T>, v: Var| g.value(v).to_f64_vec();
        let traj = ImaginedTrajectory {
            horizon: cfg.horizon,
            rewards: rewards.iter().map(|&v| col(g, v)).collect(),
            values: values.iter().map(|&v| col(g, v)).collect(),
            returns: returns.iter().map(|&v| col(g, v)).collect(),
            actions: actions
                .iter()
                .map(|&a| col(g, a).chunks(ACTION_DIM).map(|c| [c[0], c[1]]).collect())
                .collect(),
        };
        let mean_of = |rows: &[Vec<f64>]| rows.iter().flatten().sum::<f64>() / (n * cfg.horizon) as f64;
        let stats = AcStats {
            actor_loss: g.scalar(actor_loss).as_f64(),
            value_loss: g.scalar(value_loss).as_f64(),
            entropy: g.scalar(ent_mean).as_f64(),
            mean_reward: mean_of(&traj.rewards),
            mean_value: online_values.iter().flat_map(|&v| col(g, v)).sum::<f64>() / (n * cfg.horizon) as f64,
            mean_return: mean_of(&traj.returns),
            actor_grad_norm: 0.0,
            entropy_grad_norm: 0.0,
        };
        Ok(Objective { actor_loss, value_loss, entropy_term: ent_term, trajectory: traj, stats, return_scale })
    }

    /// Samples a conditioning for imagination starts: uniform goals for
    /// PCP and LCP, permuted start features for the cosine baseline.
    pub fn sample_conditioning(
        &self,
        model: &WorldModel<T>,
        env: &EnvConfig,
        starts: &RssmState<T>,
        rng: &mut impl Rng,
    ) -> Result<Conditioning<T>> {
        let n = starts.rows();
        Ok(match self.mode {
            AgentMode::Baseline => Conditioning::None,
            AgentMode::Pcp => {
                let goals: Vec<Pose2> = (0..n).map(|_| sample_goal(env, rng)).collect();
                Conditioning::pcp(&goals)
            }
            AgentMode::Lcp => {
                let goals: Vec<Pose2> = (0..n).map(|_| sample_goal(env, rng)).collect();
                Conditioning::Lcp(lcp_goal_latents(model, &goals)?)
            }
            AgentMode::LexaCosine => {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(rng);
                Conditioning::LexaCosine(starts.flat().select_rows(&perm))
            }
        })
    }

    pub fn to_checkpoint_parts(&self, ck: &mut diffcore::Checkpoint) {
        ck.push_store("policy", &self.policy_store);
        ck.push_store("value", &self.value_store);
        ck.push_store("target", &self.target_store);
    }

    pub fn load_checkpoint_parts(&mut self, ck: &diffcore::Checkpoint) -> Result<()> {
        ck.load_store("policy", &mut self.policy_store)?;
        ck.load_store("value", &mut self.value_store)?;
        ck.load_store("target", &mut self.target_store)?;
        Ok(())
    }
}

/// Goal object latents from coordinates through the positional encoder.
pub fn lcp_goal_latents<T: Real>(model: &WorldModel<T>, goals: &[Pose2]) -> Result<Tensor<T>> {
    let data = goals.iter().flat_map(|p| [T::lit(p.x), T::lit(p.y)]).collect();
    model.latent_pos_encode(&Tensor::from_vec(&[goals.len(), 2], data)?)
}

/// Posterior state of a goal observation, filtered from the reset state with
/// a zero action.
pub fn goal_state<T: Real>(model: &WorldModel<T>, goals: &[&Observation], mode: SampleMode, seed: u64) -> Result<RssmState<T>> {
    let embed = model.encode(goals)?;
    let prev = model.initial_state(goals.len());
    let action = Tensor::zeros(&[goals.len(), ACTION_DIM]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(model.posterior_step(&prev, &action, &embed, mode, &mut rng))
}

/// Goal object latent from a visual goal observation.
pub fn encode_visual_goal<T: Real>(model: &WorldModel<T>, goals: &[&Observation], seed: u64) -> Result<Tensor<T>> {
    let state = goal_state(model, goals, SampleMode::Mode, seed)?;
    model.object_extract(&state, ObjectId::Object)
}

/// Visual goal observations for a set of coordinates.
pub fn render_goals(env: &EnvConfig, goals: &[Pose2]) -> Result<Vec<Observation>> {
    goals.iter().map(|&g| render_goal_observation(env, g)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldmodel::{SeqBatch, WmConfig};
    use diffcore::{grad_check_owned, Real};

    fn tiny_model(variant: Variant, reward_head: bool, seed: u64) -> WorldModel<f64> {
        let cfg = WmConfig {
            variant,
            image_size: 3,
            deter_dim: 4,
            groups: 2,
            classes: 3,
            hidden_dim: 6,
            image_embed_dim: 3,
            vector_embed_dim: 3,
            object_latent_dim: 4,
            extractor_hidden: 6,
            pos_encoder_hidden: 8,
            reward_head,
            ..Default::default()
        };
        WorldModel::new(cfg, seed).unwrap()
    }

    fn tiny_ac() -> AcConfig {
        AcConfig { horizon: 2, hidden_dim: 5, normalize_returns: false, ..Default::default() }
    }

    fn starts(model: &WorldModel<f64>, rows: usize, seed: u64) -> RssmState<f64> {
        let cfg = &model.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rows * 2;
        let mut fill = |k: usize, lo: f64, hi: f64| -> Vec<f64> { (0..k).map(|_| rng.random_range(lo..hi)).collect() };
        let batch = SeqBatch {
            batch: rows,
            length: 2,
            images: Tensor::from_vec(&[n, cfg.image_len()], fill(n * cfg.image_len(), 0.0, 1.0)).unwrap(),
            vectors: Tensor::from_vec(&[n, 6], fill(n * 6, -0.4, 0.4)).unwrap(),
            actions: Tensor::from_vec(&[n, 2], fill(n * 2, -1.0, 1.0)).unwrap(),
            labels: vec![0; n * cfg.pixels()],
            rewards: Tensor::zeros(&[n, 1]),
        };
        model.observe(&batch, SampleMode::Sample, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().select_rows(&(rows..n).collect::<Vec<_>>())
    }

    fn conditioning(mode: AgentMode, model: &WorldModel<f64>, s: &RssmState<f64>) -> Conditioning<f64> {
        let goals = [Pose2::new(0.2, -0.3), Pose2::new(-0.1, 0.35), Pose2::new(0.4, 0.1)];
        match mode {
            AgentMode::Baseline => Conditioning::None,
            AgentMode::Pcp => Conditioning::pcp(&goals[..s.rows()]),
            AgentMode::Lcp => Conditioning::Lcp(lcp_goal_latents(model, &goals[..s.rows()]).unwrap()),
            AgentMode::LexaCosine => Conditioning::LexaCosine(s.flat().select_rows(&[2, 0, 1][..s.rows()])),
        }
    }

    fn model_for(mode: AgentMode) -> WorldModel<f64> {
        match mode {
            AgentMode::Baseline => tiny_model(Variant::Flat, true, 1),
            AgentMode::Lcp => tiny_model(Variant::ObjectCentric, false, 1),
            _ => tiny_model(Variant::Flat, false, 1),
        }
    }

    /// The value loss regresses stop-gradient targets and the actor loss only
    /// reads the frozen target critic, so each store is checked against its
    /// own loss.
    #[test]
    fn two_step_objective_matches_finite_differences() {
        for mode in AgentMode::ALL {
            let model = model_for(mode);
            let s = starts(&model, 3, 2);
            let cond = conditioning(mode, &model, &s);
            let mut ac = ActorCritic::new(tiny_ac(), mode, &model, 4).unwrap();
            // zero biases put tiny ReLU layers exactly on their kinks
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            for store in [&mut ac.policy_store, &mut ac.value_store, &mut ac.target_store] {
                for id in store.ids().collect::<Vec<_>>() {
                    if store.get(id).name.ends_with(".b") {
                        for v in store.get_mut(id).value.data_mut() {
                            *v = rng.random_range(-0.2..0.2);
                        }
                    }
                }
            }
            for actor in [true, false] {
                let report = grad_check_owned(
                    &mut ac,
                    |a| if actor { &mut a.policy_store } else { &mut a.value_store },
                    1e-6,
                    1,
                    |g, a| {
                        let mut rng = ChaCha8Rng::seed_from_u64(5);
                        let o = a.objective_g(g, &model, &s, &cond, SampleMode::Relaxed, &mut rng, None).expect("objective");
                        Ok(if actor { o.actor_loss } else { o.value_loss })
                    },
                )
                .unwrap();
                assert!(report.max_rel_error < 1e-4, "{mode:?} actor={actor}: {report:?}");
            }
        }
    }

    #[test]
    fn zero_rewards_leave_only_the_entropy_gradient() {
        let model = model_for(AgentMode::Pcp);
        let s = starts(&model, 3, 1);
        let cond = conditioning(AgentMode::Pcp, &model, &s);
        let cfg = AcConfig { track_entropy_grad: true, ..tiny_ac() };
        let mut ac = ActorCritic::new(cfg, AgentMode::Pcp, &model, 2).unwrap();
        // a critic that predicts exactly zero everywhere
        for id in ac.target_store.ids().collect::<Vec<_>>() {
            if ac.target_store.get(id).name.starts_with("value.2") {
                let shape = ac.target_store.value(id).shape().to_vec();
                ac.target_store.get_mut(id).value = Tensor::zeros(&shape);
            }
        }
        let mut zero = |g: &mut Graph<f64>, feat: Var, _: &Conditioning<f64>| -> Result<Var> {
            let rows = g.value(feat).rows();
            Ok(g.input(Tensor::zeros(&[rows, 1])))
        };
        let (stats, traj) = ac
            .update_with(&model, &s, &cond, SampleMode::Sample, &mut ChaCha8Rng::seed_from_u64(3), Some(&mut zero))
            .unwrap();
        assert!(traj.returns.iter().flatten().all(|&r| r == 0.0));
        assert!(stats.entropy_grad_norm > 0.0);
        assert!((stats.actor_grad_norm - stats.entropy_grad_norm).abs() < 1e-12 * stats.entropy_grad_norm.max(1.0));
    }

    #[test]
    fn critic_fits_constant_returns() {
        let model = model_for(AgentMode::Pcp);
        let s = starts(&model, 3, 1);
        let cond = conditioning(AgentMode::Pcp, &model, &s);
        let cfg = AcConfig { gamma: 0.0, critic_lr: 3e-3, ..tiny_ac() };
        let mut ac = ActorCritic::new(cfg, AgentMode::Pcp, &model, 2).unwrap();
        let mut constant = |g: &mut Graph<f64>, feat: Var, _: &Conditioning<f64>| -> Result<Var> {
            let rows = g.value(feat).rows();
            Ok(g.input(Tensor::full(&[rows, 1], 0.5)))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut last = f64::INFINITY;
        for _ in 0..500 {
            last = ac.update_with(&model, &s, &cond, SampleMode::Sample, &mut rng, Some(&mut constant)).unwrap().0.value_loss;
        }
        assert!(last < 1e-3, "value loss {last}");
    }

    /// Explicit mixture of n-step returns, independent of the recursion.
    fn lambda_return_by_expansion(r: &[f64], v: &[f64], gamma: f64, lambda: f64, t: usize) -> f64 {
        let h = r.len();
        let n_step = |n: usize| -> f64 {
            let disc: f64 = (0..n).map(|i| gamma.powi(i as i32) * r[t + i]).sum();
            disc + gamma.powi(n as i32) * v[t + n - 1]
        };
        let m = h - t;
        let mut total = 0.0;
        for n in 1..m {
            total += (1.0 - lambda) * lambda.powi(n as i32 - 1) * n_step(n);
        }
        total + lambda.powi(m as i32 - 1) * n_step(m)
    }

    #[test]
    fn lambda_returns_match_expansions() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let r: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
        for (gamma, lambda) in [(0.99, 0.95), (0.9, 0.5), (1.0, 1.0), (0.8, 0.0)] {
            let out = lambda_returns(&r, &v, gamma, lambda).unwrap();
            for t in 0..5 {
                let want = lambda_return_by_expansion(&r, &v, gamma, lambda, t);
                assert!((out[t] - want).abs() < 1e-12, "γ={gamma} λ={lambda} t={t}");
            }
        }
        let one_step = lambda_returns(&r, &v, 0.9, 0.0).unwrap();
        for t in 0..5 {
            assert!((one_step[t] - (r[t] + 0.9 * v[t])).abs() < 1e-12);
        }
        let mut v0 = v.clone();
        v0[4] = 0.0;
        let mc = lambda_returns(&r, &v0, 1.0, 1.0).unwrap();
        for t in 0..5 {
            assert!((mc[t] - r[t..].iter().sum::<f64>()).abs() < 1e-12);
        }
        assert!(lambda_returns(&r, &v[..3], 0.9, 0.9).is_err());
    }

    #[test]
    fn imagined_returns_satisfy_the_recursion() {
        for mode in AgentMode::ALL {
            let model = model_for(mode);
            let s = starts(&model, 3, 7);
            let cond = conditioning(mode, &model, &s);
            let cfg = AcConfig { horizon: 6, ..tiny_ac() };
            let mut ac = ActorCritic::new(cfg.clone(), mode, &model, 1).unwrap();
            let (_, traj) = ac.update(&model, &s, &cond, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            assert_eq!(traj.rewards.len(), cfg.horizon);
            for row in 0..s.rows() {
                let r: Vec<f64> = traj.rewards.iter().map(|x| x[row]).collect();
                let v: Vec<f64> = traj.values.iter().map(|x| x[row]).collect();
                let want = lambda_returns(&r, &v, cfg.gamma, cfg.lambda).unwrap();
                for t in 0..cfg.horizon {
                    assert!((traj.returns[t][row] - want[t]).abs() < 1e-9);
                }
            }
            assert!(traj.actions.iter().flatten().all(|a| a.iter().all(|v| (-1.0..=1.0).contains(v))));
        }
    }

    #[test]
    fn acting_is_bounded_deterministic_and_mode_checked() {
        let model = model_for(AgentMode::Pcp);
        let s = starts(&model, 3, 3);
        let cond = conditioning(AgentMode::Pcp, &model, &s);
        let ac = ActorCritic::new(tiny_ac(), AgentMode::Pcp, &model, 3).unwrap();
        let a1 = ac.act(&s, &cond, false, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let a2 = ac.act(&s, &cond, false, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a1, a2);
        assert!(a1.iter().all(|a| a.iter().all(|v| (-1.0..=1.0).contains(v))));
        assert!(ac.act(&s, &Conditioning::None, true, &mut ChaCha8Rng::seed_from_u64(9)).is_err());
        assert!(ac.act(&s, &cond.select_rows(&[0, 1]), true, &mut ChaCha8Rng::seed_from_u64(9)).is_err());
    }

    #[test]
    fn modes_reject_unsuitable_models() {
        let flat = tiny_model(Variant::Flat, false, 0);
        assert!(ActorCritic::new(tiny_ac(), AgentMode::Lcp, &flat, 0).is_err());
        assert!(ActorCritic::new(tiny_ac(), AgentMode::Baseline, &flat, 0).is_err());
        assert!(ActorCritic::new(tiny_ac(), AgentMode::Pcp, &flat, 0).is_ok());
        let oc = tiny_model(Variant::ObjectCentric, false, 0);
        assert!(ActorCritic::new(tiny_ac(), AgentMode::Pcp, &oc, 0).is_ok());
    }

    #[test]
    fn reward_examples() {
        let g = Pose2::new(0.1, -0.2);
        assert_eq!(reward_pcp(g, g), 0.0);
        assert!((reward_pcp(Pose2::new(0.3, 0.4), Pose2::ORIGIN) + 0.5).abs() < 1e-12);
        assert!(reward_pcp(Pose2::new(0.2, 0.2), g) > reward_pcp(Pose2::new(0.3, 0.3), g));

        let a = [0.3, -1.2, 0.5];
        assert!((reward_lcp(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(reward_lcp(&[1.0, 0.0], &[0.0, 2.0]).unwrap().abs() < 1e-15);
        let scaled: Vec<f64> = a.iter().map(|v| v * 7.5).collect();
        assert!((reward_lcp(&scaled, &[0.1, 0.2, 0.3]).unwrap() - reward_lcp(&a, &[0.1, 0.2, 0.3]).unwrap()).abs() < 1e-12);
        assert!(reward_lcp(&[0.0, 0.0], &[1.0, 0.0]).is_err());

        let model = model_for(AgentMode::LexaCosine);
        let s = starts(&model, 1, 4);
        let flat = s.flat().to_f64_vec();
        assert_eq!(flat.len(), model.config.deter_dim + model.config.groups * model.config.classes);
        assert!((reward_lexa_cosine(&s, &flat).unwrap() - 1.0).abs() < 1e-12);
        assert!(reward_lexa_cosine(&s, &flat[1..]).is_err());
    }

    #[test]
    fn graph_rewards_agree_with_scalar_rewards() {
        let model = model_for(AgentMode::Lcp);
        let s = starts(&model, 3, 5);
        let ac = ActorCritic::new(tiny_ac(), AgentMode::Lcp, &model, 0).unwrap();
        let cond = conditioning(AgentMode::Lcp, &model, &s);
        let mut g = Graph::new();
        let sv = StateVars::bind(&mut g, &s);
        let f = sv.feat(&mut g);
        let r = ac.reward_g(&mut g, &model, f, &cond).unwrap();
        let lat = model.object_extract(&s, ObjectId::Object).unwrap();
        let Conditioning::Lcp(goal) = &cond else { unreachable!() };
        for row in 0..3 {
            let (a, b) = (lat.row_slice(row), goal.row_slice(row));
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum();
            let nb: f64 = b.iter().map(|x| x * x).sum();
            let want = dot / ((na + COSINE_EPS) * (nb + COSINE_EPS)).sqrt();
            assert!((g.value(r).get(row, 0) - want).abs() < 1e-12);
        }

        let model = model_for(AgentMode::Pcp);
        let ac = ActorCritic::new(tiny_ac(), AgentMode::Pcp, &model, 0).unwrap();
        let cond = conditioning(AgentMode::Pcp, &model, &s);
        let mut g = Graph::new();
        let sv = StateVars::bind(&mut g, &s);
        let f = sv.feat(&mut g);
        let r = ac.reward_g(&mut g, &model, f, &cond).unwrap();
        let p = model.decode_object_position(&s).unwrap();
        let Conditioning::Pcp(goal) = &cond else { unreachable!() };
        for row in 0..3 {
            let (a, b) = (p.row_slice(row), goal.row_slice(row));
            let want = reward_pcp(Pose2::new(a[0], a[1]), Pose2::new(b[0], b[1]));
            assert!((g.value(r).get(row, 0) - want).abs() < 1e-6);
        }
    }

    #[test]
    fn visual_goal_latents_are_deterministic() {
        let model = tiny_model(Variant::ObjectCentric, false, 2).cast::<f64>();
        let obs = Observation { size: 3, image: vec![0.3; 27], vector: [0.0, 0.0, 0.1, 0.2, 0.1, 0.2] };
        let a = encode_visual_goal(&model, &[&obs, &obs], 4).unwrap();
        let b = encode_visual_goal(&model, &[&obs, &obs], 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[2, model.config.object_latent_dim]);
    }

    #[test]
    fn checkpoint_parts_round_trip() {
        let model = model_for(AgentMode::Pcp).cast::<f32>();
        let ac = ActorCritic::new(tiny_ac(), AgentMode::Pcp, &model, 6).unwrap();
        let mut ck = model.to_checkpoint();
        ac.to_checkpoint_parts(&mut ck);
        let mut fresh = ActorCritic::new(tiny_ac(), AgentMode::Pcp, &model, 7).unwrap();
        assert_ne!(fresh.policy_store.iter().next().unwrap().1.value, ac.policy_store.iter().next().unwrap().1.value);
        fresh.load_checkpoint_parts(&ck).unwrap();
        for (x, y) in [(&fresh.policy_store, &ac.policy_store), (&fresh.value_store, &ac.value_store), (&fresh.target_store, &ac.target_store)] {
            for ((_, p), (_, q)) in x.iter().zip(y.iter()) {
                assert_eq!(p.value, q.value);
            }
        }
        let _ = f32::lit(0.0);
    }

    proptest::proptest! {
        #[test]
        fn rewards_stay_in_range(
            a in proptest::collection::vec(-5.0f64..5.0, 4),
            b in proptest::collection::vec(-5.0f64..5.0, 4),
            p in (-1.0f64..1.0, -1.0f64..1.0),
            q in (-1.0f64..1.0, -1.0f64..1.0),
        ) {
            if let Ok(c) = reward_lcp(&a, &b) {
                proptest::prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
            }
            let r = reward_pcp(Pose2::new(p.0, p.1), Pose2::new(q.0, q.1));
            proptest::prop_assert!(r <= 0.0);
            proptest::prop_assert!((r + (p.0 - q.0).hypot(p.1 - q.1)).abs() < 1e-12);
        }

        #[test]
        fn lambda_returns_are_linear_in_rewards(
            r in proptest::collection::vec(-2.0f64..2.0, 1..8),
            shift in -1.0f64..1.0,
            gamma in 0.0f64..1.0,
            lambda in 0.0f64..1.0,
        ) {
            let v = vec![0.0; r.len()];
            let base = lambda_returns(&r, &v, gamma, lambda).unwrap();
            let shifted: Vec<f64> = r.iter().map(|x| x + shift).collect();
            let out = lambda_returns(&shifted, &v, gamma, lambda).unwrap();
            // with zero values every return is a discounted reward sum
            for t in 0..r.len() {
                let extra: f64 = (0..r.len() - t).map(|i| shift * (gamma * lambda).powi(i as i32)).sum();
                proptest::prop_assert!((out[t] - base[t] - extra).abs() < 1e-9);
            }
        }
    }
}
