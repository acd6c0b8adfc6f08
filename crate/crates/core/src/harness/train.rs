//! The offline training loop.

use std::path::Path;

use diffcore::{adam_step, Graph, OptimState, SampleMode};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::behavior::{AcStats, ActorCritic};
use crate::harness::config::{GoalKind, TrainConfig};
use crate::harness::dataset::ReplayDataset;
use crate::harness::eval::{evaluate_agent, goal_grid, AgentBundle, GridResult, LearnedAgent};
use crate::harness::metrics::{write_csv, write_json, write_metrics, MetricsRow};
use crate::worldmodel::{LossBreakdown, SeqBatch, WorldModel};
use crate::{Error, Result};

/// Final numbers of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub task: String,
    pub mode: String,
    pub variant: String,
    pub seed: u64,
    pub train_steps: usize,
    pub dataset_seed: u64,
    pub dataset_steps: usize,
    pub dataset_hash: String,
    pub goal_kind: GoalKind,
    pub n_goals: usize,
    pub mean_score: f64,
    pub score_se: f64,
    pub success_rate: f64,
    pub mean_final_distance: f64,
    pub goal_recon_error: f64,
    pub object_recon_error: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub bundle: AgentBundle,
    pub metrics: Vec<MetricsRow>,
    pub eval: GridResult,
    pub summary: RunSummary,
}

/// Fixed dataset windows for measuring reconstruction errors.
struct Probe {
    batch: SeqBatch<f32>,
}

impl Probe {
    fn new(dataset: &ReplayDataset, windows: usize, length: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self { batch: dataset.sample_batch(windows.max(1), length, &mut rng)? })
    }

    /// `(goal error, placed-entity error)`, mean L2 over every probe row.
    fn errors(&self, model: &WorldModel<f32>, seed: u64) -> Result<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let states = model.observe(&self.batch, SampleMode::Mode, &mut rng)?;
        let goal = model.decode_goal(&states);
        let obj = model.decode_object_position(&states)?;
        let v = self.batch.vectors.data();
        let rows = states.rows();
        let (mut eg, mut eo) = (0.0, 0.0);
        for r in 0..rows {
            let (g, o) = (goal.row_slice(r), obj.row_slice(r));
            let t = &v[r * 6..(r + 1) * 6];
            eg += ((g[0] - t[4]) as f64).hypot((g[1] - t[5]) as f64);
            eo += ((o[0] - t[2]) as f64).hypot((o[1] - t[3]) as f64);
        }
        Ok((eg / rows as f64, eo / rows as f64))
    }
}

#[derive(Default)]
struct StatsAccumulator {
    sum: AcStats,
    n: usize,
}

impl StatsAccumulator {
    fn push(&mut self, s: &AcStats) {
        self.sum.entropy += s.entropy;
        self.sum.value_loss += s.value_loss;
        self.sum.mean_reward += s.mean_reward;
        self.sum.mean_return += s.mean_return;
        self.sum.mean_value += s.mean_value;
        self.sum.actor_grad_norm += s.actor_grad_norm;
        self.n += 1;
    }

    fn take(&mut self) -> AcStats {
        let n = self.n.max(1) as f64;
        let s = self.sum;
        *self = Self::default();
        AcStats {
            entropy: s.entropy / n,
            value_loss: s.value_loss / n,
            mean_reward: s.mean_reward / n,
            mean_return: s.mean_return / n,
            mean_value: s.mean_value / n,
            actor_grad_norm: s.actor_grad_norm / n,
            ..Default::default()
        }
    }
}

fn write_diagnostics(out: Option<&Path>, step: usize, detail: &str, loss: Option<&LossBreakdown>) {
    if let Some(dir) = out {
        let diag = serde_json::json!({ "step": step, "detail": detail, "loss": loss });
        // best effort: the abort error is what the caller sees
        let _ = std::fs::create_dir_all(dir);
        let _ = write_json(dir.join("diagnostics.json"), &diag);
    }
}

/// Trains a world model and actor-critic on `dataset`. Each step applies one
/// world-model update on a sampled batch, then one actor-critic update from
/// that batch's posterior states. A metrics row is produced every
/// `eval_every` steps. With `out` set, writes `metrics.csv`,
/// `checkpoint.bin`, `grid.json`, `grid.csv` and `summary.json` there.
pub fn train_offline(dataset: &ReplayDataset, config: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    let cfg = config.resolved()?;
    if dataset.env != cfg.env {
        return Err(Error::Config("dataset was collected under a different env config".into()));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = WorldModel::<f32>::new(cfg.model.clone(), seeds.random())?;
    let mut ac = ActorCritic::new(cfg.actor_critic.clone(), cfg.mode, &model, seeds.random())?;
    let mut opt = OptimState::new(&model.store, cfg.optim.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.random());
    let probe = Probe::new(dataset, cfg.eval.probe_windows, cfg.seq_len, seeds.random())?;
    let probe_seed: u64 = seeds.random();
    let eval_seed: u64 = seeds.random();
    let periodic_goals = goal_grid(&cfg.env, cfg.eval.periodic_goals)?;

    let mut metrics = Vec::with_capacity(cfg.train_steps / cfg.eval_every);
    let mut acc = StatsAccumulator::default();
    let mut last_loss = LossBreakdown::default();
    for step in 0..cfg.train_steps {
        let batch = dataset.sample_batch::<f32>(cfg.batch_size, cfg.seq_len, &mut rng)?;
        let mut g = Graph::new();
        let vars = model.loss_g(&mut g, &batch, &cfg.scales, SampleMode::Sample, &mut rng)?;
        let loss = vars.breakdown(&g);
        if !loss.is_finite() {
            write_diagnostics(out, step, "non-finite world-model loss", Some(&loss));
            return Err(Error::Diverged { step, detail: format!("world-model loss {loss:?}") });
        }
        let grads = g.backward(vars.total)?;
        model.store.zero_grad();
        grads.accumulate_into(&mut model.store);
        if let Err(e) = adam_step(&mut model.store, &mut opt) {
            write_diagnostics(out, step, &e.to_string(), Some(&loss));
            return Err(Error::Diverged { step, detail: e.to_string() });
        }
        last_loss = loss;

        if step >= cfg.warmup_steps {
            let posterior = vars.posterior.read(&g);
            let k = cfg.actor_critic.starts.min(posterior.rows());
            let picks = sample(&mut rng, posterior.rows(), k).into_vec();
            let starts = posterior.select_rows(&picks);
            let cond = ac.sample_conditioning(&model, &cfg.env, &starts, &mut rng)?;
            match ac.update(&model, &starts, &cond, &mut rng) {
                Ok((stats, _)) => acc.push(&stats),
                Err(e) => {
                    write_diagnostics(out, step, &e.to_string(), Some(&loss));
                    return Err(Error::Diverged { step, detail: e.to_string() });
                }
            }
        }

        if (step + 1) % cfg.eval_every == 0 {
            let bundle = AgentBundle { env: cfg.env.clone(), model: model.clone(), behavior: ac.clone() };
            let (goal_err, obj_err) = probe.errors(&model, probe_seed)?;
            let mut agent = LearnedAgent::new(&bundle, cfg.eval.goal_kind, eval_seed);
            let grid = evaluate_agent(&mut agent, &cfg.env, &periodic_goals, 1, cfg.eval.goal_kind, eval_seed)?;
            let s = acc.take();
            metrics.push(MetricsRow {
                step: step + 1,
                loss_total: loss.total,
                loss_dyn: loss.dyn_,
                loss_image: loss.image,
                loss_vector_proprio: loss.vector_proprio,
                loss_vector_goal: loss.vector_goal,
                loss_obj_mask: loss.obj_mask,
                loss_obj_rgb: loss.obj_rgb,
                loss_obj_pos: loss.obj_pos,
                loss_pos_encoder: loss.pos_encoder,
                loss_reward: loss.reward.unwrap_or(0.0),
                goal_recon_error: goal_err,
                object_recon_error: obj_err,
                eval_score: grid.mean_score,
                eval_success: grid.success_rate,
                value_mean: mean(&grid.value_trace),
                policy_entropy: s.entropy,
                value_loss: s.value_loss,
                imagined_reward: s.mean_reward,
                imagined_return: s.mean_return,
                actor_grad_norm: s.actor_grad_norm,
            });
            if let Some(dir) = out {
                write_metrics(dir.join("metrics.csv"), &metrics)?;
            }
        }
    }

    let bundle = AgentBundle { env: cfg.env.clone(), model, behavior: ac };
    let goals = goal_grid(&cfg.env, cfg.eval.n_goals)?;
    let mut agent = LearnedAgent::new(&bundle, cfg.eval.goal_kind, eval_seed);
    let eval = evaluate_agent(&mut agent, &cfg.env, &goals, cfg.eval.episodes_per_goal, cfg.eval.goal_kind, eval_seed)?;
    let (goal_recon_error, object_recon_error) = probe.errors(&bundle.model, probe_seed)?;
    let summary = RunSummary {
        task: cfg.env.task.name().into(),
        mode: cfg.mode.name().into(),
        variant: format!("{:?}", cfg.model.variant).to_lowercase(),
        seed: cfg.seed,
        train_steps: cfg.train_steps,
        dataset_seed: dataset.seed,
        dataset_steps: dataset.steps(),
        dataset_hash: dataset.hash(),
        goal_kind: cfg.eval.goal_kind,
        n_goals: cfg.eval.n_goals,
        mean_score: eval.mean_score,
        score_se: eval.score_se,
        success_rate: eval.success_rate,
        mean_final_distance: eval.mean_final_distance,
        goal_recon_error,
        object_recon_error,
        final_loss: last_loss.total,
    };
    if let Some(dir) = out {
        write_metrics(dir.join("metrics.csv"), &metrics)?;
        bundle.save(dir.join("checkpoint.bin"))?;
        write_json(dir.join("grid.json"), &eval)?;
        write_csv(dir.join("grid.csv"), &grid_rows(&eval))?;
        write_json(dir.join("summary.json"), &summary)?;
        std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    }
    Ok(TrainOutcome { bundle, metrics, eval, summary })
}

#[derive(Serialize)]
/// One `grid.csv` row.
pub struct GridRow {
    pub x: f64,
    pub y: f64,
    pub mean_score: f64,
    pub success_rate: f64,
}

pub fn grid_rows(grid: &GridResult) -> Vec<GridRow> {
    grid.cells
        .iter()
        .map(|c| GridRow { x: c.x, y: c.y, mean_score: c.mean_score, success_rate: c.success_rate })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}
