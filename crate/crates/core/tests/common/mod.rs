#![allow(dead_code)]

use wmlab::behavior::AgentMode;
use wmlab::envsim::Task;
use wmlab::harness::TrainConfig;
use wmlab::worldmodel::Variant;

/// A configuration small enough to train in well under a second.
pub fn tiny_config(seed: u64, task: Task, mode: AgentMode) -> TrainConfig {
    let mut c = TrainConfig::new(seed);
    c.mode = mode;
    c.env.task = task;
    c.env.image_size = 8;
    c.env.max_episode_steps = 10;
    c.model.variant = if mode == AgentMode::Lcp { Variant::ObjectCentric } else { Variant::Flat };
    c.model.deter_dim = 8;
    c.model.groups = 2;
    c.model.classes = 4;
    c.model.hidden_dim = 16;
    c.model.image_embed_dim = 8;
    c.model.vector_embed_dim = 8;
    c.model.object_latent_dim = 6;
    c.model.extractor_hidden = 12;
    c.model.pos_encoder_hidden = 12;
    c.actor_critic.hidden_dim = 16;
    c.actor_critic.horizon = 4;
    c.actor_critic.starts = 8;
    c.batch_size = 4;
    c.seq_len = 5;
    c.train_steps = 24;
    c.eval_every = 6;
    c.data.steps = 200;
    c.eval.n_goals = 4;
    c.eval.periodic_goals = 4;
    c.eval.probe_windows = 4;
    c
}
