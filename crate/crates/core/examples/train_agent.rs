//! Collects a dataset and trains one agent on it, printing the metrics rows.
//!
//! cargo run --release --example train_agent -- [baseline|pcp|lcp|lexa-cosine] [steps] [reacher|cube] [out_dir]

use std::path::PathBuf;
use std::time::Instant;

use wmlab::behavior::AgentMode;
use wmlab::envsim::Task;
use wmlab::harness::{collect_dataset, train_offline, GoalKind, TrainConfig};
use wmlab::worldmodel::Variant;

fn main() -> wmlab::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mode = match args.get(1).map(String::as_str).unwrap_or("pcp") {
        "baseline" => AgentMode::Baseline,
        "lcp" => AgentMode::Lcp,
        "lexa-cosine" => AgentMode::LexaCosine,
        _ => AgentMode::Pcp,
    };
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let task = if args.get(3).map(String::as_str) == Some("cube") { Task::CubeMove2D } else { Task::Reacher2D };
    let out = args.get(4).map(PathBuf::from);

    let mut cfg = TrainConfig::new(7);
    cfg.mode = mode;
    cfg.env.task = task;
    cfg.train_steps = steps;
    cfg.eval_every = (steps / 5).max(1);
    cfg.data.steps = 20_000;
    cfg.model.hidden_dim = 64;
    cfg.actor_critic.hidden_dim = 64;
    cfg.actor_critic.starts = 32;
    if mode == AgentMode::Lcp {
        cfg.model.variant = Variant::ObjectCentric;
    }
    if mode == AgentMode::LexaCosine {
        cfg.eval.goal_kind = GoalKind::Visual;
    }

    let data = collect_dataset(&cfg.env, cfg.data.explorer, cfg.data.steps, cfg.seed)?;
    let t = Instant::now();
    let run = train_offline(&data, &cfg, out.as_deref())?;
    println!("trained {steps} steps in {:.1}s", t.elapsed().as_secs_f64());
    for r in &run.metrics {
        println!(
            "step {:>5}  loss {:>7.3}  goal err {:.3}  object err {:.3}  score {:.3}  success {:.2}  entropy {:+.2}",
            r.step, r.loss_total, r.goal_recon_error, r.object_recon_error, r.eval_score, r.eval_success, r.policy_entropy
        );
    }
    println!("{} goals: score {:.3} ± {:.3}, success {:.2}", cfg.eval.n_goals, run.eval.mean_score, run.eval.score_se, run.eval.success_rate);
    Ok(())
}
