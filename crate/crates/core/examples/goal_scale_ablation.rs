//! Trains the unconditioned agent under several goal-loss coefficients on
//! one shared dataset and relates goal reconstruction to task score.
//!
//! cargo run --release --example goal_scale_ablation -- [steps] [out_dir]

use wmlab::behavior::AgentMode;
use wmlab::harness::experiments::run_ablation_goal_scale;
use wmlab::harness::TrainConfig;

fn main() -> wmlab::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let out = args.get(2).map(std::path::PathBuf::from);

    let mut base = TrainConfig::new(0);
    base.mode = AgentMode::Baseline;
    base.train_steps = steps;
    base.eval_every = steps;
    base.data.steps = 10_000;
    base.model.hidden_dim = 64;
    base.actor_critic.hidden_dim = 64;
    base.actor_critic.starts = 32;

    let report = run_ablation_goal_scale(&base, &[1.0, 10.0, 100.0], &[0, 1], out.as_deref())?;
    for p in &report.points {
        println!(
            "scale {:>5}: goal error {:.3} ± {:.3}, score {:.3} ± {:.3}",
            p.setting, p.goal_recon_error, p.goal_recon_error_se, p.mean_score, p.mean_score_se
        );
    }
    println!("spearman(goal error, score) = {:.2}", report.spearman_error_score);
    Ok(())
}
