//! A miniature method comparison: every agent type on both tasks, printed
//! as a mean ± standard error table.
//!
//! cargo run --release --example suite -- [steps] [seeds] [out_dir]

use wmlab::harness::experiments::{run_suite, SuiteConfig};
use wmlab::harness::TrainConfig;

fn main() -> wmlab::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let seeds: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2);
    let out = args.get(3).map(std::path::PathBuf::from);

    let mut base = TrainConfig::new(0);
    base.train_steps = steps;
    base.eval_every = steps;
    base.data.steps = 5_000;
    base.model.hidden_dim = 64;
    base.actor_critic.hidden_dim = 64;
    base.actor_critic.starts = 32;
    base.eval.n_goals = 36;

    let report = run_suite(&SuiteConfig::standard(base, seeds), 0, out.as_deref())?;
    print!("{:<12}", "task");
    for c in &report.columns {
        print!("{c:>18}");
    }
    println!();
    for row in &report.rows {
        print!("{:<12}", row.task);
        for cell in &row.cells {
            print!("{:>18}", format!("{:.3} ± {:.3}", cell.mean, cell.se));
        }
        println!();
    }
    Ok(())
}
