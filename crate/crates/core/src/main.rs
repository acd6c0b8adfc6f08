use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wmlab::harness::experiments::{run_ablation_goal_scale, run_ablation_target_size, run_seeds, run_suite, SuiteConfig};
use wmlab::harness::metrics::{write_csv, write_json};
use wmlab::harness::{collect_dataset, evaluate_grid, grid_rows, train_offline, ReplayDataset, TrainConfig};

#[derive(Parser)]
#[command(name = "wmlab", version, about = "Offline world-model agents for object positioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Collect an offline dataset with the configured explorer.
    Collect(Common),
    /// Train a world model and actor-critic offline.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train on a saved dataset instead of collecting one from the seed.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the goal grid.
    EvalGrid {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Sweep the rendered target diameter with the unconditioned agent.
    AblateTargetSize {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,2,5,9")]
        sizes: Vec<usize>,
        /// Number of run seeds, counting up from --seed.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
    /// Sweep the goal-vector loss coefficient with the unconditioned agent.
    AblateGoalScale {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,10,100")]
        scales: Vec<f64>,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
    /// Run the method comparison table from a suite configuration.
    Suite(Common),
}

fn train_config(c: &Common) -> wmlab::Result<TrainConfig> {
    let mut cfg = TrainConfig::load(&c.config)?;
    cfg.seed = c.seed;
    Ok(cfg)
}

fn create(out: &Path) -> wmlab::Result<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

fn run(cli: Cli) -> wmlab::Result<()> {
    match cli.command {
        Command::Collect(c) => {
            let cfg = train_config(&c)?;
            let data = collect_dataset(&cfg.env, cfg.data.explorer, cfg.data.steps, c.seed)?;
            data.save(&c.out)?;
            println!("collected {} steps in {} episodes, hash {}", data.steps(), data.episodes.len(), data.hash());
        }
        Command::Train { common: c, dataset } => {
            let cfg = train_config(&c)?;
            let data = match dataset {
                Some(dir) => ReplayDataset::load(dir)?,
                None => collect_dataset(&cfg.env, cfg.data.explorer, cfg.data.steps, c.seed)?,
            };
            let out = train_offline(&data, &cfg, Some(&c.out))?;
            println!(
                "mean score {:.4} ± {:.4}, success {:.3}",
                out.summary.mean_score, out.summary.score_se, out.summary.success_rate
            );
        }
        Command::EvalGrid { common: c, checkpoint } => {
            let cfg = train_config(&c)?;
            let e = &cfg.eval;
            let grid = evaluate_grid(&checkpoint, &cfg.env, e.n_goals, e.episodes_per_goal, e.goal_kind, c.seed)?;
            create(&c.out)?;
            write_json(c.out.join("grid.json"), &grid)?;
            write_csv(c.out.join("grid.csv"), &grid_rows(&grid))?;
            println!("mean score {:.4} ± {:.4}, success {:.3}", grid.mean_score, grid.score_se, grid.success_rate);
        }
        Command::AblateTargetSize { common: c, sizes, seeds } => {
            let cfg = train_config(&c)?;
            let report = run_ablation_target_size(&cfg, &sizes, &run_seeds(c.seed, seeds), Some(&c.out))?;
            for p in &report.points {
                println!("target_px {:>3}: goal error {:.4}, success {:.3}", p.setting, p.goal_recon_error, p.success_rate);
            }
        }
        Command::AblateGoalScale { common: c, scales, seeds } => {
            let cfg = train_config(&c)?;
            let report = run_ablation_goal_scale(&cfg, &scales, &run_seeds(c.seed, seeds), Some(&c.out))?;
            for p in &report.points {
                println!("scale {:>6}: goal error {:.4}, score {:.4}", p.setting, p.goal_recon_error, p.mean_score);
            }
            println!("spearman(error, score) {:.3}", report.spearman_error_score);
        }
        Command::Suite(c) => {
            let suite = SuiteConfig::from_toml(&std::fs::read_to_string(&c.config)?)?;
            let report = run_suite(&suite, c.seed, Some(&c.out))?;
            for rec in report.csv_records() {
                println!("{}", rec.join("  "));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("wmlab: error: {e}");
            ExitCode::FAILURE
        }
    }
}
