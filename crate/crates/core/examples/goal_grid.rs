//! Goal-grid evaluation with an ASCII heatmap. Without arguments it scores
//! the scripted oracle and a stationary agent; with a checkpoint path it
//! scores the trained agent on coordinate goals.
//!
//! cargo run --release --example goal_grid -- [checkpoint.bin]

use wmlab::envsim::EnvConfig;
use wmlab::harness::{evaluate_agent, evaluate_bundle, goal_grid, AgentBundle, GoalKind, GridResult, OracleAgent, StationaryAgent};

fn heatmap(name: &str, res: &GridResult) {
    const SHADES: &[u8] = b" .:-=+*#%@";
    let k = (res.cells.len() as f64).sqrt() as usize;
    println!("{name}: mean {:.3} ± {:.3}, success {:.2}", res.mean_score, res.score_se, res.success_rate);
    for row in res.cells.chunks(k) {
        let line: String = row
            .iter()
            .map(|c| SHADES[((c.mean_score * (SHADES.len() - 1) as f64).round() as usize).min(SHADES.len() - 1)] as char)
            .flat_map(|c| [c, c])
            .collect();
        println!("  |{line}|");
    }
}

fn main() -> wmlab::Result<()> {
    match std::env::args().nth(1) {
        Some(path) => {
            let bundle = AgentBundle::load(&path)?;
            let res = evaluate_bundle(&bundle, &bundle.env, 100, 1, GoalKind::Coords, 0)?;
            heatmap(bundle.mode().name(), &res);
        }
        None => {
            let env = EnvConfig::default();
            let goals = goal_grid(&env, 100)?;
            heatmap("oracle", &evaluate_agent(&mut OracleAgent, &env, &goals, 1, GoalKind::Coords, 0)?);
            heatmap("stationary", &evaluate_agent(&mut StationaryAgent, &env, &goals, 1, GoalKind::Coords, 0)?);
        }
    }
    Ok(())
}
