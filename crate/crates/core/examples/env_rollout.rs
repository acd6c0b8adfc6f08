//! Drives the cube with a hand-written controller and saves the frames.
//!
//! cargo run --release --example env_rollout -- [out_dir]

use std::path::PathBuf;

use wmlab::envsim::{normalized_score, Env, EnvConfig, GoalSpec, Pose2, Task, CONTACT_RADIUS};

fn main() -> wmlab::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "rollout_frames".into()));
    std::fs::create_dir_all(&out)?;
    let cfg = EnvConfig { task: Task::CubeMove2D, target_px: 5, ..Default::default() };
    let goal = Pose2::new(0.3, 0.25);
    let (mut env, obs, _) = Env::reset(&cfg, 0, Some(&GoalSpec::Coords(goal)))?;
    obs.write_png(out.join("frame_00.png"))?;

    let mut t = 0;
    while !env.is_done() {
        let (agent, object) = (env.agent(), env.object());
        // approach the cube, then push it along the goal direction
        let aim = if agent.dist(object) < 0.5 * CONTACT_RADIUS { goal } else { object };
        let (dx, dy) = (aim.x - agent.x, aim.y - agent.y);
        let scale = dx.hypot(dy).max(cfg.action_scale);
        let res = env.step([dx / scale, dy / scale])?;
        t += 1;
        if t % 5 == 0 {
            res.observation.write_png(out.join(format!("frame_{t:02}.png")))?;
            println!("t={t:>2}  cube ({:+.3}, {:+.3})  reward {:+.4}", res.info.object.x, res.info.object.y, res.reward);
        }
    }
    println!("final score {:.3}, frames in {}", normalized_score(env.object(), goal)?, out.display());
    Ok(())
}
