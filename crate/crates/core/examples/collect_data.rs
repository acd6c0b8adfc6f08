//! Collects an offline dataset, saves it and reloads it.
//!
//! cargo run --release --example collect_data -- [steps] [out_dir]

use wmlab::envsim::{EnvConfig, Task};
use wmlab::harness::{collect_dataset, Explorer, ReplayDataset};

fn main() -> wmlab::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20_000);
    let out = args.get(2).cloned().unwrap_or_else(|| "cube_dataset".into());

    let cfg = EnvConfig { task: Task::CubeMove2D, ..Default::default() };
    for explorer in [Explorer::Random, Explorer::Scripted] {
        let data = collect_dataset(&cfg, explorer, steps, 0)?;
        println!("{explorer:?}: {} episodes, object coverage {:.2}", data.episodes.len(), data.object_coverage());
    }

    let data = collect_dataset(&cfg, Explorer::Scripted, steps, 0)?;
    data.save(&out)?;
    let back = ReplayDataset::load(&out)?;
    assert_eq!(back.hash(), data.hash());
    println!("saved {} steps to {out}, sha256 {}", back.steps(), back.hash());
    Ok(())
}
