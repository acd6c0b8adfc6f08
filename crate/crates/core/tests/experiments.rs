mod common;

use common::tiny_config;
use wmlab::behavior::AgentMode;
use wmlab::envsim::Task;
use wmlab::harness::eval::mean_and_se;
use wmlab::harness::experiments::{run_ablation_goal_scale, run_ablation_target_size, run_suite, SuiteConfig, SuiteReport};

#[test]
fn suite_cells_recompute_from_per_seed_scores_and_rerun_identically() {
    let mut suite = SuiteConfig::standard(tiny_config(0, Task::Reacher2D, AgentMode::Pcp), 2);
    suite.base.train_steps = 6;
    suite.base.eval_every = 3;
    let dir = tempfile::tempdir().unwrap();
    let a = run_suite(&suite, 10, Some(dir.path())).unwrap();
    assert_eq!(a.columns, ["baseline", "pcp", "lcp", "lcp-visual", "lexa-cosine"]);
    assert_eq!(a.seeds, [10, 11]);
    for row in &a.rows {
        for cell in &row.cells {
            assert_eq!(cell.scores.len(), 2);
            let (m, se) = mean_and_se(&cell.scores);
            assert_eq!((cell.mean, cell.se), (m, se));
        }
    }
    for task in ["reacher2d", "cubemove2d"] {
        for entry in ["baseline", "pcp", "lcp", "lexa-cosine"] {
            for seed in [10, 11] {
                assert!(dir.path().join(task).join(entry).join(format!("seed_{seed}")).join("summary.json").is_file());
            }
        }
        assert!(dir.path().join(task).join("lcp/seed_10/grid_visual.json").is_file());
    }
    let stored: SuiteReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join("suite.json")).unwrap()).unwrap();
    assert_eq!(stored, a);
    let csv = std::fs::read_to_string(dir.path().join("suite.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let b = run_suite(&suite, 10, None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn ablations_write_reports_and_share_data_where_stated() {
    let mut base = tiny_config(0, Task::Reacher2D, AgentMode::Baseline);
    base.train_steps = 6;
    base.eval_every = 3;
    let dir = tempfile::tempdir().unwrap();
    let sizes = run_ablation_target_size(&base, &[0, 3], &[1, 2], Some(dir.path())).unwrap();
    assert_eq!(sizes.runs.len(), 4);
    assert_eq!(sizes.points.len(), 2);
    assert_ne!(sizes.runs[0].dataset_hash, sizes.runs[2].dataset_hash);
    assert!(dir.path().join("target_px_3/seed_2/metrics.csv").is_file());
    assert!(dir.path().join("target_size.json").is_file() && dir.path().join("target_size.csv").is_file());
    let p = sizes.point(3.0).unwrap();
    let (m, _) = mean_and_se(&sizes.runs.iter().filter(|r| r.setting == 3.0).map(|r| r.mean_score).collect::<Vec<_>>());
    assert_eq!(p.mean_score, m);

    let scales = run_ablation_goal_scale(&base, &[1.0, 100.0], &[1], Some(dir.path())).unwrap();
    assert_eq!(scales.runs.len(), 2);
    assert_eq!(scales.runs[0].dataset_hash, scales.runs[1].dataset_hash);
    assert!(dir.path().join("goal_scale_100/seed_1/summary.json").is_file());
    assert!(dir.path().join("goal_scale.csv").is_file());

    assert!(run_ablation_target_size(&base, &[3, 3], &[1], None).is_err());
    assert!(run_ablation_goal_scale(&base, &[-1.0], &[1], None).is_err());
}
