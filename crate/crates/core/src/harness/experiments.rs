//! Runners for the target-size and goal-scale ablations and the method
//! comparison suite.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::behavior::AgentMode;
use crate::envsim::Task;
use crate::harness::config::{GoalKind, TrainConfig};
use crate::harness::dataset::{collect_dataset, ReplayDataset};
use crate::harness::eval::{evaluate_bundle, mean_and_se};
use crate::harness::metrics::{spearman, write_csv, write_json};
use crate::harness::train::{grid_rows, train_offline, TrainOutcome};
use crate::worldmodel::Variant;
use crate::{Error, Result};

/// Run seeds `base, base + 1, …`.
pub fn run_seeds(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base.wrapping_add(i)).collect()
}

fn collect_for(cfg: &TrainConfig, seed: u64) -> Result<ReplayDataset> {
    collect_dataset(&cfg.env, cfg.data.explorer, cfg.data.steps, seed)
}

fn sub(out: Option<&Path>, parts: &[String]) -> Option<PathBuf> {
    out.map(|o| parts.iter().fold(o.to_path_buf(), |p, s| p.join(s)))
}

/// One trained run of an ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub setting: f64,
    pub seed: u64,
    pub dataset_hash: String,
    pub goal_recon_error: f64,
    pub object_recon_error: f64,
    pub mean_score: f64,
    pub success_rate: f64,
    /// Mean value prediction per evaluation step.
    pub value_trace: Vec<f64>,
}

/// Aggregates over seeds for one setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub setting: f64,
    pub goal_recon_error: f64,
    pub goal_recon_error_se: f64,
    pub mean_score: f64,
    pub mean_score_se: f64,
    pub success_rate: f64,
    pub success_rate_se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// `target_px` or `vector_goal_scale`.
    pub parameter: String,
    pub runs: Vec<AblationRun>,
    pub points: Vec<AblationPoint>,
    /// Spearman correlation between goal reconstruction error and score over
    /// all runs.
    pub spearman_error_score: f64,
}

impl AblationReport {
    fn build(parameter: &str, runs: Vec<AblationRun>, settings: &[f64]) -> Self {
        let points = settings
            .iter()
            .map(|&s| {
                let of = |f: fn(&AblationRun) -> f64| {
                    let v: Vec<f64> = runs.iter().filter(|r| r.setting == s).map(f).collect();
                    mean_and_se(&v)
                };
                let (e, e_se) = of(|r| r.goal_recon_error);
                let (m, m_se) = of(|r| r.mean_score);
                let (su, su_se) = of(|r| r.success_rate);
                AblationPoint {
                    setting: s,
                    goal_recon_error: e,
                    goal_recon_error_se: e_se,
                    mean_score: m,
                    mean_score_se: m_se,
                    success_rate: su,
                    success_rate_se: su_se,
                }
            })
            .collect();
        let errs: Vec<f64> = runs.iter().map(|r| r.goal_recon_error).collect();
        let scores: Vec<f64> = runs.iter().map(|r| r.mean_score).collect();
        Self { parameter: parameter.into(), spearman_error_score: spearman(&errs, &scores), runs, points }
    }

    pub fn point(&self, setting: f64) -> Option<&AblationPoint> {
        self.points.iter().find(|p| p.setting == setting)
    }

    fn write(&self, out: Option<&Path>, stem: &str) -> Result<()> {
        if let Some(dir) = out {
            std::fs::create_dir_all(dir)?;
            write_json(dir.join(format!("{stem}.json")), self)?;
            write_csv(dir.join(format!("{stem}.csv")), &self.points)?;
        }
        Ok(())
    }
}

fn ablation_run(setting: f64, seed: u64, dataset: &ReplayDataset, o: &TrainOutcome) -> AblationRun {
    AblationRun {
        setting,
        seed,
        dataset_hash: dataset.hash(),
        goal_recon_error: o.summary.goal_recon_error,
        object_recon_error: o.summary.object_recon_error,
        mean_score: o.summary.mean_score,
        success_rate: o.summary.success_rate,
        value_trace: o.eval.value_trace.clone(),
    }
}

fn check_distinct<T: PartialEq + std::fmt::Debug>(values: &[T], what: &str) -> Result<()> {
    for (i, v) in values.iter().enumerate() {
        if values[..i].contains(v) {
            return Err(Error::Config(format!("{what} lists {v:?} twice")));
        }
    }
    if values.is_empty() {
        return Err(Error::Config(format!("{what} is empty")));
    }
    Ok(())
}

/// Trains the unconditioned flat agent once per target size and seed, each
/// on freshly collected data (the target is rendered, so the data differs).
/// Runs land in `target_px_{size}/seed_{seed}`.
pub fn run_ablation_target_size(base: &TrainConfig, sizes: &[usize], seeds: &[u64], out: Option<&Path>) -> Result<AblationReport> {
    check_distinct(sizes, "sizes")?;
    let mut runs = Vec::new();
    for &size in sizes {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.mode = AgentMode::Baseline;
            cfg.model.variant = Variant::Flat;
            cfg.env.target_px = size;
            let data = collect_for(&cfg, seed)?;
            let dir = sub(out, &[format!("target_px_{size}"), format!("seed_{seed}")]);
            let o = train_offline(&data, &cfg, dir.as_deref())?;
            runs.push(ablation_run(size as f64, seed, &data, &o));
        }
    }
    let settings: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
    let report = AblationReport::build("target_px", runs, &settings);
    report.write(out, "target_size")?;
    Ok(report)
}

/// Trains the unconditioned flat agent once per goal-loss scale and seed.
/// All scales of one seed share a single dataset without a visual target.
/// Runs land in `goal_scale_{scale}/seed_{seed}`.
pub fn run_ablation_goal_scale(base: &TrainConfig, scales: &[f64], seeds: &[u64], out: Option<&Path>) -> Result<AblationReport> {
    check_distinct(scales, "scales")?;
    if scales.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
        return Err(Error::Config("goal scales must be finite and non-negative".into()));
    }
    let mut runs = Vec::new();
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.mode = AgentMode::Baseline;
        cfg.model.variant = Variant::Flat;
        cfg.env.target_px = 0;
        let data = collect_for(&cfg, seed)?;
        for &scale in scales {
            let mut c = cfg.clone();
            c.scales.vector_goal = scale;
            let dir = sub(out, &[format!("goal_scale_{scale}"), format!("seed_{seed}")]);
            let o = train_offline(&data, &c, dir.as_deref())?;
            runs.push(ablation_run(scale, seed, &data, &o));
        }
    }
    let report = AblationReport::build("vector_goal_scale", runs, scales);
    report.write(out, "goal_scale")?;
    Ok(report)
}

/// One trained agent type of the comparison suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteEntry {
    pub name: String,
    pub mode: AgentMode,
    pub variant: Variant,
    /// Each goal kind becomes one column; visual columns get a `-visual`
    /// suffix unless the entry only supports visual goals.
    #[serde(default = "default_kinds")]
    pub goal_kinds: Vec<GoalKind>,
}

fn default_kinds() -> Vec<GoalKind> {
    vec![GoalKind::Coords]
}

impl SuiteEntry {
    fn column(&self, kind: GoalKind) -> String {
        match kind {
            GoalKind::Visual if self.goal_kinds.contains(&GoalKind::Coords) => format!("{}-visual", self.name),
            _ => self.name.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub base: TrainConfig,
    pub tasks: Vec<Task>,
    pub entries: Vec<SuiteEntry>,
    pub seeds: usize,
}

impl SuiteConfig {
    /// Baseline, PCP and LCP (coordinate and visual goals) plus the
    /// LEXA-cosine agent on visual goals.
    pub fn standard(base: TrainConfig, seeds: usize) -> Self {
        let e = |name: &str, mode, variant, kinds: &[GoalKind]| SuiteEntry { name: name.into(), mode, variant, goal_kinds: kinds.to_vec() };
        Self {
            base,
            tasks: vec![Task::Reacher2D, Task::CubeMove2D],
            entries: vec![
                e("baseline", AgentMode::Baseline, Variant::Flat, &[GoalKind::Coords]),
                e("pcp", AgentMode::Pcp, Variant::Flat, &[GoalKind::Coords]),
                e("lcp", AgentMode::Lcp, Variant::ObjectCentric, &[GoalKind::Coords, GoalKind::Visual]),
                e("lexa-cosine", AgentMode::LexaCosine, Variant::Flat, &[GoalKind::Visual]),
            ],
            seeds,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn columns(&self) -> Vec<String> {
        self.entries.iter().flat_map(|e| e.goal_kinds.iter().map(move |&k| e.column(k))).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteCell {
    pub mean: f64,
    /// Sample standard deviation over seeds divided by √seeds.
    pub se: f64,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub task: String,
    pub cells: Vec<SuiteCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub columns: Vec<String>,
    pub seeds: Vec<u64>,
    pub rows: Vec<SuiteRow>,
}

impl SuiteReport {
    pub fn cell(&self, task: Task, column: &str) -> Option<&SuiteCell> {
        let c = self.columns.iter().position(|c| c == column)?;
        self.rows.iter().find(|r| r.task == task.name()).map(|r| &r.cells[c])
    }

    /// `task, <col>_mean, <col>_se, …` records.
    pub fn csv_records(&self) -> Vec<Vec<String>> {
        let mut header = vec!["task".to_string()];
        for c in &self.columns {
            header.push(format!("{c}_mean"));
            header.push(format!("{c}_se"));
        }
        let mut out = vec![header];
        for r in &self.rows {
            let mut rec = vec![r.task.clone()];
            for cell in &r.cells {
                rec.push(format!("{}", cell.mean));
                rec.push(format!("{}", cell.se));
            }
            out.push(rec);
        }
        out
    }
}

/// Collect → train → evaluate for every task, entry and seed. Each
/// `(task, seed)` dataset is shared by all entries. Runs land in
/// `{task}/{entry}/seed_{seed}`; the table is written to `suite.json` and
/// `suite.csv`.
pub fn run_suite(suite: &SuiteConfig, base_seed: u64, out: Option<&Path>) -> Result<SuiteReport> {
    if suite.seeds == 0 || suite.tasks.is_empty() || suite.entries.is_empty() {
        return Err(Error::Config("suite needs tasks, entries and at least one seed".into()));
    }
    let names: Vec<&str> = suite.entries.iter().map(|e| e.name.as_str()).collect();
    check_distinct(&names, "suite entries")?;
    let seeds = run_seeds(base_seed, suite.seeds);
    let columns = suite.columns();
    let mut rows = Vec::new();
    for &task in &suite.tasks {
        let mut scores: Vec<Vec<f64>> = vec![Vec::new(); columns.len()];
        for &seed in &seeds {
            let mut base = suite.base.clone();
            base.env.task = task;
            base.seed = seed;
            let data = collect_for(&base, seed)?;
            let mut col = 0;
            for entry in &suite.entries {
                let mut cfg = base.clone();
                cfg.mode = entry.mode;
                cfg.model.variant = entry.variant;
                cfg.eval.goal_kind = entry.goal_kinds[0];
                let dir = sub(out, &[task.name().to_string(), entry.name.clone(), format!("seed_{seed}")]);
                let o = train_offline(&data, &cfg, dir.as_deref())?;
                scores[col].push(o.eval.mean_score);
                col += 1;
                for &kind in &entry.goal_kinds[1..] {
                    let grid = evaluate_bundle(&o.bundle, &cfg.env, cfg.eval.n_goals, cfg.eval.episodes_per_goal, kind, seed)?;
                    if let Some(d) = &dir {
                        let stem = format!("grid_{}", format!("{kind:?}").to_lowercase());
                        write_json(d.join(format!("{stem}.json")), &grid)?;
                        write_csv(d.join(format!("{stem}.csv")), &grid_rows(&grid))?;
                    }
                    scores[col].push(grid.mean_score);
                    col += 1;
                }
            }
        }
        let cells = scores
            .into_iter()
            .map(|s| {
                let (mean, se) = mean_and_se(&s);
                SuiteCell { mean, se, scores: s }
            })
            .collect();
        rows.push(SuiteRow { task: task.name().into(), cells });
    }
    let report = SuiteReport { columns, seeds, rows };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_json(dir.join("suite.json"), &report)?;
        let mut w = csv::Writer::from_path(dir.join("suite.csv"))?;
        for rec in report.csv_records() {
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    Ok(report)
}
