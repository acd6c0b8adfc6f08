//! Deterministic top-down 2D object-positioning simulator.
//!
//! Two tasks share one renderer:
//! - `Reacher2D`: an arm anchored at the bottom edge; its end-effector tip is
//!   the entity to position.
//! - `CubeMove2D`: a disk-shaped agent drags a square object while the two
//!   are within contact range.
//!
//! The camera is orthographic and looks straight down at the workspace square
//! `[-e, e]²`, so pixel coordinates map to workspace coordinates through one
//! fixed affine transform.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_AGENT: u8 = 1;
pub const LABEL_OBJECT: u8 = 2;
pub const LABEL_TARGET: u8 = 3;
pub const NUM_LABELS: usize = 4;

/// Length of [`Observation::vector`]: proprioception, object position, goal.
pub const VECTOR_DIM: usize = 6;

/// Goals are never sampled inside this ball around the origin, where the
/// normalized score is undefined.
pub const GOAL_EXCLUSION_RADIUS: f64 = 0.05;

/// Agent–object distance below which the object follows the agent.
pub const CONTACT_RADIUS: f64 = 0.12;

const SUPERSAMPLE: usize = 4;
const OBJECT_HALF_SIDE_PX: f64 = 1.0;
const AGENT_RADIUS_PX: f64 = 1.5;
const ARM_HALF_WIDTH_PX: f64 = 0.5;

const COLOR_BACKGROUND: [f32; 3] = [0.15, 0.15, 0.15];
const COLOR_AGENT: [f32; 3] = [0.2, 0.4, 1.0];
const COLOR_OBJECT: [f32; 3] = [0.95, 0.25, 0.2];
const COLOR_TARGET: [f32; 3] = [0.15, 0.9, 0.2];

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
}

impl Pose2 {
    pub const ORIGIN: Pose2 = Pose2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, other: Pose2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    Reacher2D,
    CubeMove2D,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Reacher2D => "reacher2d",
            Task::CubeMove2D => "cubemove2d",
        }
    }
}

/// The `[env]` configuration section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub task: Task,
    pub image_size: usize,
    pub workspace_half_extent: f64,
    /// Diameter of the rendered virtual target in pixels; 0 disables it.
    pub target_px: usize,
    pub max_episode_steps: usize,
    pub action_scale: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            task: Task::Reacher2D,
            image_size: 16,
            workspace_half_extent: 0.5,
            target_px: 0,
            max_episode_steps: 50,
            action_scale: 0.05,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Config(format!("image_size {} < 8", self.image_size)));
        }
        if self.target_px >= self.image_size {
            return Err(Error::Config(format!(
                "target_px {} must be below image_size {}",
                self.target_px, self.image_size
            )));
        }
        if self.max_episode_steps < 1 {
            return Err(Error::Config("max_episode_steps must be at least 1".into()));
        }
        if !(self.workspace_half_extent > 0.0) || !(self.action_scale > 0.0) {
            return Err(Error::Config("workspace and action scale must be positive".into()));
        }
        Ok(())
    }

    /// Workspace extent of one pixel.
    pub fn pixel_size(&self) -> f64 {
        2.0 * self.workspace_half_extent / self.image_size as f64
    }

    pub fn image_len(&self) -> usize {
        self.image_size * self.image_size * 3
    }

    pub fn in_bounds(&self, p: Pose2) -> bool {
        let e = self.workspace_half_extent;
        p.is_finite() && p.x.abs() <= e && p.y.abs() <= e
    }

    fn clamp(&self, p: Pose2) -> Pose2 {
        let e = self.workspace_half_extent;
        Pose2::new(p.x.clamp(-e, e), p.y.clamp(-e, e))
    }

    /// World coordinates of a (fractional) pixel position; `(row, col)` index
    /// pixel centers at integer values.
    pub fn pixel_to_world(&self, row: f64, col: f64) -> Pose2 {
        let e = self.workspace_half_extent;
        let s = self.pixel_size();
        Pose2::new(-e + (col + 0.5) * s, e - (row + 0.5) * s)
    }

    /// Canonical agent pose at reset.
    pub fn agent_start(&self) -> Pose2 {
        match self.task {
            Task::Reacher2D => Pose2::ORIGIN,
            Task::CubeMove2D => Pose2::new(0.0, -0.09),
        }
    }

    /// Object position at reset.
    pub fn object_start(&self) -> Pose2 {
        Pose2::ORIGIN
    }

    fn arm_base(&self) -> Pose2 {
        Pose2::new(0.0, -self.workspace_half_extent)
    }
}

/// One timestep of input: an RGB image plus the state vector
/// `[q.x, q.y, p_obj.x, p_obj.y, p_goal.x, p_goal.y]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub size: usize,
    /// Row-major `size × size × 3`, values in `[0, 1]`.
    pub image: Vec<f32>,
    pub vector: [f32; VECTOR_DIM],
}

impl Observation {
    pub fn proprio(&self) -> Pose2 {
        Pose2::new(self.vector[0] as f64, self.vector[1] as f64)
    }

    pub fn object(&self) -> Pose2 {
        Pose2::new(self.vector[2] as f64, self.vector[3] as f64)
    }

    pub fn goal(&self) -> Pose2 {
        Pose2::new(self.vector[4] as f64, self.vector[5] as f64)
    }

    /// Writes the image as an 8-bit RGB PNG.
    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), self.size as u32, self.size as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Io(std::io::Error::other(e)))?;
        let bytes: Vec<u8> = self.image.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        writer.write_image_data(&bytes).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        Ok(())
    }
}

/// Per-pixel entity labels (see the `LABEL_*` constants).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMask {
    pub size: usize,
    pub labels: Vec<u8>,
}

impl SegMask {
    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GoalSpec {
    Coords(Pose2),
    /// A goal observation from [`render_goal_observation`]; its object
    /// position is the goal.
    Visual(Observation),
}

impl GoalSpec {
    pub fn position(&self) -> Pose2 {
        match self {
            GoalSpec::Coords(p) => *p,
            GoalSpec::Visual(obs) => obs.object(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub agent: Pose2,
    pub object: Pose2,
    pub goal: Pose2,
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub observation: Observation,
    pub mask: SegMask,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// `−‖p_obj − p_goal‖₂`.
pub fn reward(p_obj: Pose2, p_goal: Pose2) -> f64 {
    -p_obj.dist(p_goal)
}

/// `exp(−‖p_obj − p_goal‖ / ‖p_goal‖)`: 1 at the goal, `e⁻¹` when the object
/// sits at the origin.
pub fn normalized_score(p_obj: Pose2, p_goal: Pose2) -> Result<f64> {
    let scale = p_goal.norm();
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Undefined("normalized score needs a goal away from the origin".into()));
    }
    Ok((-p_obj.dist(p_goal) / scale).exp())
}

/// Uniform over the workspace square minus the origin exclusion ball.
pub fn sample_goal(config: &EnvConfig, rng: &mut impl Rng) -> Pose2 {
    let e = config.workspace_half_extent;
    loop {
        let p = Pose2::new(rng.random_range(-e..=e), rng.random_range(-e..=e));
        if p.norm() >= GOAL_EXCLUSION_RADIUS {
            return p;
        }
    }
}

/// Mean pixel position of `label`, mapped to workspace coordinates.
pub fn centroid_position(mask: &SegMask, label: u8, config: &EnvConfig) -> Result<Pose2> {
    let (mut rs, mut cs, mut n) = (0.0, 0.0, 0usize);
    for (i, &l) in mask.labels.iter().enumerate() {
        if l == label {
            rs += (i / mask.size) as f64;
            cs += (i % mask.size) as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NotVisible(label));
    }
    Ok(config.pixel_to_world(rs / n as f64, cs / n as f64))
}

/// Scene content independent of simulation state bookkeeping.
#[derive(Clone, Copy, Debug)]
struct Scene {
    agent: Pose2,
    object: Pose2,
    goal: Pose2,
    show_target: bool,
}

fn check_goal(config: &EnvConfig, goal: Pose2) -> Result<()> {
    if !config.in_bounds(goal) {
        return Err(Error::OutOfBounds { x: goal.x, y: goal.y, extent: config.workspace_half_extent });
    }
    Ok(())
}

/// Observation of the reset scene with the object teleported to `p_goal`
/// and no virtual target.
pub fn render_goal_observation(config: &EnvConfig, p_goal: Pose2) -> Result<Observation> {
    check_goal(config, p_goal)?;
    let (agent, object) = match config.task {
        // the tip is the arm's end; moving it moves the arm
        Task::Reacher2D => (p_goal, p_goal),
        Task::CubeMove2D => (config.agent_start(), p_goal),
    };
    let scene = Scene { agent, object, goal: p_goal, show_target: false };
    Ok(render(config, &scene).0)
}

/// Renders an arbitrary arrangement without the virtual target. For
/// Reacher2D the object is the arm tip, so `object` is ignored.
pub fn render_state(config: &EnvConfig, agent: Pose2, object: Pose2, goal: Pose2) -> Result<(Observation, SegMask)> {
    config.validate()?;
    for p in [agent, object, goal] {
        if !config.in_bounds(p) {
            return Err(Error::Config(format!("pose {p:?} outside the workspace")));
        }
    }
    let object = if config.task == Task::Reacher2D { agent } else { object };
    Ok(render(config, &Scene { agent, object, goal, show_target: false }))
}

fn render(config: &EnvConfig, scene: &Scene) -> (Observation, SegMask) {
    let n = config.image_size;
    let px = config.pixel_size();
    let mut image = vec![0.0f32; n * n * 3];
    let mut labels = vec![LABEL_BACKGROUND; n * n];

    let label_at = |p: Pose2| -> u8 {
        // later entries draw on top
        let mut label = LABEL_BACKGROUND;
        if scene.show_target && config.target_px > 0 {
            let r = 0.5 * config.target_px as f64 * px;
            if p.dist(scene.goal) <= r {
                label = LABEL_TARGET;
            }
        }
        let on_agent = match config.task {
            Task::Reacher2D => {
                segment_dist(p, config.arm_base(), scene.agent) <= ARM_HALF_WIDTH_PX * px
            }
            Task::CubeMove2D => p.dist(scene.agent) <= AGENT_RADIUS_PX * px,
        };
        if on_agent {
            label = LABEL_AGENT;
        }
        let h = OBJECT_HALF_SIDE_PX * px;
        if (p.x - scene.object.x).abs() <= h && (p.y - scene.object.y).abs() <= h {
            label = LABEL_OBJECT;
        }
        label
    };

    let color = |l: u8| match l {
        LABEL_AGENT => COLOR_AGENT,
        LABEL_OBJECT => COLOR_OBJECT,
        LABEL_TARGET => COLOR_TARGET,
        _ => COLOR_BACKGROUND,
    };

    let sub = 1.0 / SUPERSAMPLE as f64;
    let weight = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
    for row in 0..n {
        for col in 0..n {
            let idx = row * n + col;
            labels[idx] = label_at(config.pixel_to_world(row as f64, col as f64));
            let mut rgb = [0.0f32; 3];
            for si in 0..SUPERSAMPLE {
                for sj in 0..SUPERSAMPLE {
                    let r = row as f64 - 0.5 + (si as f64 + 0.5) * sub;
                    let c = col as f64 - 0.5 + (sj as f64 + 0.5) * sub;
                    let rgb_s = color(label_at(config.pixel_to_world(r, c)));
                    for k in 0..3 {
                        rgb[k] += weight * rgb_s[k];
                    }
                }
            }
            image[idx * 3..idx * 3 + 3].copy_from_slice(&rgb);
        }
    }

    let vector = [
        scene.agent.x as f32,
        scene.agent.y as f32,
        scene.object.x as f32,
        scene.object.y as f32,
        scene.goal.x as f32,
        scene.goal.y as f32,
    ];
    (Observation { size: n, image, vector }, SegMask { size: n, labels })
}

fn segment_dist(p: Pose2, a: Pose2, b: Pose2) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0) };
    p.dist(Pose2::new(a.x + t * dx, a.y + t * dy))
}

/// A running episode.
#[derive(Clone, Debug)]
pub struct Env {
    config: EnvConfig,
    agent: Pose2,
    object: Pose2,
    goal: Pose2,
    steps: usize,
}

impl Env {
    /// Starts an episode. Without a goal one is drawn from `seed`.
    pub fn reset(config: &EnvConfig, seed: u64, goal: Option<&GoalSpec>) -> Result<(Self, Observation, SegMask)> {
        config.validate()?;
        let goal = match goal {
            Some(spec) => {
                let g = spec.position();
                check_goal(config, g)?;
                g
            }
            None => sample_goal(config, &mut ChaCha8Rng::seed_from_u64(seed)),
        };
        let env = Self {
            config: config.clone(),
            agent: config.agent_start(),
            object: config.object_start(),
            goal,
            steps: 0,
        };
        let (obs, mask) = env.observe();
        Ok((env, obs, mask))
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn goal(&self) -> Pose2 {
        self.goal
    }

    pub fn agent(&self) -> Pose2 {
        self.agent
    }

    /// Position of the entity being placed: the arm tip or the cube.
    pub fn object(&self) -> Pose2 {
        self.object
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.steps >= self.config.max_episode_steps
    }

    pub fn observe(&self) -> (Observation, SegMask) {
        let scene = Scene {
            agent: self.agent,
            object: self.object,
            goal: self.goal,
            show_target: true,
        };
        render(&self.config, &scene)
    }

    /// Advances one timestep; action components are clamped to `[-1, 1]`.
    pub fn step(&mut self, action: [f64; 2]) -> Result<StepResult> {
        if self.is_done() {
            return Err(Error::EpisodeOver);
        }
        let a = action.map(|v| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) });
        let s = self.config.action_scale;
        let before = self.agent;
        let moved = self.config.clamp(Pose2::new(before.x + a[0] * s, before.y + a[1] * s));
        match self.config.task {
            Task::Reacher2D => {
                self.agent = moved;
                self.object = moved;
            }
            Task::CubeMove2D => {
                if before.dist(self.object) < CONTACT_RADIUS {
                    self.object = self.config.clamp(Pose2::new(
                        self.object.x + moved.x - before.x,
                        self.object.y + moved.y - before.y,
                    ));
                }
                self.agent = moved;
            }
        }
        self.steps += 1;
        let (observation, mask) = self.observe();
        Ok(StepResult {
            observation,
            mask,
            reward: reward(self.object, self.goal),
            done: self.is_done(),
            info: StepInfo { agent: self.agent, object: self.object, goal: self.goal },
        })
    }

    /// Moves the placed entity directly (used by scripted oracle agents).
    pub fn teleport_object(&mut self, p: Pose2) {
        let p = self.config.clamp(p);
        self.object = p;
        if self.config.task == Task::Reacher2D {
            self.agent = p;
        }
    }
}
