//! Offline episode storage and explorers.
//!
//! On disk a dataset is a directory with `manifest.json` and one
//! `episode_NNNNN.bin` per episode. Each episode file holds, in order and
//! little-endian: images (`n × H·W·3` f32), vectors (`n × 6` f32), actions
//! (`n × 2` f32), rewards (`n` f32) and labels (`n × H·W` u8), where `n` is the
//! number of observations (actions taken + 1).

use std::fs;
use std::path::Path;

use diffcore::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envsim::{Env, EnvConfig, Pose2, Task, CONTACT_RADIUS, VECTOR_DIM};
use crate::worldmodel::{SeqBatch, ACTION_DIM};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Explorer {
    Random,
    Scripted,
}

/// One recorded episode. Index 0 is the reset observation, preceded by a
/// zero action.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub images: Vec<f32>,
    pub vectors: Vec<f32>,
    pub actions: Vec<f32>,
    pub rewards: Vec<f32>,
    pub labels: Vec<u8>,
}

impl Episode {
    /// Number of observations.
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Number of environment steps taken.
    pub fn steps(&self) -> usize {
        self.len().saturating_sub(1)
    }

    pub fn object_position(&self, i: usize) -> Pose2 {
        Pose2::new(self.vectors[i * VECTOR_DIM + 2] as f64, self.vectors[i * VECTOR_DIM + 3] as f64)
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * (self.images.len() + self.vectors.len() + self.actions.len() + self.len()) + self.labels.len());
        for part in [&self.images, &self.vectors, &self.actions, &self.rewards] {
            for v in part.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.labels);
        out
    }

    fn from_bytes(bytes: &[u8], n: usize, image_size: usize) -> Result<Self> {
        let px = image_size * image_size;
        let floats = [n * px * 3, n * VECTOR_DIM, n * ACTION_DIM, n];
        let expected = 4 * floats.iter().sum::<usize>() + n * px;
        if bytes.len() != expected {
            return Err(Error::Config(format!("episode file has {} bytes, expected {expected}", bytes.len())));
        }
        let mut off = 0;
        let mut read = |count: usize| {
            let v: Vec<f32> = bytes[off..off + 4 * count]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            off += 4 * count;
            v
        };
        let images = read(floats[0]);
        let vectors = read(floats[1]);
        let actions = read(floats[2]);
        let rewards = read(floats[3]);
        let start = expected - n * px;
        Ok(Self { images, vectors, actions, rewards, labels: bytes[start..].to_vec() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub file: String,
    pub observations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub env: EnvConfig,
    pub explorer: Explorer,
    pub seed: u64,
    pub steps: usize,
    pub episodes: Vec<EpisodeEntry>,
}

const FORMAT: &str = "wmlab-dataset-v1";

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayDataset {
    pub env: EnvConfig,
    pub explorer: Explorer,
    pub seed: u64,
    pub episodes: Vec<Episode>,
}

impl ReplayDataset {
    /// Total environment steps across episodes.
    pub fn steps(&self) -> usize {
        self.episodes.iter().map(Episode::steps).sum()
    }

    /// SHA-256 over the collection metadata and every episode's bytes.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&(&self.env, self.explorer, self.seed)).expect("serializable"));
        for ep in &self.episodes {
            h.update((ep.len() as u64).to_le_bytes());
            h.update(ep.to_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.episodes.len());
        for (i, ep) in self.episodes.iter().enumerate() {
            let file = format!("episode_{i:05}.bin");
            fs::write(dir.join(&file), ep.to_bytes())?;
            entries.push(EpisodeEntry { file, observations: ep.len() });
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            env: self.env.clone(),
            explorer: self.explorer,
            seed: self.seed,
            steps: self.steps(),
            episodes: entries,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if manifest.format != FORMAT {
            return Err(Error::Config(format!("unknown dataset format {:?}", manifest.format)));
        }
        let episodes = manifest
            .episodes
            .iter()
            .map(|e| Episode::from_bytes(&fs::read(dir.join(&e.file))?, e.observations, manifest.env.image_size))
            .collect::<Result<Vec<_>>>()?;
        let ds = Self { env: manifest.env, explorer: manifest.explorer, seed: manifest.seed, episodes };
        if ds.steps() != manifest.steps {
            return Err(Error::Config("manifest step count does not match episodes".into()));
        }
        Ok(ds)
    }

    /// Samples `batch` windows of `length` observations, each inside one
    /// episode, laid out time-major.
    pub fn sample_batch<T: Real>(&self, batch: usize, length: usize, rng: &mut impl Rng) -> Result<SeqBatch<T>> {
        let eligible: Vec<usize> = (0..self.episodes.len()).filter(|&i| self.episodes[i].len() >= length).collect();
        if eligible.is_empty() {
            return Err(Error::Config(format!("no episode holds {length} observations")));
        }
        let picks: Vec<(usize, usize)> = (0..batch)
            .map(|_| {
                let e = eligible[rng.random_range(0..eligible.len())];
                let start = rng.random_range(0..=self.episodes[e].len() - length);
                (e, start)
            })
            .collect();
        self.gather(&picks, length)
    }

    /// Builds a batch from explicit `(episode, start)` windows.
    pub fn gather<T: Real>(&self, picks: &[(usize, usize)], length: usize) -> Result<SeqBatch<T>> {
        let px = self.env.image_size * self.env.image_size;
        let il = px * 3;
        let rows = picks.len() * length;
        let (mut images, mut vectors, mut actions, mut rewards) = (
            Vec::with_capacity(rows * il),
            Vec::with_capacity(rows * VECTOR_DIM),
            Vec::with_capacity(rows * ACTION_DIM),
            Vec::with_capacity(rows),
        );
        let mut labels = Vec::with_capacity(rows * px);
        let lit = |v: &f32| T::lit(*v as f64);
        for t in 0..length {
            for &(e, start) in picks {
                let ep = &self.episodes[e];
                let i = start + t;
                if i >= ep.len() {
                    return Err(Error::Config(format!("window ({e}, {start}) exceeds episode length {}", ep.len())));
                }
                images.extend(ep.images[i * il..(i + 1) * il].iter().map(lit));
                vectors.extend(ep.vectors[i * VECTOR_DIM..(i + 1) * VECTOR_DIM].iter().map(lit));
                actions.extend(ep.actions[i * ACTION_DIM..(i + 1) * ACTION_DIM].iter().map(lit));
                rewards.push(lit(&ep.rewards[i]));
                labels.extend_from_slice(&ep.labels[i * px..(i + 1) * px]);
            }
        }
        Ok(SeqBatch {
            batch: picks.len(),
            length,
            images: Tensor::from_vec(&[rows, il], images)?,
            vectors: Tensor::from_vec(&[rows, VECTOR_DIM], vectors)?,
            actions: Tensor::from_vec(&[rows, ACTION_DIM], actions)?,
            labels,
            rewards: Tensor::from_vec(&[rows, 1], rewards)?,
        })
    }

    /// Axis-aligned bounding box of visited object positions as a fraction
    /// of the workspace area.
    pub fn object_coverage(&self) -> f64 {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for ep in &self.episodes {
            for i in 0..ep.len() {
                let p = ep.object_position(i);
                lo = [lo[0].min(p.x), lo[1].min(p.y)];
                hi = [hi[0].max(p.x), hi[1].max(p.y)];
            }
        }
        let side = 2.0 * self.env.workspace_half_extent;
        ((hi[0] - lo[0]) * (hi[1] - lo[1]) / (side * side)).max(0.0)
    }
}

/// Scripted interaction: reach the object when out of contact, otherwise drag
/// it toward a random waypoint that is replaced on arrival or at random.
struct ScriptedExplorer {
    waypoint: Pose2,
    speed: f64,
}

impl ScriptedExplorer {
    fn new(env: &EnvConfig, rng: &mut impl Rng) -> Self {
        let mut s = Self { waypoint: Pose2::ORIGIN, speed: 1.0 };
        s.retarget(env, rng);
        s
    }

    fn retarget(&mut self, env: &EnvConfig, rng: &mut impl Rng) {
        let e = env.workspace_half_extent;
        self.waypoint = Pose2::new(rng.random_range(-e..=e), rng.random_range(-e..=e));
        self.speed = rng.random_range(0.3..=1.0);
    }

    fn act(&mut self, env: &Env, rng: &mut impl Rng) -> [f64; 2] {
        let cfg = env.config();
        let (agent, object) = (env.agent(), env.object());
        let in_contact = cfg.task == Task::Reacher2D || agent.dist(object) < CONTACT_RADIUS;
        let aim = if in_contact {
            if object.dist(self.waypoint) < cfg.action_scale || rng.random::<f64>() < 0.03 {
                self.retarget(cfg, rng);
            }
            // the drag moves the object by the agent's displacement
            Pose2::new(agent.x + self.waypoint.x - object.x, agent.y + self.waypoint.y - object.y)
        } else {
            object
        };
        let (dx, dy) = (aim.x - agent.x, aim.y - agent.y);
        let d = dx.hypot(dy).max(1e-9);
        let mag = self.speed.min(d / cfg.action_scale);
        let noise = 0.2;
        [
            (dx / d * mag + rng.random_range(-noise..=noise)).clamp(-1.0, 1.0),
            (dy / d * mag + rng.random_range(-noise..=noise)).clamp(-1.0, 1.0),
        ]
    }
}

/// Runs `steps` environment steps with `explorer`, starting a new episode
/// (fresh random goal) whenever one ends.
pub fn collect_dataset(env: &EnvConfig, explorer: Explorer, steps: usize, seed: u64) -> Result<ReplayDataset> {
    if steps < 1 {
        return Err(Error::Config("collect at least one step".into()));
    }
    env.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut episodes = Vec::new();
    let mut remaining = steps;
    while remaining > 0 {
        let (mut sim, obs, mask) = Env::reset(env, rng.random(), None)?;
        let mut ep = Episode {
            images: obs.image.clone(),
            vectors: obs.vector.to_vec(),
            actions: vec![0.0; ACTION_DIM],
            rewards: vec![crate::envsim::reward(sim.object(), sim.goal()) as f32],
            labels: mask.labels.clone(),
        };
        let mut scripted = ScriptedExplorer::new(env, &mut rng);
        let budget = remaining.min(env.max_episode_steps);
        for _ in 0..budget {
            let action = match explorer {
                Explorer::Random => [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)],
                Explorer::Scripted => scripted.act(&sim, &mut rng),
            };
            let res = sim.step(action)?;
            ep.images.extend_from_slice(&res.observation.image);
            ep.vectors.extend_from_slice(&res.observation.vector);
            ep.actions.extend(action.iter().map(|&a| a as f32));
            ep.rewards.push(res.reward as f32);
            ep.labels.extend_from_slice(&res.mask.labels);
        }
        remaining -= budget;
        episodes.push(ep);
    }
    Ok(ReplayDataset { env: env.clone(), explorer, seed, episodes })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(task: Task) -> EnvConfig {
        EnvConfig { task, max_episode_steps: 20, ..Default::default() }
    }

    #[test]
    fn collection_is_deterministic_and_exact() {
        let a = collect_dataset(&env(Task::CubeMove2D), Explorer::Scripted, 95, 3).unwrap();
        let b = collect_dataset(&env(Task::CubeMove2D), Explorer::Scripted, 95, 3).unwrap();
        let c = collect_dataset(&env(Task::CubeMove2D), Explorer::Scripted, 95, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.steps(), 95);
        assert_eq!(a.episodes.len(), 5);
        assert_eq!(a.episodes[4].steps(), 15);
        assert!(a.episodes.iter().all(|e| e.actions[..2] == [0.0, 0.0]));
    }

    #[test]
    fn save_and_load_round_trip() {
        let d = collect_dataset(&env(Task::Reacher2D), Explorer::Random, 45, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let back = ReplayDataset::load(dir.path()).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.hash(), d.hash());
    }

    #[test]
    fn scripted_explorer_covers_the_workspace() {
        for task in [Task::Reacher2D, Task::CubeMove2D] {
            let cfg = EnvConfig { task, ..Default::default() };
            let d = collect_dataset(&cfg, Explorer::Scripted, 20_000, 0).unwrap();
            assert!(d.object_coverage() >= 0.5, "{task:?}: {}", d.object_coverage());
        }
    }

    #[test]
    fn batches_are_time_major_windows() {
        let d = collect_dataset(&env(Task::Reacher2D), Explorer::Random, 40, 2).unwrap();
        let batch = d.gather::<f64>(&[(0, 3), (1, 0)], 4).unwrap();
        assert_eq!((batch.batch, batch.length), (2, 4));
        for t in 0..4 {
            for (b, (ep, start)) in [(0usize, 3usize), (1, 0)].into_iter().enumerate() {
                let row = t * 2 + b;
                let want = &d.episodes[ep].vectors[(start + t) * VECTOR_DIM..(start + t + 1) * VECTOR_DIM];
                let got = batch.vectors.row_slice(row);
                assert!(got.iter().zip(want).all(|(g, w)| (*g - *w as f64).abs() < 1e-12));
            }
        }
        assert!(d.gather::<f64>(&[(0, 18)], 4).is_err());
        assert!(collect_dataset(&env(Task::Reacher2D), Explorer::Random, 0, 0).is_err());
    }
}
