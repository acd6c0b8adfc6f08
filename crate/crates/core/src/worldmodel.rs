//! Recurrent state-space world models: a flat variant that reconstructs the
//! whole image, and an object-centric variant that reconstructs per-object
//! masks, colours and positions through an object latent extractor.
//!
//! All sequence data is time-major: row `t * batch + b` holds timestep `t` of
//! sequence `b`. Everything except the recurrent update runs over all rows at
//! once.

use std::path::Path;

use diffcore::{
    categorical_sample_st, cosine_sim_eps, kl_balanced, Activation, Checkpoint, Dense, DenseStack, Graph, GruCell,
    ParamStore, Real, SampleMode, Tensor, Var,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envsim::{Observation, LABEL_AGENT, LABEL_OBJECT, VECTOR_DIM};
use crate::{Error, Result};

pub const ACTION_DIM: usize = 2;

/// Norm floor for cosine similarities inside training graphs.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Flat,
    ObjectCentric,
}

/// Entities that get their own latent in the object-centric model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectId {
    Agent,
    Object,
}

impl ObjectId {
    pub const ALL: [ObjectId; 2] = [ObjectId::Agent, ObjectId::Object];

    pub fn index(self) -> usize {
        match self {
            ObjectId::Agent => 0,
            ObjectId::Object => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL.get(i).copied().ok_or_else(|| Error::Config(format!("unknown object id {i}")))
    }

    fn label(self) -> u8 {
        match self {
            ObjectId::Agent => LABEL_AGENT,
            ObjectId::Object => LABEL_OBJECT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WmConfig {
    pub variant: Variant,
    pub image_size: usize,
    pub deter_dim: usize,
    pub groups: usize,
    pub classes: usize,
    pub hidden_dim: usize,
    pub image_embed_dim: usize,
    pub vector_embed_dim: usize,
    pub object_latent_dim: usize,
    pub extractor_hidden: usize,
    pub pos_encoder_hidden: usize,
    pub kl_alpha: f64,
    pub free_nats: f64,
    /// Apply symlog to image inputs as well as vectors.
    pub symlog_images: bool,
    /// Keep the goal coordinates inside the encoder's vector input.
    pub goal_in_input: bool,
    pub reward_head: bool,
}

impl Default for WmConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Flat,
            image_size: 16,
            deter_dim: 64,
            groups: 8,
            classes: 8,
            hidden_dim: 128,
            image_embed_dim: 64,
            vector_embed_dim: 32,
            object_latent_dim: 32,
            extractor_hidden: 64,
            pos_encoder_hidden: 64,
            kl_alpha: 0.8,
            free_nats: 1.0,
            symlog_images: false,
            goal_in_input: true,
            reward_head: false,
        }
    }
}

impl WmConfig {
    pub fn stoch_dim(&self) -> usize {
        self.groups * self.classes
    }

    pub fn feat_dim(&self) -> usize {
        self.deter_dim + self.stoch_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.image_embed_dim + self.vector_embed_dim
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size
    }

    pub fn image_len(&self) -> usize {
        self.pixels() * 3
    }

    fn vector_head_dim(&self) -> usize {
        match self.variant {
            Variant::Flat => 6,
            Variant::ObjectCentric => 4,
        }
    }
}

/// Coefficients of the world-model loss components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossScales {
    pub image: f64,
    pub vector_proprio: f64,
    pub vector_goal: f64,
    pub obj: f64,
    pub dyn_: f64,
    pub pos: f64,
    pub reward: f64,
}

impl Default for LossScales {
    fn default() -> Self {
        Self { image: 1.0, vector_proprio: 1.0, vector_goal: 1.0, obj: 1.0, dyn_: 1.0, pos: 1.0, reward: 1.0 }
    }
}

impl LossScales {
    pub fn validate(&self) -> Result<()> {
        let all = [self.image, self.vector_proprio, self.vector_goal, self.obj, self.dyn_, self.pos, self.reward];
        if all.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!("loss scales must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Per-component loss values. Components a variant does not have are 0;
/// `reward` is absent unless the model carries a reward head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dyn_: f64,
    pub image: f64,
    pub vector_proprio: f64,
    pub vector_goal: f64,
    pub obj_mask: f64,
    pub obj_rgb: f64,
    pub obj_pos: f64,
    pub pos_encoder: f64,
    pub reward: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// `Σ scale_i · component_i`, the object terms sharing the `obj` scale.
    pub fn weighted_total(&self, s: &LossScales) -> f64 {
        s.dyn_ * self.dyn_
            + s.image * self.image
            + s.vector_proprio * self.vector_proprio
            + s.vector_goal * self.vector_goal
            + s.obj * (self.obj_mask + self.obj_rgb + self.obj_pos)
            + s.pos * self.pos_encoder
            + s.reward * self.reward.unwrap_or(0.0)
    }

    pub fn is_finite(&self) -> bool {
        [
            self.dyn_,
            self.image,
            self.vector_proprio,
            self.vector_goal,
            self.obj_mask,
            self.obj_rgb,
            self.obj_pos,
            self.pos_encoder,
            self.reward.unwrap_or(0.0),
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Batched latent state outside any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct RssmState<T> {
    /// `[rows, deter_dim]`
    pub deter: Tensor<T>,
    /// `[rows, groups * classes]`, one-hot per group.
    pub stoch: Tensor<T>,
}

impl<T: Real> RssmState<T> {
    pub fn rows(&self) -> usize {
        self.deter.rows()
    }

    /// `concat(deter, stoch)` per row.
    pub fn flat(&self) -> Tensor<T> {
        let (d, s) = (self.deter.cols(), self.stoch.cols());
        let mut out = Vec::with_capacity(self.rows() * (d + s));
        for r in 0..self.rows() {
            out.extend_from_slice(self.deter.row_slice(r));
            out.extend_from_slice(self.stoch.row_slice(r));
        }
        Tensor::from_vec(&[self.rows(), d + s], out).expect("sized")
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self { deter: self.deter.select_rows(rows), stoch: self.stoch.select_rows(rows) }
    }
}

/// Latent state recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub deter: Var,
    pub stoch: Var,
}

impl StateVars {
    pub fn bind<T: Real>(g: &mut Graph<T>, s: &RssmState<T>) -> Self {
        Self { deter: g.input(s.deter.clone()), stoch: g.input(s.stoch.clone()) }
    }

    pub fn feat<T: Real>(&self, g: &mut Graph<T>) -> Var {
        g.concat_cols(&[self.deter, self.stoch])
    }

    pub fn read<T: Real>(&self, g: &Graph<T>) -> RssmState<T> {
        RssmState { deter: g.value(self.deter).clone(), stoch: g.value(self.stoch).clone() }
    }
}

/// A step of posterior or prior inference.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub state: StateVars,
    pub logits: Var,
}

/// Time-major batch of equal-length subsequences.
#[derive(Clone, Debug)]
pub struct SeqBatch<T> {
    pub batch: usize,
    pub length: usize,
    /// `[L·B, H·W·3]`
    pub images: Tensor<T>,
    /// `[L·B, 6]`, raw (not symlog) values.
    pub vectors: Tensor<T>,
    /// `[L·B, 2]`, the action that led to each observation.
    pub actions: Tensor<T>,
    /// `L·B·H·W` segmentation labels.
    pub labels: Vec<u8>,
    /// `[L·B, 1]`
    pub rewards: Tensor<T>,
}

impl<T: Real> SeqBatch<T> {
    pub fn rows(&self) -> usize {
        self.batch * self.length
    }

    pub fn cast<U: Real>(&self) -> SeqBatch<U> {
        SeqBatch {
            batch: self.batch,
            length: self.length,
            images: self.images.cast(),
            vectors: self.vectors.cast(),
            actions: self.actions.cast(),
            labels: self.labels.clone(),
            rewards: self.rewards.cast(),
        }
    }
}

/// Loss graph handles returned by [`WorldModel::loss_g`].
#[derive(Clone, Debug)]
pub struct LossVars {
    pub total: Var,
    pub dyn_: Var,
    pub image: Option<Var>,
    pub vector_proprio: Var,
    pub vector_goal: Var,
    pub obj_mask: Option<Var>,
    pub obj_rgb: Option<Var>,
    pub obj_pos: Option<Var>,
    pub pos_encoder: Option<Var>,
    pub reward: Option<Var>,
    /// Posterior states for every row of the batch.
    pub posterior: StateVars,
}

impl LossVars {
    pub fn breakdown<T: Real>(&self, g: &Graph<T>) -> LossBreakdown {
        let v = |x: Option<Var>| x.map(|x| g.scalar(x).as_f64()).unwrap_or(0.0);
        LossBreakdown {
            dyn_: g.scalar(self.dyn_).as_f64(),
            image: v(self.image),
            vector_proprio: g.scalar(self.vector_proprio).as_f64(),
            vector_goal: g.scalar(self.vector_goal).as_f64(),
            obj_mask: v(self.obj_mask),
            obj_rgb: v(self.obj_rgb),
            obj_pos: v(self.obj_pos),
            pos_encoder: v(self.pos_encoder),
            reward: self.reward.map(|r| g.scalar(r).as_f64()),
            total: g.scalar(self.total).as_f64(),
        }
    }
}

#[derive(Clone, Debug)]
struct Modules {
    image_enc: DenseStack,
    vector_enc: DenseStack,
    rec_in: Dense,
    gru: GruCell,
    prior: DenseStack,
    post: DenseStack,
    image_dec: Option<DenseStack>,
    vector_dec: DenseStack,
    extractor: Option<DenseStack>,
    object_dec: Option<DenseStack>,
    object_pos: Option<DenseStack>,
    pos_enc: Option<DenseStack>,
    reward: Option<DenseStack>,
}

#[derive(Debug)]
pub struct WorldModel<T> {
    pub config: WmConfig,
    pub store: ParamStore<T>,
    m: Modules,
}

impl<T: Real> Clone for WorldModel<T> {
    fn clone(&self) -> Self {
        Self { config: self.config.clone(), store: self.store.clone(), m: self.m.clone() }
    }
}

/// Output of the object decoder for a batch of latents.
#[derive(Clone, Copy, Debug)]
pub struct ObjectDecoded {
    /// `[N, H·W·3]` in `[0, 1]`
    pub rgb: Var,
    /// `[N, H·W]` logit of the entity against background (fixed at 0)
    pub mask_logit: Var,
    /// `[N, 2]` position in symlog space
    pub pos: Var,
}

impl<T: Real> WorldModel<T> {
    pub fn new(config: WmConfig, seed: u64) -> Result<Self> {
        if config.groups == 0 || config.classes < 2 || config.deter_dim == 0 {
            return Err(Error::Config("latent sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let relu = Activation::Relu;
        let h = c.hidden_dim;
        // shared parts first so both variants draw identical initial values
        let image_enc = DenseStack::new(&mut store, "enc.image", &[c.image_len(), h, c.image_embed_dim], relu, &mut rng);
        let vector_enc = DenseStack::new(&mut store, "enc.vector", &[VECTOR_DIM, h / 2, c.vector_embed_dim], relu, &mut rng);
        let rec_in = Dense::new(&mut store, "rssm.in", c.stoch_dim() + ACTION_DIM, h, &mut rng);
        let gru = GruCell::new(&mut store, "rssm.gru", h, c.deter_dim, &mut rng);
        let prior = DenseStack::new(&mut store, "rssm.prior", &[c.deter_dim, h, c.stoch_dim()], relu, &mut rng);
        let post =
            DenseStack::new(&mut store, "rssm.post", &[c.deter_dim + c.embed_dim(), h, c.stoch_dim()], relu, &mut rng);
        let vector_dec =
            DenseStack::new(&mut store, "dec.vector", &[c.feat_dim(), h, c.vector_head_dim()], relu, &mut rng);
        let (mut image_dec, mut extractor, mut object_dec, mut object_pos, mut pos_enc) = (None, None, None, None, None);
        match c.variant {
            Variant::Flat => {
                image_dec = Some(DenseStack::new(&mut store, "dec.image", &[c.feat_dim(), h, c.image_len()], relu, &mut rng));
            }
            Variant::ObjectCentric => {
                let e = c.extractor_hidden;
                let d = c.object_latent_dim;
                extractor = Some(DenseStack::new(&mut store, "obj.extract", &[c.feat_dim() + 2, e, e, d], relu, &mut rng));
                let out = c.image_len() + c.pixels();
                object_dec = Some(DenseStack::new(&mut store, "obj.dec", &[d, h, out], relu, &mut rng));
                object_pos = Some(DenseStack::new(&mut store, "obj.pos", &[d, e, 2], Activation::Tanh, &mut rng));
                let p = c.pos_encoder_hidden;
                pos_enc = Some(DenseStack::new(&mut store, "obj.pos_enc", &[2, p, p, p, d], relu, &mut rng));
            }
        }
        let reward = c
            .reward_head
            .then(|| DenseStack::new(&mut store, "dec.reward", &[c.feat_dim(), h, 1], relu, &mut rng));
        let m = Modules {
            image_enc,
            vector_enc,
            rec_in,
            gru,
            prior,
            post,
            image_dec,
            vector_dec,
            extractor,
            object_dec,
            object_pos,
            pos_enc,
            reward,
        };
        Ok(Self { config, store, m })
    }

    /// Same model in another precision.
    pub fn cast<U: Real>(&self) -> WorldModel<U> {
        WorldModel { config: self.config.clone(), store: self.store.cast(), m: self.m.clone() }
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn has_reward_head(&self) -> bool {
        self.m.reward.is_some()
    }

    pub fn initial_state(&self, rows: usize) -> RssmState<T> {
        let c = &self.config;
        let mut stoch = Tensor::zeros(&[rows, c.stoch_dim()]);
        for r in 0..rows {
            for grp in 0..c.groups {
                stoch.data_mut()[r * c.stoch_dim() + grp * c.classes] = T::one();
            }
        }
        RssmState { deter: Tensor::zeros(&[rows, c.deter_dim]), stoch }
    }

    // ---- graph-level building blocks ----

    /// Embeddings for `[N, H·W·3]` images and `[N, 6]` raw vectors.
    pub fn embed_g(&self, g: &mut Graph<T>, images: Var, vectors: Var) -> Var {
        let img = if self.config.symlog_images { g.symlog(images) } else { images };
        let ie = self.m.image_enc.forward(g, &self.store, img);
        let ie = g.relu(ie);
        let vecs = if self.config.goal_in_input {
            vectors
        } else {
            let kept = g.slice_cols(vectors, 0, 4);
            let rows = g.value(vectors).rows();
            let zeros = g.input(Tensor::zeros(&[rows, 2]));
            g.concat_cols(&[kept, zeros])
        };
        let sv = g.symlog(vecs);
        let ve = self.m.vector_enc.forward(g, &self.store, sv);
        let ve = g.relu(ve);
        g.concat_cols(&[ie, ve])
    }

    /// Recurrent update shared by prior and posterior.
    pub fn deter_step_g(&self, g: &mut Graph<T>, prev: StateVars, action: Var) -> Var {
        let x = g.concat_cols(&[prev.stoch, action]);
        let x = self.m.rec_in.forward(g, &self.store, x);
        let x = g.relu(x);
        self.m.gru.forward(g, &self.store, x, prev.deter)
    }

    pub fn prior_step_g(
        &self,
        g: &mut Graph<T>,
        prev: StateVars,
        action: Var,
        mode: SampleMode,
        rng: &mut impl Rng,
    ) -> StepVars {
        let deter = self.deter_step_g(g, prev, action);
        let logits = self.m.prior.forward(g, &self.store, deter);
        let stoch = categorical_sample_st(g, logits, self.config.classes, mode, rng);
        StepVars { state: StateVars { deter, stoch }, logits }
    }

    /// Posterior step; also returns the prior logits for the same deter.
    pub fn posterior_step_g(
        &self,
        g: &mut Graph<T>,
        prev: StateVars,
        action: Var,
        embed: Var,
        mode: SampleMode,
        rng: &mut impl Rng,
    ) -> (StepVars, Var) {
        let deter = self.deter_step_g(g, prev, action);
        let prior_logits = self.m.prior.forward(g, &self.store, deter);
        let x = g.concat_cols(&[deter, embed]);
        let logits = self.m.post.forward(g, &self.store, x);
        let stoch = categorical_sample_st(g, logits, self.config.classes, mode, rng);
        (StepVars { state: StateVars { deter, stoch }, logits }, prior_logits)
    }

    /// Flat decoder: image in `[0, 1]` (flat variant only) and the vector
    /// head in symlog space.
    pub fn decode_g(&self, g: &mut Graph<T>, feat: Var) -> (Option<Var>, Var) {
        let image = self.m.image_dec.as_ref().map(|d| {
            let logits = d.forward(g, &self.store, feat);
            g.sigmoid(logits)
        });
        let vector = self.m.vector_dec.forward(g, &self.store, feat);
        (image, vector)
    }

    /// Symlog-space goal prediction `[N, 2]`.
    pub fn decode_goal_g(&self, g: &mut Graph<T>, feat: Var) -> Var {
        let v = self.m.vector_dec.forward(g, &self.store, feat);
        let start = self.config.vector_head_dim() - 2;
        g.slice_cols(v, start, 2)
    }

    /// Object latents `[N, object_latent_dim]` for one entity.
    pub fn extract_g(&self, g: &mut Graph<T>, feat: Var, obj: ObjectId) -> Result<Var> {
        let ex = self.m.extractor.as_ref().ok_or_else(|| Error::Config("flat model has no object extractor".into()))?;
        let rows = g.value(feat).rows();
        let mut onehot = Tensor::zeros(&[rows, 2]);
        for r in 0..rows {
            onehot.data_mut()[r * 2 + obj.index()] = T::one();
        }
        let id = g.input(onehot);
        let x = g.concat_cols(&[feat, id]);
        Ok(ex.forward(g, &self.store, x))
    }

    pub fn object_decode_g(&self, g: &mut Graph<T>, latent: Var) -> Result<ObjectDecoded> {
        let dec = self.m.object_dec.as_ref().ok_or_else(|| Error::Config("flat model has no object decoder".into()))?;
        let (il, px) = (self.config.image_len(), self.config.pixels());
        let latent = rms_normalize(g, latent);
        let out = dec.forward(g, &self.store, latent);
        let rgb_logits = g.slice_cols(out, 0, il);
        let rgb = g.sigmoid(rgb_logits);
        let mask_logit = g.slice_cols(out, il, px);
        let pos_head = self.m.object_pos.as_ref().expect("object decoder comes with a position head");
        let pos = pos_head.forward(g, &self.store, latent);
        Ok(ObjectDecoded { rgb, mask_logit, pos })
    }

    /// Predicted position of the entity being placed, symlog space `[N, 2]`.
    /// The flat model reads it from the vector head; the object-centric
    /// model from the object decoder.
    pub fn decode_object_position_g(&self, g: &mut Graph<T>, feat: Var) -> Result<Var> {
        match self.config.variant {
            Variant::Flat => {
                let v = self.m.vector_dec.forward(g, &self.store, feat);
                Ok(g.slice_cols(v, 2, 2))
            }
            Variant::ObjectCentric => {
                let lat = self.extract_g(g, feat, ObjectId::Object)?;
                Ok(self.object_decode_g(g, lat)?.pos)
            }
        }
    }

    /// Latent positional encoder on raw positions `[N, 2]`.
    pub fn pos_encode_g(&self, g: &mut Graph<T>, pos: Var) -> Result<Var> {
        let enc = self.m.pos_enc.as_ref().ok_or_else(|| Error::Config("flat model has no positional encoder".into()))?;
        let x = g.symlog(pos);
        Ok(enc.forward(g, &self.store, x))
    }

    /// Reward prediction in symlog space `[N, 1]`.
    pub fn reward_g(&self, g: &mut Graph<T>, feat: Var) -> Result<Var> {
        let head = self.m.reward.as_ref().ok_or_else(|| Error::Config("model has no reward head".into()))?;
        Ok(head.forward(g, &self.store, feat))
    }

    /// Posterior unroll plus every loss component for `batch`.
    pub fn loss_g(
        &self,
        g: &mut Graph<T>,
        batch: &SeqBatch<T>,
        scales: &LossScales,
        mode: SampleMode,
        rng: &mut impl Rng,
    ) -> Result<LossVars> {
        if batch.length < 2 {
            return Err(Error::Config(format!("sequence length {} < 2", batch.length)));
        }
        let c = &self.config;
        let (b, l, n) = (batch.batch, batch.length, batch.rows());
        if batch.images.cols() != c.image_len() || batch.images.rows() != n {
            return Err(Error::Config(format!("batch images {:?} do not match the model", batch.images.shape())));
        }
        let images = g.input(batch.images.clone());
        let vectors = g.input(batch.vectors.clone());
        let actions = g.input(batch.actions.clone());
        let embed = self.embed_g(g, images, vectors);

        let mut state = StateVars::bind(g, &self.initial_state(b));
        let (mut deters, mut stochs, mut posts, mut priors) = (vec![], vec![], vec![], vec![]);
        for t in 0..l {
            let e = g.slice_rows(embed, t * b, b);
            let a = g.slice_rows(actions, t * b, b);
            let (step, prior_logits) = self.posterior_step_g(g, state, a, e, mode, rng);
            deters.push(step.state.deter);
            stochs.push(step.state.stoch);
            posts.push(step.logits);
            priors.push(prior_logits);
            state = step.state;
        }
        let posterior = StateVars { deter: g.concat_rows(&deters), stoch: g.concat_rows(&stochs) };
        let post_logits = g.concat_rows(&posts);
        let prior_logits = g.concat_rows(&priors);
        let dyn_ = kl_balanced(g, post_logits, prior_logits, c.classes, T::lit(c.kl_alpha), T::lit(c.free_nats));
        let feat = posterior.feat(g);

        let inv_n = T::lit(1.0 / n as f64);
        let sq_err = |g: &mut Graph<T>, pred: Var, target: Var| {
            let d = g.sub(pred, target);
            let s = g.square(d);
            let total = g.sum(s);
            g.scale(total, inv_n)
        };

        let (image_hat, vector_hat) = self.decode_g(g, feat);
        let image = image_hat.map(|ih| sq_err(g, ih, images));
        let sym_vec = g.symlog(vectors);
        let goal_t = g.slice_cols(sym_vec, 4, 2);
        let (vector_proprio, vector_goal) = match c.variant {
            Variant::Flat => {
                let pred = g.slice_cols(vector_hat, 0, 4);
                let tgt = g.slice_cols(sym_vec, 0, 4);
                let gp = g.slice_cols(vector_hat, 4, 2);
                (sq_err(g, pred, tgt), sq_err(g, gp, goal_t))
            }
            Variant::ObjectCentric => {
                let pred = g.slice_cols(vector_hat, 0, 2);
                let tgt = g.slice_cols(sym_vec, 0, 2);
                let gp = g.slice_cols(vector_hat, 2, 2);
                (sq_err(g, pred, tgt), sq_err(g, gp, goal_t))
            }
        };

        let (mut obj_mask, mut obj_rgb, mut obj_pos, mut pos_encoder) = (None, None, None, None);
        if c.variant == Variant::ObjectCentric {
            let masks = label_masks(&batch.labels, c.pixels());
            let mut decoded = Vec::new();
            let mut object_latent = None;
            for obj in ObjectId::ALL {
                let lat = self.extract_g(g, feat, obj)?;
                if obj == ObjectId::Object {
                    object_latent = Some(lat);
                }
                decoded.push(self.object_decode_g(g, lat)?);
            }
            obj_mask = Some(self.mask_nll_g(g, &decoded, &masks, n));
            // colour error only inside each entity's true mask
            let mut rgb_terms = Vec::new();
            for (k, obj) in ObjectId::ALL.iter().enumerate() {
                let m3 = g.input(masks[obj.index()].rgb_mask::<T>());
                let d = g.sub(decoded[k].rgb, images);
                let sq = g.square(d);
                let masked = g.mul(sq, m3);
                rgb_terms.push(g.sum(masked));
            }
            let rgb_sum = g.add(rgb_terms[0], rgb_terms[1]);
            obj_rgb = Some(g.scale(rgb_sum, inv_n));
            let q_t = g.slice_cols(sym_vec, 0, 2);
            let p_t = g.slice_cols(sym_vec, 2, 2);
            let pa = sq_err(g, decoded[0].pos, q_t);
            let po = sq_err(g, decoded[1].pos, p_t);
            obj_pos = Some(g.add(pa, po));

            let p_raw = g.slice_cols(vectors, 2, 2);
            let enc = self.pos_encode_g(g, p_raw)?;
            let target = g.stop_grad(object_latent.expect("object extracted"));
            let cos = cosine_sim_eps(g, enc, target, T::lit(COSINE_EPS));
            let m = g.mean(cos);
            pos_encoder = Some(g.neg(m));
        }

        let reward = if self.m.reward.is_some() {
            let pred = self.reward_g(g, feat)?;
            let r = g.input(batch.rewards.clone());
            let rt = g.symlog(r);
            Some(sq_err(g, pred, rt))
        } else {
            None
        };

        let mut terms = vec![g.scale(dyn_, T::lit(scales.dyn_))];
        let mut add = |g: &mut Graph<T>, v: Option<Var>, s: f64| {
            if let Some(v) = v {
                terms.push(g.scale(v, T::lit(s)));
            }
        };
        add(g, image, scales.image);
        add(g, Some(vector_proprio), scales.vector_proprio);
        add(g, Some(vector_goal), scales.vector_goal);
        add(g, obj_mask, scales.obj);
        add(g, obj_rgb, scales.obj);
        add(g, obj_pos, scales.obj);
        add(g, pos_encoder, scales.pos);
        add(g, reward, scales.reward);
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t);
        }
        Ok(LossVars {
            total,
            dyn_,
            image,
            vector_proprio,
            vector_goal,
            obj_mask,
            obj_rgb,
            obj_pos,
            pos_encoder,
            reward,
            posterior,
        })
    }

    /// Per-pixel cross-entropy over {background, agent, object}, summed over
    /// pixels and averaged over rows. Background has a fixed logit of 0.
    fn mask_nll_g(&self, g: &mut Graph<T>, decoded: &[ObjectDecoded], masks: &[LabelMask], rows: usize) -> Var {
        let (la, lo) = (decoded[0].mask_logit, decoded[1].mask_logit);
        // the shift is a constant; log-sum-exp's gradient does not depend on it
        let shift: Vec<T> = g
            .value(la)
            .data()
            .iter()
            .zip(g.value(lo).data())
            .map(|(&a, &o)| a.max(o).max(T::zero()))
            .collect();
        let shape = g.value(la).shape().to_vec();
        let shift_t = Tensor::from_vec(&shape, shift).expect("sized");
        let neg_shift = g.input(shift_t.map(|v| -v));
        let shift_v = g.input(shift_t);
        let ea = g.add(la, neg_shift);
        let ea = g.exp(ea);
        let eo = g.add(lo, neg_shift);
        let eo = g.exp(eo);
        let eb = g.exp(neg_shift);
        let s = g.add(ea, eo);
        let s = g.add(s, eb);
        let lse = g.ln(s);
        let lse = g.add(lse, shift_v);
        let oa = g.input(masks[0].pixel_mask::<T>());
        let oo = g.input(masks[1].pixel_mask::<T>());
        let pa = g.mul(oa, la);
        let po = g.mul(oo, lo);
        let picked = g.add(pa, po);
        let nll = g.sub(lse, picked);
        let total = g.sum(nll);
        g.scale(total, T::lit(1.0 / rows as f64))
    }

    /// Rolls the prior forward for `horizon` steps with actions from
    /// `policy(graph, feat)`. Returns the visited states (excluding `start`)
    /// and the actions that produced them.
    pub fn imagine_g(
        &self,
        g: &mut Graph<T>,
        start: StateVars,
        horizon: usize,
        mode: SampleMode,
        rng: &mut impl Rng,
        mut policy: impl FnMut(&mut Graph<T>, Var, &mut dyn rand::RngCore) -> Result<Var>,
    ) -> Result<Vec<(StateVars, Var)>> {
        if horizon < 1 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        let mut out = Vec::with_capacity(horizon);
        let mut state = start;
        for _ in 0..horizon {
            let feat = state.feat(g);
            let action = policy(g, feat, rng)?;
            let next = self.prior_step_g(g, state, action, mode, rng).state;
            out.push((next, action));
            state = next;
        }
        Ok(out)
    }

    // ---- convenience wrappers outside a graph ----

    fn observation_tensors(&self, observations: &[&Observation]) -> Result<(Tensor<T>, Tensor<T>)> {
        let il = self.config.image_len();
        let mut images = Vec::with_capacity(observations.len() * il);
        let mut vectors = Vec::with_capacity(observations.len() * VECTOR_DIM);
        for o in observations {
            if o.image.len() != il {
                return Err(Error::Config(format!("image of {} values, model expects {il}", o.image.len())));
            }
            images.extend(o.image.iter().map(|&v| T::lit(v as f64)));
            vectors.extend(o.vector.iter().map(|&v| T::lit(v as f64)));
        }
        let n = observations.len();
        Ok((Tensor::from_vec(&[n, il], images)?, Tensor::from_vec(&[n, VECTOR_DIM], vectors)?))
    }

    /// Embedding rows for a set of observations.
    pub fn encode(&self, observations: &[&Observation]) -> Result<Tensor<T>> {
        let (images, vectors) = self.observation_tensors(observations)?;
        let mut g = Graph::new();
        let (i, v) = (g.input(images), g.input(vectors));
        let e = self.embed_g(&mut g, i, v);
        Ok(g.value(e).clone())
    }

    pub fn posterior_step(
        &self,
        prev: &RssmState<T>,
        action: &Tensor<T>,
        embed: &Tensor<T>,
        mode: SampleMode,
        rng: &mut impl Rng,
    ) -> RssmState<T> {
        let mut g = Graph::new();
        let p = StateVars::bind(&mut g, prev);
        let (a, e) = (g.input(action.clone()), g.input(embed.clone()));
        let (step, _) = self.posterior_step_g(&mut g, p, a, e, mode, rng);
        step.state.read(&g)
    }

    pub fn prior_step(&self, prev: &RssmState<T>, action: &Tensor<T>, mode: SampleMode, rng: &mut impl Rng) -> RssmState<T> {
        let mut g = Graph::new();
        let p = StateVars::bind(&mut g, prev);
        let a = g.input(action.clone());
        self.prior_step_g(&mut g, p, a, mode, rng).state.read(&g)
    }

    /// Posterior logits for `prev`, `action`, `embed` (no sampling).
    pub fn posterior_logits(&self, prev: &RssmState<T>, action: &Tensor<T>, embed: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let mut g = Graph::new();
        let p = StateVars::bind(&mut g, prev);
        let (a, e) = (g.input(action.clone()), g.input(embed.clone()));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (step, prior) = self.posterior_step_g(&mut g, p, a, e, SampleMode::Mode, &mut rng);
        (g.value(step.logits).clone(), g.value(prior).clone())
    }

    /// Decoded `(image, vector)`; the vector is mapped back from symlog space
    /// and laid out as `[q, p_obj, goal]` (flat) or `[q, goal]`
    /// (object-centric).
    pub fn decode(&self, state: &RssmState<T>) -> (Option<Tensor<T>>, Tensor<T>) {
        let mut g = Graph::new();
        let s = StateVars::bind(&mut g, state);
        let f = s.feat(&mut g);
        let (img, vec) = self.decode_g(&mut g, f);
        let v = g.symexp(vec);
        (img.map(|i| g.value(i).clone()), g.value(v).clone())
    }

    /// Decoded goal coordinates per row.
    pub fn decode_goal(&self, state: &RssmState<T>) -> Tensor<T> {
        let mut g = Graph::new();
        let s = StateVars::bind(&mut g, state);
        let f = s.feat(&mut g);
        let v = self.decode_goal_g(&mut g, f);
        let v = g.symexp(v);
        g.value(v).clone()
    }

    /// Decoded position of the placed entity per row.
    pub fn decode_object_position(&self, state: &RssmState<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let s = StateVars::bind(&mut g, state);
        let f = s.feat(&mut g);
        let v = self.decode_object_position_g(&mut g, f)?;
        let v = g.symexp(v);
        Ok(g.value(v).clone())
    }

    pub fn object_extract(&self, state: &RssmState<T>, obj: ObjectId) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let s = StateVars::bind(&mut g, state);
        let f = s.feat(&mut g);
        let v = self.extract_g(&mut g, f, obj)?;
        Ok(g.value(v).clone())
    }

    /// Returns `(rgb, mask_logit, position)` with the position in workspace
    /// units.
    pub fn object_decode(&self, latent: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let l = g.input(latent.clone());
        let d = self.object_decode_g(&mut g, l)?;
        let p = g.symexp(d.pos);
        Ok((g.value(d.rgb).clone(), g.value(d.mask_logit).clone(), g.value(p).clone()))
    }

    /// Object latents predicted from raw positions `[N, 2]`.
    pub fn latent_pos_encode(&self, positions: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = g.input(positions.clone());
        let v = self.pos_encode_g(&mut g, p)?;
        Ok(g.value(v).clone())
    }

    /// Predicted reward per row, mapped back from symlog space.
    pub fn reward_head(&self, state: &RssmState<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let s = StateVars::bind(&mut g, state);
        let f = s.feat(&mut g);
        let v = self.reward_g(&mut g, f)?;
        let v = g.symexp(v);
        Ok(g.value(v).clone())
    }

    /// Evaluates the loss without keeping gradients.
    pub fn loss(&self, batch: &SeqBatch<T>, scales: &LossScales, mode: SampleMode, rng: &mut impl Rng) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        g.freeze(&self.store);
        let vars = self.loss_g(&mut g, batch, scales, mode, rng)?;
        Ok(vars.breakdown(&g))
    }

    /// Filtered posterior states for a batch, `[L·B]` rows time-major.
    pub fn observe(&self, batch: &SeqBatch<T>, mode: SampleMode, rng: &mut impl Rng) -> Result<RssmState<T>> {
        let mut g = Graph::new();
        g.freeze(&self.store);
        let images = g.input(batch.images.clone());
        let vectors = g.input(batch.vectors.clone());
        let embed = self.embed_g(&mut g, images, vectors);
        let b = batch.batch;
        let mut state = StateVars::bind(&mut g, &self.initial_state(b));
        let (mut deters, mut stochs) = (vec![], vec![]);
        for t in 0..batch.length {
            let e = g.slice_rows(embed, t * b, b);
            let a = g.input(batch.actions.slice_rows(t * b, b));
            let (step, _) = self.posterior_step_g(&mut g, state, a, e, mode, rng);
            deters.push(g.value(step.state.deter).clone());
            stochs.push(g.value(step.state.stoch).clone());
            state = step.state;
        }
        let d: Vec<&Tensor<T>> = deters.iter().collect();
        let s: Vec<&Tensor<T>> = stochs.iter().collect();
        Ok(RssmState { deter: Tensor::concat_rows(&d)?, stoch: Tensor::concat_rows(&s)? })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": "world-model",
            "variant": self.config.variant,
            "config": self.config,
        }));
        ck.push_store("wm", &self.store);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: WmConfig = serde_json::from_value(
            ck.metadata.get("config").cloned().ok_or_else(|| Error::Config("checkpoint has no model config".into()))?,
        )?;
        let mut model = Self::new(config, 0)?;
        ck.load_store("wm", &mut model.store)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Pixel membership of one label across a batch.
#[derive(Clone, Debug)]
pub(crate) struct LabelMask {
    rows: usize,
    pixels: usize,
    on: Vec<bool>,
}

impl LabelMask {
    fn pixel_mask<T: Real>(&self) -> Tensor<T> {
        let data = self.on.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
        Tensor::from_vec(&[self.rows, self.pixels], data).expect("sized")
    }

    fn rgb_mask<T: Real>(&self) -> Tensor<T> {
        let data = self
            .on
            .iter()
            .flat_map(|&b| std::iter::repeat_n(if b { T::one() } else { T::zero() }, 3))
            .collect();
        Tensor::from_vec(&[self.rows, self.pixels * 3], data).expect("sized")
    }
}

/// Rescales each row to unit root-mean-square.
fn rms_normalize<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    let d = g.value(x).cols();
    let sq = g.square(x);
    let ms = g.sum_cols(sq);
    let ms = g.scale(ms, T::lit(1.0 / d as f64));
    let ms = g.add_scalar(ms, T::lit(1e-6));
    let rms = g.sqrt(ms);
    let inv = g.recip(rms);
    g.mul_col(x, inv)
}

fn label_masks(labels: &[u8], pixels: usize) -> Vec<LabelMask> {
    let rows = labels.len() / pixels;
    ObjectId::ALL
        .iter()
        .map(|obj| LabelMask { rows, pixels, on: labels.iter().map(|&l| l == obj.label()).collect() })
        .collect()
}
