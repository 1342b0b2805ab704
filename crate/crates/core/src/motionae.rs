//! Joint-aware and text-aware motion autoencoders.
//!
//! Encoding runs a shared joint transformer over the (J+1) pose tokens of
//! every frame (pose channels concatenated with zero-padded offsets), a
//! second joint transformer over the offsets alone, a temporal transformer
//! over the per-frame features, mask-aware mean pooling over windows of `l`
//! frames, and finally gathers the correspondence joints into the latent
//! code Z of shape (T_max/l, J_p, f_z). Decoding mirrors the pipeline:
//! zero-padding at non-primal joints, temporal replication, temporal and
//! joint transformers back to the T x (J+1) x 6 dynamic layout.
//!
//! Two linear/transformer heads tie Z to the text space: `latent_to_clip`
//! (a single linear map) and `clip_to_latent` (a causal transformer over
//! one text token followed by the temporal latent slots).

use crate::motion::{MotionError, MotionSequence};
use crate::real::Real;
use crate::skeleton::{PrimalCorrespondence, SkeletonGraph};
use crate::tensor::{Binding, Graph, Init, ParamRef, ParamStore, TensorError, TensorId};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("end effector counts differ: {0} vs {1}")]
    EndEffectorCountMismatch(usize, usize),
}

/// Architecture hyperparameters. The default values are the full-size
/// configuration; `desk` is small enough to train on a laptop CPU in
/// minutes and `toy` drives the gradient-check suite.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub joint_feat: usize,
    pub joint_layers: usize,
    pub joint_heads: usize,
    pub temporal_dim: usize,
    pub temporal_layers: usize,
    pub temporal_heads: usize,
    /// Temporal pooling factor l.
    pub pool: usize,
    pub t_max: usize,
    /// Correspondence slot count J_p.
    pub latent_joints: usize,
    /// Per-joint latent width f_z.
    pub latent_feat: usize,
    pub clip_dim: usize,
    pub caption_dim: usize,
    pub caption_layers: usize,
    pub caption_heads: usize,
    pub ffn_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            joint_feat: 16,
            joint_layers: 2,
            joint_heads: 4,
            temporal_dim: 256,
            temporal_layers: 2,
            temporal_heads: 4,
            pool: 4,
            t_max: 196,
            latent_joints: 7,
            latent_feat: 16,
            clip_dim: 512,
            caption_dim: 256,
            caption_layers: 4,
            caption_heads: 4,
            ffn_mult: 4,
        }
    }
}

impl ModelConfig {
    /// Small configuration for CPU training runs.
    pub fn desk() -> Self {
        ModelConfig {
            joint_feat: 8,
            joint_layers: 2,
            joint_heads: 1,
            temporal_dim: 32,
            temporal_layers: 2,
            temporal_heads: 4,
            pool: 4,
            t_max: 24,
            latent_joints: 7,
            latent_feat: 8,
            clip_dim: 128,
            caption_dim: 32,
            caption_layers: 2,
            caption_heads: 4,
            ffn_mult: 2,
        }
    }

    /// Tiny configuration for gradient checks and overfit runs on the
    /// 5-joint skeletons.
    pub fn toy() -> Self {
        ModelConfig {
            joint_feat: 8,
            joint_layers: 2,
            joint_heads: 2,
            temporal_dim: 16,
            temporal_layers: 2,
            temporal_heads: 2,
            pool: 4,
            t_max: 8,
            latent_joints: 4,
            latent_feat: 8,
            clip_dim: 16,
            caption_dim: 16,
            caption_layers: 2,
            caption_heads: 2,
            ffn_mult: 2,
        }
    }

    pub fn latent_slots(&self) -> usize {
        self.t_max / self.pool
    }

    pub fn latent_len(&self) -> usize {
        self.latent_slots() * self.latent_joints * self.latent_feat
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.t_max == 0 || self.pool == 0 || self.t_max % self.pool != 0 {
            return Err(ModelError::ConfigMismatch(format!(
                "t_max {} must be a positive multiple of pool {}",
                self.t_max, self.pool
            )));
        }
        for (name, dim, heads) in [
            ("joint", self.joint_feat, self.joint_heads),
            ("temporal", self.temporal_dim, self.temporal_heads),
            ("caption", self.caption_dim, self.caption_heads),
        ] {
            if dim == 0 || heads == 0 || dim % heads != 0 {
                return Err(ModelError::ConfigMismatch(format!(
                    "{name} width {dim} not divisible by {heads} heads"
                )));
            }
        }
        if self.latent_feat == 0 || self.latent_joints == 0 || self.clip_dim == 0 {
            return Err(ModelError::ConfigMismatch("zero-sized latent".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Transformer building block (pre-norm)
// ---------------------------------------------------------------------------

struct LayerParams {
    ln1_g: ParamRef,
    ln1_b: ParamRef,
    wq: ParamRef,
    bq: ParamRef,
    wk: ParamRef,
    bk: ParamRef,
    wv: ParamRef,
    bv: ParamRef,
    wo: ParamRef,
    bo: ParamRef,
    ln2_g: ParamRef,
    ln2_b: ParamRef,
    w1: ParamRef,
    b1: ParamRef,
    w2: ParamRef,
    b2: ParamRef,
}

pub(crate) struct TransformerParams {
    layers: Vec<LayerParams>,
    heads: usize,
}

fn linear_pair<R: Real>(
    store: &mut ParamStore<R>,
    name: &str,
    d_in: usize,
    d_out: usize,
    seed: u64,
) -> (ParamRef, ParamRef) {
    let w = store.register(&format!("{name}.w"), &[d_in, d_out], Init::FanIn(d_in), seed);
    let b = store.register(&format!("{name}.b"), &[d_out], Init::Zeros, seed);
    (w, b)
}

impl TransformerParams {
    fn register<R: Real>(
        store: &mut ParamStore<R>,
        prefix: &str,
        dim: usize,
        layers: usize,
        heads: usize,
        ffn_mult: usize,
        seed: u64,
    ) -> Self {
        let mut out = Vec::with_capacity(layers);
        let hidden = dim * ffn_mult;
        for l in 0..layers {
            let p = format!("{prefix}.l{l}");
            let (wq, bq) = linear_pair(store, &format!("{p}.attn.q"), dim, dim, seed);
            let (wk, bk) = linear_pair(store, &format!("{p}.attn.k"), dim, dim, seed);
            let (wv, bv) = linear_pair(store, &format!("{p}.attn.v"), dim, dim, seed);
            let (wo, bo) = linear_pair(store, &format!("{p}.attn.o"), dim, dim, seed);
            let (w1, b1) = linear_pair(store, &format!("{p}.ffn.in"), dim, hidden, seed);
            let (w2, b2) = linear_pair(store, &format!("{p}.ffn.out"), hidden, dim, seed);
            out.push(LayerParams {
                ln1_g: store.register(&format!("{p}.ln1.g"), &[dim], Init::Ones, seed),
                ln1_b: store.register(&format!("{p}.ln1.b"), &[dim], Init::Zeros, seed),
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln2_g: store.register(&format!("{p}.ln2.g"), &[dim], Init::Ones, seed),
                ln2_b: store.register(&format!("{p}.ln2.b"), &[dim], Init::Zeros, seed),
                w1,
                b1,
                w2,
                b2,
            });
        }
        TransformerParams { layers: out, heads }
    }

    fn forward<R: Real>(
        &self,
        g: &mut Graph<R>,
        bind: &Binding,
        mut x: TensorId,
        causal: bool,
        key_mask: Option<&[bool]>,
    ) -> Result<TensorId, TensorError> {
        for l in &self.layers {
            let ln1 = g.layer_norm(x, bind.id(l.ln1_g), bind.id(l.ln1_b))?;
            let q = g.linear(ln1, bind.id(l.wq), bind.id(l.bq))?;
            let k = g.linear(ln1, bind.id(l.wk), bind.id(l.bk))?;
            let v = g.linear(ln1, bind.id(l.wv), bind.id(l.bv))?;
            let att = g.multi_head_attention(q, k, v, self.heads, causal, key_mask)?;
            let proj = g.linear(att, bind.id(l.wo), bind.id(l.bo))?;
            x = g.add(x, proj)?;
            let ln2 = g.layer_norm(x, bind.id(l.ln2_g), bind.id(l.ln2_b))?;
            let h = g.linear(ln2, bind.id(l.w1), bind.id(l.b1))?;
            let h = g.gelu(h);
            let h = g.linear(h, bind.id(l.w2), bind.id(l.b2))?;
            x = g.add(x, h)?;
        }
        Ok(x)
    }
}

// ---------------------------------------------------------------------------
// Autoencoder parameters
// ---------------------------------------------------------------------------

pub struct AutoEncoder {
    pub skeleton_name: String,
    pub joint_count: usize,
    /// Token index per correspondence slot (root token is 0, non-root joint
    /// j sits at token j+1; token 1 is the translation row).
    pub gather_tokens: Vec<usize>,
    /// (J+1) x 3 offsets per token; zero rows for root and translation.
    token_offsets: Vec<f64>,
    pose_in: (ParamRef, ParamRef),
    joint_pos_enc: ParamRef,
    joint_enc: TransformerParams,
    off_in: (ParamRef, ParamRef),
    off_pos: ParamRef,
    off_enc: TransformerParams,
    temp_in_enc: (ParamRef, ParamRef),
    temp_pos_enc: ParamRef,
    temp_enc: TransformerParams,
    latent_head: (ParamRef, ParamRef),
    temp_in_dec: (ParamRef, ParamRef),
    temp_pos_dec: ParamRef,
    temp_dec: TransformerParams,
    frame_out: (ParamRef, ParamRef),
    joint_in_dec: (ParamRef, ParamRef),
    joint_pos_dec: ParamRef,
    joint_dec: TransformerParams,
    chan_out: (ParamRef, ParamRef),
    clip_head: (ParamRef, ParamRef),
    cap_c_in: (ParamRef, ParamRef),
    cap_z_in: (ParamRef, ParamRef),
    cap_pos: ParamRef,
    cap_dec: TransformerParams,
    cap_out: (ParamRef, ParamRef),
}

fn token_of(joint: usize) -> usize {
    if joint == 0 {
        0
    } else {
        joint + 1
    }
}

impl AutoEncoder {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        prefix: &str,
        cfg: &ModelConfig,
        skeleton: &SkeletonGraph,
        corr_joints: &[usize],
        seed: u64,
    ) -> Result<Self, ModelError> {
        cfg.validate()?;
        if corr_joints.len() != cfg.latent_joints {
            return Err(ModelError::ConfigMismatch(format!(
                "correspondence has {} slots, config expects {}",
                corr_joints.len(),
                cfg.latent_joints
            )));
        }
        let j = skeleton.joint_count();
        let tokens = j + 1;
        let fj = cfg.joint_feat;
        let dt = cfg.temporal_dim;
        let fz = cfg.latent_feat;
        let slots = cfg.latent_slots();
        let dcap = cfg.caption_dim;
        let mut token_offsets = vec![0.0f64; tokens * 3];
        for joint in 1..j {
            let off = skeleton.offset_of(joint);
            let tok = token_of(joint);
            token_offsets[tok * 3..tok * 3 + 3].copy_from_slice(&off);
        }
        let gather_tokens: Vec<usize> = corr_joints.iter().map(|&jid| token_of(jid)).collect();
        let reg_emb = |store: &mut ParamStore<R>, name: String, rows: usize, dim: usize| {
            store.register(&name, &[rows, dim], Init::FanIn(dim), seed)
        };
        let p = prefix;
        Ok(AutoEncoder {
            skeleton_name: skeleton.name.clone(),
            joint_count: j,
            gather_tokens,
            token_offsets,
            pose_in: linear_pair(store, &format!("{p}.enc.pose_in"), 9, fj, seed),
            joint_pos_enc: reg_emb(store, format!("{p}.enc.joint_pos"), tokens, fj),
            joint_enc: TransformerParams::register(
                store,
                &format!("{p}.enc.joint"),
                fj,
                cfg.joint_layers,
                cfg.joint_heads,
                cfg.ffn_mult,
                seed,
            ),
            off_in: linear_pair(store, &format!("{p}.enc.off_in"), 3, fj, seed),
            off_pos: reg_emb(store, format!("{p}.enc.off_pos"), tokens, fj),
            off_enc: TransformerParams::register(
                store,
                &format!("{p}.enc.off"),
                fj,
                cfg.joint_layers,
                cfg.joint_heads,
                cfg.ffn_mult,
                seed,
            ),
            temp_in_enc: linear_pair(store, &format!("{p}.enc.temp_in"), tokens * 2 * fj, dt, seed),
            temp_pos_enc: reg_emb(store, format!("{p}.enc.temp_pos"), cfg.t_max, dt),
            temp_enc: TransformerParams::register(
                store,
                &format!("{p}.enc.temp"),
                dt,
                cfg.temporal_layers,
                cfg.temporal_heads,
                cfg.ffn_mult,
                seed,
            ),
            latent_head: linear_pair(store, &format!("{p}.enc.latent"), dt, tokens * fz, seed),
            temp_in_dec: linear_pair(store, &format!("{p}.dec.temp_in"), tokens * fz, dt, seed),
            temp_pos_dec: reg_emb(store, format!("{p}.dec.temp_pos"), cfg.t_max, dt),
            temp_dec: TransformerParams::register(
                store,
                &format!("{p}.dec.temp"),
                dt,
                cfg.temporal_layers,
                cfg.temporal_heads,
                cfg.ffn_mult,
                seed,
            ),
            frame_out: linear_pair(store, &format!("{p}.dec.frame_out"), dt, tokens * fj, seed),
            joint_in_dec: linear_pair(store, &format!("{p}.dec.joint_in"), 2 * fj, fj, seed),
            joint_pos_dec: reg_emb(store, format!("{p}.dec.joint_pos"), tokens, fj),
            joint_dec: TransformerParams::register(
                store,
                &format!("{p}.dec.joint"),
                fj,
                cfg.joint_layers,
                cfg.joint_heads,
                cfg.ffn_mult,
                seed,
            ),
            chan_out: linear_pair(store, &format!("{p}.dec.chan_out"), fj, 6, seed),
            clip_head: linear_pair(
                store,
                &format!("{p}.text.clip_head"),
                cfg.latent_len(),
                cfg.clip_dim,
                seed,
            ),
            cap_c_in: linear_pair(store, &format!("{p}.text.c_in"), cfg.clip_dim, dcap, seed),
            cap_z_in: linear_pair(
                store,
                &format!("{p}.text.z_in"),
                cfg.latent_joints * fz,
                dcap,
                seed,
            ),
            cap_pos: reg_emb(store, format!("{p}.text.pos"), 1 + slots, dcap),
            cap_dec: TransformerParams::register(
                store,
                &format!("{p}.text.dec"),
                dcap,
                cfg.caption_layers,
                cfg.caption_heads,
                cfg.ffn_mult,
                seed,
            ),
            cap_out: linear_pair(
                store,
                &format!("{p}.text.out"),
                dcap,
                cfg.latent_joints * fz,
                seed,
            ),
        })
    }

    /// Offset feature tokens broadcast to `frames_total` frames:
    /// [frames_total, J+1, f_j].
    fn offset_features<R: Real>(
        &self,
        g: &mut Graph<R>,
        bind: &Binding,
        frames_total: usize,
    ) -> Result<TensorId, TensorError> {
        let tokens = self.joint_count + 1;
        let off = g.constant(
            &[1, tokens, 3],
            self.token_offsets.iter().map(|&v| R::from_f64(v)).collect(),
        );
        let x = g.linear(off, bind.id(self.off_in.0), bind.id(self.off_in.1))?;
        let x = g.add_broadcast(x, bind.id(self.off_pos))?;
        let f_off = self.off_enc.forward(g, bind, x, false, None)?;
        // [1, tokens, fj] -> tile over frames
        let fj = g.shape(f_off)[2];
        let flat = g.reshape(f_off, &[1, 1, tokens * fj])?;
        let tiled = g.replicate_mid(flat, frames_total)?;
        g.reshape(tiled, &[frames_total, tokens, fj])
    }

    /// Encode a dynamic tensor [B, T_max, (J+1)*6] into Z [B, S, J_p*f_z].
    pub fn encode<R: Real>(
        &self,
        g: &mut Graph<R>,
        bind: &Binding,
        cfg: &ModelConfig,
        dynamic: TensorId,
        mask: &[bool],
    ) -> Result<TensorId, ModelError> {
        let tokens = self.joint_count + 1;
        let shape = g.shape(dynamic).to_vec();
        if shape.len() != 3 || shape[1] != cfg.t_max || shape[2] != tokens * 6 {
            return Err(ModelError::ConfigMismatch(format!(
                "dynamic tensor {shape:?}, expected [B, {}, {}]",
                cfg.t_max,
                tokens * 6
            )));
        }
        let b = shape[0];
        let t = cfg.t_max;
        if mask.len() != b * t {
            return Err(ModelError::ConfigMismatch(format!(
                "mask has {} entries, expected {}",
                mask.len(),
                b * t
            )));
        }
        let bt = b * t;
        let fj = cfg.joint_feat;
        // pose tokens ++ per-token offsets
        let pose = g.reshape(dynamic, &[bt, tokens, 6])?;
        let off = g.constant(&[1, tokens, 3], {
            self.token_offsets.iter().map(|&v| R::from_f64(v)).collect()
        });
        let off_flat = g.reshape(off, &[1, 1, tokens * 3])?;
        let off_tiled = g.replicate_mid(off_flat, bt)?;
        let off_tiled = g.reshape(off_tiled, &[bt, tokens, 3])?;
        let x = g.concat(&[pose, off_tiled], 2)?;
        let x = g.linear(x, bind.id(self.pose_in.0), bind.id(self.pose_in.1))?;
        let x = g.add_broadcast(x, bind.id(self.joint_pos_enc))?;
        let f_j = self.joint_enc.forward(g, bind, x, false, None)?;
        // offsets branch
        let f_off = self.offset_features(g, bind, bt)?;
        // temporal transformer over concatenated per-frame features
        let cat = g.concat(&[f_j, f_off], 2)?;
        let frames = g.reshape(cat, &[b, t, tokens * 2 * fj])?;
        let frames = g.linear(frames, bind.id(self.temp_in_enc.0), bind.id(self.temp_in_enc.1))?;
        let frames = g.add_broadcast(frames, bind.id(self.temp_pos_enc))?;
        let f_t = self.temp_enc.forward(g, bind, frames, false, Some(mask))?;
        // mask-aware temporal pooling
        let pooled = g.masked_window_mean(f_t, cfg.pool, mask)?;
        // per-slot joint head, then primal gather
        let s = cfg.latent_slots();
        let per_joint = g.linear(pooled, bind.id(self.latent_head.0), bind.id(self.latent_head.1))?;
        let per_joint = g.reshape(per_joint, &[b * s, tokens, cfg.latent_feat])?;
        let gathered = g.gather_mid(per_joint, &self.gather_tokens)?;
        let z = g.reshape(gathered, &[b, s, cfg.latent_joints * cfg.latent_feat])?;
        Ok(z)
    }

    /// Decode Z [B, S, J_p*f_z] into a dynamic tensor [B, T_max, (J+1)*6].
    pub fn decode<R: Real>(
        &self,
        g: &mut Graph<R>,
        bind: &Binding,
        cfg: &ModelConfig,
        z: TensorId,
    ) -> Result<TensorId, ModelError> {
        let tokens = self.joint_count + 1;
        let s = cfg.latent_slots();
        let shape = g.shape(z).to_vec();
        if shape.len() != 3 || shape[1] != s || shape[2] != cfg.latent_joints * cfg.latent_feat {
            return Err(ModelError::ConfigMismatch(format!(
                "latent {shape:?}, expected [B, {s}, {}]",
                cfg.latent_joints * cfg.latent_feat
            )));
        }
        let b = shape[0];
        let t = cfg.t_max;
        let fj = cfg.joint_feat;
        let fz = cfg.latent_feat;
        // joint unpooling: zeros at non-primal tokens
        let zr = g.reshape(z, &[b * s, cfg.latent_joints, fz])?;
        let scattered = g.scatter_mid(zr, &self.gather_tokens, tokens)?;
        let slots = g.reshape(scattered, &[b, s, tokens * fz])?;
        // temporal unpooling: replicate each slot `pool` times
        let frames = g.replicate_mid(slots, cfg.pool)?;
        let frames = g.linear(frames, bind.id(self.temp_in_dec.0), bind.id(self.temp_in_dec.1))?;
        let frames = g.add_broadcast(frames, bind.id(self.temp_pos_dec))?;
        let f_t = self.temp_dec.forward(g, bind, frames, false, None)?;
        // back to per-joint tokens
        let per_frame = g.linear(f_t, bind.id(self.frame_out.0), bind.id(self.frame_out.1))?;
        let x = g.reshape(per_frame, &[b * t, tokens, fj])?;
        let f_off = self.offset_features(g, bind, b * t)?;
        let x = g.concat(&[x, f_off], 2)?;
        let x = g.linear(x, bind.id(self.joint_in_dec.0), bind.id(self.joint_in_dec.1))?;
        let x = g.add_broadcast(x, bind.id(self.joint_pos_dec))?;
        let x = self.joint_dec.forward(g, bind, x, false, None)?;
        let out = g.linear(x, bind.id(self.chan_out.0), bind.id(self.chan_out.1))?;
        Ok(g.reshape(out, &[b, t, tokens * 6])?)
    }

    /// Z [B, S, J_p*f_z] -> clip-space vectors [B, clip_dim].
    pub fn latent_to_clip<R: Real>(
        &self,
        g: &mut Graph<R>,
        bind: &Binding,
        cfg: &ModelConfig,
        z: TensorId,
    ) -> Result<TensorId, ModelError> {
        let b = g.shape(z)[0];
        if g.values(z).len() != b * cfg.latent_len() {
            return Err(ModelError::ConfigMismatch(format!(
                "latent shape {:?} does not flatten to {}",
                g.shape(z),
                cfg.latent_len()
            )));
        }
        let flat = g.reshape(z, &[b, cfg.latent_len()])?;
        Ok(g.linear(flat, bind.id(self.clip_head.0), bind.id(self.clip_head.1))?)
    }

    /// Causal text decoder: token 0 is the projected text embedding, tokens
    /// 1..=S are the projected latent slots; outputs a latent-shaped code.
    pub fn clip_to_latent<R: Real>(
        &self,
        g: &mut Graph<R>,
        bind: &Binding,
        cfg: &ModelConfig,
        c: TensorId,
        z: TensorId,
    ) -> Result<TensorId, ModelError> {
        let b = g.shape(z)[0];
        let s = cfg.latent_slots();
        if g.shape(c) != [b, cfg.clip_dim] {
            return Err(ModelError::ConfigMismatch(format!(
                "clip tensor {:?}, expected [{b}, {}]",
                g.shape(c),
                cfg.clip_dim
            )));
        }
        let c_tok = g.linear(c, bind.id(self.cap_c_in.0), bind.id(self.cap_c_in.1))?;
        let c_tok = g.reshape(c_tok, &[b, 1, cfg.caption_dim])?;
        let z_tok = g.linear(z, bind.id(self.cap_z_in.0), bind.id(self.cap_z_in.1))?;
        let seq = g.concat(&[c_tok, z_tok], 1)?;
        let seq = g.add_broadcast(seq, bind.id(self.cap_pos))?;
        let out = self.cap_dec.forward(g, bind, seq, true, None)?;
        let latent_tokens = g.slice_axis(out, 1, 1, s)?;
        Ok(g.linear(latent_tokens, bind.id(self.cap_out.0), bind.id(self.cap_out.1))?)
    }
}

// ---------------------------------------------------------------------------
// Batching and losses
// ---------------------------------------------------------------------------

/// Motions padded to T_max with their frame masks, ready for the graph.
pub struct MotionBatch {
    pub b: usize,
    pub width: usize,
    pub t_max: usize,
    pub dynamic: Vec<f64>,
    pub mask: Vec<bool>,
    pub real_frames: Vec<usize>,
}

impl MotionBatch {
    pub fn from_motions(
        motions: &[&MotionSequence],
        g: &SkeletonGraph,
        cfg: &ModelConfig,
    ) -> Result<MotionBatch, ModelError> {
        let j = g.joint_count();
        let width = (j + 1) * 6;
        let b = motions.len();
        let mut dynamic = Vec::with_capacity(b * cfg.t_max * width);
        let mut mask = Vec::with_capacity(b * cfg.t_max);
        let mut real_frames = Vec::with_capacity(b);
        for m in motions {
            m.validate(g)?;
            if m.frames > cfg.t_max {
                return Err(ModelError::ConfigMismatch(format!(
                    "motion has {} frames, t_max is {}",
                    m.frames, cfg.t_max
                )));
            }
            let padded = m.padded_to(cfg.t_max, j);
            dynamic.extend(padded.dynamic_tensor(j).iter().map(|&v| v as f64));
            mask.extend_from_slice(&padded.mask);
            real_frames.push(m.real_frames());
        }
        Ok(MotionBatch {
            b,
            width,
            t_max: cfg.t_max,
            dynamic,
            mask,
            real_frames,
        })
    }

    pub fn constant<R: Real>(&self, g: &mut Graph<R>) -> TensorId {
        g.constant(
            &[self.b, self.t_max, self.width],
            self.dynamic.iter().map(|&v| R::from_f64(v)).collect(),
        )
    }

    /// Element mask of the full dynamic layout (true on real frames).
    pub fn elem_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.b * self.t_max * self.width);
        for &m in &self.mask {
            out.extend(std::iter::repeat(m).take(self.width));
        }
        out
    }

    pub fn elem_denom(&self) -> f64 {
        (self.real_frames.iter().sum::<usize>() * self.width) as f64
    }

    /// Element mask selecting only the translation xyz channels of real
    /// frames (token 1, channels 0..3).
    pub fn translation_mask(&self) -> Vec<bool> {
        let mut out = vec![false; self.b * self.t_max * self.width];
        for (f, &m) in self.mask.iter().enumerate() {
            if m {
                let base = f * self.width + 6;
                out[base..base + 3].fill(true);
            }
        }
        out
    }

    pub fn translation_denom(&self) -> f64 {
        (self.real_frames.iter().sum::<usize>() * 3) as f64
    }
}

/// Scalar ids of the per-batch autoencoder losses.
pub struct AeLosses {
    pub z: TensorId,
    pub reconstruction: TensorId,
    pub f_text: TensorId,
    pub l_jrec: TensorId,
    pub l_clip: TensorId,
    pub l_trec: TensorId,
    pub l_trans: TensorId,
    /// l_jrec + lambda1*l_clip + lambda2*l_trec + w_trans*l_trans
    pub total: TensorId,
}

#[allow(clippy::too_many_arguments)]
pub fn ae_losses<R: Real>(
    g: &mut Graph<R>,
    bind: &Binding,
    ae: &AutoEncoder,
    cfg: &ModelConfig,
    batch: &MotionBatch,
    caption_emb: &[f64],
    lambda1: f64,
    lambda2: f64,
    w_trans: f64,
) -> Result<AeLosses, ModelError> {
    if caption_emb.len() != batch.b * cfg.clip_dim {
        return Err(ModelError::ConfigMismatch(format!(
            "{} caption values for batch of {} and clip_dim {}",
            caption_emb.len(),
            batch.b,
            cfg.clip_dim
        )));
    }
    let target = batch.constant(g);
    let z = ae.encode(g, bind, cfg, target, &batch.mask)?;
    let recon = ae.decode(g, bind, cfg, z)?;
    let elem_mask = batch.elem_mask();
    let l_jrec = g.masked_mse(recon, target, &elem_mask, batch.elem_denom())?;
    let c = g.constant(
        &[batch.b, cfg.clip_dim],
        caption_emb.iter().map(|&v| R::from_f64(v)).collect(),
    );
    let z_clip = ae.latent_to_clip(g, bind, cfg, z)?;
    let cos = g.cosine_rows(z_clip, c)?;
    let mean_cos = g.mean_all(cos);
    let l_clip = g.affine(mean_cos, -1.0, 1.0);
    let z_t = ae.clip_to_latent(g, bind, cfg, c, z)?;
    let f_text = ae.decode(g, bind, cfg, z_t)?;
    let l_trec = g.masked_mse(f_text, target, &elem_mask, batch.elem_denom())?;
    let t_mask = batch.translation_mask();
    let t_denom = batch.translation_denom();
    let l_trans_rec = g.masked_mse(recon, target, &t_mask, t_denom)?;
    let l_trans_text = g.masked_mse(f_text, target, &t_mask, t_denom)?;
    let l_trans = g.add(l_trans_rec, l_trans_text)?;
    let w_clip = g.affine(l_clip, lambda1, 0.0);
    let w_trec = g.affine(l_trec, lambda2, 0.0);
    let w_trans_t = g.affine(l_trans, w_trans, 0.0);
    let sum = g.add(l_jrec, w_clip)?;
    let sum = g.add(sum, w_trec)?;
    let total = g.add(sum, w_trans_t)?;
    Ok(AeLosses {
        z,
        reconstruction: recon,
        f_text,
        l_jrec,
        l_clip,
        l_trec,
        l_trans,
        total,
    })
}

/// Correspondence side selector.
pub fn corr_side<'a>(corr: &'a PrimalCorrespondence, side_a: bool) -> &'a [usize] {
    if side_a {
        &corr.map_a
    } else {
        &corr.map_b
    }
}
