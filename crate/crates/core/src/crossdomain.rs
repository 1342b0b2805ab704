//! Cross-domain semantic mapping: human latents drive the animal decoders,
//! supervised by latent consistency, clip-space similarity against the
//! subject-swapped caption, and end-effector velocity matching.

use crate::motion::{motion_from_dynamic, MotionSequence};
use crate::motionae::{ae_losses, AeLosses, AutoEncoder, ModelConfig, ModelError, MotionBatch};
use crate::real::Real;
use crate::rotmath::{self, RotError};
use crate::skeleton::{PrimalCorrespondence, SkeletonGraph, NO_PARENT};
use crate::tensor::{Binding, Graph, ParamStore, TensorId};
use crate::textembed::{EmbeddingProvider, SubjectSwapper, TextError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CrossError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Rotation(#[from] RotError),
}

/// Weights of the full objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub translation: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.1,
            lambda4: 1.0,
            lambda5: 100.0,
            translation: 1.0,
        }
    }
}

/// Both autoencoders plus everything they share. All parameters live in one
/// store so a single optimizer step updates the whole framework.
pub struct JointModel<R: Real> {
    pub cfg: ModelConfig,
    pub human_skel: SkeletonGraph,
    pub animal_skel: SkeletonGraph,
    pub corr: PrimalCorrespondence,
    pub human: AutoEncoder,
    pub animal: AutoEncoder,
    pub store: ParamStore<R>,
}

impl<R: Real> JointModel<R> {
    pub fn new(
        cfg: ModelConfig,
        human_skel: SkeletonGraph,
        animal_skel: SkeletonGraph,
        corr: PrimalCorrespondence,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let mut store = ParamStore::new();
        let human = AutoEncoder::new(&mut store, "h", &cfg, &human_skel, &corr.map_a, seed)?;
        let animal = AutoEncoder::new(&mut store, "a", &cfg, &animal_skel, &corr.map_b, seed)?;
        if human_skel.end_effector_ids.len() != animal_skel.end_effector_ids.len() {
            return Err(ModelError::EndEffectorCountMismatch(
                human_skel.end_effector_ids.len(),
                animal_skel.end_effector_ids.len(),
            ));
        }
        Ok(JointModel {
            cfg,
            human_skel,
            animal_skel,
            corr,
            human,
            animal,
            store,
        })
    }
}

// ---------------------------------------------------------------------------
// Differentiable forward kinematics
// ---------------------------------------------------------------------------

/// Gram-Schmidt 6D -> column-major 3x3 matrices inside the graph.
fn rot6d_to_mat9<R: Real>(
    g: &mut Graph<R>,
    rows6: TensorId,
) -> Result<TensorId, ModelError> {
    let a1 = g.slice_axis(rows6, 1, 0, 3)?;
    let a2 = g.slice_axis(rows6, 1, 3, 3)?;
    let b1 = g.normalize3(a1)?;
    let proj = g.dot3(b1, a2)?;
    let along = g.mul_bcast_last(proj, b1)?;
    let ortho = g.sub(a2, along)?;
    let b2 = g.normalize3(ortho)?;
    let b3 = g.cross3(b1, b2)?;
    Ok(g.concat(&[b1, b2, b3], 1)?)
}

/// End-effector velocities of a dynamic tensor [B, T, (J+1)*6], computed by
/// chaining world transforms down the tree: [B, T-1, E*3], forward
/// differences. Fully differentiable back into the dynamic tensor.
pub fn fk_ee_velocities_graph<R: Real>(
    g: &mut Graph<R>,
    dynamic: TensorId,
    skel: &SkeletonGraph,
) -> Result<TensorId, ModelError> {
    let shape = g.shape(dynamic).to_vec();
    let j = skel.joint_count();
    let tokens = j + 1;
    if shape.len() != 3 || shape[2] != tokens * 6 {
        return Err(ModelError::ConfigMismatch(format!(
            "dynamic tensor {shape:?} does not match skeleton with {j} joints"
        )));
    }
    let (b, t) = (shape[0], shape[1]);
    let rows = g.reshape(dynamic, &[b * t, tokens, 6])?;
    let mut world: Vec<Option<TensorId>> = vec![None; j];
    let mut pos: Vec<Option<TensorId>> = vec![None; j];
    for &joint in &skel.topological_order() {
        if skel.parents[joint] == NO_PARENT {
            let r6 = g.slice_axis(rows, 1, 0, 1)?;
            let r6 = g.reshape(r6, &[b * t, 6])?;
            world[joint] = Some(rot6d_to_mat9(g, r6)?);
            let tr = g.slice_axis(rows, 1, 1, 1)?;
            let tr = g.reshape(tr, &[b * t, 6])?;
            pos[joint] = Some(g.slice_axis(tr, 1, 0, 3)?);
        } else {
            let parent = skel.parents[joint] as usize;
            let pw = world[parent].expect("parent visited");
            let pp = pos[parent].expect("parent visited");
            let q6 = g.slice_axis(rows, 1, joint + 1, 1)?;
            let q6 = g.reshape(q6, &[b * t, 6])?;
            let local = rot6d_to_mat9(g, q6)?;
            world[joint] = Some(g.mat3_mul(pw, local)?);
            let step = g.mat3_vec_const(pw, skel.offset_of(joint))?;
            pos[joint] = Some(g.add(pp, step)?);
        }
    }
    let mut vels = Vec::with_capacity(skel.end_effector_ids.len());
    for &ee in &skel.end_effector_ids {
        let p = pos[ee].expect("end effector visited");
        let p = g.reshape(p, &[b, t, 3])?;
        let next = g.slice_axis(p, 1, 1, t - 1)?;
        let prev = g.slice_axis(p, 1, 0, t - 1)?;
        vels.push(g.sub(next, prev)?);
    }
    Ok(g.concat(&vels, 2)?)
}

/// Ground-truth end-effector velocities as graph constants, matching the
/// layout of `fk_ee_velocities_graph`.
fn ee_velocity_constant<R: Real>(
    g: &mut Graph<R>,
    motions: &[&MotionSequence],
    skel: &SkeletonGraph,
    t_max: usize,
) -> Result<TensorId, CrossError> {
    let e = skel.end_effector_ids.len();
    let b = motions.len();
    let mut vals = Vec::with_capacity(b * (t_max - 1) * e * 3);
    for m in motions {
        let padded = m.padded_to(t_max, skel.joint_count());
        let v = rotmath::end_effector_velocities(&padded, skel)?;
        vals.extend(v.velocities.iter().map(|&x| R::from_f64(x)));
    }
    Ok(g.constant(&[b, t_max - 1, e * 3], vals))
}

/// Velocity-element mask: frame pair (t, t+1) counts when both are real.
fn velocity_mask(batch: &MotionBatch, effectors: usize) -> (Vec<bool>, f64) {
    let t = batch.t_max;
    let width = effectors * 3;
    let mut mask = vec![false; batch.b * (t - 1) * width];
    let mut count = 0usize;
    for bi in 0..batch.b {
        for f in 0..t - 1 {
            if batch.mask[bi * t + f] && batch.mask[bi * t + f + 1] {
                let base = (bi * (t - 1) + f) * width;
                mask[base..base + width].fill(true);
                count += width;
            }
        }
    }
    (mask, count.max(1) as f64)
}

// ---------------------------------------------------------------------------
// Cross-domain losses
// ---------------------------------------------------------------------------

pub struct CrossLosses {
    pub z_h: TensorId,
    pub generated: TensorId,
    pub l_clip_cross: TensorId,
    pub l_cons: TensorId,
    pub l_ee: TensorId,
    /// lambda3*l_cons + lambda4*l_clip_cross + lambda5*l_ee
    pub total: TensorId,
}

/// Text decoder then motion decoder, both animal-side, driven by a human
/// latent and the subject-swapped caption embedding.
pub fn transfer<R: Real>(
    g: &mut Graph<R>,
    bind: &Binding,
    model: &JointModel<R>,
    z_h: TensorId,
    c_swap: TensorId,
) -> Result<TensorId, ModelError> {
    let z_t = model
        .animal
        .clip_to_latent(g, bind, &model.cfg, c_swap, z_h)?;
    model.animal.decode(g, bind, &model.cfg, z_t)
}

#[allow(clippy::too_many_arguments)]
pub fn cross_losses<R: Real>(
    g: &mut Graph<R>,
    bind: &Binding,
    model: &JointModel<R>,
    human_batch: &MotionBatch,
    human_motions: &[&MotionSequence],
    c_swap_emb: &[f64],
    weights: &LossWeights,
) -> Result<CrossLosses, CrossError> {
    let cfg = &model.cfg;
    if c_swap_emb.len() != human_batch.b * cfg.clip_dim {
        return Err(ModelError::ConfigMismatch(format!(
            "{} caption values for batch of {}",
            c_swap_emb.len(),
            human_batch.b
        ))
        .into());
    }
    let e_h = model.human_skel.end_effector_ids.len();
    let e_a = model.animal_skel.end_effector_ids.len();
    if e_h != e_a {
        return Err(ModelError::EndEffectorCountMismatch(e_h, e_a).into());
    }
    let dyn_h = human_batch.constant(g);
    let z_h = model
        .human
        .encode(g, bind, cfg, dyn_h, &human_batch.mask)?;
    let c_swap = g.constant(
        &[human_batch.b, cfg.clip_dim],
        c_swap_emb.iter().map(|&v| R::from_f64(v)).collect(),
    );
    // clip similarity of the human latent through the animal-side head
    let z_clip = model.animal.latent_to_clip(g, bind, cfg, z_h)?;
    let cos = g.cosine_rows(z_clip, c_swap)?;
    let mean_cos = g.mean_all(cos);
    let l_clip_cross = g.affine(mean_cos, -1.0, 1.0);
    // generated animal motion
    let generated = transfer(g, bind, model, z_h, c_swap)?;
    // latent consistency: re-encode the generated motion animal-side
    let z_re = model
        .animal
        .encode(g, bind, cfg, generated, &human_batch.mask)?;
    let l_cons = g.mse(z_h, z_re)?;
    // end-effector velocities, human ground truth vs generated animal
    let v_h = ee_velocity_constant(g, human_motions, &model.human_skel, cfg.t_max)?;
    let v_a = fk_ee_velocities_graph(g, generated, &model.animal_skel)?;
    let (vmask, vdenom) = velocity_mask(human_batch, e_h);
    let l_ee = g.masked_mse(v_a, v_h, &vmask, vdenom)?;
    let w_cons = g.affine(l_cons, weights.lambda3, 0.0);
    let w_clip = g.affine(l_clip_cross, weights.lambda4, 0.0);
    let w_ee = g.affine(l_ee, weights.lambda5, 0.0);
    let sum = g.add(w_cons, w_clip)?;
    let total = g.add(sum, w_ee)?;
    Ok(CrossLosses {
        z_h,
        generated,
        l_clip_cross,
        l_cons,
        l_ee,
        total,
    })
}

/// Every component of the full objective for one step.
pub struct TotalLosses {
    pub human: AeLosses,
    pub animal: AeLosses,
    pub cross: CrossLosses,
    pub total: TensorId,
}

#[allow(clippy::too_many_arguments)]
pub fn total_loss<R: Real>(
    g: &mut Graph<R>,
    bind: &Binding,
    model: &JointModel<R>,
    human_batch: &MotionBatch,
    human_motions: &[&MotionSequence],
    human_caps: &[f64],
    human_caps_swapped: &[f64],
    animal_batch: &MotionBatch,
    animal_caps: &[f64],
    weights: &LossWeights,
) -> Result<TotalLosses, CrossError> {
    let human = ae_losses(
        g,
        bind,
        &model.human,
        &model.cfg,
        human_batch,
        human_caps,
        weights.lambda1,
        weights.lambda2,
        weights.translation,
    )?;
    let animal = ae_losses(
        g,
        bind,
        &model.animal,
        &model.cfg,
        animal_batch,
        animal_caps,
        weights.lambda1,
        weights.lambda2,
        weights.translation,
    )?;
    let cross = cross_losses(
        g,
        bind,
        model,
        human_batch,
        human_motions,
        human_caps_swapped,
        weights,
    )?;
    let s = g.add(human.total, animal.total)?;
    let total = g.add(s, cross.total)?;
    Ok(TotalLosses {
        human,
        animal,
        cross,
        total,
    })
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// Generate an animal motion from a caption embedding and a source human
/// motion. The output inherits the source clip's real length and keeps the
/// decoder's raw 6D channels: the feature extractors re-encode generated
/// motions, and training's consistency loss saw exactly this form.
pub fn generate_motion_from_embedding<R: Real>(
    model: &JointModel<R>,
    c_emb: &[f64],
    human_motion: &MotionSequence,
    caption: &str,
) -> Result<MotionSequence, CrossError> {
    let cfg = &model.cfg;
    let batch = MotionBatch::from_motions(&[human_motion], &model.human_skel, cfg)?;
    let mut g: Graph<R> = Graph::new();
    let bind = model.store.bind(&mut g);
    let dyn_h = batch.constant(&mut g);
    let z_h = model.human.encode(&mut g, &bind, cfg, dyn_h, &batch.mask)?;
    let c = g.constant(
        &[1, cfg.clip_dim],
        c_emb.iter().map(|&v| R::from_f64(v)).collect(),
    );
    let generated = transfer(&mut g, &bind, model, z_h, c)?;
    let frames = human_motion.real_frames().min(cfg.t_max).max(2);
    let width = (model.animal_skel.joint_count() + 1) * 6;
    let vals: Vec<f32> = g.values(generated)[..frames * width]
        .iter()
        .map(|&v| v.to_f64() as f32)
        .collect();
    Ok(motion_from_dynamic(
        &model.animal_skel.name,
        &vals,
        model.animal_skel.joint_count(),
        frames,
        caption,
        vec![true; frames],
    ))
}

/// Subject-swap the caption, embed it, encode the source human motion, and
/// run the animal decoders. The final motion has its 6D channels rounded
/// through rotation matrices so downstream kinematics sees exact frames.
pub fn infer<R: Real>(
    model: &JointModel<R>,
    text: &str,
    human_motion: &MotionSequence,
    animal: &str,
    provider: &dyn EmbeddingProvider,
    swapper: &SubjectSwapper,
) -> Result<MotionSequence, CrossError> {
    let swapped = swapper.swap(text, animal)?;
    let c = provider.embed(&swapped)?;
    let mut out = generate_motion_from_embedding(model, &c, human_motion, &swapped)?;
    orthonormalize_channels(&mut out, model.animal_skel.joint_count())?;
    Ok(out)
}

/// Round every 6D channel through the rotation matrix so downstream
/// kinematics sees exactly orthonormal frames.
fn orthonormalize_channels(m: &mut MotionSequence, joint_count: usize) -> Result<(), RotError> {
    let fix6 = |chunk: &mut [f32]| -> Result<(), RotError> {
        let v: Vec<f64> = chunk.iter().map(|&x| x as f64).collect();
        let mat = rotmath::rot6d_to_matrix(&rotmath::Rotation6D::from_slice(&v))?;
        let r6 = rotmath::matrix_to_rot6d(&mat)?.to_vec();
        for (o, val) in chunk.iter_mut().zip(r6) {
            *o = val as f32;
        }
        Ok(())
    };
    for t in 0..m.frames {
        fix6(&mut m.global_rotation[t * 6..t * 6 + 6])?;
        for j in 1..joint_count {
            let row = (t * (joint_count - 1) + (j - 1)) * 6;
            fix6(&mut m.joint_rotations[row..row + 6])?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_motion;
    use crate::skeleton::{smal35, smpl22, smpl_smal_correspondence};
    use crate::textembed::{subject_swap, EmbeddingProvider, HashEmbedder};

    fn desk_model() -> JointModel<f64> {
        let cfg = ModelConfig::desk();
        let h = smpl22();
        let a = smal35();
        let corr = smpl_smal_correspondence(&h, &a);
        JointModel::new(cfg, h, a, corr, 11).unwrap()
    }

    fn human_pair(model: &JointModel<f64>) -> (Vec<MotionSequence>, Vec<f64>, Vec<f64>) {
        let m1 = generate_motion(&model.human_skel, "walk", 20, 3, 0).unwrap();
        let m2 = generate_motion(&model.human_skel, "wave", 22, 3, 1).unwrap();
        let embedder = HashEmbedder::new(model.cfg.clip_dim, 17);
        let caps = [
            "a person is walking forward at an easy pace",
            "a person is waving with the left arm",
        ];
        let mut emb = Vec::new();
        let mut emb_sw = Vec::new();
        for c in caps {
            emb.extend(embedder.embed(c).unwrap());
            emb_sw.extend(embedder.embed(&subject_swap(c, "dog").unwrap()).unwrap());
        }
        (vec![m1, m2], emb, emb_sw)
    }

    #[test]
    fn fk_graph_matches_plain_fk() {
        let a = smal35();
        let m = generate_motion(&a, "run", 12, 5, 2).unwrap();
        let oracle = rotmath::end_effector_velocities(&m, &a).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let dynamic = g.constant(
            &[1, m.frames, (a.joint_count() + 1) * 6],
            m.dynamic_tensor(a.joint_count())
                .iter()
                .map(|&v| v as f64)
                .collect(),
        );
        let v = fk_ee_velocities_graph(&mut g, dynamic, &a).unwrap();
        let got = g.values(v);
        assert_eq!(got.len(), oracle.velocities.len());
        for (x, y) in got.iter().zip(&oracle.velocities) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn transfer_output_shape_and_determinism() {
        let model = desk_model();
        let (motions, _, emb_sw) = human_pair(&model);
        let refs: Vec<&MotionSequence> = motions.iter().collect();
        let batch = MotionBatch::from_motions(&refs, &model.human_skel, &model.cfg).unwrap();
        let run = || -> Vec<f64> {
            let mut g = Graph::new();
            let bind = model.store.bind(&mut g);
            let d = batch.constant(&mut g);
            let z = model
                .human
                .encode(&mut g, &bind, &model.cfg, d, &batch.mask)
                .unwrap();
            let c = g.constant(&[2, model.cfg.clip_dim], emb_sw.clone());
            let out = transfer(&mut g, &bind, &model, z, c).unwrap();
            assert_eq!(
                g.shape(out),
                &[2, model.cfg.t_max, (model.animal_skel.joint_count() + 1) * 6]
            );
            g.values(out).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn cross_losses_match_naive_oracle() {
        let model = desk_model();
        let (motions, _, emb_sw) = human_pair(&model);
        let refs: Vec<&MotionSequence> = motions.iter().collect();
        let batch = MotionBatch::from_motions(&refs, &model.human_skel, &model.cfg).unwrap();
        let weights = LossWeights::default();
        let mut g = Graph::new();
        let bind = model.store.bind(&mut g);
        let losses =
            cross_losses(&mut g, &bind, &model, &batch, &refs, &emb_sw, &weights).unwrap();

        // naive recomputation of l_cons from raw buffers
        let z_h = g.values(losses.z_h);
        let generated = g.values(losses.generated).to_vec();
        {
            let mut g2 = Graph::new();
            let bind2 = model.store.bind(&mut g2);
            let gen_t = g2.constant(
                &[2, model.cfg.t_max, (model.animal_skel.joint_count() + 1) * 6],
                generated.clone(),
            );
            let z_re = model
                .animal
                .encode(&mut g2, &bind2, &model.cfg, gen_t, &batch.mask)
                .unwrap();
            let z_re = g2.values(z_re);
            let mse: f64 = z_h
                .iter()
                .zip(z_re)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / z_h.len() as f64;
            assert!((g.scalar(losses.l_cons) - mse).abs() < 1e-10);
        }
        // naive l_ee
        {
            let e = model.animal_skel.end_effector_ids.len();
            let t = model.cfg.t_max;
            let width = e * 3;
            let mut total = 0.0;
            let mut denom = 0.0;
            let mut va_all = Vec::new();
            for bi in 0..2 {
                let start = bi * t * (model.animal_skel.joint_count() + 1) * 6;
                let end = start + t * (model.animal_skel.joint_count() + 1) * 6;
                let vals: Vec<f32> = generated[start..end].iter().map(|&v| v as f32).collect();
                let m = motion_from_dynamic(
                    &model.animal_skel.name,
                    &vals,
                    model.animal_skel.joint_count(),
                    t,
                    "",
                    vec![true; t],
                );
                let v = rotmath::end_effector_velocities(&m, &model.animal_skel).unwrap();
                va_all.push(v);
            }
            for (bi, m) in motions.iter().enumerate() {
                let padded = m.padded_to(t, model.human_skel.joint_count());
                let vh = rotmath::end_effector_velocities(&padded, &model.human_skel).unwrap();
                for f in 0..t - 1 {
                    if padded.mask[f] && padded.mask[f + 1] {
                        for k in 0..width {
                            let a = va_all[bi].velocities[f * width + k];
                            let b = vh.velocities[f * width + k];
                            total += (a - b) * (a - b);
                            denom += 1.0;
                        }
                    }
                }
            }
            let expect = total / denom;
            // the graph FK uses f64 constants converted from f32 motion data,
            // identical inputs; agreement is tight
            assert!(
                (g.scalar(losses.l_ee) - expect).abs() < 1e-8,
                "{} vs {expect}",
                g.scalar(losses.l_ee)
            );
        }
        // weighted sum
        let expect_total = weights.lambda3 * g.scalar(losses.l_cons)
            + weights.lambda4 * g.scalar(losses.l_clip_cross)
            + weights.lambda5 * g.scalar(losses.l_ee);
        assert!((g.scalar(losses.total) - expect_total).abs() < 1e-9);
    }

    #[test]
    fn clip_cross_is_scale_invariant_in_caption() {
        let model = desk_model();
        let (motions, _, emb_sw) = human_pair(&model);
        let refs: Vec<&MotionSequence> = motions.iter().collect();
        let batch = MotionBatch::from_motions(&refs, &model.human_skel, &model.cfg).unwrap();
        let weights = LossWeights::default();
        let eval = |emb: &[f64]| -> f64 {
            let mut g = Graph::new();
            let bind = model.store.bind(&mut g);
            let l = cross_losses(&mut g, &bind, &model, &batch, &refs, emb, &weights).unwrap();
            g.scalar(l.l_clip_cross)
        };
        let base = eval(&emb_sw);
        let scaled: Vec<f64> = emb_sw.iter().map(|v| v * 37.5).collect();
        assert!((base - eval(&scaled)).abs() < 1e-9);
        assert!((0.0..=2.0).contains(&base));
    }

    #[test]
    fn ee_loss_invariant_to_shared_constant_offset() {
        // adding the same constant translation offset to both motions reuses
        // the velocity definition, so the loss is unchanged
        let model = desk_model();
        let h = &model.human_skel;
        let m = generate_motion(h, "walk", 16, 3, 4).unwrap();
        let mut shifted = m.clone();
        for t in 0..shifted.frames {
            shifted.global_translation[t * 3] += 2.5;
            shifted.global_translation[t * 3 + 1] -= 1.0;
        }
        let va = rotmath::end_effector_velocities(&m, h).unwrap();
        let vb = rotmath::end_effector_velocities(&shifted, h).unwrap();
        for (a, b) in va.velocities.iter().zip(&vb.velocities) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_cross_weights_decouple_the_autoencoders() {
        let model = desk_model();
        let (motions, emb, emb_sw) = human_pair(&model);
        let refs: Vec<&MotionSequence> = motions.iter().collect();
        let h_batch = MotionBatch::from_motions(&refs, &model.human_skel, &model.cfg).unwrap();
        let am = generate_motion(&model.animal_skel, "walk", 14, 3, 0).unwrap();
        let a_batch =
            MotionBatch::from_motions(&[&am], &model.animal_skel, &model.cfg).unwrap();
        let embedder = HashEmbedder::new(model.cfg.clip_dim, 17);
        let a_caps = embedder
            .embed("a dog is walking forward at an easy pace")
            .unwrap();
        let weights = LossWeights {
            lambda3: 0.0,
            lambda4: 0.0,
            lambda5: 0.0,
            ..LossWeights::default()
        };
        // grads of human-side parameters under the full objective with zero
        // cross weights
        let mut g = Graph::new();
        let bind = model.store.bind(&mut g);
        let all = total_loss(
            &mut g, &bind, &model, &h_batch, &refs, &emb, &emb_sw, &a_batch, &a_caps, &weights,
        )
        .unwrap();
        g.backward(all.total).unwrap();
        let full_grads = model.store.collect_grads(&g, &bind);
        // grads of the human autoencoder objective alone
        let mut g2 = Graph::new();
        let bind2 = model.store.bind(&mut g2);
        let human_only = ae_losses(
            &mut g2,
            &bind2,
            &model.human,
            &model.cfg,
            &h_batch,
            &emb,
            weights.lambda1,
            weights.lambda2,
            weights.translation,
        )
        .unwrap();
        g2.backward(human_only.total).unwrap();
        let human_grads = model.store.collect_grads(&g2, &bind2);
        for (i, e) in model.store.entries.iter().enumerate() {
            if e.name.starts_with("h.") {
                assert_eq!(
                    full_grads[i], human_grads[i],
                    "human grad differs for {}",
                    e.name
                );
            }
        }
    }

    #[test]
    fn infer_produces_valid_motion() {
        let model = desk_model();
        let m = generate_motion(&model.human_skel, "walk", 20, 3, 0).unwrap();
        let embedder = HashEmbedder::new(model.cfg.clip_dim, 17);
        let out = infer(
            &model,
            "a person is walking forward at an easy pace",
            &m,
            "dog",
            &embedder,
            &SubjectSwapper::default(),
        )
        .unwrap();
        out.validate(&model.animal_skel).unwrap();
        assert_eq!(out.frames, m.frames);
        assert_eq!(out.caption, "a dog is walking forward at an easy pace");
        let fk = rotmath::forward_kinematics(&out, &model.animal_skel).unwrap();
        assert!(fk.positions.iter().all(|v| v.is_finite()));
        // determinism
        let again = infer(
            &model,
            "a person is walking forward at an easy pace",
            &m,
            "dog",
            &embedder,
            &SubjectSwapper::default(),
        )
        .unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn infer_rejects_unknown_subject() {
        let model = desk_model();
        let m = generate_motion(&model.human_skel, "walk", 20, 3, 0).unwrap();
        let embedder = HashEmbedder::new(model.cfg.clip_dim, 17);
        assert!(matches!(
            infer(
                &model,
                "running very fast",
                &m,
                "dog",
                &embedder,
                &SubjectSwapper::default()
            ),
            Err(CrossError::Text(TextError::SubjectNotFound(_)))
        ));
    }

    #[test]
    fn random_init_has_nonzero_gradient() {
        let model = desk_model();
        let (motions, emb, emb_sw) = human_pair(&model);
        let refs: Vec<&MotionSequence> = motions.iter().collect();
        let h_batch = MotionBatch::from_motions(&refs, &model.human_skel, &model.cfg).unwrap();
        let am = generate_motion(&model.animal_skel, "run", 14, 3, 0).unwrap();
        let a_batch =
            MotionBatch::from_motions(&[&am], &model.animal_skel, &model.cfg).unwrap();
        let embedder = HashEmbedder::new(model.cfg.clip_dim, 17);
        let a_caps = embedder.embed("a dog is running forward quickly").unwrap();
        let mut g = Graph::new();
        let bind = model.store.bind(&mut g);
        let all = total_loss(
            &mut g,
            &bind,
            &model,
            &h_batch,
            &refs,
            &emb,
            &emb_sw,
            &a_batch,
            &a_caps,
            &LossWeights::default(),
        )
        .unwrap();
        g.backward(all.total).unwrap();
        let grads = model.store.collect_grads(&g, &bind);
        let norm: f64 = grads
            .iter()
            .flat_map(|v| v.iter())
            .map(|&x| x * x)
            .sum::<f64>()
            .sqrt();
        assert!(norm > 1e-6, "gradient norm {norm}");
    }
}
