//! Joint optimization loop: human autoencoder, animal autoencoder and the
//! cross-domain objective advance together in one Adam step per iteration.
//!
//! Batch selection, caption choice and subject-swap targets are all keyed by
//! (seed, step), never by mutable generator state, so a resumed run replays
//! the exact sample sequence of an uninterrupted one.

use crate::crossdomain::{total_loss, CrossError, JointModel, LossWeights};
use crate::datagen::Dataset;
use crate::motion::MotionSequence;
use crate::motionae::MotionBatch;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::{
    adam_step, clip_global_norm, load_checkpoint, save_checkpoint, AdamState, CheckpointError,
    EmaState, Graph, NamedTensor, OptimError,
};
use crate::textembed::{EmbeddingProvider, SubjectSwapper, TextError};
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty: {0}")]
    DataEmpty(String),
    #[error("non-finite loss component `{component}` = {value} at step {step}")]
    NanLoss {
        component: String,
        value: f64,
        step: u64,
    },
    #[error(transparent)]
    Cross(#[from] CrossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint does not match the model: {0}")]
    CheckpointShape(String),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub ema_decay: f64,
    /// Global gradient-norm ceiling; None disables clipping.
    pub grad_clip: Option<f64>,
    pub log_interval: u64,
    pub checkpoint_interval: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 16,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            ema_decay: 0.99,
            grad_clip: Some(1.0),
            log_interval: 1,
            checkpoint_interval: 1000,
            seed: 0,
        }
    }
}

/// Every loss component of one step, in history-file column order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossComponents {
    pub step: u64,
    pub jrec_h: f64,
    pub clip_h: f64,
    pub trec_h: f64,
    pub trans_h: f64,
    pub jrec_a: f64,
    pub clip_a: f64,
    pub trec_a: f64,
    pub trans_a: f64,
    pub cons: f64,
    pub clip_x: f64,
    pub ee: f64,
    pub total: f64,
}

pub const HISTORY_HEADER: &str =
    "step,L_jrec_h,L_CLIP_h,L_trec_h,L_trans_h,L_jrec_a,L_CLIP_a,L_trec_a,L_trans_a,L_cons,L_CLIP_x,L_ee,L_total";

impl LossComponents {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.step,
            self.jrec_h,
            self.clip_h,
            self.trec_h,
            self.trans_h,
            self.jrec_a,
            self.clip_a,
            self.trec_a,
            self.trans_a,
            self.cons,
            self.clip_x,
            self.ee,
            self.total,
        )
    }

    pub fn named(&self) -> [(&'static str, f64); 12] {
        [
            ("L_jrec_h", self.jrec_h),
            ("L_CLIP_h", self.clip_h),
            ("L_trec_h", self.trec_h),
            ("L_trans_h", self.trans_h),
            ("L_jrec_a", self.jrec_a),
            ("L_CLIP_a", self.clip_a),
            ("L_trec_a", self.trec_a),
            ("L_trans_a", self.trans_a),
            ("L_cons", self.cons),
            ("L_CLIP_x", self.clip_x),
            ("L_ee", self.ee),
            ("L_total", self.total),
        ]
    }
}

/// Append-only loss history; the header is written once and every row is
/// flushed so the file stays parseable after an abnormal stop.
pub struct HistoryWriter {
    file: std::fs::File,
}

impl HistoryWriter {
    pub fn create(path: &Path) -> Result<Self, TrainError> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "{HISTORY_HEADER}")?;
        file.flush()?;
        Ok(HistoryWriter { file })
    }

    pub fn append_to(path: &Path) -> Result<Self, TrainError> {
        let file = std::fs::OpenOptions::new().append(true).open(path)?;
        Ok(HistoryWriter { file })
    }

    pub fn write(&mut self, row: &LossComponents) -> Result<(), TrainError> {
        writeln!(self.file, "{}", row.csv_row())?;
        self.file.flush()?;
        Ok(())
    }
}

pub struct Trainer<R: Real> {
    pub model: JointModel<R>,
    pub adam: AdamState<R>,
    pub ema: EmaState<R>,
    pub cfg: TrainConfig,
    pub weights: LossWeights,
    pub step: u64,
    embed_cache: HashMap<String, Vec<f64>>,
}

impl<R: Real> Trainer<R> {
    pub fn new(model: JointModel<R>, cfg: TrainConfig, weights: LossWeights) -> Self {
        let adam = AdamState::new(&model.store, cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon);
        let ema = EmaState::new(&model.store, cfg.ema_decay);
        Trainer {
            model,
            adam,
            ema,
            cfg,
            weights,
            step: 0,
            embed_cache: HashMap::new(),
        }
    }

    fn embed(
        &mut self,
        provider: &dyn EmbeddingProvider,
        text: &str,
    ) -> Result<Vec<f64>, TrainError> {
        if let Some(v) = self.embed_cache.get(text) {
            return Ok(v.clone());
        }
        let v = provider.embed(text)?;
        self.embed_cache.insert(text.to_string(), v.clone());
        Ok(v)
    }

    /// One optimization step over a human batch and an animal batch.
    pub fn train_step(
        &mut self,
        human: &Dataset,
        animal: &Dataset,
        animals: &[String],
        provider: &dyn EmbeddingProvider,
        swapper: &SubjectSwapper,
    ) -> Result<LossComponents, TrainError> {
        if human.is_empty() {
            return Err(TrainError::DataEmpty("human".into()));
        }
        if animal.is_empty() {
            return Err(TrainError::DataEmpty("animal".into()));
        }
        let step = self.step;
        let mut rng = Rng::keyed(self.cfg.seed, &[0x57e9, step]);
        let b = self.cfg.batch_size;
        let mut h_motions: Vec<&MotionSequence> = Vec::with_capacity(b);
        let mut h_caps: Vec<f64> = Vec::new();
        let mut h_caps_swapped: Vec<f64> = Vec::new();
        let mut pending: Vec<(String, String)> = Vec::with_capacity(b);
        for _ in 0..b {
            let item = &human.items[rng.below(human.len())];
            let caption = item.captions[rng.below(3)].clone();
            let animal_name = animals[rng.below(animals.len())].clone();
            h_motions.push(&item.motion);
            pending.push((caption, animal_name));
        }
        for (caption, animal_name) in &pending {
            h_caps.extend(self.embed(provider, caption)?);
            let swapped = swapper
                .swap(caption, animal_name)
                .unwrap_or_else(|_| format!("a {animal_name} {caption}"));
            h_caps_swapped.extend(self.embed(provider, &swapped)?);
        }
        let mut a_motions: Vec<&MotionSequence> = Vec::with_capacity(b);
        let mut a_pending: Vec<String> = Vec::with_capacity(b);
        for _ in 0..b {
            let item = &animal.items[rng.below(animal.len())];
            a_motions.push(&item.motion);
            a_pending.push(item.captions[rng.below(3)].clone());
        }
        let mut a_caps: Vec<f64> = Vec::new();
        for caption in &a_pending {
            a_caps.extend(self.embed(provider, caption)?);
        }

        let h_batch =
            MotionBatch::from_motions(&h_motions, &self.model.human_skel, &self.model.cfg)
                .map_err(CrossError::from)?;
        let a_batch =
            MotionBatch::from_motions(&a_motions, &self.model.animal_skel, &self.model.cfg)
                .map_err(CrossError::from)?;

        let mut g: Graph<R> = Graph::new();
        let bind = self.model.store.bind(&mut g);
        let losses = total_loss(
            &mut g,
            &bind,
            &self.model,
            &h_batch,
            &h_motions,
            &h_caps,
            &h_caps_swapped,
            &a_batch,
            &a_caps,
            &self.weights,
        )?;
        let components = LossComponents {
            step,
            jrec_h: g.scalar(losses.human.l_jrec).to_f64(),
            clip_h: g.scalar(losses.human.l_clip).to_f64(),
            trec_h: g.scalar(losses.human.l_trec).to_f64(),
            trans_h: g.scalar(losses.human.l_trans).to_f64(),
            jrec_a: g.scalar(losses.animal.l_jrec).to_f64(),
            clip_a: g.scalar(losses.animal.l_clip).to_f64(),
            trec_a: g.scalar(losses.animal.l_trec).to_f64(),
            trans_a: g.scalar(losses.animal.l_trans).to_f64(),
            cons: g.scalar(losses.cross.l_cons).to_f64(),
            clip_x: g.scalar(losses.cross.l_clip_cross).to_f64(),
            ee: g.scalar(losses.cross.l_ee).to_f64(),
            total: g.scalar(losses.total).to_f64(),
        };
        for (name, value) in components.named() {
            if !value.is_finite() {
                return Err(TrainError::NanLoss {
                    component: name.to_string(),
                    value,
                    step,
                });
            }
        }
        g.backward(losses.total).map_err(ModelTensor)?;
        let mut grads = self.model.store.collect_grads(&g, &bind);
        drop(g);
        if let Some(max_norm) = self.cfg.grad_clip {
            clip_global_norm(&mut grads, max_norm);
        }
        adam_step(&mut self.model.store, &grads, &mut self.adam)?;
        self.ema.update(&self.model.store)?;
        self.step += 1;
        Ok(components)
    }

    /// Checkpoint layout: `p/` parameters, `m/` and `v/` Adam moments,
    /// `e/` EMA shadows, `meta/step`.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut tensors = Vec::new();
        for (i, e) in self.model.store.entries.iter().enumerate() {
            let to_f32 = |v: &[R]| v.iter().map(|&x| x.to_f64() as f32).collect::<Vec<f32>>();
            tensors.push(NamedTensor {
                name: format!("p/{}", e.name),
                dims: e.shape.clone(),
                data: to_f32(&e.values),
            });
            tensors.push(NamedTensor {
                name: format!("m/{}", e.name),
                dims: e.shape.clone(),
                data: to_f32(&self.adam.m[i]),
            });
            tensors.push(NamedTensor {
                name: format!("v/{}", e.name),
                dims: e.shape.clone(),
                data: to_f32(&self.adam.v[i]),
            });
            tensors.push(NamedTensor {
                name: format!("e/{}", e.name),
                dims: e.shape.clone(),
                data: to_f32(&self.ema.shadow[i]),
            });
        }
        tensors.push(NamedTensor {
            name: "meta/step".into(),
            dims: vec![1],
            data: vec![self.step as f32],
        });
        save_checkpoint(path, &tensors)?;
        Ok(())
    }

    /// Restore parameters, optimizer moments, EMA shadows and the step
    /// counter from a checkpoint written by `save`.
    pub fn load(&mut self, path: &Path) -> Result<(), TrainError> {
        let tensors = load_checkpoint(path)?;
        let by_name: HashMap<&str, &NamedTensor> =
            tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let from_f32 = |t: &NamedTensor| t.data.iter().map(|&x| R::from_f64(x as f64)).collect();
        for (i, e) in self.model.store.entries.iter_mut().enumerate() {
            for (prefix, what) in [("p", "parameter"), ("m", "moment"), ("v", "moment"), ("e", "shadow")] {
                let key = format!("{prefix}/{}", e.name);
                let t = by_name.get(key.as_str()).ok_or_else(|| {
                    TrainError::CheckpointShape(format!("missing {what} `{key}`"))
                })?;
                if t.dims != e.shape {
                    return Err(TrainError::CheckpointShape(format!(
                        "`{key}` has dims {:?}, expected {:?}",
                        t.dims, e.shape
                    )));
                }
                match prefix {
                    "p" => e.values = from_f32(t),
                    "m" => self.adam.m[i] = from_f32(t),
                    "v" => self.adam.v[i] = from_f32(t),
                    _ => self.ema.shadow[i] = from_f32(t),
                }
            }
        }
        let step_t = by_name
            .get("meta/step")
            .ok_or_else(|| TrainError::CheckpointShape("missing meta/step".into()))?;
        self.step = step_t.data[0] as u64;
        self.adam.step = self.step;
        Ok(())
    }

    /// Parameters only, using the evaluation weights (EMA shadows when
    /// `use_ema`). The returned tensors feed model loading for inference.
    pub fn eval_params(&self, use_ema: bool) -> Vec<NamedTensor> {
        self.model
            .store
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let src: &[R] = if use_ema {
                    &self.ema.shadow[i]
                } else {
                    &e.values
                };
                NamedTensor {
                    name: format!("p/{}", e.name),
                    dims: e.shape.clone(),
                    data: src.iter().map(|&x| x.to_f64() as f32).collect(),
                }
            })
            .collect()
    }
}

/// Load just the parameter section of a trainer checkpoint into a freshly
/// built model, optionally preferring the EMA shadows.
pub fn load_model_params<R: Real>(
    model: &mut JointModel<R>,
    path: &Path,
    use_ema: bool,
) -> Result<u64, TrainError> {
    let tensors = load_checkpoint(path)?;
    let by_name: HashMap<&str, &NamedTensor> =
        tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let prefix = if use_ema { "e" } else { "p" };
    for e in model.store.entries.iter_mut() {
        let key = format!("{prefix}/{}", e.name);
        let t = by_name
            .get(key.as_str())
            .ok_or_else(|| TrainError::CheckpointShape(format!("missing `{key}`")))?;
        if t.dims != e.shape {
            return Err(TrainError::CheckpointShape(format!(
                "`{key}` has dims {:?}, expected {:?}",
                t.dims, e.shape
            )));
        }
        e.values = t.data.iter().map(|&x| R::from_f64(x as f64)).collect();
    }
    let step = by_name
        .get("meta/step")
        .map(|t| t.data[0] as u64)
        .unwrap_or(0);
    Ok(step)
}

// small helper so `?` converts TensorError through CrossError
#[allow(non_snake_case)]
fn ModelTensor(e: crate::tensor::TensorError) -> TrainError {
    TrainError::Cross(CrossError::Tensor(e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, DatasetSpec, SubjectKind, FAMILY_NAMES};
    use crate::gradcheck::{toy_animal, toy_correspondence, toy_human};
    use crate::motionae::ModelConfig;
    use crate::textembed::HashEmbedder;

    fn toy_datasets() -> (Dataset, Dataset) {
        let h = toy_human();
        let a = toy_animal();
        let hspec = DatasetSpec {
            seed: 3,
            skeleton: h.name.clone(),
            subject: SubjectKind::Human,
            families: FAMILY_NAMES[..3].iter().map(|s| s.to_string()).collect(),
            samples_per_family: 3,
            frames_min: 5,
            frames_max: 8,
            train_fraction: 1.0,
        };
        let aspec = DatasetSpec {
            seed: 4,
            skeleton: a.name.clone(),
            subject: SubjectKind::Animal(vec!["dog".into(), "bear".into()]),
            families: FAMILY_NAMES[..3].iter().map(|s| s.to_string()).collect(),
            samples_per_family: 3,
            frames_min: 5,
            frames_max: 8,
            train_fraction: 1.0,
        };
        (generate(&hspec, &h).unwrap(), generate(&aspec, &a).unwrap())
    }

    fn toy_trainer(seed: u64) -> Trainer<f32> {
        let h = toy_human();
        let a = toy_animal();
        let corr = toy_correspondence(&h, &a);
        let model = JointModel::new(ModelConfig::toy(), h, a, corr, seed).unwrap();
        let cfg = TrainConfig {
            steps: 50,
            batch_size: 4,
            seed,
            ..TrainConfig::default()
        };
        Trainer::new(model, cfg, LossWeights::default())
    }

    fn run_steps(t: &mut Trainer<f32>, n: u64) -> Vec<LossComponents> {
        let (hds, ads) = toy_datasets();
        let provider = HashEmbedder::new(t.model.cfg.clip_dim, 17);
        let swapper = SubjectSwapper::default();
        let animals = vec!["dog".to_string(), "bear".to_string()];
        (0..n)
            .map(|_| {
                t.train_step(&hds, &ads, &animals, &provider, &swapper)
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn fifty_steps_all_finite() {
        let mut t = toy_trainer(5);
        let history = run_steps(&mut t, 50);
        assert_eq!(history.len(), 50);
        for row in &history {
            for (_, v) in row.named() {
                assert!(v.is_finite());
            }
        }
        assert_eq!(t.step, 50);
    }

    #[test]
    fn total_equals_weighted_component_sum() {
        let mut t = toy_trainer(6);
        let row = run_steps(&mut t, 1)[0];
        let w = t.weights;
        let expect = row.jrec_h
            + w.lambda1 * row.clip_h
            + w.lambda2 * row.trec_h
            + w.translation * row.trans_h
            + row.jrec_a
            + w.lambda1 * row.clip_a
            + w.lambda2 * row.trec_a
            + w.translation * row.trans_a
            + w.lambda3 * row.cons
            + w.lambda4 * row.clip_x
            + w.lambda5 * row.ee;
        assert!((row.total - expect).abs() < 1e-6, "{} vs {expect}", row.total);
    }

    #[test]
    fn identical_seeds_identical_history() {
        let mut t1 = toy_trainer(9);
        let mut t2 = toy_trainer(9);
        assert_eq!(run_steps(&mut t1, 12), run_steps(&mut t2, 12));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = std::env::temp_dir().join("omgpt_resume_test");
        std::fs::create_dir_all(&dir).unwrap();
        let ckpt = dir.join("mid.omgt");

        let mut straight = toy_trainer(13);
        run_steps(&mut straight, 30);

        let mut first = toy_trainer(13);
        run_steps(&mut first, 18);
        first.save(&ckpt).unwrap();
        let mut resumed = toy_trainer(13);
        resumed.load(&ckpt).unwrap();
        assert_eq!(resumed.step, 18);
        run_steps(&mut resumed, 12);

        for (i, (a, b)) in straight
            .model
            .store
            .entries
            .iter()
            .zip(&resumed.model.store.entries)
            .enumerate()
        {
            assert_eq!(a.values, b.values, "entry {i} `{}`", a.name);
        }
        for (a, b) in straight.ema.shadow.iter().zip(&resumed.ema.shadow) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn corrupt_checkpoint_is_version_mismatch() {
        let dir = std::env::temp_dir().join("omgpt_resume_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("corrupt.omgt");
        std::fs::write(&path, b"garbage").unwrap();
        let mut t = toy_trainer(1);
        assert!(matches!(
            t.load(&path),
            Err(TrainError::Checkpoint(CheckpointError::VersionMismatch(_)))
                | Err(TrainError::Checkpoint(CheckpointError::Malformed(_)))
        ));
    }

    #[test]
    fn empty_dataset_rejected() {
        let mut t = toy_trainer(2);
        let (h, _) = toy_datasets();
        let empty = Dataset {
            skeleton: "toy_a".into(),
            items: vec![],
        };
        let provider = HashEmbedder::new(t.model.cfg.clip_dim, 17);
        let err = t
            .train_step(
                &h,
                &empty,
                &["dog".into()],
                &provider,
                &SubjectSwapper::default(),
            )
            .unwrap_err();
        assert!(matches!(err, TrainError::DataEmpty(_)));
    }

    #[test]
    fn history_file_round_trip() {
        let dir = std::env::temp_dir().join("omgpt_hist_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("loss.csv");
        let mut t = toy_trainer(3);
        let rows = run_steps(&mut t, 3);
        {
            let mut w = HistoryWriter::create(&path).unwrap();
            for r in &rows {
                w.write(r).unwrap();
            }
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], HISTORY_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0,"));
    }
}
