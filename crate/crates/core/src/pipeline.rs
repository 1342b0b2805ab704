//! End-to-end commands over the library: dataset synthesis, joint training,
//! generation and the repeated-evaluation protocol. Every command echoes its
//! fully resolved configuration into the output directory.

use crate::config::{ConfigError, RunConfig};
use crate::crossdomain::{cross_losses, generate_motion_from_embedding, CrossError, JointModel};
use crate::datagen::{
    self, load_dataset, save_dataset, DataError, Dataset, DatasetItem, DatasetSpec, SubjectKind,
};
use crate::metrics::{
    diversity, fid, gaussian_stats, mm_dist, mmodality, motion_features, r_precision, summarize,
    FeatureSet, MetricError, MetricReport, MetricStat,
};
use crate::motion::MotionSequence;
use crate::motionae::{ModelError, MotionBatch};
use crate::rng::Rng;
use crate::skeleton::{self, SkeletonError, SkeletonGraph};
use crate::trainer::{load_model_params, HistoryWriter, TrainError, Trainer};
use crate::textembed::{
    EmbeddingProvider, EmbeddingTable, HashEmbedder, SubjectSwapper, TextError,
};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Cross(#[from] CrossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Rotation(#[from] crate::rotmath::RotError),
    #[error("no checkpoint found under {0}")]
    CheckpointMissing(PathBuf),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// Documented process exit codes: 2 configuration, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Model(_) => 2,
            PipelineError::Data(_)
            | PipelineError::Skeleton(_)
            | PipelineError::Text(_)
            | PipelineError::CheckpointMissing(_)
            | PipelineError::Io(_) => 3,
            PipelineError::Train(_)
            | PipelineError::Cross(_)
            | PipelineError::Metric(_)
            | PipelineError::Rotation(_) => 4,
        }
    }
}

pub fn provider_from(cfg: &RunConfig) -> Result<Box<dyn EmbeddingProvider>, PipelineError> {
    match &cfg.embed.table {
        Some(path) => Ok(Box::new(EmbeddingTable::load(path, cfg.model.clip_dim)?)),
        None => Ok(Box::new(HashEmbedder::new(
            cfg.model.clip_dim,
            cfg.embed.seed,
        ))),
    }
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config_resolved.txt"), cfg.echo())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Dataset synthesis
// ---------------------------------------------------------------------------

pub struct SynthPaths {
    pub human_train: PathBuf,
    pub human_test: PathBuf,
    pub animal_train: PathBuf,
    pub animal_test: PathBuf,
    pub correspondence: PathBuf,
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<SynthPaths, PipelineError> {
    echo_config(cfg, out)?;
    let human = skeleton::smpl22();
    let animal = skeleton::smal35();
    let d = &cfg.data;
    let hspec = DatasetSpec {
        seed: d.seed,
        skeleton: human.name.clone(),
        subject: SubjectKind::Human,
        families: d.families.clone(),
        samples_per_family: d.human_samples_per_family,
        frames_min: d.human_frames_min,
        frames_max: d.human_frames_max,
        train_fraction: d.train_fraction,
    };
    let aspec = DatasetSpec {
        seed: d.seed.wrapping_add(1),
        skeleton: animal.name.clone(),
        subject: SubjectKind::Animal(d.animals.clone()),
        families: d.families.clone(),
        samples_per_family: d.animal_samples_per_family,
        frames_min: d.animal_frames_min,
        frames_max: d.animal_frames_max,
        train_fraction: d.train_fraction,
    };
    let hds = datagen::generate(&hspec, &human)?;
    let ads = datagen::generate(&aspec, &animal)?;
    let (ht, hv) = datagen::split(&hds, d.train_fraction, d.seed.wrapping_add(2));
    let (at, av) = datagen::split(&ads, d.train_fraction, d.seed.wrapping_add(3));
    let paths = SynthPaths {
        human_train: out.join("human_train"),
        human_test: out.join("human_test"),
        animal_train: out.join("animal_train"),
        animal_test: out.join("animal_test"),
        correspondence: out.join("correspondence.json"),
    };
    save_dataset(&ht, &human, &paths.human_train)?;
    save_dataset(&hv, &human, &paths.human_test)?;
    save_dataset(&at, &animal, &paths.animal_train)?;
    save_dataset(&av, &animal, &paths.animal_test)?;
    std::fs::write(&paths.correspondence, skeleton::SMPL_SMAL_MAP_JSON)?;
    Ok(paths)
}

// ---------------------------------------------------------------------------
// Data loading
// ---------------------------------------------------------------------------

pub struct LoadedData {
    pub human_train: Dataset,
    pub human_test: Dataset,
    pub animal_train: Dataset,
    pub animal_test: Dataset,
    pub human_skel: SkeletonGraph,
    pub animal_skel: SkeletonGraph,
    pub correspondence: crate::skeleton::PrimalCorrespondence,
}

/// Load a synthesized dataset directory. Clip-length filters follow the
/// human [20, 196] and animal [10, 196] conventions.
pub fn load_data(dir: &Path) -> Result<LoadedData, PipelineError> {
    let (human_train, human_skel) = load_dataset(&dir.join("human_train"), 20, 196)?;
    let (human_test, _) = load_dataset(&dir.join("human_test"), 20, 196)?;
    let (animal_train, animal_skel) = load_dataset(&dir.join("animal_train"), 10, 196)?;
    let (animal_test, _) = load_dataset(&dir.join("animal_test"), 10, 196)?;
    let correspondence = skeleton::load_correspondence(
        &human_skel,
        &animal_skel,
        &dir.join("correspondence.json"),
    )?;
    Ok(LoadedData {
        human_train,
        human_test,
        animal_train,
        animal_test,
        human_skel,
        animal_skel,
        correspondence,
    })
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub history: PathBuf,
    pub last_components: Option<crate::trainer::LossComponents>,
}

pub fn train_run(
    cfg: &RunConfig,
    data_dir: &Path,
    out: &Path,
    resume_from: Option<&Path>,
) -> Result<TrainOutcome, PipelineError> {
    let data = load_data(data_dir)?;
    echo_config(cfg, out)?;
    skeleton::save_skeleton(&data.human_skel, &out.join("human_skeleton.json"))?;
    skeleton::save_skeleton(&data.animal_skel, &out.join("animal_skeleton.json"))?;
    std::fs::copy(
        data_dir.join("correspondence.json"),
        out.join("correspondence.json"),
    )?;
    let model: JointModel<f32> = JointModel::new(
        cfg.model.clone(),
        data.human_skel.clone(),
        data.animal_skel.clone(),
        data.correspondence.clone(),
        cfg.train.seed,
    )?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), cfg.weights);
    let history_path = out.join("loss_history.csv");
    let mut history = if let Some(ckpt) = resume_from {
        trainer.load(ckpt)?;
        if history_path.exists() {
            HistoryWriter::append_to(&history_path)?
        } else {
            HistoryWriter::create(&history_path)?
        }
    } else {
        HistoryWriter::create(&history_path)?
    };
    let provider = provider_from(cfg)?;
    let swapper = SubjectSwapper::default();
    let animals = &cfg.data.animals;
    let mut last = None;
    while trainer.step < cfg.train.steps {
        let row = trainer.train_step(
            &data.human_train,
            &data.animal_train,
            animals,
            provider.as_ref(),
            &swapper,
        )?;
        if row.step % cfg.train.log_interval == 0 {
            history.write(&row)?;
        }
        if cfg.train.checkpoint_interval > 0
            && trainer.step % cfg.train.checkpoint_interval == 0
            && trainer.step < cfg.train.steps
        {
            trainer.save(&out.join(format!("ckpt_step_{:06}.omgt", trainer.step)))?;
        }
        last = Some(row);
    }
    let final_checkpoint = out.join("ckpt_final.omgt");
    trainer.save(&final_checkpoint)?;
    Ok(TrainOutcome {
        final_checkpoint,
        history: history_path,
        last_components: last,
    })
}

/// Newest checkpoint in a directory: the final one when present, otherwise
/// the highest step.
pub fn find_checkpoint(dir: &Path) -> Result<PathBuf, PipelineError> {
    if dir.is_file() {
        return Ok(dir.to_path_buf());
    }
    let final_path = dir.join("ckpt_final.omgt");
    if final_path.exists() {
        return Ok(final_path);
    }
    let mut best: Option<(String, PathBuf)> = None;
    if dir.is_dir() {
        for entry in std::fs::read_dir(dir)? {
            let p = entry?.path();
            let name = p
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or("")
                .to_string();
            if name.starts_with("ckpt_step_") && name.ends_with(".omgt") {
                if best.as_ref().map(|(b, _)| &name > b).unwrap_or(true) {
                    best = Some((name, p));
                }
            }
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| PipelineError::CheckpointMissing(dir.to_path_buf()))
}

/// Rebuild the model recorded in a training output directory and load the
/// checkpoint parameters into it.
pub fn model_from_run_dir(
    ckpt_dir: &Path,
    use_ema_override: Option<bool>,
) -> Result<(RunConfig, JointModel<f32>), PipelineError> {
    let cfg = RunConfig::load(&ckpt_dir.join("config_resolved.txt"))?;
    let human_skel = skeleton::load_skeleton(&ckpt_dir.join("human_skeleton.json"))?;
    let animal_skel = skeleton::load_skeleton(&ckpt_dir.join("animal_skeleton.json"))?;
    let corr = skeleton::load_correspondence(
        &human_skel,
        &animal_skel,
        &ckpt_dir.join("correspondence.json"),
    )?;
    let mut model: JointModel<f32> = JointModel::new(
        cfg.model.clone(),
        human_skel,
        animal_skel,
        corr,
        cfg.train.seed,
    )?;
    let ckpt = find_checkpoint(ckpt_dir)?;
    let use_ema = use_ema_override.unwrap_or(cfg.eval.use_ema);
    load_model_params(&mut model, &ckpt, use_ema)?;
    Ok((cfg, model))
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

pub struct GenerateOutcome {
    pub motion_path: PathBuf,
    pub positions_path: PathBuf,
}

pub fn generate_run(
    ckpt_dir: &Path,
    text: &str,
    animal: &str,
    source_motion: &Path,
    out_file: &Path,
) -> Result<GenerateOutcome, PipelineError> {
    let (cfg, model) = model_from_run_dir(ckpt_dir, None)?;
    let source = datagen::load_motion_file(source_motion, &model.human_skel.name, "")?;
    let provider = provider_from(&cfg)?;
    let swapper = SubjectSwapper::default();
    let generated =
        crate::crossdomain::infer(&model, text, &source, animal, provider.as_ref(), &swapper)?;
    if let Some(parent) = out_file.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    datagen::save_motion_file(out_file, &generated, model.animal_skel.joint_count())?;
    let positions_path = out_file.with_extension("positions.csv");
    let fk = crate::rotmath::forward_kinematics(&generated, &model.animal_skel)?;
    let mut csv = String::from("frame,joint,name,x,y,z\n");
    for t in 0..fk.frames {
        for jid in 0..fk.joints {
            let p = fk.at(t, jid);
            csv.push_str(&format!(
                "{t},{jid},{},{:.6},{:.6},{:.6}\n",
                model.animal_skel.joint_names[jid], p[0], p[1], p[2]
            ));
        }
    }
    std::fs::write(&positions_path, csv)?;
    Ok(GenerateOutcome {
        motion_path: out_file.to_path_buf(),
        positions_path,
    })
}

// ---------------------------------------------------------------------------
// Evaluation protocol
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    InDistribution,
    OutOfDistribution,
}

impl EvalMode {
    pub fn parse(s: &str) -> Option<EvalMode> {
        match s {
            "id" => Some(EvalMode::InDistribution),
            "ood" => Some(EvalMode::OutOfDistribution),
            _ => None,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            EvalMode::InDistribution => "id",
            EvalMode::OutOfDistribution => "ood",
        }
    }
}

struct EvalPrompt {
    caption: String,
    embedding: Vec<f64>,
    source: usize,
}

fn family_sources(ds: &Dataset) -> BTreeMap<String, Vec<usize>> {
    let mut map: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, item) in ds.items.iter().enumerate() {
        map.entry(item.family.clone()).or_default().push(i);
    }
    map
}

fn embed_cached(
    cache: &mut BTreeMap<String, Vec<f64>>,
    provider: &dyn EmbeddingProvider,
    text: &str,
) -> Result<Vec<f64>, PipelineError> {
    if let Some(v) = cache.get(text) {
        return Ok(v.clone());
    }
    let v = provider.embed(text)?;
    cache.insert(text.to_string(), v.clone());
    Ok(v)
}

/// One seeded evaluation pass; returns every metric for this run.
#[allow(clippy::too_many_arguments)]
fn evaluate_once(
    cfg: &RunConfig,
    model: &JointModel<f32>,
    data: &LoadedData,
    mode: EvalMode,
    gt_stats: &crate::metrics::GaussianStats,
    provider: &dyn EmbeddingProvider,
    swapper: &SubjectSwapper,
    cache: &mut BTreeMap<String, Vec<f64>>,
    run_seed: u64,
) -> Result<BTreeMap<String, f64>, PipelineError> {
    let e = &cfg.eval;
    let human_by_family = family_sources(&data.human_test);
    let all_human: Vec<usize> = (0..data.human_test.len()).collect();
    let pick_source = |family: &str, rng: &mut Rng| -> usize {
        let pool = human_by_family.get(family).unwrap_or(&all_human);
        pool[rng.below(pool.len())]
    };

    // Build prompts with their source human motions.
    let mut prompts: Vec<EvalPrompt> = Vec::with_capacity(e.samples);
    for i in 0..e.samples {
        let mut rng = Rng::keyed(run_seed, &[0xe7a1, i as u64]);
        let prompt = match mode {
            EvalMode::InDistribution => {
                let item = &data.animal_test.items[rng.below(data.animal_test.len())];
                let caption = item.captions[rng.below(3)].clone();
                let source = pick_source(&item.family, &mut rng);
                let embedding = embed_cached(cache, provider, &caption)?;
                EvalPrompt {
                    caption,
                    embedding,
                    source,
                }
            }
            EvalMode::OutOfDistribution => {
                let idx = rng.below(data.human_test.len());
                let item = &data.human_test.items[idx];
                let caption = item.captions[rng.below(3)].clone();
                let animal = &cfg.data.animals[rng.below(cfg.data.animals.len())];
                let swapped = swapper
                    .swap(&caption, animal)
                    .unwrap_or_else(|_| format!("a {animal} {caption}"));
                let embedding = embed_cached(cache, provider, &swapped)?;
                EvalPrompt {
                    caption: swapped,
                    embedding,
                    source: idx,
                }
            }
        };
        prompts.push(prompt);
    }

    // Generate and extract features.
    let mut generated: Vec<MotionSequence> = Vec::with_capacity(prompts.len());
    for p in &prompts {
        let src = &data.human_test.items[p.source].motion;
        generated.push(generate_motion_from_embedding(
            model,
            &p.embedding,
            src,
            &p.caption,
        )?);
    }
    let gen_refs: Vec<&MotionSequence> = generated.iter().collect();
    let gen_features = motion_features(model, &gen_refs, e.feature_side_human)?;
    let mut text_features = FeatureSet::new(cfg.model.clip_dim, Vec::new());
    for p in &prompts {
        text_features.push_row(&p.embedding);
    }

    let mut out = BTreeMap::new();
    let gen_stats = gaussian_stats(&gen_features)?;
    out.insert("fid".to_string(), fid(gt_stats, &gen_stats)?);
    out.insert(
        "mm_dist".to_string(),
        mm_dist(&gen_features, &text_features)?,
    );
    out.insert(
        "diversity".to_string(),
        diversity(&gen_features, e.diversity_pairs, run_seed)?,
    );
    let tops = r_precision(
        &gen_features,
        &text_features,
        e.pool_size,
        3,
        run_seed,
    )?;
    out.insert("r_precision_top1".to_string(), tops[0]);
    out.insert("r_precision_top2".to_string(), tops[1]);
    out.insert("r_precision_top3".to_string(), tops[2]);

    // Per-caption multimodality: repeated generations differ through their
    // sampled source motions.
    let mut caption_pool: Vec<(String, Vec<f64>, String)> = Vec::new(); // (caption, embedding, family)
    match mode {
        EvalMode::InDistribution => {
            let mut order: Vec<usize> = (0..data.animal_test.len()).collect();
            Rng::keyed(run_seed, &[0x33ca]).shuffle(&mut order);
            for &i in order.iter().take(e.mm_captions) {
                let item = &data.animal_test.items[i];
                let c = item.captions[0].clone();
                let emb = embed_cached(cache, provider, &c)?;
                caption_pool.push((c, emb, item.family.clone()));
            }
        }
        EvalMode::OutOfDistribution => {
            let mut order: Vec<usize> = (0..data.human_test.len()).collect();
            Rng::keyed(run_seed, &[0x33cb]).shuffle(&mut order);
            for &i in order.iter().take(e.mm_captions) {
                let item = &data.human_test.items[i];
                let animal = &cfg.data.animals[i % cfg.data.animals.len()];
                let swapped = swapper
                    .swap(&item.captions[0], animal)
                    .unwrap_or_else(|_| format!("a {animal} {}", item.captions[0]));
                let emb = embed_cached(cache, provider, &swapped)?;
                caption_pool.push((swapped, emb, item.family.clone()));
            }
        }
    }
    let mut per_caption: Vec<FeatureSet> = Vec::with_capacity(caption_pool.len());
    for (ci, (caption, emb, family)) in caption_pool.iter().enumerate() {
        let mut gens: Vec<MotionSequence> = Vec::with_capacity(e.mm_generations);
        for gi in 0..e.mm_generations {
            let mut rng = Rng::keyed(run_seed, &[0x99e2, ci as u64, gi as u64]);
            let src_idx = pick_source(family, &mut rng);
            let src = &data.human_test.items[src_idx].motion;
            gens.push(generate_motion_from_embedding(model, emb, src, caption)?);
        }
        let refs: Vec<&MotionSequence> = gens.iter().collect();
        per_caption.push(motion_features(model, &refs, e.feature_side_human)?);
    }
    out.insert(
        "mmodality".to_string(),
        mmodality(&per_caption, e.mm_subset, run_seed)?,
    );
    Ok(out)
}

pub fn evaluate_run(
    ckpt_dir: &Path,
    data_dir: &Path,
    mode: EvalMode,
    report_path: &Path,
    feature_side_human: Option<bool>,
) -> Result<MetricReport, PipelineError> {
    let (mut cfg, model) = model_from_run_dir(ckpt_dir, None)?;
    if let Some(side) = feature_side_human {
        cfg.eval.feature_side_human = side;
    }
    let data = load_data(data_dir)?;
    let provider = provider_from(&cfg)?;
    let swapper = SubjectSwapper::default();
    // ground-truth feature statistics: the test set in distribution, the
    // whole animal corpus out of distribution
    let mut gt_motions: Vec<&MotionSequence> = data
        .animal_test
        .items
        .iter()
        .map(|i| &i.motion)
        .collect();
    if mode == EvalMode::OutOfDistribution {
        gt_motions.extend(data.animal_train.items.iter().map(|i| &i.motion));
    }
    let gt_features = motion_features(&model, &gt_motions, cfg.eval.feature_side_human)?;
    let gt_stats = gaussian_stats(&gt_features)?;

    let mut cache: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut per_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for run in 0..cfg.eval.runs {
        let run_seed = cfg.eval.seed.wrapping_add(run as u64);
        let values = evaluate_once(
            &cfg, &model, &data, mode, &gt_stats, provider.as_ref(), &swapper, &mut cache,
            run_seed,
        )?;
        for (k, v) in values {
            per_metric.entry(k).or_default().push(v);
        }
    }
    let metrics: BTreeMap<String, MetricStat> = per_metric
        .into_iter()
        .map(|(k, vs)| (k, summarize(&vs)))
        .collect();
    let report = MetricReport {
        mode: mode.name().to_string(),
        runs: cfg.eval.runs,
        seed0: cfg.eval.seed,
        feature_side: if cfg.eval.feature_side_human {
            "human".into()
        } else {
            "animal".into()
        },
        metrics,
    };
    if let Some(parent) = report_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(
        report_path,
        serde_json::to_string_pretty(&report).expect("report serialization"),
    )?;
    Ok(report)
}

/// Mean latent-consistency loss of the transfer path over `n` seeded human
/// test motions; the acceptance suite compares trained against untrained
/// checkpoints with it.
pub fn mean_transfer_consistency(
    model: &JointModel<f32>,
    cfg: &RunConfig,
    human_items: &[DatasetItem],
    provider: &dyn EmbeddingProvider,
    swapper: &SubjectSwapper,
    n: usize,
    seed: u64,
) -> Result<f64, PipelineError> {
    let weights = cfg.weights;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        let mut rng = Rng::keyed(seed, &[0xc095, i as u64]);
        let item = &human_items[rng.below(human_items.len())];
        let caption = &item.captions[rng.below(3)];
        let animal = &cfg.data.animals[rng.below(cfg.data.animals.len())];
        let swapped = swapper
            .swap(caption, animal)
            .unwrap_or_else(|_| format!("a {animal} {caption}"));
        let emb = provider.embed(&swapped)?;
        let motions = [&item.motion];
        let batch = MotionBatch::from_motions(&motions, &model.human_skel, &cfg.model)?;
        let mut g: crate::tensor::Graph<f32> = crate::tensor::Graph::new();
        let bind = model.store.bind(&mut g);
        let losses = cross_losses(&mut g, &bind, model, &batch, &motions, &emb, &weights)?;
        total += g.scalar(losses.l_cons) as f64;
        count += 1;
    }
    Ok(total / count as f64)
}
