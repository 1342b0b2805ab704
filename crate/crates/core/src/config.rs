//! Flat key=value run configuration with section headers.
//!
//! Every knob has a default, so an empty file runs the desk-scale pipeline.
//! `echo` prints the fully resolved configuration; commands drop that next
//! to their outputs so any run can be reproduced from its directory alone.

use crate::crossdomain::LossWeights;
use crate::datagen::{DEFAULT_ANIMALS, FAMILY_NAMES};
use crate::motionae::ModelConfig;
use crate::trainer::TrainConfig;
use std::collections::BTreeMap;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {0}: {1}")]
    Line(usize, String),
    #[error("[{section}] {key}: {message}")]
    Value {
        section: String,
        key: String,
        message: String,
    },
    #[error("unknown key `{1}` in section [{0}]")]
    UnknownKey(String, String),
    #[error("{0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    pub families: Vec<String>,
    pub human_samples_per_family: usize,
    pub animal_samples_per_family: usize,
    pub human_frames_min: usize,
    pub human_frames_max: usize,
    pub animal_frames_min: usize,
    pub animal_frames_max: usize,
    pub train_fraction: f64,
    pub animals: Vec<String>,
}

impl DataConfig {
    fn defaults(t_max: usize) -> Self {
        DataConfig {
            seed: 7,
            families: FAMILY_NAMES.iter().map(|s| s.to_string()).collect(),
            human_samples_per_family: 100,
            animal_samples_per_family: 40,
            human_frames_min: 20,
            human_frames_max: t_max,
            animal_frames_min: 10,
            animal_frames_max: t_max,
            train_fraction: 0.75,
            animals: DEFAULT_ANIMALS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub runs: usize,
    pub samples: usize,
    pub diversity_pairs: usize,
    pub pool_size: usize,
    pub mm_captions: usize,
    pub mm_generations: usize,
    pub mm_subset: usize,
    pub feature_side_human: bool,
    pub use_ema: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            runs: 20,
            samples: 128,
            diversity_pairs: 32,
            pool_size: 32,
            mm_captions: 6,
            mm_generations: 20,
            mm_subset: 5,
            feature_side_human: false,
            use_ema: true,
            seed: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedConfig {
    pub seed: u64,
    pub table: Option<PathBuf>,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            seed: crate::textembed::DEFAULT_EMBED_SEED,
            table: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub embed: EmbedConfig,
    /// Dataset directory used by `train` when no flag overrides it.
    pub data_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::desk();
        let data = DataConfig::defaults(model.t_max);
        RunConfig {
            model,
            train: TrainConfig::default(),
            weights: LossWeights::default(),
            data,
            eval: EvalConfig::default(),
            embed: EmbedConfig::default(),
            data_dir: None,
        }
    }
}

fn parse_sections(text: &str) -> Result<BTreeMap<String, Vec<(String, String)>>, ConfigError> {
    let mut out: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
    let mut section = String::from("global");
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') {
            if !line.ends_with(']') {
                return Err(ConfigError::Line(lineno + 1, "unterminated section".into()));
            }
            section = line[1..line.len() - 1].trim().to_string();
            out.entry(section.clone()).or_default();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            ConfigError::Line(lineno + 1, format!("expected key = value, got `{line}`"))
        })?;
        out.entry(section.clone())
            .or_default()
            .push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

struct Field<'a> {
    section: &'a str,
    key: &'a str,
    value: &'a str,
}

impl Field<'_> {
    fn err(&self, message: String) -> ConfigError {
        ConfigError::Value {
            section: self.section.to_string(),
            key: self.key.to_string(),
            message,
        }
    }

    fn usize(&self) -> Result<usize, ConfigError> {
        self.value
            .parse()
            .map_err(|e| self.err(format!("{e} (`{}`)", self.value)))
    }

    fn u64(&self) -> Result<u64, ConfigError> {
        self.value
            .parse()
            .map_err(|e| self.err(format!("{e} (`{}`)", self.value)))
    }

    fn f64(&self) -> Result<f64, ConfigError> {
        self.value
            .parse()
            .map_err(|e| self.err(format!("{e} (`{}`)", self.value)))
    }

    fn bool(&self) -> Result<bool, ConfigError> {
        match self.value {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            other => Err(self.err(format!("expected true/false, got `{other}`"))),
        }
    }

    fn list(&self) -> Vec<String> {
        self.value
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect()
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let sections = parse_sections(text)?;
        let mut cfg = RunConfig::default();
        // model preset first so later keys override it
        if let Some(entries) = sections.get("model") {
            for (k, v) in entries {
                if k == "preset" {
                    cfg.model = match v.as_str() {
                        "desk" => ModelConfig::desk(),
                        "full" => ModelConfig::default(),
                        "toy" => ModelConfig::toy(),
                        other => {
                            return Err(ConfigError::Value {
                                section: "model".into(),
                                key: "preset".into(),
                                message: format!("unknown preset `{other}`"),
                            })
                        }
                    };
                    cfg.data.human_frames_max = cfg.model.t_max;
                    cfg.data.animal_frames_max = cfg.model.t_max;
                }
            }
        }
        for (section, entries) in &sections {
            for (key, value) in entries {
                let f = Field {
                    section,
                    key,
                    value,
                };
                match (section.as_str(), key.as_str()) {
                    ("global", _) => {
                        return Err(ConfigError::UnknownKey(section.clone(), key.clone()))
                    }
                    ("model", "preset") => {}
                    ("model", "joint_feat") => cfg.model.joint_feat = f.usize()?,
                    ("model", "joint_layers") => cfg.model.joint_layers = f.usize()?,
                    ("model", "joint_heads") => cfg.model.joint_heads = f.usize()?,
                    ("model", "temporal_dim") => cfg.model.temporal_dim = f.usize()?,
                    ("model", "temporal_layers") => cfg.model.temporal_layers = f.usize()?,
                    ("model", "temporal_heads") => cfg.model.temporal_heads = f.usize()?,
                    ("model", "pool") => cfg.model.pool = f.usize()?,
                    ("model", "t_max") => {
                        cfg.model.t_max = f.usize()?;
                        cfg.data.human_frames_max = cfg.model.t_max;
                        cfg.data.animal_frames_max = cfg.model.t_max;
                    }
                    ("model", "latent_joints") => cfg.model.latent_joints = f.usize()?,
                    ("model", "latent_feat") => cfg.model.latent_feat = f.usize()?,
                    ("model", "clip_dim") => cfg.model.clip_dim = f.usize()?,
                    ("model", "caption_dim") => cfg.model.caption_dim = f.usize()?,
                    ("model", "caption_layers") => cfg.model.caption_layers = f.usize()?,
                    ("model", "caption_heads") => cfg.model.caption_heads = f.usize()?,
                    ("model", "ffn_mult") => cfg.model.ffn_mult = f.usize()?,
                    ("train", "steps") => cfg.train.steps = f.u64()?,
                    ("train", "batch_size") => cfg.train.batch_size = f.usize()?,
                    ("train", "lr") => cfg.train.lr = f.f64()?,
                    ("train", "beta1") => cfg.train.beta1 = f.f64()?,
                    ("train", "beta2") => cfg.train.beta2 = f.f64()?,
                    ("train", "epsilon") => cfg.train.epsilon = f.f64()?,
                    ("train", "ema_decay") => cfg.train.ema_decay = f.f64()?,
                    ("train", "grad_clip") => {
                        cfg.train.grad_clip = if value == "off" {
                            None
                        } else {
                            Some(f.f64()?)
                        }
                    }
                    ("train", "log_interval") => cfg.train.log_interval = f.u64()?,
                    ("train", "checkpoint_interval") => {
                        cfg.train.checkpoint_interval = f.u64()?
                    }
                    ("train", "seed") => cfg.train.seed = f.u64()?,
                    ("weights", "lambda1") => cfg.weights.lambda1 = f.f64()?,
                    ("weights", "lambda2") => cfg.weights.lambda2 = f.f64()?,
                    ("weights", "lambda3") => cfg.weights.lambda3 = f.f64()?,
                    ("weights", "lambda4") => cfg.weights.lambda4 = f.f64()?,
                    ("weights", "lambda5") => cfg.weights.lambda5 = f.f64()?,
                    ("weights", "translation") => cfg.weights.translation = f.f64()?,
                    ("data", "seed") => cfg.data.seed = f.u64()?,
                    ("data", "families") => cfg.data.families = f.list(),
                    ("data", "human_samples_per_family") => {
                        cfg.data.human_samples_per_family = f.usize()?
                    }
                    ("data", "animal_samples_per_family") => {
                        cfg.data.animal_samples_per_family = f.usize()?
                    }
                    ("data", "human_frames_min") => cfg.data.human_frames_min = f.usize()?,
                    ("data", "human_frames_max") => cfg.data.human_frames_max = f.usize()?,
                    ("data", "animal_frames_min") => cfg.data.animal_frames_min = f.usize()?,
                    ("data", "animal_frames_max") => cfg.data.animal_frames_max = f.usize()?,
                    ("data", "train_fraction") => cfg.data.train_fraction = f.f64()?,
                    ("data", "animals") => cfg.data.animals = f.list(),
                    ("eval", "runs") => cfg.eval.runs = f.usize()?,
                    ("eval", "samples") => cfg.eval.samples = f.usize()?,
                    ("eval", "diversity_pairs") => cfg.eval.diversity_pairs = f.usize()?,
                    ("eval", "pool_size") => cfg.eval.pool_size = f.usize()?,
                    ("eval", "mm_captions") => cfg.eval.mm_captions = f.usize()?,
                    ("eval", "mm_generations") => cfg.eval.mm_generations = f.usize()?,
                    ("eval", "mm_subset") => cfg.eval.mm_subset = f.usize()?,
                    ("eval", "feature_side") => {
                        cfg.eval.feature_side_human = match value.as_str() {
                            "human" => true,
                            "animal" => false,
                            other => {
                                return Err(f.err(format!(
                                    "expected human or animal, got `{other}`"
                                )))
                            }
                        }
                    }
                    ("eval", "use_ema") => cfg.eval.use_ema = f.bool()?,
                    ("eval", "seed") => cfg.eval.seed = f.u64()?,
                    ("paths", "data") => {
                        cfg.data_dir = if value.is_empty() {
                            None
                        } else {
                            Some(PathBuf::from(value))
                        }
                    }
                    ("embed", "seed") => cfg.embed.seed = f.u64()?,
                    ("embed", "table") => {
                        cfg.embed.table = if value.is_empty() {
                            None
                        } else {
                            Some(PathBuf::from(value))
                        }
                    }
                    _ => return Err(ConfigError::UnknownKey(section.clone(), key.clone())),
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.train.batch_size == 0 || self.train.lr <= 0.0 {
            return Err(ConfigError::Invalid(
                "batch_size must be positive and lr > 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.data.train_fraction) && self.data.train_fraction != 1.0 {
            return Err(ConfigError::Invalid(format!(
                "train_fraction {} outside (0, 1]",
                self.data.train_fraction
            )));
        }
        for (name, lo, hi) in [
            (
                "human frames",
                self.data.human_frames_min,
                self.data.human_frames_max,
            ),
            (
                "animal frames",
                self.data.animal_frames_min,
                self.data.animal_frames_max,
            ),
        ] {
            if lo == 0 || lo > hi || hi > self.model.t_max {
                return Err(ConfigError::Invalid(format!(
                    "{name} range [{lo}, {hi}] incompatible with t_max {}",
                    self.model.t_max
                )));
            }
        }
        if self.data.animals.is_empty() || self.data.families.is_empty() {
            return Err(ConfigError::Invalid(
                "need at least one animal name and one family".into(),
            ));
        }
        if self.eval.runs == 0 || self.eval.samples == 0 {
            return Err(ConfigError::Invalid("eval runs/samples must be positive".into()));
        }
        if 2 * self.eval.diversity_pairs > self.eval.samples {
            return Err(ConfigError::Invalid(format!(
                "diversity_pairs {} needs at least {} samples",
                self.eval.diversity_pairs,
                2 * self.eval.diversity_pairs
            )));
        }
        if self.eval.pool_size > self.eval.samples {
            return Err(ConfigError::Invalid(format!(
                "pool_size {} exceeds samples {}",
                self.eval.pool_size, self.eval.samples
            )));
        }
        if self.eval.mm_generations < 2 * self.eval.mm_subset {
            return Err(ConfigError::Invalid(format!(
                "mm_generations {} below 2 * mm_subset {}",
                self.eval.mm_generations, self.eval.mm_subset
            )));
        }
        Ok(())
    }

    /// Fully resolved key=value text.
    pub fn echo(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let w = &self.weights;
        let d = &self.data;
        let e = &self.eval;
        let grad_clip = match t.grad_clip {
            Some(v) => format!("{v}"),
            None => "off".to_string(),
        };
        format!(
            "[model]\n\
             joint_feat = {}\njoint_layers = {}\njoint_heads = {}\n\
             temporal_dim = {}\ntemporal_layers = {}\ntemporal_heads = {}\n\
             pool = {}\nt_max = {}\nlatent_joints = {}\nlatent_feat = {}\n\
             clip_dim = {}\ncaption_dim = {}\ncaption_layers = {}\ncaption_heads = {}\n\
             ffn_mult = {}\n\n\
             [train]\n\
             steps = {}\nbatch_size = {}\nlr = {}\nbeta1 = {}\nbeta2 = {}\n\
             epsilon = {}\nema_decay = {}\ngrad_clip = {}\nlog_interval = {}\n\
             checkpoint_interval = {}\nseed = {}\n\n\
             [weights]\n\
             lambda1 = {}\nlambda2 = {}\nlambda3 = {}\nlambda4 = {}\nlambda5 = {}\n\
             translation = {}\n\n\
             [data]\n\
             seed = {}\nfamilies = {}\nhuman_samples_per_family = {}\n\
             animal_samples_per_family = {}\nhuman_frames_min = {}\nhuman_frames_max = {}\n\
             animal_frames_min = {}\nanimal_frames_max = {}\ntrain_fraction = {}\nanimals = {}\n\n\
             [eval]\n\
             runs = {}\nsamples = {}\ndiversity_pairs = {}\npool_size = {}\n\
             mm_captions = {}\nmm_generations = {}\nmm_subset = {}\nfeature_side = {}\n\
             use_ema = {}\nseed = {}\n\n\
             [embed]\nseed = {}\ntable = {}\n\n\
             [paths]\ndata = {}\n",
            m.joint_feat,
            m.joint_layers,
            m.joint_heads,
            m.temporal_dim,
            m.temporal_layers,
            m.temporal_heads,
            m.pool,
            m.t_max,
            m.latent_joints,
            m.latent_feat,
            m.clip_dim,
            m.caption_dim,
            m.caption_layers,
            m.caption_heads,
            m.ffn_mult,
            t.steps,
            t.batch_size,
            t.lr,
            t.beta1,
            t.beta2,
            t.epsilon,
            t.ema_decay,
            grad_clip,
            t.log_interval,
            t.checkpoint_interval,
            t.seed,
            w.lambda1,
            w.lambda2,
            w.lambda3,
            w.lambda4,
            w.lambda5,
            w.translation,
            d.seed,
            d.families.join(","),
            d.human_samples_per_family,
            d.animal_samples_per_family,
            d.human_frames_min,
            d.human_frames_max,
            d.animal_frames_min,
            d.animal_frames_max,
            d.train_fraction,
            d.animals.join(","),
            e.runs,
            e.samples,
            e.diversity_pairs,
            e.pool_size,
            e.mm_captions,
            e.mm_generations,
            e.mm_subset,
            if e.feature_side_human { "human" } else { "animal" },
            e.use_ema,
            e.seed,
            self.embed.seed,
            self.embed
                .table
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            self.data_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_desk_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.model, ModelConfig::desk());
        assert_eq!(cfg.train.steps, 3000);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.weights.lambda5, 100.0);
        assert_eq!(cfg.eval.runs, 20);
    }

    #[test]
    fn full_preset_restores_paper_scale() {
        let cfg = RunConfig::parse("[model]\npreset = full\n[data]\nhuman_frames_max = 196\nanimal_frames_max = 196\n").unwrap();
        assert_eq!(cfg.model.t_max, 196);
        assert_eq!(cfg.model.latent_slots(), 49);
        assert_eq!(cfg.model.clip_dim, 512);
    }

    #[test]
    fn overrides_apply_after_preset() {
        let cfg =
            RunConfig::parse("[model]\npreset = desk\ntemporal_dim = 64\n[train]\nsteps = 12\n")
                .unwrap();
        assert_eq!(cfg.model.temporal_dim, 64);
        assert_eq!(cfg.train.steps, 12);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(
            RunConfig::parse("[train]\nspeed = 9\n"),
            Err(ConfigError::UnknownKey(_, _))
        ));
    }

    #[test]
    fn bad_value_reports_section_and_key() {
        let err = RunConfig::parse("[train]\nsteps = many\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train") && msg.contains("steps"), "{msg}");
    }

    #[test]
    fn frame_range_must_fit_t_max() {
        let err = RunConfig::parse("[data]\nhuman_frames_max = 999\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig::parse("[model]\ntemporal_dim = 48\n[eval]\nsamples = 64\n[train]\ngrad_clip = off\n").unwrap();
        let echoed = cfg.echo();
        let back = RunConfig::parse(&echoed).unwrap();
        assert_eq!(cfg, back);
    }
}
