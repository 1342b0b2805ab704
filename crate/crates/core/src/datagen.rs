//! Procedural paired text-motion datasets for the two bundled skeletons.
//!
//! Six parametric motion families drive both the biped and the quadruped
//! with shared gait parameters, so human and animal sets cover the same verb
//! phrases and subject-swapped human captions land exactly in the animal
//! caption space. Every sample is deterministic in (seed, family, index).

use crate::motion::MotionSequence;
use crate::rng::{hash_bytes, Rng};
use crate::rotmath::{axis_angle_matrix, matrix_to_rot6d};
use crate::skeleton::SkeletonGraph;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown motion family `{0}`")]
    UnknownFamily(String),
    #[error("dataset parse error: {0}")]
    ParseError(String),
    #[error("frame count {got} outside load filter [{min}, {max}] for `{file}`")]
    FrameFilter {
        got: usize,
        min: usize,
        max: usize,
        file: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub const FAMILY_NAMES: [&str; 6] = ["walk", "run", "jump", "turn", "wave", "sit"];

/// Three caption paraphrases per family; the subject is prepended.
pub fn family_phrases(family: &str) -> Option<[&'static str; 3]> {
    match family {
        "walk" => Some([
            "is walking forward at an easy pace",
            "walks straight ahead slowly",
            "moves forward with steady walking steps",
        ]),
        "run" => Some([
            "is running forward quickly",
            "runs ahead at a fast pace",
            "sprints forward rapidly",
        ]),
        "jump" => Some([
            "is jumping up and down in place",
            "jumps repeatedly on the spot",
            "leaps up and down several times",
        ]),
        "turn" => Some([
            "is turning around in place",
            "turns the whole body around slowly",
            "rotates in place to face the other way",
        ]),
        "wave" => Some([
            "is waving with the left arm",
            "waves the left arm in greeting",
            "raises the left arm and waves it",
        ]),
        "sit" => Some([
            "is sitting down slowly",
            "sits down from a standing pose",
            "lowers the body into a sitting position",
        ]),
        _ => None,
    }
}

const HUMAN_SUBJECTS: [&str; 3] = ["a person", "the person", "someone"];
pub const DEFAULT_ANIMALS: [&str; 5] = ["dog", "bear", "horse", "cat", "deer"];

/// Who the clips belong to; decides caption subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SubjectKind {
    Human,
    /// Animal names cycled across samples.
    Animal(Vec<String>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    /// Skeleton template id: "smpl22" or "smal35".
    pub skeleton: String,
    pub subject: SubjectKind,
    pub families: Vec<String>,
    pub samples_per_family: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    /// Fraction of each family that goes to the train split.
    pub train_fraction: f64,
}

impl DatasetSpec {
    pub fn human_desk(seed: u64, frames_max: usize) -> DatasetSpec {
        DatasetSpec {
            seed,
            skeleton: "smpl22".into(),
            subject: SubjectKind::Human,
            families: FAMILY_NAMES.iter().map(|s| s.to_string()).collect(),
            samples_per_family: 100,
            frames_min: 20,
            frames_max,
            train_fraction: 0.75,
        }
    }

    pub fn animal_desk(seed: u64, frames_max: usize) -> DatasetSpec {
        DatasetSpec {
            seed,
            skeleton: "smal35".into(),
            subject: SubjectKind::Animal(
                DEFAULT_ANIMALS.iter().map(|s| s.to_string()).collect(),
            ),
            families: FAMILY_NAMES.iter().map(|s| s.to_string()).collect(),
            samples_per_family: 40,
            frames_min: 10,
            frames_max,
            train_fraction: 0.75,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub captions: [String; 3],
    pub family: String,
    pub motion: MotionSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub skeleton: String,
    pub items: Vec<DatasetItem>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Parametric generators
// ---------------------------------------------------------------------------

struct Osc {
    joint: &'static str,
    axis: [f64; 3],
    amp: f64,
    freq_mult: f64,
    phase: f64,
}

/// Ramp from 0 to `target` following smoothstep; used by sit.
struct Ramp {
    joint: &'static str,
    axis: [f64; 3],
    target: f64,
}

fn biped_oscillators(family: &str) -> Vec<Osc> {
    let x = [1.0, 0.0, 0.0];
    match family {
        "walk" | "run" => vec![
            Osc { joint: "left_hip", axis: x, amp: 0.5, freq_mult: 1.0, phase: 0.0 },
            Osc { joint: "right_hip", axis: x, amp: 0.5, freq_mult: 1.0, phase: std::f64::consts::PI },
            Osc { joint: "left_knee", axis: x, amp: 0.35, freq_mult: 1.0, phase: 1.2 },
            Osc { joint: "right_knee", axis: x, amp: 0.35, freq_mult: 1.0, phase: 1.2 + std::f64::consts::PI },
            Osc { joint: "left_shoulder", axis: x, amp: 0.3, freq_mult: 1.0, phase: std::f64::consts::PI },
            Osc { joint: "right_shoulder", axis: x, amp: 0.3, freq_mult: 1.0, phase: 0.0 },
        ],
        "jump" => vec![
            Osc { joint: "left_hip", axis: x, amp: 0.45, freq_mult: 1.0, phase: 0.0 },
            Osc { joint: "right_hip", axis: x, amp: 0.45, freq_mult: 1.0, phase: 0.0 },
            Osc { joint: "left_knee", axis: x, amp: 0.6, freq_mult: 1.0, phase: 0.5 },
            Osc { joint: "right_knee", axis: x, amp: 0.6, freq_mult: 1.0, phase: 0.5 },
            Osc { joint: "left_shoulder", axis: x, amp: 0.5, freq_mult: 1.0, phase: 1.0 },
            Osc { joint: "right_shoulder", axis: x, amp: 0.5, freq_mult: 1.0, phase: 1.0 },
        ],
        "turn" => vec![
            Osc { joint: "left_hip", axis: x, amp: 0.25, freq_mult: 1.0, phase: 0.0 },
            Osc { joint: "right_hip", axis: x, amp: 0.25, freq_mult: 1.0, phase: std::f64::consts::PI },
        ],
        "wave" => vec![
            Osc { joint: "left_shoulder", axis: [0.0, 0.0, 1.0], amp: 0.9, freq_mult: 2.0, phase: 0.0 },
            Osc { joint: "left_elbow", axis: [0.0, 0.0, 1.0], amp: 0.6, freq_mult: 2.0, phase: 0.8 },
        ],
        "sit" => vec![],
        _ => vec![],
    }
}

fn quadruped_oscillators(family: &str) -> Vec<Osc> {
    let x = [1.0, 0.0, 0.0];
    let pi = std::f64::consts::PI;
    match family {
        // diagonal legs move together, gait parameters shared with the biped
        "walk" | "run" => vec![
            Osc { joint: "left_front_upper", axis: x, amp: 0.5, freq_mult: 1.0, phase: 0.0 },
            Osc { joint: "right_back_upper", axis: x, amp: 0.5, freq_mult: 1.0, phase: 0.0 },
            Osc { joint: "right_front_upper", axis: x, amp: 0.5, freq_mult: 1.0, phase: pi },
            Osc { joint: "left_back_upper", axis: x, amp: 0.5, freq_mult: 1.0, phase: pi },
            Osc { joint: "left_front_lower", axis: x, amp: 0.35, freq_mult: 1.0, phase: 1.2 },
            Osc { joint: "right_back_lower", axis: x, amp: 0.35, freq_mult: 1.0, phase: 1.2 },
            Osc { joint: "right_front_lower", axis: x, amp: 0.35, freq_mult: 1.0, phase: 1.2 + pi },
            Osc { joint: "left_back_lower", axis: x, amp: 0.35, freq_mult: 1.0, phase: 1.2 + pi },
            Osc { joint: "tail1", axis: [0.0, 1.0, 0.0], amp: 0.2, freq_mult: 1.0, phase: 0.0 },
        ],
        "jump" => vec![
            Osc { joint: "left_front_upper", axis: x, amp: 0.5, freq_mult: 1.0, phase: 0.0 },
            Osc { joint: "right_front_upper", axis: x, amp: 0.5, freq_mult: 1.0, phase: 0.0 },
            Osc { joint: "left_back_upper", axis: x, amp: 0.6, freq_mult: 1.0, phase: 0.5 },
            Osc { joint: "right_back_upper", axis: x, amp: 0.6, freq_mult: 1.0, phase: 0.5 },
        ],
        "turn" => vec![
            Osc { joint: "left_back_upper", axis: x, amp: 0.25, freq_mult: 1.0, phase: 0.0 },
            Osc { joint: "right_back_upper", axis: x, amp: 0.25, freq_mult: 1.0, phase: pi },
        ],
        "wave" => vec![
            Osc { joint: "left_front_upper", axis: [0.0, 0.0, 1.0], amp: 0.9, freq_mult: 2.0, phase: 0.0 },
            Osc { joint: "left_front_lower", axis: [0.0, 0.0, 1.0], amp: 0.6, freq_mult: 2.0, phase: 0.8 },
        ],
        "sit" => vec![],
        _ => vec![],
    }
}

fn ramps(family: &str, quadruped: bool) -> Vec<Ramp> {
    let x = [1.0, 0.0, 0.0];
    if family != "sit" {
        return vec![];
    }
    if quadruped {
        vec![
            Ramp { joint: "left_back_upper", axis: x, target: -1.0 },
            Ramp { joint: "right_back_upper", axis: x, target: -1.0 },
            Ramp { joint: "left_back_lower", axis: x, target: 1.2 },
            Ramp { joint: "right_back_lower", axis: x, target: 1.2 },
            Ramp { joint: "spine1", axis: x, target: 0.3 },
        ]
    } else {
        vec![
            Ramp { joint: "left_hip", axis: x, target: -1.1 },
            Ramp { joint: "right_hip", axis: x, target: -1.1 },
            Ramp { joint: "left_knee", axis: x, target: 1.3 },
            Ramp { joint: "right_knee", axis: x, target: 1.3 },
            Ramp { joint: "spine1", axis: x, target: 0.35 },
        ]
    }
}

struct GaitParams {
    amp_scale: f64,
    freq: f64,     // radians per frame
    speed: f64,    // meters per frame along +z
    bob: f64,      // vertical root oscillation amplitude
    jump_height: f64,
    jump_period: usize,
    turn_total: f64, // total yaw over the clip (radians, signed)
    sink: f64,       // root drop for sit
    phase0: f64,
}

fn gait_params(family: &str, rng: &mut Rng) -> GaitParams {
    let jitter = |rng: &mut Rng, lo: f64, hi: f64| rng.range(lo, hi);
    let base_freq = 2.0 * std::f64::consts::PI / 32.0;
    let mut p = GaitParams {
        amp_scale: jitter(rng, 0.85, 1.15),
        freq: base_freq * jitter(rng, 0.9, 1.1),
        speed: 0.0,
        bob: 0.0,
        jump_height: 0.0,
        jump_period: 24,
        turn_total: 0.0,
        sink: 0.0,
        phase0: rng.range(0.0, 2.0 * std::f64::consts::PI),
    };
    match family {
        "walk" => {
            p.speed = 0.02 * jitter(rng, 0.85, 1.15);
            p.bob = 0.01;
        }
        "run" => {
            p.freq *= 1.8;
            p.amp_scale *= 1.4;
            p.speed = 0.055 * jitter(rng, 0.85, 1.15);
            p.bob = 0.02;
        }
        "jump" => {
            p.jump_height = 0.3 * jitter(rng, 0.8, 1.2);
            p.jump_period = 20 + rng.below(9);
            p.freq = 2.0 * std::f64::consts::PI / p.jump_period as f64;
        }
        "turn" => {
            let dir = if rng.below(2) == 0 { 1.0 } else { -1.0 };
            p.turn_total = dir * jitter(rng, 2.0, 3.1);
            p.freq *= 0.7;
        }
        "wave" => {}
        "sit" => {
            p.sink = 0.18 * jitter(rng, 0.85, 1.15);
        }
        _ => {}
    }
    p
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

fn rot6_into(buf: &mut [f32], m: &crate::rotmath::Mat3) {
    let r6 = matrix_to_rot6d(m).expect("generated rotations are valid").to_vec();
    for (o, v) in buf.iter_mut().zip(r6) {
        *o = v as f32;
    }
}

/// One clip of a family on a skeleton, deterministic in (seed, family, index).
pub fn generate_motion(
    g: &SkeletonGraph,
    family: &str,
    frames: usize,
    seed: u64,
    index: u64,
) -> Result<MotionSequence, DataError> {
    if family_phrases(family).is_none() {
        return Err(DataError::UnknownFamily(family.to_string()));
    }
    let quadruped = g.joint_index("left_front_upper").is_some();
    let mut rng = Rng::keyed(seed, &[hash_bytes(family.as_bytes()), index]);
    let params = gait_params(family, &mut rng);
    let oscs = if quadruped {
        quadruped_oscillators(family)
    } else {
        biped_oscillators(family)
    };
    let ramp_list = ramps(family, quadruped);
    let j = g.joint_count();
    let ident6 = [1.0f32, 0.0, 0.0, 0.0, 1.0, 0.0];
    let mut motion = MotionSequence {
        skeleton: g.name.clone(),
        frames,
        global_rotation: vec![0.0; frames * 6],
        global_translation: vec![0.0; frames * 3],
        joint_rotations: vec![0.0; frames * (j - 1) * 6],
        caption: String::new(),
        mask: vec![true; frames],
    };
    // rest height: keep feet near the ground plane across both templates
    let base_height = if quadruped { 0.55 } else { 0.95 };
    for t in 0..frames {
        let tt = t as f64;
        let progress = if frames > 1 { tt / (frames - 1) as f64 } else { 0.0 };
        // global rotation: identity, or yaw ramp for turn
        let yaw = params.turn_total * smoothstep(progress);
        let rot = axis_angle_matrix([0.0, 1.0, 0.0], yaw);
        rot6_into(&mut motion.global_rotation[t * 6..t * 6 + 6], &rot);
        // global translation
        let mut y = base_height + params.bob * (2.0 * (params.freq * tt + params.phase0)).sin();
        if params.jump_height > 0.0 {
            let p = (t % params.jump_period) as f64 / params.jump_period as f64;
            y += params.jump_height * 4.0 * p * (1.0 - p);
        }
        if params.sink > 0.0 {
            y -= params.sink * smoothstep(progress);
        }
        motion.global_translation[t * 3] = 0.0;
        motion.global_translation[t * 3 + 1] = y as f32;
        motion.global_translation[t * 3 + 2] = (params.speed * tt) as f32;
        // joint rotations default to identity
        for q in 1..j {
            let row = (t * (j - 1) + (q - 1)) * 6;
            motion.joint_rotations[row..row + 6].copy_from_slice(&ident6);
        }
        let mut write_joint = |name: &str, m: &crate::rotmath::Mat3| {
            if let Some(idx) = g.joint_index(name) {
                if idx > 0 {
                    let row = (t * (j - 1) + (idx - 1)) * 6;
                    rot6_into(&mut motion.joint_rotations[row..row + 6], m);
                }
            }
        };
        for o in &oscs {
            let angle =
                o.amp * params.amp_scale * (params.freq * o.freq_mult * tt + o.phase + params.phase0).sin();
            let m = axis_angle_matrix(o.axis, angle);
            write_joint(o.joint, &m);
        }
        let s = smoothstep(progress);
        for r in &ramp_list {
            let m = axis_angle_matrix(r.axis, r.target * s);
            write_joint(r.joint, &m);
        }
    }
    Ok(motion)
}

fn subject_for(kind: &SubjectKind, sample_idx: usize, caption_idx: usize) -> String {
    match kind {
        SubjectKind::Human => HUMAN_SUBJECTS[caption_idx % HUMAN_SUBJECTS.len()].to_string(),
        SubjectKind::Animal(names) => {
            format!("a {}", names[sample_idx % names.len()])
        }
    }
}

pub fn generate(spec: &DatasetSpec, g: &SkeletonGraph) -> Result<Dataset, DataError> {
    assert_eq!(spec.skeleton, g.name, "spec/skeleton mismatch");
    let mut items = Vec::new();
    for family in &spec.families {
        let phrases =
            family_phrases(family).ok_or_else(|| DataError::UnknownFamily(family.clone()))?;
        for i in 0..spec.samples_per_family {
            let mut rng = Rng::keyed(
                spec.seed,
                &[hash_bytes(family.as_bytes()), i as u64, 0xf4a3e5],
            );
            let frames = spec.frames_min + rng.below(spec.frames_max - spec.frames_min + 1);
            let mut motion = generate_motion(g, family, frames, spec.seed, i as u64)?;
            let captions: [String; 3] = std::array::from_fn(|c| {
                format!("{} {}", subject_for(&spec.subject, i, c), phrases[c])
            });
            motion.caption = captions[0].clone();
            items.push(DatasetItem {
                captions,
                family: family.clone(),
                motion,
            });
        }
    }
    Ok(Dataset {
        skeleton: spec.skeleton.clone(),
        items,
    })
}

/// Stratified split: within each family, a seeded shuffle sends the first
/// `train_fraction` of samples to train.
pub fn split(ds: &Dataset, train_fraction: f64, seed: u64) -> (Dataset, Dataset) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut families: Vec<String> = Vec::new();
    for it in &ds.items {
        if !families.contains(&it.family) {
            families.push(it.family.clone());
        }
    }
    for family in &families {
        let idxs: Vec<usize> = ds
            .items
            .iter()
            .enumerate()
            .filter(|(_, it)| &it.family == family)
            .map(|(i, _)| i)
            .collect();
        let mut order = idxs.clone();
        Rng::keyed(seed, &[hash_bytes(family.as_bytes()), 0x5911f7]).shuffle(&mut order);
        let n_train = ((order.len() as f64) * train_fraction).round() as usize;
        for (k, &i) in order.iter().enumerate() {
            if k < n_train {
                train.push(ds.items[i].clone());
            } else {
                test.push(ds.items[i].clone());
            }
        }
    }
    (
        Dataset {
            skeleton: ds.skeleton.clone(),
            items: train,
        },
        Dataset {
            skeleton: ds.skeleton.clone(),
            items: test,
        },
    )
}

// ---------------------------------------------------------------------------
// Directory format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct IndexItem {
    file: String,
    frames: usize,
    family: String,
    captions: [String; 3],
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    skeleton: String,
    skeleton_file: String,
    items: Vec<IndexItem>,
}

/// Write one motion clip in the binary clip format: frame count u32, joint
/// count u32, then the rotation/translation/joint buffers as f32 LE.
pub fn save_motion_file(
    path: &Path,
    m: &MotionSequence,
    joint_count: usize,
) -> Result<(), DataError> {
    write_motion_file(path, m, joint_count)?;
    Ok(())
}

/// Read one motion clip written by `save_motion_file`.
pub fn load_motion_file(
    path: &Path,
    skeleton: &str,
    caption: &str,
) -> Result<MotionSequence, DataError> {
    read_motion_file(path, skeleton, caption)
}

fn write_motion_file(path: &Path, m: &MotionSequence, joint_count: usize) -> std::io::Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&(m.frames as u32).to_le_bytes());
    buf.extend_from_slice(&(joint_count as u32).to_le_bytes());
    for &v in m
        .global_rotation
        .iter()
        .chain(&m.global_translation)
        .chain(&m.joint_rotations)
    {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn read_motion_file(
    path: &Path,
    skeleton: &str,
    caption: &str,
) -> Result<MotionSequence, DataError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(DataError::ParseError(format!(
            "{}: truncated header",
            path.display()
        )));
    }
    let t = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let j = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expect = 8 + 4 * (t * 6 + t * 3 + t * (j - 1) * 6);
    if bytes.len() != expect {
        return Err(DataError::ParseError(format!(
            "{}: {} bytes, expected {expect}",
            path.display(),
            bytes.len()
        )));
    }
    let mut pos = 8;
    let mut read_f32s = |n: usize| -> Vec<f32> {
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(f32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()));
            pos += 4;
        }
        v
    };
    let global_rotation = read_f32s(t * 6);
    let global_translation = read_f32s(t * 3);
    let joint_rotations = read_f32s(t * (j - 1) * 6);
    Ok(MotionSequence {
        skeleton: skeleton.to_string(),
        frames: t,
        global_rotation,
        global_translation,
        joint_rotations,
        caption: caption.to_string(),
        mask: vec![true; t],
    })
}

pub fn save_dataset(ds: &Dataset, g: &SkeletonGraph, dir: &Path) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)?;
    crate::skeleton::save_skeleton(g, &dir.join("skeleton.json"))
        .map_err(|e| DataError::ParseError(e.to_string()))?;
    let mut index = IndexFile {
        skeleton: ds.skeleton.clone(),
        skeleton_file: "skeleton.json".into(),
        items: Vec::new(),
    };
    for (i, it) in ds.items.iter().enumerate() {
        let file = format!("m_{i:05}.bin");
        write_motion_file(&dir.join(&file), &it.motion, g.joint_count())?;
        index.items.push(IndexItem {
            file,
            frames: it.motion.frames,
            family: it.family.clone(),
            captions: it.captions.clone(),
        });
    }
    std::fs::write(
        dir.join("index.json"),
        serde_json::to_string_pretty(&index).expect("index serialization"),
    )?;
    Ok(())
}

/// Load a dataset directory, rejecting clips outside [frames_min, frames_max].
pub fn load_dataset(
    dir: &Path,
    frames_min: usize,
    frames_max: usize,
) -> Result<(Dataset, SkeletonGraph), DataError> {
    let index_path = dir.join("index.json");
    let text = std::fs::read_to_string(&index_path).map_err(|e| {
        DataError::ParseError(format!("{}: {e}", index_path.display()))
    })?;
    let index: IndexFile =
        serde_json::from_str(&text).map_err(|e| DataError::ParseError(e.to_string()))?;
    let g = crate::skeleton::load_skeleton(&dir.join(&index.skeleton_file))
        .map_err(|e| DataError::ParseError(e.to_string()))?;
    let mut items = Vec::new();
    for it in &index.items {
        if it.frames < frames_min || it.frames > frames_max {
            return Err(DataError::FrameFilter {
                got: it.frames,
                min: frames_min,
                max: frames_max,
                file: it.file.clone(),
            });
        }
        let motion = read_motion_file(&dir.join(&it.file), &index.skeleton, &it.captions[0])?;
        if motion.frames != it.frames {
            return Err(DataError::ParseError(format!(
                "{}: index says {} frames, file has {}",
                it.file, it.frames, motion.frames
            )));
        }
        motion
            .validate(&g)
            .map_err(|e| DataError::ParseError(format!("{}: {e}", it.file)))?;
        items.push(DatasetItem {
            captions: it.captions.clone(),
            family: it.family.clone(),
            motion,
        });
    }
    Ok((
        Dataset {
            skeleton: index.skeleton,
            items,
        },
        g,
    ))
}
