//! Motion sequences over a skeleton.
//!
//! The dynamic representation of a clip is, per frame, the global root
//! rotation (6 channels), the global translation padded with three zeros to
//! the same width, and one 6-channel rotation per non-root joint relative to
//! its parent: T x (J+1) x 6 once assembled. Frames beyond the clip's real
//! length are marked false in `mask`.

use crate::skeleton::SkeletonGraph;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("motion uses skeleton `{motion}` but `{expected}` was supplied")]
    SkeletonMismatch { motion: String, expected: String },
    #[error("motion has {got} frames, outside the allowed range [{min}, {max}]")]
    FrameCountOutOfRange { got: usize, min: usize, max: usize },
    #[error("inconsistent buffer lengths: {0}")]
    LengthMismatch(String),
    #[error("non-finite value in motion data")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub skeleton: String,
    pub frames: usize,
    /// T x 6 row-major.
    pub global_rotation: Vec<f32>,
    /// T x 3 row-major.
    pub global_translation: Vec<f32>,
    /// T x (J-1) x 6 row-major; row j-1 belongs to non-root joint j.
    pub joint_rotations: Vec<f32>,
    pub caption: String,
    /// true = real frame. Length T.
    pub mask: Vec<bool>,
}

impl MotionSequence {
    pub fn validate(&self, g: &SkeletonGraph) -> Result<(), MotionError> {
        if self.skeleton != g.name {
            return Err(MotionError::SkeletonMismatch {
                motion: self.skeleton.clone(),
                expected: g.name.clone(),
            });
        }
        let t = self.frames;
        let j = g.joint_count();
        if self.global_rotation.len() != t * 6 {
            return Err(MotionError::LengthMismatch(format!(
                "global_rotation has {} values, expected {}",
                self.global_rotation.len(),
                t * 6
            )));
        }
        if self.global_translation.len() != t * 3 {
            return Err(MotionError::LengthMismatch(format!(
                "global_translation has {} values, expected {}",
                self.global_translation.len(),
                t * 3
            )));
        }
        if self.joint_rotations.len() != t * (j - 1) * 6 {
            return Err(MotionError::LengthMismatch(format!(
                "joint_rotations has {} values, expected {}",
                self.joint_rotations.len(),
                t * (j - 1) * 6
            )));
        }
        if self.mask.len() != t {
            return Err(MotionError::LengthMismatch(format!(
                "mask has {} entries, expected {}",
                self.mask.len(),
                t
            )));
        }
        let finite = self.global_rotation.iter().all(|v| v.is_finite())
            && self.global_translation.iter().all(|v| v.is_finite())
            && self.joint_rotations.iter().all(|v| v.is_finite());
        if !finite {
            return Err(MotionError::NonFinite);
        }
        Ok(())
    }

    pub fn real_frames(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Global rotation channels of frame t.
    pub fn rot6(&self, t: usize) -> &[f32] {
        &self.global_rotation[t * 6..t * 6 + 6]
    }

    /// Translation of frame t.
    pub fn trans(&self, t: usize) -> &[f32] {
        &self.global_translation[t * 3..t * 3 + 3]
    }

    /// 6D channels of non-root joint j (j >= 1) at frame t.
    pub fn joint6(&self, t: usize, j: usize, joint_count: usize) -> &[f32] {
        debug_assert!(j >= 1);
        let row = t * (joint_count - 1) + (j - 1);
        &self.joint_rotations[row * 6..row * 6 + 6]
    }

    /// The assembled dynamic tensor, T x (J+1) x 6 row-major:
    /// token 0 = global rotation, token 1 = zero-padded translation,
    /// token j+1 = non-root joint j.
    pub fn dynamic_tensor(&self, joint_count: usize) -> Vec<f32> {
        let t = self.frames;
        let width = (joint_count + 1) * 6;
        let mut out = vec![0.0f32; t * width];
        for f in 0..t {
            let base = f * width;
            out[base..base + 6].copy_from_slice(self.rot6(f));
            out[base + 6..base + 9].copy_from_slice(self.trans(f));
            // channels 9..12 stay zero: translation padded to width 6
            for j in 1..joint_count {
                let tok = base + (j + 1) * 6;
                out[tok..tok + 6].copy_from_slice(self.joint6(f, j, joint_count));
            }
        }
        out
    }

    /// Right-pad to `t_max` frames by repeating the last frame, mask false.
    pub fn padded_to(&self, t_max: usize, joint_count: usize) -> MotionSequence {
        assert!(self.frames <= t_max, "motion longer than t_max");
        if self.frames == t_max {
            return self.clone();
        }
        let t = self.frames;
        let extra = t_max - t;
        let mut m = self.clone();
        let last_rot = self.rot6(t - 1).to_vec();
        let last_trans = self.trans(t - 1).to_vec();
        let q_row = (joint_count - 1) * 6;
        let last_q = self.joint_rotations[(t - 1) * q_row..t * q_row].to_vec();
        for _ in 0..extra {
            m.global_rotation.extend_from_slice(&last_rot);
            m.global_translation.extend_from_slice(&last_trans);
            m.joint_rotations.extend_from_slice(&last_q);
            m.mask.push(false);
        }
        m.frames = t_max;
        m
    }

    /// Append `extra` padding frames (copies of the last frame) marked false.
    pub fn with_extra_padding(&self, extra: usize, joint_count: usize) -> MotionSequence {
        let mut m = self.padded_to(self.frames + extra, joint_count);
        m.frames = self.frames + extra;
        m
    }
}

/// Rebuild a MotionSequence from a dynamic tensor laid out as
/// T x (J+1) x 6. The inverse of `dynamic_tensor`.
pub fn motion_from_dynamic(
    skeleton: &str,
    dynamic: &[f32],
    joint_count: usize,
    frames: usize,
    caption: &str,
    mask: Vec<bool>,
) -> MotionSequence {
    let width = (joint_count + 1) * 6;
    assert_eq!(dynamic.len(), frames * width);
    let mut global_rotation = Vec::with_capacity(frames * 6);
    let mut global_translation = Vec::with_capacity(frames * 3);
    let mut joint_rotations = Vec::with_capacity(frames * (joint_count - 1) * 6);
    for f in 0..frames {
        let base = f * width;
        global_rotation.extend_from_slice(&dynamic[base..base + 6]);
        global_translation.extend_from_slice(&dynamic[base + 6..base + 9]);
        for j in 1..joint_count {
            let tok = base + (j + 1) * 6;
            joint_rotations.extend_from_slice(&dynamic[tok..tok + 6]);
        }
    }
    MotionSequence {
        skeleton: skeleton.to_string(),
        frames,
        global_rotation,
        global_translation,
        joint_rotations,
        caption: caption.to_string(),
        mask,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::smpl22;

    fn tiny_motion(g: &SkeletonGraph, t: usize) -> MotionSequence {
        let j = g.joint_count();
        let mut m = MotionSequence {
            skeleton: g.name.clone(),
            frames: t,
            global_rotation: vec![0.0; t * 6],
            global_translation: vec![0.0; t * 3],
            joint_rotations: vec![0.0; t * (j - 1) * 6],
            caption: String::new(),
            mask: vec![true; t],
        };
        // identity 6D per joint
        for f in 0..t {
            m.global_rotation[f * 6] = 1.0;
            m.global_rotation[f * 6 + 4] = 1.0;
            for q in 1..j {
                let row = (f * (j - 1) + (q - 1)) * 6;
                m.joint_rotations[row] = 1.0;
                m.joint_rotations[row + 4] = 1.0;
            }
        }
        m
    }

    #[test]
    fn dynamic_tensor_round_trip() {
        let g = smpl22();
        let m = tiny_motion(&g, 4);
        let d = m.dynamic_tensor(g.joint_count());
        assert_eq!(d.len(), 4 * 23 * 6);
        let back = motion_from_dynamic(
            &g.name,
            &d,
            g.joint_count(),
            4,
            &m.caption,
            m.mask.clone(),
        );
        assert_eq!(m, back);
    }

    #[test]
    fn translation_row_is_zero_padded() {
        let g = smpl22();
        let mut m = tiny_motion(&g, 2);
        m.global_translation[0] = 0.5;
        let d = m.dynamic_tensor(g.joint_count());
        assert_eq!(d[6], 0.5);
        assert_eq!(&d[9..12], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn padding_repeats_last_frame() {
        let g = smpl22();
        let m = tiny_motion(&g, 3);
        let p = m.padded_to(6, g.joint_count());
        assert_eq!(p.frames, 6);
        assert_eq!(p.real_frames(), 3);
        assert_eq!(p.rot6(5), m.rot6(2));
        p.validate(&g).unwrap();
    }

    #[test]
    fn validate_catches_mismatch() {
        let g = smpl22();
        let mut m = tiny_motion(&g, 3);
        m.joint_rotations.pop();
        assert!(matches!(
            m.validate(&g),
            Err(MotionError::LengthMismatch(_))
        ));
    }
}
