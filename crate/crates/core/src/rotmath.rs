//! 6D rotation representation, forward kinematics and end-effector
//! velocities, computed in f64.
//!
//! A 6D rotation holds the first two columns of a rotation matrix before
//! orthonormalization; Gram-Schmidt recovers the full matrix. Velocities are
//! forward differences in meters per frame (the frame rate is not part of the
//! representation).

use crate::motion::{MotionError, MotionSequence};
use crate::skeleton::{SkeletonGraph, NO_PARENT};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RotError {
    #[error("degenerate 6D rotation: {0}")]
    DegenerateRotation(String),
    #[error("matrix is not a rotation: {0}")]
    NotARotation(String),
    #[error("too few frames: need at least 2, got {0}")]
    TooFewFrames(usize),
    #[error(transparent)]
    Motion(#[from] MotionError),
}

pub type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation6D {
    pub a1: [f64; 3],
    pub a2: [f64; 3],
}

impl Rotation6D {
    pub fn from_slice(v: &[f64]) -> Rotation6D {
        Rotation6D {
            a1: [v[0], v[1], v[2]],
            a2: [v[3], v[4], v[5]],
        }
    }

    pub fn identity() -> Rotation6D {
        Rotation6D {
            a1: [1.0, 0.0, 0.0],
            a2: [0.0, 1.0, 0.0],
        }
    }

    pub fn to_vec(self) -> [f64; 6] {
        [
            self.a1[0], self.a1[1], self.a1[2], self.a2[0], self.a2[1], self.a2[2],
        ]
    }
}

const DEGENERACY_EPS: f64 = 1e-8;

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Gram-Schmidt: b1 = a1/|a1|, b2 = normalize(a2 - (b1.a2) b1), b3 = b1 x b2.
/// Columns of the result are (b1, b2, b3).
pub fn rot6d_to_matrix(r: &Rotation6D) -> Result<Mat3, RotError> {
    let n1 = norm(r.a1);
    if !n1.is_finite() || n1 < DEGENERACY_EPS {
        return Err(RotError::DegenerateRotation(format!(
            "first axis norm {n1:e} below {DEGENERACY_EPS:e}"
        )));
    }
    let b1 = scale(r.a1, 1.0 / n1);
    let proj = dot(b1, r.a2);
    let ortho = sub3(r.a2, scale(b1, proj));
    let n2 = norm(ortho);
    if !n2.is_finite() || n2 < DEGENERACY_EPS {
        return Err(RotError::DegenerateRotation(format!(
            "second axis is parallel to the first (residual norm {n2:e})"
        )));
    }
    let b2 = scale(ortho, 1.0 / n2);
    let b3 = cross(b1, b2);
    Ok([
        [b1[0], b2[0], b3[0]],
        [b1[1], b2[1], b3[1]],
        [b1[2], b2[2], b3[2]],
    ])
}

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = a[r][0] * b[0][c] + a[r][1] * b[1][c] + a[r][2] * b[2][c];
        }
    }
    out
}

pub fn mat3_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat3_det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

const ORTHONORMAL_TOL: f64 = 1e-6;

/// First two columns of an orthonormal, det +1 matrix.
pub fn matrix_to_rot6d(m: &Mat3) -> Result<Rotation6D, RotError> {
    for i in 0..3 {
        for j in 0..3 {
            let col_i = [m[0][i], m[1][i], m[2][i]];
            let col_j = [m[0][j], m[1][j], m[2][j]];
            let expect = if i == j { 1.0 } else { 0.0 };
            let got = dot(col_i, col_j);
            if (got - expect).abs() > ORTHONORMAL_TOL {
                return Err(RotError::NotARotation(format!(
                    "column dot ({i},{j}) = {got}, expected {expect}"
                )));
            }
        }
    }
    let det = mat3_det(m);
    if (det - 1.0).abs() > ORTHONORMAL_TOL {
        return Err(RotError::NotARotation(format!(
            "determinant {det}, expected 1"
        )));
    }
    Ok(Rotation6D {
        a1: [m[0][0], m[1][0], m[2][0]],
        a2: [m[0][1], m[1][1], m[2][1]],
    })
}

/// Rotation matrix about a unit axis by angle (radians).
pub fn axis_angle_matrix(axis: [f64; 3], angle: f64) -> Mat3 {
    let n = norm(axis);
    let (x, y, z) = (axis[0] / n, axis[1] / n, axis[2] / n);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// World-frame joint positions, T x J x 3 row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPositions {
    pub frames: usize,
    pub joints: usize,
    pub positions: Vec<f64>,
}

impl JointPositions {
    pub fn at(&self, t: usize, j: usize) -> [f64; 3] {
        let base = (t * self.joints + j) * 3;
        [
            self.positions[base],
            self.positions[base + 1],
            self.positions[base + 2],
        ]
    }
}

/// Forward-difference velocities of the end effectors, (T-1) x E x 3.
#[derive(Debug, Clone, PartialEq)]
pub struct EndEffectorVelocities {
    pub frames: usize,
    pub effectors: usize,
    pub velocities: Vec<f64>,
}

impl EndEffectorVelocities {
    pub fn at(&self, t: usize, e: usize) -> [f64; 3] {
        let base = (t * self.effectors + e) * 3;
        [
            self.velocities[base],
            self.velocities[base + 1],
            self.velocities[base + 2],
        ]
    }
}

fn rot6_from_f32(v: &[f32]) -> Rotation6D {
    Rotation6D {
        a1: [v[0] as f64, v[1] as f64, v[2] as f64],
        a2: [v[3] as f64, v[4] as f64, v[5] as f64],
    }
}

/// Root world rotation comes from the global 6D channels and the root
/// position from the translation; every child chains its parent's transform:
/// world = parent_world * local, position = parent_pos + parent_world * offset.
pub fn forward_kinematics(
    motion: &MotionSequence,
    g: &SkeletonGraph,
) -> Result<JointPositions, RotError> {
    motion.validate(g)?;
    let j = g.joint_count();
    let t = motion.frames;
    let order = g.topological_order();
    let mut positions = vec![0.0f64; t * j * 3];
    let mut world = vec![[[0.0f64; 3]; 3]; j];
    let mut pos = vec![[0.0f64; 3]; j];
    for f in 0..t {
        for &joint in &order {
            if g.parents[joint] == NO_PARENT {
                world[joint] = rot6d_to_matrix(&rot6_from_f32(motion.rot6(f)))?;
                let tr = motion.trans(f);
                pos[joint] = [tr[0] as f64, tr[1] as f64, tr[2] as f64];
            } else {
                let p = g.parents[joint] as usize;
                let local = rot6d_to_matrix(&rot6_from_f32(motion.joint6(f, joint, j)))?;
                world[joint] = mat3_mul(&world[p], &local);
                pos[joint] = add3(pos[p], mat3_vec(&world[p], g.offset_of(joint)));
            }
        }
        for (joint, p) in pos.iter().enumerate() {
            let base = (f * j + joint) * 3;
            positions[base..base + 3].copy_from_slice(p);
        }
    }
    Ok(JointPositions {
        frames: t,
        joints: j,
        positions,
    })
}

pub fn end_effector_velocities(
    motion: &MotionSequence,
    g: &SkeletonGraph,
) -> Result<EndEffectorVelocities, RotError> {
    if motion.frames < 2 {
        return Err(RotError::TooFewFrames(motion.frames));
    }
    let fk = forward_kinematics(motion, g)?;
    let e = g.end_effector_ids.len();
    let mut velocities = vec![0.0f64; (motion.frames - 1) * e * 3];
    for t in 0..motion.frames - 1 {
        for (slot, &ee) in g.end_effector_ids.iter().enumerate() {
            let a = fk.at(t, ee);
            let b = fk.at(t + 1, ee);
            let base = (t * e + slot) * 3;
            velocities[base] = b[0] - a[0];
            velocities[base + 1] = b[1] - a[1];
            velocities[base + 2] = b[2] - a[2];
        }
    }
    Ok(EndEffectorVelocities {
        frames: motion.frames - 1,
        effectors: e,
        velocities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::build_skeleton;

    fn assert_mat_close(a: &Mat3, b: &Mat3, tol: f64) {
        for r in 0..3 {
            for c in 0..3 {
                assert!(
                    (a[r][c] - b[r][c]).abs() < tol,
                    "({r},{c}): {} vs {}",
                    a[r][c],
                    b[r][c]
                );
            }
        }
    }

    #[test]
    fn identity_six_d() {
        let m = rot6d_to_matrix(&Rotation6D::identity()).unwrap();
        assert_mat_close(&m, &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], 1e-15);
    }

    #[test]
    fn hand_gram_schmidt_case() {
        // a1 = (2,0,0) -> b1 = (1,0,0); a2 = (1,1,0) -> ortho = (0,1,0)
        let r = Rotation6D {
            a1: [2.0, 0.0, 0.0],
            a2: [1.0, 1.0, 0.0],
        };
        let m = rot6d_to_matrix(&r).unwrap();
        assert_mat_close(&m, &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], 1e-15);
    }

    #[test]
    fn parallel_axes_degenerate() {
        let r = Rotation6D {
            a1: [1.0, 0.0, 0.0],
            a2: [2.0, 0.0, 0.0],
        };
        assert!(matches!(
            rot6d_to_matrix(&r),
            Err(RotError::DegenerateRotation(_))
        ));
        let z = Rotation6D {
            a1: [0.0, 0.0, 0.0],
            a2: [0.0, 1.0, 0.0],
        };
        assert!(matches!(
            rot6d_to_matrix(&z),
            Err(RotError::DegenerateRotation(_))
        ));
    }

    #[test]
    fn ninety_degrees_about_z() {
        let m = axis_angle_matrix([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
        let r = matrix_to_rot6d(&m).unwrap();
        // columns: (0,1,0) and (-1,0,0)
        assert!((r.a1[0]).abs() < 1e-12 && (r.a1[1] - 1.0).abs() < 1e-12);
        assert!((r.a2[0] + 1.0).abs() < 1e-12 && (r.a2[1]).abs() < 1e-12);
    }

    #[test]
    fn reflection_rejected() {
        let m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        assert!(matches!(
            matrix_to_rot6d(&m),
            Err(RotError::NotARotation(_))
        ));
    }

    #[test]
    fn round_trip_is_fixed_point() {
        let m = axis_angle_matrix([1.0, 2.0, -0.5], 0.83);
        let r = matrix_to_rot6d(&m).unwrap();
        let m2 = rot6d_to_matrix(&r).unwrap();
        assert_mat_close(&m, &m2, 1e-9);
    }

    fn two_joint_chain() -> SkeletonGraph {
        build_skeleton(
            "pair",
            vec!["a".into(), "b".into()],
            vec![NO_PARENT, 0],
            vec![[0.0, 1.0, 0.0]],
            vec![1],
        )
        .unwrap()
    }

    fn motion_on(g: &SkeletonGraph, t: usize) -> MotionSequence {
        let j = g.joint_count();
        let ident = [1.0f32, 0.0, 0.0, 0.0, 1.0, 0.0];
        MotionSequence {
            skeleton: g.name.clone(),
            frames: t,
            global_rotation: ident.repeat(t),
            global_translation: vec![0.0; t * 3],
            joint_rotations: ident.repeat(t * (j - 1)),
            caption: String::new(),
            mask: vec![true; t],
        }
    }

    #[test]
    fn identity_fk_sums_offsets() {
        let g = crate::skeleton::smpl22();
        let m = motion_on(&g, 2);
        let fk = forward_kinematics(&m, &g).unwrap();
        // left_wrist = pelvis + collar chain offsets
        let mut expect = [0.0f64; 3];
        let mut j = 20; // left_wrist
        while g.parents[j] != NO_PARENT {
            let off = g.offset_of(j);
            for k in 0..3 {
                expect[k] += off[k];
            }
            j = g.parents[j] as usize;
        }
        let got = fk.at(1, 20);
        for k in 0..3 {
            assert!((got[k] - expect[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn rotated_root_moves_child() {
        // offset (0,1,0), root rotated 90 deg about z -> child at (-1,0,0)
        let g = two_joint_chain();
        let mut m = motion_on(&g, 1);
        let rz = axis_angle_matrix([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
        let r6 = matrix_to_rot6d(&rz).unwrap().to_vec();
        for (i, v) in r6.iter().enumerate() {
            m.global_rotation[i] = *v as f32;
        }
        let fk = forward_kinematics(&m, &g).unwrap();
        let child = fk.at(0, 1);
        assert!((child[0] + 1.0).abs() < 1e-12, "{child:?}");
        assert!(child[1].abs() < 1e-12 && child[2].abs() < 1e-12);
    }

    #[test]
    fn static_motion_zero_velocity() {
        let g = crate::skeleton::smal35();
        let m = motion_on(&g, 5);
        let v = end_effector_velocities(&m, &g).unwrap();
        assert!(v.velocities.iter().all(|&x| x == 0.0));
        assert_eq!(v.effectors, 5);
        assert_eq!(v.frames, 4);
    }

    #[test]
    fn rigid_translation_velocity() {
        let g = crate::skeleton::smpl22();
        let mut m = motion_on(&g, 4);
        for t in 0..4 {
            m.global_translation[t * 3] = 0.1 * t as f32;
        }
        let v = end_effector_velocities(&m, &g).unwrap();
        for t in 0..3 {
            for e in 0..5 {
                let vel = v.at(t, e);
                assert!((vel[0] - 0.1).abs() < 1e-7, "{vel:?}");
                assert!(vel[1].abs() < 1e-9 && vel[2].abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_frame_has_no_velocity() {
        let g = two_joint_chain();
        let m = motion_on(&g, 1);
        assert!(matches!(
            end_effector_velocities(&m, &g),
            Err(RotError::TooFewFrames(1))
        ));
    }
}
