//! Articulated skeletons as rooted trees, their primal joints, and semantic
//! correspondences between two topologies.
//!
//! A joint is *primal* when its tree degree differs from 2, counting the
//! parent edge. Branch points, endpoints and the root qualify; a root with
//! exactly two children has degree 2 but is declared primal anyway because
//! every correspondence carries a root slot.

use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SkeletonError {
    #[error("parent indices contain a cycle through joint {0}")]
    Cycle(usize),
    #[error("expected exactly one root, found {0}")]
    MultipleRoots(usize),
    #[error("inconsistent lengths: {0}")]
    LengthMismatch(String),
    #[error("end effector `{0}` is not a leaf")]
    EndEffectorNotLeaf(String),
    #[error("joint name `{0}` not found in skeleton `{1}`")]
    NameNotFound(String, String),
    #[error("joint `{0}` is not primal in skeleton `{1}`")]
    NotPrimal(String, String),
    #[error("duplicate correspondence slot or joint `{0}`")]
    DuplicateSlot(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Sentinel parent index for the root joint.
pub const NO_PARENT: i64 = -1;

/// A rooted joint tree with per-joint rest offsets.
///
/// Offsets hold the static component of the motion representation: row `j-1`
/// is the offset of non-root joint `j` relative to its parent, in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonGraph {
    pub name: String,
    pub joint_names: Vec<String>,
    /// parents[j] = parent index of joint j, or `NO_PARENT` for the root.
    pub parents: Vec<i64>,
    /// (J-1) x 3, offsets of non-root joints (joint j at row j-1).
    pub offsets: Vec<[f64; 3]>,
    pub end_effector_ids: Vec<usize>,
    /// Joints with tree degree != 2 (plus the root), sorted ascending.
    pub primal_ids: Vec<usize>,
}

impl SkeletonGraph {
    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    pub fn root(&self) -> usize {
        self.parents.iter().position(|&p| p == NO_PARENT).unwrap()
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }

    /// Tree degree of a joint: one parent edge for non-roots plus child count.
    pub fn degree(&self, joint: usize) -> usize {
        let parent_edge = usize::from(self.parents[joint] != NO_PARENT);
        let children = self.parents.iter().filter(|&&p| p == joint as i64).count();
        parent_edge + children
    }

    pub fn is_leaf(&self, joint: usize) -> bool {
        self.parents[joint] != NO_PARENT && self.degree(joint) == 1
    }

    /// Offset of a non-root joint relative to its parent.
    pub fn offset_of(&self, joint: usize) -> [f64; 3] {
        debug_assert!(self.parents[joint] != NO_PARENT);
        self.offsets[joint - 1]
    }

    /// Joint indices in parent-before-child order starting at the root.
    pub fn topological_order(&self) -> Vec<usize> {
        let j = self.joint_count();
        let mut order = Vec::with_capacity(j);
        let mut stack = vec![self.root()];
        while let Some(n) = stack.pop() {
            order.push(n);
            // push children in reverse index order so traversal is ascending
            for c in (0..j).rev() {
                if self.parents[c] == n as i64 {
                    stack.push(c);
                }
            }
        }
        order
    }
}

/// Sorted indices of joints whose degree differs from 2, always including
/// the root.
pub fn primal_joints(g: &SkeletonGraph) -> Vec<usize> {
    let root = g.root();
    let mut ids: Vec<usize> = (0..g.joint_count())
        .filter(|&j| j == root || g.degree(j) != 2)
        .collect();
    ids.sort_unstable();
    ids
}

pub fn build_skeleton(
    name: &str,
    joint_names: Vec<String>,
    parents: Vec<i64>,
    offsets: Vec<[f64; 3]>,
    end_effector_ids: Vec<usize>,
) -> Result<SkeletonGraph, SkeletonError> {
    let j = joint_names.len();
    if parents.len() != j {
        return Err(SkeletonError::LengthMismatch(format!(
            "{} joints but {} parent entries",
            j,
            parents.len()
        )));
    }
    if j == 0 {
        return Err(SkeletonError::LengthMismatch("empty skeleton".into()));
    }
    if offsets.len() != j - 1 {
        return Err(SkeletonError::LengthMismatch(format!(
            "{} joints need {} offset rows, got {}",
            j,
            j - 1,
            offsets.len()
        )));
    }
    let roots = parents.iter().filter(|&&p| p == NO_PARENT).count();
    if roots != 1 {
        return Err(SkeletonError::MultipleRoots(roots));
    }
    let root = parents.iter().position(|&p| p == NO_PARENT).unwrap();
    if root != 0 {
        return Err(SkeletonError::Validation(format!(
            "root must be joint 0, found at {root}"
        )));
    }
    // Walk each joint to the root; revisiting a joint on the same walk means
    // a cycle, and out-of-range parents are malformed.
    for start in 0..j {
        let mut seen = HashSet::new();
        let mut cur = start;
        while parents[cur] != NO_PARENT {
            let p = parents[cur];
            if p < 0 || p as usize >= j {
                return Err(SkeletonError::Validation(format!(
                    "joint {cur} has out-of-range parent {p}"
                )));
            }
            if !seen.insert(cur) {
                return Err(SkeletonError::Cycle(start));
            }
            cur = p as usize;
        }
    }
    {
        let mut names = HashSet::new();
        for n in &joint_names {
            if !names.insert(n.as_str()) {
                return Err(SkeletonError::Validation(format!(
                    "duplicate joint name `{n}`"
                )));
            }
        }
    }
    let mut g = SkeletonGraph {
        name: name.to_string(),
        joint_names,
        parents,
        offsets,
        end_effector_ids,
        primal_ids: Vec::new(),
    };
    for &e in &g.end_effector_ids {
        if e >= j {
            return Err(SkeletonError::Validation(format!(
                "end effector index {e} out of range"
            )));
        }
        if !g.is_leaf(e) {
            return Err(SkeletonError::EndEffectorNotLeaf(g.joint_names[e].clone()));
        }
    }
    for row in &g.offsets {
        if !row.iter().all(|v| v.is_finite()) {
            return Err(SkeletonError::Validation("non-finite offset".into()));
        }
    }
    g.primal_ids = primal_joints(&g);
    Ok(g)
}

/// A semantic alignment of the primal joints shared by two skeletons.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimalCorrespondence {
    pub slot_names: Vec<String>,
    pub map_a: Vec<usize>,
    pub map_b: Vec<usize>,
}

impl PrimalCorrespondence {
    pub fn len(&self) -> usize {
        self.slot_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slot_names.is_empty()
    }

    /// Swap the two sides.
    pub fn flipped(&self) -> PrimalCorrespondence {
        PrimalCorrespondence {
            slot_names: self.slot_names.clone(),
            map_a: self.map_b.clone(),
            map_b: self.map_a.clone(),
        }
    }
}

/// Build the correspondence from slot -> (joint name in a, joint name in b).
pub fn intersect_primal(
    ga: &SkeletonGraph,
    gb: &SkeletonGraph,
    semantic_map: &[(String, String, String)],
) -> Result<PrimalCorrespondence, SkeletonError> {
    let mut slot_names = Vec::new();
    let mut map_a = Vec::new();
    let mut map_b = Vec::new();
    let mut seen_slots = HashSet::new();
    let mut seen_a = HashSet::new();
    let mut seen_b = HashSet::new();
    for (slot, name_a, name_b) in semantic_map {
        if !seen_slots.insert(slot.clone()) {
            return Err(SkeletonError::DuplicateSlot(slot.clone()));
        }
        let ia = ga
            .joint_index(name_a)
            .ok_or_else(|| SkeletonError::NameNotFound(name_a.clone(), ga.name.clone()))?;
        let ib = gb
            .joint_index(name_b)
            .ok_or_else(|| SkeletonError::NameNotFound(name_b.clone(), gb.name.clone()))?;
        if !ga.primal_ids.contains(&ia) {
            return Err(SkeletonError::NotPrimal(name_a.clone(), ga.name.clone()));
        }
        if !gb.primal_ids.contains(&ib) {
            return Err(SkeletonError::NotPrimal(name_b.clone(), gb.name.clone()));
        }
        if !seen_a.insert(ia) {
            return Err(SkeletonError::DuplicateSlot(name_a.clone()));
        }
        if !seen_b.insert(ib) {
            return Err(SkeletonError::DuplicateSlot(name_b.clone()));
        }
        slot_names.push(slot.clone());
        map_a.push(ia);
        map_b.push(ib);
    }
    Ok(PrimalCorrespondence {
        slot_names,
        map_a,
        map_b,
    })
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct JointFile {
    name: String,
    parent: Option<String>,
    offset: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct SkeletonFile {
    name: String,
    joints: Vec<JointFile>,
    end_effectors: Vec<String>,
}

pub fn skeleton_from_json(text: &str) -> Result<SkeletonGraph, SkeletonError> {
    let file: SkeletonFile =
        serde_json::from_str(text).map_err(|e| SkeletonError::Parse(e.to_string()))?;
    let joint_names: Vec<String> = file.joints.iter().map(|j| j.name.clone()).collect();
    let mut parents = Vec::with_capacity(file.joints.len());
    let mut offsets = Vec::new();
    for (i, j) in file.joints.iter().enumerate() {
        match &j.parent {
            None => parents.push(NO_PARENT),
            Some(p) => {
                let pi = joint_names
                    .iter()
                    .position(|n| n == p)
                    .ok_or_else(|| SkeletonError::Parse(format!("unknown parent `{p}`")))?;
                parents.push(pi as i64);
                if i == 0 {
                    return Err(SkeletonError::Parse("joint 0 must be the root".into()));
                }
                offsets.push(j.offset);
            }
        }
    }
    let mut ee = Vec::new();
    for name in &file.end_effectors {
        let idx = joint_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| SkeletonError::Parse(format!("unknown end effector `{name}`")))?;
        ee.push(idx);
    }
    build_skeleton(&file.name, joint_names, parents, offsets, ee)
        .map_err(|e| match e {
            SkeletonError::Parse(_) | SkeletonError::Io(_) => e,
            other => SkeletonError::Validation(other.to_string()),
        })
}

pub fn skeleton_to_json(g: &SkeletonGraph) -> String {
    let joints: Vec<JointFile> = (0..g.joint_count())
        .map(|j| JointFile {
            name: g.joint_names[j].clone(),
            parent: if g.parents[j] == NO_PARENT {
                None
            } else {
                Some(g.joint_names[g.parents[j] as usize].clone())
            },
            offset: if g.parents[j] == NO_PARENT {
                [0.0, 0.0, 0.0]
            } else {
                g.offset_of(j)
            },
        })
        .collect();
    let file = SkeletonFile {
        name: g.name.clone(),
        joints,
        end_effectors: g
            .end_effector_ids
            .iter()
            .map(|&e| g.joint_names[e].clone())
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("skeleton serialization")
}

pub fn load_skeleton(path: &Path) -> Result<SkeletonGraph, SkeletonError> {
    let text = std::fs::read_to_string(path)?;
    skeleton_from_json(&text)
}

pub fn save_skeleton(g: &SkeletonGraph, path: &Path) -> Result<(), SkeletonError> {
    std::fs::write(path, skeleton_to_json(g))?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SlotFile {
    slot: String,
    a: String,
    b: String,
}

pub fn correspondence_from_json(
    ga: &SkeletonGraph,
    gb: &SkeletonGraph,
    text: &str,
) -> Result<PrimalCorrespondence, SkeletonError> {
    let slots: Vec<SlotFile> =
        serde_json::from_str(text).map_err(|e| SkeletonError::Parse(e.to_string()))?;
    let map: Vec<(String, String, String)> =
        slots.into_iter().map(|s| (s.slot, s.a, s.b)).collect();
    intersect_primal(ga, gb, &map)
}

pub fn load_correspondence(
    ga: &SkeletonGraph,
    gb: &SkeletonGraph,
    path: &Path,
) -> Result<PrimalCorrespondence, SkeletonError> {
    let text = std::fs::read_to_string(path)?;
    correspondence_from_json(ga, gb, &text)
}

// ---------------------------------------------------------------------------
// Bundled templates
// ---------------------------------------------------------------------------

pub const SMPL22_JSON: &str = include_str!("../data/smpl22.json");
pub const SMAL35_JSON: &str = include_str!("../data/smal35.json");
pub const SMPL_SMAL_MAP_JSON: &str = include_str!("../data/smpl_smal_map.json");

/// 22-joint biped template.
pub fn smpl22() -> SkeletonGraph {
    skeleton_from_json(SMPL22_JSON).expect("bundled smpl22 template")
}

/// 35-joint quadruped template (tail chain included).
pub fn smal35() -> SkeletonGraph {
    skeleton_from_json(SMAL35_JSON).expect("bundled smal35 template")
}

/// Bundled semantic map between the two templates (7 slots).
pub fn smpl_smal_correspondence(
    human: &SkeletonGraph,
    animal: &SkeletonGraph,
) -> PrimalCorrespondence {
    correspondence_from_json(human, animal, SMPL_SMAL_MAP_JSON).expect("bundled correspondence")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(n: usize) -> SkeletonGraph {
        let names = (0..n).map(|i| format!("j{i}")).collect();
        let parents = (0..n).map(|i| i as i64 - 1).collect();
        let offsets = vec![[0.0, 1.0, 0.0]; n - 1];
        build_skeleton("chain", names, parents, offsets, vec![n - 1]).unwrap()
    }

    #[test]
    fn chain_primals_are_endpoints() {
        let g = chain(3);
        assert_eq!(g.primal_ids, vec![0, 2]);
        let g5 = chain(5);
        assert_eq!(g5.primal_ids, vec![0, 4]);
    }

    #[test]
    fn star_is_all_primal() {
        let names = vec!["c".into(), "a".into(), "b".into(), "d".into()];
        let parents = vec![NO_PARENT, 0, 0, 0];
        let offsets = vec![[1.0, 0.0, 0.0]; 3];
        let g = build_skeleton("star", names, parents, offsets, vec![1, 2, 3]).unwrap();
        assert_eq!(g.primal_ids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn two_child_root_is_primal_by_exception() {
        // root has degree 2 here but must still appear among primal joints
        let names = vec!["r".into(), "a".into(), "b".into()];
        let parents = vec![NO_PARENT, 0, 0];
        let offsets = vec![[1.0, 0.0, 0.0]; 2];
        let g = build_skeleton("v", names, parents, offsets, vec![]).unwrap();
        assert_eq!(g.degree(0), 2);
        assert!(g.primal_ids.contains(&0));
    }

    #[test]
    fn cycle_detected() {
        let names = vec!["r".into(), "a".into(), "b".into()];
        let parents = vec![NO_PARENT, 2, 1]; // a <-> b two-cycle
        let offsets = vec![[1.0, 0.0, 0.0]; 2];
        let err = build_skeleton("bad", names, parents, offsets, vec![]).unwrap_err();
        assert!(matches!(err, SkeletonError::Cycle(_)));
    }

    #[test]
    fn multiple_roots_rejected() {
        let names = vec!["r".into(), "a".into()];
        let parents = vec![NO_PARENT, NO_PARENT];
        let err = build_skeleton("bad", names, parents, vec![[0.0; 3]], vec![]).unwrap_err();
        assert!(matches!(err, SkeletonError::MultipleRoots(2)));
    }

    #[test]
    fn end_effector_must_be_leaf() {
        let g = chain(3);
        let err = build_skeleton(
            "bad",
            g.joint_names.clone(),
            g.parents.clone(),
            g.offsets.clone(),
            vec![1],
        )
        .unwrap_err();
        assert!(matches!(err, SkeletonError::EndEffectorNotLeaf(_)));
    }

    #[test]
    fn bundled_templates_have_expected_counts() {
        let h = smpl22();
        assert_eq!(h.joint_count(), 22);
        assert_eq!(h.end_effector_ids.len(), 5);
        let a = smal35();
        assert_eq!(a.joint_count(), 35);
        assert_eq!(a.end_effector_ids.len(), 5);
    }

    /// Independent oracle: count degrees straight off the parent array.
    fn degree_count_oracle(parents: &[i64]) -> Vec<usize> {
        let j = parents.len();
        let root = parents.iter().position(|&p| p == NO_PARENT).unwrap();
        (0..j)
            .filter(|&i| {
                let deg = usize::from(parents[i] != NO_PARENT)
                    + parents.iter().filter(|&&p| p == i as i64).count();
                i == root || deg != 2
            })
            .collect()
    }

    #[test]
    fn bundled_primals_match_degree_count_oracle() {
        for g in [smpl22(), smal35()] {
            assert_eq!(g.primal_ids, degree_count_oracle(&g.parents), "{}", g.name);
        }
    }

    #[test]
    fn degree_two_partition() {
        // |degree-2 non-root joints| + |primal| == J for the bundled trees
        // (root counts as primal regardless of its degree).
        for g in [smpl22(), smal35()] {
            let deg2 = (0..g.joint_count())
                .filter(|&j| j != g.root() && g.degree(j) == 2)
                .count();
            assert_eq!(deg2 + g.primal_ids.len(), g.joint_count());
        }
    }

    #[test]
    fn bundled_correspondence_has_seven_slots() {
        let h = smpl22();
        let a = smal35();
        let c = smpl_smal_correspondence(&h, &a);
        assert_eq!(c.len(), 7);
        for (&ia, &ib) in c.map_a.iter().zip(&c.map_b) {
            assert!(h.primal_ids.contains(&ia));
            assert!(a.primal_ids.contains(&ib));
        }
    }

    #[test]
    fn identity_map_on_same_skeleton() {
        let h = smpl22();
        let map: Vec<(String, String, String)> = h
            .primal_ids
            .iter()
            .map(|&j| {
                let n = h.joint_names[j].clone();
                (n.clone(), n.clone(), n)
            })
            .collect();
        let c = intersect_primal(&h, &h, &map).unwrap();
        assert_eq!(c.map_a, c.map_b);
    }

    #[test]
    fn intersect_symmetry() {
        let h = smpl22();
        let a = smal35();
        let c = smpl_smal_correspondence(&h, &a);
        let text = SMPL_SMAL_MAP_JSON;
        let slots: Vec<super::SlotFile> = serde_json::from_str(text).unwrap();
        let swapped: Vec<(String, String, String)> =
            slots.into_iter().map(|s| (s.slot, s.b, s.a)).collect();
        let c2 = intersect_primal(&a, &h, &swapped).unwrap();
        assert_eq!(c2.map_a, c.map_b);
        assert_eq!(c2.map_b, c.map_a);
        assert_eq!(c2.slot_names, c.slot_names);
    }

    #[test]
    fn non_primal_reference_rejected() {
        let h = smpl22();
        let a = smal35();
        // spine1 is a degree-2 joint in the biped template
        let map = vec![("x".to_string(), "spine1".to_string(), "root".to_string())];
        let err = intersect_primal(&h, &a, &map).unwrap_err();
        assert!(matches!(err, SkeletonError::NotPrimal(_, _)));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = std::env::temp_dir().join("omgpt_skel_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("smpl22.json");
        let g = smpl22();
        save_skeleton(&g, &path).unwrap();
        let g2 = load_skeleton(&path).unwrap();
        assert_eq!(g, g2);
    }

    #[test]
    fn truncated_file_is_parse_error() {
        let text = &SMPL22_JSON[..SMPL22_JSON.len() / 2];
        let err = skeleton_from_json(text).unwrap_err();
        assert!(matches!(err, SkeletonError::Parse(_)));
    }

    #[test]
    fn bad_end_effector_is_validation_error() {
        let text = SMPL22_JSON.replace("\"left_wrist\"", "\"left_elbow\"");
        let err = skeleton_from_json(&text).unwrap_err();
        assert!(matches!(err, SkeletonError::Validation(_)));
    }

    #[test]
    fn every_end_effector_is_leaf_and_primal() {
        for g in [smpl22(), smal35()] {
            for &e in &g.end_effector_ids {
                assert!(g.is_leaf(e));
                assert!(g.primal_ids.contains(&e));
            }
        }
    }

    #[test]
    fn topological_order_is_parent_first() {
        for g in [smpl22(), smal35()] {
            let order = g.topological_order();
            assert_eq!(order.len(), g.joint_count());
            let mut pos = vec![0usize; g.joint_count()];
            for (i, &j) in order.iter().enumerate() {
                pos[j] = i;
            }
            for j in 0..g.joint_count() {
                if g.parents[j] != NO_PARENT {
                    assert!(pos[g.parents[j] as usize] < pos[j]);
                }
            }
        }
    }
}
