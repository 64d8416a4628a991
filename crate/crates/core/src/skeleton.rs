//! Joint/part topology and pose containers.
//!
//! The joint set is the union of the Human3.6M and MPII joint definitions
//! (18 joints). Fourteen kinematically connected `(parent, child)` pairs form
//! the skeletal parts that carry relative-depth information. The fixed
//! ordering is:
//!
//! | index | joint      | index | joint       |
//! |-------|------------|-------|-------------|
//! | 0     | pelvis     | 9     | r_elbow     |
//! | 1     | spine      | 10    | l_wrist     |
//! | 2     | thorax     | 11    | r_wrist     |
//! | 3     | neck       | 12    | l_hip       |
//! | 4     | head       | 13    | r_hip       |
//! | 5     | head_top   | 14    | l_knee      |
//! | 6     | l_shoulder | 15    | r_knee      |
//! | 7     | r_shoulder | 16    | l_ankle     |
//! | 8     | l_elbow    | 17    | r_ankle     |
//!
//! Joints that are never the child of a part: pelvis (the root), spine, neck
//! and head. They are still regressed and evaluated, they just carry no
//! part-level depth label. [`Skeleton::new`] accepts a different part list
//! for callers that want another choice.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const JOINT_COUNT: usize = 18;
pub const PART_COUNT: usize = 14;

pub const SKELETON_SCHEMA: &str = "hemlets.skeleton";
pub const SKELETON_SCHEMA_VERSION: u32 = 1;

pub const JOINT_NAMES: [&str; JOINT_COUNT] = [
    "pelvis",
    "spine",
    "thorax",
    "neck",
    "head",
    "head_top",
    "l_shoulder",
    "r_shoulder",
    "l_elbow",
    "r_elbow",
    "l_wrist",
    "r_wrist",
    "l_hip",
    "r_hip",
    "l_knee",
    "r_knee",
    "l_ankle",
    "r_ankle",
];

const CANONICAL_PARTS: [(usize, usize); PART_COUNT] = [
    (0, 2),   // pelvis -> thorax
    (2, 5),   // thorax -> head_top
    (2, 6),   // thorax -> l_shoulder
    (6, 8),   // l_shoulder -> l_elbow
    (8, 10),  // l_elbow -> l_wrist
    (2, 7),   // thorax -> r_shoulder
    (7, 9),   // r_shoulder -> r_elbow
    (9, 11),  // r_elbow -> r_wrist
    (0, 12),  // pelvis -> l_hip
    (12, 14), // l_hip -> l_knee
    (14, 16), // l_knee -> l_ankle
    (0, 13),  // pelvis -> r_hip
    (13, 15), // r_hip -> r_knee
    (15, 17), // r_knee -> r_ankle
];

const CANONICAL_MIRROR_PAIRS: [(usize, usize); 6] = [(6, 7), (8, 9), (10, 11), (12, 13), (14, 15), (16, 17)];

/// Canonical joint/part topology.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skeleton {
    joints: Vec<String>,
    parts: Vec<(usize, usize)>,
    root: usize,
    mirror_pairs: Vec<(usize, usize)>,
    #[serde(skip)]
    mirror: Vec<usize>,
}

impl Skeleton {
    /// Builds a skeleton after checking every topology invariant.
    pub fn new(
        joints: Vec<String>,
        parts: Vec<(usize, usize)>,
        root: usize,
        mirror_pairs: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let bad = |msg: String| Err(Error::InvalidSkeleton(msg));
        if joints.len() != JOINT_COUNT {
            return bad(format!("expected {JOINT_COUNT} joints, got {}", joints.len()));
        }
        if parts.len() != PART_COUNT {
            return bad(format!("expected {PART_COUNT} parts, got {}", parts.len()));
        }
        if root >= JOINT_COUNT {
            return bad(format!("root index {root} out of range"));
        }
        let mut parent_of = [None; JOINT_COUNT];
        for &(p, c) in &parts {
            if p >= JOINT_COUNT || c >= JOINT_COUNT || p == c {
                return bad(format!("part ({p}, {c}) is not a pair of distinct joints"));
            }
            if c == root {
                return bad(format!("part ({p}, {c}) points into the root"));
            }
            if parent_of[c].is_some() {
                return bad(format!("joint {c} is the child of more than one part"));
            }
            parent_of[c] = Some(p);
        }
        // Every part child must reach the root through parent links.
        for &(_, c) in &parts {
            let mut cur = c;
            let mut steps = 0;
            while let Some(p) = parent_of[cur] {
                cur = p;
                steps += 1;
                if steps > JOINT_COUNT {
                    return bad(format!("cycle through joint {c}"));
                }
            }
            if cur != root {
                return bad(format!("joint {c} does not reach the root"));
            }
        }

        let mut mirror: Vec<usize> = (0..JOINT_COUNT).collect();
        for &(l, r) in &mirror_pairs {
            if l >= JOINT_COUNT || r >= JOINT_COUNT || l == r {
                return bad(format!("mirror pair ({l}, {r}) invalid"));
            }
            if mirror[l] != l || mirror[r] != r {
                return bad(format!("joint in mirror pair ({l}, {r}) already paired"));
            }
            mirror[l] = r;
            mirror[r] = l;
        }
        let skeleton = Skeleton {
            joints,
            parts,
            root,
            mirror_pairs,
            mirror,
        };
        // Mirroring must map parts onto parts.
        for k in 0..PART_COUNT {
            if skeleton.mirror_part(k).is_none() {
                return bad(format!("part {k} has no mirrored counterpart"));
            }
        }
        Ok(skeleton)
    }

    pub fn joints(&self) -> &[String] {
        &self.joints
    }

    pub fn parts(&self) -> &[(usize, usize)] {
        &self.parts
    }

    pub fn part(&self, k: usize) -> Result<(usize, usize)> {
        self.parts.get(k).copied().ok_or(Error::IndexOutOfRange {
            index: k,
            len: PART_COUNT,
        })
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn mirror_pairs(&self) -> &[(usize, usize)] {
        &self.mirror_pairs
    }

    /// Left/right counterpart of a joint (itself for central joints).
    pub fn mirror(&self, joint: usize) -> usize {
        self.mirror[joint]
    }

    /// Index of the part obtained by mirroring both endpoints of part `k`.
    pub fn mirror_part(&self, k: usize) -> Option<usize> {
        let (p, c) = *self.parts.get(k)?;
        let target = (self.mirror[p], self.mirror[c]);
        self.parts.iter().position(|&pc| pc == target)
    }

    /// Joints that are not the child of any part (including the root).
    pub fn non_child_joints(&self) -> Vec<usize> {
        (0..JOINT_COUNT)
            .filter(|j| !self.parts.iter().any(|&(_, c)| c == *j))
            .collect()
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|n| n == name)
    }

    /// Serializes the topology as a versioned JSON document.
    pub fn to_document(&self) -> String {
        let doc = SkeletonDocument {
            schema: SKELETON_SCHEMA.to_string(),
            version: SKELETON_SCHEMA_VERSION,
            joints: self.joints.clone(),
            parts: self.parts.clone(),
            root: self.root,
            mirror_pairs: self.mirror_pairs.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("skeleton document serializes")
    }

    /// Parses and validates a document produced by [`Skeleton::to_document`].
    pub fn from_document(text: &str) -> Result<Self> {
        let doc: SkeletonDocument = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        if doc.schema != SKELETON_SCHEMA {
            return Err(Error::Schema(format!("unexpected schema `{}`", doc.schema)));
        }
        if doc.version != SKELETON_SCHEMA_VERSION {
            return Err(Error::Schema(format!("unsupported version {}", doc.version)));
        }
        Skeleton::new(doc.joints, doc.parts, doc.root, doc.mirror_pairs)
    }

    /// SHA-256 of the canonical compact serialization, hex encoded.
    pub fn topology_hash(&self) -> String {
        let compact = serde_json::to_string(&(&self.joints, &self.parts, self.root, &self.mirror_pairs))
            .expect("topology serializes");
        hex::encode(Sha256::digest(compact.as_bytes()))
    }
}

#[derive(Serialize, Deserialize)]
struct SkeletonDocument {
    schema: String,
    version: u32,
    joints: Vec<String>,
    parts: Vec<(usize, usize)>,
    root: usize,
    mirror_pairs: Vec<(usize, usize)>,
}

/// The fixed 18-joint / 14-part topology.
pub fn canonical_skeleton() -> Skeleton {
    Skeleton::new(
        JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
        CANONICAL_PARTS.to_vec(),
        0,
        CANONICAL_MIRROR_PAIRS.to_vec(),
    )
    .expect("canonical skeleton is valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthUnit {
    #[default]
    Millimeters,
    Voxels,
}

/// 3D joint positions with a per-joint validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose3D {
    pub coords: [Vector3<f64>; JOINT_COUNT],
    pub valid: [bool; JOINT_COUNT],
    pub unit: LengthUnit,
}

impl Pose3D {
    /// All joints valid.
    pub fn new(coords: [Vector3<f64>; JOINT_COUNT]) -> Self {
        Pose3D {
            coords,
            valid: [true; JOINT_COUNT],
            unit: LengthUnit::Millimeters,
        }
    }

    pub fn with_validity(coords: [Vector3<f64>; JOINT_COUNT], valid: [bool; JOINT_COUNT]) -> Self {
        Pose3D {
            coords,
            valid,
            unit: LengthUnit::Millimeters,
        }
    }

    pub fn in_voxels(mut self) -> Self {
        self.unit = LengthUnit::Voxels;
        self
    }

    pub fn zeros() -> Self {
        Pose3D::new([Vector3::zeros(); JOINT_COUNT])
    }

    pub fn joint(&self, j: usize) -> Option<Vector3<f64>> {
        (j < JOINT_COUNT && self.valid[j]).then(|| self.coords[j])
    }

    fn endpoints(&self, skeleton: &Skeleton, k: usize) -> Result<(Vector3<f64>, Vector3<f64>)> {
        let (p, c) = skeleton.part(k)?;
        let zp = self.joint(p).ok_or(Error::InvalidJoint { joint: p })?;
        let zc = self.joint(c).ok_or(Error::InvalidJoint { joint: c })?;
        Ok((zp, zc))
    }

    /// Checks that every valid joint has finite coordinates.
    pub fn check_finite(&self) -> Result<()> {
        let ok = self
            .coords
            .iter()
            .zip(&self.valid)
            .all(|(c, &v)| !v || c.iter().all(|x| x.is_finite()));
        if ok {
            Ok(())
        } else {
            Err(Error::NonFinite { context: "pose3d" })
        }
    }

    /// Translates the pose so that `root` sits at the origin.
    pub fn root_relative(&self, root: usize) -> Result<Pose3D> {
        let r = self.joint(root).ok_or(Error::InvalidJoint { joint: root })?;
        let mut out = self.clone();
        for c in out.coords.iter_mut() {
            *c -= r;
        }
        Ok(out)
    }

    /// Applies `f` to every coordinate (valid or not).
    pub fn map(&self, f: impl Fn(Vector3<f64>) -> Vector3<f64>) -> Pose3D {
        let mut out = self.clone();
        for c in out.coords.iter_mut() {
            *c = f(*c);
        }
        out
    }

    /// Negates x and swaps left/right joints.
    pub fn mirrored(&self, skeleton: &Skeleton) -> Pose3D {
        let mut out = self.clone();
        for j in 0..JOINT_COUNT {
            let m = skeleton.mirror(j);
            let c = self.coords[m];
            out.coords[j] = Vector3::new(-c.x, c.y, c.z);
            out.valid[j] = self.valid[m];
        }
        out
    }

    /// Orthographic projection onto the image plane (drops z).
    pub fn project_xy(&self) -> Pose2D {
        let mut coords = [Vector2::zeros(); JOINT_COUNT];
        for (dst, src) in coords.iter_mut().zip(&self.coords) {
            *dst = src.xy();
        }
        Pose2D {
            coords,
            valid: self.valid,
        }
    }
}

/// 2D joint positions in pixels with a per-joint validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose2D {
    pub coords: [Vector2<f64>; JOINT_COUNT],
    pub valid: [bool; JOINT_COUNT],
}

impl Pose2D {
    pub fn new(coords: [Vector2<f64>; JOINT_COUNT]) -> Self {
        Pose2D {
            coords,
            valid: [true; JOINT_COUNT],
        }
    }

    pub fn joint(&self, j: usize) -> Option<Vector2<f64>> {
        (j < JOINT_COUNT && self.valid[j]).then(|| self.coords[j])
    }

    pub fn check_finite(&self) -> Result<()> {
        let ok = self
            .coords
            .iter()
            .zip(&self.valid)
            .all(|(c, &v)| !v || c.iter().all(|x| x.is_finite()));
        if ok {
            Ok(())
        } else {
            Err(Error::NonFinite { context: "pose2d" })
        }
    }

    /// Mirrors about the vertical line `x = axis_x` and swaps left/right joints.
    pub fn mirrored(&self, skeleton: &Skeleton, axis_x: f64) -> Pose2D {
        let mut out = self.clone();
        for j in 0..JOINT_COUNT {
            let m = skeleton.mirror(j);
            let c = self.coords[m];
            out.coords[j] = Vector2::new(2.0 * axis_x - c.x, c.y);
            out.valid[j] = self.valid[m];
        }
        out
    }
}

/// Euclidean length of part `k`.
pub fn part_length(pose: &Pose3D, skeleton: &Skeleton, k: usize) -> Result<f64> {
    let (p, c) = pose.endpoints(skeleton, k)?;
    Ok((c - p).norm())
}

/// Angle in degrees between part `k` and the image (x-y) plane, in `[0, 90]`.
pub fn tilt_angle(pose: &Pose3D, skeleton: &Skeleton, k: usize) -> Result<f64> {
    let (p, c) = pose.endpoints(skeleton, k)?;
    let d = c - p;
    let len = d.norm();
    if len == 0.0 {
        return Err(Error::DegeneratePart { part: k });
    }
    Ok((d.z.abs() / len).min(1.0).asin().to_degrees())
}

/// Tilt angle signed by `sign(z_child - z_parent)`: positive when the child
/// is farther from the camera than the parent.
pub fn signed_tilt_angle(pose: &Pose3D, skeleton: &Skeleton, k: usize) -> Result<f64> {
    let tilt = tilt_angle(pose, skeleton, k)?;
    let (p, c) = pose.endpoints(skeleton, k)?;
    Ok(if c.z < p.z { -tilt } else { tilt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pose_with_part(k: usize, p: Vector3<f64>, c: Vector3<f64>) -> (Pose3D, Skeleton) {
        let sk = canonical_skeleton();
        let mut pose = Pose3D::zeros();
        let (pi, ci) = sk.part(k).unwrap();
        pose.coords[pi] = p;
        pose.coords[ci] = c;
        (pose, sk)
    }

    #[test]
    fn canonical_counts() {
        let sk = canonical_skeleton();
        assert_eq!(sk.joints().len(), 18);
        assert_eq!(sk.parts().len(), 14);
        assert_eq!(sk.root(), 0);
        assert_eq!(sk.non_child_joints(), vec![0, 1, 3, 4]);
    }

    #[test]
    fn mirror_is_involution() {
        let sk = canonical_skeleton();
        for j in 0..JOINT_COUNT {
            assert_eq!(sk.mirror(sk.mirror(j)), j);
        }
        for k in 0..PART_COUNT {
            let m = sk.mirror_part(k).unwrap();
            assert_eq!(sk.mirror_part(m), Some(k));
        }
        assert_eq!(sk.mirror(sk.joint_index("l_wrist").unwrap()), 11);
    }

    #[test]
    fn every_child_reaches_root() {
        let sk = canonical_skeleton();
        for &(_, c) in sk.parts() {
            let mut cur = c;
            let mut guard = 0;
            while cur != sk.root() {
                cur = sk.parts().iter().find(|&&(_, ch)| ch == cur).unwrap().0;
                guard += 1;
                assert!(guard < JOINT_COUNT);
            }
        }
    }

    #[test]
    fn deterministic_construction_and_stable_hash() {
        let a = canonical_skeleton();
        let b = canonical_skeleton();
        assert_eq!(a, b);
        assert_eq!(
            a.topology_hash(),
            "e038d2585c4fe868a77f7cab3c169ac71451c433b8d049dd94145b77b935c336"
        );
    }

    #[test]
    fn document_round_trip() {
        let sk = canonical_skeleton();
        let doc = sk.to_document();
        let back = Skeleton::from_document(&doc).unwrap();
        assert_eq!(back.topology_hash(), sk.topology_hash());
        assert!(Skeleton::from_document(&doc.replace("hemlets.skeleton", "other")).is_err());
    }

    #[test]
    fn rejects_bad_topologies() {
        let names: Vec<String> = JOINT_NAMES.iter().map(|s| s.to_string()).collect();
        let mut parts = CANONICAL_PARTS.to_vec();
        parts[3] = (6, 6);
        assert!(Skeleton::new(names.clone(), parts, 0, vec![]).is_err());
        let mut parts = CANONICAL_PARTS.to_vec();
        parts[4] = (8, 8 + 30);
        assert!(Skeleton::new(names.clone(), parts, 0, vec![]).is_err());
        // two parents for one child
        let mut parts = CANONICAL_PARTS.to_vec();
        parts[1] = (3, 6);
        assert!(Skeleton::new(names.clone(), parts, 0, vec![]).is_err());
        assert!(Skeleton::new(names[..17].to_vec(), CANONICAL_PARTS.to_vec(), 0, vec![]).is_err());
        // a cycle between two non-root joints
        let mut parts = CANONICAL_PARTS.to_vec();
        parts[0] = (5, 2);
        assert!(Skeleton::new(names, parts, 0, vec![]).is_err());
    }

    #[test]
    fn part_length_examples() {
        let (pose, sk) = pose_with_part(3, Vector3::zeros(), Vector3::new(0.0, 3.0, 4.0));
        assert_eq!(part_length(&pose, &sk, 3).unwrap(), 5.0);
        let (pose, sk) = pose_with_part(3, Vector3::new(1.0, 2.0, 2.0), Vector3::new(1.0, 2.0, 2.0));
        assert_eq!(part_length(&pose, &sk, 3).unwrap(), 0.0);
        let (pose, sk) = pose_with_part(3, Vector3::new(1.0, 2.0, 2.0), Vector3::new(3.0, 5.0, 8.0));
        assert_eq!(part_length(&pose, &sk, 3).unwrap(), 7.0);
    }

    #[test]
    fn part_length_invalid_endpoint() {
        let (mut pose, sk) = pose_with_part(3, Vector3::zeros(), Vector3::x());
        pose.valid[8] = false;
        assert!(matches!(
            part_length(&pose, &sk, 3),
            Err(Error::InvalidJoint { joint: 8 })
        ));
    }

    #[test]
    fn tilt_examples() {
        let (pose, sk) = pose_with_part(0, Vector3::zeros(), Vector3::new(0.0, 0.0, 7.0));
        assert_abs_diff_eq!(tilt_angle(&pose, &sk, 0).unwrap(), 90.0, epsilon = 1e-12);
        let (pose, sk) = pose_with_part(0, Vector3::zeros(), Vector3::new(3.0, -2.0, 0.0));
        assert_eq!(tilt_angle(&pose, &sk, 0).unwrap(), 0.0);
        let (pose, sk) = pose_with_part(0, Vector3::zeros(), Vector3::new(0.0, 3f64.sqrt(), 1.0));
        assert_abs_diff_eq!(tilt_angle(&pose, &sk, 0).unwrap(), 30.0, epsilon = 1e-12);
        let (pose, sk) = pose_with_part(0, Vector3::zeros(), Vector3::new(0.0, 3f64.sqrt(), -1.0));
        assert_abs_diff_eq!(signed_tilt_angle(&pose, &sk, 0).unwrap(), -30.0, epsilon = 1e-12);
        let (pose, sk) = pose_with_part(0, Vector3::zeros(), Vector3::zeros());
        assert!(matches!(
            tilt_angle(&pose, &sk, 0),
            Err(Error::DegeneratePart { part: 0 })
        ));
    }

    fn arb_vec() -> impl Strategy<Value = Vector3<f64>> {
        (-500.0..500.0f64, -500.0..500.0f64, -500.0..500.0f64).prop_map(|(x, y, z)| Vector3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn length_rotation_translation_invariant(
            p in arb_vec(), c in arb_vec(), t in arb_vec(),
            axis in arb_vec(), angle in -3.0..3.0f64,
        ) {
            prop_assume!(axis.norm() > 1e-3);
            let rot = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
            let (pose, sk) = pose_with_part(5, p, c);
            let moved = pose.map(|v| rot * v + t);
            let a = part_length(&pose, &sk, 5).unwrap();
            let b = part_length(&moved, &sk, 5).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
        }

        #[test]
        fn tilt_in_plane_rotation_invariant(
            p in arb_vec(), c in arb_vec(), t in arb_vec(), angle in -3.0..3.0f64,
        ) {
            prop_assume!((c - p).norm() > 1e-3);
            let rot = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), angle);
            let (pose, sk) = pose_with_part(9, p, c);
            let moved = pose.map(|v| rot * v + t);
            let a = tilt_angle(&pose, &sk, 9).unwrap();
            let b = tilt_angle(&moved, &sk, 9).unwrap();
            prop_assert!((0.0..=90.0).contains(&a));
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}
