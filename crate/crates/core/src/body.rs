//! SMPL-style parametric body at toy scale: rotations, forward kinematics,
//! shape blend offsets and linear blend skinning, plus a linear regression
//! head from 3D joints and features to body parameters.

use std::io::Write;

use nalgebra::{DMatrix, Matrix3, Rotation3, Vector3};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::container::{find, Tensor};
use crate::error::{Error, Result};
use crate::losses::{mesh_loss, Lambda, LossBreakdown, DEFAULT_ALPHA, SMPL_JOINTS, SMPL_SHAPE_DIM};
use crate::skeleton::{Pose3D, Skeleton, JOINT_COUNT};

/// Kinematic parents of the 24 SMPL joints (`None` for the pelvis).
pub const SMPL_PARENTS: [Option<usize>; SMPL_JOINTS] = {
    const P: [i8; SMPL_JOINTS] = [
        -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21,
    ];
    let mut out = [None; SMPL_JOINTS];
    let mut i = 1;
    while i < SMPL_JOINTS {
        out[i] = Some(P[i] as usize);
        i += 1;
    }
    out
};

pub const SMPL_JOINT_NAMES: [&str; SMPL_JOINTS] = [
    "pelvis",
    "l_hip",
    "r_hip",
    "spine1",
    "l_knee",
    "r_knee",
    "spine2",
    "l_ankle",
    "r_ankle",
    "spine3",
    "l_foot",
    "r_foot",
    "neck",
    "l_collar",
    "r_collar",
    "head",
    "l_shoulder",
    "r_shoulder",
    "l_elbow",
    "r_elbow",
    "l_wrist",
    "r_wrist",
    "l_hand",
    "r_hand",
];

/// Axis-angle to rotation matrix.
pub fn rodrigues(axis_angle: Vector3<f64>) -> Matrix3<f64> {
    Rotation3::new(axis_angle).into_inner()
}

/// Rotation matrix to axis-angle.
pub fn axis_angle(rotation: &Matrix3<f64>) -> Vector3<f64> {
    Rotation3::from_matrix_unchecked(*rotation).scaled_axis()
}

/// Closest rotation in the Frobenius sense.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let d = (u * v_t).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyParams {
    pub beta: [f64; SMPL_SHAPE_DIM],
    pub theta: [Vector3<f64>; SMPL_JOINTS],
}

impl Default for BodyParams {
    fn default() -> Self {
        BodyParams {
            beta: [0.0; SMPL_SHAPE_DIM],
            theta: [Vector3::zeros(); SMPL_JOINTS],
        }
    }
}

impl BodyParams {
    pub fn check_finite(&self) -> Result<()> {
        let ok = self.beta.iter().all(|v| v.is_finite()) && self.theta.iter().all(|t| t.iter().all(|v| v.is_finite()));
        if ok {
            Ok(())
        } else {
            Err(Error::NonFinite {
                context: "body parameters",
            })
        }
    }

    pub fn rotations(&self) -> Vec<Matrix3<f64>> {
        self.theta.iter().map(|t| rodrigues(*t)).collect()
    }

    /// Random parameters: `beta ~ N(0, beta_std)`, each axis-angle component
    /// `~ N(0, theta_std)` radians.
    pub fn random(rng: &mut impl Rng, beta_std: f64, theta_std: f64) -> Self {
        let n = |rng: &mut dyn rand::RngCore, s: f64| -> f64 {
            let normal = rand_distr::Normal::new(0.0, s.max(0.0)).expect("non-negative std");
            rand_distr::Distribution::sample(&normal, rng)
        };
        let mut p = BodyParams::default();
        for b in p.beta.iter_mut() {
            *b = n(rng, beta_std);
        }
        for t in p.theta.iter_mut() {
            *t = Vector3::new(n(rng, theta_std), n(rng, theta_std), n(rng, theta_std));
        }
        p
    }
}

/// Rest geometry and skinning data.
#[derive(Debug, Clone, PartialEq)]
pub struct RigTemplate {
    /// `V` rest vertices in metres.
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[usize; 3]>,
    /// `24 x V`.
    pub joint_regressor: DMatrix<f64>,
    pub parents: Vec<Option<usize>>,
    /// `V x 24`, rows sum to 1.
    pub skin_weights: DMatrix<f64>,
    /// Per vertex, one offset per shape coefficient.
    pub shape_basis: Vec<[Vector3<f64>; SMPL_SHAPE_DIM]>,
}

impl RigTemplate {
    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    /// Checks shapes, skinning weights and that parents form a rooted tree.
    /// Returns a parent-before-child joint order.
    pub fn validate(&self) -> Result<Vec<usize>> {
        let (v, j) = (self.vertex_count(), self.joint_count());
        if self.joint_regressor.shape() != (j, v) {
            return Err(Error::InvalidRig(format!(
                "joint regressor is {:?}, expected {:?}",
                self.joint_regressor.shape(),
                (j, v)
            )));
        }
        if self.skin_weights.shape() != (v, j) {
            return Err(Error::InvalidRig(format!(
                "skin weights are {:?}, expected {:?}",
                self.skin_weights.shape(),
                (v, j)
            )));
        }
        if self.shape_basis.len() != v {
            return Err(Error::InvalidRig("shape basis length differs from vertex count".into()));
        }
        for (i, row) in self.skin_weights.row_iter().enumerate() {
            if row.iter().any(|&w| !(w >= 0.0)) || (row.sum() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidRig(format!(
                    "skin weights of vertex {i} are not a partition of unity"
                )));
            }
        }
        if self.faces.iter().flatten().any(|&i| i >= v) {
            return Err(Error::InvalidRig("face index out of range".into()));
        }
        kinematic_order(&self.parents)
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        let (v, j) = (self.vertex_count(), self.joint_count());
        let arr = |shape: &[usize], data: Vec<f64>| ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches");
        let verts = arr(&[v, 3], self.vertices.iter().flat_map(|p| [p.x, p.y, p.z]).collect());
        let faces = arr(
            &[self.faces.len(), 3],
            self.faces.iter().flatten().map(|&i| i as f64).collect(),
        );
        let reg = arr(&[j, v], self.joint_regressor.transpose().iter().copied().collect());
        let parents = arr(
            &[j],
            self.parents.iter().map(|p| p.map_or(-1.0, |p| p as f64)).collect(),
        );
        let weights = arr(&[v, j], self.skin_weights.transpose().iter().copied().collect());
        let basis = arr(
            &[v, 3, SMPL_SHAPE_DIM],
            self.shape_basis
                .iter()
                .flat_map(|b| (0..3).flat_map(move |a| b.iter().map(move |o| o[a])))
                .collect(),
        );
        vec![
            Tensor::from_f64("vertices", &verts),
            Tensor::from_f64("faces", &faces),
            Tensor::from_f64("joint_regressor", &reg),
            Tensor::from_f64("parents", &parents),
            Tensor::from_f64("skin_weights", &weights),
            Tensor::from_f64("shape_basis", &basis),
        ]
    }

    /// Loads a rig from container tensors. Skinning-weight rows are
    /// renormalised after the `f32` round trip.
    pub fn from_tensors(tensors: &[Tensor]) -> Result<Self> {
        let get = |name: &str, rank: usize| -> Result<ArrayD<f64>> {
            let t = find(tensors, name)?.to_f64();
            if t.ndim() != rank {
                return Err(Error::InvalidRig(format!("{name} must have rank {rank}")));
            }
            Ok(t)
        };
        let verts = get("vertices", 2)?;
        let v = verts.shape()[0];
        let vertices = verts.outer_iter().map(|r| Vector3::new(r[0], r[1], r[2])).collect();
        let faces = get("faces", 2)?
            .outer_iter()
            .map(|r| [r[0] as usize, r[1] as usize, r[2] as usize])
            .collect();
        let parents: Vec<Option<usize>> = get("parents", 1)?
            .iter()
            .map(|&p| (p >= 0.0).then_some(p as usize))
            .collect();
        let j = parents.len();
        let reg = get("joint_regressor", 2)?;
        let weights = get("skin_weights", 2)?;
        let basis = get("shape_basis", 3)?;
        if reg.shape() != [j, v] || weights.shape() != [v, j] || basis.shape() != [v, 3, SMPL_SHAPE_DIM] {
            return Err(Error::InvalidRig("inconsistent tensor shapes".into()));
        }
        let mut skin = DMatrix::from_row_iterator(v, j, weights.iter().copied());
        for mut row in skin.row_iter_mut() {
            let s = row.sum();
            if s > 0.0 {
                row /= s;
            }
        }
        let rig = RigTemplate {
            vertices,
            faces,
            joint_regressor: DMatrix::from_row_iterator(j, v, reg.iter().copied()),
            parents,
            skin_weights: skin,
            shape_basis: (0..v)
                .map(|i| std::array::from_fn(|b| Vector3::new(basis[[i, 0, b]], basis[[i, 1, b]], basis[[i, 2, b]])))
                .collect(),
        };
        rig.validate()?;
        Ok(rig)
    }
}

/// Parent-before-child order; errors on cycles, several roots or bad indices.
pub fn kinematic_order(parents: &[Option<usize>]) -> Result<Vec<usize>> {
    let n = parents.len();
    if parents.iter().filter(|p| p.is_none()).count() != 1 {
        return Err(Error::InvalidRig("kinematic tree needs exactly one root".into()));
    }
    let mut depth = vec![None; n];
    for start in 0..n {
        let mut chain = Vec::new();
        let mut j = start;
        let base = loop {
            if let Some(d) = depth[j] {
                break d;
            }
            if chain.len() > n {
                return Err(Error::InvalidRig("cyclic parent graph".into()));
            }
            chain.push(j);
            match parents[j] {
                None => break 0usize.wrapping_sub(1),
                Some(p) if p < n => j = p,
                Some(p) => return Err(Error::InvalidRig(format!("parent index {p} out of range"))),
            }
        };
        for (i, &c) in chain.iter().rev().enumerate() {
            depth[c] = Some(base.wrapping_add(i + 1));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&j| (depth[j], j));
    Ok(order)
}

/// Rigid transform `x -> rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Transform {
    pub fn identity() -> Self {
        Transform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Transform) -> Transform {
        Transform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Rotation about `pivot`.
    pub fn about(rotation: Matrix3<f64>, pivot: &Vector3<f64>) -> Transform {
        Transform {
            rotation,
            translation: pivot - rotation * pivot,
        }
    }
}

/// Shaped rest vertices and joints.
pub fn shaped_rest(params: &BodyParams, rig: &RigTemplate) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    let verts: Vec<Vector3<f64>> = rig
        .vertices
        .iter()
        .zip(&rig.shape_basis)
        .map(|(v, basis)| {
            let mut offset = Vector3::zeros();
            for (b, o) in params.beta.iter().zip(basis) {
                offset += o * *b;
            }
            v + offset
        })
        .collect();
    let joints = (0..rig.joint_count())
        .map(|j| {
            rig.joint_regressor
                .row(j)
                .iter()
                .zip(&verts)
                .fold(Vector3::zeros(), |acc, (w, v)| acc + v * *w)
        })
        .collect();
    (verts, joints)
}

/// Per-joint transforms relative to the shaped rest pose, and posed joints.
#[derive(Debug, Clone, PartialEq)]
pub struct Kinematics {
    pub transforms: Vec<Transform>,
    pub joints: Vec<Vector3<f64>>,
}

/// Each joint's transform is its parent's composed with the local rotation
/// about the shaped rest joint; the root's parent is the identity.
pub fn forward_kinematics(params: &BodyParams, rig: &RigTemplate) -> Result<Kinematics> {
    params.check_finite()?;
    let order = kinematic_order(&rig.parents)?;
    if rig.joint_count() != SMPL_JOINTS {
        return Err(Error::InvalidRig(format!(
            "expected {SMPL_JOINTS} joints, found {}",
            rig.joint_count()
        )));
    }
    let (_, rest) = shaped_rest(params, rig);
    Ok(kinematics_from(&params.rotations(), &rest, &rig.parents, &order))
}

fn kinematics_from(
    rotations: &[Matrix3<f64>],
    rest: &[Vector3<f64>],
    parents: &[Option<usize>],
    order: &[usize],
) -> Kinematics {
    let mut transforms = vec![Transform::identity(); rest.len()];
    for &j in order {
        let local = Transform::about(rotations[j], &rest[j]);
        transforms[j] = match parents[j] {
            Some(p) => transforms[p].compose(&local),
            None => local,
        };
    }
    let joints = transforms.iter().zip(rest).map(|(t, r)| t.apply(r)).collect();
    Kinematics { transforms, joints }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub joints: Vec<Vector3<f64>>,
}

/// Linear blend skinning of the shaped template.
pub fn skin(params: &BodyParams, rig: &RigTemplate) -> Result<BodyMesh> {
    let kin = forward_kinematics(params, rig)?;
    let (verts, _) = shaped_rest(params, rig);
    let vertices = verts
        .iter()
        .enumerate()
        .map(|(i, v)| {
            // accumulate displacements so the identity pose is exact
            let mut d = Vector3::zeros();
            for (j, t) in kin.transforms.iter().enumerate() {
                let w = rig.skin_weights[(i, j)];
                if w != 0.0 {
                    d += (t.apply(v) - v) * w;
                }
            }
            v + d
        })
        .collect();
    Ok(BodyMesh {
        vertices,
        joints: kin.joints,
    })
}

const RING: usize = 4;

fn synthetic_rest_joints() -> [Vector3<f64>; SMPL_JOINTS] {
    let j = |x: f64, y: f64, z: f64| Vector3::new(x, y, z);
    [
        j(0.0, 0.0, 0.0),
        j(0.09, -0.08, 0.0),
        j(-0.09, -0.08, 0.0),
        j(0.0, 0.11, -0.02),
        j(0.10, -0.48, 0.01),
        j(-0.10, -0.48, 0.01),
        j(0.0, 0.24, -0.01),
        j(0.09, -0.88, -0.03),
        j(-0.09, -0.88, -0.03),
        j(0.0, 0.30, 0.0),
        j(0.10, -0.94, 0.10),
        j(-0.10, -0.94, 0.10),
        j(0.0, 0.51, -0.02),
        j(0.07, 0.41, -0.01),
        j(-0.07, 0.41, -0.01),
        j(0.0, 0.60, 0.03),
        j(0.17, 0.42, -0.02),
        j(-0.17, 0.42, -0.02),
        j(0.42, 0.41, -0.04),
        j(-0.42, 0.41, -0.04),
        j(0.67, 0.42, -0.04),
        j(-0.67, 0.42, -0.04),
        j(0.75, 0.41, -0.05),
        j(-0.75, 0.41, -0.05),
    ]
}

fn ring(center: Vector3<f64>, radius: f64) -> [Vector3<f64>; RING] {
    [
        center + Vector3::new(radius, 0.0, 0.0),
        center + Vector3::new(0.0, 0.0, radius),
        center - Vector3::new(radius, 0.0, 0.0),
        center - Vector3::new(0.0, 0.0, radius),
    ]
}

/// Procedural 24-joint rig with 200 vertices: a 4-vertex ring at every
/// joint, one at every bone midpoint, and a 12-vertex head cap. The joint
/// regressor averages each joint's ring, so it reproduces the rest joints.
pub fn synthetic_rig() -> RigTemplate {
    let rest = synthetic_rest_joints();
    let radius = |j: usize| match j {
        0 | 3 | 6 | 9 => 0.12,
        1 | 2 | 4 | 5 | 12 | 15 => 0.07,
        _ => 0.04,
    };
    let mut vertices = Vec::new();
    let mut weights: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut joint_rings = Vec::new();
    for (j, &c) in rest.iter().enumerate() {
        joint_rings.push(vertices.len());
        for v in ring(c, radius(j)) {
            vertices.push(v);
            weights.push(match SMPL_PARENTS[j] {
                Some(p) => vec![(p, 0.5), (j, 0.5)],
                None => vec![(j, 1.0)],
            });
        }
    }
    let mut faces = Vec::new();
    let link = |faces: &mut Vec<[usize; 3]>, a: usize, b: usize| {
        for k in 0..RING {
            let (a0, a1, b0, b1) = (a + k, a + (k + 1) % RING, b + k, b + (k + 1) % RING);
            faces.push([a0, a1, b1]);
            faces.push([a0, b1, b0]);
        }
    };
    for j in 1..SMPL_JOINTS {
        let p = SMPL_PARENTS[j].expect("non-root");
        let mid_start = vertices.len();
        for v in ring((rest[p] + rest[j]) * 0.5, 0.5 * (radius(p) + radius(j))) {
            vertices.push(v);
            weights.push(vec![(p, 1.0)]);
        }
        link(&mut faces, joint_rings[p], mid_start);
        link(&mut faces, mid_start, joint_rings[j]);
    }
    let head = rest[15];
    let cap_start = vertices.len();
    for (level, (dy, r)) in [(0.05, 0.07), (0.10, 0.05), (0.14, 0.025)].iter().enumerate() {
        for v in ring(head + Vector3::new(0.0, *dy, 0.0), *r) {
            vertices.push(v);
            weights.push(vec![(15, 1.0)]);
        }
        let below = if level == 0 {
            joint_rings[15]
        } else {
            cap_start + (level - 1) * RING
        };
        link(&mut faces, below, cap_start + level * RING);
    }
    let v = vertices.len();
    let mut skin = DMatrix::zeros(v, SMPL_JOINTS);
    for (i, ws) in weights.iter().enumerate() {
        for &(j, w) in ws {
            skin[(i, j)] = w;
        }
    }
    let mut regressor = DMatrix::zeros(SMPL_JOINTS, v);
    for (j, &start) in joint_rings.iter().enumerate() {
        for k in 0..RING {
            regressor[(j, start + k)] = 1.0 / RING as f64;
        }
    }
    let root_ring = joint_rings[0]..joint_rings[0] + RING;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5a7e);
    let shape_basis = vertices
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if root_ring.contains(&i) {
                return [Vector3::zeros(); SMPL_SHAPE_DIM];
            }
            let mut b = [Vector3::zeros(); SMPL_SHAPE_DIM];
            b[0] = Vector3::new(0.0, p.y * 0.05, 0.0);
            b[1] = Vector3::new(p.x * 0.05, 0.0, 0.0);
            b[2] = Vector3::new(0.0, 0.0, p.z * 0.05 + 0.005);
            for o in b.iter_mut().skip(3) {
                *o = Vector3::new(
                    rng.random_range(-0.004..0.004),
                    rng.random_range(-0.004..0.004),
                    rng.random_range(-0.004..0.004),
                );
            }
            b
        })
        .collect();
    RigTemplate {
        vertices,
        faces,
        joint_regressor: regressor,
        parents: SMPL_PARENTS.to_vec(),
        skin_weights: skin,
        shape_basis,
    }
}

/// Maps 24 SMPL joints to the canonical 18-joint skeleton. The head top is
/// extrapolated half a neck-to-head length beyond the head.
pub fn smpl_to_canonical(joints: &[Vector3<f64>], skeleton: &Skeleton) -> Result<Pose3D> {
    if joints.len() != SMPL_JOINTS {
        return Err(Error::dimension(&[SMPL_JOINTS], &[joints.len()]));
    }
    let pairs = [
        ("pelvis", 0),
        ("spine", 3),
        ("thorax", 9),
        ("neck", 12),
        ("head", 15),
        ("l_shoulder", 16),
        ("r_shoulder", 17),
        ("l_elbow", 18),
        ("r_elbow", 19),
        ("l_wrist", 20),
        ("r_wrist", 21),
        ("l_hip", 1),
        ("r_hip", 2),
        ("l_knee", 4),
        ("r_knee", 5),
        ("l_ankle", 7),
        ("r_ankle", 8),
    ];
    let mut pose = Pose3D::zeros();
    for (name, s) in pairs {
        let j = skeleton
            .joint_index(name)
            .ok_or_else(|| Error::InvalidSkeleton(format!("missing joint {name}")))?;
        pose.coords[j] = joints[s];
    }
    let top = skeleton
        .joint_index("head_top")
        .ok_or_else(|| Error::InvalidSkeleton("missing joint head_top".into()))?;
    pose.coords[top] = joints[15] + (joints[15] - joints[12]) * 0.5;
    Ok(pose)
}

/// Writes a mesh as ASCII OBJ (1-based face indices).
pub fn write_obj(mut out: impl Write, vertices: &[Vector3<f64>], faces: &[[usize; 3]]) -> Result<()> {
    for v in vertices {
        writeln!(out, "v {:.6} {:.6} {:.6}", v.x, v.y, v.z)?;
    }
    for f in faces {
        writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    Ok(())
}

/// Writes a pose as an OBJ stick figure: one vertex per joint, one line per
/// part. Invalid joints are written at the origin and their parts skipped.
pub fn write_stick_obj(mut out: impl Write, pose: &Pose3D, skeleton: &Skeleton) -> Result<()> {
    for c in &pose.coords {
        writeln!(out, "v {:.6} {:.6} {:.6}", c.x, c.y, c.z)?;
    }
    for &(p, c) in skeleton.parts() {
        if pose.valid[p] && pose.valid[c] {
            writeln!(out, "l {} {}", p + 1, c + 1)?;
        }
    }
    Ok(())
}

const HEAD_OUTPUTS: usize = SMPL_SHAPE_DIM + SMPL_JOINTS * 9;

/// Linear head from `[joints (18 x 3), features]` to `[beta, 24 rotation
/// matrices (row-major)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyHead {
    pub feature_dim: usize,
    /// `(weights (in x out), bias (out))`, absent until initialised.
    pub params: Option<(Array2<f64>, ndarray::Array1<f64>)>,
}

impl BodyHead {
    pub fn new(feature_dim: usize) -> Self {
        BodyHead {
            feature_dim,
            params: None,
        }
    }

    pub fn input_dim(&self) -> usize {
        JOINT_COUNT * 3 + self.feature_dim
    }

    /// Zero weights, bias set to zero shape and identity rotations.
    pub fn initialize_identity(&mut self) {
        let mut bias = ndarray::Array1::zeros(HEAD_OUTPUTS);
        for j in 0..SMPL_JOINTS {
            for d in 0..3 {
                bias[SMPL_SHAPE_DIM + j * 9 + d * 4] = 1.0;
            }
        }
        self.params = Some((Array2::zeros((self.input_dim(), HEAD_OUTPUTS)), bias));
    }

    pub fn input_row(&self, joints: &Pose3D, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.feature_dim {
            return Err(Error::dimension(&[self.feature_dim], &[features.len()]));
        }
        joints.check_finite()?;
        let mut row: Vec<f64> = joints.coords.iter().flat_map(|c| [c.x, c.y, c.z]).collect();
        row.extend_from_slice(features);
        Ok(row)
    }

    /// Raw head output: shape coefficients and unconstrained matrices.
    pub fn raw_output(&self, joints: &Pose3D, features: &[f64]) -> Result<Vec<f64>> {
        let (w, b) = self
            .params
            .as_ref()
            .ok_or(Error::NotReady("body head has no weights"))?;
        let x = ndarray::Array1::from(self.input_row(joints, features)?);
        Ok((x.dot(w) + b).to_vec())
    }
}

/// Splits a raw head output into parameters, projecting each matrix onto
/// SO(3) first.
pub fn params_from_output(raw: &[f64]) -> Result<BodyParams> {
    if raw.len() != HEAD_OUTPUTS {
        return Err(Error::dimension(&[HEAD_OUTPUTS], &[raw.len()]));
    }
    let mut p = BodyParams::default();
    p.beta.copy_from_slice(&raw[..SMPL_SHAPE_DIM]);
    for j in 0..SMPL_JOINTS {
        let m = Matrix3::from_row_slice(&raw[SMPL_SHAPE_DIM + j * 9..SMPL_SHAPE_DIM + (j + 1) * 9]);
        p.theta[j] = axis_angle(&nearest_rotation(&m));
    }
    Ok(p)
}

/// Head target: `[beta, flattened rotation matrices]`.
pub fn params_to_target(params: &BodyParams) -> Vec<f64> {
    let mut t = params.beta.to_vec();
    for r in params.rotations() {
        for row in 0..3 {
            for col in 0..3 {
                t.push(r[(row, col)]);
            }
        }
    }
    t
}

pub fn regress_body_head(head: &BodyHead, joints3d: &Pose3D, features: &[f64]) -> Result<BodyParams> {
    params_from_output(&head.raw_output(joints3d, features)?)
}

/// One supervised example for the head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSample {
    pub joints: Pose3D,
    pub features: Vec<f64>,
    pub target: BodyParams,
}

fn head_batch(head: &BodyHead, samples: &[HeadSample]) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in samples {
        xs.extend(head.input_row(&s.joints, &s.features)?);
        ys.extend(params_to_target(&s.target));
    }
    let n = samples.len();
    Ok((
        Array2::from_shape_vec((n, head.input_dim()), xs).expect("rows"),
        Array2::from_shape_vec((n, HEAD_OUTPUTS), ys).expect("rows"),
    ))
}

/// Sums of `l_theta` and `l_beta` over `samples` and their gradients with
/// respect to the head weights and bias. The returned breakdown carries the
/// upstream pose loss `l_tot` unchanged; it does not depend on the head.
pub fn head_loss_and_gradients(
    head: &BodyHead,
    samples: &[HeadSample],
    l_tot: f64,
) -> Result<(LossBreakdown, ArrayD<f64>, ArrayD<f64>)> {
    let (w, b) = head
        .params
        .as_ref()
        .ok_or(Error::NotReady("body head has no weights"))?;
    if samples.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let (x, y) = head_batch(head, samples)?;
    let beta_mask = ArrayD::from_shape_fn(IxDyn(&[HEAD_OUTPUTS]), |i| (i[0] < SMPL_SHAPE_DIM) as u8 as f64);
    let theta_mask = beta_mask.mapv(|m| 1.0 - m);
    let tape = Tape::new();
    let wv = tape.var(w.clone().into_dyn());
    let bv = tape.var(b.clone().into_dyn());
    let residual = tape
        .var(x.into_dyn())
        .matmul(wv)?
        .add(bv)?
        .sub(tape.var(y.into_dyn()))?;
    let l_beta = residual.mul(tape.var(beta_mask))?.abs_sum();
    let l_theta = residual.mul(tape.var(theta_mask))?.abs_sum();
    let l_mesh = l_theta.add(l_beta)?.add(tape.scalar(l_tot))?;
    tape.backward(l_mesh)?;
    let breakdown =
        LossBreakdown::new(0.0, 0.0, l_tot, Lambda::One, DEFAULT_ALPHA).with_body(l_theta.item(), l_beta.item());
    debug_assert_eq!(breakdown.l_mesh, Some(mesh_loss(l_theta.item(), l_beta.item(), l_tot)));
    Ok((
        breakdown,
        wv.grad().unwrap_or_else(|| ArrayD::zeros(IxDyn(w.shape()))),
        bv.grad().unwrap_or_else(|| ArrayD::zeros(IxDyn(b.shape()))),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        HeadTrainConfig {
            epochs: 3000,
            learning_rate: 0.2,
        }
    }
}

/// Full-batch subgradient descent on `l_theta + l_beta` with a step size
/// decaying linearly to zero, starting from the identity head. Returns the per-epoch breakdowns (mean per sample).
pub fn train_body_head(
    feature_dim: usize,
    samples: &[HeadSample],
    config: &HeadTrainConfig,
) -> Result<(BodyHead, Vec<LossBreakdown>)> {
    if !(config.learning_rate >= 0.0 && config.learning_rate.is_finite()) {
        return Err(Error::Config("learning rate must be finite and >= 0".into()));
    }
    let mut head = BodyHead::new(feature_dim);
    head.initialize_identity();
    let n = samples.len() as f64;
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let (loss, gw, gb) = head_loss_and_gradients(&head, samples, 0.0)?;
        let mean = LossBreakdown::new(0.0, 0.0, 0.0, Lambda::One, DEFAULT_ALPHA)
            .with_body(loss.l_theta.unwrap_or(0.0) / n, loss.l_beta.unwrap_or(0.0) / n);
        if !mean.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        log.push(mean);
        let (w, b) = head.params.as_mut().expect("initialised");
        let step = config.learning_rate * (1.0 - epoch as f64 / config.epochs as f64) / n;
        let gw: Array2<f64> = gw.into_dimensionality().expect("rank 2");
        let gb: ndarray::Array1<f64> = gb.into_dimensionality().expect("rank 1");
        w.scaled_add(-step, &gw);
        b.scaled_add(-step, &gb);
    }
    Ok((head, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::canonical_skeleton;

    fn max_abs(m: &Matrix3<f64>) -> f64 {
        m.iter().fold(0.0, |a: f64, &b| a.max(b.abs()))
    }

    #[test]
    fn rodrigues_examples() {
        assert_eq!(rodrigues(Vector3::zeros()), Matrix3::identity());
        let half = rodrigues(Vector3::new(std::f64::consts::PI, 0.0, 0.0));
        assert!(max_abs(&(half - Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)))) < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let v = Vector3::new(
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
            );
            let r = rodrigues(v);
            assert!(max_abs(&(r.transpose() * r - Matrix3::identity())) < 1e-10);
            assert!((r.determinant() - 1.0).abs() < 1e-10);
        }
        let tiny = rodrigues(Vector3::new(1e-12, -2e-12, 0.0));
        assert!(max_abs(&(tiny.transpose() * tiny - Matrix3::identity())) < 1e-15);
    }

    #[test]
    fn nearest_rotation_projects_to_so3() {
        let m = Matrix3::new(1.1, 0.2, 0.0, -0.1, 0.9, 0.05, 0.0, 0.1, 1.2);
        let r = nearest_rotation(&m);
        assert!(max_abs(&(r.transpose() * r - Matrix3::identity())) < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
        let rot = rodrigues(Vector3::new(0.3, -0.2, 0.9));
        assert!(max_abs(&(nearest_rotation(&rot) - rot)) < 1e-12);
    }

    #[test]
    fn synthetic_rig_is_valid() {
        let rig = synthetic_rig();
        assert_eq!(rig.vertex_count(), 200);
        rig.validate().unwrap();
        let (_, joints) = shaped_rest(&BodyParams::default(), &rig);
        for (j, r) in joints.iter().zip(synthetic_rest_joints()) {
            assert!((j - r).norm() < 1e-15);
        }
    }

    #[test]
    fn invalid_parent_graphs() {
        assert!(kinematic_order(&[None, Some(2), Some(1)]).is_err());
        assert!(kinematic_order(&[None, None]).is_err());
        assert!(kinematic_order(&[None, Some(5)]).is_err());
        assert_eq!(kinematic_order(&[Some(2), None, Some(1)]).unwrap(), vec![1, 2, 0]);
        let mut rig = synthetic_rig();
        rig.parents[0] = Some(3);
        assert!(matches!(skin(&BodyParams::default(), &rig), Err(Error::InvalidRig(_))));
    }

    #[test]
    fn zero_params_reproduce_template_exactly() {
        let rig = synthetic_rig();
        let mesh = skin(&BodyParams::default(), &rig).unwrap();
        assert_eq!(mesh.vertices, rig.vertices);
        assert_eq!(mesh.joints[0], Vector3::zeros());
    }

    #[test]
    fn elbow_rotation_moves_only_descendants() {
        let rig = synthetic_rig();
        let rest = forward_kinematics(&BodyParams::default(), &rig).unwrap();
        let mut p = BodyParams::default();
        p.theta[18] = Vector3::new(0.0, 0.0, 1.0);
        let posed = forward_kinematics(&p, &rig).unwrap();
        for j in 0..SMPL_JOINTS {
            let moved = (posed.joints[j] - rest.joints[j]).norm() > 1e-12;
            assert_eq!(moved, j == 20 || j == 22, "joint {j}");
        }
    }

    #[test]
    fn successive_rotations_compose() {
        let rig = synthetic_rig();
        let (_, rest) = shaped_rest(&BodyParams::default(), &rig);
        let (r1, r2) = (
            rodrigues(Vector3::new(0.2, 0.5, -0.1)),
            rodrigues(Vector3::new(-0.4, 0.1, 0.3)),
        );
        let mut p = BodyParams::default();
        p.theta[4] = axis_angle(&(r1 * r2));
        let kin = forward_kinematics(&p, &rig).unwrap();
        let chained = Transform::about(r1, &rest[4]).compose(&Transform::about(r2, &rest[4]));
        let parent = kin.transforms[1];
        let expected = parent.compose(&chained);
        assert!(max_abs(&(kin.transforms[4].rotation - expected.rotation)) < 1e-12);
        assert!((kin.transforms[4].translation - expected.translation).norm() < 1e-12);
    }

    #[test]
    fn single_influence_vertex_moves_rigidly() {
        let rig = synthetic_rig();
        let mut p = BodyParams::default();
        p.theta[0] = Vector3::new(0.0, 0.7, 0.0);
        let mesh = skin(&p, &rig).unwrap();
        let r = rodrigues(p.theta[0]);
        // the root ring is driven by the root alone
        for i in 0..RING {
            assert!((mesh.vertices[i] - r * rig.vertices[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn global_rotation_rotates_mesh_about_root() {
        let rig = synthetic_rig();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = BodyParams::random(&mut rng, 1.0, 0.3);
        let base = skin(&p, &rig).unwrap();
        let g = rodrigues(Vector3::new(0.3, -1.1, 0.4));
        let mut q = p.clone();
        q.theta[0] = axis_angle(&(g * rodrigues(p.theta[0])));
        let turned = skin(&q, &rig).unwrap();
        let root = base.joints[0];
        for (a, b) in base.vertices.iter().zip(&turned.vertices) {
            assert!((root + g * (a - root) - b).norm() < 1e-12);
        }
    }

    #[test]
    fn rig_container_round_trip() {
        let rig = synthetic_rig();
        let back = RigTemplate::from_tensors(&rig.to_tensors()).unwrap();
        assert_eq!(back.parents, rig.parents);
        assert_eq!(back.faces, rig.faces);
        for (a, b) in back.vertices.iter().zip(&rig.vertices) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn canonical_mapping_and_obj() {
        let sk = canonical_skeleton();
        let rig = synthetic_rig();
        let mesh = skin(&BodyParams::default(), &rig).unwrap();
        let pose = smpl_to_canonical(&mesh.joints, &sk).unwrap();
        assert_eq!(pose.coords[sk.joint_index("l_elbow").unwrap()], mesh.joints[18]);
        let mut buf = Vec::new();
        write_stick_obj(&mut buf, &pose, &sk).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), JOINT_COUNT);
        assert_eq!(text.lines().filter(|l| l.starts_with("l ")).count(), sk.parts().len());
        let mut buf = Vec::new();
        write_obj(&mut buf, &mesh.vertices, &rig.faces).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("v "));
    }

    #[test]
    fn head_identity_and_not_ready() {
        let sk = canonical_skeleton();
        let head = BodyHead::new(4);
        let zero = Pose3D::zeros();
        assert!(matches!(
            regress_body_head(&head, &zero, &[0.0; 4]),
            Err(Error::NotReady(_))
        ));
        let mut head = head;
        head.initialize_identity();
        let p = regress_body_head(&head, &zero, &[0.0; 4]).unwrap();
        assert_eq!(p, BodyParams::default());
        assert!(regress_body_head(&head, &zero, &[0.0; 3]).is_err());
        let _ = sk;
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let sk = canonical_skeleton();
        let rig = synthetic_rig();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples: Vec<HeadSample> = (0..3)
            .map(|_| {
                let target = BodyParams::random(&mut rng, 1.0, 0.3);
                let mesh = skin(&target, &rig).unwrap();
                HeadSample {
                    joints: smpl_to_canonical(&mesh.joints, &sk).unwrap(),
                    features: (0..2).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    target,
                }
            })
            .collect();
        let mut head = BodyHead::new(2);
        head.initialize_identity();
        if let Some((w, _)) = head.params.as_mut() {
            w.mapv_inplace(|_| rng.random_range(-0.05..0.05));
        }
        let l_tot = 1.25;
        let (loss, gw, _) = head_loss_and_gradients(&head, &samples, l_tot).unwrap();
        assert_eq!(
            loss.l_mesh.unwrap(),
            loss.l_theta.unwrap() + loss.l_beta.unwrap() + l_tot
        );
        let w0 = head.params.as_ref().unwrap().0.clone();
        for &(r, c) in &[(0usize, 0usize), (5, 12), (40, 100), (55, 225), (3, 7)] {
            let eval = |delta: f64| {
                let mut h = head.clone();
                h.params.as_mut().unwrap().0[[r, c]] = w0[[r, c]] + delta;
                head_loss_and_gradients(&h, &samples, l_tot).unwrap().0.l_mesh.unwrap()
            };
            let numeric = (eval(1e-5) - eval(-1e-5)) / 2e-5;
            let analytic = gw[[r, c]];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-4, "({r},{c}): {analytic} vs {numeric}");
        }
    }
}
