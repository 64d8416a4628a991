//! Random but anatomically plausible poses for fixtures and toy training.

use nalgebra::{Rotation3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, UnitSphere};

use crate::skeleton::{Pose3D, Skeleton, PART_COUNT};

/// Rest direction (x right, y down, z away from the camera), bone length in
/// millimetres, and how far a sample may wander from the rest direction
/// (0 = fixed, 1 = uniform on the sphere).
const TEMPLATE: [([f64; 3], f64, f64); PART_COUNT] = [
    ([0.0, -1.0, 0.0], 480.0, 0.25),
    ([0.0, -1.0, 0.0], 250.0, 0.3),
    ([1.0, 0.0, 0.0], 180.0, 0.2),
    ([0.0, 1.0, 0.0], 280.0, 0.8),
    ([0.0, 1.0, 0.0], 250.0, 0.8),
    ([-1.0, 0.0, 0.0], 180.0, 0.2),
    ([0.0, 1.0, 0.0], 280.0, 0.8),
    ([0.0, 1.0, 0.0], 250.0, 0.8),
    ([1.0, 0.0, 0.0], 120.0, 0.2),
    ([0.0, 1.0, 0.0], 430.0, 0.6),
    ([0.0, 1.0, 0.0], 420.0, 0.6),
    ([-1.0, 0.0, 0.0], 120.0, 0.2),
    ([0.0, 1.0, 0.0], 430.0, 0.6),
    ([0.0, 1.0, 0.0], 420.0, 0.6),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSampler {
    /// Maximum global yaw about the vertical axis, in degrees.
    pub max_yaw_deg: f64,
    /// Multiplier on every template wander amount.
    pub variability: f64,
}

impl Default for PoseSampler {
    fn default() -> Self {
        PoseSampler {
            max_yaw_deg: 60.0,
            variability: 1.0,
        }
    }
}

pub fn template_bone_lengths() -> [f64; PART_COUNT] {
    TEMPLATE.map(|t| t.1)
}

impl PoseSampler {
    /// Samples a root-centred pose in millimetres. Assumes the canonical
    /// part order.
    pub fn sample(&self, skeleton: &Skeleton, rng: &mut impl Rng) -> Pose3D {
        let yaw = Rotation3::from_axis_angle(
            &Vector3::y_axis(),
            rng.random_range(-1.0..=1.0) * self.max_yaw_deg.to_radians(),
        );
        let mut pose = Pose3D::zeros();
        for (k, &(p, c)) in skeleton.parts().iter().enumerate() {
            let (rest, len, wander) = TEMPLATE[k];
            let w = (wander * self.variability).clamp(0.0, 1.0);
            let noise: [f64; 3] = UnitSphere.sample(rng);
            let dir = Vector3::from(rest) * (1.0 - w) + Vector3::from(noise) * w;
            let dir = if dir.norm() > 1e-9 {
                dir.normalize()
            } else {
                Vector3::from(rest)
            };
            pose.coords[c] = pose.coords[p] + yaw * dir * len;
        }
        fill_non_child_joints(&mut pose, skeleton);
        pose
    }
}

/// Places spine, neck and head on the torso and head segments.
fn fill_non_child_joints(pose: &mut Pose3D, skeleton: &Skeleton) {
    let idx = |name: &str| skeleton.joint_index(name);
    if let (Some(pelvis), Some(thorax), Some(top)) = (idx("pelvis"), idx("thorax"), idx("head_top")) {
        let (a, b, t) = (pose.coords[pelvis], pose.coords[thorax], pose.coords[top]);
        for (name, pos) in [
            ("spine", a.lerp(&b, 0.5)),
            ("neck", b.lerp(&t, 0.25)),
            ("head", b.lerp(&t, 0.6)),
        ] {
            if let Some(j) = idx(name) {
                pose.coords[j] = pos;
            }
        }
    }
}
