//! Gaussian joint heatmaps, part-centric heatmap triplets and volumetric
//! targets.
//!
//! Conventions used throughout:
//!
//! * Heatmap arrays are indexed `[row, col]`, i.e. `[y, x]`; volumes are
//!   `[z, y, x]`. Coordinates are 0-based node indices.
//! * Depth `z` grows away from the camera. A part whose child is closer to
//!   the camera than its parent (`z_p - z_c > eps`) has polarity `+1`.
//! * Gaussians have amplitude 1 at their (possibly sub-pixel) centre and are
//!   rendered analytically. Two joints sharing a layer combine by element-wise
//!   maximum.

use nalgebra::{Vector2, Vector3};
use ndarray::{s, Array2, Array3, Array4, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{part_length, signed_tilt_angle, Pose2D, Pose3D, Skeleton, JOINT_COUNT};

pub const DEFAULT_GRID: usize = 64;
pub const DEFAULT_SIGMA: f64 = 2.0;

/// Output of the tri-state depth function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Negative,
    Zero,
    Positive,
}

impl Polarity {
    pub fn value(self) -> i8 {
        match self {
            Polarity::Negative => -1,
            Polarity::Zero => 0,
            Polarity::Positive => 1,
        }
    }

    pub fn from_value(v: i8) -> Option<Self> {
        match v {
            -1 => Some(Polarity::Negative),
            0 => Some(Polarity::Zero),
            1 => Some(Polarity::Positive),
            _ => None,
        }
    }

    /// Layer index inside a triplet: `T^-1`, `T^0`, `T^+1`.
    pub fn layer(self) -> usize {
        (self.value() + 1) as usize
    }

    pub fn opposite(self) -> Self {
        match self {
            Polarity::Negative => Polarity::Positive,
            Polarity::Zero => Polarity::Zero,
            Polarity::Positive => Polarity::Negative,
        }
    }
}

/// Relative depth ordering of a parent/child pair.
///
/// `|z_p - z_c| == eps` falls into the zero state.
pub fn tri_state(z_parent: f64, z_child: f64, epsilon: f64) -> Polarity {
    debug_assert!(epsilon >= 0.0);
    let d = z_parent - z_child;
    if d > epsilon {
        Polarity::Positive
    } else if d < -epsilon {
        Polarity::Negative
    } else {
        Polarity::Zero
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Epsilon {
    pub value: f64,
    pub degenerate: bool,
}

/// Per-part sensitivity: half of the 3D part length.
pub fn adaptive_epsilon(pose: &Pose3D, skeleton: &Skeleton, k: usize) -> Result<Epsilon> {
    let len = part_length(pose, skeleton, k)?;
    Ok(Epsilon {
        value: 0.5 * len,
        degenerate: len == 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridDims {
    pub height: usize,
    pub width: usize,
}

impl GridDims {
    pub fn square(n: usize) -> Self {
        GridDims { height: n, width: n }
    }

    fn contains(&self, p: Vector2<f64>) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= (self.width - 1) as f64 && p.y <= (self.height - 1) as f64
    }
}

impl Default for GridDims {
    fn default() -> Self {
        GridDims::square(DEFAULT_GRID)
    }
}

/// A single H x W heatmap.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapGrid {
    pub values: Array2<f64>,
    pub out_of_frame: bool,
}

impl HeatmapGrid {
    pub fn dims(&self) -> GridDims {
        GridDims {
            height: self.values.nrows(),
            width: self.values.ncols(),
        }
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("sigma must be positive, got {sigma}")))
    }
}

/// Writes `max(existing, gaussian)` into `out`.
fn splat_max(mut out: ndarray::ArrayViewMut2<f64>, center: Vector2<f64>, sigma: f64) {
    let inv = 1.0 / (2.0 * sigma * sigma);
    for ((y, x), v) in out.indexed_iter_mut() {
        let dx = x as f64 - center.x;
        let dy = y as f64 - center.y;
        let g = (-(dx * dx + dy * dy) * inv).exp();
        if g > *v {
            *v = g;
        }
    }
}

/// Amplitude-1 isotropic Gaussian centred at `center` (pixels, `(x, y)`).
pub fn render_gaussian(center: Vector2<f64>, dims: GridDims, sigma: f64) -> Result<HeatmapGrid> {
    check_sigma(sigma)?;
    if !center.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            context: "gaussian centre",
        });
    }
    let mut values = Array2::zeros((dims.height, dims.width));
    splat_max(values.view_mut(), center, sigma);
    Ok(HeatmapGrid {
        values,
        out_of_frame: !dims.contains(center),
    })
}

/// Per-joint 2D heatmaps `N x H x W`; invalid joints give all-zero channels.
pub fn render_joint_heatmaps(pose2d: &Pose2D, dims: GridDims, sigma: f64) -> Result<Array3<f64>> {
    check_sigma(sigma)?;
    pose2d.check_finite()?;
    let mut out = Array3::zeros((JOINT_COUNT, dims.height, dims.width));
    for (j, mut channel) in out.axis_iter_mut(Axis(0)).enumerate() {
        if let Some(c) = pose2d.joint(j) {
            splat_max(channel.view_mut(), c, sigma);
        }
    }
    Ok(out)
}

/// Element-wise log of a non-negative heatmap, for decoding rendered targets
/// with soft-argmax. Zeros map to `ln(f64::MIN_POSITIVE)`.
pub fn log_heatmap<D: ndarray::Dimension>(values: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    values.mapv(|v| v.max(f64::MIN_POSITIVE).ln())
}

/// What is known about the depth ordering of one part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PartLabel {
    /// Both endpoints visible in 2D and the ordering is known.
    Known(Polarity),
    /// Both endpoints visible in 2D, ordering unknown.
    Unknown,
    /// An endpoint is missing in 2D; nothing is supervised.
    Missing,
}

impl PartLabel {
    pub fn polarity(self) -> Option<Polarity> {
        match self {
            PartLabel::Known(p) => Some(p),
            _ => None,
        }
    }
}

/// How parts with an [`PartLabel::Unknown`] ordering are masked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnknownPolicy {
    /// Mask the `+-1` layers and the child's neighbourhood in `T^0`, keeping
    /// the parent's `T^0` supervision.
    #[default]
    KeepParent,
    /// Mask all layers of the part.
    MaskAll,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dims: GridDims,
    pub sigma: f64,
    pub unknown_policy: UnknownPolicy,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dims: GridDims::default(),
            sigma: DEFAULT_SIGMA,
            unknown_policy: UnknownPolicy::default(),
        }
    }
}

/// Per-part layered heatmaps `K x L x H x W` with a binary mask of the same
/// shape. `L = 3` for triplets, `5` for the five-state variant.
#[derive(Debug, Clone, PartialEq)]
pub struct PartHeatmaps {
    pub values: Array4<f64>,
    pub mask: Array4<f64>,
}

pub type HeatmapTriplets = PartHeatmaps;

impl PartHeatmaps {
    pub fn zeros(parts: usize, layers: usize, dims: GridDims) -> Self {
        let shape = (parts, layers, dims.height, dims.width);
        PartHeatmaps {
            values: Array4::zeros(shape),
            mask: Array4::zeros(shape),
        }
    }

    pub fn part_count(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn layer_count(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn dims(&self) -> GridDims {
        GridDims {
            height: self.values.shape()[2],
            width: self.values.shape()[3],
        }
    }

    pub fn layer(&self, part: usize, layer: usize) -> ArrayView2<'_, f64> {
        self.values.slice(s![part, layer, .., ..])
    }

    /// Horizontally flips every layer and swaps left/right parts.
    pub fn mirrored(&self, skeleton: &Skeleton) -> Result<PartHeatmaps> {
        let mut out = self.clone();
        for k in 0..self.part_count() {
            let m = skeleton
                .mirror_part(k)
                .ok_or_else(|| Error::InvalidSkeleton(format!("part {k} has no mirror")))?;
            out.values
                .slice_mut(s![k, .., .., ..])
                .assign(&self.values.slice(s![m, .., .., ..;-1]));
            out.mask
                .slice_mut(s![k, .., .., ..])
                .assign(&self.mask.slice(s![m, .., .., ..;-1]));
        }
        Ok(out)
    }
}

fn endpoints_2d(pose2d: &Pose2D, skeleton: &Skeleton, k: usize) -> Option<(Vector2<f64>, Vector2<f64>)> {
    let (p, c) = skeleton.parts()[k];
    Some((pose2d.joint(p)?, pose2d.joint(c)?))
}

/// Depth labels derived from a 3D pose (tri-state with adaptive epsilon).
///
/// Parts missing in 2D are [`PartLabel::Missing`]; parts visible in 2D but
/// with a missing 3D endpoint are [`PartLabel::Unknown`].
pub fn part_labels(pose3d: &Pose3D, pose2d: &Pose2D, skeleton: &Skeleton) -> Result<Vec<PartLabel>> {
    pose3d.check_finite()?;
    (0..skeleton.parts().len())
        .map(|k| {
            if endpoints_2d(pose2d, skeleton, k).is_none() {
                return Ok(PartLabel::Missing);
            }
            let (p, c) = skeleton.parts()[k];
            match (pose3d.joint(p), pose3d.joint(c)) {
                (Some(zp), Some(zc)) => {
                    let eps = adaptive_epsilon(pose3d, skeleton, k)?;
                    Ok(PartLabel::Known(tri_state(zp.z, zc.z, eps.value)))
                }
                _ => Ok(PartLabel::Unknown),
            }
        })
        .collect()
}

/// Builds triplets from 2D locations and per-part depth labels.
pub fn encode_with_labels(
    pose2d: &Pose2D,
    labels: &[PartLabel],
    skeleton: &Skeleton,
    config: &EncoderConfig,
) -> Result<HeatmapTriplets> {
    check_sigma(config.sigma)?;
    pose2d.check_finite()?;
    let part_count = skeleton.parts().len();
    if labels.len() != part_count {
        return Err(Error::dimension(&[part_count], &[labels.len()]));
    }
    let mut out = PartHeatmaps::zeros(part_count, 3, config.dims);
    let zero = Polarity::Zero.layer();
    for (k, label) in labels.iter().enumerate() {
        let Some((pp, pc)) = endpoints_2d(pose2d, skeleton, k) else {
            continue;
        };
        if *label == PartLabel::Missing {
            continue;
        }
        let mut values = out.values.slice_mut(s![k, .., .., ..]);
        let mut mask = out.mask.slice_mut(s![k, .., .., ..]);
        splat_max(values.slice_mut(s![zero, .., ..]), pp, config.sigma);
        match *label {
            PartLabel::Missing => unreachable!(),
            PartLabel::Known(r) => {
                splat_max(values.slice_mut(s![r.layer(), .., ..]), pc, config.sigma);
                mask.fill(1.0);
            }
            PartLabel::Unknown => {
                if config.unknown_policy == UnknownPolicy::KeepParent {
                    mask_child_neighbourhood(mask.slice_mut(s![zero, .., ..]), pc, config.sigma);
                }
            }
        }
    }
    Ok(out)
}

/// Sets the mask to 1 everywhere except within `3 sigma` of `child`.
fn mask_child_neighbourhood(mut mask: ndarray::ArrayViewMut2<f64>, child: Vector2<f64>, sigma: f64) {
    let radius2 = (3.0 * sigma).powi(2);
    for ((y, x), m) in mask.indexed_iter_mut() {
        let d2 = (x as f64 - child.x).powi(2) + (y as f64 - child.y).powi(2);
        *m = if d2 <= radius2 { 0.0 } else { 1.0 };
    }
}

/// HEMlets targets: parent in `T^0`, child in `T^r` with
/// `r = tri_state(z_p, z_c, 0.5 * |B_k|)`.
pub fn encode_hemlets(
    pose3d: &Pose3D,
    pose2d: &Pose2D,
    skeleton: &Skeleton,
    config: &EncoderConfig,
) -> Result<HeatmapTriplets> {
    let labels = part_labels(pose3d, pose2d, skeleton)?;
    encode_with_labels(pose2d, &labels, skeleton, config)
}

/// Fraction of the `T^0` peak that a `+-1` response must reach to count as
/// the child's peak.
const CHILD_PRESENCE: f64 = 0.5;

/// Recovers a part's polarity from its triplet: the layer holding the child's
/// peak.
pub fn decode_hemlets_polarity(triplets: &HeatmapTriplets, k: usize) -> Result<Polarity> {
    if triplets.layer_count() != 3 {
        return Err(Error::dimension(&[3], &[triplets.layer_count()]));
    }
    if k >= triplets.part_count() {
        return Err(Error::IndexOutOfRange {
            index: k,
            len: triplets.part_count(),
        });
    }
    let masked = |layer: usize| triplets.mask.slice(s![k, layer, .., ..]).iter().all(|&m| m == 0.0);
    if masked(Polarity::Negative.layer()) && masked(Polarity::Positive.layer()) {
        return Err(Error::UnknownPolarity {
            part: k,
            reason: "part is masked",
        });
    }
    let peak = |layer: usize| {
        triplets
            .layer(k, layer)
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let neg = peak(Polarity::Negative.layer());
    let zero = peak(Polarity::Zero.layer());
    let pos = peak(Polarity::Positive.layer());
    let top = neg.max(zero).max(pos);
    if !(top > 0.0) {
        return Err(Error::UnknownPolarity {
            part: k,
            reason: "no response in any layer",
        });
    }
    // The parent always sits in T^0, so T^0 cannot locate the child. The
    // child is in a +-1 layer iff that layer carries a peak comparable to the
    // T^0 peak; otherwise it shares T^0 with the parent.
    let side = pos.max(neg);
    if side < CHILD_PRESENCE * zero {
        return Ok(Polarity::Zero);
    }
    Ok(if pos >= neg {
        Polarity::Positive
    } else {
        Polarity::Negative
    })
}

/// Layer index (0..5) of a signed tilt angle in degrees for the five-state
/// variant. Bins: `[-90,-60)`, `[-60,-30)`, `[-30,30]`, `(30,60]`, `(60,90]`.
pub fn five_state_layer(signed_tilt_deg: f64) -> usize {
    let a = signed_tilt_deg;
    if a < -60.0 {
        0
    } else if a < -30.0 {
        1
    } else if a <= 30.0 {
        2
    } else if a <= 60.0 {
        3
    } else {
        4
    }
}

/// Five-state variant: parent in the middle layer, child in the layer of its
/// signed tilt bin (sign of `z_c - z_p`).
pub fn encode_5s(
    pose3d: &Pose3D,
    pose2d: &Pose2D,
    skeleton: &Skeleton,
    config: &EncoderConfig,
) -> Result<PartHeatmaps> {
    check_sigma(config.sigma)?;
    pose3d.check_finite()?;
    pose2d.check_finite()?;
    let part_count = skeleton.parts().len();
    let mut out = PartHeatmaps::zeros(part_count, 5, config.dims);
    for k in 0..part_count {
        let Some((pp, pc)) = endpoints_2d(pose2d, skeleton, k) else {
            continue;
        };
        let (p, c) = skeleton.parts()[k];
        let mut values = out.values.slice_mut(s![k, .., .., ..]);
        splat_max(values.slice_mut(s![2, .., ..]), pp, config.sigma);
        if pose3d.joint(p).is_none() || pose3d.joint(c).is_none() {
            if config.unknown_policy == UnknownPolicy::KeepParent {
                mask_child_neighbourhood(out.mask.slice_mut(s![k, 2, .., ..]), pc, config.sigma);
            }
            continue;
        }
        let layer = match signed_tilt_angle(pose3d, skeleton, k) {
            Ok(a) => five_state_layer(a),
            Err(Error::DegeneratePart { .. }) => 2,
            Err(e) => return Err(e),
        };
        splat_max(values.slice_mut(s![layer, .., ..]), pc, config.sigma);
        out.mask.slice_mut(s![k, .., .., ..]).fill(1.0);
    }
    Ok(out)
}

/// Two-state variant: the closer joint goes to the positive layer and the
/// farther one to the negative layer; near-equal depths share the zero layer.
pub fn encode_2s(
    pose3d: &Pose3D,
    pose2d: &Pose2D,
    skeleton: &Skeleton,
    config: &EncoderConfig,
) -> Result<PartHeatmaps> {
    check_sigma(config.sigma)?;
    pose2d.check_finite()?;
    let labels = part_labels(pose3d, pose2d, skeleton)?;
    let part_count = skeleton.parts().len();
    let mut out = PartHeatmaps::zeros(part_count, 3, config.dims);
    for (k, label) in labels.iter().enumerate() {
        let Some((pp, pc)) = endpoints_2d(pose2d, skeleton, k) else {
            continue;
        };
        let mut values = out.values.slice_mut(s![k, .., .., ..]);
        match *label {
            PartLabel::Known(r) => {
                // r = +1: child closer -> child positive, parent negative.
                splat_max(values.slice_mut(s![r.opposite().layer(), .., ..]), pp, config.sigma);
                splat_max(values.slice_mut(s![r.layer(), .., ..]), pc, config.sigma);
                out.mask.slice_mut(s![k, .., .., ..]).fill(1.0);
            }
            PartLabel::Unknown => {
                // Which layer either joint belongs to is unknown.
                values.fill(0.0);
            }
            PartLabel::Missing => {}
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeDims {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl VolumeDims {
    pub fn cube(n: usize) -> Self {
        VolumeDims {
            depth: n,
            height: n,
            width: n,
        }
    }

    pub fn len(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn contains(&self, p: Vector3<f64>) -> bool {
        p.x >= 0.0
            && p.y >= 0.0
            && p.z >= 0.0
            && p.x <= (self.width - 1) as f64
            && p.y <= (self.height - 1) as f64
            && p.z <= (self.depth - 1) as f64
    }
}

impl Default for VolumeDims {
    fn default() -> Self {
        VolumeDims::cube(DEFAULT_GRID)
    }
}

/// Per-joint volumetric targets `N x D x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumetricHeatmap {
    pub values: Array4<f64>,
    pub out_of_volume: [bool; JOINT_COUNT],
}

/// Renders an anisotropic 3D Gaussian (amplitude 1) per valid joint.
/// `pose_voxel` is in voxel coordinates `(x, y, z)` mapping to `[z, y, x]`.
pub fn render_volumetric_target(
    pose_voxel: &Pose3D,
    dims: VolumeDims,
    sigma_xyz: [f64; 3],
) -> Result<VolumetricHeatmap> {
    for s in sigma_xyz {
        check_sigma(s)?;
    }
    pose_voxel.check_finite()?;
    let mut values = Array4::zeros((JOINT_COUNT, dims.depth, dims.height, dims.width));
    let mut out_of_volume = [false; JOINT_COUNT];
    let inv = sigma_xyz.map(|s| 1.0 / (2.0 * s * s));
    for (j, mut channel) in values.axis_iter_mut(Axis(0)).enumerate() {
        let Some(c) = pose_voxel.joint(j) else {
            continue;
        };
        out_of_volume[j] = !dims.contains(c);
        // Separable: exp(-a-b-c) = exp(-a) exp(-b) exp(-c).
        let gx: Vec<f64> = (0..dims.width)
            .map(|x| (-(x as f64 - c.x).powi(2) * inv[0]).exp())
            .collect();
        let gy: Vec<f64> = (0..dims.height)
            .map(|y| (-(y as f64 - c.y).powi(2) * inv[1]).exp())
            .collect();
        let gz: Vec<f64> = (0..dims.depth)
            .map(|z| (-(z as f64 - c.z).powi(2) * inv[2]).exp())
            .collect();
        Zip::indexed(&mut channel).for_each(|(z, y, x), v| *v = gz[z] * gy[y] * gx[x]);
    }
    Ok(VolumetricHeatmap { values, out_of_volume })
}
