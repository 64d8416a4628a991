//! Soft-argmax (integral) coordinate regression and voxel-to-metric scaling.

use nalgebra::{Vector2, Vector3};
use ndarray::{ArrayD, ArrayView2, ArrayView3, ArrayViewD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{part_length, LengthUnit, Pose3D, Skeleton, PART_COUNT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordinateFrame {
    /// 0-based voxel/pixel indices.
    #[default]
    VoxelIndex,
    /// Each axis mapped to `[0, 1]` (`i / (n - 1)`).
    NormalizedUnit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftArgmaxConfig {
    /// Multiplier applied to the logits before exponentiation.
    pub temperature: f64,
    pub frame: CoordinateFrame,
}

impl Default for SoftArgmaxConfig {
    fn default() -> Self {
        SoftArgmaxConfig {
            temperature: 1.0,
            frame: CoordinateFrame::VoxelIndex,
        }
    }
}

impl SoftArgmaxConfig {
    fn validate(&self) -> Result<()> {
        if self.temperature > 0.0 && self.temperature.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )))
        }
    }
}

/// Result of a soft-argmax over an n-dimensional map.
#[derive(Debug, Clone)]
pub struct SoftArgmax {
    /// Expected coordinate per axis, ordered `(x, y, z, ...)`: `coords[0]` is
    /// along the last array axis.
    pub coords: Vec<f64>,
    pub probabilities: ArrayD<f64>,
}

fn axis_coordinate(i: usize, n: usize, frame: CoordinateFrame) -> f64 {
    match frame {
        CoordinateFrame::VoxelIndex => i as f64,
        CoordinateFrame::NormalizedUnit if n > 1 => i as f64 / (n - 1) as f64,
        CoordinateFrame::NormalizedUnit => 0.0,
    }
}

/// Softmax-weighted mean coordinate of an n-dimensional logit map.
pub fn soft_argmax_nd(logits: ArrayViewD<'_, f64>, config: &SoftArgmaxConfig) -> Result<SoftArgmax> {
    config.validate()?;
    if logits.is_empty() {
        return Err(Error::dimension(&[1], logits.shape()));
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            context: "soft-argmax input",
        });
    }
    let beta = config.temperature;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probabilities = logits.mapv(|v| ((v - max) * beta).exp());
    let total: f64 = probabilities.sum();
    probabilities /= total;

    let ndim = logits.ndim();
    let mut coords = vec![0.0; ndim];
    for (slot, axis) in coords.iter_mut().zip((0..ndim).rev()) {
        let n = logits.shape()[axis];
        *slot = probabilities
            .axis_iter(Axis(axis))
            .enumerate()
            .map(|(i, plane)| axis_coordinate(i, n, config.frame) * plane.sum())
            .sum();
    }
    Ok(SoftArgmax { coords, probabilities })
}

/// `(x, y, z)` soft-argmax of a `D x H x W` volume.
pub fn soft_argmax_3d(volume: ArrayView3<'_, f64>, config: &SoftArgmaxConfig) -> Result<Vector3<f64>> {
    let r = soft_argmax_nd(volume.into_dyn(), config)?;
    Ok(Vector3::new(r.coords[0], r.coords[1], r.coords[2]))
}

/// `(x, y)` soft-argmax of an `H x W` grid.
pub fn soft_argmax_2d(grid: ArrayView2<'_, f64>, config: &SoftArgmaxConfig) -> Result<Vector2<f64>> {
    let r = soft_argmax_nd(grid.into_dyn(), config)?;
    Ok(Vector2::new(r.coords[0], r.coords[1]))
}

/// Analytic Jacobian of the soft-argmax output with respect to every logit.
///
/// Returned shape is `[ndim, ..logits.shape()]`; entry `[a, v]` is
/// `d coord_a / d logit_v = beta * p_v * (c_a(v) - coord_a)`.
pub fn soft_argmax_jacobian(logits: ArrayViewD<'_, f64>, config: &SoftArgmaxConfig) -> Result<ArrayD<f64>> {
    let r = soft_argmax_nd(logits.view(), config)?;
    let ndim = logits.ndim();
    let shape = logits.shape().to_vec();
    let mut full = vec![ndim];
    full.extend_from_slice(&shape);
    let mut jac = ArrayD::zeros(IxDyn(&full));
    for (a, axis) in (0..ndim).rev().enumerate() {
        let n = shape[axis];
        let mut slab = jac.index_axis_mut(Axis(0), a);
        for (idx, out) in slab.indexed_iter_mut() {
            let c = axis_coordinate(idx[axis], n, config.frame);
            *out = config.temperature * r.probabilities[&idx] * (c - r.coords[a]);
        }
    }
    Ok(jac)
}

pub const BONE_LENGTH_SCHEMA: &str = "hemlets.bone_lengths";
pub const BONE_LENGTH_SCHEMA_VERSION: u32 = 1;

/// Running average of per-part metric lengths seen during training.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BoneLengthModel {
    sum_mm: [f64; PART_COUNT],
    count: [u64; PART_COUNT],
}

impl BoneLengthModel {
    pub fn new() -> Self {
        Self::default()
    }

    /// A model whose means are exactly `means` (count 1 each).
    pub fn from_means(means: [f64; PART_COUNT]) -> Result<Self> {
        if means.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(Error::Config("bone means must be finite and non-negative".into()));
        }
        Ok(BoneLengthModel {
            sum_mm: means,
            count: [1; PART_COUNT],
        })
    }

    pub fn mean_length(&self, k: usize) -> Option<f64> {
        (self.count[k] > 0).then(|| self.sum_mm[k] / self.count[k] as f64)
    }

    pub fn count(&self, k: usize) -> u64 {
        self.count[k]
    }

    /// Accumulates every part with two valid endpoints.
    pub fn update(&mut self, pose_mm: &Pose3D, skeleton: &Skeleton) -> Result<()> {
        pose_mm.check_finite()?;
        for k in 0..PART_COUNT {
            match part_length(pose_mm, skeleton, k) {
                Ok(len) => {
                    self.sum_mm[k] += len;
                    self.count[k] += 1;
                }
                Err(Error::InvalidJoint { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    pub fn to_document(&self) -> String {
        let doc = BoneLengthDocument {
            schema: BONE_LENGTH_SCHEMA.into(),
            version: BONE_LENGTH_SCHEMA_VERSION,
            mean_length_mm: (0..PART_COUNT).map(|k| self.mean_length(k).unwrap_or(0.0)).collect(),
            count: self.count.to_vec(),
        };
        serde_json::to_string_pretty(&doc).expect("bone length document serializes")
    }

    pub fn from_document(text: &str) -> Result<Self> {
        let doc: BoneLengthDocument = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        if doc.schema != BONE_LENGTH_SCHEMA || doc.version != BONE_LENGTH_SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "expected {BONE_LENGTH_SCHEMA} v{BONE_LENGTH_SCHEMA_VERSION}"
            )));
        }
        if doc.mean_length_mm.len() != PART_COUNT || doc.count.len() != PART_COUNT {
            return Err(Error::Schema(format!("expected {PART_COUNT} parts")));
        }
        let mut model = BoneLengthModel::new();
        for k in 0..PART_COUNT {
            let m = doc.mean_length_mm[k];
            if !(m.is_finite() && m >= 0.0) {
                return Err(Error::Schema(format!("invalid mean length for part {k}")));
            }
            model.count[k] = doc.count[k];
            model.sum_mm[k] = m * doc.count[k] as f64;
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct BoneLengthDocument {
    schema: String,
    version: u32,
    mean_length_mm: Vec<f64>,
    count: Vec<u64>,
}

/// Per-axis extent of one voxel, in arbitrary but shared units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelAspect(pub [f64; 3]);

impl Default for VoxelAspect {
    fn default() -> Self {
        VoxelAspect([1.0; 3])
    }
}

/// Scale factor `sum(mean lengths) / sum(voxel lengths)` over parts that are
/// valid in the pose and present in the model.
pub fn metric_scale(
    pose_voxel: &Pose3D,
    skeleton: &Skeleton,
    model: &BoneLengthModel,
    aspect: VoxelAspect,
) -> Result<f64> {
    let a = aspect.0;
    let scaled = pose_voxel.map(|v| Vector3::new(v.x * a[0], v.y * a[1], v.z * a[2]));
    let mut learned = 0.0;
    let mut observed = 0.0;
    for k in 0..PART_COUNT {
        let Some(mean) = model.mean_length(k) else {
            continue;
        };
        match part_length(&scaled, skeleton, k) {
            Ok(len) if len > 0.0 && mean > 0.0 => {
                learned += mean;
                observed += len;
            }
            Ok(_) | Err(Error::InvalidJoint { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    if observed > 0.0 {
        Ok(learned / observed)
    } else {
        Err(Error::ScalingUndefined)
    }
}

/// Maps a decoded voxel-space pose to a root-relative metric pose.
pub fn voxel_to_metric(
    pose_voxel: &Pose3D,
    skeleton: &Skeleton,
    model: &BoneLengthModel,
    aspect: VoxelAspect,
) -> Result<Pose3D> {
    pose_voxel.check_finite()?;
    let s = metric_scale(pose_voxel, skeleton, model, aspect)?;
    let a = aspect.0;
    let rel = pose_voxel.root_relative(skeleton.root())?;
    let mut out = rel.map(|v| Vector3::new(v.x * a[0] * s, v.y * a[1] * s, v.z * a[2] * s));
    out.unit = LengthUnit::Millimeters;
    Ok(out)
}
