//! Training objectives with analytic gradients.
//!
//! Every loss is returned as a plain sum; averaging over a batch is left to
//! the caller.

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array3, Array4, ArrayView3, ArrayView4, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::HeatmapTriplets;
use crate::skeleton::{Pose3D, JOINT_COUNT};

/// Weight of the intermediate loss in the total loss.
pub const DEFAULT_ALPHA: f64 = 0.05;
pub const SMPL_JOINTS: usize = 24;
pub const SMPL_SHAPE_DIM: usize = 10;

/// Depth gate for the 3D joint loss: `Zero` for samples from 2D-only data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Lambda {
    Zero,
    One,
}

impl Lambda {
    pub fn value(self) -> f64 {
        match self {
            Lambda::Zero => 0.0,
            Lambda::One => 1.0,
        }
    }

    pub fn from_flag(flag: u8) -> Result<Self> {
        match flag {
            0 => Ok(Lambda::Zero),
            1 => Ok(Lambda::One),
            other => Err(Error::Config(format!("lambda must be 0 or 1, got {other}"))),
        }
    }
}

/// Norm applied to each rotation residual in the SMPL pose loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationNorm {
    #[default]
    ElementwiseL1,
    Frobenius,
}

/// Scaling applied to heatmap losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapNormalization {
    /// Plain sum over pixels.
    #[default]
    Sum,
    /// Sum divided by the number of pixels per grid.
    PerPixel,
}

impl HeatmapNormalization {
    fn factor(self, height: usize, width: usize) -> f64 {
        match self {
            HeatmapNormalization::Sum => 1.0,
            HeatmapNormalization::PerPixel => 1.0 / (height * width) as f64,
        }
    }
}

fn check_shape(expected: &[usize], actual: &[usize]) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::dimension(expected, actual))
    }
}

/// Masked squared L2 between predicted and target triplets.
pub fn hemlets_loss(pred: ArrayView4<'_, f64>, gt: &HeatmapTriplets) -> Result<f64> {
    hemlets_loss_with(pred, gt, HeatmapNormalization::Sum)
}

pub fn hemlets_loss_with(pred: ArrayView4<'_, f64>, gt: &HeatmapTriplets, norm: HeatmapNormalization) -> Result<f64> {
    check_shape(gt.values.shape(), pred.shape())?;
    let mut total = 0.0;
    Zip::from(&pred).and(&gt.values).and(&gt.mask).for_each(|&p, &g, &m| {
        let r = (g - p) * m;
        total += r * r;
    });
    let dims = gt.dims();
    Ok(total * norm.factor(dims.height, dims.width))
}

/// Gradient of [`hemlets_loss_with`] with respect to `pred`.
pub fn hemlets_loss_grad(
    pred: ArrayView4<'_, f64>,
    gt: &HeatmapTriplets,
    norm: HeatmapNormalization,
) -> Result<Array4<f64>> {
    check_shape(gt.values.shape(), pred.shape())?;
    let dims = gt.dims();
    let f = norm.factor(dims.height, dims.width);
    let mut grad = Array4::zeros(pred.raw_dim());
    Zip::from(&mut grad)
        .and(&pred)
        .and(&gt.values)
        .and(&gt.mask)
        .for_each(|d, &p, &g, &m| *d = 2.0 * f * m * m * (p - g));
    Ok(grad)
}

/// Squared L2 over a stack of per-joint 2D heatmaps.
pub fn heatmap2d_loss(pred: ArrayView3<'_, f64>, gt: ArrayView3<'_, f64>) -> Result<f64> {
    heatmap2d_loss_with(pred, gt, HeatmapNormalization::Sum)
}

pub fn heatmap2d_loss_with(
    pred: ArrayView3<'_, f64>,
    gt: ArrayView3<'_, f64>,
    norm: HeatmapNormalization,
) -> Result<f64> {
    check_shape(gt.shape(), pred.shape())?;
    let sq: f64 = Zip::from(&pred)
        .and(&gt)
        .fold(0.0, |acc, &p, &g| acc + (g - p) * (g - p));
    Ok(sq * norm.factor(gt.shape()[1], gt.shape()[2]))
}

pub fn heatmap2d_loss_grad(
    pred: ArrayView3<'_, f64>,
    gt: ArrayView3<'_, f64>,
    norm: HeatmapNormalization,
) -> Result<Array3<f64>> {
    check_shape(gt.shape(), pred.shape())?;
    let f = norm.factor(gt.shape()[1], gt.shape()[2]);
    Ok(Zip::from(&pred).and(&gt).map_collect(|&p, &g| 2.0 * f * (p - g)))
}

/// Sign with a zero subgradient at the kink.
pub(crate) fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// L1 over valid joints, with the depth term gated by `lambda`. Joints that
/// are invalid in either pose are skipped.
pub fn joint3d_loss(pred: &Pose3D, gt: &Pose3D, lambda: Lambda) -> f64 {
    let l = lambda.value();
    (0..JOINT_COUNT)
        .filter(|&j| gt.valid[j] && pred.valid[j])
        .map(|j| {
            let d = pred.coords[j] - gt.coords[j];
            d.x.abs() + d.y.abs() + l * d.z.abs()
        })
        .sum()
}

pub fn joint3d_loss_grad(pred: &Pose3D, gt: &Pose3D, lambda: Lambda) -> [Vector3<f64>; JOINT_COUNT] {
    let l = lambda.value();
    let mut grad = [Vector3::zeros(); JOINT_COUNT];
    for j in (0..JOINT_COUNT).filter(|&j| gt.valid[j] && pred.valid[j]) {
        let d = pred.coords[j] - gt.coords[j];
        grad[j] = Vector3::new(sign0(d.x), sign0(d.y), l * sign0(d.z));
    }
    grad
}

pub fn intermediate_loss(l_hem: f64, l_2d: f64) -> f64 {
    l_hem + l_2d
}

pub fn total_loss(l_int: f64, l_3d: f64, alpha: f64) -> f64 {
    alpha * l_int + l_3d
}

fn check_rotations(pred: &[Matrix3<f64>], gt: &[Matrix3<f64>]) -> Result<()> {
    if pred.len() != SMPL_JOINTS || gt.len() != SMPL_JOINTS {
        return Err(Error::dimension(
            &[SMPL_JOINTS, 3, 3],
            &[pred.len().min(gt.len()), 3, 3],
        ));
    }
    Ok(())
}

/// Sum over joints of the rotation residual norm.
pub fn smpl_pose_loss(pred: &[Matrix3<f64>], gt: &[Matrix3<f64>], norm: RotationNorm) -> Result<f64> {
    check_rotations(pred, gt)?;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let d = g - p;
            match norm {
                RotationNorm::ElementwiseL1 => d.iter().map(|v| v.abs()).sum::<f64>(),
                RotationNorm::Frobenius => d.norm(),
            }
        })
        .sum())
}

pub fn smpl_pose_loss_grad(
    pred: &[Matrix3<f64>],
    gt: &[Matrix3<f64>],
    norm: RotationNorm,
) -> Result<Vec<Matrix3<f64>>> {
    check_rotations(pred, gt)?;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let d = p - g;
            match norm {
                RotationNorm::ElementwiseL1 => d.map(sign0),
                RotationNorm::Frobenius => {
                    let n = d.norm();
                    if n > 0.0 {
                        d / n
                    } else {
                        Matrix3::zeros()
                    }
                }
            }
        })
        .collect())
}

/// Matrix-valued rotation inputs given as flat row-major 3x3 blocks.
pub fn rotations_from_flat(flat: &[f64]) -> Result<Vec<Matrix3<f64>>> {
    if !flat.len().is_multiple_of(9) {
        return Err(Error::dimension(&[flat.len() / 9 + 1, 3, 3], &[flat.len()]));
    }
    Ok(flat.chunks_exact(9).map(Matrix3::from_row_slice).collect())
}

pub fn smpl_shape_loss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != SMPL_SHAPE_DIM || gt.len() != SMPL_SHAPE_DIM {
        return Err(Error::dimension(
            &[SMPL_SHAPE_DIM, SMPL_SHAPE_DIM],
            &[pred.len(), gt.len()],
        ));
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| (g - p).abs()).sum())
}

pub fn smpl_shape_loss_grad(pred: &[f64], gt: &[f64]) -> Result<Vec<f64>> {
    smpl_shape_loss(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| sign0(p - g)).collect())
}

pub fn mesh_loss(l_theta: f64, l_beta: f64, l_tot: f64) -> f64 {
    l_theta + l_beta + l_tot
}

/// Per-step record of every loss term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_hem: f64,
    pub l_2d: f64,
    pub l_3d: f64,
    pub l_int: f64,
    pub l_tot: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_theta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_mesh: Option<f64>,
    pub lambda_flag: u8,
    pub alpha: f64,
}

impl LossBreakdown {
    pub fn new(l_hem: f64, l_2d: f64, l_3d: f64, lambda: Lambda, alpha: f64) -> Self {
        let l_int = intermediate_loss(l_hem, l_2d);
        LossBreakdown {
            l_hem,
            l_2d,
            l_3d,
            l_int,
            l_tot: total_loss(l_int, l_3d, alpha),
            l_theta: None,
            l_beta: None,
            l_mesh: None,
            lambda_flag: lambda.value() as u8,
            alpha,
        }
    }

    /// Adds the body-model terms and the combined mesh loss.
    pub fn with_body(mut self, l_theta: f64, l_beta: f64) -> Self {
        self.l_theta = Some(l_theta);
        self.l_beta = Some(l_beta);
        self.l_mesh = Some(mesh_loss(l_theta, l_beta, self.l_tot));
        self
    }

    pub fn is_finite(&self) -> bool {
        [self.l_hem, self.l_2d, self.l_3d, self.l_int, self.l_tot]
            .iter()
            .chain(self.l_theta.iter())
            .chain(self.l_beta.iter())
            .chain(self.l_mesh.iter())
            .all(|v| v.is_finite())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("loss breakdown serializes")
    }
}
