//! Pose evaluation: hip-aligned and Procrustes-aligned MPJPE, 3DPCK and AUC.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{Pose3D, JOINT_COUNT};

/// Joint used for hip alignment (pelvis).
pub const ROOT_JOINT: usize = 0;
pub const DEFAULT_PCK_THRESHOLD_MM: f64 = 150.0;
pub const DEFAULT_AUC_STEPS: usize = 31;

/// Transform family for Procrustes alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    /// Rotation, translation and uniform scale.
    #[default]
    Similarity,
    /// Rotation and translation only.
    Rigid,
}

fn jointly_valid(pred: &Pose3D, gt: &Pose3D) -> Vec<usize> {
    (0..JOINT_COUNT).filter(|&j| pred.valid[j] && gt.valid[j]).collect()
}

fn root_aligned(pred: &Pose3D, gt: &Pose3D) -> Result<(Pose3D, Pose3D)> {
    Ok((pred.root_relative(ROOT_JOINT)?, gt.root_relative(ROOT_JOINT)?))
}

/// Hip-aligned error per joint; `None` where either pose lacks the joint.
pub fn per_joint_errors(pred: &Pose3D, gt: &Pose3D) -> Result<[Option<f64>; JOINT_COUNT]> {
    let (p, g) = root_aligned(pred, gt)?;
    let mut out = [None; JOINT_COUNT];
    for j in jointly_valid(&p, &g) {
        out[j] = Some((p.coords[j] - g.coords[j]).norm());
    }
    Ok(out)
}

fn valid_errors(pred: &Pose3D, gt: &Pose3D) -> Result<Vec<f64>> {
    let errs: Vec<f64> = per_joint_errors(pred, gt)?.iter().flatten().copied().collect();
    if errs.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    Ok(errs)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean joint error after translating both poses so the root is at the origin.
pub fn mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    Ok(mean(&valid_errors(pred, gt)?))
}

/// Similarity (or rigid) transform mapping `source` points onto `target`
/// in the least-squares sense. Returns `(scale, rotation, translation)`.
pub fn procrustes(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    alignment: Alignment,
) -> Result<(f64, Matrix3<f64>, Vector3<f64>)> {
    if source.len() != target.len() {
        return Err(Error::dimension(&[target.len()], &[source.len()]));
    }
    if source.len() < 3 || is_collinear(source) || is_collinear(target) {
        return Err(Error::AlignmentDegenerate);
    }
    let n = source.len() as f64;
    let mu_s = source.iter().sum::<Vector3<f64>>() / n;
    let mu_t = target.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, t) in source.iter().zip(target) {
        let (ds, dt) = (s - mu_s, t - mu_t);
        cov += dt * ds.transpose();
        var_s += ds.norm_squared();
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let d = if (u * v_t).determinant() < 0.0 { -1.0 } else { 1.0 };
    let s = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = u * s * v_t;
    let scale = match alignment {
        Alignment::Similarity => {
            let sv = svd.singular_values;
            (sv[0] + sv[1] + d * sv[2]) / var_s
        }
        Alignment::Rigid => 1.0,
    };
    let translation = mu_t - scale * rotation * mu_s;
    Ok((scale, rotation, translation))
}

fn is_collinear(points: &[Vector3<f64>]) -> bool {
    let n = points.len() as f64;
    let mu = points.iter().sum::<Vector3<f64>>() / n;
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = p - mu;
        scatter += d * d.transpose();
    }
    let mut ev: Vec<f64> = scatter.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev[0] <= 0.0 || ev[1] <= 1e-12 * ev[0]
}

/// Mean joint error after optimal alignment of `pred` onto `gt`.
pub fn pa_mpjpe_with(pred: &Pose3D, gt: &Pose3D, alignment: Alignment) -> Result<f64> {
    let joints = jointly_valid(pred, gt);
    if joints.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let src: Vec<_> = joints.iter().map(|&j| pred.coords[j]).collect();
    let dst: Vec<_> = joints.iter().map(|&j| gt.coords[j]).collect();
    let (c, r, t) = procrustes(&src, &dst, alignment)?;
    let errs: Vec<f64> = src.iter().zip(&dst).map(|(s, d)| (c * r * s + t - d).norm()).collect();
    Ok(mean(&errs))
}

pub fn pa_mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    pa_mpjpe_with(pred, gt, Alignment::Similarity)
}

fn pck_of(errors: &[f64], threshold: f64) -> f64 {
    100.0 * errors.iter().filter(|&&e| e < threshold).count() as f64 / errors.len() as f64
}

/// Percentage of joints with hip-aligned error strictly below `threshold_mm`.
pub fn pck3d(pred: &Pose3D, gt: &Pose3D, threshold_mm: f64) -> Result<f64> {
    Ok(pck_of(&valid_errors(pred, gt)?, threshold_mm))
}

fn auc_of(errors: &[f64], max_threshold: f64, steps: usize) -> Result<f64> {
    if steps < 2 {
        return Err(Error::Config(format!("AUC needs at least 2 steps, got {steps}")));
    }
    let total: f64 = (1..steps)
        .map(|i| pck_of(errors, max_threshold * i as f64 / (steps - 1) as f64))
        .sum();
    Ok(total / (steps - 1) as f64)
}

/// Mean PCK over the grid of `steps` evenly spaced thresholds spanning
/// `[0, max_threshold_mm]`. The zero threshold is left out of the mean: with
/// a strict boundary its PCK is always 0.
pub fn auc(pred: &Pose3D, gt: &Pose3D, max_threshold_mm: f64, steps: usize) -> Result<f64> {
    if steps < 2 {
        return auc_of(&[], max_threshold_mm, steps);
    }
    auc_of(&valid_errors(pred, gt)?, max_threshold_mm, steps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub pck_threshold_mm: f64,
    pub auc_steps: usize,
    pub alignment: Alignment,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            pck_threshold_mm: DEFAULT_PCK_THRESHOLD_MM,
            auc_steps: DEFAULT_AUC_STEPS,
            alignment: Alignment::Similarity,
        }
    }
}

/// Metrics pooled over every jointly valid joint of a pose set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub poses: usize,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub pck_percent: f64,
    pub auc_percent: f64,
    /// Mean hip-aligned error per joint, `None` if never evaluated.
    pub per_joint_errors: Vec<Option<f64>>,
    pub alignment: Alignment,
}

/// Evaluates paired pose lists.
pub fn evaluate(preds: &[Pose3D], gts: &[Pose3D], options: &EvalOptions) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(Error::dimension(&[gts.len()], &[preds.len()]));
    }
    let mut all = Vec::new();
    let mut pa_sum = 0.0;
    let mut pa_count = 0usize;
    let mut joint_sum = [0.0; JOINT_COUNT];
    let mut joint_count = [0usize; JOINT_COUNT];
    for (p, g) in preds.iter().zip(gts) {
        let errs = per_joint_errors(p, g)?;
        for (j, e) in errs.iter().enumerate() {
            if let Some(e) = e {
                all.push(*e);
                joint_sum[j] += e;
                joint_count[j] += 1;
            }
        }
        let n = errs.iter().flatten().count();
        pa_sum += pa_mpjpe_with(p, g, options.alignment)? * n as f64;
        pa_count += n;
    }
    if all.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    Ok(EvalReport {
        poses: preds.len(),
        mpjpe_mm: mean(&all),
        pa_mpjpe_mm: pa_sum / pa_count as f64,
        pck_percent: pck_of(&all, options.pck_threshold_mm),
        auc_percent: auc_of(&all, options.pck_threshold_mm, options.auc_steps)?,
        per_joint_errors: (0..JOINT_COUNT)
            .map(|j| (joint_count[j] > 0).then(|| joint_sum[j] / joint_count[j] as f64))
            .collect(),
        alignment: options.alignment,
    })
}
