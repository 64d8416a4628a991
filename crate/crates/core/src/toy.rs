//! Desk-scale end-to-end regressor.
//!
//! A fully connected network maps noisy 2D joints plus an appearance-like cue
//! vector to per-joint volumetric logits. Two intermediate heads predict
//! HEMlets triplets and 2D joint heatmaps; their outputs, plus the spatial
//! sum of every HEMlets layer, are concatenated with the first hidden layer
//! before the volumetric head, and soft-argmax turns the volume into
//! coordinates. The layer sums stand in for the translation invariance a
//! convolutional backbone would provide.
//!
//! The synthetic dataset mixes fully 3D samples with 2D samples that carry
//! only simulated FBI labels, so the HEMlets loss is the only route by which
//! the 2D samples inform depth.

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::container::{find, Tensor};
use crate::data_io::{fbi_to_mask, simulate_fbi_annotator, FbiLabel, FbiRecord, NoiseProfile};
use crate::error::{Error, Result};
use crate::heatmap::{encode_hemlets, render_joint_heatmaps, EncoderConfig, GridDims, UnknownPolicy};
use crate::losses::{Lambda, LossBreakdown, DEFAULT_ALPHA};
use crate::metrics::mpjpe;
use crate::skeleton::{LengthUnit, Pose2D, Pose3D, Skeleton, JOINT_COUNT};
use crate::synth::PoseSampler;

const LAYERS: usize = 3;
/// Initial weight scale of the two intermediate heads, relative to He.
const HEAD_GAIN: f64 = 0.1;
/// Initial weight scale of the volumetric head; small logits start the
/// softmax near uniform so soft-argmax gradients are not saturated.
const VOLUME_GAIN: f64 = 0.01;
const PARAM_NAMES: [&str; 10] = ["w1", "b1", "w_hem", "b_hem", "w_2d", "b_2d", "w3", "b3", "w4", "b4"];

/// Network dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyArch {
    pub input_dim: usize,
    pub joints: usize,
    pub parts: usize,
    /// Side of the square 2D and HEMlets heatmaps.
    pub grid: usize,
    /// Side of the cubic volume.
    pub volume: usize,
    pub hidden: usize,
}

impl ToyArch {
    fn validate(&self) -> Result<()> {
        let dims = [
            self.input_dim,
            self.joints,
            self.parts,
            self.grid,
            self.volume,
            self.hidden,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("zero dimension in {self:?}")));
        }
        Ok(())
    }

    fn hem_len(&self) -> usize {
        self.parts * LAYERS * self.grid * self.grid
    }

    fn heat_len(&self) -> usize {
        self.joints * self.grid * self.grid
    }

    fn vol_len(&self) -> usize {
        self.volume.pow(3)
    }

    fn param_shapes(&self) -> [Vec<usize>; 10] {
        let (h, hem, heat) = (self.hidden, self.hem_len(), self.heat_len());
        let feat = h + hem + heat + self.parts * LAYERS;
        let out = self.joints * self.vol_len();
        [
            vec![self.input_dim, h],
            vec![h],
            vec![h, hem],
            vec![hem],
            vec![h, heat],
            vec![heat],
            vec![feat, h],
            vec![h],
            vec![h, out],
            vec![out],
        ]
    }
}

/// The regressor's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyRegressor {
    pub arch: ToyArch,
    pub params: Vec<ArrayD<f64>>,
}

/// Symbolic outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ToyOutputs<'t> {
    /// `B x (K * 3 * G * G)`.
    pub hem: Var<'t>,
    /// `B x (J * G * G)`.
    pub heat2d: Var<'t>,
    /// `B x J x 3`, voxel coordinates ordered (x, y, z).
    pub coords: Var<'t>,
}

impl ToyRegressor {
    /// He-initialised weights (scaled down for the output heads), zero biases.
    pub fn new(arch: ToyArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch
            .param_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                if shape.len() == 1 {
                    return ArrayD::zeros(IxDyn(&shape));
                }
                let gain = match PARAM_NAMES[i] {
                    "w_hem" | "w_2d" => HEAD_GAIN,
                    "w4" => VOLUME_GAIN,
                    _ => 1.0,
                };
                let std = gain * (2.0 / shape[0] as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                ArrayD::from_shape_simple_fn(IxDyn(&shape), || normal.sample(&mut rng))
            })
            .collect();
        Ok(ToyRegressor { arch, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Records the network on `tape`; `params` are the tape variables of
    /// [`ToyRegressor::params`] in order.
    pub fn forward<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Result<ToyOutputs<'t>> {
        let a = self.arch;
        let [w1, b1, wh, bh, w2, b2, w3, b3, w4, b4] = params else {
            return Err(Error::dimension(&[PARAM_NAMES.len()], &[params.len()]));
        };
        let h1 = x.matmul(*w1)?.add(*b1)?.relu();
        let hem = h1.matmul(*wh)?.add(*bh)?;
        let heat2d = h1.matmul(*w2)?.add(*b2)?;
        let pooled = hem.matmul(x.tape().var(layer_pooling(&a)))?;
        let feat = Var::concat(&[h1, hem, heat2d, pooled], 1)?;
        let h2 = feat.matmul(*w3)?.add(*b3)?.relu();
        let logits = h2.matmul(*w4)?.add(*b4)?;
        let batch = x.shape()[0];
        let coords = logits
            .reshape(&[batch, a.joints, a.volume, a.volume, a.volume])?
            .softmax_over_last_axes(3)?
            .expectation_over_grid(3)?;
        Ok(ToyOutputs { hem, heat2d, coords })
    }

    /// Voxel coordinates `B x J x 3` for a batch of inputs.
    pub fn predict(&self, inputs: &Array2<f64>) -> Result<ArrayD<f64>> {
        let tape = Tape::new();
        let params: Vec<_> = self.params.iter().map(|p| tape.var(p.clone())).collect();
        let out = self.forward(&params, tape.var(inputs.clone().into_dyn()))?;
        Ok(out.coords.value())
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        let a = self.arch;
        let arch = [a.input_dim, a.joints, a.parts, a.grid, a.volume, a.hidden].map(|v| v as f32);
        let mut out = vec![Tensor::new(
            "arch",
            ArrayD::from_shape_vec(IxDyn(&[6]), arch.to_vec()).expect("six entries"),
        )];
        out.extend(
            PARAM_NAMES
                .iter()
                .zip(&self.params)
                .map(|(n, p)| Tensor::from_f64(*n, p)),
        );
        out
    }

    pub fn from_tensors(tensors: &[Tensor]) -> Result<Self> {
        let arch = find(tensors, "arch")?;
        let v: Vec<usize> = arch.data.iter().map(|&x| x as usize).collect();
        if v.len() != 6 {
            return Err(Error::Container("arch tensor must have 6 entries".into()));
        }
        let arch = ToyArch {
            input_dim: v[0],
            joints: v[1],
            parts: v[2],
            grid: v[3],
            volume: v[4],
            hidden: v[5],
        };
        arch.validate()?;
        let params = PARAM_NAMES
            .iter()
            .zip(arch.param_shapes())
            .map(|(name, shape)| {
                let t = find(tensors, name)?;
                if t.data.shape() != shape.as_slice() {
                    return Err(Error::dimension(&shape, t.data.shape()));
                }
                Ok(t.to_f64())
            })
            .collect::<Result<_>>()?;
        Ok(ToyRegressor { arch, params })
    }
}

/// `hem_len x (parts * 3)` matrix summing each heatmap layer.
fn layer_pooling(a: &ToyArch) -> ArrayD<f64> {
    let g2 = a.grid * a.grid;
    ArrayD::from_shape_fn(IxDyn(&[a.hem_len(), a.parts * LAYERS]), |i| {
        (i[0] / g2 == i[1]) as u8 as f64
    })
}

/// One training example, flattened to the network's layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    pub input: Vec<f64>,
    /// Ground-truth pose in voxel units.
    pub pose: Pose3D,
    /// Per joint and axis: validity times the depth gate on z.
    pub coord_weights: Vec<f64>,
    pub hem: Vec<f64>,
    pub hem_mask: Vec<f64>,
    pub heat2d: Vec<f64>,
    pub lambda: Lambda,
}

/// Stacked samples.
#[derive(Debug, Clone)]
pub struct ToyBatch {
    pub inputs: Array2<f64>,
    pub coords: ArrayD<f64>,
    pub coord_weights: ArrayD<f64>,
    pub hem: Array2<f64>,
    pub hem_mask: Array2<f64>,
    pub heat2d: Array2<f64>,
    pub any_depth: bool,
}

impl ToyBatch {
    pub fn stack(samples: &[&ToySample], arch: &ToyArch) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let b = samples.len();
        let rows = |f: &dyn Fn(&ToySample) -> &[f64], width: usize| -> Result<Array2<f64>> {
            let mut flat = Vec::with_capacity(b * width);
            for s in samples {
                let row = f(s);
                if row.len() != width {
                    return Err(Error::dimension(&[width], &[row.len()]));
                }
                flat.extend_from_slice(row);
            }
            Ok(Array2::from_shape_vec((b, width), flat).expect("row widths checked"))
        };
        let j = arch.joints;
        let coords: Vec<f64> = samples
            .iter()
            .flat_map(|s| s.pose.coords.iter().take(j).flat_map(|c| [c.x, c.y, c.z]))
            .collect();
        Ok(ToyBatch {
            inputs: rows(&|s| &s.input, arch.input_dim)?,
            coords: ArrayD::from_shape_vec(IxDyn(&[b, j, 3]), coords).map_err(|_| Error::dimension(&[b, j, 3], &[]))?,
            coord_weights: rows(&|s| &s.coord_weights, j * 3)?
                .into_shape_with_order(IxDyn(&[b, j, 3]))
                .expect("same size"),
            hem: rows(&|s| &s.hem, arch.hem_len())?,
            hem_mask: rows(&|s| &s.hem_mask, arch.hem_len())?,
            heat2d: rows(&|s| &s.heat2d, arch.heat_len())?,
            any_depth: samples.iter().any(|s| s.lambda == Lambda::One),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loss terms recorded on the tape, each summed over the batch.
#[derive(Debug, Clone, Copy)]
pub struct LossVars<'t> {
    pub l_hem: Var<'t>,
    pub l_2d: Var<'t>,
    pub l_3d: Var<'t>,
    /// `(alpha * (l_hem + l_2d) + l_3d) / batch`.
    pub objective: Var<'t>,
}

pub fn loss_graph<'t>(tape: &'t Tape, out: &ToyOutputs<'t>, batch: &ToyBatch, alpha: f64) -> Result<LossVars<'t>> {
    let gt_coords = tape.var(batch.coords.clone());
    let weights = tape.var(batch.coord_weights.clone());
    let l_3d = out.coords.sub(gt_coords)?.mul(weights)?.abs_sum();
    let gt_hem = tape.var(batch.hem.clone().into_dyn());
    let mask = tape.var(batch.hem_mask.clone().into_dyn());
    let l_hem = out.hem.sub(gt_hem)?.mul(mask)?.square_sum();
    let gt_heat = tape.var(batch.heat2d.clone().into_dyn());
    let l_2d = out.heat2d.sub(gt_heat)?.square_sum();
    let objective = l_hem.add(l_2d)?.scale(alpha).add(l_3d)?.scale(1.0 / batch.len() as f64);
    Ok(LossVars {
        l_hem,
        l_2d,
        l_3d,
        objective,
    })
}

/// Batch objective and its gradient with respect to every parameter.
pub fn objective_and_gradients(model: &ToyRegressor, batch: &ToyBatch, alpha: f64) -> Result<(f64, Vec<ArrayD<f64>>)> {
    let tape = Tape::new();
    let params: Vec<_> = model.params.iter().map(|p| tape.var(p.clone())).collect();
    let out = model.forward(&params, tape.var(batch.inputs.clone().into_dyn()))?;
    let losses = loss_graph(&tape, &out, batch, alpha)?;
    tape.backward(losses.objective)?;
    let grads = params
        .iter()
        .zip(&model.params)
        .map(|(v, p)| v.grad().unwrap_or_else(|| ArrayD::zeros(p.raw_dim())))
        .collect();
    Ok((losses.objective.item(), grads))
}

/// Batch objective only.
pub fn objective(model: &ToyRegressor, batch: &ToyBatch, alpha: f64) -> Result<f64> {
    let tape = Tape::new();
    let params: Vec<_> = model.params.iter().map(|p| tape.var(p.clone())).collect();
    let out = model.forward(&params, tape.var(batch.inputs.clone().into_dyn()))?;
    Ok(loss_graph(&tape, &out, batch, alpha)?.objective.item())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyDataConfig {
    /// Samples with full 3D supervision.
    pub n_3d: usize,
    /// Samples with 2D joints and simulated FBI labels only.
    pub n_2d: usize,
    /// Fully 3D validation samples.
    pub n_val: usize,
    pub grid: usize,
    pub volume: usize,
    /// Gaussian width of the heatmap targets, in grid pixels.
    pub sigma: f64,
    pub mm_per_voxel: f64,
    /// Standard deviation of the 2D input noise, in voxels.
    pub input_noise: f64,
    pub cue_dim: usize,
    pub cue_noise: f64,
    pub fbi_profile: NoiseProfile,
    pub seed: u64,
}

impl Default for ToyDataConfig {
    fn default() -> Self {
        ToyDataConfig {
            n_3d: 48,
            n_2d: 384,
            n_val: 128,
            grid: 6,
            volume: 6,
            sigma: 1.0,
            mm_per_voxel: 450.0,
            input_noise: 0.05,
            cue_dim: 28,
            cue_noise: 0.3,
            fbi_profile: NoiseProfile::default(),
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub config: ToyDataConfig,
    pub train: Vec<ToySample>,
    pub val: Vec<ToySample>,
}

impl ToyDataset {
    pub fn arch(&self, hidden: usize) -> ToyArch {
        ToyArch {
            input_dim: JOINT_COUNT * 2 + self.config.cue_dim,
            joints: JOINT_COUNT,
            parts: crate::skeleton::PART_COUNT,
            grid: self.config.grid,
            volume: self.config.volume,
            hidden,
        }
    }

    /// Generates the mixed dataset. Deterministic in `config.seed`.
    pub fn generate(config: &ToyDataConfig, skeleton: &Skeleton) -> Result<Self> {
        let c = *config;
        if c.grid < 2 || c.volume < 2 || !(c.mm_per_voxel > 0.0) || !(c.sigma > 0.0) {
            return Err(Error::Config(format!("invalid toy data config {c:?}")));
        }
        c.fbi_profile.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let parts = skeleton.parts().len();
        let mix = Normal::new(0.0, 1.0 / (parts as f64).sqrt()).expect("positive std");
        let mixing: Vec<f64> = (0..c.cue_dim * parts).map(|_| mix.sample(&mut rng)).collect();
        let sampler = PoseSampler::default();
        let total = c.n_3d + c.n_2d + c.n_val;
        let poses_mm: Vec<Pose3D> = (0..total).map(|_| sampler.sample(skeleton, &mut rng)).collect();
        let fbi = simulate_fbi_annotator(&poses_mm, skeleton, &c.fbi_profile, c.seed ^ 0x5eed)?;
        let noise = Normal::new(0.0, c.input_noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
        let cue_noise = Normal::new(0.0, c.cue_noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
        let center = (c.volume - 1) as f64 / 2.0;
        let to_grid = (c.grid - 1) as f64 / (c.volume - 1) as f64;
        let enc = EncoderConfig {
            dims: GridDims::square(c.grid),
            sigma: c.sigma,
            unknown_policy: UnknownPolicy::KeepParent,
        };

        let mut samples = Vec::with_capacity(total);
        for (i, pose_mm) in poses_mm.iter().enumerate() {
            let depth = i < c.n_3d || i >= c.n_3d + c.n_2d;
            let pose = pose_mm
                .map(|v| v / c.mm_per_voxel + nalgebra::Vector3::repeat(center))
                .in_voxels();
            let grid_pose: Pose2D = pose.map(|v| v * to_grid).project_xy();
            let truth: Vec<f64> = (0..parts)
                .map(|k| match fbi[i][k].truth {
                    FbiLabel::Forward => 1.0,
                    FbiLabel::Backward => -1.0,
                    FbiLabel::Unknown => 0.0,
                })
                .collect();
            let mut input = Vec::with_capacity(JOINT_COUNT * 2 + c.cue_dim);
            for v in &pose.coords {
                input.push((v.x + noise.sample(&mut rng) - center) / center);
                input.push((v.y + noise.sample(&mut rng) - center) / center);
            }
            for r in 0..c.cue_dim {
                let s: f64 = (0..parts).map(|k| mixing[r * parts + k] * truth[k]).sum();
                input.push(s + cue_noise.sample(&mut rng));
            }
            let triplets = if depth {
                encode_hemlets(&pose, &grid_pose, skeleton, &enc)?
            } else {
                let record = FbiRecord {
                    id: i.to_string(),
                    joints2d: None,
                    labels: fbi[i].iter().map(|l| l.label).collect(),
                };
                fbi_to_mask(&record, &grid_pose, skeleton, &enc)?.1
            };
            let heat = render_joint_heatmaps(&grid_pose, GridDims::square(c.grid), c.sigma)?;
            let lambda = if depth { Lambda::One } else { Lambda::Zero };
            samples.push(ToySample {
                input,
                coord_weights: (0..JOINT_COUNT).flat_map(|_| [1.0, 1.0, lambda.value()]).collect(),
                hem: triplets.values.iter().copied().collect(),
                hem_mask: triplets.mask.iter().copied().collect(),
                heat2d: heat.iter().copied().collect(),
                pose,
                lambda,
            });
        }
        let val = samples.split_off(c.n_3d + c.n_2d);
        Ok(ToyDataset {
            config: c,
            train: samples,
            val,
        })
    }
}

/// Parameter update rule.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    /// Adam with the usual defaults (0.9, 0.999, 1e-8).
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Initial step size; decays linearly to `learning_rate * final_lr_fraction`
    /// by the last epoch.
    pub learning_rate: f64,
    pub final_lr_fraction: f64,
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub alpha: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            learning_rate: 0.002,
            final_lr_fraction: 0.02,
            optimizer: Optimizer::Adam,
            batch_size: 16,
            alpha: DEFAULT_ALPHA,
            hidden: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Step size used during `epoch` (1-based).
    pub fn step_size(&self, epoch: usize) -> f64 {
        let progress = if self.epochs > 1 {
            (epoch.saturating_sub(1)) as f64 / (self.epochs - 1) as f64
        } else {
            0.0
        };
        self.learning_rate * (1.0 - progress * (1.0 - self.final_lr_fraction))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::Config(format!(
                "final learning-rate fraction must lie in [0, 1], got {}",
                self.final_lr_fraction
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::Config("batch size and hidden width must be positive".into()));
        }
        Ok(())
    }
}

/// Per-epoch record, evaluated after the epoch's updates (epoch 0 is the
/// initial model). Loss terms are means per training sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub train_mpjpe_voxel: Option<f64>,
    pub val_mpjpe_voxel: Option<f64>,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("epoch record serializes")
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: ToyRegressor,
    pub log: Vec<EpochRecord>,
}

impl TrainRun {
    pub fn final_val_mpjpe(&self) -> Option<f64> {
        self.log.last().and_then(|r| r.val_mpjpe_voxel)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Diverged { epoch: usize, last_finite: Box<TrainRun> },
    #[error(transparent)]
    Other(#[from] Error),
}

impl From<TrainError> for Error {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { epoch, .. } => Error::TrainingDiverged { epoch },
            TrainError::Other(e) => e,
        }
    }
}

const EVAL_CHUNK: usize = 64;

/// Mean losses and voxel MPJPE (over depth-supervised samples) of `model`.
pub fn evaluate_model(model: &ToyRegressor, samples: &[ToySample], alpha: f64) -> Result<(LossBreakdown, Option<f64>)> {
    if samples.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let (mut hem, mut h2d, mut l3d) = (0.0, 0.0, 0.0);
    let mut errors = Vec::new();
    let mut any_depth = false;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let refs: Vec<&ToySample> = chunk.iter().collect();
        let batch = ToyBatch::stack(&refs, &model.arch)?;
        let tape = Tape::new();
        let params: Vec<_> = model.params.iter().map(|p| tape.var(p.clone())).collect();
        let out = model.forward(&params, tape.var(batch.inputs.clone().into_dyn()))?;
        let l = loss_graph(&tape, &out, &batch, alpha)?;
        hem += l.l_hem.item();
        h2d += l.l_2d.item();
        l3d += l.l_3d.item();
        any_depth |= batch.any_depth;
        let coords = out.coords.value();
        for (s, pred) in chunk.iter().zip(coords.axis_iter(Axis(0))) {
            if s.lambda == Lambda::One {
                let mut p = s.pose.clone();
                for (j, c) in p.coords.iter_mut().enumerate().take(model.arch.joints) {
                    *c = nalgebra::Vector3::new(pred[[j, 0]], pred[[j, 1]], pred[[j, 2]]);
                }
                errors.push(mpjpe(&p, &s.pose)?);
            }
        }
    }
    let n = samples.len() as f64;
    let lambda = if any_depth { Lambda::One } else { Lambda::Zero };
    let breakdown = LossBreakdown::new(hem / n, h2d / n, l3d / n, lambda, alpha);
    let mean = (!errors.is_empty()).then(|| errors.iter().sum::<f64>() / errors.len() as f64);
    Ok((breakdown, mean))
}

struct AdamState {
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: i32,
}

impl AdamState {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &[ArrayD<f64>]) -> Self {
        let zeros = || params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [ArrayD<f64>], grads: &[ArrayD<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            });
        }
    }
}

/// Minibatch training with a linearly decaying step size. Deterministic for
/// a fixed configuration.
pub fn train_toy(dataset: &ToyDataset, config: &TrainConfig) -> Result<TrainRun, TrainError> {
    config.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::Config("training set is empty".into()).into());
    }
    let arch = dataset.arch(config.hidden);
    let mut model = ToyRegressor::new(arch, config.seed)?;
    let mut shuffle = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9));
    let record = |model: &ToyRegressor, epoch: usize| -> Result<EpochRecord> {
        let (losses, train_mpjpe) = evaluate_model(model, &dataset.train, config.alpha)?;
        let val_mpjpe = if dataset.val.is_empty() {
            None
        } else {
            evaluate_model(model, &dataset.val, config.alpha)?.1
        };
        Ok(EpochRecord {
            epoch,
            losses,
            train_mpjpe_voxel: train_mpjpe,
            val_mpjpe_voxel: val_mpjpe,
        })
    };
    let mut log = vec![record(&model, 0)?];
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut adam = AdamState::new(&model.params);
    for epoch in 1..=config.epochs {
        let snapshot = model.clone();
        let lr = config.step_size(epoch);
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(config.batch_size) {
            let refs: Vec<&ToySample> = chunk.iter().map(|&i| &dataset.train[i]).collect();
            let batch = ToyBatch::stack(&refs, &arch)?;
            let (loss, grads) = objective_and_gradients(&model, &batch, config.alpha)?;
            if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(diverged(epoch, snapshot, log));
            }
            if lr > 0.0 {
                match config.optimizer {
                    Optimizer::Sgd => {
                        for (p, g) in model.params.iter_mut().zip(&grads) {
                            p.scaled_add(-lr, g);
                        }
                    }
                    Optimizer::Adam => adam.step(&mut model.params, &grads, lr),
                }
            }
        }
        let rec = record(&model, epoch)?;
        if !rec.losses.is_finite() {
            return Err(diverged(epoch, snapshot, log));
        }
        log.push(rec);
    }
    Ok(TrainRun { model, log })
}

fn diverged(epoch: usize, model: ToyRegressor, log: Vec<EpochRecord>) -> TrainError {
    TrainError::Diverged {
        epoch,
        last_finite: Box::new(TrainRun { model, log }),
    }
}

/// Decodes predicted voxel coordinates into a pose.
pub fn coords_to_pose(coords: ndarray::ArrayView2<'_, f64>) -> Pose3D {
    let mut pose = Pose3D::zeros();
    pose.unit = LengthUnit::Voxels;
    for (j, row) in coords.outer_iter().enumerate().take(JOINT_COUNT) {
        pose.coords[j] = nalgebra::Vector3::new(row[0], row[1], row[2]);
    }
    pose
}

/// Random input batch for gradient checks on small architectures.
pub fn random_batch(arch: &ToyArch, size: usize, rng: &mut impl Rng) -> ToyBatch {
    let uni = |rng: &mut dyn rand::RngCore, lo: f64, hi: f64, n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    };
    let j = arch.joints;
    let v = (arch.volume - 1) as f64;
    ToyBatch {
        inputs: Array2::from_shape_vec((size, arch.input_dim), uni(rng, -1.0, 1.0, size * arch.input_dim))
            .expect("size"),
        coords: ArrayD::from_shape_vec(IxDyn(&[size, j, 3]), uni(rng, 0.0, v, size * j * 3)).expect("size"),
        coord_weights: ArrayD::from_shape_vec(
            IxDyn(&[size, j, 3]),
            (0..size * j * 3).map(|i| if i % 7 == 5 { 0.0 } else { 1.0 }).collect(),
        )
        .expect("size"),
        hem: Array2::from_shape_vec((size, arch.hem_len()), uni(rng, 0.0, 1.0, size * arch.hem_len())).expect("size"),
        hem_mask: Array2::from_shape_vec(
            (size, arch.hem_len()),
            (0..size * arch.hem_len()).map(|i| (i % 3 != 1) as u8 as f64).collect(),
        )
        .expect("size"),
        heat2d: Array2::from_shape_vec((size, arch.heat_len()), uni(rng, 0.0, 1.0, size * arch.heat_len()))
            .expect("size"),
        any_depth: true,
    }
}
