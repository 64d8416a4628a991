use hemlets::container::{find, read_container, write_container, Tensor};
use hemlets::heatmap::{
    decode_hemlets_polarity, encode_hemlets, part_labels, render_joint_heatmaps, render_volumetric_target,
    EncoderConfig, GridDims, PartHeatmaps, PartLabel, Polarity, VolumeDims, DEFAULT_GRID, DEFAULT_SIGMA,
};
use hemlets::metrics::ROOT_JOINT;
use hemlets::skeleton::{canonical_skeleton, Pose3D, Skeleton, JOINT_COUNT};
use hemlets::Error;
use nalgebra::Vector3;
use ndarray::{ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use super::{load_poses, part_names};
use crate::config::pick;
use crate::error::{CliError, CliResult, WithPath};
use crate::files;
use crate::{DecodeArgs, EncodeArgs, Globals};

pub const DEFAULT_VOLUME: usize = 16;
pub const DEFAULT_MM_PER_PIXEL: f64 = 37.5;
pub const POLARITY_SCHEMA: &str = "hemlets.polarity";

/// Resolved encoder settings.
#[derive(Debug, Clone, Copy)]
pub struct EncodeSettings {
    pub encoder: EncoderConfig,
    pub volume: usize,
    pub mm_per_pixel: f64,
}

impl EncodeSettings {
    fn resolve(args: &EncodeArgs, globals: &Globals) -> CliResult<Self> {
        let f = &globals.file.encode;
        let grid = pick(args.grid, f.grid, DEFAULT_GRID);
        let sigma = pick(args.sigma, f.sigma, DEFAULT_SIGMA);
        let volume = pick(args.volume, f.volume, DEFAULT_VOLUME);
        let mm_per_pixel = pick(args.mm_per_pixel, f.mm_per_pixel, DEFAULT_MM_PER_PIXEL);
        let policy = pick(
            args.unknown_policy.map(Into::into),
            f.unknown_policy,
            Default::default(),
        );
        if grid < 2 || volume < 2 {
            return Err(CliError::Config(format!(
                "grid ({grid}) and volume ({volume}) must be at least 2"
            )));
        }
        if !(sigma > 0.0 && sigma.is_finite()) || !(mm_per_pixel > 0.0 && mm_per_pixel.is_finite()) {
            return Err(CliError::Config(format!(
                "sigma ({sigma}) and mm-per-pixel ({mm_per_pixel}) must be positive"
            )));
        }
        Ok(EncodeSettings {
            encoder: EncoderConfig {
                dims: GridDims::square(grid),
                sigma,
                unknown_policy: policy,
            },
            volume,
            mm_per_pixel,
        })
    }

    fn grid(&self) -> usize {
        self.encoder.dims.width
    }

    /// Volume cells are scaled so the volume spans the same extent as the grid.
    fn mm_per_voxel(&self) -> f64 {
        self.mm_per_pixel * (self.grid() - 1) as f64 / (self.volume - 1) as f64
    }

    fn volume_sigma(&self) -> f64 {
        self.encoder.sigma * (self.volume - 1) as f64 / (self.grid() - 1) as f64
    }
}

/// Targets for one pose.
struct Encoded {
    triplets: PartHeatmaps,
    heatmaps2d: ndarray::Array3<f64>,
    volumetric: ndarray::Array4<f64>,
    labels: Vec<PartLabel>,
    pose_mm: Pose3D,
    out_of_frame: bool,
}

fn centered(pose: &Pose3D, scale: f64, center: f64) -> Pose3D {
    pose.map(|v| v / scale + Vector3::repeat(center))
}

fn encode_one(pose: &Pose3D, line: usize, skeleton: &Skeleton, s: &EncodeSettings) -> hemlets::Result<Encoded> {
    let rel = pose.root_relative(ROOT_JOINT).map_err(|e| Error::Parse {
        line,
        message: format!("root joint required: {e}"),
    })?;
    let half = |n: usize| (n - 1) as f64 / 2.0;
    let pixel = centered(&rel, s.mm_per_pixel, half(s.grid()));
    let pose2d = pixel.project_xy();
    let triplets = encode_hemlets(&rel, &pose2d, skeleton, &s.encoder)?;
    let labels = part_labels(&rel, &pose2d, skeleton)?;
    let heatmaps2d = render_joint_heatmaps(&pose2d, s.encoder.dims, s.encoder.sigma)?;
    let voxel = centered(&rel, s.mm_per_voxel(), half(s.volume));
    let vol = render_volumetric_target(&voxel, VolumeDims::cube(s.volume), [s.volume_sigma(); 3])?;
    let limit = (s.grid() - 1) as f64;
    let out_of_frame = (0..JOINT_COUNT)
        .filter_map(|j| pose2d.joint(j))
        .any(|p| p.x < 0.0 || p.y < 0.0 || p.x > limit || p.y > limit);
    Ok(Encoded {
        triplets,
        heatmaps2d,
        volumetric: vol.values,
        labels,
        pose_mm: rel,
        out_of_frame,
    })
}

/// Encodes poses on `threads` workers; the result order follows the input.
fn encode_all(
    poses: &[Pose3D],
    skeleton: &Skeleton,
    s: &EncodeSettings,
    threads: usize,
) -> hemlets::Result<Vec<Encoded>> {
    let chunk = poses.len().div_ceil(threads).max(1);
    let encode_chunk = |offset: usize, part: &[Pose3D]| -> hemlets::Result<Vec<Encoded>> {
        part.iter()
            .enumerate()
            // Line 1 is the schema header.
            .map(|(i, p)| encode_one(p, offset + i + 2, skeleton, s))
            .collect()
    };
    if threads == 1 {
        return encode_chunk(0, poses);
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = poses
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| scope.spawn(move || encode_chunk(c * chunk, part)))
            .collect();
        let mut out = Vec::with_capacity(poses.len());
        for h in handles {
            out.extend(h.join().expect("encoder thread panicked")?);
        }
        Ok(out)
    })
}

/// Stacks per-pose arrays along a new leading axis as `f32`.
fn stack<'a, D: ndarray::Dimension + 'a>(
    name: &str,
    items: impl ExactSizeIterator<Item = &'a ndarray::Array<f64, D>>,
    inner: &[usize],
) -> Tensor {
    let n = items.len();
    let mut shape = vec![n];
    shape.extend_from_slice(inner);
    let mut out = ArrayD::<f32>::zeros(IxDyn(&shape));
    for (mut slot, a) in out.axis_iter_mut(Axis(0)).zip(items) {
        slot.assign(&a.mapv(|v| v as f32).into_dyn());
    }
    Tensor::new(name, out)
}

fn polarity_code(label: PartLabel) -> f32 {
    label.polarity().map_or(f32::NAN, |p| p.value() as f32)
}

pub fn run(args: &EncodeArgs, globals: &Globals) -> CliResult<()> {
    let settings = EncodeSettings::resolve(args, globals)?;
    let (records, poses) = load_poses(&args.input)?;
    if records.is_empty() {
        return Err(CliError::Input {
            path: args.input.clone(),
            source: Error::Parse {
                line: 2,
                message: "no pose records".into(),
            },
        });
    }
    let skeleton = canonical_skeleton();
    let encoded = encode_all(&poses, &skeleton, &settings, globals.threads).at(&args.input)?;
    let (k, g, v) = (skeleton.parts().len(), settings.grid(), settings.volume);

    let mut pose_data = ArrayD::<f32>::from_elem(IxDyn(&[encoded.len(), JOINT_COUNT, 3]), f32::NAN);
    for (i, e) in encoded.iter().enumerate() {
        for j in 0..JOINT_COUNT {
            if let Some(c) = e.pose_mm.joint(j) {
                for d in 0..3 {
                    pose_data[[i, j, d]] = c[d] as f32;
                }
            }
        }
    }
    let polarity = ArrayD::from_shape_fn(IxDyn(&[encoded.len(), k]), |ix| {
        polarity_code(encoded[ix[0]].labels[ix[1]])
    });
    let tensors = vec![
        stack("hemlets", encoded.iter().map(|e| &e.triplets.values), &[k, 3, g, g]),
        stack("hemlets_mask", encoded.iter().map(|e| &e.triplets.mask), &[k, 3, g, g]),
        stack(
            "heatmaps2d",
            encoded.iter().map(|e| &e.heatmaps2d),
            &[JOINT_COUNT, g, g],
        ),
        stack(
            "volumetric",
            encoded.iter().map(|e| &e.volumetric),
            &[JOINT_COUNT, v, v, v],
        ),
        Tensor::new("poses", pose_data),
        Tensor::new("polarity", polarity),
    ];
    files::write_with(&args.output, |out| write_container(out, &tensors))?;

    println!("encoded {} poses into {}", encoded.len(), args.output.display());
    let outside = encoded.iter().filter(|e| e.out_of_frame).count();
    if outside > 0 {
        println!("warning: {outside} poses have joints outside the {g}x{g} grid");
    }
    print_histogram(&skeleton, encoded.iter().map(|e| e.labels.as_slice()));
    Ok(())
}

/// Per-part counts of each label.
fn print_histogram<'a>(skeleton: &Skeleton, labels: impl Iterator<Item = &'a [PartLabel]>) {
    let names = part_names(skeleton);
    let mut counts = vec![[0usize; 5]; names.len()];
    for pose in labels {
        for (c, l) in counts.iter_mut().zip(pose) {
            let slot = match l {
                PartLabel::Known(Polarity::Negative) => 0,
                PartLabel::Known(Polarity::Zero) => 1,
                PartLabel::Known(Polarity::Positive) => 2,
                PartLabel::Unknown => 3,
                PartLabel::Missing => 4,
            };
            c[slot] += 1;
        }
    }
    let width = names.iter().map(String::len).max().unwrap_or(4).max(4);
    println!(
        "{:<width$} {:>6} {:>6} {:>6} {:>7} {:>7}",
        "part", "-1", "0", "+1", "unknown", "missing"
    );
    for (name, c) in names.iter().zip(&counts) {
        println!(
            "{name:<width$} {:>6} {:>6} {:>6} {:>7} {:>7}",
            c[0], c[1], c[2], c[3], c[4]
        );
    }
}

/// Decoded polarities of one encoded pose; `null` where nothing is supervised.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarityRecord {
    pub index: usize,
    pub parts: Vec<Option<i8>>,
}

pub fn decode(args: &DecodeArgs) -> CliResult<()> {
    let tensors = read_container(files::open(&args.input)?).at(&args.input)?;
    let values = find(&tensors, "hemlets").at(&args.input)?.to_f64();
    let mask = find(&tensors, "hemlets_mask").at(&args.input)?.to_f64();
    if values.ndim() != 5 || values.shape()[2] != 3 || mask.shape() != values.shape() {
        return Err(CliError::Input {
            path: args.input.clone(),
            source: Error::Dimension {
                expected: vec![0, 0, 3, 0, 0],
                actual: values.shape().to_vec(),
            },
        });
    }
    let records = decode_records(&values, &mask).at(&args.input)?;
    files::write_with(&args.output, |out| {
        hemlets::data_io::write_records(out, POLARITY_SCHEMA, &records)
    })?;
    let decided = records.iter().flat_map(|r| &r.parts).filter(|p| p.is_some()).count();
    println!(
        "decoded {} poses, {decided} supervised parts, into {}",
        records.len(),
        args.output.display()
    );
    Ok(())
}

fn decode_records(values: &ArrayD<f64>, mask: &ArrayD<f64>) -> hemlets::Result<Vec<PolarityRecord>> {
    let as4 = |a: ndarray::ArrayViewD<'_, f64>| {
        a.to_owned()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("rank checked by caller")
    };
    let mut records = Vec::new();
    for (index, (v, m)) in values.axis_iter(Axis(0)).zip(mask.axis_iter(Axis(0))).enumerate() {
        let triplets = PartHeatmaps {
            values: as4(v),
            mask: as4(m),
        };
        let parts = (0..triplets.part_count())
            .map(|k| {
                let signed = [0, 2].iter().any(|&l| {
                    triplets
                        .mask
                        .index_axis(Axis(0), k)
                        .index_axis(Axis(0), l)
                        .iter()
                        .any(|&x| x > 0.0)
                });
                if !signed {
                    return Ok(None);
                }
                match decode_hemlets_polarity(&triplets, k) {
                    Ok(p) => Ok(Some(p.value())),
                    Err(Error::UnknownPolarity { .. }) => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect::<hemlets::Result<_>>()?;
        records.push(PolarityRecord { index, parts });
    }
    Ok(records)
}
