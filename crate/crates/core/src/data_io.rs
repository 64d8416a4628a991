//! Annotation formats, weak depth labels, crop/augmentation geometry and the
//! FBI annotator simulator.
//!
//! Sign convention: depth grows away from the camera, and a part is
//! `Forward` when its child joint is closer than its parent
//! (`z_child < z_parent`), i.e. polarity `+1`.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use nalgebra::{Rotation2, Rotation3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{encode_with_labels, EncoderConfig, HeatmapTriplets, PartLabel, Polarity};
use crate::skeleton::{tilt_angle, Pose2D, Pose3D, Skeleton, JOINT_COUNT, PART_COUNT};

pub const POSES_SCHEMA: &str = "hemlets.poses";
pub const FBI_SCHEMA: &str = "hemlets.fbi";
pub const ORDINAL_SCHEMA: &str = "hemlets.ordinal";
pub const SCHEMA_VERSION: u32 = 1;
/// Side of the square network input after cropping.
pub const CROP_SIZE: f64 = 256.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FbiLabel {
    Forward,
    Backward,
    #[default]
    Unknown,
}

impl FbiLabel {
    pub fn part_label(self) -> PartLabel {
        match self {
            FbiLabel::Forward => PartLabel::Known(Polarity::Positive),
            FbiLabel::Backward => PartLabel::Known(Polarity::Negative),
            FbiLabel::Unknown => PartLabel::Unknown,
        }
    }

    /// Ground-truth label from depths: the sign of `z_parent - z_child`,
    /// `Unknown` on an exact tie.
    pub fn from_depths(z_parent: f64, z_child: f64) -> Self {
        if z_child < z_parent {
            FbiLabel::Forward
        } else if z_child > z_parent {
            FbiLabel::Backward
        } else {
            FbiLabel::Unknown
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            FbiLabel::Forward => FbiLabel::Backward,
            FbiLabel::Backward => FbiLabel::Forward,
            FbiLabel::Unknown => FbiLabel::Unknown,
        }
    }
}

/// FBI annotation for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FbiRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joints2d: Option<Vec<Option<[f64; 2]>>>,
    pub labels: Vec<FbiLabel>,
}

impl FbiRecord {
    pub fn unknown(id: impl Into<String>) -> Self {
        FbiRecord {
            id: id.into(),
            joints2d: None,
            labels: vec![FbiLabel::Unknown; PART_COUNT],
        }
    }

    pub fn pose2d(&self) -> Option<Pose2D> {
        self.joints2d.as_ref().map(|js| joints_to_pose2d(js))
    }
}

/// Depth relation of joint `a` with respect to joint `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrdinalRelation {
    Closer,
    Farther,
    Ambiguous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrdinalPair {
    pub a: usize,
    pub b: usize,
    pub relation: OrdinalRelation,
}

/// Pairwise ordinal depth annotation for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrdinalRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joints2d: Option<Vec<Option<[f64; 2]>>>,
    pub pairs: Vec<OrdinalPair>,
}

impl OrdinalRecord {
    pub fn validate(&self) -> Result<()> {
        let max_pairs = JOINT_COUNT * (JOINT_COUNT - 1) / 2;
        if self.pairs.len() > max_pairs {
            return Err(Error::Schema(format!(
                "{} ordinal pairs exceed the {max_pairs} possible",
                self.pairs.len()
            )));
        }
        for p in &self.pairs {
            if p.a >= JOINT_COUNT || p.b >= JOINT_COUNT || p.a == p.b {
                return Err(Error::Schema(format!("invalid ordinal pair ({}, {})", p.a, p.b)));
            }
        }
        Ok(())
    }
}

/// Converts pairwise relations to per-part labels. Only pairs joining a
/// part's parent and child are used; ambiguous, missing or contradictory
/// pairs give `Unknown`.
pub fn ordinal_to_fbi(record: &OrdinalRecord, skeleton: &Skeleton) -> FbiRecord {
    let mut votes: HashMap<usize, Vec<FbiLabel>> = HashMap::new();
    for pair in &record.pairs {
        let hit = skeleton.parts().iter().enumerate().find_map(|(k, &(p, c))| {
            if (pair.a, pair.b) == (p, c) {
                Some((k, false))
            } else if (pair.a, pair.b) == (c, p) {
                Some((k, true))
            } else {
                None
            }
        });
        let Some((k, child_first)) = hit else { continue };
        // relation read as "parent is <relation> than child"
        let label = match (pair.relation, child_first) {
            (OrdinalRelation::Ambiguous, _) => FbiLabel::Unknown,
            (OrdinalRelation::Closer, false) | (OrdinalRelation::Farther, true) => FbiLabel::Backward,
            (OrdinalRelation::Farther, false) | (OrdinalRelation::Closer, true) => FbiLabel::Forward,
        };
        votes.entry(k).or_default().push(label);
    }
    let labels = (0..skeleton.parts().len())
        .map(|k| match votes.get(&k) {
            Some(v) if v.iter().all(|&l| l == v[0]) => v[0],
            _ => FbiLabel::Unknown,
        })
        .collect();
    FbiRecord {
        id: record.id.clone(),
        joints2d: record.joints2d.clone(),
        labels,
    }
}

/// Per-part supervision and the HEMlets target with its mask.
pub fn fbi_to_mask(
    record: &FbiRecord,
    pose2d: &Pose2D,
    skeleton: &Skeleton,
    config: &EncoderConfig,
) -> Result<(Vec<PartLabel>, HeatmapTriplets)> {
    if record.labels.len() != skeleton.parts().len() {
        return Err(Error::dimension(&[skeleton.parts().len()], &[record.labels.len()]));
    }
    let labels: Vec<PartLabel> = record
        .labels
        .iter()
        .enumerate()
        .map(|(k, l)| {
            let (p, c) = skeleton.parts()[k];
            if pose2d.valid[p] && pose2d.valid[c] {
                l.part_label()
            } else {
                PartLabel::Missing
            }
        })
        .collect();
    let triplets = encode_with_labels(pose2d, &labels, skeleton, config)?;
    Ok((labels, triplets))
}

/// Axis-aligned rectangle in source-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl BoundingBox {
    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(self.x + self.width / 2.0, self.y + self.height / 2.0)
    }
}

/// Maps source pixels into the square network input and back.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub source: BoundingBox,
    pub square: BoundingBox,
    pub image_dims: (usize, usize),
    pub scale: f64,
}

impl CropTransform {
    pub fn forward(&self, p: Vector2<f64>) -> Vector2<f64> {
        (p - Vector2::new(self.square.x, self.square.y)) * self.scale
    }

    pub fn inverse(&self, q: Vector2<f64>) -> Vector2<f64> {
        q / self.scale + Vector2::new(self.square.x, self.square.y)
    }

    /// `(a, b, c, d, e, f)` with `x' = a x + b y + c`, `y' = d x + e y + f`.
    pub fn forward_coefficients(&self) -> [f64; 6] {
        let s = self.scale;
        [s, 0.0, -s * self.square.x, 0.0, s, -s * self.square.y]
    }

    pub fn inverse_coefficients(&self) -> [f64; 6] {
        let s = 1.0 / self.scale;
        [s, 0.0, self.square.x, 0.0, s, self.square.y]
    }
}

/// Square crop with side `max(width, height)` centred on the box, scaled to
/// `CROP_SIZE`.
pub fn crop_and_resize(bbox: BoundingBox, image_dims: (usize, usize)) -> Result<CropTransform> {
    let finite = [bbox.x, bbox.y, bbox.width, bbox.height].iter().all(|v| v.is_finite());
    if !finite || bbox.width <= 0.0 || bbox.height <= 0.0 {
        return Err(Error::Geometry(format!("degenerate box {bbox:?}")));
    }
    let side = bbox.width.max(bbox.height);
    let c = bbox.center();
    Ok(CropTransform {
        source: bbox,
        square: BoundingBox {
            x: c.x - side / 2.0,
            y: c.y - side / 2.0,
            width: side,
            height: side,
        },
        image_dims,
        scale: CROP_SIZE / side,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub max_rotation_deg: f64,
    pub scale_range: (f64, f64),
    pub flip_probability: f64,
    /// Image-plane centre for rotation, scaling and flipping.
    pub center: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_rotation_deg: 30.0,
            scale_range: (0.75, 1.25),
            flip_probability: 0.5,
            center: ((CROP_SIZE - 1.0) / 2.0, (CROP_SIZE - 1.0) / 2.0),
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            max_rotation_deg: 0.0,
            scale_range: (1.0, 1.0),
            flip_probability: 0.0,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(self.max_rotation_deg >= 0.0 && lo > 0.0 && lo <= hi && (0.0..=1.0).contains(&self.flip_probability)) {
            return Err(Error::Config(format!("invalid augmentation config {self:?}")));
        }
        Ok(())
    }
}

/// Concrete augmentation drawn from an [`AugmentConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    pub scale: f64,
    pub flip: bool,
    pub center: (f64, f64),
}

impl AugmentParams {
    pub fn sample(config: &AugmentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = config.max_rotation_deg;
        let (lo, hi) = config.scale_range;
        Ok(AugmentParams {
            rotation_deg: if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 },
            scale: if hi > lo { rng.random_range(lo..=hi) } else { lo },
            flip: rng.random_bool(config.flip_probability),
            center: config.center,
        })
    }
}

/// A training sample in crop coordinates (2D) and camera millimetres (3D).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub pose2d: Pose2D,
    pub pose3d: Option<Pose3D>,
}

/// Applies flip, then rotation and scale about the centre. The 2D pose is
/// rotated and scaled in the image plane; the 3D pose is rotated about the
/// camera axis through its root and keeps its metric size. Flipping mirrors
/// x and swaps left/right joints in both.
pub fn apply_augment(sample: &Sample, params: &AugmentParams, skeleton: &Skeleton) -> Sample {
    let c = Vector2::new(params.center.0, params.center.1);
    let mut pose2d = sample.pose2d.clone();
    let mut pose3d = sample.pose3d.clone();
    if params.flip {
        pose2d = pose2d.mirrored(skeleton, c.x);
        pose3d = pose3d.map(|p| p.mirrored(skeleton));
    }
    let angle = params.rotation_deg.to_radians();
    if angle != 0.0 || params.scale != 1.0 {
        let rot = Rotation2::new(angle);
        for p in pose2d.coords.iter_mut() {
            *p = c + rot * (*p - c) * params.scale;
        }
    }
    if angle != 0.0 {
        if let Some(p3) = pose3d.as_mut() {
            let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), angle);
            let root = p3.coords[skeleton.root()];
            for p in p3.coords.iter_mut() {
                *p = root + rot * (*p - root);
            }
        }
    }
    Sample { pose2d, pose3d }
}

/// Draws augmentation parameters from `seed` and applies them.
pub fn augment(
    sample: &Sample,
    skeleton: &Skeleton,
    seed: u64,
    config: &AugmentConfig,
) -> Result<(Sample, AugmentParams)> {
    let params = AugmentParams::sample(config, seed)?;
    Ok((apply_augment(sample, &params, skeleton), params))
}

/// Error and skip probabilities for one tilt band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandRates {
    pub error_rate: f64,
    pub skip_rate: f64,
}

/// Annotator noise as a function of bone tilt. Between `low_below_deg` and
/// `high_above_deg` the rates are interpolated linearly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub high_tilt: BandRates,
    pub low_tilt: BandRates,
    pub high_above_deg: f64,
    pub low_below_deg: f64,
}

impl Default for NoiseProfile {
    fn default() -> Self {
        NoiseProfile {
            high_tilt: BandRates {
                error_rate: 0.074,
                skip_rate: 0.09,
            },
            low_tilt: BandRates {
                error_rate: 0.20,
                skip_rate: 0.25,
            },
            high_above_deg: 30.0,
            low_below_deg: 20.0,
        }
    }
}

impl NoiseProfile {
    pub fn noise_free() -> Self {
        Self::uniform(0.0, 0.0)
    }

    /// Same rates at every tilt.
    pub fn uniform(error_rate: f64, skip_rate: f64) -> Self {
        let r = BandRates { error_rate, skip_rate };
        NoiseProfile {
            high_tilt: r,
            low_tilt: r,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for r in [self.high_tilt, self.low_tilt] {
            for v in [r.error_rate, r.skip_rate] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Config(format!("rate {v} outside [0, 1]")));
                }
            }
        }
        if !(self.low_below_deg <= self.high_above_deg) {
            return Err(Error::Config("tilt band bounds out of order".into()));
        }
        Ok(())
    }

    pub fn rates_at(&self, tilt_deg: f64) -> BandRates {
        if tilt_deg > self.high_above_deg {
            self.high_tilt
        } else if tilt_deg < self.low_below_deg || self.high_above_deg == self.low_below_deg {
            self.low_tilt
        } else {
            let t = (tilt_deg - self.low_below_deg) / (self.high_above_deg - self.low_below_deg);
            let lerp = |a: f64, b: f64| a + (b - a) * t;
            BandRates {
                error_rate: lerp(self.low_tilt.error_rate, self.high_tilt.error_rate),
                skip_rate: lerp(self.low_tilt.skip_rate, self.high_tilt.skip_rate),
            }
        }
    }
}

/// One simulated label with the facts behind it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulatedLabel {
    pub truth: FbiLabel,
    pub label: FbiLabel,
    pub tilt_deg: f64,
    pub skipped: bool,
    pub flipped: bool,
}

/// Simulates an FBI annotator over ground-truth poses. Each part is skipped
/// with the band's skip rate; otherwise its true label is flipped with the
/// band's error rate. Record `i` draws from stream `i` of the master seed.
pub fn simulate_fbi_annotator(
    poses: &[Pose3D],
    skeleton: &Skeleton,
    profile: &NoiseProfile,
    seed: u64,
) -> Result<Vec<Vec<SimulatedLabel>>> {
    profile.validate()?;
    poses
        .iter()
        .enumerate()
        .map(|(i, pose)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            (0..skeleton.parts().len())
                .map(|k| {
                    let (p, c) = skeleton.parts()[k];
                    let (Some(jp), Some(jc)) = (pose.joint(p), pose.joint(c)) else {
                        return Ok(SimulatedLabel {
                            truth: FbiLabel::Unknown,
                            label: FbiLabel::Unknown,
                            tilt_deg: f64::NAN,
                            skipped: true,
                            flipped: false,
                        });
                    };
                    let truth = FbiLabel::from_depths(jp.z, jc.z);
                    let tilt = tilt_angle(pose, skeleton, k)?;
                    let rates = profile.rates_at(tilt);
                    let skipped = rng.random_bool(rates.skip_rate);
                    let flipped = !skipped && rng.random_bool(rates.error_rate);
                    let label = if skipped {
                        FbiLabel::Unknown
                    } else if flipped {
                        truth.flipped()
                    } else {
                        truth
                    };
                    Ok(SimulatedLabel {
                        truth,
                        label,
                        tilt_deg: tilt,
                        skipped,
                        flipped,
                    })
                })
                .collect()
        })
        .collect()
}

/// Summary counts over simulated labels.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SimulationStats {
    pub parts: usize,
    pub skipped: usize,
    pub annotated: usize,
    pub errors: usize,
}

impl SimulationStats {
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a SimulatedLabel>) -> Self {
        let mut s = SimulationStats::default();
        for l in labels {
            s.parts += 1;
            if l.skipped {
                s.skipped += 1;
            } else {
                s.annotated += 1;
                if l.label != l.truth {
                    s.errors += 1;
                }
            }
        }
        s
    }

    /// Errors among annotated (non-skipped) parts.
    pub fn error_rate(&self) -> f64 {
        self.errors as f64 / self.annotated.max(1) as f64
    }

    pub fn skip_rate(&self) -> f64 {
        self.skipped as f64 / self.parts.max(1) as f64
    }
}

// ---- line-delimited files ----

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
}

/// One pose record; `joints` holds `[x, y, z]` or `null` per joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    pub joints: Vec<Option<[f64; 3]>>,
}

impl PoseRecord {
    pub fn from_pose(id: impl Into<String>, pose: &Pose3D) -> Self {
        PoseRecord {
            id: id.into(),
            group: None,
            joints: (0..JOINT_COUNT)
                .map(|j| pose.joint(j).map(|v| [v.x, v.y, v.z]))
                .collect(),
        }
    }

    pub fn to_pose(&self) -> Result<Pose3D> {
        if self.joints.len() != JOINT_COUNT {
            return Err(Error::dimension(&[JOINT_COUNT], &[self.joints.len()]));
        }
        let mut pose = Pose3D::zeros();
        for (j, v) in self.joints.iter().enumerate() {
            match v {
                Some([x, y, z]) => pose.coords[j] = Vector3::new(*x, *y, *z),
                None => pose.valid[j] = false,
            }
        }
        pose.check_finite()?;
        Ok(pose)
    }
}

pub(crate) fn joints_to_pose2d(joints: &[Option<[f64; 2]>]) -> Pose2D {
    let mut pose = Pose2D::new([Vector2::zeros(); JOINT_COUNT]);
    for (j, v) in joints.iter().enumerate().take(JOINT_COUNT) {
        match v {
            Some([x, y]) => pose.coords[j] = Vector2::new(*x, *y),
            None => pose.valid[j] = false,
        }
    }
    for j in joints.len()..JOINT_COUNT {
        pose.valid[j] = false;
    }
    pose
}

/// Writes a schema header line followed by one JSON object per record.
pub fn write_records<T: Serialize>(mut out: impl Write, schema: &str, records: &[T]) -> Result<()> {
    let header = Header {
        schema: schema.to_string(),
        version: SCHEMA_VERSION,
    };
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Schema(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Reads records written by [`write_records`]. Blank lines are ignored; line
/// numbers in errors are 1-based.
pub fn read_records<T: for<'de> Deserialize<'de>>(input: impl BufRead, schema: &str) -> Result<Vec<T>> {
    let mut lines = input.lines().enumerate().filter_map(|(i, l)| match l {
        Ok(s) if s.trim().is_empty() => None,
        other => Some((i + 1, other)),
    });
    let (first, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "empty file, expected a schema header".into(),
    })?;
    let header: Header = serde_json::from_str(&header?).map_err(|e| Error::Parse {
        line: first,
        message: e.to_string(),
    })?;
    if header.schema != schema || header.version != SCHEMA_VERSION {
        return Err(Error::Schema(format!(
            "expected {schema} v{SCHEMA_VERSION}, found {} v{}",
            header.schema, header.version
        )));
    }
    lines
        .map(|(line, text)| {
            serde_json::from_str(&text?).map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_poses(input: impl BufRead) -> Result<Vec<PoseRecord>> {
    let records: Vec<PoseRecord> = read_records(input, POSES_SCHEMA)?;
    for (i, r) in records.iter().enumerate() {
        r.to_pose().map_err(|e| Error::Parse {
            line: i + 2,
            message: e.to_string(),
        })?;
    }
    Ok(records)
}
