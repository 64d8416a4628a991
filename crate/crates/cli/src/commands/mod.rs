pub mod annotate;
pub mod dump;
pub mod encode;
pub mod eval;
pub mod skin;
pub mod train;

use std::path::Path;

use hemlets::data_io::{read_poses, PoseRecord};
use hemlets::skeleton::Pose3D;

use crate::error::{CliResult, WithPath};
use crate::files;

/// Reads a pose file into records and validated poses.
pub fn load_poses(path: &Path) -> CliResult<(Vec<PoseRecord>, Vec<Pose3D>)> {
    let records = read_poses(files::open(path)?).at(path)?;
    let poses = records
        .iter()
        .map(|r| r.to_pose())
        .collect::<hemlets::Result<Vec<_>>>()
        .at(path)?;
    Ok((records, poses))
}

/// `parent-child` joint names of each part.
pub fn part_names(skeleton: &hemlets::skeleton::Skeleton) -> Vec<String> {
    skeleton
        .parts()
        .iter()
        .map(|&(p, c)| format!("{}-{}", skeleton.joints()[p], skeleton.joints()[c]))
        .collect()
}
