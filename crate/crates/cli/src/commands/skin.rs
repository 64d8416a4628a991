use hemlets::body::{skin, smpl_to_canonical, synthetic_rig, write_obj, write_stick_obj, BodyParams, RigTemplate};
use hemlets::container::{read_container, write_container};
use hemlets::losses::{SMPL_JOINTS, SMPL_SHAPE_DIM};
use hemlets::skeleton::canonical_skeleton;
use nalgebra::Vector3;
use serde::Deserialize;

use crate::error::{CliError, CliResult, WithPath};
use crate::files;
use crate::SkinArgs;

/// Body parameters as JSON; missing fields are zero.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamsFile {
    pub beta: Vec<f64>,
    /// Axis-angle per joint.
    pub theta: Vec<[f64; 3]>,
}

impl ParamsFile {
    pub fn to_params(&self) -> Result<BodyParams, String> {
        let mut p = BodyParams::default();
        if self.beta.len() > SMPL_SHAPE_DIM {
            return Err(format!(
                "beta has {} entries, at most {SMPL_SHAPE_DIM} allowed",
                self.beta.len()
            ));
        }
        if self.theta.len() > SMPL_JOINTS {
            return Err(format!(
                "theta has {} rotations, at most {SMPL_JOINTS} allowed",
                self.theta.len()
            ));
        }
        p.beta[..self.beta.len()].copy_from_slice(&self.beta);
        for (t, r) in p.theta.iter_mut().zip(&self.theta) {
            *t = Vector3::from(*r);
        }
        Ok(p)
    }
}

fn load_params(args: &SkinArgs) -> CliResult<BodyParams> {
    let Some(path) = &args.params else {
        return Ok(BodyParams::default());
    };
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Open {
        path: path.clone(),
        source,
    })?;
    let file: ParamsFile =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let params = file
        .to_params()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    params.check_finite().at(path)?;
    Ok(params)
}

fn load_rig(args: &SkinArgs) -> CliResult<RigTemplate> {
    match &args.rig {
        Some(path) => {
            let tensors = read_container(files::open(path)?).at(path)?;
            RigTemplate::from_tensors(&tensors).at(path)
        }
        None => Ok(synthetic_rig()),
    }
}

pub fn run(args: &SkinArgs) -> CliResult<()> {
    let params = load_params(args)?;
    let rig = load_rig(args)?;
    let mesh = skin(&params, &rig)?;
    files::write_with(&args.output, |out| write_obj(out, &mesh.vertices, &rig.faces))?;
    if let Some(path) = &args.skeleton {
        let skeleton = canonical_skeleton();
        let pose = smpl_to_canonical(&mesh.joints, &skeleton)?;
        files::write_with(path, |out| write_stick_obj(out, &pose, &skeleton))?;
    }
    if let Some(path) = &args.export_rig {
        files::write_with(path, |out| write_container(out, &rig.to_tensors()))?;
    }
    println!(
        "skinned {} vertices and {} faces into {}",
        mesh.vertices.len(),
        rig.faces.len(),
        args.output.display()
    );
    Ok(())
}
