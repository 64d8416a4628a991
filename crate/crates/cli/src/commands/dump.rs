//! Grayscale PGM images, one per trailing 2D slice of every tensor of rank
//! 3 or more, and OBJ stick figures for a `poses` tensor.

use std::io::Write;
use std::path::Path;

use hemlets::body::write_stick_obj;
use hemlets::container::{read_container, Tensor};
use hemlets::skeleton::{canonical_skeleton, Pose3D, JOINT_COUNT};
use nalgebra::Vector3;
use ndarray::{ArrayViewD, Axis, Ix2};

use crate::error::{CliResult, WithPath};
use crate::files;
use crate::DumpArgs;

const POSES: &str = "poses";

/// Binary PGM scaled so the slice maximum is white. Non-positive and
/// non-finite values are black.
pub fn pgm(slice: ndarray::ArrayView2<'_, f32>) -> Vec<u8> {
    let (h, w) = slice.dim();
    let max = slice.iter().copied().filter(|v| v.is_finite()).fold(0.0f32, f32::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(slice.iter().map(|&v| {
        if max > 0.0 && v.is_finite() && v > 0.0 {
            (v / max * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

fn digits(n: usize) -> usize {
    n.saturating_sub(1).to_string().len()
}

/// `name_i_j_....pgm` with indices zero-padded to their dimension's width.
fn slice_name(name: &str, index: &[usize], shape: &[usize]) -> String {
    let mut s = name.to_string();
    for (&i, &n) in index.iter().zip(shape) {
        s.push_str(&format!("_{i:0w$}", w = digits(n)));
    }
    s + ".pgm"
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    files::write_with(path, |out| Ok(out.write_all(bytes)?))
}

fn dump_images(t: &Tensor, dir: &Path) -> CliResult<usize> {
    let shape = t.data.shape();
    let lead = &shape[..shape.len() - 2];
    let count: usize = lead.iter().product();
    let mut index = vec![0usize; lead.len()];
    for _ in 0..count {
        let mut view: ArrayViewD<'_, f32> = t.data.view();
        for &i in &index {
            view = view.index_axis_move(Axis(0), i);
        }
        let slice = view.into_dimensionality::<Ix2>().expect("two trailing axes");
        write_bytes(&dir.join(slice_name(&t.name, &index, lead)), &pgm(slice))?;
        // odometer increment, last index fastest
        for d in (0..index.len()).rev() {
            index[d] += 1;
            if index[d] < lead[d] {
                break;
            }
            index[d] = 0;
        }
    }
    Ok(count)
}

fn dump_poses(t: &Tensor, dir: &Path) -> CliResult<usize> {
    let skeleton = canonical_skeleton();
    let n = t.data.shape()[0];
    for (i, pose) in t.data.axis_iter(Axis(0)).enumerate() {
        let mut p = Pose3D::zeros();
        for j in 0..JOINT_COUNT {
            let c = Vector3::new(pose[[j, 0]], pose[[j, 1]], pose[[j, 2]]).cast::<f64>();
            if c.iter().all(|v| v.is_finite()) {
                p.coords[j] = c;
            } else {
                p.valid[j] = false;
            }
        }
        let path = dir.join(format!("pose_{i:0w$}.obj", w = digits(n)));
        files::write_with(&path, |out| write_stick_obj(out, &p, &skeleton))?;
    }
    Ok(n)
}

pub fn run(args: &DumpArgs) -> CliResult<()> {
    let tensors = read_container(files::open(&args.input)?).at(&args.input)?;
    files::create_dir(&args.output_dir)?;
    let (mut images, mut figures) = (0, 0);
    for t in &tensors {
        let shape = t.data.shape();
        if t.name == POSES && shape.len() == 3 && shape[1] == JOINT_COUNT && shape[2] == 3 {
            figures += dump_poses(t, &args.output_dir)?;
        } else if shape.len() >= 3 {
            images += dump_images(t, &args.output_dir)?;
        }
    }
    println!(
        "wrote {images} images and {figures} stick figures to {}",
        args.output_dir.display()
    );
    Ok(())
}
