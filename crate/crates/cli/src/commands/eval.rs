use std::collections::BTreeMap;
use std::io::Write;

use hemlets::metrics::{evaluate, EvalOptions, EvalReport};
use hemlets::skeleton::{Pose3D, JOINT_NAMES};
use serde::Serialize;

use super::load_poses;
use crate::config::pick;
use crate::error::{CliError, CliResult};
use crate::files;
use crate::{EvalArgs, Globals};

/// Overall and per-group reports, as written by `--json`.
#[derive(Debug, Serialize)]
pub struct FullReport {
    pub overall: EvalReport,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub groups: BTreeMap<String, EvalReport>,
}

fn options(args: &EvalArgs, globals: &Globals) -> CliResult<EvalOptions> {
    let f = &globals.file.eval;
    let d = EvalOptions::default();
    let o = EvalOptions {
        pck_threshold_mm: pick(args.pck_threshold, f.pck_threshold_mm, d.pck_threshold_mm),
        auc_steps: pick(args.auc_steps, f.auc_steps, d.auc_steps),
        alignment: pick(args.alignment.map(Into::into), f.alignment, d.alignment),
    };
    if !(o.pck_threshold_mm > 0.0 && o.pck_threshold_mm.is_finite()) {
        return Err(CliError::Config(format!(
            "PCK threshold must be positive, got {}",
            o.pck_threshold_mm
        )));
    }
    if o.auc_steps < 2 {
        return Err(CliError::Config(format!(
            "AUC needs at least 2 steps, got {}",
            o.auc_steps
        )));
    }
    Ok(o)
}

pub fn run(args: &EvalArgs, globals: &Globals) -> CliResult<()> {
    let opts = options(args, globals)?;
    let (pred_records, preds) = load_poses(&args.pred)?;
    let (gt_records, gts) = load_poses(&args.gt)?;
    if preds.len() != gts.len() {
        return Err(CliError::Input {
            path: args.pred.clone(),
            source: hemlets::Error::Dimension {
                expected: vec![gts.len()],
                actual: vec![preds.len()],
            },
        });
    }
    let renamed = pred_records
        .iter()
        .zip(&gt_records)
        .filter(|(p, g)| p.id != g.id)
        .count();
    if renamed > 0 {
        eprintln!("warning: {renamed} record ids differ between the files; pairing by position");
    }
    let overall = evaluate(&preds, &gts, &opts)?;
    let mut groups = BTreeMap::new();
    if args.by_group {
        let mut members: BTreeMap<String, (Vec<Pose3D>, Vec<Pose3D>)> = BTreeMap::new();
        for ((g, p), gt) in gt_records.iter().zip(&preds).zip(&gts) {
            let key = g.group.clone().unwrap_or_else(|| "(none)".into());
            let entry = members.entry(key).or_default();
            entry.0.push(p.clone());
            entry.1.push(gt.clone());
        }
        for (name, (p, g)) in members {
            groups.insert(name, evaluate(&p, &g, &opts)?);
        }
    }
    print_report(&overall, &opts, &groups);
    if let Some(path) = &args.json {
        let report = FullReport { overall, groups };
        files::write_with(path, |out| {
            serde_json::to_writer_pretty(&mut *out, &report).map_err(|e| hemlets::Error::Io(e.into()))?;
            Ok(writeln!(out)?)
        })?;
    }
    Ok(())
}

fn print_report(r: &EvalReport, opts: &EvalOptions, groups: &BTreeMap<String, EvalReport>) {
    println!("poses      {}", r.poses);
    println!("MPJPE      {:.3} mm", r.mpjpe_mm);
    println!("PA-MPJPE   {:.3} mm ({:?})", r.pa_mpjpe_mm, r.alignment);
    println!("PCK@{:<4}   {:.2} %", opts.pck_threshold_mm, r.pck_percent);
    println!("AUC        {:.2} %", r.auc_percent);
    println!();
    println!("{:<12} {:>10}", "joint", "error_mm");
    for (name, e) in JOINT_NAMES.iter().zip(&r.per_joint_errors) {
        match e {
            Some(e) => println!("{name:<12} {e:>10.3}"),
            None => println!("{name:<12} {:>10}", "-"),
        }
    }
    if !groups.is_empty() {
        println!();
        println!(
            "{:<16} {:>6} {:>10} {:>10} {:>8} {:>8}",
            "group", "poses", "mpjpe", "pa_mpjpe", "pck", "auc"
        );
        for (name, g) in groups {
            println!(
                "{name:<16} {:>6} {:>10.3} {:>10.3} {:>8.2} {:>8.2}",
                g.poses, g.mpjpe_mm, g.pa_mpjpe_mm, g.pck_percent, g.auc_percent
            );
        }
    }
}
