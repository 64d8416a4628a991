use hemlets::data_io::{
    ordinal_to_fbi, read_records, simulate_fbi_annotator, write_records, BandRates, FbiLabel, FbiRecord, NoiseProfile,
    OrdinalRecord, SimulationStats, FBI_SCHEMA, ORDINAL_SCHEMA,
};
use hemlets::skeleton::canonical_skeleton;

use super::load_poses;
use crate::config::pick;
use crate::error::{CliError, CliResult, WithPath};
use crate::files;
use crate::{ConvertArgs, Globals, SimulateArgs};

fn profile(args: &SimulateArgs, globals: &Globals) -> CliResult<NoiseProfile> {
    let f = &globals.file.simulate;
    let d = NoiseProfile::default();
    let p = NoiseProfile {
        high_tilt: BandRates {
            error_rate: pick(args.high_error, f.high_error_rate, d.high_tilt.error_rate),
            skip_rate: pick(args.high_skip, f.high_skip_rate, d.high_tilt.skip_rate),
        },
        low_tilt: BandRates {
            error_rate: pick(args.low_error, f.low_error_rate, d.low_tilt.error_rate),
            skip_rate: pick(args.low_skip, f.low_skip_rate, d.low_tilt.skip_rate),
        },
        high_above_deg: pick(args.high_above, f.high_above_deg, d.high_above_deg),
        low_below_deg: pick(args.low_below, f.low_below_deg, d.low_below_deg),
    };
    p.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(p)
}

fn print_stats(label: &str, s: &SimulationStats) {
    println!(
        "{label:<10} parts {:>7}  skipped {:>7} ({:>5.2} %)  errors {:>6} of {:>7} annotated ({:>5.2} %)",
        s.parts,
        s.skipped,
        100.0 * s.skip_rate(),
        s.errors,
        s.annotated,
        100.0 * s.error_rate()
    );
}

pub fn simulate(args: &SimulateArgs, globals: &Globals) -> CliResult<()> {
    let profile = profile(args, globals)?;
    let (records, poses) = load_poses(&args.input)?;
    let skeleton = canonical_skeleton();
    let simulated = simulate_fbi_annotator(&poses, &skeleton, &profile, globals.seed).at(&args.input)?;
    let out: Vec<FbiRecord> = records
        .iter()
        .zip(&poses)
        .zip(&simulated)
        .map(|((r, pose), labels)| FbiRecord {
            id: r.id.clone(),
            joints2d: Some(
                pose.project_xy()
                    .coords
                    .iter()
                    .zip(&pose.valid)
                    .map(|(c, &v)| v.then_some([c.x, c.y]))
                    .collect(),
            ),
            labels: labels.iter().map(|l| l.label).collect(),
        })
        .collect();
    files::write_with(&args.output, |w| write_records(w, FBI_SCHEMA, &out))?;
    let all = SimulationStats::from_labels(simulated.iter().flatten());
    let high = SimulationStats::from_labels(
        simulated
            .iter()
            .flatten()
            .filter(|l| l.tilt_deg > profile.high_above_deg),
    );
    println!("simulated {} records into {}", out.len(), args.output.display());
    print_stats("all", &all);
    print_stats(&format!(">{}deg", profile.high_above_deg), &high);
    Ok(())
}

pub fn convert(args: &ConvertArgs) -> CliResult<()> {
    let records: Vec<OrdinalRecord> = read_records(files::open(&args.input)?, ORDINAL_SCHEMA).at(&args.input)?;
    for r in &records {
        r.validate().at(&args.input)?;
    }
    let skeleton = canonical_skeleton();
    let out: Vec<FbiRecord> = records.iter().map(|r| ordinal_to_fbi(r, &skeleton)).collect();
    files::write_with(&args.output, |w| write_records(w, FBI_SCHEMA, &out))?;
    let labels = out.iter().flat_map(|r| &r.labels);
    let known = labels.clone().filter(|&&l| l != FbiLabel::Unknown).count();
    println!(
        "converted {} records into {}: {known} of {} parts labelled",
        out.len(),
        args.output.display(),
        labels.count()
    );
    Ok(())
}
