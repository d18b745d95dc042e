//! Writes a synthetic cohort to CSV, parses it back and runs the cleaning
//! filters, printing what each step removed.

use dpm::cohort::{
    drop_sparse_subjects, match_visits, parse_cohort_csv, reject_out_of_range, remove_reverting_diagnoses,
    write_cohort_csv, Panel, ParseOptions, DEFAULT_MATCH_WINDOW_DAYS,
};
use dpm::synth::{generate, SynthSpec};

fn main() -> dpm::Result<()> {
    let spec = SynthSpec {
        n_subjects: 50,
        missing_rate: 0.1,
        ..SynthSpec::default()
    };
    let (cohort, _) = generate(&spec)?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("cohort.csv");
    write_cohort_csv(&cohort, std::fs::File::create(&path)?)?;

    let parsed = parse_cohort_csv(&path, &spec.specs(), ParseOptions::default())?;
    println!("parsed {} records from {}", parsed.records.len(), path.display());
    let matched = match_visits(&parsed, DEFAULT_MATCH_WINDOW_DAYS);
    let (in_range, report) = reject_out_of_range(&matched);
    println!("rejected {} out-of-range values", report.total());
    let monotone = remove_reverting_diagnoses(&in_range);
    let clean = drop_sparse_subjects(&monotone);
    println!(
        "{} subjects kept of {}",
        clean.subject_ids().len(),
        parsed.subject_ids().len()
    );

    let panel = Panel::from_cohort(&clean);
    for (name, n) in panel.biomarkers.iter().zip(panel.counts_per_biomarker()) {
        println!("{name:<12} {n} observations");
    }
    Ok(())
}
