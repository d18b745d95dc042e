//! Fits a small bootstrap ensemble and prints how often each biomarker
//! takes each position in the inflection ordering.

use dpm::fitter::FitConfig;
use dpm::resampling::{aggregate_curves, linear_grid, ordering_matrix, run_bootstraps};
use dpm::synth::{generate, SynthSpec};

fn main() -> dpm::Result<()> {
    let (cohort, _) = generate(&SynthSpec {
        n_subjects: 60,
        ..SynthSpec::default()
    })?;
    let ensemble = run_bootstraps(&cohort, &FitConfig::default(), 8)?;
    println!("{} of 8 bootstraps fitted", ensemble.models.len());

    let ordering = ordering_matrix(&ensemble.models)?;
    print!("{:<10}", "");
    for r in 1..=ordering.biomarkers.len() {
        print!("{:>7}", format!("#{r}"));
    }
    println!();
    for (name, row) in ordering.biomarkers.iter().zip(&ordering.frequency) {
        print!("{name:<10}");
        for f in row {
            print!("{f:>7.2}");
        }
        println!();
    }
    println!("consensus: {}", ordering.consensus_order().join(" < "));

    let grid = linear_grid(-3.0, 6.0, 4);
    let first = &ordering.biomarkers[0];
    let agg = aggregate_curves(&ensemble.models, first, &grid)?;
    println!("{first} averaged over the ensemble:");
    for (s, (v, u)) in grid.iter().zip(agg.mean.iter().zip(&agg.normalized_mean)) {
        println!("  score {s:>5.1}  value {v:>9.3}  normalized {u:.3}");
    }
    Ok(())
}
