//! Fits one model to a synthetic cohort and compares the recovered curves
//! with the generating ones on the same standardized score scale.

use dpm::cohort::Panel;
use dpm::fitter::{control_scores, fit, FitConfig};
use dpm::synth::{generate, SynthSpec};

fn main() -> dpm::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (train, truth) = generate(&SynthSpec::default())?;
    let (valid, _) = generate(&SynthSpec {
        seed: 1,
        n_subjects: 30,
        ..SynthSpec::default()
    })?;
    let start = std::time::Instant::now();
    let (model, trace) = fit(&train, &valid, &FitConfig::default())?;
    println!("fitted in {:.2?}, stopped at iteration {}", start.elapsed(), trace.l_opt);

    let truth = truth.standardize(&control_scores(&truth, &Panel::from_cohort(&train)))?;
    println!("{:<10} {:>9} {:>9} {:>9} {:>9}", "biomarker", "c fit", "c true", "b fit", "b true");
    for (name, p) in &model.curves {
        let t = truth.curves[name];
        println!("{name:<10} {:>9.3} {:>9.3} {:>9.3} {:>9.3}", p.c, t.c, p.b, t.b);
    }
    Ok(())
}
