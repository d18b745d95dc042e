//! Stages held-out visits with a bootstrap ensemble and scores the result
//! with the multiclass AUC.

use dpm::cohort::{Diagnosis, Panel};
use dpm::fitter::FitConfig;
use dpm::metrics::multiclass_auc;
use dpm::resampling::{partition_train_test, run_bootstraps};
use dpm::staging::{labelled_scores, stage_cohort, StagingClassifier};
use dpm::synth::{generate, SynthSpec};

fn main() -> dpm::Result<()> {
    let (cohort, _) = generate(&SynthSpec {
        thresholds: [-2.0, 6.0],
        ..SynthSpec::default()
    })?;
    let (train, test, _) = partition_train_test(&cohort, 0.2, 0)?;
    let ensemble = run_bootstraps(&train, &FitConfig::default(), 5)?;
    let panel = Panel::from_cohort(&train);
    let classifiers = ensemble
        .models
        .iter()
        .map(|m| StagingClassifier::fit(&labelled_scores(m, &panel), None))
        .collect::<dpm::Result<Vec<_>>>()?;
    let staged = stage_cohort(&ensemble.models, &classifiers, &test)?;

    for v in staged.iter().take(8) {
        println!(
            "{} visit {} score {:>6.2} recorded {:<3} predicted {:<3} P(CN, MCI, AD) = ({:.2}, {:.2}, {:.2})",
            v.subject_id,
            v.visit_index,
            v.dps,
            v.diagnosis.label(),
            v.posterior.predicted().label(),
            v.posterior.prob(Diagnosis::CN),
            v.posterior.prob(Diagnosis::MCI),
            v.posterior.prob(Diagnosis::AD),
        );
    }
    let probs: Vec<Vec<f64>> = staged
        .iter()
        .map(|v| Diagnosis::CLASSES.iter().map(|&d| v.posterior.prob(d)).collect())
        .collect();
    let truth: Vec<Option<usize>> = staged.iter().map(|v| v.diagnosis.stage()).collect();
    println!("multiclass AUC over {} visits: {:.4}", staged.len(), multiclass_auc(&probs, &truth)?);
    Ok(())
}
