//! Corrupts a synthetic cohort with gross outliers and compares a robust
//! loss against least squares on the uncorrupted held-out values.

use dpm::fitter::{fit, FitConfig};
use dpm::metrics::{prediction_errors, NormalizeBy};
use dpm::resampling::partition_train_test;
use dpm::robust_loss::LossKind;
use dpm::synth::{generate, inject_outliers, SynthSpec};

fn main() -> dpm::Result<()> {
    let (clean, _) = generate(&SynthSpec::default())?;
    let (dirty, hit) = inject_outliers(&clean, 0.1, 5.0, 0)?;
    println!("replaced {} values with outliers", hit.len());
    let (train, valid, partition) = partition_train_test(&dirty, 0.2, 0)?;
    let held_out = clean.subset(&partition.test);
    for loss in [LossKind::L2, LossKind::CauchyLorentz, LossKind::Logistic] {
        let config = FitConfig {
            loss_kind: loss,
            ..FitConfig::default()
        };
        let (model, _) = fit(&train, &valid, &config)?;
        let errors = prediction_errors(&model, &held_out, &NormalizeBy::Evaluation)?;
        println!("{:<16} held-out NMAE {:.4}", format!("{loss:?}"), errors.nmae);
    }
    Ok(())
}
