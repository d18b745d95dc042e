//! On-disk layout of a bootstrap ensemble.

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::OutputDir;
use crate::cohort::{BiomarkerSpec, Panel};
use crate::error::{Error, Result};
use crate::fitter::FitTrace;
use crate::metrics::bic;
use crate::progression::FittedModel;
use crate::resampling::{BootstrapEnsemble, BootstrapFailure};

/// Model-selection numbers of one fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub bootstrap_id: Option<usize>,
    pub l_opt: usize,
    pub e_train_at_opt: f64,
    pub q_params: usize,
    pub n_measurements: usize,
    pub bic: f64,
}

impl FitSummary {
    /// `panel` is the training sample with its multiplicities.
    pub fn new(model: &FittedModel, trace: &FitTrace, panel: &Panel, specs: &[BiomarkerSpec]) -> Result<Self> {
        let mut q = 2 * model.subjects.len();
        for name in model.curves.keys() {
            let spec = specs
                .iter()
                .find(|s| &s.name == name)
                .ok_or_else(|| Error::UnknownBiomarker(name.clone()))?;
            q += FittedModel::theta_size(model.curve_kind, spec.constraint_policy);
        }
        let n: usize = panel.subjects.iter().map(|s| s.multiplicity * s.n_points()).sum();
        Ok(FitSummary {
            bootstrap_id: model.provenance.bootstrap_id,
            l_opt: trace.l_opt,
            e_train_at_opt: trace.e_train_at_opt,
            q_params: q,
            n_measurements: n,
            bic: bic(trace.e_train_at_opt, q, n)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleEntry {
    pub bootstrap_id: usize,
    pub model: String,
    pub sample: String,
    pub trace: String,
    pub summary: FitSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleIndex {
    pub seed: u64,
    pub n_requested: usize,
    pub members: Vec<EnsembleEntry>,
    pub failures: Vec<BootstrapFailure>,
}

pub fn member_stem(bootstrap_id: usize) -> String {
    format!("bootstrap_{bootstrap_id:04}")
}

pub fn save_ensemble(
    out: &mut OutputDir,
    ensemble: &BootstrapEnsemble,
    train: &Panel,
    specs: &[BiomarkerSpec],
    seed: u64,
    n_requested: usize,
) -> Result<EnsembleIndex> {
    let mut members = Vec::new();
    for (((model, trace), sample), &b) in ensemble
        .models
        .iter()
        .zip(&ensemble.traces)
        .zip(&ensemble.samples)
        .zip(&ensemble.indices)
    {
        let stem = member_stem(b);
        let entry = EnsembleEntry {
            bootstrap_id: b,
            model: format!("models/{stem}.json"),
            sample: format!("samples/{stem}.csv"),
            trace: format!("traces/{stem}.csv"),
            summary: FitSummary::new(model, trace, &train.with_multiplicities(&sample.in_bag), specs)?,
        };
        model.save_json(out.path(&entry.model)?)?;
        sample.write_csv(out.file(&entry.sample)?)?;
        trace.write_csv(out.file(&entry.trace)?)?;
        members.push(entry);
    }
    let index = EnsembleIndex {
        seed,
        n_requested,
        members,
        failures: ensemble.failures.clone(),
    };
    out.json("ensemble.json", &index)?;
    Ok(index)
}

/// Reads the index and every member model of an ensemble directory.
pub fn load_ensemble(dir: &Path) -> Result<(EnsembleIndex, Vec<FittedModel>)> {
    let index: EnsembleIndex = serde_json::from_reader(File::open(dir.join("ensemble.json"))?)?;
    if index.members.is_empty() {
        return Err(Error::Ensemble(format!("{} holds no models", dir.display())));
    }
    let models = index
        .members
        .iter()
        .map(|m| FittedModel::load_json(dir.join(&m.model)))
        .collect::<Result<Vec<_>>>()?;
    Ok((index, models))
}
