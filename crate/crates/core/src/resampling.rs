//! Stratified train/test partitioning, bootstrap resampling with out-of-bag
//! validation, and summaries over a bootstrap ensemble.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, Diagnosis, Panel, SubjectSeries};
use crate::error::{Error, Result};
use crate::fitter::{fit_panel, FitConfig, FitTrace};
use crate::progression::FittedModel;

/// Largest share of failed bootstrap fits an ensemble tolerates.
pub const MAX_FAILURE_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VisitBand {
    Few,
    Many,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Stratum {
    pub first_dx: Diagnosis,
    pub last_dx: Diagnosis,
    pub visit_band: VisitBand,
}

fn visit_count(s: &SubjectSeries) -> usize {
    s.visits.iter().filter(|v| v.values.iter().any(Option::is_some)).count()
}

/// Groups subjects by first and last known diagnosis, then splits each group
/// at its median visit count: `Few` holds subjects at or below the median.
pub fn strata(panel: &Panel) -> BTreeMap<Stratum, Vec<String>> {
    let mut pairs: BTreeMap<(Diagnosis, Diagnosis), Vec<(&str, usize)>> = BTreeMap::new();
    for s in &panel.subjects {
        pairs.entry(s.first_last_diagnosis()).or_default().push((&s.id, visit_count(s)));
    }
    let mut out: BTreeMap<Stratum, Vec<String>> = BTreeMap::new();
    for ((first_dx, last_dx), members) in pairs {
        let counts: Vec<f64> = members.iter().map(|m| m.1 as f64).collect();
        let median = crate::progression::median(&counts);
        for (id, n) in members {
            let visit_band = if n as f64 <= median { VisitBand::Few } else { VisitBand::Many };
            out.entry(Stratum {
                first_dx,
                last_dx,
                visit_band,
            })
            .or_default()
            .push(id.to_string());
        }
    }
    for ids in out.values_mut() {
        ids.sort();
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Test,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Partition {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl Partition {
    /// CSV `subject_id,role`, sorted by subject id.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut rows: Vec<(&str, Role)> = self
            .train
            .iter()
            .map(|s| (s.as_str(), Role::Train))
            .chain(self.test.iter().map(|s| (s.as_str(), Role::Test)))
            .collect();
        rows.sort_by(|a, b| a.0.cmp(b.0));
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["subject_id", "role"])?;
        for (id, role) in rows {
            w.write_record([id, if role == Role::Train { "train" } else { "test" }])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Partition> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut out = Partition::default();
        for row in rdr.deserialize::<(String, Role)>() {
            let (id, role) = row?;
            match role {
                Role::Train => out.train.push(id),
                Role::Test => out.test.push(id),
            }
        }
        Ok(out)
    }
}

/// Sends `ceil(test_fraction * n)` randomly chosen subjects of every stratum to
/// the test set. Single-subject strata stay in training.
pub fn partition_subjects(panel: &Panel, test_fraction: f64, seed: u64) -> Result<Partition> {
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test fraction must lie in [0, 1], got {test_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Partition::default();
    for (stratum, mut ids) in strata(panel) {
        if ids.len() == 1 {
            log::warn!(
                "stratum {:?}-{:?}/{:?} has a single subject; it stays in training",
                stratum.first_dx,
                stratum.last_dx,
                stratum.visit_band
            );
            out.train.append(&mut ids);
            continue;
        }
        ids.shuffle(&mut rng);
        let n_test = (test_fraction * ids.len() as f64).ceil() as usize;
        let train = ids.split_off(n_test);
        out.test.extend(ids);
        out.train.extend(train);
    }
    out.train.sort();
    out.test.sort();
    Ok(out)
}

/// Splits a cohort into training and test cohorts by stratified subject sampling.
pub fn partition_train_test(cohort: &Cohort, test_fraction: f64, seed: u64) -> Result<(Cohort, Cohort, Partition)> {
    let part = partition_subjects(&Panel::from_cohort(cohort), test_fraction, seed)?;
    Ok((cohort.subset(&part.train), cohort.subset(&part.test), part))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BootstrapSample {
    /// In-bag subjects with the number of times each was drawn.
    pub in_bag: BTreeMap<String, usize>,
    pub out_of_bag: Vec<String>,
}

impl BootstrapSample {
    /// CSV `subject_id,count_in_bag` over every subject, out-of-bag ones with count 0.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut all: BTreeMap<&str, usize> = self.in_bag.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        for id in &self.out_of_bag {
            all.insert(id, 0);
        }
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["subject_id", "count_in_bag"])?;
        for (id, n) in all {
            w.write_record([id, &n.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Generator for bootstrap `index`: one ChaCha stream per index under a
/// shared key, so any bootstrap can be reproduced on its own.
pub fn bootstrap_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Draws, within every stratum of `n` subjects, `n` subjects with replacement.
pub fn bootstrap_sample(panel: &Panel, seed: u64, index: usize) -> BootstrapSample {
    let mut rng = bootstrap_rng(seed, index);
    let mut in_bag: BTreeMap<String, usize> = BTreeMap::new();
    let mut out_of_bag = Vec::new();
    for ids in strata(panel).values() {
        let mut counts = vec![0usize; ids.len()];
        for _ in 0..ids.len() {
            counts[rng.random_range(0..ids.len())] += 1;
        }
        for (id, n) in ids.iter().zip(counts) {
            if n == 0 {
                out_of_bag.push(id.clone());
            } else {
                in_bag.insert(id.clone(), n);
            }
        }
    }
    out_of_bag.sort();
    BootstrapSample { in_bag, out_of_bag }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapFailure {
    pub index: usize,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct BootstrapEnsemble {
    pub models: Vec<FittedModel>,
    pub traces: Vec<FitTrace>,
    /// Bootstrap index of each model.
    pub indices: Vec<usize>,
    pub samples: Vec<BootstrapSample>,
    pub failures: Vec<BootstrapFailure>,
}

impl BootstrapEnsemble {
    pub fn oob_subjects(&self) -> impl Iterator<Item = &[String]> {
        self.samples.iter().map(|s| s.out_of_bag.as_slice())
    }
}

/// Fits one model per bootstrap, validating each on its out-of-bag subjects.
/// Bootstraps run in parallel; results do not depend on the thread count.
pub fn run_bootstraps(train: &Cohort, config: &FitConfig, n_bootstraps: usize) -> Result<BootstrapEnsemble> {
    run_bootstraps_panel(&Panel::from_cohort(train), &train.specs, config, n_bootstraps)
}

pub fn run_bootstraps_panel(
    panel: &Panel,
    specs: &[crate::cohort::BiomarkerSpec],
    config: &FitConfig,
    n_bootstraps: usize,
) -> Result<BootstrapEnsemble> {
    if n_bootstraps == 0 {
        return Err(Error::Config("need at least one bootstrap".into()));
    }
    config.validate()?;
    let runs: Vec<(BootstrapSample, std::result::Result<(FittedModel, FitTrace), String>)> = (0..n_bootstraps)
        .into_par_iter()
        .map(|b| {
            let sample = bootstrap_sample(panel, config.seed, b);
            let result = if sample.out_of_bag.is_empty() {
                Err("out-of-bag set is empty".to_string())
            } else {
                let in_bag = panel.with_multiplicities(&sample.in_bag);
                let oob: BTreeMap<String, usize> = sample.out_of_bag.iter().map(|s| (s.clone(), 1)).collect();
                let valid = panel.with_multiplicities(&oob);
                fit_panel(&in_bag, &valid, specs, config)
                    .map(|(mut model, trace)| {
                        model.provenance.bootstrap_id = Some(b);
                        (model, trace)
                    })
                    .map_err(|e| e.to_string())
            };
            (sample, result)
        })
        .collect();

    let mut ensemble = BootstrapEnsemble {
        models: Vec::new(),
        traces: Vec::new(),
        indices: Vec::new(),
        samples: Vec::new(),
        failures: Vec::new(),
    };
    for (b, (sample, result)) in runs.into_iter().enumerate() {
        match result {
            Ok((model, trace)) => {
                ensemble.models.push(model);
                ensemble.traces.push(trace);
                ensemble.indices.push(b);
                ensemble.samples.push(sample);
            }
            Err(message) => {
                log::warn!("bootstrap {b} failed: {message}");
                ensemble.failures.push(BootstrapFailure { index: b, message });
            }
        }
    }
    let failed = ensemble.failures.len() as f64 / n_bootstraps as f64;
    if failed > MAX_FAILURE_FRACTION || ensemble.models.is_empty() {
        return Err(Error::Ensemble(format!(
            "{} of {n_bootstraps} bootstrap fits failed (first: {})",
            ensemble.failures.len(),
            ensemble.failures.first().map(|f| f.message.as_str()).unwrap_or("")
        )));
    }
    Ok(ensemble)
}

/// Share of bootstraps in which each biomarker takes each inflection rank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingMatrix {
    pub biomarkers: Vec<String>,
    /// `frequency[k][r]`: fraction of models where biomarker `k` has rank `r + 1`.
    pub frequency: Vec<Vec<f64>>,
}

impl OrderingMatrix {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["biomarker".to_string()];
        header.extend((1..=self.biomarkers.len()).map(|r| format!("rank_{r}")));
        w.write_record(&header)?;
        for (name, row) in self.biomarkers.iter().zip(&self.frequency) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Biomarkers sorted by expected rank, ties by name.
    pub fn consensus_order(&self) -> Vec<String> {
        let mut expected: Vec<(f64, &String)> = self
            .biomarkers
            .iter()
            .zip(&self.frequency)
            .map(|(b, row)| (row.iter().enumerate().map(|(r, f)| (r + 1) as f64 * f).sum(), b))
            .collect();
        expected.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
        expected.into_iter().map(|(_, b)| b.clone()).collect()
    }
}

/// Biomarkers of one model ordered by inflection point, ties by name.
pub fn inflection_order(model: &FittedModel) -> Vec<String> {
    let mut v: Vec<(&String, f64)> = model.curves.iter().map(|(k, p)| (k, p.c)).collect();
    v.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(b.0)));
    v.into_iter().map(|(k, _)| k.clone()).collect()
}

pub fn ordering_matrix(models: &[FittedModel]) -> Result<OrderingMatrix> {
    if models.is_empty() {
        return Err(Error::Ensemble("ordering needs at least one model".into()));
    }
    let biomarkers: Vec<String> = models
        .iter()
        .flat_map(|m| m.curves.keys().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let row: BTreeMap<&str, usize> = biomarkers.iter().enumerate().map(|(i, b)| (b.as_str(), i)).collect();
    let n = biomarkers.len();
    let mut frequency = vec![vec![0.0; n]; n];
    let w = 1.0 / models.len() as f64;
    for m in models {
        if m.curves.len() != n {
            return Err(Error::IncompatibleModel("ensemble models cover different biomarkers".into()));
        }
        for (rank, b) in inflection_order(m).iter().enumerate() {
            frequency[row[b.as_str()]][rank] += w;
        }
    }
    Ok(OrderingMatrix { biomarkers, frequency })
}

/// Curves of one biomarker evaluated on a score grid for every model.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveAggregate {
    pub biomarker: String,
    pub grid: Vec<f64>,
    pub per_model: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Each model's curve rescaled to `[0, 1]` by its own asymptotes.
    pub normalized_per_model: Vec<Vec<f64>>,
    pub normalized_mean: Vec<f64>,
}

fn pointwise_mean(rows: &[Vec<f64>], len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / rows.len() as f64)
        .collect()
}

pub fn aggregate_curves(models: &[FittedModel], biomarker: &str, grid: &[f64]) -> Result<CurveAggregate> {
    if models.is_empty() {
        return Err(Error::Ensemble("aggregation needs at least one model".into()));
    }
    if grid.iter().any(|s| !s.is_finite()) {
        return Err(Error::Domain("score grid must be finite".into()));
    }
    let mut per_model = Vec::with_capacity(models.len());
    let mut normalized_per_model = Vec::with_capacity(models.len());
    for m in models {
        let p = m
            .curves
            .get(biomarker)
            .ok_or_else(|| Error::UnknownBiomarker(biomarker.to_string()))?;
        per_model.push(grid.iter().map(|&s| p.value(s)).collect::<Vec<_>>());
        normalized_per_model.push(grid.iter().map(|&s| p.unit_value(s)).collect::<Vec<_>>());
    }
    Ok(CurveAggregate {
        biomarker: biomarker.to_string(),
        grid: grid.to_vec(),
        mean: pointwise_mean(&per_model, grid.len()),
        normalized_mean: pointwise_mean(&normalized_per_model, grid.len()),
        per_model,
        normalized_per_model,
    })
}

/// Evenly spaced grid of `n >= 2` points over `[lo, hi]`.
pub fn linear_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// CSV `dps,<biomarker columns>`; all columns share the grid.
pub fn write_curves_csv<W: Write>(writer: W, grid: &[f64], columns: &[(String, Vec<f64>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["dps".to_string()];
    header.extend(columns.iter().map(|c| c.0.clone()));
    w.write_record(&header)?;
    for (i, s) in grid.iter().enumerate() {
        let mut rec = vec![s.to_string()];
        rec.extend(columns.iter().map(|c| c.1[i].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
