//! Model selection and evaluation measures: robust BIC, MAE and NMAE,
//! multiclass AUC, the paired Wilcoxon signed-rank test and Kendall's tau.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::cohort::{sample_sd, Cohort, MeasurementRecord};
use crate::error::{Error, Result};
use crate::progression::FittedModel;

/// `2 E + Q ln N`.
pub fn bic(e_train: f64, q_params: usize, n_measurements: usize) -> Result<f64> {
    if q_params == 0 || n_measurements == 0 {
        return Err(Error::Metric("BIC needs at least one parameter and one measurement".into()));
    }
    Ok(2.0 * e_train + q_params as f64 * (n_measurements as f64).ln())
}

/// Mean absolute difference over pairs where both values are present.
pub fn mae(actual: &[Option<f64>], predicted: &[Option<f64>]) -> Result<f64> {
    if actual.len() != predicted.len() {
        return Err(Error::Metric(format!(
            "{} actual values but {} predictions",
            actual.len(),
            predicted.len()
        )));
    }
    let (sum, n) = actual
        .iter()
        .zip(predicted)
        .filter_map(|(a, p)| Some((a.as_ref()? - p.as_ref()?).abs()))
        .fold((0.0, 0usize), |(s, n), e| (s + e, n + 1));
    if n == 0 {
        return Err(Error::Metric("no value pairs available".into()));
    }
    Ok(sum / n as f64)
}

/// Mean over biomarkers of `mae_k / sd_k`.
pub fn nmae(mae: &BTreeMap<String, f64>, sd: &BTreeMap<String, f64>) -> Result<f64> {
    if mae.is_empty() {
        return Err(Error::Metric("no biomarkers to average".into()));
    }
    let mut total = 0.0;
    for (k, m) in mae {
        let s = sd.get(k).copied().ok_or_else(|| Error::Metric(format!("no standard deviation for `{k}`")))?;
        if !(s > 0.0) {
            return Err(Error::Metric(format!("standard deviation of `{k}` is zero")));
        }
        total += m / s;
    }
    Ok(total / mae.len() as f64)
}

/// Which values supply the NMAE denominators.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum NormalizeBy {
    /// Sample SD of the evaluated values themselves.
    #[default]
    Evaluation,
    Given(BTreeMap<String, f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionErrors {
    pub mae: BTreeMap<String, f64>,
    pub sd: BTreeMap<String, f64>,
    pub nmae: f64,
    /// Subjects the model could not place; their values are not scored.
    pub skipped_subjects: Vec<String>,
}

/// One observed value next to the model's prediction for it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedValue {
    pub subject_id: String,
    pub visit_index: u32,
    pub age: f64,
    pub biomarker: String,
    pub dps: f64,
    pub actual: f64,
    pub predicted: f64,
}

/// Places every subject of `cohort` with the model's curves held fixed and
/// predicts each observed value. Returns the predictions in subject order and
/// the subjects that could not be placed.
pub fn predict_records(model: &FittedModel, cohort: &Cohort) -> (Vec<PredictedValue>, Vec<String>) {
    let groups: Vec<(String, Vec<MeasurementRecord>)> = cohort
        .by_subject()
        .into_iter()
        .map(|(id, idx)| (id.to_string(), idx.into_iter().map(|i| cohort.records[i].clone()).collect()))
        .collect();
    let placed: Vec<std::result::Result<Vec<PredictedValue>, String>> = groups
        .par_iter()
        .map(|(id, recs)| match model.estimate_subject(recs) {
            Ok(sp) => Ok(recs
                .iter()
                .filter_map(|r| {
                    let p = model.curves.get(&r.biomarker)?;
                    let dps = sp.dps(r.age);
                    Some(PredictedValue {
                        subject_id: id.clone(),
                        visit_index: r.visit_index,
                        age: r.age,
                        biomarker: r.biomarker.clone(),
                        dps,
                        actual: r.value?,
                        predicted: p.value(dps),
                    })
                })
                .collect()),
            Err(e) => {
                log::warn!("subject `{id}` skipped in evaluation: {e}");
                Err(id.clone())
            }
        })
        .collect();
    let mut values = Vec::new();
    let mut skipped = Vec::new();
    for p in placed {
        match p {
            Ok(v) => values.extend(v),
            Err(id) => skipped.push(id),
        }
    }
    (values, skipped)
}

pub fn write_predictions_csv<W: Write>(writer: W, rows: &[PredictedValue]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// MAE and NMAE of `model` on `cohort`, subjects placed with the curves fixed.
pub fn prediction_errors(model: &FittedModel, cohort: &Cohort, normalize: &NormalizeBy) -> Result<PredictionErrors> {
    let (values, skipped) = predict_records(model, cohort);
    summarize_predictions(&values, skipped, normalize)
}

pub fn summarize_predictions(
    values: &[PredictedValue],
    skipped_subjects: Vec<String>,
    normalize: &NormalizeBy,
) -> Result<PredictionErrors> {
    let mut actual: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut errors: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for v in values {
        actual.entry(v.biomarker.clone()).or_default().push(v.actual);
        errors.entry(v.biomarker.clone()).or_default().push((v.actual - v.predicted).abs());
    }
    if errors.is_empty() {
        return Err(Error::Metric("no predicted values to score".into()));
    }
    let mae: BTreeMap<String, f64> = errors
        .iter()
        .map(|(k, e)| (k.clone(), e.iter().sum::<f64>() / e.len() as f64))
        .collect();
    let sd: BTreeMap<String, f64> = match normalize {
        NormalizeBy::Evaluation => actual.iter().map(|(k, v)| (k.clone(), sample_sd(v))).collect(),
        NormalizeBy::Given(m) => m.clone(),
    };
    let nmae = nmae(&mae, &sd)?;
    Ok(PredictionErrors {
        mae,
        sd,
        nmae,
        skipped_subjects,
    })
}

/// 1-based ranks with ties sharing their average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Multiclass AUC averaged over all class pairs. `probs[v][c]` is the
/// posterior of class `c` at observation `v`; observations with `truth`
/// `None` are ignored, and classes without observations do not count.
pub fn multiclass_auc(probs: &[Vec<f64>], truth: &[Option<usize>]) -> Result<f64> {
    if probs.len() != truth.len() {
        return Err(Error::Metric("posterior and label counts differ".into()));
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (v, t) in truth.iter().enumerate() {
        if let Some(c) = t {
            if *c >= probs[v].len() {
                return Err(Error::Metric(format!("label {c} has no posterior column")));
            }
            members.entry(*c).or_default().push(v);
        }
    }
    let classes: Vec<usize> = members.keys().copied().collect();
    let nc = classes.len();
    if nc < 2 {
        return Err(Error::Metric("AUC needs at least two classes with observations".into()));
    }
    // A(i|k): probability that class i's own posterior ranks an i member above a k member.
    let separation = |i: usize, k: usize| -> f64 {
        let (mi, mk) = (&members[&i], &members[&k]);
        let values: Vec<f64> = mi.iter().chain(mk).map(|&v| probs[v][i]).collect();
        let ranks = midranks(&values);
        let sr: f64 = ranks[..mi.len()].iter().sum();
        let (ni, nk) = (mi.len() as f64, mk.len() as f64);
        (sr - ni * (ni + 1.0) / 2.0) / (ni * nk)
    };
    let mut total = 0.0;
    for a in 0..nc {
        for b in a + 1..nc {
            let (i, k) = (classes[a], classes[b]);
            total += separation(i, k) + separation(k, i);
        }
    }
    Ok(total / (nc * (nc - 1)) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`.
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
    pub exact: bool,
}

/// Largest sample size for which the exact null distribution is used.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

/// Number of subsets of `{1..n}` with each possible rank sum.
fn signed_rank_counts(n: usize) -> Vec<f64> {
    let max = n * (n + 1) / 2;
    let mut counts = vec![0.0; max + 1];
    counts[0] = 1.0;
    for r in 1..=n {
        for s in (r..=max).rev() {
            counts[s] += counts[s - r];
        }
    }
    counts
}

/// Paired two-sided signed-rank test of `x - y`. Zero differences are
/// dropped. Exact null distribution for up to 25 untied differences, normal
/// approximation with tie and continuity corrections otherwise.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    if x.len() != y.len() {
        return Err(Error::Metric("paired samples differ in length".into()));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|v| *v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Err(Error::DegenerateTest("all paired differences are zero".into()));
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = midranks(&abs);
    let w_plus: f64 = ranks.iter().zip(&d).filter(|(_, v)| **v > 0.0).fold(0.0, |acc, (r, _)| acc + r);
    let total = (n * (n + 1)) as f64 / 2.0;
    let w = w_plus.min(total - w_plus);

    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }

    if n <= WILCOXON_EXACT_MAX_N && tie_term == 0.0 {
        let counts = signed_rank_counts(n);
        let below: f64 = counts[..=(w as usize)].iter().sum();
        let p = (2.0 * below / 2f64.powi(n as i32)).min(1.0);
        return Ok(WilcoxonResult {
            statistic: w,
            p_value: p,
            n,
            exact: true,
        });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        (2.0 * normal.cdf(-z)).min(1.0)
    };
    Ok(WilcoxonResult {
        statistic: w,
        p_value: p,
        n,
        exact: false,
    })
}

/// Kendall's tau-b between two paired samples.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Metric("Kendall's tau needs two equally long samples of length >= 2".into()));
    }
    let (mut concordant, mut discordant, mut tied_x, mut tied_y) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let dx = (x[i] - x[j]).signum() * ((x[i] != x[j]) as u8 as f64);
            let dy = (y[i] - y[j]).signum() * ((y[i] != y[j]) as u8 as f64);
            if dx == 0.0 && dy == 0.0 {
                continue;
            } else if dx == 0.0 {
                tied_x += 1.0;
            } else if dy == 0.0 {
                tied_y += 1.0;
            } else if dx == dy {
                concordant += 1.0;
            } else {
                discordant += 1.0;
            }
        }
    }
    let denom = ((concordant + discordant + tied_x) * (concordant + discordant + tied_y)).sqrt();
    if denom == 0.0 {
        return Err(Error::Metric("Kendall's tau is undefined for constant samples".into()));
    }
    Ok((concordant - discordant) / denom)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bic: Option<f64>,
    pub mae: BTreeMap<String, f64>,
    pub nmae: Option<f64>,
    pub auc: Option<f64>,
    pub wilcoxon: Option<WilcoxonResult>,
    /// Per-bootstrap values behind the summary numbers.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_bootstrap: BTreeMap<String, Vec<f64>>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::File::create(path)?.write_all(self.to_json()?.as_bytes())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bic_arithmetic() {
        assert!((bic(100.0, 10, 1000).unwrap() - (200.0 + 10.0 * 1000f64.ln())).abs() < 1e-12);
        assert!((bic(100.0, 10, 1000).unwrap() - 269.077_552_789_821_4).abs() < 1e-9);
        assert_eq!(bic(0.0, 1, 1).unwrap(), 0.0);
        assert!(bic(5.0, 11, 50).unwrap() > bic(5.0, 10, 50).unwrap());
        assert!(bic(1.0, 0, 10).is_err());
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[Some(0.0), Some(2.0)], &[Some(1.0), Some(1.0)]).unwrap(), 1.0);
        assert_eq!(mae(&[Some(3.0), None, Some(5.0)], &[Some(3.0), Some(1.0), Some(5.0)]).unwrap(), 0.0);
        assert!(mae(&[None], &[Some(1.0)]).is_err());
    }

    #[test]
    fn nmae_examples() {
        let m: BTreeMap<String, f64> = [("a".to_string(), 2.0)].into();
        let s: BTreeMap<String, f64> = [("a".to_string(), 4.0)].into();
        assert_eq!(nmae(&m, &s).unwrap(), 0.5);
        let z: BTreeMap<String, f64> = [("a".to_string(), 0.0)].into();
        assert!(matches!(nmae(&m, &z), Err(Error::Metric(msg)) if msg.contains("`a`")));
    }

    #[test]
    fn midranks_average_ties() {
        assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn auc_extremes() {
        let perfect = vec![vec![0.9, 0.1, 0.0], vec![0.1, 0.8, 0.1], vec![0.0, 0.2, 0.8], vec![0.8, 0.2, 0.0]];
        let truth = vec![Some(0), Some(1), Some(2), Some(0)];
        assert_eq!(multiclass_auc(&perfect, &truth).unwrap(), 1.0);
        let flat = vec![vec![1.0 / 3.0; 3]; 4];
        assert_eq!(multiclass_auc(&flat, &truth).unwrap(), 0.5);
        assert!(multiclass_auc(&flat, &[Some(1), Some(1), None, Some(1)]).is_err());
    }

    #[test]
    fn wilcoxon_all_positive() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let y = [0.0; 6];
        let r = wilcoxon_signed_rank(&x, &y).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 0.03125);
        assert!(r.exact);
        assert_eq!(wilcoxon_signed_rank(&y, &x).unwrap().p_value, r.p_value);
        assert!(matches!(wilcoxon_signed_rank(&x, &x), Err(Error::DegenerateTest(_))));
    }

    #[test]
    fn wilcoxon_large_sample_uses_normal() {
        let x: Vec<f64> = (0..40).map(|i| i as f64 * 0.1 + if i % 3 == 0 { -1.0 } else { 1.0 }).collect();
        let y: Vec<f64> = (0..40).map(|i| i as f64 * 0.1).collect();
        let r = wilcoxon_signed_rank(&x, &y).unwrap();
        assert!(!r.exact);
        assert!(r.p_value > 0.0 && r.p_value < 1.0);
    }

    #[test]
    fn kendall_examples() {
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        // one swap among four items: (5 - 1) / 6
        assert!((kendall_tau(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 4.0 / 6.0).abs() < 1e-15);
    }
}
