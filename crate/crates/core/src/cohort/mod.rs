//! Longitudinal cohort data: per-visit measurement records, biomarker
//! declarations, and the dense per-subject view used by the fitter.

mod filters;
mod io;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use filters::{
    ancova_residuals, drop_sparse_subjects, match_visits, reject_out_of_range,
    remove_reverting_diagnoses, RejectionReport, DEFAULT_MATCH_WINDOW_DAYS,
};
pub use io::{
    load_specs, parse_cohort_csv, read_cohort_csv, save_specs, write_cohort_csv, ParseOptions,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Diagnosis {
    CN,
    MCI,
    AD,
    Missing,
}

impl Diagnosis {
    pub const CLASSES: [Diagnosis; 3] = [Diagnosis::CN, Diagnosis::MCI, Diagnosis::AD];

    /// Maps a raw clinical label onto the three-class scheme. With `merge`
    /// enabled, synonyms and subtypes collapse onto their parent class.
    pub fn from_label(label: &str, merge: bool) -> Diagnosis {
        let l = label.trim().to_ascii_uppercase();
        match l.as_str() {
            "CN" => Diagnosis::CN,
            "MCI" => Diagnosis::MCI,
            "AD" => Diagnosis::AD,
            "SMC" | "NL" | "NORMAL" if merge => Diagnosis::CN,
            "EMCI" | "LMCI" if merge => Diagnosis::MCI,
            "DEMENTIA" if merge => Diagnosis::AD,
            _ => Diagnosis::Missing,
        }
    }

    pub fn is_known(self) -> bool {
        self != Diagnosis::Missing
    }

    /// Position in the CN -> MCI -> AD ordering.
    pub fn stage(self) -> Option<usize> {
        match self {
            Diagnosis::CN => Some(0),
            Diagnosis::MCI => Some(1),
            Diagnosis::AD => Some(2),
            Diagnosis::Missing => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Diagnosis::CN => "CN",
            Diagnosis::MCI => "MCI",
            Diagnosis::AD => "AD",
            Diagnosis::Missing => "",
        }
    }
}

impl fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnosis::Missing => f.write_str("Missing"),
            d => f.write_str(d.label()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintPolicy {
    /// Both asymptotes pinned to the declared bounds `[lo, hi]`; orientation
    /// follows the disease direction found at initialization.
    FixedRange(f64, f64),
    NonnegativeAsymptotes,
    Free,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DirectionHint {
    IncreasingWithDisease,
    DecreasingWithDisease,
    #[default]
    Unknown,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    #[default]
    Cognitive,
    Imaging,
    Fluid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiomarkerSpec {
    pub name: String,
    /// Closed interval of admissible values; `None` means unbounded.
    pub range: Option<[f64; 2]>,
    pub constraint_policy: ConstraintPolicy,
    #[serde(default)]
    pub direction_hint: DirectionHint,
    #[serde(default)]
    pub modality: Modality,
}

impl BiomarkerSpec {
    pub fn free(name: impl Into<String>) -> Self {
        BiomarkerSpec {
            name: name.into(),
            range: None,
            constraint_policy: ConstraintPolicy::Free,
            direction_hint: DirectionHint::Unknown,
            modality: Modality::Cognitive,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let ConstraintPolicy::FixedRange(lo, hi) = self.constraint_policy {
            if !lo.is_finite() || !hi.is_finite() || lo == hi {
                return Err(Error::Schema(format!(
                    "biomarker `{}`: fixed range needs finite distinct bounds, got [{lo}, {hi}]",
                    self.name
                )));
            }
        }
        if let Some([lo, hi]) = self.range {
            if lo > hi {
                return Err(Error::Schema(format!(
                    "biomarker `{}`: empty valid range [{lo}, {hi}]",
                    self.name
                )));
            }
        }
        Ok(())
    }

    pub fn in_range(&self, v: f64) -> bool {
        match self.range {
            Some([lo, hi]) => v >= lo && v <= hi,
            None => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub subject_id: String,
    pub visit_index: u32,
    pub age: f64,
    pub visit_date: Option<NaiveDate>,
    pub biomarker: String,
    pub value: Option<f64>,
    pub diagnosis: Diagnosis,
    pub cohort_tag: String,
    /// Intracranial volume measured at the same acquisition, when known.
    pub icv: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Cohort {
    pub specs: Vec<BiomarkerSpec>,
    pub records: Vec<MeasurementRecord>,
}

impl Cohort {
    pub fn new(specs: Vec<BiomarkerSpec>, records: Vec<MeasurementRecord>) -> Result<Self> {
        let mut names = BTreeSet::new();
        for s in &specs {
            s.validate()?;
            if !names.insert(s.name.as_str()) {
                return Err(Error::Schema(format!("duplicate biomarker spec `{}`", s.name)));
            }
        }
        if let Some(r) = records.iter().find(|r| !names.contains(r.biomarker.as_str())) {
            return Err(Error::Schema(format!(
                "record for subject `{}` refers to biomarker `{}` without a spec",
                r.subject_id, r.biomarker
            )));
        }
        Ok(Cohort { specs, records })
    }

    pub fn spec(&self, name: &str) -> Option<&BiomarkerSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    pub fn biomarker_names(&self) -> Vec<String> {
        self.specs.iter().map(|s| s.name.clone()).collect()
    }

    /// Sorted distinct subject identifiers.
    pub fn subject_ids(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.subject_id.as_str()).collect();
        set.into_iter().map(str::to_owned).collect()
    }

    pub fn subset<S: AsRef<str>>(&self, ids: &[S]) -> Cohort {
        let keep: BTreeSet<&str> = ids.iter().map(|s| s.as_ref()).collect();
        Cohort {
            specs: self.specs.clone(),
            records: self
                .records
                .iter()
                .filter(|r| keep.contains(r.subject_id.as_str()))
                .cloned()
                .collect(),
        }
    }

    pub fn observed_count(&self) -> usize {
        self.records.iter().filter(|r| r.value.is_some()).count()
    }

    /// Record indices grouped by subject, each group ordered by (age, visit index).
    pub(crate) fn by_subject(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            map.entry(r.subject_id.as_str()).or_default().push(i);
        }
        for idx in map.values_mut() {
            idx.sort_by(|&x, &y| {
                let (a, b) = (&self.records[x], &self.records[y]);
                a.age
                    .total_cmp(&b.age)
                    .then(a.visit_index.cmp(&b.visit_index))
                    .then(x.cmp(&y))
            });
        }
        map
    }
}

/// One visit in dense form; `values` is indexed like [`Panel::biomarkers`].
#[derive(Clone, Debug, PartialEq)]
pub struct Visit {
    pub index: u32,
    pub age: f64,
    pub diagnosis: Diagnosis,
    pub values: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectSeries {
    pub id: String,
    /// Number of copies of this subject in the sample (bootstrap in-bag count).
    pub multiplicity: usize,
    pub visits: Vec<Visit>,
}

impl SubjectSeries {
    pub fn n_points(&self) -> usize {
        self.visits
            .iter()
            .map(|v| v.values.iter().filter(|x| x.is_some()).count())
            .sum()
    }

    pub fn mean_age(&self) -> f64 {
        let ages: Vec<f64> = self
            .visits
            .iter()
            .filter(|v| v.values.iter().any(Option::is_some))
            .map(|v| v.age)
            .collect();
        if ages.is_empty() {
            self.visits.iter().map(|v| v.age).sum::<f64>() / self.visits.len().max(1) as f64
        } else {
            ages.iter().sum::<f64>() / ages.len() as f64
        }
    }

    pub fn first_last_diagnosis(&self) -> (Diagnosis, Diagnosis) {
        let known: Vec<Diagnosis> = self
            .visits
            .iter()
            .map(|v| v.diagnosis)
            .filter(|d| d.is_known())
            .collect();
        match (known.first(), known.last()) {
            (Some(f), Some(l)) => (*f, *l),
            _ => (Diagnosis::Missing, Diagnosis::Missing),
        }
    }
}

/// Dense per-subject view of a cohort.
#[derive(Clone, Debug, PartialEq)]
pub struct Panel {
    pub biomarkers: Vec<String>,
    pub subjects: Vec<SubjectSeries>,
}

impl Panel {
    pub fn from_cohort(cohort: &Cohort) -> Panel {
        let biomarkers = cohort.biomarker_names();
        let col: BTreeMap<&str, usize> = biomarkers
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let mut subjects = Vec::new();
        for (id, idx) in cohort.by_subject() {
            let mut visits: Vec<Visit> = Vec::new();
            let mut pos: BTreeMap<u32, usize> = BTreeMap::new();
            for i in idx {
                let r = &cohort.records[i];
                let vi = *pos.entry(r.visit_index).or_insert_with(|| {
                    visits.push(Visit {
                        index: r.visit_index,
                        age: r.age,
                        diagnosis: Diagnosis::Missing,
                        values: vec![None; biomarkers.len()],
                    });
                    visits.len() - 1
                });
                let v = &mut visits[vi];
                if v.diagnosis == Diagnosis::Missing {
                    v.diagnosis = r.diagnosis;
                }
                if let Some(x) = r.value {
                    v.values[col[r.biomarker.as_str()]] = Some(x);
                }
            }
            visits.sort_by(|a, b| a.age.total_cmp(&b.age).then(a.index.cmp(&b.index)));
            subjects.push(SubjectSeries {
                id: id.to_owned(),
                multiplicity: 1,
                visits,
            });
        }
        Panel {
            biomarkers,
            subjects,
        }
    }

    /// Panel over the given subjects with bootstrap multiplicities.
    pub fn with_multiplicities(&self, counts: &BTreeMap<String, usize>) -> Panel {
        Panel {
            biomarkers: self.biomarkers.clone(),
            subjects: self
                .subjects
                .iter()
                .filter_map(|s| {
                    counts.get(&s.id).filter(|&&m| m > 0).map(|&m| SubjectSeries {
                        multiplicity: m,
                        ..s.clone()
                    })
                })
                .collect(),
        }
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.biomarkers.iter().position(|b| b == name)
    }

    /// Observed values of one biomarker, with subject multiplicity applied.
    pub fn values_of(&self, k: usize) -> Vec<f64> {
        let mut out = Vec::new();
        for s in &self.subjects {
            for v in &s.visits {
                if let Some(x) = v.values[k] {
                    out.extend(std::iter::repeat_n(x, s.multiplicity));
                }
            }
        }
        out
    }

    pub fn counts_per_biomarker(&self) -> Vec<usize> {
        (0..self.biomarkers.len())
            .map(|k| {
                self.subjects
                    .iter()
                    .flat_map(|s| s.visits.iter())
                    .filter(|v| v.values[k].is_some())
                    .count()
            })
            .collect()
    }

    pub fn total_points(&self) -> usize {
        self.subjects.iter().map(SubjectSeries::n_points).sum()
    }
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator); zero for fewer than two values.
pub(crate) fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_mapping() {
        assert_eq!(Diagnosis::from_label("LMCI", true), Diagnosis::MCI);
        assert_eq!(Diagnosis::from_label("LMCI", false), Diagnosis::Missing);
        assert_eq!(Diagnosis::from_label("SMC", true), Diagnosis::CN);
        assert_eq!(Diagnosis::from_label("Dementia", true), Diagnosis::AD);
        assert_eq!(Diagnosis::from_label("FTD", true), Diagnosis::Missing);
        assert_eq!(Diagnosis::from_label(" cn ", false), Diagnosis::CN);
    }

    #[test]
    fn fixed_range_requires_distinct_bounds() {
        let mut s = BiomarkerSpec::free("MMSE");
        s.constraint_policy = ConstraintPolicy::FixedRange(30.0, 30.0);
        assert!(s.validate().is_err());
        s.constraint_policy = ConstraintPolicy::FixedRange(0.0, f64::INFINITY);
        assert!(s.validate().is_err());
        s.constraint_policy = ConstraintPolicy::FixedRange(0.0, 30.0);
        assert!(s.validate().is_ok());
    }

    #[test]
    fn cohort_requires_specs_for_records() {
        let r = MeasurementRecord {
            subject_id: "s".into(),
            visit_index: 0,
            age: 70.0,
            visit_date: None,
            biomarker: "X".into(),
            value: Some(1.0),
            diagnosis: Diagnosis::CN,
            cohort_tag: String::new(),
            icv: None,
        };
        assert!(Cohort::new(vec![BiomarkerSpec::free("Y")], vec![r.clone()]).is_err());
        assert!(Cohort::new(vec![BiomarkerSpec::free("X")], vec![r]).is_ok());
    }

    #[test]
    fn spec_json_shape() {
        let json = r#"[
            {"name": "MMSE", "range": [0, 30], "constraint_policy": {"fixed_range": [0, 30]},
             "direction_hint": "decreasing_with_disease"},
            {"name": "Hippocampus", "range": null, "constraint_policy": "free", "modality": "imaging"},
            {"name": "ABETA", "range": [0, 1e9], "constraint_policy": "nonnegative_asymptotes"}
        ]"#;
        let specs: Vec<BiomarkerSpec> = serde_json::from_str(json).unwrap();
        assert_eq!(specs[0].constraint_policy, ConstraintPolicy::FixedRange(0.0, 30.0));
        assert_eq!(specs[1].modality, Modality::Imaging);
        assert_eq!(specs[2].direction_hint, DirectionHint::Unknown);
    }
}
