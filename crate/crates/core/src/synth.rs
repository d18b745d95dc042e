//! Synthetic cohorts drawn from a known progression model.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::cohort::{
    sample_sd, BiomarkerSpec, Cohort, ConstraintPolicy, Diagnosis, DirectionHint, MeasurementRecord, Modality,
};
use crate::curves::{CurveParams, LogisticKind};
use crate::error::{Error, Result};
use crate::progression::{FittedModel, Provenance, Standardization, SubjectParams};
use crate::robust_loss::LossKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthBiomarker {
    pub name: String,
    pub a: f64,
    pub d: f64,
    pub b: f64,
    pub c: f64,
    #[serde(default = "one")]
    pub gamma: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise_sd: f64,
    /// Pin the asymptotes to `[min(a, d), max(a, d)]` in the emitted spec.
    #[serde(default)]
    pub fixed_range: bool,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitSchedule {
    pub count: usize,
    /// Years between consecutive visits.
    pub interval: f64,
    /// Follow-up visits are shifted uniformly within `±jitter` years.
    pub jitter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub curve_kind: LogisticKind,
    pub biomarkers: Vec<SynthBiomarker>,
    /// Log-scale SD of the rate; its median is 1.
    pub alpha_log_sd: f64,
    pub beta_mean: f64,
    pub beta_sd: f64,
    pub baseline_age_mean: f64,
    pub baseline_age_sd: f64,
    pub visits: VisitSchedule,
    pub missing_rate: f64,
    /// Score cut points: below the first is CN, below the second MCI, else AD.
    pub thresholds: [f64; 2],
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let marker = |name: &str, a: f64, d: f64, b: f64, c: f64, gamma: f64, fixed_range: bool| SynthBiomarker {
            name: name.into(),
            a,
            d,
            b,
            c,
            gamma,
            noise_sd: 0.05 * (a - d).abs(),
            fixed_range,
        };
        SynthSpec {
            n_subjects: 100,
            curve_kind: LogisticKind::ModifiedStannard,
            biomarkers: vec![
                marker("ABETA", 150.0, 250.0, 0.3, -9.0, 0.6, false),
                marker("TAU", 120.0, 40.0, 0.35, -4.0, 1.6, false),
                marker("FDG", 1.0, 1.4, 0.55, 0.0, 2.5, false),
                marker("HIPPO", 5.0, 8.0, 0.4, 2.0, 0.8, false),
                marker("CDRSB", 18.0, 0.0, 0.5, 4.0, 1.2, true),
                marker("MMSE", 0.0, 30.0, 0.45, 6.0, 3.0, true),
            ],
            alpha_log_sd: 0.1,
            beta_mean: -74.0,
            beta_sd: 3.0,
            baseline_age_mean: 70.0,
            baseline_age_sd: 3.0,
            visits: VisitSchedule {
                count: 8,
                interval: 1.0,
                jitter: 0.1,
            },
            missing_rate: 0.0,
            thresholds: [-2.0, 4.0],
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.thresholds[0] > self.thresholds[1] {
            return bad("diagnosis thresholds must be ordered".into());
        }
        if !(0.0..=1.0).contains(&self.missing_rate) {
            return bad(format!("missing rate {} outside [0, 1]", self.missing_rate));
        }
        if self.alpha_log_sd < 0.0 || self.beta_sd < 0.0 || self.baseline_age_sd < 0.0 {
            return bad("distribution spreads must be nonnegative".into());
        }
        if self.visits.count == 0 || self.visits.interval <= 0.0 || self.visits.jitter < 0.0 {
            return bad("visit schedule needs at least one visit and a positive interval".into());
        }
        for m in &self.biomarkers {
            if m.noise_sd < 0.0 {
                return bad(format!("biomarker `{}`: negative noise", m.name));
            }
            self.curve(m).validate()?;
        }
        Ok(())
    }

    fn curve(&self, m: &SynthBiomarker) -> CurveParams {
        let gamma = if self.curve_kind.has_symmetry() { m.gamma } else { 1.0 };
        CurveParams::new(self.curve_kind, m.a, m.d, m.b, m.c, gamma)
    }

    pub fn specs(&self) -> Vec<BiomarkerSpec> {
        self.biomarkers
            .iter()
            .map(|m| {
                let (lo, hi) = (m.a.min(m.d), m.a.max(m.d));
                BiomarkerSpec {
                    name: m.name.clone(),
                    range: None,
                    constraint_policy: if m.fixed_range {
                        ConstraintPolicy::FixedRange(lo, hi)
                    } else {
                        ConstraintPolicy::Free
                    },
                    direction_hint: if m.a > m.d {
                        DirectionHint::IncreasingWithDisease
                    } else {
                        DirectionHint::DecreasingWithDisease
                    },
                    modality: Modality::Cognitive,
                }
            })
            .collect()
    }

    pub fn diagnosis_at(&self, dps: f64) -> Diagnosis {
        if dps < self.thresholds[0] {
            Diagnosis::CN
        } else if dps < self.thresholds[1] {
            Diagnosis::MCI
        } else {
            Diagnosis::AD
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SynthSpec> {
        let spec: SynthSpec = serde_json::from_reader(File::open(path)?)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Draws a cohort and returns it with the generating model. The model's
/// `sigma` holds the sample SD of each biomarker's generated values, matching
/// what a fit on the same data would use.
pub fn generate(spec: &SynthSpec) -> Result<(Cohort, FittedModel)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let alpha_dist = LogNormal::new(0.0, spec.alpha_log_sd).map_err(|e| Error::Config(e.to_string()))?;
    let beta_dist = Normal::new(spec.beta_mean, spec.beta_sd).map_err(|e| Error::Config(e.to_string()))?;
    let age_dist =
        Normal::new(spec.baseline_age_mean, spec.baseline_age_sd).map_err(|e| Error::Config(e.to_string()))?;
    let eps = Normal::new(0.0, 1.0).expect("unit normal");
    let curves: Vec<CurveParams> = spec.biomarkers.iter().map(|m| spec.curve(m)).collect();
    let width = (spec.n_subjects.max(1) - 1).to_string().len();

    let mut records = Vec::new();
    let mut subjects = BTreeMap::new();
    for i in 0..spec.n_subjects {
        let id = format!("S{i:0width$}");
        let sp = SubjectParams {
            alpha: alpha_dist.sample(&mut rng),
            beta: beta_dist.sample(&mut rng),
        };
        let baseline = age_dist.sample(&mut rng);
        for j in 0..spec.visits.count {
            let jitter = if j == 0 || spec.visits.jitter == 0.0 {
                0.0
            } else {
                rng.random_range(-spec.visits.jitter..=spec.visits.jitter)
            };
            let age = baseline + j as f64 * spec.visits.interval + jitter;
            let dps = sp.dps(age);
            let diagnosis = spec.diagnosis_at(dps);
            for (m, p) in spec.biomarkers.iter().zip(&curves) {
                let noise = eps.sample(&mut rng);
                let missing = spec.missing_rate > 0.0 && rng.random::<f64>() < spec.missing_rate;
                if missing {
                    continue;
                }
                records.push(MeasurementRecord {
                    subject_id: id.clone(),
                    visit_index: j as u32,
                    age,
                    visit_date: None,
                    biomarker: m.name.clone(),
                    value: Some(p.value(dps) + m.noise_sd * noise),
                    diagnosis,
                    cohort_tag: "synth".into(),
                    icv: None,
                });
            }
        }
        subjects.insert(id, sp);
    }
    let cohort = Cohort::new(spec.specs(), records)?;

    let mut sigma = BTreeMap::new();
    for m in &spec.biomarkers {
        let v: Vec<f64> = cohort
            .records
            .iter()
            .filter(|r| r.biomarker == m.name)
            .filter_map(|r| r.value)
            .collect();
        let sd = sample_sd(&v);
        sigma.insert(m.name.clone(), if sd > 0.0 { sd } else { 1.0 });
    }
    let truth = FittedModel {
        curve_kind: spec.curve_kind,
        loss_kind: LossKind::L2,
        curves: spec.biomarkers.iter().map(|m| m.name.clone()).zip(curves).collect(),
        sigma,
        subjects,
        standardization: Standardization::default(),
        provenance: Provenance {
            seed: Some(spec.seed),
            bootstrap_id: None,
        },
    };
    Ok((cohort, truth))
}

/// Location of one measurement.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub subject_id: String,
    pub visit_index: u32,
    pub biomarker: String,
}

/// Replaces `round(fraction * n)` of the `n` observed values, chosen uniformly,
/// with draws uniform over `magnitude` times the biomarker's observed range
/// centred on the range midpoint. Returns the corrupted cohort and the cells hit.
pub fn inject_outliers(c: &Cohort, fraction: f64, magnitude: f64, seed: u64) -> Result<(Cohort, Vec<CellKey>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("outlier fraction {fraction} outside [0, 1]")));
    }
    let observed: Vec<usize> = (0..c.records.len()).filter(|&i| c.records[i].value.is_some()).collect();
    let mut ranges: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for &i in &observed {
        let r = &c.records[i];
        let v = r.value.unwrap();
        let e = ranges.entry(r.biomarker.as_str()).or_insert((v, v));
        e.0 = e.0.min(v);
        e.1 = e.1.max(v);
    }
    let n_hit = (fraction * observed.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = index::sample(&mut rng, observed.len(), n_hit).into_iter().map(|k| observed[k]).collect();
    chosen.sort_unstable();

    let mut out = c.clone();
    let mut cells = Vec::with_capacity(n_hit);
    for i in chosen {
        let r = &c.records[i];
        let (lo, hi) = ranges[r.biomarker.as_str()];
        let mid = 0.5 * (lo + hi);
        let half = 0.5 * magnitude * (hi - lo);
        let v = if half > 0.0 {
            rng.random_range(mid - half..=mid + half)
        } else {
            mid
        };
        out.records[i].value = Some(v);
        cells.push(CellKey {
            subject_id: r.subject_id.clone(),
            visit_index: r.visit_index,
            biomarker: r.biomarker.clone(),
        });
    }
    Ok((out, cells))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(noise: f64) -> SynthSpec {
        let mut s = SynthSpec {
            n_subjects: 12,
            ..SynthSpec::default()
        };
        for m in &mut s.biomarkers {
            m.noise_sd = noise * (m.a - m.d).abs();
        }
        s
    }

    #[test]
    fn noiseless_values_lie_on_curves() {
        let (c, truth) = generate(&small(0.0)).unwrap();
        for r in &c.records {
            let s = truth.subjects[&r.subject_id].dps(r.age);
            assert_eq!(r.value.unwrap(), truth.curves[&r.biomarker].value(s));
        }
    }

    #[test]
    fn same_seed_same_cohort() {
        let s = small(0.05);
        assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
        let mut other = s.clone();
        other.seed = 1;
        assert_ne!(generate(&s).unwrap().0, generate(&other).unwrap().0);
    }

    #[test]
    fn diagnosis_bands_are_monotone() {
        let (c, truth) = generate(&small(0.05)).unwrap();
        let spec = small(0.05);
        for r in &c.records {
            let s = truth.subjects[&r.subject_id].dps(r.age);
            assert_eq!(r.diagnosis, spec.diagnosis_at(s));
        }
    }

    #[test]
    fn outlier_counts() {
        let (c, _) = generate(&small(0.05)).unwrap();
        let n = c.observed_count();
        let (same, none) = inject_outliers(&c, 0.0, 5.0, 1).unwrap();
        assert!(none.is_empty());
        assert_eq!(same, c);
        let (all, every) = inject_outliers(&c, 1.0, 5.0, 1).unwrap();
        assert_eq!(every.len(), n);
        assert!(all.records.iter().zip(&c.records).all(|(x, y)| x.value != y.value));
        let (_, some) = inject_outliers(&c, 0.1, 5.0, 1).unwrap();
        assert_eq!(some.len(), (0.1 * n as f64).round() as usize);
    }
}
