use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use chrono::Datelike;

use super::{mean, sample_sd, Cohort, Diagnosis, Modality};
use crate::error::{Error, Result};

pub const DEFAULT_MATCH_WINDOW_DAYS: f64 = 92.0;
const DAYS_PER_YEAR: f64 = 365.25;

/// Counts of values set to missing, keyed by (biomarker, rule).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RejectionReport {
    pub counts: BTreeMap<(String, String), usize>,
}

impl RejectionReport {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["biomarker", "rule", "count"])?;
        for ((b, rule), n) in &self.counts {
            w.write_record([b.as_str(), rule.as_str(), &n.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Marks values outside the declared range, and imaging volumes larger than
/// the intracranial volume, as missing.
pub fn reject_out_of_range(c: &Cohort) -> (Cohort, RejectionReport) {
    let mut out = c.clone();
    let mut report = RejectionReport::default();
    for r in &mut out.records {
        let Some(v) = r.value else { continue };
        let Some(spec) = c.spec(&r.biomarker) else { continue };
        let rule = if !spec.in_range(v) {
            Some("out_of_range")
        } else if spec.modality == Modality::Imaging && r.icv.is_some_and(|icv| v / icv > 1.0) {
            Some("exceeds_icv")
        } else {
            None
        };
        if let Some(rule) = rule {
            r.value = None;
            *report.counts.entry((r.biomarker.clone(), rule.to_string())).or_default() += 1;
        }
    }
    (out, report)
}

/// Visit positions of the longest non-decreasing subsequence of `stages`,
/// choosing the lexicographically smallest positions among maximal ones so
/// that later visits are the ones dropped.
pub(crate) fn monotone_keep(stages: &[usize]) -> Vec<usize> {
    let n = stages.len();
    let mut len_from = vec![1usize; n];
    for i in (0..n).rev() {
        for j in i + 1..n {
            if stages[j] >= stages[i] {
                len_from[i] = len_from[i].max(1 + len_from[j]);
            }
        }
    }
    let Some(&best) = len_from.iter().max() else {
        return Vec::new();
    };
    let mut keep = Vec::with_capacity(best);
    let mut need = best;
    let mut floor = 0;
    let mut start = 0;
    while need > 0 {
        let i = (start..n)
            .find(|&i| stages[i] >= floor && len_from[i] == need)
            .expect("a continuation of the required length exists");
        keep.push(i);
        floor = stages[i];
        start = i + 1;
        need -= 1;
    }
    keep
}

/// Clears the diagnosis of visits that break the CN -> MCI -> AD ordering,
/// removing as few labels as possible. Measurements are kept.
pub fn remove_reverting_diagnoses(c: &Cohort) -> Cohort {
    let mut out = c.clone();
    for idx in c.by_subject().values() {
        // visit_index -> (first record position, diagnosis)
        let mut visits: Vec<(u32, Diagnosis)> = Vec::new();
        for &i in idx {
            let r = &c.records[i];
            match visits.iter_mut().find(|(v, _)| *v == r.visit_index) {
                Some(entry) => {
                    if !entry.1.is_known() {
                        entry.1 = r.diagnosis;
                    }
                }
                None => visits.push((r.visit_index, r.diagnosis)),
            }
        }
        let labelled: Vec<(u32, usize)> = visits
            .iter()
            .filter_map(|(v, d)| d.stage().map(|s| (*v, s)))
            .collect();
        let stages: Vec<usize> = labelled.iter().map(|(_, s)| *s).collect();
        let keep: BTreeSet<usize> = monotone_keep(&stages).into_iter().collect();
        let dropped: BTreeSet<u32> = labelled
            .iter()
            .enumerate()
            .filter(|(pos, _)| !keep.contains(pos))
            .map(|(_, (v, _))| *v)
            .collect();
        for &i in idx {
            if dropped.contains(&out.records[i].visit_index) {
                out.records[i].diagnosis = Diagnosis::Missing;
            }
        }
    }
    out
}

/// Attaches imaging and fluid measurements taken outside a cognitive visit to
/// the nearest cognitive visit within `window_days`. Equidistant candidates go
/// to the earlier visit. Anything left unmatched keeps its own visit with a
/// missing diagnosis.
pub fn match_visits(c: &Cohort, window_days: f64) -> Cohort {
    let mut out = c.clone();
    let is_cognitive =
        |name: &str| c.spec(name).map(|s| s.modality == Modality::Cognitive).unwrap_or(true);

    for idx in c.by_subject().values() {
        let use_dates = idx.iter().all(|&i| c.records[i].visit_date.is_some());
        let day = |i: usize| {
            let r = &c.records[i];
            match (use_dates, r.visit_date) {
                (true, Some(d)) => d.num_days_from_ce() as f64,
                _ => r.age * DAYS_PER_YEAR,
            }
        };

        let cognitive_visits: BTreeSet<u32> = idx
            .iter()
            .filter(|&&i| is_cognitive(&c.records[i].biomarker))
            .map(|&i| c.records[i].visit_index)
            .collect();
        // visit -> (anchor record, day, biomarkers present)
        let mut anchors: BTreeMap<u32, (usize, f64, BTreeSet<&str>)> = BTreeMap::new();
        for &i in idx {
            let r = &c.records[i];
            if cognitive_visits.contains(&r.visit_index) {
                let e = anchors.entry(r.visit_index).or_insert((i, day(i), BTreeSet::new()));
                e.2.insert(r.biomarker.as_str());
            }
        }

        let mut candidates: Vec<(u32, &str, f64, f64, usize)> = Vec::new();
        let mut orphans: Vec<usize> = Vec::new();
        for &i in idx {
            let r = &c.records[i];
            if cognitive_visits.contains(&r.visit_index) {
                continue;
            }
            let d = day(i);
            let nearest = anchors
                .iter()
                .map(|(v, (_, ad, _))| (*v, (ad - d).abs(), *ad))
                .min_by(|x, y| x.1.total_cmp(&y.1).then(x.2.total_cmp(&y.2)).then(x.0.cmp(&y.0)));
            match nearest {
                Some((v, dist, _)) if dist <= window_days => {
                    candidates.push((v, r.biomarker.as_str(), dist, d, i))
                }
                _ => orphans.push(i),
            }
        }
        candidates.sort_by(|x, y| {
            x.0.cmp(&y.0)
                .then(x.1.cmp(y.1))
                .then(x.2.total_cmp(&y.2))
                .then(x.3.total_cmp(&y.3))
                .then(x.4.cmp(&y.4))
        });
        let mut taken: BTreeSet<(u32, &str)> = BTreeSet::new();
        for (v, name, _, _, i) in candidates {
            let (anchor, _, present) = &anchors[&v];
            if present.contains(name) || !taken.insert((v, name)) {
                orphans.push(i);
                continue;
            }
            let a = &c.records[*anchor];
            let r = &mut out.records[i];
            r.visit_index = a.visit_index;
            r.age = a.age;
            r.visit_date = a.visit_date;
            r.diagnosis = a.diagnosis;
        }
        for i in orphans {
            out.records[i].diagnosis = Diagnosis::Missing;
        }
    }
    out
}

/// Removes subjects with fewer than two distinct visits carrying a measurement.
pub fn drop_sparse_subjects(c: &Cohort) -> Cohort {
    let mut visits: BTreeMap<&str, BTreeSet<u32>> = BTreeMap::new();
    for r in c.records.iter().filter(|r| r.value.is_some()) {
        visits.entry(r.subject_id.as_str()).or_default().insert(r.visit_index);
    }
    let keep: BTreeSet<&str> = visits
        .into_iter()
        .filter(|(_, v)| v.len() >= 2)
        .map(|(s, _)| s)
        .collect();
    Cohort {
        specs: c.specs.clone(),
        records: c
            .records
            .iter()
            .filter(|r| keep.contains(r.subject_id.as_str()))
            .cloned()
            .collect(),
    }
}

/// Replaces volumetric values with residuals of a control-group regression on
/// intracranial volume, per (biomarker, cohort tag), then z-scores the
/// residuals within that stratum.
pub fn ancova_residuals(c: &Cohort, volumetric: &[String]) -> Result<Cohort> {
    let mut out = c.clone();
    for name in volumetric {
        if c.spec(name).is_none() {
            return Err(Error::UnknownBiomarker(name.clone()));
        }
        let mut strata: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in c.records.iter().enumerate() {
            if &r.biomarker == name && r.value.is_some() {
                strata.entry(r.cohort_tag.as_str()).or_default().push(i);
            }
        }
        for (tag, idx) in strata {
            let stratum = format!("{name}/{tag}");
            if let Some(&i) = idx.iter().find(|&&i| c.records[i].icv.is_none()) {
                return Err(Error::Preprocess {
                    stratum,
                    message: format!(
                        "subject `{}` visit {} has no intracranial volume",
                        c.records[i].subject_id, c.records[i].visit_index
                    ),
                });
            }
            let (icv, roi): (Vec<f64>, Vec<f64>) = idx
                .iter()
                .map(|&i| &c.records[i])
                .filter(|r| r.diagnosis == Diagnosis::CN)
                .map(|r| (r.icv.unwrap(), r.value.unwrap()))
                .unzip();
            if icv.len() < 3 {
                return Err(Error::Preprocess {
                    stratum,
                    message: format!("{} cognitively normal records, at least 3 required", icv.len()),
                });
            }
            let (mx, my) = (mean(&icv), mean(&roi));
            let sxx: f64 = icv.iter().map(|x| (x - mx) * (x - mx)).sum();
            let scale: f64 = icv.iter().map(|x| x * x).sum();
            let (intercept, slope) = if sxx <= 1e-12 * scale {
                (my, 0.0)
            } else {
                let sxy: f64 = icv.iter().zip(&roi).map(|(x, y)| (x - mx) * (y - my)).sum();
                let slope = sxy / sxx;
                (my - slope * mx, slope)
            };

            let resid: Vec<f64> = idx
                .iter()
                .map(|&i| {
                    let r = &c.records[i];
                    r.value.unwrap() - (intercept + slope * r.icv.unwrap())
                })
                .collect();
            let m = mean(&resid);
            let sd = sample_sd(&resid);
            if !(sd > 0.0) {
                return Err(Error::Preprocess {
                    stratum,
                    message: "residuals have zero spread and cannot be standardized".into(),
                });
            }
            for (&i, r) in idx.iter().zip(&resid) {
                out.records[i].value = Some((r - m) / sd);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{BiomarkerSpec, ConstraintPolicy, DirectionHint, MeasurementRecord};
    use chrono::NaiveDate;

    fn spec(name: &str, range: Option<[f64; 2]>, modality: Modality) -> BiomarkerSpec {
        BiomarkerSpec {
            name: name.into(),
            range,
            constraint_policy: ConstraintPolicy::Free,
            direction_hint: DirectionHint::Unknown,
            modality,
        }
    }

    fn rec(subject: &str, visit: u32, age: f64, biomarker: &str, value: f64, dx: Diagnosis) -> MeasurementRecord {
        MeasurementRecord {
            subject_id: subject.into(),
            visit_index: visit,
            age,
            visit_date: None,
            biomarker: biomarker.into(),
            value: Some(value),
            diagnosis: dx,
            cohort_tag: "t".into(),
            icv: None,
        }
    }

    /// Brute-force minimal removal: try every subset, keep monotone ones of
    /// maximal size, prefer the lexicographically smallest kept positions.
    fn brute_keep(stages: &[usize]) -> Vec<usize> {
        let n = stages.len();
        let mut best: Option<Vec<usize>> = None;
        for mask in 0u32..(1 << n) {
            let kept: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            if kept.windows(2).any(|w| stages[w[1]] < stages[w[0]]) {
                continue;
            }
            best = match best {
                None => Some(kept),
                Some(b) if kept.len() > b.len() || (kept.len() == b.len() && kept < b) => Some(kept),
                keep => keep,
            };
        }
        best.unwrap_or_default()
    }

    #[test]
    fn monotone_keep_matches_enumeration() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let n = rng.random_range(0..10);
            let stages: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            assert_eq!(monotone_keep(&stages), brute_keep(&stages), "{stages:?}");
        }
    }

    #[test]
    fn reverting_third_visit_removed() {
        use Diagnosis::*;
        let dx = [CN, MCI, CN, MCI, AD];
        let records: Vec<_> = dx
            .iter()
            .enumerate()
            .map(|(i, d)| rec("s", i as u32, 70.0 + i as f64, "X", 1.0, *d))
            .collect();
        let c = Cohort::new(vec![spec("X", None, Modality::Cognitive)], records).unwrap();
        let out = remove_reverting_diagnoses(&c);
        let got: Vec<Diagnosis> = out.records.iter().map(|r| r.diagnosis).collect();
        assert_eq!(got, vec![CN, MCI, Missing, MCI, AD]);
        assert_eq!(remove_reverting_diagnoses(&out), out);
        assert!(out.records.iter().all(|r| r.value.is_some()));
    }

    #[test]
    fn monotone_and_single_visit_unchanged() {
        use Diagnosis::*;
        let records: Vec<_> = [CN, CN, MCI, AD]
            .iter()
            .enumerate()
            .map(|(i, d)| rec("s", i as u32, 70.0 + i as f64, "X", 1.0, *d))
            .chain(std::iter::once(rec("t", 0, 60.0, "X", 2.0, AD)))
            .collect();
        let c = Cohort::new(vec![spec("X", None, Modality::Cognitive)], records).unwrap();
        assert_eq!(remove_reverting_diagnoses(&c), c);
    }

    #[test]
    fn range_rejection() {
        let mut mri = rec("s", 0, 70.0, "Hippo", 1.2e6, Diagnosis::CN);
        mri.icv = Some(1.0e6);
        let c = Cohort::new(
            vec![
                spec("RAVLT", Some([0.0, 75.0]), Modality::Cognitive),
                spec("Hippo", None, Modality::Imaging),
            ],
            vec![rec("s", 0, 70.0, "RAVLT", -2.0, Diagnosis::CN), mri, rec("s", 1, 71.0, "RAVLT", 40.0, Diagnosis::CN)],
        )
        .unwrap();
        let (out, report) = reject_out_of_range(&c);
        assert_eq!(out.records[0].value, None);
        assert_eq!(out.records[1].value, None);
        assert_eq!(out.records[2].value, Some(40.0));
        assert_eq!(report.counts[&("RAVLT".to_string(), "out_of_range".to_string())], 1);
        assert_eq!(report.counts[&("Hippo".to_string(), "exceeds_icv".to_string())], 1);
        let (again, second) = reject_out_of_range(&out);
        assert_eq!(again, out);
        assert_eq!(second.total(), 0);

        let clean = Cohort::new(
            vec![spec("RAVLT", Some([0.0, 75.0]), Modality::Cognitive)],
            vec![rec("s", 0, 70.0, "RAVLT", 3.0, Diagnosis::CN)],
        )
        .unwrap();
        assert_eq!(reject_out_of_range(&clean).0, clean);
    }

    fn dated(subject: &str, visit: u32, date: (i32, u32, u32), biomarker: &str, dx: Diagnosis) -> MeasurementRecord {
        let mut r = rec(subject, visit, 70.0 + visit as f64 * 0.1, biomarker, 1.0, dx);
        r.visit_date = NaiveDate::from_ymd_opt(date.0, date.1, date.2);
        r
    }

    fn matching_cohort(records: Vec<MeasurementRecord>) -> Cohort {
        Cohort::new(
            vec![spec("MMSE", None, Modality::Cognitive), spec("Hippo", None, Modality::Imaging)],
            records,
        )
        .unwrap()
    }

    #[test]
    fn matching_within_window() {
        let c = matching_cohort(vec![
            dated("s", 0, (2010, 1, 1), "MMSE", Diagnosis::MCI),
            dated("s", 1, (2010, 1, 31), "Hippo", Diagnosis::Missing),
        ]);
        let out = match_visits(&c, DEFAULT_MATCH_WINDOW_DAYS);
        assert_eq!(out.records[1].visit_index, 0);
        assert_eq!(out.records[1].diagnosis, Diagnosis::MCI);
        assert_eq!(out.records[1].age, out.records[0].age);
        assert_eq!(match_visits(&out, DEFAULT_MATCH_WINDOW_DAYS), out);
    }

    #[test]
    fn matching_beyond_window_keeps_own_visit() {
        let c = matching_cohort(vec![
            dated("s", 0, (2010, 1, 1), "MMSE", Diagnosis::MCI),
            dated("s", 1, (2010, 5, 1), "Hippo", Diagnosis::AD),
        ]);
        let out = match_visits(&c, DEFAULT_MATCH_WINDOW_DAYS);
        assert_eq!(out.records[1].visit_index, 1);
        assert_eq!(out.records[1].diagnosis, Diagnosis::Missing);
        assert_eq!(match_visits(&out, DEFAULT_MATCH_WINDOW_DAYS), out);
    }

    #[test]
    fn matching_tie_goes_to_earlier_visit() {
        let c = matching_cohort(vec![
            dated("s", 0, (2010, 1, 1), "MMSE", Diagnosis::CN),
            dated("s", 1, (2010, 3, 2), "MMSE", Diagnosis::MCI),
            dated("s", 2, (2010, 1, 31), "Hippo", Diagnosis::Missing),
        ]);
        // Jan 1 -> Jan 31 and Jan 31 -> Mar 2 are both 30 days
        let out = match_visits(&c, DEFAULT_MATCH_WINDOW_DAYS);
        assert_eq!(out.records[2].visit_index, 0);
        assert_eq!(out.records[2].diagnosis, Diagnosis::CN);
    }

    #[test]
    fn sparse_subjects() {
        let c = Cohort::new(
            vec![spec("A", None, Modality::Cognitive), spec("B", None, Modality::Cognitive), spec("C", None, Modality::Cognitive)],
            vec![
                rec("one", 0, 70.0, "A", 1.0, Diagnosis::CN),
                rec("one", 0, 70.0, "B", 1.0, Diagnosis::CN),
                rec("one", 0, 70.0, "C", 1.0, Diagnosis::CN),
                rec("two", 0, 70.0, "A", 1.0, Diagnosis::CN),
                rec("two", 1, 71.0, "B", 1.0, Diagnosis::CN),
            ],
        )
        .unwrap();
        let out = drop_sparse_subjects(&c);
        assert_eq!(out.subject_ids(), vec!["two".to_string()]);
        assert_eq!(drop_sparse_subjects(&out), out);
        let empty = Cohort::default();
        assert_eq!(drop_sparse_subjects(&empty), empty);
    }

    fn volume_cohort(points: &[(f64, f64, Diagnosis)]) -> Cohort {
        let records = points
            .iter()
            .enumerate()
            .map(|(i, &(icv, roi, dx))| {
                let mut r = rec(&format!("s{i}"), 0, 70.0, "Hippo", roi, dx);
                r.icv = Some(icv);
                r
            })
            .collect();
        Cohort::new(vec![spec("Hippo", None, Modality::Imaging)], records).unwrap()
    }

    #[test]
    fn ancova_exact_control_fit() {
        use Diagnosis::*;
        let pts: Vec<(f64, f64, Diagnosis)> = vec![
            (10.0, 2.0 + 0.5 * 10.0, CN),
            (12.0, 2.0 + 0.5 * 12.0, CN),
            (15.0, 2.0 + 0.5 * 15.0, CN),
            (11.0, 6.0, AD),
            (14.0, 7.0, MCI),
        ];
        let c = volume_cohort(&pts);
        let out = ancova_residuals(&c, &["Hippo".into()]).unwrap();
        // raw residuals: 0,0,0 for controls; 6-7.5=-1.5, 7-9=-2 for the others
        let raw = [0.0, 0.0, 0.0, -1.5, -2.0];
        let m = mean(&raw);
        let sd = sample_sd(&raw);
        for (r, expected) in out.records.iter().zip(raw) {
            assert!((r.value.unwrap() - (expected - m) / sd).abs() < 1e-12);
        }
        let z: Vec<f64> = out.records.iter().map(|r| r.value.unwrap()).collect();
        assert!(mean(&z).abs() < 1e-10);
        assert!((sample_sd(&z).powi(2) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn ancova_constant_icv_falls_back_to_intercept() {
        use Diagnosis::*;
        let c = volume_cohort(&[(10.0, 1.0, CN), (10.0, 2.0, CN), (10.0, 3.0, CN), (10.0, 0.0, AD)]);
        let out = ancova_residuals(&c, &["Hippo".into()]).unwrap();
        let raw = [-1.0, 0.0, 1.0, -2.0];
        let (m, sd) = (mean(&raw), sample_sd(&raw));
        for (r, expected) in out.records.iter().zip(raw) {
            assert!((r.value.unwrap() - (expected - m) / sd).abs() < 1e-12);
        }
    }

    #[test]
    fn ancova_controls_orthogonal_to_icv() {
        use Diagnosis::*;
        let c = volume_cohort(&[
            (1400.0, 7.1, CN),
            (1550.0, 7.4, CN),
            (1600.0, 7.2, CN),
            (1480.0, 7.9, CN),
            (1500.0, 6.0, AD),
        ]);
        let out = ancova_residuals(&c, &["Hippo".into()]).unwrap();
        let cn: Vec<(f64, f64)> = out
            .records
            .iter()
            .filter(|r| r.diagnosis == CN)
            .map(|r| (r.icv.unwrap(), r.value.unwrap()))
            .collect();
        let mx = cn.iter().map(|p| p.0).sum::<f64>() / cn.len() as f64;
        let dot: f64 = cn.iter().map(|(x, y)| (x - mx) * y).sum();
        assert!(dot.abs() < 1e-8, "{dot}");
    }

    #[test]
    fn ancova_needs_three_controls() {
        use Diagnosis::*;
        let c = volume_cohort(&[(10.0, 1.0, CN), (11.0, 2.0, CN), (12.0, 0.0, AD)]);
        match ancova_residuals(&c, &["Hippo".into()]) {
            Err(Error::Preprocess { stratum, .. }) => assert_eq!(stratum, "Hippo/t"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
