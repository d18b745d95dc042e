//! Clinical staging from progression scores: Gaussian kernel density
//! likelihoods per diagnosis, a Bayes classifier, posterior fusion across
//! bootstrap models, and conversion of the score axis to years from AD onset.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{mean, sample_sd, Cohort, Diagnosis, MeasurementRecord, Panel};
use crate::curves::CurveParams;
use crate::error::{Error, Result};
use crate::progression::FittedModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdeDensity {
    pub samples: Vec<f64>,
    pub bandwidth: f64,
}

/// Quantile with linear interpolation between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Silverman's rule `0.9 min(SD, IQR / 1.34) n^(-1/5)`; the IQR term is
/// dropped when it is zero.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let sd = sample_sd(samples);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * (samples.len() as f64).powf(-0.2)
}

impl KdeDensity {
    pub fn new(samples: Vec<f64>, bandwidth: f64) -> Result<Self> {
        if samples.is_empty() || samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Domain("density needs at least one finite sample".into()));
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::Domain(format!("bandwidth must be positive, got {bandwidth}")));
        }
        Ok(KdeDensity { samples, bandwidth })
    }

    pub fn eval(&self, s: f64) -> f64 {
        let w = self.bandwidth;
        let norm = 1.0 / ((2.0 * PI).sqrt() * w * self.samples.len() as f64);
        norm * self
            .samples
            .iter()
            .map(|x| {
                let z = (s - x) / w;
                (-0.5 * z * z).exp()
            })
            .sum::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagingClassifier {
    pub likelihoods: BTreeMap<Diagnosis, KdeDensity>,
    pub priors: BTreeMap<Diagnosis, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub probs: BTreeMap<Diagnosis, f64>,
    /// Every likelihood vanished and the priors were returned instead.
    pub underflow: bool,
}

impl Posterior {
    pub fn prob(&self, d: Diagnosis) -> f64 {
        self.probs.get(&d).copied().unwrap_or(0.0)
    }

    /// Most probable class; ties go to the earlier stage.
    pub fn predicted(&self) -> Diagnosis {
        let mut best = (Diagnosis::Missing, f64::NEG_INFINITY);
        for (&d, &p) in &self.probs {
            if p > best.1 {
                best = (d, p);
            }
        }
        best.0
    }
}

impl StagingClassifier {
    /// One density per class with Silverman bandwidths unless `bandwidth` is
    /// given; priors follow the class sizes.
    pub fn fit(train: &BTreeMap<Diagnosis, Vec<f64>>, bandwidth: Option<f64>) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Classifier {
                class: "-".into(),
                message: "no classes given".into(),
            });
        }
        let total: usize = train.values().map(Vec::len).sum();
        let mut likelihoods = BTreeMap::new();
        let mut priors = BTreeMap::new();
        for (&d, xs) in train {
            let fail = |message: &str| Error::Classifier {
                class: d.label().to_string(),
                message: message.to_string(),
            };
            if !d.is_known() {
                return Err(fail("missing labels cannot form a class"));
            }
            if xs.len() < 2 {
                return Err(fail("needs at least two samples"));
            }
            if !(sample_sd(xs) > 0.0) {
                return Err(fail("samples have zero variance"));
            }
            let w = bandwidth.unwrap_or_else(|| silverman_bandwidth(xs));
            likelihoods.insert(d, KdeDensity::new(xs.clone(), w).map_err(|e| fail(&e.to_string()))?);
            priors.insert(d, xs.len() as f64 / total as f64);
        }
        Ok(StagingClassifier { likelihoods, priors })
    }

    pub fn posterior(&self, s: f64) -> Posterior {
        let joint: BTreeMap<Diagnosis, f64> = self
            .likelihoods
            .iter()
            .map(|(d, k)| (*d, self.priors[d] * k.eval(s)))
            .collect();
        let total: f64 = joint.values().sum();
        if total > 0.0 && total.is_finite() {
            Posterior {
                probs: joint.into_iter().map(|(d, v)| (d, v / total)).collect(),
                underflow: false,
            }
        } else {
            Posterior {
                probs: self.priors.clone(),
                underflow: true,
            }
        }
    }
}

/// Training scores per diagnosis: every labelled visit of every subject in
/// `panel` that the model places, repeated by subject multiplicity.
pub fn labelled_scores(model: &FittedModel, panel: &Panel) -> BTreeMap<Diagnosis, Vec<f64>> {
    let mut out: BTreeMap<Diagnosis, Vec<f64>> = BTreeMap::new();
    for s in &panel.subjects {
        let Some(sp) = model.subjects.get(&s.id) else { continue };
        for v in s.visits.iter().filter(|v| v.diagnosis.is_known()) {
            out.entry(v.diagnosis)
                .or_default()
                .extend(std::iter::repeat_n(sp.dps(v.age), s.multiplicity));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisitStaging {
    pub subject_id: String,
    pub visit_index: u32,
    pub age: f64,
    /// Recorded diagnosis, `Missing` when unlabelled.
    pub diagnosis: Diagnosis,
    /// Score averaged over the models that placed the subject.
    pub dps: f64,
    pub posterior: Posterior,
}

fn visits_of(records: &[MeasurementRecord]) -> Vec<(u32, f64, Diagnosis)> {
    let mut by_index: BTreeMap<u32, (f64, Diagnosis)> = BTreeMap::new();
    for r in records {
        let e = by_index.entry(r.visit_index).or_insert((r.age, Diagnosis::Missing));
        if e.1 == Diagnosis::Missing {
            e.1 = r.diagnosis;
        }
    }
    by_index.into_iter().map(|(i, (a, d))| (i, a, d)).collect()
}

/// Averages the posteriors of every (model, classifier) pair per visit of one
/// subject. Models that cannot place the subject are left out.
pub fn ensemble_posterior(
    models: &[FittedModel],
    classifiers: &[StagingClassifier],
    records: &[MeasurementRecord],
) -> Result<Vec<VisitStaging>> {
    if models.is_empty() || models.len() != classifiers.len() {
        return Err(Error::Staging("need one classifier per model and at least one model".into()));
    }
    let who = records.first().map(|r| r.subject_id.clone()).unwrap_or_default();
    let visits = visits_of(records);
    let mut sums: Vec<BTreeMap<Diagnosis, f64>> = vec![BTreeMap::new(); visits.len()];
    let mut dps = vec![0.0; visits.len()];
    let mut underflow = vec![false; visits.len()];
    let mut used = 0usize;
    for (model, clf) in models.iter().zip(classifiers) {
        let sp = match model.estimate_subject(records) {
            Ok(sp) => sp,
            Err(e) => {
                log::warn!("subject `{who}` not placed by one bootstrap model: {e}");
                continue;
            }
        };
        used += 1;
        for (j, &(_, age, _)) in visits.iter().enumerate() {
            let s = sp.dps(age);
            let post = clf.posterior(s);
            dps[j] += s;
            underflow[j] |= post.underflow;
            for (d, p) in post.probs {
                *sums[j].entry(d).or_insert(0.0) += p;
            }
        }
    }
    if used == 0 {
        return Err(Error::Staging(format!("no bootstrap model could place subject `{who}`")));
    }
    Ok(visits
        .into_iter()
        .enumerate()
        .map(|(j, (visit_index, age, diagnosis))| {
            let total: f64 = sums[j].values().sum();
            VisitStaging {
                subject_id: who.clone(),
                visit_index,
                age,
                diagnosis,
                dps: dps[j] / used as f64,
                posterior: Posterior {
                    probs: sums[j].iter().map(|(d, p)| (*d, p / total)).collect(),
                    underflow: underflow[j],
                },
            }
        })
        .collect())
}

/// Stages every visit of every subject in `cohort`, subjects in id order.
pub fn stage_cohort(
    models: &[FittedModel],
    classifiers: &[StagingClassifier],
    cohort: &Cohort,
) -> Result<Vec<VisitStaging>> {
    let groups: Vec<Vec<MeasurementRecord>> = cohort
        .by_subject()
        .into_values()
        .map(|idx| idx.into_iter().map(|i| cohort.records[i].clone()).collect())
        .collect();
    let staged: Vec<Result<Vec<VisitStaging>>> = groups
        .par_iter()
        .map(|recs| ensemble_posterior(models, classifiers, recs))
        .collect();
    let mut out = Vec::new();
    for s in staged {
        out.extend(s?);
    }
    Ok(out)
}

/// CSV `subject_id,visit_index,dps,p_cn,p_mci,p_ad,predicted_label,underflow_flag`.
pub fn write_classification_csv<W: Write>(writer: W, rows: &[VisitStaging]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["subject_id", "visit_index", "dps", "p_cn", "p_mci", "p_ad", "predicted_label", "underflow_flag"])?;
    for r in rows {
        w.write_record([
            r.subject_id.clone(),
            r.visit_index.to_string(),
            r.dps.to_string(),
            r.posterior.prob(Diagnosis::CN).to_string(),
            r.posterior.prob(Diagnosis::MCI).to_string(),
            r.posterior.prob(Diagnosis::AD).to_string(),
            r.posterior.predicted().label().to_string(),
            (r.posterior.underflow as u8).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Years from AD conversion as `m0 + m1 * dps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeMapping {
    pub m0: f64,
    pub m1: f64,
}

impl TimeMapping {
    pub fn years(&self, dps: f64) -> f64 {
        self.m0 + self.m1 * dps
    }
}

/// Ordinary least squares of years on score.
pub fn fit_time_mapping(points: &[(f64, f64)]) -> Result<TimeMapping> {
    if points.len() < 2 {
        return Err(Error::Mapping(format!("need at least two points, got {}", points.len())));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let (mx, my) = (mean(&xs), mean(&ys));
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if !(sxx > 1e-12 * xs.iter().map(|x| x * x).sum::<f64>()) {
        return Err(Error::Mapping("scores do not vary".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let m1 = sxy / sxx;
    Ok(TimeMapping { m0: my - m1 * mx, m1 })
}

/// (score, years from first AD diagnosis) for every post-baseline visit of
/// subjects who are not AD at baseline and later receive an AD diagnosis.
pub fn conversion_points(model: &FittedModel, panel: &Panel) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for s in &panel.subjects {
        let Some(sp) = model.subjects.get(&s.id) else { continue };
        let Some(first_known) = s.visits.iter().find(|v| v.diagnosis.is_known()) else { continue };
        if first_known.diagnosis == Diagnosis::AD {
            continue;
        }
        let Some(onset) = s.visits.iter().find(|v| v.diagnosis == Diagnosis::AD) else { continue };
        for v in s.visits.iter().skip(1) {
            out.push((sp.dps(v.age), v.age - onset.age));
        }
    }
    out
}

/// Re-expresses a curve on the time axis `t = m0 + m1 * s`. For `m1 < 0` the
/// result lives on the reversed axis `-t` (flag set) so that the rate stays
/// positive.
pub fn remap_curve_to_time(p: &CurveParams, m: &TimeMapping) -> Result<(CurveParams, bool)> {
    if !(m.m1 != 0.0 && m.m1.is_finite() && m.m0.is_finite()) {
        return Err(Error::Mapping(format!("slope must be finite and nonzero, got {}", m.m1)));
    }
    let c = m.m0 + m.m1 * p.c;
    if m.m1 > 0.0 {
        Ok((CurveParams { b: p.b / m.m1, c, ..*p }, false))
    } else {
        log::warn!("time mapping decreases with score; curve returned on the reversed time axis");
        Ok((CurveParams { b: p.b / -m.m1, c: -c, ..*p }, true))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curves::LogisticKind;

    #[test]
    fn single_kernel_peak() {
        let k = KdeDensity::new(vec![0.0], 1.0).unwrap();
        assert!((k.eval(0.0) - 0.398_942_280_401_432_7).abs() < 1e-15);
        let far = k.eval(50.0);
        assert!((0.0..1e-300).contains(&far));
    }

    #[test]
    fn symmetric_samples_give_symmetric_density() {
        let k = KdeDensity::new(vec![-1.0, 1.0], 0.7).unwrap();
        for s in [0.1, 0.5, 2.0, 3.3] {
            assert_eq!(k.eval(s), k.eval(-s));
        }
    }

    #[test]
    fn silverman_with_zero_iqr_uses_sd() {
        let xs = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 10.0];
        let expected = 0.9 * sample_sd(&xs) * 8f64.powf(-0.2);
        assert!((silverman_bandwidth(&xs) - expected).abs() < 1e-15);
    }

    fn train(counts: [usize; 3]) -> BTreeMap<Diagnosis, Vec<f64>> {
        Diagnosis::CLASSES
            .iter()
            .zip(counts)
            .enumerate()
            .map(|(i, (d, n))| (*d, (0..n).map(|j| 20.0 * i as f64 + (j % 5) as f64 * 0.25).collect()))
            .collect()
    }

    #[test]
    fn priors_follow_counts() {
        let c = StagingClassifier::fit(&train([50, 30, 20]), None).unwrap();
        let p: Vec<f64> = c.priors.values().copied().collect();
        assert_eq!(p, vec![0.5, 0.3, 0.2]);
    }

    #[test]
    fn constant_class_is_rejected() {
        let mut t = train([10, 10, 10]);
        t.insert(Diagnosis::MCI, vec![3.0; 10]);
        match StagingClassifier::fit(&t, None) {
            Err(Error::Classifier { class, .. }) => assert_eq!(class, "MCI"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn separated_classes_are_confident() {
        let t = train([40, 40, 40]);
        let c = StagingClassifier::fit(&t, None).unwrap();
        for (d, xs) in &t {
            let post = c.posterior(mean(xs));
            assert!(post.prob(*d) >= 0.99, "{d:?} {:?}", post.probs);
        }
    }

    #[test]
    fn posterior_hand_example() {
        // kernels of width 1 and 1/3 at the evaluation point have densities in ratio 1:3
        let c = StagingClassifier {
            likelihoods: [
                (Diagnosis::CN, KdeDensity::new(vec![0.0], 1.0).unwrap()),
                (Diagnosis::MCI, KdeDensity::new(vec![0.0], 1.0 / 3.0).unwrap()),
            ]
            .into(),
            priors: [(Diagnosis::CN, 0.5), (Diagnosis::MCI, 0.5)].into(),
        };
        let p = c.posterior(0.0);
        assert!((p.prob(Diagnosis::CN) - 0.25).abs() < 1e-15);
        assert!((p.prob(Diagnosis::MCI) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn far_point_falls_back_to_priors() {
        let c = StagingClassifier::fit(&train([10, 20, 10]), Some(0.1)).unwrap();
        let p = c.posterior(1e6);
        assert!(p.underflow);
        assert_eq!(p.probs, c.priors);
    }

    #[test]
    fn exact_time_mapping() {
        let pts: Vec<(f64, f64)> = (0..6).map(|i| (i as f64, -5.0 + 2.0 * i as f64)).collect();
        assert_eq!(fit_time_mapping(&pts).unwrap(), TimeMapping { m0: -5.0, m1: 2.0 });
        assert!(fit_time_mapping(&[(1.0, 0.0), (1.0, 2.0)]).is_err());
    }

    #[test]
    fn remap_arithmetic_and_equality() {
        let p = CurveParams::new(LogisticKind::ModifiedStannard, 5.0, 1.0, 2.0, 1.0, 0.7);
        let m = TimeMapping { m0: 3.0, m1: 2.0 };
        let (q, flipped) = remap_curve_to_time(&p, &m).unwrap();
        assert!(!flipped);
        assert_eq!((q.b, q.c), (1.0, 5.0));
        for i in 0..100 {
            let s = -5.0 + 0.1 * i as f64;
            assert!((p.value(s) - q.value(m.years(s))).abs() <= 1e-12);
        }
        let neg = TimeMapping { m0: 1.0, m1: -0.5 };
        let (r, flipped) = remap_curve_to_time(&p, &neg).unwrap();
        assert!(flipped);
        for i in 0..100 {
            let s = -5.0 + 0.1 * i as f64;
            assert!((p.value(s) - r.value(-neg.years(s))).abs() <= 1e-12);
        }
        assert!(remap_curve_to_time(&p, &TimeMapping { m0: 0.0, m1: 0.0 }).is_err());
    }
}
