//! The fitted progression model: per-subject age to score mapping, the curve
//! of every biomarker on that score, and the standardization bookkeeping.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cohort::{mean, sample_sd, ConstraintPolicy, MeasurementRecord};
use crate::curves::{CurveParams, LogisticKind};
use crate::error::{Error, Result};
use crate::robust_loss::LossKind;
use crate::solver::{self, Bounds, Linearization, Objective, SolverOptions};

/// Linear age to disease progression score mapping of one subject.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectParams {
    /// Progression rate, score units per year.
    pub alpha: f64,
    /// Onset offset.
    pub beta: f64,
}

impl SubjectParams {
    pub const IDENTITY: SubjectParams = SubjectParams { alpha: 1.0, beta: 0.0 };

    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() || !beta.is_finite() {
            return Err(Error::Domain(format!(
                "subject parameters need finite alpha > 0 and finite beta, got ({alpha}, {beta})"
            )));
        }
        Ok(SubjectParams { alpha, beta })
    }

    #[inline]
    pub fn dps(&self, age: f64) -> f64 {
        self.alpha * age + self.beta
    }
}

pub fn compute_dps(sp: SubjectParams, age: f64) -> f64 {
    sp.dps(age)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mu_cn: f64,
    pub sigma_cn: f64,
    pub applied: bool,
}

impl Default for Standardization {
    fn default() -> Self {
        Standardization {
            mu_cn: 0.0,
            sigma_cn: 1.0,
            applied: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub bootstrap_id: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FittedModel {
    pub curve_kind: LogisticKind,
    pub loss_kind: LossKind,
    pub curves: BTreeMap<String, CurveParams>,
    /// Fixed residual scale of each biomarker.
    pub sigma: BTreeMap<String, f64>,
    pub subjects: BTreeMap<String, SubjectParams>,
    pub standardization: Standardization,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct BiomarkerEntry {
    a: f64,
    d: f64,
    b: f64,
    c: f64,
    gamma: f64,
    sigma: f64,
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    curve_kind: LogisticKind,
    loss_kind: LossKind,
    biomarkers: BTreeMap<String, BiomarkerEntry>,
    subjects: BTreeMap<String, SubjectParams>,
    standardization: Standardization,
    provenance: Provenance,
}

impl FittedModel {
    /// Number of free curve parameters for one biomarker.
    pub fn theta_size(kind: LogisticKind, policy: ConstraintPolicy) -> usize {
        let asymptotes = match policy {
            ConstraintPolicy::FixedRange(..) => 0,
            ConstraintPolicy::NonnegativeAsymptotes | ConstraintPolicy::Free => 2,
        };
        asymptotes + 2 + usize::from(kind.has_symmetry())
    }

    pub fn biomarkers(&self) -> Vec<String> {
        self.curves.keys().cloned().collect()
    }

    /// Rescales the score axis as `s' = (s - mu) / sigma`, updating subjects and
    /// curves so that every prediction is preserved.
    pub fn standardize_with(&self, mu: f64, sigma: f64) -> Result<FittedModel> {
        if self.standardization.applied {
            return Err(Error::Standardization("model is already standardized".into()));
        }
        if !(sigma > 0.0) || !sigma.is_finite() || !mu.is_finite() {
            return Err(Error::Standardization(format!(
                "need finite mu and sigma > 0, got mu = {mu}, sigma = {sigma}"
            )));
        }
        let mut out = self.clone();
        for sp in out.subjects.values_mut() {
            sp.alpha /= sigma;
            sp.beta = (sp.beta - mu) / sigma;
        }
        for p in out.curves.values_mut() {
            p.b *= sigma;
            p.c = (p.c - mu) / sigma;
        }
        out.standardization = Standardization {
            mu_cn: mu,
            sigma_cn: sigma,
            applied: true,
        };
        Ok(out)
    }

    /// Standardizes against the scores of cognitively normal visits.
    pub fn standardize(&self, cn_dps: &[f64]) -> Result<FittedModel> {
        if cn_dps.len() < 2 {
            return Err(Error::Standardization(format!(
                "{} cognitively normal scores, at least 2 required",
                cn_dps.len()
            )));
        }
        let sd = sample_sd(cn_dps);
        if !(sd > 0.0) {
            return Err(Error::Standardization(
                "cognitively normal scores have zero variance".into(),
            ));
        }
        self.standardize_with(mean(cn_dps), sd)
    }

    /// Predictions at each age. `None` predicts every biomarker of the model;
    /// an explicit list must only name known biomarkers.
    pub fn predict_biomarkers(
        &self,
        sp: SubjectParams,
        ages: &[f64],
        biomarkers: Option<&[String]>,
    ) -> Result<BTreeMap<String, Vec<f64>>> {
        let names: Vec<&String> = match biomarkers {
            None => self.curves.keys().collect(),
            Some(list) => list.iter().collect(),
        };
        let mut out = BTreeMap::new();
        for name in names {
            let curve = self
                .curves
                .get(name)
                .ok_or_else(|| Error::UnknownBiomarker(name.clone()))?;
            let values = ages
                .iter()
                .map(|&t| curve.evaluate(sp.dps(t)))
                .collect::<Result<Vec<_>>>()?;
            out.insert(name.clone(), values);
        }
        Ok(out)
    }

    /// Median of the training subjects' rates, or 1 for a model without subjects.
    pub(crate) fn median_alpha(&self) -> f64 {
        let a: Vec<f64> = self.subjects.values().map(|s| s.alpha).collect();
        if a.is_empty() {
            1.0
        } else {
            median(&a)
        }
    }

    /// Fits the rate and onset of a subject not seen during training, keeping
    /// the curves fixed. Biomarkers missing from the model are ignored.
    pub fn estimate_subject(&self, records: &[MeasurementRecord]) -> Result<SubjectParams> {
        Ok(self.estimate_subject_detailed(records)?.params)
    }

    pub(crate) fn estimate_subject_detailed(&self, records: &[MeasurementRecord]) -> Result<SubjectEstimate> {
        let observed: Vec<&MeasurementRecord> = records.iter().filter(|r| r.value.is_some()).collect();
        let usable: Vec<(f64, &str, f64)> = observed
            .iter()
            .filter(|r| self.curves.contains_key(&r.biomarker))
            .map(|r| (r.age, r.biomarker.as_str(), r.value.unwrap()))
            .collect();
        let who = records.first().map(|r| r.subject_id.as_str()).unwrap_or("?");
        if !observed.is_empty() && usable.is_empty() {
            return Err(Error::IncompatibleModel(format!(
                "subject `{who}` has no measurements of the model's biomarkers"
            )));
        }
        if usable.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "subject `{who}` has {} usable measurements, at least 2 required",
                usable.len()
            )));
        }
        let problem = SubjectProblem::new(
            usable.iter().map(|&(t, k, y)| (t, y, self.curves[k], self.sigma[k])),
            self.loss_kind,
            1.0 / usable.len() as f64,
        )
        .with_score_bounds(informative_span(self.curves.values()));
        let mut starts = vec![problem.centered_start(self.median_inflection(), 1.0)];
        let alpha_med = self.median_alpha();
        starts.extend(problem.grid_starts(self.curves.values(), 1.0));
        if alpha_med != 1.0 {
            starts.extend(problem.grid_starts(self.curves.values(), alpha_med));
        }
        problem
            .solve(&starts, SolverOptions { grad_tol: 1e-10, max_steps: 500, f_tol: 0.0 })
            .map_err(|m| Error::Fit {
                target: format!("subject `{who}`"),
                iteration: 0,
                message: m,
            })
    }

    pub(crate) fn median_inflection(&self) -> f64 {
        let c: Vec<f64> = self.curves.values().map(|p| p.c).collect();
        if c.is_empty() {
            0.0
        } else {
            median(&c)
        }
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = File::create(path)?;
        f.write_all(self.to_json()?.as_bytes())?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<FittedModel> {
        let doc: ModelDocument = serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?;
        FittedModel::try_from(doc)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(&ModelDocument::from(self))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<FittedModel> {
        FittedModel::try_from(serde_json::from_str::<ModelDocument>(s)?)
    }
}

impl From<&FittedModel> for ModelDocument {
    fn from(m: &FittedModel) -> Self {
        ModelDocument {
            curve_kind: m.curve_kind,
            loss_kind: m.loss_kind,
            biomarkers: m
                .curves
                .iter()
                .map(|(k, p)| {
                    let entry = BiomarkerEntry {
                        a: p.a,
                        d: p.d,
                        b: p.b,
                        c: p.c,
                        gamma: p.gamma,
                        sigma: m.sigma.get(k).copied().unwrap_or(1.0),
                    };
                    (k.clone(), entry)
                })
                .collect(),
            subjects: m.subjects.clone(),
            standardization: m.standardization,
            provenance: m.provenance,
        }
    }
}

impl TryFrom<ModelDocument> for FittedModel {
    type Error = Error;

    fn try_from(doc: ModelDocument) -> Result<Self> {
        let mut curves = BTreeMap::new();
        let mut sigma = BTreeMap::new();
        for (k, e) in doc.biomarkers {
            let p = CurveParams::new(doc.curve_kind, e.a, e.d, e.b, e.c, e.gamma);
            p.validate()?;
            if !(e.sigma > 0.0) {
                return Err(Error::Domain(format!("biomarker `{k}`: sigma must be positive")));
            }
            curves.insert(k.clone(), p);
            sigma.insert(k, e.sigma);
        }
        for (id, sp) in &doc.subjects {
            SubjectParams::new(sp.alpha, sp.beta)
                .map_err(|e| Error::Domain(format!("subject `{id}`: {e}")))?;
        }
        Ok(FittedModel {
            curve_kind: doc.curve_kind,
            loss_kind: doc.loss_kind,
            curves,
            sigma,
            subjects: doc.subjects,
            standardization: doc.standardization,
            provenance: doc.provenance,
        })
    }
}

/// `sum_k (N_k - |theta_k|) - 2 I`.
pub fn degrees_of_freedom(counts: &[usize], theta_sizes: &[usize], n_subjects: usize) -> i64 {
    counts
        .iter()
        .zip(theta_sizes)
        .map(|(&n, &p)| n as i64 - p as i64)
        .sum::<i64>()
        - 2 * n_subjects as i64
}

pub(crate) fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Unit-sigmoid level below which (or above one minus which) a curve counts as flat.
pub const FLAT_LEVEL: f64 = 0.01;

/// Scores outside this interval leave every curve within `FLAT_LEVEL` of an
/// asymptote, so data there cannot place a subject.
pub fn informative_span<'a>(curves: impl IntoIterator<Item = &'a CurveParams>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in curves {
        lo = lo.min(p.unit_quantile(FLAT_LEVEL));
        hi = hi.max(p.unit_quantile(1.0 - FLAT_LEVEL));
    }
    if lo < hi {
        (lo, hi)
    } else {
        (f64::NEG_INFINITY, f64::INFINITY)
    }
}

const LN_ALPHA_MIN: f64 = -16.0;
const LN_ALPHA_MAX: f64 = 16.0;

#[derive(Clone, Copy, Debug)]
pub(crate) struct SubjectEstimate {
    pub params: SubjectParams,
    /// Rate driven to its lower limit, as happens for flat series, or score
    /// pinned to the edge of the informative span.
    pub degenerate: bool,
}

struct SubjectPoint {
    t: f64,
    y: f64,
    curve: CurveParams,
    inv_sigma: f64,
}

/// Robust objective of one subject with all curves fixed. Internally the
/// variables are `(ln alpha, s_ref)` where `s_ref` is the score at the mean
/// age of the subject's measurements; this keeps the two coordinates nearly
/// uncorrelated.
pub(crate) struct SubjectProblem {
    points: Vec<SubjectPoint>,
    loss: LossKind,
    weight: f64,
    t_ref: f64,
    score_bounds: (f64, f64),
}

impl SubjectProblem {
    pub fn new(
        points: impl IntoIterator<Item = (f64, f64, CurveParams, f64)>,
        loss: LossKind,
        weight: f64,
    ) -> Self {
        let points: Vec<SubjectPoint> = points
            .into_iter()
            .map(|(t, y, curve, sigma)| SubjectPoint {
                t,
                y,
                curve,
                inv_sigma: 1.0 / sigma,
            })
            .collect();
        let t_ref = points.iter().map(|p| p.t).sum::<f64>() / points.len().max(1) as f64;
        SubjectProblem {
            points,
            loss,
            weight,
            t_ref,
            score_bounds: (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    /// Confines the score at the subject's mean age to `[lo, hi]`.
    pub fn with_score_bounds(mut self, (lo, hi): (f64, f64)) -> Self {
        self.score_bounds = (lo, hi);
        self
    }

    fn to_internal(&self, sp: SubjectParams) -> [f64; 2] {
        [
            sp.alpha.ln().clamp(LN_ALPHA_MIN, LN_ALPHA_MAX),
            sp.dps(self.t_ref),
        ]
    }

    fn to_params(&self, x: &[f64]) -> SubjectParams {
        let alpha = x[0].exp();
        SubjectParams {
            alpha,
            beta: x[1] - alpha * self.t_ref,
        }
    }

    /// Start that places the subject's mean age at score `s_ref`.
    pub fn centered_start(&self, s_ref: f64, alpha: f64) -> SubjectParams {
        SubjectParams {
            alpha,
            beta: s_ref - alpha * self.t_ref,
        }
    }

    /// Starts spread along the span covered by the curves.
    pub fn grid_starts<'a>(&self, curves: impl Iterator<Item = &'a CurveParams>, alpha: f64) -> Vec<SubjectParams> {
        let mut out = Vec::new();
        for p in curves {
            for m in [-6.0, -3.0, -1.0, 0.0, 1.0, 3.0, 6.0] {
                out.push(self.centered_start(p.c + m / p.b, alpha));
            }
        }
        out
    }

    /// Picks the best of `starts` by objective value, then refines it.
    pub fn solve(&self, starts: &[SubjectParams], opts: SolverOptions) -> std::result::Result<SubjectEstimate, String> {
        let mut best: Option<([f64; 2], f64)> = None;
        let (s_lo, s_hi) = self.score_bounds;
        for &sp in starts {
            let mut x = self.to_internal(sp);
            x[1] = x[1].clamp(s_lo, s_hi);
            let v = self.value(&x);
            if v.is_finite() && best.is_none_or(|(_, bv)| v < bv) {
                best = Some((x, v));
            }
        }
        let (x0, _) = best.ok_or_else(|| "objective is not finite at any start".to_string())?;
        let bounds = Bounds {
            lower: vec![LN_ALPHA_MIN, s_lo],
            upper: vec![LN_ALPHA_MAX, s_hi],
        };
        let rep = solver::minimize(self, &x0, &bounds, opts).map_err(|e| e.0)?;
        Ok(SubjectEstimate {
            params: self.to_params(&rep.x),
            degenerate: rep.x[0] <= LN_ALPHA_MIN + 1e-9 || rep.x[1] <= s_lo || rep.x[1] >= s_hi,
        })
    }
}

impl Objective for SubjectProblem {
    fn dim(&self) -> usize {
        2
    }

    fn value(&self, x: &[f64]) -> f64 {
        let alpha = x[0].exp();
        let mut total = 0.0;
        for p in &self.points {
            let s = alpha * (p.t - self.t_ref) + x[1];
            let u = (p.y - p.curve.value(s)) * p.inv_sigma;
            total += self.loss.rho_unchecked(u);
        }
        self.weight * total
    }

    fn linearize(&self, x: &[f64]) -> Linearization {
        let alpha = x[0].exp();
        let mut value = 0.0;
        let mut g = [0.0; 2];
        let mut h = [0.0; 4];
        for p in &self.points {
            let dt = p.t - self.t_ref;
            let s = alpha * dt + x[1];
            let sh = p.curve.shape(s);
            let span = p.curve.a - p.curve.d;
            let f = span * sh.g + p.curve.d;
            let u = (p.y - f) * p.inv_sigma;
            // du/dx = -f'(s) / sigma * ds/dx
            let fs = span * sh.ds * p.inv_sigma;
            let j = [-fs * alpha * dt, -fs];
            let psi = self.loss.psi_unchecked(u);
            let w = self.loss.weight_unchecked(u);
            value += self.loss.rho_unchecked(u);
            for a in 0..2 {
                g[a] += psi * j[a];
                for b in 0..2 {
                    h[a * 2 + b] += w * j[a] * j[b];
                }
            }
        }
        Linearization {
            value: self.weight * value,
            gradient: g.iter().map(|v| v * self.weight).collect(),
            hessian: h.iter().map(|v| v * self.weight).collect(),
        }
    }
}
