//! Alternating robust fit of curves and subject mappings.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{
    mean, sample_sd, BiomarkerSpec, Cohort, ConstraintPolicy, Diagnosis, DirectionHint, Panel, SubjectSeries,
};
use crate::curves::{CurveParams, LogisticKind, GAMMA_MAX, GAMMA_MIN};
use crate::error::{Error, Result};
use crate::progression::{
    degrees_of_freedom, informative_span, FittedModel, Provenance, Standardization, SubjectParams, SubjectProblem,
};
use crate::robust_loss::LossKind;
use crate::solver::{self, Bounds, Linearization, Objective, SolverOptions};

const B_MIN: f64 = 1e-10;
const OMEGA_INIT: f64 = 1.0;
const OMEGA_GROWTH: f64 = 1.5;
const OMEGA_MAX: f64 = 16.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub curve_kind: LogisticKind,
    pub loss_kind: LossKind,
    pub l_min: usize,
    pub l_max: usize,
    /// Gradient-norm tolerance of every inner solve.
    pub inner_solver_tol: f64,
    pub inner_max_steps: usize,
    /// After each iteration, try stepping further along the last update and
    /// keep the result only when it lowers the training objective.
    pub extrapolate: bool,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            curve_kind: LogisticKind::ModifiedStannard,
            loss_kind: LossKind::Logistic,
            l_min: 10,
            l_max: 50,
            inner_solver_tol: 1e-8,
            inner_max_steps: 200,
            extrapolate: true,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l_min < 1 || self.l_min > self.l_max {
            return Err(Error::Config(format!(
                "need 1 <= l_min <= l_max, got l_min = {}, l_max = {}",
                self.l_min, self.l_max
            )));
        }
        if !(self.inner_solver_tol > 0.0) || self.inner_max_steps == 0 {
            return Err(Error::Config("inner solver tolerance and step budget must be positive".into()));
        }
        Ok(())
    }

    fn solver(&self) -> SolverOptions {
        SolverOptions {
            grad_tol: self.inner_solver_tol,
            max_steps: self.inner_max_steps,
            f_tol: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLoss {
    pub iteration: usize,
    pub e_train: f64,
    pub e_valid: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub iterations: Vec<IterationLoss>,
    pub l_opt: usize,
    pub e_train_at_opt: f64,
    /// Training subjects whose rate collapsed at the selected iteration.
    pub degenerate_subjects: Vec<String>,
    /// Training subjects left out for having fewer than two measurements.
    pub skipped_subjects: Vec<String>,
    pub standardization_skipped: bool,
}

impl FitTrace {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["iteration", "E_train", "E_valid"])?;
        for it in &self.iterations {
            w.write_record([it.iteration.to_string(), it.e_train.to_string(), it.e_valid.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Curves and subject mappings at one point of the alternation.
#[derive(Clone, Debug, PartialEq)]
pub struct FitState {
    pub curves: BTreeMap<String, CurveParams>,
    pub subjects: BTreeMap<String, SubjectParams>,
}

/// Per-biomarker constraint data shared by every step.
#[derive(Clone, Debug)]
struct BiomarkerSetup {
    name: String,
    policy: ConstraintPolicy,
    sigma: f64,
}

fn policy_of<'a>(specs: &'a [BiomarkerSpec], name: &str) -> Result<&'a BiomarkerSpec> {
    specs
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::UnknownBiomarker(name.to_string()))
}

/// Starting point: every subject on its own age axis and one sigmoid per
/// biomarker spanning the observed range, oriented by the control versus
/// dementia means.
pub fn initialize(panel: &Panel, specs: &[BiomarkerSpec], config: &FitConfig) -> Result<FitState> {
    let ages: Vec<f64> = panel
        .subjects
        .iter()
        .flat_map(|s| s.visits.iter().filter(|v| v.values.iter().any(Option::is_some)).map(|v| v.age))
        .collect();
    let c0 = if ages.is_empty() { 0.0 } else { mean(&ages) };
    let mut curves = BTreeMap::new();
    for (k, name) in panel.biomarkers.iter().enumerate() {
        let spec = policy_of(specs, name)?;
        let mut all = Vec::new();
        let (mut cn, mut ad) = (Vec::new(), Vec::new());
        for s in &panel.subjects {
            for v in &s.visits {
                if let Some(y) = v.values[k] {
                    all.push(y);
                    match v.diagnosis {
                        Diagnosis::CN => cn.push(y),
                        Diagnosis::AD => ad.push(y),
                        _ => {}
                    }
                }
            }
        }
        let init_err = |message: String| Error::Initialization {
            biomarker: name.clone(),
            message,
        };
        let increasing = if !cn.is_empty() && !ad.is_empty() {
            mean(&cn) < mean(&ad)
        } else {
            match spec.direction_hint {
                DirectionHint::IncreasingWithDisease => true,
                DirectionHint::DecreasingWithDisease => false,
                DirectionHint::Unknown => {
                    return Err(init_err(
                        "no control or no dementia visits and no direction hint".into(),
                    ))
                }
            }
        };
        let (lo, hi) = match spec.constraint_policy {
            ConstraintPolicy::FixedRange(x, y) => (x.min(y), x.max(y)),
            _ => {
                if all.is_empty() {
                    return Err(init_err("no observed values".into()));
                }
                let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            }
        };
        if !(hi > lo) {
            return Err(init_err(format!("observed values are constant ({lo})")));
        }
        let (a, d) = if increasing { (hi, lo) } else { (lo, hi) };
        let lambda = if increasing { 1.0 } else { -1.0 };
        let b = 4.0 * lambda / (a - d);
        curves.insert(name.clone(), CurveParams::new(config.curve_kind, a, d, b, c0, 1.0));
    }
    let subjects = panel
        .subjects
        .iter()
        .map(|s| (s.id.clone(), SubjectParams::IDENTITY))
        .collect();
    Ok(FitState { curves, subjects })
}

/// Fixed residual scales: the sample SD of each biomarker's training values.
fn biomarker_setup(panel: &Panel, specs: &[BiomarkerSpec]) -> Result<Vec<BiomarkerSetup>> {
    panel
        .biomarkers
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let spec = policy_of(specs, name)?;
            let values = panel.values_of(k);
            let sigma = sample_sd(&values);
            if !(sigma > 0.0) {
                return Err(Error::InsufficientData(format!(
                    "biomarker `{name}` needs at least two distinct training values"
                )));
            }
            Ok(BiomarkerSetup {
                name: name.clone(),
                policy: spec.constraint_policy,
                sigma,
            })
        })
        .collect()
}

/// `sum_i m_i / N_i * sum_{j,k} rho((y - f(s_ij; theta_k)) / sigma_k)`, where
/// `m_i` is the subject multiplicity. Subjects without parameters are skipped.
pub fn objective(
    curves: &BTreeMap<String, CurveParams>,
    subjects: &BTreeMap<String, SubjectParams>,
    sigma: &BTreeMap<String, f64>,
    panel: &Panel,
    loss: LossKind,
) -> f64 {
    let cols: Vec<Option<(CurveParams, f64)>> = panel
        .biomarkers
        .iter()
        .map(|b| curves.get(b).map(|p| (*p, sigma[b])))
        .collect();
    let per_subject: Vec<f64> = panel
        .subjects
        .iter()
        .map(|s| {
            let Some(sp) = subjects.get(&s.id) else { return 0.0 };
            let mut n = 0usize;
            let mut total = 0.0;
            for v in &s.visits {
                let dps = sp.dps(v.age);
                for (k, y) in v.values.iter().enumerate() {
                    if let (Some(y), Some((p, sd))) = (y, cols[k]) {
                        n += 1;
                        total += loss.rho_unchecked((y - p.value(dps)) / sd);
                    }
                }
            }
            if n == 0 {
                0.0
            } else {
                s.multiplicity as f64 * total / n as f64
            }
        })
        .collect();
    per_subject.iter().sum()
}

/// One biomarker's robust regression with subject scores fixed.
struct CurveProblem<'a> {
    base: CurveParams,
    /// Indices into `[a, d, b, c, gamma]` that are optimized.
    free: Vec<usize>,
    /// `(score, value, weight)`.
    points: &'a [(f64, f64, f64)],
    inv_sigma: f64,
    loss: LossKind,
}

impl CurveProblem<'_> {
    fn params(&self, x: &[f64]) -> CurveParams {
        let mut full = [self.base.a, self.base.d, self.base.b, self.base.c, self.base.gamma];
        for (v, &i) in x.iter().zip(&self.free) {
            full[i] = *v;
        }
        CurveParams::new(self.base.kind, full[0], full[1], full[2], full[3], full[4])
    }

    fn pack(&self, p: &CurveParams) -> Vec<f64> {
        let full = [p.a, p.d, p.b, p.c, p.gamma];
        self.free.iter().map(|&i| full[i]).collect()
    }
}

impl Objective for CurveProblem<'_> {
    fn dim(&self) -> usize {
        self.free.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let p = self.params(x);
        self.points
            .iter()
            .map(|&(s, y, w)| w * self.loss.rho_unchecked((y - p.value(s)) * self.inv_sigma))
            .sum()
    }

    fn linearize(&self, x: &[f64]) -> Linearization {
        let p = self.params(x);
        let n = self.free.len();
        let mut value = 0.0;
        let mut g = vec![0.0; n];
        let mut h = vec![0.0; n * n];
        let mut j = vec![0.0; n];
        for &(s, y, w) in self.points {
            let full = p.param_gradient_unchecked(s);
            let u = (y - p.value(s)) * self.inv_sigma;
            for (jj, &i) in j.iter_mut().zip(&self.free) {
                *jj = -full[i] * self.inv_sigma;
            }
            value += w * self.loss.rho_unchecked(u);
            let psi = w * self.loss.psi_unchecked(u);
            let wt = w * self.loss.weight_unchecked(u);
            for a in 0..n {
                g[a] += psi * j[a];
                let ja = wt * j[a];
                for b in 0..=a {
                    h[a * n + b] += ja * j[b];
                }
            }
        }
        for a in 0..n {
            for b in 0..a {
                h[b * n + a] = h[a * n + b];
            }
        }
        Linearization {
            value,
            gradient: g,
            hessian: h,
        }
    }
}

fn curve_layout(kind: LogisticKind, policy: ConstraintPolicy) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let mut free = Vec::new();
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    match policy {
        ConstraintPolicy::FixedRange(..) => {}
        ConstraintPolicy::NonnegativeAsymptotes => {
            free.extend([0, 1]);
            lower.extend([0.0, 0.0]);
            upper.extend([f64::INFINITY; 2]);
        }
        ConstraintPolicy::Free => {
            free.extend([0, 1]);
            lower.extend([f64::NEG_INFINITY; 2]);
            upper.extend([f64::INFINITY; 2]);
        }
    }
    free.extend([2, 3]);
    lower.extend([B_MIN, f64::NEG_INFINITY]);
    upper.extend([f64::INFINITY, f64::INFINITY]);
    if kind.has_symmetry() {
        free.push(4);
        lower.push(GAMMA_MIN);
        upper.push(GAMMA_MAX);
    }
    (free, lower, upper)
}

/// Observations of biomarker `k` as `(score, value, weight)` under `subjects`.
fn curve_points(panel: &Panel, k: usize, subjects: &BTreeMap<String, SubjectParams>, n_points: &[usize]) -> Vec<(f64, f64, f64)> {
    let mut out = Vec::new();
    for (s, &n) in panel.subjects.iter().zip(n_points) {
        let Some(sp) = subjects.get(&s.id) else { continue };
        let w = s.multiplicity as f64 / n as f64;
        for v in &s.visits {
            if let Some(y) = v.values[k] {
                out.push((sp.dps(v.age), y, w));
            }
        }
    }
    out
}

fn fit_biomarker_step_inner(
    state: &FitState,
    panel: &Panel,
    setup: &[BiomarkerSetup],
    config: &FitConfig,
    iteration: usize,
) -> Result<BTreeMap<String, CurveParams>> {
    let n_points: Vec<usize> = panel.subjects.iter().map(SubjectSeries::n_points).collect();
    let fitted: Vec<Result<(String, CurveParams)>> = setup
        .par_iter()
        .enumerate()
        .map(|(k, bs)| {
            let points = curve_points(panel, k, &state.subjects, &n_points);
            let base = state.curves[&bs.name];
            let (free, lower, upper) = curve_layout(base.kind, bs.policy);
            let problem = CurveProblem {
                base,
                free,
                points: &points,
                inv_sigma: 1.0 / bs.sigma,
                loss: config.loss_kind,
            };
            let x0 = problem.pack(&base);
            let rep = solver::minimize(&problem, &x0, &Bounds { lower, upper }, config.solver()).map_err(|e| {
                Error::Fit {
                    target: format!("biomarker `{}`", bs.name),
                    iteration,
                    message: e.0,
                }
            })?;
            Ok((bs.name.clone(), problem.params(&rep.x)))
        })
        .collect();
    fitted.into_iter().collect()
}

/// Refits every curve with subject scores held at `state.subjects`.
pub fn fit_biomarker_step(
    state: &FitState,
    panel: &Panel,
    specs: &[BiomarkerSpec],
    config: &FitConfig,
) -> Result<BTreeMap<String, CurveParams>> {
    let setup = biomarker_setup(panel, specs)?;
    fit_biomarker_step_inner(state, panel, &setup, config, 0)
}

struct SubjectStepOutcome {
    params: BTreeMap<String, SubjectParams>,
    degenerate: Vec<String>,
}

fn fit_subjects(
    curves: &BTreeMap<String, CurveParams>,
    previous: &BTreeMap<String, SubjectParams>,
    panel: &Panel,
    sigma: &BTreeMap<String, f64>,
    config: &FitConfig,
    iteration: usize,
) -> Result<SubjectStepOutcome> {
    let cols: Vec<Option<(CurveParams, f64)>> = panel
        .biomarkers
        .iter()
        .map(|b| curves.get(b).map(|p| (*p, sigma[b])))
        .collect();
    let center = {
        let c: Vec<f64> = curves.values().map(|p| p.c).collect();
        crate::progression::median(&c)
    };
    let span = informative_span(curves.values());
    let results: Vec<Result<Option<(String, SubjectParams, bool)>>> = panel
        .subjects
        .par_iter()
        .map(|s| {
            let pts: Vec<(f64, f64, CurveParams, f64)> = s
                .visits
                .iter()
                .flat_map(|v| {
                    v.values
                        .iter()
                        .zip(&cols)
                        .filter_map(move |(y, col)| match (y, col) {
                            (Some(y), Some((p, sd))) => Some((v.age, *y, *p, *sd)),
                            _ => None,
                        })
                })
                .collect();
            if pts.len() < 2 {
                return Ok(None);
            }
            let n = pts.len();
            let problem =
                SubjectProblem::new(pts, config.loss_kind, s.multiplicity as f64 / n as f64).with_score_bounds(span);
            let mut starts = Vec::new();
            match previous.get(&s.id) {
                Some(sp) => starts.push(*sp),
                None => starts.push(problem.centered_start(center, 1.0)),
            }
            let est = problem.solve(&starts, config.solver()).map_err(|m| Error::Fit {
                target: format!("subject `{}`", s.id),
                iteration,
                message: m,
            })?;
            Ok(Some((s.id.clone(), est.params, est.degenerate)))
        })
        .collect();
    let mut out = SubjectStepOutcome {
        params: BTreeMap::new(),
        degenerate: Vec::new(),
    };
    for r in results {
        if let Some((id, sp, degenerate)) = r? {
            if degenerate {
                out.degenerate.push(id.clone());
            }
            out.params.insert(id, sp);
        }
    }
    Ok(out)
}

/// Refits every subject mapping with curves held at `state.curves`.
pub fn fit_subject_step(
    state: &FitState,
    panel: &Panel,
    specs: &[BiomarkerSpec],
    config: &FitConfig,
) -> Result<BTreeMap<String, SubjectParams>> {
    let setup = biomarker_setup(panel, specs)?;
    let sigma = setup.iter().map(|b| (b.name.clone(), b.sigma)).collect();
    Ok(fit_subjects(&state.curves, &state.subjects, panel, &sigma, config, 0)?.params)
}

fn check_degrees_of_freedom(panel: &Panel, setup: &[BiomarkerSetup], kind: LogisticKind) -> Result<()> {
    let counts = panel.counts_per_biomarker();
    let theta: Vec<usize> = setup.iter().map(|b| FittedModel::theta_size(kind, b.policy)).collect();
    let n_subjects = panel.subjects.len();
    if degrees_of_freedom(&counts, &theta, n_subjects) <= 0 {
        return Err(Error::DegreesOfFreedom {
            points: counts.iter().sum(),
            threshold: theta.iter().sum::<usize>() + 2 * n_subjects,
        });
    }
    Ok(())
}

/// Fits on `train`, selecting the iteration with the lowest validation loss.
pub fn fit(train: &Cohort, valid: &Cohort, config: &FitConfig) -> Result<(FittedModel, FitTrace)> {
    fit_panel(
        &Panel::from_cohort(train),
        &Panel::from_cohort(valid),
        &train.specs,
        config,
    )
}

/// As [`fit`], on dense panels; training multiplicities weight each subject.
pub fn fit_panel(
    train: &Panel,
    valid: &Panel,
    specs: &[BiomarkerSpec],
    config: &FitConfig,
) -> Result<(FittedModel, FitTrace)> {
    config.validate()?;
    let init = initialize(train, specs, config)?;
    fit_from(train, valid, specs, config, init)
}

/// As [`fit_panel`], from a caller-supplied starting state.
pub fn fit_from(
    train: &Panel,
    valid: &Panel,
    specs: &[BiomarkerSpec],
    config: &FitConfig,
    init: FitState,
) -> Result<(FittedModel, FitTrace)> {
    config.validate()?;
    if valid.subjects.is_empty() {
        return Err(Error::InsufficientData("validation set is empty".into()));
    }
    let setup = biomarker_setup(train, specs)?;
    check_degrees_of_freedom(train, &setup, config.curve_kind)?;
    let sigma: BTreeMap<String, f64> = setup.iter().map(|b| (b.name.clone(), b.sigma)).collect();

    let mut trace = FitTrace::default();
    let mut state = init;
    for s in &train.subjects {
        if s.n_points() < 2 {
            log::warn!("subject `{}` has fewer than two measurements and is skipped", s.id);
            trace.skipped_subjects.push(s.id.clone());
            state.subjects.remove(&s.id);
        }
    }
    let mut valid_params: BTreeMap<String, SubjectParams> = BTreeMap::new();
    let mut best: Option<(usize, f64, f64, FitState, Vec<String>)> = None;
    let mean_ages: BTreeMap<String, f64> = train.subjects.iter().map(|s| (s.id.clone(), s.mean_age())).collect();
    let mut omega = OMEGA_INIT;

    for l in 1..=config.l_max {
        let curves = fit_biomarker_step_inner(&state, train, &setup, config, l)?;
        let step = fit_subjects(&curves, &state.subjects, train, &sigma, config, l)?;
        let previous = std::mem::replace(
            &mut state,
            FitState {
                curves,
                subjects: step.params,
            },
        );
        let mut e_train = objective(&state.curves, &state.subjects, &sigma, train, config.loss_kind);
        if config.extrapolate && l > 1 {
            let jumped = extrapolate(&previous, &state, omega, &setup, &mean_ages)
                .map(|s| (objective(&s.curves, &s.subjects, &sigma, train, config.loss_kind), s));
            match jumped {
                Some((e, s)) if e < e_train => {
                    state = s;
                    e_train = e;
                    omega = (omega * OMEGA_GROWTH).min(OMEGA_MAX);
                }
                _ => omega = OMEGA_INIT,
            }
        }

        valid_params = fit_subjects(&state.curves, &valid_params, valid, &sigma, config, l)?.params;
        let e_valid = objective(&state.curves, &valid_params, &sigma, valid, config.loss_kind);
        log::info!("iteration {l}: E_train = {e_train:.6}, E_valid = {e_valid:.6}");
        trace.iterations.push(IterationLoss {
            iteration: l,
            e_train,
            e_valid,
        });
        if l >= config.l_min && best.as_ref().is_none_or(|b| e_valid < b.1) {
            best = Some((l, e_valid, e_train, state.clone(), step.degenerate));
        }
    }

    let (l_opt, _, e_train_opt, chosen, degenerate) = best.expect("l_max >= l_min >= 1");
    trace.l_opt = l_opt;
    trace.e_train_at_opt = e_train_opt;
    trace.degenerate_subjects = degenerate;
    for id in &trace.degenerate_subjects {
        log::warn!("subject `{id}` has a collapsed progression rate (flat series)");
    }

    let model = FittedModel {
        curve_kind: config.curve_kind,
        loss_kind: config.loss_kind,
        curves: chosen.curves,
        sigma,
        subjects: chosen.subjects,
        standardization: Standardization::default(),
        provenance: Provenance {
            seed: Some(config.seed),
            bootstrap_id: None,
        },
    };
    let placed = Panel {
        subjects: train
            .subjects
            .iter()
            .filter(|s| !trace.degenerate_subjects.contains(&s.id))
            .cloned()
            .collect(),
        ..train.clone()
    };
    let cn_dps = control_scores(&model, &placed);
    let model = if cn_dps.len() < 2 {
        log::warn!("fewer than two cognitively normal visits; standardization skipped");
        trace.standardization_skipped = true;
        model
    } else {
        model.standardize(&cn_dps)?
    };
    Ok((model, trace))
}

/// `current + omega * (current - previous)` in the solver coordinates: log
/// scale for `b`, `gamma` and `alpha`, and each subject's score at its mean age.
/// `None` when the move would flip a curve or leave the feasible box.
fn extrapolate(
    previous: &FitState,
    current: &FitState,
    omega: f64,
    setup: &[BiomarkerSetup],
    mean_ages: &BTreeMap<String, f64>,
) -> Option<FitState> {
    let mut out = current.clone();
    for bs in setup {
        let (Some(p), Some(c)) = (previous.curves.get(&bs.name), out.curves.get_mut(&bs.name)) else {
            continue;
        };
        let (free, lower, upper) = curve_layout(c.kind, bs.policy);
        let mut v = [c.a, c.d, c.b.ln(), c.c, c.gamma.ln()];
        let o = [p.a, p.d, p.b.ln(), p.c, p.gamma.ln()];
        for &i in &free {
            v[i] += omega * (v[i] - o[i]);
        }
        let (b, gamma) = (v[2].exp(), v[4].exp());
        let next = CurveParams::new(c.kind, v[0], v[1], b, v[3], gamma);
        let packed = [next.a, next.d, next.b, next.c, next.gamma];
        let inside = free
            .iter()
            .zip(lower.iter().zip(&upper))
            .all(|(&i, (lo, hi))| packed[i] >= *lo && packed[i] <= *hi && packed[i].is_finite());
        if !inside || (next.a - next.d) * (c.a - c.d) <= 0.0 {
            return None;
        }
        *c = next;
    }
    for (id, sp) in out.subjects.iter_mut() {
        let (Some(p), Some(&t)) = (previous.subjects.get(id), mean_ages.get(id)) else {
            continue;
        };
        let ln_alpha = sp.alpha.ln() + omega * (sp.alpha.ln() - p.alpha.ln());
        let score = sp.dps(t) + omega * (sp.dps(t) - p.dps(t));
        let alpha = ln_alpha.exp();
        if !(alpha > 0.0 && alpha.is_finite() && score.is_finite()) {
            return None;
        }
        *sp = SubjectParams {
            alpha,
            beta: score - alpha * t,
        };
    }
    Some(out)
}

/// Scores of all cognitively normal visits, repeated by multiplicity.
pub fn control_scores(model: &FittedModel, panel: &Panel) -> Vec<f64> {
    let mut out = Vec::new();
    for s in &panel.subjects {
        let Some(sp) = model.subjects.get(&s.id) else { continue };
        for v in s.visits.iter().filter(|v| v.diagnosis == Diagnosis::CN) {
            out.extend(std::iter::repeat_n(sp.dps(v.age), s.multiplicity));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{Modality, Visit};

    fn spec(name: &str, policy: ConstraintPolicy) -> BiomarkerSpec {
        BiomarkerSpec {
            name: name.into(),
            range: None,
            constraint_policy: policy,
            direction_hint: DirectionHint::Unknown,
            modality: Modality::Cognitive,
        }
    }

    fn panel(rows: &[(&str, f64, Diagnosis, Vec<Option<f64>>)], names: &[&str]) -> Panel {
        let mut subjects: Vec<SubjectSeries> = Vec::new();
        for (i, (id, age, dx, vals)) in rows.iter().enumerate() {
            let visit = Visit {
                index: i as u32,
                age: *age,
                diagnosis: *dx,
                values: vals.clone(),
            };
            match subjects.iter_mut().find(|s| s.id == *id) {
                Some(s) => s.visits.push(visit),
                None => subjects.push(SubjectSeries {
                    id: id.to_string(),
                    multiplicity: 1,
                    visits: vec![visit],
                }),
            }
        }
        Panel {
            biomarkers: names.iter().map(|s| s.to_string()).collect(),
            subjects,
        }
    }

    #[test]
    fn initialization_orientation() {
        use Diagnosis::*;
        let p = panel(
            &[
                ("a", 70.0, CN, vec![Some(29.0), Some(1.0)]),
                ("a", 71.0, CN, vec![Some(29.0), Some(2.0)]),
                ("b", 75.0, AD, vec![Some(21.0), Some(9.0)]),
                ("b", 76.0, AD, vec![Some(21.0), Some(10.0)]),
            ],
            &["MMSE", "CDRSB"],
        );
        let specs = vec![
            spec("MMSE", ConstraintPolicy::FixedRange(0.0, 30.0)),
            spec("CDRSB", ConstraintPolicy::FixedRange(0.0, 18.0)),
        ];
        let st = initialize(&p, &specs, &FitConfig::default()).unwrap();
        let m = st.curves["MMSE"];
        assert_eq!((m.a, m.d), (0.0, 30.0));
        assert!((m.b - 4.0 / 30.0).abs() < 1e-15);
        // inflection at the mean visit age
        assert_eq!((m.c, m.gamma), (73.0, 1.0));
        let c = st.curves["CDRSB"];
        assert_eq!((c.a, c.d), (18.0, 0.0));
        assert!((c.b - 4.0 / 18.0).abs() < 1e-15);
        assert!(st.subjects.values().all(|s| *s == SubjectParams::IDENTITY));
    }

    #[test]
    fn initialization_needs_direction() {
        use Diagnosis::*;
        let p = panel(&[("a", 70.0, MCI, vec![Some(1.0)]), ("a", 71.0, MCI, vec![Some(2.0)])], &["X"]);
        match initialize(&p, &[spec("X", ConstraintPolicy::Free)], &FitConfig::default()) {
            Err(Error::Initialization { biomarker, .. }) => assert_eq!(biomarker, "X"),
            other => panic!("{other:?}"),
        }
        let mut hinted = spec("X", ConstraintPolicy::Free);
        hinted.direction_hint = DirectionHint::DecreasingWithDisease;
        let st = initialize(&p, &[hinted], &FitConfig::default()).unwrap();
        assert_eq!((st.curves["X"].a, st.curves["X"].d), (1.0, 2.0));
    }

    #[test]
    fn objective_arithmetic() {
        use Diagnosis::*;
        let p = panel(
            &[("a", 0.0, CN, vec![Some(1.0), Some(1.0)]), ("a", 1.0, CN, vec![Some(1.0), Some(1.0)])],
            &["X", "Y"],
        );
        let flat = CurveParams::verhulst(0.0, 0.0, 1.0, 0.0);
        let curves: BTreeMap<_, _> = [("X".to_string(), flat), ("Y".to_string(), flat)].into();
        let subjects: BTreeMap<_, _> = [("a".to_string(), SubjectParams::IDENTITY)].into();
        let sigma: BTreeMap<_, _> = [("X".to_string(), 1.0), ("Y".to_string(), 1.0)].into();
        let v = LossKind::Logistic.rho(1.0).unwrap();
        let e = objective(&curves, &subjects, &sigma, &p, LossKind::Logistic);
        assert!((e - v).abs() < 1e-15);

        let wide: BTreeMap<_, _> = [("X".to_string(), 2.0), ("Y".to_string(), 2.0)].into();
        assert!(objective(&curves, &subjects, &wide, &p, LossKind::Logistic) < e);

        let exact = CurveParams::verhulst(1.0, 1.0, 1.0, 0.0);
        let zero: BTreeMap<_, _> = [("X".to_string(), exact), ("Y".to_string(), exact)].into();
        assert_eq!(objective(&zero, &subjects, &sigma, &p, LossKind::L2), 0.0);
    }

    fn truth_panel(truth: CurveParams, subjects: &[(f64, f64)]) -> (Panel, BTreeMap<String, SubjectParams>) {
        let mut rows = Vec::new();
        let mut params = BTreeMap::new();
        let ids: Vec<String> = (0..subjects.len()).map(|i| format!("s{i:02}")).collect();
        for (i, &(alpha, beta)) in subjects.iter().enumerate() {
            let sp = SubjectParams::new(alpha, beta).unwrap();
            params.insert(ids[i].clone(), sp);
            for j in 0..4 {
                let t = 60.0 + 2.0 * j as f64;
                rows.push((ids[i].as_str(), t, Diagnosis::MCI, vec![Some(truth.value(sp.dps(t)))]));
            }
        }
        (panel(&rows, &["X"]), params)
    }

    #[test]
    fn biomarker_step_recovers_noiseless_curve() {
        let truth = CurveParams::verhulst(3.0, 1.0, 0.9, 0.4);
        let subj: Vec<(f64, f64)> = (0..12).map(|i| (1.0, -66.0 + 0.7 * i as f64)).collect();
        let (p, params) = truth_panel(truth, &subj);
        let start = CurveParams::verhulst(2.5, 0.8, 0.5, 0.0);
        let state = FitState {
            curves: [("X".to_string(), start)].into(),
            subjects: params,
        };
        let cfg = FitConfig {
            curve_kind: LogisticKind::Verhulst,
            loss_kind: LossKind::L2,
            inner_solver_tol: 1e-14,
            inner_max_steps: 2000,
            ..FitConfig::default()
        };
        let got = fit_biomarker_step(&state, &p, &[spec("X", ConstraintPolicy::Free)], &cfg).unwrap()["X"];
        for (g, t) in [(got.a, truth.a), (got.d, truth.d), (got.b, truth.b), (got.c, truth.c)] {
            assert!(((g - t) / t).abs() < 1e-6, "{got:?}");
        }
    }

    #[test]
    fn fixed_range_is_pinned() {
        let truth = CurveParams::verhulst(0.0, 30.0, 0.9, 0.4);
        let subj: Vec<(f64, f64)> = (0..6).map(|i| (1.0, -66.0 + i as f64)).collect();
        let (p, params) = truth_panel(truth, &subj);
        let state = FitState {
            curves: [("X".to_string(), CurveParams::verhulst(0.0, 30.0, 0.3, 0.0))].into(),
            subjects: params,
        };
        let cfg = FitConfig {
            curve_kind: LogisticKind::Verhulst,
            ..FitConfig::default()
        };
        let got = fit_biomarker_step(&state, &p, &[spec("X", ConstraintPolicy::FixedRange(0.0, 30.0))], &cfg).unwrap()
            ["X"];
        assert_eq!((got.a, got.d), (0.0, 30.0));
    }

    #[test]
    fn subject_step_recovers_noiseless_subjects() {
        let curves: BTreeMap<String, CurveParams> = [
            ("X".to_string(), CurveParams::verhulst(3.0, 1.0, 0.9, 0.4)),
            ("Y".to_string(), CurveParams::verhulst(-2.0, 5.0, 0.5, 2.0)),
        ]
        .into();
        let truth: BTreeMap<String, SubjectParams> = [
            ("p".to_string(), SubjectParams::new(0.8, -52.0).unwrap()),
            ("q".to_string(), SubjectParams::new(1.3, -88.0).unwrap()),
        ]
        .into();
        let mut rows = Vec::new();
        for (id, sp) in &truth {
            for j in 0..5 {
                let t = 64.0 + 1.5 * j as f64;
                let s = sp.dps(t);
                rows.push((id.as_str(), t, Diagnosis::MCI, vec![Some(curves["X"].value(s)), Some(curves["Y"].value(s))]));
            }
        }
        let p = panel(&rows, &["X", "Y"]);
        let state = FitState {
            curves,
            subjects: BTreeMap::new(),
        };
        let specs = [spec("X", ConstraintPolicy::Free), spec("Y", ConstraintPolicy::Free)];
        let cfg = FitConfig {
            inner_solver_tol: 1e-14,
            inner_max_steps: 1000,
            ..FitConfig::default()
        };
        let got = fit_subject_step(&state, &p, &specs, &cfg).unwrap();
        for (id, sp) in &truth {
            assert!(((got[id].alpha - sp.alpha) / sp.alpha).abs() < 1e-4, "{id}: {:?}", got[id]);
            assert!(((got[id].beta - sp.beta) / sp.beta).abs() < 1e-4, "{id}: {:?}", got[id]);
        }
    }

    #[test]
    fn dof_threshold_is_enforced() {
        use Diagnosis::*;
        // 2 subjects x 2 points = 4 points; theta 4 + 2 * 2 = 8
        let p = panel(
            &[
                ("a", 70.0, CN, vec![Some(1.0)]),
                ("a", 71.0, CN, vec![Some(2.0)]),
                ("b", 70.0, AD, vec![Some(5.0)]),
                ("b", 71.0, AD, vec![Some(6.0)]),
            ],
            &["X"],
        );
        let cfg = FitConfig {
            curve_kind: LogisticKind::Verhulst,
            ..FitConfig::default()
        };
        match fit_panel(&p, &p, &[spec("X", ConstraintPolicy::Free)], &cfg) {
            Err(Error::DegreesOfFreedom { points, threshold }) => assert_eq!((points, threshold), (4, 8)),
            other => panic!("{other:?}"),
        }
    }
}
