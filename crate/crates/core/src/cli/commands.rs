use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use super::config::{NmaeScale, OutputDir, RunConfig, RunManifest};
use super::ensemble::{load_ensemble, member_stem, save_ensemble, FitSummary};
use super::svg::line_chart;
use super::Command;
use crate::cohort::{
    ancova_residuals, drop_sparse_subjects, load_specs, match_visits, parse_cohort_csv, reject_out_of_range,
    remove_reverting_diagnoses, sample_sd, save_specs, write_cohort_csv, BiomarkerSpec, Cohort, Diagnosis, Panel,
    ParseOptions,
};
use crate::error::{Error, Result};
use crate::fitter::fit;
use crate::metrics::{
    multiclass_auc, predict_records, summarize_predictions, wilcoxon_signed_rank, write_predictions_csv, MetricReport,
    NormalizeBy,
};
use crate::progression::{informative_span, FittedModel};
use crate::resampling::{
    aggregate_curves, linear_grid, ordering_matrix, partition_train_test, run_bootstraps, write_curves_csv,
    OrderingMatrix,
};
use crate::staging::{
    conversion_points, fit_time_mapping, labelled_scores, remap_curve_to_time, stage_cohort,
    write_classification_csv, StagingClassifier,
};
use crate::synth::{generate, inject_outliers, SynthSpec};

const CLASSES: [Diagnosis; 3] = [Diagnosis::CN, Diagnosis::MCI, Diagnosis::AD];

pub(super) fn dispatch(command: &Command, cfg: &RunConfig) -> Result<()> {
    let mut manifest = RunManifest::new(command.name(), cfg);
    match command {
        Command::Ingest { input, specs, out, .. } => ingest(input, specs, out, cfg, &mut manifest),
        Command::Split { input, specs, out, .. } => split(input, specs, out, cfg, &mut manifest),
        Command::Fit {
            train,
            specs,
            valid,
            out,
            ..
        } => fit_one(train, specs, valid.as_deref(), out, cfg, &mut manifest),
        Command::Bootstrap { train, specs, out, .. } => bootstrap(train, specs, out, cfg, &mut manifest),
        Command::Predict {
            test,
            specs,
            model,
            ensemble,
            train,
            out,
            ..
        } => predict(
            test,
            specs,
            model.as_deref(),
            ensemble.as_deref(),
            train.as_deref(),
            out,
            cfg,
            &mut manifest,
        ),
        Command::Classify {
            ensemble,
            train,
            test,
            specs,
            out,
            ..
        } => classify(ensemble, train, test, specs, out, cfg, &mut manifest),
        Command::Order { ensemble, out } => order(ensemble, out, &mut manifest),
        Command::Simulate {
            spec,
            out,
            seed,
            n_subjects,
            outlier_fraction,
            outlier_magnitude,
        } => simulate(
            spec.as_deref(),
            out,
            *seed,
            *n_subjects,
            *outlier_fraction,
            *outlier_magnitude,
            cfg,
            &mut manifest,
        ),
        Command::Report {
            ensemble,
            train,
            specs,
            test,
            compare,
            out,
            ..
        } => report(
            ensemble,
            train,
            specs,
            test.as_deref(),
            compare.as_deref(),
            out,
            cfg,
            &mut manifest,
        ),
    }
}

fn read_cohort(path: &Path, specs: &[BiomarkerSpec], cfg: &RunConfig, manifest: &mut RunManifest) -> Result<Cohort> {
    manifest.add_input(path)?;
    parse_cohort_csv(
        path,
        specs,
        ParseOptions {
            merge_labels: cfg.merge_labels,
        },
    )
}

fn read_specs(path: &Path, manifest: &mut RunManifest) -> Result<Vec<BiomarkerSpec>> {
    manifest.add_input(path)?;
    load_specs(path)
}

fn ingest(input: &Path, specs: &Path, out: &Path, cfg: &RunConfig, manifest: &mut RunManifest) -> Result<()> {
    let specs = read_specs(specs, manifest)?;
    let raw = read_cohort(input, &specs, cfg, manifest)?;
    let matched = match_visits(&raw, cfg.window_days);
    let (in_range, rejections) = reject_out_of_range(&matched);
    let monotone = remove_reverting_diagnoses(&in_range);
    let corrected = if cfg.volumetric.is_empty() {
        monotone
    } else {
        ancova_residuals(&monotone, &cfg.volumetric)?
    };
    let clean = drop_sparse_subjects(&corrected);
    log::info!(
        "ingest: {} subjects in, {} kept, {} values rejected",
        raw.subject_ids().len(),
        clean.subject_ids().len(),
        rejections.total()
    );

    let mut dir = OutputDir::create(out)?;
    write_cohort_csv(&clean, dir.file("cohort.csv")?)?;
    rejections.write_csv(dir.file("rejections.csv")?)?;
    save_specs(dir.path("specs.json")?, &clean.specs)?;
    dir.finish(manifest.clone())
}

fn split(input: &Path, specs: &Path, out: &Path, cfg: &RunConfig, manifest: &mut RunManifest) -> Result<()> {
    let specs = read_specs(specs, manifest)?;
    let cohort = read_cohort(input, &specs, cfg, manifest)?;
    let (train, test, part) = partition_train_test(&cohort, cfg.test_fraction, cfg.seed)?;
    let mut dir = OutputDir::create(out)?;
    part.write_csv(dir.file("partition.csv")?)?;
    write_cohort_csv(&train, dir.file("train.csv")?)?;
    write_cohort_csv(&test, dir.file("test.csv")?)?;
    dir.finish(manifest.clone())
}

fn fit_one(
    train: &Path,
    specs: &Path,
    valid: Option<&Path>,
    out: &Path,
    cfg: &RunConfig,
    manifest: &mut RunManifest,
) -> Result<()> {
    let specs = read_specs(specs, manifest)?;
    let cohort = read_cohort(train, &specs, cfg, manifest)?;
    let (fit_train, fit_valid) = match valid {
        Some(v) => (cohort, read_cohort(v, &specs, cfg, manifest)?),
        None if cfg.validation_fraction > 0.0 => {
            let (t, v, _) = partition_train_test(&cohort, cfg.validation_fraction, cfg.seed)?;
            (t, v)
        }
        None => (cohort.clone(), cohort),
    };
    let (mut model, trace) = fit(&fit_train, &fit_valid, &cfg.fit)?;
    model.provenance.seed = Some(cfg.seed);
    let summary = FitSummary::new(&model, &trace, &Panel::from_cohort(&fit_train), &specs)?;
    log::info!("fit: stopped at iteration {}, BIC {}", trace.l_opt, summary.bic);

    let mut dir = OutputDir::create(out)?;
    model.save_json(dir.path("model.json")?)?;
    trace.write_csv(dir.file("trace.csv")?)?;
    dir.json("summary.json", &summary)?;
    dir.finish(manifest.clone())
}

/// Score grid covering the informative part of every curve in the ensemble.
fn score_grid(models: &[FittedModel], n: usize) -> Vec<f64> {
    let (lo, hi) = informative_span(models.iter().flat_map(|m| m.curves.values()));
    if lo.is_finite() && hi.is_finite() && hi > lo {
        linear_grid(lo, hi, n)
    } else {
        linear_grid(-5.0, 5.0, n)
    }
}

fn write_ordering(dir: &mut OutputDir, models: &[FittedModel]) -> Result<OrderingMatrix> {
    let ordering = ordering_matrix(models)?;
    ordering.write_csv(dir.file("ordering.csv")?)?;
    #[derive(Serialize)]
    struct Consensus {
        consensus_order: Vec<String>,
    }
    dir.json(
        "consensus.json",
        &Consensus {
            consensus_order: ordering.consensus_order(),
        },
    )?;
    Ok(ordering)
}

/// Mean curve of every biomarker, raw and rescaled to `[0, 1]`.
fn write_mean_curves(dir: &mut OutputDir, rel: &str, models: &[FittedModel], grid: &[f64]) -> Result<()> {
    let mut columns = Vec::new();
    for name in models[0].curves.keys() {
        let agg = aggregate_curves(models, name, grid)?;
        columns.push((name.clone(), agg.mean));
        columns.push((format!("{name}_normalized"), agg.normalized_mean));
    }
    write_curves_csv(dir.file(rel)?, grid, &columns)
}

fn bootstrap(train: &Path, specs: &Path, out: &Path, cfg: &RunConfig, manifest: &mut RunManifest) -> Result<()> {
    let specs = read_specs(specs, manifest)?;
    let cohort = read_cohort(train, &specs, cfg, manifest)?;
    let ensemble = run_bootstraps(&cohort, &cfg.fit, cfg.n_bootstraps)?;
    log::info!(
        "bootstrap: {} models, {} failures",
        ensemble.models.len(),
        ensemble.failures.len()
    );
    let mut dir = OutputDir::create(out)?;
    save_ensemble(
        &mut dir,
        &ensemble,
        &Panel::from_cohort(&cohort),
        &specs,
        cfg.seed,
        cfg.n_bootstraps,
    )?;
    write_ordering(&mut dir, &ensemble.models)?;
    let grid = score_grid(&ensemble.models, cfg.grid_points);
    write_mean_curves(&mut dir, "curves.csv", &ensemble.models, &grid)?;
    dir.finish(manifest.clone())
}

/// Models of `--model` or of every member of `--ensemble`, labelled for output.
fn load_models(
    model: Option<&Path>,
    ensemble: Option<&Path>,
    manifest: &mut RunManifest,
) -> Result<Vec<(String, FittedModel)>> {
    match (model, ensemble) {
        (Some(m), _) => {
            manifest.add_input(m)?;
            Ok(vec![("model".to_string(), FittedModel::load_json(m)?)])
        }
        (None, Some(e)) => {
            let (index, models) = load_ensemble(e)?;
            manifest.add_input(&e.join("ensemble.json"))?;
            Ok(index
                .members
                .iter()
                .map(|m| member_stem(m.bootstrap_id))
                .zip(models)
                .collect())
        }
        (None, None) => Err(Error::Config("either --model or --ensemble is required".into())),
    }
}

fn training_sd(cohort: &Cohort) -> BTreeMap<String, f64> {
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &cohort.records {
        if let Some(v) = r.value {
            values.entry(r.biomarker.clone()).or_default().push(v);
        }
    }
    values.into_iter().map(|(k, v)| (k, sample_sd(&v))).collect()
}

/// Per-model test NMAE plus the MAE averaged over models.
fn evaluate_models(
    models: &[(String, FittedModel)],
    test: &Cohort,
    normalize: &NormalizeBy,
    mut on_predictions: impl FnMut(&str, &[crate::metrics::PredictedValue]) -> Result<()>,
) -> Result<(BTreeMap<String, f64>, Vec<f64>)> {
    let mut mae_sum: BTreeMap<String, f64> = BTreeMap::new();
    let mut nmaes = Vec::new();
    for (label, model) in models {
        let (values, skipped) = predict_records(model, test);
        on_predictions(label, &values)?;
        let errs = summarize_predictions(&values, skipped, normalize)?;
        for (k, v) in errs.mae {
            *mae_sum.entry(k).or_insert(0.0) += v;
        }
        nmaes.push(errs.nmae);
    }
    let n = models.len() as f64;
    Ok((mae_sum.into_iter().map(|(k, v)| (k, v / n)).collect(), nmaes))
}

fn normalization(cfg: &RunConfig, train: Option<&Cohort>) -> Result<NormalizeBy> {
    match (cfg.nmae_scale, train) {
        (NmaeScale::Evaluation, _) => Ok(NormalizeBy::Evaluation),
        (NmaeScale::Training, Some(t)) => Ok(NormalizeBy::Given(training_sd(t))),
        (NmaeScale::Training, None) => Err(Error::Config("training-scale NMAE needs --train".into())),
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[allow(clippy::too_many_arguments)]
fn predict(
    test: &Path,
    specs: &Path,
    model: Option<&Path>,
    ensemble: Option<&Path>,
    train: Option<&Path>,
    out: &Path,
    cfg: &RunConfig,
    manifest: &mut RunManifest,
) -> Result<()> {
    let specs = read_specs(specs, manifest)?;
    let test = read_cohort(test, &specs, cfg, manifest)?;
    let train = train.map(|t| read_cohort(t, &specs, cfg, manifest)).transpose()?;
    let models = load_models(model, ensemble, manifest)?;
    let normalize = normalization(cfg, train.as_ref())?;
    let single = models.len() == 1;

    let mut dir = OutputDir::create(out)?;
    let (mae, nmaes) = evaluate_models(&models, &test, &normalize, |label, values| {
        let rel = if single {
            "predictions.csv".to_string()
        } else {
            format!("predictions/{label}.csv")
        };
        write_predictions_csv(dir.file(&rel)?, values)
    })?;
    let report = MetricReport {
        mae,
        nmae: Some(mean(&nmaes)),
        per_bootstrap: if single {
            BTreeMap::new()
        } else {
            [("nmae".to_string(), nmaes)].into()
        },
        ..MetricReport::default()
    };
    log::info!("predict: NMAE {}", report.nmae.unwrap_or(f64::NAN));
    dir.json("metrics.json", &report)?;
    dir.finish(manifest.clone())
}

fn fit_classifiers(models: &[FittedModel], train: &Panel, bandwidth: Option<f64>) -> Result<Vec<StagingClassifier>> {
    models
        .iter()
        .map(|m| StagingClassifier::fit(&labelled_scores(m, train), bandwidth))
        .collect()
}

fn staged_auc(models: &[FittedModel], classifiers: &[StagingClassifier], test: &Cohort) -> Result<(f64, Vec<crate::staging::VisitStaging>)> {
    let staged = stage_cohort(models, classifiers, test)?;
    let probs: Vec<Vec<f64>> = staged
        .iter()
        .map(|v| CLASSES.iter().map(|&d| v.posterior.prob(d)).collect())
        .collect();
    let truth: Vec<Option<usize>> = staged.iter().map(|v| v.diagnosis.stage()).collect();
    Ok((multiclass_auc(&probs, &truth)?, staged))
}

fn classify(
    ensemble: &Path,
    train: &Path,
    test: &Path,
    specs: &Path,
    out: &Path,
    cfg: &RunConfig,
    manifest: &mut RunManifest,
) -> Result<()> {
    let specs = read_specs(specs, manifest)?;
    let train = read_cohort(train, &specs, cfg, manifest)?;
    let test = read_cohort(test, &specs, cfg, manifest)?;
    let (_, models) = load_ensemble(ensemble)?;
    manifest.add_input(&ensemble.join("ensemble.json"))?;
    let classifiers = fit_classifiers(&models, &Panel::from_cohort(&train), cfg.bandwidth)?;
    let (auc, staged) = staged_auc(&models, &classifiers, &test)?;
    log::info!("classify: multiclass AUC {auc}");

    let mut dir = OutputDir::create(out)?;
    write_classification_csv(dir.file("classification.csv")?, &staged)?;
    dir.json(
        "metrics.json",
        &MetricReport {
            auc: Some(auc),
            ..MetricReport::default()
        },
    )?;
    dir.finish(manifest.clone())
}

fn order(ensemble: &Path, out: &Path, manifest: &mut RunManifest) -> Result<()> {
    let (_, models) = load_ensemble(ensemble)?;
    manifest.add_input(&ensemble.join("ensemble.json"))?;
    let mut dir = OutputDir::create(out)?;
    let ordering = write_ordering(&mut dir, &models)?;
    log::info!("order: {}", ordering.consensus_order().join(" < "));
    dir.finish(manifest.clone())
}

fn simulate(
    spec: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    n_subjects: Option<usize>,
    outlier_fraction: f64,
    outlier_magnitude: f64,
    cfg: &RunConfig,
    manifest: &mut RunManifest,
) -> Result<()> {
    // --seed, then the seed in the spec file, then the configured seed
    let mut synth = match spec {
        Some(p) => {
            manifest.add_input(p)?;
            SynthSpec::load(p)?
        }
        None => SynthSpec {
            seed: cfg.seed,
            ..SynthSpec::default()
        },
    };
    if let Some(s) = seed {
        synth.seed = s;
    }
    manifest.seed = synth.seed;
    if let Some(n) = n_subjects {
        synth.n_subjects = n;
    }
    let (clean, truth) = generate(&synth)?;
    let mut dir = OutputDir::create(out)?;
    dir.json("synth_spec.json", &synth)?;
    save_specs(dir.path("specs.json")?, &clean.specs)?;
    truth.save_json(dir.path("truth_model.json")?)?;
    if outlier_fraction > 0.0 {
        let (dirty, cells) = inject_outliers(&clean, outlier_fraction, outlier_magnitude, synth.seed)?;
        write_cohort_csv(&dirty, dir.file("cohort.csv")?)?;
        write_cohort_csv(&clean, dir.file("cohort_clean.csv")?)?;
        let mut w = csv::Writer::from_writer(dir.file("outliers.csv")?);
        for c in &cells {
            w.serialize(c)?;
        }
        w.flush()?;
    } else {
        write_cohort_csv(&clean, dir.file("cohort.csv")?)?;
    }
    dir.finish(manifest.clone())
}

#[allow(clippy::too_many_arguments)]
fn report(
    ensemble: &Path,
    train: &Path,
    specs: &Path,
    test: Option<&Path>,
    compare: Option<&Path>,
    out: &Path,
    cfg: &RunConfig,
    manifest: &mut RunManifest,
) -> Result<()> {
    let specs = read_specs(specs, manifest)?;
    let train = read_cohort(train, &specs, cfg, manifest)?;
    let test = test.map(|t| read_cohort(t, &specs, cfg, manifest)).transpose()?;
    let (index, models) = load_ensemble(ensemble)?;
    manifest.add_input(&ensemble.join("ensemble.json"))?;
    let train_panel = Panel::from_cohort(&train);
    let labelled: Vec<(String, FittedModel)> = index
        .members
        .iter()
        .map(|m| member_stem(m.bootstrap_id))
        .zip(models.iter().cloned())
        .collect();

    let mut report = MetricReport::default();
    let bics: Vec<f64> = index.members.iter().map(|m| m.summary.bic).collect();
    report.bic = Some(mean(&bics));
    report.per_bootstrap.insert("bic".into(), bics);
    let classifiers = fit_classifiers(&models, &train_panel, cfg.bandwidth)?;

    if let Some(test) = &test {
        let normalize = normalization(cfg, Some(&train))?;
        let (mae, nmaes) = evaluate_models(&labelled, test, &normalize, |_, _| Ok(()))?;
        report.mae = mae;
        report.nmae = Some(mean(&nmaes));
        report.auc = Some(staged_auc(&models, &classifiers, test)?.0);
        if let Some(other_dir) = compare {
            let (other_index, other_models) = load_ensemble(other_dir)?;
            manifest.add_input(&other_dir.join("ensemble.json"))?;
            let other: BTreeMap<usize, FittedModel> = other_index
                .members
                .iter()
                .map(|m| m.bootstrap_id)
                .zip(other_models)
                .collect();
            let mut x = Vec::new();
            let mut y = Vec::new();
            for (m, nmae) in index.members.iter().zip(&nmaes) {
                if let Some(om) = other.get(&m.bootstrap_id) {
                    let (_, on) = evaluate_models(&[(String::new(), om.clone())], test, &normalize, |_, _| Ok(()))?;
                    x.push(*nmae);
                    y.push(on[0]);
                }
            }
            report.wilcoxon = Some(wilcoxon_signed_rank(&x, &y)?);
            report.per_bootstrap.insert("nmae_compared".into(), y);
        }
        report.per_bootstrap.insert("nmae".into(), nmaes);
    }

    let mut dir = OutputDir::create(out)?;
    dir.json("metrics.json", &report)?;

    let grid = score_grid(&models, cfg.grid_points);
    write_mean_curves(&mut dir, "trajectories.csv", &models, &grid)?;
    let mut normalized = Vec::new();
    for name in models[0].curves.keys() {
        let agg = aggregate_curves(&models, name, &grid)?;
        let columns: Vec<(String, Vec<f64>)> = labelled
            .iter()
            .map(|(l, _)| l.clone())
            .zip(agg.per_model)
            .collect();
        write_curves_csv(dir.file(&format!("curves/{name}.csv"))?, &grid, &columns)?;
        normalized.push((name.clone(), agg.normalized_mean));
    }
    let svg = line_chart("Normalized trajectories", "disease progression score", &grid, &normalized);
    std::fs::write(dir.path("trajectories.svg")?, svg)?;

    let mut likelihood_columns = Vec::new();
    for d in CLASSES {
        let per_grid: Vec<f64> = grid
            .iter()
            .map(|&s| {
                let total: f64 = classifiers
                    .iter()
                    .filter_map(|c| c.likelihoods.get(&d).map(|k| k.eval(s)))
                    .sum();
                total / classifiers.len() as f64
            })
            .collect();
        likelihood_columns.push((d.label().to_string(), per_grid));
    }
    write_curves_csv(dir.file("likelihoods.csv")?, &grid, &likelihood_columns)?;
    let svg = line_chart("Class likelihoods", "disease progression score", &grid, &likelihood_columns);
    std::fs::write(dir.path("likelihoods.svg")?, svg)?;

    write_time_axis(&mut dir, &labelled, &train_panel, cfg.grid_points)?;
    dir.finish(manifest.clone())
}

/// Curves re-expressed in years from AD conversion, one mapping per model.
fn write_time_axis(dir: &mut OutputDir, models: &[(String, FittedModel)], train: &Panel, n: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(dir.file("time_mappings.csv")?);
    w.write_record(["model", "m0", "m1", "reversed"])?;
    let mut mapped = Vec::new();
    let mut span = (f64::INFINITY, f64::NEG_INFINITY);
    for (label, model) in models {
        let points = conversion_points(model, train);
        let mapping = match fit_time_mapping(&points) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("{label}: no time mapping: {e}");
                continue;
            }
        };
        for (_, t) in &points {
            span = (span.0.min(*t), span.1.max(*t));
        }
        let mut curves = BTreeMap::new();
        let mut reversed = false;
        for (name, p) in &model.curves {
            let (q, flag) = remap_curve_to_time(p, &mapping)?;
            reversed = flag;
            curves.insert(name.clone(), q);
        }
        w.write_record([
            label.clone(),
            mapping.m0.to_string(),
            mapping.m1.to_string(),
            (reversed as u8).to_string(),
        ])?;
        mapped.push((curves, reversed));
    }
    w.flush()?;
    if mapped.is_empty() || !(span.1 > span.0) {
        log::warn!("no converters in the training cohort; skipping the time-axis curves");
        return Ok(());
    }
    let grid = linear_grid(span.0, span.1, n);
    let mut columns = Vec::new();
    for name in models[0].1.curves.keys() {
        let mean_curve: Vec<f64> = grid
            .iter()
            .map(|&t| {
                let total: f64 = mapped
                    .iter()
                    .map(|(curves, reversed)| curves[name].unit_value(if *reversed { -t } else { t }))
                    .sum();
                total / mapped.len() as f64
            })
            .collect();
        columns.push((name.clone(), mean_curve));
    }
    write_curves_csv(dir.file("trajectories_years.csv")?, &grid, &columns)
}
