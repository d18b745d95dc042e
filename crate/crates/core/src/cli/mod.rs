//! Command-line front end: argument parsing, configuration merging and
//! dispatch. Every subcommand writes plain CSV/JSON into its output directory
//! together with a `manifest.json`.

mod commands;
pub mod config;
pub mod ensemble;
pub mod svg;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::curves::LogisticKind;
use crate::error::{Error, Result};
use crate::robust_loss::LossKind;
use config::{NmaeScale, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "dpm", version, about = "Robust disease progression modeling on a shared score axis")]
pub struct Cli {
    /// Worker threads; defaults to the number of logical processors.
    #[arg(long, global = true, env = "DPM_THREADS")]
    pub threads: Option<usize>,

    /// JSON run configuration. Flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct FitFlags {
    /// Sigmoid family: verhulst, gompertz, richards or modified_stannard.
    #[arg(long)]
    pub curve: Option<LogisticKind>,
    /// Loss: l2, l1_l2, logistic, modified_huber or cauchy_lorentz.
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub l_min: Option<usize>,
    #[arg(long)]
    pub l_max: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a cohort CSV, apply the filters and write the cleaned cohort.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        specs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Visit matching window in days.
        #[arg(long)]
        window_days: Option<f64>,
        /// Keep diagnosis synonyms (EMCI, LMCI, ...) as missing instead of merging them.
        #[arg(long)]
        no_merge_labels: bool,
        /// Imaging biomarkers to replace by their ICV-corrected residuals.
        #[arg(long, value_delimiter = ',')]
        volumetric: Option<Vec<String>>,
    },
    /// Split subjects into training and test sets.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        specs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        test_fraction: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit one model and write it with its loss trace.
    Fit {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        specs: PathBuf,
        /// Validation cohort for early stopping; held out from `--train` when absent.
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        validation_fraction: Option<f64>,
        #[command(flatten)]
        fit: FitFlags,
    },
    /// Fit a bootstrap ensemble and write the ordering matrix and averaged curves.
    Bootstrap {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        specs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of bootstraps.
        #[arg(long = "n")]
        n: Option<usize>,
        #[arg(long)]
        grid_points: Option<usize>,
        #[command(flatten)]
        fit: FitFlags,
    },
    /// Predict held-out measurements and report MAE and NMAE.
    Predict {
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        specs: PathBuf,
        #[arg(long, conflicts_with = "ensemble", required_unless_present = "ensemble")]
        model: Option<PathBuf>,
        #[arg(long)]
        ensemble: Option<PathBuf>,
        /// Training cohort; needed when NMAE uses training standard deviations.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        nmae_scale: Option<NmaeScale>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage test visits with the ensemble and report the multiclass AUC.
    Classify {
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        specs: PathBuf,
        #[arg(long)]
        bandwidth: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute the ordering matrix of a saved ensemble.
    Order {
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic cohort with known curves.
    Simulate {
        /// Synthetic cohort description (JSON); built-in defaults when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_subjects: Option<usize>,
        #[arg(long, default_value_t = 0.0)]
        outlier_fraction: f64,
        #[arg(long, default_value_t = 5.0)]
        outlier_magnitude: f64,
    },
    /// Metric JSON and plot data for a saved ensemble.
    Report {
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        specs: PathBuf,
        /// Test cohort for NMAE and AUC.
        #[arg(long)]
        test: Option<PathBuf>,
        /// Second ensemble compared bootstrap by bootstrap on test NMAE.
        #[arg(long, requires = "test")]
        compare: Option<PathBuf>,
        #[arg(long)]
        grid_points: Option<usize>,
        #[arg(long)]
        bandwidth: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Split { .. } => "split",
            Command::Fit { .. } => "fit",
            Command::Bootstrap { .. } => "bootstrap",
            Command::Predict { .. } => "predict",
            Command::Classify { .. } => "classify",
            Command::Order { .. } => "order",
            Command::Simulate { .. } => "simulate",
            Command::Report { .. } => "report",
        }
    }
}

fn apply_fit_flags(cfg: &mut RunConfig, f: &FitFlags) {
    if let Some(k) = f.curve {
        cfg.fit.curve_kind = k;
    }
    if let Some(k) = f.loss {
        cfg.fit.loss_kind = k;
    }
    if let Some(v) = f.l_min {
        cfg.fit.l_min = v;
    }
    if let Some(v) = f.l_max {
        cfg.fit.l_max = v;
    }
    if let Some(v) = f.seed {
        cfg.seed = v;
    }
}

/// Defaults, then the config file, then flags.
pub fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match &cli.command {
        Command::Ingest {
            window_days,
            no_merge_labels,
            volumetric,
            ..
        } => {
            if let Some(w) = window_days {
                cfg.window_days = *w;
            }
            if *no_merge_labels {
                cfg.merge_labels = false;
            }
            if let Some(v) = volumetric {
                cfg.volumetric = v.clone();
            }
        }
        Command::Split { test_fraction, seed, .. } => {
            if let Some(f) = test_fraction {
                cfg.test_fraction = *f;
            }
            if let Some(s) = seed {
                cfg.seed = *s;
            }
        }
        Command::Fit {
            validation_fraction,
            fit,
            ..
        } => {
            if let Some(f) = validation_fraction {
                cfg.validation_fraction = *f;
            }
            apply_fit_flags(&mut cfg, fit);
        }
        Command::Bootstrap { n, grid_points, fit, .. } => {
            if let Some(n) = n {
                cfg.n_bootstraps = *n;
            }
            if let Some(g) = grid_points {
                cfg.grid_points = *g;
            }
            apply_fit_flags(&mut cfg, fit);
        }
        Command::Predict { nmae_scale, .. } => {
            if let Some(s) = nmae_scale {
                cfg.nmae_scale = *s;
            }
        }
        Command::Classify { bandwidth, .. } => {
            if bandwidth.is_some() {
                cfg.bandwidth = *bandwidth;
            }
        }
        Command::Order { .. } => {}
        Command::Simulate { seed, .. } => {
            if let Some(s) = seed {
                cfg.seed = *s;
            }
        }
        Command::Report {
            grid_points, bandwidth, ..
        } => {
            if let Some(g) = grid_points {
                cfg.grid_points = *g;
            }
            if bandwidth.is_some() {
                cfg.bandwidth = *bandwidth;
            }
        }
    }
    cfg.fit.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

/// Runs a parsed command line inside a worker pool of the requested size.
pub fn run(cli: Cli) -> Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let cfg = effective_config(&cli)?;
    pool.install(|| commands::dispatch(&cli.command, &cfg))
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
