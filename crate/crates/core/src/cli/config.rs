use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fitter::FitConfig;

/// Which standard deviations normalize NMAE.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum NmaeScale {
    #[default]
    Evaluation,
    Training,
}

/// Settings shared by all subcommands. Read from a JSON config file, then
/// overridden by command-line flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub fit: FitConfig,
    pub seed: u64,
    pub test_fraction: f64,
    /// Share of training subjects held out for early stopping when `fit` is
    /// not given a validation cohort.
    pub validation_fraction: f64,
    pub n_bootstraps: usize,
    pub window_days: f64,
    pub merge_labels: bool,
    pub volumetric: Vec<String>,
    pub grid_points: usize,
    pub bandwidth: Option<f64>,
    pub nmae_scale: NmaeScale,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            fit: FitConfig::default(),
            seed: 0,
            test_fraction: 0.2,
            validation_fraction: 0.2,
            n_bootstraps: 100,
            window_days: 92.0,
            merge_labels: true,
            volumetric: Vec::new(),
            grid_points: 201,
            bandwidth: None,
            nmae_scale: NmaeScale::Evaluation,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.fit.validate()?;
        if !(0.0..1.0).contains(&self.test_fraction) || !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("test and validation fractions must lie in [0, 1)".into()));
        }
        if self.grid_points < 2 {
            return Err(Error::Config("grid needs at least two points".into()));
        }
        if !(self.window_days >= 0.0) {
            return Err(Error::Config("matching window must be nonnegative".into()));
        }
        if matches!(self.bandwidth, Some(h) if !(h > 0.0)) {
            return Err(Error::Config("bandwidth must be positive".into()));
        }
        Ok(())
    }
}

/// Record of one run, written next to its outputs. Paths are file names or
/// paths relative to the output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    /// Input file name to SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
    pub seed: u64,
    pub tool_version: String,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        RunManifest {
            command: command.to_string(),
            config: config.clone(),
            inputs: BTreeMap::new(),
            seed: config.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            outputs: Vec::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        self.inputs.insert(name, hex::encode(Sha256::digest(&bytes)));
        Ok(())
    }

    pub fn write(&mut self, out_dir: &Path) -> Result<()> {
        self.outputs.sort();
        self.outputs.dedup();
        let mut f = File::create(out_dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

/// Creates files under one output directory and remembers their relative paths.
pub struct OutputDir {
    pub root: PathBuf,
    pub written: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        Ok(OutputDir {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn file(&mut self, rel: &str) -> Result<File> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        self.written.push(rel.to_string());
        Ok(File::create(path)?)
    }

    pub fn path(&mut self, rel: &str) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        self.written.push(rel.to_string());
        Ok(path)
    }

    pub fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut f = self.file(rel)?;
        serde_json::to_writer_pretty(&mut f, value)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(self, mut manifest: RunManifest) -> Result<()> {
        manifest.outputs = self.written;
        manifest.write(&self.root)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_keeps_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 9, "fit": {"l_max": 20}}"#).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.fit.l_max, 20);
        assert_eq!(c.fit.l_min, FitConfig::default().l_min);
        assert_eq!(c.window_days, 92.0);
    }

    #[test]
    fn manifest_hashes_by_file_name() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("in.csv");
        std::fs::write(&p, b"abc").unwrap();
        let mut m = RunManifest::new("fit", &RunConfig::default());
        m.add_input(&p).unwrap();
        assert_eq!(
            m.inputs["in.csv"],
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
