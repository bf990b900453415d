use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use coded_resnext::analysis::DecodeScaling;
use coded_resnext::autodiff::Precision;
use coded_resnext::blocks::RemovalConvention;
use coded_resnext::data::{generate_blobs, load_binary_images, split_and_standardize, BlobsConfig, DatasetSplit};
use coded_resnext::experiment::ToySuiteConfig;
use coded_resnext::network::{ArchSpec, TrainConfig};
use serde::{Deserialize, Serialize};

/// Where samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    Blobs(BlobsConfig),
    /// Records of one label byte followed by `channels * height * width`
    /// pixel bytes.
    Binary {
        path: PathBuf,
        channels: usize,
        height: usize,
        width: usize,
        num_classes: usize,
        #[serde(default = "default_val_fraction")]
        val_fraction: f64,
    },
}

fn default_val_fraction() -> f64 {
    0.2
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Blobs(BlobsConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub trials: usize,
    pub removal: RemovalConvention,
    pub decode: DecodeScaling,
    /// Negatives per positive when scoring a binary classifier; all
    /// negatives when absent.
    pub negative_ratio: Option<f64>,
    pub batch_size: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            trials: 20,
            removal: RemovalConvention::default(),
            decode: DecodeScaling::default(),
            negative_ratio: None,
            batch_size: 256,
        }
    }
}

/// Everything a command reads. Written next to every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds data generation, initialization, shuffling and analysis draws.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Single-threaded evaluation.
    pub deterministic: bool,
    pub arch: String,
    pub precision: Precision,
    pub data: DataSource,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
    /// The command and its arguments, filled in when the config is written.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<serde_json::Value>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            deterministic: false,
            arch: "toy".into(),
            precision: Precision::F64,
            data: DataSource::default(),
            train: TrainConfig::default(),
            analysis: AnalysisConfig::default(),
            command: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    /// Pushes the global seed into every seeded section.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        if let DataSource::Blobs(b) = &mut self.data {
            b.seed = self.seed;
        }
        self.train.parallel_eval = !self.deterministic;
        self.train.validate()?;
        if self.analysis.batch_size == 0 {
            bail!("analysis.batch_size must be positive");
        }
        Ok(self)
    }

    pub fn parallel(&self) -> bool {
        !self.deterministic
    }

    pub fn dataset(&self) -> Result<DatasetSplit> {
        Ok(match &self.data {
            DataSource::Blobs(b) => generate_blobs(b)?,
            DataSource::Binary { path, channels, height, width, num_classes, val_fraction } => {
                let all = load_binary_images(path, *channels, *height, *width, *num_classes)
                    .with_context(|| format!("cannot load {}", path.display()))?;
                split_and_standardize(&all, *val_fraction, self.seed)?
            }
        })
    }

    /// The toy preset adapts to the blob dimension and class count.
    pub fn arch_spec(&self) -> Result<ArchSpec> {
        match (&self.data, self.arch.as_str()) {
            (DataSource::Blobs(b), "toy") => Ok(ArchSpec::toy(b.dim, b.num_classes)),
            (_, name) => Ok(ArchSpec::preset(name)?),
        }
    }

    pub fn toy_suite(&self) -> ToySuiteConfig {
        let blobs = match &self.data {
            DataSource::Blobs(b) => *b,
            DataSource::Binary { .. } => BlobsConfig { seed: self.seed, ..Default::default() },
        };
        ToySuiteConfig {
            blobs,
            train: self.train.clone(),
            trials: self.analysis.trials,
            analysis_seed: self.seed,
            decode: self.analysis.decode,
            removal: self.analysis.removal,
            precision: self.precision,
            parallel: self.parallel(),
            ..Default::default()
        }
    }

    /// Writes `<name>.config.json` into the output directory.
    pub fn write(&self, name: &str, command: serde_json::Value) -> Result<PathBuf> {
        let mut cfg = self.clone();
        cfg.command = Some(command);
        let path = self.output_dir.join(format!("{name}.config.json"));
        let text = serde_json::to_string_pretty(&cfg)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }
}
