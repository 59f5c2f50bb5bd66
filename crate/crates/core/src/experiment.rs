//! Versioned experiment documents and the run directory they produce.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{anomaly_report, AnomalyReport};
use crate::checkpoint::Checkpoint;
use crate::datagen::{default_sizes, make_dataset_with, Dataset, NoiseSpec, SplitSizes, BLOBS_MLP, GRIDMAP_CONV};
use crate::entropy::EntropyConfig;
use crate::error::{Error, Result};
use crate::net::{ModelConfig, RepeatedBlockNet};
use crate::trainer::{continue_train, train, RunLog, TrainConfig};

pub const EXPERIMENT_VERSION: &str = "eloss-exp-1";

pub const RUNLOG_FILE: &str = "runlog.jsonl";
pub const CURVE_FILE: &str = "curve.csv";
pub const CHECKPOINT_FILE: &str = "ckpt.json";
pub const CONFIG_FILE: &str = "config.json";
pub const TIMING_FILE: &str = "timing.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default = "default_dataset")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub train_size: Option<usize>,
    pub val_size: Option<usize>,
    pub test_size: Option<usize>,
}

fn default_dataset() -> String {
    GRIDMAP_CONV.into()
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { name: default_dataset(), seed: 0, train_size: None, val_size: None, test_size: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Neighbor order for the anomaly metric.
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_split")]
    pub split: EvalSplit,
}

fn default_k() -> usize {
    1
}

fn default_split() -> EvalSplit {
    EvalSplit::Test
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { k: default_k(), split: default_split() }
    }
}

/// Start from an earlier run instead of a fresh initialization. The train
/// section's `epochs` then counts the extra epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResumeConfig {
    pub checkpoint: PathBuf,
    pub runlog: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: String,
    #[serde(default)]
    pub dataset: DatasetConfig,
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub noise: Vec<NoiseSpec>,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    pub resume: Option<ResumeConfig>,
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Fills every default, applies the optional seed and epsilon overrides
    /// and validates the result.
    pub fn materialize(mut self, seed: Option<u64>, epsilon: Option<f64>) -> Result<Self> {
        if self.version != EXPERIMENT_VERSION {
            return Err(Error::Config(format!(
                "unsupported version {:?}, expected {EXPERIMENT_VERSION:?}",
                self.version
            )));
        }
        if let Some(s) = seed {
            self.train.seed = s;
            self.dataset.seed = s;
        }
        if let Some(e) = epsilon {
            self.train.epsilon = e;
        }
        if self.train.task != self.dataset.name {
            return Err(Error::Config(format!(
                "train.task {:?} does not match dataset.name {:?}",
                self.train.task, self.dataset.name
            )));
        }
        let (tr, va, te) = default_sizes(&self.dataset.name)?;
        self.dataset.train_size.get_or_insert(tr);
        self.dataset.val_size.get_or_insert(va);
        self.dataset.test_size.get_or_insert(te);
        let model = match self.model.take() {
            Some(m) => m,
            None if self.dataset.name == BLOBS_MLP => ModelConfig::mlp(32, 4),
            None => ModelConfig::conv(4, 16, 16, 4),
        };
        model.validate()?;
        if self.train.eloss_coverage > model.blocks {
            return Err(Error::Config(format!(
                "eloss_coverage {} exceeds block count {}",
                self.train.eloss_coverage, model.blocks
            )));
        }
        self.model = Some(model);
        self.train.validate()?;
        for n in &self.noise {
            n.validate()?;
        }
        if self.analysis.k == 0 {
            return Err(Error::Config("analysis.k must be >= 1".into()));
        }
        Ok(self)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// SHA-256 of the persisted JSON, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_json()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Output directory name: `run-` plus the first 16 hex digits of the hash.
    pub fn run_name(&self) -> Result<String> {
        Ok(format!("run-{}", &self.hash()?[..16]))
    }

    pub fn model(&self) -> Result<&ModelConfig> {
        self.model.as_ref().ok_or_else(|| Error::Config("config not materialized".into()))
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let d = &self.dataset;
        make_dataset_with(
            &d.name,
            d.seed,
            SplitSizes { train: d.train_size, val: d.val_size, test: d.test_size },
        )
    }
}

pub struct RunOutput {
    pub log: RunLog,
    pub net: RepeatedBlockNet,
    pub checkpoint: Checkpoint,
}

/// Trains (or resumes) as described by a materialized config.
pub fn run(config: &ExperimentConfig) -> Result<RunOutput> {
    let data = config.dataset()?;
    let (net, log) = match &config.resume {
        None => {
            let mut net = RepeatedBlockNet::from_config(config.model()?, config.train.seed)?;
            let log = train(&mut net, &data, &config.train)?;
            (net, log)
        }
        Some(r) => {
            let ckpt = Checkpoint::load(&r.checkpoint)?;
            if &ckpt.model != config.model()? {
                return Err(Error::Config("resume checkpoint model differs from config".into()));
            }
            let base = match &r.runlog {
                Some(p) => Some(RunLog::from_jsonl(&fs::read_to_string(p)?)?),
                None => None,
            };
            continue_train(&ckpt, base.as_ref(), config.train.epochs, &config.train, &data)?
        }
    };
    let checkpoint = Checkpoint::from_net(&net, log.last_epoch())?;
    Ok(RunOutput { log, net, checkpoint })
}

/// Writes the run directory. Everything except `timing.json` depends only on
/// the config.
pub fn write_run_dir(dir: &Path, config: &ExperimentConfig, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), config.to_json()?)?;
    fs::write(dir.join(RUNLOG_FILE), out.log.to_jsonl()?)?;
    let mut curve = Vec::new();
    out.log.write_curve_csv(&mut curve)?;
    fs::write(dir.join(CURVE_FILE), curve)?;
    out.checkpoint.save(dir.join(CHECKPOINT_FILE))?;
    fs::write(dir.join(TIMING_FILE), serde_json::to_string_pretty(&out.log.timing)? + "\n")?;
    Ok(())
}

/// A finished run directory read back from disk.
pub struct RunDir {
    pub path: PathBuf,
    pub config: ExperimentConfig,
    pub log: RunLog,
}

impl RunDir {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let read = |f: &str| {
            fs::read_to_string(path.join(f))
                .map_err(|e| Error::Config(format!("{}: {e}", path.join(f).display())))
        };
        let config = ExperimentConfig::from_json(&read(CONFIG_FILE)?)?;
        let log = RunLog::from_jsonl(&read(RUNLOG_FILE)?)?;
        Ok(Self { path, config, log })
    }

    pub fn name(&self) -> String {
        self.path
            .file_name()
            .map_or_else(|| self.path.display().to_string(), |n| n.to_string_lossy().into_owned())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::load(self.path.join(CHECKPOINT_FILE))
    }

    pub fn ms_per_step(&self) -> Option<f64> {
        let text = fs::read_to_string(self.path.join(TIMING_FILE)).ok()?;
        let t: crate::trainer::Timing = serde_json::from_str(&text).ok()?;
        Some(t.ms_per_step())
    }

    /// Anomaly report on the configured evaluation split, using the run's
    /// checkpoint and noise specs.
    pub fn anomaly_report(&self) -> Result<AnomalyReport> {
        let net = self.checkpoint()?.to_net()?;
        let data = self.config.dataset()?;
        let split = match self.config.analysis.split {
            EvalSplit::Val => &data.val,
            EvalSplit::Test => &data.test,
        };
        let entropy = EntropyConfig::new(self.config.train.epsilon)?;
        anomaly_report(&net, split, Some(&data.handle), &self.config.noise, self.config.analysis.k, &entropy)
    }
}
