//! Run configuration: a flat TOML file whose keys mirror the engine and
//! training settings. Relative paths resolve against the file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SyntheticSpec;
use crate::engine::{EngineConfig, PipelineSpec};
use crate::error::{Error, Result};
use crate::kalman::{LogGrid, DEFAULT_Q_GRID, DEFAULT_R_GRID};
use crate::policy::PolicyMode;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Price CSV (`date,alpha,beta`).
    pub data: Option<PathBuf>,
    /// Leading rows used for calibration and training.
    pub in_sample_len: usize,
    pub pipelines: Vec<String>,
    pub policy_mode: PolicyMode,
    pub out: Option<PathBuf>,
    pub seed: u64,

    pub zscore_window: usize,
    pub zscore_min_samples: usize,
    pub q_grid: LogGrid,
    pub r_grid: LogGrid,
    pub baseline_fit_on_test: bool,
    pub rho: Option<f64>,
    pub static_hedge: Option<f64>,
    pub warm_start: bool,

    pub surrogate_gamma: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub epochs1: usize,
    pub epochs2: usize,
    pub batch_count: usize,
    pub bptt_truncation: usize,
    pub grad_clip: f64,
    pub hidden_size: usize,
    pub proj_size: usize,

    /// Pre-trained networks; pipelines without one train on the fly.
    pub checkpoint_b3: Option<PathBuf>,
    pub checkpoint_kbpt: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            data: None,
            in_sample_len: 2000,
            pipelines: vec!["B1".into()],
            policy_mode: PolicyMode::Cumulative,
            out: None,
            seed: t.seed,
            zscore_window: t.zscore_window,
            zscore_min_samples: t.zscore_min_samples,
            q_grid: DEFAULT_Q_GRID,
            r_grid: DEFAULT_R_GRID,
            baseline_fit_on_test: false,
            rho: None,
            static_hedge: None,
            warm_start: true,
            surrogate_gamma: t.surrogate_gamma,
            eta1: t.eta1,
            eta2: t.eta2,
            epochs1: t.epochs1,
            epochs2: t.epochs2,
            batch_count: t.batch_count,
            bptt_truncation: t.bptt_truncation,
            grad_clip: t.grad_clip,
            hidden_size: t.hidden_size,
            proj_size: t.proj_size,
            checkpoint_b3: None,
            checkpoint_kbpt: None,
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    /// Parses a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&read_text(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        resolve(base, &mut cfg.data);
        resolve(base, &mut cfg.out);
        resolve(base, &mut cfg.checkpoint_b3);
        resolve(base, &mut cfg.checkpoint_kbpt);
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            eta1: self.eta1,
            eta2: self.eta2,
            epochs1: self.epochs1,
            epochs2: self.epochs2,
            batch_count: self.batch_count,
            bptt_truncation: self.bptt_truncation,
            surrogate_gamma: self.surrogate_gamma,
            grad_clip: self.grad_clip,
            seed: self.seed,
            zscore_window: self.zscore_window,
            zscore_min_samples: self.zscore_min_samples,
            hidden_size: self.hidden_size,
            proj_size: self.proj_size,
        }
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            zscore_window: self.zscore_window,
            zscore_min_samples: self.zscore_min_samples,
            q_grid: self.q_grid,
            r_grid: self.r_grid,
            baseline_fit_on_test: self.baseline_fit_on_test,
            rho: self.rho,
            static_hedge: self.static_hedge,
            warm_start: self.warm_start,
            train: self.train_config(),
        }
    }

    pub fn pipeline_specs(&self) -> Result<Vec<PipelineSpec>> {
        if self.pipelines.is_empty() {
            return Err(Error::Config("no pipelines selected".into()));
        }
        self.pipelines
            .iter()
            .map(|name| {
                let mut p = PipelineSpec::by_name(name)?.with_mode(self.policy_mode);
                p.checkpoint = match p.name.as_str() {
                    "B3" => self.checkpoint_b3.clone(),
                    "KBPT" => self.checkpoint_kbpt.clone(),
                    _ => None,
                };
                Ok(p)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.q_grid.validate()?;
        self.r_grid.validate()?;
        if self.zscore_window < 2 {
            return Err(Error::Config("zscore_window must be at least 2".into()));
        }
        self.pipeline_specs()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded. The output location
    /// is left out so the same run written elsewhere hashes the same.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        config_hash(&c)
    }
}

pub fn config_hash<T: Serialize>(value: &T) -> String {
    let canonical = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&canonical))
}

/// Synthetic-data config: the generator spec plus where to write it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    #[serde(flatten)]
    pub spec: SyntheticSpec,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl SynthConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: SynthConfig =
            toml::from_str(&read_text(path)?).map_err(|e| Error::Config(e.message().to_string()))?;
        resolve(path.parent().unwrap_or(Path::new(".")), &mut cfg.out);
        Ok(cfg)
    }
}
