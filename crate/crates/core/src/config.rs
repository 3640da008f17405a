//! JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{Norm, PerturbationSet};
use crate::backbone::{build_plan, BackbonePlan, PlanDescription};
use crate::checkpoint::sha256_hex;
use crate::data::{read_cifar10_binary, Dataset, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::hypernet::HypernetConfig;
use crate::training::{Strategy, TrainConfig};

/// Where examples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSpec {
    Synthetic(SynthSpec),
    /// Directory holding `data_batch_{1..5}.bin` and `test_batch.bin`.
    Cifar10 { dir: PathBuf },
}

impl DataSpec {
    pub fn load(&self, split: Split) -> Result<Dataset> {
        match self {
            DataSpec::Synthetic(s) => s.generate(split),
            DataSpec::Cifar10 { dir } => {
                let files: Vec<PathBuf> = match split {
                    Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
                    Split::Test => vec![dir.join("test_batch.bin")],
                };
                read_cifar10_binary(&files, split)
            }
        }
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub plan: PlanDescription,
    pub hypernet: HypernetConfig,
    pub perturbations: PerturbationSet,
    pub train: TrainConfig,
    pub data: DataSpec,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Norm trained against by the `single` strategy when the set has several.
    #[serde(default)]
    pub single_norm: Option<Norm>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Replaces `train.seed` and `eval.seed`.
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve_seed()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| e.context(path.display().to_string()))
    }

    fn resolve_seed(&mut self) -> Result<()> {
        for (field, v) in [("train.seed", self.train.seed), ("eval.seed", self.eval.seed)] {
            if v != 0 && v != self.seed {
                return Err(Error::Config(format!("{field}: {v} conflicts with seed {}; set only the top-level seed", self.seed)));
            }
        }
        self.set_seed(self.seed);
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
    }

    pub fn set_workers(&mut self, workers: usize) {
        self.train.workers = workers;
        self.eval.workers = workers;
    }

    pub fn validate(&self) -> Result<()> {
        self.hypernet.validate().map_err(|e| Error::Config(format!("hypernet: {}", e.message())))?;
        self.plan_checked()?;
        self.perturbations.validate().map_err(|e| Error::Config(e.message()))?;
        self.train.validate().map_err(|e| Error::Config(format!("train: {}", e.message())))?;
        if self.eval.batch_size == 0 || self.eval.workers == 0 {
            return Err(Error::Config("eval: batch_size and workers must be positive".into()));
        }
        if let DataSpec::Synthetic(s) = &self.data {
            s.validate().map_err(|e| Error::Config(format!("data: {}", e.message())))?;
            if s.size != self.plan.input_shape {
                return Err(Error::Config(format!(
                    "data.size: {:?} differs from plan.input_shape {:?}",
                    s.size, self.plan.input_shape
                )));
            }
            if s.classes != self.plan.num_classes {
                return Err(Error::Config(format!(
                    "data.classes: {} differs from plan.num_classes {}",
                    s.classes, self.plan.num_classes
                )));
            }
        }
        if self.train.strategy == Strategy::Single {
            self.single_spec_index()?;
        } else if self.single_norm.is_some() {
            return Err(Error::Config("single_norm: only meaningful with strategy single".into()));
        }
        Ok(())
    }

    fn plan_checked(&self) -> Result<BackbonePlan> {
        build_plan(self.plan.clone(), self.hypernet.unit()).map_err(|e| Error::Config(format!("plan.{}", e.message())))
    }

    pub fn build_plan(&self) -> Result<BackbonePlan> {
        self.plan_checked()
    }

    /// Index into the perturbation set used by the `single` strategy.
    pub fn single_spec_index(&self) -> Result<usize> {
        match self.single_norm {
            Some(n) => self
                .perturbations
                .norms()
                .iter()
                .position(|&m| m == n)
                .ok_or_else(|| Error::Config(format!("single_norm: {n} is not in perturbations"))),
            None if self.perturbations.len() == 1 => Ok(0),
            None => Err(Error::Config("single_norm: required when perturbations has several norms".into())),
        }
    }

    /// SHA-256 of the canonical JSON of everything that influences results.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.set_workers(1);
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }
}
