//! Run configuration, checkpoint format, and dataset ingestion.

pub mod checkpoint;
pub mod dataset;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::factorize::{FactorizationPlan, PlanException, RankRatio};
use crate::train::TrainConfig;

/// Plan fields as they appear inside a run config (arch id comes from the
/// top level).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    pub k: usize,
    pub ratio: RankRatio,
    #[serde(default)]
    pub exceptions: Vec<PlanException>,
}

impl PlanConfig {
    pub fn to_plan(&self, arch_id: &str) -> FactorizationPlan {
        FactorizationPlan {
            arch_id: arch_id.to_string(),
            k: self.k,
            ratio: self.ratio,
            exceptions: self.exceptions.clone(),
        }
    }
}

/// JSON run configuration for `train` and `sweep-warmup`; schema-validated
/// (unknown fields rejected) before any work starts.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub arch_id: String,
    pub train: TrainConfig,
    /// Defaults to the architecture's published hybrid plan when absent.
    #[serde(default)]
    pub plan: Option<PlanConfig>,
    pub dataset: dataset::DatasetDescriptor,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| crate::error::Error::Config(format!("{}: {e}", path.display())))?;
        config.train.validate()?;
        Ok(config)
    }

    /// The resolved factorization plan for this run.
    pub fn plan(&self) -> Result<FactorizationPlan> {
        match &self.plan {
            Some(p) => {
                let model = crate::zoo::build_model(&self.arch_id, crate::zoo::ArchMode::Vanilla, None)?;
                crate::factorize::make_plan(&model, p.k, p.ratio, p.exceptions.clone())
            }
            None => crate::zoo::default_plan_for(&self.arch_id),
        }
    }
}

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use dataset::{load_dataset, Dataset, DatasetDescriptor};
