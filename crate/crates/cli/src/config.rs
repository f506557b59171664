//! The JSON run configuration read by `train` and `profile`.

use std::path::Path;

use rankswitch_core::data::Dataset;
use rankswitch_core::profiler::{ClockKind, ProfilerConfig};
use rankswitch_core::train::PrefixSelection;
use rankswitch_core::{Error, ModelSpec, Result, TrainConfig};
use serde::Deserialize;

pub const SEED_ENV: &str = "CF_SEED";
const DEFAULT_HIDDEN: [usize; 2] = [256, 256];

/// Trainer fields at the top level, plus the model and profiling knobs.
#[derive(Debug, Clone, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    /// Defaults to a two-hidden-layer MLP sized from the data.
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub profiler: ProfilerConfig,
    /// Clock used to pick `K` during training.
    #[serde(default = "default_train_clock")]
    pub clock: ClockKind,
    /// Fixed prefix `K`; skips profiling when set.
    #[serde(default, rename = "K")]
    pub prefix: Option<usize>,
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
}

fn default_train_clock() -> ClockKind {
    ClockKind::Flop
}

fn default_eval_fraction() -> f64 {
    0.125
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Apply the seed precedence: flag, then `CF_SEED`, then the file.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<()> {
        if let Some(seed) = flag {
            self.train.seed = seed;
        } else if let Ok(raw) = std::env::var(SEED_ENV) {
            self.train.seed = raw
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}='{raw}' is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn prefix_selection(&self) -> PrefixSelection {
        match self.prefix {
            Some(k) => PrefixSelection::Fixed { k },
            None => PrefixSelection::Profile {
                config: self.profiler,
                clock: self.clock,
            },
        }
    }

    pub fn model_for(&self, data: &Dataset) -> ModelSpec {
        self.model.clone().unwrap_or_else(|| {
            let mut spec = ModelSpec::mlp(data.features.cols(), &DEFAULT_HIDDEN, data.num_classes);
            spec.input = data.shape;
            spec
        })
    }

    /// Without data the default model is the one for the builtin rank-2 task.
    pub fn model_or_default(&self) -> ModelSpec {
        self.model.clone().unwrap_or_else(|| ModelSpec::mlp(64, &DEFAULT_HIDDEN, 10))
    }
}
