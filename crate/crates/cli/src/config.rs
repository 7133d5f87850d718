use std::path::{Path, PathBuf};

use credence_core::estimator::FitConfig;
use credence_core::prediction::{AcceptanceTaskConfig, RecoveryConfig, RemovalTaskConfig};
use credence_core::report::ReportConfig;
use credence_core::simulator::SyntheticConfig;
use credence_core::TraceSchema;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// One experiment run. Every section has defaults; the effective config
/// (defaults and command-line overrides filled in) is written next to the
/// outputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides the seeds of the simulate, fit and predict sections.
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    /// `error`, `warn`, `info`, `debug` or `trace`.
    pub log_level: Option<String>,
    /// Name of the model time unit; only echoed in outputs.
    pub time_unit: Option<String>,
    pub input: InputConfig,
    pub simulate: Option<SyntheticConfig>,
    pub fit: FitConfig,
    pub predict: PredictConfig,
    pub recover: RecoveryConfig,
    pub report: ReportConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    /// Trace file (JSONL).
    pub events: Option<PathBuf>,
    /// Topic weights file (JSONL); required when `n_topics > 1`.
    pub topics: Option<PathBuf>,
    pub n_topics: usize,
    /// Fitted parameters, for `report`.
    pub params: Option<PathBuf>,
    /// Ground-truth parameters, for `recover`.
    pub truth: Option<PathBuf>,
    pub schema: TraceSchema,
}

impl Default for InputConfig {
    fn default() -> Self {
        InputConfig {
            events: None,
            topics: None,
            n_topics: 1,
            params: None,
            truth: None,
            schema: TraceSchema::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    #[default]
    Removal,
    Acceptance,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    pub task: Task,
    pub removal: RemovalTaskConfig,
    pub acceptance: AcceptanceTaskConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {}", e.message())))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Runtime(format!("serializing config: {e}")))
    }

    /// Resolves relative input paths against `base`.
    pub fn rebase(&mut self, base: &Path) {
        for p in [
            &mut self.input.events,
            &mut self.input.topics,
            &mut self.input.params,
            &mut self.input.truth,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    /// Pushes the run seed into every seeded section.
    pub fn apply_seed(&mut self) {
        if let Some(seed) = self.seed {
            if let Some(sim) = self.simulate.as_mut() {
                sim.seed = seed;
            }
            self.fit.cv_seed = seed;
            self.predict.removal.seed = seed;
            self.predict.acceptance.seed = seed;
        }
    }
}
