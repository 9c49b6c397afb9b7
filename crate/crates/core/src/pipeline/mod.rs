//! Stage-by-stage orchestration over an output directory: synthetic data,
//! preprocessing, training, evaluation and explanation artifacts.

mod compare;
mod config;
mod pairing;
pub mod plot;
mod run;
mod stages;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

pub use compare::{compare_models, Comparison, ComparisonRow, COMPARISON_METRICS};
pub use config::{
    CnnSection, CohortConfig, EvaluateConfig, ExperimentConfig, ExplainConfig, FusionSection, ImagesConfig, MlpSection,
    PairingPolicy, PathsConfig,
};
pub use pairing::{pair_modalities, read_pairing_table, CohortIndex, Pair, PairedDataset};
pub use run::{resolve_output_dir, run_pipeline, run_stage, LedgerEntry, RunState, StageSummary, LEDGER_FILE, LOCK_FILE, OUTPUT_ENV, RUN_FILE};
pub use stages::{TabularSplit, TABULAR_CLASSES};

use crate::eval::EvalError;
use crate::gbdt::GbdtError;
use crate::neural::NeuralError;
use crate::patch::PatchError;
use crate::tabular::TabularError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    SynthImages,
    SynthCohort,
    Extract,
    PrepTab,
    TrainCnn,
    TrainMlp,
    TrainGbdt,
    TrainFusion,
    Evaluate,
    ExplainGradcam,
    ExplainShap,
}

impl Stage {
    /// Execution order of a full run.
    pub const ALL: [Stage; 11] = [
        Stage::SynthImages,
        Stage::SynthCohort,
        Stage::Extract,
        Stage::PrepTab,
        Stage::TrainCnn,
        Stage::TrainMlp,
        Stage::TrainGbdt,
        Stage::TrainFusion,
        Stage::Evaluate,
        Stage::ExplainGradcam,
        Stage::ExplainShap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::SynthImages => "synth-images",
            Stage::SynthCohort => "synth-cohort",
            Stage::Extract => "extract",
            Stage::PrepTab => "prep-tab",
            Stage::TrainCnn => "train-cnn",
            Stage::TrainMlp => "train-mlp",
            Stage::TrainGbdt => "train-gbdt",
            Stage::TrainFusion => "train-fusion",
            Stage::Evaluate => "evaluate",
            Stage::ExplainGradcam => "explain-gradcam",
            Stage::ExplainShap => "explain-shap",
        }
    }

    /// Artifacts that must exist before the stage starts, relative to the
    /// output directory. Training stages only ever see train and val files.
    pub fn inputs(self) -> &'static [&'static str] {
        match self {
            Stage::SynthImages | Stage::SynthCohort => &[],
            Stage::Extract => &["slides/index.json"],
            Stage::PrepTab => &["cohort/cohort.csv", "cohort/schema.json"],
            Stage::TrainCnn => &["patches/manifest_train.json", "patches/manifest_val.json"],
            Stage::TrainMlp => &["tabular/neural_train.json", "tabular/neural_val.json"],
            Stage::TrainGbdt => &["tabular/gbdt_train.json", "tabular/gbdt_val.json"],
            Stage::TrainFusion => &[
                "models/cnn.ckpt",
                "models/mlp.ckpt",
                "patches/manifest_train.json",
                "patches/manifest_val.json",
                "tabular/neural_train.json",
                "tabular/neural_val.json",
            ],
            Stage::Evaluate => &[
                "models/cnn.ckpt",
                "models/mlp.ckpt",
                "models/gbdt.json",
                "models/fusion.ckpt",
                "patches/manifest_test.json",
                "tabular/neural_val.json",
                "tabular/neural_test.json",
                "tabular/gbdt_val.json",
                "tabular/gbdt_test.json",
            ],
            Stage::ExplainGradcam => &["models/cnn.ckpt", "patches/manifest_test.json"],
            Stage::ExplainShap => &["models/gbdt.json", "tabular/gbdt_test.json"],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| PipelineError::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("bad config: {0}")]
    Config(String),
    #[error("output directory was created by config {expected}, refusing to overwrite it with config {found}")]
    ConfigMismatch { expected: String, found: String },
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("output directory {} is locked by another run (remove the lock file if that run is dead)", .0.display())]
    Locked(PathBuf),
    #[error("patch ids without a pairing: {0:?}")]
    Unmatched(Vec<String>),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl PipelineError {
    /// 2 bad config, 3 missing artifact, 4 numerical failure, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::ConfigMismatch { .. } | PipelineError::Unmatched(_) => 2,
            PipelineError::MissingArtifact(_) => 3,
            PipelineError::Numerical(_) => 4,
            _ => 1,
        }
    }
}

impl From<NeuralError> for PipelineError {
    fn from(e: NeuralError) -> Self {
        match e {
            NeuralError::NonFiniteLoss { .. } => PipelineError::Numerical(e.to_string()),
            NeuralError::InvalidConfig(m) => PipelineError::Config(m),
            e => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<GbdtError> for PipelineError {
    fn from(e: GbdtError) -> Self {
        match e {
            GbdtError::InvalidConfig(m) => PipelineError::Config(m),
            e => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<PatchError> for PipelineError {
    fn from(e: PatchError) -> Self {
        match e {
            PatchError::InvalidConfig(m) => PipelineError::Config(m),
            e => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<TabularError> for PipelineError {
    fn from(e: TabularError) -> Self {
        match e {
            TabularError::InvalidConfig(m) => PipelineError::Config(m),
            e => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::NonFinite(m) => PipelineError::Numerical(m),
            e => PipelineError::Data(e.to_string()),
        }
    }
}
