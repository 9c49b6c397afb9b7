use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::eval::CalibrationMethod;
use crate::gbdt::GbdtConfig;
use crate::neural::{FusionConfig, MlpConfig, MlpOutput, SimpleCnnConfig, TrainPolicy};
use crate::patch::{SynthSlideSpec, PATCH_SIZE};
use crate::tabular::{CohortSpec, PreprocessConfig};

/// Everything a run needs. Nested `seed` fields are overwritten by seeds
/// derived from the top-level `seed`, so one number controls a whole run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub images: ImagesConfig,
    pub cohort: CohortConfig,
    pub pairing: PairingPolicy,
    pub cnn: CnnSection,
    pub mlp: MlpSection,
    pub gbdt: GbdtConfig,
    pub fusion: FusionSection,
    pub evaluate: EvaluateConfig,
    pub explain: ExplainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Output directory; relative paths resolve against the config file.
    pub output_dir: Option<PathBuf>,
    /// `patch_id,row_id` CSV for the explicit-map pairing policy.
    pub pairing_table: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImagesConfig {
    pub synth: SynthSlideSpec,
    pub patch_size: u32,
    /// Train / val / test fractions.
    pub split: Vec<f64>,
    pub stratify: bool,
}

impl Default for ImagesConfig {
    fn default() -> Self {
        ImagesConfig {
            synth: SynthSlideSpec::default(),
            patch_size: PATCH_SIZE,
            split: vec![0.7, 0.15, 0.15],
            stratify: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub synth: CohortSpec,
    pub preprocess: PreprocessConfig,
    pub split: Vec<f64>,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            synth: CohortSpec::default(),
            preprocess: PreprocessConfig::default(),
            split: vec![0.7, 0.15, 0.15],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum PairingPolicy {
    /// Seeded hashing of patch ids onto cohort rows of the same split.
    HashAssign {
        /// Probability that a patch of each class draws a positive
        /// (high-risk) patient, indexed by class.
        positive_rate: [f64; 3],
    },
    /// Pairs read verbatim from `paths.pairing_table`.
    ExplicitMap,
}

impl Default for PairingPolicy {
    fn default() -> Self {
        PairingPolicy::HashAssign {
            positive_rate: [0.1, 0.1, 0.9],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnnSection {
    pub model: SimpleCnnConfig,
    pub train: TrainPolicy,
}

impl Default for CnnSection {
    fn default() -> Self {
        CnnSection {
            model: SimpleCnnConfig::default(),
            train: TrainPolicy::cnn(),
        }
    }
}

/// The input width is taken from the preprocessed table at run time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpSection {
    pub model: MlpConfig,
    pub train: TrainPolicy,
}

impl Default for MlpSection {
    fn default() -> Self {
        MlpSection {
            model: MlpConfig::default(),
            train: TrainPolicy::mlp(),
        }
    }
}

/// Branch widths are taken from the trained branch models at run time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionSection {
    pub model: FusionConfig,
    pub train: TrainPolicy,
}

impl Default for FusionSection {
    fn default() -> Self {
        FusionSection {
            model: FusionConfig::default(),
            train: TrainPolicy::fusion(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    /// Calibration fitted on validation scores of the tabular models.
    /// Written as "none" when disabled.
    #[serde(with = "calibration_field")]
    pub calibration: Option<CalibrationMethod>,
    pub ece_bins: usize,
}

mod calibration_field {
    use super::CalibrationMethod;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(rename_all = "snake_case")]
    enum Repr {
        None,
        Platt,
        Isotonic,
    }

    pub fn serialize<S: Serializer>(v: &Option<CalibrationMethod>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => Repr::None,
            Some(CalibrationMethod::Platt) => Repr::Platt,
            Some(CalibrationMethod::Isotonic) => Repr::Isotonic,
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<CalibrationMethod>, D::Error> {
        Ok(match Repr::deserialize(d)? {
            Repr::None => None,
            Repr::Platt => Some(CalibrationMethod::Platt),
            Repr::Isotonic => Some(CalibrationMethod::Isotonic),
        })
    }
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            calibration: Some(CalibrationMethod::Isotonic),
            ece_bins: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    pub gradcam_patches: usize,
    pub overlay_alpha: f64,
    pub shap_rows: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            gradcam_patches: 8,
            overlay_alpha: 0.4,
            shap_rows: 200,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            paths: PathsConfig::default(),
            images: ImagesConfig::default(),
            cohort: CohortConfig::default(),
            pairing: PairingPolicy::default(),
            cnn: CnnSection::default(),
            mlp: MlpSection::default(),
            gbdt: GbdtConfig::default(),
            fusion: FusionSection::default(),
            evaluate: EvaluateConfig::default(),
            explain: ExplainConfig::default(),
        }
    }
}

fn bad(msg: impl Into<String>) -> PipelineError {
    PipelineError::Config(msg.into())
}

fn check_fractions(name: &str, f: &[f64]) -> Result<(), PipelineError> {
    if f.len() != 3 || f.iter().any(|v| !(0.0..=1.0).contains(v)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(bad(format!("{name} must be three fractions summing to 1, got {f:?}")));
    }
    if f.iter().any(|&v| v == 0.0) {
        return Err(bad(format!("{name} needs nonempty train, val and test splits")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| bad(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Parses, resolves relative paths against the file's directory and
    /// validates.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(p) = p.as_mut().filter(|p| p.is_relative()) {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.paths.output_dir);
        resolve(&mut cfg.paths.pairing_table);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex_digest(self.to_toml().as_bytes())
    }

    /// Per-purpose seed derived from the top-level seed.
    pub fn derived_seed(&self, purpose: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(purpose.as_bytes());
        u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.images.synth.validate().map_err(|e| bad(e.to_string()))?;
        if self.images.patch_size == 0 || self.images.patch_size > self.images.synth.cell {
            return Err(bad("patch_size must be positive and fit one synthetic cell"));
        }
        if self.cnn.model.input_size != self.images.patch_size as usize || self.cnn.model.in_channels != 3 {
            return Err(bad(format!(
                "cnn expects {}-px {}-channel input but patches are {}-px RGB",
                self.cnn.model.input_size, self.cnn.model.in_channels, self.images.patch_size
            )));
        }
        if self.cnn.model.classes != 3 || self.fusion.model.classes != 3 {
            return Err(bad("image and fusion models predict the three patch classes"));
        }
        if self.mlp.model.classes != 2 && self.mlp.model.output == MlpOutput::Softmax {
            return Err(bad("the tabular target is binary; mlp.model.classes must be 2"));
        }
        check_fractions("images.split", &self.images.split)?;
        check_fractions("cohort.split", &self.cohort.split)?;
        let s = &self.cohort.synth;
        if s.n == 0 || !(s.prevalence > 0.0 && s.prevalence < 1.0) {
            return Err(bad("cohort needs n > 0 and prevalence in (0, 1)"));
        }
        self.cnn.model.validate().map_err(|e| bad(e.to_string()))?;
        for (name, p) in [("cnn", &self.cnn.train), ("mlp", &self.mlp.train), ("fusion", &self.fusion.train)] {
            p.validate().map_err(|e| bad(format!("{name}.train: {e}")))?;
        }
        self.gbdt.validate().map_err(|e| bad(e.to_string()))?;
        if !(self.fusion.model.dropout >= 0.0 && self.fusion.model.dropout < 1.0) || self.fusion.model.hidden.is_empty() {
            return Err(bad("fusion head needs hidden layers and dropout in [0, 1)"));
        }
        if self.evaluate.ece_bins == 0 {
            return Err(bad("evaluate.ece_bins must be positive"));
        }
        if !(0.0..=1.0).contains(&self.explain.overlay_alpha) {
            return Err(bad("explain.overlay_alpha must lie in [0, 1]"));
        }
        match &self.pairing {
            PairingPolicy::HashAssign { positive_rate } => {
                if positive_rate.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(bad(format!("pairing rates {positive_rate:?} must lie in [0, 1]")));
                }
            }
            PairingPolicy::ExplicitMap => match &self.paths.pairing_table {
                None => return Err(bad("explicit-map pairing needs paths.pairing_table")),
                Some(p) if !p.is_file() => {
                    return Err(PipelineError::MissingArtifact(p.clone()));
                }
                Some(_) => {}
            },
        }
        Ok(())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
