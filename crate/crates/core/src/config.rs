//! Experiment configuration: a flat key-value TOML file with sections.
//!
//! Every field has a declared default and the fully resolved configuration is
//! echoed into the emitted report for provenance.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::SplitProtocol;
use crate::fusion::{FusionConfig, FusionScheme, PoolOp};
use crate::imageops::DistortionKind;
use crate::regressor::SvrConfig;
use crate::synth::SynthSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub protocol: ProtocolSection,
    #[serde(default)]
    pub backbone: BackboneSection,
    #[serde(default)]
    pub preprocess: PreprocessSection,
    #[serde(default)]
    pub fusion: Vec<FusionEntry>,
    #[serde(default)]
    pub svr: SvrSection,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSection {
    pub manifest: PathBuf,
    /// Scale bounds; when absent they come from the manifest sidecar.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolKind {
    Challenge,
    Legacy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSection {
    pub kind: ProtocolKind,
    /// Defaults to 10 for challenge, 100 for legacy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repeats: Option<usize>,
    pub seed: u64,
}

impl ProtocolSection {
    pub fn split_protocol(&self) -> SplitProtocol {
        match self.kind {
            ProtocolKind::Challenge => {
                SplitProtocol::Challenge { repeats: self.repeats.unwrap_or(10) }
            }
            ProtocolKind::Legacy => SplitProtocol::Legacy { repeats: self.repeats.unwrap_or(100) },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    Desk,
    Precomputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSection {
    pub kind: BackboneKind,
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    /// Feature file path for precomputed backbones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

fn default_input_size() -> usize {
    64
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self { kind: BackboneKind::Desk, input_size: 64, path: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreprocessKind {
    CentralCrop,
    RandomCrops,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSection {
    pub mode: PreprocessKind,
    /// Shorter-side target before the central crop (central-crop mode).
    #[serde(default = "default_input_size")]
    pub resize_target: usize,
    /// Crop-count grid to sweep (random-crops mode).
    #[serde(default)]
    pub crop_counts: Vec<usize>,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        Self { mode: PreprocessKind::CentralCrop, resize_target: 64, crop_counts: Vec::new() }
    }
}

/// One fusion scheme to sweep; crossed with the crop-count grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionEntry {
    pub scheme: FusionScheme,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op: Option<PoolOp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvrSection {
    pub c: f64,
    pub epsilon: f64,
    pub tol: f64,
    pub max_passes: usize,
    /// Optional per-dimension z-scoring fit on the training fold.
    pub standardize: bool,
    /// C grid searched on the validation fold under the legacy protocol.
    pub legacy_c_grid: Vec<f64>,
}

impl Default for SvrSection {
    fn default() -> Self {
        Self {
            c: 1.0,
            epsilon: 0.1,
            tol: 1e-6,
            max_passes: 200,
            standardize: false,
            legacy_c_grid: vec![0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0],
        }
    }
}

impl SvrSection {
    pub fn svr_config(&self) -> SvrConfig {
        SvrConfig { c: self.c, epsilon: self.epsilon, tol: self.tol, max_passes: self.max_passes }
    }

    pub fn svr_config_with_c(&self, c: f64) -> SvrConfig {
        SvrConfig { c, ..self.svr_config() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneSection {
    pub enabled: bool,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub head_init_std: f64,
    pub freeze_depth: usize,
    /// Crops sampled per training image; defaults to the largest entry of
    /// the crop-count grid (or 1 in central-crop mode).
    pub train_crops: Option<usize>,
    /// Fine-tune inside each split's training fold (no test leakage). The
    /// alternative trains once on the full dataset before splitting.
    pub per_split: bool,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            enabled: false,
            iterations: 2000,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            head_init_std: 0.01,
            freeze_depth: 0,
            train_crops: None,
            per_split: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationSection {
    /// Significance level for crop-count selection.
    pub alpha: f64,
    /// Clip predictions to the MOS scale before computing metrics.
    pub clip_predictions: bool,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self { alpha: 0.05, clip_predictions: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSection {
    pub dir: PathBuf,
    #[serde(default = "default_true")]
    pub emit_model: bool,
    #[serde(default = "default_formats")]
    pub formats: Vec<String>,
}

fn default_true() -> bool {
    true
}

fn default_formats() -> Vec<String> {
    vec!["json".to_string(), "table".to_string()]
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// The fusion sweep: each fusion entry crossed with the crop-count grid.
    pub fn fusion_configs(&self) -> Vec<FusionConfig> {
        let mut out = Vec::new();
        for entry in &self.fusion {
            for &n in &self.preprocess.crop_counts {
                out.push(FusionConfig { scheme: entry.scheme, op: entry.op, n_crops: n });
            }
        }
        out
    }

    pub fn train_crops(&self) -> usize {
        self.finetune.train_crops.unwrap_or_else(|| {
            self.preprocess.crop_counts.iter().copied().max().unwrap_or(1)
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if let (Some(min), Some(max)) = (self.dataset.scale_min, self.dataset.scale_max) {
            if !(min < max) {
                return fail(format!("scale_min {min} must be < scale_max {max}"));
            }
        }
        if self.dataset.scale_min.is_some() != self.dataset.scale_max.is_some() {
            return fail("scale_min and scale_max must be given together".into());
        }
        if let Some(0) = self.protocol.repeats {
            return fail("protocol.repeats must be >= 1".into());
        }
        match self.backbone.kind {
            BackboneKind::Precomputed => {
                if self.backbone.path.is_none() {
                    return fail("precomputed backbone requires backbone.path".into());
                }
                if self.finetune.enabled {
                    return fail("fine-tuning requires the desk backbone".into());
                }
            }
            BackboneKind::Desk => {
                if self.backbone.input_size < 12 {
                    return fail(format!(
                        "backbone.input_size {} too small",
                        self.backbone.input_size
                    ));
                }
            }
        }
        match self.preprocess.mode {
            PreprocessKind::CentralCrop => {
                if !self.fusion.is_empty() {
                    return fail("central-crop mode forbids fusion sweeps".into());
                }
                if !self.preprocess.crop_counts.is_empty() {
                    return fail("central-crop mode takes no crop_counts".into());
                }
                if self.preprocess.resize_target < self.backbone.input_size {
                    return fail(format!(
                        "resize_target {} smaller than backbone input {}",
                        self.preprocess.resize_target, self.backbone.input_size
                    ));
                }
            }
            PreprocessKind::RandomCrops => {
                if self.fusion.is_empty() {
                    return fail("random-crops mode needs at least one [[fusion]] entry".into());
                }
                if self.preprocess.crop_counts.is_empty() {
                    return fail("random-crops mode needs a non-empty crop_counts grid".into());
                }
                if self.preprocess.crop_counts.contains(&0) {
                    return fail("crop_counts entries must be >= 1".into());
                }
                for cfg in self.fusion_configs() {
                    cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
                }
            }
        }
        if !(self.svr.c > 0.0) || !(self.svr.epsilon >= 0.0) || !(self.svr.tol > 0.0) {
            return fail("svr requires c > 0, epsilon >= 0, tol > 0".into());
        }
        if self.finetune.enabled {
            if self.finetune.iterations == 0 || self.finetune.batch_size == 0 {
                return fail("finetune.iterations and batch_size must be >= 1".into());
            }
            if !(0.0..1.0).contains(&self.finetune.momentum) {
                return fail("finetune.momentum must be in [0, 1)".into());
            }
        }
        if !(0.0 < self.evaluation.alpha && self.evaluation.alpha < 1.0) {
            return fail("evaluation.alpha must be in (0, 1)".into());
        }
        Ok(())
    }
}

/// Config for the `synth` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default = "default_synth_name")]
    pub name: String,
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default = "default_input_size")]
    pub size: usize,
    #[serde(default = "default_kinds")]
    pub kinds: Vec<DistortionKind>,
    #[serde(default = "default_levels")]
    pub levels: Vec<f64>,
    #[serde(default = "default_base_mos")]
    pub base_mos: f64,
    #[serde(default = "default_mos_per_level")]
    pub mos_per_level: f64,
    #[serde(default = "default_mos_std")]
    pub mos_std: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mos_jitter_std: Option<f64>,
}

fn default_synth_name() -> String {
    "synth".to_string()
}
fn default_count() -> usize {
    200
}
fn default_kinds() -> Vec<DistortionKind> {
    vec![DistortionKind::GaussianBlur]
}
fn default_levels() -> Vec<f64> {
    vec![0.0, 1.0, 2.0, 3.0, 4.0]
}
fn default_base_mos() -> f64 {
    100.0
}
fn default_mos_per_level() -> f64 {
    20.0
}
fn default_mos_std() -> f64 {
    5.0
}

impl SynthConfig {
    pub fn spec(&self) -> SynthSpec {
        SynthSpec {
            name: self.name.clone(),
            count: self.count,
            size: self.size,
            kinds: self.kinds.clone(),
            levels: self.levels.clone(),
            base_mos: self.base_mos,
            mos_per_level: self.mos_per_level,
            mos_std: self.mos_std,
            mos_jitter_std: self.mos_jitter_std,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
[dataset]
manifest = "data/manifest.csv"

[protocol]
kind = "challenge"
repeats = 5
seed = 42

[backbone]
kind = "desk"
input_size = 64

[preprocess]
mode = "random-crops"
crop_counts = [5, 10]

[[fusion]]
scheme = "prediction-pool"
op = "avg"

[[fusion]]
scheme = "feature-concat"

[finetune]
enabled = true
iterations = 100

[output]
dir = "out"
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = ExperimentConfig::from_toml_str(SAMPLE).unwrap();
        assert_eq!(cfg.protocol.seed, 42);
        assert_eq!(cfg.protocol.split_protocol(), SplitProtocol::Challenge { repeats: 5 });
        assert_eq!(cfg.fusion_configs().len(), 4);
        assert_eq!(cfg.train_crops(), 10);
        assert!(cfg.finetune.enabled);
        // Defaults resolved.
        assert_eq!(cfg.svr.c, 1.0);
        assert_eq!(cfg.evaluation.alpha, 0.05);
        let echoed = cfg.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&echoed).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn rejects_central_crop_with_fusion() {
        let text = SAMPLE.replace("mode = \"random-crops\"", "mode = \"central-crop\"");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)), "{err}");
    }

    #[test]
    fn rejects_finetune_on_precomputed() {
        let text = SAMPLE
            .replace("kind = \"desk\"", "kind = \"precomputed\"\npath = \"features.biqf\"");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("desk backbone"), "{err}");
    }

    #[test]
    fn rejects_missing_op_for_pooling_scheme() {
        let text = SAMPLE.replace(
            "scheme = \"prediction-pool\"\nop = \"avg\"",
            "scheme = \"prediction-pool\"",
        );
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn legacy_defaults_to_100_repeats() {
        let text = SAMPLE.replace("kind = \"challenge\"\nrepeats = 5", "kind = \"legacy\"");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg.protocol.split_protocol(), SplitProtocol::Legacy { repeats: 100 });
    }

    #[test]
    fn synth_config_defaults() {
        let cfg: SynthConfig =
            toml::from_str("seed = 7\nout_dir = \"data\"\nmos_jitter_std = 5.0").unwrap();
        let spec = cfg.spec();
        assert_eq!(spec.count, 200);
        assert_eq!(spec.size, 64);
        assert_eq!(spec.levels, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(spec.mos_jitter_std, Some(5.0));
    }
}
