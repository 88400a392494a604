//! Serializable quality models.
//!
//! A quality model bundles everything needed to score a new image: a
//! reference to its backbone (a desk checkpoint hash or a precomputed-source
//! tag), the preprocessing recipe, the fusion configuration and the trained
//! SVR. The on-disk format is a versioned envelope around a JSON payload
//! with a trailing SHA-256 checksum; JSON f64 round-trips are exact, so a
//! saved and reloaded model predicts bit-identically.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backbone::BackboneBundle;
use crate::fusion::FusionConfig;
use crate::regressor::LinearSvrModel;

const MAGIC: &[u8; 4] = b"BIQM";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("model file {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("unsupported model version {got} (supported: {supported})")]
    Version { got: u32, supported: u32 },
    #[error("checksum mismatch (corrupted or truncated model file)")]
    Checksum,
    #[error("backbone checkpoint hash mismatch: model expects {expected}, found {got}")]
    BackboneHashMismatch { expected: String, got: String },
    #[error("model references a precomputed feature source `{0}`; it cannot score raw images")]
    PrecomputedBackbone(String),
}

/// How the model's features are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackboneRef {
    /// Trainable desk network, identified by its checkpoint content hash.
    DeskCheckpoint { hash: String, input_size: usize },
    /// Externally computed descriptors.
    Precomputed { tag: String, dim: usize },
}

/// Preprocessing recipe applied before extraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum ModelPreprocess {
    /// Resize the shorter side, then take the central crop.
    CentralCrop { resize_target: usize },
    /// Seeded random crops at the original scale.
    RandomCrops,
}

/// Optional per-dimension standardization fit on the training fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn apply(&self, x: &mut [f64]) {
        for ((v, m), s) in x.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityModel {
    pub format_version: u32,
    pub backbone: BackboneRef,
    pub preprocess: ModelPreprocess,
    /// Present for random-crop models; `None` for central-crop ones.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub standardizer: Option<Standardizer>,
    pub svr: LinearSvrModel,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl QualityModel {
    /// Verify that a loaded backbone checkpoint is the one this model was
    /// trained with.
    pub fn verify_backbone(&self, bundle_hash: &str) -> Result<(), ModelError> {
        match &self.backbone {
            BackboneRef::DeskCheckpoint { hash, .. } => {
                if hash != bundle_hash {
                    Err(ModelError::BackboneHashMismatch {
                        expected: hash.clone(),
                        got: bundle_hash.to_string(),
                    })
                } else {
                    Ok(())
                }
            }
            BackboneRef::Precomputed { tag, .. } => {
                Err(ModelError::PrecomputedBackbone(tag.clone()))
            }
        }
    }

    /// Conventional sibling path of the backbone checkpoint
    /// (`model.biqm` -> `model.biqn`).
    pub fn sibling_checkpoint_path(model_path: &Path) -> PathBuf {
        model_path.with_extension("biqn")
    }
}

pub fn save_model(model: &QualityModel, path: &Path) -> Result<(), ModelError> {
    let payload = serde_json::to_vec(model).expect("model serializes");
    let mut bytes = Vec::with_capacity(payload.len() + 48);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&payload);
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    fs::write(path, bytes).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })
}

pub fn load_model(path: &Path) -> Result<QualityModel, ModelError> {
    let bytes =
        fs::read(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
    let fail = |msg: &str| ModelError::Format { path: path.to_path_buf(), msg: msg.into() };
    if bytes.len() < 4 + 4 + 8 + 32 {
        return Err(ModelError::Checksum);
    }
    let (body, stored_digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != stored_digest {
        return Err(ModelError::Checksum);
    }
    if &body[..4] != MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(ModelError::Version { got: version, supported: VERSION });
    }
    let len = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    if body.len() != 16 + len {
        return Err(fail("payload length mismatch"));
    }
    let model: QualityModel =
        serde_json::from_slice(&body[16..]).map_err(|e| fail(&e.to_string()))?;
    Ok(model)
}

/// Load a model and resolve + verify its desk backbone checkpoint.
pub fn load_model_with_backbone(
    model_path: &Path,
    checkpoint_path: &Path,
) -> Result<(QualityModel, BackboneBundle), ModelError> {
    let model = load_model(model_path)?;
    let (bundle, hash) =
        crate::backbone::load_checkpoint(checkpoint_path).map_err(|e| ModelError::Format {
            path: checkpoint_path.to_path_buf(),
            msg: e.to_string(),
        })?;
    model.verify_backbone(&hash)?;
    Ok((model, bundle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{FusionScheme, PoolOp};
    use crate::regressor::SvrConfig;

    fn sample_model() -> QualityModel {
        QualityModel {
            format_version: VERSION,
            backbone: BackboneRef::DeskCheckpoint { hash: "abc123".into(), input_size: 64 },
            preprocess: ModelPreprocess::RandomCrops,
            fusion: Some(FusionConfig {
                scheme: FusionScheme::PredictionPool,
                op: Some(PoolOp::Avg),
                n_crops: 10,
            }),
            standardizer: None,
            svr: LinearSvrModel {
                w: vec![0.123456789012345678, -7.5e-11, 42.0],
                b: 55.5,
                config: SvrConfig::default(),
                feature_dim: 3,
                n_samples: 160,
            },
            scale_min: 0.0,
            scale_max: 100.0,
        }
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.biqm");
        let model = sample_model();
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(model, back);
        // Bit-exact weights -> identical predictions to 0 ulp.
        for (a, b) in model.svr.w.iter().zip(&back.svr.w) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(model.svr.b.to_bits(), back.svr.b.to_bits());
    }

    #[test]
    fn truncated_file_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.biqm");
        save_model(&sample_model(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_model(&path), Err(ModelError::Checksum)));
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.biqm");
        save_model(&sample_model(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[20] ^= 0x01;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_model(&path), Err(ModelError::Checksum)));
    }

    #[test]
    fn backbone_verification() {
        let model = sample_model();
        assert!(model.verify_backbone("abc123").is_ok());
        assert!(matches!(
            model.verify_backbone("other"),
            Err(ModelError::BackboneHashMismatch { .. })
        ));
        let precomputed = QualityModel {
            backbone: BackboneRef::Precomputed { tag: "ext".into(), dim: 4096 },
            ..sample_model()
        };
        assert!(matches!(
            precomputed.verify_backbone("whatever"),
            Err(ModelError::PrecomputedBackbone(_))
        ));
    }
}
