//! Feature extraction backbones.
//!
//! Two sources of crop descriptors exist: [`desk::DeskCnn`], a small
//! trainable convolutional network with explicit forward/backward passes,
//! and [`PrecomputedFeatures`], descriptors computed externally (e.g. by a
//! full-scale pretrained network) and shipped as a binary feature file.

mod checkpoint;
mod desk;
mod featfile;
mod train;

pub use checkpoint::{checkpoint_hash, load_checkpoint, save_checkpoint, BackboneBundle};
pub use desk::{DeskCnn, DeskCnnShape, ForwardCache, Gradients, Logits, NUM_CLASSES};
pub use featfile::{read_feature_file, write_feature_file, FeatureRecord};
pub use train::{finetune, weighted_softmax_xent, FinetuneOutcome, TrainConfig, TrainSample};

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

use crate::imageops::Crop;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("crop size {got} does not match backbone input size {expected}")]
    InputSizeMismatch { expected: usize, got: usize },
    #[error("feature vector for `{id}` crop {crop} has length {got}, expected {expected}")]
    DimensionMismatch { id: String, crop: u32, expected: usize, got: usize },
    #[error("no stored features for `{id}` crop {crop}")]
    MissingFeature { id: String, crop: u32 },
    #[error("non-finite value in feature vector for `{id}` crop {crop}")]
    NonFiniteFeature { id: String, crop: u32 },
    #[error("feature file {path}: {msg}")]
    FeatureFile { path: String, msg: String },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("non-finite loss at iteration {iteration} (lr {lr}); aborting")]
    NonFiniteLoss { iteration: usize, lr: f64 },
    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),
}

/// Fixed-length real descriptor of one crop.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f32>);

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

/// Anything that maps a preprocessed crop to a fixed-length descriptor.
///
/// Extraction must be a pure function of (parameters, crop).
pub trait FeatureExtractor {
    /// Square crop side expected by the extractor.
    fn input_size(&self) -> usize;
    /// Output descriptor length.
    fn feature_dim(&self) -> usize;
    fn extract(&self, crop: &Crop) -> Result<FeatureVector, BackboneError>;
}

/// Extract one descriptor per crop, in crop order.
pub fn extract_features(
    extractor: &dyn FeatureExtractor,
    crops: &[Crop],
) -> Result<Vec<FeatureVector>, BackboneError> {
    crops.iter().map(|c| extractor.extract(c)).collect()
}

/// Externally computed descriptors keyed by `(image id, crop index)`.
#[derive(Debug, Clone)]
pub struct PrecomputedFeatures {
    dim: usize,
    source_tag: String,
    map: HashMap<(String, u32), FeatureVector>,
}

impl PrecomputedFeatures {
    pub fn new(dim: usize, source_tag: String) -> Self {
        Self { dim, source_tag, map: HashMap::new() }
    }

    pub fn feature_dim(&self) -> usize {
        self.dim
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(
        &mut self,
        id: String,
        crop: u32,
        vector: FeatureVector,
    ) -> Result<(), BackboneError> {
        if vector.len() != self.dim {
            return Err(BackboneError::DimensionMismatch {
                id,
                crop,
                expected: self.dim,
                got: vector.len(),
            });
        }
        if vector.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(BackboneError::NonFiniteFeature { id, crop });
        }
        self.map.insert((id, crop), vector);
        Ok(())
    }

    /// Stored descriptor for one crop of one image, verbatim.
    pub fn lookup(&self, id: &str, crop: u32) -> Result<&FeatureVector, BackboneError> {
        self.map
            .get(&(id.to_string(), crop))
            .ok_or_else(|| BackboneError::MissingFeature { id: id.to_string(), crop })
    }

    /// Descriptors for crops `0..n` of an image.
    pub fn features_for(&self, id: &str, n_crops: usize) -> Result<Vec<FeatureVector>, BackboneError> {
        (0..n_crops as u32).map(|c| self.lookup(id, c).cloned()).collect()
    }

    /// Load from the binary feature-file format, length-checking every record.
    pub fn load(path: &Path) -> Result<Self, BackboneError> {
        let (dim, source_tag, records) = read_feature_file(path)?;
        let mut features = PrecomputedFeatures::new(dim, source_tag);
        for rec in records {
            features.insert(rec.id, rec.crop_index, rec.vector)?;
        }
        Ok(features)
    }

    /// Write to the binary feature-file format with records sorted by key,
    /// so identical contents always produce identical bytes.
    pub fn save(&self, path: &Path) -> Result<(), BackboneError> {
        let mut keys: Vec<&(String, u32)> = self.map.keys().collect();
        keys.sort();
        let records: Vec<FeatureRecord> = keys
            .into_iter()
            .map(|k| FeatureRecord {
                id: k.0.clone(),
                crop_index: k.1,
                vector: self.map[k].clone(),
            })
            .collect();
        write_feature_file(path, self.dim, &self.source_tag, &records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precomputed_lookup_and_dimension_checks() {
        let mut feats = PrecomputedFeatures::new(3, "ext".into());
        feats.insert("a".into(), 0, FeatureVector(vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(feats.lookup("a", 0).unwrap().as_slice(), &[1.0, 2.0, 3.0]);
        assert!(matches!(
            feats.lookup("a", 1),
            Err(BackboneError::MissingFeature { .. })
        ));
        assert!(matches!(
            feats.insert("b".into(), 0, FeatureVector(vec![1.0])),
            Err(BackboneError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            feats.insert("c".into(), 0, FeatureVector(vec![f32::NAN, 0.0, 0.0])),
            Err(BackboneError::NonFiniteFeature { .. })
        ));
    }

    #[test]
    fn empty_store_errors_on_any_lookup() {
        let feats = PrecomputedFeatures::new(4096, "ext".into());
        assert_eq!(feats.feature_dim(), 4096);
        assert!(feats.lookup("anything", 0).is_err());
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.biqf");
        let mut feats = PrecomputedFeatures::new(4, "imagenet-places".into());
        feats.insert("img1".into(), 0, FeatureVector(vec![0.5, -1.0, 2.0, 0.0])).unwrap();
        feats.insert("img1".into(), 1, FeatureVector(vec![1.5, 0.25, -2.0, 8.0])).unwrap();
        feats.insert("img2".into(), 0, FeatureVector(vec![0.0; 4])).unwrap();
        feats.save(&path).unwrap();
        let back = PrecomputedFeatures::load(&path).unwrap();
        assert_eq!(back.feature_dim(), 4);
        assert_eq!(back.source_tag(), "imagenet-places");
        assert_eq!(back.len(), 3);
        assert_eq!(back.lookup("img1", 1).unwrap(), feats.lookup("img1", 1).unwrap());
        // Saving twice produces identical bytes.
        let path2 = dir.path().join("features2.biqf");
        feats.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}
