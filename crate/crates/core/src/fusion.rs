//! Crop-information fusion: elementwise feature pooling, feature
//! concatenation, and prediction pooling.

use std::fmt;

use thiserror::Error;

use crate::backbone::FeatureVector;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("cannot fuse an empty list")]
    Empty,
    #[error("ragged feature lengths: expected {expected}, found {got}")]
    RaggedLengths { expected: usize, got: usize },
    #[error("fusion config invalid: {0}")]
    InvalidConfig(String),
}

/// Elementwise pooling operator. `Avg` is the exact arithmetic mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolOp {
    Min,
    Avg,
    Max,
}

impl fmt::Display for PoolOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolOp::Min => "min",
            PoolOp::Avg => "avg",
            PoolOp::Max => "max",
        })
    }
}

/// The three fusion schemes over per-crop information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionScheme {
    FeaturePool,
    FeatureConcat,
    PredictionPool,
}

impl fmt::Display for FusionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionScheme::FeaturePool => "feature-pool",
            FusionScheme::FeatureConcat => "feature-concat",
            FusionScheme::PredictionPool => "prediction-pool",
        })
    }
}

/// A concrete fusion choice: scheme, pooling operator (absent for
/// concatenation) and crop count.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FusionConfig {
    pub scheme: FusionScheme,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub op: Option<PoolOp>,
    pub n_crops: usize,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        if self.n_crops == 0 {
            return Err(FusionError::InvalidConfig("n_crops must be >= 1".into()));
        }
        match (self.scheme, self.op) {
            (FusionScheme::FeatureConcat, Some(_)) => Err(FusionError::InvalidConfig(
                "feature-concat takes no pooling operator".into(),
            )),
            (FusionScheme::FeatureConcat, None) => Ok(()),
            (_, None) => {
                Err(FusionError::InvalidConfig(format!("{} requires a pooling operator", self.scheme)))
            }
            (_, Some(_)) => Ok(()),
        }
    }

    /// Stable identifier used in reports, e.g. `prediction-pool(avg)@10crops`.
    pub fn id(&self) -> String {
        match self.op {
            Some(op) => format!("{}({})@{}crops", self.scheme, op, self.n_crops),
            None => format!("{}@{}crops", self.scheme, self.n_crops),
        }
    }
}

fn check_lengths(vectors: &[FeatureVector]) -> Result<usize, FusionError> {
    let first = vectors.first().ok_or(FusionError::Empty)?;
    let dim = first.len();
    for v in vectors {
        if v.len() != dim {
            return Err(FusionError::RaggedLengths { expected: dim, got: v.len() });
        }
    }
    Ok(dim)
}

/// Elementwise min/avg/max over equal-length vectors.
pub fn pool_features(vectors: &[FeatureVector], op: PoolOp) -> Result<FeatureVector, FusionError> {
    let dim = check_lengths(vectors)?;
    let mut out = vec![0.0f32; dim];
    match op {
        PoolOp::Min => {
            out.copy_from_slice(vectors[0].as_slice());
            for v in &vectors[1..] {
                for (o, &x) in out.iter_mut().zip(v.as_slice()) {
                    *o = o.min(x);
                }
            }
        }
        PoolOp::Max => {
            out.copy_from_slice(vectors[0].as_slice());
            for v in &vectors[1..] {
                for (o, &x) in out.iter_mut().zip(v.as_slice()) {
                    *o = o.max(x);
                }
            }
        }
        PoolOp::Avg => {
            // f64 accumulation keeps the mean exact to f32 rounding.
            let n = vectors.len() as f64;
            for j in 0..dim {
                let sum: f64 = vectors.iter().map(|v| v.as_slice()[j] as f64).sum();
                out[j] = (sum / n) as f32;
            }
        }
    }
    Ok(FeatureVector(out))
}

/// Concatenate vectors end-to-end in their given (sampling) order.
pub fn concat_features(vectors: &[FeatureVector]) -> Result<FeatureVector, FusionError> {
    let dim = check_lengths(vectors)?;
    let mut out = Vec::with_capacity(dim * vectors.len());
    for v in vectors {
        out.extend_from_slice(v.as_slice());
    }
    Ok(FeatureVector(out))
}

/// min/avg/max of per-crop predicted scores.
pub fn pool_predictions(scores: &[f64], op: PoolOp) -> Result<f64, FusionError> {
    if scores.is_empty() {
        return Err(FusionError::Empty);
    }
    Ok(match op {
        PoolOp::Min => scores.iter().cloned().fold(f64::INFINITY, f64::min),
        PoolOp::Max => scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        PoolOp::Avg => scores.iter().sum::<f64>() / scores.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fv(values: &[f32]) -> FeatureVector {
        FeatureVector(values.to_vec())
    }

    #[test]
    fn pooling_examples() {
        let vectors = vec![fv(&[1.0, 2.0, 3.0]), fv(&[3.0, 4.0, 5.0])];
        assert_eq!(pool_features(&vectors, PoolOp::Avg).unwrap().as_slice(), &[2.0, 3.0, 4.0]);
        assert_eq!(pool_features(&vectors, PoolOp::Min).unwrap().as_slice(), &[1.0, 2.0, 3.0]);
        assert_eq!(pool_features(&vectors, PoolOp::Max).unwrap().as_slice(), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn single_vector_is_identity_for_all_ops() {
        let v = fv(&[0.5, -1.0, 7.0]);
        for op in [PoolOp::Min, PoolOp::Avg, PoolOp::Max] {
            assert_eq!(pool_features(std::slice::from_ref(&v), op).unwrap(), v);
        }
        assert_eq!(concat_features(std::slice::from_ref(&v)).unwrap(), v);
        assert_eq!(pool_predictions(&[42.5], PoolOp::Avg).unwrap(), 42.5);
    }

    #[test]
    fn min_max_match_exhaustive_scan() {
        use rand::Rng;
        let mut rng = crate::seeds::rng_from_seed(31);
        let vectors: Vec<FeatureVector> = (0..7)
            .map(|_| FeatureVector((0..5).map(|_| rng.random_range(-10.0f32..10.0)).collect()))
            .collect();
        let min = pool_features(&vectors, PoolOp::Min).unwrap();
        let max = pool_features(&vectors, PoolOp::Max).unwrap();
        for j in 0..5 {
            let mut lo = f32::INFINITY;
            let mut hi = f32::NEG_INFINITY;
            for v in &vectors {
                lo = lo.min(v.as_slice()[j]);
                hi = hi.max(v.as_slice()[j]);
            }
            assert_eq!(min.as_slice()[j], lo);
            assert_eq!(max.as_slice()[j], hi);
        }
    }

    #[test]
    fn concat_shapes_and_round_trip() {
        let a = fv(&[1.0, 2.0, 3.0]);
        let b = fv(&[4.0, 5.0, 6.0]);
        let joined = concat_features(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(joined.len(), 6);
        assert_eq!(&joined.as_slice()[..3], a.as_slice());
        assert_eq!(&joined.as_slice()[3..], b.as_slice());
        // Order matters by construction.
        let swapped = concat_features(&[b, a]).unwrap();
        assert_ne!(joined, swapped);
    }

    #[test]
    fn errors_on_empty_and_ragged_inputs() {
        assert!(matches!(pool_features(&[], PoolOp::Avg), Err(FusionError::Empty)));
        assert!(matches!(concat_features(&[]), Err(FusionError::Empty)));
        assert!(matches!(pool_predictions(&[], PoolOp::Min), Err(FusionError::Empty)));
        let ragged = vec![fv(&[1.0]), fv(&[1.0, 2.0])];
        assert!(matches!(
            pool_features(&ragged, PoolOp::Max),
            Err(FusionError::RaggedLengths { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn config_validation() {
        let ok = FusionConfig { scheme: FusionScheme::FeaturePool, op: Some(PoolOp::Avg), n_crops: 30 };
        ok.validate().unwrap();
        assert_eq!(ok.id(), "feature-pool(avg)@30crops");
        let concat = FusionConfig { scheme: FusionScheme::FeatureConcat, op: None, n_crops: 35 };
        concat.validate().unwrap();
        assert_eq!(concat.id(), "feature-concat@35crops");
        assert!(FusionConfig { scheme: FusionScheme::FeatureConcat, op: Some(PoolOp::Avg), n_crops: 1 }
            .validate()
            .is_err());
        assert!(FusionConfig { scheme: FusionScheme::PredictionPool, op: None, n_crops: 1 }
            .validate()
            .is_err());
        assert!(FusionConfig { scheme: FusionScheme::FeaturePool, op: Some(PoolOp::Avg), n_crops: 0 }
            .validate()
            .is_err());
    }

    proptest! {
        #[test]
        fn pooling_is_permutation_invariant(
            vals in proptest::collection::vec(proptest::collection::vec(-100.0f32..100.0, 4), 1..6),
            shift in 0usize..6,
        ) {
            let vectors: Vec<FeatureVector> = vals.iter().map(|v| FeatureVector(v.clone())).collect();
            let mut rotated = vectors.clone();
            let len = rotated.len();
            rotated.rotate_left(shift % len);
            for op in [PoolOp::Min, PoolOp::Avg, PoolOp::Max] {
                let a = pool_features(&vectors, op).unwrap();
                let b = pool_features(&rotated, op).unwrap();
                for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                    prop_assert!((x - y).abs() <= 1e-4);
                }
            }
            let scores: Vec<f64> = vals.iter().map(|v| v[0] as f64).collect();
            let mut rot_scores = scores.clone();
            rot_scores.rotate_left(shift % scores.len());
            for op in [PoolOp::Min, PoolOp::Avg, PoolOp::Max] {
                let a = pool_predictions(&scores, op).unwrap();
                let b = pool_predictions(&rot_scores, op).unwrap();
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn avg_of_identical_copies_is_identity(
            vals in proptest::collection::vec(-100.0f32..100.0, 1..8),
            copies in 1usize..6,
        ) {
            let v = FeatureVector(vals);
            let stack = vec![v.clone(); copies];
            let pooled = pool_features(&stack, PoolOp::Avg).unwrap();
            for (a, b) in pooled.as_slice().iter().zip(v.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-5);
            }
        }

        #[test]
        fn concat_segments_recover_originals(
            vals in proptest::collection::vec(proptest::collection::vec(-100.0f32..100.0, 3), 1..5),
        ) {
            let vectors: Vec<FeatureVector> = vals.iter().map(|v| FeatureVector(v.clone())).collect();
            let joined = concat_features(&vectors).unwrap();
            prop_assert_eq!(joined.len(), 3 * vectors.len());
            for (i, v) in vectors.iter().enumerate() {
                prop_assert_eq!(&joined.as_slice()[i * 3..(i + 1) * 3], v.as_slice());
            }
        }
    }
}
