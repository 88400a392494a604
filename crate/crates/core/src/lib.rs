//! Distortion-generic blind image quality assessment toolkit.
//!
//! The pipeline predicts the perceived quality of an image with no reference:
//! crops are sampled from the image, a convolutional backbone maps each crop
//! to a feature vector, the per-crop information is fused (feature pooling,
//! feature concatenation, or prediction pooling), and a linear
//! epsilon-insensitive support vector regressor maps features to a quality
//! score on the dataset's MOS scale.
//!
//! Modules follow the pipeline stages:
//!
//! * [`dataset`] — manifest ingestion, MOS class partitioning, class weights,
//!   repeated train/test split protocols.
//! * [`synth`] — deterministic synthetic dataset generation for desk-scale runs.
//! * [`imageops`] — resize, cropping, mean subtraction, distortion kernels.
//! * [`backbone`] — feature extractors: a small trainable CNN with explicit
//!   forward/backward passes, and precomputed feature files.
//! * [`fusion`] — the three crop-fusion schemes.
//! * [`regressor`] — linear epsilon-insensitive SVR.
//! * [`metrics`] — LCC, SROCC, error statistics, sigma coverage, two-sample
//!   t-test, and crop-count selection.
//! * [`model`] — serializable quality models.
//! * [`config`] / [`experiment`] / [`report`] — experiment orchestration.

pub mod backbone;
pub mod config;
pub mod dataset;
pub mod experiment;
pub mod fusion;
pub mod imageops;
pub mod metrics;
pub mod model;
pub mod regressor;
pub mod report;
pub mod seeds;
pub mod synth;
