//! Experiment orchestration.
//!
//! An experiment is a sequence of stages that communicate only through files
//! under the output directory, so running the stages individually (`splits`,
//! `finetune`, `extract`, `train-svr`, `evaluate`) produces byte-identical
//! results to `run`, which simply invokes them in order.
//!
//! Stage outputs:
//!
//! ```text
//! out/
//!   splits.txt                 fold ids per repeat
//!   checkpoints/base.biqn      initialized backbone (no fine-tuning), or
//!   checkpoints/split_XX.biqn  per-split fine-tuned backbones
//!   checkpoints/*.meta.json    fine-tuning summaries
//!   loss/split_XX.tsv          fine-tuning loss curves
//!   features/base.biqf         descriptors (shared backbone), or
//!   features/split_XX.biqf     per-split descriptors
//!   svr/split_XX__<config>.json trained SVR per split and fusion config
//!   report.json / report.txt   evaluation report
//!   model.biqm / model.biqn    winning quality model (optional)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{
    finetune, load_checkpoint, save_checkpoint, BackboneBundle, BackboneError, DeskCnn,
    FeatureVector, PrecomputedFeatures, TrainConfig, TrainSample,
};
use crate::config::{
    BackboneKind, ConfigError, ExperimentConfig, PreprocessKind, ProtocolKind,
};
use crate::dataset::{
    class_weights_for, load_manifest, load_manifest_with_scale, make_splits, partition_mos,
    DatasetError, DatasetManifest, SplitPlan,
};
use crate::fusion::{
    concat_features, pool_features, pool_predictions, FusionConfig, FusionError, FusionScheme,
};
use crate::imageops::{
    center_crop, load_image, random_crops, resize_shorter_side, subtract_mean, Crop,
    ImageOpsError, MeanImage, RasterImage,
};
use crate::metrics::{
    error_stats, median_over_splits, pearson_lcc, select_crop_count, sigma_coverage,
    spearman_srocc, two_sample_ttest, MetricsError, ScorePairs, SplitMetrics,
};
use crate::model::{
    save_model, BackboneRef, ModelError, ModelPreprocess, QualityModel, Standardizer,
};
use crate::regressor::{train_svr, LinearSvrModel, SampleMatrix, SvrError};
use crate::report::{
    ConfigResult, CropSelection, EvalReport, FinetuneSummary, PredictionRow, SplitResult,
    TTestEntry,
};
use crate::seeds;
use crate::synth::SynthError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Image(#[from] ImageOpsError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Svr(#[from] SvrError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing asset {path}; run the earlier pipeline stages first")]
    AssetMissing { path: PathBuf },
    #[error("numeric failure in split {split}: {msg}")]
    NumericFailure { split: usize, msg: String },
    #[error("backbone mismatch: {0}")]
    BackboneMismatch(String),
}

impl ExperimentError {
    /// Process exit code class: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 1,
            ExperimentError::NumericFailure { .. } => 3,
            ExperimentError::Svr(SvrError::NonFiniteInput) => 3,
            ExperimentError::Backbone(BackboneError::NonFiniteLoss { .. }) => 3,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

/// Output-directory layout.
pub struct OutPaths {
    pub dir: PathBuf,
}

impl OutPaths {
    pub fn new(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf() }
    }

    pub fn splits(&self) -> PathBuf {
        self.dir.join("splits.txt")
    }

    pub fn checkpoint(&self, split: Option<usize>) -> PathBuf {
        match split {
            Some(k) => self.dir.join(format!("checkpoints/split_{k:02}.biqn")),
            None => self.dir.join("checkpoints/base.biqn"),
        }
    }

    pub fn finetune_meta(&self, split: Option<usize>) -> PathBuf {
        self.checkpoint(split).with_extension("meta.json")
    }

    pub fn loss_curve(&self, split: usize) -> PathBuf {
        self.dir.join(format!("loss/split_{split:02}.tsv"))
    }

    pub fn features(&self, split: Option<usize>) -> PathBuf {
        match split {
            Some(k) => self.dir.join(format!("features/split_{k:02}.biqf")),
            None => self.dir.join("features/base.biqf"),
        }
    }

    pub fn svr_model(&self, split: usize, slug: &str) -> PathBuf {
        self.dir.join(format!("svr/split_{split:02}__{slug}.json"))
    }

    pub fn report_json(&self) -> PathBuf {
        self.dir.join("report.json")
    }

    pub fn report_table(&self) -> PathBuf {
        self.dir.join("report.txt")
    }

    pub fn model(&self) -> PathBuf {
        self.dir.join("model.biqm")
    }

    pub fn model_checkpoint(&self) -> PathBuf {
        self.dir.join("model.biqn")
    }
}

/// Filesystem-safe identifier for a fusion config (`None` = central crop).
pub fn config_slug(fusion: Option<&FusionConfig>) -> String {
    match fusion {
        None => "central".to_string(),
        Some(f) => match f.op {
            Some(op) => format!("{}_{}_n{}", f.scheme, op, f.n_crops),
            None => format!("{}_n{}", f.scheme, f.n_crops),
        },
    }
}

/// Human-readable identifier used in reports.
pub fn config_id(fusion: Option<&FusionConfig>) -> String {
    match fusion {
        None => "central-crop".to_string(),
        Some(f) => f.id(),
    }
}

/// Everything loaded once per experiment.
pub struct ExperimentContext {
    pub cfg: ExperimentConfig,
    pub manifest: DatasetManifest,
    pub base_dir: PathBuf,
    pub plan: SplitPlan,
    pub paths: OutPaths,
}

/// Load the manifest, derive the split plan and write `splits.txt`.
pub fn prepare(cfg: &ExperimentConfig) -> Result<ExperimentContext, ExperimentError> {
    cfg.validate()?;
    let manifest_path = &cfg.dataset.manifest;
    let manifest = match (cfg.dataset.scale_min, cfg.dataset.scale_max) {
        (Some(min), Some(max)) => {
            let name = cfg.dataset.name.clone().unwrap_or_else(|| "dataset".to_string());
            load_manifest_with_scale(manifest_path, &name, (min, max))?
        }
        _ => load_manifest(manifest_path)?,
    };
    let base_dir = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let plan = make_splits(&manifest, cfg.protocol.split_protocol(), cfg.protocol.seed)?;
    let paths = OutPaths::new(&cfg.output.dir);
    fs::create_dir_all(&paths.dir).map_err(io_err(&paths.dir))?;
    fs::write(paths.splits(), plan.to_text()).map_err(io_err(&paths.splits()))?;
    Ok(ExperimentContext { cfg: cfg.clone(), manifest, base_dir, plan, paths })
}

impl ExperimentContext {
    fn resolve_image_path(&self, record_path: &Path) -> PathBuf {
        if record_path.is_absolute() {
            record_path.to_path_buf()
        } else {
            self.base_dir.join(record_path)
        }
    }

    /// All images, aligned with `manifest.records`.
    fn load_images(&self) -> Result<Vec<RasterImage>, ExperimentError> {
        self.manifest
            .records
            .iter()
            .map(|rec| Ok(load_image(&self.resolve_image_path(&rec.path))?))
            .collect()
    }

    fn record_index(&self) -> BTreeMap<&str, usize> {
        self.manifest
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.as_str(), i))
            .collect()
    }

    /// Pixel-weighted per-channel mean over a set of images.
    fn mean_over(&self, images: &[RasterImage], indices: &[usize]) -> [f32; 3] {
        let mut sums = [0.0f64; 3];
        let mut count = 0.0f64;
        for &i in indices {
            let img = &images[i];
            for px in img.pixels().chunks_exact(3) {
                sums[0] += px[0] as f64;
                sums[1] += px[1] as f64;
                sums[2] += px[2] as f64;
            }
            count += (img.width() * img.height()) as f64;
        }
        [(sums[0] / count) as f32, (sums[1] / count) as f32, (sums[2] / count) as f32]
    }

    /// Evaluation crops for one image: central-crop path or seeded random
    /// crops at the original scale. Crop origins depend only on
    /// `(seed, image id)`, never on the split.
    fn eval_crops(&self, image: &RasterImage, id: &str, n: usize) -> Result<Vec<Crop>, ExperimentError> {
        match self.cfg.preprocess.mode {
            PreprocessKind::CentralCrop => {
                let resized = resize_shorter_side(image, self.cfg.preprocess.resize_target)?;
                Ok(vec![center_crop(&resized, self.cfg.backbone.input_size)?])
            }
            PreprocessKind::RandomCrops => {
                let seed = seeds::derive_seed_str(self.cfg.protocol.seed, "crops", id);
                let sample = random_crops(image, n, self.cfg.backbone.input_size, seed)?;
                Ok(sample.crops)
            }
        }
    }

    fn eval_crop_count(&self) -> usize {
        match self.cfg.preprocess.mode {
            PreprocessKind::CentralCrop => 1,
            PreprocessKind::RandomCrops => {
                self.cfg.preprocess.crop_counts.iter().copied().max().unwrap_or(1)
            }
        }
    }

    /// `None` when one shared backbone serves all splits.
    fn per_split_backbone(&self) -> bool {
        self.cfg.backbone.kind == BackboneKind::Desk
            && self.cfg.finetune.enabled
            && self.cfg.finetune.per_split
    }

    fn fusion_list(&self) -> Vec<Option<FusionConfig>> {
        match self.cfg.preprocess.mode {
            PreprocessKind::CentralCrop => vec![None],
            PreprocessKind::RandomCrops => {
                self.cfg.fusion_configs().into_iter().map(Some).collect()
            }
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SvrArtifact {
    model: LinearSvrModel,
    standardizer: Option<Standardizer>,
    chosen_c: f64,
    passes: usize,
    converged: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct FinetuneMeta {
    split: Option<usize>,
    iterations: usize,
    final_loss: f64,
    train_accuracy: f64,
}

/// Fine-tune backbones (or persist the initialized one when fine-tuning is
/// off). No-op for precomputed backbones.
pub fn stage_finetune(ctx: &ExperimentContext) -> Result<(), ExperimentError> {
    if ctx.cfg.backbone.kind == BackboneKind::Precomputed {
        return Ok(());
    }
    let dir = ctx.paths.dir.join("checkpoints");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let seed = ctx.cfg.protocol.seed;
    let input_size = ctx.cfg.backbone.input_size;
    let base_net = DeskCnn::new(input_size, seeds::derive_seed(seed, "backbone-init", 0))?;

    if !ctx.cfg.finetune.enabled {
        // Backbone-inherent constant mean, like a pretraining-set mean image.
        let bundle = BackboneBundle { net: base_net, mean: MeanImage::PerChannel([127.5; 3]) };
        save_checkpoint(&bundle, &ctx.paths.checkpoint(None))?;
        return Ok(());
    }

    let images = ctx.load_images()?;
    let index = ctx.record_index();
    let loss_dir = ctx.paths.dir.join("loss");
    fs::create_dir_all(&loss_dir).map_err(io_err(&loss_dir))?;

    let finetune_one = |split: Option<usize>, train_ids: &[String]| -> Result<(), ExperimentError> {
        let split_tag = split.map(|k| k as u64).unwrap_or(u64::MAX);
        let indices: Vec<usize> = train_ids.iter().map(|id| index[id.as_str()]).collect();
        let mean = ctx.mean_over(&images, &indices);
        let mean_image = MeanImage::PerChannel(mean);

        // Training crops: distinct origins only (duplicates add nothing).
        let mut samples = Vec::new();
        for &i in &indices {
            let rec = &ctx.manifest.records[i];
            let class = partition_mos(rec.mos, ctx.manifest.scale())?;
            let img = &images[i];
            let grid = (img.width() - input_size + 1) * (img.height() - input_size + 1);
            let n = ctx.cfg.train_crops().min(grid);
            let crop_seed = seeds::derive_seed_str(seed, "crops", &rec.id);
            let sample = random_crops(img, n, input_size, crop_seed)?;
            for crop in sample.crops {
                samples.push(TrainSample { crop: subtract_mean(&crop, &mean_image)?, class });
            }
        }
        let weights = class_weights_for(&ctx.manifest, train_ids.iter().map(|s| s.as_str()))?;
        let train_cfg = TrainConfig {
            iterations: ctx.cfg.finetune.iterations,
            batch_size: ctx.cfg.finetune.batch_size,
            learning_rate: ctx.cfg.finetune.learning_rate,
            momentum: ctx.cfg.finetune.momentum,
            new_head_init_std: ctx.cfg.finetune.head_init_std,
            freeze_depth: ctx.cfg.finetune.freeze_depth,
            seed: seeds::derive_seed(seed, "finetune", split_tag),
        };
        let outcome = finetune(&base_net, &samples, &weights, &train_cfg).map_err(|e| match e {
            BackboneError::NonFiniteLoss { iteration, lr } => ExperimentError::NumericFailure {
                split: split.unwrap_or(0),
                msg: format!("non-finite loss at iteration {iteration} (lr {lr})"),
            },
            other => ExperimentError::Backbone(other),
        })?;

        let bundle = BackboneBundle { net: outcome.net, mean: mean_image };
        save_checkpoint(&bundle, &ctx.paths.checkpoint(split))?;
        let meta = FinetuneMeta {
            split,
            iterations: ctx.cfg.finetune.iterations,
            final_loss: outcome.loss_curve.last().copied().unwrap_or(f64::NAN),
            train_accuracy: outcome.train_accuracy,
        };
        let meta_path = ctx.paths.finetune_meta(split);
        fs::write(&meta_path, serde_json::to_string_pretty(&meta).expect("meta"))
            .map_err(io_err(&meta_path))?;
        if let Some(k) = split {
            let mut tsv = String::from("iteration\tloss\n");
            for (i, loss) in outcome.loss_curve.iter().enumerate() {
                tsv.push_str(&format!("{i}\t{loss}\n"));
            }
            fs::write(ctx.paths.loss_curve(k), tsv).map_err(io_err(&ctx.paths.loss_curve(k)))?;
        }
        Ok(())
    };

    if ctx.per_split_backbone() {
        for (k, repeat) in ctx.plan.repeats.iter().enumerate() {
            finetune_one(Some(k), &repeat.train)?;
        }
    } else {
        // Once-globally variant: train on the whole manifest.
        let all_ids: Vec<String> = ctx.manifest.ids();
        finetune_one(None, &all_ids)?;
    }
    Ok(())
}

/// Extract descriptors for every image into binary feature files. No-op for
/// precomputed backbones (their file already exists).
pub fn stage_extract(ctx: &ExperimentContext) -> Result<(), ExperimentError> {
    if ctx.cfg.backbone.kind == BackboneKind::Precomputed {
        let path = ctx.cfg.backbone.path.as_ref().expect("validated");
        if !path.exists() {
            return Err(ExperimentError::AssetMissing { path: path.clone() });
        }
        return Ok(());
    }
    let dir = ctx.paths.dir.join("features");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let images = ctx.load_images()?;
    let n_crops = ctx.eval_crop_count();

    let extract_one = |split: Option<usize>| -> Result<(), ExperimentError> {
        let ckpt_path = ctx.paths.checkpoint(split);
        if !ckpt_path.exists() {
            return Err(ExperimentError::AssetMissing { path: ckpt_path });
        }
        let (bundle, hash) = load_checkpoint(&ckpt_path)?;
        let mut store =
            PrecomputedFeatures::new(bundle.net.shape().feature_dim, format!("desk:{hash}"));
        for (i, rec) in ctx.manifest.records.iter().enumerate() {
            let crops = ctx.eval_crops(&images[i], &rec.id, n_crops)?;
            let centered: Vec<Crop> = crops
                .iter()
                .map(|c| subtract_mean(c, &bundle.mean))
                .collect::<Result<_, _>>()?;
            let feats = bundle.net.extract_batch(&centered)?;
            for (ci, feat) in feats.into_iter().enumerate() {
                store.insert(rec.id.clone(), ci as u32, feat)?;
            }
        }
        store.save(&ctx.paths.features(split))?;
        Ok(())
    };

    if ctx.per_split_backbone() {
        for k in 0..ctx.plan.repeats.len() {
            extract_one(Some(k))?;
        }
    } else {
        extract_one(None)?;
    }
    Ok(())
}

fn feature_store(
    ctx: &ExperimentContext,
    split: usize,
) -> Result<PrecomputedFeatures, ExperimentError> {
    let path = match ctx.cfg.backbone.kind {
        BackboneKind::Precomputed => ctx.cfg.backbone.path.clone().expect("validated"),
        BackboneKind::Desk => {
            if ctx.per_split_backbone() {
                ctx.paths.features(Some(split))
            } else {
                ctx.paths.features(None)
            }
        }
    };
    if !path.exists() {
        return Err(ExperimentError::AssetMissing { path });
    }
    Ok(PrecomputedFeatures::load(&path)?)
}

/// Design-matrix rows for one fold under one fusion config. For prediction
/// pooling each crop becomes a row; otherwise each image yields one row.
fn assemble_rows(
    ctx: &ExperimentContext,
    store: &PrecomputedFeatures,
    ids: &[String],
    fusion: Option<&FusionConfig>,
) -> Result<(Vec<Vec<f64>>, Vec<f64>), ExperimentError> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for id in ids {
        let rec = ctx
            .manifest
            .record(id)
            .ok_or_else(|| DatasetError::MalformedSplitPlan(format!("unknown id `{id}`")))?;
        match fusion {
            None => {
                let feats = store.features_for(id, 1)?;
                rows.push(widen_f32(feats[0].as_slice()));
                targets.push(rec.mos);
            }
            Some(f) => {
                let feats = store.features_for(id, f.n_crops)?;
                match f.scheme {
                    FusionScheme::FeaturePool => {
                        let pooled = pool_features(&feats, f.op.expect("validated"))?;
                        rows.push(widen_f32(pooled.as_slice()));
                        targets.push(rec.mos);
                    }
                    FusionScheme::FeatureConcat => {
                        let joined = concat_features(&feats)?;
                        rows.push(widen_f32(joined.as_slice()));
                        targets.push(rec.mos);
                    }
                    FusionScheme::PredictionPool => {
                        for feat in &feats {
                            rows.push(widen_f32(feat.as_slice()));
                            targets.push(rec.mos);
                        }
                    }
                }
            }
        }
    }
    Ok((rows, targets))
}

fn widen_f32(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn fit_standardizer(rows: &[Vec<f64>]) -> Standardizer {
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for row in rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut std = vec![0.0; d];
    for row in rows {
        for ((s, v), m) in std.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut std {
        *s = (*s / n).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    Standardizer { mean, std }
}

/// Per-image predicted score under one fusion config.
fn predict_fold(
    store: &PrecomputedFeatures,
    artifact: &SvrArtifact,
    ids: &[String],
    fusion: Option<&FusionConfig>,
) -> Result<Vec<f64>, ExperimentError> {
    let mut scores = Vec::with_capacity(ids.len());
    for id in ids {
        scores.push(predict_from_store(store, artifact, id, fusion)?);
    }
    Ok(scores)
}

fn predict_from_store(
    store: &PrecomputedFeatures,
    artifact: &SvrArtifact,
    id: &str,
    fusion: Option<&FusionConfig>,
) -> Result<f64, ExperimentError> {
    let apply = |feat: &FeatureVector| -> Result<f64, ExperimentError> {
        let mut row = widen_f32(feat.as_slice());
        if let Some(s) = &artifact.standardizer {
            s.apply(&mut row);
        }
        Ok(crate::regressor::predict(&artifact.model, &row)?)
    };
    match fusion {
        None => {
            let feats = store.features_for(id, 1)?;
            apply(&feats[0])
        }
        Some(f) => {
            let feats = store.features_for(id, f.n_crops)?;
            match f.scheme {
                FusionScheme::FeaturePool => apply(&pool_features(&feats, f.op.expect("validated"))?),
                FusionScheme::FeatureConcat => apply(&concat_features(&feats)?),
                FusionScheme::PredictionPool => {
                    let per_crop: Vec<f64> =
                        feats.iter().map(|fv| apply(fv)).collect::<Result<_, _>>()?;
                    Ok(pool_predictions(&per_crop, f.op.expect("validated"))?)
                }
            }
        }
    }
}

/// Train one SVR per (split, fusion config); the legacy protocol selects C on
/// the validation fold by LCC.
pub fn stage_train_svr(ctx: &ExperimentContext) -> Result<(), ExperimentError> {
    let dir = ctx.paths.dir.join("svr");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let fusions = ctx.fusion_list();
    for (split, repeat) in ctx.plan.repeats.iter().enumerate() {
        let store = feature_store(ctx, split)?;
        for (ci, fusion) in fusions.iter().enumerate() {
            let (rows, targets) = assemble_rows(ctx, &store, &repeat.train, fusion.as_ref())?;
            let standardizer = if ctx.cfg.svr.standardize {
                Some(fit_standardizer(&rows))
            } else {
                None
            };
            let prepared: Vec<Vec<f64>> = match &standardizer {
                Some(s) => rows
                    .iter()
                    .map(|r| {
                        let mut row = r.clone();
                        s.apply(&mut row);
                        row
                    })
                    .collect(),
                None => rows,
            };
            let x = SampleMatrix::from_rows(&prepared)?;
            let svr_seed =
                seeds::derive_seed(ctx.cfg.protocol.seed, "svr", (split * 10_000 + ci) as u64);

            let use_c_grid = ctx.cfg.protocol.kind == ProtocolKind::Legacy && !repeat.val.is_empty();
            let artifact = if use_c_grid {
                let mut best: Option<(f64, SvrArtifact, f64)> = None; // (lcc, artifact, c)
                for &c in &ctx.cfg.svr.legacy_c_grid {
                    let cfg_c = ctx.cfg.svr.svr_config_with_c(c);
                    let (model, log) = train_svr(&x, &targets, &cfg_c, svr_seed)?;
                    let candidate = SvrArtifact {
                        model,
                        standardizer: standardizer.clone(),
                        chosen_c: c,
                        passes: log.passes,
                        converged: log.converged,
                    };
                    let val_pred =
                        predict_fold(&store, &candidate, &repeat.val, fusion.as_ref())?;
                    let val_truth: Vec<f64> = repeat
                        .val
                        .iter()
                        .map(|id| ctx.manifest.record(id).expect("validated").mos)
                        .collect();
                    let lcc = ScorePairs::new(val_pred, val_truth)
                        .and_then(|p| pearson_lcc(&p))
                        .unwrap_or(f64::NEG_INFINITY);
                    if best.as_ref().map(|(b, _, _)| lcc > *b).unwrap_or(true) {
                        best = Some((lcc, candidate, c));
                    }
                }
                best.expect("non-empty C grid").1
            } else {
                let (model, log) = train_svr(&x, &targets, &ctx.cfg.svr.svr_config(), svr_seed)?;
                SvrArtifact {
                    model,
                    standardizer: standardizer.clone(),
                    chosen_c: ctx.cfg.svr.c,
                    passes: log.passes,
                    converged: log.converged,
                }
            };

            let path = ctx.paths.svr_model(split, &config_slug(fusion.as_ref()));
            fs::write(&path, serde_json::to_string_pretty(&artifact).expect("artifact"))
                .map_err(io_err(&path))?;
        }
    }
    Ok(())
}

/// Evaluate every (split, fusion config) pair on its test fold, aggregate
/// medians, run crop-count selection and the pairwise t-test matrix, and
/// write the report (plus the winning model when configured).
pub fn stage_evaluate(ctx: &ExperimentContext) -> Result<EvalReport, ExperimentError> {
    let fusions = ctx.fusion_list();
    let scale = ctx.manifest.scale();
    let mut config_results: Vec<ConfigResult> = Vec::new();

    let mut stores: Vec<PrecomputedFeatures> = Vec::with_capacity(ctx.plan.repeats.len());
    for split in 0..ctx.plan.repeats.len() {
        stores.push(feature_store(ctx, split)?);
    }

    for fusion in &fusions {
        let slug = config_slug(fusion.as_ref());
        let mut per_split = Vec::new();
        for (split, repeat) in ctx.plan.repeats.iter().enumerate() {
            let path = ctx.paths.svr_model(split, &slug);
            if !path.exists() {
                return Err(ExperimentError::AssetMissing { path });
            }
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            let artifact: SvrArtifact = serde_json::from_str(&text).map_err(|e| {
                ExperimentError::Io {
                    path: path.clone(),
                    source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
                }
            })?;
            let mut predictions =
                predict_fold(&stores[split], &artifact, &repeat.test, fusion.as_ref())?;
            if ctx.cfg.evaluation.clip_predictions {
                for p in &mut predictions {
                    *p = p.clamp(scale.0, scale.1);
                }
            }
            let truth: Vec<f64> = repeat
                .test
                .iter()
                .map(|id| ctx.manifest.record(id).expect("validated").mos)
                .collect();
            let stds: Option<Vec<f64>> = repeat
                .test
                .iter()
                .map(|id| ctx.manifest.record(id).expect("validated").mos_std)
                .collect();

            let mut pairs = ScorePairs::new(predictions.clone(), truth.clone())?;
            if let Some(stds) = &stds {
                pairs = pairs.with_std(stds.clone())?;
            }
            let lcc = match pearson_lcc(&pairs) {
                Ok(v) => Some(v),
                Err(MetricsError::ConstantSeries(_)) | Err(MetricsError::TooFewValues { .. }) => None,
                Err(e) => return Err(e.into()),
            };
            let srocc = match spearman_srocc(&pairs) {
                Ok(v) => Some(v),
                Err(MetricsError::ConstantSeries(_)) | Err(MetricsError::TooFewValues { .. }) => None,
                Err(e) => return Err(e.into()),
            };
            let (rmse_pct, mae_pct) = error_stats(&pairs, scale)?;
            let coverage = if pairs.truth_std.is_some() {
                match sigma_coverage(&pairs) {
                    Ok((cov, _excluded)) => Some(cov),
                    Err(MetricsError::NoUsableEntries) => None,
                    Err(e) => return Err(e.into()),
                }
            } else {
                None
            };
            let rows: Vec<PredictionRow> = repeat
                .test
                .iter()
                .zip(&predictions)
                .map(|(id, &pred)| {
                    let rec = ctx.manifest.record(id).expect("validated");
                    PredictionRow {
                        id: id.clone(),
                        truth: rec.mos,
                        truth_std: rec.mos_std,
                        predicted: pred,
                    }
                })
                .collect();
            per_split.push(SplitResult {
                split,
                metrics: SplitMetrics { lcc, srocc, rmse_pct, mae_pct, sigma_coverage: coverage },
                chosen_c: artifact.chosen_c,
                svr_passes: artifact.passes,
                svr_converged: artifact.converged,
                predictions: rows,
            });
        }
        let median = median_over_splits(
            &per_split.iter().map(|s| s.metrics).collect::<Vec<_>>(),
        )?;
        config_results.push(ConfigResult {
            id: config_id(fusion.as_ref()),
            fusion: *fusion,
            per_split,
            median,
        });
    }

    // Crop-count selection per (scheme, op) family with >= 2 candidate counts.
    let alpha = ctx.cfg.evaluation.alpha;
    let mut crop_selection = Vec::new();
    if ctx.cfg.preprocess.mode == PreprocessKind::RandomCrops && ctx.plan.repeats.len() >= 2 {
        for entry in &ctx.cfg.fusion {
            let mut by_n: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            let mut complete = true;
            for result in &config_results {
                if let Some(f) = &result.fusion {
                    if f.scheme == entry.scheme && f.op == entry.op {
                        let lccs: Vec<f64> =
                            result.per_split.iter().filter_map(|s| s.metrics.lcc).collect();
                        if lccs.len() != ctx.plan.repeats.len() {
                            complete = false;
                        }
                        by_n.insert(f.n_crops, lccs);
                    }
                }
            }
            if by_n.len() < 2 {
                continue;
            }
            let candidates: Vec<(usize, f64)> = by_n
                .iter()
                .map(|(&n, lccs)| {
                    let mut sorted = lccs.clone();
                    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
                    let med = if sorted.is_empty() {
                        f64::NAN
                    } else if sorted.len() % 2 == 1 {
                        sorted[sorted.len() / 2]
                    } else {
                        (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) / 2.0
                    };
                    (n, med)
                })
                .collect();
            let selected = if complete {
                select_crop_count(&by_n, alpha).ok()
            } else {
                None
            };
            crop_selection.push(CropSelection {
                scheme: entry.scheme,
                op: entry.op,
                alpha,
                candidates,
                selected,
            });
        }
    }

    // Pairwise t-test matrix over per-split LCC samples.
    let mut ttest_matrix = Vec::new();
    if ctx.plan.repeats.len() >= 2 {
        for i in 0..config_results.len() {
            for j in i + 1..config_results.len() {
                let a: Vec<f64> =
                    config_results[i].per_split.iter().filter_map(|s| s.metrics.lcc).collect();
                let b: Vec<f64> =
                    config_results[j].per_split.iter().filter_map(|s| s.metrics.lcc).collect();
                if a.len() != ctx.plan.repeats.len() || b.len() != ctx.plan.repeats.len() {
                    continue;
                }
                let test = two_sample_ttest(&a, &b)?;
                ttest_matrix.push(TTestEntry {
                    a: config_results[i].id.clone(),
                    b: config_results[j].id.clone(),
                    t: test.t,
                    p: test.p,
                    degenerate: test.degenerate,
                });
            }
        }
    }

    let winner = config_results
        .iter()
        .max_by(|a, b| {
            let ma = a.median.lcc.unwrap_or(f64::NEG_INFINITY);
            let mb = b.median.lcc.unwrap_or(f64::NEG_INFINITY);
            ma.partial_cmp(&mb).expect("finite medians")
        })
        .map(|c| c.id.clone())
        .unwrap_or_default();

    // Fine-tuning summaries, if that stage ran.
    let mut finetune_summaries = Vec::new();
    if ctx.cfg.finetune.enabled && ctx.cfg.backbone.kind == BackboneKind::Desk {
        let metas: Vec<Option<usize>> = if ctx.per_split_backbone() {
            (0..ctx.plan.repeats.len()).map(Some).collect()
        } else {
            vec![None]
        };
        for split in metas {
            let path = ctx.paths.finetune_meta(split);
            if path.exists() {
                let text = fs::read_to_string(&path).map_err(io_err(&path))?;
                if let Ok(meta) = serde_json::from_str::<FinetuneMeta>(&text) {
                    finetune_summaries.push(FinetuneSummary {
                        split: meta.split,
                        iterations: meta.iterations,
                        final_loss: meta.final_loss,
                        train_accuracy: meta.train_accuracy,
                    });
                }
            }
        }
    }

    let report = EvalReport {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: ctx.cfg.clone(),
        seed: ctx.cfg.protocol.seed,
        protocol: ctx.plan.protocol.name().to_string(),
        dataset_name: ctx.manifest.name.clone(),
        fold_sizes: ctx
            .plan
            .repeats
            .iter()
            .map(|r| (r.train.len(), r.val.len(), r.test.len()))
            .collect(),
        configs: config_results,
        crop_selection,
        ttest_matrix,
        winner,
        finetune: finetune_summaries,
    };

    crate::report::emit_report(&report, &ctx.paths.dir, &ctx.cfg.output.formats)
        .map_err(|e| ExperimentError::Io { path: ctx.paths.report_json(), source: e })?;

    if ctx.cfg.output.emit_model {
        emit_winning_model(ctx, &report)?;
    }
    Ok(report)
}

/// Train the winning configuration on the full dataset and persist it as a
/// deployable quality model.
fn emit_winning_model(ctx: &ExperimentContext, report: &EvalReport) -> Result<(), ExperimentError> {
    let fusion = report
        .configs
        .iter()
        .find(|c| c.id == report.winner)
        .and_then(|c| c.fusion);
    let all_ids = ctx.manifest.ids();
    let seed = ctx.cfg.protocol.seed;

    let (backbone_ref, store) = match ctx.cfg.backbone.kind {
        BackboneKind::Precomputed => {
            let path = ctx.cfg.backbone.path.clone().expect("validated");
            let store = PrecomputedFeatures::load(&path)?;
            (
                BackboneRef::Precomputed {
                    tag: store.source_tag().to_string(),
                    dim: store.feature_dim(),
                },
                store,
            )
        }
        BackboneKind::Desk => {
            let images = ctx.load_images()?;
            let input_size = ctx.cfg.backbone.input_size;
            let base_net = DeskCnn::new(input_size, seeds::derive_seed(seed, "backbone-init", 0))?;
            let bundle = if ctx.cfg.finetune.enabled {
                let indices: Vec<usize> = (0..ctx.manifest.records.len()).collect();
                let mean = ctx.mean_over(&images, &indices);
                let mean_image = MeanImage::PerChannel(mean);
                let mut samples = Vec::new();
                for (i, rec) in ctx.manifest.records.iter().enumerate() {
                    let class = partition_mos(rec.mos, ctx.manifest.scale())?;
                    let img = &images[i];
                    let grid =
                        (img.width() - input_size + 1) * (img.height() - input_size + 1);
                    let n = ctx.cfg.train_crops().min(grid);
                    let crop_seed = seeds::derive_seed_str(seed, "crops", &rec.id);
                    let sample = random_crops(img, n, input_size, crop_seed)?;
                    for crop in sample.crops {
                        samples
                            .push(TrainSample { crop: subtract_mean(&crop, &mean_image)?, class });
                    }
                }
                let weights =
                    class_weights_for(&ctx.manifest, all_ids.iter().map(|s| s.as_str()))?;
                let train_cfg = TrainConfig {
                    iterations: ctx.cfg.finetune.iterations,
                    batch_size: ctx.cfg.finetune.batch_size,
                    learning_rate: ctx.cfg.finetune.learning_rate,
                    momentum: ctx.cfg.finetune.momentum,
                    new_head_init_std: ctx.cfg.finetune.head_init_std,
                    freeze_depth: ctx.cfg.finetune.freeze_depth,
                    seed: seeds::derive_seed(seed, "final-finetune", 0),
                };
                let outcome = finetune(&base_net, &samples, &weights, &train_cfg)?;
                BackboneBundle { net: outcome.net, mean: mean_image }
            } else {
                BackboneBundle { net: base_net, mean: MeanImage::PerChannel([127.5; 3]) }
            };
            let hash = save_checkpoint(&bundle, &ctx.paths.model_checkpoint())?;

            // Extract features for the final model's training set.
            let n_crops = fusion.map(|f| f.n_crops).unwrap_or(1);
            let mut store =
                PrecomputedFeatures::new(bundle.net.shape().feature_dim, format!("desk:{hash}"));
            for (i, rec) in ctx.manifest.records.iter().enumerate() {
                let crops = ctx.eval_crops(&images[i], &rec.id, n_crops)?;
                let centered: Vec<Crop> = crops
                    .iter()
                    .map(|c| subtract_mean(c, &bundle.mean))
                    .collect::<Result<_, _>>()?;
                let feats = bundle.net.extract_batch(&centered)?;
                for (ci, feat) in feats.into_iter().enumerate() {
                    store.insert(rec.id.clone(), ci as u32, feat)?;
                }
            }
            (
                BackboneRef::DeskCheckpoint { hash, input_size },
                store,
            )
        }
    };

    let (rows, targets) = assemble_rows(ctx, &store, &all_ids, fusion.as_ref())?;
    let standardizer =
        if ctx.cfg.svr.standardize { Some(fit_standardizer(&rows)) } else { None };
    let prepared: Vec<Vec<f64>> = match &standardizer {
        Some(s) => rows
            .iter()
            .map(|r| {
                let mut row = r.clone();
                s.apply(&mut row);
                row
            })
            .collect(),
        None => rows,
    };
    let x = SampleMatrix::from_rows(&prepared)?;
    let (svr, _) = train_svr(
        &x,
        &targets,
        &ctx.cfg.svr.svr_config(),
        seeds::derive_seed(seed, "final-svr", 0),
    )?;

    let model = QualityModel {
        format_version: 1,
        backbone: backbone_ref,
        preprocess: match ctx.cfg.preprocess.mode {
            PreprocessKind::CentralCrop => {
                ModelPreprocess::CentralCrop { resize_target: ctx.cfg.preprocess.resize_target }
            }
            PreprocessKind::RandomCrops => ModelPreprocess::RandomCrops,
        },
        fusion,
        standardizer,
        svr,
        scale_min: ctx.manifest.scale_min,
        scale_max: ctx.manifest.scale_max,
    };
    save_model(&model, &ctx.paths.model())?;
    Ok(())
}

/// Run all stages in order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<EvalReport, ExperimentError> {
    let ctx = prepare(cfg)?;
    stage_finetune(&ctx)?;
    stage_extract(&ctx)?;
    stage_train_svr(&ctx)?;
    stage_evaluate(&ctx)
}

/// Outcome of scoring one image.
#[derive(Debug, Clone)]
pub struct PredictionOutcome {
    pub score: f64,
    /// Per-crop scores, present for prediction-pooling models.
    pub per_crop: Option<Vec<f64>>,
    /// Set when the image's offset grid is smaller than the crop count.
    pub with_replacement: bool,
}

/// Score a single image with a loaded model and its backbone bundle.
pub fn predict_image(
    model: &QualityModel,
    bundle: &BackboneBundle,
    image_path: &Path,
    n_crops: Option<usize>,
    seed: u64,
) -> Result<PredictionOutcome, ExperimentError> {
    if let BackboneRef::Precomputed { tag, .. } = &model.backbone {
        return Err(ExperimentError::BackboneMismatch(format!(
            "model references precomputed features `{tag}` and cannot score raw images"
        )));
    }
    let image = load_image(image_path)?;
    let input_size = bundle.net.input_size();

    let apply_svr = |feat: &FeatureVector| -> Result<f64, ExperimentError> {
        let mut row = widen_f32(feat.as_slice());
        if let Some(s) = &model.standardizer {
            s.apply(&mut row);
        }
        Ok(crate::regressor::predict(&model.svr, &row)?)
    };

    match model.preprocess {
        ModelPreprocess::CentralCrop { resize_target } => {
            let resized = resize_shorter_side(&image, resize_target)?;
            let crop = center_crop(&resized, input_size)?;
            let centered = subtract_mean(&crop, &bundle.mean)?;
            let feat = bundle.net.extract_batch(std::slice::from_ref(&centered))?;
            Ok(PredictionOutcome {
                score: apply_svr(&feat[0])?,
                per_crop: None,
                with_replacement: false,
            })
        }
        ModelPreprocess::RandomCrops => {
            let fusion = model.fusion.as_ref().ok_or_else(|| {
                ExperimentError::BackboneMismatch(
                    "random-crop model lacks a fusion config".to_string(),
                )
            })?;
            let n = n_crops.unwrap_or(fusion.n_crops);
            if fusion.scheme == FusionScheme::FeatureConcat && n != fusion.n_crops {
                return Err(ExperimentError::BackboneMismatch(format!(
                    "feature-concat model is fixed to {} crops, requested {n}",
                    fusion.n_crops
                )));
            }
            let sample = random_crops(&image, n, input_size, seed)?;
            let centered: Vec<Crop> = sample
                .crops
                .iter()
                .map(|c| subtract_mean(c, &bundle.mean))
                .collect::<Result<_, _>>()?;
            let feats = bundle.net.extract_batch(&centered)?;
            let (score, per_crop) = match fusion.scheme {
                FusionScheme::FeaturePool => {
                    (apply_svr(&pool_features(&feats, fusion.op.expect("validated"))?)?, None)
                }
                FusionScheme::FeatureConcat => (apply_svr(&concat_features(&feats)?)?, None),
                FusionScheme::PredictionPool => {
                    let per_crop: Vec<f64> =
                        feats.iter().map(&apply_svr).collect::<Result<_, _>>()?;
                    let fused = pool_predictions(&per_crop, fusion.op.expect("validated"))?;
                    (fused, Some(per_crop))
                }
            };
            Ok(PredictionOutcome { score, per_crop, with_replacement: sample.with_replacement })
        }
    }
}
