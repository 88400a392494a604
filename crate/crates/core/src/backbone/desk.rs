//! A small convolutional backbone with explicit forward and backward passes.
//!
//! Topology: conv(5x5, stride 2, 8 filters) -> relu -> maxpool(2x2, stride 2)
//! -> conv(3x3, stride 1, 16 filters, pad 1) -> relu -> maxpool(2x2, stride 2)
//! -> fc(64) -> relu -> fc(5 class logits).
//!
//! The 64-unit post-relu activations of the penultimate layer are the crop
//! descriptor; the classifier head only exists for fine-tuning.
//!
//! Parameters are stored as f32; all arithmetic runs in f64 (64-bit
//! accumulation), which keeps finite-difference gradient checks tight.
//! Convolutions use im2col plus a small GEMM.

use rayon::prelude::*;

use crate::imageops::Crop;
use crate::seeds;

use super::{BackboneError, FeatureExtractor, FeatureVector};

pub const NUM_CLASSES: usize = 5;
/// Width of the penultimate fully connected layer (the descriptor length).
pub const FEATURE_DIM: usize = 64;
/// Fixed input normalization: centered pixels are divided by 128 so
/// activations start at order one.
const INPUT_SCALE: f64 = 1.0 / 128.0;
/// Samples per deterministic reduction chunk in batched backward passes.
/// Fixed, so gradient sums are identical for any worker count.
const GRAD_CHUNK: usize = 4;

pub type Logits = Vec<[f64; NUM_CLASSES]>;

#[derive(Debug, Clone, Copy)]
struct ConvSpec {
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl ConvSpec {
    fn out_side(&self, in_side: usize) -> usize {
        (in_side + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn weight_len(&self) -> usize {
        self.out_c * self.in_c * self.kernel * self.kernel
    }
}

const CONV1: ConvSpec = ConvSpec { in_c: 3, out_c: 8, kernel: 5, stride: 2, pad: 0 };
const CONV2: ConvSpec = ConvSpec { in_c: 8, out_c: 16, kernel: 3, stride: 1, pad: 1 };

/// Spatial side lengths at every stage for a given input size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeskCnnShape {
    pub input: usize,
    pub conv1: usize,
    pub pool1: usize,
    pub conv2: usize,
    pub pool2: usize,
    pub flat: usize,
    pub feature_dim: usize,
    pub classes: usize,
}

impl DeskCnnShape {
    pub fn for_input(input: usize) -> Result<Self, BackboneError> {
        if input < CONV1.kernel {
            return Err(BackboneError::InputSizeMismatch { expected: CONV1.kernel, got: input });
        }
        let conv1 = CONV1.out_side(input);
        let pool1 = conv1 / 2;
        if pool1 == 0 {
            return Err(BackboneError::InputSizeMismatch { expected: 8, got: input });
        }
        let conv2 = CONV2.out_side(pool1);
        let pool2 = conv2 / 2;
        if pool2 == 0 {
            return Err(BackboneError::InputSizeMismatch { expected: 12, got: input });
        }
        Ok(Self {
            input,
            conv1,
            pool1,
            conv2,
            pool2,
            flat: CONV2.out_c * pool2 * pool2,
            feature_dim: FEATURE_DIM,
            classes: NUM_CLASSES,
        })
    }
}

/// The network parameters. Cloning is cheap enough for checkpointing.
#[derive(Debug, Clone, PartialEq)]
pub struct DeskCnn {
    input_size: usize,
    shape: DeskCnnShape,
    conv1_w: Vec<f32>,
    conv1_b: Vec<f32>,
    conv2_w: Vec<f32>,
    conv2_b: Vec<f32>,
    fc1_w: Vec<f32>,
    fc1_b: Vec<f32>,
    fc2_w: Vec<f32>,
    fc2_b: Vec<f32>,
}

/// Per-sample activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    conv1_pre: Vec<f64>,
    pool1_out: Vec<f64>,
    pool1_argmax: Vec<usize>,
    conv2_pre: Vec<f64>,
    pool2_out: Vec<f64>,
    pool2_argmax: Vec<usize>,
    fc1_pre: Vec<f64>,
    fc1_out: Vec<f64>,
    pub logits: [f64; NUM_CLASSES],
}

/// Parameter gradients, same shapes as the parameter tensors, f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub conv1_w: Vec<f64>,
    pub conv1_b: Vec<f64>,
    pub conv2_w: Vec<f64>,
    pub conv2_b: Vec<f64>,
    pub fc1_w: Vec<f64>,
    pub fc1_b: Vec<f64>,
    pub fc2_w: Vec<f64>,
    pub fc2_b: Vec<f64>,
}

impl Gradients {
    fn zeros(shape: &DeskCnnShape) -> Self {
        Self {
            conv1_w: vec![0.0; CONV1.weight_len()],
            conv1_b: vec![0.0; CONV1.out_c],
            conv2_w: vec![0.0; CONV2.weight_len()],
            conv2_b: vec![0.0; CONV2.out_c],
            fc1_w: vec![0.0; FEATURE_DIM * shape.flat],
            fc1_b: vec![0.0; FEATURE_DIM],
            fc2_w: vec![0.0; NUM_CLASSES * FEATURE_DIM],
            fc2_b: vec![0.0; NUM_CLASSES],
        }
    }

    fn add_assign(&mut self, other: &Gradients) {
        for (dst, src) in self.groups_mut().into_iter().zip(other.groups()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn groups(&self) -> [&[f64]; 8] {
        [
            &self.conv1_w, &self.conv1_b, &self.conv2_w, &self.conv2_b,
            &self.fc1_w, &self.fc1_b, &self.fc2_w, &self.fc2_b,
        ]
    }

    pub fn groups_mut(&mut self) -> [&mut [f64]; 8] {
        [
            &mut self.conv1_w, &mut self.conv1_b, &mut self.conv2_w, &mut self.conv2_b,
            &mut self.fc1_w, &mut self.fc1_b, &mut self.fc2_w, &mut self.fc2_b,
        ]
    }
}

/// Widened (f64) copies of the parameters, built once per batch.
struct ParamView {
    conv1_w: Vec<f64>,
    conv1_b: Vec<f64>,
    conv2_w: Vec<f64>,
    conv2_b: Vec<f64>,
    fc1_w: Vec<f64>,
    fc1_b: Vec<f64>,
    fc2_w: Vec<f64>,
    fc2_b: Vec<f64>,
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

impl DeskCnn {
    /// Fresh network with He-scaled conv/fc weights and a Gaussian(0, 0.01)
    /// classifier head; biases zero.
    pub fn new(input_size: usize, seed: u64) -> Result<Self, BackboneError> {
        let shape = DeskCnnShape::for_input(input_size)?;
        let mut rng = seeds::rng_from_seed(seed);
        let mut gaussian = |n: usize, std: f64| -> Vec<f32> {
            (0..n).map(|_| (std * seeds::standard_normal(&mut rng)) as f32).collect()
        };
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let conv1_w = gaussian(CONV1.weight_len(), he(CONV1.in_c * CONV1.kernel * CONV1.kernel));
        let conv2_w = gaussian(CONV2.weight_len(), he(CONV2.in_c * CONV2.kernel * CONV2.kernel));
        let fc1_w = gaussian(FEATURE_DIM * shape.flat, he(shape.flat));
        let fc2_w = gaussian(NUM_CLASSES * FEATURE_DIM, 0.01);
        Ok(Self {
            input_size,
            shape,
            conv1_w,
            conv1_b: vec![0.0; CONV1.out_c],
            conv2_w,
            conv2_b: vec![0.0; CONV2.out_c],
            fc1_w,
            fc1_b: vec![0.0; FEATURE_DIM],
            fc2_w,
            fc2_b: vec![0.0; NUM_CLASSES],
        })
    }

    /// Network with every weight and bias zero (logits are zero for any input).
    pub fn zeros(input_size: usize) -> Result<Self, BackboneError> {
        let mut net = Self::new(input_size, 0)?;
        for group in net.param_groups_mut() {
            group.fill(0.0);
        }
        Ok(net)
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn shape(&self) -> DeskCnnShape {
        self.shape
    }

    pub fn param_groups(&self) -> [&[f32]; 8] {
        [
            &self.conv1_w, &self.conv1_b, &self.conv2_w, &self.conv2_b,
            &self.fc1_w, &self.fc1_b, &self.fc2_w, &self.fc2_b,
        ]
    }

    pub fn param_groups_mut(&mut self) -> [&mut [f32]; 8] {
        [
            &mut self.conv1_w, &mut self.conv1_b, &mut self.conv2_w, &mut self.conv2_b,
            &mut self.fc1_w, &mut self.fc1_b, &mut self.fc2_w, &mut self.fc2_b,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.param_groups().iter().map(|g| g.len()).sum()
    }

    /// Replace the classifier head with Gaussian(0, `std`) weights and zero
    /// biases, leaving every other layer untouched.
    pub fn reinit_head(&mut self, std: f64, seed: u64) {
        let mut rng = seeds::rng_from_seed(seed);
        for w in &mut self.fc2_w {
            *w = (std * seeds::standard_normal(&mut rng)) as f32;
        }
        self.fc2_b.fill(0.0);
    }

    fn params(&self) -> ParamView {
        ParamView {
            conv1_w: widen(&self.conv1_w),
            conv1_b: widen(&self.conv1_b),
            conv2_w: widen(&self.conv2_w),
            conv2_b: widen(&self.conv2_b),
            fc1_w: widen(&self.fc1_w),
            fc1_b: widen(&self.fc1_b),
            fc2_w: widen(&self.fc2_w),
            fc2_b: widen(&self.fc2_b),
        }
    }

    fn check_crop(&self, crop: &Crop) -> Result<(), BackboneError> {
        if crop.size() != self.input_size {
            return Err(BackboneError::InputSizeMismatch {
                expected: self.input_size,
                got: crop.size(),
            });
        }
        Ok(())
    }

    /// Forward pass over a batch of crops; deterministic, returns logits and
    /// the caches needed by [`DeskCnn::backward_batch`].
    pub fn forward_batch(&self, crops: &[Crop]) -> Result<(Logits, Vec<ForwardCache>), BackboneError> {
        for crop in crops {
            self.check_crop(crop)?;
        }
        let params = self.params();
        let caches: Vec<ForwardCache> =
            crops.par_iter().map(|crop| self.forward_one(&params, crop)).collect();
        let logits = caches.iter().map(|c| c.logits).collect();
        Ok((logits, caches))
    }

    fn forward_one(&self, p: &ParamView, crop: &Crop) -> ForwardCache {
        let s = &self.shape;
        let side = s.input;
        // HWC u8-scale pixels -> scaled CHW f64.
        let mut input = vec![0.0f64; 3 * side * side];
        let pixels = crop.image.pixels();
        for y in 0..side {
            for x in 0..side {
                let base = (y * side + x) * 3;
                for c in 0..3 {
                    input[c * side * side + y * side + x] =
                        pixels[base + c] as f64 * INPUT_SCALE;
                }
            }
        }

        let conv1_pre = conv_forward(&input, side, CONV1, &p.conv1_w, &p.conv1_b, s.conv1);
        let conv1_post = relu(&conv1_pre);
        let (pool1_out, pool1_argmax) = maxpool2(&conv1_post, CONV1.out_c, s.conv1, s.pool1);
        let conv2_pre = conv_forward(&pool1_out, s.pool1, CONV2, &p.conv2_w, &p.conv2_b, s.conv2);
        let conv2_post = relu(&conv2_pre);
        let (pool2_out, pool2_argmax) = maxpool2(&conv2_post, CONV2.out_c, s.conv2, s.pool2);
        let fc1_pre = fc_forward(&pool2_out, &p.fc1_w, &p.fc1_b, FEATURE_DIM);
        let fc1_out = relu(&fc1_pre);
        let logits_v = fc_forward(&fc1_out, &p.fc2_w, &p.fc2_b, NUM_CLASSES);
        let mut logits = [0.0; NUM_CLASSES];
        logits.copy_from_slice(&logits_v);

        ForwardCache {
            input,
            conv1_pre,
            pool1_out,
            pool1_argmax,
            conv2_pre,
            pool2_out,
            pool2_argmax,
            fc1_pre,
            fc1_out,
            logits,
        }
    }

    /// Accumulate parameter gradients over the batch given per-sample logit
    /// gradients. The reduction runs over fixed-size sample chunks summed in
    /// index order, so results do not depend on the worker count.
    pub fn backward_batch(
        &self,
        caches: &[ForwardCache],
        grad_logits: &[[f64; NUM_CLASSES]],
    ) -> Result<Gradients, BackboneError> {
        if caches.len() != grad_logits.len() {
            return Err(BackboneError::InvalidTrainConfig(format!(
                "cache/gradient length mismatch: {} vs {}",
                caches.len(),
                grad_logits.len()
            )));
        }
        let params = self.params();
        let chunks: Vec<Gradients> = caches
            .par_chunks(GRAD_CHUNK)
            .zip(grad_logits.par_chunks(GRAD_CHUNK))
            .map(|(cache_chunk, grad_chunk)| {
                let mut acc = Gradients::zeros(&self.shape);
                for (cache, grad) in cache_chunk.iter().zip(grad_chunk) {
                    self.backward_one(&params, cache, grad, &mut acc);
                }
                acc
            })
            .collect();
        let mut total = Gradients::zeros(&self.shape);
        for chunk in &chunks {
            total.add_assign(chunk);
        }
        Ok(total)
    }

    fn backward_one(
        &self,
        p: &ParamView,
        cache: &ForwardCache,
        grad_logits: &[f64; NUM_CLASSES],
        acc: &mut Gradients,
    ) {
        let s = &self.shape;

        // Head: logits = fc2_w * fc1_out + fc2_b.
        let grad_fc1_out = fc_backward(
            grad_logits,
            &cache.fc1_out,
            &p.fc2_w,
            NUM_CLASSES,
            FEATURE_DIM,
            &mut acc.fc2_w,
            &mut acc.fc2_b,
        );
        let grad_fc1_pre = relu_backward(&grad_fc1_out, &cache.fc1_pre);

        let grad_flat = fc_backward(
            &grad_fc1_pre,
            &cache.pool2_out,
            &p.fc1_w,
            FEATURE_DIM,
            s.flat,
            &mut acc.fc1_w,
            &mut acc.fc1_b,
        );

        let grad_conv2_post =
            maxpool2_backward(&grad_flat, &cache.pool2_argmax, CONV2.out_c, s.conv2);
        let grad_conv2_pre = relu_backward(&grad_conv2_post, &cache.conv2_pre);
        let grad_pool1 = conv_backward(
            &grad_conv2_pre,
            &cache.pool1_out,
            s.pool1,
            CONV2,
            &p.conv2_w,
            s.conv2,
            &mut acc.conv2_w,
            &mut acc.conv2_b,
        );

        let grad_conv1_post =
            maxpool2_backward(&grad_pool1, &cache.pool1_argmax, CONV1.out_c, s.conv1);
        let grad_conv1_pre = relu_backward(&grad_conv1_post, &cache.conv1_pre);
        conv_backward_weights_only(
            &grad_conv1_pre,
            &cache.input,
            s.input,
            CONV1,
            s.conv1,
            &mut acc.conv1_w,
            &mut acc.conv1_b,
        );
    }

    /// Descriptors for a batch of crops (penultimate-layer activations).
    pub fn extract_batch(&self, crops: &[Crop]) -> Result<Vec<FeatureVector>, BackboneError> {
        let (_, caches) = self.forward_batch(crops)?;
        Ok(caches
            .into_iter()
            .map(|c| FeatureVector(c.fc1_out.iter().map(|&v| v as f32).collect()))
            .collect())
    }
}

impl FeatureExtractor for DeskCnn {
    fn input_size(&self) -> usize {
        self.input_size
    }

    fn feature_dim(&self) -> usize {
        FEATURE_DIM
    }

    fn extract(&self, crop: &Crop) -> Result<FeatureVector, BackboneError> {
        self.check_crop(crop)?;
        let params = self.params();
        let cache = self.forward_one(&params, crop);
        Ok(FeatureVector(cache.fc1_out.iter().map(|&v| v as f32).collect()))
    }
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

fn relu_backward(grad: &[f64], pre: &[f64]) -> Vec<f64> {
    grad.iter().zip(pre).map(|(&g, &x)| if x > 0.0 { g } else { 0.0 }).collect()
}

/// `input` is CHW with side `in_side`; returns CHW output of side `out_side`.
fn conv_forward(
    input: &[f64],
    in_side: usize,
    spec: ConvSpec,
    weights: &[f64],
    bias: &[f64],
    out_side: usize,
) -> Vec<f64> {
    let k2 = spec.in_c * spec.kernel * spec.kernel;
    let positions = out_side * out_side;
    let cols = im2col(input, in_side, spec, out_side);
    // out = W (out_c x k2) * cols (k2 x positions)
    let mut out = vec![0.0f64; spec.out_c * positions];
    for oc in 0..spec.out_c {
        let orow = &mut out[oc * positions..(oc + 1) * positions];
        orow.fill(bias[oc]);
        let wrow = &weights[oc * k2..(oc + 1) * k2];
        for (kk, &w) in wrow.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let crow = &cols[kk * positions..(kk + 1) * positions];
            for (o, &c) in orow.iter_mut().zip(crow) {
                *o += w * c;
            }
        }
    }
    out
}

/// Full conv backward: accumulates weight/bias gradients and returns the
/// gradient with respect to the layer input.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    grad_out: &[f64],
    input: &[f64],
    in_side: usize,
    spec: ConvSpec,
    weights: &[f64],
    out_side: usize,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) -> Vec<f64> {
    let k2 = spec.in_c * spec.kernel * spec.kernel;
    let positions = out_side * out_side;
    let cols = im2col(input, in_side, spec, out_side);
    // grad_w += grad_out (out_c x positions) * cols^T (positions x k2)
    for oc in 0..spec.out_c {
        let grow = &grad_out[oc * positions..(oc + 1) * positions];
        grad_b[oc] += grow.iter().sum::<f64>();
        let wrow = &mut grad_w[oc * k2..(oc + 1) * k2];
        for (kk, w) in wrow.iter_mut().enumerate() {
            let crow = &cols[kk * positions..(kk + 1) * positions];
            let mut acc = 0.0;
            for (g, c) in grow.iter().zip(crow) {
                acc += g * c;
            }
            *w += acc;
        }
    }
    // grad_cols = W^T (k2 x out_c) * grad_out (out_c x positions)
    let mut grad_cols = vec![0.0f64; k2 * positions];
    for oc in 0..spec.out_c {
        let grow = &grad_out[oc * positions..(oc + 1) * positions];
        let wrow = &weights[oc * k2..(oc + 1) * k2];
        for (kk, &w) in wrow.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let crow = &mut grad_cols[kk * positions..(kk + 1) * positions];
            for (c, &g) in crow.iter_mut().zip(grow) {
                *c += w * g;
            }
        }
    }
    col2im(&grad_cols, in_side, spec, out_side)
}

/// Conv backward for the first layer, where the input gradient is unused.
fn conv_backward_weights_only(
    grad_out: &[f64],
    input: &[f64],
    in_side: usize,
    spec: ConvSpec,
    out_side: usize,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) {
    let k2 = spec.in_c * spec.kernel * spec.kernel;
    let positions = out_side * out_side;
    let cols = im2col(input, in_side, spec, out_side);
    for oc in 0..spec.out_c {
        let grow = &grad_out[oc * positions..(oc + 1) * positions];
        grad_b[oc] += grow.iter().sum::<f64>();
        let wrow = &mut grad_w[oc * k2..(oc + 1) * k2];
        for (kk, w) in wrow.iter_mut().enumerate() {
            let crow = &cols[kk * positions..(kk + 1) * positions];
            let mut acc = 0.0;
            for (g, c) in grow.iter().zip(crow) {
                acc += g * c;
            }
            *w += acc;
        }
    }
}

fn im2col(input: &[f64], in_side: usize, spec: ConvSpec, out_side: usize) -> Vec<f64> {
    let positions = out_side * out_side;
    let mut cols = vec![0.0f64; spec.in_c * spec.kernel * spec.kernel * positions];
    let mut kk = 0;
    for ic in 0..spec.in_c {
        let plane = &input[ic * in_side * in_side..(ic + 1) * in_side * in_side];
        for ky in 0..spec.kernel {
            for kx in 0..spec.kernel {
                let crow = &mut cols[kk * positions..(kk + 1) * positions];
                for oy in 0..out_side {
                    let sy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if sy < 0 || sy >= in_side as isize {
                        continue;
                    }
                    let src_row = sy as usize * in_side;
                    let dst_row = oy * out_side;
                    for ox in 0..out_side {
                        let sx = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if sx < 0 || sx >= in_side as isize {
                            continue;
                        }
                        crow[dst_row + ox] = plane[src_row + sx as usize];
                    }
                }
                kk += 1;
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], in_side: usize, spec: ConvSpec, out_side: usize) -> Vec<f64> {
    let positions = out_side * out_side;
    let mut out = vec![0.0f64; spec.in_c * in_side * in_side];
    let mut kk = 0;
    for ic in 0..spec.in_c {
        let plane = &mut out[ic * in_side * in_side..(ic + 1) * in_side * in_side];
        for ky in 0..spec.kernel {
            for kx in 0..spec.kernel {
                let crow = &cols[kk * positions..(kk + 1) * positions];
                for oy in 0..out_side {
                    let sy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if sy < 0 || sy >= in_side as isize {
                        continue;
                    }
                    let src_row = sy as usize * in_side;
                    let dst_row = oy * out_side;
                    for ox in 0..out_side {
                        let sx = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if sx < 0 || sx >= in_side as isize {
                            continue;
                        }
                        plane[src_row + sx as usize] += crow[dst_row + ox];
                    }
                }
                kk += 1;
            }
        }
    }
    out
}

/// 2x2 max pooling with stride 2 (floor semantics: a trailing odd row/column
/// is dropped). Ties resolve to the first element in scan order.
fn maxpool2(input: &[f64], channels: usize, in_side: usize, out_side: usize) -> (Vec<f64>, Vec<usize>) {
    let mut out = vec![0.0f64; channels * out_side * out_side];
    let mut argmax = vec![0usize; channels * out_side * out_side];
    for c in 0..channels {
        let plane = &input[c * in_side * in_side..(c + 1) * in_side * in_side];
        for oy in 0..out_side {
            for ox in 0..out_side {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = (oy * 2 + dy) * in_side + ox * 2 + dx;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = c * out_side * out_side + oy * out_side + ox;
                out[o] = best;
                argmax[o] = c * in_side * in_side + best_idx;
            }
        }
    }
    (out, argmax)
}

fn maxpool2_backward(
    grad_out: &[f64],
    argmax: &[usize],
    channels: usize,
    in_side: usize,
) -> Vec<f64> {
    let mut grad_in = vec![0.0f64; channels * in_side * in_side];
    for (g, &idx) in grad_out.iter().zip(argmax) {
        grad_in[idx] += g;
    }
    grad_in
}

fn fc_forward(input: &[f64], weights: &[f64], bias: &[f64], out_dim: usize) -> Vec<f64> {
    let in_dim = input.len();
    let mut out = Vec::with_capacity(out_dim);
    for o in 0..out_dim {
        let wrow = &weights[o * in_dim..(o + 1) * in_dim];
        let mut acc = bias[o];
        for (w, x) in wrow.iter().zip(input) {
            acc += w * x;
        }
        out.push(acc);
    }
    out
}

/// Accumulates fc weight/bias gradients and returns the input gradient.
fn fc_backward(
    grad_out: &[f64],
    input: &[f64],
    weights: &[f64],
    out_dim: usize,
    in_dim: usize,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) -> Vec<f64> {
    let mut grad_in = vec![0.0f64; in_dim];
    for o in 0..out_dim {
        let g = grad_out[o];
        grad_b[o] += g;
        let wrow = &weights[o * in_dim..(o + 1) * in_dim];
        let grow = &mut grad_w[o * in_dim..(o + 1) * in_dim];
        if g != 0.0 {
            for i in 0..in_dim {
                grow[i] += g * input[i];
                grad_in[i] += g * wrow[i];
            }
        }
    }
    grad_in
}
