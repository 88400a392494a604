//! Linear epsilon-insensitive support vector regression.
//!
//! Objective: `J(w, b) = 0.5 * ||w||^2 + C * sum_i max(0, |w.x_i + b - y_i| - eps)`.
//!
//! The solver works on the equivalent dual with one variable per sample,
//! `min 0.5 * b'Qb + eps*||b||_1 - y'b` subject to `sum(b) = 0`,
//! `b_i in [-C, C]`, `Q = X X'`. The zero-sum constraint carries the
//! unregularized bias, so updates move pairs of variables: each step picks a
//! first index from a seeded per-pass permutation, a partner from a seeded
//! candidate set, and solves the one-dimensional piecewise-quadratic
//! subproblem exactly. One maximal-violating-pair step per pass guarantees
//! progress. Every step decreases the dual objective, which is what the
//! monotone training log records; the bias is recovered after each pass by
//! exact one-dimensional minimization of the primal in `b`.

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::seeds;

#[derive(Debug, Error)]
pub enum SvrError {
    #[error("training needs at least one sample")]
    EmptySamples,
    #[error("zero-dimensional features")]
    ZeroDimensional,
    #[error("matrix shape {rows}x{cols} does not match data length {len}")]
    ShapeMismatch { rows: usize, cols: usize, len: usize },
    #[error("feature dimension mismatch: model has {expected}, input has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("targets length {got} does not match sample count {expected}")]
    TargetMismatch { expected: usize, got: usize },
    #[error("non-finite value in training input")]
    NonFiniteInput,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// SVR hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SvrConfig {
    /// Regularization trade-off, > 0.
    pub c: f64,
    /// Half-width of the insensitivity tube, >= 0.
    pub epsilon: f64,
    /// Convergence tolerance: training stops when the per-pass objective
    /// improvement drops below `tol * (1 + |objective|)`.
    pub tol: f64,
    pub max_passes: usize,
}

impl Default for SvrConfig {
    fn default() -> Self {
        Self { c: 1.0, epsilon: 0.1, tol: 1e-6, max_passes: 200 }
    }
}

impl SvrConfig {
    fn validate(&self) -> Result<(), SvrError> {
        if !(self.c > 0.0) {
            return Err(SvrError::InvalidConfig("C must be > 0".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(SvrError::InvalidConfig("epsilon must be >= 0".into()));
        }
        if !(self.tol > 0.0) {
            return Err(SvrError::InvalidConfig("tol must be > 0".into()));
        }
        if self.max_passes == 0 {
            return Err(SvrError::InvalidConfig("max_passes must be > 0".into()));
        }
        Ok(())
    }
}

/// Dense row-major sample matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMatrix {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl SampleMatrix {
    pub fn new(data: Vec<f64>, rows: usize, cols: usize) -> Result<Self, SvrError> {
        if data.len() != rows * cols {
            return Err(SvrError::ShapeMismatch { rows, cols, len: data.len() });
        }
        Ok(Self { data, rows, cols })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, SvrError> {
        let n = rows.len();
        let d = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(n * d);
        for row in rows {
            if row.len() != d {
                return Err(SvrError::ShapeMismatch { rows: n, cols: d, len: row.len() });
            }
            data.extend_from_slice(row);
        }
        Self::new(data, n, d)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// A trained linear model `score(x) = w.x + b`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LinearSvrModel {
    pub w: Vec<f64>,
    pub b: f64,
    pub config: SvrConfig,
    pub feature_dim: usize,
    pub n_samples: usize,
}

/// Per-pass solver log.
#[derive(Debug, Clone, Default)]
pub struct SvrTrainLog {
    /// The quantity the solver descends; non-increasing by construction.
    pub dual_objective: Vec<f64>,
    /// Primal objective J(w, b) after each pass, for diagnostics.
    pub primal_objective: Vec<f64>,
    pub passes: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The primal objective `J(w, b)` for explicit parameters.
pub fn objective_of(
    w: &[f64],
    b: f64,
    x: &SampleMatrix,
    y: &[f64],
    cfg: &SvrConfig,
) -> Result<f64, SvrError> {
    if w.len() != x.cols() {
        return Err(SvrError::DimensionMismatch { expected: x.cols(), got: w.len() });
    }
    if y.len() != x.rows() {
        return Err(SvrError::TargetMismatch { expected: x.rows(), got: y.len() });
    }
    let reg: f64 = 0.5 * dot(w, w);
    let mut loss = 0.0;
    for i in 0..x.rows() {
        let r = dot(w, x.row(i)) + b - y[i];
        loss += (r.abs() - cfg.epsilon).max(0.0);
    }
    Ok(reg + cfg.c * loss)
}

/// The primal objective of a trained model on a dataset.
pub fn objective(
    model: &LinearSvrModel,
    x: &SampleMatrix,
    y: &[f64],
    cfg: &SvrConfig,
) -> Result<f64, SvrError> {
    objective_of(&model.w, model.b, x, y, cfg)
}

/// Predict a score for one feature vector.
pub fn predict(model: &LinearSvrModel, x: &[f64]) -> Result<f64, SvrError> {
    if x.len() != model.feature_dim {
        return Err(SvrError::DimensionMismatch { expected: model.feature_dim, got: x.len() });
    }
    Ok(dot(&model.w, x) + model.b)
}

/// Predict from an f32 descriptor (widened before the dot product).
pub fn predict_f32(model: &LinearSvrModel, x: &[f32]) -> Result<f64, SvrError> {
    if x.len() != model.feature_dim {
        return Err(SvrError::DimensionMismatch { expected: model.feature_dim, got: x.len() });
    }
    Ok(model.w.iter().zip(x).map(|(w, &v)| w * v as f64).sum::<f64>() + model.b)
}

/// Exact minimizer of `J(w, .)`: the epsilon-insensitive loss is piecewise
/// linear in `b`, so the minimum sits on a breakpoint or a flat interval
/// between two; we take the interval midpoint for determinism.
fn optimal_bias(pred: &[f64], y: &[f64], epsilon: f64) -> f64 {
    let n = y.len();
    let mut breakpoints = Vec::with_capacity(2 * n);
    for i in 0..n {
        let t = y[i] - pred[i];
        breakpoints.push(t - epsilon);
        breakpoints.push(t + epsilon);
    }
    breakpoints.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let loss = |b: f64| -> f64 {
        let mut acc = 0.0;
        for i in 0..n {
            acc += ((b - (y[i] - pred[i])).abs() - epsilon).max(0.0);
        }
        acc
    };
    let mut best = f64::INFINITY;
    let mut values = Vec::with_capacity(breakpoints.len());
    for &b in &breakpoints {
        let l = loss(b);
        values.push(l);
        if l < best {
            best = l;
        }
    }
    let tol = 1e-12 * (1.0 + best.abs());
    let lo = breakpoints
        .iter()
        .zip(&values)
        .find(|(_, &l)| l <= best + tol)
        .map(|(&b, _)| b)
        .expect("non-empty");
    let hi = breakpoints
        .iter()
        .zip(&values)
        .rev()
        .find(|(_, &l)| l <= best + tol)
        .map(|(&b, _)| b)
        .expect("non-empty");
    (lo + hi) / 2.0
}

struct DualState<'a> {
    x: &'a SampleMatrix,
    y: &'a [f64],
    c: f64,
    epsilon: f64,
    beta: Vec<f64>,
    w: Vec<f64>,
    norms: Vec<f64>,
}

impl<'a> DualState<'a> {
    fn new(x: &'a SampleMatrix, y: &'a [f64], cfg: &SvrConfig) -> Self {
        let norms = (0..x.rows()).map(|i| dot(x.row(i), x.row(i))).collect();
        Self {
            x,
            y,
            c: cfg.c,
            epsilon: cfg.epsilon,
            beta: vec![0.0; x.rows()],
            w: vec![0.0; x.cols()],
            norms,
        }
    }

    fn residual(&self, i: usize) -> f64 {
        dot(&self.w, self.x.row(i)) - self.y[i]
    }

    /// `0.5 b'Qb + eps ||b||_1 - y'b`, using `b'Qb = ||w||^2`.
    fn dual_objective(&self) -> f64 {
        let mut acc = 0.5 * dot(&self.w, &self.w);
        for (i, &b) in self.beta.iter().enumerate() {
            acc += self.epsilon * b.abs() - self.y[i] * b;
        }
        acc
    }

    /// Exact minimization along `beta_i += d, beta_j -= d`; applies the step
    /// and reports the dual decrease, or `None` when no progress is possible.
    fn pair_update(&mut self, i: usize, j: usize) -> Option<f64> {
        if i == j {
            return None;
        }
        let (bi, bj) = (self.beta[i], self.beta[j]);
        let lo = (-self.c - bi).max(bj - self.c);
        let hi = (self.c - bi).min(bj + self.c);
        if !(hi - lo > 0.0) {
            return None;
        }
        let q_ij = dot(self.x.row(i), self.x.row(j));
        let a = (self.norms[i] + self.norms[j] - 2.0 * q_ij).max(0.0);
        let g = self.residual(i) - self.residual(j);
        let eps = self.epsilon;
        let phi = |d: f64| 0.5 * a * d * d + g * d + eps * ((bi + d).abs() + (bj - d).abs());

        let mut candidates: [f64; 8] = [lo, hi, -bi, bj, 0.0, 0.0, 0.0, 0.0];
        let mut count = 4;
        if a > 0.0 {
            for s1 in [-1.0, 1.0] {
                for s2 in [-1.0, 1.0] {
                    candidates[count] = -(g + eps * (s1 - s2)) / a;
                    count += 1;
                }
            }
        }
        let base = phi(0.0);
        let mut best_d = 0.0;
        let mut best_phi = base;
        for &cand in &candidates[..count] {
            let d = cand.clamp(lo, hi);
            let v = phi(d);
            if v < best_phi {
                best_phi = v;
                best_d = d;
            }
        }
        if !(base - best_phi > 0.0) {
            return None;
        }
        self.beta[i] = (bi + best_d).clamp(-self.c, self.c);
        self.beta[j] = (bj - best_d).clamp(-self.c, self.c);
        let (xi, xj) = (self.x.row(i), self.x.row(j));
        for k in 0..self.w.len() {
            self.w[k] += best_d * (xi[k] - xj[k]);
        }
        Some(base - best_phi)
    }

    /// Directional derivatives for the maximal-violating-pair search.
    fn violation_pair(&self) -> Option<(usize, usize, f64)> {
        let n = self.beta.len();
        let mut best_up = (f64::INFINITY, usize::MAX);
        let mut best_down = (f64::INFINITY, usize::MAX);
        let mut second_up = (f64::INFINITY, usize::MAX);
        let mut second_down = (f64::INFINITY, usize::MAX);
        for i in 0..n {
            let g = self.residual(i);
            let b = self.beta[i];
            if b < self.c {
                let up = g + self.epsilon * if b >= 0.0 { 1.0 } else { -1.0 };
                if up < best_up.0 {
                    second_up = best_up;
                    best_up = (up, i);
                } else if up < second_up.0 {
                    second_up = (up, i);
                }
            }
            if b > -self.c {
                let down = -g + self.epsilon * if b <= 0.0 { 1.0 } else { -1.0 };
                if down < best_down.0 {
                    second_down = best_down;
                    best_down = (down, i);
                } else if down < second_down.0 {
                    second_down = (down, i);
                }
            }
        }
        let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
        if best_up.1 != usize::MAX && best_down.1 != usize::MAX && best_up.1 != best_down.1 {
            pairs.push((best_up.1, best_down.1, best_up.0 + best_down.0));
        }
        if best_up.1 != usize::MAX && second_down.1 != usize::MAX && best_up.1 != second_down.1 {
            pairs.push((best_up.1, second_down.1, best_up.0 + second_down.0));
        }
        if second_up.1 != usize::MAX && best_down.1 != usize::MAX && second_up.1 != best_down.1 {
            pairs.push((second_up.1, best_down.1, second_up.0 + best_down.0));
        }
        pairs
            .into_iter()
            .min_by(|a, b| a.2.partial_cmp(&b.2).expect("finite"))
    }
}

/// Train a linear epsilon-insensitive SVR. Deterministic for a fixed seed.
pub fn train_svr(
    x: &SampleMatrix,
    y: &[f64],
    cfg: &SvrConfig,
    seed: u64,
) -> Result<(LinearSvrModel, SvrTrainLog), SvrError> {
    cfg.validate()?;
    let n = x.rows();
    let d = x.cols();
    if n == 0 {
        return Err(SvrError::EmptySamples);
    }
    if d == 0 {
        return Err(SvrError::ZeroDimensional);
    }
    if y.len() != n {
        return Err(SvrError::TargetMismatch { expected: n, got: y.len() });
    }
    if x.data.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
        return Err(SvrError::NonFiniteInput);
    }

    let mut state = DualState::new(x, y, cfg);
    let mut log = SvrTrainLog::default();
    let mut prev_dual = state.dual_objective();
    // 0.25 of the samples, at least 4, at most 16 candidate partners per step.
    let n_candidates = (n / 4).clamp(4, 16).min(n.saturating_sub(1)).max(1);

    for pass in 0..cfg.max_passes {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng =
            seeds::rng_from_seed(seeds::derive_seed(seed, "svr-pass", pass as u64));
        order.shuffle(&mut rng);
        for &i in &order {
            // Seeded candidate partners; best by exact achievable decrease.
            let mut best: Option<(usize, f64)> = None;
            for _ in 0..n_candidates {
                let j = rng.random_range(0..n);
                if j == i {
                    continue;
                }
                let trial = preview_decrease(&state, i, j);
                if let Some(dec) = trial {
                    if best.map(|(_, b)| dec > b).unwrap_or(true) {
                        best = Some((j, dec));
                    }
                }
            }
            if let Some((j, _)) = best {
                state.pair_update(i, j);
            }
        }
        // One maximal-violating-pair step per pass.
        if let Some((i, j, violation)) = state.violation_pair() {
            if violation < -1e-12 {
                state.pair_update(i, j);
            }
        }

        let dual = state.dual_objective();
        let bias = optimal_bias(
            &(0..n).map(|i| dot(&state.w, x.row(i))).collect::<Vec<f64>>(),
            y,
            cfg.epsilon,
        );
        let primal = objective_of(&state.w, bias, x, y, cfg)?;
        log.dual_objective.push(dual);
        log.primal_objective.push(primal);
        log.passes = pass + 1;
        let improvement = prev_dual - dual;
        prev_dual = dual;
        if improvement < cfg.tol * (1.0 + dual.abs()) && pass > 0 {
            log.converged = true;
            break;
        }
    }

    let pred: Vec<f64> = (0..n).map(|i| dot(&state.w, x.row(i))).collect();
    let b = optimal_bias(&pred, y, cfg.epsilon);
    Ok((
        LinearSvrModel { w: state.w, b, config: *cfg, feature_dim: d, n_samples: n },
        log,
    ))
}

/// Decrease achievable by a pair step, without mutating the state.
fn preview_decrease(state: &DualState<'_>, i: usize, j: usize) -> Option<f64> {
    if i == j {
        return None;
    }
    let (bi, bj) = (state.beta[i], state.beta[j]);
    let lo = (-state.c - bi).max(bj - state.c);
    let hi = (state.c - bi).min(bj + state.c);
    if !(hi - lo > 0.0) {
        return None;
    }
    let q_ij = dot(state.x.row(i), state.x.row(j));
    let a = (state.norms[i] + state.norms[j] - 2.0 * q_ij).max(0.0);
    let g = state.residual(i) - state.residual(j);
    let eps = state.epsilon;
    let phi = |d: f64| 0.5 * a * d * d + g * d + eps * ((bi + d).abs() + (bj - d).abs());
    let base = phi(0.0);
    let mut best = base;
    let mut candidates: [f64; 8] = [lo, hi, -bi, bj, 0.0, 0.0, 0.0, 0.0];
    let mut count = 4;
    if a > 0.0 {
        for s1 in [-1.0, 1.0] {
            for s2 in [-1.0, 1.0] {
                candidates[count] = -(g + eps * (s1 - s2)) / a;
                count += 1;
            }
        }
    }
    for &cand in &candidates[..count] {
        let v = phi(cand.clamp(lo, hi));
        if v < best {
            best = v;
        }
    }
    if base - best > 0.0 {
        Some(base - best)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[&[f64]]) -> SampleMatrix {
        SampleMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn predict_is_affine() {
        let model = LinearSvrModel {
            w: vec![2.0, -1.0],
            b: 3.0,
            config: SvrConfig::default(),
            feature_dim: 2,
            n_samples: 0,
        };
        assert_eq!(predict(&model, &[0.0, 0.0]).unwrap(), 3.0);
        let x1 = [1.0, 2.0];
        let x2 = [-0.5, 4.0];
        let sum: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a + b).collect();
        let lhs = predict(&model, &sum).unwrap();
        let rhs = predict(&model, &x1).unwrap() + predict(&model, &x2).unwrap() - model.b;
        assert!((lhs - rhs).abs() < 1e-12);
        assert!(predict(&model, &[1.0]).is_err());
    }

    #[test]
    fn constant_model_predicts_its_bias() {
        let model = LinearSvrModel {
            w: vec![0.0; 3],
            b: 55.0,
            config: SvrConfig::default(),
            feature_dim: 3,
            n_samples: 0,
        };
        assert_eq!(predict(&model, &[9.0, -4.0, 2.0]).unwrap(), 55.0);
    }

    #[test]
    fn objective_examples() {
        let cfg = SvrConfig { c: 2.0, epsilon: 0.5, ..SvrConfig::default() };
        let x = matrix(&[&[1.0], &[2.0]]);
        // w=0, b=0, targets inside the tube -> 0.
        assert_eq!(
            objective_of(&[0.0], 0.0, &x, &[0.4, -0.3], &cfg).unwrap(),
            0.0
        );
        // Single sample, residual r, eps=0 -> 0.5 w^2 + C*|r|.
        let cfg0 = SvrConfig { c: 3.0, epsilon: 0.0, ..SvrConfig::default() };
        let x1 = matrix(&[&[2.0]]);
        let j = objective_of(&[1.5], 0.25, &x1, &[1.0], &cfg0).unwrap();
        let r: f64 = 1.5 * 2.0 + 0.25 - 1.0;
        assert!((j - (0.5 * 1.5 * 1.5 + 3.0 * r.abs())).abs() < 1e-12);
    }

    #[test]
    fn objective_matches_independent_reimplementation() {
        // Straightforward per-sample loop written differently.
        fn oracle(w: &[f64], b: f64, x: &SampleMatrix, y: &[f64], c: f64, eps: f64) -> f64 {
            let mut total = 0.5 * w.iter().map(|v| v * v).sum::<f64>();
            for i in 0..x.rows() {
                let mut pred = b;
                for (k, &wv) in w.iter().enumerate() {
                    pred += wv * x.row(i)[k];
                }
                let excess = (pred - y[i]).abs() - eps;
                if excess > 0.0 {
                    total += c * excess;
                }
            }
            total
        }
        let mut rng = crate::seeds::rng_from_seed(5);
        for _ in 0..20 {
            let n = rng.random_range(1..8usize);
            let d = rng.random_range(1..4usize);
            let rows: Vec<Vec<f64>> =
                (0..n).map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
            let x = SampleMatrix::from_rows(&rows).unwrap();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let w: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b = rng.random_range(-3.0..3.0);
            let cfg = SvrConfig { c: 1.7, epsilon: 0.3, ..SvrConfig::default() };
            let ours = objective_of(&w, b, &x, &y, &cfg).unwrap();
            let theirs = oracle(&w, b, &x, &y, cfg.c, cfg.epsilon);
            assert!((ours - theirs).abs() < 1e-12);
        }
    }

    #[test]
    fn fits_exact_line_within_tube() {
        // y = 2x, eps = 0.1, large C: slope within 0.15 of 2 and every
        // residual inside the tube.
        let xs = [-1.0, -0.5, 0.0, 0.5, 1.0];
        let rows: Vec<Vec<f64>> = xs.iter().map(|&v| vec![v]).collect();
        let x = SampleMatrix::from_rows(&rows).unwrap();
        let y: Vec<f64> = xs.iter().map(|&v| 2.0 * v).collect();
        let cfg = SvrConfig { c: 1000.0, epsilon: 0.1, tol: 1e-12, max_passes: 2000 };
        let (model, log) = train_svr(&x, &y, &cfg, 7).unwrap();
        assert!((model.w[0] - 2.0).abs() <= 0.15, "slope {}", model.w[0]);
        for (&xv, &yv) in xs.iter().zip(&y) {
            let r = (predict(&model, &[xv]).unwrap() - yv).abs();
            assert!(r <= cfg.epsilon + 1e-6, "residual {r}");
        }
        assert!(log.converged);
    }

    #[test]
    fn constant_targets_reach_zero_loss() {
        let x = matrix(&[&[1.0, 0.5], &[-2.0, 1.5], &[0.3, -0.7]]);
        let y = [55.0, 55.0, 55.0];
        let cfg = SvrConfig { epsilon: 0.25, tol: 1e-12, max_passes: 500, ..SvrConfig::default() };
        let (model, _) = train_svr(&x, &y, &cfg, 3).unwrap();
        let trained = objective(&model, &x, &y, &cfg).unwrap();
        let feasible = objective_of(&[0.0, 0.0], 55.0, &x, &y, &cfg).unwrap();
        assert_eq!(feasible, 0.0);
        assert!(trained <= feasible + cfg.tol, "objective {trained}");
        assert!((model.b - 55.0).abs() <= cfg.epsilon + 1e-9, "b {}", model.b);
    }

    #[test]
    fn single_sample_gives_zero_weight_optimum() {
        let x = matrix(&[&[3.0, -1.0]]);
        let y = [10.0];
        let cfg = SvrConfig::default();
        let (model, _) = train_svr(&x, &y, &cfg, 0).unwrap();
        assert!(model.w.iter().all(|&w| w == 0.0));
        assert!((predict(&model, &[3.0, -1.0]).unwrap() - 10.0).abs() <= cfg.epsilon + 1e-9);
        assert_eq!(objective(&model, &x, &y, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn dual_objective_log_is_monotone() {
        let mut rng = crate::seeds::rng_from_seed(11);
        for trial in 0..10 {
            let n = rng.random_range(3..30usize);
            let d = rng.random_range(1..6usize);
            let rows: Vec<Vec<f64>> =
                (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let x = SampleMatrix::from_rows(&rows).unwrap();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
            let cfg = SvrConfig { c: 5.0, epsilon: 0.2, tol: 1e-10, max_passes: 100 };
            let (_, log) = train_svr(&x, &y, &cfg, trial).unwrap();
            for pair in log.dual_objective.windows(2) {
                assert!(
                    pair[1] <= pair[0] + 1e-9 * (1.0 + pair[0].abs()),
                    "dual increased: {} -> {}",
                    pair[0],
                    pair[1]
                );
            }
        }
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let mut rng = crate::seeds::rng_from_seed(23);
        let rows: Vec<Vec<f64>> =
            (0..12).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let x = SampleMatrix::from_rows(&rows).unwrap();
        let y: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..100.0)).collect();
        let cfg = SvrConfig::default();
        let (a, _) = train_svr(&x, &y, &cfg, 42).unwrap();
        let (b, _) = train_svr(&x, &y, &cfg, 42).unwrap();
        assert_eq!(a.w, b.w);
        assert_eq!(a.b, b.b);
    }

    #[test]
    fn target_shift_moves_bias_and_keeps_weights() {
        let mut rng = crate::seeds::rng_from_seed(31);
        let rows: Vec<Vec<f64>> =
            (0..15).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let x = SampleMatrix::from_rows(&rows).unwrap();
        let y: Vec<f64> = (0..15).map(|_| rng.random_range(20.0..80.0)).collect();
        let shifted: Vec<f64> = y.iter().map(|v| v + 17.5).collect();
        let cfg = SvrConfig { tol: 1e-10, max_passes: 500, ..SvrConfig::default() };
        let (base, _) = train_svr(&x, &y, &cfg, 9).unwrap();
        let (moved, _) = train_svr(&x, &shifted, &cfg, 9).unwrap();
        for (a, b) in base.w.iter().zip(&moved.w) {
            assert!((a - b).abs() < 1e-7, "w drifted: {a} vs {b}");
        }
        assert!((moved.b - base.b - 17.5).abs() < 1e-6, "b: {} vs {}", moved.b, base.b);
    }

    #[test]
    fn perturbing_converged_solution_never_improves_much() {
        let mut rng = crate::seeds::rng_from_seed(77);
        let rows: Vec<Vec<f64>> =
            (0..10).map(|_| (0..2).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let x = SampleMatrix::from_rows(&rows).unwrap();
        let y: Vec<f64> = (0..10).map(|_| rng.random_range(-5.0..5.0)).collect();
        let cfg = SvrConfig { c: 2.0, epsilon: 0.1, tol: 1e-12, max_passes: 3000 };
        let (model, log) = train_svr(&x, &y, &cfg, 1).unwrap();
        assert!(log.converged);
        let j0 = objective(&model, &x, &y, &cfg).unwrap();
        for k in 0..50 {
            let mut rng = crate::seeds::rng_from_seed(500 + k);
            let mut dw: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let db: f64 = rng.random_range(-1.0..1.0);
            let norm = (dw.iter().map(|v| v * v).sum::<f64>() + db * db).sqrt();
            for v in &mut dw {
                *v *= 0.01 / norm;
            }
            let w2: Vec<f64> = model.w.iter().zip(&dw).map(|(a, b)| a + b).collect();
            let j = objective_of(&w2, model.b + db * 0.01 / norm, &x, &y, &cfg).unwrap();
            assert!(j >= j0 - 1e-6, "perturbation improved objective: {j0} -> {j}");
        }
    }

    #[test]
    fn input_validation() {
        let x = matrix(&[&[1.0]]);
        assert!(matches!(
            train_svr(&x, &[f64::NAN], &SvrConfig::default(), 0),
            Err(SvrError::NonFiniteInput)
        ));
        assert!(matches!(
            train_svr(&x, &[1.0, 2.0], &SvrConfig::default(), 0),
            Err(SvrError::TargetMismatch { .. })
        ));
        let empty = SampleMatrix::new(vec![], 0, 1).unwrap();
        assert!(matches!(
            train_svr(&empty, &[], &SvrConfig::default(), 0),
            Err(SvrError::EmptySamples)
        ));
        let zero_d = SampleMatrix::new(vec![], 1, 0).unwrap();
        assert!(matches!(
            train_svr(&zero_d, &[1.0], &SvrConfig::default(), 0),
            Err(SvrError::ZeroDimensional)
        ));
        let bad_cfg = SvrConfig { c: -1.0, ..SvrConfig::default() };
        assert!(train_svr(&x, &[1.0], &bad_cfg, 0).is_err());
    }
}
