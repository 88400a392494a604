//! Evaluation statistics: correlations, normalized error statistics, sigma
//! coverage, the two-sample t-test, medians over splits, and crop-count
//! selection.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need at least {needed} values, got {got}")]
    TooFewValues { needed: usize, got: usize },
    #[error("length mismatch: {a} predictions vs {b} ground-truth values")]
    LengthMismatch { a: usize, b: usize },
    #[error("correlation undefined: {0} series is constant")]
    ConstantSeries(&'static str),
    #[error("degenerate scale: width must be positive")]
    DegenerateScale,
    #[error("sigma coverage needs ground-truth score deviations")]
    MissingStd,
    #[error("no usable entries (all score deviations are zero)")]
    NoUsableEntries,
    #[error("non-finite input value")]
    NonFinite,
    #[error("crop-count selection needs >= 2 candidates with equal split counts")]
    BadSelectionInput,
}

/// Predicted and ground-truth scores, optionally with the per-image standard
/// deviation of the subjective scores.
#[derive(Debug, Clone)]
pub struct ScorePairs {
    pub predicted: Vec<f64>,
    pub truth: Vec<f64>,
    pub truth_std: Option<Vec<f64>>,
}

impl ScorePairs {
    pub fn new(predicted: Vec<f64>, truth: Vec<f64>) -> Result<Self, MetricsError> {
        if predicted.len() != truth.len() {
            return Err(MetricsError::LengthMismatch { a: predicted.len(), b: truth.len() });
        }
        if predicted.iter().chain(truth.iter()).any(|v| !v.is_finite()) {
            return Err(MetricsError::NonFinite);
        }
        Ok(Self { predicted, truth, truth_std: None })
    }

    pub fn with_std(mut self, truth_std: Vec<f64>) -> Result<Self, MetricsError> {
        if truth_std.len() != self.truth.len() {
            return Err(MetricsError::LengthMismatch { a: truth_std.len(), b: self.truth.len() });
        }
        self.truth_std = Some(truth_std);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.predicted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicted.is_empty()
    }
}

/// Per-split evaluation summary.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SplitMetrics {
    pub lcc: Option<f64>,
    pub srocc: Option<f64>,
    pub rmse_pct: f64,
    pub mae_pct: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_coverage: Option<(f64, f64, f64)>,
}

/// Two-sample t-test outcome.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub p: f64,
    pub df: f64,
    /// Set when the pooled variance is zero while the means differ; `p` is
    /// then reported as 0.
    pub degenerate: bool,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample Pearson linear correlation coefficient.
///
/// A constant series makes the coefficient undefined; that is reported as an
/// explicit error, never as 0.
pub fn pearson_lcc(pairs: &ScorePairs) -> Result<f64, MetricsError> {
    pearson(&pairs.predicted, &pairs.truth)
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    if x.len() < 2 {
        return Err(MetricsError::TooFewValues { needed: 2, got: x.len() });
    }
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(MetricsError::ConstantSeries("predicted"));
    }
    if syy == 0.0 {
        return Err(MetricsError::ConstantSeries("ground-truth"));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Fractional (mid) ranks; ties receive the average of the ranks they span.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        // Positions i..=j share the average 1-based rank.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank-order correlation: Pearson over midranks.
pub fn spearman_srocc(pairs: &ScorePairs) -> Result<f64, MetricsError> {
    if pairs.len() < 2 {
        return Err(MetricsError::TooFewValues { needed: 2, got: pairs.len() });
    }
    pearson(&midranks(&pairs.predicted), &midranks(&pairs.truth))
}

/// RMSE and MAE of the prediction error, normalized by the scale width and
/// expressed in percent.
pub fn error_stats(pairs: &ScorePairs, scale: (f64, f64)) -> Result<(f64, f64), MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::TooFewValues { needed: 1, got: 0 });
    }
    let width = scale.1 - scale.0;
    if !(width > 0.0) {
        return Err(MetricsError::DegenerateScale);
    }
    let n = pairs.len() as f64;
    let mut sq = 0.0;
    let mut abs = 0.0;
    for (&p, &t) in pairs.predicted.iter().zip(&pairs.truth) {
        let e = p - t;
        sq += e * e;
        abs += e.abs();
    }
    let rmse = (sq / n).sqrt() / width * 100.0;
    let mae = abs / n / width * 100.0;
    Ok((rmse, mae))
}

/// Coverage of the absolute prediction error at one, two and three per-image
/// standard deviations. Entries with zero deviation are excluded; the count
/// of exclusions is returned alongside.
pub fn sigma_coverage(pairs: &ScorePairs) -> Result<((f64, f64, f64), usize), MetricsError> {
    let stds = pairs.truth_std.as_ref().ok_or(MetricsError::MissingStd)?;
    let mut used = 0usize;
    let mut excluded = 0usize;
    let mut counts = [0usize; 3];
    for ((&p, &t), &s) in pairs.predicted.iter().zip(&pairs.truth).zip(stds) {
        if s <= 0.0 {
            excluded += 1;
            continue;
        }
        used += 1;
        let normalized = (p - t).abs() / s;
        for (k, c) in counts.iter_mut().enumerate() {
            if normalized <= (k + 1) as f64 {
                *c += 1;
            }
        }
    }
    if used == 0 {
        return Err(MetricsError::NoUsableEntries);
    }
    let frac = |c: usize| c as f64 / used as f64;
    Ok(((frac(counts[0]), frac(counts[1]), frac(counts[2])), excluded))
}

/// Pooled-variance Student's two-sample t-test, two-sided.
///
/// `df = |a| + |b| - 2`; the p-value comes from the regularized incomplete
/// beta evaluation of the t CDF (absolute error below 1e-8).
pub fn two_sample_ttest(a: &[f64], b: &[f64]) -> Result<TTestResult, MetricsError> {
    if a.len() < 2 {
        return Err(MetricsError::TooFewValues { needed: 2, got: a.len() });
    }
    if b.len() < 2 {
        return Err(MetricsError::TooFewValues { needed: 2, got: b.len() });
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a), mean(b));
    let ssa: f64 = a.iter().map(|v| (v - ma) * (v - ma)).sum();
    let ssb: f64 = b.iter().map(|v| (v - mb) * (v - mb)).sum();
    let df = na + nb - 2.0;
    let pooled_var = (ssa + ssb) / df;
    if pooled_var <= 0.0 {
        return Ok(if ma == mb {
            TTestResult { t: 0.0, p: 1.0, df, degenerate: false }
        } else {
            TTestResult { t: if ma > mb { f64::INFINITY } else { f64::NEG_INFINITY }, p: 0.0, df, degenerate: true }
        });
    }
    let se = (pooled_var * (1.0 / na + 1.0 / nb)).sqrt();
    let t = (ma - mb) / se;
    Ok(TTestResult { t, p: student_t_two_sided_p(t, df), df, degenerate: false })
}

/// Two-sided p-value for Student's t: `I_{df/(df+t^2)}(df/2, 1/2)`.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

/// Regularized incomplete beta `I_x(a, b)` via the Lentz continued fraction.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    // Use the symmetry relation where the fraction converges fastest.
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - regularized_incomplete_beta(b, a, 1.0 - x)
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 400;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        // Even step.
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        // Odd step.
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Lanczos log-gamma (g = 7, n = 9), accurate to ~1e-13.
pub fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEFFS[0];
    for (i, &c) in COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

fn median_of(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { (values[n / 2 - 1] + values[n / 2]) / 2.0 })
}

/// Field-wise median across splits (mean of the two central values for even
/// counts). Optional fields take the median over the splits where they are
/// defined.
pub fn median_over_splits(per_split: &[SplitMetrics]) -> Result<SplitMetrics, MetricsError> {
    if per_split.is_empty() {
        return Err(MetricsError::TooFewValues { needed: 1, got: 0 });
    }
    let collect_opt = |f: &dyn Fn(&SplitMetrics) -> Option<f64>| -> Option<f64> {
        median_of(per_split.iter().filter_map(f).collect())
    };
    let coverage = {
        let p1 = collect_opt(&|m| m.sigma_coverage.map(|c| c.0));
        let p2 = collect_opt(&|m| m.sigma_coverage.map(|c| c.1));
        let p3 = collect_opt(&|m| m.sigma_coverage.map(|c| c.2));
        match (p1, p2, p3) {
            (Some(a), Some(b), Some(c)) => Some((a, b, c)),
            _ => None,
        }
    };
    Ok(SplitMetrics {
        lcc: collect_opt(&|m| m.lcc),
        srocc: collect_opt(&|m| m.srocc),
        rmse_pct: median_of(per_split.iter().map(|m| m.rmse_pct).collect()).expect("non-empty"),
        mae_pct: median_of(per_split.iter().map(|m| m.mae_pct).collect()).expect("non-empty"),
        sigma_coverage: coverage,
    })
}

/// Crop-count selection: among candidate crop counts with per-split LCC
/// samples, pick the smallest count whose results are not significantly
/// worse than the best-median count (two-sided p >= alpha). Median ties
/// break toward the smaller count.
pub fn select_crop_count(
    results: &BTreeMap<usize, Vec<f64>>,
    alpha: f64,
) -> Result<usize, MetricsError> {
    if results.len() < 2 {
        return Err(MetricsError::BadSelectionInput);
    }
    let split_count = results.values().next().expect("non-empty").len();
    if split_count < 2 || results.values().any(|v| v.len() != split_count) {
        return Err(MetricsError::BadSelectionInput);
    }
    // Best median; BTreeMap iteration order makes ties resolve to smaller n.
    let mut best_n = 0usize;
    let mut best_median = f64::NEG_INFINITY;
    for (&n, lccs) in results {
        let med = median_of(lccs.clone()).expect("non-empty");
        if med > best_median {
            best_median = med;
            best_n = n;
        }
    }
    for (&n, lccs) in results {
        let test = two_sample_ttest(lccs, &results[&best_n])?;
        if test.p >= alpha {
            return Ok(n);
        }
    }
    Ok(best_n)
}
