//! Evaluation reports: a machine-readable JSON document plus a human table,
//! with optional plot files.
//!
//! Reports contain every per-split value (including per-image predictions),
//! so all aggregates can be recomputed from the report alone, and two runs
//! with the same configuration and seed emit identical bytes.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::fusion::{FusionConfig, FusionScheme, PoolOp};
use crate::metrics::SplitMetrics;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub truth: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth_std: Option<f64>,
    pub predicted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub split: usize,
    pub metrics: SplitMetrics,
    pub chosen_c: f64,
    pub svr_passes: usize,
    pub svr_converged: bool,
    pub predictions: Vec<PredictionRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigResult {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionConfig>,
    pub per_split: Vec<SplitResult>,
    pub median: SplitMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropSelection {
    pub scheme: FusionScheme,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub op: Option<PoolOp>,
    pub alpha: f64,
    /// `(crop count, median LCC)` per candidate.
    pub candidates: Vec<(usize, f64)>,
    /// Smallest count statistically indistinguishable from the best median.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selected: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestEntry {
    pub a: String,
    pub b: String,
    pub t: f64,
    pub p: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSummary {
    /// `None` for the once-globally variant.
    pub split: Option<usize>,
    pub iterations: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tool_version: String,
    /// The fully resolved configuration that produced this report.
    pub config: ExperimentConfig,
    pub seed: u64,
    pub protocol: String,
    pub dataset_name: String,
    pub fold_sizes: Vec<(usize, usize, usize)>,
    pub configs: Vec<ConfigResult>,
    pub crop_selection: Vec<CropSelection>,
    pub ttest_matrix: Vec<TTestEntry>,
    pub winner: String,
    pub finetune: Vec<FinetuneSummary>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }

    /// Human-readable summary table.
    pub fn to_table(&self) -> String {
        let fmt_opt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.4}"),
            None => "  n/a ".to_string(),
        };
        let mut out = String::new();
        out.push_str(&format!(
            "dataset: {}   protocol: {}   splits: {}   seed: {}\n",
            self.dataset_name,
            self.protocol,
            self.fold_sizes.len(),
            self.seed
        ));
        if let Some((train, val, test)) = self.fold_sizes.first() {
            out.push_str(&format!("fold sizes: train {train} / val {val} / test {test}\n"));
        }
        out.push('\n');
        let id_width = self
            .configs
            .iter()
            .map(|c| c.id.len())
            .chain(std::iter::once("configuration".len()))
            .max()
            .unwrap_or(16);
        out.push_str(&format!(
            "{:<id_width$}  {:>8}  {:>8}  {:>7}  {:>7}",
            "configuration", "LCC", "SROCC", "RMSE%", "MAE%"
        ));
        if self.configs.iter().any(|c| c.median.sigma_coverage.is_some()) {
            out.push_str(&format!("  {:>17}", "<=1s/<=2s/<=3s"));
        }
        out.push('\n');
        for config in &self.configs {
            out.push_str(&format!(
                "{:<id_width$}  {:>8}  {:>8}  {:>7.3}  {:>7.3}",
                config.id,
                fmt_opt(config.median.lcc),
                fmt_opt(config.median.srocc),
                config.median.rmse_pct,
                config.median.mae_pct,
            ));
            if let Some((p1, p2, p3)) = config.median.sigma_coverage {
                out.push_str(&format!("  {:>5.3}/{:>5.3}/{:>5.3}", p1, p2, p3));
            }
            out.push('\n');
        }
        out.push('\n');
        out.push_str(&format!("winner: {}\n", self.winner));
        for sel in &self.crop_selection {
            let op = sel.op.map(|o| format!("({o})")).unwrap_or_default();
            let chosen = sel
                .selected
                .map(|n| format!("{n} crops"))
                .unwrap_or_else(|| "undetermined".to_string());
            out.push_str(&format!(
                "crop selection {}{}: {} (alpha {}, candidates {})\n",
                sel.scheme,
                op,
                chosen,
                sel.alpha,
                sel.candidates
                    .iter()
                    .map(|(n, m)| format!("{n}:{m:.4}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            ));
        }
        if !self.ttest_matrix.is_empty() {
            out.push_str("\npairwise two-sample t-tests on per-split LCC:\n");
            for entry in &self.ttest_matrix {
                out.push_str(&format!(
                    "  {} vs {}: t = {:.4}, p = {:.6}{}\n",
                    entry.a,
                    entry.b,
                    entry.t,
                    entry.p,
                    if entry.degenerate { " (degenerate)" } else { "" }
                ));
            }
        }
        if !self.finetune.is_empty() {
            out.push_str("\nfine-tuning:\n");
            for ft in &self.finetune {
                let scope = match ft.split {
                    Some(k) => format!("split {k}"),
                    None => "global".to_string(),
                };
                out.push_str(&format!(
                    "  {scope}: {} iterations, final loss {:.4}, train accuracy {:.3}\n",
                    ft.iterations, ft.final_loss, ft.train_accuracy
                ));
            }
        }
        out
    }

    /// Scatter plot (predicted vs ground truth) of the winning configuration,
    /// all splits overlaid, as a standalone SVG.
    pub fn to_scatter_svg(&self) -> Option<String> {
        let config = self.configs.iter().find(|c| c.id == self.winner)?;
        let points: Vec<(f64, f64)> = config
            .per_split
            .iter()
            .flat_map(|s| s.predictions.iter().map(|p| (p.truth, p.predicted)))
            .collect();
        if points.is_empty() {
            return None;
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &(a, b) in &points {
            lo = lo.min(a).min(b);
            hi = hi.max(a).max(b);
        }
        if !(hi > lo) {
            hi = lo + 1.0;
        }
        let pad = 0.05 * (hi - lo);
        let (lo, hi) = (lo - pad, hi + pad);
        let size = 480.0;
        let margin = 40.0;
        let map = |v: f64| margin + (v - lo) / (hi - lo) * (size - 2.0 * margin);
        let mut svg = String::new();
        svg.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n"
        ));
        svg.push_str(&format!(
            "<rect width=\"{size}\" height=\"{size}\" fill=\"white\"/>\n<line x1=\"{a}\" y1=\"{b}\" x2=\"{c}\" y2=\"{d}\" stroke=\"#888\" stroke-dasharray=\"4 3\"/>\n",
            a = map(lo),
            b = size - map(lo),
            c = map(hi),
            d = size - map(hi),
        ));
        for &(truth, pred) in &points {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"#1f77b4\" fill-opacity=\"0.6\"/>\n",
                map(truth),
                size - map(pred)
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\">ground truth</text>\n<text x=\"8\" y=\"16\" font-size=\"12\">predicted ({})</text>\n</svg>\n",
            size / 2.0 - 30.0,
            size - 8.0,
            self.winner
        ));
        Some(svg)
    }
}

/// Write the report in the requested formats (`json`, `table`, `plots`).
pub fn emit_report(report: &EvalReport, dir: &Path, formats: &[String]) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    for format in formats {
        match format.as_str() {
            "json" | "json-like" => fs::write(dir.join("report.json"), report.to_json())?,
            "table" => fs::write(dir.join("report.txt"), report.to_table())?,
            "plots" => {
                if let Some(svg) = report.to_scatter_svg() {
                    fs::write(dir.join("scatter.svg"), svg)?;
                }
            }
            other => {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidInput,
                    format!("unknown report format `{other}`"),
                ))
            }
        }
    }
    Ok(())
}
