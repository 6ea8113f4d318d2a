//! Report structs shared by the text and JSON output modes, and the graymap writer.
//!
//! Numbers are rounded once, here, so both output modes print identical values.

use std::fmt::Write as _;

use serde::Serialize;

use crate::cost::{CostPoint, CostRatios, CostReport};
use crate::select::SelectionResult;

pub const MS_DECIMALS: i32 = 3;
pub const RATIO_DECIMALS: i32 = 4;

pub fn round_to(x: f64, decimals: i32) -> f64 {
    let scale = 10f64.powi(decimals);
    (x * scale).round() / scale
}

fn rounded_point(p: &CostPoint) -> CostPoint {
    CostPoint {
        first_token_ms: round_to(p.first_token_ms, MS_DECIMALS),
        next_token_ms: round_to(p.next_token_ms, MS_DECIMALS),
        ..p.clone()
    }
}

fn rounded_ratios(r: &CostRatios) -> CostRatios {
    CostRatios {
        tokens: round_to(r.tokens, RATIO_DECIMALS),
        kv_cache: round_to(r.kv_cache, RATIO_DECIMALS),
        memory: round_to(r.memory, RATIO_DECIMALS),
        first_token: round_to(r.first_token, RATIO_DECIMALS),
        next_token: round_to(r.next_token, RATIO_DECIMALS),
    }
}

pub fn rounded_cost_report(r: &CostReport) -> CostReport {
    CostReport {
        baseline: rounded_point(&r.baseline),
        reduced: rounded_point(&r.reduced),
        ratios: rounded_ratios(&r.ratios),
        ..r.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReduceSummary {
    pub strategy: String,
    pub n_total: usize,
    pub kept: usize,
    pub output_rows: usize,
    pub has_aggregate: bool,
    pub ratio: f64,
    pub threshold: Option<f64>,
    /// Σ softmax over kept tokens; a proxy for retained information.
    pub retained_mass: f64,
    pub tensor_path: String,
    pub sidecar_path: String,
}

impl ReduceSummary {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let threshold = self.threshold.map_or_else(|| "-".to_string(), |t| t.to_string());
        let _ = writeln!(s, "strategy       {}", self.strategy);
        let _ = writeln!(s, "n_total        {}", self.n_total);
        let _ = writeln!(s, "kept           {}", self.kept);
        let _ = writeln!(s, "output_rows    {}", self.output_rows);
        let _ = writeln!(s, "has_aggregate  {}", self.has_aggregate);
        let _ = writeln!(s, "ratio          {:.4}", self.ratio);
        let _ = writeln!(s, "threshold      {threshold}");
        let _ = writeln!(s, "retained_mass  {:.4}", self.retained_mass);
        let _ = writeln!(s, "tensor         {}", self.tensor_path);
        let _ = writeln!(s, "sidecar        {}", self.sidecar_path);
        s
    }
}

/// Cost comparison plus the visual/text split of the prompt.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostSummary {
    pub text_len: u64,
    pub baseline_visual_tokens: u64,
    pub reduced_visual_tokens: u64,
    /// `1 - reduced_visual / baseline_visual`.
    pub visual_token_reduction: f64,
    pub report: CostReport,
}

impl CostSummary {
    pub fn new(report: &CostReport, text_len: u64, baseline_visual: u64, reduced_visual: u64) -> Self {
        Self {
            text_len,
            baseline_visual_tokens: baseline_visual,
            reduced_visual_tokens: reduced_visual,
            visual_token_reduction: round_to(1.0 - reduced_visual as f64 / baseline_visual as f64, RATIO_DECIMALS),
            report: rounded_cost_report(report),
        }
    }

    pub fn to_text(&self) -> String {
        let r = &self.report;
        let (b, d, q) = (&r.baseline, &r.reduced, &r.ratios);
        let mut s = String::new();
        let _ = writeln!(s, "model     {} ({} byte(s)/param)", r.model, r.bytes_per_param);
        let _ = writeln!(s, "hardware  {}", r.hardware);
        let _ = writeln!(
            s,
            "visual tokens {} -> {} (+{} text), reduction {:.4}",
            self.baseline_visual_tokens, self.reduced_visual_tokens, self.text_len, self.visual_token_reduction
        );
        let _ = writeln!(s, "{:<22}{:>16}{:>16}{:>10}", "", "baseline", "reduced", "ratio");
        let _ = writeln!(s, "{:<22}{:>16}{:>16}{:>10.4}", "prompt tokens", b.n_tokens_prompt, d.n_tokens_prompt, q.tokens);
        let _ = writeln!(s, "{:<22}{:>16}{:>16}{:>10.4}", "kv cache (bytes)", b.kv_cache_bytes, d.kv_cache_bytes, q.kv_cache);
        let _ = writeln!(s, "{:<22}{:>16}{:>16}{:>10}", "weights (bytes)", b.weights_bytes, d.weights_bytes, "");
        let _ = writeln!(s, "{:<22}{:>16}{:>16}{:>10.4}", "weights+kv (bytes)", b.memory_bytes, d.memory_bytes, q.memory);
        let _ = writeln!(s, "{:<22}{:>16.3}{:>16.3}{:>10.4}", "first token (ms)", b.first_token_ms, d.first_token_ms, q.first_token);
        let _ = writeln!(s, "{:<22}{:>16.3}{:>16.3}{:>10.4}", "next token (ms)", b.next_token_ms, d.next_token_ms, q.next_token);
        s
    }
}

/// One row of the strategy comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyRow {
    pub strategy: String,
    pub k: usize,
    pub output_rows: usize,
    pub threshold: Option<f64>,
    /// Proxy for information retention, not an accuracy measure.
    pub retained_mass: f64,
    pub mass_per_kept_token: f64,
    pub first_token_ratio: f64,
    pub next_token_ratio: f64,
    pub kv_cache_ratio: f64,
}

impl StrategyRow {
    pub fn new(label: String, selection: &SelectionResult, output_rows: usize, mass: f64, cost: &CostReport) -> Self {
        let ratios = rounded_ratios(&cost.ratios);
        Self {
            strategy: label,
            k: selection.k(),
            output_rows,
            threshold: selection.threshold,
            retained_mass: round_to(mass, 6),
            mass_per_kept_token: round_to(mass / selection.k() as f64, 8),
            first_token_ratio: ratios.first_token,
            next_token_ratio: ratios.next_token,
            kv_cache_ratio: ratios.kv_cache,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareTable {
    pub n_total: usize,
    pub budget_ratio: f64,
    pub text_len: u64,
    pub rows: Vec<StrategyRow>,
}

impl CompareTable {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "n_total {}  budget {}  text_len {}  (retained_mass = sum of softmax over kept tokens, a proxy)",
            self.n_total, self.budget_ratio, self.text_len
        );
        let _ = writeln!(
            s,
            "{:<20}{:>6}{:>8}{:>16}{:>16}{:>12}{:>12}{:>12}",
            "strategy", "k", "rows", "retained_mass", "mass/token", "first_tok", "next_tok", "kv_cache"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<20}{:>6}{:>8}{:>16.6}{:>16.8}{:>12.4}{:>12.4}{:>12.4}",
                r.strategy,
                r.k,
                r.output_rows,
                r.retained_mass,
                r.mass_per_kept_token,
                r.first_token_ratio,
                r.next_token_ratio,
                r.kv_cache_ratio
            );
        }
        s
    }
}

/// Plain-text grid, one row per line.
pub fn grid_to_text(grid: &[Vec<f64>]) -> String {
    let mut s = String::new();
    for row in grid {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.6e}")).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

/// Min-max normalizes a grid to 0..=255. A constant grid maps to mid-gray 128.
pub fn grid_to_gray(grid: &[Vec<f64>]) -> Vec<u8> {
    let values = grid.iter().flatten();
    let min = values.clone().copied().fold(f64::INFINITY, f64::min);
    let max = values.clone().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    values
        .map(|&v| if range > 0.0 { (255.0 * (v - min) / range).round() as u8 } else { 128 })
        .collect()
}

/// Binary (P5) 8-bit portable graymap.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}
