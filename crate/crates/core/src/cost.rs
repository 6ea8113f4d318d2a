//! Analytical inference cost model (batch size 1).
//!
//! Prefill is treated as compute bound:
//!
//! ```text
//! flops(T) = vision_overhead + 2 * n_params * T + 4 * n_layers * d_model * T^2
//! first_token = flops(T) / peak_flops
//! ```
//!
//! and a decode step as memory bound, streaming the weights and the whole KV cache once:
//!
//! ```text
//! next_token = (weights_bytes + kv_cache_bytes(T)) / mem_bandwidth
//! kv_cache_bytes(T) = 2 * n_layers * kv_width * bytes_per_param * T
//! ```
//!
//! Memory figures are weights plus KV cache only; runtime activations and allocator
//! slack are not modelled.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("invalid model spec: {0}")]
    InvalidModel(String),
    #[error("invalid hardware spec: {0}")]
    InvalidHardware(String),
    #[error("token count must be at least 1")]
    NoTokens,
    #[error("unknown precision {0:?}, expected fp16 or int8")]
    UnknownPrecision(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp16,
    Int8,
}

impl Precision {
    pub fn bytes(self) -> u64 {
        match self {
            Self::Fp16 => 2,
            Self::Int8 => 1,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fp16 => "fp16",
            Self::Int8 => "int8",
        })
    }
}

impl FromStr for Precision {
    type Err = CostError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fp16" => Ok(Self::Fp16),
            "int8" => Ok(Self::Int8),
            _ => Err(CostError::UnknownPrecision(s.to_string())),
        }
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CostError> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| CostError::Io { path: display.clone(), source })?;
    serde_json::from_str(&text).map_err(|source| CostError::Parse { path: display, source })
}

/// Language-model dimensions relevant to cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default)]
    pub name: String,
    pub n_params: u64,
    pub n_layers: u64,
    pub d_model: u64,
    /// `n_kv_heads * d_head`; defaults to `d_model` (no grouped-query attention).
    #[serde(default)]
    pub kv_width: Option<u64>,
    pub bytes_per_param: u64,
    /// Token-count-independent prefill work: vision tower, projector, runtime overhead.
    #[serde(default)]
    pub vision_overhead_flops: f64,
}

impl ModelSpec {
    /// 7B-class LLaVA-1.5 language model (Vicuna-7B shape). A preset, not a measurement.
    pub fn llava_7b(precision: Precision) -> Self {
        Self {
            name: "llava-1.5-7b".into(),
            n_params: 7_000_000_000,
            n_layers: 32,
            d_model: 4096,
            kv_width: None,
            bytes_per_param: precision.bytes(),
            vision_overhead_flops: 0.0,
        }
    }

    /// 13B-class LLaVA-1.5 language model (Vicuna-13B shape). A preset, not a measurement.
    pub fn llava_13b(precision: Precision) -> Self {
        Self {
            name: "llava-1.5-13b".into(),
            n_params: 13_000_000_000,
            n_layers: 40,
            d_model: 5120,
            kv_width: None,
            bytes_per_param: precision.bytes(),
            vision_overhead_flops: 0.0,
        }
    }

    pub fn preset(name: &str, precision: Precision) -> Option<Self> {
        match name {
            "llava-1.5-7b" | "7b" => Some(Self::llava_7b(precision)),
            "llava-1.5-13b" | "13b" => Some(Self::llava_13b(precision)),
            _ => None,
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, CostError> {
        let spec: Self = read_json(path.as_ref())?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.bytes_per_param = precision.bytes();
        self
    }

    pub fn validate(&self) -> Result<(), CostError> {
        let bad = |m: &str| Err(CostError::InvalidModel(m.to_string()));
        if self.n_params == 0 || self.n_layers == 0 || self.d_model == 0 || self.kv_width == Some(0) {
            return bad("counts must be at least 1");
        }
        if !matches!(self.bytes_per_param, 1 | 2) {
            return bad("bytes_per_param must be 1 or 2");
        }
        if !(self.vision_overhead_flops.is_finite() && self.vision_overhead_flops >= 0.0) {
            return bad("vision_overhead_flops must be finite and non-negative");
        }
        Ok(())
    }

    pub fn kv_width(&self) -> u64 {
        self.kv_width.unwrap_or(self.d_model)
    }

    pub fn weights_bytes(&self) -> u64 {
        self.n_params * self.bytes_per_param
    }

    /// FLOPs to prefill `n_tokens` prompt tokens.
    pub fn prefill_flops(&self, n_tokens: u64) -> f64 {
        let t = n_tokens as f64;
        self.vision_overhead_flops + self.weight_flops(n_tokens) + 4.0 * (self.n_layers * self.d_model) as f64 * t * t
    }

    pub fn weight_flops(&self, n_tokens: u64) -> f64 {
        2.0 * self.n_params as f64 * n_tokens as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareSpec {
    #[serde(default)]
    pub name: String,
    /// Peak arithmetic throughput at the modelled precision, ops/s.
    pub peak_flops: f64,
    /// Bytes/s.
    pub mem_bandwidth: f64,
}

impl HardwareSpec {
    /// V100-class accelerator at theoretical peak: 112 TFLOPS FP16 tensor throughput and
    /// 900 GB/s HBM2. INT8 assumes twice the FP16 rate.
    pub fn v100(precision: Precision) -> Self {
        let peak_flops = match precision {
            Precision::Fp16 => 112e12,
            Precision::Int8 => 224e12,
        };
        Self { name: format!("v100-{precision}"), peak_flops, mem_bandwidth: 900e9 }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, CostError> {
        let spec: Self = read_json(path.as_ref())?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), CostError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(self.peak_flops) && ok(self.mem_bandwidth) {
            Ok(())
        } else {
            Err(CostError::InvalidHardware("peak_flops and mem_bandwidth must be positive".into()))
        }
    }
}

pub fn kv_cache_bytes(model: &ModelSpec, n_tokens: u64) -> u64 {
    2 * model.n_layers * model.kv_width() * model.bytes_per_param * n_tokens
}

pub fn first_token_ms(model: &ModelSpec, hw: &HardwareSpec, n_tokens: u64) -> f64 {
    model.prefill_flops(n_tokens) / hw.peak_flops * 1e3
}

pub fn next_token_ms(model: &ModelSpec, hw: &HardwareSpec, n_cached: u64) -> f64 {
    (model.weights_bytes() + kv_cache_bytes(model, n_cached)) as f64 / hw.mem_bandwidth * 1e3
}

/// Costs at one prompt length.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostPoint {
    pub n_tokens_prompt: u64,
    pub kv_cache_bytes: u64,
    pub weights_bytes: u64,
    /// Weights plus KV cache.
    pub memory_bytes: u64,
    pub first_token_ms: f64,
    pub next_token_ms: f64,
}

impl CostPoint {
    pub fn evaluate(model: &ModelSpec, hw: &HardwareSpec, n_tokens: u64) -> Self {
        let kv = kv_cache_bytes(model, n_tokens);
        let weights = model.weights_bytes();
        Self {
            n_tokens_prompt: n_tokens,
            kv_cache_bytes: kv,
            weights_bytes: weights,
            memory_bytes: weights + kv,
            first_token_ms: first_token_ms(model, hw, n_tokens),
            // first decode step attends over the full prompt
            next_token_ms: next_token_ms(model, hw, n_tokens),
        }
    }
}

/// Reduced / baseline, dimensionless.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRatios {
    pub tokens: f64,
    pub kv_cache: f64,
    pub memory: f64,
    pub first_token: f64,
    pub next_token: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub model: String,
    pub hardware: String,
    pub bytes_per_param: u64,
    pub baseline: CostPoint,
    pub reduced: CostPoint,
    pub ratios: CostRatios,
}

pub fn compare_costs(
    model: &ModelSpec,
    hw: &HardwareSpec,
    baseline_tokens: u64,
    reduced_tokens: u64,
) -> Result<CostReport, CostError> {
    if baseline_tokens == 0 || reduced_tokens == 0 {
        return Err(CostError::NoTokens);
    }
    model.validate()?;
    hw.validate()?;
    let baseline = CostPoint::evaluate(model, hw, baseline_tokens);
    let reduced = CostPoint::evaluate(model, hw, reduced_tokens);
    let ratio = |r: f64, b: f64| r / b;
    let ratios = CostRatios {
        tokens: ratio(reduced_tokens as f64, baseline_tokens as f64),
        kv_cache: ratio(reduced.kv_cache_bytes as f64, baseline.kv_cache_bytes as f64),
        memory: ratio(reduced.memory_bytes as f64, baseline.memory_bytes as f64),
        first_token: ratio(reduced.first_token_ms, baseline.first_token_ms),
        next_token: ratio(reduced.next_token_ms, baseline.next_token_ms),
    };
    Ok(CostReport {
        model: model.name.clone(),
        hardware: hw.name.clone(),
        bytes_per_param: model.bytes_per_param,
        baseline,
        reduced,
        ratios,
    })
}
