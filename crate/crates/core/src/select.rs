//! Choosing which visual tokens survive.
//!
//! The adaptive rule keeps the upper-tail outliers of the softmax scores under the
//! interquartile-range test `score > Q3 + 1.5 * (Q3 - Q1)`. Fixed-budget top-k, seeded
//! random sampling and uniform positional subsampling are provided as baselines.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clip_metric::SignificanceScores;

/// Multiplier on the IQR for the upper fence.
pub const IQR_FENCE: f64 = 1.5;

#[derive(Debug, Error, PartialEq)]
pub enum SelectError {
    #[error("empty input")]
    Empty,
    #[error("ratio {0} outside (0, 1]")]
    RatioOutOfRange(f64),
    #[error("n_total must be at least 1")]
    NoTokens,
    #[error("invalid strategy {0:?}: expected iqr, topk:R, random:R:SEED or pool:R")]
    BadStrategy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Iqr,
    TopK,
    Random,
    Pool,
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Iqr => "iqr",
            Self::TopK => "topk",
            Self::Random => "random",
            Self::Pool => "pool",
        })
    }
}

/// A fully parameterised selection strategy, as given on the command line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectionStrategy {
    Iqr,
    TopK { ratio: f64 },
    Random { ratio: f64, seed: u64 },
    Pool { ratio: f64 },
}

impl SelectionStrategy {
    pub fn kind(&self) -> StrategyKind {
        match self {
            Self::Iqr => StrategyKind::Iqr,
            Self::TopK { .. } => StrategyKind::TopK,
            Self::Random { .. } => StrategyKind::Random,
            Self::Pool { .. } => StrategyKind::Pool,
        }
    }

    pub fn apply(&self, scores: &SignificanceScores) -> Result<SelectionResult, SelectError> {
        match *self {
            Self::Iqr => Ok(select_iqr(scores)),
            Self::TopK { ratio } => select_topk(scores, ratio),
            Self::Random { ratio, seed } => select_random(scores.n_tokens(), ratio, seed),
            Self::Pool { ratio } => select_pool(scores.n_tokens(), ratio),
        }
    }
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Iqr => write!(f, "iqr"),
            Self::TopK { ratio } => write!(f, "topk:{ratio}"),
            Self::Random { ratio, seed } => write!(f, "random:{ratio}:{seed}"),
            Self::Pool { ratio } => write!(f, "pool:{ratio}"),
        }
    }
}

impl FromStr for SelectionStrategy {
    type Err = SelectError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SelectError::BadStrategy(s.to_string());
        let parts: Vec<&str> = s.trim().split(':').collect();
        let ratio = |p: &str| -> Result<f64, SelectError> {
            let r: f64 = p.parse().map_err(|_| bad())?;
            check_ratio(r)?;
            Ok(r)
        };
        match parts.as_slice() {
            ["iqr"] => Ok(Self::Iqr),
            ["topk", r] => Ok(Self::TopK { ratio: ratio(r)? }),
            ["pool", r] => Ok(Self::Pool { ratio: ratio(r)? }),
            ["random", r, seed] => Ok(Self::Random {
                ratio: ratio(r)?,
                seed: seed.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

/// Retained token positions and the rule that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub strategy: StrategyKind,
    /// The IQR upper bound actually applied; only set for [`StrategyKind::Iqr`].
    pub threshold: Option<f64>,
    pub n_total: usize,
    /// Strictly increasing, each `< n_total`, never empty.
    pub indices: Vec<usize>,
}

impl SelectionResult {
    pub fn k(&self) -> usize {
        self.indices.len()
    }

    pub fn ratio(&self) -> f64 {
        self.k() as f64 / self.n_total as f64
    }

    /// Indices that were not retained, ascending.
    pub fn complement(&self) -> Vec<usize> {
        let mut kept = self.indices.iter().peekable();
        (0..self.n_total)
            .filter(|i| {
                if kept.peek() == Some(&i) {
                    kept.next();
                    false
                } else {
                    true
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuartileSummary {
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub upper_bound: f64,
}

/// Linear-interpolation quantile at rank `p * (n - 1)` of an ascending slice.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quartiles(x: &[f64]) -> Result<QuartileSummary, SelectError> {
    if x.is_empty() {
        return Err(SelectError::Empty);
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&sorted, 0.25);
    let q3 = quantile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    Ok(QuartileSummary { q1, q3, iqr, upper_bound: q3 + IQR_FENCE * iqr })
}

/// Keeps tokens whose softmax score strictly exceeds `Q3 + 1.5 * IQR`.
///
/// If nothing clears the fence, the single highest-scoring token (lowest index on ties)
/// is kept instead.
pub fn select_iqr(scores: &SignificanceScores) -> SelectionResult {
    let p = scores.softmax();
    let summary = quartiles(p).expect("scores are never empty");
    let mut indices: Vec<usize> = (0..p.len()).filter(|&i| p[i] > summary.upper_bound).collect();
    if indices.is_empty() {
        let best = (1..p.len()).fold(0, |best, i| if p[i] > p[best] { i } else { best });
        indices.push(best);
    }
    SelectionResult {
        strategy: StrategyKind::Iqr,
        threshold: Some(summary.upper_bound),
        n_total: p.len(),
        indices,
    }
}

fn check_ratio(ratio: f64) -> Result<(), SelectError> {
    if ratio > 0.0 && ratio <= 1.0 {
        Ok(())
    } else {
        Err(SelectError::RatioOutOfRange(ratio))
    }
}

/// Token budget `max(1, round(ratio * n))`, rounding half away from zero.
pub fn budget(n_total: usize, ratio: f64) -> Result<usize, SelectError> {
    check_ratio(ratio)?;
    if n_total == 0 {
        return Err(SelectError::NoTokens);
    }
    Ok(((ratio * n_total as f64).round() as usize).clamp(1, n_total))
}

/// Keeps the `k` highest softmax scores; ties go to the lower index.
pub fn select_topk(scores: &SignificanceScores, ratio: f64) -> Result<SelectionResult, SelectError> {
    let p = scores.softmax();
    let k = budget(p.len(), ratio)?;
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let mut indices = order[..k].to_vec();
    indices.sort_unstable();
    Ok(SelectionResult { strategy: StrategyKind::TopK, threshold: None, n_total: p.len(), indices })
}

/// Uniform sample of `k` distinct positions.
///
/// The generator is ChaCha8 (`rand_chacha`) seeded through `seed_from_u64`, driving a
/// partial Fisher-Yates shuffle, so a given `(n_total, ratio, seed)` yields the same
/// indices on every platform.
pub fn select_random(n_total: usize, ratio: f64, seed: u64) -> Result<SelectionResult, SelectError> {
    let k = budget(n_total, ratio)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = (0..n_total).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n_total);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool.sort_unstable();
    Ok(SelectionResult { strategy: StrategyKind::Random, threshold: None, n_total, indices: pool })
}

/// Evenly spaced positions `round(j * (n - 1) / (k - 1))`, endpoints included.
pub fn select_pool(n_total: usize, ratio: f64) -> Result<SelectionResult, SelectError> {
    let k = budget(n_total, ratio)?;
    let mut indices: Vec<usize> = if k == 1 {
        vec![0]
    } else {
        // integer form of round-half-up for the non-negative quotient
        let (span, steps) = (n_total - 1, k - 1);
        (0..k).map(|j| (2 * j * span + steps) / (2 * steps)).collect()
    };
    indices.dedup();
    Ok(SelectionResult { strategy: StrategyKind::Pool, threshold: None, n_total, indices })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn scores(raw: &[f64]) -> SignificanceScores {
        SignificanceScores::from_raw(raw.to_vec()).unwrap()
    }

    #[test]
    fn quartile_examples() {
        let q = quartiles(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        assert_eq!((q.q1, q.q3, q.iqr, q.upper_bound), (2.0, 4.0, 2.0, 7.0));

        let q = quartiles(&[0.7; 9]).unwrap();
        assert_eq!((q.q1, q.q3, q.iqr, q.upper_bound), (0.7, 0.7, 0.0, 0.7));

        let q = quartiles(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!((q.q1, q.q3, q.upper_bound), (1.75, 3.25, 5.5));

        assert_eq!(quartiles(&[]), Err(SelectError::Empty));
        let q = quartiles(&[5.0]).unwrap();
        assert_eq!((q.q1, q.q3), (5.0, 5.0));
    }

    #[test]
    fn iqr_picks_single_far_outlier() {
        let r = select_iqr(&scores(&[0.0, 0.0, 0.0, 0.0, 10.0]));
        assert_eq!(r.indices, vec![4]);
        assert_eq!(r.strategy, StrategyKind::Iqr);
        assert!(r.threshold.is_some());
    }

    #[test]
    fn iqr_uniform_falls_back_to_first() {
        let r = select_iqr(&scores(&[0.3; 16]));
        assert_eq!(r.indices, vec![0]);
        assert_eq!(r.threshold, Some(1.0 / 16.0));
    }

    #[test]
    fn iqr_fallback_takes_argmax() {
        // two high values tie; the fence sits above both, so the fallback picks index 1
        let r = select_iqr(&scores(&[0.0, 1.0, 0.0, 1.0]));
        assert_eq!(r.indices, vec![1]);
    }

    #[test]
    fn topk_examples() {
        let raw: Vec<f64> = (0..576).map(|i| (i as f64 * 0.37).sin()).collect();
        assert_eq!(select_topk(&scores(&raw), 0.05).unwrap().k(), 29);
        assert_eq!(select_topk(&scores(&raw), 1.0).unwrap().indices, (0..576).collect::<Vec<_>>());

        // softmax of equal raw values ties; lowest index wins
        let s = scores(&[0.4, 0.4, 0.1, 0.1]);
        assert_eq!(select_topk(&s, 0.25).unwrap().indices, vec![0]);

        assert_eq!(select_topk(&s, 0.0), Err(SelectError::RatioOutOfRange(0.0)));
        assert_eq!(select_topk(&s, 1.5), Err(SelectError::RatioOutOfRange(1.5)));
    }

    #[test]
    fn budget_rounding() {
        assert_eq!(budget(576, 0.05), Ok(29));
        assert_eq!(budget(576, 0.21), Ok(121));
        assert_eq!(budget(5, 0.6), Ok(3));
        assert_eq!(budget(10, 0.01), Ok(1));
        assert_eq!(budget(4, 0.625), Ok(3)); // 2.5 rounds away from zero
        assert_eq!(budget(0, 0.5), Err(SelectError::NoTokens));
    }

    #[test]
    fn random_is_deterministic() {
        let a = select_random(576, 0.21, 7).unwrap();
        let b = select_random(576, 0.21, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.k(), 121);
        assert!(a.indices.windows(2).all(|w| w[0] < w[1]));
        assert_ne!(a.indices, select_random(576, 0.21, 8).unwrap().indices);
        for seed in [0, 1, u64::MAX] {
            assert_eq!(select_random(9, 1.0, seed).unwrap().indices, (0..9).collect::<Vec<_>>());
        }
        assert!(select_random(9, -0.1, 0).is_err());
    }

    #[test]
    fn pool_examples() {
        assert_eq!(select_pool(5, 0.6).unwrap().indices, vec![0, 2, 4]);
        assert_eq!(select_pool(7, 1.0).unwrap().indices, (0..7).collect::<Vec<_>>());
        let p = select_pool(576, 0.21).unwrap();
        assert_eq!(p.k(), 121);
        assert_eq!(&p.indices[..3], &[0, 5, 10]);
        assert_eq!(*p.indices.last().unwrap(), 575);
        assert_eq!(select_pool(10, 0.05).unwrap().indices, vec![0]);
    }

    #[test]
    fn complement_of_selection() {
        let r = SelectionResult {
            strategy: StrategyKind::TopK,
            threshold: None,
            n_total: 6,
            indices: vec![1, 4],
        };
        assert_eq!(r.complement(), vec![0, 2, 3, 5]);
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("iqr".parse(), Ok(SelectionStrategy::Iqr));
        assert_eq!("topk:0.05".parse(), Ok(SelectionStrategy::TopK { ratio: 0.05 }));
        assert_eq!("random:0.21:42".parse(), Ok(SelectionStrategy::Random { ratio: 0.21, seed: 42 }));
        assert_eq!("pool:1".parse(), Ok(SelectionStrategy::Pool { ratio: 1.0 }));
        assert!("random:0.2".parse::<SelectionStrategy>().is_err());
        assert!("topk:2".parse::<SelectionStrategy>().is_err());
        assert!("median".parse::<SelectionStrategy>().is_err());
        let s: SelectionStrategy = "random:0.5:3".parse().unwrap();
        assert_eq!(s.to_string().parse::<SelectionStrategy>(), Ok(s));
    }

    #[test]
    fn selection_json_fields() {
        let r = select_iqr(&scores(&[0.0, 0.0, 0.0, 0.0, 10.0]));
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["strategy"], "iqr");
        assert_eq!(v["n_total"], 5);
        assert_eq!(v["indices"], serde_json::json!([4]));
        assert!(v["threshold"].is_f64());
    }

    #[test]
    fn standard_normal_scores_select_strict_subset() {
        let mut rng = ChaCha8Rng::seed_from_u64(576);
        let normal = rand_distr::StandardNormal;
        let trials = 500;
        let strict = (0..trials)
            .filter(|_| {
                let raw: Vec<f64> = (0..576).map(|_| rng.sample(normal)).collect();
                let r = select_iqr(&scores(&raw));
                r.k() > 0 && r.k() < 576
            })
            .count();
        assert!(strict as f64 >= 0.99 * trials as f64, "{strict}/{trials}");
    }

    proptest! {
        #[test]
        fn topk_is_monotone_in_ratio(
            raw in prop::collection::vec(-1.0f64..1.0, 1..300),
            a in 0.001f64..=1.0,
            b in 0.001f64..=1.0,
        ) {
            let s = scores(&raw);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let small = select_topk(&s, lo).unwrap().indices;
            let large = select_topk(&s, hi).unwrap().indices;
            prop_assert!(small.iter().all(|i| large.binary_search(i).is_ok()));
        }

        #[test]
        fn iqr_never_empty_and_sorted(raw in prop::collection::vec(-1.0f64..1.0, 1..300)) {
            let r = select_iqr(&scores(&raw));
            prop_assert!(!r.indices.is_empty());
            prop_assert!(r.indices.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(*r.indices.last().unwrap() < r.n_total);
        }

        #[test]
        fn pool_and_random_shapes(n in 1usize..2000, ratio in 0.0001f64..=1.0, seed: u64) {
            let k = budget(n, ratio).unwrap();
            for r in [select_pool(n, ratio).unwrap(), select_random(n, ratio, seed).unwrap()] {
                prop_assert_eq!(r.k(), k);
                prop_assert!(r.indices.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(*r.indices.last().unwrap() < n);
            }
        }
    }
}
