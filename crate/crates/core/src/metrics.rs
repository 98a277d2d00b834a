//! Correlation and distribution-collapse metrics.

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ScoreRange;

pub const DEFAULT_HIST_BINS: usize = 100;
const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} values, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("correlation undefined: input is constant")]
    Constant,
    #[error("empty input")]
    Empty,
    #[error("input contains a non-finite value")]
    NonFinite,
    #[error("not a probability vector (sum {0})")]
    NotNormalized(f64),
    #[error("invalid histogram spec: {0}")]
    InvalidSpec(String),
    #[error("order robustness needs at least 2 runs, got {0}")]
    TooFewRuns(usize),
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<(), MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(MetricsError::TooFew { needed: 3, got: x.len() });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    Ok(())
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::Constant);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson linear correlation.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    check_pair(x, y)?;
    pearson(x, y)
}

/// 1-based ranks with ties sharing their average rank.
pub fn fractional_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation (Pearson over fractional ranks).
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    check_pair(x, y)?;
    pearson(&fractional_ranks(x), &fractional_ranks(y))
}

/// Size-weighted average `Σ v n / Σ n`.
pub fn wavg(values: &[f64], sizes: &[usize]) -> Result<f64, MetricsError> {
    if values.len() != sizes.len() {
        return Err(MetricsError::LengthMismatch(values.len(), sizes.len()));
    }
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    if sizes.contains(&0) {
        return Err(MetricsError::TooFew { needed: 1, got: 0 });
    }
    let total = sizes.iter().sum::<usize>() as f64;
    Ok(values.iter().zip(sizes).map(|(v, &n)| v * (n as f64 / total)).sum())
}

/// Shared equal-width binning used for every histogram of one comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub bins: usize,
    pub range: ScoreRange,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self { bins: DEFAULT_HIST_BINS, range: ScoreRange::default() }
    }
}

/// Normalized histogram; out-of-range values are clamped into the end bins.
pub fn histogram(values: &[f64], spec: &HistogramSpec) -> Result<Vec<f64>, MetricsError> {
    if spec.bins < 2 {
        return Err(MetricsError::InvalidSpec(format!("bin count {} < 2", spec.bins)));
    }
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let outside = values.iter().filter(|v| !spec.range.contains(**v)).count();
    if outside > 0 {
        warn!("{outside} value(s) outside [{}, {}] clamped into the end bins", spec.range.lo, spec.range.hi);
    }
    let mut counts = vec![0usize; spec.bins];
    for &v in values {
        counts[spec.range.bin_of(v, spec.bins)] += 1;
    }
    let n = values.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

fn check_distribution(p: &[f64]) -> Result<(), MetricsError> {
    if p.is_empty() {
        return Err(MetricsError::Empty);
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(MetricsError::NonFinite);
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(MetricsError::NotNormalized(sum));
    }
    Ok(())
}

/// Base-2 Jensen–Shannon divergence, in `[0, 1]`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64, MetricsError> {
    if p.len() != q.len() {
        return Err(MetricsError::LengthMismatch(p.len(), q.len()));
    }
    check_distribution(p)?;
    check_distribution(q)?;
    let kl_to_mid = |a: f64, b: f64| if a > 0.0 { a * (2.0 * a / (a + b)).log2() } else { 0.0 };
    let js: f64 = p.iter().zip(q).map(|(&a, &b)| 0.5 * kl_to_mid(a, b) + 0.5 * kl_to_mid(b, a)).sum();
    Ok(js.clamp(0.0, 1.0))
}

/// Shannon entropy in nats and its exponential, the effective number of bins.
pub fn entropy_and_effective_bins(p: &[f64]) -> Result<(f64, f64), MetricsError> {
    check_distribution(p)?;
    let h: f64 = -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>();
    let h = h.max(0.0);
    Ok((h, h.exp()))
}

/// Agreement and distribution statistics of predictions against references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub plcc: f64,
    pub srcc: f64,
    pub js: f64,
    pub entropy: f64,
    pub effective_bins: f64,
    pub hist_pred: Vec<f64>,
    pub hist_ref: Vec<f64>,
}

pub fn evaluate(pred: &[f64], reference: &[f64], spec: &HistogramSpec) -> Result<EvalReport, MetricsError> {
    let hist_pred = histogram(pred, spec)?;
    let hist_ref = histogram(reference, spec)?;
    let (entropy, effective_bins) = entropy_and_effective_bins(&hist_pred)?;
    Ok(EvalReport {
        n: pred.len(),
        plcc: plcc(pred, reference)?,
        srcc: srcc(pred, reference)?,
        js: js_divergence(&hist_pred, &hist_ref)?,
        entropy,
        effective_bins,
        hist_pred,
        hist_ref,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub seeds: Vec<u64>,
    pub plcc: Summary,
    pub srcc: Summary,
    pub js: Summary,
    pub effective_bins: Summary,
    pub runs: Vec<EvalReport>,
}

/// Seeded permutation of `items`.
pub fn permuted<T: Clone>(items: &[T], seed: u64) -> Vec<T> {
    let mut out = items.to_vec();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

/// Runs `run` on one seeded permutation of `items` per seed and summarizes the metrics.
pub fn order_robustness<T, E, F>(items: &[T], seeds: &[u64], mut run: F) -> Result<RobustnessReport, E>
where
    T: Clone,
    E: From<MetricsError>,
    F: FnMut(&[T]) -> Result<EvalReport, E>,
{
    if seeds.len() < 2 {
        return Err(MetricsError::TooFewRuns(seeds.len()).into());
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        runs.push(run(&permuted(items, seed))?);
    }
    let pick = |f: fn(&EvalReport) -> f64| Summary::of(&runs.iter().map(f).collect::<Vec<_>>());
    Ok(RobustnessReport {
        seeds: seeds.to_vec(),
        plcc: pick(|r| r.plcc),
        srcc: pick(|r| r.srcc),
        js: pick(|r| r.js),
        effective_bins: pick(|r| r.effective_bins),
        runs,
    })
}
