//! Five-parameter logistic alignment of raw backend scores to the reference scale.
//!
//! ```text
//! s = β1 (1/2 - 1/(1 + exp(β2 (raw - β3)))) + β4 raw + β5
//! ```
//!
//! The fit is a derivative-free simplex search with a handful of restarts.
//! The five-parameter form is not monotone for every β, so the fitted map is
//! checked on a dense grid and replaced by a linear least-squares map when the
//! check fails.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ScoreRange;

pub const MIN_FIT_PAIRS: usize = 10;
pub const MONOTONE_GRID_POINTS: usize = 1000;

const RESTARTS: usize = 5;
const MAX_SIMPLEX_ITERATIONS: usize = 2000;
const SIMPLEX_TOL: f64 = 1e-10;
const RESTART_SEED: u64 = 0x05ee_df17;
/// Bound on `|β2|` times the raw span; keeps the fit from placing steps inside noise.
pub const MAX_STEEPNESS: f64 = 20.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapError {
    #[error("raw score {0} is not finite")]
    NonFiniteRaw(f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("need at least {MIN_FIT_PAIRS} (raw, gt) pairs, got {0}")]
    TooFewPairs(usize),
    #[error("raw scores are all identical ({0}); the mapping is not identifiable")]
    DegenerateRaw(f64),
    #[error("pair {index} is not finite")]
    NonFinite { index: usize },
    #[error("target {value} at pair {index} lies outside the score range")]
    TargetOutOfRange { index: usize, value: f64 },
}

/// Coefficients of the logistic map plus the raw interval they were fit on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticParams {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub beta4: f64,
    pub beta5: f64,
    pub raw_lo: f64,
    pub raw_hi: f64,
}

impl LogisticParams {
    pub fn from_betas(beta: [f64; 5], raw_lo: f64, raw_hi: f64) -> Self {
        Self {
            beta1: beta[0],
            beta2: beta[1],
            beta3: beta[2],
            beta4: beta[3],
            beta5: beta[4],
            raw_lo,
            raw_hi,
        }
    }

    pub fn betas(&self) -> [f64; 5] {
        [self.beta1, self.beta2, self.beta3, self.beta4, self.beta5]
    }

    /// Identity map over `range`.
    pub fn identity(range: ScoreRange) -> Self {
        Self::from_betas([0.0, 1.0, 0.0, 1.0, 0.0], range.lo, range.hi)
    }

    /// Unclamped evaluation.
    #[inline]
    pub fn eval(&self, raw: f64) -> f64 {
        eval_betas(&self.betas(), raw)
    }

    pub fn is_valid(&self) -> bool {
        self.betas().iter().all(|b| b.is_finite())
            && self.beta2 != 0.0
            && self.raw_lo.is_finite()
            && self.raw_hi.is_finite()
            && self.raw_lo <= self.raw_hi
    }

    /// True when the clamped map is non-decreasing on a 1000-point grid over `[raw_lo, raw_hi]`.
    pub fn is_monotone(&self, range: ScoreRange) -> bool {
        is_monotone_on(&self.betas(), self.raw_lo, self.raw_hi, range)
    }
}

#[inline]
fn eval_betas(b: &[f64; 5], raw: f64) -> f64 {
    // 1/2 - 1/(1+e^z) == tanh(z/2)/2, which never overflows
    let z = b[1] * (raw - b[2]);
    b[0] * 0.5 * (0.5 * z).tanh() + b[3] * raw + b[4]
}

fn is_monotone_on(b: &[f64; 5], lo: f64, hi: f64, range: ScoreRange) -> bool {
    let n = MONOTONE_GRID_POINTS;
    let step = (hi - lo) / (n - 1) as f64;
    let mut prev = f64::NEG_INFINITY;
    for k in 0..n {
        let y = range.clamp(eval_betas(b, lo + step * k as f64));
        if y < prev - 1e-12 {
            return false;
        }
        prev = y;
    }
    true
}

/// Maps a raw score onto the reference scale, clamped to `range`.
pub fn logistic_map(raw: f64, params: &LogisticParams, range: ScoreRange) -> Result<f64, MapError> {
    if !raw.is_finite() {
        return Err(MapError::NonFiniteRaw(raw));
    }
    Ok(range.clamp(params.eval(raw)))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

/// Ordinary least squares `gt ≈ slope * raw + intercept`.
fn linear_fit(pairs: &[(f64, f64)]) -> (f64, f64) {
    let mx = mean(pairs.iter().map(|p| p.0));
    let my = mean(pairs.iter().map(|p| p.1));
    let (sxy, sxx) = pairs.iter().fold((0.0, 0.0), |(sxy, sxx), &(x, y)| {
        (sxy + (x - mx) * (y - my), sxx + (x - mx) * (x - mx))
    });
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn mse(b: &[f64; 5], pairs: &[(f64, f64)], range: ScoreRange) -> f64 {
    let sum: f64 = pairs
        .iter()
        .map(|&(x, y)| {
            let r = range.clamp(eval_betas(b, x)) - y;
            r * r
        })
        .sum();
    sum / pairs.len() as f64
}

/// Nelder–Mead minimization over five parameters.
fn simplex_minimize<F: Fn(&[f64; 5]) -> f64>(f: F, start: [f64; 5]) -> ([f64; 5], f64) {
    const N: usize = 5;
    let mut pts: Vec<[f64; N]> = Vec::with_capacity(N + 1);
    pts.push(start);
    for i in 0..N {
        let mut p = start;
        p[i] += if p[i].abs() > 1e-8 { 0.1 * p[i] } else { 0.25 };
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(&f).collect();

    for _ in 0..MAX_SIMPLEX_ITERATIONS {
        let mut order: Vec<usize> = (0..=N).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = order.iter().map(|&i| pts[i]).collect();
        vals = order.iter().map(|&i| vals[i]).collect();

        let (best, worst) = (vals[0], vals[N]);
        if (worst - best).abs() <= SIMPLEX_TOL * best.abs().max(f64::MIN_POSITIVE) {
            break;
        }

        let mut centroid = [0.0; N];
        for p in &pts[..N] {
            for (c, x) in centroid.iter_mut().zip(p) {
                *c += x / N as f64;
            }
        }
        let along = |t: f64| -> [f64; N] {
            let mut out = [0.0; N];
            for i in 0..N {
                out[i] = centroid[i] + t * (pts[N][i] - centroid[i]);
            }
            out
        };

        let reflected = along(-1.0);
        let fr = f(&reflected);
        if fr < vals[0] {
            let expanded = along(-2.0);
            let fe = f(&expanded);
            if fe < fr {
                pts[N] = expanded;
                vals[N] = fe;
            } else {
                pts[N] = reflected;
                vals[N] = fr;
            }
            continue;
        }
        if fr < vals[N - 1] {
            pts[N] = reflected;
            vals[N] = fr;
            continue;
        }
        let (contracted, fc) = if fr < vals[N] {
            let c = along(-0.5);
            let fc = f(&c);
            (c, fc)
        } else {
            let c = along(0.5);
            let fc = f(&c);
            (c, fc)
        };
        if fc < vals[N].min(fr) {
            pts[N] = contracted;
            vals[N] = fc;
            continue;
        }
        // shrink toward the best vertex
        let best_pt = pts[0];
        for k in 1..=N {
            for i in 0..N {
                pts[k][i] = best_pt[i] + 0.5 * (pts[k][i] - best_pt[i]);
            }
            vals[k] = f(&pts[k]);
        }
    }

    let (i, v) = vals
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, v)| (i, *v))
        .unwrap();
    (pts[i], v)
}

/// Fits the logistic map minimizing mean squared error against `gt`.
pub fn fit_logistic(pairs: &[(f64, f64)], range: ScoreRange) -> Result<LogisticParams, FitError> {
    if pairs.len() < MIN_FIT_PAIRS {
        return Err(FitError::TooFewPairs(pairs.len()));
    }
    for (index, &(x, y)) in pairs.iter().enumerate() {
        if !x.is_finite() || !y.is_finite() {
            return Err(FitError::NonFinite { index });
        }
        if !range.contains(y) {
            return Err(FitError::TargetOutOfRange { index, value: y });
        }
    }
    let raw_lo = pairs.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let raw_hi = pairs.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    if raw_lo == raw_hi {
        return Err(FitError::DegenerateRaw(raw_lo));
    }

    let (slope, intercept) = linear_fit(pairs);
    // decreasing data cannot be fit by a monotone map; fall back to the mean level
    let linear = if slope >= 0.0 {
        [0.0, 1.0, 0.0, slope, intercept]
    } else {
        [0.0, 1.0, 0.0, 0.0, mean(pairs.iter().map(|p| p.1))]
    };

    let gt_lo = pairs.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let gt_hi = pairs.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let init = [gt_hi - gt_lo, (MAX_STEEPNESS / (raw_hi - raw_lo)).min(1.0), median(pairs.iter().map(|p| p.0).collect()), slope, intercept];

    let objective = |b: &[f64; 5]| {
        if b[1] == 0.0 || b[1].abs() * (raw_hi - raw_lo) > MAX_STEEPNESS || b.iter().any(|x| !x.is_finite()) {
            f64::INFINITY
        } else {
            mse(b, pairs, range)
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(RESTART_SEED);
    let mut best = (linear, objective(&linear));
    for restart in 0..RESTARTS {
        let mut start = init;
        if restart > 0 {
            for (i, b) in start.iter_mut().enumerate() {
                let scale = if i == 2 { raw_hi - raw_lo } else { b.abs().max(0.5) };
                *b += scale * rng.random_range(-0.5..0.5);
            }
            let cap = MAX_STEEPNESS / (raw_hi - raw_lo);
            if start[1] == 0.0 || start[1].abs() > cap {
                start[1] = start[1].clamp(-cap, cap).max(0.5 * cap.min(1.0));
            }
        }
        let candidate = simplex_minimize(objective, start);
        if candidate.1 < best.1 {
            best = candidate;
        }
    }

    let chosen = if best.0[1] != 0.0 && is_monotone_on(&best.0, raw_lo, raw_hi, range) {
        best.0
    } else {
        linear
    };
    Ok(LogisticParams::from_betas(chosen, raw_lo, raw_hi))
}
