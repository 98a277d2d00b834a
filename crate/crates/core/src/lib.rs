//! Test-time re-ranking of coarse scalar quality predictions.
//!
//! A query is scored by a pluggable [`backend::QualityBackend`], its raw score
//! is aligned to the ground-truth scale with a five-parameter logistic map
//! ([`scale_map`]), neighbors are retrieved from a hybrid anchor/contrast
//! memory ([`memory`], [`retrieval`]), the backend is asked for pairwise
//! preference probabilities against each neighbor, and the resulting ordinal
//! evidence is fused with the initial score under Thurstone's Case V model
//! ([`fusion`]). [`pipeline`] runs the online loop and [`metrics`] scores the
//! output against references.

pub mod backend;
pub mod fusion;
pub mod memory;
pub mod metrics;
pub mod pipeline;
pub mod records;
pub mod retrieval;
pub mod scale_map;
pub mod synth;

use serde::{Deserialize, Serialize};

/// Closed interval of the quality scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRange {
    pub lo: f64,
    pub hi: f64,
}

impl ScoreRange {
    pub fn new(lo: f64, hi: f64) -> Option<Self> {
        (lo.is_finite() && hi.is_finite() && lo < hi).then_some(Self { lo, hi })
    }

    #[inline]
    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lo, self.hi)
    }

    #[inline]
    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    /// Equal-width bin index of `x` among `bins` bins; the last bin is right-closed.
    pub fn bin_of(&self, x: f64, bins: usize) -> usize {
        let t = (self.clamp(x) - self.lo) / self.width();
        ((t * bins as f64).floor() as usize).min(bins - 1)
    }
}

impl Default for ScoreRange {
    fn default() -> Self {
        Self { lo: 1.0, hi: 5.0 }
    }
}
