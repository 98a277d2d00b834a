//! Desk-scale synthetic worlds for the simulated backend.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backend::SyntheticItem;
use crate::records::StreamRecord;

pub const DEFAULT_ANCHOR_FRAC: f64 = 0.3;
pub const DEFAULT_CONTENT_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    pub anchor_frac: f64,
    pub content_dim: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { n: 1000, seed: 0, anchor_frac: DEFAULT_ANCHOR_FRAC, content_dim: DEFAULT_CONTENT_DIM }
    }
}

/// A generated world split into labeled anchors and a query stream.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    pub items: Vec<SyntheticItem>,
    pub anchors: Vec<StreamRecord>,
    pub queries: Vec<StreamRecord>,
}

/// `n` items with `q ~ U[1, 5]` and uniformly random unit content vectors.
pub fn generate_items(n: usize, seed: u64, content_dim: usize) -> Vec<SyntheticItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let q = rng.random_range(1.0..=5.0);
            let content = loop {
                let v: Vec<f64> = (0..content_dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    break v.into_iter().map(|x| x / norm).collect();
                }
            };
            SyntheticItem { id: format!("item-{i}"), q, content }
        })
        .collect()
}

/// Number of anchors for `n` items at fraction `frac`.
pub fn anchor_count(n: usize, frac: f64) -> usize {
    ((n as f64 * frac).round() as usize).min(n)
}

pub fn record_of(item: &SyntheticItem) -> StreamRecord {
    StreamRecord { id: item.id.clone(), payload: item.id.clone(), gt: Some(item.q) }
}

/// Generates a world; the first `anchor_count` items are anchors, the rest queries.
pub fn generate(cfg: &SynthConfig) -> SynthWorld {
    let items = generate_items(cfg.n, cfg.seed, cfg.content_dim);
    let n_a = anchor_count(cfg.n, cfg.anchor_frac);
    let anchors = items[..n_a].iter().map(record_of).collect();
    let queries = items[n_a..].iter().map(record_of).collect();
    SynthWorld { items, anchors, queries }
}
