//! Neighborhood construction over the hybrid memory.
//!
//! The budget `K` is split evenly between anchors and contrasts. Anchors are
//! searched per ground-truth bin so the neighborhood spans the whole quality
//! scale; contrasts are searched by plain top-k. All searches are exact
//! linear scans with similarity ties broken by the smaller item id.

use std::cmp::Ordering;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::sim::fnv1a;
use crate::backend::{Embedding, EmbeddingError};
use crate::memory::{MemoryBank, MemoryItem, Origin};
use crate::ScoreRange;

pub const DEFAULT_K: usize = 32;
pub const DEFAULT_BINS: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("retrieval budget K must be at least 1")]
    ZeroBudget,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub k: usize,
    pub bins: usize,
    pub range: ScoreRange,
    pub seed: u64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { k: DEFAULT_K, bins: DEFAULT_BINS, range: ScoreRange::default(), seed: 0 }
    }
}

/// A retrieved item with its similarity to the query.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub item: MemoryItem,
    pub similarity: f64,
}

impl Neighbor {
    pub fn source(&self) -> Origin {
        self.item.origin
    }
}

/// Retrieved context for one query: anchors first, then contrasts.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Neighborhood {
    pub neighbors: Vec<Neighbor>,
}

impl Neighborhood {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn from_anchors(&self) -> impl Iterator<Item = &Neighbor> {
        self.neighbors.iter().filter(|n| n.source() == Origin::Anchor)
    }

    pub fn from_contrasts(&self) -> impl Iterator<Item = &Neighbor> {
        self.neighbors.iter().filter(|n| n.source() == Origin::Contrast)
    }
}

/// `(floor(K/2), K - floor(K/2))`.
pub fn split_budget(k: usize) -> Result<(usize, usize), RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroBudget);
    }
    let anchors = k / 2;
    Ok((anchors, k - anchors))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity of two unit embeddings.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, EmbeddingError> {
    if a.dim() != b.dim() {
        return Err(EmbeddingError::DimMismatch(a.dim(), b.dim()));
    }
    Ok(dot(a.values(), b.values()).clamp(-1.0, 1.0))
}

fn ranking(a: &(f64, &MemoryItem), b: &(f64, &MemoryItem)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id))
}

fn scored<'a>(
    items: &'a [MemoryItem],
    query: &Embedding,
    exclude_id: Option<&str>,
) -> Result<Vec<(f64, &'a MemoryItem)>, EmbeddingError> {
    items
        .iter()
        .filter(|m| Some(m.id.as_str()) != exclude_id)
        .map(|m| cosine(query, &m.embedding).map(|s| (s, m)))
        .collect()
}

fn into_neighbors(mut picked: Vec<(f64, &MemoryItem)>) -> Vec<Neighbor> {
    picked.sort_by(ranking);
    picked.into_iter().map(|(similarity, m)| Neighbor { item: m.clone(), similarity }).collect()
}

/// Ground-truth-stratified anchor search.
///
/// Scores are split into `bins` equal-width bins over `range`; each bin
/// contributes its `floor(k_a / bins)` nearest items, `k_a mod bins` randomly
/// chosen distinct bins contribute one more, and any shortfall from sparse
/// bins is backfilled with the globally nearest unselected anchors. The result
/// is ordered by decreasing similarity.
pub fn retrieve_stratified<R: Rng + ?Sized>(
    anchors: &[MemoryItem],
    query: &Embedding,
    k_a: usize,
    bins: usize,
    range: ScoreRange,
    exclude_id: Option<&str>,
    rng: &mut R,
) -> Result<Vec<Neighbor>, RetrievalError> {
    let bins = bins.max(1);
    let mut candidates = scored(anchors, query, exclude_id)?;
    if k_a == 0 || candidates.is_empty() {
        return Ok(Vec::new());
    }
    candidates.sort_by(ranking);

    let per_bin = k_a / bins;
    let mut quota = vec![per_bin; bins];
    let remainder = k_a - per_bin * bins;
    if remainder > 0 {
        for b in sample(rng, bins, remainder) {
            quota[b] += 1;
        }
    }

    let mut taken = vec![false; candidates.len()];
    let mut picked = 0;
    for (i, (_, m)) in candidates.iter().enumerate() {
        let b = range.bin_of(m.score, bins);
        if quota[b] > 0 {
            quota[b] -= 1;
            taken[i] = true;
            picked += 1;
        }
    }
    // backfill from the global ranking
    for t in taken.iter_mut() {
        if picked >= k_a {
            break;
        }
        if !*t {
            *t = true;
            picked += 1;
        }
    }

    let chosen = candidates
        .into_iter()
        .zip(taken)
        .filter_map(|(c, t)| t.then_some(c))
        .collect();
    Ok(into_neighbors(chosen))
}

/// The `k_c` contrast items most similar to `query`, excluding `exclude_id`.
pub fn retrieve_topk(
    contrasts: &[MemoryItem],
    query: &Embedding,
    k_c: usize,
    exclude_id: Option<&str>,
) -> Result<Vec<Neighbor>, RetrievalError> {
    let mut candidates = scored(contrasts, query, exclude_id)?;
    candidates.sort_by(ranking);
    candidates.truncate(k_c);
    Ok(into_neighbors(candidates))
}

/// Per-query generator for the remainder-bin draw.
pub fn query_rng(seed: u64, query_id: &str) -> ChaCha8Rng {
    let mut buf = seed.to_le_bytes().to_vec();
    buf.extend_from_slice(b"retrieval\0");
    buf.extend_from_slice(query_id.as_bytes());
    ChaCha8Rng::seed_from_u64(fnv1a(&buf))
}

/// Joint anchor/contrast neighborhood of size `min(K, available)`.
///
/// Unused budget of an undersized store is handed to the other store.
pub fn retrieve_neighborhood(
    bank: &MemoryBank,
    query: &Embedding,
    query_id: &str,
    cfg: &RetrievalConfig,
) -> Result<Neighborhood, RetrievalError> {
    if cfg.k == 0 {
        return Ok(Neighborhood::default());
    }
    let (k_a, k_c) = split_budget(cfg.k)?;
    let avail_a = bank.anchors().iter().filter(|m| m.id != query_id).count();
    let avail_c = bank.contrasts().iter().filter(|m| m.id != query_id).count();

    let base_a = k_a.min(avail_a);
    let base_c = k_c.min(avail_c);
    let spare = cfg.k - base_a - base_c;
    let extra_a = spare.min(avail_a - base_a);
    let extra_c = (spare - extra_a).min(avail_c - base_c);

    let mut rng = query_rng(cfg.seed, query_id);
    let mut neighbors = retrieve_stratified(
        bank.anchors(),
        query,
        base_a + extra_a,
        cfg.bins,
        cfg.range,
        Some(query_id),
        &mut rng,
    )?;
    neighbors.extend(retrieve_topk(bank.contrasts(), query, base_c + extra_c, Some(query_id))?);
    Ok(Neighborhood { neighbors })
}
