//! Seeded simulated quality oracle.
//!
//! Each synthetic item has a latent quality `q ∈ [1, 5]` and a unit content
//! vector. `assess` reproduces discrete collapse: it perturbs `q` with
//! Gaussian noise and snaps it to one of `L` levels. `compare` follows the
//! same probit law used by the fusion, `Φ((q_a - q_b)/σ_c)`, optionally
//! perturbed by a Beta draw. Reasoning and descriptions are short templates
//! carrying a coarse quality level and content tags; `embed` turns them into
//! a hashed content block and a radial-basis quality block.

use std::collections::HashMap;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Assessment, BackendError, Embedding, ImageRef, QualityBackend};
use crate::fusion::normal_cdf;
use crate::ScoreRange;

/// Number of hashed content features in a simulated embedding.
pub const CONTENT_FEATURES: usize = 32;
/// Radial-basis centers of the quality block.
pub const QUALITY_CENTERS: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 5.0];
/// Bandwidth of the quality radial-basis encoding.
pub const QUALITY_BANDWIDTH: f64 = 1.0;
/// Number of content tags written into a description.
pub const CONTENT_TAGS: usize = 3;

const LEVEL_WORDS: [&str; 5] = ["bad", "poor", "fair", "good", "excellent"];
const BOILERPLATE: [&str; 3] = [
    "Let's tackle this step by step.",
    "First, I will look at the overall image.",
    "Thinking about the visual quality carefully:",
];

/// Latent ground truth for one simulated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticItem {
    pub id: String,
    pub q: f64,
    pub content: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimBackendConfig {
    /// Number of equally spaced output levels; `None` is continuous output.
    pub quantization_levels: Option<u32>,
    pub score_noise: f64,
    pub comparator_scale: f64,
    /// Beta concentration of the comparator perturbation; 0 disables it.
    pub comparator_noise: f64,
    pub embed_quality_weight: f64,
    pub prob_clip: f64,
    pub seed: u64,
}

impl Default for SimBackendConfig {
    fn default() -> Self {
        Self {
            quantization_levels: Some(5),
            score_noise: 0.5,
            comparator_scale: 1.0,
            comparator_noise: 0.0,
            embed_quality_weight: 0.5,
            prob_clip: crate::fusion::DEFAULT_PROB_CLIP,
            seed: 0,
        }
    }
}

impl SimBackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: &str| Err(BackendError::InvalidConfig(m.to_string()));
        if self.quantization_levels == Some(0) {
            return bad("quantization_levels must be positive");
        }
        if !(self.score_noise >= 0.0) || !self.score_noise.is_finite() {
            return bad("score_noise must be >= 0");
        }
        if !(self.comparator_scale > 0.0) || !self.comparator_scale.is_finite() {
            return bad("comparator_scale must be > 0");
        }
        if !(self.comparator_noise >= 0.0) || !self.comparator_noise.is_finite() {
            return bad("comparator_noise must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.embed_quality_weight) {
            return bad("embed_quality_weight must lie in [0, 1]");
        }
        if !(self.prob_clip > 0.0 && self.prob_clip < 0.5) {
            return bad("prob_clip must lie in (0, 0.5)");
        }
        Ok(())
    }
}

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn op_rng(seed: u64, op: &str, keys: &[&str]) -> ChaCha8Rng {
    let mut buf = Vec::with_capacity(64);
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(op.as_bytes());
    for k in keys {
        buf.push(0);
        buf.extend_from_slice(k.as_bytes());
    }
    ChaCha8Rng::seed_from_u64(fnv1a(&buf))
}

/// Coarse integer level (1..=5) of a score.
pub fn coarse_level(score: f64) -> u8 {
    score.round().clamp(1.0, 5.0) as u8
}

/// Snaps `x` to the nearest of `levels` equally spaced points on `range`.
pub fn quantize(x: f64, levels: Option<u32>, range: ScoreRange) -> f64 {
    let x = range.clamp(x);
    match levels {
        None => x,
        Some(1) => 0.5 * (range.lo + range.hi),
        Some(l) => {
            let step = range.width() / (l - 1) as f64;
            range.clamp(range.lo + ((x - range.lo) / step).round() * step)
        }
    }
}

/// Content tags of a content vector: the largest-magnitude components with their sign.
pub fn content_tags(content: &[f64]) -> Vec<String> {
    let mut idx: Vec<usize> = (0..content.len()).collect();
    idx.sort_by(|&a, &b| content[b].abs().total_cmp(&content[a].abs()).then(a.cmp(&b)));
    idx.into_iter()
        .take(CONTENT_TAGS)
        .map(|i| format!("t{:02}{}", i, if content[i] >= 0.0 { '+' } else { '-' }))
        .collect()
}

/// Templated quality description.
pub fn describe(level: u8, tags: &[String]) -> String {
    let word = LEVEL_WORDS[(level.clamp(1, 5) - 1) as usize];
    format!("Overall quality level {level} ({word}). Content: {}.", tags.join(", "))
}

fn parse_level(text: &str) -> Option<u8> {
    let pos = text.find("quality level ")?;
    let rest = &text[pos + "quality level ".len()..];
    let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    digits.parse::<u8>().ok().filter(|l| (1..=5).contains(l))
}

fn parse_tags(text: &str) -> Vec<String> {
    match text.find("Content:") {
        Some(pos) => text[pos + "Content:".len()..]
            .split(',')
            .map(|t| t.trim().trim_end_matches('.').to_string())
            .filter(|t| !t.is_empty())
            .collect(),
        None => text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect(),
    }
}

fn replace_level(description: &str, level: u8) -> String {
    match (description.find("quality level "), parse_level(description)) {
        (Some(pos), Some(old)) => {
            let old_token = format!("quality level {old} ({})", LEVEL_WORDS[(old - 1) as usize]);
            let new_token = format!("quality level {level} ({})", LEVEL_WORDS[(level - 1) as usize]);
            let (head, tail) = description.split_at(pos);
            format!("{head}{}", tail.replacen(&old_token, &new_token, 1))
        }
        _ => description.to_string(),
    }
}

/// Normalized radial-basis profile of a quality level over [`QUALITY_CENTERS`].
pub fn quality_profile(level: f64) -> [f64; 5] {
    let mut v = QUALITY_CENTERS
        .map(|c| (-(level - c) * (level - c) / (2.0 * QUALITY_BANDWIDTH * QUALITY_BANDWIDTH)).exp());
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Simulated backend over a fixed synthetic world, keyed by image payload.
#[derive(Debug, Clone)]
pub struct SimBackend {
    cfg: SimBackendConfig,
    range: ScoreRange,
    items: HashMap<String, SyntheticItem>,
}

impl SimBackend {
    pub fn new(
        cfg: SimBackendConfig,
        items: impl IntoIterator<Item = SyntheticItem>,
    ) -> Result<Self, BackendError> {
        cfg.validate()?;
        let range = ScoreRange::default();
        let mut map = HashMap::new();
        for item in items {
            if !range.contains(item.q) {
                return Err(BackendError::InvalidConfig(format!(
                    "item `{}` has latent quality {} outside [1, 5]",
                    item.id, item.q
                )));
            }
            let id = item.id.clone();
            if map.insert(id.clone(), item).is_some() {
                return Err(BackendError::InvalidConfig(format!("duplicate item id `{id}`")));
            }
        }
        Ok(Self { cfg, range, items: map })
    }

    pub fn config(&self) -> &SimBackendConfig {
        &self.cfg
    }

    pub fn item(&self, image: &ImageRef) -> Result<&SyntheticItem, BackendError> {
        self.items
            .get(&image.payload)
            .ok_or_else(|| BackendError::UnknownImage(image.payload.clone()))
    }

    /// Embedding dimension produced by [`QualityBackend::embed`].
    pub fn dim(&self) -> usize {
        CONTENT_FEATURES + QUALITY_CENTERS.len()
    }
}

impl QualityBackend for SimBackend {
    fn assess(&self, image: &ImageRef) -> Result<Assessment, BackendError> {
        let item = self.item(image)?;
        let noisy = if self.cfg.score_noise > 0.0 {
            let mut rng = op_rng(self.cfg.seed, "assess", &[&image.payload]);
            let normal = Normal::new(0.0, self.cfg.score_noise)
                .map_err(|e| BackendError::InvalidConfig(e.to_string()))?;
            item.q + normal.sample(&mut rng)
        } else {
            item.q
        };
        let raw_score = quantize(noisy, self.cfg.quantization_levels, self.range);
        let description = describe(coarse_level(raw_score), &content_tags(&item.content));
        Ok(Assessment { reasoning: format!("{} {}", BOILERPLATE[0], description), raw_score })
    }

    fn compare(&self, a: &ImageRef, b: &ImageRef) -> Result<f64, BackendError> {
        let (qa, qb) = (self.item(a)?.q, self.item(b)?.q);
        let mut p = normal_cdf((qa - qb) / self.cfg.comparator_scale);
        if self.cfg.comparator_noise > 0.0 {
            let kappa = self.cfg.comparator_noise;
            let centre = p.clamp(self.cfg.prob_clip, 1.0 - self.cfg.prob_clip);
            let beta = Beta::new(kappa * centre, kappa * (1.0 - centre))
                .map_err(|e| BackendError::InvalidConfig(e.to_string()))?;
            let mut rng = op_rng(self.cfg.seed, "compare", &[&a.payload, &b.payload]);
            p = beta.sample(&mut rng);
        }
        Ok(p.clamp(self.cfg.prob_clip, 1.0 - self.cfg.prob_clip))
    }

    fn summarize(&self, reasoning: &str) -> Result<String, BackendError> {
        let mut text = reasoning.trim();
        if text.is_empty() {
            warn!("summarize called with empty reasoning");
            return Ok(String::new());
        }
        loop {
            let before = text;
            for phrase in BOILERPLATE {
                if let Some(rest) = text.strip_prefix(phrase) {
                    text = rest.trim_start();
                }
            }
            if before == text {
                break;
            }
        }
        Ok(text.to_string())
    }

    fn reflect(
        &self,
        image: &ImageRef,
        reasoning: &str,
        initial: f64,
        target: f64,
    ) -> Result<String, BackendError> {
        self.item(image)?;
        let description = self.summarize(reasoning)?;
        if target == initial {
            return Ok(description);
        }
        Ok(replace_level(&description, coarse_level(target)))
    }

    fn embed(&self, text: &str) -> Result<Embedding, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::EmptyText);
        }
        let mut content = [0.0f64; CONTENT_FEATURES];
        for tag in parse_tags(text) {
            let h = fnv1a(tag.as_bytes());
            let sign = if (h >> 32) & 1 == 1 { 1.0 } else { -1.0 };
            content[(h % CONTENT_FEATURES as u64) as usize] += sign;
        }
        let content_norm = content.iter().map(|x| x * x).sum::<f64>().sqrt();
        let w = self.cfg.embed_quality_weight;

        let mut values = Vec::with_capacity(self.dim());
        if content_norm > 0.0 {
            values.extend(content.iter().map(|x| (1.0 - w).sqrt() * x / content_norm));
        } else {
            values.extend(std::iter::repeat_n(0.0, CONTENT_FEATURES));
        }
        match parse_level(text) {
            Some(level) => values.extend(quality_profile(level as f64).iter().map(|x| w.sqrt() * x)),
            None => values.extend(std::iter::repeat_n(0.0, QUALITY_CENTERS.len())),
        }
        Embedding::normalized(values).map_err(|_| BackendError::EmptyText)
    }
}
