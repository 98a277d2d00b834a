//! Hybrid memory bank: a static anchor memory (AM) built offline from labeled
//! items and a capacity-bounded contrast memory (CM) grown online.
//!
//! Bank files are newline-delimited JSON: a header record, one record per
//! item (anchors first, then contrasts) and a trailing checksum record that
//! covers every preceding byte.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{Embedding, ImageRef};
use crate::retrieval::dot;
use crate::scale_map::LogisticParams;
use crate::ScoreRange;

pub const BANK_FORMAT: &str = "merank-memory-bank";
pub const BANK_VERSION: u32 = 1;
pub const DEFAULT_CAPACITY: usize = 1024;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("anchor memory is sealed; it cannot be modified")]
    SealedAnchors,
    #[error("duplicate memory item id `{0}`")]
    DuplicateId(String),
    #[error("item `{id}` has score {score} outside [{lo}, {hi}]")]
    ScoreOutOfRange { id: String, score: f64, lo: f64, hi: f64 },
    #[error("item `{id}` has embedding dimension {found}, bank uses {expected}")]
    DimMismatch { id: String, expected: usize, found: usize },
    #[error("capacity must be positive")]
    ZeroCapacity,
    #[error("unsupported bank file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed record at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("checksum mismatch: file records {recorded}, content hashes to {computed}")]
    Checksum { recorded: String, computed: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    #[serde(rename = "AM")]
    Anchor,
    #[serde(rename = "CM")]
    Contrast,
}

/// One stored case: image, quality description with its embedding, and score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryItem {
    pub id: String,
    pub image_ref: ImageRef,
    pub description: String,
    pub embedding: Embedding,
    /// Ground truth for anchors, refined estimate for contrasts.
    pub score: f64,
    pub reflected: bool,
    pub origin: Origin,
    pub insert_seq: u64,
}

impl MemoryItem {
    /// Item not yet placed in a store; origin and sequence are assigned on insert.
    pub fn new(image_ref: ImageRef, description: String, embedding: Embedding, score: f64, reflected: bool) -> Self {
        Self {
            id: image_ref.id.clone(),
            image_ref,
            description,
            embedding,
            score,
            reflected,
            origin: Origin::Anchor,
            insert_seq: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BankHeader {
    format: String,
    version: u32,
    score_lo: f64,
    score_hi: f64,
    dim: Option<usize>,
    capacity: usize,
    beta1: f64,
    beta2: f64,
    beta3: f64,
    beta4: f64,
    beta5: f64,
    raw_lo: f64,
    raw_hi: f64,
    next_seq: u64,
    anchors: usize,
    contrasts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Trailer {
    checksum: String,
}

#[derive(Debug, Clone)]
pub struct MemoryBank {
    anchors: Vec<MemoryItem>,
    contrasts: Vec<MemoryItem>,
    capacity: usize,
    logistic: LogisticParams,
    range: ScoreRange,
    dim: Option<usize>,
    next_seq: u64,
    sealed: bool,
    ids: HashSet<String>,
}

impl PartialEq for MemoryBank {
    fn eq(&self, other: &Self) -> bool {
        self.anchors == other.anchors
            && self.contrasts == other.contrasts
            && self.capacity == other.capacity
            && self.logistic == other.logistic
            && self.range == other.range
            && self.dim == other.dim
            && self.next_seq == other.next_seq
            && self.sealed == other.sealed
    }
}

impl MemoryBank {
    pub fn new(capacity: usize, logistic: LogisticParams, range: ScoreRange) -> Result<Self, MemoryError> {
        if capacity == 0 {
            return Err(MemoryError::ZeroCapacity);
        }
        Ok(Self {
            anchors: Vec::new(),
            contrasts: Vec::new(),
            capacity,
            logistic,
            range,
            dim: None,
            next_seq: 0,
            sealed: false,
            ids: HashSet::new(),
        })
    }

    pub fn anchors(&self) -> &[MemoryItem] {
        &self.anchors
    }

    pub fn contrasts(&self) -> &[MemoryItem] {
        &self.contrasts
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn logistic(&self) -> &LogisticParams {
        &self.logistic
    }

    pub fn range(&self) -> ScoreRange {
        self.range
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    /// Sequence number the next inserted item will receive.
    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn get(&self, id: &str) -> Option<&MemoryItem> {
        self.anchors.iter().chain(&self.contrasts).find(|m| m.id == id)
    }

    /// Freezes the anchor memory.
    pub fn seal(&mut self) {
        self.sealed = true;
    }

    /// Replaces the capacity; shrinking prunes the contrast memory.
    pub fn set_capacity(&mut self, capacity: usize) -> Result<Vec<MemoryItem>, MemoryError> {
        if capacity == 0 {
            return Err(MemoryError::ZeroCapacity);
        }
        self.capacity = capacity;
        Ok(self.prune_contrast())
    }

    fn admit(&mut self, item: &mut MemoryItem, origin: Origin) -> Result<(), MemoryError> {
        if self.ids.contains(&item.id) {
            return Err(MemoryError::DuplicateId(item.id.clone()));
        }
        if !self.range.contains(item.score) {
            return Err(MemoryError::ScoreOutOfRange {
                id: item.id.clone(),
                score: item.score,
                lo: self.range.lo,
                hi: self.range.hi,
            });
        }
        match self.dim {
            Some(d) if d != item.embedding.dim() => {
                return Err(MemoryError::DimMismatch { id: item.id.clone(), expected: d, found: item.embedding.dim() })
            }
            _ => self.dim = Some(item.embedding.dim()),
        }
        item.origin = origin;
        item.insert_seq = self.next_seq;
        self.next_seq += 1;
        self.ids.insert(item.id.clone());
        Ok(())
    }

    pub fn insert_anchor(&mut self, mut item: MemoryItem) -> Result<(), MemoryError> {
        if self.sealed {
            return Err(MemoryError::SealedAnchors);
        }
        self.admit(&mut item, Origin::Anchor)?;
        self.anchors.push(item);
        Ok(())
    }

    /// Appends a contrast item and prunes back to capacity; returns evicted items.
    pub fn insert_contrast(&mut self, mut item: MemoryItem) -> Result<Vec<MemoryItem>, MemoryError> {
        self.admit(&mut item, Origin::Contrast)?;
        self.contrasts.push(item);
        Ok(self.prune_contrast())
    }

    /// Evicts the most redundant contrast items until the store fits its capacity.
    ///
    /// Redundancy is an item's highest cosine similarity to any other contrast
    /// item. The most recently inserted item is never evicted; ties go to the
    /// older item.
    pub fn prune_contrast(&mut self) -> Vec<MemoryItem> {
        let mut evicted = Vec::new();
        while self.contrasts.len() > self.capacity {
            let newest = self
                .contrasts
                .iter()
                .enumerate()
                .max_by_key(|(_, m)| m.insert_seq)
                .map(|(i, _)| i)
                .expect("non-empty");
            let n = self.contrasts.len();
            let mut victim: Option<(usize, f64)> = None;
            for i in (0..n).filter(|&i| i != newest) {
                let redundancy = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| dot(self.contrasts[i].embedding.values(), self.contrasts[j].embedding.values()))
                    .fold(f64::NEG_INFINITY, f64::max);
                let better = match victim {
                    None => true,
                    Some((v, best)) => {
                        redundancy > best
                            || (redundancy == best && self.contrasts[i].insert_seq < self.contrasts[v].insert_seq)
                    }
                };
                if better {
                    victim = Some((i, redundancy));
                }
            }
            let (v, _) = victim.expect("capacity >= 1 leaves a candidate");
            let item = self.contrasts.remove(v);
            self.ids.remove(&item.id);
            evicted.push(item);
        }
        evicted
    }

    /// Adopts the contrast items of `other` (typically a persisted CM), keeping their sequence numbers.
    pub fn absorb_contrasts(&mut self, other: MemoryBank) -> Result<Vec<MemoryItem>, MemoryError> {
        let mut incoming = other.contrasts;
        incoming.sort_by_key(|m| m.insert_seq);
        for item in incoming {
            if self.ids.contains(&item.id) {
                return Err(MemoryError::DuplicateId(item.id));
            }
            if let Some(d) = self.dim {
                if d != item.embedding.dim() {
                    return Err(MemoryError::DimMismatch { id: item.id, expected: d, found: item.embedding.dim() });
                }
            }
            self.dim = Some(item.embedding.dim());
            self.next_seq = self.next_seq.max(item.insert_seq + 1);
            self.ids.insert(item.id.clone());
            self.contrasts.push(item);
        }
        self.next_seq = self.next_seq.max(other.next_seq);
        Ok(self.prune_contrast())
    }

    /// Copy of this bank holding only the contrast memory.
    pub fn contrast_only(&self) -> MemoryBank {
        let mut out = self.clone();
        out.anchors.clear();
        out.ids = out.contrasts.iter().map(|m| m.id.clone()).collect();
        out
    }

    fn header(&self) -> BankHeader {
        BankHeader {
            format: BANK_FORMAT.to_string(),
            version: BANK_VERSION,
            score_lo: self.range.lo,
            score_hi: self.range.hi,
            dim: self.dim,
            capacity: self.capacity,
            beta1: self.logistic.beta1,
            beta2: self.logistic.beta2,
            beta3: self.logistic.beta3,
            beta4: self.logistic.beta4,
            beta5: self.logistic.beta5,
            raw_lo: self.logistic.raw_lo,
            raw_hi: self.logistic.raw_hi,
            next_seq: self.next_seq,
            anchors: self.anchors.len(),
            contrasts: self.contrasts.len(),
        }
    }

    /// Canonical serialized form.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.header()).expect("header serializes");
        out.push(b'\n');
        for item in self.anchors.iter().chain(&self.contrasts) {
            out.extend(serde_json::to_vec(item).expect("item serializes"));
            out.push(b'\n');
        }
        let checksum = format!("sha256:{}", hex_digest(&out));
        out.extend(serde_json::to_vec(&Trailer { checksum }).expect("trailer serializes"));
        out.push(b'\n');
        out
    }

    /// Parses a bank file; the loaded anchor memory is sealed.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MemoryError> {
        let text = std::str::from_utf8(bytes)
            .map_err(|e| MemoryError::Malformed { line: 1, message: format!("not UTF-8: {e}") })?;
        let lines: Vec<&str> = text.split_terminator('\n').collect();
        let malformed = |line: usize, message: String| MemoryError::Malformed { line, message };

        let first = lines.first().ok_or_else(|| malformed(1, "empty file".into()))?;
        let probe: serde_json::Value =
            serde_json::from_str(first).map_err(|e| malformed(1, format!("header: {e}")))?;
        if probe.get("format").and_then(|f| f.as_str()) != Some(BANK_FORMAT) {
            return Err(malformed(1, "not a memory bank header".into()));
        }
        if let Some(v) = probe.get("version").and_then(|v| v.as_u64()) {
            if v != BANK_VERSION as u64 {
                return Err(MemoryError::Version { found: v as u32, expected: BANK_VERSION });
            }
        }
        let header: BankHeader =
            serde_json::from_value(probe).map_err(|e| malformed(1, format!("header: {e}")))?;

        let n_items = header.anchors + header.contrasts;
        let trailer_line = n_items + 2;
        if !text.ends_with('\n') && lines.len() <= trailer_line {
            return Err(malformed(lines.len(), "truncated record: missing line terminator".into()));
        }
        if lines.len() < trailer_line {
            return Err(malformed(
                lines.len() + 1,
                format!("unexpected end of file: header declares {n_items} items and a checksum record"),
            ));
        }
        if lines.len() > trailer_line {
            return Err(malformed(trailer_line + 1, "unexpected records after checksum".into()));
        }
        let trailer: Trailer = serde_json::from_str(lines[trailer_line - 1])
            .map_err(|e| malformed(trailer_line, format!("checksum record: {e}")))?;
        let covered: usize = lines[..trailer_line - 1].iter().map(|l| l.len() + 1).sum();
        let computed = format!("sha256:{}", hex_digest(&bytes[..covered]));
        if computed != trailer.checksum {
            return Err(MemoryError::Checksum { recorded: trailer.checksum, computed });
        }

        let range = ScoreRange::new(header.score_lo, header.score_hi)
            .ok_or_else(|| malformed(1, "invalid score range".into()))?;
        let logistic = LogisticParams {
            beta1: header.beta1,
            beta2: header.beta2,
            beta3: header.beta3,
            beta4: header.beta4,
            beta5: header.beta5,
            raw_lo: header.raw_lo,
            raw_hi: header.raw_hi,
        };
        let mut bank = MemoryBank::new(header.capacity, logistic, range).map_err(|e| malformed(1, e.to_string()))?;
        bank.dim = header.dim;

        for (k, raw) in lines[1..trailer_line - 1].iter().enumerate() {
            let line = k + 2;
            let item: MemoryItem =
                serde_json::from_str(raw).map_err(|e| malformed(line, format!("item: {e}")))?;
            let (store, expected) = if k < header.anchors {
                (&bank.anchors, Origin::Anchor)
            } else {
                (&bank.contrasts, Origin::Contrast)
            };
            if item.origin != expected {
                return Err(malformed(line, format!("item `{}` has origin {:?}, expected {expected:?}", item.id, item.origin)));
            }
            if let Some(prev) = store.last() {
                if item.insert_seq <= prev.insert_seq {
                    return Err(malformed(line, "insert_seq not strictly increasing".into()));
                }
            }
            if item.insert_seq >= header.next_seq {
                return Err(malformed(line, "insert_seq beyond header next_seq".into()));
            }
            if !range.contains(item.score) {
                return Err(malformed(line, format!("score {} outside score range", item.score)));
            }
            if header.dim != Some(item.embedding.dim()) {
                return Err(malformed(line, "embedding dimension differs from header".into()));
            }
            if !bank.ids.insert(item.id.clone()) {
                return Err(malformed(line, format!("duplicate id `{}`", item.id)));
            }
            if expected == Origin::Anchor {
                bank.anchors.push(item);
            } else {
                bank.contrasts.push(item);
            }
        }
        bank.next_seq = header.next_seq;
        bank.sealed = true;
        Ok(bank)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MemoryError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MemoryError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
