//! Pluggable quality backend contract.
//!
//! A backend plays the role of the vision-language model: it scores an image
//! with free-form reasoning, compares two images probabilistically, condenses
//! and revises reasoning, and embeds text for retrieval. [`sim::SimBackend`]
//! is a seeded simulated oracle; [`external::ExternalBackend`] speaks the JSON
//! wire protocol in [`protocol`] to a remote service.

pub mod external;
pub mod protocol;
pub mod server;
pub mod sim;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use external::{ExternalBackend, ExternalConfig};
pub use sim::{SimBackend, SimBackendConfig, SyntheticItem};

/// Tolerance on the unit norm of an [`Embedding`].
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("unknown image reference `{0}`")]
    UnknownImage(String),
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("invalid backend configuration: {0}")]
    InvalidConfig(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("embedding is empty")]
    Empty,
    #[error("embedding contains a non-finite component")]
    NonFinite,
    #[error("embedding norm {0} is not 1 (tolerance {UNIT_NORM_TOL})")]
    NotUnit(f64),
    #[error("embedding is the zero vector")]
    Zero,
    #[error("embedding dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
}

/// Opaque reference to an image: a unique id plus a backend-resolvable payload.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    pub payload: String,
}

impl ImageRef {
    pub fn new(id: impl Into<String>, payload: impl Into<String>) -> Self {
        Self { id: id.into(), payload: payload.into() }
    }
}

/// Reasoning text and raw scalar prediction for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assessment {
    pub reasoning: String,
    pub raw_score: f64,
}

/// Unit-norm text embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Wraps `values`, which must already have unit L2 norm.
    pub fn new(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::Empty);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(EmbeddingError::NotUnit(norm));
        }
        Ok(Self(values))
    }

    /// Scales `values` to unit norm.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::Empty);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(EmbeddingError::Zero);
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = EmbeddingError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

/// Operations the re-ranking pipeline needs from a quality model.
///
/// `compare` may be called concurrently for distinct pairs.
pub trait QualityBackend: Send + Sync {
    fn assess(&self, image: &ImageRef) -> Result<Assessment, BackendError>;

    /// Soft preference `P(quality(a) > quality(b))`, strictly inside `(0, 1)`.
    fn compare(&self, a: &ImageRef, b: &ImageRef) -> Result<f64, BackendError>;

    fn summarize(&self, reasoning: &str) -> Result<String, BackendError>;

    fn reflect(
        &self,
        image: &ImageRef,
        reasoning: &str,
        initial: f64,
        target: f64,
    ) -> Result<String, BackendError>;

    fn embed(&self, text: &str) -> Result<Embedding, BackendError>;
}

impl<B: QualityBackend + ?Sized> QualityBackend for &B {
    fn assess(&self, image: &ImageRef) -> Result<Assessment, BackendError> {
        (**self).assess(image)
    }
    fn compare(&self, a: &ImageRef, b: &ImageRef) -> Result<f64, BackendError> {
        (**self).compare(a, b)
    }
    fn summarize(&self, reasoning: &str) -> Result<String, BackendError> {
        (**self).summarize(reasoning)
    }
    fn reflect(&self, image: &ImageRef, reasoning: &str, initial: f64, target: f64) -> Result<String, BackendError> {
        (**self).reflect(image, reasoning, initial, target)
    }
    fn embed(&self, text: &str) -> Result<Embedding, BackendError> {
        (**self).embed(text)
    }
}

impl<B: QualityBackend + ?Sized> QualityBackend for Box<B> {
    fn assess(&self, image: &ImageRef) -> Result<Assessment, BackendError> {
        (**self).assess(image)
    }
    fn compare(&self, a: &ImageRef, b: &ImageRef) -> Result<f64, BackendError> {
        (**self).compare(a, b)
    }
    fn summarize(&self, reasoning: &str) -> Result<String, BackendError> {
        (**self).summarize(reasoning)
    }
    fn reflect(&self, image: &ImageRef, reasoning: &str, initial: f64, target: f64) -> Result<String, BackendError> {
        (**self).reflect(image, reasoning, initial, target)
    }
    fn embed(&self, text: &str) -> Result<Embedding, BackendError> {
        (**self).embed(text)
    }
}
