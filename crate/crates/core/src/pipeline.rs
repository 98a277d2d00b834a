//! Offline anchor construction and the online re-ranking loop.

use std::time::{Duration, Instant};

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ImageRef, QualityBackend};
use crate::fusion::{self, FusionConfig, FusionError, FusionMode, PreferenceEvidence};
use crate::memory::{MemoryBank, MemoryError, MemoryItem, Origin, DEFAULT_CAPACITY};
use crate::metrics::{evaluate, EvalReport, HistogramSpec, MetricsError};
use crate::records::{ResultRecord, StreamRecord};
use crate::retrieval::{retrieve_neighborhood, Neighbor, RetrievalConfig, RetrievalError};
use crate::scale_map::{fit_logistic, logistic_map, FitError, MapError, MIN_FIT_PAIRS};
use crate::ScoreRange;

pub const DEFAULT_EPSILON: f64 = 0.75;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("need at least {MIN_FIT_PAIRS} labeled items, got {0}")]
    TooFewLabeled(usize),
    #[error("labeled item `{0}` has no ground truth")]
    MissingGt(String),
    #[error("query stream is empty")]
    EmptyStream,
    #[error("backend failed on `{id}`: {source}")]
    Backend {
        id: String,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn backend_err(id: &str) -> impl FnOnce(BackendError) -> PipelineError + '_ {
    move |source| PipelineError::Backend { id: id.to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub k: usize,
    pub bins: usize,
    pub lambda: f64,
    pub prob_clip: f64,
    pub fusion: FusionMode,
    /// Reflection gate.
    pub epsilon: f64,
    /// Contrast memory capacity.
    pub capacity: usize,
    pub range: ScoreRange,
    pub seed: u64,
    /// Concurrent comparisons per query; does not affect results.
    pub compare_workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: crate::retrieval::DEFAULT_K,
            bins: crate::retrieval::DEFAULT_BINS,
            lambda: fusion::DEFAULT_LAMBDA,
            prob_clip: fusion::DEFAULT_PROB_CLIP,
            fusion: FusionMode::Exact,
            epsilon: DEFAULT_EPSILON,
            capacity: DEFAULT_CAPACITY,
            range: ScoreRange::default(),
            seed: 0,
            compare_workers: 1,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.prob_clip > 0.0 && self.prob_clip < 0.5) {
            return bad(format!("prob_clip must lie in (0, 0.5), got {}", self.prob_clip));
        }
        if self.bins == 0 {
            return bad("bins must be >= 1".into());
        }
        if self.capacity == 0 {
            return bad("capacity must be >= 1".into());
        }
        if ScoreRange::new(self.range.lo, self.range.hi).is_none() {
            return bad(format!("invalid score range [{}, {}]", self.range.lo, self.range.hi));
        }
        Ok(())
    }

    pub fn retrieval(&self) -> RetrievalConfig {
        RetrievalConfig { k: self.k, bins: self.bins, range: self.range, seed: self.seed }
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig { lambda: self.lambda, prob_clip: self.prob_clip, mode: self.fusion, range: self.range }
    }
}

/// Reflection gate; strict so that `|Δ| = ε` does not reflect.
#[inline]
pub fn gate(initial: f64, refined: f64, epsilon: f64) -> bool {
    (refined - initial).abs() > epsilon
}

/// Per-anchor record of offline construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorTrace {
    pub id: String,
    pub raw: f64,
    pub mapped: f64,
    pub gt: f64,
    pub reflected: bool,
}

/// Assesses, calibrates and stores a labeled set as a sealed anchor memory.
pub fn build_anchor_memory<B: QualityBackend + ?Sized>(
    labeled: &[(ImageRef, f64)],
    backend: &B,
    cfg: &PipelineConfig,
) -> Result<(MemoryBank, Vec<AnchorTrace>), PipelineError> {
    cfg.validate()?;
    if labeled.len() < MIN_FIT_PAIRS {
        return Err(PipelineError::TooFewLabeled(labeled.len()));
    }
    let mut assessments = Vec::with_capacity(labeled.len());
    for (image, _) in labeled {
        assessments.push(backend.assess(image).map_err(backend_err(&image.id))?);
    }
    let pairs: Vec<(f64, f64)> = labeled.iter().zip(&assessments).map(|((_, g), a)| (a.raw_score, *g)).collect();
    let params = fit_logistic(&pairs, cfg.range)?;
    debug!("fitted logistic map {:?}", params.betas());

    let mut bank = MemoryBank::new(cfg.capacity, params, cfg.range)?;
    let mut traces = Vec::with_capacity(labeled.len());
    for ((image, gt), assessment) in labeled.iter().zip(assessments) {
        let mapped = logistic_map(assessment.raw_score, bank.logistic(), cfg.range)?;
        let reflected = gate(mapped, *gt, cfg.epsilon);
        let description = if reflected {
            backend.reflect(image, &assessment.reasoning, mapped, *gt)
        } else {
            backend.summarize(&assessment.reasoning)
        }
        .map_err(backend_err(&image.id))?;
        let embedding = backend.embed(&description).map_err(backend_err(&image.id))?;
        bank.insert_anchor(MemoryItem::new(image.clone(), description, embedding, *gt, reflected))?;
        traces.push(AnchorTrace { id: image.id.clone(), raw: assessment.raw_score, mapped, gt: *gt, reflected });
    }
    bank.seal();
    Ok((bank, traces))
}

/// Labeled pairs from dataset records.
pub fn labeled_pairs(records: &[StreamRecord]) -> Result<Vec<(ImageRef, f64)>, PipelineError> {
    records
        .iter()
        .map(|r| r.gt.map(|g| (r.image_ref(), g)).ok_or_else(|| PipelineError::MissingGt(r.id.clone())))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborTrace {
    pub id: String,
    pub origin: Origin,
    pub insert_seq: u64,
    pub similarity: f64,
    /// Stored score of the neighbor.
    pub score: f64,
    /// Clipped preference of the query over the neighbor; `None` if the comparison failed.
    pub preference: Option<f64>,
}

/// Wall-clock time of a query. Ignored by equality and serialization so that
/// result files are reproducible.
#[derive(Debug, Clone, Copy, Default)]
pub struct Elapsed(pub Duration);

impl PartialEq for Elapsed {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub id: String,
    pub raw: f64,
    pub mapped: f64,
    pub refined: f64,
    pub reflected: bool,
    /// Sequence number of the contrast item this query consolidated.
    pub seq: u64,
    pub description: String,
    pub neighbors: Vec<NeighborTrace>,
    pub evicted: Vec<String>,
    #[serde(skip)]
    pub wall_time: Elapsed,
}

fn compare_all<B: QualityBackend + ?Sized>(
    backend: &B,
    query: &ImageRef,
    neighbors: &[Neighbor],
    workers: usize,
) -> Vec<Result<f64, BackendError>> {
    let one = |n: &Neighbor| backend.compare(query, &n.item.image_ref);
    if workers <= 1 || neighbors.len() <= 1 {
        return neighbors.iter().map(one).collect();
    }
    let chunk = neighbors.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = neighbors
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(one).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("compare worker panicked")).collect()
    })
}

/// Runs one query through the online loop and consolidates it into the contrast memory.
pub fn process_query<B: QualityBackend + ?Sized>(
    query: &ImageRef,
    bank: &mut MemoryBank,
    backend: &B,
    cfg: &PipelineConfig,
) -> Result<QueryResult, PipelineError> {
    let start = Instant::now();
    let id = query.id.as_str();
    let assessment = backend.assess(query).map_err(backend_err(id))?;
    let mapped = logistic_map(assessment.raw_score, bank.logistic(), cfg.range)?;
    let description = backend.summarize(&assessment.reasoning).map_err(backend_err(id))?;
    let embedding = backend.embed(&description).map_err(backend_err(id))?;

    let neighborhood = retrieve_neighborhood(bank, &embedding, id, &cfg.retrieval())?;
    let outcomes = compare_all(backend, query, &neighborhood.neighbors, cfg.compare_workers);

    let mut evidence = Vec::with_capacity(outcomes.len());
    let mut neighbors = Vec::with_capacity(outcomes.len());
    for (n, outcome) in neighborhood.neighbors.iter().zip(outcomes) {
        let preference = match outcome {
            Ok(y) => {
                let e = PreferenceEvidence::clipped(n.item.score, y, cfg.prob_clip)?;
                evidence.push(e);
                Some(e.preference)
            }
            Err(e) => {
                warn!("query `{id}`: comparison with `{}` failed, dropping it: {e}", n.item.id);
                None
            }
        };
        neighbors.push(NeighborTrace {
            id: n.item.id.clone(),
            origin: n.item.origin,
            insert_seq: n.item.insert_seq,
            similarity: n.similarity,
            score: n.item.score,
            preference,
        });
    }

    let refined = if evidence.is_empty() { mapped } else { fusion::fuse(mapped, &evidence, &cfg.fusion())? };
    let reflected = gate(mapped, refined, cfg.epsilon);
    let (description, embedding) = if reflected {
        let revised = backend.reflect(query, &assessment.reasoning, mapped, refined).map_err(backend_err(id))?;
        let e = backend.embed(&revised).map_err(backend_err(id))?;
        (revised, e)
    } else {
        (description, embedding)
    };

    let seq = bank.next_seq();
    let item = MemoryItem::new(query.clone(), description.clone(), embedding, refined, reflected);
    let evicted = bank.insert_contrast(item)?.into_iter().map(|m| m.id).collect();
    Ok(QueryResult {
        id: query.id.clone(),
        raw: assessment.raw_score,
        mapped,
        refined,
        reflected,
        seq,
        description,
        neighbors,
        evicted,
        wall_time: Elapsed(start.elapsed()),
    })
}

/// Processes queries strictly in order; a failing query is reported and skipped.
pub fn run_stream<B: QualityBackend + ?Sized>(
    queries: &[ImageRef],
    bank: &mut MemoryBank,
    backend: &B,
    cfg: &PipelineConfig,
) -> Result<Vec<Result<QueryResult, PipelineError>>, PipelineError> {
    cfg.validate()?;
    if queries.is_empty() {
        return Err(PipelineError::EmptyStream);
    }
    if bank.capacity() != cfg.capacity {
        bank.set_capacity(cfg.capacity)?;
    }
    Ok(queries
        .iter()
        .map(|q| {
            let out = process_query(q, bank, backend, cfg);
            if let Err(e) = &out {
                warn!("query `{}` failed: {e}", q.id);
            }
            out
        })
        .collect())
}

/// [`run_stream`] over stream records, producing result rows that carry `gt` through.
pub fn run_records<B: QualityBackend + ?Sized>(
    records: &[StreamRecord],
    bank: &mut MemoryBank,
    backend: &B,
    cfg: &PipelineConfig,
) -> Result<Vec<ResultRecord>, PipelineError> {
    let queries: Vec<ImageRef> = records.iter().map(StreamRecord::image_ref).collect();
    let outcomes = run_stream(&queries, bank, backend, cfg)?;
    Ok(records.iter().zip(outcomes).map(|(r, o)| ResultRecord::new(r, o)).collect())
}

/// Result rows that violate causality: a contrast neighbor consolidated at or after the query itself.
pub fn causality_violations(rows: &[ResultRecord]) -> Vec<(String, String)> {
    rows.iter()
        .filter_map(|r| r.result.as_ref())
        .flat_map(|q| {
            q.neighbors
                .iter()
                .filter(move |n| n.origin == Origin::Contrast && n.insert_seq >= q.seq)
                .map(move |n| (q.id.clone(), n.id.clone()))
        })
        .collect()
}

/// Baseline (mapped) and refined evaluation of result rows against their ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsEval {
    pub n: usize,
    pub failed: usize,
    pub baseline: EvalReport,
    pub refined: EvalReport,
}

pub fn evaluate_results(rows: &[ResultRecord], spec: &HistogramSpec) -> Result<ResultsEval, PipelineError> {
    let (mut gt, mut base, mut refined) = (Vec::new(), Vec::new(), Vec::new());
    let mut failed = 0;
    for row in rows {
        let g = row.gt.ok_or_else(|| PipelineError::MissingGt(row.id.clone()))?;
        match &row.result {
            Some(r) => {
                gt.push(g);
                base.push(r.mapped);
                refined.push(r.refined);
            }
            None => failed += 1,
        }
    }
    if failed > 0 {
        warn!("{failed} failed row(s) excluded from evaluation");
    }
    Ok(ResultsEval {
        n: gt.len(),
        failed,
        baseline: evaluate(&base, &gt, spec)?,
        refined: evaluate(&refined, &gt, spec)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Assessment, Embedding, SimBackend, SimBackendConfig};
    use crate::fusion::probit::normal_cdf;
    use crate::scale_map::LogisticParams;
    use crate::synth::{generate, SynthConfig};

    fn world(n: usize, frac: f64, seed: u64) -> crate::synth::SynthWorld {
        generate(&SynthConfig { n, seed, anchor_frac: frac, ..Default::default() })
    }

    fn sim(items: &[crate::backend::SyntheticItem], cfg: SimBackendConfig) -> SimBackend {
        SimBackend::new(cfg, items.iter().cloned()).unwrap()
    }

    #[test]
    fn gate_is_strict() {
        assert!(!gate(3.0, 3.75, 0.75));
        assert!(!gate(3.75, 3.0, 0.75));
        assert!(gate(3.0, 3.8, 0.75));
    }

    #[test]
    fn exact_backend_reflects_nothing() {
        let w = world(60, 1.0, 4);
        let b = sim(&w.items, SimBackendConfig { quantization_levels: None, score_noise: 0.0, ..Default::default() });
        let (bank, trace) = build_anchor_memory(&labeled_pairs(&w.anchors).unwrap(), &b, &PipelineConfig::default()).unwrap();
        assert!(bank.is_sealed());
        assert_eq!(bank.anchors().len(), 60);
        assert!(trace.iter().all(|t| !t.reflected));
        assert!(trace.iter().all(|t| (t.mapped - t.gt).abs() < 1e-4));
    }

    #[test]
    fn reflected_fraction_matches_trace_replay() {
        let w = world(200, 1.0, 5);
        let b = sim(&w.items, SimBackendConfig::default());
        let cfg = PipelineConfig::default();
        let (bank, trace) = build_anchor_memory(&labeled_pairs(&w.anchors).unwrap(), &b, &cfg).unwrap();
        let expected = trace.iter().filter(|t| (t.gt - t.mapped).abs() > 0.75).count();
        let stored = bank.anchors().iter().filter(|m| m.reflected).count();
        assert_eq!(stored, expected);
        assert!(expected > 0 && expected < 200);
        for (t, m) in trace.iter().zip(bank.anchors()) {
            assert_eq!(m.score, t.gt);
            let p = bank.logistic();
            assert_eq!(t.mapped, logistic_map(t.raw, p, cfg.range).unwrap());
        }
    }

    #[test]
    fn too_few_labeled() {
        let w = world(9, 1.0, 1);
        let b = sim(&w.items, SimBackendConfig::default());
        let r = build_anchor_memory(&labeled_pairs(&w.anchors).unwrap(), &b, &PipelineConfig::default());
        assert!(matches!(r, Err(PipelineError::TooFewLabeled(9))));
    }

    #[test]
    fn cold_start_uses_anchors_and_consolidates_once() {
        let w = world(100, 0.5, 6);
        let b = sim(&w.items, SimBackendConfig::default());
        let cfg = PipelineConfig::default();
        let (mut bank, _) = build_anchor_memory(&labeled_pairs(&w.anchors).unwrap(), &b, &cfg).unwrap();
        let r = process_query(&w.queries[0].image_ref(), &mut bank, &b, &cfg).unwrap();
        assert_eq!(r.neighbors.len(), 32);
        assert!(r.neighbors.iter().all(|n| n.origin == Origin::Anchor));
        assert_eq!(bank.contrasts().len(), 1);
        assert_eq!(bank.contrasts()[0].score, r.refined);
        assert_eq!(r.reflected, gate(r.mapped, r.refined, cfg.epsilon));
    }

    #[test]
    fn perfect_comparator_recovers_latent_quality() {
        let w = world(120, 0.75, 7);
        let b = sim(&w.items, SimBackendConfig::default());
        let cfg = PipelineConfig { lambda: 0.0, ..Default::default() };
        let (mut bank, _) = build_anchor_memory(&labeled_pairs(&w.anchors).unwrap(), &b, &cfg).unwrap();
        for (i, q) in w.queries.iter().enumerate() {
            let mut fresh = bank.clone();
            let r = process_query(&q.image_ref(), &mut fresh, &b, &cfg).unwrap();
            assert!((r.refined - q.gt.unwrap()).abs() < 1e-6, "query {i}: {} vs {:?}", r.refined, q.gt);
        }
        let r = process_query(&w.queries[0].image_ref(), &mut bank, &b, &cfg).unwrap();
        for n in &r.neighbors {
            let qj = n.score;
            assert!((n.preference.unwrap() - normal_cdf(w.queries[0].gt.unwrap() - qj).clamp(1e-6, 1.0 - 1e-6)).abs() < 1e-15);
        }
    }

    struct Scripted {
        raw: f64,
        target: f64,
        fail_every: Option<usize>,
        calls: std::sync::atomic::AtomicUsize,
    }

    impl QualityBackend for Scripted {
        fn assess(&self, _: &ImageRef) -> Result<Assessment, BackendError> {
            Ok(Assessment { reasoning: "original".into(), raw_score: self.raw })
        }
        fn compare(&self, _: &ImageRef, b: &ImageRef) -> Result<f64, BackendError> {
            let c = self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            if self.fail_every.is_some_and(|k| c.is_multiple_of(k)) {
                return Err(BackendError::Transport("scripted failure".into()));
            }
            let s: f64 = b.payload.parse().unwrap();
            Ok(normal_cdf(self.target - s))
        }
        fn summarize(&self, r: &str) -> Result<String, BackendError> {
            Ok(r.to_string())
        }
        fn reflect(&self, _: &ImageRef, _: &str, _: f64, _: f64) -> Result<String, BackendError> {
            Ok("revised".into())
        }
        fn embed(&self, text: &str) -> Result<Embedding, BackendError> {
            let h = crate::backend::sim::fnv1a(text.as_bytes()) as f64;
            Ok(Embedding::normalized(vec![1.0, (h % 7.0) + 1.0, 0.5]).unwrap())
        }
    }

    fn scripted_bank(range: ScoreRange) -> MemoryBank {
        let mut bank = MemoryBank::new(16, LogisticParams::identity(range), range).unwrap();
        for (i, s) in [1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5].iter().enumerate() {
            let e = Embedding::normalized(vec![1.0, i as f64 * 0.1, 0.2]).unwrap();
            let img = ImageRef::new(format!("a{i}"), s.to_string());
            bank.insert_anchor(MemoryItem::new(img, "anchor".into(), e, *s, false)).unwrap();
        }
        bank.seal();
        bank
    }

    #[test]
    fn large_correction_reflects_and_stores_revision() {
        let cfg = PipelineConfig { lambda: 0.0, k: 8, ..Default::default() };
        let mut bank = scripted_bank(cfg.range);
        let b = Scripted { raw: 3.0, target: 3.8, fail_every: None, calls: 0.into() };
        let r = process_query(&ImageRef::new("q", "3.0"), &mut bank, &b, &cfg).unwrap();
        assert!((r.refined - 3.8).abs() < 1e-9);
        assert!(r.reflected);
        assert_eq!(bank.contrasts()[0].description, "revised");
        assert!(bank.contrasts()[0].reflected);

        let b = Scripted { raw: 3.0, target: 3.5, fail_every: None, calls: 0.into() };
        let r = process_query(&ImageRef::new("q2", "3.0"), &mut bank, &b, &cfg).unwrap();
        assert!(!r.reflected);
        assert_eq!(bank.get("q2").unwrap().description, "original");
    }

    #[test]
    fn failed_comparisons_are_dropped() {
        let cfg = PipelineConfig { lambda: 0.0, k: 8, ..Default::default() };
        let mut bank = scripted_bank(cfg.range);
        let b = Scripted { raw: 3.0, target: 2.2, fail_every: Some(3), calls: 0.into() };
        let r = process_query(&ImageRef::new("q", "3.0"), &mut bank, &b, &cfg).unwrap();
        let dropped = r.neighbors.iter().filter(|n| n.preference.is_none()).count();
        assert_eq!(r.neighbors.len(), 7);
        assert_eq!(dropped, 3);
        assert!((r.refined - 2.2).abs() < 1e-9);
    }

    #[test]
    fn zero_budget_keeps_mapped_score() {
        let w = world(80, 0.5, 8);
        let b = sim(&w.items, SimBackendConfig::default());
        let cfg = PipelineConfig { k: 0, ..Default::default() };
        let (mut bank, _) = build_anchor_memory(&labeled_pairs(&w.anchors).unwrap(), &b, &cfg).unwrap();
        let rows = run_records(&w.queries, &mut bank, &b, &cfg).unwrap();
        for r in rows.iter().map(|r| r.result.as_ref().unwrap()) {
            assert_eq!(r.refined, r.mapped);
            assert!(r.neighbors.is_empty() && !r.reflected);
        }
    }

    #[test]
    fn stream_is_causal_deterministic_and_schedule_independent() {
        let w = world(150, 0.4, 9);
        let b = sim(&w.items, SimBackendConfig::default());
        let cfg = PipelineConfig { capacity: 20, ..Default::default() };
        let (bank, _) = build_anchor_memory(&labeled_pairs(&w.anchors).unwrap(), &b, &cfg).unwrap();

        let run = |workers: usize| {
            let mut bank = bank.clone();
            let cfg = PipelineConfig { compare_workers: workers, ..cfg };
            crate::records::to_jsonl(&run_records(&w.queries, &mut bank, &b, &cfg).unwrap())
        };
        let a = run(1);
        assert_eq!(a, run(1));
        assert_eq!(a, run(4));

        let mut bank2 = bank.clone();
        let rows = run_records(&w.queries, &mut bank2, &b, &cfg).unwrap();
        assert!(causality_violations(&rows).is_empty());
        assert!(rows.iter().all(|r| r.error.is_none()));
        assert_eq!(bank2.contrasts().len(), 20);
        assert!(rows.iter().any(|r| r.result.as_ref().unwrap().neighbors.iter().any(|n| n.origin == Origin::Contrast)));
    }

    #[test]
    fn single_query_stream_equals_process_query() {
        let w = world(40, 0.5, 10);
        let b = sim(&w.items, SimBackendConfig::default());
        let cfg = PipelineConfig::default();
        let (bank, _) = build_anchor_memory(&labeled_pairs(&w.anchors).unwrap(), &b, &cfg).unwrap();
        let (mut b1, mut b2) = (bank.clone(), bank);
        let q = w.queries[0].image_ref();
        let one = process_query(&q, &mut b1, &b, &cfg).unwrap();
        let stream = run_stream(std::slice::from_ref(&q), &mut b2, &b, &cfg).unwrap();
        assert_eq!(stream.len(), 1);
        assert_eq!(stream.into_iter().next().unwrap().unwrap(), one);
        assert_eq!(b1, b2);
    }

    #[test]
    fn unknown_query_is_recorded_and_stream_continues() {
        let w = world(40, 0.5, 11);
        let b = sim(&w.items, SimBackendConfig::default());
        let cfg = PipelineConfig::default();
        let (mut bank, _) = build_anchor_memory(&labeled_pairs(&w.anchors).unwrap(), &b, &cfg).unwrap();
        let mut recs = w.queries.clone();
        recs.insert(1, StreamRecord { id: "ghost".into(), payload: "nowhere".into(), gt: Some(3.0) });
        let rows = run_records(&recs, &mut bank, &b, &cfg).unwrap();
        assert!(rows[1].error.as_deref().unwrap().contains("ghost"));
        assert_eq!(rows.iter().filter(|r| r.result.is_some()).count(), w.queries.len());
        assert_eq!(bank.contrasts().len(), w.queries.len());
    }

    #[test]
    fn invalid_epsilon_rejected() {
        let cfg = PipelineConfig { epsilon: 0.0, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(PipelineError::Config(_))));
    }
}
