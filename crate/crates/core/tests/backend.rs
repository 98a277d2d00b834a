use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use merank_core::backend::protocol::{self, DescriptionResponse, Reply, SummarizeRequest};
use merank_core::backend::server::ProtocolServer;
use merank_core::backend::{
    BackendError, ExternalBackend, ExternalConfig, ImageRef, QualityBackend, SimBackend, SimBackendConfig,
};
use merank_core::metrics::{histogram, HistogramSpec};
use merank_core::pipeline::{build_anchor_memory, labeled_pairs, run_records, PipelineConfig};
use merank_core::records::to_jsonl;
use merank_core::retrieval::cosine;
use merank_core::synth::{generate, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn world(n: usize, seed: u64) -> merank_core::synth::SynthWorld {
    generate(&SynthConfig { n, seed, anchor_frac: 0.5, ..Default::default() })
}

fn client(url: &str) -> ExternalBackend {
    let mut cfg = ExternalConfig::new(url);
    cfg.timeout = Duration::from_secs(5);
    ExternalBackend::new(cfg)
}

#[test]
fn summarize_echo_loopback() {
    let server = ProtocolServer::spawn_handler("127.0.0.1:0", 1, |path, body| {
        assert_eq!(path, protocol::SUMMARIZE);
        let req: SummarizeRequest = serde_json::from_str(body).unwrap();
        Reply { status: 200, body: serde_json::to_string(&DescriptionResponse { description: req.reasoning }).unwrap() }
    })
    .unwrap();
    let b = client(&server.url());
    let text = "Overall quality level 3 (fair). Content: t01+, t07-.\n\"quoted\" ünïcode";
    assert_eq!(b.summarize(text).unwrap(), text);
}

#[test]
fn served_sim_matches_in_process_sim() {
    let w = world(60, 3);
    let sim = Arc::new(SimBackend::new(SimBackendConfig { seed: 9, ..Default::default() }, w.items.clone()).unwrap());
    let server = ProtocolServer::spawn("127.0.0.1:0", Arc::clone(&sim), 2).unwrap();
    let remote = client(&server.url());

    let a = w.anchors[0].image_ref();
    let b = w.anchors[1].image_ref();
    assert_eq!(remote.assess(&a).unwrap(), sim.assess(&a).unwrap());
    assert_eq!(remote.compare(&a, &b).unwrap(), sim.compare(&a, &b).unwrap());
    let r = sim.assess(&a).unwrap().reasoning;
    assert_eq!(remote.summarize(&r).unwrap(), sim.summarize(&r).unwrap());
    assert_eq!(remote.reflect(&a, &r, 2.0, 4.0).unwrap(), sim.reflect(&a, &r, 2.0, 4.0).unwrap());
    let d = sim.summarize(&r).unwrap();
    assert_eq!(remote.embed(&d).unwrap(), sim.embed(&d).unwrap());

    // whole pipeline over the wire reproduces the in-process run byte for byte
    let cfg = PipelineConfig { k: 8, compare_workers: 3, ..Default::default() };
    let (bank_local, _) = build_anchor_memory(&labeled_pairs(&w.anchors).unwrap(), sim.as_ref(), &cfg).unwrap();
    let (bank_remote, _) = build_anchor_memory(&labeled_pairs(&w.anchors).unwrap(), &remote, &cfg).unwrap();
    assert_eq!(bank_local.to_bytes(), bank_remote.to_bytes());
    let (mut l, mut r) = (bank_local, bank_remote);
    let rows_l = run_records(&w.queries, &mut l, sim.as_ref(), &cfg).unwrap();
    let rows_r = run_records(&w.queries, &mut r, &remote, &cfg).unwrap();
    assert_eq!(to_jsonl(&rows_l), to_jsonl(&rows_r));
}

#[test]
fn unknown_image_maps_to_lookup_error() {
    let w = world(10, 1);
    let sim = Arc::new(SimBackend::new(SimBackendConfig::default(), w.items).unwrap());
    let server = ProtocolServer::spawn("127.0.0.1:0", sim, 1).unwrap();
    let remote = client(&server.url());
    match remote.assess(&ImageRef::new("x", "missing")) {
        Err(BackendError::UnknownImage(_)) => {}
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(remote.embed("  "), Err(BackendError::EmptyText)));
}

#[test]
fn out_of_range_preference_is_a_protocol_error() {
    for bad in ["0.0", "1.0", "1.5", "-0.2"] {
        let body = format!(r#"{{"p_a":{bad}}}"#);
        let server =
            ProtocolServer::spawn_handler("127.0.0.1:0", 1, move |_, _| Reply { status: 200, body: body.clone() }).unwrap();
        let remote = client(&server.url());
        let r = remote.compare(&ImageRef::new("a", "a"), &ImageRef::new("b", "b"));
        assert!(matches!(r, Err(BackendError::Protocol(_))), "p_a = {bad}: {r:?}");
    }
    let server = ProtocolServer::spawn_handler("127.0.0.1:0", 1, |_, _| Reply { status: 200, body: r#"{"p_a":0.9999999999}"#.into() })
        .unwrap();
    let p = client(&server.url()).compare(&ImageRef::new("a", "a"), &ImageRef::new("b", "b")).unwrap();
    assert_eq!(p, 1.0 - 1e-6);
}

#[test]
fn server_errors_and_garbage_are_protocol_errors() {
    let server = ProtocolServer::spawn_handler("127.0.0.1:0", 1, |path, _| match path {
        "/assess" => Reply { status: 500, body: r#"{"error":"boom"}"#.into() },
        _ => Reply { status: 200, body: "not json".into() },
    })
    .unwrap();
    let remote = client(&server.url());
    assert!(matches!(remote.assess(&ImageRef::new("a", "a")), Err(BackendError::Protocol(m)) if m.contains("500")));
    assert!(matches!(remote.summarize("x"), Err(BackendError::Protocol(_))));
}

#[test]
fn transport_failure_after_retries() {
    // bind then drop to get a port with nothing listening
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut cfg = ExternalConfig::new(format!("http://127.0.0.1:{port}/"));
    cfg.retries = 1;
    cfg.timeout = Duration::from_secs(2);
    let remote = ExternalBackend::new(cfg);
    assert!(matches!(remote.summarize("x"), Err(BackendError::Transport(_))));
}

#[test]
fn failed_compares_over_the_wire_degrade_gracefully() {
    let w = world(40, 5);
    let sim = Arc::new(SimBackend::new(SimBackendConfig::default(), w.items.clone()).unwrap());
    let calls = Arc::new(AtomicUsize::new(0));
    let (s2, c2) = (Arc::clone(&sim), Arc::clone(&calls));
    let server = ProtocolServer::spawn_handler("127.0.0.1:0", 1, move |path, body| {
        if path == protocol::COMPARE && c2.fetch_add(1, Ordering::SeqCst) % 4 == 0 {
            return Reply { status: 503, body: r#"{"error":"busy"}"#.into() };
        }
        protocol::dispatch(s2.as_ref(), path, body)
    })
    .unwrap();
    let remote = client(&server.url());
    let cfg = PipelineConfig { k: 8, ..Default::default() };
    let (mut bank, _) = build_anchor_memory(&labeled_pairs(&w.anchors).unwrap(), &remote, &cfg).unwrap();
    let rows = run_records(&w.queries, &mut bank, &remote, &cfg).unwrap();
    assert!(rows.iter().all(|r| r.error.is_none()));
    let dropped: usize = rows
        .iter()
        .map(|r| r.result.as_ref().unwrap().neighbors.iter().filter(|n| n.preference.is_none()).count())
        .sum();
    assert!(dropped > 0);
}

#[test]
fn simulated_scores_collapse_onto_levels() {
    let w = generate(&SynthConfig { n: 500, seed: 12, anchor_frac: 0.0, ..Default::default() });
    let sim = SimBackend::new(SimBackendConfig::default(), w.items.clone()).unwrap();
    let raw: Vec<f64> = w.queries.iter().map(|q| sim.assess(&q.image_ref()).unwrap().raw_score).collect();
    let latent: Vec<f64> = w.items.iter().map(|i| i.q).collect();
    let spec = HistogramSpec::default();
    let occupied = |v: &[f64]| histogram(v, &spec).unwrap().iter().filter(|p| **p > 0.0).count();
    assert!(occupied(&raw) <= 5);
    assert!(occupied(&latent) >= 50);
}

#[test]
fn embedding_neighbors_share_quality() {
    let w = generate(&SynthConfig { n: 400, seed: 13, anchor_frac: 0.0, ..Default::default() });
    let sim = SimBackend::new(SimBackendConfig { embed_quality_weight: 0.5, ..Default::default() }, w.items.clone())
        .unwrap();
    let embs: Vec<_> = w
        .queries
        .iter()
        .map(|q| sim.embed(&sim.summarize(&sim.assess(&q.image_ref()).unwrap().reasoning).unwrap()).unwrap())
        .collect();
    let q: Vec<f64> = w.items.iter().map(|i| i.q).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut near, mut random) = (0.0, 0.0);
    for i in 0..100 {
        let mut sims: Vec<(f64, usize)> =
            (0..embs.len()).filter(|&j| j != i).map(|j| (cosine(&embs[i], &embs[j]).unwrap(), j)).collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        near += sims[..8].iter().map(|&(_, j)| (q[i] - q[j]).abs()).sum::<f64>() / 8.0;
        random += (0..8).map(|_| (q[i] - q[rng.random_range(0..q.len())]).abs()).sum::<f64>() / 8.0;
    }
    assert!(near < random, "near {near} vs random {random}");
}
