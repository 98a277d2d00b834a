use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use merank_core::backend::{ExternalBackend, ExternalConfig, QualityBackend, SimBackend, SyntheticItem};
use merank_core::memory::MemoryBank;
use merank_core::metrics::{order_robustness, wavg, EvalReport, HistogramSpec};
use merank_core::pipeline::{
    build_anchor_memory, evaluate_results, labeled_pairs, run_records, PipelineError, ResultsEval,
};
use merank_core::records::{read_jsonl, write_jsonl, ResultRecord, StreamRecord};
use merank_core::synth::{generate, SynthConfig};
use merank_core::backend::server::ProtocolServer;
use serde::Serialize;
use serde_json::json;

use crate::config::{load_config, BackendChoice, ConfigMap, Effective, SEED_ENV};
use crate::manifest::{manifest_path, read_manifest, sha256_file, Recorder};
use crate::{Cli, CliError, Command};

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let config_flag = cli.config.clone();
    let config = || load_config(config_flag.as_deref());
    match cli.command {
        Command::Synth { n, seed, anchor_frac, content_dim, out } => {
            let (file, _) = config()?;
            synth(n, seed, anchor_frac, content_dim, &out, &file)
        }
        Command::BuildAnchors { dataset, out, tuning } => {
            let (file, origin) = config()?;
            build_anchors(&dataset, &out, &tuning.resolve(&file)?, origin)
        }
        Command::Run { stream, am, out, cm_in, cm_out, tuning } => {
            let (file, origin) = config()?;
            run(&stream, &am, &out, cm_in.as_deref(), cm_out.as_deref(), &tuning.resolve(&file)?, origin)
        }
        Command::Eval { results, report, hist_bins } => eval(&results, report.as_deref(), hist_bins),
        Command::PermuteEval { stream, am, runs, report, hist_bins, tuning } => {
            let (file, origin) = config()?;
            permute_eval(&stream, &am, runs, &report, hist_bins, &tuning.resolve(&file)?, origin)
        }
        Command::ServeSim { addr, workers, tuning } => {
            let (file, _) = config()?;
            serve_sim(&addr, workers, &tuning.resolve(&file)?)
        }
        Command::Replay { manifest } => replay(&manifest),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

fn load_bank(path: &Path) -> Result<MemoryBank, CliError> {
    MemoryBank::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn save_bank(bank: &MemoryBank, path: &Path) -> Result<(), CliError> {
    bank.save(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn make_backend(e: &Effective) -> Result<Box<dyn QualityBackend>, CliError> {
    match &e.backend {
        BackendChoice::Sim => {
            let world = e
                .world
                .as_ref()
                .ok_or_else(|| CliError::Usage("the sim backend needs --world <world.jsonl>".into()))?;
            let items: Vec<SyntheticItem> = read_jsonl(world)?;
            let sim = SimBackend::new(e.sim, items).map_err(|err| CliError::Data(format!("{}: {err}", world.display())))?;
            Ok(Box::new(sim))
        }
        BackendChoice::External(url) => {
            let mut cfg = ExternalConfig::new(url.as_str());
            cfg.timeout = e.timeout;
            cfg.retries = e.retries;
            cfg.prob_clip = e.pipeline.prob_clip;
            Ok(Box::new(ExternalBackend::new(cfg)))
        }
    }
}

fn recorder(command: &str, mut args: Vec<String>, e: &Effective, origin: Option<PathBuf>) -> Recorder {
    args.extend(e.to_args());
    let mut rec = Recorder::start(command, args);
    let m = rec.manifest_mut();
    m.pipeline = Some(e.pipeline);
    m.backend = Some(e.backend.to_string());
    if e.backend == BackendChoice::Sim {
        m.sim = Some(e.sim);
    }
    m.config_file = origin.map(|p| p.display().to_string());
    if let Some(w) = &e.world {
        rec.input("world", w);
    }
    rec
}

fn path_arg(flag: &str, p: &Path) -> [String; 2] {
    [format!("--{flag}"), p.display().to_string()]
}

fn synth(
    n: usize,
    seed: Option<u64>,
    anchor_frac: f64,
    content_dim: usize,
    out: &Path,
    file: &ConfigMap,
) -> Result<(), CliError> {
    if n == 0 || content_dim == 0 {
        return Err(CliError::Usage("--n and --content-dim must be positive".into()));
    }
    if !(0.0..=1.0).contains(&anchor_frac) {
        return Err(CliError::Usage(format!("--anchor-frac must lie in [0, 1], got {anchor_frac}")));
    }
    let seed = match seed {
        Some(s) => s,
        None => {
            let env = std::env::var(SEED_ENV).ok().or_else(|| file.get("seed").cloned());
            match env {
                Some(v) => v.trim().parse().map_err(|e| CliError::Usage(format!("seed `{v}`: {e}")))?,
                None => 0,
            }
        }
    };
    let args = [
        vec!["synth".to_string(), "--n".into(), n.to_string(), "--seed".into(), seed.to_string()],
        vec!["--anchor-frac".into(), anchor_frac.to_string(), "--content-dim".into(), content_dim.to_string()],
        path_arg("out", out).to_vec(),
    ]
    .concat();
    let mut rec = Recorder::start("synth", args);
    let world = generate(&SynthConfig { n, seed, anchor_frac, content_dim });

    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let (w, a, q) = (out.join("world.jsonl"), out.join("anchors.jsonl"), out.join("queries.jsonl"));
    write_jsonl(&w, &world.items)?;
    write_jsonl(&a, &world.anchors)?;
    write_jsonl(&q, &world.queries)?;
    rec.manifest_mut().summary = json!({
        "items": world.items.len(),
        "anchors": world.anchors.len(),
        "queries": world.queries.len(),
        "seed": seed,
    });
    rec.finish(&[&w, &a, &q], &out.join("manifest.json"))?;
    println!("synth: {} items ({} anchors, {} queries) -> {}", world.items.len(), world.anchors.len(), world.queries.len(), out.display());
    Ok(())
}

fn build_anchors(dataset: &Path, out: &Path, e: &Effective, origin: Option<PathBuf>) -> Result<(), CliError> {
    let args = [vec!["build-anchors".to_string()], path_arg("dataset", dataset).to_vec(), path_arg("out", out).to_vec()].concat();
    let mut rec = recorder("build-anchors", args, e, origin);
    rec.input("dataset", dataset);
    let records: Vec<StreamRecord> = read_jsonl(dataset)?;
    let labeled = labeled_pairs(&records)?;
    let backend = make_backend(e)?;
    let (bank, traces) = build_anchor_memory(&labeled, backend.as_ref(), &e.pipeline)?;
    save_bank(&bank, out)?;

    let reflected = traces.iter().filter(|t| t.reflected).count();
    let (raw_lo, raw_hi) = traces
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| (lo.min(t.raw), hi.max(t.raw)));
    rec.manifest_mut().summary = json!({
        "anchors": bank.anchors().len(),
        "reflected": reflected,
        "betas": bank.logistic().betas(),
        "raw_range": [raw_lo, raw_hi],
    });
    rec.finish(&[out], &manifest_path(out))?;
    println!("build-anchors: {} anchors, {reflected} reflected -> {}", bank.anchors().len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run(
    stream: &Path,
    am: &Path,
    out: &Path,
    cm_in: Option<&Path>,
    cm_out: Option<&Path>,
    e: &Effective,
    origin: Option<PathBuf>,
) -> Result<(), CliError> {
    let mut args = [vec!["run".to_string()], path_arg("stream", stream).to_vec(), path_arg("am", am).to_vec()].concat();
    args.extend(path_arg("out", out));
    if let Some(p) = cm_in {
        args.extend(path_arg("cm-in", p));
    }
    if let Some(p) = cm_out {
        args.extend(path_arg("cm-out", p));
    }
    let mut rec = recorder("run", args, e, origin);
    rec.input("stream", stream);
    rec.input("am", am);

    let records: Vec<StreamRecord> = read_jsonl(stream)?;
    let mut bank = load_bank(am)?;
    if !bank.contrasts().is_empty() {
        return Err(CliError::Data(format!("{}: anchor bank already holds contrast items", am.display())));
    }
    if let Some(p) = cm_in {
        rec.input("cm_in", p);
        let cm = load_bank(p)?;
        bank.absorb_contrasts(cm).map_err(|err| CliError::Data(format!("{}: {err}", p.display())))?;
    }
    let backend = make_backend(e)?;
    let rows = run_records(&records, &mut bank, backend.as_ref(), &e.pipeline)?;
    write_jsonl(out, &rows)?;
    let mut outputs = vec![out];
    if let Some(p) = cm_out {
        save_bank(&bank.contrast_only(), p)?;
        outputs.push(p);
    }

    let done: Vec<_> = rows.iter().filter_map(|r| r.result.as_ref()).collect();
    let failed = rows.len() - done.len();
    let ms: Vec<f64> = done.iter().map(|r| r.wall_time.0.as_secs_f64() * 1e3).collect();
    rec.manifest_mut().summary = json!({
        "queries": rows.len(),
        "failed": failed,
        "reflected": done.iter().filter(|r| r.reflected).count(),
        "evicted": done.iter().map(|r| r.evicted.len()).sum::<usize>(),
        "contrast_size": bank.contrasts().len(),
        "mean_query_ms": if ms.is_empty() { 0.0 } else { ms.iter().sum::<f64>() / ms.len() as f64 },
        "max_query_ms": ms.iter().copied().fold(0.0, f64::max),
    });
    rec.finish(&outputs, &manifest_path(out))?;
    println!("run: {} queries, {failed} failed -> {}", rows.len(), out.display());
    if failed == rows.len() {
        let first = rows.iter().find_map(|r| r.error.clone()).unwrap_or_default();
        return Err(CliError::Backend(format!("every query failed; first error: {first}")));
    }
    Ok(())
}

#[derive(Serialize)]
struct FileEval {
    path: String,
    #[serde(flatten)]
    eval: ResultsEval,
}

#[derive(Serialize)]
struct Headline {
    plcc: f64,
    srcc: f64,
    js: f64,
    entropy: f64,
    effective_bins: f64,
}

fn weighted(reports: &[&EvalReport]) -> Result<Headline, CliError> {
    let sizes: Vec<usize> = reports.iter().map(|r| r.n).collect();
    let avg = |f: fn(&EvalReport) -> f64| {
        let v: Vec<f64> = reports.iter().map(|r| f(r)).collect();
        wavg(&v, &sizes).map_err(|e| CliError::Data(e.to_string()))
    };
    Ok(Headline {
        plcc: avg(|r| r.plcc)?,
        srcc: avg(|r| r.srcc)?,
        js: avg(|r| r.js)?,
        entropy: avg(|r| r.entropy)?,
        effective_bins: avg(|r| r.effective_bins)?,
    })
}

fn eval(results: &[PathBuf], report: Option<&Path>, hist_bins: usize) -> Result<(), CliError> {
    let spec = HistogramSpec { bins: hist_bins, ..Default::default() };
    let mut files = Vec::with_capacity(results.len());
    for path in results {
        let rows: Vec<ResultRecord> = read_jsonl(path)?;
        let eval = evaluate_results(&rows, &spec).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        files.push(FileEval { path: path.display().to_string(), eval });
    }
    let base: Vec<&EvalReport> = files.iter().map(|f| &f.eval.baseline).collect();
    let refined: Vec<&EvalReport> = files.iter().map(|f| &f.eval.refined).collect();
    let doc = json!({
        "hist_bins": hist_bins,
        "files": files,
        "wavg": { "baseline": weighted(&base)?, "refined": weighted(&refined)? },
    });
    let text = serde_json::to_string_pretty(&doc).expect("report serializes") + "\n";
    match report {
        None => print!("{text}"),
        Some(p) => {
            let args = [vec!["eval".to_string()], results.iter().map(|p| p.display().to_string()).collect()].concat();
            let mut rec = Recorder::start("eval", args);
            rec.manifest_mut().args.extend(path_arg("report", p));
            rec.manifest_mut().args.extend(["--hist-bins".to_string(), hist_bins.to_string()]);
            for (i, r) in results.iter().enumerate() {
                rec.input(&format!("results_{i}"), r);
            }
            std::fs::write(p, &text).map_err(io_err(p))?;
            rec.manifest_mut().summary = doc["wavg"].clone();
            rec.finish(&[p], &manifest_path(p))?;
            let mut stdout = std::io::stdout().lock();
            let _ = writeln!(stdout, "{:<40} {:>6} {:>9} {:>9} {:>9} {:>9}", "file", "n", "srcc", "srcc*", "js", "js*");
            for f in &files {
                let _ = writeln!(
                    stdout,
                    "{:<40} {:>6} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                    f.path, f.eval.n, f.eval.baseline.srcc, f.eval.refined.srcc, f.eval.baseline.js, f.eval.refined.js
                );
            }
            let _ = writeln!(stdout, "(* refined)  report -> {}", p.display());
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn permute_eval(
    stream: &Path,
    am: &Path,
    runs: usize,
    report: &Path,
    hist_bins: usize,
    e: &Effective,
    origin: Option<PathBuf>,
) -> Result<(), CliError> {
    if runs < 2 {
        return Err(CliError::Usage(format!("--runs must be at least 2, got {runs}")));
    }
    let mut args = [vec!["permute-eval".to_string()], path_arg("stream", stream).to_vec(), path_arg("am", am).to_vec()].concat();
    args.extend(["--runs".to_string(), runs.to_string()]);
    args.extend(path_arg("report", report));
    args.extend(["--hist-bins".to_string(), hist_bins.to_string()]);
    let mut rec = recorder("permute-eval", args, e, origin);
    rec.input("stream", stream);
    rec.input("am", am);

    let spec = HistogramSpec { bins: hist_bins, ..Default::default() };
    let records: Vec<StreamRecord> = read_jsonl(stream)?;
    let bank = load_bank(am)?;
    let backend = make_backend(e)?;
    let seeds: Vec<u64> = (1..=runs as u64).map(|i| e.pipeline.seed.wrapping_add(i)).collect();
    let robustness = order_robustness(&records, &seeds, |order| -> Result<EvalReport, PipelineError> {
        let mut b = bank.clone();
        let rows = run_records(order, &mut b, backend.as_ref(), &e.pipeline)?;
        info!("permutation done: {} rows", rows.len());
        Ok(evaluate_results(&rows, &spec)?.refined)
    })?;
    let doc = json!({ "runs": runs, "hist_bins": hist_bins, "robustness": robustness });
    std::fs::write(report, serde_json::to_string_pretty(&doc).expect("report serializes") + "\n").map_err(io_err(report))?;
    rec.manifest_mut().summary = json!({
        "srcc": robustness.srcc,
        "plcc": robustness.plcc,
        "js": robustness.js,
        "effective_bins": robustness.effective_bins,
    });
    rec.finish(&[report], &manifest_path(report))?;
    println!(
        "permute-eval: {runs} runs, SRCC {:.4} ± {:.4}, PLCC {:.4} ± {:.4} -> {}",
        robustness.srcc.mean,
        robustness.srcc.std,
        robustness.plcc.mean,
        robustness.plcc.std,
        report.display()
    );
    Ok(())
}

fn serve_sim(addr: &str, workers: usize, e: &Effective) -> Result<(), CliError> {
    if e.backend != BackendChoice::Sim {
        return Err(CliError::Usage("serve-sim only serves the sim backend".into()));
    }
    let world = e
        .world
        .as_ref()
        .ok_or_else(|| CliError::Usage("serve-sim needs --world <world.jsonl>".into()))?;
    let items: Vec<SyntheticItem> = read_jsonl(world)?;
    let sim = SimBackend::new(e.sim, items).map_err(|err| CliError::Data(format!("{}: {err}", world.display())))?;
    let server = ProtocolServer::spawn(addr, std::sync::Arc::new(sim), workers)
        .map_err(|err| CliError::Usage(format!("cannot listen on {addr}: {err}")))?;
    println!("listening on {}", server.url());
    let _ = std::io::stdout().flush();
    server.join();
    Ok(())
}

fn replay(path: &Path) -> Result<(), CliError> {
    let recorded = read_manifest(path)?;
    if recorded.outputs.is_empty() {
        return Err(CliError::Data(format!("{}: manifest lists no outputs", path.display())));
    }
    let argv = std::iter::once(recorded.tool.clone()).chain(recorded.args.iter().cloned());
    let cli = <Cli as clap::Parser>::try_parse_from(argv)
        .map_err(|e| CliError::Data(format!("{}: recorded arguments do not parse: {e}", path.display())))?;
    if matches!(cli.command, Command::Replay { .. }) {
        return Err(CliError::Data("refusing to replay a replay".into()));
    }
    execute(Cli { config: None, ..cli })?;

    let mut mismatched = Vec::new();
    for (out, want) in &recorded.outputs {
        let got = sha256_file(Path::new(out))?;
        if &got != want {
            mismatched.push(format!("{out}: recorded {want}, replay produced {got}"));
        }
    }
    if !mismatched.is_empty() {
        return Err(CliError::Data(format!("replay diverged:\n  {}", mismatched.join("\n  "))));
    }
    println!("replay: {} output(s) reproduced bit-identically", recorded.outputs.len());
    Ok(())
}
