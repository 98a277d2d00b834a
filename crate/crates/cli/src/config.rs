//! Flat `key = value` config files and flag/file/env precedence.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use clap::Args;
use merank_core::backend::{ExternalConfig, SimBackendConfig};
use merank_core::fusion::FusionMode;
use merank_core::pipeline::PipelineConfig;

use crate::CliError;

pub const CONFIG_ENV: &str = "MERANK_CONFIG";
pub const SEED_ENV: &str = "MERANK_SEED";

const KEYS: &[&str] = &[
    "backend",
    "bins",
    "capacity",
    "comparator_noise",
    "comparator_scale",
    "compare_workers",
    "embed_weight",
    "epsilon",
    "fusion",
    "k",
    "lambda",
    "levels",
    "prob_clip",
    "retries",
    "score_noise",
    "seed",
    "timeout_secs",
    "world",
];

pub type ConfigMap = BTreeMap<String, String>;

pub fn parse_config(text: &str, origin: &str) -> Result<ConfigMap, CliError> {
    let mut map = ConfigMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected `key = value`", i + 1)))?;
        let key = key.trim().replace('-', "_");
        if !KEYS.contains(&key.as_str()) {
            return Err(CliError::Usage(format!("{origin}:{}: unknown key `{key}`", i + 1)));
        }
        map.insert(key, value.trim().to_string());
    }
    Ok(map)
}

/// Reads the file named by `--config`, else by `MERANK_CONFIG`, else nothing.
pub fn load_config(flag: Option<&Path>) -> Result<(ConfigMap, Option<PathBuf>), CliError> {
    let path = match flag {
        Some(p) => Some(p.to_path_buf()),
        None => std::env::var_os(CONFIG_ENV).map(PathBuf::from),
    };
    match path {
        None => Ok((ConfigMap::new(), None)),
        Some(p) => {
            let text = std::fs::read_to_string(&p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            Ok((parse_config(&text, &p.display().to_string())?, Some(p)))
        }
    }
}

/// Tunables shared by every command that touches the pipeline or a backend.
/// Unset flags fall back to the config file, then to built-in defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct Tuning {
    /// Retrieval budget K (half anchors, half contrasts)
    #[arg(long)]
    pub k: Option<usize>,
    /// Score bins for stratified anchor retrieval
    #[arg(long)]
    pub bins: Option<usize>,
    /// Tether weight of the initial score
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Reflection gate
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Contrast memory capacity
    #[arg(long)]
    pub capacity: Option<usize>,
    /// Fusion solver: exact | closed
    #[arg(long)]
    pub fusion: Option<FusionMode>,
    /// Preference probability clip
    #[arg(long)]
    pub prob_clip: Option<f64>,
    /// Concurrent comparisons per query
    #[arg(long)]
    pub compare_workers: Option<usize>,
    /// Seed for retrieval and the simulated backend (env MERANK_SEED)
    #[arg(long)]
    pub seed: Option<u64>,
    /// `sim` or `external:<base-url>`
    #[arg(long)]
    pub backend: Option<String>,
    /// Synthetic world file for the simulated backend
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// Simulated output levels; 0 for continuous scores
    #[arg(long)]
    pub levels: Option<u32>,
    #[arg(long)]
    pub score_noise: Option<f64>,
    #[arg(long)]
    pub comparator_scale: Option<f64>,
    /// Beta concentration of the comparator perturbation; 0 disables it
    #[arg(long)]
    pub comparator_noise: Option<f64>,
    /// Weight of the quality block in simulated embeddings
    #[arg(long)]
    pub embed_weight: Option<f64>,
    /// External backend request timeout
    #[arg(long)]
    pub timeout_secs: Option<f64>,
    /// External backend retries after transport failures
    #[arg(long)]
    pub retries: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendChoice {
    Sim,
    External(String),
}

impl FromStr for BackendChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            _ if s == "sim" => Ok(Self::Sim),
            Some(("external", url)) if !url.is_empty() => Ok(Self::External(url.to_string())),
            _ => Err(format!("unknown backend `{s}` (expected sim or external:<url>)")),
        }
    }
}

impl std::fmt::Display for BackendChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Sim => f.write_str("sim"),
            Self::External(url) => write!(f, "external:{url}"),
        }
    }
}

/// Fully resolved settings.
#[derive(Debug, Clone)]
pub struct Effective {
    pub pipeline: PipelineConfig,
    pub sim: SimBackendConfig,
    pub backend: BackendChoice,
    pub world: Option<PathBuf>,
    pub timeout: Duration,
    pub retries: u32,
}

fn pick<T: FromStr>(flag: Option<T>, file: &ConfigMap, key: &str) -> Result<Option<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    if flag.is_some() {
        return Ok(flag);
    }
    match file.get(key) {
        None => Ok(None),
        Some(v) => v.parse().map(Some).map_err(|e| CliError::Usage(format!("config key `{key}` = `{v}`: {e}"))),
    }
}

impl Tuning {
    /// Precedence: flag, then `MERANK_SEED` (seed only), then config file, then defaults.
    pub fn resolve(&self, file: &ConfigMap) -> Result<Effective, CliError> {
        let mut p = PipelineConfig::default();
        let mut sim = SimBackendConfig::default();
        let external = ExternalConfig::new("");

        let env_seed = match std::env::var(SEED_ENV) {
            Ok(v) => Some(v.trim().parse::<u64>().map_err(|e| CliError::Usage(format!("{SEED_ENV}=`{v}`: {e}")))?),
            Err(_) => None,
        };
        let seed = pick(self.seed.or(env_seed), file, "seed")?.unwrap_or(0);
        p.seed = seed;
        sim.seed = seed;

        p.k = pick(self.k, file, "k")?.unwrap_or(p.k);
        p.bins = pick(self.bins, file, "bins")?.unwrap_or(p.bins);
        p.lambda = pick(self.lambda, file, "lambda")?.unwrap_or(p.lambda);
        p.epsilon = pick(self.epsilon, file, "epsilon")?.unwrap_or(p.epsilon);
        p.capacity = pick(self.capacity, file, "capacity")?.unwrap_or(p.capacity);
        p.fusion = pick(self.fusion, file, "fusion")?.unwrap_or(p.fusion);
        p.prob_clip = pick(self.prob_clip, file, "prob_clip")?.unwrap_or(p.prob_clip);
        p.compare_workers = pick(self.compare_workers, file, "compare_workers")?.unwrap_or(p.compare_workers);
        sim.prob_clip = p.prob_clip;

        if let Some(l) = pick(self.levels, file, "levels")? {
            sim.quantization_levels = (l > 0).then_some(l);
        }
        sim.score_noise = pick(self.score_noise, file, "score_noise")?.unwrap_or(sim.score_noise);
        sim.comparator_scale = pick(self.comparator_scale, file, "comparator_scale")?.unwrap_or(sim.comparator_scale);
        sim.comparator_noise = pick(self.comparator_noise, file, "comparator_noise")?.unwrap_or(sim.comparator_noise);
        sim.embed_quality_weight = pick(self.embed_weight, file, "embed_weight")?.unwrap_or(sim.embed_quality_weight);

        let backend = match pick(self.backend.clone(), file, "backend")? {
            None => BackendChoice::Sim,
            Some(s) => s.parse().map_err(CliError::Usage)?,
        };
        let world = pick(self.world.clone(), file, "world")?;
        let timeout_secs = pick(self.timeout_secs, file, "timeout_secs")?.unwrap_or(external.timeout.as_secs_f64());
        if !(timeout_secs > 0.0) || !timeout_secs.is_finite() {
            return Err(CliError::Usage(format!("timeout_secs must be > 0, got {timeout_secs}")));
        }
        let retries = pick(self.retries, file, "retries")?.unwrap_or(external.retries);

        p.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        sim.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(Effective { pipeline: p, sim, backend, world, timeout: Duration::from_secs_f64(timeout_secs), retries })
    }
}

impl Effective {
    /// Flags that reproduce these settings without any config file or environment.
    pub fn to_args(&self) -> Vec<String> {
        let p = &self.pipeline;
        let s = &self.sim;
        let mut out: Vec<(&str, String)> = vec![
            ("k", p.k.to_string()),
            ("bins", p.bins.to_string()),
            ("lambda", p.lambda.to_string()),
            ("epsilon", p.epsilon.to_string()),
            ("capacity", p.capacity.to_string()),
            ("fusion", p.fusion.to_string()),
            ("prob-clip", p.prob_clip.to_string()),
            ("compare-workers", p.compare_workers.to_string()),
            ("seed", p.seed.to_string()),
            ("backend", self.backend.to_string()),
            ("levels", s.quantization_levels.unwrap_or(0).to_string()),
            ("score-noise", s.score_noise.to_string()),
            ("comparator-scale", s.comparator_scale.to_string()),
            ("comparator-noise", s.comparator_noise.to_string()),
            ("embed-weight", s.embed_quality_weight.to_string()),
            ("timeout-secs", self.timeout.as_secs_f64().to_string()),
            ("retries", self.retries.to_string()),
        ];
        if let Some(w) = &self.world {
            out.push(("world", w.display().to_string()));
        }
        out.into_iter().flat_map(|(k, v)| [format!("--{k}"), v]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_blanks_and_dashes() {
        let m = parse_config("# defaults\nk = 8\n\nprob-clip=1e-5  # tighter\n", "t").unwrap();
        assert_eq!(m.get("k").map(String::as_str), Some("8"));
        assert_eq!(m.get("prob_clip").map(String::as_str), Some("1e-5"));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_lines() {
        assert!(matches!(parse_config("kk = 1", "t"), Err(CliError::Usage(_))));
        assert!(matches!(parse_config("k 1", "t"), Err(CliError::Usage(_))));
    }

    #[test]
    fn flags_override_file() {
        let file = parse_config("k = 8\nlambda = 0.5\nfusion = closed\nlevels = 0", "t").unwrap();
        let t = Tuning { k: Some(4), ..Default::default() };
        let e = t.resolve(&file).unwrap();
        assert_eq!(e.pipeline.k, 4);
        assert_eq!(e.pipeline.lambda, 0.5);
        assert_eq!(e.pipeline.fusion, FusionMode::ClosedForm);
        assert_eq!(e.sim.quantization_levels, None);
    }

    #[test]
    fn invalid_values_are_usage_errors() {
        let file = parse_config("epsilon = 0", "t").unwrap();
        assert!(matches!(Tuning::default().resolve(&file), Err(CliError::Usage(_))));
        let t = Tuning { backend: Some("gpu".into()), ..Default::default() };
        assert!(matches!(t.resolve(&ConfigMap::new()), Err(CliError::Usage(_))));
    }

    #[test]
    fn backend_choice_round_trips() {
        for s in ["sim", "external:http://127.0.0.1:9000"] {
            assert_eq!(s.parse::<BackendChoice>().unwrap().to_string(), s);
        }
        assert!("external:".parse::<BackendChoice>().is_err());
    }
}
