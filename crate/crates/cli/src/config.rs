//! Config file sections. Each section is also a clap argument group, so
//! every key has exactly one flag; flags win over the file.

use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::Args;
use deragec::correction::{PipelineMode, RunConfig};
use deragec::filtering::{FilterMethod, FilterSpec};
use deragec::llm::{BackendKind, BackendSpec, GenParams};
use serde::Deserialize;

use crate::error::{CliError, CliResult};

/// Credential variable used when neither the file nor a flag names one.
pub const DEFAULT_API_KEY_ENV: &str = "DERAGEC_API_KEY";

macro_rules! overlay {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl $ty {
            /// Fields set in `self` (flags) win over `file`.
            pub fn overlay(self, file: Self) -> Self {
                Self { $($field: self.$field.or(file.$field)),* }
            }
        }
    };
}

#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    /// Gazetteer JSONL ({"surface", "definition"?, "source"?} per line)
    #[arg(long, global = true, value_name = "FILE")]
    pub gazetteer: Option<PathBuf>,
    /// Phonetic index built by `build-index`; preferred over --gazetteer
    #[arg(long, global = true, value_name = "FILE")]
    pub index: Option<PathBuf>,
    /// N-best dataset JSONL
    #[arg(long, global = true, value_name = "FILE")]
    pub dataset: Option<PathBuf>,
    /// Rationale-augmented few-shot pool JSONL from `synth-rationales`
    #[arg(long, global = true, value_name = "FILE")]
    pub fewshot_pool: Option<PathBuf>,
    /// Extra entity spellings for the gazetteer tagger, one per line
    #[arg(long, global = true, value_name = "FILE")]
    pub mentions: Option<PathBuf>,
    /// Write every model reply of a run as a replayable transcript
    #[arg(long, global = true, value_name = "FILE")]
    pub record: Option<PathBuf>,
    /// Directory that relative --out paths are resolved against
    #[arg(long, global = true, value_name = "DIR")]
    pub output_dir: Option<PathBuf>,
}
overlay!(PathsSection { gazetteer, index, dataset, fewshot_pool, mentions, record, output_dir });

#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Pipeline mode
    #[arg(long, global = true, value_name = "asr|gec|ragec|deragec|oracle")]
    pub mode: Option<PipelineMode>,
    /// Candidates retrieved per entity mention [default: 10]
    #[arg(long, global = true, value_name = "N")]
    pub k: Option<usize>,
    /// In-context examples per prompt [default: 5]
    #[arg(long, global = true, value_name = "N")]
    pub fewshot_count: Option<usize>,
    /// Seed for few-shot sampling and synthetic data [default: 0]
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Upper bound on MCQ options [default: 26]
    #[arg(long, global = true, value_name = "N")]
    pub max_options: Option<usize>,
    /// Re-asks after an unparseable answer [default: 2]
    #[arg(long, global = true, value_name = "N")]
    pub retries: Option<u32>,
    /// Worker threads; 0 means one per core [default: 1]
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    /// Sampling temperature [default: 0]
    #[arg(long, global = true, value_name = "T")]
    pub temperature: Option<f64>,
    /// Generation length cap [default: 512]
    #[arg(long, global = true, value_name = "N")]
    pub max_tokens: Option<u32>,
}
overlay!(RunSection { mode, k, fewshot_count, seed, max_options, retries, jobs, temperature, max_tokens });

#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSection {
    /// Static candidate filter
    #[arg(long, global = true, value_name = "topk|threshold|std")]
    pub method: Option<FilterMethod>,
    /// Candidates kept by the topk filter
    #[arg(id = "filter_k", long = "filter-k", global = true, value_name = "N")]
    pub k: Option<usize>,
    /// Minimum phonetic similarity kept by the threshold filter
    #[arg(long, global = true, value_name = "X")]
    pub theta: Option<f64>,
    /// Standard deviations above the mean for the std filter
    #[arg(long, global = true, value_name = "X")]
    pub sigma: Option<f64>,
}
overlay!(FilterSection { method, k, theta, sigma });

#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    /// Model backend [default: heuristic]
    #[arg(id = "backend", long = "backend", global = true, value_name = "http|oracle|scripted|heuristic")]
    pub kind: Option<BackendKind>,
    /// Chat-completions URL (http)
    #[arg(long, global = true, value_name = "URL")]
    pub endpoint: Option<String>,
    /// Model name sent to the endpoint (http)
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// Environment variable holding the bearer token; empty for none [default: DERAGEC_API_KEY]
    #[arg(long, global = true, value_name = "VAR")]
    pub api_key_env: Option<String>,
    /// Reply transcript JSONL (scripted)
    #[arg(long, global = true, value_name = "FILE")]
    pub transcript: Option<PathBuf>,
    /// Per-request timeout [default: 60]
    #[arg(long, global = true, value_name = "SECS")]
    pub timeout_secs: Option<f64>,
    /// Attempts per request including the first [default: 4]
    #[arg(long, global = true, value_name = "N")]
    pub max_attempts: Option<u32>,
    /// Initial retry delay, doubled per attempt [default: 500]
    #[arg(long, global = true, value_name = "MS")]
    pub backoff_ms: Option<u64>,
    /// Concurrent requests allowed [default: 4]
    #[arg(long, global = true, value_name = "N")]
    pub max_in_flight: Option<usize>,
}
overlay!(BackendSection { kind, endpoint, model, api_key_env, transcript, timeout_secs, max_attempts, backoff_ms, max_in_flight });

/// Overrides for the correction-stage backend; unset keys inherit from
/// the selector backend.
#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GecBackendSection {
    /// Backend for the correction stage
    #[arg(id = "gec_backend", long = "gec-backend", global = true, value_name = "http|oracle|scripted|heuristic")]
    pub kind: Option<BackendKind>,
    /// Chat-completions URL for the correction stage
    #[arg(id = "gec_endpoint", long = "gec-endpoint", global = true, value_name = "URL")]
    pub endpoint: Option<String>,
    /// Model name for the correction stage
    #[arg(id = "gec_model", long = "gec-model", global = true)]
    pub model: Option<String>,
    /// Reply transcript for the correction stage
    #[arg(id = "gec_transcript", long = "gec-transcript", global = true, value_name = "FILE")]
    pub transcript: Option<PathBuf>,
}
overlay!(GecBackendSection { kind, endpoint, model, transcript });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TaggerKind {
    Gazetteer,
    Remote,
}

#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaggerSection {
    /// Entity tagger [default: gazetteer]
    #[arg(id = "tagger", long = "tagger", global = true, value_enum)]
    pub kind: Option<TaggerKind>,
    /// Tagging service URL (remote)
    #[arg(id = "tagger_endpoint", long = "tagger-endpoint", global = true, value_name = "URL")]
    pub endpoint: Option<String>,
    /// Entity labels requested from the service, comma separated (remote)
    #[arg(id = "tagger_labels", long = "tagger-labels", global = true, value_delimiter = ',')]
    pub labels: Option<Vec<String>>,
    /// Per-request timeout (remote) [default: 30]
    #[arg(id = "tagger_timeout_secs", long = "tagger-timeout-secs", global = true, value_name = "SECS")]
    pub timeout_secs: Option<f64>,
    /// Concurrent requests allowed (remote) [default: 4]
    #[arg(id = "tagger_max_in_flight", long = "tagger-max-in-flight", global = true, value_name = "N")]
    pub max_in_flight: Option<usize>,
}
overlay!(TaggerSection { kind, endpoint, labels, timeout_secs, max_in_flight });

/// The whole configuration, as read from TOML or collected from flags.
#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    #[command(flatten)]
    #[serde(default)]
    pub paths: PathsSection,
    #[command(flatten)]
    #[serde(default)]
    pub run: RunSection,
    #[command(flatten)]
    #[serde(default)]
    pub filter: FilterSection,
    #[command(flatten)]
    #[serde(default)]
    pub backend: BackendSection,
    #[command(flatten)]
    #[serde(default)]
    pub gec_backend: GecBackendSection,
    #[command(flatten)]
    #[serde(default)]
    pub tagger: TaggerSection,
}

impl Settings {
    pub fn from_toml(text: &str, path: &Path) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::ConfigFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::ConfigFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml(&text, path)
    }

    pub fn overlay(self, file: Self) -> Self {
        Self {
            paths: self.paths.overlay(file.paths),
            run: self.run.overlay(file.run),
            filter: self.filter.overlay(file.filter),
            backend: self.backend.overlay(file.backend),
            gec_backend: self.gec_backend.overlay(file.gec_backend),
            tagger: self.tagger.overlay(file.tagger),
        }
    }

    /// Resolves an output path against `output_dir`.
    pub fn out_path(&self, out: &Path) -> PathBuf {
        match &self.paths.output_dir {
            Some(dir) if out.is_relative() => dir.join(out),
            _ => out.to_owned(),
        }
    }

    pub fn params(&self) -> GenParams {
        let d = GenParams::default();
        GenParams {
            temperature: self.run.temperature.unwrap_or(d.temperature),
            max_tokens: self.run.max_tokens.unwrap_or(d.max_tokens),
        }
    }

    /// `None` when no filter method is configured.
    pub fn filter_spec(&self) -> CliResult<Option<FilterSpec>> {
        match self.filter.method {
            None => {
                if self.filter.k.is_some() || self.filter.theta.is_some() || self.filter.sigma.is_some() {
                    return Err(CliError::Usage("filter parameters given without --method".into()));
                }
                Ok(None)
            }
            Some(m) => Ok(Some(FilterSpec::from_parts(m, self.filter.k, self.filter.theta, self.filter.sigma)?)),
        }
    }

    /// Run configuration for `mode`; `--mode` wins when given.
    pub fn run_config(&self, default_mode: Option<PipelineMode>) -> CliResult<RunConfig> {
        let mode = self
            .run
            .mode
            .or(default_mode)
            .ok_or_else(|| CliError::Usage("--mode is required".into()))?;
        let mut c = RunConfig::new(mode);
        if let Some(k) = self.run.k {
            c.k = k;
        }
        if let Some(t) = self.run.fewshot_count {
            c.fewshot_count = t;
        }
        if let Some(s) = self.run.seed {
            c.seed = s;
        }
        if let Some(m) = self.run.max_options {
            c.max_options = m;
        }
        if let Some(r) = self.run.retries {
            c.retries = r;
        }
        if let Some(j) = self.run.jobs {
            c.jobs = j;
        }
        c.params = self.params();
        c.filter = self.filter_spec()?;
        c.validate()?;
        Ok(c)
    }

    pub fn backend_spec(&self) -> BackendSpec {
        let b = &self.backend;
        let mut spec = BackendSpec::local(b.kind.unwrap_or(BackendKind::Heuristic));
        spec.endpoint = b.endpoint.clone();
        spec.model = b.model.clone();
        spec.api_key_env = match b.api_key_env.as_deref() {
            None => Some(DEFAULT_API_KEY_ENV.to_owned()),
            Some("") => None,
            Some(v) => Some(v.to_owned()),
        };
        spec.transcript = b.transcript.clone();
        if let Some(t) = b.timeout_secs {
            spec.timeout_secs = t;
        }
        if let Some(n) = b.max_attempts {
            spec.max_attempts = n;
        }
        if let Some(ms) = b.backoff_ms {
            spec.backoff_ms = ms;
        }
        if let Some(n) = b.max_in_flight {
            spec.max_in_flight = n;
        }
        spec
    }

    pub fn gec_backend_spec(&self) -> BackendSpec {
        let mut spec = self.backend_spec();
        let g = &self.gec_backend;
        if let Some(kind) = g.kind {
            spec.kind = kind;
        }
        if g.endpoint.is_some() {
            spec.endpoint = g.endpoint.clone();
        }
        if g.model.is_some() {
            spec.model = g.model.clone();
        }
        if g.transcript.is_some() {
            spec.transcript = g.transcript.clone();
        }
        spec
    }

    pub fn tagger_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.tagger.timeout_secs.unwrap_or(30.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::{CommandFactory, Parser};

    #[derive(Parser)]
    struct Probe {
        #[command(flatten)]
        settings: Settings,
    }

    const FULL: &str = r#"
[paths]
gazetteer = "g.jsonl"
index = "ne.idx"
dataset = "d.jsonl"
fewshot_pool = "pool.jsonl"
mentions = "m.txt"
record = "rec.jsonl"
output_dir = "out"

[run]
mode = "deragec"
k = 7
fewshot_count = 3
seed = 9
max_options = 20
retries = 1
jobs = 2
temperature = 0.5
max_tokens = 100

[filter]
method = "threshold"
k = 4
theta = 0.7
sigma = 1.5

[backend]
kind = "http"
endpoint = "http://x/v1/chat/completions"
model = "m"
api_key_env = "KEY"
transcript = "t.jsonl"
timeout_secs = 5.0
max_attempts = 2
backoff_ms = 10
max_in_flight = 3

[gec_backend]
kind = "scripted"
endpoint = "http://y"
model = "m2"
transcript = "g.jsonl"

[tagger]
kind = "remote"
endpoint = "http://z/tag"
labels = ["person", "place"]
timeout_secs = 2.0
max_in_flight = 1
"#;

    const FULL_FLAGS: &[&str] = &[
        "--gazetteer=g.jsonl",
        "--index=ne.idx",
        "--dataset=d.jsonl",
        "--fewshot-pool=pool.jsonl",
        "--mentions=m.txt",
        "--record=rec.jsonl",
        "--output-dir=out",
        "--mode=deragec",
        "--k=7",
        "--fewshot-count=3",
        "--seed=9",
        "--max-options=20",
        "--retries=1",
        "--jobs=2",
        "--temperature=0.5",
        "--max-tokens=100",
        "--method=threshold",
        "--filter-k=4",
        "--theta=0.7",
        "--sigma=1.5",
        "--backend=http",
        "--endpoint=http://x/v1/chat/completions",
        "--model=m",
        "--api-key-env=KEY",
        "--transcript=t.jsonl",
        "--timeout-secs=5.0",
        "--max-attempts=2",
        "--backoff-ms=10",
        "--max-in-flight=3",
        "--gec-backend=scripted",
        "--gec-endpoint=http://y",
        "--gec-model=m2",
        "--gec-transcript=g.jsonl",
        "--tagger=remote",
        "--tagger-endpoint=http://z/tag",
        "--tagger-labels=person,place",
        "--tagger-timeout-secs=2.0",
        "--tagger-max-in-flight=1",
    ];

    #[test]
    fn every_key_has_one_flag() {
        let file = Settings::from_toml(FULL, Path::new("full.toml")).unwrap();
        let flags = Probe::try_parse_from(std::iter::once("probe").chain(FULL_FLAGS.iter().copied()))
            .unwrap()
            .settings;
        assert_eq!(file, flags);
        let keys = FULL.lines().filter(|l| l.contains(" = ")).count();
        let args = Probe::command().get_arguments().filter(|a| a.get_long().is_some()).count();
        assert_eq!(keys, FULL_FLAGS.len());
        assert_eq!(args, FULL_FLAGS.len());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Settings::from_toml("[run]\nkk = 1\n", Path::new("x")).is_err());
        assert!(Settings::from_toml("[nope]\n", Path::new("x")).is_err());
        assert!(Settings::from_toml("[run]\nmode = \"fast\"\n", Path::new("x")).is_err());
    }

    #[test]
    fn flags_win_over_file() {
        let file = Settings::from_toml("[run]\nk = 3\nseed = 5\n[backend]\nkind = \"oracle\"\n", Path::new("x")).unwrap();
        let flags = Probe::try_parse_from(["probe", "--k", "8"]).unwrap().settings;
        let merged = flags.overlay(file);
        assert_eq!(merged.run.k, Some(8));
        assert_eq!(merged.run.seed, Some(5));
        assert_eq!(merged.backend.kind, Some(BackendKind::Oracle));
    }

    #[test]
    fn gec_backend_inherits() {
        let s = Settings::from_toml("[backend]\nkind = \"http\"\nendpoint = \"e\"\nmodel = \"a\"\n[gec_backend]\nmodel = \"b\"\n", Path::new("x")).unwrap();
        let g = s.gec_backend_spec();
        assert_eq!(g.kind, BackendKind::Http);
        assert_eq!(g.endpoint.as_deref(), Some("e"));
        assert_eq!(g.model.as_deref(), Some("b"));
        assert_eq!(s.backend_spec().api_key_env.as_deref(), Some(DEFAULT_API_KEY_ENV));
    }

    #[test]
    fn filter_needs_method() {
        let s = Settings::from_toml("[filter]\ntheta = 0.5\n", Path::new("x")).unwrap();
        assert!(matches!(s.filter_spec(), Err(CliError::Usage(_))));
        let s = Settings::from_toml("[filter]\nmethod = \"std\"\nsigma = 1.0\n", Path::new("x")).unwrap();
        assert_eq!(s.filter_spec().unwrap(), Some(FilterSpec::Std { sigma: 1.0 }));
    }

    #[test]
    fn run_config_defaults_and_mode() {
        let s = Settings::default();
        assert!(matches!(s.run_config(None), Err(CliError::Usage(_))));
        let c = s.run_config(Some(PipelineMode::Deragec)).unwrap();
        assert_eq!(c, RunConfig::new(PipelineMode::Deragec));
    }
}
