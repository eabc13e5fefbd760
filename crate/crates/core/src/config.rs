//! Run configuration: one JSON file drives the whole pipeline. Secrets come
//! from environment variables only; everything else is explicit so a config
//! snapshot in a run directory is sufficient to reproduce the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::benchmarks::BenchmarkId;
use crate::error::{Error, Result};
use crate::gateway::{
    AuditLog, Backend, DiskCache, Gateway, HttpBackend, HttpBackendConfig, Rule, ScriptedBackend,
};
use crate::inference::InferenceSettings;
use crate::optimize::{OptimizeSettings, DEFAULT_TRACE_TOLERANCE};
use crate::protocol::{AblationFlags, Variant};

/// Independent seeds for each randomized pipeline stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub split: u64,
    pub shuffle: u64,
    pub trial: u64,
    pub permutation: u64,
}

/// One scripted-backend rule in config form. Exactly one of `substring` /
/// `pattern` may be set; neither means match-anything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub substring: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    pub reply: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    /// OpenAI-compatible chat-completion endpoint.
    Http {
        base_url: String,
        /// Name of the environment variable holding the API key.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        api_key_env: Option<String>,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
    },
    /// Deterministic canned responses for tests and offline replays.
    Scripted {
        #[serde(default)]
        rules: Vec<ScriptedRule>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        default: Option<String>,
    },
}

fn default_timeout_secs() -> u64 {
    120
}

fn default_variant() -> Variant {
    Variant::Fine
}

fn default_train_fraction() -> f64 {
    0.25
}

fn default_batch_size() -> usize {
    5
}

fn default_max_batches() -> usize {
    25
}

fn default_inference_cap() -> usize {
    5
}

fn default_trials() -> usize {
    11
}

fn default_trace_tolerance() -> f64 {
    DEFAULT_TRACE_TOLERANCE
}

fn default_permutations() -> usize {
    1000
}

fn default_max_tokens() -> u32 {
    2048
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// The full pipeline configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Uniform-format corpus file.
    pub data_path: PathBuf,
    /// Overrides the corpus's own benchmark id for demo-count defaults and
    /// predefined criteria.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<String>,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default)]
    pub flags: AblationFlags,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_batches")]
    pub max_batches: usize,
    /// Cap on candidate (task, criteria) pairs during inference.
    #[serde(default = "default_inference_cap")]
    pub inference_cap: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Demonstrations per protocol; defaults by benchmark when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demo_count: Option<usize>,
    #[serde(default = "default_trace_tolerance")]
    pub trace_tolerance: f64,
    #[serde(default = "default_permutations")]
    pub permutations: usize,
    #[serde(default)]
    pub seeds: Seeds,
    pub backend: BackendConfig,
    pub model_id: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_in_flight: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub keep_transcripts: bool,
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let config: RunConfig = serde_json::from_str(&body)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        for (name, value) in [
            ("batch_size", self.batch_size),
            ("max_batches", self.max_batches),
            ("inference_cap", self.inference_cap),
            ("trials", self.trials),
        ] {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be > 0")));
            }
        }
        if self.demo_count == Some(0) {
            return Err(Error::Config("demo_count must be > 0".into()));
        }
        if self.model_id.trim().is_empty() {
            return Err(Error::Config("model_id must not be empty".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::Config(format!(
                "temperature must be finite and >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be > 0".into()));
        }
        if self.permutations < 1000 {
            return Err(Error::Config(format!(
                "permutations must be >= 1000, got {}",
                self.permutations
            )));
        }
        if !self.trace_tolerance.is_finite() || self.trace_tolerance < 0.0 {
            return Err(Error::Config(
                "trace_tolerance must be finite and >= 0".into(),
            ));
        }
        if let Some(name) = &self.benchmark {
            name.parse::<BenchmarkId>()?;
        }
        if let BackendConfig::Scripted { rules, .. } = &self.backend {
            for rule in rules {
                if rule.substring.is_some() && rule.pattern.is_some() {
                    return Err(Error::Config(
                        "scripted rule sets both substring and pattern".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// The benchmark identity used for defaults: the config override if set,
    /// otherwise the corpus's own id when it parses.
    pub fn effective_benchmark(&self, dataset_benchmark: &str) -> Option<BenchmarkId> {
        self.benchmark
            .as_deref()
            .unwrap_or(dataset_benchmark)
            .parse()
            .ok()
    }

    /// k: explicit `demo_count`, else the benchmark's published default.
    pub fn effective_demo_count(&self, dataset_benchmark: &str) -> Result<usize> {
        if let Some(k) = self.demo_count {
            return Ok(k);
        }
        self.effective_benchmark(dataset_benchmark)
            .map(|b| b.default_demo_count())
            .ok_or_else(|| {
                Error::Config(format!(
                    "demo_count must be set explicitly: benchmark '{dataset_benchmark}' has no default"
                ))
            })
    }

    pub fn inference_settings(&self) -> InferenceSettings {
        InferenceSettings {
            batch_size: self.batch_size,
            max_batches: self.max_batches,
            candidate_cap: self.inference_cap,
            seed: self.seeds.shuffle,
            single_minibatch: self.flags.single_minibatch,
            no_task_description: self.flags.no_task_description,
            no_criteria: self.flags.no_criteria_definition,
        }
    }

    pub fn optimize_settings(&self, demo_count: usize) -> OptimizeSettings {
        OptimizeSettings {
            trials: self.trials,
            demo_count,
            seed: self.seeds.trial,
            trace_tolerance: self.trace_tolerance,
        }
    }

    pub fn build_backend(&self) -> Result<Box<dyn Backend>> {
        match &self.backend {
            BackendConfig::Http {
                base_url,
                api_key_env,
                timeout_secs,
            } => {
                let api_key = match api_key_env {
                    Some(var) => Some(std::env::var(var).map_err(|_| {
                        Error::Config(format!("environment variable {var} is not set"))
                    })?),
                    None => None,
                };
                let backend = HttpBackend::new(HttpBackendConfig {
                    base_url: base_url.clone(),
                    api_key,
                    timeout_secs: *timeout_secs,
                })?;
                Ok(Box::new(backend))
            }
            BackendConfig::Scripted { rules, default } => {
                let mut compiled = Vec::with_capacity(rules.len());
                for rule in rules {
                    let compiled_rule = match (&rule.substring, &rule.pattern) {
                        (Some(s), None) => Rule::substring(s, &rule.reply),
                        (None, Some(p)) => Rule::pattern(p, &rule.reply)?,
                        (None, None) => Rule::any(&rule.reply),
                        (Some(_), Some(_)) => {
                            return Err(Error::Config(
                                "scripted rule sets both substring and pattern".into(),
                            ))
                        }
                    };
                    compiled.push(compiled_rule);
                }
                let mut backend = ScriptedBackend::new(compiled);
                if let Some(text) = default {
                    backend = backend.with_default(text);
                }
                Ok(Box::new(backend))
            }
        }
    }

    /// Assembles the gateway: backend, optional disk cache, optional audit
    /// log, and the in-flight limiter.
    pub fn build_gateway(&self, audit_path: Option<&Path>) -> Result<Gateway> {
        let mut gateway = Gateway::new(self.build_backend()?);
        if let Some(dir) = &self.cache_dir {
            gateway = gateway.with_cache(DiskCache::new(dir)?);
        }
        if let Some(path) = audit_path {
            gateway = gateway.with_audit(AuditLog::open(path)?);
        }
        if let Some(limit) = self.max_in_flight {
            gateway = gateway.with_max_in_flight(limit);
        }
        Ok(gateway)
    }
}
