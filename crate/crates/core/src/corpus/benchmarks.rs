//! Importers for the four supported NLG meta-evaluation benchmarks.
//!
//! Each adapter reads the benchmark's published distribution layout and emits
//! the uniform format. Expected layouts (documented here and in the README):
//!
//! - `summeval`: JSON lines. Each line holds one machine summary:
//!   `{"id", "model_id", "text", "decoded", "expert_annotations": [{"coherence",
//!   "consistency", "fluency", "relevance"}, ...]}`. The human score is the
//!   mean of the four aspect means across expert annotators, rescaled from
//!   1..5 to 0..100 (x20), matching the overall-quality convention used with
//!   this benchmark.
//! - `topicalchat`: one JSON array of conversations:
//!   `[{"context", "fact", "responses": [{"response", "model",
//!   "Overall": [..]}]}]`. `Overall` may sit at the response level or inside
//!   an `"annotations"` object; the human score is its mean. The source is
//!   the dialogue context plus the grounding fact.
//! - `sfres`: one JSON array of utterance judgments:
//!   `[{"mr"|"source", "sys"|"response", "quality"| "scores": {"quality"}}]`.
//!   The human score is the overall quality judgment.
//! - `openmeva_roc`: one JSON object keyed by story prompt id:
//!   `{"<id>": {"prompt", "gen": {"<model>": {"text", "score": [..]}}}}`.
//!   The human score is the mean of the score list.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde_json::Value;

use crate::error::{Error, Result};

use super::{Dataset, EvalInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BenchmarkId {
    Summeval,
    Topicalchat,
    Sfres,
    OpenmevaRoc,
}

impl BenchmarkId {
    pub const ALL: [BenchmarkId; 4] = [
        BenchmarkId::Summeval,
        BenchmarkId::Topicalchat,
        BenchmarkId::Sfres,
        BenchmarkId::OpenmevaRoc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BenchmarkId::Summeval => "summeval",
            BenchmarkId::Topicalchat => "topicalchat",
            BenchmarkId::Sfres => "sfres",
            BenchmarkId::OpenmevaRoc => "openmeva_roc",
        }
    }

    /// Default number of in-context demonstrations used when optimizing a
    /// protocol on this benchmark.
    pub fn default_demo_count(self) -> usize {
        match self {
            BenchmarkId::Summeval | BenchmarkId::Topicalchat => 3,
            BenchmarkId::Sfres | BenchmarkId::OpenmevaRoc => 8,
        }
    }
}

impl fmt::Display for BenchmarkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchmarkId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "summeval" => Ok(BenchmarkId::Summeval),
            "topicalchat" | "topical_chat" => Ok(BenchmarkId::Topicalchat),
            "sfres" => Ok(BenchmarkId::Sfres),
            "openmeva_roc" | "openmeva" => Ok(BenchmarkId::OpenmevaRoc),
            other => Err(Error::Config(format!(
                "unknown benchmark '{other}' (expected one of: summeval, topicalchat, sfres, openmeva_roc)"
            ))),
        }
    }
}

/// Imports a raw benchmark file into the uniform format.
pub fn import_benchmark(raw_path: &Path, benchmark_id: BenchmarkId) -> Result<Dataset> {
    match benchmark_id {
        BenchmarkId::Summeval => import_summeval(raw_path),
        BenchmarkId::Topicalchat => import_topicalchat(raw_path),
        BenchmarkId::Sfres => import_sfres(raw_path),
        BenchmarkId::OpenmevaRoc => import_openmeva_roc(raw_path),
    }
}

fn layout(path: &Path, message: impl fmt::Display) -> Error {
    Error::Data(format!("{}: layout mismatch: {message}", path.display()))
}

fn str_field<'a>(obj: &'a Value, keys: &[&str]) -> Option<&'a str> {
    keys.iter().find_map(|k| obj.get(*k).and_then(Value::as_str))
}

fn num_field(obj: &Value, keys: &[&str]) -> Option<f64> {
    keys.iter().find_map(|k| obj.get(*k).and_then(Value::as_f64))
}

/// Mean of a numeric array, or the number itself when scalar.
fn mean_of(value: &Value) -> Option<f64> {
    match value {
        Value::Number(n) => n.as_f64(),
        Value::Array(items) if !items.is_empty() => {
            let mut sum = 0.0;
            for item in items {
                sum += item.as_f64()?;
            }
            Some(sum / items.len() as f64)
        }
        _ => None,
    }
}

fn meta_for(benchmark: BenchmarkId, system: Option<&str>) -> Option<BTreeMap<String, String>> {
    let mut meta = BTreeMap::new();
    meta.insert("benchmark".to_string(), benchmark.as_str().to_string());
    if let Some(system) = system {
        meta.insert("system".to_string(), system.to_string());
    }
    Some(meta)
}

const SUMMEVAL_ASPECTS: [&str; 4] = ["coherence", "consistency", "fluency", "relevance"];

fn import_summeval(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut instances = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Value = serde_json::from_str(&line)
            .map_err(|e| layout(path, format!("line {line_no}: not JSON: {e}")))?;
        let doc_id = str_field(&record, &["id"])
            .ok_or_else(|| layout(path, format!("line {line_no}: missing 'id'")))?;
        let model_id = str_field(&record, &["model_id"]);
        let source = str_field(&record, &["text", "source"])
            .ok_or_else(|| layout(path, format!("line {line_no}: missing 'text'")))?;
        let response = str_field(&record, &["decoded", "summary"])
            .ok_or_else(|| layout(path, format!("line {line_no}: missing 'decoded'")))?;
        let annotations = record
            .get("expert_annotations")
            .and_then(Value::as_array)
            .filter(|a| !a.is_empty())
            .ok_or_else(|| layout(path, format!("line {line_no}: missing 'expert_annotations'")))?;
        let mut aspect_sum = 0.0;
        for aspect in SUMMEVAL_ASPECTS {
            let mut sum = 0.0;
            for ann in annotations {
                sum += num_field(ann, &[aspect]).ok_or_else(|| {
                    layout(path, format!("line {line_no}: annotation missing '{aspect}'"))
                })?;
            }
            aspect_sum += sum / annotations.len() as f64;
        }
        let human_score = aspect_sum / SUMMEVAL_ASPECTS.len() as f64 * 20.0;
        let id = match model_id {
            Some(m) => format!("{doc_id}::{m}"),
            None => doc_id.to_string(),
        };
        instances.push(EvalInstance {
            id,
            source: source.to_string(),
            response: response.to_string(),
            human_score,
            meta: meta_for(BenchmarkId::Summeval, model_id),
        });
    }
    Dataset::new(BenchmarkId::Summeval.as_str(), instances)
}

fn import_topicalchat(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root: Value = serde_json::from_str(&text)
        .map_err(|e| layout(path, format!("not JSON: {e}")))?;
    let conversations = root
        .as_array()
        .ok_or_else(|| layout(path, "expected a top-level array of conversations"))?;
    let mut instances = Vec::new();
    for (ci, conv) in conversations.iter().enumerate() {
        let context = str_field(conv, &["context"])
            .ok_or_else(|| layout(path, format!("conversation {ci}: missing 'context'")))?;
        let fact = str_field(conv, &["fact"]).unwrap_or("").trim().to_string();
        let source = if fact.is_empty() {
            context.trim().to_string()
        } else {
            format!("{}\nFact: {fact}", context.trim())
        };
        let responses = conv
            .get("responses")
            .and_then(Value::as_array)
            .ok_or_else(|| layout(path, format!("conversation {ci}: missing 'responses'")))?;
        for (ri, resp) in responses.iter().enumerate() {
            let response = str_field(resp, &["response"])
                .ok_or_else(|| layout(path, format!("conversation {ci} response {ri}: missing 'response'")))?;
            let overall = resp
                .get("Overall")
                .or_else(|| resp.get("annotations").and_then(|a| a.get("Overall")))
                .and_then(mean_of)
                .ok_or_else(|| {
                    layout(path, format!("conversation {ci} response {ri}: missing 'Overall' scores"))
                })?;
            let system = str_field(resp, &["model", "system"]);
            instances.push(EvalInstance {
                id: format!("tc-{ci}-{ri}"),
                source: source.clone(),
                response: response.to_string(),
                human_score: overall,
                meta: meta_for(BenchmarkId::Topicalchat, system),
            });
        }
    }
    Dataset::new(BenchmarkId::Topicalchat.as_str(), instances)
}

fn import_sfres(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root: Value = serde_json::from_str(&text)
        .map_err(|e| layout(path, format!("not JSON: {e}")))?;
    let records = root
        .as_array()
        .ok_or_else(|| layout(path, "expected a top-level array of judgments"))?;
    let mut instances = Vec::new();
    for (i, record) in records.iter().enumerate() {
        let source = str_field(record, &["mr", "source", "src"])
            .ok_or_else(|| layout(path, format!("record {i}: missing 'mr'")))?;
        let response = str_field(record, &["sys", "response", "output", "sys_out"])
            .ok_or_else(|| layout(path, format!("record {i}: missing 'sys'")))?;
        let quality = num_field(record, &["quality"])
            .or_else(|| record.get("scores").and_then(|s| num_field(s, &["quality"])))
            .ok_or_else(|| layout(path, format!("record {i}: missing 'quality'")))?;
        instances.push(EvalInstance {
            id: format!("sfres-{i}"),
            source: source.to_string(),
            response: response.to_string(),
            human_score: quality,
            meta: meta_for(BenchmarkId::Sfres, str_field(record, &["system", "model"])),
        });
    }
    Dataset::new(BenchmarkId::Sfres.as_str(), instances)
}

fn import_openmeva_roc(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root: Value = serde_json::from_str(&text)
        .map_err(|e| layout(path, format!("not JSON: {e}")))?;
    let entries = root
        .as_object()
        .ok_or_else(|| layout(path, "expected a top-level object keyed by prompt id"))?;
    let mut instances = Vec::new();
    for (key, entry) in entries {
        let prompt = str_field(entry, &["prompt"])
            .ok_or_else(|| layout(path, format!("entry '{key}': missing 'prompt'")))?;
        let generations = entry
            .get("gen")
            .and_then(Value::as_object)
            .ok_or_else(|| layout(path, format!("entry '{key}': missing 'gen'")))?;
        for (model, gen) in generations {
            let story = str_field(gen, &["text"])
                .ok_or_else(|| layout(path, format!("entry '{key}' model '{model}': missing 'text'")))?;
            let score = gen
                .get("score")
                .and_then(mean_of)
                .ok_or_else(|| layout(path, format!("entry '{key}' model '{model}': missing 'score'")))?;
            instances.push(EvalInstance {
                id: format!("{key}::{model}"),
                source: prompt.to_string(),
                response: story.to_string(),
                human_score: score,
                meta: meta_for(BenchmarkId::OpenmevaRoc, Some(model)),
            });
        }
    }
    Dataset::new(BenchmarkId::OpenmevaRoc.as_str(), instances)
}
