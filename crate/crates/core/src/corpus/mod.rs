//! Uniform data model for human-scored NLG instances.
//!
//! Every benchmark is normalized to the same shape: an ordered list of
//! (source, response, human_score) records. The list order is canonical; all
//! seeded operations (splitting, mini-batching, demo sampling) consume
//! instances in this order, which is what makes them reproducible.

pub mod benchmarks;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// One human-scored (source, response) pair.
///
/// `human_score` stays on the benchmark's native scale; rank correlations are
/// scale-free and linear correlation is computed on raw scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub id: String,
    pub source: String,
    pub response: String,
    pub human_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<BTreeMap<String, String>>,
}

impl EvalInstance {
    /// Checks the record-level invariants; `context` names the record in errors.
    pub fn validate(&self, context: &str) -> Result<()> {
        if self.id.trim().is_empty() {
            return Err(Error::Data(format!("{context}: empty id")));
        }
        if self.source.trim().is_empty() {
            return Err(Error::Data(format!("{context}: empty source")));
        }
        if self.response.trim().is_empty() {
            return Err(Error::Data(format!("{context}: empty response")));
        }
        if !self.human_score.is_finite() {
            return Err(Error::Data(format!(
                "{context}: human_score is not finite ({})",
                self.human_score
            )));
        }
        Ok(())
    }
}

/// An ordered, duplicate-free collection of instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub benchmark_id: String,
    pub instances: Vec<EvalInstance>,
}

impl Dataset {
    /// Builds a dataset, enforcing instance invariants and id uniqueness.
    pub fn new(benchmark_id: impl Into<String>, instances: Vec<EvalInstance>) -> Result<Self> {
        let benchmark_id = benchmark_id.into();
        let mut seen = BTreeSet::new();
        for (i, inst) in instances.iter().enumerate() {
            inst.validate(&format!("instance {i}"))?;
            if !seen.insert(inst.id.as_str()) {
                return Err(Error::Data(format!("duplicate id '{}'", inst.id)));
            }
        }
        Ok(Dataset {
            benchmark_id,
            instances,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn human_scores(&self) -> Vec<f64> {
        self.instances.iter().map(|i| i.human_score).collect()
    }
}

/// A contiguous chunk of shuffled training instances.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub index: usize,
    pub instances: Vec<EvalInstance>,
}

/// Reads the uniform line-delimited JSON format.
///
/// Errors name the offending line (1-based). Blank lines are rejected: the
/// format is one object per line with no padding.
pub fn load_uniform(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut instances = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let at = |message: String| Error::DataAt {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let inst: EvalInstance = serde_json::from_str(&line)
            .map_err(|e| at(format!("invalid record: {e}")))?;
        inst.validate("record")
            .map_err(|e| at(e.to_string()))?;
        if !seen.insert(inst.id.clone()) {
            return Err(at(format!("duplicate id '{}'", inst.id)));
        }
        instances.push(inst);
    }
    let benchmark_id = instances
        .first()
        .and_then(|i| i.meta.as_ref())
        .and_then(|m| m.get("benchmark").cloned())
        .unwrap_or_else(|| "unknown".to_string());
    Dataset::new(benchmark_id, instances)
}

/// Writes the uniform format: one compact JSON object per line, keys in
/// declaration order (id, source, response, human_score, meta).
pub fn write_uniform(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for inst in &dataset.instances {
        serde_json::to_writer(&mut out, inst)
            .map_err(|e| Error::Data(format!("serialize '{}': {e}", inst.id)))?;
        out.push(b'\n');
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Splits into (train, test) with |train| = round(fraction * n).
///
/// Selection is seeded; both halves keep the canonical (input) order so that
/// downstream seeded operations see a stable sequence.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must be in (0,1), got {train_fraction}"
        )));
    }
    let n = dataset.len();
    let train_n = (train_fraction * n as f64).round() as usize;
    if train_n == 0 || train_n == n {
        return Err(Error::Data(format!(
            "split of {n} instances at fraction {train_fraction} leaves one side empty"
        )));
    }
    let mut rng = seed::stream_rng(seed, "corpus/split");
    let order = seed::permutation(n, &mut rng);
    let chosen: BTreeSet<usize> = order[..train_n].iter().copied().collect();
    let mut train = Vec::with_capacity(train_n);
    let mut test = Vec::with_capacity(n - train_n);
    for (i, inst) in dataset.instances.iter().enumerate() {
        if chosen.contains(&i) {
            train.push(inst.clone());
        } else {
            test.push(inst.clone());
        }
    }
    Ok((
        Dataset::new(dataset.benchmark_id.clone(), train)?,
        Dataset::new(dataset.benchmark_id.clone(), test)?,
    ))
}

/// Shuffles train by seed, chunks into batches of `batch_size`, keeps a final
/// partial batch, and truncates to `max_batches`.
pub fn minibatch(
    train: &Dataset,
    batch_size: usize,
    max_batches: usize,
    seed: u64,
) -> Result<Vec<MiniBatch>> {
    if train.is_empty() {
        return Err(Error::Data("cannot mini-batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be > 0".into()));
    }
    if max_batches == 0 {
        return Err(Error::Config("max_batches must be > 0".into()));
    }
    let mut shuffled = train.instances.clone();
    let mut rng = seed::stream_rng(seed, "corpus/minibatch");
    seed::shuffle(&mut shuffled, &mut rng);
    let batches = shuffled
        .chunks(batch_size)
        .take(max_batches)
        .enumerate()
        .map(|(index, chunk)| MiniBatch {
            index,
            instances: chunk.to_vec(),
        })
        .collect();
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(id: &str, score: f64) -> EvalInstance {
        EvalInstance {
            id: id.to_string(),
            source: format!("source {id}"),
            response: format!("response {id}"),
            human_score: score,
            meta: None,
        }
    }

    fn dataset(n: usize) -> Dataset {
        let instances = (0..n).map(|i| inst(&format!("i{i}"), i as f64)).collect();
        Dataset::new("test", instances).unwrap()
    }

    #[test]
    fn rejects_duplicate_ids() {
        let err = Dataset::new("t", vec![inst("a", 1.0), inst("a", 2.0)]).unwrap_err();
        assert!(err.to_string().contains("duplicate id 'a'"));
    }

    #[test]
    fn rejects_non_finite_score() {
        let mut bad = inst("a", f64::NAN);
        bad.human_score = f64::NAN;
        let err = Dataset::new("t", vec![bad]).unwrap_err();
        assert!(err.to_string().contains("not finite"));
    }

    #[test]
    fn rejects_blank_source() {
        let mut bad = inst("a", 1.0);
        bad.source = "   ".into();
        assert!(bad.validate("x").is_err());
    }

    #[test]
    fn load_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let good = serde_json::to_string(&inst("a", 1.0)).unwrap();
        std::fs::write(&path, format!("{good}\n{{\"id\":\"b\",\"source\":\"s\"}}\n")).unwrap();
        let err = load_uniform(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":2:"), "expected line 2 in: {msg}");
    }

    #[test]
    fn load_preserves_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let d = dataset(3);
        write_uniform(&d, &path).unwrap();
        let loaded = load_uniform(&path).unwrap();
        let ids: Vec<&str> = loaded.instances.iter().map(|i| i.id.as_str()).collect();
        assert_eq!(ids, vec!["i0", "i1", "i2"]);
    }

    #[test]
    fn round_trip_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let mut meta = BTreeMap::new();
        meta.insert("benchmark".to_string(), "demo".to_string());
        let mut d = dataset(5);
        d.instances[0].meta = Some(meta);
        d.benchmark_id = "demo".to_string();
        write_uniform(&d, &path).unwrap();
        let loaded = load_uniform(&path).unwrap();
        assert_eq!(loaded.instances, d.instances);
        assert_eq!(loaded.benchmark_id, "demo");
    }

    #[test]
    fn split_1600_at_quarter() {
        let (train, test) = split(&dataset(1600), 0.25, 9).unwrap();
        assert_eq!(train.len(), 400);
        assert_eq!(test.len(), 1200);
    }

    #[test]
    fn split_4_at_quarter() {
        let (train, test) = split(&dataset(4), 0.25, 9).unwrap();
        assert_eq!(train.len(), 1);
        assert_eq!(test.len(), 3);
    }

    #[test]
    fn split_is_deterministic() {
        let d = dataset(100);
        let (t1, e1) = split(&d, 0.25, 7).unwrap();
        let (t2, e2) = split(&d, 0.25, 7).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(e1, e2);
    }

    #[test]
    fn split_is_a_partition_preserving_order() {
        let d = dataset(37);
        let (train, test) = split(&d, 0.3, 11).unwrap();
        assert_eq!(train.len() + test.len(), 37);
        let mut all: Vec<&str> = train
            .instances
            .iter()
            .chain(test.instances.iter())
            .map(|i| i.id.as_str())
            .collect();
        all.sort_unstable();
        let mut expected: Vec<String> = (0..37).map(|i| format!("i{i}")).collect();
        expected.sort_unstable();
        assert_eq!(all, expected.iter().map(String::as_str).collect::<Vec<_>>());
        // Each side keeps canonical order.
        let pos = |id: &str| id[1..].parse::<usize>().unwrap();
        assert!(train.instances.windows(2).all(|w| pos(&w[0].id) < pos(&w[1].id)));
        assert!(test.instances.windows(2).all(|w| pos(&w[0].id) < pos(&w[1].id)));
    }

    #[test]
    fn split_rejects_empty_side() {
        let err = split(&dataset(3), 0.05, 1).unwrap_err();
        assert!(err.to_string().contains("empty"));
    }

    #[test]
    fn minibatch_sizes_12_by_5() {
        let batches = minibatch(&dataset(12), 5, 25, 3).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.instances.len()).collect();
        assert_eq!(sizes, vec![5, 5, 2]);
    }

    #[test]
    fn minibatch_truncates() {
        let batches = minibatch(&dataset(12), 5, 2, 3).unwrap();
        assert_eq!(batches.len(), 2);
        let used: usize = batches.iter().map(|b| b.instances.len()).sum();
        assert_eq!(used, 10);
    }

    #[test]
    fn minibatch_125_by_5_is_25_full() {
        let batches = minibatch(&dataset(125), 5, 25, 3).unwrap();
        assert_eq!(batches.len(), 25);
        assert!(batches.iter().all(|b| b.instances.len() == 5));
    }

    #[test]
    fn minibatch_flatten_is_permutation() {
        let d = dataset(23);
        let batches = minibatch(&d, 5, 100, 3).unwrap();
        let mut ids: Vec<&str> = batches
            .iter()
            .flat_map(|b| b.instances.iter().map(|i| i.id.as_str()))
            .collect();
        ids.sort_unstable();
        let mut expected: Vec<String> = (0..23).map(|i| format!("i{i}")).collect();
        expected.sort_unstable();
        assert_eq!(ids, expected.iter().map(String::as_str).collect::<Vec<_>>());
    }
}
