//! Run artifacts: self-describing run directories plus CSV/Markdown
//! comparison tables across runs.
//!
//! A run directory contains everything needed to audit or re-run it: the
//! config snapshot, the optimized protocol, per-instance reports, the trial
//! ledger, predictions, correlation summaries, and rendered tables. The
//! manifest is written last and refuses to list a file that does not exist.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::benchmarks::BenchmarkId;
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::protocol::{AblationFlags, EvaluationProtocol, Variant};
use crate::scoring::ScoreReport;
use crate::stats::CorrelationSummary;

pub const MANIFEST_FILE: &str = "manifest.json";

/// The run directory's index: identity, provenance, result summary, and the
/// role -> relative-path map of every artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub created_unix: u64,
    /// Version of the seed-derivation scheme; bump invalidates byte-level
    /// reproducibility against old runs.
    pub rng_scheme_version: u32,
    pub benchmark: String,
    pub variant: Variant,
    pub flags: AblationFlags,
    pub model_id: String,
    pub n_train: usize,
    pub n_test: usize,
    /// sha256 over the test set's instance ids in canonical order.
    pub test_fingerprint: String,
    pub summary: CorrelationSummary,
    pub files: BTreeMap<String, String>,
}

/// sha256 hex over instance ids in canonical order: two runs agree iff they
/// were measured on the same instances.
pub fn test_fingerprint(dataset: &Dataset) -> String {
    let mut hasher = Sha256::new();
    for inst in &dataset.instances {
        hasher.update(inst.id.as_bytes());
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

/// Creates `out_dir/<benchmark>-<variant>-<unix seconds>`, suffixing `-2`,
/// `-3`, ... instead of ever reusing an existing directory.
pub fn create_run_dir(out_dir: &Path, benchmark: &str, variant: Variant) -> Result<(PathBuf, String)> {
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let base = format!("{benchmark}-{variant}-{stamp}");
    let mut candidate = base.clone();
    let mut n = 1;
    loop {
        let dir = out_dir.join(&candidate);
        if !dir.exists() {
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            return Ok((dir, candidate));
        }
        n += 1;
        candidate = format!("{base}-{n}");
    }
}

/// Writes the manifest, first checking that every referenced file exists.
pub fn write_manifest(manifest: &Manifest, dir: &Path) -> Result<()> {
    for (role, rel) in &manifest.files {
        let path = dir.join(rel);
        if !path.exists() {
            return Err(Error::Data(format!(
                "manifest references missing file '{rel}' (role {role})"
            )));
        }
    }
    let body = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Data(format!("cannot serialize manifest: {e}")))?;
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, body).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let body = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&body)
        .map_err(|e| Error::Data(format!("{}: invalid manifest: {e}", path.display())))
}

/// One ScoreReport per line, canonical instance order.
pub fn write_reports_jsonl(reports: &[ScoreReport], path: &Path) -> Result<()> {
    let mut body = String::new();
    for report in reports {
        let line = serde_json::to_string(report)
            .map_err(|e| Error::Data(format!("cannot serialize report: {e}")))?;
        body.push_str(&line);
        body.push('\n');
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn read_reports_jsonl(path: &Path) -> Result<Vec<ScoreReport>> {
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    body.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::DataAt {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Human-readable dump of the inferred task and criteria.
pub fn write_criteria_dump(
    protocol: &EvaluationProtocol,
    benchmark: &str,
    path: &Path,
) -> Result<()> {
    let mut body = format!("# Inferred evaluation protocol: {benchmark} ({})\n", protocol.variant);
    if let Some(task) = &protocol.task {
        body.push_str("\n## Task description\n\n");
        body.push_str(&task.text);
        body.push('\n');
        if task.extraction_fallback {
            body.push_str("\n(kept verbatim: the summary skeleton was missing)\n");
        }
    }
    if let Some(criteria) = &protocol.criteria {
        body.push_str("\n## Criteria\n");
        for c in criteria.criteria() {
            body.push_str(&format!("\n### {}\n\n{}\n", c.name, c.definition));
        }
    }
    let traced = protocol
        .mcse_demos
        .iter()
        .filter(|d| d.trace.is_some())
        .count();
    body.push_str(&format!(
        "\n## Demonstrations\n\n{} demonstrations, {} with bootstrapped traces.\n",
        protocol.mcse_demos.len(),
        traced
    ));
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Row label in comparison tables: the variant, plus any ablation flags.
pub fn run_label(variant: Variant, flags: &AblationFlags) -> String {
    let mut set = Vec::new();
    if flags.no_task_description {
        set.push("no_task_description");
    }
    if flags.no_criteria_definition {
        set.push("no_criteria_definition");
    }
    if flags.no_mcse {
        set.push("no_mcse");
    }
    if flags.no_ose {
        set.push("no_ose");
    }
    if flags.no_explanations {
        set.push("no_explanations");
    }
    if flags.single_minibatch {
        set.push("single_minibatch");
    }
    if set.is_empty() {
        variant.to_string()
    } else {
        format!("{variant} (w/o {})", set.join(", "))
    }
}

/// One rendered comparison table (rows that share test sets).
#[derive(Debug, Clone)]
pub struct TableGroup {
    pub csv: String,
    pub markdown: String,
    pub benchmarks: Vec<String>,
    pub labels: Vec<String>,
}

struct GroupBuilder {
    fingerprints: BTreeMap<String, String>,
    benchmarks: Vec<String>,
    labels: Vec<String>,
    cells: BTreeMap<(String, String), CorrelationSummary>,
}

impl GroupBuilder {
    fn new() -> Self {
        GroupBuilder {
            fingerprints: BTreeMap::new(),
            benchmarks: Vec::new(),
            labels: Vec::new(),
            cells: BTreeMap::new(),
        }
    }

    fn accepts(&self, manifest: &Manifest, label: &str) -> bool {
        if let Some(fp) = self.fingerprints.get(&manifest.benchmark) {
            if fp != &manifest.test_fingerprint {
                return false;
            }
        }
        !self
            .cells
            .contains_key(&(label.to_string(), manifest.benchmark.clone()))
    }

    fn insert(&mut self, manifest: &Manifest, label: &str) {
        self.fingerprints
            .entry(manifest.benchmark.clone())
            .or_insert_with(|| manifest.test_fingerprint.clone());
        if !self.benchmarks.contains(&manifest.benchmark) {
            self.benchmarks.push(manifest.benchmark.clone());
        }
        if !self.labels.iter().any(|l| l == label) {
            self.labels.push(label.to_string());
        }
        self.cells.insert(
            (label.to_string(), manifest.benchmark.clone()),
            manifest.summary.clone(),
        );
    }
}

fn canonical_benchmark_order(benchmarks: &mut [String]) {
    let rank = |name: &str| {
        name.parse::<BenchmarkId>()
            .ok()
            .and_then(|b| BenchmarkId::ALL.iter().position(|x| *x == b))
            .unwrap_or(usize::MAX)
    };
    benchmarks.sort_by(|a, b| rank(a).cmp(&rank(b)).then_with(|| a.cmp(b)));
}

fn fmt_cell(value: Option<f64>) -> String {
    value.map(|v| format!("{v:.4}")).unwrap_or_default()
}

fn render_group(builder: &GroupBuilder) -> TableGroup {
    let mut benchmarks = builder.benchmarks.clone();
    canonical_benchmark_order(&mut benchmarks);
    let labels = builder.labels.clone();

    let coefficient_of = |summary: &CorrelationSummary, j: usize| match j {
        0 => summary.pearson,
        1 => summary.spearman,
        _ => summary.kendall_tau_b,
    };

    // Column-wise maxima for Markdown bolding.
    let mut best: Vec<Option<f64>> = vec![None; benchmarks.len() * 3];
    for label in &labels {
        for (bi, bench) in benchmarks.iter().enumerate() {
            if let Some(summary) = builder.cells.get(&(label.clone(), bench.clone())) {
                for j in 0..3 {
                    if let Some(v) = coefficient_of(summary, j) {
                        let slot = &mut best[bi * 3 + j];
                        if slot.map_or(true, |b| v > b) {
                            *slot = Some(v);
                        }
                    }
                }
            }
        }
    }

    let mut csv = String::from("run");
    for bench in &benchmarks {
        for coef in ["pearson", "spearman", "kendall_tau_b"] {
            csv.push_str(&format!(",{bench}_{coef}"));
        }
    }
    csv.push_str(",average\n");

    let mut md = String::from("| run |");
    for bench in &benchmarks {
        for coef in ["γ", "ρ", "τ"] {
            md.push_str(&format!(" {bench} {coef} |"));
        }
    }
    md.push_str(" Avg. |\n|---|");
    for _ in 0..benchmarks.len() * 3 {
        md.push_str("---|");
    }
    md.push_str("---|\n");

    for label in &labels {
        let mut csv_row = vec![label.clone()];
        let mut md_row = vec![label.clone()];
        let mut defined = Vec::new();
        for (bi, bench) in benchmarks.iter().enumerate() {
            let summary = builder.cells.get(&(label.clone(), bench.clone()));
            for j in 0..3 {
                let value = summary.and_then(|s| coefficient_of(s, j));
                csv_row.push(fmt_cell(value));
                let cell = match value {
                    Some(v) => {
                        defined.push(v);
                        let is_best = best[bi * 3 + j].map_or(false, |b| v >= b);
                        if is_best {
                            format!("**{v:.4}**")
                        } else {
                            format!("{v:.4}")
                        }
                    }
                    None if summary.is_some() => "undef".to_string(),
                    None => String::new(),
                };
                md_row.push(cell);
            }
        }
        let average = if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        };
        csv_row.push(fmt_cell(average));
        md_row.push(fmt_cell(average));
        csv.push_str(&csv_row.join(","));
        csv.push('\n');
        md.push_str("| ");
        md.push_str(&md_row.join(" | "));
        md.push_str(" |\n");
    }

    TableGroup {
        csv,
        markdown: md,
        benchmarks,
        labels,
    }
}

/// Builds comparison tables from manifests. Runs whose test sets disagree
/// for the same benchmark, or that would collide on a (row, benchmark) cell,
/// are split into further groups and a warning is recorded.
pub fn comparison_tables(manifests: &[Manifest]) -> (Vec<TableGroup>, Vec<String>) {
    let mut builders: Vec<GroupBuilder> = Vec::new();
    let mut warnings = Vec::new();
    for manifest in manifests {
        let label = run_label(manifest.variant, &manifest.flags);
        let slot = builders.iter_mut().position(|g| g.accepts(manifest, &label));
        match slot {
            Some(i) => builders[i].insert(manifest, &label),
            None => {
                if !builders.is_empty() {
                    warnings.push(format!(
                        "run {} ({label} on {}) is incompatible with earlier runs (different test set or duplicate cell); emitting a separate table",
                        manifest.run_id, manifest.benchmark
                    ));
                }
                let mut builder = GroupBuilder::new();
                builder.insert(manifest, &label);
                builders.push(builder);
            }
        }
    }
    (builders.iter().map(render_group).collect(), warnings)
}

/// Renders and writes grouped tables; the first group gets `<stem>.csv/.md`,
/// later groups `<stem>-2.csv/.md`, and so on.
pub fn write_comparison_tables(
    manifests: &[Manifest],
    out_dir: &Path,
    stem: &str,
) -> Result<(Vec<(PathBuf, PathBuf)>, Vec<String>)> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (groups, warnings) = comparison_tables(manifests);
    let mut written = Vec::new();
    for (i, group) in groups.iter().enumerate() {
        let suffix = if i == 0 {
            String::new()
        } else {
            format!("-{}", i + 1)
        };
        let csv_path = out_dir.join(format!("{stem}{suffix}.csv"));
        let md_path = out_dir.join(format!("{stem}{suffix}.md"));
        std::fs::write(&csv_path, &group.csv).map_err(|e| Error::io(&csv_path, e))?;
        std::fs::write(&md_path, &group.markdown).map_err(|e| Error::io(&md_path, e))?;
        written.push((csv_path, md_path));
    }
    Ok((written, warnings))
}
