//! The evaluation protocol artifact: task description, criteria set, and
//! demonstration sets, plus the variant/ablation switches that control how it
//! is rendered and executed. Serialized as the portable `protocol.json` that
//! a run emits and later commands reload.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::benchmarks::BenchmarkId;
use crate::corpus::EvalInstance;
use crate::error::{Error, Result};
use crate::scoring::CriterionReport;
use crate::Score;

/// The inferred statement of what is being evaluated (T).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDescription {
    pub text: String,
    /// Mini-batch indices whose observations fed this description.
    pub contributing_batches: Vec<usize>,
    /// True when the summary skeleton was missing and the raw response was
    /// kept verbatim.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub extraction_fallback: bool,
}

impl TaskDescription {
    pub fn new(text: impl Into<String>, contributing_batches: Vec<usize>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Parse {
                request_tag: "task_summary".into(),
                message: "task description text is empty".into(),
            });
        }
        Ok(TaskDescription {
            text,
            contributing_batches,
            extraction_fallback: false,
        })
    }
}

/// One evaluation aspect (c_j): short name plus a one-sentence definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Criterion {
    pub name: String,
    pub definition: String,
}

impl Criterion {
    pub fn new(name: impl Into<String>, definition: impl Into<String>) -> Self {
        Criterion {
            name: name.into(),
            definition: definition.into(),
        }
    }
}

/// Ordered criteria (C). Names are unique case-insensitively; the 4..=10 size
/// bound applies only to consolidated sets, which
/// [`CriteriaSet::check_consolidated_size`] enforces at the consolidation and
/// protocol-validation sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CriteriaSet {
    criteria: Vec<Criterion>,
}

pub const CONSOLIDATED_MIN: usize = 4;
pub const CONSOLIDATED_MAX: usize = 10;

impl CriteriaSet {
    pub fn new(criteria: Vec<Criterion>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for c in &criteria {
            if c.name.trim().is_empty() {
                return Err(Error::Data("criterion with empty name".into()));
            }
            if !seen.insert(c.name.trim().to_lowercase()) {
                return Err(Error::Data(format!(
                    "duplicate criterion name '{}' (names are case-insensitive)",
                    c.name
                )));
            }
        }
        Ok(CriteriaSet { criteria })
    }

    pub fn criteria(&self) -> &[Criterion] {
        &self.criteria
    }

    pub fn len(&self) -> usize {
        self.criteria.len()
    }

    pub fn is_empty(&self) -> bool {
        self.criteria.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.criteria.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn check_consolidated_size(&self) -> Result<()> {
        if self.len() < CONSOLIDATED_MIN || self.len() > CONSOLIDATED_MAX {
            return Err(Error::Parse {
                request_tag: "criteria_consolidation".into(),
                message: format!(
                    "consolidated criteria set must hold {CONSOLIDATED_MIN} to {CONSOLIDATED_MAX} criteria, got {}",
                    self.len()
                ),
            });
        }
        Ok(())
    }
}

/// A model-generated judgment attached to a demonstration (Table-7-style
/// exemplar body): per-criterion reports plus the synthesized overall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoTrace {
    pub per_criterion: Vec<CriterionReport>,
    pub overall_score: Score,
    pub overall_explanation: String,
}

/// An in-context exemplar: a training instance, optionally with a bootstrapped
/// trace. Untraced demos render as bare (source, response, human score).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub instance: EvalInstance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<DemoTrace>,
}

impl Demonstration {
    pub fn untraced(instance: EvalInstance) -> Self {
        Demonstration {
            instance,
            trace: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Single bare scoring call: no task description, criteria, or explanation.
    Vanilla,
    /// One call judging against all criteria at once: explanation + overall.
    Coarse,
    /// Per-criterion scoring then overall synthesis (two calls).
    Fine,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::Coarse => "coarse",
            Variant::Fine => "fine",
        }
    }

    /// Completion calls per scored instance.
    pub fn calls_per_instance(self) -> u32 {
        match self {
            Variant::Vanilla | Variant::Coarse => 1,
            Variant::Fine => 2,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vanilla" => Ok(Variant::Vanilla),
            "coarse" => Ok(Variant::Coarse),
            "fine" => Ok(Variant::Fine),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected vanilla, coarse, or fine)"
            ))),
        }
    }
}

/// Component switches for the ablation studies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Skip task-description inference; prompts omit the task block.
    pub no_task_description: bool,
    /// Skip criteria inference; substitute the benchmark's human-predefined
    /// criteria.
    pub no_criteria_definition: bool,
    /// Fine variant judges all criteria in one coarse call instead.
    pub no_mcse: bool,
    /// Fine variant averages per-criterion scores instead of the overall call.
    pub no_ose: bool,
    /// Output skeletons request scores only, no explanations.
    pub no_explanations: bool,
    /// Task inference consumes exactly one mini-batch.
    pub single_minibatch: bool,
}

/// The optimized artifact Phi = (T, C, demonstration sets) plus execution
/// switches. `task`/`criteria` are absent exactly when the variant or flags
/// exclude them (vanilla, w/o task description).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationProtocol {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskDescription>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub criteria: Option<CriteriaSet>,
    pub mcse_demos: Vec<Demonstration>,
    pub ose_demos: Vec<Demonstration>,
    pub variant: Variant,
    pub flags: AblationFlags,
}

impl EvaluationProtocol {
    pub fn criteria(&self) -> Result<&CriteriaSet> {
        self.criteria.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "variant '{}' requires a criteria set but the protocol has none",
                self.variant
            ))
        })
    }

    /// Checks the variant/flag-dependent structural invariants.
    pub fn validate(&self) -> Result<()> {
        match self.variant {
            Variant::Vanilla => Ok(()),
            Variant::Coarse | Variant::Fine => {
                let criteria = self.criteria()?;
                criteria.check_consolidated_size().or_else(|_| {
                    // Predefined benchmark criteria may be smaller than a
                    // consolidated set (SFRES defines two aspects); they are
                    // legitimate only under the substitution ablation.
                    if self.flags.no_criteria_definition && !criteria.is_empty() {
                        Ok(())
                    } else {
                        Err(Error::Config(format!(
                            "protocol criteria set size {} outside [{CONSOLIDATED_MIN},{CONSOLIDATED_MAX}]",
                            criteria.len()
                        )))
                    }
                })?;
                if self.task.is_none() && !self.flags.no_task_description {
                    return Err(Error::Config(
                        "protocol lacks a task description and the w/o-task-description flag is off"
                            .into(),
                    ));
                }
                if self.variant == Variant::Fine {
                    let names: BTreeSet<String> = criteria
                        .names()
                        .iter()
                        .map(|n| n.to_lowercase())
                        .collect();
                    for demo in &self.mcse_demos {
                        if let Some(trace) = &demo.trace {
                            let traced: BTreeSet<String> = trace
                                .per_criterion
                                .iter()
                                .map(|r| r.criterion_name.to_lowercase())
                                .collect();
                            if traced != names {
                                return Err(Error::Config(format!(
                                    "demonstration '{}' trace does not cover the criteria set exactly",
                                    demo.instance.id
                                )));
                            }
                        }
                    }
                }
                Ok(())
            }
        }
    }
}

/// Writes the protocol artifact as pretty JSON (stable field order).
pub fn write_protocol(protocol: &EvaluationProtocol, path: &Path) -> Result<()> {
    let body = serde_json::to_vec_pretty(protocol)
        .map_err(|e| Error::Data(format!("serialize protocol: {e}")))?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn read_protocol(path: &Path) -> Result<EvaluationProtocol> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let protocol: EvaluationProtocol = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Data(format!("{}: invalid protocol file: {e}", path.display())))?;
    protocol.validate()?;
    Ok(protocol)
}

/// The human-predefined criteria shipped with each benchmark, substituted for
/// inferred criteria under the w/o-criteria-definition ablation.
pub fn predefined_criteria(benchmark: BenchmarkId) -> CriteriaSet {
    let defs: &[(&str, &str)] = match benchmark {
        BenchmarkId::Summeval => &[
            (
                "Coherence",
                "The summary should be well-structured and well-organized; it should not just be a heap of related information, but should build from sentence to sentence to a coherent body of information about a topic.",
            ),
            (
                "Consistency",
                "The factual alignment between the summary and the summarized source; a factually consistent summary contains only statements that are entailed by the source document.",
            ),
            (
                "Fluency",
                "The summary should have no formatting problems, capitalization errors or obviously ungrammatical sentences (e.g., fragments, missing components) that make the text difficult to read.",
            ),
            (
                "Relevance",
                "The summary should include only important information from the source document.",
            ),
        ],
        BenchmarkId::Topicalchat => &[
            (
                "Naturalness",
                "The degree to which the response reads like something a person would naturally say in the conversation.",
            ),
            (
                "Coherence",
                "The degree to which the response makes sense as a continuation of the dialogue context.",
            ),
            (
                "Engagingness",
                "The degree to which the response is interesting and invites further conversation.",
            ),
            (
                "Groundedness",
                "The degree to which the response makes correct use of the provided knowledge fact.",
            ),
            (
                "Understandability",
                "The degree to which the response can be understood on its own.",
            ),
        ],
        BenchmarkId::Sfres => &[
            (
                "Informativeness",
                "The degree to which the utterance conveys all and only the information in the structured record.",
            ),
            (
                "Naturalness",
                "The degree to which the utterance reads like fluent language a person could have produced.",
            ),
        ],
        BenchmarkId::OpenmevaRoc => &[
            (
                "Fluency",
                "The degree to which the story is grammatical and readable.",
            ),
            (
                "Creativity",
                "The degree to which the story is novel and interesting rather than generic.",
            ),
            (
                "Coherence",
                "The degree to which the story's events follow sensibly from the prompt and from each other.",
            ),
        ],
    };
    CriteriaSet::new(
        defs.iter()
            .map(|(name, definition)| Criterion::new(*name, *definition))
            .collect(),
    )
    .expect("predefined criteria are well-formed")
}
