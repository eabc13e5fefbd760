//! Prompt renderers for the judging stage.
//!
//! The instruction sentences are fixed strings (tests pin them byte-exactly,
//! including the backtick-apostrophe quoting style); only the slots vary. Two
//! exemplar shapes exist: a full traced judgment (criteria definitions,
//! per-criterion JSON, overall) and a raw (source, response, overall score)
//! block. Scores render through the default float formatting, which keeps
//! full precision (e.g. 91.66666666666666).

use crate::corpus::EvalInstance;
use crate::protocol::{CriteriaSet, Demonstration, TaskDescription};
use crate::Score;

use super::CriterionReport;

pub const MCSE_INSTRUCTION: &str = "Your task is to evaluate the response on multiple evaluation criteria with respect to the source on a continuous scale from 0 to 100, and explain your process for scoring each criterion. Rate the response on multiple evaluation criteria and give a brief explanation in a JSON format by filling in the placeholders in [ ].";

pub const MCSE_INSTRUCTION_NO_EXPLANATION: &str = "Your task is to evaluate the response on multiple evaluation criteria with respect to the source on a continuous scale from 0 to 100. Rate the response on multiple evaluation criteria in a JSON format by filling in the placeholders in [ ].";

pub const OSE_INSTRUCTION: &str = "Your task is to rate the overall quality of the response, based on the source and the scores for different criteria of the response on a continuous scale from 0 to 100, where 0 means `completely irrelevant and unclear' and 100 means `perfectly relevant, clear, and engaging.' IMPORTANT!! Only output the score as an `int' and nothing else.";

pub const OSE_EXPLANATION_REQUEST: &str = "\"Also explain your process to get this score to response. Also please perform error Analysis of given response. What should we change to have a better result?\"";

pub const VANILLA_INSTRUCTION: &str = "Your task is to rate the overall quality of the response, based on the source, on a continuous scale from 0 to 100. IMPORTANT!! Only output the score as an `int' and nothing else.";

pub fn format_score(score: Score) -> String {
    score.to_string()
}

fn task_block(task: Option<&TaskDescription>) -> Option<String> {
    task.map(|t| format!("Task Description: {}", t.text))
}

fn criteria_lines(criteria: &CriteriaSet) -> String {
    criteria
        .criteria()
        .iter()
        .map(|c| format!("{}: {}", c.name, c.definition))
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn criteria_block(criteria: &CriteriaSet) -> String {
    format!("Multiple Evaluation Criteria:\n\n{}", criteria_lines(criteria))
}

fn scores_block(reports: &[CriterionReport]) -> String {
    let lines = reports
        .iter()
        .map(|r| format!("{}: {}", r.criterion_name, format_score(r.score)))
        .collect::<Vec<_>>()
        .join("\n");
    format!("Score Of Different Criteria:\n{lines}")
}

fn instance_block(instance: &EvalInstance) -> String {
    format!("Source: {}\n\nResponse: {}", instance.source, instance.response)
}

/// Raw exemplar shape: the bare training triple.
fn raw_exemplar(demo: &Demonstration) -> String {
    format!(
        "{}\n\n\"Score of Overall\": {}",
        instance_block(&demo.instance),
        format_score(demo.instance.human_score)
    )
}

/// Traced exemplar shape: the model judgment replayed in full.
fn traced_exemplar(
    demo: &Demonstration,
    criteria: Option<&CriteriaSet>,
    with_explanations: bool,
) -> String {
    let Some(trace) = &demo.trace else {
        return raw_exemplar(demo);
    };
    let mut sections = vec![instance_block(&demo.instance)];
    if !trace.per_criterion.is_empty() {
        if let Some(criteria) = criteria {
            sections.push(criteria_block(criteria));
        }
        let entries = trace
            .per_criterion
            .iter()
            .map(|r| {
                if with_explanations {
                    format!(
                        "{}: {{\n    Explanation: {},\n    Score: {}\n    }}",
                        r.criterion_name,
                        r.explanation,
                        format_score(r.score)
                    )
                } else {
                    format!(
                        "{}: {{\n    Score: {}\n    }}",
                        r.criterion_name,
                        format_score(r.score)
                    )
                }
            })
            .collect::<Vec<_>>()
            .join(",\n");
        sections.push(format!("Score Of Each Criterion In JSON:\n\n{entries}"));
    }
    if with_explanations && !trace.overall_explanation.is_empty() {
        sections.push(format!("Explanation: {}", trace.overall_explanation));
    }
    sections.push(format!("Score of overall: {}", format_score(trace.overall_score)));
    sections.join("\n\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExemplarShape {
    /// Traced demos render their full judgment; untraced fall back to raw.
    Traced,
    /// Always the raw (source, response, overall score) block.
    Raw,
}

fn exemplar_slot(
    demos: &[Demonstration],
    shape: ExemplarShape,
    criteria: Option<&CriteriaSet>,
    with_explanations: bool,
) -> String {
    if demos.is_empty() {
        return "In-context exemplar:\n(none)".to_string();
    }
    let blocks = demos
        .iter()
        .map(|demo| match shape {
            ExemplarShape::Traced => traced_exemplar(demo, criteria, with_explanations),
            ExemplarShape::Raw => raw_exemplar(demo),
        })
        .collect::<Vec<_>>()
        .join("\n\n");
    format!("In-context exemplar:\n\n{blocks}")
}

fn mcse_skeleton(criteria: &CriteriaSet, with_explanations: bool) -> String {
    let entries = criteria
        .criteria()
        .iter()
        .map(|c| {
            if with_explanations {
                format!(
                    "{}: {{\n    Explanation: \"[your explanation]\",\n    Score: \"[score from 0 to 100]\" }}",
                    c.name
                )
            } else {
                format!("{}: {{\n    Score: \"[score from 0 to 100]\" }}", c.name)
            }
        })
        .collect::<Vec<_>>()
        .join(",\n");
    format!("Output format:\n\nScore Of Each Criterion In JSON:\n\n{{\n{entries}\n}}")
}

/// The multi-criteria judging prompt (stage 2, first call of the fine path).
pub fn render_mcse_prompt(
    task: Option<&TaskDescription>,
    criteria: &CriteriaSet,
    demos: &[Demonstration],
    instance: &EvalInstance,
    no_explanations: bool,
) -> String {
    let with_explanations = !no_explanations;
    let mut sections = Vec::new();
    if let Some(block) = task_block(task) {
        sections.push(block);
    }
    sections.push(
        if with_explanations {
            MCSE_INSTRUCTION
        } else {
            MCSE_INSTRUCTION_NO_EXPLANATION
        }
        .to_string(),
    );
    sections.push(exemplar_slot(
        demos,
        ExemplarShape::Traced,
        Some(criteria),
        with_explanations,
    ));
    sections.push(instance_block(instance));
    sections.push(criteria_block(criteria));
    sections.push(mcse_skeleton(criteria, with_explanations));
    sections.join("\n\n")
}

/// The overall judging prompt (second call of the fine path, and the single
/// coarse call when `coarse_criteria` is given instead of `reports`).
pub fn render_ose_prompt(
    task: Option<&TaskDescription>,
    reports: &[CriterionReport],
    demos: &[Demonstration],
    instance: &EvalInstance,
    coarse_criteria: Option<&CriteriaSet>,
    no_explanations: bool,
) -> String {
    let with_explanations = !no_explanations;
    let mut sections = Vec::new();
    if let Some(block) = task_block(task) {
        sections.push(block);
    }
    sections.push(OSE_INSTRUCTION.to_string());
    if with_explanations {
        sections.push(OSE_EXPLANATION_REQUEST.to_string());
    }
    sections.push(exemplar_slot(demos, ExemplarShape::Raw, None, with_explanations));
    sections.push(instance_block(instance));
    if let Some(criteria) = coarse_criteria {
        sections.push(criteria_block(criteria));
    }
    if !reports.is_empty() {
        sections.push(scores_block(reports));
    }
    sections.push(if with_explanations {
        "Output format:\n\nExplanation:\nScore Of Overall:".to_string()
    } else {
        "Output format:\n\nScore Of Overall:".to_string()
    });
    sections.join("\n\n")
}

/// Coarse exemplars may carry a bootstrapped (explanation, overall) trace.
pub fn render_coarse_exemplar(demo: &Demonstration, no_explanations: bool) -> String {
    match &demo.trace {
        Some(trace) => {
            let mut sections = vec![instance_block(&demo.instance)];
            if !no_explanations && !trace.overall_explanation.is_empty() {
                sections.push(format!("Explanation: {}", trace.overall_explanation));
            }
            sections.push(format!("Score of overall: {}", format_score(trace.overall_score)));
            sections.join("\n\n")
        }
        None => raw_exemplar(demo),
    }
}

/// Like [`render_ose_prompt`] but exemplars use the coarse traced shape.
pub fn render_coarse_prompt(
    task: Option<&TaskDescription>,
    criteria: &CriteriaSet,
    demos: &[Demonstration],
    instance: &EvalInstance,
    no_explanations: bool,
) -> String {
    let with_explanations = !no_explanations;
    let mut sections = Vec::new();
    if let Some(block) = task_block(task) {
        sections.push(block);
    }
    sections.push(OSE_INSTRUCTION.to_string());
    if with_explanations {
        sections.push(OSE_EXPLANATION_REQUEST.to_string());
    }
    let exemplars = if demos.is_empty() {
        "In-context exemplar:\n(none)".to_string()
    } else {
        let blocks = demos
            .iter()
            .map(|d| render_coarse_exemplar(d, no_explanations))
            .collect::<Vec<_>>()
            .join("\n\n");
        format!("In-context exemplar:\n\n{blocks}")
    };
    sections.push(exemplars);
    sections.push(instance_block(instance));
    sections.push(criteria_block(criteria));
    sections.push(if with_explanations {
        "Output format:\n\nExplanation:\nScore Of Overall:".to_string()
    } else {
        "Output format:\n\nScore Of Overall:".to_string()
    });
    sections.join("\n\n")
}

/// The bare direct-scoring prompt: exemplars and the instance, nothing else.
pub fn render_vanilla_prompt(demos: &[Demonstration], instance: &EvalInstance) -> String {
    let mut sections = vec![VANILLA_INSTRUCTION.to_string()];
    sections.push(exemplar_slot(demos, ExemplarShape::Raw, None, false));
    sections.push(instance_block(instance));
    sections.push("Output format:\n\nScore Of Overall:".to_string());
    sections.join("\n\n")
}
