//! Stage 1: inferring what the evaluation task is and which criteria matter,
//! from mini-batches of human-scored examples.
//!
//! The loop observes one mini-batch at a time (each observation sees all
//! prior notes), periodically condenses the notes into a candidate task
//! description plus a candidate criteria set, and stops early when the model
//! answers with the literal sentinel "COMPLETE" or when the candidate cap is
//! reached. A final pass ensembles the candidate descriptions and
//! consolidates the candidate criteria into the 4-to-10 set the scoring
//! stage requires.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{Dataset, MiniBatch};
use crate::error::{Error, Result};
use crate::gateway::{Gateway, LlmRequest};
use crate::protocol::{CriteriaSet, TaskDescription};
use crate::scoring::parse;
use crate::scoring::render::format_score;

/// Stop sentinel checked verbatim against raw observation responses.
pub const STOP_SENTINEL: &str = "COMPLETE";

/// Fallback task-type phrase when no task description is available.
const GENERIC_TASK_TYPE: &str = "the generated responses";

const OBSERVE_INSTRUCTION: &str = "Given several examples from an NLG evaluation dataset where each entry consists of a `Source' text and its corresponding `Response', along with a score that evaluates the response quality.\n\nPlease write observations about trends that hold for most or all of the samples.\n\nI will also provide you with some previous observations I have already made.  Please add your observations or if you feel the observations are comprehensive say `COMPLETE'.\n\nSome areas you may consider in your observations: content and structure, scenario, task, evaluation objective, evaluation criteria, etc.\n\nIt will be useful to make an educated guess as to the nature of the task this dataset will enable. Don't be afraid to be creative.";

const SUMMARIZE_INSTRUCTION: &str = "Given a series of observations I have made and some description about this NLG evaluation dataset.\n\n    1. Identify the type of evaluation task. Possible tasks include: machine translation, text summarization, data-to-text generation, dialogue generation, image description, text simplification, story generation, paraphrase generation, textual entailment, reasoning, etc.\n\n    2. What this evaluation task refers to evaluating.\n\n    3. Output the relationship between `Source' and `Response' in this task in 1-3 sentences.\n\n    4. Given a summary in fill [ ]: The evaluation task is [ ], which refers to evaluating [ ] generated from [ ]. The relationship between `Source' and `Response' is [ ].";

const JSON_OUTPUT_INSTRUCTION: &str = "Output in JSON format: aspect as key, description as value.";

const JSON_REPAIR_SUFFIX: &str = "Output valid JSON only.";

fn propose_instruction(task_type: &str) -> String {
    format!("Given a task description about this NLG evaluation dataset and a series of observations I have made.\n\nYour task is to list ten aspects that can be considered when measuring the overall quality of {task_type}.")
}

fn consolidate_instruction(task_type: &str) -> String {
    format!("From the provided sets of criteria for evaluating {task_type}, identify the key aspects that are essential for this task.  Select between 4 to 10 criteria that best align with the goals of your evaluation task and prioritize them based on their importance to the overall quality of the {task_type}.")
}

/// One mini-batch's worth of model observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationNote {
    pub batch_index: usize,
    pub text: String,
    /// True iff the raw response contained the stop sentinel.
    pub complete: bool,
}

/// One gateway exchange kept for the audit trail. Latency is wall-clock and
/// excluded from any byte-level comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceEvent {
    pub tag: String,
    pub prompt: String,
    pub response: String,
    pub latency_ms: u128,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parsed: Option<serde_json::Value>,
}

/// The full audit trail of one inference run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct InferenceTranscript {
    pub events: Vec<InferenceEvent>,
}

impl InferenceTranscript {
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("cannot serialize inference transcript: {e}")))?;
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }
}

/// Knobs for the inference loop; defaults mirror the published setup.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceSettings {
    pub batch_size: usize,
    pub max_batches: usize,
    /// Cap on candidate (description, criteria) pairs.
    pub candidate_cap: usize,
    pub seed: u64,
    /// Ablation: derive everything from the first mini-batch only.
    pub single_minibatch: bool,
    /// Ablation: skip task summaries entirely.
    pub no_task_description: bool,
    /// Ablation: skip criteria proposal/consolidation (the caller substitutes
    /// a human-predefined set).
    pub no_criteria: bool,
}

impl Default for InferenceSettings {
    fn default() -> Self {
        InferenceSettings {
            batch_size: 5,
            max_batches: 25,
            candidate_cap: 5,
            seed: 0,
            single_minibatch: false,
            no_task_description: false,
            no_criteria: false,
        }
    }
}

/// What `infer` hands back: the protocol ingredients plus the audit trail.
#[derive(Debug, Clone)]
pub struct InferenceOutcome {
    pub task: Option<TaskDescription>,
    pub criteria: Option<CriteriaSet>,
    pub notes: Vec<ObservationNote>,
    pub candidate_tasks: Vec<TaskDescription>,
    pub candidate_criteria: Vec<CriteriaSet>,
    pub transcript: InferenceTranscript,
}

fn numbered_block(label: &str, items: &[String]) -> String {
    if items.is_empty() {
        return format!("{label}:\n(none)");
    }
    let body = items
        .iter()
        .enumerate()
        .map(|(i, item)| format!("{}. {}", i + 1, item))
        .collect::<Vec<_>>()
        .join("\n");
    format!("{label}:\n{body}")
}

fn examples_block(batch: &MiniBatch) -> String {
    batch
        .instances
        .iter()
        .map(|inst| {
            format!(
                "Source: {}\n\nResponse: {}\n\nScore: {}",
                inst.source,
                inst.response,
                format_score(inst.human_score)
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Builds the per-batch observation prompt.
pub fn render_observe_prompt(batch: &MiniBatch, prior: &[ObservationNote]) -> String {
    let notes: Vec<String> = prior.iter().map(|n| n.text.clone()).collect();
    [
        OBSERVE_INSTRUCTION.to_string(),
        examples_block(batch),
        numbered_block("Previous observations", &notes),
    ]
    .join("\n\n")
}

/// Builds the task-summary prompt; `prior` carries every candidate
/// description for the final ensemble pass.
pub fn render_summarize_prompt(
    observations: &[ObservationNote],
    prior: &[TaskDescription],
) -> String {
    let notes: Vec<String> = observations.iter().map(|n| n.text.clone()).collect();
    let priors: Vec<String> = prior.iter().map(|t| t.text.clone()).collect();
    [
        SUMMARIZE_INSTRUCTION.to_string(),
        numbered_block("Observations", &notes),
        numbered_block("Prior task description", &priors),
    ]
    .join("\n\n")
}

/// Builds the criteria-proposal prompt. Without a task description the task
/// block is omitted and a generic task-type phrase is used.
pub fn render_propose_prompt(
    task: Option<&TaskDescription>,
    observations: &[ObservationNote],
) -> String {
    let task_type = task.map_or(GENERIC_TASK_TYPE.to_string(), |t| task_type_of(t));
    let notes: Vec<String> = observations.iter().map(|n| n.text.clone()).collect();
    let mut sections = vec![propose_instruction(&task_type)];
    if let Some(task) = task {
        sections.push(format!("Task Description: {}", task.text));
    }
    sections.push(numbered_block("Observations", &notes));
    sections.push(JSON_OUTPUT_INSTRUCTION.to_string());
    sections.join("\n\n")
}

/// Builds the consolidation prompt over all candidate criteria sets.
pub fn render_consolidate_prompt(
    candidates: &[CriteriaSet],
    task: Option<&TaskDescription>,
) -> String {
    let task_type = task.map_or(GENERIC_TASK_TYPE.to_string(), |t| task_type_of(t));
    let sets = candidates
        .iter()
        .enumerate()
        .map(|(i, set)| {
            let lines = set
                .criteria()
                .iter()
                .map(|c| format!("{}: {}", c.name, c.definition))
                .collect::<Vec<_>>()
                .join("\n");
            format!("Set {}:\n{}", i + 1, lines)
        })
        .collect::<Vec<_>>()
        .join("\n\n");
    [
        consolidate_instruction(&task_type),
        format!("Sets of criteria:\n\n{sets}"),
        JSON_OUTPUT_INSTRUCTION.to_string(),
    ]
    .join("\n\n")
}

/// Pulls the task-type phrase out of a filled summary ("The evaluation task
/// is X, which refers to ..." yields "X").
pub fn task_type_of(task: &TaskDescription) -> String {
    const LEAD: &str = "The evaluation task is ";
    if let Some(start) = task.text.find(LEAD) {
        let rest = &task.text[start + LEAD.len()..];
        let end = rest.find([',', '.', '\n']).unwrap_or(rest.len());
        let phrase = rest[..end].trim();
        if !phrase.is_empty() && !phrase.starts_with('[') {
            return phrase.to_string();
        }
    }
    GENERIC_TASK_TYPE.to_string()
}

/// Extracts the filled summary sentence(s) from a raw response. Returns the
/// text plus whether extraction fell back to the whole response.
fn extract_summary(response: &str) -> (String, bool) {
    const LEAD: &str = "The evaluation task is ";
    // Skip echoes of the unfilled skeleton ("The evaluation task is [ ]").
    let mut best: Option<usize> = None;
    let mut from = 0;
    while let Some(pos) = response[from..].find(LEAD) {
        let at = from + pos;
        let rest = &response[at + LEAD.len()..];
        if !rest.trim_start().starts_with('[') {
            best = Some(at);
        }
        from = at + LEAD.len();
    }
    match best {
        Some(at) => {
            let tail = &response[at..];
            let end = tail.find("\n\n").unwrap_or(tail.len());
            (tail[..end].trim().to_string(), false)
        }
        None => (response.trim().to_string(), true),
    }
}

/// Runs stage-1 calls against a gateway and accumulates the audit trail.
pub struct TaskInference<'a> {
    pub gateway: &'a Gateway,
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
    transcript: InferenceTranscript,
}

impl<'a> TaskInference<'a> {
    pub fn new(gateway: &'a Gateway, model_id: impl Into<String>) -> Self {
        TaskInference {
            gateway,
            model_id: model_id.into(),
            temperature: 0.0,
            max_tokens: 2048,
            transcript: InferenceTranscript::default(),
        }
    }

    pub fn transcript(&self) -> &InferenceTranscript {
        &self.transcript
    }

    fn call(&mut self, prompt: String, tag: &str) -> Result<String> {
        let request = LlmRequest {
            prompt: prompt.clone(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            model_id: self.model_id.clone(),
            request_tag: tag.to_string(),
        };
        let started = Instant::now();
        let response = self.gateway.complete(&request)?;
        self.transcript.events.push(InferenceEvent {
            tag: tag.to_string(),
            prompt,
            response: response.text.clone(),
            latency_ms: started.elapsed().as_millis(),
            parsed: None,
        });
        Ok(response.text)
    }

    fn attach_parsed(&mut self, parsed: serde_json::Value) {
        if let Some(event) = self.transcript.events.last_mut() {
            event.parsed = Some(parsed);
        }
    }

    /// Observes one mini-batch in the context of all prior notes.
    pub fn observe_batch(
        &mut self,
        batch: &MiniBatch,
        prior: &[ObservationNote],
    ) -> Result<ObservationNote> {
        if batch.instances.is_empty() {
            return Err(Error::Data(format!(
                "mini-batch {} is empty",
                batch.index
            )));
        }
        let prompt = render_observe_prompt(batch, prior);
        let response = self.call(prompt, "observation")?;
        let complete = response.contains(STOP_SENTINEL);
        self.attach_parsed(json!({ "complete": complete }));
        Ok(ObservationNote {
            batch_index: batch.index,
            text: response.trim().to_string(),
            complete,
        })
    }

    /// Condenses the notes into a task description; `prior` holds earlier
    /// candidates (all of them, for the final ensemble pass).
    pub fn summarize_task(
        &mut self,
        observations: &[ObservationNote],
        prior: &[TaskDescription],
    ) -> Result<TaskDescription> {
        if observations.is_empty() {
            return Err(Error::Data("task summary needs at least one observation".into()));
        }
        let prompt = render_summarize_prompt(observations, prior);
        let response = self.call(prompt, "task_summary")?;
        let (text, fallback) = extract_summary(&response);
        let mut task = TaskDescription::new(
            text,
            observations.iter().map(|n| n.batch_index).collect(),
        )?;
        task.extraction_fallback = fallback;
        self.attach_parsed(json!({
            "text": task.text,
            "extraction_fallback": fallback,
        }));
        Ok(task)
    }

    /// Asks for up to ten candidate criteria as a JSON object. One repair
    /// re-prompt on parse failure, then a hard error.
    pub fn propose_criteria(
        &mut self,
        task: Option<&TaskDescription>,
        observations: &[ObservationNote],
    ) -> Result<CriteriaSet> {
        let tag = "criteria_proposal";
        let prompt = render_propose_prompt(task, observations);
        let response = self.call(prompt.clone(), tag)?;
        let criteria = match parse::parse_criteria(&response, tag) {
            Ok(c) => c,
            Err(_) => {
                let repair = format!("{prompt}\n\n{JSON_REPAIR_SUFFIX}");
                let response = self.call(repair, tag)?;
                parse::parse_criteria(&response, tag)?
            }
        };
        // Candidate sets are capped at ten; extra keys are dropped in order.
        let truncated: Vec<_> = criteria.into_iter().take(10).collect();
        let set = CriteriaSet::new(truncated)?;
        self.attach_parsed(json!({ "criteria": set.names() }));
        Ok(set)
    }

    /// Merges candidate sets into the final 4-to-10 criteria. Parse failures
    /// and size violations share a single repair re-prompt.
    pub fn consolidate_criteria(
        &mut self,
        candidates: &[CriteriaSet],
        task: Option<&TaskDescription>,
    ) -> Result<CriteriaSet> {
        if candidates.is_empty() {
            return Err(Error::Data("consolidation needs at least one candidate set".into()));
        }
        let tag = "criteria_consolidation";
        let prompt = render_consolidate_prompt(candidates, task);
        let parse_final = |response: &str| -> Result<CriteriaSet> {
            let set = CriteriaSet::new(parse::parse_criteria(response, tag)?)?;
            set.check_consolidated_size()?;
            Ok(set)
        };
        let response = self.call(prompt.clone(), tag)?;
        let set = match parse_final(&response) {
            Ok(set) => set,
            Err(_) => {
                let repair = format!("{prompt}\n\n{JSON_REPAIR_SUFFIX}");
                let response = self.call(repair, tag)?;
                parse_final(&response)?
            }
        };
        self.attach_parsed(json!({ "criteria": set.names() }));
        Ok(set)
    }

    /// The full stage-1 loop.
    pub fn infer(
        &mut self,
        train: &Dataset,
        settings: &InferenceSettings,
    ) -> Result<InferenceOutcome> {
        let max_batches = if settings.single_minibatch {
            1
        } else {
            settings.max_batches
        };
        let batches =
            crate::corpus::minibatch(train, settings.batch_size, max_batches, settings.seed)?;
        if settings.candidate_cap == 0 {
            return Err(Error::Config("candidate_cap must be > 0".into()));
        }
        if settings.no_task_description && settings.no_criteria {
            return Err(Error::Config(
                "nothing to infer: both task description and criteria are disabled".into(),
            ));
        }

        let mut notes: Vec<ObservationNote> = Vec::new();
        let mut candidate_tasks: Vec<TaskDescription> = Vec::new();
        let mut candidate_criteria: Vec<CriteriaSet> = Vec::new();

        for batch in &batches {
            let note = self.observe_batch(batch, &notes)?;
            let complete = note.complete;
            notes.push(note);
            // The completing batch still contributes a candidate pair.
            let task = if settings.no_task_description {
                None
            } else {
                let prior: Vec<TaskDescription> =
                    candidate_tasks.last().cloned().into_iter().collect();
                let task = self.summarize_task(&notes, &prior)?;
                candidate_tasks.push(task.clone());
                Some(task)
            };
            if !settings.no_criteria {
                candidate_criteria.push(self.propose_criteria(task.as_ref(), &notes)?);
            }
            let candidates = candidate_tasks.len().max(candidate_criteria.len());
            if complete || candidates >= settings.candidate_cap {
                break;
            }
        }

        // Ensemble pass: with a single candidate the ensemble is an identity
        // and costs no extra call.
        let task = if settings.no_task_description {
            None
        } else if candidate_tasks.len() == 1 {
            Some(candidate_tasks[0].clone())
        } else {
            Some(self.summarize_task(&notes, &candidate_tasks)?)
        };
        let criteria = if settings.no_criteria {
            None
        } else {
            Some(self.consolidate_criteria(&candidate_criteria, task.as_ref())?)
        };

        Ok(InferenceOutcome {
            task,
            criteria,
            notes,
            candidate_tasks,
            candidate_criteria,
            transcript: self.transcript.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::corpus::EvalInstance;
    use crate::gateway::{CountingBackend, Rule, ScriptedBackend};

    const TEN_CRITERIA_JSON: &str = r#"{"Coherence": "logical flow", "Conciseness": "brevity", "Coverage": "completeness", "Accuracy": "factuality", "Fluency": "grammar", "Relevance": "topicality", "Clarity": "comprehensibility", "Engagement": "reader interest", "Structure": "organization", "Tone": "style fit"}"#;
    const EIGHT_CRITERIA_JSON: &str = r#"{"Coherence": "logical flow", "Conciseness": "brevity", "Coverage": "completeness", "Accuracy": "factuality", "Fluency": "grammar", "Relevance": "topicality", "Clarity": "comprehensibility", "Engagement": "reader interest"}"#;
    const SUMMARY_RESPONSE: &str = "1. The task is summarization.\n2. Quality of summaries.\n3. The response condenses the source.\n4. The evaluation task is text summarization, which refers to evaluating the quality of summaries generated from the source text. The relationship between `Source' and `Response' is that the response is a condensed version of the source.";

    fn dataset(n: usize) -> Dataset {
        let instances = (0..n)
            .map(|i| EvalInstance {
                id: format!("i{i}"),
                source: format!("source {i}"),
                response: format!("response {i}"),
                human_score: 60.0 + i as f64,
                meta: None,
            })
            .collect();
        Dataset::new("summeval", instances).unwrap()
    }

    fn batch(n: usize) -> MiniBatch {
        MiniBatch {
            index: 0,
            instances: dataset(n).instances,
        }
    }

    fn scripted(observe_reply: &str) -> ScriptedBackend {
        ScriptedBackend::new(vec![
            Rule::substring("Please write observations about trends", observe_reply),
            Rule::substring("Identify the type of evaluation task", SUMMARY_RESPONSE),
            Rule::substring("list ten aspects", TEN_CRITERIA_JSON),
            Rule::substring("Select between 4 to 10 criteria", EIGHT_CRITERIA_JSON),
        ])
    }

    #[test]
    fn observe_prompt_contains_all_triples_in_order() {
        let b = batch(5);
        let prompt = render_observe_prompt(&b, &[]);
        assert!(prompt.contains("Please write observations about trends"));
        assert!(prompt.contains("Previous observations:\n(none)"));
        let mut last = 0;
        for inst in &b.instances {
            let pos = prompt.find(&format!("Source: {}", inst.source)).unwrap();
            assert!(pos > last);
            last = pos;
            assert!(prompt.contains(&format!("Response: {}", inst.response)));
            assert!(prompt.contains(&format!("Score: {}", format_score(inst.human_score))));
        }
    }

    #[test]
    fn observe_detects_stop_sentinel() {
        let gateway = Gateway::new(Box::new(scripted(
            "The observations are comprehensive. COMPLETE",
        )));
        let mut inf = TaskInference::new(&gateway, "m");
        let note = inf.observe_batch(&batch(3), &[]).unwrap();
        assert!(note.complete);
        let gateway = Gateway::new(Box::new(scripted("Scores reward concise summaries.")));
        let mut inf = TaskInference::new(&gateway, "m");
        let note = inf.observe_batch(&batch(3), &[]).unwrap();
        assert!(!note.complete);
    }

    #[test]
    fn summary_extraction_finds_filled_skeleton() {
        let (text, fallback) = extract_summary(SUMMARY_RESPONSE);
        assert!(!fallback);
        assert!(text.starts_with("The evaluation task is text summarization"));
        // The unfilled skeleton echo is skipped.
        let echoed = format!(
            "The evaluation task is [ ], which refers to evaluating [ ].\n\n{SUMMARY_RESPONSE}"
        );
        let (text, fallback) = extract_summary(&echoed);
        assert!(!fallback);
        assert!(text.starts_with("The evaluation task is text summarization"));
        // No skeleton at all: whole response kept, flagged.
        let (text, fallback) = extract_summary("This dataset scores summaries.");
        assert!(fallback);
        assert_eq!(text, "This dataset scores summaries.");
    }

    #[test]
    fn task_type_extraction() {
        let task =
            TaskDescription::new("The evaluation task is text summarization, which refers to evaluating summaries.", vec![0]).unwrap();
        assert_eq!(task_type_of(&task), "text summarization");
        let task = TaskDescription::new("Summaries are judged for quality.", vec![0]).unwrap();
        assert_eq!(task_type_of(&task), GENERIC_TASK_TYPE);
    }

    #[test]
    fn propose_truncates_to_ten_and_preserves_order() {
        let twelve: String = format!(
            "{{{}}}",
            (0..12)
                .map(|i| format!("\"C{i}\": \"def {i}\""))
                .collect::<Vec<_>>()
                .join(", ")
        );
        let backend = ScriptedBackend::new(vec![Rule::substring("list ten aspects", &twelve)]);
        let gateway = Gateway::new(Box::new(backend));
        let mut inf = TaskInference::new(&gateway, "m");
        let task = TaskDescription::new("The evaluation task is story generation.", vec![0]).unwrap();
        let note = ObservationNote {
            batch_index: 0,
            text: "stories vary in creativity".into(),
            complete: false,
        };
        let set = inf.propose_criteria(Some(&task), &[note]).unwrap();
        assert_eq!(set.len(), 10);
        assert_eq!(set.names()[0], "C0");
        assert_eq!(set.names()[9], "C9");
    }

    #[test]
    fn consolidation_repairs_once_then_errors_on_undersized_set() {
        let backend = Arc::new(CountingBackend::new(ScriptedBackend::new(vec![
            Rule::substring(
                "Select between 4 to 10 criteria",
                r#"{"Fluency": "grammar", "Accuracy": "factuality", "Coverage": "completeness"}"#,
            ),
        ])));
        let gateway = Gateway::new(Box::new(backend.clone()));
        let mut inf = TaskInference::new(&gateway, "m");
        let candidates = vec![CriteriaSet::new(
            (0..6)
                .map(|i| crate::protocol::Criterion::new(format!("C{i}"), "d"))
                .collect(),
        )
        .unwrap()];
        let err = inf.consolidate_criteria(&candidates, None).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        assert_eq!(backend.total(), 2);
        let prompts = backend.prompts();
        assert!(prompts[1].1.ends_with(JSON_REPAIR_SUFFIX));
    }

    #[test]
    fn infer_stops_on_complete_at_second_batch() {
        use std::sync::atomic::{AtomicU32, Ordering};
        let observe_calls = Arc::new(AtomicU32::new(0));
        let observe_calls2 = observe_calls.clone();
        let backend = crate::gateway::FnBackend::new(move |req: &LlmRequest| {
            match req.request_tag.as_str() {
                "observation" => {
                    let n = observe_calls2.fetch_add(1, Ordering::SeqCst);
                    if n == 0 {
                        "Scores reward concise summaries.".to_string()
                    } else {
                        "Nothing further. COMPLETE".to_string()
                    }
                }
                "task_summary" => SUMMARY_RESPONSE.to_string(),
                "criteria_proposal" => TEN_CRITERIA_JSON.to_string(),
                "criteria_consolidation" => EIGHT_CRITERIA_JSON.to_string(),
                other => panic!("unexpected tag {other}"),
            }
        });
        let counting = Arc::new(CountingBackend::new(backend));
        let gateway = Gateway::new(Box::new(counting.clone()));
        let mut inf = TaskInference::new(&gateway, "m");
        let outcome = inf.infer(&dataset(30), &InferenceSettings::default()).unwrap();
        assert_eq!(counting.counts().get("observation"), Some(&2));
        assert_eq!(outcome.notes.len(), 2);
        assert!(outcome.notes[1].complete);
        assert_eq!(outcome.candidate_tasks.len(), 2);
        assert_eq!(outcome.candidate_criteria.len(), 2);
        // Final pass: one ensemble summary plus one consolidation.
        assert_eq!(counting.counts().get("task_summary"), Some(&3));
        assert_eq!(counting.counts().get("criteria_consolidation"), Some(&1));
        assert_eq!(outcome.criteria.unwrap().len(), 8);
        assert!(outcome.task.unwrap().text.starts_with("The evaluation task is text summarization"));
    }

    #[test]
    fn infer_caps_candidates_at_five_without_complete() {
        let counting = Arc::new(CountingBackend::new(scripted(
            "Scores reward concise summaries.",
        )));
        let gateway = Gateway::new(Box::new(counting.clone()));
        let mut inf = TaskInference::new(&gateway, "m");
        // 30 instances / batch_size 5 = 6 batches available, cap stops at 5.
        let outcome = inf.infer(&dataset(30), &InferenceSettings::default()).unwrap();
        assert_eq!(counting.counts().get("observation"), Some(&5));
        assert_eq!(outcome.candidate_tasks.len(), 5);
        assert_eq!(outcome.candidate_criteria.len(), 5);
        // 5 in-loop summaries + 1 ensemble.
        assert_eq!(counting.counts().get("task_summary"), Some(&6));
        assert_eq!(counting.counts().get("criteria_proposal"), Some(&5));
        assert_eq!(counting.counts().get("criteria_consolidation"), Some(&1));
    }

    #[test]
    fn single_minibatch_mode_makes_four_calls() {
        let counting = Arc::new(CountingBackend::new(scripted(
            "Scores reward concise summaries.",
        )));
        let gateway = Gateway::new(Box::new(counting.clone()));
        let mut inf = TaskInference::new(&gateway, "m");
        let settings = InferenceSettings {
            single_minibatch: true,
            ..InferenceSettings::default()
        };
        let outcome = inf.infer(&dataset(30), &settings).unwrap();
        // One observation, one summary, one proposal, one consolidation.
        assert_eq!(counting.total(), 4);
        assert_eq!(counting.counts().get("observation"), Some(&1));
        assert_eq!(counting.counts().get("task_summary"), Some(&1));
        assert_eq!(counting.counts().get("criteria_proposal"), Some(&1));
        assert_eq!(counting.counts().get("criteria_consolidation"), Some(&1));
        assert!(outcome.task.is_some());
    }

    #[test]
    fn no_task_description_skips_all_summaries() {
        let counting = Arc::new(CountingBackend::new(scripted(
            "Nothing further. COMPLETE",
        )));
        let gateway = Gateway::new(Box::new(counting.clone()));
        let mut inf = TaskInference::new(&gateway, "m");
        let settings = InferenceSettings {
            no_task_description: true,
            ..InferenceSettings::default()
        };
        let outcome = inf.infer(&dataset(30), &settings).unwrap();
        assert!(outcome.task.is_none());
        assert_eq!(counting.counts().get("task_summary"), None);
        // Proposal prompt uses the generic task type and no task block.
        let prompts = counting.prompts();
        let proposal_prompt = &prompts
            .iter()
            .find(|(tag, _)| tag == "criteria_proposal")
            .unwrap()
            .1;
        assert!(proposal_prompt.contains(GENERIC_TASK_TYPE));
        assert!(!proposal_prompt.contains("Task Description:"));
    }

    #[test]
    fn no_criteria_mode_only_summarizes() {
        let counting = Arc::new(CountingBackend::new(scripted(
            "Scores reward concise summaries.",
        )));
        let gateway = Gateway::new(Box::new(counting.clone()));
        let mut inf = TaskInference::new(&gateway, "m");
        let settings = InferenceSettings {
            no_criteria: true,
            ..InferenceSettings::default()
        };
        let outcome = inf.infer(&dataset(30), &settings).unwrap();
        assert!(outcome.criteria.is_none());
        assert!(outcome.task.is_some());
        assert_eq!(counting.counts().get("criteria_proposal"), None);
        assert_eq!(counting.counts().get("criteria_consolidation"), None);
        // Cap still applies, now to task candidates.
        assert_eq!(counting.counts().get("observation"), Some(&5));
        assert_eq!(outcome.candidate_tasks.len(), 5);

        // Disabling both halves is a config error.
        let gateway = Gateway::new(Box::new(scripted("x")));
        let mut inf = TaskInference::new(&gateway, "m");
        let settings = InferenceSettings {
            no_criteria: true,
            no_task_description: true,
            ..InferenceSettings::default()
        };
        assert!(matches!(
            inf.infer(&dataset(30), &settings),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn transcript_is_deterministic_across_runs() {
        let run = || {
            let gateway = Gateway::new(Box::new(scripted("Scores reward concise summaries.")));
            let mut inf = TaskInference::new(&gateway, "m");
            inf.infer(&dataset(30), &InferenceSettings::default())
                .unwrap()
                .transcript
                .events
                .iter()
                .map(|e| (e.tag.clone(), e.prompt.clone(), e.response.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn transcript_file_round_trips(){
        let gateway = Gateway::new(Box::new(scripted("Nothing further. COMPLETE")));
        let mut inf = TaskInference::new(&gateway, "m");
        let outcome = inf.infer(&dataset(10), &InferenceSettings::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inference.json");
        outcome.transcript.write(&path).unwrap();
        let loaded: InferenceTranscript =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(loaded.events.len(), outcome.transcript.events.len());
        assert!(loaded.events.iter().any(|e| e.tag == "criteria_consolidation"));
    }
}
