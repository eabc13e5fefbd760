//! Stage 2: judging instances under a protocol.
//!
//! Three variants: `vanilla` (one bare call), `coarse` (one call judging all
//! criteria at once), `fine` (per-criterion judgment then overall synthesis).
//! Each scoring call gets at most one repair re-prompt on parse failure; a
//! second failure is a hard error attributed to the instance, which the
//! caller counts as an exclusion rather than aborting the run.

pub mod parse;
pub mod render;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::EvalInstance;
use crate::error::{Error, Result};
use crate::gateway::{Gateway, LlmRequest};
use crate::protocol::{Demonstration, EvaluationProtocol, Variant};
use crate::Score;

/// One criterion's judgment: (score, explanation) plus a clamp marker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionReport {
    pub criterion_name: String,
    pub score: Score,
    pub explanation: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub clamped: bool,
}

/// A prompt/response pair kept when transcripts are enabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub tag: String,
    pub prompt: String,
    pub response: String,
}

/// The full judgment of one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub instance_id: String,
    /// Empty for the vanilla and coarse variants.
    pub per_criterion: Vec<CriterionReport>,
    pub overall_score: Score,
    pub overall_explanation: String,
    /// The variant that actually executed (a fine run with the w/o-McS-E flag
    /// records coarse here, matching the report's shape).
    pub variant: Variant,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub raw_transcript: Vec<TranscriptEntry>,
}

/// Unweighted mean of per-criterion scores (the w/o-OS-E ablation's overall).
pub fn average_overall(reports: &[CriterionReport]) -> Result<Score> {
    if reports.is_empty() {
        return Err(Error::Data("cannot average an empty report list".into()));
    }
    Ok(reports.iter().map(|r| r.score).sum::<Score>() / reports.len() as Score)
}

const JSON_REPAIR_SUFFIX: &str = "Output valid JSON only.";
const OVERALL_REPAIR_SUFFIX: &str = "Output the overall score after `Score Of Overall:'.";

/// Executes scoring calls against a gateway with fixed decoding settings.
pub struct Scorer<'a> {
    pub gateway: &'a Gateway,
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub keep_transcripts: bool,
}

impl<'a> Scorer<'a> {
    pub fn new(gateway: &'a Gateway, model_id: impl Into<String>) -> Self {
        Scorer {
            gateway,
            model_id: model_id.into(),
            temperature: 0.0,
            max_tokens: 2048,
            keep_transcripts: false,
        }
    }

    fn request(&self, prompt: String, tag: &str) -> LlmRequest {
        LlmRequest {
            prompt,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            model_id: self.model_id.clone(),
            request_tag: tag.to_string(),
        }
    }

    /// One call, then at most one repair re-prompt; the repair's parse error
    /// is final. Returns transcript entries for every call actually made.
    fn complete_parsed<T>(
        &self,
        prompt: String,
        tag: &str,
        repair_suffix: &str,
        parse: impl Fn(&str) -> Result<T>,
    ) -> Result<(T, Vec<TranscriptEntry>, bool)> {
        let mut transcript = Vec::new();
        let response = self.gateway.complete(&self.request(prompt.clone(), tag))?;
        if self.keep_transcripts {
            transcript.push(TranscriptEntry {
                tag: tag.to_string(),
                prompt: prompt.clone(),
                response: response.text.clone(),
            });
        }
        match parse(&response.text) {
            Ok(value) => Ok((value, transcript, false)),
            Err(_) => {
                let repair_prompt = format!("{prompt}\n\n{repair_suffix}");
                let repair_response = self
                    .gateway
                    .complete(&self.request(repair_prompt.clone(), tag))?;
                if self.keep_transcripts {
                    transcript.push(TranscriptEntry {
                        tag: tag.to_string(),
                        prompt: repair_prompt,
                        response: repair_response.text.clone(),
                    });
                }
                let value = parse(&repair_response.text)?;
                Ok((value, transcript, true))
            }
        }
    }

    /// Eq.-1 call: every criterion judged in one completion.
    pub fn score_multi(
        &self,
        instance: &EvalInstance,
        protocol: &EvaluationProtocol,
    ) -> Result<(Vec<CriterionReport>, Vec<TranscriptEntry>, Vec<String>)> {
        let criteria = protocol.criteria()?;
        if criteria.is_empty() {
            return Err(Error::Config("multi-criteria scoring needs a non-empty criteria set".into()));
        }
        let prompt = render::render_mcse_prompt(
            protocol.task.as_ref(),
            criteria,
            &protocol.mcse_demos,
            instance,
            protocol.flags.no_explanations,
        );
        let tag = "multi_score";
        let (reports, transcript, repaired) =
            self.complete_parsed(prompt, tag, JSON_REPAIR_SUFFIX, |text| {
                parse::parse_criterion_reports(text, criteria, tag)
            })?;
        let mut warnings = Vec::new();
        if repaired {
            warnings.push("multi_score: one repair re-prompt issued".to_string());
        }
        for report in &reports {
            if report.clamped {
                warnings.push(format!("multi_score: '{}' score clamped into [0,100]", report.criterion_name));
            }
        }
        Ok((reports, transcript, warnings))
    }

    /// Eq.-2 call: synthesize the overall score from per-criterion scores.
    pub fn score_overall(
        &self,
        instance: &EvalInstance,
        reports: &[CriterionReport],
        protocol: &EvaluationProtocol,
    ) -> Result<(Score, String, Vec<TranscriptEntry>, Vec<String>)> {
        if protocol.variant == Variant::Fine && reports.is_empty() {
            return Err(Error::Config("fine-variant overall scoring needs per-criterion reports".into()));
        }
        let prompt = render::render_ose_prompt(
            protocol.task.as_ref(),
            reports,
            &protocol.ose_demos,
            instance,
            None,
            protocol.flags.no_explanations,
        );
        let tag = "overall_score";
        let expect_explanation = !protocol.flags.no_explanations;
        let ((score, explanation, flags), transcript, repaired) =
            self.complete_parsed(prompt, tag, OVERALL_REPAIR_SUFFIX, |text| {
                parse::parse_overall(text, expect_explanation, tag)
            })?;
        let mut warnings = Vec::new();
        if repaired {
            warnings.push("overall_score: one repair re-prompt issued".to_string());
        }
        if flags.missing_explanation {
            warnings.push("overall_score: response had no explanation".to_string());
        }
        if flags.clamped {
            warnings.push("overall_score: score clamped into [0,100]".to_string());
        }
        Ok((score, explanation, transcript, warnings))
    }

    /// Single bare call: no task, criteria, or explanation.
    pub fn score_vanilla(
        &self,
        instance: &EvalInstance,
        demos: &[Demonstration],
    ) -> Result<(Score, Vec<TranscriptEntry>, Vec<String>)> {
        let prompt = render::render_vanilla_prompt(demos, instance);
        let tag = "vanilla_score";
        let ((score, _, flags), transcript, repaired) =
            self.complete_parsed(prompt, tag, OVERALL_REPAIR_SUFFIX, |text| {
                parse::parse_overall(text, false, tag)
            })?;
        let mut warnings = Vec::new();
        if repaired {
            warnings.push("vanilla_score: one repair re-prompt issued".to_string());
        }
        if flags.clamped {
            warnings.push("vanilla_score: score clamped into [0,100]".to_string());
        }
        Ok((score, transcript, warnings))
    }

    /// Single call judging all criteria simultaneously.
    pub fn score_coarse(
        &self,
        instance: &EvalInstance,
        protocol: &EvaluationProtocol,
    ) -> Result<(Score, String, Vec<TranscriptEntry>, Vec<String>)> {
        let criteria = protocol.criteria()?;
        let prompt = render::render_coarse_prompt(
            protocol.task.as_ref(),
            criteria,
            &protocol.ose_demos,
            instance,
            protocol.flags.no_explanations,
        );
        let tag = "coarse_score";
        let expect_explanation = !protocol.flags.no_explanations;
        let ((score, explanation, flags), transcript, repaired) =
            self.complete_parsed(prompt, tag, OVERALL_REPAIR_SUFFIX, |text| {
                parse::parse_overall(text, expect_explanation, tag)
            })?;
        let mut warnings = Vec::new();
        if repaired {
            warnings.push("coarse_score: one repair re-prompt issued".to_string());
        }
        if flags.missing_explanation {
            warnings.push("coarse_score: response had no explanation".to_string());
        }
        if flags.clamped {
            warnings.push("coarse_score: score clamped into [0,100]".to_string());
        }
        Ok((score, explanation, transcript, warnings))
    }

    /// Full fine path: multi-criteria judgment then overall synthesis.
    pub fn score_fine(
        &self,
        instance: &EvalInstance,
        protocol: &EvaluationProtocol,
    ) -> Result<ScoreReport> {
        let (reports, mut transcript, mut warnings) = self.score_multi(instance, protocol)?;
        let (overall_score, overall_explanation) = if protocol.flags.no_ose {
            (average_overall(&reports)?, String::new())
        } else {
            let (score, explanation, ose_transcript, ose_warnings) =
                self.score_overall(instance, &reports, protocol)?;
            transcript.extend(ose_transcript);
            warnings.extend(ose_warnings);
            (score, explanation)
        };
        Ok(ScoreReport {
            instance_id: instance.id.clone(),
            per_criterion: reports,
            overall_score,
            overall_explanation,
            variant: Variant::Fine,
            warnings,
            raw_transcript: transcript,
        })
    }

    /// Dispatches on the protocol's variant and ablation flags.
    pub fn score_instance(
        &self,
        instance: &EvalInstance,
        protocol: &EvaluationProtocol,
    ) -> Result<ScoreReport> {
        match protocol.variant {
            Variant::Vanilla => {
                let (overall_score, transcript, warnings) =
                    self.score_vanilla(instance, &protocol.ose_demos)?;
                Ok(ScoreReport {
                    instance_id: instance.id.clone(),
                    per_criterion: Vec::new(),
                    overall_score,
                    overall_explanation: String::new(),
                    variant: Variant::Vanilla,
                    warnings,
                    raw_transcript: transcript,
                })
            }
            Variant::Coarse => self.coarse_report(instance, protocol),
            Variant::Fine => {
                if protocol.flags.no_mcse {
                    // w/o McS-E: all criteria judged simultaneously instead.
                    self.coarse_report(instance, protocol)
                } else {
                    self.score_fine(instance, protocol)
                }
            }
        }
    }

    fn coarse_report(
        &self,
        instance: &EvalInstance,
        protocol: &EvaluationProtocol,
    ) -> Result<ScoreReport> {
        let (overall_score, overall_explanation, transcript, warnings) =
            self.score_coarse(instance, protocol)?;
        Ok(ScoreReport {
            instance_id: instance.id.clone(),
            per_criterion: Vec::new(),
            overall_score,
            overall_explanation,
            variant: Variant::Coarse,
            warnings,
            raw_transcript: transcript,
        })
    }

    /// Scores every instance concurrently (bounded by the gateway's in-flight
    /// limit), returning per-instance results in canonical order.
    pub fn score_dataset(
        &self,
        instances: &[EvalInstance],
        protocol: &EvaluationProtocol,
    ) -> Vec<Result<ScoreReport>> {
        instances
            .par_iter()
            .map(|instance| self.score_instance(instance, protocol))
            .collect()
    }
}
