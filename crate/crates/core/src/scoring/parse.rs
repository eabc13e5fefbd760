//! Parsers for model judgments.
//!
//! Judge models emit JSON-ish text: code fences, smart quotes, unquoted keys,
//! prose around the object. Parsing is two-tier: repair then strict JSON, and
//! a relaxed block parser for pseudo-JSON (unquoted keys and bare string
//! values). Scores out of [0,100] are clamped, never rejected, with the clamp
//! recorded on the report.

use regex::Regex;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::protocol::{Criterion, CriteriaSet};
use crate::Score;

use super::CriterionReport;

fn parse_error(tag: &str, message: String, raw: &str) -> Error {
    let excerpt: String = raw.chars().take(400).collect();
    Error::Parse {
        request_tag: tag.to_string(),
        message: format!("{message}; raw text: {excerpt:?}"),
    }
}

fn normalize_quotes(text: &str) -> String {
    text.chars()
        .map(|c| match c {
            '\u{201C}' | '\u{201D}' => '"',
            '\u{2018}' | '\u{2019}' => '\'',
            c => c,
        })
        .collect()
}

fn strip_code_fences(text: &str) -> String {
    if !text.contains("```") {
        return text.to_string();
    }
    text.lines()
        .filter(|line| !line.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Best-effort JSON repair: normalize smart quotes, drop code fences, and cut
/// out the first balanced `{...}` region (string-aware). Returns the trimmed
/// input when no balanced region exists.
pub fn repair_json(text: &str) -> String {
    let cleaned = strip_code_fences(&normalize_quotes(text));
    let bytes: Vec<char> = cleaned.chars().collect();
    let Some(start) = bytes.iter().position(|&c| c == '{') else {
        return cleaned.trim().to_string();
    };
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (offset, &c) in bytes[start..].iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return bytes[start..=start + offset].iter().collect();
                }
            }
            _ => {}
        }
    }
    cleaned.trim().to_string()
}

/// Clamps into [0,100]; the flag records that clamping happened.
pub fn clamp_score(raw: Score) -> (Score, bool) {
    if raw < 0.0 {
        (0.0, true)
    } else if raw > 100.0 {
        (100.0, true)
    } else {
        (raw, false)
    }
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?\d+(?:\.\d+)?").expect("static regex"))
}

/// Parses an ordered aspect -> description object into criteria, merging
/// case-variant duplicate keys (first definition wins).
pub fn parse_criteria(text: &str, tag: &str) -> Result<Vec<Criterion>> {
    let repaired = repair_json(text);
    let object: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&repaired)
        .map_err(|e| parse_error(tag, format!("criteria output is not a JSON object: {e}"), text))?;
    let mut criteria: Vec<Criterion> = Vec::new();
    for (name, value) in object {
        let name = name.trim().to_string();
        if name.is_empty() {
            continue;
        }
        if criteria
            .iter()
            .any(|c| c.name.eq_ignore_ascii_case(&name))
        {
            continue;
        }
        let definition = match &value {
            serde_json::Value::String(s) => s.trim().to_string(),
            other => other.to_string(),
        };
        criteria.push(Criterion::new(name, definition));
    }
    if criteria.is_empty() {
        return Err(parse_error(tag, "criteria object has no usable keys".into(), text));
    }
    Ok(criteria)
}

fn score_from_value(value: &serde_json::Value) -> Option<Score> {
    match value {
        serde_json::Value::Number(n) => n.as_f64(),
        serde_json::Value::String(s) => number_re()
            .find(s)
            .and_then(|m| m.as_str().parse::<Score>().ok()),
        _ => None,
    }
}

fn lookup_ci<'v>(
    object: &'v serde_json::Map<String, serde_json::Value>,
    key: &str,
) -> Option<&'v serde_json::Value> {
    object
        .iter()
        .find(|(k, _)| k.trim().eq_ignore_ascii_case(key))
        .map(|(_, v)| v)
}

fn reports_from_json(
    object: &serde_json::Map<String, serde_json::Value>,
    criteria: &CriteriaSet,
) -> Option<Vec<CriterionReport>> {
    let mut reports = Vec::with_capacity(criteria.len());
    for criterion in criteria.criteria() {
        let entry = lookup_ci(object, &criterion.name)?;
        let (explanation, raw_score) = match entry {
            serde_json::Value::Object(body) => {
                let explanation = lookup_ci(body, "explanation")
                    .and_then(|v| v.as_str())
                    .unwrap_or("")
                    .trim()
                    .to_string();
                let raw = lookup_ci(body, "score").and_then(score_from_value)?;
                (explanation, raw)
            }
            // Degenerate but accepted: criterion mapped straight to a number.
            other => (String::new(), score_from_value(other)?),
        };
        let (score, clamped) = clamp_score(raw_score);
        reports.push(CriterionReport {
            criterion_name: criterion.name.clone(),
            score,
            explanation,
            clamped,
        });
    }
    Some(reports)
}

fn reports_from_blocks(text: &str, criteria: &CriteriaSet) -> Result<Vec<CriterionReport>> {
    let cleaned = normalize_quotes(text);
    let mut reports = Vec::with_capacity(criteria.len());
    let mut missing: Vec<&str> = Vec::new();
    for criterion in criteria.criteria() {
        let name = regex::escape(&criterion.name);
        // e.g. `Coherence: {  explanation: ...  score: 90 }`
        let block_re = Regex::new(&format!(r#"(?is)["']?{name}["']?\s*:\s*\{{([^{{}}]*)\}}"#))
            .expect("escaped name is a valid pattern");
        let Some(block) = block_re.captures(&cleaned).map(|c| c[1].to_string()) else {
            missing.push(&criterion.name);
            continue;
        };
        let score_re = Regex::new(r#"(?i)\bscore\b\s*:\s*["']?\s*(-?\d+(?:\.\d+)?)"#).expect("static regex");
        let Some(raw_score) = score_re
            .captures(&block)
            .and_then(|c| c[1].parse::<Score>().ok())
        else {
            missing.push(&criterion.name);
            continue;
        };
        let explanation_re =
            Regex::new(r#"(?is)\bexplanation\b\s*:\s*["']?(.*?)["']?\s*,?\s*\bscore\b\s*:"#)
                .expect("static regex");
        let explanation = explanation_re
            .captures(&block)
            .map(|c| c[1].trim().to_string())
            .unwrap_or_default();
        let (score, clamped) = clamp_score(raw_score);
        reports.push(CriterionReport {
            criterion_name: criterion.name.clone(),
            score,
            explanation,
            clamped,
        });
    }
    if !missing.is_empty() {
        return Err(parse_error(
            "multi_score",
            format!("missing criterion entries: {}", missing.join(", ")),
            text,
        ));
    }
    Ok(reports)
}

/// Parses a multi-criteria judgment into exactly one report per criterion, in
/// the criteria set's order. Accepts strict JSON and the pseudo-JSON shape
/// with unquoted keys and bare prose values.
pub fn parse_criterion_reports(
    text: &str,
    criteria: &CriteriaSet,
    tag: &str,
) -> Result<Vec<CriterionReport>> {
    let repaired = repair_json(text);
    if let Ok(object) = serde_json::from_str::<serde_json::Map<String, serde_json::Value>>(&repaired)
    {
        if let Some(reports) = reports_from_json(&object, criteria) {
            return Ok(reports);
        }
    }
    reports_from_blocks(text, criteria).map_err(|e| match e {
        Error::Parse { message, .. } => Error::Parse {
            request_tag: tag.to_string(),
            message,
        },
        other => other,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OverallParseFlags {
    /// Explanations were requested but the response had none.
    pub missing_explanation: bool,
    pub clamped: bool,
}

fn overall_label_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    // Accepts the label variants the templates and examples use:
    // "Score Of Overall:", "Score of overall:", "Overall Score:", quoted or not.
    RE.get_or_init(|| {
        Regex::new(r#"(?i)["']?(?:score\s+of\s+overall|overall\s+score)["']?\s*:?\s*["']?\s*(-?\d+(?:\.\d+)?)"#)
            .expect("static regex")
    })
}

fn explanation_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"(?is)\bexplanation\b\s*:?\s*(.*?)\s*(?:["']?(?:score\s+of\s+overall|overall\s+score)["']?\s*:|\z)"#)
            .expect("static regex")
    })
}

/// Parses the overall judgment: a score under one of the overall labels (or a
/// bare number when the whole response is numeric) and an optional
/// explanation section. Sections may appear in either order.
pub fn parse_overall(
    text: &str,
    expect_explanation: bool,
    tag: &str,
) -> Result<(Score, String, OverallParseFlags)> {
    let cleaned = normalize_quotes(text);
    let raw_score = match overall_label_re().captures(&cleaned) {
        Some(captures) => captures[1].parse::<Score>().ok(),
        None => {
            let trimmed = cleaned.trim();
            // A label-less response is accepted only when it is just a number.
            if number_re()
                .find(trimmed)
                .is_some_and(|m| m.start() == 0 && m.end() == trimmed.len())
            {
                trimmed.parse::<Score>().ok()
            } else {
                None
            }
        }
    };
    let Some(raw_score) = raw_score else {
        return Err(parse_error(tag, "no overall score found".into(), text));
    };
    let explanation = explanation_re()
        .captures(&cleaned)
        .map(|c| c[1].trim().trim_matches('"').trim().to_string())
        .unwrap_or_default();
    let (score, clamped) = clamp_score(raw_score);
    let flags = OverallParseFlags {
        missing_explanation: expect_explanation && explanation.is_empty(),
        clamped,
    };
    Ok((score, explanation, flags))
}
