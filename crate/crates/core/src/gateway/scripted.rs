//! Deterministic test backends.
//!
//! [`ScriptedBackend`] maps prompts to canned responses through an ordered
//! rule list (first match wins). Pattern rules may splice captured fragments
//! into their template with `${1}`..`${9}`, which lets a script echo an
//! instance marker embedded in the prompt back as a score. [`FnBackend`]
//! adapts a closure; [`CountingBackend`] wraps any backend and tallies calls
//! per request tag for call-budget assertions.

use std::collections::BTreeMap;
use std::sync::Mutex;

use regex::Regex;

use super::{Backend, BackendFailure, BackendReply, LlmRequest};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub enum Matcher {
    /// Matches every prompt.
    Any,
    /// Case-sensitive substring test.
    Substring(String),
    /// Regular expression; its captures feed the template.
    Pattern(Regex),
}

impl Matcher {
    fn captures<'p>(&self, prompt: &'p str) -> Option<Option<regex::Captures<'p>>> {
        match self {
            Matcher::Any => Some(None),
            Matcher::Substring(needle) => prompt.contains(needle).then_some(None),
            Matcher::Pattern(re) => re.captures(prompt).map(Some),
        }
    }
}

pub struct Rule {
    matcher: Matcher,
    template: String,
}

impl Rule {
    pub fn any(template: impl Into<String>) -> Self {
        Rule {
            matcher: Matcher::Any,
            template: template.into(),
        }
    }

    pub fn substring(needle: impl Into<String>, template: impl Into<String>) -> Self {
        Rule {
            matcher: Matcher::Substring(needle.into()),
            template: template.into(),
        }
    }

    pub fn pattern(pattern: &str, template: impl Into<String>) -> Result<Self> {
        let re = Regex::new(pattern)
            .map_err(|e| Error::Config(format!("invalid scripted rule pattern '{pattern}': {e}")))?;
        Ok(Rule {
            matcher: Matcher::Pattern(re),
            template: template.into(),
        })
    }

    fn render(&self, captures: Option<&regex::Captures<'_>>) -> String {
        let Some(captures) = captures else {
            return self.template.clone();
        };
        let mut out = self.template.clone();
        for group in (1..captures.len()).rev() {
            if let Some(m) = captures.get(group) {
                out = out.replace(&format!("${{{group}}}"), m.as_str());
            }
        }
        out
    }
}

/// Ordered-rule prompt responder. With no matching rule it returns the
/// default text when one is configured, otherwise a fatal backend error
/// (which the gateway surfaces without retrying).
pub struct ScriptedBackend {
    rules: Vec<Rule>,
    default: Option<String>,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<Rule>) -> Self {
        ScriptedBackend {
            rules,
            default: None,
        }
    }

    pub fn with_default(mut self, text: impl Into<String>) -> Self {
        self.default = Some(text.into());
        self
    }
}

impl Backend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn complete_raw(&self, request: &LlmRequest) -> std::result::Result<BackendReply, BackendFailure> {
        for rule in &self.rules {
            if let Some(captures) = rule.matcher.captures(&request.prompt) {
                return Ok(BackendReply::text(rule.render(captures.as_ref())));
            }
        }
        match &self.default {
            Some(text) => Ok(BackendReply::text(text)),
            None => Err(BackendFailure::fatal(format!(
                "no scripted rule matched prompt for tag '{}' (prompt starts: {:?})",
                request.request_tag,
                request.prompt.chars().take(80).collect::<String>()
            ))),
        }
    }
}

/// Closure-backed backend for tests that need full control.
pub struct FnBackend<F> {
    f: F,
}

impl<F> FnBackend<F>
where
    F: Fn(&LlmRequest) -> String + Send + Sync,
{
    pub fn new(f: F) -> Self {
        FnBackend { f }
    }
}

impl<F> Backend for FnBackend<F>
where
    F: Fn(&LlmRequest) -> String + Send + Sync,
{
    fn name(&self) -> &str {
        "fn"
    }

    fn complete_raw(&self, request: &LlmRequest) -> std::result::Result<BackendReply, BackendFailure> {
        Ok(BackendReply::text((self.f)(request)))
    }
}

/// Wraps a backend, counting calls per request tag and keeping the prompts
/// for shape assertions.
pub struct CountingBackend<B> {
    inner: B,
    calls: Mutex<BTreeMap<String, u64>>,
    prompts: Mutex<Vec<(String, String)>>,
}

impl<B: Backend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        CountingBackend {
            inner,
            calls: Mutex::new(BTreeMap::new()),
            prompts: Mutex::new(Vec::new()),
        }
    }

    pub fn counts(&self) -> BTreeMap<String, u64> {
        self.calls.lock().expect("counting backend poisoned").clone()
    }

    pub fn total(&self) -> u64 {
        self.counts().values().sum()
    }

    /// (tag, prompt) pairs in call order.
    pub fn prompts(&self) -> Vec<(String, String)> {
        self.prompts.lock().expect("counting backend poisoned").clone()
    }
}

impl<B: Backend> Backend for CountingBackend<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn complete_raw(&self, request: &LlmRequest) -> std::result::Result<BackendReply, BackendFailure> {
        {
            let mut calls = self.calls.lock().expect("counting backend poisoned");
            *calls.entry(request.request_tag.clone()).or_insert(0) += 1;
            self.prompts
                .lock()
                .expect("counting backend poisoned")
                .push((request.request_tag.clone(), request.prompt.clone()));
        }
        self.inner.complete_raw(request)
    }
}
