//! Demonstration-set search: sample candidate demo sets, bootstrap reasoning
//! traces for them, and keep the set whose protocol correlates best with the
//! human scores it did not see.
//!
//! Each trial's demos are excluded from that trial's evaluation set so a
//! protocol can never score points by reciting its own exemplars. A constant
//! or otherwise degenerate judge gets a negative-infinity objective, never 0,
//! so it cannot win the argmax by default.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::protocol::{DemoTrace, Demonstration, EvaluationProtocol, Variant};
use crate::scoring::Scorer;
use crate::seed::{permutation, stream_rng};
use crate::stats;
use crate::Score;

/// Maximum |trace overall - human| for a bootstrapped trace to be kept.
pub const DEFAULT_TRACE_TOLERANCE: Score = 15.0;

/// Trials dropping more than this fraction of instances are invalid.
pub const MAX_EXCLUSION_FRACTION: f64 = 0.2;

/// Search knobs; defaults mirror the published setup (11 trials).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizeSettings {
    pub trials: usize,
    pub demo_count: usize,
    pub seed: u64,
    pub trace_tolerance: Score,
}

impl Default for OptimizeSettings {
    fn default() -> Self {
        OptimizeSettings {
            trials: 11,
            demo_count: 3,
            seed: 0,
            trace_tolerance: DEFAULT_TRACE_TOLERANCE,
        }
    }
}

/// One trial's protocol and its measured objective. `q` is
/// `f64::NEG_INFINITY` when the trial was invalid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial_index: usize,
    pub protocol: EvaluationProtocol,
    pub demo_ids: Vec<String>,
    pub q: f64,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub kendall_tau_b: Option<f64>,
    /// Instances dropped after a failed repair re-prompt.
    pub excluded: usize,
    pub evaluated: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub invalid_reason: Option<String>,
}

impl TrialResult {
    pub fn is_valid(&self) -> bool {
        self.q.is_finite()
    }
}

/// Correlation outcome of scoring one dataset under one protocol.
#[derive(Debug, Clone)]
pub struct ProtocolEvaluation {
    pub q: f64,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub kendall_tau_b: Option<f64>,
    pub excluded: usize,
    pub evaluated: usize,
    pub invalid_reason: Option<String>,
}

impl ProtocolEvaluation {
    fn invalid(reason: impl Into<String>, excluded: usize, evaluated: usize) -> Self {
        ProtocolEvaluation {
            q: f64::NEG_INFINITY,
            pearson: None,
            spearman: None,
            kendall_tau_b: None,
            excluded,
            evaluated,
            invalid_reason: Some(reason.into()),
        }
    }
}

/// Draws k distinct untraced demos; deterministic in the seed.
pub fn sample_demos(train: &Dataset, k: usize, seed: u64) -> Result<Vec<Demonstration>> {
    if k > train.len() {
        return Err(Error::Data(format!(
            "cannot sample {k} demos from {} train instances",
            train.len()
        )));
    }
    let mut rng = stream_rng(seed, "optimize/demos");
    let order = permutation(train.len(), &mut rng);
    Ok(order[..k]
        .iter()
        .map(|&i| Demonstration::untraced(train.instances[i].clone()))
        .collect())
}

pub struct Optimizer<'a> {
    pub scorer: &'a Scorer<'a>,
    pub settings: OptimizeSettings,
}

impl<'a> Optimizer<'a> {
    pub fn new(scorer: &'a Scorer<'a>, settings: OptimizeSettings) -> Self {
        Optimizer { scorer, settings }
    }

    /// Scores each demo with a demo-less copy of the protocol and attaches
    /// the resulting trace only when it parses cleanly and its overall score
    /// lands within tolerance of the human label. Failures degrade to
    /// untraced demos; vanilla protocols pass through unchanged.
    pub fn bootstrap_traces(
        &self,
        demos: Vec<Demonstration>,
        protocol: &EvaluationProtocol,
    ) -> Vec<Demonstration> {
        if protocol.variant == Variant::Vanilla {
            return demos;
        }
        let mut bare = protocol.clone();
        bare.mcse_demos.clear();
        bare.ose_demos.clear();
        demos
            .into_par_iter()
            .map(|mut demo| {
                match self.scorer.score_instance(&demo.instance, &bare) {
                    Ok(report)
                        if (report.overall_score - demo.instance.human_score).abs()
                            <= self.settings.trace_tolerance =>
                    {
                        demo.trace = Some(DemoTrace {
                            per_criterion: report.per_criterion,
                            overall_score: report.overall_score,
                            overall_explanation: report.overall_explanation,
                        });
                    }
                    _ => {}
                }
                demo
            })
            .collect()
    }

    /// Scores every instance and reduces to the composite objective.
    /// Degeneracy (too many exclusions, too few survivors, zero-variance
    /// predictions) yields the sentinel, not an error.
    pub fn evaluate_protocol(
        &self,
        protocol: &EvaluationProtocol,
        dev: &Dataset,
    ) -> ProtocolEvaluation {
        let results = self.scorer.score_dataset(&dev.instances, protocol);
        let mut human = Vec::new();
        let mut predicted = Vec::new();
        let mut excluded = 0usize;
        for (instance, result) in dev.instances.iter().zip(&results) {
            match result {
                Ok(report) => {
                    human.push(instance.human_score);
                    predicted.push(report.overall_score);
                }
                Err(_) => excluded += 1,
            }
        }
        let evaluated = human.len();
        if excluded as f64 > MAX_EXCLUSION_FRACTION * dev.len() as f64 {
            return ProtocolEvaluation::invalid(
                format!("{excluded} of {} instances excluded (over the 20% limit)", dev.len()),
                excluded,
                evaluated,
            );
        }
        if evaluated < 3 {
            return ProtocolEvaluation::invalid(
                format!("only {evaluated} instances scored; need at least 3"),
                excluded,
                evaluated,
            );
        }
        let coefficients = [
            stats::pearson(&predicted, &human),
            stats::spearman(&predicted, &human),
            stats::kendall_tau_b(&predicted, &human),
        ];
        let mut values = Vec::with_capacity(3);
        for c in coefficients {
            match c {
                Ok(Some(v)) => values.push(v),
                // Zero variance on either side: every coefficient undefined.
                Ok(None) => {
                    return ProtocolEvaluation::invalid(
                        "correlation undefined (constant predictions or labels)",
                        excluded,
                        evaluated,
                    )
                }
                Err(e) => {
                    return ProtocolEvaluation::invalid(e.to_string(), excluded, evaluated)
                }
            }
        }
        ProtocolEvaluation {
            q: values.iter().sum(),
            pearson: Some(values[0]),
            spearman: Some(values[1]),
            kendall_tau_b: Some(values[2]),
            excluded,
            evaluated,
            invalid_reason: None,
        }
    }

    /// Runs the full search: K trials, each sampling its own demo set,
    /// bootstrapping traces, and measuring Q on train minus its own demos.
    /// Returns the argmax protocol (ties to the lowest trial index).
    pub fn optimize(
        &self,
        train: &Dataset,
        template: &EvaluationProtocol,
    ) -> Result<(EvaluationProtocol, Vec<TrialResult>)> {
        let k = self.settings.demo_count;
        if self.settings.trials == 0 {
            return Err(Error::Config("trials must be > 0".into()));
        }
        if k >= train.len() {
            return Err(Error::Data(format!(
                "{k} demos would leave no evaluation instances out of {}",
                train.len()
            )));
        }
        let mut seed_rng = stream_rng(self.settings.seed, "optimize/trials");
        let trial_seeds: Vec<u64> = (0..self.settings.trials)
            .map(|_| rand::RngCore::next_u64(&mut seed_rng))
            .collect();

        let mut trials = Vec::with_capacity(self.settings.trials);
        for (trial_index, &trial_seed) in trial_seeds.iter().enumerate() {
            let demos = sample_demos(train, k, trial_seed)?;
            let demo_ids: Vec<String> =
                demos.iter().map(|d| d.instance.id.clone()).collect();
            let traced = self.bootstrap_traces(demos, template);

            let mut protocol = template.clone();
            protocol.mcse_demos = traced.clone();
            protocol.ose_demos = traced;
            protocol.validate()?;

            let id_set: BTreeSet<&String> = demo_ids.iter().collect();
            let held_out: Vec<_> = train
                .instances
                .iter()
                .filter(|inst| !id_set.contains(&inst.id))
                .cloned()
                .collect();
            let dev = Dataset::new(train.benchmark_id.clone(), held_out)?;

            let eval = self.evaluate_protocol(&protocol, &dev);
            trials.push(TrialResult {
                trial_index,
                protocol,
                demo_ids,
                q: eval.q,
                pearson: eval.pearson,
                spearman: eval.spearman,
                kendall_tau_b: eval.kendall_tau_b,
                excluded: eval.excluded,
                evaluated: eval.evaluated,
                invalid_reason: eval.invalid_reason,
            });
        }

        // Strictly-greater comparison keeps the lowest index on ties.
        let mut best_index = 0;
        for (i, trial) in trials.iter().enumerate() {
            if trial.q > trials[best_index].q {
                best_index = i;
            }
        }
        let best = &trials[best_index];
        if !best.is_valid() {
            let reasons: Vec<String> = trials
                .iter()
                .map(|t| {
                    format!(
                        "trial {}: {}",
                        t.trial_index,
                        t.invalid_reason.as_deref().unwrap_or("unknown")
                    )
                })
                .collect();
            return Err(Error::Data(format!(
                "every optimization trial was invalid: {}",
                reasons.join("; ")
            )));
        }
        Ok((best.protocol.clone(), trials))
    }
}

/// Per-trial ledger: one CSV row per trial with the objective breakdown.
pub fn write_trials_csv(trials: &[TrialResult], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut writer = csv::Writer::from_path(path).map_err(|e| {
        Error::Data(format!("cannot open trials ledger {}: {e}", path.display()))
    })?;
    writer
        .write_record([
            "trial",
            "pearson",
            "spearman",
            "kendall_tau_b",
            "q",
            "excluded",
            "evaluated",
            "demo_ids",
            "invalid_reason",
        ])
        .map_err(|e| Error::Data(format!("trials ledger write failed: {e}")))?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for t in trials {
        let q = if t.q.is_finite() {
            t.q.to_string()
        } else {
            "-inf".to_string()
        };
        writer
            .write_record([
                t.trial_index.to_string(),
                opt(t.pearson),
                opt(t.spearman),
                opt(t.kendall_tau_b),
                q,
                t.excluded.to_string(),
                t.evaluated.to_string(),
                t.demo_ids.join(";"),
                t.invalid_reason.clone().unwrap_or_default(),
            ])
            .map_err(|e| Error::Data(format!("trials ledger write failed: {e}")))?;
    }
    writer
        .flush()
        .map_err(|e| Error::Data(format!("trials ledger flush failed: {e}")))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::corpus::EvalInstance;
    use crate::gateway::{CountingBackend, FnBackend, Gateway, LlmRequest};
    use crate::protocol::{AblationFlags, CriteriaSet, Criterion, TaskDescription};

    /// Instances whose sources carry machine-readable markers so a scripted
    /// judge can recover the human score and demo identity from the prompt.
    fn marked_dataset(n: usize) -> Dataset {
        let instances = (0..n)
            .map(|i| EvalInstance {
                id: format!("i{i:02}"),
                source: format!("story prompt IDX={i} HUMAN={}", 40 + 7 * i % 55),
                response: format!("generated story {i}"),
                human_score: (40 + 7 * i % 55) as f64,
                meta: None,
            })
            .collect();
        Dataset::new("openmeva_roc", instances).unwrap()
    }

    fn last_capture(text: &str, re: &regex::Regex) -> Option<f64> {
        re.captures_iter(text).last().map(|c| c[1].parse().unwrap())
    }

    /// Echo judge: replies with the scored instance's own human score.
    fn echo_backend() -> FnBackend<impl Fn(&LlmRequest) -> String + Send + Sync> {
        let human = regex::Regex::new(r"HUMAN=(\d+)").unwrap();
        FnBackend::new(move |req: &LlmRequest| {
            let h = last_capture(&req.prompt, &human).unwrap_or(50.0);
            format!("{h}")
        })
    }

    fn vanilla_template() -> EvaluationProtocol {
        EvaluationProtocol {
            task: None,
            criteria: None,
            mcse_demos: vec![],
            ose_demos: vec![],
            variant: Variant::Vanilla,
            flags: AblationFlags::default(),
        }
    }

    fn coarse_template() -> EvaluationProtocol {
        EvaluationProtocol {
            task: Some(TaskDescription::new("The evaluation task is story generation.", vec![0]).unwrap()),
            criteria: Some(
                CriteriaSet::new(
                    (0..4)
                        .map(|i| Criterion::new(format!("C{i}"), "d"))
                        .collect(),
                )
                .unwrap(),
            ),
            mcse_demos: vec![],
            ose_demos: vec![],
            variant: Variant::Coarse,
            flags: AblationFlags::default(),
        }
    }

    #[test]
    fn sample_demos_is_deterministic_and_distinct() {
        let train = marked_dataset(20);
        let a = sample_demos(&train, 8, 42).unwrap();
        let b = sample_demos(&train, 8, 42).unwrap();
        let ids = |demos: &[Demonstration]| {
            demos.iter().map(|d| d.instance.id.clone()).collect::<Vec<_>>()
        };
        assert_eq!(ids(&a), ids(&b));
        let distinct: BTreeSet<String> = ids(&a).into_iter().collect();
        assert_eq!(distinct.len(), 8);
        let c = sample_demos(&train, 8, 43).unwrap();
        assert_ne!(ids(&a), ids(&c));
        assert!(a.iter().all(|d| d.trace.is_none()));
        assert!(sample_demos(&train, 21, 0).is_err());
    }

    #[test]
    fn bootstrap_attaches_trace_within_tolerance_only() {
        // Judge replies human+20 for instance i01, exact echo otherwise.
        let human = regex::Regex::new(r"HUMAN=(\d+)").unwrap();
        let idx = regex::Regex::new(r"IDX=(\d+)").unwrap();
        let backend = FnBackend::new(move |req: &LlmRequest| {
            let h = last_capture(&req.prompt, &human).unwrap();
            let i = last_capture(&req.prompt, &idx).unwrap();
            let score = if i == 1.0 { h + 20.0 } else { h };
            format!("Explanation: judged\nScore Of Overall: {score}")
        });
        let gateway = Gateway::new(Box::new(backend));
        let scorer = Scorer::new(&gateway, "m");
        let optimizer = Optimizer::new(&scorer, OptimizeSettings::default());
        let train = marked_dataset(4);
        let demos: Vec<Demonstration> = train
            .instances
            .iter()
            .cloned()
            .map(Demonstration::untraced)
            .collect();
        let traced = optimizer.bootstrap_traces(demos, &coarse_template());
        assert!(traced[0].trace.is_some());
        assert!(traced[1].trace.is_none(), "off-by-20 trace must be dropped");
        assert!(traced[2].trace.is_some());
        let trace = traced[0].trace.as_ref().unwrap();
        assert_eq!(trace.overall_score, traced[0].instance.human_score);
        assert_eq!(trace.overall_explanation, "judged");
        assert!(trace.per_criterion.is_empty());
    }

    #[test]
    fn bootstrap_degrades_to_untraced_on_parse_failure() {
        let backend = FnBackend::new(|_: &LlmRequest| "no score here".to_string());
        let gateway = Gateway::new(Box::new(backend));
        let scorer = Scorer::new(&gateway, "m");
        let optimizer = Optimizer::new(&scorer, OptimizeSettings::default());
        let train = marked_dataset(3);
        let demos: Vec<Demonstration> = train
            .instances
            .iter()
            .cloned()
            .map(Demonstration::untraced)
            .collect();
        let traced = optimizer.bootstrap_traces(demos, &coarse_template());
        assert!(traced.iter().all(|d| d.trace.is_none()));
    }

    #[test]
    fn perfect_judge_scores_q_three() {
        let gateway = Gateway::new(Box::new(echo_backend()));
        let scorer = Scorer::new(&gateway, "m");
        let optimizer = Optimizer::new(&scorer, OptimizeSettings::default());
        let train = marked_dataset(12);
        let eval = optimizer.evaluate_protocol(&vanilla_template(), &train);
        assert!((eval.q - 3.0).abs() < 1e-12);
        assert_eq!(eval.excluded, 0);
        assert_eq!(eval.evaluated, 12);
    }

    #[test]
    fn constant_judge_is_invalid_not_zero() {
        let backend = FnBackend::new(|_: &LlmRequest| "55".to_string());
        let gateway = Gateway::new(Box::new(backend));
        let scorer = Scorer::new(&gateway, "m");
        let optimizer = Optimizer::new(&scorer, OptimizeSettings::default());
        let train = marked_dataset(10);
        let eval = optimizer.evaluate_protocol(&vanilla_template(), &train);
        assert_eq!(eval.q, f64::NEG_INFINITY);
        assert!(eval.invalid_reason.unwrap().contains("undefined"));
    }

    #[test]
    fn excess_exclusions_invalidate_the_trial() {
        // Judge fails to produce a score for every even IDX (half the set).
        let human = regex::Regex::new(r"HUMAN=(\d+)").unwrap();
        let idx = regex::Regex::new(r"IDX=(\d+)").unwrap();
        let backend = FnBackend::new(move |req: &LlmRequest| {
            let i = last_capture(&req.prompt, &idx).unwrap();
            if (i as usize) % 2 == 0 {
                "no score".to_string()
            } else {
                format!("{}", last_capture(&req.prompt, &human).unwrap())
            }
        });
        let gateway = Gateway::new(Box::new(backend));
        let scorer = Scorer::new(&gateway, "m");
        let optimizer = Optimizer::new(&scorer, OptimizeSettings::default());
        let train = marked_dataset(10);
        let eval = optimizer.evaluate_protocol(&vanilla_template(), &train);
        assert_eq!(eval.q, f64::NEG_INFINITY);
        assert_eq!(eval.excluded, 5);
        assert!(eval.invalid_reason.unwrap().contains("20%"));
    }

    /// Noise-controlled judge: prediction = human + noise where the noise
    /// magnitude is decided by the demo set in the prompt. Demo sets whose
    /// IDX values sum to 0 mod 5 judge perfectly.
    fn noisy_backend() -> FnBackend<impl Fn(&LlmRequest) -> String + Send + Sync> {
        let human = regex::Regex::new(r"HUMAN=(\d+)").unwrap();
        let idx = regex::Regex::new(r"IDX=(\d+)").unwrap();
        FnBackend::new(move |req: &LlmRequest| {
            let marks: Vec<f64> = idx
                .captures_iter(&req.prompt)
                .map(|c| c[1].parse().unwrap())
                .collect();
            // Last marker is the scored instance; the rest are demos.
            let (target, demos) = marks.split_last().unwrap();
            let noise_scale = demos.iter().sum::<f64>() as u64 % 5;
            let h = last_capture(&req.prompt, &human).unwrap();
            let direction = if (*target as u64) % 2 == 0 { 1.0 } else { -1.0 };
            format!("{}", h + noise_scale as f64 * 3.0 * direction)
        })
    }

    #[test]
    fn optimize_selects_max_q_with_lowest_index_ties() {
        let counting = Arc::new(CountingBackend::new(noisy_backend()));
        let gateway = Gateway::new(Box::new(counting.clone()));
        let scorer = Scorer::new(&gateway, "m");
        let settings = OptimizeSettings {
            trials: 11,
            demo_count: 3,
            seed: 9,
            trace_tolerance: DEFAULT_TRACE_TOLERANCE,
        };
        let optimizer = Optimizer::new(&scorer, settings);
        let train = marked_dataset(16);
        let (best, trials) = optimizer.optimize(&train, &vanilla_template()).unwrap();
        assert_eq!(trials.len(), 11);
        let best_q = trials.iter().map(|t| t.q).fold(f64::NEG_INFINITY, f64::max);
        let winner = trials.iter().find(|t| t.q == best_q).unwrap();
        // Argmax with lowest-index tie-break.
        assert_eq!(best.ose_demos.len(), 3);
        let best_ids: Vec<String> =
            best.ose_demos.iter().map(|d| d.instance.id.clone()).collect();
        assert_eq!(best_ids, winner.demo_ids);
        for t in &trials {
            assert!(winner.q >= t.q);
            if t.q == winner.q {
                assert!(winner.trial_index <= t.trial_index);
            }
        }
        // No demo leaks into its own trial's evaluation set.
        for t in &trials {
            assert_eq!(t.evaluated + t.excluded, train.len() - 3);
        }
    }

    #[test]
    fn optimize_call_budget_is_bounded() {
        let counting = Arc::new(CountingBackend::new(echo_backend()));
        let gateway = Gateway::new(Box::new(counting.clone()));
        let scorer = Scorer::new(&gateway, "m");
        let settings = OptimizeSettings {
            trials: 3,
            demo_count: 2,
            seed: 1,
            trace_tolerance: DEFAULT_TRACE_TOLERANCE,
        };
        let optimizer = Optimizer::new(&scorer, settings);
        let train = marked_dataset(10);
        optimizer.optimize(&train, &vanilla_template()).unwrap();
        // Vanilla: no bootstrap calls, one call per dev instance per trial.
        assert_eq!(counting.total(), 3 * (10 - 2));
    }

    #[test]
    fn all_invalid_trials_error() {
        let backend = FnBackend::new(|_: &LlmRequest| "77".to_string());
        let gateway = Gateway::new(Box::new(backend));
        let scorer = Scorer::new(&gateway, "m");
        let settings = OptimizeSettings {
            trials: 2,
            demo_count: 2,
            seed: 0,
            trace_tolerance: DEFAULT_TRACE_TOLERANCE,
        };
        let optimizer = Optimizer::new(&scorer, settings);
        let train = marked_dataset(8);
        let err = optimizer.optimize(&train, &vanilla_template()).unwrap_err();
        assert!(err.to_string().contains("every optimization trial was invalid"));
    }

    #[test]
    fn trials_ledger_round_trips_through_csv() {
        let gateway = Gateway::new(Box::new(echo_backend()));
        let scorer = Scorer::new(&gateway, "m");
        let settings = OptimizeSettings {
            trials: 2,
            demo_count: 2,
            seed: 5,
            trace_tolerance: DEFAULT_TRACE_TOLERANCE,
        };
        let optimizer = Optimizer::new(&scorer, settings);
        let train = marked_dataset(9);
        let (_, trials) = optimizer.optimize(&train, &vanilla_template()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trials.csv");
        write_trials_csv(&trials, &path).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        let mut lines = body.lines();
        assert!(lines.next().unwrap().starts_with("trial,pearson,spearman"));
        assert_eq!(lines.count(), 2);
        assert!(body.contains("3")); // q = 3 for the echo judge
    }
}
