//! Rotating extractor/adjudicator ensemble.
//!
//! Each model extracts once while the others score every candidate span.
//! A span's probability is the mean of its adjudicator scores (the
//! extractor's own score is logged but not counted) and it becomes a hard
//! label at `p >= hard_threshold`. Runs can additionally be merged across
//! extractors by strict-majority vote.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{default_models, Backend, ModelId, ModelRequest, Task};
use crate::fuzzy::{locate_span, similarity, Alignment, DEFAULT_ALIGNMENT_THRESHOLD};
use crate::prompting::{
    parse_adjudication, parse_extraction, render_adjudication, render_prompt, PromptTemplate,
    RawCandidate,
};
use crate::spans::{harden, normalize_spans, CharSpan, HardLabel, Sample, SoftLabel};

pub const DEFAULT_HARD_THRESHOLD: f64 = 0.7;

/// Cross-run clustering: spans whose IoU reaches this are the same span.
pub const CLUSTER_IOU: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum EnsembleError {
    #[error("ensemble configuration: {0}")]
    Config(String),
}

/// What to do with a judge whose reply cannot be parsed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbstentionPolicy {
    /// Average over the remaining judges.
    #[default]
    DropVote,
    /// Count the missing vote as 0.0.
    ZeroVote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub models: Vec<ModelId>,
    pub hard_threshold: f64,
    pub alignment_threshold: f64,
    pub abstention: AbstentionPolicy,
    /// Extra attempts after an unparseable reply.
    pub parse_retries: u32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            models: default_models(),
            hard_threshold: DEFAULT_HARD_THRESHOLD,
            alignment_threshold: DEFAULT_ALIGNMENT_THRESHOLD,
            abstention: AbstentionPolicy::DropVote,
            parse_retries: 1,
        }
    }
}

fn unit_interval(name: &str, v: f64) -> Result<(), EnsembleError> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(EnsembleError::Config(format!("{name} {v} not in (0, 1]")))
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), EnsembleError> {
        unit_interval("hard threshold", self.hard_threshold)?;
        unit_interval("alignment threshold", self.alignment_threshold)?;
        rotation_schedule(&self.models).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rotation {
    pub extractor: ModelId,
    pub adjudicators: Vec<ModelId>,
}

/// One rotation per model, in input order; the others adjudicate, order preserved.
pub fn rotation_schedule(models: &[ModelId]) -> Result<Vec<Rotation>, EnsembleError> {
    if models.len() < 2 {
        return Err(EnsembleError::Config(format!(
            "need at least 2 models, got {}",
            models.len()
        )));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = models.iter().find(|m| !seen.insert(*m)) {
        return Err(EnsembleError::Config(format!("duplicate model {dup}")));
    }
    Ok(models
        .iter()
        .enumerate()
        .map(|(i, extractor)| Rotation {
            extractor: extractor.clone(),
            adjudicators: models
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, m)| m.clone())
                .collect(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdjudicationScore {
    pub judge: ModelId,
    pub p: f64,
}

/// Mean of the available scores; `None` when every judge abstained.
pub fn consensus_probability(scores: &[AdjudicationScore]) -> Option<f64> {
    if scores.is_empty() {
        return None;
    }
    Some(bounded_mean(scores.iter().map(|s| s.p)))
}

/// Arithmetic mean clamped to the input range, so rounding can never push
/// it outside `[min, max]` (and a mean of equal values is exact: 0.7 stays
/// 0.7 rather than 0.6999999999999998).
fn bounded_mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n, mut lo, mut hi) = (0.0, 0usize, f64::INFINITY, f64::NEG_INFINITY);
    for x in xs {
        sum += x;
        n += 1;
        lo = lo.min(x);
        hi = hi.max(x);
    }
    (sum / n as f64).clamp(lo, hi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSpan {
    pub text: String,
    pub alignment: Alignment,
    pub extractor: ModelId,
    /// Score reported by the extractor itself; logged, not used in consensus.
    pub extractor_probability: f64,
}

/// A localized candidate with its votes.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSpan {
    pub candidate: CandidateSpan,
    pub scores: Vec<AdjudicationScore>,
    pub abstained: Vec<ModelId>,
    pub probability: f64,
}

/// A candidate that did not make it into the soft labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DroppedCandidate {
    pub text: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub extractor: ModelId,
    pub soft: Vec<SoftLabel>,
    pub hard: Vec<HardLabel>,
    pub spans: Vec<ScoredSpan>,
    pub dropped: Vec<DroppedCandidate>,
    /// Set when the extractor call itself failed.
    pub failure: Option<String>,
}

impl RunResult {
    fn failed(extractor: &ModelId, reason: String) -> Self {
        Self {
            extractor: extractor.clone(),
            soft: Vec::new(),
            hard: Vec::new(),
            spans: Vec::new(),
            dropped: Vec::new(),
            failure: Some(reason),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusResult {
    pub runs: Vec<RunResult>,
    pub merged_soft: Vec<SoftLabel>,
    pub merged_hard: Vec<HardLabel>,
}

/// One model call, for the run log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CallRecord {
    pub sample_id: String,
    pub run_extractor: ModelId,
    pub role: &'static str,
    pub model: ModelId,
    pub attempt: u32,
    pub latency_ms: u64,
    pub cache_hit: bool,
    pub parse_status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub span: Option<String>,
}

/// Everything produced for one sample.
#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub sample_id: String,
    pub runs: Vec<RunResult>,
    pub consensus: Option<ConsensusResult>,
    pub calls: Vec<CallRecord>,
}

pub struct Ensemble {
    config: PipelineConfig,
    backends: HashMap<ModelId, Arc<dyn Backend>>,
    extraction: PromptTemplate,
    adjudication: PromptTemplate,
}

enum Vote {
    Score(f64),
    Abstain(String),
}

impl Ensemble {
    /// Every configured model needs a backend.
    pub fn new(
        config: PipelineConfig,
        backends: Vec<Arc<dyn Backend>>,
    ) -> Result<Self, EnsembleError> {
        config.validate()?;
        let backends: HashMap<ModelId, Arc<dyn Backend>> = backends
            .into_iter()
            .map(|b| (b.model().clone(), b))
            .collect();
        if let Some(missing) = config.models.iter().find(|m| !backends.contains_key(*m)) {
            return Err(EnsembleError::Config(format!("no backend for {missing}")));
        }
        Ok(Self {
            config,
            backends,
            extraction: PromptTemplate::extraction_default(),
            adjudication: PromptTemplate::adjudication_default(),
        })
    }

    pub fn with_templates(
        mut self,
        extraction: PromptTemplate,
        adjudication: PromptTemplate,
    ) -> Self {
        self.extraction = extraction;
        self.adjudication = adjudication;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn rotations(&self) -> Vec<Rotation> {
        rotation_schedule(&self.config.models).expect("validated in new")
    }

    /// The rotation in which `model` extracts.
    pub fn rotation_for(&self, model: &ModelId) -> Result<Rotation, EnsembleError> {
        self.rotations()
            .into_iter()
            .find(|r| &r.extractor == model)
            .ok_or_else(|| EnsembleError::Config(format!("{model} is not in the ensemble")))
    }

    fn call(
        &self,
        model: &ModelId,
        (run, sample): (&ModelId, &Sample),
        prompt: &str,
        task: Task<'_>,
        attempt: u32,
        calls: &mut Vec<CallRecord>,
    ) -> Result<String, String> {
        let backend = &self.backends[model];
        let started = Instant::now();
        let result = backend.complete(&ModelRequest {
            prompt,
            sample,
            task,
            attempt,
        });
        let mut record = CallRecord {
            sample_id: sample.id.clone(),
            run_extractor: run.clone(),
            role: task.role(),
            model: model.clone(),
            attempt,
            latency_ms: started.elapsed().as_millis() as u64,
            cache_hit: false,
            parse_status: String::new(),
            span: match task {
                Task::Adjudicate { span_text } => Some(span_text.to_owned()),
                Task::Extract => None,
            },
        };
        match result {
            Ok(c) => {
                record.cache_hit = c.cache_hit;
                calls.push(record);
                Ok(c.text)
            }
            Err(e) => {
                record.parse_status = "transport_error".into();
                calls.push(record);
                Err(e.to_string())
            }
        }
    }

    fn extract(
        &self,
        sample: &Sample,
        extractor: &ModelId,
        calls: &mut Vec<CallRecord>,
    ) -> Result<Vec<RawCandidate>, String> {
        let prompt = render_prompt(&self.extraction, sample).map_err(|e| e.to_string())?;
        for attempt in 0..=self.config.parse_retries {
            let raw = self.call(
                extractor,
                (extractor, sample),
                &prompt,
                Task::Extract,
                attempt,
                calls,
            )?;
            let parsed = parse_extraction(&raw);
            let status = calls.last_mut().expect("call recorded");
            match parsed {
                Ok(cands) => {
                    status.parse_status = "ok".into();
                    return Ok(cands);
                }
                Err(e) => {
                    status.parse_status = "parse_error".into();
                    log::warn!(
                        "{}: {extractor} extraction unparseable: {}",
                        sample.id,
                        e.reason
                    );
                }
            }
        }
        log::warn!("{}: {extractor} extraction treated as empty", sample.id);
        Ok(Vec::new())
    }

    fn adjudicate(
        &self,
        sample: &Sample,
        run: &ModelId,
        judge: &ModelId,
        span_text: &str,
        calls: &mut Vec<CallRecord>,
    ) -> Vote {
        let prompt = match render_adjudication(&self.adjudication, sample, span_text) {
            Ok(p) => p,
            Err(e) => return Vote::Abstain(e.to_string()),
        };
        let task = Task::Adjudicate { span_text };
        let mut reason = String::new();
        for attempt in 0..=self.config.parse_retries {
            let raw = match self.call(judge, (run, sample), &prompt, task, attempt, calls) {
                Ok(raw) => raw,
                Err(e) => return Vote::Abstain(e),
            };
            let status = calls.last_mut().expect("call recorded");
            match parse_adjudication(&raw) {
                Ok(p) => {
                    status.parse_status = "ok".into();
                    return Vote::Score(p);
                }
                Err(e) => {
                    status.parse_status = "parse_error".into();
                    reason = e.reason;
                }
            }
        }
        Vote::Abstain(reason)
    }

    /// Extraction, localization, adjudication and thresholding for one rotation.
    pub fn run_single(&self, sample: &Sample, rotation: &Rotation) -> (RunResult, Vec<CallRecord>) {
        let mut calls = Vec::new();
        let extractor = &rotation.extractor;
        let raw = match self.extract(sample, extractor, &mut calls) {
            Ok(raw) => raw,
            Err(reason) => {
                log::error!("{}: run {extractor} failed: {reason}", sample.id);
                return (RunResult::failed(extractor, reason), calls);
            }
        };

        let mut dropped = Vec::new();
        let mut candidates = Vec::new();
        for c in raw {
            match locate_span(&c.text, &sample.answer, self.config.alignment_threshold) {
                Some(alignment) => candidates.push(CandidateSpan {
                    text: c.text,
                    alignment,
                    extractor: extractor.clone(),
                    extractor_probability: c.probability,
                }),
                None => {
                    log::debug!("{}: {:?} not found in answer", sample.id, c.text);
                    dropped.push(DroppedCandidate {
                        text: c.text,
                        reason: "no alignment".into(),
                    });
                }
            }
        }

        let mut spans = Vec::new();
        for cand in candidates {
            // judges for one span run concurrently; results keep judge order
            let votes: Vec<(Vote, Vec<CallRecord>)> = std::thread::scope(|s| {
                let handles: Vec<_> = rotation
                    .adjudicators
                    .iter()
                    .map(|judge| {
                        let text = cand.text.as_str();
                        s.spawn(move || {
                            let mut log = Vec::new();
                            let vote = self.adjudicate(sample, extractor, judge, text, &mut log);
                            (vote, log)
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("judge thread"))
                    .collect()
            });

            let mut scores = Vec::new();
            let mut abstained = Vec::new();
            for (judge, (vote, log)) in rotation.adjudicators.iter().zip(votes) {
                calls.extend(log);
                match vote {
                    Vote::Score(p) => scores.push(AdjudicationScore {
                        judge: judge.clone(),
                        p,
                    }),
                    Vote::Abstain(reason) => {
                        log::warn!(
                            "{}: {judge} abstained on {:?}: {reason}",
                            sample.id,
                            cand.text
                        );
                        if self.config.abstention == AbstentionPolicy::ZeroVote {
                            scores.push(AdjudicationScore {
                                judge: judge.clone(),
                                p: 0.0,
                            });
                        }
                        abstained.push(judge.clone());
                    }
                }
            }
            match consensus_probability(&scores) {
                Some(probability) => spans.push(ScoredSpan {
                    candidate: cand,
                    scores,
                    abstained,
                    probability,
                }),
                None => dropped.push(DroppedCandidate {
                    text: cand.text,
                    reason: "all adjudicators abstained".into(),
                }),
            }
        }

        let soft = soft_from_spans(&spans);
        let hard = harden(&soft, self.config.hard_threshold);
        let result = RunResult {
            extractor: extractor.clone(),
            soft,
            hard,
            spans,
            dropped,
            failure: None,
        };
        (result, calls)
    }

    /// Runs the given rotations on one sample; merges them when `consensus` is set.
    pub fn run_sample(
        &self,
        sample: &Sample,
        rotations: &[Rotation],
        consensus: bool,
    ) -> Result<SampleOutcome, EnsembleError> {
        let mut runs = Vec::with_capacity(rotations.len());
        let mut calls = Vec::new();
        for rotation in rotations {
            let (run, log) = self.run_single(sample, rotation);
            runs.push(run);
            calls.extend(log);
        }
        let consensus = if consensus {
            Some(aggregate_runs(&sample.answer, &runs, &self.config)?)
        } else {
            None
        };
        Ok(SampleOutcome {
            sample_id: sample.id.clone(),
            runs,
            consensus,
            calls,
        })
    }

    /// Processes samples on at most `max_concurrency` workers. Output order
    /// follows input order.
    pub fn run_dataset(
        &self,
        samples: &[Sample],
        rotations: &[Rotation],
        consensus: bool,
        max_concurrency: usize,
    ) -> Result<Vec<SampleOutcome>, EnsembleError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(max_concurrency.max(1))
            .build()
            .map_err(|e| EnsembleError::Config(e.to_string()))?;
        pool.install(|| {
            samples
                .par_iter()
                .map(|s| self.run_sample(s, rotations, consensus))
                .collect()
        })
    }
}

/// One soft label per distinct span, highest probability wins, sorted by offsets.
fn soft_from_spans(spans: &[ScoredSpan]) -> Vec<SoftLabel> {
    let mut best: BTreeMap<CharSpan, f64> = BTreeMap::new();
    for s in spans {
        let p = best
            .entry(s.candidate.alignment.span)
            .or_insert(s.probability);
        *p = p.max(s.probability);
    }
    best.into_iter()
        .map(|(span, p)| SoftLabel::new(span, p).expect("probability in range"))
        .collect()
}

struct Member {
    run: usize,
    span: CharSpan,
    p: f64,
    text: String,
}

/// Merges per-extractor runs of one sample.
///
/// Spans from different runs join a cluster when their IoU reaches
/// [`CLUSTER_IOU`] or their texts are at least `alignment_threshold`
/// similar. A cluster's probability is the mean over participating runs of
/// each run's best score; its span is the highest-scoring member (leftmost
/// on ties). It is a hard label when more than half of all runs flag it and
/// its merged probability still reaches the threshold.
pub fn aggregate_runs(
    answer: &str,
    runs: &[RunResult],
    config: &PipelineConfig,
) -> Result<ConsensusResult, EnsembleError> {
    if runs.len() != config.models.len() {
        return Err(EnsembleError::Config(format!(
            "{} runs for {} models",
            runs.len(),
            config.models.len()
        )));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = runs.iter().find(|r| !seen.insert(&r.extractor)) {
        return Err(EnsembleError::Config(format!(
            "two runs extracted by {}",
            dup.extractor
        )));
    }

    let mut members: Vec<Member> = runs
        .iter()
        .enumerate()
        .flat_map(|(run, r)| {
            r.soft.iter().map(move |s| Member {
                run,
                span: s.span,
                p: s.probability,
                text: s.span.slice(answer).unwrap_or_default().to_owned(),
            })
        })
        .collect();
    members.sort_by_key(|m| (m.span, m.run));

    let mut clusters: Vec<Vec<Member>> = Vec::new();
    for m in members {
        let home = clusters.iter().position(|c| {
            c.iter().any(|o| {
                o.span.iou(&m.span) >= CLUSTER_IOU
                    || similarity(&o.text, &m.text) >= config.alignment_threshold
            })
        });
        match home {
            Some(i) => clusters[i].push(m),
            None => clusters.push(vec![m]),
        }
    }

    let tau = config.hard_threshold;
    let mut merged_soft = Vec::with_capacity(clusters.len());
    let mut merged_hard = Vec::new();
    for cluster in &clusters {
        let mut per_run: BTreeMap<usize, f64> = BTreeMap::new();
        for m in cluster {
            let p = per_run.entry(m.run).or_insert(m.p);
            *p = p.max(m.p);
        }
        let votes = per_run.values().filter(|&&p| p >= tau).count();
        let p = bounded_mean(per_run.values().copied());
        let rep = cluster
            .iter()
            .max_by(|a, b| {
                a.p.total_cmp(&b.p)
                    .then_with(|| b.span.start().cmp(&a.span.start()))
            })
            .expect("clusters are non-empty");
        let label = SoftLabel::new(rep.span, p).expect("probability in range");
        if 2 * votes > runs.len() && p >= tau {
            merged_hard.push(HardLabel::from(rep.span));
        }
        merged_soft.push(label);
    }
    merged_soft.sort_by_key(|s| s.span);

    Ok(ConsensusResult {
        runs: runs.to_vec(),
        merged_soft,
        merged_hard: normalize_spans(&merged_hard),
    })
}
