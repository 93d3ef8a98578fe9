//! Ensemble behaviour with scripted backends.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use halspan::backends::{
    Backend, BackendError, Completion, MockBackend, ModelId, ModelRequest, Task,
};
use halspan::ensemble::{aggregate_runs, AbstentionPolicy, Ensemble, PipelineConfig};
use halspan::ingest::generate_planted_corpus;
use halspan::spans::{CharSpan, HardLabel, Sample};

type Judge = (&'static str, fn(&str) -> String);

type Reply = dyn Fn(&ModelRequest<'_>) -> Result<String, BackendError> + Send + Sync;

struct Scripted {
    model: ModelId,
    reply: Box<Reply>,
    calls: AtomicUsize,
}

fn scripted(
    name: &str,
    reply: impl Fn(&ModelRequest<'_>) -> Result<String, BackendError> + Send + Sync + 'static,
) -> Arc<Scripted> {
    Arc::new(Scripted {
        model: ModelId::new(name).unwrap(),
        reply: Box::new(reply),
        calls: AtomicUsize::new(0),
    })
}

impl Backend for Scripted {
    fn model(&self) -> &ModelId {
        &self.model
    }

    fn complete(&self, request: &ModelRequest<'_>) -> Result<Completion, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(Completion {
            text: (self.reply)(request)?,
            cache_hit: false,
        })
    }
}

const ANSWER: &str = "The Eiffel Tower was finished in 1887 and is 450 meters tall.";

fn sample() -> Sample {
    Sample::new("s1", "EN", "When was the Eiffel Tower finished?", ANSWER).unwrap()
}

fn span(s: usize, e: usize) -> CharSpan {
    CharSpan::new(s, e).unwrap()
}

/// Extractor `A` proposes `candidates`; judges answer per span via `judge`.
fn ensemble(
    candidates: &'static str,
    judges: Vec<Judge>,
    policy: AbstentionPolicy,
) -> (Ensemble, Vec<Arc<Scripted>>) {
    let mut backends = vec![scripted("A", move |r| match r.task {
        Task::Extract => Ok(candidates.to_owned()),
        Task::Adjudicate { .. } => Ok("0.0".into()),
    })];
    for (name, judge) in judges {
        backends.push(scripted(name, move |r| match r.task {
            Task::Adjudicate { span_text } => Ok(judge(span_text)),
            Task::Extract => Ok("[]".into()),
        }));
    }
    let config = PipelineConfig {
        models: backends.iter().map(|b| b.model.clone()).collect(),
        abstention: policy,
        ..PipelineConfig::default()
    };
    let dyns: Vec<Arc<dyn Backend>> = backends
        .iter()
        .map(|b| b.clone() as Arc<dyn Backend>)
        .collect();
    (Ensemble::new(config, dyns).unwrap(), backends)
}

#[test]
fn consensus_of_judges_decides_hard_labels() {
    let (e, _) = ensemble(
        r#"[{"text": "1887", "probability": 0.2}, {"text": "450 meters", "probability": 0.99}]"#,
        vec![
            ("B", |s| {
                if s == "1887" {
                    "0.8".into()
                } else {
                    "0.6".into()
                }
            }),
            ("C", |s| {
                if s == "1887" {
                    "0.9".into()
                } else {
                    "0.6".into()
                }
            }),
            ("D", |s| {
                if s == "1887" {
                    "0.7".into()
                } else {
                    "0.6".into()
                }
            }),
        ],
        AbstentionPolicy::DropVote,
    );
    let (run, calls) = e.run_single(&sample(), &e.rotations()[0]);
    assert!(run.failure.is_none());
    assert_eq!(run.soft.len(), 2);
    assert_eq!(run.soft[0].span, span(33, 37));
    assert!((run.soft[0].probability - 0.8).abs() < 1e-12);
    // the extractor's own 0.99 is ignored
    assert!((run.soft[1].probability - 0.6).abs() < 1e-12);
    assert_eq!(run.hard, vec![HardLabel::from(span(33, 37))]);
    assert_eq!(calls.len(), 1 + 2 * 3);
    assert!(calls.iter().all(|c| c.parse_status == "ok"));
}

#[test]
fn empty_extraction_gives_empty_run() {
    let (e, backends) = ensemble(
        "[]",
        vec![("B", |_| "1.0".into())],
        AbstentionPolicy::DropVote,
    );
    let (run, _) = e.run_single(&sample(), &e.rotations()[0]);
    assert!(run.soft.is_empty() && run.hard.is_empty() && run.failure.is_none());
    assert_eq!(backends[1].calls.load(Ordering::SeqCst), 0);
}

#[test]
fn unalignable_candidate_is_dropped() {
    let (e, _) = ensemble(
        r#"[{"text": "Statue of Liberty", "probability": 0.9}, {"text": "finished in 1887", "probability": 0.9}]"#,
        vec![("B", |_| "0.9".into())],
        AbstentionPolicy::DropVote,
    );
    let (run, _) = e.run_single(&sample(), &e.rotations()[0]);
    assert_eq!(run.soft.len(), 1);
    assert_eq!(run.soft[0].span, span(21, 37));
    assert_eq!(run.dropped.len(), 1);
    assert_eq!(run.dropped[0].text, "Statue of Liberty");
}

#[test]
fn fuzzy_candidate_maps_to_answer_offsets() {
    // "450 meter" and "450 meters" both sit one edit away (0.9); the
    // tie goes to the shorter window
    let (e, _) = ensemble(
        r#"[{"text": "450 meterz", "probability": 0.9}]"#,
        vec![("B", |_| "0.9".into())],
        AbstentionPolicy::DropVote,
    );
    let (run, _) = e.run_single(&sample(), &e.rotations()[0]);
    assert_eq!(run.hard, vec![HardLabel::from(span(45, 54))]);
    assert!(!run.spans[0].candidate.alignment.exact);
}

fn garbage(_: &str) -> String {
    "I cannot say.".into()
}

#[test]
fn abstention_policies() {
    let judges: Vec<Judge> = vec![
        ("B", |_| "0.9".into()),
        ("C", garbage),
        ("D", |_| "0.6".into()),
    ];
    let (drop, backends) = ensemble(
        r#"[{"text": "1887", "probability": 0.9}]"#,
        judges.clone(),
        AbstentionPolicy::DropVote,
    );
    let (run, calls) = drop.run_single(&sample(), &drop.rotations()[0]);
    assert!((run.soft[0].probability - 0.75).abs() < 1e-12);
    assert_eq!(run.spans[0].abstained, vec![ModelId::new("C").unwrap()]);
    // the unparseable judge was asked twice (one parse retry)
    assert_eq!(backends[2].calls.load(Ordering::SeqCst), 2);
    assert_eq!(
        calls
            .iter()
            .filter(|c| c.parse_status == "parse_error")
            .count(),
        2
    );

    let (zero, _) = ensemble(
        r#"[{"text": "1887", "probability": 0.9}]"#,
        judges,
        AbstentionPolicy::ZeroVote,
    );
    let (run, _) = zero.run_single(&sample(), &zero.rotations()[0]);
    assert!((run.soft[0].probability - 0.5).abs() < 1e-12);
    assert!(run.hard.is_empty());
}

#[test]
fn span_without_any_vote_is_dropped() {
    let (e, _) = ensemble(
        r#"[{"text": "1887", "probability": 0.9}]"#,
        vec![("B", garbage), ("C", garbage)],
        AbstentionPolicy::DropVote,
    );
    let (run, _) = e.run_single(&sample(), &e.rotations()[0]);
    assert!(run.soft.is_empty());
    assert_eq!(run.dropped[0].reason, "all adjudicators abstained");
}

#[test]
fn extractor_transport_failure_marks_run_failed() {
    let a = scripted("A", |_| {
        Err(BackendError::Transport {
            model: "A".into(),
            attempts: 4,
            message: "HTTP 503".into(),
        })
    });
    let b = scripted("B", |_| Ok("0.9".into()));
    let config = PipelineConfig {
        models: vec![a.model.clone(), b.model.clone()],
        ..PipelineConfig::default()
    };
    let e = Ensemble::new(config, vec![a as Arc<dyn Backend>, b as Arc<dyn Backend>]).unwrap();
    let (run, calls) = e.run_single(&sample(), &e.rotations()[0]);
    assert!(run.failure.as_deref().unwrap().contains("503"));
    assert!(run.soft.is_empty());
    assert_eq!(calls[0].parse_status, "transport_error");
}

#[test]
fn parse_retry_uses_a_new_attempt() {
    let a = scripted("A", |r| match (r.task, r.attempt) {
        (Task::Extract, 0) => Ok("Sure! Here you go".into()),
        (Task::Extract, _) => Ok(r#"[{"text": "1887", "probability": 0.9}]"#.into()),
        _ => Ok("0.5".into()),
    });
    let b = scripted("B", |_| Ok("0.95".into()));
    let config = PipelineConfig {
        models: vec![a.model.clone(), b.model.clone()],
        ..PipelineConfig::default()
    };
    let e = Ensemble::new(config, vec![a as Arc<dyn Backend>, b as Arc<dyn Backend>]).unwrap();
    let (run, calls) = e.run_single(&sample(), &e.rotations()[0]);
    assert_eq!(run.hard, vec![HardLabel::from(span(33, 37))]);
    assert_eq!(calls[0].parse_status, "parse_error");
    assert_eq!(calls[1].attempt, 1);
}

#[test]
fn missing_backend_is_a_config_error() {
    let a = scripted("A", |_| Ok("[]".into()));
    let config = PipelineConfig {
        models: vec![ModelId::new("A").unwrap(), ModelId::new("B").unwrap()],
        ..PipelineConfig::default()
    };
    assert!(Ensemble::new(config, vec![a as Arc<dyn Backend>]).is_err());
}

fn mock_ensemble(seed: u64) -> Ensemble {
    let config = PipelineConfig::default();
    let backends: Vec<Arc<dyn Backend>> = config
        .models
        .iter()
        .map(|m| Arc::new(MockBackend::new(m.clone(), seed)) as Arc<dyn Backend>)
        .collect();
    Ensemble::new(config, backends).unwrap()
}

#[test]
fn mock_pipeline_recovers_planted_spans_in_every_rotation() {
    let e = mock_ensemble(21);
    let corpus = generate_planted_corpus(30, "de", 21, 0.2).unwrap();
    let inputs: Vec<Sample> = corpus.iter().map(Sample::without_gold).collect();
    let outcomes = e.run_dataset(&inputs, &e.rotations(), true, 3).unwrap();
    for (gold, out) in corpus.iter().zip(&outcomes) {
        assert_eq!(out.sample_id, gold.id);
        for run in &out.runs {
            assert_eq!(Some(&run.hard), gold.gold_hard.as_ref(), "{}", gold.id);
        }
        let merged = out.consensus.as_ref().unwrap();
        assert_eq!(Some(&merged.merged_hard), gold.gold_hard.as_ref());
    }
}

#[test]
fn pipeline_is_deterministic_across_concurrency() {
    let e = mock_ensemble(4);
    let corpus: Vec<Sample> = generate_planted_corpus(25, "ar", 4, 0.2)
        .unwrap()
        .iter()
        .map(Sample::without_gold)
        .collect();
    let a = e.run_dataset(&corpus, &e.rotations(), true, 1).unwrap();
    let b = e.run_dataset(&corpus, &e.rotations(), true, 8).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.runs, y.runs);
        assert_eq!(x.consensus, y.consensus);
    }
}

#[test]
fn aggregation_over_pipeline_runs_respects_threshold() {
    let e = mock_ensemble(2);
    let s = generate_planted_corpus(1, "en", 2, 0.0).unwrap().remove(0);
    let out = e
        .run_sample(&s.without_gold(), &e.rotations(), false)
        .unwrap();
    let strict = PipelineConfig {
        hard_threshold: 0.95,
        ..e.config().clone()
    };
    // judges say 0.9: nothing clears 0.95 even though every run found the span
    let merged = aggregate_runs(&s.answer, &out.runs, &strict).unwrap();
    assert!(merged.merged_hard.is_empty());
    assert_eq!(
        merged.merged_soft.len(),
        s.gold_hard.as_ref().unwrap().len()
    );
}
