//! Deterministic stand-in for live models on planted corpora.
//!
//! As extractor it reports exactly the planted spans of the sample; as
//! adjudicator it scores planted spans high and anything else low. Both are
//! pure functions of the sample and the corpus seed.

use super::{Backend, BackendError, Completion, ModelId, ModelRequest, Task};
use crate::ingest::recover_planted;
use crate::prompting::{serialize_candidates, RawCandidate};
use crate::spans::Sample;

/// Probability the mock extractor attaches to every planted span.
pub const MOCK_EXTRACT_PROBABILITY: f64 = 0.95;

/// Extraction payload listing the planted substrings of `sample` in answer order.
pub fn mock_extract(sample: &Sample, plant_key: u64) -> String {
    let candidates: Vec<RawCandidate> = recover_planted(sample, plant_key)
        .iter()
        .filter_map(|span| sample.span_text(span))
        .map(|text| RawCandidate::new(text, MOCK_EXTRACT_PROBABILITY))
        .collect();
    serialize_candidates(&candidates)
}

/// Judge reply: `planted_p` if `span_text` is one of the planted spans.
pub fn mock_adjudicate(
    sample: &Sample,
    plant_key: u64,
    span_text: &str,
    planted_p: f64,
    clean_p: f64,
) -> String {
    let planted = recover_planted(sample, plant_key)
        .iter()
        .any(|span| sample.span_text(span) == Some(span_text));
    let p = if planted { planted_p } else { clean_p };
    format!("{{\"probability\": {p}}}")
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    model: ModelId,
    seed: u64,
    pub planted_probability: f64,
    pub clean_probability: f64,
}

impl MockBackend {
    pub fn new(model: ModelId, seed: u64) -> Self {
        Self {
            model,
            seed,
            planted_probability: 0.9,
            clean_probability: 0.1,
        }
    }
}

impl Backend for MockBackend {
    fn model(&self) -> &ModelId {
        &self.model
    }

    fn complete(&self, request: &ModelRequest<'_>) -> Result<Completion, BackendError> {
        let text = match request.task {
            Task::Extract => mock_extract(request.sample, self.seed),
            Task::Adjudicate { span_text } => mock_adjudicate(
                request.sample,
                self.seed,
                span_text,
                self.planted_probability,
                self.clean_probability,
            ),
        };
        Ok(Completion {
            text,
            cache_hit: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::planted_sample;
    use crate::prompting::{parse_adjudication, parse_extraction};

    fn find(lang: &str, seed: u64, want: usize) -> Sample {
        (0..200)
            .map(|i| planted_sample(lang, seed, i, true).unwrap())
            .find(|(_, spans)| spans.len() == want)
            .map(|(s, _)| s)
            .unwrap()
    }

    #[test]
    fn extracts_planted_spans_in_order() {
        for want in 1..=3 {
            let s = find("en", 4, want);
            let c = parse_extraction(&mock_extract(&s, 4)).unwrap();
            assert_eq!(c.len(), want);
            let gold = s.gold_hard.as_ref().unwrap();
            for (cand, g) in c.iter().zip(gold) {
                assert_eq!(Some(cand.text.as_str()), s.span_text(&g.span));
                assert_eq!(cand.probability, MOCK_EXTRACT_PROBABILITY);
            }
        }
    }

    #[test]
    fn clean_sample_gives_empty_payload() {
        let (s, spans) = planted_sample("ar", 2, 0, false).unwrap();
        assert!(spans.is_empty());
        assert_eq!(mock_extract(&s, 2), "[]");
    }

    #[test]
    fn adjudication_separates_planted_from_clean() {
        let s = find("hi", 9, 1);
        let gold = s.gold_hard.as_ref().unwrap()[0].span;
        let text = s.span_text(&gold).unwrap();
        assert_eq!(
            parse_adjudication(&mock_adjudicate(&s, 9, text, 0.9, 0.1)).unwrap(),
            0.9
        );
        assert_eq!(
            parse_adjudication(&mock_adjudicate(&s, 9, "other", 0.9, 0.1)).unwrap(),
            0.1
        );
    }

    #[test]
    fn repeated_calls_identical() {
        let s = find("de", 1, 2);
        assert_eq!(mock_extract(&s, 1), mock_extract(&s, 1));
    }
}
