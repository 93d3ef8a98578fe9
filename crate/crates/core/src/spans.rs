//! Character-indexed spans and labeled samples.
//!
//! Every offset in this crate counts Unicode scalar values (code points) of
//! the answer text, never bytes or UTF-16 units. A span is the half-open
//! interval `[start, end)` and is never empty.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpanError {
    #[error("empty or inverted span [{start}, {end})")]
    Empty { start: usize, end: usize },
    #[error("span [{start}, {end}) exceeds answer length {len}")]
    OutOfBounds {
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("probability {0} outside [0, 1]")]
    Probability(f64),
    #[error("sample {0}: answer is empty")]
    EmptyAnswer(String),
}

/// Half-open code-point interval `[start, end)` with `start < end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CharSpan {
    start: usize,
    end: usize,
}

impl CharSpan {
    pub fn new(start: usize, end: usize) -> Result<Self, SpanError> {
        if start >= end {
            return Err(SpanError::Empty { start, end });
        }
        Ok(Self { start, end })
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    // A CharSpan is never empty; kept for clippy's len_without_is_empty.
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Fails unless the span fits inside a text of `len` code points.
    pub fn check_within(&self, len: usize) -> Result<(), SpanError> {
        if self.end > len {
            return Err(SpanError::OutOfBounds {
                start: self.start,
                end: self.end,
                len,
            });
        }
        Ok(())
    }

    /// Number of code points shared by both spans.
    pub fn overlap(&self, other: &CharSpan) -> usize {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        hi.saturating_sub(lo)
    }

    /// Intersection over union of the two intervals.
    pub fn iou(&self, other: &CharSpan) -> f64 {
        let inter = self.overlap(other);
        let union = self.len() + other.len() - inter;
        inter as f64 / union as f64
    }

    /// The substring covered by this span, or `None` if it runs past the text.
    pub fn slice<'a>(&self, text: &'a str) -> Option<&'a str> {
        let from = byte_offset(text, self.start)?;
        let to = byte_offset(text, self.end)?;
        Some(&text[from..to])
    }
}

impl fmt::Display for CharSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

/// Length of `text` in code points.
pub fn char_len(text: &str) -> usize {
    text.chars().count()
}

/// Byte offset of the code point at `char_idx`; `char_idx == char_len` maps to `text.len()`.
pub fn byte_offset(text: &str, char_idx: usize) -> Option<usize> {
    text.char_indices()
        .map(|(b, _)| b)
        .chain(std::iter::once(text.len()))
        .nth(char_idx)
}

/// Code-point index of a byte offset that lies on a char boundary.
pub fn char_index(text: &str, byte_idx: usize) -> usize {
    text[..byte_idx].chars().count()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftLabel {
    pub span: CharSpan,
    pub probability: f64,
}

impl SoftLabel {
    pub fn new(span: CharSpan, probability: f64) -> Result<Self, SpanError> {
        if !(0.0..=1.0).contains(&probability) {
            return Err(SpanError::Probability(probability));
        }
        Ok(Self { span, probability })
    }

    /// The hard label for this span if its probability reaches `threshold` (inclusive).
    pub fn to_hard(&self, threshold: f64) -> Option<HardLabel> {
        (self.probability >= threshold).then_some(HardLabel { span: self.span })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HardLabel {
    pub span: CharSpan,
}

impl From<CharSpan> for HardLabel {
    fn from(span: CharSpan) -> Self {
        Self { span }
    }
}

/// Hard labels derived from soft labels at `threshold`, normalized.
pub fn harden(soft: &[SoftLabel], threshold: f64) -> Vec<HardLabel> {
    let hard: Vec<HardLabel> = soft.iter().filter_map(|s| s.to_hard(threshold)).collect();
    normalize_spans(&hard)
}

/// One question/answer pair, optionally with gold labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub lang: String,
    pub question: String,
    pub answer: String,
    pub gold_soft: Option<Vec<SoftLabel>>,
    pub gold_hard: Option<Vec<HardLabel>>,
}

impl Sample {
    /// Unlabeled sample. Fails on an empty answer.
    pub fn new(
        id: impl Into<String>,
        lang: impl Into<String>,
        question: impl Into<String>,
        answer: impl Into<String>,
    ) -> Result<Self, SpanError> {
        let sample = Self {
            id: id.into(),
            lang: lang.into(),
            question: question.into(),
            answer: answer.into(),
            gold_soft: None,
            gold_hard: None,
        };
        if sample.answer.is_empty() {
            return Err(SpanError::EmptyAnswer(sample.id));
        }
        Ok(sample)
    }

    /// Attaches gold labels after bounds checks; hard labels are merged when they overlap.
    pub fn with_gold(
        mut self,
        soft: Option<Vec<SoftLabel>>,
        hard: Option<Vec<HardLabel>>,
    ) -> Result<Self, SpanError> {
        let len = self.answer_len();
        for s in soft.iter().flatten() {
            s.span.check_within(len)?;
        }
        for h in hard.iter().flatten() {
            h.span.check_within(len)?;
        }
        self.gold_soft = soft;
        self.gold_hard = hard.map(|h| normalize_spans(&h));
        Ok(self)
    }

    pub fn answer_len(&self) -> usize {
        char_len(&self.answer)
    }

    pub fn span_text(&self, span: &CharSpan) -> Option<&str> {
        span.slice(&self.answer)
    }

    pub fn without_gold(&self) -> Self {
        Self {
            gold_soft: None,
            gold_hard: None,
            ..self.clone()
        }
    }
}

/// Sorts spans by start and merges overlapping or touching ones.
pub fn normalize_spans(labels: &[HardLabel]) -> Vec<HardLabel> {
    let mut spans: Vec<CharSpan> = labels.iter().map(|l| l.span).collect();
    spans.sort();
    let mut out: Vec<CharSpan> = Vec::with_capacity(spans.len());
    for span in spans {
        match out.last_mut() {
            Some(last) if span.start <= last.end => last.end = last.end.max(span.end),
            _ => out.push(span),
        }
    }
    out.into_iter().map(HardLabel::from).collect()
}

/// Set of code-point indices covered by any label.
pub fn char_set(labels: &[HardLabel]) -> BTreeSet<usize> {
    labels
        .iter()
        .flat_map(|l| l.span.start..l.span.end)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hard(pairs: &[(usize, usize)]) -> Vec<HardLabel> {
        pairs
            .iter()
            .map(|&(s, e)| CharSpan::new(s, e).unwrap().into())
            .collect()
    }

    #[test]
    fn empty_span_rejected() {
        assert!(CharSpan::new(3, 3).is_err());
        assert!(CharSpan::new(4, 3).is_err());
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_spans(&hard(&[(0, 5), (3, 8)])), hard(&[(0, 8)]));
        assert_eq!(normalize_spans(&hard(&[(0, 2), (2, 4)])), hard(&[(0, 4)]));
        assert_eq!(
            normalize_spans(&hard(&[(5, 7), (0, 2)])),
            hard(&[(0, 2), (5, 7)])
        );
        assert!(normalize_spans(&[]).is_empty());
    }

    #[test]
    fn char_set_examples() {
        assert_eq!(char_set(&hard(&[(0, 3)])), BTreeSet::from([0, 1, 2]));
        assert!(char_set(&[]).is_empty());
        assert_eq!(
            char_set(&hard(&[(0, 2), (1, 4)])),
            BTreeSet::from([0, 1, 2, 3])
        );
    }

    #[test]
    fn slicing_counts_code_points() {
        let text = "برج إيفل ٣٣٠ مترًا";
        let span = CharSpan::new(4, 8).unwrap();
        assert_eq!(span.slice(text), Some("إيفل"));
        assert_eq!(CharSpan::new(0, 19).unwrap().slice(text), None);
        let hi = "यह १८८९ में";
        assert_eq!(CharSpan::new(3, 7).unwrap().slice(hi), Some("१८८९"));
    }

    #[test]
    fn sample_rejects_out_of_bounds_gold() {
        let s = Sample::new("x", "en", "q", "abc").unwrap();
        let bad = hard(&[(1, 4)]);
        assert!(matches!(
            s.clone().with_gold(None, Some(bad)),
            Err(SpanError::OutOfBounds { .. })
        ));
        let merged = s.with_gold(None, Some(hard(&[(0, 2), (1, 3)]))).unwrap();
        assert_eq!(merged.gold_hard.unwrap(), hard(&[(0, 3)]));
    }

    #[test]
    fn empty_answer_rejected() {
        assert!(matches!(
            Sample::new("x", "en", "q", ""),
            Err(SpanError::EmptyAnswer(_))
        ));
    }

    #[test]
    fn hard_threshold_is_inclusive() {
        let s = SoftLabel::new(CharSpan::new(0, 1).unwrap(), 0.7).unwrap();
        assert!(s.to_hard(0.7).is_some());
        assert!(s.to_hard(0.7000001).is_none());
        assert!(SoftLabel::new(CharSpan::new(0, 1).unwrap(), 1.2).is_err());
    }

    fn arb_labels() -> impl Strategy<Value = Vec<HardLabel>> {
        prop::collection::vec((0usize..60, 1usize..15), 0..12).prop_map(|v| {
            v.into_iter()
                .map(|(s, l)| CharSpan::new(s, s + l).unwrap().into())
                .collect()
        })
    }

    proptest! {
        #[test]
        fn normalize_preserves_char_set(labels in arb_labels()) {
            prop_assert_eq!(char_set(&normalize_spans(&labels)), char_set(&labels));
        }

        #[test]
        fn normalize_is_idempotent(labels in arb_labels()) {
            let once = normalize_spans(&labels);
            prop_assert_eq!(normalize_spans(&once), once);
        }

        #[test]
        fn slice_length_matches_span(text in "\\PC{0,40}", a in 0usize..40, l in 1usize..10) {
            let span = CharSpan::new(a, a + l).unwrap();
            if let Some(s) = span.slice(&text) {
                prop_assert_eq!(s.chars().count(), l);
            } else {
                prop_assert!(a + l > char_len(&text));
            }
        }
    }
}
