//! Prompt templates and model-response parsing.
//!
//! Templates are ordered `(heading, body)` sections with `{name}`
//! placeholders. Only `{identifier}` is special, so literal JSON such as
//! `[{"text": ...}]` can appear in a body unescaped. Substituted values are
//! never rescanned.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::spans::Sample;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("unbound placeholder {{{0}}} in template {1}")]
    Unbound(String, String),
    #[error("sample {id}: field `{field}` is empty")]
    EmptyField { id: String, field: &'static str },
    #[error("reading template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{reason} (raw output: {raw:?})")]
pub struct ParseError {
    pub reason: String,
    pub raw: String,
}

impl ParseError {
    fn new(reason: impl Into<String>, raw: &str) -> Self {
        Self {
            reason: reason.into(),
            raw: raw.to_owned(),
        }
    }
}

static PLACEHOLDER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").unwrap());

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    /// Empty for an untitled preamble.
    pub heading: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub version: String,
    pub sections: Vec<Section>,
}

const QA_BODY: &str = "i) Question:\n{question}\n\nii) Answer:\n{answer}";

const TASK_BODY: &str = "You are a professional annotator and {lang} linguistic expert. \
Your job is to detect and extract hallucination spans from the provided answer compared to the question.";

const EXACT_BODY: &str = "Extract spans word-for-word and character-for-character exactly as they appear in the answer. \
Ensure perfect alignment, including punctuation, capitalization, and spacing. \
If a span is partially supported, only extract the unsupported portion. \
Preserve original numeral formats: Persian/Arabic numerals must remain in their native script.";

const MINIMAL_BODY: &str = "Select the smallest possible spans that, when removed, completely eliminate the hallucination. \
Prioritize precision: Avoid extracting entire sentences if a shorter phrase accurately captures the hallucination. \
Ensure the extracted span exclusively contains hallucinated content without removing valid information.";

const DEFINITION_BODY: &str =
    "Any phrase, entity, number, or fact that is not supported by the question. \
Any exaggeration or overly specific detail absent in the question. \
Incorrect names, locations, numbers, dates, or causes. \
In yes/no questions, unsupported answers (e.g., \"Yes\", \"No\") and speculative details.";

const LABELS_BODY: &str =
    "Assign probabilities [0.0 - 1.0] for soft labels based on hallucination confidence. \
Include spans with >= 0.7 probability in hard labels.";

const EXTRACT_FORMAT_BODY: &str = "Respond with only a JSON array. Each element is an object \
{\"text\": <span copied exactly from the answer>, \"probability\": <number between 0.0 and 1.0>}. \
Respond with [] if the answer contains no hallucination.";

const ADJUDICATE_TASK_BODY: &str = "You are a professional annotator and {lang} linguistic expert. \
Your job is to judge whether the candidate span taken from the provided answer is a hallucination compared to the question.";

const ADJUDICATE_FORMAT_BODY: &str =
    "Respond with only a JSON object {\"probability\": <number between 0.0 and 1.0>} \
giving the probability that the candidate span is hallucinated.";

pub const OUTPUT_FORMAT_HEADING: &str = "Output Format";

fn section(heading: &str, body: &str) -> Section {
    Section {
        heading: heading.to_owned(),
        body: body.to_owned(),
    }
}

impl PromptTemplate {
    /// The annotation instructions used for span extraction, followed by a
    /// JSON output-format section.
    pub fn extraction_default() -> Self {
        Self {
            version: "extract-v1".into(),
            sections: vec![
                section("Question & Answer Pair", QA_BODY),
                section("Task Description", TASK_BODY),
                section("Exact Span Matching", EXACT_BODY),
                section("Minimal Spans", MINIMAL_BODY),
                section("Hallucination Definition", DEFINITION_BODY),
                section("Soft and Hard Labels", LABELS_BODY),
                section(OUTPUT_FORMAT_HEADING, EXTRACT_FORMAT_BODY),
            ],
        }
    }

    /// Judge prompt: one candidate span, one probability back. Reuses the
    /// extraction template's hallucination definition.
    pub fn adjudication_default() -> Self {
        Self {
            version: "adjudicate-v1".into(),
            sections: vec![
                section("Question & Answer Pair", QA_BODY),
                section("Candidate Span", "{span}"),
                section("Task Description", ADJUDICATE_TASK_BODY),
                section("Hallucination Definition", DEFINITION_BODY),
                section(OUTPUT_FORMAT_HEADING, ADJUDICATE_FORMAT_BODY),
            ],
        }
    }

    /// Parses the plain-text template format: an optional first line
    /// `# version: <id>`, then sections introduced by `## <heading>` lines.
    /// Text before the first heading forms an untitled section.
    pub fn parse(text: &str) -> Self {
        let mut version = "custom".to_owned();
        let mut sections: Vec<Section> = Vec::new();
        let mut current: Option<Section> = None;
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if let Some(v) = line.strip_prefix("# version:") {
                    version = v.trim().to_owned();
                    continue;
                }
            }
            if let Some(h) = line.strip_prefix("## ") {
                sections.extend(current.take());
                current = Some(section(h.trim(), ""));
                continue;
            }
            let cur = current.get_or_insert_with(|| section("", ""));
            if !cur.body.is_empty() || !line.trim().is_empty() {
                if !cur.body.is_empty() {
                    cur.body.push('\n');
                }
                cur.body.push_str(line);
            }
        }
        sections.extend(current);
        for s in &mut sections {
            s.body.truncate(s.body.trim_end().len());
        }
        sections.retain(|s| !(s.heading.is_empty() && s.body.is_empty()));
        Self { version, sections }
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::parse(&text))
    }

    /// Adds a section (e.g. few-shot examples) just before the output-format
    /// section, or at the end when there is none.
    pub fn with_section(mut self, heading: &str, body: &str) -> Self {
        let at = self
            .sections
            .iter()
            .position(|s| s.heading == OUTPUT_FORMAT_HEADING)
            .unwrap_or(self.sections.len());
        self.sections.insert(at, section(heading, body));
        self
    }

    /// Names of every placeholder referenced by the template.
    pub fn placeholders(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .sections
            .iter()
            .flat_map(|s| PLACEHOLDER.captures_iter(&s.body))
            .map(|c| c[1].to_owned())
            .collect();
        names.sort();
        names.dedup();
        names
    }

    /// Substitutes every `{name}` from `bindings`; any unbound name is an error.
    pub fn render(&self, bindings: &HashMap<&str, &str>) -> Result<String, PromptError> {
        let mut blocks = Vec::with_capacity(self.sections.len());
        for s in &self.sections {
            let body = substitute(&s.body, bindings)
                .map_err(|name| PromptError::Unbound(name, self.version.clone()))?;
            blocks.push(if s.heading.is_empty() {
                body
            } else {
                format!("## {}\n{}", s.heading, body)
            });
        }
        Ok(blocks.join("\n\n"))
    }
}

fn substitute(body: &str, bindings: &HashMap<&str, &str>) -> Result<String, String> {
    let mut out = String::with_capacity(body.len());
    let mut last = 0;
    for cap in PLACEHOLDER.captures_iter(body) {
        let whole = cap.get(0).unwrap();
        let value = bindings.get(&cap[1]).ok_or_else(|| cap[1].to_owned())?;
        out.push_str(&body[last..whole.start()]);
        out.push_str(value);
        last = whole.end();
    }
    out.push_str(&body[last..]);
    Ok(out)
}

fn sample_bindings(sample: &Sample) -> Result<HashMap<&str, &str>, PromptError> {
    for (field, value) in [
        ("lang", &sample.lang),
        ("question", &sample.question),
        ("answer", &sample.answer),
    ] {
        if value.is_empty() {
            return Err(PromptError::EmptyField {
                id: sample.id.clone(),
                field,
            });
        }
    }
    Ok(HashMap::from([
        ("lang", sample.lang.as_str()),
        ("question", sample.question.as_str()),
        ("answer", sample.answer.as_str()),
    ]))
}

/// Extraction prompt for one sample.
pub fn render_prompt(template: &PromptTemplate, sample: &Sample) -> Result<String, PromptError> {
    template.render(&sample_bindings(sample)?)
}

/// Adjudication prompt for one candidate span of a sample.
pub fn render_adjudication(
    template: &PromptTemplate,
    sample: &Sample,
    span_text: &str,
) -> Result<String, PromptError> {
    let mut bindings = sample_bindings(sample)?;
    bindings.insert("span", span_text);
    template.render(&bindings)
}

/// A span proposed by the extractor, before localization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCandidate {
    pub text: String,
    pub probability: f64,
    /// The model reported a probability outside [0, 1].
    #[serde(skip)]
    pub clamped: bool,
}

impl RawCandidate {
    pub fn new(text: impl Into<String>, probability: f64) -> Self {
        let clamped = !(0.0..=1.0).contains(&probability);
        Self {
            text: text.into(),
            probability: probability.clamp(0.0, 1.0),
            clamped,
        }
    }
}

/// The inner text of the first fenced code block, or the trimmed input.
fn unfence(raw: &str) -> &str {
    let trimmed = raw.trim();
    let Some(open) = trimmed.find("```") else {
        return trimmed;
    };
    let after = &trimmed[open + 3..];
    // skip an info string such as `json`
    let body = match after.find('\n') {
        Some(nl) if !after[..nl].contains(['[', '{']) => &after[nl + 1..],
        _ => after,
    };
    match body.find("```") {
        Some(close) => body[..close].trim(),
        None => body.trim(),
    }
}

fn parse_json_payload(raw: &str, open: char, close: char) -> Option<Value> {
    if let Ok(v) = serde_json::from_str::<Value>(raw.trim()) {
        return Some(v);
    }
    let payload = unfence(raw);
    if let Ok(v) = serde_json::from_str::<Value>(payload) {
        return Some(v);
    }
    let from = payload.find(open)?;
    let to = payload.rfind(close)?;
    if to <= from {
        return None;
    }
    serde_json::from_str(&payload[from..=to]).ok()
}

fn number_field(obj: &serde_json::Map<String, Value>, keys: &[&str]) -> Option<f64> {
    keys.iter()
        .find_map(|k| obj.get(*k).and_then(Value::as_f64))
}

/// Reads the extractor's `[{"text": ..., "probability": ...}]` payload,
/// fenced or bare. Duplicate texts collapse onto the first occurrence with
/// the highest probability seen.
pub fn parse_extraction(raw: &str) -> Result<Vec<RawCandidate>, ParseError> {
    let value =
        parse_json_payload(raw, '[', ']').ok_or_else(|| ParseError::new("no JSON array", raw))?;
    let items = match value {
        Value::Array(items) => items,
        Value::Object(mut obj) => match ["spans", "hallucinations", "candidates"]
            .iter()
            .find_map(|k| obj.remove(*k))
        {
            Some(Value::Array(items)) => items,
            _ => return Err(ParseError::new("object without a span array", raw)),
        },
        _ => return Err(ParseError::new("payload is not an array", raw)),
    };

    let mut out: Vec<RawCandidate> = Vec::with_capacity(items.len());
    for item in items {
        let obj = item
            .as_object()
            .ok_or_else(|| ParseError::new("array element is not an object", raw))?;
        let text = obj
            .get("text")
            .and_then(Value::as_str)
            .ok_or_else(|| ParseError::new("element without string `text`", raw))?;
        let p = number_field(obj, &["probability", "prob"])
            .ok_or_else(|| ParseError::new("element without numeric `probability`", raw))?;
        if text.is_empty() {
            log::debug!("skipping empty extracted span");
            continue;
        }
        let cand = RawCandidate::new(text, p);
        if cand.clamped {
            log::warn!("clamped extracted probability {p} for {text:?}");
        }
        match out.iter_mut().find(|c| c.text == cand.text) {
            Some(existing) if cand.probability > existing.probability => {
                existing.probability = cand.probability;
                existing.clamped = cand.clamped;
            }
            Some(_) => {}
            None => out.push(cand),
        }
    }
    Ok(out)
}

/// Inverse of [`parse_extraction`] for well-formed candidate lists.
pub fn serialize_candidates(candidates: &[RawCandidate]) -> String {
    serde_json::to_string(candidates).expect("candidates serialize")
}

static NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"-?(?:\d+(?:\.\d+)?|\.\d+)(?:[eE][-+]?\d+)?").unwrap());

fn first_unit_number(value: &Value) -> Option<f64> {
    match value {
        Value::Number(n) => n.as_f64().filter(|p| (0.0..=1.0).contains(p)),
        Value::Array(items) => items.iter().find_map(first_unit_number),
        Value::Object(obj) => number_field(obj, &["probability", "prob", "p", "score"])
            .filter(|p| (0.0..=1.0).contains(p))
            .or_else(|| obj.values().find_map(first_unit_number)),
        _ => None,
    }
}

/// Reads a judge's single probability: a JSON number or object, or else the
/// first number in [0, 1] anywhere in the text.
pub fn parse_adjudication(raw: &str) -> Result<f64, ParseError> {
    if let Some(p) = parse_json_payload(raw, '{', '}')
        .as_ref()
        .and_then(first_unit_number)
    {
        return Ok(p);
    }
    NUMBER
        .find_iter(raw)
        .filter_map(|m| m.as_str().parse::<f64>().ok())
        .find(|p| (0.0..=1.0).contains(p))
        .ok_or_else(|| ParseError::new("no probability in [0, 1]", raw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(lang: &str, q: &str, a: &str) -> Sample {
        Sample::new("s1", lang, q, a).unwrap()
    }

    #[test]
    fn default_template_names_language_once() {
        let t = PromptTemplate::extraction_default();
        let p = render_prompt(&t, &sample("ar", "ما هو؟", "جواب")).unwrap();
        assert_eq!(p.matches("ar linguistic expert").count(), 1);
        assert!(p.contains("ما هو؟"));
        assert!(p.contains("## Exact Span Matching"));
        assert!(p.contains("## Minimal Spans"));
        assert!(p.contains("## Hallucination Definition"));
        assert!(p.contains("## Soft and Hard Labels"));
        assert!(!PLACEHOLDER.is_match(&p));
    }

    #[test]
    fn placeholder_free_template_is_identity() {
        let body = "Plain text with a JSON example [{\"text\": \"x\"}] inside.";
        let t = PromptTemplate::parse(body);
        assert_eq!(t.render(&HashMap::new()).unwrap(), body);
    }

    #[test]
    fn unknown_placeholder_is_an_error() {
        let t = PromptTemplate::parse("Hello {unknown}");
        let err = render_prompt(&t, &sample("en", "q", "a")).unwrap_err();
        assert!(matches!(err, PromptError::Unbound(name, _) if name == "unknown"));
    }

    #[test]
    fn empty_language_rejected() {
        let t = PromptTemplate::extraction_default();
        let s = Sample::new("s", "", "q", "a").unwrap();
        assert!(matches!(
            render_prompt(&t, &s),
            Err(PromptError::EmptyField { field: "lang", .. })
        ));
    }

    #[test]
    fn substituted_values_are_not_rescanned() {
        let t = PromptTemplate::extraction_default();
        let p = render_prompt(&t, &sample("en", "What is {answer}?", "It is {lang}.")).unwrap();
        assert!(p.contains("What is {answer}?"));
        assert!(p.contains("It is {lang}."));
    }

    #[test]
    fn template_file_format() {
        let text = "# version: t2\n## Task\nYou are a {lang} expert.\n\n## Pair\nQ: {question}\nA: {answer}\n";
        let t = PromptTemplate::parse(text);
        assert_eq!(t.version, "t2");
        assert_eq!(t.sections.len(), 2);
        assert_eq!(t.placeholders(), vec!["answer", "lang", "question"]);
        let p = render_prompt(&t, &sample("fi", "q?", "a.")).unwrap();
        assert_eq!(p, "## Task\nYou are a fi expert.\n\n## Pair\nQ: q?\nA: a.");
    }

    #[test]
    fn few_shot_section_goes_before_output_format() {
        let t = PromptTemplate::extraction_default().with_section("Examples", "Q: x\nA: y");
        let n = t.sections.len();
        assert_eq!(t.sections[n - 2].heading, "Examples");
        assert_eq!(t.sections[n - 1].heading, OUTPUT_FORMAT_HEADING);
    }

    #[test]
    fn adjudication_prompt_contains_span() {
        let t = PromptTemplate::adjudication_default();
        let p = render_adjudication(&t, &sample("hi", "q", "a b c"), "b c").unwrap();
        assert!(p.contains("## Candidate Span\nb c"));
        assert!(p.contains("hi linguistic expert"));
    }

    #[test]
    fn extraction_examples() {
        let c = parse_extraction(r#"[{"text":"in 1999","probability":0.95}]"#).unwrap();
        assert_eq!(c, vec![RawCandidate::new("in 1999", 0.95)]);
        assert!(parse_extraction("[]").unwrap().is_empty());
        let c = parse_extraction(r#"[{"text":"x","probability":1.3}]"#).unwrap();
        assert_eq!(c[0].probability, 1.0);
        assert!(c[0].clamped);
    }

    #[test]
    fn extraction_accepts_fences_and_prose() {
        let raw =
            "Here you go:\n```json\n[{\"text\": \"Paris\", \"probability\": 0.8}]\n```\nDone.";
        assert_eq!(parse_extraction(raw).unwrap()[0].text, "Paris");
        let raw = "Spans: [{\"text\": \"Paris\", \"probability\": 0.8}] end";
        assert_eq!(parse_extraction(raw).unwrap().len(), 1);
        let raw = r#"{"spans": [{"text": "Paris", "prob": 0.4}]}"#;
        assert_eq!(parse_extraction(raw).unwrap()[0].probability, 0.4);
    }

    #[test]
    fn extraction_collapses_duplicates() {
        let raw = r#"[{"text":"a","probability":0.2},{"text":"b","probability":0.5},{"text":"a","probability":0.9}]"#;
        let c = parse_extraction(raw).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!((c[0].text.as_str(), c[0].probability), ("a", 0.9));
        assert_eq!(c[1].text, "b");
    }

    #[test]
    fn extraction_errors_carry_raw_output() {
        let err = parse_extraction("I could not find anything").unwrap_err();
        assert_eq!(err.raw, "I could not find anything");
        assert!(parse_extraction(r#"[{"text":"a"}]"#).is_err());
        assert!(parse_extraction(r#"[1, 2]"#).is_err());
    }

    #[test]
    fn adjudication_examples() {
        assert_eq!(parse_adjudication("0.85").unwrap(), 0.85);
        assert_eq!(parse_adjudication(r#"{"probability": 0.0}"#).unwrap(), 0.0);
        assert!(parse_adjudication("the span is fine").is_err());
        assert_eq!(
            parse_adjudication("```json\n{\"probability\": 0.7}\n```").unwrap(),
            0.7
        );
        assert_eq!(parse_adjudication("Probability: 0.62.").unwrap(), 0.62);
        assert_eq!(parse_adjudication("score 7 of 10, so 0.7").unwrap(), 0.7);
        assert!(parse_adjudication(r#"{"probability": 3}"#).is_err());
    }

    proptest! {
        #[test]
        fn extraction_round_trip(items in prop::collection::vec(("\\PC{1,20}", 0.0f64..=1.0), 0..6)) {
            let mut cands: Vec<RawCandidate> = Vec::new();
            for (t, p) in items {
                if !cands.iter().any(|c| c.text == t) {
                    cands.push(RawCandidate::new(t, p));
                }
            }
            prop_assert_eq!(parse_extraction(&serialize_candidates(&cands)).unwrap(), cands);
        }

        #[test]
        fn distinct_samples_render_distinct_prompts(
            q1 in "[a-z ?]{1,20}", a1 in "[a-z .]{1,20}",
            q2 in "[a-z ?]{1,20}", a2 in "[a-z .]{1,20}",
        ) {
            prop_assume!((&q1, &a1) != (&q2, &a2));
            let t = PromptTemplate::extraction_default();
            let p1 = render_prompt(&t, &sample("en", &q1, &a1)).unwrap();
            let p2 = render_prompt(&t, &sample("en", &q2, &a2)).unwrap();
            prop_assert_ne!(p1, p2);
        }
    }
}
