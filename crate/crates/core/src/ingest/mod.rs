//! JSON-lines datasets in the shared-task layout, plus planted corpora.
//!
//! One record per line:
//!
//! ```json
//! {"id": "...", "lang": "AR", "model_input": "...", "model_output_text": "...",
//!  "soft_labels": [{"start": 3, "end": 9, "prob": 0.8}], "hard_labels": [[3, 9]]}
//! ```
//!
//! Offsets are code-point indices into `model_output_text`, end exclusive.
//! `question`/`answer` are accepted for the two text fields and
//! `probability` for `prob`. Unknown fields (model logits and tokens) are
//! ignored.

pub mod planted;

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spans::{harden, normalize_spans, CharSpan, HardLabel, Sample, SoftLabel, SpanError};

pub use planted::{generate_planted_corpus, planted_sample, recover_planted, PlantedError};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftRecord {
    pub start: usize,
    pub end: usize,
    #[serde(alias = "probability")]
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    #[serde(default)]
    pub lang: String,
    #[serde(default, alias = "question")]
    pub model_input: String,
    #[serde(default, alias = "answer")]
    pub model_output_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft_labels: Option<Vec<SoftRecord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hard_labels: Option<Vec<[usize; 2]>>,
}

/// A record that could not be used, with its 1-based line number.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordIssue {
    pub line: usize,
    pub id: Option<String>,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Skipped records.
    pub issues: Vec<RecordIssue>,
    /// Lines whose overlapping hard labels were merged.
    pub merged_lines: Vec<usize>,
    /// Line number of each entry in `samples`.
    pub lines: Vec<usize>,
}

fn soft_labels(records: &[SoftRecord]) -> Result<Vec<SoftLabel>, SpanError> {
    records
        .iter()
        .map(|r| SoftLabel::new(CharSpan::new(r.start, r.end)?, r.prob))
        .collect()
}

fn hard_labels(pairs: &[[usize; 2]]) -> Result<Vec<HardLabel>, SpanError> {
    pairs
        .iter()
        .map(|&[s, e]| CharSpan::new(s, e).map(HardLabel::from))
        .collect()
}

fn overlaps(hard: &[HardLabel]) -> bool {
    let mut spans: Vec<CharSpan> = hard.iter().map(|h| h.span).collect();
    spans.sort();
    spans.windows(2).any(|w| w[1].start() < w[0].end())
}

impl DatasetRecord {
    /// Checks the record and builds a sample. The flag reports whether
    /// overlapping hard labels were merged.
    pub fn into_sample(self) -> Result<(Sample, bool), SpanError> {
        let soft = self.soft_labels.as_deref().map(soft_labels).transpose()?;
        let hard = self.hard_labels.as_deref().map(hard_labels).transpose()?;
        let merged = hard.as_deref().is_some_and(overlaps);
        let sample = Sample::new(self.id, self.lang, self.model_input, self.model_output_text)?
            .with_gold(soft, hard)?;
        Ok((sample, merged))
    }

    pub fn from_labels(sample: &Sample, soft: &[SoftLabel], hard: &[HardLabel]) -> Self {
        Self {
            id: sample.id.clone(),
            lang: sample.lang.clone(),
            model_input: sample.question.clone(),
            model_output_text: sample.answer.clone(),
            soft_labels: Some(
                soft.iter()
                    .map(|s| SoftRecord {
                        start: s.span.start(),
                        end: s.span.end(),
                        prob: s.probability,
                    })
                    .collect(),
            ),
            hard_labels: Some(
                hard.iter()
                    .map(|h| [h.span.start(), h.span.end()])
                    .collect(),
            ),
        }
    }
}

impl From<&Sample> for DatasetRecord {
    fn from(sample: &Sample) -> Self {
        let mut rec = Self::from_labels(sample, &[], &[]);
        rec.soft_labels = sample.gold_soft.as_ref().map(|soft| {
            soft.iter()
                .map(|s| SoftRecord {
                    start: s.span.start(),
                    end: s.span.end(),
                    prob: s.probability,
                })
                .collect()
        });
        rec.hard_labels = sample.gold_hard.as_ref().map(|hard| {
            hard.iter()
                .map(|h| [h.span.start(), h.span.end()])
                .collect()
        });
        rec
    }
}

/// 1-based line number and the record, or why it could not be decoded.
pub type NumberedRecord = (usize, Result<DatasetRecord, String>);

/// One line of a JSONL file: parsed record or the reason it could not be parsed.
pub fn read_records(path: &Path) -> Result<Vec<NumberedRecord>, IngestError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<DatasetRecord>(trimmed).map_err(|e| e.to_string());
        out.push((i + 1, parsed));
    }
    Ok(out)
}

/// Reads and validates a dataset. Bad records are skipped and listed in
/// [`Dataset::issues`]; only I/O failures are errors.
pub fn read_dataset(path: &Path) -> Result<Dataset, IngestError> {
    let mut ds = Dataset::default();
    let mut seen = HashSet::new();
    for (line, parsed) in read_records(path)? {
        let rec = match parsed {
            Ok(rec) => rec,
            Err(message) => {
                ds.issues.push(RecordIssue {
                    line,
                    id: None,
                    message,
                });
                continue;
            }
        };
        let id = rec.id.clone();
        if !seen.insert(id.clone()) {
            ds.issues.push(RecordIssue {
                line,
                id: Some(id),
                message: "duplicate id".into(),
            });
            continue;
        }
        match rec.into_sample() {
            Ok((sample, merged)) => {
                if merged {
                    ds.merged_lines.push(line);
                }
                ds.samples.push(sample);
                ds.lines.push(line);
            }
            Err(e) => ds.issues.push(RecordIssue {
                line,
                id: Some(id),
                message: e.to_string(),
            }),
        }
    }
    if ds.samples.is_empty() && ds.issues.is_empty() {
        log::warn!("{}: empty dataset", path.display());
    }
    for issue in &ds.issues {
        log::warn!(
            "{}:{}: skipped: {}",
            path.display(),
            issue.line,
            issue.message
        );
    }
    Ok(ds)
}

/// Predicted labels for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub lang: String,
    pub soft: Vec<SoftLabel>,
    pub hard: Vec<HardLabel>,
}

impl Prediction {
    pub fn new(sample: &Sample, soft: Vec<SoftLabel>, hard: Vec<HardLabel>) -> Self {
        Self {
            id: sample.id.clone(),
            lang: sample.lang.clone(),
            soft,
            hard: normalize_spans(&hard),
        }
    }

    /// Hard labels are the soft spans reaching `threshold`.
    pub fn from_soft(sample: &Sample, soft: Vec<SoftLabel>, threshold: f64) -> Self {
        let hard = harden(&soft, threshold);
        Self::new(sample, soft, hard)
    }

    pub fn empty(sample: &Sample) -> Self {
        Self::new(sample, Vec::new(), Vec::new())
    }

    /// Reads the labels stored on a sample loaded from a prediction file.
    pub fn from_sample_labels(sample: &Sample) -> Self {
        Self::new(
            sample,
            sample.gold_soft.clone().unwrap_or_default(),
            sample.gold_hard.clone().unwrap_or_default(),
        )
    }
}

/// Predictions read from a file that may lack the text fields.
#[derive(Debug, Default)]
pub struct PredictionSet {
    pub predictions: Vec<Prediction>,
    pub issues: Vec<RecordIssue>,
}

/// Reads a prediction file. Offsets are only checked for shape here; bounds
/// are checked against the gold answers at scoring time.
pub fn read_predictions(path: &Path) -> Result<PredictionSet, IngestError> {
    let mut set = PredictionSet::default();
    for (line, parsed) in read_records(path)? {
        let built = parsed.and_then(|rec| {
            let soft = soft_labels(rec.soft_labels.as_deref().unwrap_or_default())
                .map_err(|e| e.to_string())?;
            let hard = hard_labels(rec.hard_labels.as_deref().unwrap_or_default())
                .map_err(|e| e.to_string())?;
            Ok(Prediction {
                id: rec.id,
                lang: rec.lang,
                soft,
                hard: normalize_spans(&hard),
            })
        });
        match built {
            Ok(p) => set.predictions.push(p),
            Err(message) => set.issues.push(RecordIssue {
                line,
                id: None,
                message,
            }),
        }
    }
    Ok(set)
}

fn write_lines(
    path: &Path,
    records: impl IntoIterator<Item = DatasetRecord>,
) -> Result<(), IngestError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes one line per pair, in the given order, with both label lists present.
pub fn write_predictions<'a>(
    path: &Path,
    items: impl IntoIterator<Item = (&'a Sample, &'a Prediction)>,
) -> Result<(), IngestError> {
    write_lines(
        path,
        items.into_iter().map(|(sample, pred)| {
            debug_assert_eq!(sample.id, pred.id);
            DatasetRecord::from_labels(sample, &pred.soft, &pred.hard)
        }),
    )
}

/// Writes samples with whatever gold labels they carry.
pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<(), IngestError> {
    write_lines(path, samples.iter().map(DatasetRecord::from))
}
