//! Character-level scoring: IoU of hard labels and Spearman correlation of
//! per-character soft probabilities, averaged per language.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::Prediction;
use crate::spans::{char_set, HardLabel, Sample, SoftLabel, SpanError};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error(transparent)]
    Span(#[from] SpanError),
    #[error("vector lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty vectors")]
    Empty,
    #[error("predictions for unknown sample ids: {}", .0.join(", "))]
    UnknownIds(Vec<String>),
}

/// Character-set IoU. Two empty sets agree perfectly.
pub fn iou(pred: &[HardLabel], gold: &[HardLabel], answer_len: usize) -> Result<f64, MetricsError> {
    for l in pred.iter().chain(gold) {
        l.span.check_within(answer_len)?;
    }
    let p = char_set(pred);
    let g = char_set(gold);
    let union = p.union(&g).count();
    if union == 0 {
        return Ok(1.0);
    }
    Ok(p.intersection(&g).count() as f64 / union as f64)
}

/// Per-character probabilities; overlapping labels take the max.
pub fn soft_vector(labels: &[SoftLabel], answer_len: usize) -> Result<Vec<f64>, MetricsError> {
    let mut v = vec![0.0f64; answer_len];
    for l in labels {
        l.span.check_within(answer_len)?;
        for x in &mut v[l.span.start()..l.span.end()] {
            *x = x.max(l.probability);
        }
    }
    Ok(v)
}

/// 1-based ranks, ties share their average rank.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    (cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0)
}

/// Spearman correlation with average ranks for ties.
///
/// Both vectors constant → 1.0 (they agree on ranking everything equal);
/// exactly one constant → 0.0. Non-finite input is undefined (`None`).
pub fn prob_correlation(pred: &[f64], gold: &[f64]) -> Result<Option<f64>, MetricsError> {
    if pred.len() != gold.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), gold.len()));
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    if !pred.iter().chain(gold).all(|x| x.is_finite()) {
        return Ok(None);
    }
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    match (constant(pred), constant(gold)) {
        (true, true) => return Ok(Some(1.0)),
        (true, false) | (false, true) => return Ok(Some(0.0)),
        _ => {}
    }
    Ok(Some(pearson(&average_ranks(pred), &average_ranks(gold))))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleScore {
    pub id: String,
    pub lang: String,
    pub iou: f64,
    pub corr: Option<f64>,
}

/// Gold soft labels, or hard labels at probability 1.0 when only those exist.
fn gold_soft(sample: &Sample) -> Vec<SoftLabel> {
    match (&sample.gold_soft, &sample.gold_hard) {
        (Some(soft), _) => soft.clone(),
        (None, Some(hard)) => hard
            .iter()
            .map(|h| SoftLabel::new(h.span, 1.0).expect("1.0 is a probability"))
            .collect(),
        (None, None) => Vec::new(),
    }
}

fn gold_hard(sample: &Sample) -> Vec<HardLabel> {
    sample.gold_hard.clone().unwrap_or_default()
}

pub fn score_sample(pred: &Prediction, gold: &Sample) -> Result<SampleScore, MetricsError> {
    let n = gold.answer_len();
    let iou = iou(&pred.hard, &gold_hard(gold), n)?;
    let corr = prob_correlation(
        &soft_vector(&pred.soft, n)?,
        &soft_vector(&gold_soft(gold), n)?,
    )?;
    Ok(SampleScore {
        id: gold.id.clone(),
        lang: gold.lang.clone(),
        iou,
        corr,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangScore {
    pub iou: f64,
    /// Mean over samples with a defined correlation; `None` if there are none.
    pub corr: Option<f64>,
    pub n_samples: usize,
    pub n_corr_undefined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreReport {
    pub by_lang: BTreeMap<String, LangScore>,
    #[serde(skip)]
    pub samples: Vec<SampleScore>,
    /// Gold samples with no prediction, scored as empty.
    #[serde(skip)]
    pub missing: Vec<String>,
}

/// Key used when scores are not grouped by language.
pub const ALL_LANGS: &str = "ALL";

/// Scores every gold sample; missing predictions count as empty label sets.
pub fn score_dataset(
    predictions: &[Prediction],
    gold: &[Sample],
    group_by_lang: bool,
) -> Result<ScoreReport, MetricsError> {
    let by_id: HashMap<&str, &Prediction> =
        predictions.iter().map(|p| (p.id.as_str(), p)).collect();
    let known: HashMap<&str, ()> = gold.iter().map(|s| (s.id.as_str(), ())).collect();
    let mut unknown: Vec<String> = predictions
        .iter()
        .filter(|p| !known.contains_key(p.id.as_str()))
        .map(|p| p.id.clone())
        .collect();
    if !unknown.is_empty() {
        unknown.sort();
        unknown.dedup();
        return Err(MetricsError::UnknownIds(unknown));
    }

    let missing: Vec<String> = gold
        .iter()
        .filter(|s| !by_id.contains_key(s.id.as_str()))
        .map(|s| s.id.clone())
        .collect();
    let samples: Vec<SampleScore> = gold
        .par_iter()
        .map(|s| match by_id.get(s.id.as_str()) {
            Some(p) => score_sample(p, s),
            None => score_sample(&Prediction::empty(s), s),
        })
        .collect::<Result<_, _>>()?;

    let mut groups: BTreeMap<String, Vec<&SampleScore>> = BTreeMap::new();
    for s in &samples {
        let key = if group_by_lang {
            s.lang.clone()
        } else {
            ALL_LANGS.to_owned()
        };
        groups.entry(key).or_default().push(s);
    }
    let by_lang = groups
        .into_iter()
        .map(|(lang, ss)| {
            let corrs: Vec<f64> = ss.iter().filter_map(|s| s.corr).collect();
            let score = LangScore {
                iou: ss.iter().map(|s| s.iou).sum::<f64>() / ss.len() as f64,
                corr: (!corrs.is_empty()).then(|| corrs.iter().sum::<f64>() / corrs.len() as f64),
                n_samples: ss.len(),
                n_corr_undefined: ss.len() - corrs.len(),
            };
            (lang, score)
        })
        .collect();
    Ok(ScoreReport {
        by_lang,
        samples,
        missing,
    })
}

impl ScoreReport {
    /// Plain-text table, one row per language.
    pub fn to_table(&self, title: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{title}");
        let _ = writeln!(
            out,
            "{:<8} {:>9} {:>12} {:>8} {:>10}",
            "lang", "IoU", "Prob. Corr", "n", "corr n/a"
        );
        for (lang, s) in &self.by_lang {
            let corr = s
                .corr
                .map_or_else(|| "n/a".to_owned(), |c| format!("{c:.4}"));
            let _ = writeln!(
                out,
                "{:<8} {:>9.4} {:>12} {:>8} {:>10}",
                lang, s.iou, corr, s.n_samples, s.n_corr_undefined
            );
        }
        out
    }
}
