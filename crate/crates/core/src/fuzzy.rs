//! Levenshtein distance, normalized similarity, partial ratio, and
//! localization of extracted span text inside an answer.
//!
//! All lengths and distances are measured in code points. Matching is
//! case- and whitespace-sensitive.

use crate::spans::{char_index, CharSpan};

/// Default similarity an extracted span must reach to be localized.
pub const DEFAULT_ALIGNMENT_THRESHOLD: f64 = 0.9;

/// Where an extracted span text was found in the answer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub span: CharSpan,
    pub similarity: f64,
    /// Found by verbatim substring search.
    pub exact: bool,
}

/// Unit-cost edit distance over code points.
pub fn levenshtein(a: &str, b: &str) -> usize {
    // for ASCII, bytes are code points
    if a.is_ascii() && b.is_ascii() {
        return edit_distance(a.as_bytes(), b.as_bytes());
    }
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    edit_distance(&a, &b)
}

pub(crate) fn levenshtein_chars(a: &[char], b: &[char]) -> usize {
    edit_distance(a, b)
}

fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    // a shared prefix or suffix never costs anything
    let prefix = a.iter().zip(b).take_while(|(x, y)| x == y).count();
    let (a, b) = (&a[prefix..], &b[prefix..]);
    let suffix = a
        .iter()
        .rev()
        .zip(b.iter().rev())
        .take_while(|(x, y)| x == y)
        .count();
    let (a, b) = (&a[..a.len() - suffix], &b[..b.len() - suffix]);
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    // single row over `b`, rolling through `a`
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let above = row[j + 1];
            let sub = diag + usize::from(ca != cb);
            row[j + 1] = sub.min(above + 1).min(row[j] + 1);
            diag = above;
        }
    }
    row[b.len()]
}

/// `1 - lev(a, b) / max(|a|, |b|)`. Two empty strings are identical (1.0).
pub fn similarity(a: &str, b: &str) -> f64 {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    similarity_chars(&a, &b)
}

fn similarity_chars(a: &[char], b: &[char]) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0;
    }
    ratio(levenshtein_chars(a, b), longest)
}

fn ratio(distance: usize, longest: usize) -> f64 {
    1.0 - distance as f64 / longest as f64
}

/// Best [`similarity`] of the shorter string against every equal-length
/// window of the longer one.
///
/// An empty needle scores 0.0 against a non-empty haystack and 1.0 against
/// an empty one.
pub fn partial_ratio(needle: &str, haystack: &str) -> f64 {
    let mut short: Vec<char> = needle.chars().collect();
    let mut long: Vec<char> = haystack.chars().collect();
    if short.len() > long.len() {
        std::mem::swap(&mut short, &mut long);
    }
    if short.is_empty() {
        return if long.is_empty() { 1.0 } else { 0.0 };
    }
    let m = short.len();
    let mut best_dist = usize::MAX;
    for window in long.windows(m) {
        best_dist = best_dist.min(levenshtein_chars(&short, window));
        if best_dist == 0 {
            break;
        }
    }
    ratio(best_dist, m)
}

/// Shortest and longest window searched for a span text of `m` code points:
/// `[ceil(0.8 m), floor(1.25 m)]`.
pub fn window_bounds(m: usize) -> (usize, usize) {
    ((4 * m).div_ceil(5), 5 * m / 4)
}

/// Maps extracted span text to offsets in `answer`.
///
/// The leftmost verbatim occurrence wins outright. Otherwise every window
/// whose length lies in [`window_bounds`] is scored with [`similarity`]; the
/// best one is returned if it reaches `threshold`. Ties prefer the leftmost
/// start, then the shortest window.
pub fn locate_span(span_text: &str, answer: &str, threshold: f64) -> Option<Alignment> {
    if span_text.is_empty() {
        return None;
    }
    let target: Vec<char> = span_text.chars().collect();
    let m = target.len();

    if let Some(byte) = answer.find(span_text) {
        let start = char_index(answer, byte);
        return Some(Alignment {
            span: CharSpan::new(start, start + m).ok()?,
            similarity: 1.0,
            exact: true,
        });
    }

    let text: Vec<char> = answer.chars().collect();
    let (lo, hi) = window_bounds(m);
    let mut best: Option<(f64, usize, usize)> = None;
    let mut row = vec![0usize; m + 1];

    for start in 0..text.len() {
        let max_len = hi.min(text.len() - start);
        if max_len < lo {
            break;
        }
        // row[j] = lev(window[..i], target[..j]) as the window grows one char at a time
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = j;
        }
        for i in 1..=max_len {
            let c = text[start + i - 1];
            let mut diag = row[0];
            row[0] = i;
            for j in 1..=m {
                let above = row[j];
                let sub = diag + usize::from(c != target[j - 1]);
                row[j] = sub.min(above + 1).min(row[j - 1] + 1);
                diag = above;
            }
            if i >= lo {
                let sim = ratio(row[m], i.max(m));
                if best.is_none_or(|(b, _, _)| sim > b) {
                    best = Some((sim, start, i));
                }
            }
        }
    }

    let (sim, start, len) = best?;
    if sim < threshold {
        return None;
    }
    Some(Alignment {
        span: CharSpan::new(start, start + len).ok()?,
        similarity: sim,
        exact: false,
    })
}
