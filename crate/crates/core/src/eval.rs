//! Segment-level evaluation.

use std::collections::BTreeSet;

use crate::data::{split_label, OUTSIDE};

/// An entity span with inclusive token bounds.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub kind: String,
}

impl Segment {
    pub fn new(start: usize, end: usize, kind: impl Into<String>) -> Self {
        Segment {
            start,
            end,
            kind: kind.into(),
        }
    }
}

/// Segments of a BILOU sequence.
///
/// Only well-formed patterns count: `U-X`, or `B-X (I-X)* L-X`. Fragments
/// that never close (or switch type midway) yield nothing.
pub fn extract_segments<S: AsRef<str>>(labels: &[S]) -> BTreeSet<Segment> {
    let mut out = BTreeSet::new();
    let mut open: Option<(usize, &str)> = None;
    for (t, label) in labels.iter().enumerate() {
        match split_label(label.as_ref()) {
            Some(('U', ty)) => {
                out.insert(Segment::new(t, t, ty));
                open = None;
            }
            Some(('B', ty)) => open = Some((t, ty)),
            Some(('I', ty)) => {
                if !matches!(open, Some((_, o)) if o == ty) {
                    open = None;
                }
            }
            Some(('L', ty)) => {
                if let Some((s, o)) = open {
                    if o == ty {
                        out.insert(Segment::new(s, t, ty));
                    }
                }
                open = None;
            }
            _ => open = None,
        }
    }
    out
}

/// BILOU labels of length `len` encoding `segments`.
pub fn segments_to_labels<'a>(segments: impl IntoIterator<Item = &'a Segment>, len: usize) -> Vec<String> {
    let mut out = vec![OUTSIDE.to_string(); len];
    for s in segments {
        if s.start == s.end {
            out[s.start] = format!("U-{}", s.kind);
        } else {
            out[s.start] = format!("B-{}", s.kind);
            for l in &mut out[s.start + 1..s.end] {
                *l = format!("I-{}", s.kind);
            }
            out[s.end] = format!("L-{}", s.kind);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Prf {
    /// `P 90.32 R 89.10 F1 89.71` style, percentages to two decimals.
    pub fn report(&self) -> String {
        format!(
            "P {:.2} R {:.2} F1 {:.2}",
            100.0 * self.precision,
            100.0 * self.recall,
            100.0 * self.f1
        )
    }
}

/// Micro-averaged precision, recall and F1 over aligned per-sequence
/// segment sets. A prediction is correct only if its start, end and type
/// all match a gold segment. Ratios with a zero denominator are 0.
pub fn micro_f1(gold: &[BTreeSet<Segment>], pred: &[BTreeSet<Segment>]) -> Prf {
    assert_eq!(gold.len(), pred.len(), "gold and predictions must be aligned");
    let mut tp = 0;
    let mut n_pred = 0;
    let mut n_gold = 0;
    for (g, p) in gold.iter().zip(pred) {
        tp += g.intersection(p).count();
        n_pred += p.len();
        n_gold += g.len();
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, n_pred);
    let recall = ratio(tp, n_gold);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf {
        precision,
        recall,
        f1,
        true_positives: tp,
        predicted: n_pred,
        gold: n_gold,
    }
}

/// Fraction of positions where `pred` equals `gold`.
pub fn token_accuracy(gold: &[Vec<usize>], pred: &[Vec<usize>]) -> f64 {
    let mut hit = 0;
    let mut n = 0;
    for (g, p) in gold.iter().zip(pred) {
        hit += g.iter().zip(p).filter(|(a, b)| a == b).count();
        n += g.len();
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}
