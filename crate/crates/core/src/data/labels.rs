use std::collections::{BTreeSet, HashMap};

use crate::crf::Constraints;
use crate::error::{Error, Result};

pub const OUTSIDE: &str = "O";

const PREFIXES: [char; 4] = ['B', 'I', 'L', 'U'];

/// Bidirectional map between label ids and BILOU label strings.
///
/// Id 0 is always `O`; each entity type `X` (sorted) then gets
/// `B-X, I-X, L-X, U-X` in that order.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelScheme {
    types: Vec<String>,
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelScheme {
    pub fn from_types<I, S>(types: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let types: Vec<String> = types
            .into_iter()
            .map(Into::into)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut labels = vec![OUTSIDE.to_string()];
        for t in &types {
            for p in PREFIXES {
                labels.push(format!("{p}-{t}"));
            }
        }
        let index = labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        LabelScheme { types, labels, index }
    }

    /// Collects entity types from label strings in any of IOB/BILOU form.
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a str>) -> Self {
        Self::from_types(labels.into_iter().filter_map(|l| split_label(l).map(|(_, t)| t)))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn types(&self) -> &[String] {
        &self.types
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn id_or_err(&self, label: &str) -> Result<usize> {
        self.id(label)
            .ok_or_else(|| Error::Mismatch(format!("label {label} not in the model's label scheme")))
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    /// Prefix letter and type of a label id; `None` for `O`.
    pub fn parts(&self, id: usize) -> Option<(char, &str)> {
        split_label(&self.labels[id])
    }

    /// Transitions permitted by the BILOU grammar.
    pub fn bilou_constraints(&self) -> Constraints {
        let d = self.len();
        let mut transition = vec![false; d * d];
        for i in 0..d {
            for j in 0..d {
                let ok = match (self.parts(i), self.parts(j)) {
                    (Some(('B' | 'I', a)), Some(('I' | 'L', b))) => a == b,
                    (Some(('B' | 'I', _)), _) => false,
                    (_, Some(('I' | 'L', _))) => false,
                    _ => true,
                };
                transition[i * d + j] = ok;
            }
        }
        let start = (0..d).map(|j| !matches!(self.parts(j), Some(('I' | 'L', _)))).collect();
        let end = (0..d).map(|j| !matches!(self.parts(j), Some(('B' | 'I', _)))).collect();
        Constraints { transition, start, end }
    }
}

/// Prefix letter and entity type of a typed label such as `B-PER`.
pub fn split_label(label: &str) -> Option<(char, &str)> {
    let mut chars = label.chars();
    let p = chars.next()?;
    let rest = chars.as_str();
    let ty = rest.strip_prefix('-')?;
    (!ty.is_empty()).then_some((p, ty))
}

/// Converts IOB1/IOB2 labels to BILOU, preserving the segment set.
///
/// `B-X` always opens a segment; `I-X` continues an open `X` segment and
/// otherwise opens one (IOB1). Anything that is not a typed label is `O`.
/// Sequences already in BILOU form pass through unchanged.
pub fn iob_to_bilou<S: AsRef<str>>(labels: &[S]) -> Vec<String> {
    let parts: Vec<Option<(char, &str)>> = labels.iter().map(|l| split_label(l.as_ref())).collect();
    if parts.iter().flatten().any(|(p, _)| matches!(p, 'L' | 'U')) {
        return labels.iter().map(|l| l.as_ref().to_string()).collect();
    }
    // (start, end, type) spans
    let mut spans: Vec<(usize, usize, &str)> = Vec::new();
    for (t, part) in parts.iter().enumerate() {
        match *part {
            Some(('I', ty)) => match spans.last_mut() {
                Some(last) if last.1 + 1 == t && last.2 == ty => last.1 = t,
                _ => spans.push((t, t, ty)),
            },
            Some((_, ty)) => spans.push((t, t, ty)),
            None => {}
        }
    }
    let mut out = vec![OUTSIDE.to_string(); labels.len()];
    for (s, e, ty) in spans {
        if s == e {
            out[s] = format!("U-{ty}");
        } else {
            out[s] = format!("B-{ty}");
            for o in &mut out[s + 1..e] {
                *o = format!("I-{ty}");
            }
            out[e] = format!("L-{ty}");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scheme_layout() {
        let s = LabelScheme::from_types(["PER", "LOC", "ORG", "MISC"]);
        assert_eq!(s.len(), 17);
        assert_eq!(s.label(0), "O");
        assert_eq!(s.label(1), "B-LOC");
        for id in 0..s.len() {
            assert_eq!(s.id(s.label(id)), Some(id));
        }
        assert_eq!(s.id("B-FOO"), None);
    }

    #[test]
    fn from_labels_collects_types() {
        let s = LabelScheme::from_labels(["O", "B-PER", "I-LOC", "U-PER"]);
        assert_eq!(s.types(), &["LOC".to_string(), "PER".to_string()]);
    }

    #[test]
    fn conversions() {
        assert_eq!(iob_to_bilou(&["B-PER", "I-PER", "O"]), ["B-PER", "L-PER", "O"]);
        assert_eq!(iob_to_bilou(&["B-LOC"]), ["U-LOC"]);
        assert_eq!(iob_to_bilou(&["I-ORG", "I-ORG", "B-ORG"]), ["B-ORG", "L-ORG", "U-ORG"]);
        assert_eq!(
            iob_to_bilou(&["I-PER", "I-LOC", "O", "I-LOC"]),
            ["U-PER", "U-LOC", "O", "U-LOC"]
        );
        assert_eq!(iob_to_bilou::<&str>(&[]), Vec::<String>::new());
    }

    #[test]
    fn constraints_follow_grammar() {
        let s = LabelScheme::from_types(["A", "B"]);
        let c = s.bilou_constraints();
        let d = s.len();
        let ok = |a: &str, b: &str| c.transition[s.id(a).unwrap() * d + s.id(b).unwrap()];
        assert!(ok("B-A", "I-A"));
        assert!(ok("I-A", "L-A"));
        assert!(!ok("B-A", "L-B"));
        assert!(!ok("B-A", "O"));
        assert!(ok("L-A", "U-B"));
        assert!(!ok("O", "I-A"));
        assert!(!c.start[s.id("L-A").unwrap()]);
        assert!(!c.end[s.id("B-B").unwrap()]);
        assert!(c.end[s.id("U-B").unwrap()]);
    }
}
