use rand::Rng;

use super::conll::Document;
use super::features::{normalize_digits, shape_class};
use super::labels::{iob_to_bilou, LabelScheme};
use super::vocab::{Vocabulary, UNK};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct Token {
    pub surface: String,
    pub normalized: String,
    pub word_id: usize,
    pub shape_class: usize,
    pub label_id: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SequenceKind {
    Sentence,
    Document,
}

/// A run of tokens labeled as one unit: a sentence, or a whole document.
#[derive(Clone, Debug, PartialEq)]
pub struct TaggedSequence {
    pub tokens: Vec<Token>,
    pub kind: SequenceKind,
    pub doc_id: String,
    /// Lengths of the sentences making up this sequence, in order.
    pub sentence_lengths: Vec<usize>,
}

impl TaggedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn word_ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.word_id).collect()
    }

    pub fn shapes(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.shape_class).collect()
    }

    /// Gold label ids, if every token carries one.
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.tokens.iter().map(|t| t.label_id).collect()
    }
}

/// Turns parsed documents into sentence- or document-level sequences.
///
/// Labels are converted to BILOU per sentence and mapped through `scheme`;
/// when `scheme` is `None` label ids are left empty.
pub fn build_sequences(
    docs: &[Document],
    vocab: &Vocabulary,
    scheme: Option<&LabelScheme>,
    kind: SequenceKind,
) -> Result<Vec<TaggedSequence>> {
    let mut out = Vec::new();
    for doc in docs {
        let mut sentences = Vec::with_capacity(doc.sentences.len());
        for raw in &doc.sentences {
            let bilou = match (scheme, raw.labels()) {
                (Some(_), Some(l)) => Some(iob_to_bilou(&l)),
                _ => None,
            };
            let mut tokens = Vec::with_capacity(raw.len());
            for (i, surface) in raw.tokens().enumerate() {
                let normalized = normalize_digits(surface);
                let label_id = match (&bilou, scheme) {
                    (Some(b), Some(s)) => Some(s.id_or_err(&b[i])?),
                    _ => None,
                };
                tokens.push(Token {
                    surface: surface.to_string(),
                    word_id: vocab.get(&normalized),
                    shape_class: shape_class(surface),
                    normalized,
                    label_id,
                });
            }
            sentences.push(tokens);
        }
        match kind {
            SequenceKind::Sentence => out.extend(sentences.into_iter().map(|tokens| TaggedSequence {
                sentence_lengths: vec![tokens.len()],
                tokens,
                kind,
                doc_id: doc.id.clone(),
            })),
            SequenceKind::Document => {
                let sentence_lengths = sentences.iter().map(Vec::len).collect();
                out.push(TaggedSequence {
                    tokens: sentences.into_iter().flatten().collect(),
                    kind,
                    doc_id: doc.id.clone(),
                    sentence_lengths,
                });
            }
        }
    }
    Ok(out)
}

/// Replaces each word id by UNK with probability `rate`.
pub fn apply_word_dropout<R: Rng>(seq: &TaggedSequence, rate: f64, rng: &mut R) -> TaggedSequence {
    let mut out = seq.clone();
    if rate > 0.0 {
        for t in &mut out.tokens {
            if rng.random::<f64>() < rate {
                t.word_id = UNK;
            }
        }
    }
    out
}

/// Right-padded rows of sequences with a mask over real tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub width: usize,
    pub word_ids: Vec<usize>,
    pub shapes: Vec<usize>,
    pub labels: Vec<usize>,
    pub mask: Vec<bool>,
    /// Index of each row's sequence in the input slice.
    pub members: Vec<usize>,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.members.len()
    }

    pub fn row_len(&self, r: usize) -> usize {
        self.mask[r * self.width..(r + 1) * self.width]
            .iter()
            .filter(|&&m| m)
            .count()
    }

    pub fn real_tokens(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    fn span(&self, r: usize) -> std::ops::Range<usize> {
        r * self.width..r * self.width + self.row_len(r)
    }

    pub fn row_word_ids(&self, r: usize) -> &[usize] {
        &self.word_ids[self.span(r)]
    }

    pub fn row_shapes(&self, r: usize) -> &[usize] {
        &self.shapes[self.span(r)]
    }

    pub fn row_labels(&self, r: usize) -> &[usize] {
        &self.labels[self.span(r)]
    }
}

/// Groups sequences (sorted by length) into padded batches.
pub fn make_batches(seqs: &[TaggedSequence], batch_size: usize, pad_id: usize) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.sort_by_key(|&i| seqs[i].len());
    order
        .chunks(batch_size)
        .map(|members| {
            let width = members.iter().map(|&i| seqs[i].len()).max().unwrap_or(0);
            let cells = members.len() * width;
            let mut b = Batch {
                width,
                word_ids: vec![pad_id; cells],
                shapes: vec![0; cells],
                labels: vec![0; cells],
                mask: vec![false; cells],
                members: members.to_vec(),
            };
            for (r, &i) in members.iter().enumerate() {
                for (c, tok) in seqs[i].tokens.iter().enumerate() {
                    let k = r * width + c;
                    b.word_ids[k] = tok.word_id;
                    b.shapes[k] = tok.shape_class;
                    b.labels[k] = tok.label_id.unwrap_or(0);
                    b.mask[k] = true;
                }
            }
            b
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{read_conll_str, PAD};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::path::Path;

    fn seq(n: usize) -> TaggedSequence {
        TaggedSequence {
            tokens: (0..n)
                .map(|i| Token {
                    surface: format!("w{i}"),
                    normalized: format!("w{i}"),
                    word_id: 2 + i,
                    shape_class: 1,
                    label_id: Some(0),
                })
                .collect(),
            kind: SequenceKind::Sentence,
            doc_id: "d".into(),
            sentence_lengths: vec![n],
        }
    }

    #[test]
    fn batching_pads_and_masks() {
        let seqs = [seq(5), seq(3)];
        let b = make_batches(&seqs, 2, PAD);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].width, 5);
        assert_eq!(b[0].members, vec![1, 0]);
        assert_eq!(b[0].row_len(0), 3);
        assert_eq!(b[0].row_len(1), 5);
        assert_eq!(b[0].word_ids[3], PAD);

        for batch in make_batches(&seqs, 1, PAD) {
            assert!(batch.mask.iter().all(|&m| m));
        }
    }

    #[test]
    fn masked_count_independent_of_batch_size() {
        let seqs: Vec<_> = [4, 1, 7, 7, 2, 9, 3].iter().map(|&n| seq(n)).collect();
        let total: usize = seqs.iter().map(TaggedSequence::len).sum();
        for bs in 1..=8 {
            let n: usize = make_batches(&seqs, bs, PAD).iter().map(Batch::real_tokens).sum();
            assert_eq!(n, total);
        }
    }

    #[test]
    fn word_dropout_rates() {
        let s = seq(50);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(apply_word_dropout(&s, 0.0, &mut rng), s);
        let d = apply_word_dropout(&s, 0.5, &mut rng);
        assert!(d
            .tokens
            .iter()
            .zip(&s.tokens)
            .all(|(a, b)| a.shape_class == b.shape_class && a.label_id == b.label_id && a.surface == b.surface));
        assert!(d.tokens.iter().any(|t| t.word_id == UNK));
    }

    #[test]
    fn document_sequences_concatenate_sentences() {
        let docs = read_conll_str(
            "-DOCSTART- O\n\nJohn B-PER\nran O\n\nin O\nParis B-LOC\n",
            Path::new("x"),
        )
        .unwrap();
        let words: Vec<&str> = docs[0].sentences.iter().flat_map(|s| s.tokens()).collect();
        let vocab = Vocabulary::from_words(words.iter().copied());
        let scheme = LabelScheme::from_types(["PER", "LOC"]);
        let sents = build_sequences(&docs, &vocab, Some(&scheme), SequenceKind::Sentence).unwrap();
        let doc = build_sequences(&docs, &vocab, Some(&scheme), SequenceKind::Document).unwrap();
        assert_eq!(doc.len(), 1);
        let joined: Vec<Token> = sents.iter().flat_map(|s| s.tokens.clone()).collect();
        assert_eq!(doc[0].tokens, joined);
        assert_eq!(doc[0].sentence_lengths, vec![2, 2]);
        assert_eq!(scheme.label(doc[0].tokens[0].label_id.unwrap()), "U-PER");
    }
}
