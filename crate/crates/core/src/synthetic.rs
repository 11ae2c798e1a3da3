//! Synthetic tagging corpora with long-range dependencies.
//!
//! In a [`LagTask`] corpus the label of token `t` is decided by the word at
//! `t - lag`: each entity type owns a few words, and a word of type `X` at
//! `t - lag` makes `t` a `U-X`. Filler words and positions `t < lag` are `O`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Document, RawSentence, OUTSIDE};

#[derive(Clone, Debug)]
pub struct LagTask {
    pub lag: usize,
    /// Number of entity types, named `A`, `B`, ...
    pub types: usize,
    pub words_per_type: usize,
    pub filler_words: usize,
    pub len: usize,
    /// Probability that a label is replaced by one drawn uniformly.
    pub noise: f64,
}

impl Default for LagTask {
    fn default() -> Self {
        LagTask {
            lag: 12,
            types: 3,
            words_per_type: 3,
            filler_words: 3,
            len: 40,
            noise: 0.0,
        }
    }
}

impl LagTask {
    pub fn type_name(k: usize) -> String {
        char::from(b'A' + k as u8).to_string()
    }

    pub fn type_names(&self) -> Vec<String> {
        (0..self.types).map(Self::type_name).collect()
    }

    /// Every word the generator can emit.
    pub fn words(&self) -> Vec<String> {
        let mut w: Vec<String> = (0..self.types)
            .flat_map(|k| (0..self.words_per_type).map(move |i| word(&Self::type_name(k).to_lowercase(), i)))
            .collect();
        w.extend((0..self.filler_words).map(|i| word("x", i)));
        w
    }

    /// The noise-free label of every position of `words`.
    pub fn clean_labels(&self, words: &[String]) -> Vec<String> {
        (0..words.len())
            .map(|t| {
                if t < self.lag {
                    return OUTSIDE.to_string();
                }
                let src = &words[t - self.lag];
                match src.chars().next() {
                    Some('x') | None => OUTSIDE.to_string(),
                    Some(c) => format!("U-{}", c.to_ascii_uppercase()),
                }
            })
            .collect()
    }

    /// `n` single-sentence documents. Groups (each type, and filler) are
    /// equally likely at every position.
    pub fn generate(&self, n: usize, seed: u64) -> Vec<Document> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<String> = std::iter::once(OUTSIDE.to_string())
            .chain(self.type_names().iter().map(|t| format!("U-{t}")))
            .collect();
        (0..n)
            .map(|d| {
                let words: Vec<String> = (0..self.len)
                    .map(|_| {
                        let g = rng.random_range(0..=self.types);
                        if g == self.types {
                            word("x", rng.random_range(0..self.filler_words))
                        } else {
                            word(
                                &Self::type_name(g).to_lowercase(),
                                rng.random_range(0..self.words_per_type),
                            )
                        }
                    })
                    .collect();
                let mut tags = self.clean_labels(&words);
                for tag in &mut tags {
                    if self.noise > 0.0 && rng.random::<f64>() < self.noise {
                        *tag = labels[rng.random_range(0..labels.len())].clone();
                    }
                }
                let sentence = RawSentence {
                    lines: (1..=self.len).collect(),
                    columns: words.into_iter().zip(tags).map(|(w, l)| vec![w, l]).collect(),
                };
                Document {
                    id: format!("doc{d}"),
                    sentences: vec![sentence],
                }
            })
            .collect()
    }
}

/// Letters only: digits would be merged by normalization.
fn word(prefix: &str, i: usize) -> String {
    let mut w = prefix.to_string();
    let mut i = i;
    loop {
        w.push(char::from(b'a' + (i % 26) as u8));
        i /= 26;
        if i == 0 {
            return w;
        }
    }
}

/// Two-column CoNLL text of labeled documents, one `-DOCSTART-` per document.
pub fn to_conll(docs: &[Document]) -> String {
    let mut s = String::new();
    for doc in docs {
        s.push_str("-DOCSTART- O\n\n");
        for sent in &doc.sentences {
            for cols in &sent.columns {
                s.push_str(&cols.join(" "));
                s.push('\n');
            }
            s.push('\n');
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::read_conll_str;
    use std::path::Path;

    #[test]
    fn labels_follow_the_lagged_word() {
        let task = LagTask {
            lag: 2,
            ..LagTask::default()
        };
        let words: Vec<String> = ["bb", "xa", "ac", "ca", "xb"].iter().map(|s| s.to_string()).collect();
        assert_eq!(task.clean_labels(&words), ["O", "O", "U-B", "O", "U-A"]);
    }

    #[test]
    fn noiseless_corpus_is_consistent_and_parses_back() {
        let task = LagTask::default();
        let docs = task.generate(5, 3);
        for d in &docs {
            let s = &d.sentences[0];
            let words: Vec<String> = s.tokens().map(str::to_string).collect();
            let labels: Vec<String> = s.labels().unwrap().iter().map(|l| l.to_string()).collect();
            assert_eq!(task.clean_labels(&words), labels);
        }
        let back = read_conll_str(&to_conll(&docs), Path::new("mem")).unwrap();
        assert_eq!(back.len(), 5);
        assert_eq!(back[2].sentences[0].columns, docs[2].sentences[0].columns);
    }
}
