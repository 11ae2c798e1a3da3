use std::path::Path;

use crate::error::{Error, Result};

/// One sentence as read from a column file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawSentence {
    /// All whitespace-separated columns of each token line.
    pub columns: Vec<Vec<String>>,
    /// First-line number (1-based) of each token, for diagnostics.
    pub lines: Vec<usize>,
}

impl RawSentence {
    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c[0].as_str())
    }

    /// Last column of each token, when the file carries more than one column.
    pub fn labels(&self) -> Option<Vec<&str>> {
        if self.columns.first()?.len() < 2 {
            return None;
        }
        Some(self.columns.iter().map(|c| c.last().unwrap().as_str()).collect())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Document {
    pub id: String,
    pub sentences: Vec<RawSentence>,
}

pub fn read_conll(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_conll_str(&text, path)
}

/// Parses CoNLL column text. Blank lines end sentences; `-DOCSTART-` lines
/// start a new document and are not emitted as tokens. Documents without
/// any sentence are dropped.
pub fn read_conll_str(text: &str, path: &Path) -> Result<Vec<Document>> {
    let mut docs: Vec<Document> = Vec::new();
    let mut current = Document::default();
    let mut sentence = RawSentence::default();

    fn flush_sentence(doc: &mut Document, sentence: &mut RawSentence) {
        if !sentence.is_empty() {
            doc.sentences.push(std::mem::take(sentence));
        }
    }
    fn flush_doc(docs: &mut Vec<Document>, doc: &mut Document) {
        if !doc.sentences.is_empty() {
            let mut d = std::mem::take(doc);
            d.id = format!("doc{}", docs.len());
            docs.push(d);
        }
    }

    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let cols: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if cols.is_empty() {
            flush_sentence(&mut current, &mut sentence);
            continue;
        }
        if cols[0].starts_with("-DOCSTART-") {
            flush_sentence(&mut current, &mut sentence);
            flush_doc(&mut docs, &mut current);
            continue;
        }
        if let Some(first) = sentence.columns.first() {
            if first.len() != cols.len() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    msg: format!(
                        "expected {} columns as on line {}, found {}",
                        first.len(),
                        sentence.lines[0],
                        cols.len()
                    ),
                });
            }
        }
        sentence.columns.push(cols);
        sentence.lines.push(line_no);
    }
    flush_sentence(&mut current, &mut sentence);
    flush_doc(&mut docs, &mut current);
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Vec<Document>> {
        read_conll_str(s, Path::new("test.conll"))
    }

    #[test]
    fn sentences_and_documents() {
        let docs = parse("EU NNP B-ORG\nrejects VBZ O\n\nPeter NNP B-PER\n").unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0].sentences.len(), 2);
        assert_eq!(docs[0].sentences[0].labels().unwrap(), ["B-ORG", "O"]);

        let docs = parse("-DOCSTART- -X- O\n\na O\n\n-DOCSTART- -X- O\n\nb O\nc O\n").unwrap();
        let ids: Vec<_> = docs.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, ["doc0", "doc1"]);
        assert_eq!(docs[1].sentences[0].tokens().collect::<Vec<_>>(), ["b", "c"]);
    }

    #[test]
    fn empty_input() {
        assert!(parse("").unwrap().is_empty());
        assert!(parse("\n\n-DOCSTART- O\n\n").unwrap().is_empty());
    }

    #[test]
    fn unlabeled_single_column() {
        let docs = parse("hello\nworld\n").unwrap();
        assert!(docs[0].sentences[0].labels().is_none());
    }

    #[test]
    fn ragged_columns_report_line() {
        let err = parse("a B-X\nb c O\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }
}
