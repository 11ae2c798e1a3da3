//! CoNLL ingestion, preprocessing, vocabularies, label encoding and batching.

mod batch;
mod conll;
mod features;
mod labels;
mod vocab;

pub use batch::{apply_word_dropout, build_sequences, make_batches, Batch, SequenceKind, TaggedSequence, Token};
pub use conll::{read_conll, read_conll_str, Document, RawSentence};
pub use features::{normalize_digits, shape_class, NUM_SHAPE_CLASSES};
pub use labels::{iob_to_bilou, split_label, LabelScheme, OUTSIDE};
pub use vocab::{load_embeddings, Embeddings, Vocabulary, PAD, UNK};
