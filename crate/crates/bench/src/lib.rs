//! Untrained models and random inputs for the throughput benchmarks.

use idcnn_core::config::{BlockInit, EncoderKind, LossBlocks, TrainMode};
use idcnn_core::data::{LabelScheme, Vocabulary, NUM_SHAPE_CLASSES};
use idcnn_core::{Config, Model};

pub const VOCAB_SIZE: usize = 1000;

/// Sizes shared by every benchmarked model.
pub fn base_config() -> Config {
    let mut c = Config::default();
    c.model.word_dim = 50;
    c.model.shape_dim = 5;
    c.model.hidden = 100;
    c.model.block_init = BlockInit::Xavier;
    c.train.mode = TrainMode::Greedy;
    c.train.loss_blocks = LossBlocks::Last;
    c
}

fn build(config: Config) -> Model {
    let words: Vec<String> = (0..VOCAB_SIZE).map(|i| format!("w{i}")).collect();
    let vocab = Vocabulary::from_words(words.iter().map(String::as_str));
    let labels = LabelScheme::from_types(["PER", "LOC", "ORG", "MISC"]);
    Model::new(config, vocab, labels, 1).expect("valid benchmark config")
}

pub fn idcnn(crf: bool) -> Model {
    let mut c = base_config();
    if crf {
        c.set("mode", "crf").expect("known key");
    }
    build(c)
}

/// A Bi-LSTM sized to match the ID-CNN's parameter count.
pub fn bilstm(crf: bool) -> Model {
    let mut c = base_config();
    c.model.encoder = EncoderKind::BiLstm;
    if crf {
        c.set("mode", "crf").expect("known key");
    }
    build(c)
}

/// Deterministic word ids and shape classes for one sequence of length `t`.
pub fn sequence(t: usize, seed: usize) -> (Vec<usize>, Vec<usize>) {
    let ids = (0..t).map(|i| 2 + (i * 7919 + seed * 104_729) % VOCAB_SIZE).collect();
    let shapes = (0..t).map(|i| (i + seed) % NUM_SHAPE_CLASSES).collect();
    (ids, shapes)
}
