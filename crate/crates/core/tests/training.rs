//! Training-loop behavior on small corpora.

use idcnn_core::config::{BlockInit, LossBlocks, TrainMode};
use idcnn_core::data::{build_sequences, read_conll_str, LabelScheme, SequenceKind, TaggedSequence, Vocabulary};
use idcnn_core::error::Error;
use idcnn_core::params::GradBuffer;
use idcnn_core::synthetic::{to_conll, LagTask};
use idcnn_core::train::{evaluate, sequence_loss, train};
use idcnn_core::{Config, Model, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Letters only, so that digit normalization cannot merge words.
fn word(rng: &mut ChaCha8Rng) -> String {
    format!("w{}", char::from(b'a' + rng.random_range(0..25u8)))
}

/// Twenty short sentences with arbitrary but well-formed labels.
fn memorization_corpus() -> (Vocabulary, LabelScheme, Vec<TaggedSequence>) {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut text = String::new();
    for _ in 0..20 {
        let len = rng.random_range(4..10);
        let mut t = 0;
        while t < len {
            let w = word(&mut rng);
            match rng.random_range(0..4) {
                0 if t + 1 < len => {
                    let ty = ["PER", "LOC"][rng.random_range(0..2)];
                    text.push_str(&format!("{w} B-{ty}\n{} I-{ty}\n", word(&mut rng)));
                    t += 2;
                    continue;
                }
                1 => text.push_str(&format!("{w} B-ORG\n")),
                _ => text.push_str(&format!("{w} O\n")),
            }
            t += 1;
        }
        text.push('\n');
    }
    let docs = read_conll_str(&text, Path::new("memo")).unwrap();
    let words: Vec<String> = docs
        .iter()
        .flat_map(|d| d.sentences.iter().flat_map(|s| s.tokens().map(str::to_string)))
        .collect();
    let vocab = Vocabulary::from_words(words.iter().map(String::as_str));
    let labels = LabelScheme::from_types(["LOC", "ORG", "PER"]);
    let seqs = build_sequences(&docs, &vocab, Some(&labels), SequenceKind::Sentence).unwrap();
    (vocab, labels, seqs)
}

fn small_config() -> Config {
    let mut c = Config::default();
    c.model.word_dim = 16;
    c.model.shape_dim = 2;
    c.model.hidden = 32;
    c.model.blocks = 1;
    c.train.mode = TrainMode::Greedy;
    c.train.loss_blocks = LossBlocks::Last;
    c.train.adam.lr = 0.01;
    c.train.batch_size = 4;
    c
}

#[test]
fn greedy_idcnn_memorizes_twenty_sentences() {
    let (vocab, labels, seqs) = memorization_corpus();
    let mut c = small_config();
    c.train.epochs = 200;
    let model = Model::new(c.clone(), vocab, labels, 1).unwrap();
    let out = train(&c, model, &seqs, &seqs).unwrap();
    let r = evaluate(&out.model, &seqs).unwrap();
    assert_eq!(r.accuracy, 1.0, "best epoch {}", out.best_epoch);
}

#[test]
fn same_seed_same_parameters() {
    let (vocab, labels, seqs) = memorization_corpus();
    let mut c = small_config();
    c.train.epochs = 3;
    c.train.block_dropout = 0.3;
    c.train.word_dropout = 0.1;
    c.train.el_lambda = 0.5;
    let run = || {
        let model = Model::new(c.clone(), vocab.clone(), labels.clone(), c.train.seed).unwrap();
        train(&c, model, &seqs, &seqs).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.model.to_bytes(), b.model.to_bytes());
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn noshare_has_more_parameters() {
    let (vocab, labels, _) = memorization_corpus();
    for blocks in 2..=3 {
        let mut c = small_config();
        c.model.blocks = blocks;
        let shared = Model::new(c.clone(), vocab.clone(), labels.clone(), 0).unwrap();
        c.model.share_blocks = false;
        let unshared = Model::new(c, vocab.clone(), labels.clone(), 0).unwrap();
        assert!(unshared.num_params() > shared.num_params());
    }
}

/// Shared-block gradients equal the sum of the gradients of an unrolled
/// copy whose blocks all start from the shared values.
#[test]
fn shared_gradient_is_sum_of_unrolled_gradients() {
    let (vocab, labels, seqs) = memorization_corpus();
    let mut c = small_config();
    c.model.hidden = 6;
    c.model.blocks = 3;
    c.model.block_init = BlockInit::Xavier;
    c.train.mode = TrainMode::GreedyIterated;
    c.train.loss_blocks = LossBlocks::All;
    let shared = Model::new(c.clone(), vocab.clone(), labels.clone(), 3).unwrap();
    c.model.share_blocks = false;
    let mut unrolled = Model::new(c.clone(), vocab, labels, 3).unwrap();
    for (name, t) in shared.params.iter() {
        let targets: Vec<String> = match name.strip_prefix("block0.") {
            Some(rest) => (0..3).map(|b| format!("block{b}.{rest}")).collect(),
            None => vec![name.to_string()],
        };
        for target in targets {
            let id = unrolled.params.id(&target).unwrap();
            *unrolled.params.get_mut(id) = t.clone();
        }
    }

    let seq = &seqs[0];
    let grads = |m: &Model| {
        let mut buf = GradBuffer::new(&m.params);
        let mut tape = Tape::new(&m.params);
        let gold = seq.labels().unwrap();
        let loss = sequence_loss(m, &mut tape, &seq.word_ids(), &seq.shapes(), &gold, &m.config, None)
            .unwrap()
            .unwrap();
        tape.backward(loss, &mut buf).unwrap();
        buf
    };
    let (gs, gu) = (grads(&shared), grads(&unrolled));
    let mut checked = 0;
    for id in shared.params.ids() {
        let name = shared.params.name(id);
        let g = gs.get(id).unwrap();
        let want: Vec<f64> = match name.strip_prefix("block0.") {
            Some(rest) => {
                let parts: Vec<&[f64]> = (0..3)
                    .map(|b| {
                        gu.get(unrolled.params.id(&format!("block{b}.{rest}")).unwrap())
                            .unwrap()
                    })
                    .collect();
                (0..g.len()).map(|i| parts.iter().map(|p| p[i]).sum()).collect()
            }
            None => gu.get(unrolled.params.id(name).unwrap()).unwrap().to_vec(),
        };
        for (a, b) in g.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-10, "{name}: {a} vs {b}");
        }
        checked += 1;
    }
    assert_eq!(checked, shared.params.len());
}

#[test]
fn el_penalty_vanishes_without_dropout() {
    let (vocab, labels, seqs) = memorization_corpus();
    let mut c = small_config();
    let model = Model::new(c.clone(), vocab, labels, 5).unwrap();
    let seq = &seqs[3];
    let gold = seq.labels().unwrap();
    let loss_with = |c: &Config| {
        let mut tape = Tape::new(&model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = sequence_loss(
            &model,
            &mut tape,
            &seq.word_ids(),
            &seq.shapes(),
            &gold,
            c,
            Some(&mut rng),
        );
        tape.value(l.unwrap().unwrap()).item()
    };
    let base = loss_with(&c);
    c.train.el_lambda = 3.0;
    assert_eq!(loss_with(&c), base);
}

#[test]
fn non_finite_parameters_abort_training() {
    let (vocab, labels, seqs) = memorization_corpus();
    let mut c = small_config();
    c.train.epochs = 2;
    let mut model = Model::new(c.clone(), vocab, labels, 0).unwrap();
    let id = model.params.id("output.b").unwrap();
    model.params.get_mut(id).data_mut()[0] = f64::NAN;
    let out = train(&c, model, &seqs, &[]).unwrap();
    assert!(matches!(out.diverged, Some(Error::Diverged { epoch: 1, .. })));
}

#[test]
fn crf_training_learns_the_lag_task() {
    let task = LagTask {
        lag: 3,
        len: 15,
        ..LagTask::default()
    };
    let vocab = Vocabulary::from_words(task.words().iter().map(String::as_str));
    let labels = LabelScheme::from_types(task.type_names());
    let tr = build_sequences(&task.generate(60, 1), &vocab, Some(&labels), SequenceKind::Sentence).unwrap();
    let mut c = small_config();
    c.model.hidden = 12;
    c.model.word_dim = 6;
    c.set("mode", "crf").unwrap();
    c.model.crf_constrained = true;
    c.train.epochs = 15;
    let model = Model::new(c.clone(), vocab, labels, 2).unwrap();
    let out = train(&c, model, &tr, &tr).unwrap();
    assert!(out.diverged.is_none());
    let r = evaluate(&out.model, &tr).unwrap();
    assert!(r.accuracy > 0.95, "{}", r.accuracy);
    let losses: Vec<f64> = out
        .metrics
        .iter()
        .filter(|m| m.name == "loss")
        .map(|m| m.value)
        .collect();
    assert!(losses.last().unwrap() < &losses[0]);
}

#[test]
fn document_model_warm_starts_from_sentence_model() {
    let task = LagTask::default();
    let docs = task.generate(4, 9);
    let parsed = read_conll_str(&to_conll(&docs), Path::new("syn")).unwrap();
    let vocab = Vocabulary::from_words(task.words().iter().map(String::as_str));
    let labels = LabelScheme::from_types(task.type_names());
    let c = small_config();
    let sentence = Model::new(c.clone(), vocab.clone(), labels.clone(), 1).unwrap();
    let mut doc = Model::new(c, vocab.clone(), labels.clone(), 2).unwrap();
    assert_ne!(sentence.params, doc.params);
    let copied = doc.warm_start(&sentence);
    assert_eq!(copied, sentence.params.len());
    assert_eq!(sentence.params, doc.params);
    let seqs = build_sequences(&parsed, &vocab, Some(&labels), SequenceKind::Document).unwrap();
    assert_eq!(seqs.len(), 4);
    assert_eq!(
        sentence.predict_sequence(&seqs[0]).unwrap(),
        doc.predict_sequence(&seqs[0]).unwrap()
    );
}
