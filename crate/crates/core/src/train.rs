//! Training objectives, regularizers and the training loop.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, LossBlocks, TrainMode};
use crate::data::{apply_word_dropout, make_batches, TaggedSequence, PAD};
use crate::error::{Error, Result};
use crate::eval::{extract_segments, micro_f1, token_accuracy, Prf, Segment};
use crate::idcnn::{Dropout, EncoderOutput};
use crate::model::Model;
use crate::optim::Adam;
use crate::params::GradBuffer;
use crate::tape::{Tape, Var};

/// Mean negative log-likelihood of `gold` over the unmasked rows of `logits`.
/// Returns `None` when every position is masked.
pub fn loss_independent(tape: &mut Tape, logits: Var, gold: &[usize], mask: &[bool]) -> Result<Option<Var>> {
    let picks: Vec<(usize, usize)> = gold
        .iter()
        .zip(mask)
        .enumerate()
        .filter(|(_, (_, &m))| m)
        .map(|(t, (&g, _))| (t, g))
        .collect();
    if picks.is_empty() {
        return Ok(None);
    }
    let logp = tape.log_softmax(logits);
    let total = tape.pick_sum(logp, &picks)?;
    Ok(Some(tape.scale(total, -1.0 / picks.len() as f64)))
}

/// Average of [`loss_independent`] over every block's logits.
pub fn loss_iterated(tape: &mut Tape, block_logits: &[Var], gold: &[usize], mask: &[bool]) -> Result<Option<Var>> {
    if block_logits.is_empty() {
        return Err(Error::Usage("loss over zero blocks".into()));
    }
    let mut acc: Option<Var> = None;
    for &h in block_logits {
        let Some(l) = loss_independent(tape, h, gold, mask)? else {
            return Ok(None);
        };
        acc = Some(match acc {
            Some(a) => tape.add(a, l)?,
            None => l,
        });
    }
    Ok(acc.map(|a| tape.scale(a, 1.0 / block_logits.len() as f64)))
}

/// `lambda` times the token-mean squared L2 distance between the softmax
/// distributions of two `T x D` logit matrices.
pub fn expectation_linear_penalty(tape: &mut Tape, sampled: Var, deterministic: Var, lambda: f64) -> Result<Var> {
    let rows = tape.value(sampled).rows();
    let ls = tape.log_softmax(sampled);
    let ps = tape.exp(ls);
    let ld = tape.log_softmax(deterministic);
    let pd = tape.exp(ld);
    let diff = tape.sub(ps, pd)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, lambda / rows as f64))
}

/// Runs the model twice on one sequence, once with freshly sampled dropout
/// masks and once deterministically, and returns the expectation-linear
/// penalty between the two final-block predictions.
pub fn el_dropout_penalty(model: &Model, seq: &TaggedSequence, config: &Config, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut tape = Tape::new(&model.params);
    let (ids, shapes) = (seq.word_ids(), seq.shapes());
    let t = &config.train;
    let mut dropout = Dropout {
        input: t.input_dropout,
        block: t.block_dropout,
        rng,
    };
    let sampled = model.forward(&mut tape, &ids, &shapes, Some(&mut dropout))?;
    let det = model.forward(&mut tape, &ids, &shapes, None)?;
    let p = expectation_linear_penalty(&mut tape, sampled.last(), det.last(), t.el_lambda)?;
    Ok(tape.value(p).item())
}

/// Training objective of one sequence (token-mean scale): the mode's base
/// loss on a dropout-perturbed pass plus the expectation-linear penalty.
/// With `rng = None` no dropout is drawn and no penalty is added.
pub fn sequence_loss(
    model: &Model,
    tape: &mut Tape,
    word_ids: &[usize],
    shapes: &[usize],
    gold: &[usize],
    config: &Config,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Option<Var>> {
    let t = &config.train;
    let mask = vec![true; gold.len()];
    let (out, penalty_ready): (EncoderOutput, bool) = match rng {
        Some(rng) => {
            let mut d = Dropout {
                input: t.input_dropout,
                block: t.block_dropout,
                rng,
            };
            (model.forward(tape, word_ids, shapes, Some(&mut d))?, true)
        }
        None => (model.forward(tape, word_ids, shapes, None)?, false),
    };

    let base = match t.mode {
        TrainMode::Crf => {
            let head = model
                .crf_head()
                .ok_or_else(|| Error::Config("mode = crf on a model without a CRF".into()))?;
            let trans = tape.param(head.transitions);
            let bounds = head.boundaries.map(|(s, e)| (tape.param(s), tape.param(e)));
            let nll = tape.crf_nll(out.last(), trans, bounds, head.constraints.as_ref(), gold)?;
            Some(tape.scale(nll, 1.0 / gold.len() as f64))
        }
        _ => match t.loss_blocks {
            LossBlocks::All => loss_iterated(tape, &out.block_logits, gold, &mask)?,
            LossBlocks::Last => loss_independent(tape, out.last(), gold, &mask)?,
        },
    };
    let Some(base) = base else { return Ok(None) };

    if penalty_ready && t.el_lambda > 0.0 {
        let det = model.forward(tape, word_ids, shapes, None)?;
        let pen = expectation_linear_penalty(tape, out.last(), det.last(), t.el_lambda)?;
        return Ok(Some(tape.add(base, pen)?));
    }
    Ok(Some(base))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub prf: Prf,
    pub accuracy: f64,
    pub predictions: Vec<Vec<usize>>,
}

/// Decodes every sequence and scores it against its gold labels.
pub fn evaluate(model: &Model, seqs: &[TaggedSequence]) -> Result<EvalResult> {
    let mut gold_ids = Vec::with_capacity(seqs.len());
    let mut predictions = Vec::with_capacity(seqs.len());
    let mut gold_segs: Vec<BTreeSet<Segment>> = Vec::new();
    let mut pred_segs: Vec<BTreeSet<Segment>> = Vec::new();
    for seq in seqs {
        let gold = seq
            .labels()
            .ok_or_else(|| Error::Usage("evaluation data without labels".into()))?;
        let pred = model.predict_sequence(seq)?;
        // Segments never cross sentence boundaries.
        let mut offset = 0;
        for &len in &seq.sentence_lengths {
            let to_str =
                |ids: &[usize]| -> Vec<String> { ids.iter().map(|&i| model.labels.label(i).to_string()).collect() };
            gold_segs.push(extract_segments(&to_str(&gold[offset..offset + len])));
            pred_segs.push(extract_segments(&to_str(&pred[offset..offset + len])));
            offset += len;
        }
        gold_ids.push(gold);
        predictions.push(pred);
    }
    Ok(EvalResult {
        prf: micro_f1(&gold_segs, &pred_segs),
        accuracy: token_accuracy(&gold_ids, &predictions),
        predictions,
    })
}

/// One `epoch<TAB>split<TAB>metric<TAB>value` record.
#[derive(Clone, Debug, PartialEq)]
pub struct Metric {
    pub epoch: usize,
    pub split: String,
    pub name: String,
    pub value: f64,
}

impl Metric {
    pub fn line(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.epoch, self.split, self.name, self.value)
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best dev F1 (the last epoch when
    /// there is no dev data).
    pub model: Model,
    pub best_epoch: usize,
    pub best_dev_f1: Option<f64>,
    pub metrics: Vec<Metric>,
    /// Set when training stopped early on a non-finite loss or gradient.
    pub diverged: Option<Error>,
}

/// Trains `model` in place of a copy and returns the best checkpoint.
pub fn train(
    config: &Config,
    model: Model,
    train_data: &[TaggedSequence],
    dev_data: &[TaggedSequence],
) -> Result<TrainOutcome> {
    train_with(config, model, train_data, dev_data, |_| {})
}

/// As [`train`], calling `on_metric` as each record is produced.
pub fn train_with(
    config: &Config,
    mut model: Model,
    train_data: &[TaggedSequence],
    dev_data: &[TaggedSequence],
    mut on_metric: impl FnMut(&Metric),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_data.is_empty() {
        return Err(Error::Usage("no training data".into()));
    }
    if train_data.iter().any(|s| s.labels().is_none()) {
        return Err(Error::Usage("training data without labels".into()));
    }
    let t = &config.train;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let mut adam = Adam::new(&model.params, t.adam, t.clip_norm);
    let mut metrics = Vec::new();
    let mut record = |m: Metric, metrics: &mut Vec<Metric>| {
        on_metric(&m);
        metrics.push(m);
    };

    let mut best: Option<((f64, f64), usize, crate::params::ParamStore)> = None;
    let mut diverged = None;

    'epochs: for epoch in 1..=t.epochs {
        let epoch_data: Vec<TaggedSequence> = train_data
            .iter()
            .map(|s| apply_word_dropout(s, t.word_dropout, &mut rng))
            .collect();
        let mut batches = make_batches(&epoch_data, t.batch_size, PAD);
        batches.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut loss_tokens = 0usize;
        for batch in &batches {
            let total = batch.real_tokens();
            let mut grads = GradBuffer::new(&model.params);
            let mut batch_loss = 0.0;
            for r in 0..batch.rows() {
                let len = batch.row_len(r);
                let mut tape = Tape::new(&model.params);
                let loss = sequence_loss(
                    &model,
                    &mut tape,
                    batch.row_word_ids(r),
                    batch.row_shapes(r),
                    batch.row_labels(r),
                    config,
                    Some(&mut rng),
                );
                let loss = match loss {
                    Ok(Some(l)) => l,
                    Ok(None) => {
                        log::warn!("skipping fully masked sequence");
                        continue;
                    }
                    Err(Error::NonFinite(what)) => {
                        diverged = Some(Error::Diverged { epoch, reason: what });
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                };
                let weighted = tape.scale(loss, len as f64 / total as f64);
                batch_loss += tape.value(weighted).item();
                if let Err(e) = tape.backward(weighted, &mut grads) {
                    diverged = Some(Error::Diverged {
                        epoch,
                        reason: e.to_string(),
                    });
                    break 'epochs;
                }
            }
            if !batch_loss.is_finite() {
                diverged = Some(Error::Diverged {
                    epoch,
                    reason: format!("batch loss {batch_loss}"),
                });
                break 'epochs;
            }
            model.params.absorb(&mut grads);
            if let Err(e) = adam.step(&mut model.params) {
                diverged = Some(Error::Diverged {
                    epoch,
                    reason: e.to_string(),
                });
                break 'epochs;
            }
            loss_sum += batch_loss * total as f64;
            loss_tokens += total;
        }
        let train_loss = loss_sum / loss_tokens.max(1) as f64;
        record(
            Metric {
                epoch,
                split: "train".into(),
                name: "loss".into(),
                value: train_loss,
            },
            &mut metrics,
        );

        // Dev F1 selects the checkpoint; token accuracy breaks ties, since
        // ill-formed fragments cost accuracy without producing segments.
        let score = if dev_data.is_empty() {
            None
        } else {
            let r = evaluate(&model, dev_data)?;
            for (name, value) in [("f1", 100.0 * r.prf.f1), ("accuracy", 100.0 * r.accuracy)] {
                record(
                    Metric {
                        epoch,
                        split: "dev".into(),
                        name: name.into(),
                        value,
                    },
                    &mut metrics,
                );
            }
            Some((100.0 * r.prf.f1, r.accuracy))
        };
        let better = match (&best, score) {
            (None, _) | (Some(_), None) => true,
            (Some((b, _, _)), Some(s)) => s.0 > b.0 || (s.0 == b.0 && s.1 > b.1),
        };
        if better {
            let s = score.unwrap_or((f64::NEG_INFINITY, 0.0));
            best = Some((s, epoch, model.params.clone()));
        }
    }

    let (best_dev_f1, best_epoch) = match best {
        Some(((f1, _), epoch, params)) => {
            model.params = params;
            (f1.is_finite().then_some(f1), epoch)
        }
        None => (None, 0),
    };
    model.params.zero_grads();
    Ok(TrainOutcome {
        model,
        best_epoch,
        best_dev_f1,
        metrics,
        diverged,
    })
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub name: String,
    pub best_dev_f1: Option<f64>,
    pub best_epoch: usize,
    pub dev_accuracy: f64,
}

/// Trains each named config from scratch and reports its best dev score.
pub fn sweep(
    configs: &[(String, Config)],
    build: impl Fn(&Config) -> Result<Model>,
    train_data: &[TaggedSequence],
    dev_data: &[TaggedSequence],
) -> Result<Vec<SweepResult>> {
    configs
        .iter()
        .map(|(name, cfg)| {
            let out = train(cfg, build(cfg)?, train_data, dev_data)?;
            let dev_accuracy = if dev_data.is_empty() {
                0.0
            } else {
                evaluate(&out.model, dev_data)?.accuracy
            };
            Ok(SweepResult {
                name: name.clone(),
                best_dev_f1: out.best_dev_f1,
                best_epoch: out.best_epoch,
                dev_accuracy,
            })
        })
        .collect()
}
