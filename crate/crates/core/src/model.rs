use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, EncoderKind, ShapeMode};
use crate::crf::{self, Constraints, CrfScores};
use crate::data::{Embeddings, LabelScheme, TaggedSequence, Vocabulary, NUM_SHAPE_CLASSES};
use crate::error::{Error, Result};
use crate::idcnn::{init_xavier, lookup, Dropout, EncoderOutput, IdCnnEncoder};
use crate::lstm::{bilstm_num_params, BiLstmEncoder};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"IDCNNLAB";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Encoder {
    IdCnn(IdCnnEncoder),
    BiLstm(BiLstmEncoder),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrfHead {
    pub transitions: ParamId,
    pub boundaries: Option<(ParamId, ParamId)>,
    pub constraints: Option<Constraints>,
}

/// A complete tagger: vocabulary, label scheme, configuration and every
/// learned parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: Config,
    pub vocab: Vocabulary,
    pub labels: LabelScheme,
    pub params: ParamStore,
    word_embed: ParamId,
    shape_embed: Option<ParamId>,
    encoder: Encoder,
    crf: Option<CrfHead>,
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: Config, vocab: Vocabulary, labels: LabelScheme, seed: u64) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();

        let mut word = Tensor::zeros(&[vocab.len(), m.word_dim]);
        init_xavier(&mut word, vocab.len(), m.word_dim, &mut rng);
        let word_embed = params.add("embed.word", word)?;
        let shape_embed = match m.shape_mode {
            ShapeMode::Learned => {
                let mut s = Tensor::zeros(&[NUM_SHAPE_CLASSES, m.shape_dim]);
                init_xavier(&mut s, NUM_SHAPE_CLASSES, m.shape_dim, &mut rng);
                Some(params.add("embed.shape", s)?)
            }
            ShapeMode::OneHot => None,
        };

        let d = labels.len();
        let encoder = match m.encoder {
            EncoderKind::IdCnn => Encoder::IdCnn(IdCnnEncoder::create(&mut params, m, d, &mut rng)?),
            EncoderKind::BiLstm => {
                let hidden = if m.lstm_hidden > 0 {
                    m.lstm_hidden
                } else {
                    matched_lstm_hidden(&config, d)?
                };
                Encoder::BiLstm(BiLstmEncoder::create(&mut params, m.input_dim(), hidden, d, &mut rng)?)
            }
        };

        let crf = if m.crf {
            let transitions = params.add("crf.transitions", Tensor::zeros(&[d, d]))?;
            let boundaries = if m.crf_boundaries {
                Some((
                    params.add("crf.start", Tensor::zeros(&[d]))?,
                    params.add("crf.end", Tensor::zeros(&[d]))?,
                ))
            } else {
                None
            };
            Some(CrfHead {
                transitions,
                boundaries,
                constraints: m.crf_constrained.then(|| labels.bilou_constraints()),
            })
        } else {
            None
        };

        Ok(Model {
            config,
            vocab,
            labels,
            params,
            word_embed,
            shape_embed,
            encoder,
            crf,
        })
    }

    /// Reattaches structure to a parameter store produced by [`Model::new`].
    fn bind(config: Config, vocab: Vocabulary, labels: LabelScheme, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        let word_embed = lookup(&params, "embed.word")?;
        let we = params.get(word_embed);
        if we.shape() != [vocab.len(), m.word_dim] {
            return Err(Error::Format(format!(
                "word embedding shape {:?} does not match vocabulary size {} and word_dim {}",
                we.shape(),
                vocab.len(),
                m.word_dim
            )));
        }
        let shape_embed = match m.shape_mode {
            ShapeMode::Learned => Some(lookup(&params, "embed.shape")?),
            ShapeMode::OneHot => None,
        };
        let encoder = match m.encoder {
            EncoderKind::IdCnn => Encoder::IdCnn(IdCnnEncoder::bind(&params, m)?),
            EncoderKind::BiLstm => Encoder::BiLstm(BiLstmEncoder::bind(&params)?),
        };
        let crf = if m.crf {
            Some(CrfHead {
                transitions: lookup(&params, "crf.transitions")?,
                boundaries: if m.crf_boundaries {
                    Some((lookup(&params, "crf.start")?, lookup(&params, "crf.end")?))
                } else {
                    None
                },
                constraints: m.crf_constrained.then(|| labels.bilou_constraints()),
            })
        } else {
            None
        };
        Ok(Model {
            config,
            vocab,
            labels,
            params,
            word_embed,
            shape_embed,
            encoder,
            crf,
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn crf_head(&self) -> Option<&CrfHead> {
        self.crf.as_ref()
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Scalar count excluding the embedding tables.
    pub fn num_encoder_params(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| !n.starts_with("embed."))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Sequential steps to label a length-`t` input, including Viterbi when
    /// the model decodes with a CRF.
    pub fn critical_path(&self, t: usize) -> usize {
        let enc = match &self.encoder {
            Encoder::IdCnn(e) => e.critical_path(),
            Encoder::BiLstm(_) => t,
        };
        enc + if self.crf.is_some() {
            crf::viterbi_critical_path(t)
        } else {
            0
        }
    }

    /// `T x input_dim` features: word embedding followed by the shape feature.
    pub fn embed(&self, tape: &mut Tape, word_ids: &[usize], shapes: &[usize]) -> Result<Var> {
        if word_ids.len() != shapes.len() {
            return Err(Error::Dimension {
                op: "embed",
                lhs: vec![word_ids.len()],
                rhs: vec![shapes.len()],
            });
        }
        let table = tape.param(self.word_embed);
        let words = tape.gather(table, word_ids)?;
        let shape = match self.shape_embed {
            Some(id) => {
                let t = tape.param(id);
                tape.gather(t, shapes)?
            }
            None => {
                let mut one_hot = Tensor::zeros(&[shapes.len(), NUM_SHAPE_CLASSES]);
                for (t, &s) in shapes.iter().enumerate() {
                    one_hot.data_mut()[t * NUM_SHAPE_CLASSES + s] = 1.0;
                }
                tape.input(one_hot)
            }
        };
        tape.concat(&[words, shape])
    }

    /// Per-block logits for one sequence.
    pub fn forward(
        &self,
        tape: &mut Tape,
        word_ids: &[usize],
        shapes: &[usize],
        dropout: Option<&mut Dropout>,
    ) -> Result<EncoderOutput> {
        let cap = self.config.model.max_len;
        if word_ids.len() > cap {
            return Err(Error::TooLong {
                len: word_ids.len(),
                cap,
            });
        }
        if word_ids.is_empty() {
            return Err(Error::Usage("empty sequence".into()));
        }
        let x = self.embed(tape, word_ids, shapes)?;
        match &self.encoder {
            Encoder::IdCnn(e) => e.encode(tape, x, dropout),
            Encoder::BiLstm(e) => e.encode(tape, x, word_ids.len(), dropout),
        }
    }

    pub fn crf_scores(&self) -> Option<CrfScores<'_>> {
        let head = self.crf.as_ref()?;
        let d = self.num_labels();
        let mut s = CrfScores::new(self.params.get(head.transitions).data(), d);
        if let Some((st, en)) = head.boundaries {
            s = s.with_boundaries(self.params.get(st).data(), self.params.get(en).data());
        }
        if let Some(c) = &head.constraints {
            s = s.with_constraints(c);
        }
        Some(s)
    }

    /// Label ids from final logits: Viterbi under the CRF, else per-token argmax.
    pub fn decode(&self, logits: &Tensor) -> Vec<usize> {
        match self.crf_scores() {
            Some(s) => crf::viterbi(logits, &s).labels,
            None => crf::argmax_rows(logits),
        }
    }

    /// Final-block logits with no dropout.
    pub fn logits(&self, word_ids: &[usize], shapes: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, word_ids, shapes, None)?;
        Ok(tape.value(out.last()).clone())
    }

    pub fn predict(&self, word_ids: &[usize], shapes: &[usize]) -> Result<Vec<usize>> {
        Ok(self.decode(&self.logits(word_ids, shapes)?))
    }

    pub fn predict_sequence(&self, seq: &TaggedSequence) -> Result<Vec<usize>> {
        self.predict(&seq.word_ids(), &seq.shapes())
    }

    /// Overwrites embedding rows of in-vocabulary words with pretrained vectors.
    pub fn load_pretrained(&mut self, emb: &Embeddings) -> Result<usize> {
        let dim = self.config.model.word_dim;
        if emb.dim != dim {
            return Err(Error::Mismatch(format!(
                "embedding file has dimension {}, model expects word_dim = {dim}",
                emb.dim
            )));
        }
        let table = self.params.get_mut(self.word_embed);
        let mut hits = 0;
        for (i, w) in emb.words.iter().enumerate() {
            let w = crate::data::normalize_digits(w);
            if !self.vocab.contains(&w) {
                continue;
            }
            let id = self.vocab.get(&w);
            table.data_mut()[id * dim..(id + 1) * dim].copy_from_slice(emb.vector(i));
            hits += 1;
        }
        Ok(hits)
    }

    /// Copies every parameter of `other` whose name and shape match; word
    /// embeddings are copied row by row for words both vocabularies share.
    pub fn warm_start(&mut self, other: &Model) -> usize {
        let mut copied = 0;
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            let name = self.params.name(id).to_string();
            let Some(src) = other.params.id(&name) else { continue };
            if name == "embed.word" {
                let dim = self.config.model.word_dim;
                if other.config.model.word_dim != dim {
                    continue;
                }
                let src_t = other.params.get(src).clone();
                let dst = self.params.get_mut(id);
                for (w_id, w) in self.vocab.words().iter().enumerate() {
                    if other.vocab.contains(w) {
                        let s = other.vocab.get(w);
                        dst.data_mut()[w_id * dim..(w_id + 1) * dim]
                            .copy_from_slice(&src_t.data()[s * dim..(s + 1) * dim]);
                    }
                }
                copied += 1;
            } else if other.params.get(src).shape() == self.params.get(id).shape() {
                let v = other.params.get(src).data().to_vec();
                self.params.get_mut(id).data_mut().copy_from_slice(&v);
                copied += 1;
            }
        }
        copied
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        write_str(&mut out, &self.config.to_text());
        write_str(&mut out, &self.vocab.words().join("\n"));
        write_str(&mut out, &self.labels.types().join("\n"));
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            write_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a model file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let config: Config = r.string()?.parse()?;
        let words = r.string()?;
        let mut vocab_words = words.split('\n');
        // PAD and UNK come first and are re-created by `Vocabulary::new`.
        vocab_words.next();
        vocab_words.next();
        let vocab = Vocabulary::from_words(vocab_words);
        let types = r.string()?;
        let labels = LabelScheme::from_types(types.split('\n').filter(|t| !t.is_empty()));
        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            params.add(name, Tensor::new(shape, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after parameters".into()));
        }
        Model::bind(config, vocab, labels, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Model::from_bytes(&bytes)
    }
}

/// Bi-LSTM hidden size whose encoder parameter count is closest to that of
/// the ID-CNN described by the same config.
pub fn matched_lstm_hidden(config: &Config, num_labels: usize) -> Result<usize> {
    let mut m = config.model.clone();
    m.encoder = EncoderKind::IdCnn;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    IdCnnEncoder::create(&mut store, &m, num_labels, &mut rng)?;
    let target = store.num_scalars() as f64;
    let n_in = m.input_dim();
    let best = (1..=4 * m.hidden.max(1))
        .min_by(|&a, &b| {
            let da = (bilstm_num_params(n_in, a, num_labels) as f64 - target).abs();
            let db = (bilstm_num_params(n_in, b, num_labels) as f64 - target).abs();
            da.total_cmp(&db)
        })
        .unwrap_or(1);
    Ok(best)
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated model file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }
}
