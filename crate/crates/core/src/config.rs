//! Flat `key = value` configuration covering architecture and training.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::optim::AdamConfig;

macro_rules! keyword_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq)]
        pub enum $name {
            $($variant),+
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(Error::Config(format!(
                        "invalid {} {s:?}, expected one of: {}",
                        stringify!($name),
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self {
                    $($name::$variant => $text),+
                })
            }
        }
    };
}

keyword_enum!(EncoderKind { IdCnn => "idcnn", BiLstm => "bilstm" });
keyword_enum!(
    /// Dilation of internal block layer `j` (1-based): `Doubling` gives
    /// `2^(j-1)`, `Constant` gives `2^(L_c-1)` at every layer, `None` gives 1.
    DilationSchedule { Doubling => "doubling", Constant => "constant", None => "none" }
);
keyword_enum!(ShapeMode { Learned => "learned", OneHot => "onehot" });
keyword_enum!(BlockInit { Identity => "identity", Xavier => "xavier" });
keyword_enum!(TrainMode { Greedy => "greedy", GreedyIterated => "greedy-iterated", Crf => "crf" });
keyword_enum!(LossBlocks { All => "all", Last => "last" });
keyword_enum!(Context { Sentence => "sentence", Document => "document" });

/// Architecture hyperparameters; stored with every checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub word_dim: usize,
    pub shape_dim: usize,
    pub shape_mode: ShapeMode,
    /// Block hidden width `h`.
    pub hidden: usize,
    /// Dilated layers per block, `L_c`.
    pub layers: usize,
    /// Block applications, `L_b`.
    pub blocks: usize,
    pub radius: usize,
    /// Radius of the closing dilation-1 layer of each block.
    pub final_radius: usize,
    pub dilation: DilationSchedule,
    pub share_blocks: bool,
    pub block_init: BlockInit,
    /// Bi-LSTM hidden size per direction; 0 picks one matching the ID-CNN size.
    pub lstm_hidden: usize,
    pub crf: bool,
    pub crf_boundaries: bool,
    pub crf_constrained: bool,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderKind::IdCnn,
            word_dim: 100,
            shape_dim: 5,
            shape_mode: ShapeMode::Learned,
            hidden: 300,
            layers: 4,
            blocks: 3,
            radius: 1,
            final_radius: 0,
            dilation: DilationSchedule::Doubling,
            share_blocks: true,
            block_init: BlockInit::Identity,
            lstm_hidden: 0,
            crf: false,
            crf_boundaries: true,
            crf_constrained: false,
            max_len: 10_000,
        }
    }
}

impl ModelConfig {
    /// Dilation of internal layer `j` in `1..=layers`.
    pub fn dilation_at(&self, j: usize) -> usize {
        match self.dilation {
            DilationSchedule::Doubling => 1 << (j - 1),
            DilationSchedule::Constant => 1 << (self.layers - 1),
            DilationSchedule::None => 1,
        }
    }

    /// Width of the per-token input vector (word embedding plus shape feature).
    pub fn input_dim(&self) -> usize {
        self.word_dim
            + match self.shape_mode {
                ShapeMode::Learned => self.shape_dim,
                ShapeMode::OneHot => crate::data::NUM_SHAPE_CLASSES,
            }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub loss_blocks: LossBlocks,
    pub input_dropout: f64,
    pub block_dropout: f64,
    pub word_dropout: f64,
    /// Weight of the expectation-linear dropout penalty.
    pub el_lambda: f64,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub context: Context,
    /// Checkpoint whose matching parameters initialize this model.
    pub init_from: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::GreedyIterated,
            loss_blocks: LossBlocks::All,
            input_dropout: 0.0,
            block_dropout: 0.0,
            word_dropout: 0.0,
            el_lambda: 0.0,
            adam: AdamConfig::default(),
            clip_norm: 5.0,
            epochs: 20,
            batch_size: 32,
            seed: 1,
            context: Context::Sentence,
            init_from: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key} = {value:?}: expected true or false"))),
    }
}

impl Config {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "encoder" => m.encoder = value.parse()?,
            "word_dim" => m.word_dim = parse_value(key, value)?,
            "shape_dim" => m.shape_dim = parse_value(key, value)?,
            "shape_mode" => m.shape_mode = value.parse()?,
            "hidden" => m.hidden = parse_value(key, value)?,
            "layers" => m.layers = parse_value(key, value)?,
            "blocks" => m.blocks = parse_value(key, value)?,
            "radius" => m.radius = parse_value(key, value)?,
            "final_radius" => m.final_radius = parse_value(key, value)?,
            "dilation" => m.dilation = value.parse()?,
            "share_blocks" => m.share_blocks = parse_bool(key, value)?,
            "block_init" => m.block_init = value.parse()?,
            "lstm_hidden" => m.lstm_hidden = parse_value(key, value)?,
            "crf_boundaries" => m.crf_boundaries = parse_bool(key, value)?,
            "crf_constrained" => m.crf_constrained = parse_bool(key, value)?,
            "max_len" => m.max_len = parse_value(key, value)?,
            "mode" => {
                t.mode = value.parse()?;
                m.crf = t.mode == TrainMode::Crf;
            }
            "loss_blocks" => t.loss_blocks = value.parse()?,
            "input_dropout" => t.input_dropout = parse_value(key, value)?,
            "block_dropout" => t.block_dropout = parse_value(key, value)?,
            "word_dropout" => t.word_dropout = parse_value(key, value)?,
            "el_lambda" => t.el_lambda = parse_value(key, value)?,
            "lr" => t.adam.lr = parse_value(key, value)?,
            "beta1" => t.adam.beta1 = parse_value(key, value)?,
            "beta2" => t.adam.beta2 = parse_value(key, value)?,
            "eps" => t.adam.eps = parse_value(key, value)?,
            "clip_norm" => t.clip_norm = parse_value(key, value)?,
            "epochs" => t.epochs = parse_value(key, value)?,
            "batch_size" => t.batch_size = parse_value(key, value)?,
            "seed" => t.seed = parse_value(key, value)?,
            "context" => t.context = value.parse()?,
            "init_from" => t.init_from = (!value.is_empty()).then(|| PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let (m, t) = (&self.model, &self.train);
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if m.word_dim == 0 || m.hidden == 0 {
            return bad("word_dim and hidden must be positive");
        }
        if m.shape_mode == ShapeMode::Learned && m.shape_dim == 0 {
            return bad("shape_dim must be positive for learned shape embeddings");
        }
        if m.encoder == EncoderKind::IdCnn && (m.layers == 0 || m.blocks == 0 || m.radius == 0) {
            return bad("layers, blocks and radius must be positive");
        }
        if m.layers > 30 {
            return bad("layers must be at most 30");
        }
        if m.max_len == 0 {
            return bad("max_len must be positive");
        }
        if t.mode != TrainMode::GreedyIterated && t.loss_blocks == LossBlocks::All {
            return bad("loss_blocks = all requires mode = greedy-iterated");
        }
        for (name, r) in [
            ("input_dropout", t.input_dropout),
            ("block_dropout", t.block_dropout),
            ("word_dropout", t.word_dropout),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if t.el_lambda < 0.0 || !t.el_lambda.is_finite() {
            return bad("el_lambda must be non-negative");
        }
        if t.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if t.adam.lr <= 0.0 {
            return bad("lr must be positive");
        }
        Ok(())
    }

    /// Canonical text form listing every key; parsing it yields `self` again.
    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("encoder", &m.encoder);
        kv("word_dim", &m.word_dim);
        kv("shape_dim", &m.shape_dim);
        kv("shape_mode", &m.shape_mode);
        kv("hidden", &m.hidden);
        kv("layers", &m.layers);
        kv("blocks", &m.blocks);
        kv("radius", &m.radius);
        kv("final_radius", &m.final_radius);
        kv("dilation", &m.dilation);
        kv("share_blocks", &m.share_blocks);
        kv("block_init", &m.block_init);
        kv("lstm_hidden", &m.lstm_hidden);
        kv("crf_boundaries", &m.crf_boundaries);
        kv("crf_constrained", &m.crf_constrained);
        kv("max_len", &m.max_len);
        kv("mode", &t.mode);
        kv("loss_blocks", &t.loss_blocks);
        kv("input_dropout", &t.input_dropout);
        kv("block_dropout", &t.block_dropout);
        kv("word_dropout", &t.word_dropout);
        kv("el_lambda", &t.el_lambda);
        kv("lr", &t.adam.lr);
        kv("beta1", &t.adam.beta1);
        kv("beta2", &t.adam.beta2);
        kv("eps", &t.adam.eps);
        kv("clip_norm", &t.clip_norm);
        kv("epochs", &t.epochs);
        kv("batch_size", &t.batch_size);
        kv("seed", &t.seed);
        kv("context", &t.context);
        let init = t
            .init_from
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        kv("init_from", &init);
        s
    }
}

impl FromStr for Config {
    type Err = Error;

    /// Keys not present keep their defaults. When `mode` is given without
    /// `loss_blocks`, non-iterated modes default to the last block only.
    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut saw_loss_blocks = false;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value", i + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            saw_loss_blocks |= k == "loss_blocks";
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        if !saw_loss_blocks && cfg.train.mode != TrainMode::GreedyIterated {
            cfg.train.loss_blocks = LossBlocks::Last;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_text() {
        let mut c = Config::default();
        c.set("mode", "crf").unwrap();
        c.set("loss_blocks", "last").unwrap();
        c.set("el_lambda", "0.25").unwrap();
        c.set("init_from", "/tmp/m.bin").unwrap();
        let back: Config = c.to_text().parse().unwrap();
        assert_eq!(back, c);
        assert!(back.model.crf);
    }

    #[test]
    fn comments_and_errors() {
        let c: Config = "# header\nhidden = 16 # inline\n\nblocks=2\n".parse().unwrap();
        assert_eq!(c.model.hidden, 16);
        assert_eq!(c.model.blocks, 2);
        assert!("bogus = 1".parse::<Config>().is_err());
        assert!("hidden = x".parse::<Config>().is_err());
        assert!("hidden".parse::<Config>().is_err());
    }

    #[test]
    fn crf_forbids_all_block_loss() {
        assert!("mode = crf\nloss_blocks = all".parse::<Config>().is_err());
        let c: Config = "mode = crf".parse().unwrap();
        assert_eq!(c.train.loss_blocks, LossBlocks::Last);
    }

    #[test]
    fn dilation_schedules() {
        let mut m = ModelConfig::default();
        let d: Vec<_> = (1..=4).map(|j| m.dilation_at(j)).collect();
        assert_eq!(d, [1, 2, 4, 8]);
        m.dilation = DilationSchedule::Constant;
        assert_eq!(m.dilation_at(1), 8);
        m.dilation = DilationSchedule::None;
        assert_eq!(m.dilation_at(3), 1);
    }
}
