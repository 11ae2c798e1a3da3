//! Iterated dilated convolutions.
//!
//! An entry projection maps each token's input vector to width `h`. A block
//! stacks `L_c` same-length dilated convolutions (each followed by ReLU) and
//! a closing dilation-1 convolution, and is applied `L_b` times. Every
//! block's output goes through the same projection to per-token logits.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{BlockInit, ModelConfig};
use crate::error::{Error, Result};
use crate::optim::dropout_mask_with;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Dropout state for a training-mode forward pass.
pub struct Dropout<'r> {
    pub input: f64,
    pub block: f64,
    pub rng: &'r mut ChaCha8Rng,
}

impl Dropout<'_> {
    pub(crate) fn apply(tape: &mut Tape, x: Var, rate: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
        if rate == 0.0 {
            return Ok(x);
        }
        let shape = tape.value(x).shape().to_vec();
        let mask = dropout_mask_with(rng, &shape, rate)?;
        tape.mask(x, &mask)
    }
}

/// Same-length convolution `h_out x ((2r+1) h_in)` with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct DilatedConvLayer {
    pub filter: ParamId,
    pub bias: ParamId,
    pub radius: usize,
    pub dilation: usize,
    pub h_in: usize,
    pub h_out: usize,
}

impl DilatedConvLayer {
    /// Registers zero-valued parameters `{name}.w` and `{name}.b`.
    pub fn create(
        store: &mut ParamStore,
        name: &str,
        h_in: usize,
        h_out: usize,
        radius: usize,
        dilation: usize,
    ) -> Result<Self> {
        let width = 2 * radius + 1;
        let filter = store.add(format!("{name}.w"), Tensor::zeros(&[h_out, width * h_in]))?;
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[h_out]))?;
        Ok(DilatedConvLayer {
            filter,
            bias,
            radius,
            dilation,
            h_in,
            h_out,
        })
    }

    /// Rebinds a layer to parameters already present in `store`.
    pub fn bind(store: &ParamStore, name: &str, radius: usize, dilation: usize) -> Result<Self> {
        let filter = lookup(store, &format!("{name}.w"))?;
        let bias = lookup(store, &format!("{name}.b"))?;
        let w = store.get(filter);
        let h_out = w.shape()[0];
        let h_in = w.shape()[1] / (2 * radius + 1);
        Ok(DilatedConvLayer {
            filter,
            bias,
            radius,
            dilation,
            h_in,
            h_out,
        })
    }

    pub fn num_params(&self) -> usize {
        self.h_out * (2 * self.radius + 1) * self.h_in + self.h_out
    }
}

pub(crate) fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
}

/// `c_t = W [x_{t-r d}; ...; x_t; ...; x_{t+r d}] + b`, zero beyond the ends.
pub fn dilated_conv(tape: &mut Tape, x: Var, layer: &DilatedConvLayer) -> Result<Var> {
    let w = tape.param(layer.filter);
    let b = tape.param(layer.bias);
    tape.dilated_conv(x, w, b, layer.radius, layer.dilation)
}

/// Central filter slice set to the identity, everything else zero.
pub fn init_identity_dilated(store: &mut ParamStore, layer: &DilatedConvLayer) -> Result<()> {
    if layer.h_in != layer.h_out {
        return Err(Error::Init(format!(
            "identity init needs a square layer, got {} -> {}",
            layer.h_in, layer.h_out
        )));
    }
    let h = layer.h_in;
    let row_len = (2 * layer.radius + 1) * h;
    let w = store.get_mut(layer.filter);
    w.data_mut().iter_mut().for_each(|v| *v = 0.0);
    for o in 0..h {
        w.data_mut()[o * row_len + layer.radius * h + o] = 1.0;
    }
    store.get_mut(layer.bias).data_mut().iter_mut().for_each(|v| *v = 0.0);
    Ok(())
}

/// Normal Xavier initialization, `std = sqrt(2 / (fan_in + fan_out))`.
pub fn init_xavier<R: Rng>(t: &mut Tensor, fan_in: usize, fan_out: usize, rng: &mut R) {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    t.data_mut().iter_mut().for_each(|v| *v = normal.sample(rng));
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub layers: Vec<DilatedConvLayer>,
    pub last: DilatedConvLayer,
}

impl Block {
    fn create(store: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let h = cfg.hidden;
        let layers = (1..=cfg.layers)
            .map(|j| {
                let d = cfg.dilation_at(j);
                DilatedConvLayer::create(store, &format!("{name}.layer{j}"), h, h, cfg.radius, d)
            })
            .collect::<Result<_>>()?;
        let last = DilatedConvLayer::create(store, &format!("{name}.final"), h, h, cfg.final_radius, 1)?;
        Ok(Block { layers, last })
    }

    fn bind(store: &ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let layers = (1..=cfg.layers)
            .map(|j| DilatedConvLayer::bind(store, &format!("{name}.layer{j}"), cfg.radius, cfg.dilation_at(j)))
            .collect::<Result<_>>()?;
        let last = DilatedConvLayer::bind(store, &format!("{name}.final"), cfg.final_radius, 1)?;
        Ok(Block { layers, last })
    }

    pub fn all_layers(&self) -> impl Iterator<Item = &DilatedConvLayer> {
        self.layers.iter().chain(std::iter::once(&self.last))
    }

    /// One-sided number of positions a single application can see.
    pub fn reach(&self) -> usize {
        self.all_layers().map(|l| l.radius * l.dilation).sum()
    }
}

/// ReLU after every layer of the stack, including the closing one.
pub fn apply_block(tape: &mut Tape, x: Var, block: &Block) -> Result<Var> {
    let mut c = x;
    for layer in block.all_layers() {
        let z = dilated_conv(tape, c, layer)?;
        c = tape.relu(z);
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdCnnEncoder {
    pub entry_w: ParamId,
    pub entry_b: ParamId,
    /// One block when parameters are shared, otherwise one per iteration.
    pub blocks: Vec<Block>,
    pub iterations: usize,
    pub output_w: ParamId,
    pub output_b: ParamId,
}

/// Per-block logits and the sequential depth of the computation.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `T x D` logits after each block application (a single entry for
    /// encoders without blocks).
    pub block_logits: Vec<Var>,
    pub critical_path: usize,
}

impl EncoderOutput {
    pub fn last(&self) -> Var {
        *self.block_logits.last().expect("at least one block")
    }
}

impl IdCnnEncoder {
    /// Registers the encoder's parameters after the input features.
    pub fn create<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, num_labels: usize, rng: &mut R) -> Result<Self> {
        let (h, d_in) = (cfg.hidden, cfg.input_dim());
        let mut entry = Tensor::zeros(&[h, d_in]);
        init_xavier(&mut entry, d_in, h, rng);
        let entry_w = store.add("entry.w", entry)?;
        let entry_b = store.add("entry.b", Tensor::zeros(&[h]))?;
        let n_blocks = if cfg.share_blocks { 1 } else { cfg.blocks };
        let blocks: Vec<Block> = (0..n_blocks)
            .map(|b| Block::create(store, &format!("block{b}"), cfg))
            .collect::<Result<_>>()?;
        for layer in blocks.iter().flat_map(Block::all_layers) {
            match cfg.block_init {
                BlockInit::Identity => init_identity_dilated(store, layer)?,
                BlockInit::Xavier => {
                    let fan_in = (2 * layer.radius + 1) * layer.h_in;
                    init_xavier(store.get_mut(layer.filter), fan_in, layer.h_out, rng);
                }
            }
        }
        let mut out = Tensor::zeros(&[num_labels, h]);
        init_xavier(&mut out, h, num_labels, rng);
        let output_w = store.add("output.w", out)?;
        let output_b = store.add("output.b", Tensor::zeros(&[num_labels]))?;
        Ok(IdCnnEncoder {
            entry_w,
            entry_b,
            blocks,
            iterations: cfg.blocks,
            output_w,
            output_b,
        })
    }

    pub fn bind(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let n_blocks = if cfg.share_blocks { 1 } else { cfg.blocks };
        Ok(IdCnnEncoder {
            entry_w: lookup(store, "entry.w")?,
            entry_b: lookup(store, "entry.b")?,
            blocks: (0..n_blocks)
                .map(|b| Block::bind(store, &format!("block{b}"), cfg))
                .collect::<Result<_>>()?,
            iterations: cfg.blocks,
            output_w: lookup(store, "output.w")?,
            output_b: lookup(store, "output.b")?,
        })
    }

    pub fn block(&self, k: usize) -> &Block {
        &self.blocks[k % self.blocks.len()]
    }

    /// One-sided receptive-field radius of the final block's logits.
    pub fn reach(&self) -> usize {
        (0..self.iterations).map(|k| self.block(k).reach()).sum()
    }

    /// Sequential layer applications per forward pass; independent of length.
    pub fn critical_path(&self) -> usize {
        1 + (0..self.iterations)
            .map(|k| self.block(k).all_layers().count())
            .sum::<usize>()
    }

    /// Encodes a `T x input_dim` sequence of token features.
    ///
    /// `b1 = B(i)`, `bk = B(b{k-1})`, `hk = W_o bk + b_o`. With `dropout`,
    /// masks are drawn for the raw inputs and for every block output.
    pub fn encode(&self, tape: &mut Tape, x: Var, mut dropout: Option<&mut Dropout>) -> Result<EncoderOutput> {
        let mut x = x;
        if let Some(d) = dropout.as_deref_mut() {
            x = Dropout::apply(tape, x, d.input, d.rng)?;
        }
        let ew = tape.param(self.entry_w);
        let eb = tape.param(self.entry_b);
        let mut b = tape.affine(x, ew, eb)?;
        let ow = tape.param(self.output_w);
        let ob = tape.param(self.output_b);
        let mut block_logits = Vec::with_capacity(self.iterations);
        for k in 0..self.iterations {
            b = apply_block(tape, b, self.block(k))?;
            if let Some(d) = dropout.as_deref_mut() {
                b = Dropout::apply(tape, b, d.block, d.rng)?;
            }
            block_logits.push(tape.affine(b, ow, ob)?);
        }
        Ok(EncoderOutput {
            block_logits,
            critical_path: self.critical_path(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    Simple,
    Dilated,
}

/// Effective input width after `layers` width-`width` convolutions:
/// `l (w - 1) + 1` for simple stacks, `2^(l+1) - 1` for width-3 stacks
/// whose dilation doubles from 1.
pub fn receptive_field(layers: usize, width: usize, kind: ConvKind) -> Result<usize> {
    if layers == 0 || width < 3 || width.is_multiple_of(2) {
        return Err(Error::Usage(format!(
            "receptive field needs layers >= 1 and odd width >= 3, got {layers}, {width}"
        )));
    }
    match kind {
        ConvKind::Simple => Ok(layers * (width - 1) + 1),
        ConvKind::Dilated if width == 3 => Ok((1usize << (layers + 1)) - 1),
        ConvKind::Dilated => Err(Error::Usage(
            "closed-form dilated receptive field only covers width 3".into(),
        )),
    }
}

/// Width of a doubling-dilation stack with arbitrary radius:
/// `1 + 2 r (2^l - 1)`.
pub fn dilated_receptive_field(layers: usize, radius: usize) -> usize {
    1 + 2 * radius * ((1usize << layers) - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn cfg(h: usize) -> ModelConfig {
        ModelConfig {
            word_dim: 3,
            shape_dim: 2,
            hidden: h,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn receptive_fields() {
        assert_eq!(receptive_field(4, 3, ConvKind::Dilated).unwrap(), 31);
        assert_eq!(receptive_field(4, 3, ConvKind::Simple).unwrap(), 9);
        assert!(receptive_field(4, 5, ConvKind::Dilated).is_err());
        assert!(receptive_field(0, 3, ConvKind::Simple).is_err());
        assert_eq!(dilated_receptive_field(8, 2), 1021);
        assert_eq!(dilated_receptive_field(4, 1), 31);
    }

    #[test]
    fn hand_computed_dilated_window() {
        let mut store = ParamStore::new();
        let layer = DilatedConvLayer::create(&mut store, "l", 1, 1, 1, 2).unwrap();
        store.get_mut(layer.filter).data_mut().fill(1.0);
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::matrix(5, 1, vec![1., 2., 3., 4., 5.]).unwrap());
        let y = dilated_conv(&mut tape, x, &layer).unwrap();
        assert_eq!(tape.value(y).data(), &[4., 6., 9., 6., 8.]);
    }

    #[test]
    fn identity_layer_is_identity_for_any_dilation() {
        for d in [1, 2, 4, 8] {
            let mut store = ParamStore::new();
            let layer = DilatedConvLayer::create(&mut store, "l", 3, 3, 1, d).unwrap();
            init_identity_dilated(&mut store, &layer).unwrap();
            let x = Tensor::matrix(4, 3, (0..12).map(|v| v as f64 - 5.5).collect()).unwrap();
            let mut tape = Tape::new(&store);
            let xv = tape.input(x.clone());
            let y = dilated_conv(&mut tape, xv, &layer).unwrap();
            assert_eq!(tape.value(y).data(), x.data());
        }
    }

    #[test]
    fn identity_init_requires_square() {
        let mut store = ParamStore::new();
        let layer = DilatedConvLayer::create(&mut store, "l", 3, 4, 1, 1).unwrap();
        assert!(matches!(init_identity_dilated(&mut store, &layer), Err(Error::Init(_))));
    }

    #[test]
    fn zero_input_block_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = ModelConfig {
            block_init: BlockInit::Xavier,
            ..cfg(4)
        };
        let mut store = ParamStore::new();
        let block = Block::create(&mut store, "b", &c).unwrap();
        for l in block.all_layers() {
            init_xavier(store.get_mut(l.filter), 12, 4, &mut rng);
        }
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::zeros(&[7, 4]));
        let y = apply_block(&mut tape, x, &block).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sharing_keeps_parameter_count() {
        let mut counts = Vec::new();
        for share in [true, false] {
            for blocks in 1..=3 {
                let c = ModelConfig {
                    blocks,
                    share_blocks: share,
                    ..cfg(6)
                };
                let mut store = ParamStore::new();
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                IdCnnEncoder::create(&mut store, &c, 5, &mut rng).unwrap();
                counts.push(store.num_scalars());
            }
        }
        assert_eq!(counts[0], counts[1]);
        assert_eq!(counts[1], counts[2]);
        assert_eq!(counts[3], counts[0]);
        assert!(counts[3] < counts[4] && counts[4] < counts[5]);
        assert_eq!(counts[5] - counts[4], counts[4] - counts[3]);
    }

    #[test]
    fn reach_and_depth() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = IdCnnEncoder::create(&mut store, &cfg(4), 3, &mut rng).unwrap();
        assert_eq!(enc.block(0).reach(), 15);
        assert_eq!(enc.reach(), 45);
        assert_eq!(enc.critical_path(), 1 + 3 * 5);
    }
}
