//! Bidirectional LSTM baseline encoder.

use rand::Rng;

use crate::error::Result;
use crate::idcnn::{init_xavier, lookup, Dropout, EncoderOutput};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Weights of one LSTM direction. Gate rows are ordered input, forget,
/// output, candidate; `w` is `4h x (n_in + h)` acting on `[x_t; h_{t-1}]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub w: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmParams {
    pub fn create<R: Rng>(store: &mut ParamStore, name: &str, n_in: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let mut w = Tensor::zeros(&[4 * hidden, n_in + hidden]);
        init_xavier(&mut w, n_in + hidden, hidden, rng);
        let mut b = Tensor::zeros(&[4 * hidden]);
        b.data_mut()[hidden..2 * hidden].fill(1.0);
        Ok(LstmParams {
            w: store.add(format!("{name}.w"), w)?,
            b: store.add(format!("{name}.b"), b)?,
            hidden,
        })
    }

    pub fn bind(store: &ParamStore, name: &str) -> Result<Self> {
        let b = lookup(store, &format!("{name}.b"))?;
        Ok(LstmParams {
            w: lookup(store, &format!("{name}.w"))?,
            hidden: store.get(b).len() / 4,
            b,
        })
    }
}

/// One cell update: `c = f * c_prev + i * g`, `h = o * tanh(c)`.
pub fn lstm_step(tape: &mut Tape, x_t: Var, (h_prev, c_prev): (Var, Var), params: &LstmParams) -> Result<(Var, Var)> {
    let h = params.hidden;
    let xh = tape.concat(&[x_t, h_prev])?;
    let w = tape.param(params.w);
    let b = tape.param(params.b);
    let z = tape.affine(xh, w, b)?;
    let zi = tape.slice_cols(z, 0, h)?;
    let i = tape.sigmoid(zi);
    let zf = tape.slice_cols(z, h, h)?;
    let f = tape.sigmoid(zf);
    let zo = tape.slice_cols(z, 2 * h, h)?;
    let o = tape.sigmoid(zo);
    let zg = tape.slice_cols(z, 3 * h, h)?;
    let g = tape.tanh(zg);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h_t = tape.mul(o, tc)?;
    Ok((h_t, c))
}

/// Runs one direction over rows `order` of `x`, returning hidden states in
/// the same order as `order`.
fn run_direction(
    tape: &mut Tape,
    rows: &[Var],
    order: impl Iterator<Item = usize>,
    params: &LstmParams,
    steps: &mut usize,
) -> Result<Vec<(usize, Var)>> {
    let zero = Tensor::zeros(&[params.hidden]);
    let mut state = (tape.input(zero.clone()), tape.input(zero));
    let mut out = Vec::new();
    for t in order {
        state = lstm_step(tape, rows[t], state, params)?;
        *steps += 1;
        out.push((t, state.0));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiLstmEncoder {
    pub forward: LstmParams,
    pub backward: LstmParams,
    pub output_w: ParamId,
    pub output_b: ParamId,
}

impl BiLstmEncoder {
    pub fn create<R: Rng>(
        store: &mut ParamStore,
        n_in: usize,
        hidden: usize,
        num_labels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let forward = LstmParams::create(store, "lstm.fwd", n_in, hidden, rng)?;
        let backward = LstmParams::create(store, "lstm.bwd", n_in, hidden, rng)?;
        let mut out = Tensor::zeros(&[num_labels, 2 * hidden]);
        init_xavier(&mut out, 2 * hidden, num_labels, rng);
        Ok(BiLstmEncoder {
            forward,
            backward,
            output_w: store.add("output.w", out)?,
            output_b: store.add("output.b", Tensor::zeros(&[num_labels]))?,
        })
    }

    pub fn bind(store: &ParamStore) -> Result<Self> {
        Ok(BiLstmEncoder {
            forward: LstmParams::bind(store, "lstm.fwd")?,
            backward: LstmParams::bind(store, "lstm.bwd")?,
            output_w: lookup(store, "output.w")?,
            output_b: lookup(store, "output.b")?,
        })
    }

    /// Encodes the first `len` rows of a `W x n_in` input; rows at or past
    /// `len` are padding. Both directions stop at the true end (the backward
    /// one starts from a zero state at `len - 1`), and padded rows get zero
    /// states, so padding never reaches real positions.
    pub fn encode(
        &self,
        tape: &mut Tape,
        x: Var,
        len: usize,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<EncoderOutput> {
        let mut x = x;
        if let Some(d) = dropout.as_deref_mut() {
            x = Dropout::apply(tape, x, d.input, d.rng)?;
        }
        let width = tape.value(x).rows();
        assert!(len >= 1 && len <= width, "invalid sequence length");
        let rows: Vec<Var> = (0..width).map(|t| tape.row(x, t)).collect::<Result<_>>()?;

        let mut fwd_steps = 0;
        let mut bwd_steps = 0;
        let fwd = run_direction(tape, &rows, 0..len, &self.forward, &mut fwd_steps)?;
        let mut bwd = run_direction(tape, &rows, (0..len).rev(), &self.backward, &mut bwd_steps)?;
        bwd.reverse();
        let fwd_pad = tape.input(Tensor::zeros(&[self.forward.hidden]));
        let bwd_pad = tape.input(Tensor::zeros(&[self.backward.hidden]));

        let mut joined = Vec::with_capacity(width);
        for t in 0..width {
            let f = fwd.get(t).map_or(fwd_pad, |&(_, v)| v);
            let b = bwd.get(t).map_or(bwd_pad, |&(_, v)| v);
            joined.push(tape.concat(&[f, b])?);
        }
        let mut states = tape.stack_rows(&joined)?;
        if let Some(d) = dropout {
            states = Dropout::apply(tape, states, d.block, d.rng)?;
        }
        let w = tape.param(self.output_w);
        let b = tape.param(self.output_b);
        let logits = tape.affine(states, w, b)?;
        Ok(EncoderOutput {
            block_logits: vec![logits],
            // The directions run concurrently.
            critical_path: fwd_steps.max(bwd_steps),
        })
    }
}

/// Scalar count of a Bi-LSTM encoder with the given sizes.
pub fn bilstm_num_params(n_in: usize, hidden: usize, num_labels: usize) -> usize {
    2 * (4 * hidden * (n_in + hidden) + 4 * hidden) + num_labels * 2 * hidden + num_labels
}
