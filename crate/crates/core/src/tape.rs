//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Every op evaluates eagerly and appends a node; [`Tape::backward`] walks the
//! nodes in reverse, accumulating gradients for leaves and for parameters.
//! Parameters are borrowed from a [`ParamStore`] and never copied.

use crate::crf::{self, Constraints, CrfScores};
use crate::error::{Error, Result};
use crate::params::{GradBuffer, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Mask(Var, Vec<f64>),
    Concat(Vec<Var>),
    LogSoftmax(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    Row {
        x: Var,
        r: usize,
    },
    StackRows(Vec<Var>),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    DilatedConv {
        x: Var,
        w: Var,
        b: Var,
        radius: usize,
        dilation: usize,
    },
    Sum(Var),
    PickSum {
        x: Var,
        picks: Vec<(usize, usize)>,
    },
    CrfNll {
        logits: Var,
        transitions: Var,
        start: Option<Var>,
        end: Option<Var>,
        grads: Box<crf::CrfLoss>,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    nonfinite: Option<String>,
}

/// Gradients of every leaf recorded on the tape.
pub struct Grads {
    nodes: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].as_deref()
    }
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            nonfinite: None,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match (&self.nodes[v.0].value, &self.nodes[v.0].op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    /// First op that produced a NaN or infinity, if any.
    pub fn check_finite(&self) -> Result<()> {
        match &self.nonfinite {
            Some(op) => Err(Error::NonFinite(op.clone())),
            None => Ok(()),
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Var {
        if self.nonfinite.is_none() && !value.is_finite() {
            self.nonfinite = Some(format!("{name} (node {})", self.nodes.len()));
        }
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push("input", t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// `x W^T + b` applied to every row of `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        if wt.shape().len() != 2 || xt.cols() != wt.shape()[1] {
            return Err(dim_err("affine", xt.shape(), wt.shape()));
        }
        let (n_out, n_in) = (wt.shape()[0], wt.shape()[1]);
        if bt.len() != n_out {
            return Err(dim_err("affine", wt.shape(), bt.shape()));
        }
        let rows = xt.rows();
        let mut out = vec![0.0; rows * n_out];
        let (xd, wd, bd) = (xt.data(), wt.data(), bt.data());
        for r in 0..rows {
            let xr = &xd[r * n_in..(r + 1) * n_in];
            for o in 0..n_out {
                let wr = &wd[o * n_in..(o + 1) * n_in];
                let mut acc = 0.0;
                for (a, b) in wr.iter().zip(xr) {
                    acc += a * b;
                }
                out[r * n_out + o] = acc + bd[o];
            }
        }
        let mut shape = xt.shape().to_vec();
        *shape.last_mut().unwrap() = n_out;
        let value = Tensor::new(shape, out)?;
        Ok(self.push("affine", value, Op::Affine { x, w, b }))
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xt = self.value(x);
        let data = xt.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(xt.shape().to_vec(), data).expect("same shape");
        self.push(name, value, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map("relu", x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map("scale", x, |v| v * c, Op::Scale(x, c))
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(dim_err(name, at.shape(), bt.shape()));
        }
        let data = at.data().iter().zip(bt.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(at.shape().to_vec(), data)?;
        Ok(self.push(name, value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise product with a constant (e.g. a dropout mask).
    pub fn mask(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        let xt = self.value(x);
        if xt.shape() != mask.shape() {
            return Err(dim_err("mask", xt.shape(), mask.shape()));
        }
        let data = xt.data().iter().zip(mask.data()).map(|(a, b)| a * b).collect();
        let value = Tensor::new(xt.shape().to_vec(), data)?;
        Ok(self.push("mask", value, Op::Mask(x, mask.data().to_vec())))
    }

    /// Concatenation along the last axis. Inputs must be vectors, or
    /// matrices sharing a row count.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::Usage("concat of an empty list".into()));
        };
        let rank = self.value(first).shape().len();
        let rows = self.value(first).rows();
        for &x in xs {
            let t = self.value(x);
            if t.shape().len() != rank || t.rows() != rows || rank > 2 {
                return Err(dim_err("concat", self.value(first).shape(), t.shape()));
            }
        }
        let cols: Vec<usize> = xs.iter().map(|&x| self.value(x).cols()).collect();
        let total: usize = cols.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(r));
            }
        }
        let shape = if rank == 1 { vec![total] } else { vec![rows, total] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push("concat", value, Op::Concat(xs.to_vec())))
    }

    /// Row-wise log-softmax, stabilized by max subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let cols = xt.cols();
        let mut out = Vec::with_capacity(xt.len());
        for r in 0..xt.rows() {
            let row = xt.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        debug_assert_eq!(out.len() % cols, 0);
        let value = Tensor::new(xt.shape().to_vec(), out).expect("same shape");
        self.push("log_softmax", value, Op::LogSoftmax(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xt = self.value(x);
        if len == 0 || start + len > xt.cols() {
            return Err(dim_err("slice_cols", xt.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(xt.rows() * len);
        for r in 0..xt.rows() {
            out.extend_from_slice(&xt.row(r)[start..start + len]);
        }
        let mut shape = xt.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push("slice_cols", value, Op::SliceCols { x, start }))
    }

    pub fn row(&mut self, x: Var, r: usize) -> Result<Var> {
        let xt = self.value(x);
        if xt.shape().len() != 2 || r >= xt.rows() {
            return Err(dim_err("row", xt.shape(), &[r]));
        }
        let value = Tensor::from_vec(xt.row(r).to_vec());
        Ok(self.push("row", value, Op::Row { x, r }))
    }

    pub fn stack_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::Usage("stack of an empty list".into()));
        };
        let cols = self.value(first).len();
        let mut out = Vec::with_capacity(xs.len() * cols);
        for &x in xs {
            let t = self.value(x);
            if t.shape().len() != 1 || t.len() != cols {
                return Err(dim_err("stack_rows", self.value(first).shape(), t.shape()));
            }
            out.extend_from_slice(t.data());
        }
        let value = Tensor::matrix(xs.len(), cols, out)?;
        Ok(self.push("stack_rows", value, Op::StackRows(xs.to_vec())))
    }

    /// Rows of `table` selected by `ids`, as a `len(ids) x cols` matrix.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let n = tt.rows();
        if ids.is_empty() {
            return Err(Error::Usage("gather with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(dim_err("gather", tt.shape(), &[bad]));
        }
        let cols = tt.cols();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(tt.row(i));
        }
        let value = Tensor::matrix(ids.len(), cols, out)?;
        Ok(self.push(
            "gather",
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Same-length dilated convolution over a `T x h_in` sequence.
    ///
    /// `w` is `h_out x ((2r+1) h_in)`; window slot `k` reads position
    /// `t + (k - r) * dilation`, and positions outside the sequence read zeros.
    pub fn dilated_conv(&mut self, x: Var, w: Var, b: Var, radius: usize, dilation: usize) -> Result<Var> {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        let width = 2 * radius + 1;
        if xt.shape().len() != 2 || wt.shape().len() != 2 || wt.shape()[1] != width * xt.cols() || dilation == 0 {
            return Err(dim_err("dilated_conv", xt.shape(), wt.shape()));
        }
        let (t_len, h_in) = (xt.rows(), xt.cols());
        let h_out = wt.shape()[0];
        if bt.len() != h_out {
            return Err(dim_err("dilated_conv", wt.shape(), bt.shape()));
        }
        let (xd, wd, bd) = (xt.data(), wt.data(), bt.data());
        let row_len = width * h_in;
        let mut out = vec![0.0; t_len * h_out];
        for t in 0..t_len {
            for o in 0..h_out {
                let wr = &wd[o * row_len..(o + 1) * row_len];
                let mut acc = 0.0;
                for k in 0..width {
                    let Some(s) = tap(t, k, radius, dilation, t_len) else {
                        continue;
                    };
                    let xs = &xd[s * h_in..(s + 1) * h_in];
                    for (a, b) in wr[k * h_in..(k + 1) * h_in].iter().zip(xs) {
                        acc += a * b;
                    }
                }
                out[t * h_out + o] = acc + bd[o];
            }
        }
        let value = Tensor::matrix(t_len, h_out, out)?;
        Ok(self.push(
            "dilated_conv",
            value,
            Op::DilatedConv {
                x,
                w,
                b,
                radius,
                dilation,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    /// Sum of the entries `x[row][col]` for each `(row, col)` in `picks`.
    pub fn pick_sum(&mut self, x: Var, picks: &[(usize, usize)]) -> Result<Var> {
        let xt = self.value(x);
        if picks.iter().any(|&(r, c)| r >= xt.rows() || c >= xt.cols()) {
            return Err(dim_err("pick_sum", xt.shape(), &[picks.len()]));
        }
        let s = picks.iter().map(|&(r, c)| xt.row(r)[c]).sum();
        Ok(self.push(
            "pick_sum",
            Tensor::scalar(s),
            Op::PickSum {
                x,
                picks: picks.to_vec(),
            },
        ))
    }

    /// CRF negative log-likelihood of `gold` under `T x D` logits.
    pub fn crf_nll(
        &mut self,
        logits: Var,
        transitions: Var,
        boundaries: Option<(Var, Var)>,
        constraints: Option<&Constraints>,
        gold: &[usize],
    ) -> Result<Var> {
        let lt = self.value(logits);
        let d = lt.cols();
        let tt = self.value(transitions);
        if tt.len() != d * d || lt.shape().len() != 2 || lt.rows() != gold.len() {
            return Err(dim_err("crf_nll", lt.shape(), tt.shape()));
        }
        if gold.iter().any(|&g| g >= d) {
            return Err(Error::Usage("gold label out of range".into()));
        }
        let mut scores = CrfScores::new(tt.data(), d);
        if let Some((s, e)) = boundaries {
            scores = scores.with_boundaries(self.value(s).data(), self.value(e).data());
        }
        if let Some(c) = constraints {
            scores = scores.with_constraints(c);
        }
        let loss = crf::crf_nll(lt, &scores, gold);
        let value = Tensor::scalar(loss.loss);
        Ok(self.push(
            "crf_nll",
            value,
            Op::CrfNll {
                logits,
                transitions,
                start: boundaries.map(|b| b.0),
                end: boundaries.map(|b| b.1),
                grads: Box::new(loss),
            },
        ))
    }

    /// Propagates `d loss / d node` back through the tape. Parameter
    /// gradients are added into `param_grads`; leaf gradients are returned.
    pub fn backward(&self, loss: Var, param_grads: &mut GradBuffer) -> Result<Grads> {
        self.check_finite()?;
        if self.value(loss).len() != 1 {
            return Err(dim_err("backward", self.value(loss).shape(), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let g = match &node.op {
                Op::Leaf => continue,
                Op::Param(id) => {
                    if let Some(g) = grads[i].take() {
                        let slot = param_grads.slot(*id, g.len());
                        for (a, b) in slot.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    continue;
                }
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop(i, &g, &mut grads);
        }

        let nodes = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match n.op {
                Op::Leaf => g,
                _ => None,
            })
            .collect();
        let grads = Grads { nodes };
        if let Some(bad) = grads.nodes.iter().flatten().flatten().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient value {bad}")));
        }
        Ok(grads)
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.nodes[i].value.as_ref().expect("op output");
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Affine { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (n_out, n_in) = (wt.shape()[0], wt.shape()[1]);
                let rows = xt.rows();
                let (xd, wd) = (xt.data(), wt.data());
                let gx = slot(grads, *x, xt.len());
                for r in 0..rows {
                    for o in 0..n_out {
                        let go = g[r * n_out + o];
                        if go == 0.0 {
                            continue;
                        }
                        let wr = &wd[o * n_in..(o + 1) * n_in];
                        for (a, &wv) in gx[r * n_in..(r + 1) * n_in].iter_mut().zip(wr) {
                            *a += go * wv;
                        }
                    }
                }
                let gw = slot(grads, *w, wt.len());
                for r in 0..rows {
                    let xr = &xd[r * n_in..(r + 1) * n_in];
                    for o in 0..n_out {
                        let go = g[r * n_out + o];
                        if go == 0.0 {
                            continue;
                        }
                        for (a, &xv) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(xr) {
                            *a += go * xv;
                        }
                    }
                }
                let gb = slot(grads, *b, n_out);
                for r in 0..rows {
                    for o in 0..n_out {
                        gb[o] += g[r * n_out + o];
                    }
                }
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let gx = slot(grads, *x, xd.len());
                for ((a, &v), &go) in gx.iter_mut().zip(xd).zip(g) {
                    if v > 0.0 {
                        *a += go;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let gx = slot(grads, *x, out.len());
                for ((a, &y), &go) in gx.iter_mut().zip(out.data()).zip(g) {
                    *a += go * y * (1.0 - y);
                }
            }
            Op::Tanh(x) => {
                let gx = slot(grads, *x, out.len());
                for ((a, &y), &go) in gx.iter_mut().zip(out.data()).zip(g) {
                    *a += go * (1.0 - y * y);
                }
            }
            Op::Exp(x) => {
                let gx = slot(grads, *x, out.len());
                for ((a, &y), &go) in gx.iter_mut().zip(out.data()).zip(g) {
                    *a += go * y;
                }
            }
            Op::Scale(x, c) => {
                let gx = slot(grads, *x, out.len());
                for (a, &go) in gx.iter_mut().zip(g) {
                    *a += go * c;
                }
            }
            Op::Mask(x, m) => {
                let gx = slot(grads, *x, out.len());
                for ((a, &mv), &go) in gx.iter_mut().zip(m).zip(g) {
                    *a += go * mv;
                }
            }
            Op::Add(a, b) => {
                add_into(slot(grads, *a, g.len()), g, 1.0);
                add_into(slot(grads, *b, g.len()), g, 1.0);
            }
            Op::Sub(a, b) => {
                add_into(slot(grads, *a, g.len()), g, 1.0);
                add_into(slot(grads, *b, g.len()), g, -1.0);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let ga = slot(grads, *a, g.len());
                for ((s, &go), &bv) in ga.iter_mut().zip(g).zip(bd) {
                    *s += go * bv;
                }
                let gb = slot(grads, *b, g.len());
                for ((s, &go), &av) in gb.iter_mut().zip(g).zip(ad) {
                    *s += go * av;
                }
            }
            Op::Concat(xs) => {
                let total = out.cols();
                let rows = out.rows();
                let mut offset = 0;
                for &x in xs {
                    let c = self.value(x).cols();
                    let gx = slot(grads, x, rows * c);
                    for r in 0..rows {
                        add_into(
                            &mut gx[r * c..(r + 1) * c],
                            &g[r * total + offset..r * total + offset + c],
                            1.0,
                        );
                    }
                    offset += c;
                }
            }
            Op::LogSoftmax(x) => {
                let cols = out.cols();
                let gx = slot(grads, *x, out.len());
                for r in 0..out.rows() {
                    let y = &out.data()[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let s: f64 = gr.iter().sum();
                    for c in 0..cols {
                        gx[r * cols + c] += gr[c] - y[c].exp() * s;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let xt = self.value(*x);
                let (cols, len) = (xt.cols(), out.cols());
                let gx = slot(grads, *x, xt.len());
                for r in 0..out.rows() {
                    add_into(
                        &mut gx[r * cols + start..r * cols + start + len],
                        &g[r * len..(r + 1) * len],
                        1.0,
                    );
                }
            }
            Op::Row { x, r } => {
                let xt = self.value(*x);
                let cols = xt.cols();
                let gx = slot(grads, *x, xt.len());
                add_into(&mut gx[r * cols..(r + 1) * cols], g, 1.0);
            }
            Op::StackRows(xs) => {
                let cols = out.cols();
                for (r, &x) in xs.iter().enumerate() {
                    add_into(slot(grads, x, cols), &g[r * cols..(r + 1) * cols], 1.0);
                }
            }
            Op::Gather { table, ids } => {
                let tt = self.value(*table);
                let cols = tt.cols();
                let gt = slot(grads, *table, tt.len());
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols], 1.0);
                }
            }
            Op::DilatedConv {
                x,
                w,
                b,
                radius,
                dilation,
            } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (t_len, h_in) = (xt.rows(), xt.cols());
                let h_out = wt.shape()[0];
                let width = 2 * radius + 1;
                let row_len = width * h_in;
                let (xd, wd) = (xt.data(), wt.data());
                let gx = slot(grads, *x, xt.len());
                for t in 0..t_len {
                    for k in 0..width {
                        let Some(s) = tap(t, k, *radius, *dilation, t_len) else {
                            continue;
                        };
                        let gxs = &mut gx[s * h_in..(s + 1) * h_in];
                        for o in 0..h_out {
                            let go = g[t * h_out + o];
                            if go == 0.0 {
                                continue;
                            }
                            let wk = &wd[o * row_len + k * h_in..o * row_len + (k + 1) * h_in];
                            for (a, &wv) in gxs.iter_mut().zip(wk) {
                                *a += go * wv;
                            }
                        }
                    }
                }
                let gw = slot(grads, *w, wt.len());
                for t in 0..t_len {
                    for k in 0..width {
                        let Some(s) = tap(t, k, *radius, *dilation, t_len) else {
                            continue;
                        };
                        let xs = &xd[s * h_in..(s + 1) * h_in];
                        for o in 0..h_out {
                            let go = g[t * h_out + o];
                            if go == 0.0 {
                                continue;
                            }
                            let gwk = &mut gw[o * row_len + k * h_in..o * row_len + (k + 1) * h_in];
                            for (a, &xv) in gwk.iter_mut().zip(xs) {
                                *a += go * xv;
                            }
                        }
                    }
                }
                let gb = slot(grads, *b, h_out);
                for t in 0..t_len {
                    add_into(gb, &g[t * h_out..(t + 1) * h_out], 1.0);
                }
            }
            Op::Sum(x) => {
                let gx = slot(grads, *x, self.value(*x).len());
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
            Op::PickSum { x, picks } => {
                let xt = self.value(*x);
                let cols = xt.cols();
                let gx = slot(grads, *x, xt.len());
                for &(r, c) in picks {
                    gx[r * cols + c] += g[0];
                }
            }
            Op::CrfNll {
                logits,
                transitions,
                start,
                end,
                grads: local,
            } => {
                add_into(slot(grads, *logits, local.d_logits.len()), &local.d_logits, g[0]);
                add_into(
                    slot(grads, *transitions, local.d_transitions.len()),
                    &local.d_transitions,
                    g[0],
                );
                if let Some(s) = start {
                    add_into(slot(grads, *s, local.d_start.len()), &local.d_start, g[0]);
                }
                if let Some(e) = end {
                    add_into(slot(grads, *e, local.d_end.len()), &local.d_end, g[0]);
                }
            }
        }
    }
}

/// Source position read by window slot `k` at output position `t`.
#[inline]
fn tap(t: usize, k: usize, radius: usize, dilation: usize, len: usize) -> Option<usize> {
    let s = t as isize + (k as isize - radius as isize) * dilation as isize;
    (s >= 0 && (s as usize) < len).then_some(s as usize)
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64], c: f64) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += c * b;
    }
}
