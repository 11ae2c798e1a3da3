//! Central finite-difference checks for tape gradients.

use crate::error::Result;
use crate::params::{GradBuffer, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor so that gradients that are zero up to rounding compare
/// by absolute error.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Worst disagreement found by a check.
#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub max_rel_error: f64,
    pub at: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl Mismatch {
    fn none() -> Self {
        Mismatch {
            max_rel_error: 0.0,
            at: String::new(),
            analytic: 0.0,
            numeric: 0.0,
        }
    }

    fn update(&mut self, at: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        if e > self.max_rel_error || e.is_nan() {
            *self = Mismatch {
                max_rel_error: e,
                at: at(),
                analytic,
                numeric,
            };
        }
    }
}

/// Compares the gradient of a scalar function of leaf inputs with central
/// differences of step `eps`.
pub fn check_inputs(inputs: &[Tensor], eps: f64, build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<Mismatch> {
    let store = ParamStore::new();
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new(&store);
        let vars: Vec<Var> = xs.iter().map(|x| tape.input(x.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new(&store);
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out, &mut GradBuffer::new(&store))?;

    let mut worst = Mismatch::none();
    let mut xs = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + eps;
            let up = eval(&xs)?;
            xs[k].data_mut()[i] = orig - eps;
            let down = eval(&xs)?;
            xs[k].data_mut()[i] = orig;
            worst.update(|| format!("input {k}[{i}]"), a, (up - down) / (2.0 * eps));
        }
    }
    Ok(worst)
}

/// Compares parameter gradients of a scalar function of `store` with
/// central differences of step `eps`.
pub fn check_params(store: &ParamStore, eps: f64, build: impl Fn(&mut Tape) -> Result<Var>) -> Result<Mismatch> {
    let mut grads = GradBuffer::new(store);
    {
        let mut tape = Tape::new(store);
        let out = build(&mut tape)?;
        tape.backward(out, &mut grads)?;
    }
    let mut probe = store.clone();
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(s);
        let out = build(&mut tape)?;
        Ok(tape.value(out).item())
    };
    let mut worst = Mismatch::none();
    for id in store.ids() {
        let analytic = grads
            .get(id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; store.get(id).len()]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            worst.update(|| format!("{}[{i}]", store.name(id)), a, (up - down) / (2.0 * eps));
        }
    }
    Ok(worst)
}
