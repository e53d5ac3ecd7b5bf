//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error with a floor so that two near-zero gradients compare equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

/// Compares the tape gradient of `f` against central differences for every
/// entry of every input and returns the worst relative error.
///
/// `f` builds a scalar from the inputs on a fresh tape; it is called
/// `1 + 2·(total entries)` times.
pub fn check<F>(inputs: &[Tensor], step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.gradients(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zero(v)).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x)).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.scalar(l))
    };

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[k].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[k].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[k].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(analytic[k].data()[j], numeric));
        }
    }
    Ok(worst)
}

/// A component whose trainable parameters live in one or more stores.
pub trait Parameterized {
    fn stores_mut(&mut self) -> Vec<&mut ParamStore>;
}

impl Parameterized for ParamStore {
    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![self]
    }
}

/// Finite-difference check over the trainable parameters of `model`.
///
/// At most `per_param` evenly spaced entries of each parameter are
/// perturbed (all entries when `None`). Gradients are cleared on return.
pub fn check_model<M, F>(model: &mut M, step: f64, per_param: Option<usize>, f: F) -> Result<f64>
where
    M: Parameterized,
    F: Fn(&mut Tape, &M) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, model)?;
    {
        let mut stores = model.stores_mut();
        stores.iter_mut().for_each(|s| s.zero_grad());
        tape.backward(loss, &mut stores)?;
    }
    drop(tape);

    // (store index, param, entry, analytic)
    let mut probes = Vec::new();
    for (si, store) in model.stores_mut().into_iter().enumerate() {
        for id in store.ids().collect::<Vec<_>>() {
            let t = store.get(id);
            if !t.requires_grad() {
                continue;
            }
            let n = t.numel();
            let stride = per_param.map_or(1, |k| (n / k.max(1)).max(1));
            let grad = t.grad_tensor();
            for j in (0..n).step_by(stride) {
                probes.push((si, id, j, grad.data()[j]));
            }
        }
    }
    model.stores_mut().iter_mut().for_each(|s| s.zero_grad());

    let mut worst: f64 = 0.0;
    for (si, id, j, analytic) in probes {
        let orig = model.stores_mut()[si].get(id).data()[j];
        let mut eval_at = |x: f64| -> Result<f64> {
            model.stores_mut()[si].get_mut(id).data_mut()[j] = x;
            let mut t = Tape::new();
            let l = f(&mut t, model)?;
            Ok(t.scalar(l))
        };
        let plus = eval_at(orig + step)?;
        let minus = eval_at(orig - step)?;
        eval_at(orig)?;
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max(relative_error(analytic, numeric));
    }
    Ok(worst)
}
