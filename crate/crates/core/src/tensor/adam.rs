//! Adam optimizer with the weight-decay term folded into the gradient.

use indexmap::IndexMap;

use super::{Element, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moment estimates plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState<E> {
    pub hyper: AdamHyper,
    pub step: u64,
    pub m: IndexMap<String, Tensor<E>>,
    pub v: IndexMap<String, Tensor<E>>,
}

impl<E: Element> AdamState<E> {
    pub fn new(hyper: AdamHyper) -> Self {
        AdamState {
            hyper,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }
}

/// One Adam update over named parameters. `weight_decay_grads`, when present,
/// holds the 2*alpha*theta term and is summed into the gradient before the
/// moment updates (the decay enters through the loss gradient, not decoupled).
pub fn adam_step<E: Element>(
    params: &mut IndexMap<String, Tensor<E>>,
    grads: &IndexMap<String, Tensor<E>>,
    state: &mut AdamState<E>,
    lr: f64,
    weight_decay_grads: Option<&IndexMap<String, Tensor<E>>>,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let h = state.hyper;
    let b1 = E::from_f64(h.beta1);
    let b2 = E::from_f64(h.beta2);
    let one = E::one();
    let bias1 = E::from_f64(1.0 - h.beta1.powi(t));
    let bias2 = E::from_f64(1.0 - h.beta2.powi(t));
    let lr_e = E::from_f64(lr);
    let eps = E::from_f64(h.eps);

    for (name, p) in params.iter_mut() {
        let g = grads.get(name).ok_or_else(|| {
            TensorError::Usage(format!("missing gradient for parameter {name}"))
        })?;
        if g.shape() != p.shape() {
            return Err(TensorError::Shape {
                context: "adam_step".into(),
                detail: format!("{name}: grad {:?} vs param {:?}", g.shape(), p.shape()),
            });
        }
        let wd = weight_decay_grads.and_then(|w| w.get(name));
        if let Some(wd) = wd {
            if wd.shape() != p.shape() {
                return Err(TensorError::Shape {
                    context: "adam_step".into(),
                    detail: format!("{name}: decay {:?} vs param {:?}", wd.shape(), p.shape()),
                });
            }
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        for i in 0..p.len() {
            let mut gi = g.data()[i];
            if let Some(wd) = wd {
                gi = gi + wd.data()[i];
            }
            let mi = b1 * m.data()[i] + (one - b1) * gi;
            let vi = b2 * v.data()[i] + (one - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let mhat = mi / bias1;
            let vhat = vi / bias2;
            p.data_mut()[i] = p.data()[i] - lr_e * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
