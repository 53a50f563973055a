use crate::autodiff::GradientMap;
use crate::error::{Error, Result};
use crate::tensor::{Float, ParamStore, Tensor};

/// `d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`
pub fn lr_schedule(step: u64, d_model: usize, warmup: u64) -> Result<Float> {
    if step == 0 {
        return Err(Error::invalid("learning-rate schedule starts at step 1"));
    }
    if warmup == 0 || d_model == 0 {
        return Err(Error::invalid("warmup and d_model must be positive"));
    }
    let s = step as Float;
    let w = warmup as Float;
    Ok((d_model as Float).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: Float,
    pub beta2: Float,
    pub eps: Float,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// First and second moments per parameter, plus the number of steps taken.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter in `store`.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &GradientMap,
    state: &mut OptimizerState,
    lr: Float,
    adam: AdamConfig,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::ExtentMismatch {
            what: "optimizer parameters",
            expected: store.len(),
            found: grads.len().min(state.m.len()),
        });
    }
    for (id, g) in grads.iter() {
        let p = store.get(id);
        if g.shape() != p.shape() || state.m[id.index()].shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - adam.beta1.powi(t);
    let c2 = 1.0 - adam.beta2.powi(t);
    for (id, g) in grads.iter() {
        let i = id.index();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = store.get_mut(id).data_mut();
        for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
            *m = adam.beta1 * *m + (1.0 - adam.beta1) * g;
            *v = adam.beta2 * *v + (1.0 - adam.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + adam.eps);
        }
    }
    Ok(())
}
