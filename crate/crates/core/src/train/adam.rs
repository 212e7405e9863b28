use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::{Real, Tensor};

/// Moment buffers and hyperparameters of Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self::with_hyper(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
        AdamState { beta1, beta2, eps, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn first_moment(&self, i: usize) -> &[T] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[T] {
        &self.v[i]
    }
}

/// One bias-corrected Adam update. Gradients are given in store order; a
/// non-finite gradient rejects the whole step and leaves everything unchanged.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape("adam_step", &[params.len()], &[grads.len()]));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient { name: name.to_string() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, (p, g)) in params.tensors_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gf = gv.as_f64();
            let mn = b1 * mv.as_f64() + (1.0 - b1) * gf;
            let vn = b2 * vv.as_f64() + (1.0 - b2) * gf * gf;
            *mv = T::from_f64_lossy(mn);
            *vv = T::from_f64_lossy(vn);
            let update = lr * (mn / c1) / ((vn / c2).sqrt() + state.eps);
            *pv = T::from_f64_lossy(pv.as_f64() - update);
        }
    }
    Ok(())
}
