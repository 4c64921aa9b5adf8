use crate::numeric::{ParamStore, Scalar, Tensor};

/// Adam moments and hyperparameters.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub base_lr: f64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(store: &ParamStore<F>, base_lr: f64) -> Self {
        let (m, v) = store
            .iter()
            .map(|(_, p)| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())))
            .unzip();
        AdamState {
            step: 0,
            m,
            v,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            base_lr,
        }
    }
}

/// One bias-corrected Adam update at learning rate `lr`. Frozen parameters
/// are skipped; all gradients are zeroed afterwards.
pub fn adam_step<F: Scalar>(store: &mut ParamStore<F>, state: &mut AdamState<F>, lr: f64) {
    assert_eq!(state.m.len(), store.len(), "optimizer state does not match parameters");
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (F::of(state.beta1), F::of(state.beta2));
    let c1 = F::of(1.0 - state.beta1.powi(t));
    let c2 = F::of(1.0 - state.beta2.powi(t));
    let (lr, eps) = (F::of(lr), F::of(state.epsilon));
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if p.trainable {
            let (pv, g) = (p.value.data_mut(), p.grad.data());
            for (((w, &gi), mi), vi) in pv.iter_mut().zip(g).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (F::one() - b1) * gi;
                *vi = b2 * *vi + (F::one() - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        p.grad.fill(F::zero());
    }
}

/// Inverse square-root schedule normalized so that `lr(warmup) = base_lr`:
/// linear warmup, then `t^(-1/2)` decay.
pub fn inv_sqrt_lr(step: u64, base_lr: f64, warmup: u64) -> f64 {
    let t = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    base_lr * (t / w).min((w / t).sqrt())
}
