//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps taken so far.
    pub t: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(store: &ParamStore<F>, lr: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros(), v: zeros() }
    }
}

/// Applies one update from the gradients stored in `store`.
///
/// Every trainable gradient is checked before any parameter changes, so a
/// non-finite gradient leaves both parameters and state untouched.
pub fn adam_step<F: Real>(store: &mut ParamStore<F>, state: &mut AdamState<F>) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::contract(format!(
            "optimizer holds {} moments for {} parameters",
            state.m.len(),
            store.len()
        )));
    }
    for (id, p) in store.iter() {
        if p.grad.shape() != state.m[id.index()].shape() {
            return Err(Error::contract(format!("moment shape mismatch for `{}`", p.name)));
        }
        if p.trainable && !p.grad.is_finite() {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (F::of(state.beta1), F::of(state.beta2));
    let (c1, c2) = (F::of(1.0 - state.beta1.powi(t)), F::of(1.0 - state.beta2.powi(t)));
    let (lr, eps) = (F::of(state.lr), F::of(state.eps));
    for (i, p) in store.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
            *m = b1 * *m + (F::one() - b1) * g;
            *v = b2 * *v + (F::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(w)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = store(1.5);
        let mut st = AdamState::new(&s, 0.1);
        adam_step(&mut s, &mut st).unwrap();
        assert_eq!(s.iter().next().unwrap().1.value.item().unwrap(), 1.5);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut s = store(2.0);
        s.iter_mut().next().unwrap().grad = Tensor::scalar(3.0);
        let mut st = AdamState::new(&s, 0.0);
        adam_step(&mut s, &mut st).unwrap();
        assert_eq!(s.iter().next().unwrap().1.value.item().unwrap(), 2.0);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut s = store(2.0);
        s.iter_mut().next().unwrap().grad = Tensor::scalar(f64::NAN);
        let mut st = AdamState::new(&s, 0.1);
        assert!(matches!(adam_step(&mut s, &mut st), Err(Error::NonFiniteGradient(n)) if n == "w"));
        assert_eq!(st.t, 0);
    }
}
