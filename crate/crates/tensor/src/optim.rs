use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// ADAM moments and hyperparameters. `m` and `v` follow the store's
/// parameter order and are allocated on the first step.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn ensure_moments(&mut self, store: &ParamStore) {
        if self.m.len() != store.len() {
            self.m = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
            self.v = self.m.clone();
        }
    }
}

/// One bias-corrected ADAM update with learning rate `lr` (the schedule's
/// value for this step). Non-trainable parameters and their moments are left
/// untouched.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    for p in store.iter_mut() {
        if p.trainable && p.grad.is_none() {
            return Err(TensorError::MissingGradient(p.name.clone()));
        }
    }
    state.ensure_moments(store);
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if !p.trainable {
            continue;
        }
        let g = p.grad.as_ref().expect("checked above").data();
        let w = p.value.data_mut();
        let (m, v) = (m.data_mut(), v.data_mut());
        for i in 0..w.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales the gradient buffers so their joint L2 norm does not exceed
/// `threshold`. Returns the norm before clipping.
pub fn clip_by_global_norm<'a>(grads: impl IntoIterator<Item = &'a mut [f64]>, threshold: f64) -> f64 {
    let mut bufs: Vec<&mut [f64]> = grads.into_iter().collect();
    let norm = bufs
        .iter()
        .map(|b| b.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > threshold && norm > 0.0 {
        let s = threshold / norm;
        for b in bufs.iter_mut() {
            b.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// [`clip_by_global_norm`] over every gradient held in `store`.
pub fn clip_gradients(store: &mut ParamStore, threshold: f64) -> f64 {
    clip_by_global_norm(
        store
            .iter_mut()
            .filter_map(|p| p.grad.as_mut().map(|g| g.data_mut())),
        threshold,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(value)).unwrap();
        s.get_mut(id).grad = Some(Tensor::scalar(grad));
        s
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = store_with(1.5, 0.0);
        let mut st = AdamState::new(0.001);
        adam_step(&mut s, &mut st, 0.001).unwrap();
        assert_eq!(s.value(crate::ParamId(0)).item(), 1.5);
        assert_eq!(st.v[0].item(), 0.0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let mut s = store_with(0.0, 0.5);
        let mut st = AdamState::new(0.001);
        adam_step(&mut s, &mut st, 0.001).unwrap();
        let expected = -0.001 * 0.5 / (0.5 + 1e-8);
        assert!((s.value(crate::ParamId(0)).item() - expected).abs() < 1e-15);
        assert!((s.value(crate::ParamId(0)).item() + 0.001).abs() < 1e-10);
    }

    #[test]
    fn two_steps_descend_a_quadratic() {
        // loss = (w - 3)^2, gradient 2(w - 3)
        let mut s = store_with(0.0, 0.0);
        let mut st = AdamState::new(0.1);
        let id = crate::ParamId(0);
        let mut last_loss = 9.0;
        for _ in 0..2 {
            let w = s.value(id).item();
            s.get_mut(id).grad = Some(Tensor::scalar(2.0 * (w - 3.0)));
            adam_step(&mut s, &mut st, 0.1).unwrap();
            let w = s.value(id).item();
            let loss = (w - 3.0) * (w - 3.0);
            assert!(loss < last_loss);
            last_loss = loss;
        }
        assert_eq!(st.step, 2);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut s = store_with(2.0, 1.0);
        s.get_mut(crate::ParamId(0)).trainable = false;
        let mut st = AdamState::new(0.001);
        adam_step(&mut s, &mut st, 0.001).unwrap();
        assert_eq!(s.value(crate::ParamId(0)).item(), 2.0);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = ParamStore::new();
        s.add("enc/w", Tensor::scalar(1.0)).unwrap();
        let err = adam_step(&mut s, &mut AdamState::new(0.001), 0.001).unwrap_err();
        assert_eq!(err, TensorError::MissingGradient("enc/w".into()));
    }

    #[test]
    fn clipping_examples() {
        let mut g = vec![3.0, 0.0, 0.0];
        assert_eq!(clip_by_global_norm([g.as_mut_slice()], 4.0), 3.0);
        assert_eq!(g, vec![3.0, 0.0, 0.0]);

        let mut g = vec![8.0, 0.0, 0.0];
        clip_by_global_norm([g.as_mut_slice()], 4.0);
        assert_eq!(g, vec![4.0, 0.0, 0.0]);

        let (mut a, mut b) = (vec![3.0, 0.0], vec![0.0, 4.0]);
        let n = clip_by_global_norm([a.as_mut_slice(), b.as_mut_slice()], 4.0);
        assert_eq!(n, 5.0);
        assert!((a[0] - 2.4).abs() < 1e-15 && (b[1] - 3.2).abs() < 1e-15);

        let mut z = vec![0.0; 4];
        assert_eq!(clip_by_global_norm([z.as_mut_slice()], 4.0), 0.0);
    }
}
