//! Adam with bias correction, honoring per-tensor trainability flags.

use crate::scalar::Scalar;
use crate::tensor::ParamStore;

#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64, params: &ParamStore<S>) -> Self {
        let m = params.iter().map(|(_, t)| vec![S::zero(); t.numel()]).collect();
        let v = params.iter().map(|(_, t)| vec![S::zero(); t.numel()]).collect();
        Adam {
            lr: S::from_f64c(lr),
            beta1: S::from_f64c(0.9),
            beta2: S::from_f64c(0.999),
            eps: S::from_f64c(1e-8),
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update from the gradients currently held in `params`. Frozen
    /// tensors are left bit-identical, moments included.
    pub fn step(&mut self, params: &mut ParamStore<S>) {
        self.step += 1;
        let bc1 = S::one() - self.beta1.powi(self.step as i32);
        let bc2 = S::one() - self.beta2.powi(self.step as i32);
        for (idx, id) in params.ids().enumerate() {
            let t = params.get_mut(id);
            if !t.requires_grad() {
                continue;
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let n = t.numel();
            for i in 0..n {
                let g = t.grad()[i];
                m[i] = self.beta1 * m[i] + (S::one() - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (S::one() - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                t.values_mut()[i] = t.values()[i] - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn one_step_hand_calculation() {
        // p = 1, grad = 1, lr = 0.1: bias-corrected m_hat = v_hat = 1,
        // so p' = 1 - 0.1 * 1 / (1 + 1e-8) ~= 0.9.
        let mut ps: ParamStore<f64> = ParamStore::new();
        let id = ps.add("p", Tensor::new(vec![1], vec![1.0]).unwrap());
        ps.get_mut(id).grad_mut()[0] = 1.0;
        let mut opt = Adam::new(0.1, &ps);
        opt.step(&mut ps);
        let p = ps.get(id).values()[0];
        assert!((p - 0.9).abs() < 1e-6, "got {p}");
    }

    #[test]
    fn frozen_tensor_is_untouched() {
        let mut ps: ParamStore<f32> = ParamStore::new();
        let id = ps.add("frozen", Tensor::new(vec![2], vec![1.5, -2.5]).unwrap());
        ps.get_mut(id).set_requires_grad(false);
        ps.get_mut(id).grad_mut().copy_from_slice(&[10.0, -10.0]);
        let before = ps.get(id).values().to_vec();
        let mut opt = Adam::new(0.1, &ps);
        opt.step(&mut ps);
        opt.step(&mut ps);
        assert_eq!(
            before.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            ps.get(id).values().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn zero_grad_means_no_motion() {
        let mut ps: ParamStore<f32> = ParamStore::new();
        let id = ps.add("p", Tensor::new(vec![3], vec![0.5, 1.0, -1.0]).unwrap());
        let before = ps.get(id).values().to_vec();
        let mut opt = Adam::new(0.1, &ps);
        opt.step(&mut ps);
        assert_eq!(before, ps.get(id).values());
    }
}
