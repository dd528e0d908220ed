//! AdamW: Adam with decoupled weight decay.

use crate::nn::ParamSet;
use crate::tape::Arr;

pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
        }
    }

    /// One update over every trainable slot that received a gradient.
    /// Frozen slots are untouched, bit for bit.
    pub fn step(&mut self, pset: &mut ParamSet) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in pset.ids().collect::<Vec<_>>() {
            if !pset.is_trainable(id) || pset.grad(id).is_none() {
                continue;
            }
            let (value, grad, m_slot, v_slot) = pset.adam_state(id);
            let m = m_slot.get_or_insert_with(|| Arr::zeros(value.raw_dim()));
            let v = v_slot.get_or_insert_with(|| Arr::zeros(value.raw_dim()));
            m.zip_mut_with(grad, |mv, &gv| *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv);
            v.zip_mut_with(grad, |vv, &gv| {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv
            });
            ndarray::Zip::from(&mut *value).and(&*m).and(&*v).for_each(|p, &mv, &vv| {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *p -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *p);
            });
        }
        pset.zero_grads();
    }
}
