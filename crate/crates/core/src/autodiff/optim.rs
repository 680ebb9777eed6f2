use crate::autodiff::params::{Gradients, ParamStore};
use crate::scalar::Scalar;

/// Adam with bias-corrected moments. Frozen parameters are skipped entirely,
/// moments included.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<S>>,
    second: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &Gradients<S>) {
        if self.first.len() != store.len() {
            self.first = store.iter().map(|(_, _, v)| vec![S::zero(); v.numel()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let b1 = S::from_f64_lossy(self.beta1);
        let b2 = S::from_f64_lossy(self.beta2);
        let one = S::one();
        let c1 = one - S::from_f64_lossy(self.beta1.powi(self.step as i32));
        let c2 = one - S::from_f64_lossy(self.beta2.powi(self.step as i32));
        let lr = S::from_f64_lossy(self.lr);
        let eps = S::from_f64_lossy(self.eps);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.is_frozen(id) {
                continue;
            }
            let g = grads.get(id).data();
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            let p = store.value_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
