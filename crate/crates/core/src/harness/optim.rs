use crate::tensor::ParamStore;

/// AdamW with decoupled weight decay applied to matrices and kernels only.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Updates every parameter whose name passes `trainable`, using the
    /// gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore, trainable: impl Fn(&str) -> bool) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in store.iter_mut().enumerate() {
            if !trainable(&p.name) {
                continue;
            }
            let decay = if p.value.shape().len() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grad = &p.grad;
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let gj = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                *w -= self.lr * (update + decay * *w);
            }
        }
    }
}
