use crate::error::{invalid, Result};

/// Multinomial logistic regression on standardized features, fit by
/// full-batch gradient descent from zero weights.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    mean: Vec<f64>,
    std: Vec<f64>,
    weights: Vec<f64>,
    num_classes: usize,
    dim: usize,
}

pub const PROBE_STEPS: usize = 2000;
pub const PROBE_LR: f64 = 0.5;
pub const PROBE_L2: f64 = 1e-4;

impl LinearProbe {
    pub fn fit(features: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<Self> {
        let n = features.len();
        if n == 0 || n != labels.len() || num_classes == 0 {
            return Err(invalid("linear_probe", "empty or misaligned training set"));
        }
        let dim = features[0].len();
        if features.iter().any(|f| f.len() != dim) || labels.iter().any(|&l| l >= num_classes) {
            return Err(invalid("linear_probe", "inconsistent feature sizes or labels"));
        }
        let mean: Vec<f64> = (0..dim).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n as f64).collect();
        let std: Vec<f64> = (0..dim)
            .map(|j| {
                let v = features.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
                if v.sqrt() > 1e-12 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let mut probe = Self {
            mean,
            std,
            weights: vec![0.0; (dim + 1) * num_classes],
            num_classes,
            dim,
        };
        let xs: Vec<Vec<f64>> = features.iter().map(|f| probe.standardize(f)).collect();
        let k = num_classes;
        for _ in 0..PROBE_STEPS {
            let mut grad = vec![0.0; probe.weights.len()];
            for (x, &y) in xs.iter().zip(labels) {
                let p = probe.softmax(x);
                for c in 0..k {
                    let d = (p[c] - f64::from(c == y)) / n as f64;
                    for (j, xv) in x.iter().enumerate() {
                        grad[j * k + c] += d * xv;
                    }
                    grad[dim * k + c] += d;
                }
            }
            for (w, g) in probe.weights.iter_mut().zip(&grad) {
                *w -= PROBE_LR * (g + PROBE_L2 * *w);
            }
        }
        Ok(probe)
    }

    fn standardize(&self, f: &[f64]) -> Vec<f64> {
        f.iter().enumerate().map(|(j, v)| (v - self.mean[j]) / self.std[j]).collect()
    }

    fn softmax(&self, x: &[f64]) -> Vec<f64> {
        let k = self.num_classes;
        let mut z: Vec<f64> = (0..k)
            .map(|c| self.weights[self.dim * k + c] + x.iter().enumerate().map(|(j, v)| v * self.weights[j * k + c]).sum::<f64>())
            .collect();
        let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        z.iter_mut().for_each(|v| *v = (*v - mx).exp());
        let s: f64 = z.iter().sum();
        z.iter_mut().for_each(|v| *v /= s);
        z
    }

    /// Most probable class; ties go to the lowest id.
    pub fn predict(&self, features: &[f64]) -> usize {
        let p = self.softmax(&self.standardize(features));
        let mut best = 0;
        for c in 1..p.len() {
            if p[c] > p[best] {
                best = c;
            }
        }
        best
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> f64 {
        if features.is_empty() {
            return 0.0;
        }
        let hits = features.iter().zip(labels).filter(|(f, &l)| self.predict(f) == l).count();
        hits as f64 / features.len() as f64
    }
}
