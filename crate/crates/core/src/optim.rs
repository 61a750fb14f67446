use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;

/// First/second-moment optimizer over a fixed list of tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_tensors(lr: f64, tensors: &[Tensor]) -> Self {
        Self::new(lr, tensors.iter().map(Tensor::numel))
    }

    /// Returns updated copies of `params`.
    pub fn step(&mut self, params: &[Tensor], grads: &[Tensor]) -> Vec<Tensor> {
        assert_eq!(params.len(), self.m.len(), "optimizer group size");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        params
            .iter()
            .zip(grads)
            .enumerate()
            .map(|(i, (p, g))| {
                let (m, v) = (&mut self.m[i], &mut self.v[i]);
                let data = p
                    .data()
                    .iter()
                    .zip(g.data())
                    .enumerate()
                    .map(|(j, (&x, &gj))| {
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        x - self.lr * mh / (vh.sqrt() + self.eps)
                    })
                    .collect();
                Tensor::new(p.shape().to_vec(), data).expect("same shape")
            })
            .collect()
    }
}

/// Plain gradient descent: `p - lr * g`.
pub fn sgd_step(params: &[Tensor], grads: &[Tensor], lr: f64) -> Vec<Tensor> {
    params
        .iter()
        .zip(grads)
        .map(|(p, g)| p.zip_map(g, |x, gx| x - lr * gx).expect("same shape"))
        .collect()
}
