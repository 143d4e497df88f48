//! Root-mean-square gradient scaling (decay 0.99, no momentum).

use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct RmsProp {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    cache: Vec<Tensor>,
}

impl RmsProp {
    pub fn new(lr: f64) -> Self {
        RmsProp {
            lr,
            decay: 0.99,
            eps: 1e-8,
            cache: Vec::new(),
        }
    }

    /// Applies one step in place. The parameter and gradient lists
    /// must keep a stable order across calls.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "param/grad count mismatch");
        if self.cache.is_empty() {
            self.cache = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        for (i, p) in params.iter_mut().enumerate() {
            let g = &grads[i];
            let c = &mut self.cache[i];
            for (k, gv) in g.data().iter().enumerate() {
                let cv = self.decay * c.data()[k] + (1.0 - self.decay) * gv * gv;
                c.data_mut()[k] = cv;
                p.data_mut()[k] -= self.lr * gv / (cv.sqrt() + self.eps);
            }
        }
    }
}
