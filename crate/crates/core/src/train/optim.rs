//! SGD with momentum and decoupled-from-bias weight decay.

use findkit_autograd::{ParamGrads, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    /// One buffer per parameter, same order as the store.
    pub velocity: Vec<Tensor<f32>>,
}

impl Sgd {
    pub fn new(params: &ParamStore<f32>, momentum: f64, weight_decay: f64) -> Self {
        let velocity = params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Sgd { momentum, weight_decay, velocity }
    }

    /// `v ← μv + g + λw` (λ only where the parameter decays), `w ← w − lr·mult·v`.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &ParamGrads<f32>, lr: f64, mult: impl Fn(&str) -> f64) {
        let mu = self.momentum as f32;
        for ((id, p), v) in params.iter_mut().zip(&mut self.velocity) {
            let wd = if p.decay { self.weight_decay as f32 } else { 0.0 };
            let step = (lr * mult(&p.group)) as f32;
            let g = grads.get(id);
            let w = p.value.data_mut();
            for (i, (vi, wi)) in v.data_mut().iter_mut().zip(w.iter_mut()).enumerate() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                *vi = mu * *vi + gi + wd * *wi;
                *wi -= step * *vi;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_accumulates() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", "g", false, Tensor::from_vec(&[1], vec![1.0]));
        let mut grads = ParamGrads::zeros_like(&store);
        grads.accumulate(&{
            let mut g = ParamGrads::empty(1);
            g.set(id, Tensor::from_vec(&[1], vec![1.0]));
            g
        });
        let mut opt = Sgd::new(&store, 0.5, 0.0);
        opt.step(&mut store, &grads, 0.1, |_| 1.0);
        opt.step(&mut store, &grads, 0.1, |_| 1.0);
        // v1 = 1, v2 = 1.5; w = 1 - 0.1 - 0.15
        assert!((store.value(id).data()[0] - 0.75).abs() < 1e-6);
    }
}
