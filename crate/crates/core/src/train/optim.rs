//! AdamW with decoupled weight decay.

use crate::checkpoint::OptimizerState;
use crate::config::TrainSection;
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub state: OptimizerState<T>,
}

impl<T: Element> AdamW<T> {
    pub fn new(t: &TrainSection, params: &ParamStore<T>) -> Self {
        let zeros = || params.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamW {
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            weight_decay: t.weight_decay,
            state: OptimizerState {
                step: 0,
                m: zeros(),
                v: zeros(),
            },
        }
    }

    /// One update. Weight decay applies to matrices and kernels (rank >= 2)
    /// only; biases, norm gains and the state-space vectors are not decayed.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for id in params.ids().collect::<Vec<_>>() {
            let i = id.index();
            let Some(g) = &grads[i] else { continue };
            if params.spec(id).kind != ParamKind::Weight {
                continue;
            }
            let decay = if params.get(id).rank() >= 2 {
                lr * self.weight_decay
            } else {
                0.0
            };
            let (m, v) = (&mut self.state.m[i], &mut self.state.v[i]);
            let p = params.get_mut(id);
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                let g = g.f64();
                let mn = b1 * m.f64() + (1.0 - b1) * g;
                let vn = b2 * v.f64() + (1.0 - b2) * g * g;
                *m = T::of(mn);
                *v = T::of(vn);
                let x = p.f64();
                let update = (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *p = T::of(x - decay * x - lr * update);
            }
        }
    }
}
