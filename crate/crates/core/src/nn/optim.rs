use super::graph::Gradients;
use super::layers::{Bound, ParamStore};
use super::tensor::{Real, Tensor};

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    /// Moment and decay constants default to (0.9, 0.999), 1e-8 and 0.01.
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            step: 0,
            m: store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (ib1, ib2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let decay = T::lit(1.0 - self.lr * self.weight_decay);
        let step_size = T::lit(self.lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let eps = T::lit(self.eps);
        for (((p, g), m), v) in store
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let Some(g) = g else { continue };
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *pv *= decay;
                *mv = b1 * *mv + ib1 * gv;
                *vv = b2 * *vv + ib2 * gv * gv;
                let denom = vv.sqrt() / bc2_sqrt + eps;
                *pv -= step_size * *mv / denom;
            }
        }
    }
}

/// Pulls the gradients of a bound store out of `grads`, one slot per
/// parameter.
pub fn collect_grads<T: Real>(grads: &mut Gradients<T>, bound: &Bound) -> Vec<Option<Tensor<T>>> {
    bound.vars().iter().map(|&v| grads.take(v)).collect()
}

/// Rescales gradients in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [&mut [Option<Tensor<T>>]], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .flat_map(|set| set.iter())
        .flatten()
        .map(|g| g.sq_norm())
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total.is_finite() {
        let s = T::lit(max_norm / (total + 1e-6));
        for set in grads.iter_mut() {
            for g in set.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    total
}
