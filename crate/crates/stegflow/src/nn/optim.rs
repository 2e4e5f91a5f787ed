//! Decoupled-weight-decay Adam with global gradient-norm clipping.

use super::{ParamId, ParamStore};
use crate::autodiff::Scalar;
use ndarray::ArrayD;

pub struct AdamW<T: Scalar> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Option<ArrayD<T>>>,
    v: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(betas: (f64, f64), weight_decay: f64, clip_norm: Option<f64>) -> Self {
        AdamW {
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            clip_norm,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over `(param slot, gradient)` pairs. Parameters without a
    /// gradient are untouched: a component that did not participate in the
    /// forward pass must not drift, not even by weight decay.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[(usize, ArrayD<T>)],
        lr: f64,
    ) {
        if self.m.len() < store.len() {
            self.m.resize_with(store.len(), || None);
            self.v.resize_with(store.len(), || None);
        }
        self.step += 1;
        let t = self.step as i32;

        let scale = match self.clip_norm {
            Some(limit) => {
                let total: f64 = grads
                    .iter()
                    .map(|(_, g)| g.iter().map(|v| v.to_f() * v.to_f()).sum::<f64>())
                    .sum();
                let norm = total.sqrt();
                if norm > limit {
                    limit / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        let b1 = T::from_f(self.beta1);
        let b2 = T::from_f(self.beta2);
        let one = T::one();
        let eps = T::from_f(self.eps);
        let bc1 = T::from_f(1.0 - self.beta1.powi(t));
        let bc2 = T::from_f(1.0 - self.beta2.powi(t));
        let lr_t = T::from_f(lr);
        let wd = T::from_f(lr * self.weight_decay);
        let gscale = T::from_f(scale);

        for (slot, grad) in grads {
            let id = ParamId(*slot);
            let g = grad * gscale;
            let m = self.m[*slot].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self.v[*slot].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            azip_update(m, &g, |m, g| b1 * m + (one - b1) * g);
            azip_update(v, &g, |v, g| b2 * v + (one - b2) * g * g);
            let (m, v) = (&self.m[*slot], &self.v[*slot]);
            let (m, v) = (m.as_ref().unwrap(), v.as_ref().unwrap());
            store.update(id, |p| {
                ndarray::Zip::from(p)
                    .and(m)
                    .and(v)
                    .for_each(|p, &m, &v| {
                        let mhat = m / bc1;
                        let vhat = v / bc2;
                        *p = *p - lr_t * (mhat / (vhat.sqrt() + eps)) - wd * *p;
                    });
            });
        }
    }

    /// Optimizer state for checkpointing, in parameter-slot order.
    pub fn state(&self) -> (u64, &[Option<ArrayD<T>>], &[Option<ArrayD<T>>]) {
        (self.step, &self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Option<ArrayD<T>>>, v: Vec<Option<ArrayD<T>>>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }
}

fn azip_update<T: Scalar>(dst: &mut ArrayD<T>, src: &ArrayD<T>, f: impl Fn(T, T) -> T) {
    ndarray::Zip::from(dst).and(src).for_each(|d, &s| *d = f(*d, s));
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn zero_lr_leaves_parameters_bitwise_identical() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("p", arr1(&[1.0f32, -2.0, 3.0]).into_dyn());
        let before = store.value(id).clone();
        let mut opt = AdamW::new((0.9, 0.999), 0.01, Some(5.0));
        opt.step(&mut store, &[(0, arr1(&[0.5f32, 0.5, 0.5]).into_dyn())], 0.0);
        assert_eq!(store.value(id), &before);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", arr1(&[5.0f64]).into_dyn());
        let mut opt = AdamW::new((0.9, 0.999), 0.0, None);
        for _ in 0..600 {
            let x = store.value(id)[[0]];
            let g = arr1(&[2.0 * x]).into_dyn();
            opt.step(&mut store, &[(0, g)], 0.05);
        }
        assert!(store.value(id)[[0]].abs() < 1e-2);
    }

    #[test]
    fn params_without_grads_untouched() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", arr1(&[1.0f64]).into_dyn());
        let b = store.add("b", arr1(&[1.0f64]).into_dyn());
        let mut opt = AdamW::new((0.9, 0.999), 0.1, None);
        opt.step(&mut store, &[(0, arr1(&[1.0f64]).into_dyn())], 0.1);
        assert_ne!(store.value(a)[[0]], 1.0);
        assert_eq!(store.value(b)[[0]], 1.0);
    }

    #[test]
    fn clipping_bounds_the_update_norm() {
        let mut store = ParamStore::<f64>::new();
        store.add("p", arr1(&[0.0f64, 0.0]).into_dyn());
        let mut opt = AdamW::new((0.0, 0.0), 0.0, Some(1.0));
        // With beta1=beta2=0 the update is lr * g_clipped / (|g_clipped| + eps) elementwise.
        let huge = arr1(&[300.0f64, 400.0]).into_dyn();
        opt.step(&mut store, &[(0, huge)], 1.0);
        let p = store.value(ParamId(0));
        // Clipped gradient has norm 1: components 0.6/0.8 -> update ~ (-1, -1) sign-wise
        assert!((p[[0]] + 1.0).abs() < 1e-6 && (p[[1]] + 1.0).abs() < 1e-6);
    }
}
