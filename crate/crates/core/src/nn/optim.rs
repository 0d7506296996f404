use super::params::{Gradients, ParamStore};

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Plain gradient descent, `p -= lr * g`.
pub fn sgd_step(store: &mut ParamStore, grads: &Gradients, lr: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if let Some(g) = grads.get(id) {
            let p = store.get_mut(id).data_mut();
            p.iter_mut().zip(g.data()).for_each(|(p, g)| *p -= lr * g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Graph, Tensor};

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::row(vec![3.0, -2.0]));
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let grads = {
                let mut g = Graph::new(&store);
                let xv = g.param(x);
                let sq = g.matmul_nt(xv, xv);
                g.backward(sq)
            };
            opt.step(&mut store, &grads);
        }
        assert!(store.get(x).norm() < 1e-2);
        assert_eq!(opt.steps(), 500);
    }

    #[test]
    fn zero_learning_rate_is_bit_exact_noop() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::row(vec![0.25, -1.5, 0.0]));
        let before = store.get(x).clone();
        let mut opt = Adam::new(&store, 0.0);
        let grads = {
            let mut g = Graph::new(&store);
            let xv = g.param(x);
            let s = g.sum_all(xv);
            g.backward(s)
        };
        opt.step(&mut store, &grads);
        assert_eq!(store.get(x), &before);
    }
}
