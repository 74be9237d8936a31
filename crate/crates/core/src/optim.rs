//! First-order optimizers over a [`ParamStore`].

use std::collections::BTreeMap;

use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub type Grads = BTreeMap<String, Tensor>;

/// Adds `from` into `into`, creating entries as needed.
pub fn accumulate(into: &mut Grads, from: &Grads) {
    for (k, g) in from {
        match into.get_mut(k) {
            Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
            None => {
                into.insert(k.clone(), g.clone());
            }
        }
    }
}

pub fn scale_grads(grads: &mut Grads, c: f64) {
    for g in grads.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= c);
    }
}

/// Rescales so the global L2 norm is at most `max_norm`; returns the norm before.
pub fn clip_grad_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        scale_grads(grads, max_norm / norm);
    }
    norm
}

/// SGD with classical momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Grads,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Grads::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) {
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv + self.weight_decay * *pv;
                *pv -= self.lr * *vv;
            }
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Grads,
    v: Grads,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Grads::new(),
            v: Grads::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let update = (*mv / bc1) / ((*vv / bc2).sqrt() + self.eps);
                *pv -= self.lr * (update + self.weight_decay * *pv);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_grad(p: &ParamStore) -> Grads {
        let x = p.get("x").unwrap();
        let mut g = Grads::new();
        g.insert("x".into(), x.map(|v| 2.0 * (v - 3.0)));
        g
    }

    #[test]
    fn sgd_and_adamw_minimize_quadratic() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::new(&[2], vec![0.0, 10.0]).unwrap());
        let mut q = p.clone();
        let mut sgd = Sgd::new(0.05, 0.9, 0.0);
        let mut adam = AdamW::new(0.1, 0.0);
        for _ in 0..500 {
            let g = quadratic_grad(&p);
            sgd.step(&mut p, &g);
            let g = quadratic_grad(&q);
            adam.step(&mut q, &g);
        }
        for v in p.get("x").unwrap().data().iter().chain(q.get("x").unwrap().data()) {
            assert!((v - 3.0).abs() < 1e-2, "{v}");
        }
    }

    #[test]
    fn accumulate_and_clip() {
        let mut a = Grads::new();
        let mut b = Grads::new();
        b.insert("w".into(), Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
        accumulate(&mut a, &b);
        accumulate(&mut a, &b);
        assert_eq!(a["w"].data(), &[6.0, 8.0]);
        assert_eq!(clip_grad_norm(&mut a, 5.0), 10.0);
        assert_eq!(a["w"].data(), &[3.0, 4.0]);
    }
}
