use std::collections::{BTreeMap, HashMap};

use crate::error::{NnError, Result};
use crate::graph::Gradients;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stochastic gradient descent with classical momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    params: Vec<ParamId>,
    velocity: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(params: Vec<ParamId>, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd { lr, momentum, weight_decay, params, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        let lr = T::from_f64_lossy(self.lr);
        let mom = T::from_f64_lossy(self.momentum);
        let wd = T::from_f64_lossy(self.weight_decay);
        for &id in &self.params {
            let Some(g) = grads.param(id) else { continue };
            let p = store.param(id);
            let mut d = g.clone();
            if self.weight_decay != 0.0 {
                d.add_scaled(p, wd);
            }
            let v = self.velocity.entry(id).or_insert_with(|| Tensor::zeros(p.shape()));
            for (vv, &dd) in v.data_mut().iter_mut().zip(d.data()) {
                *vv = *vv * mom + dd;
            }
            let v = v.clone();
            store.param_mut(id).add_scaled(&v, -lr);
        }
    }

    pub fn state_tensors(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        self.velocity.iter().map(|(id, t)| (format!("sgd.velocity:{}", store.param_name(*id)), t.clone())).collect()
    }

    pub fn load_state(&mut self, store: &ParamStore<T>, named: &HashMap<String, Tensor<T>>) {
        self.velocity.clear();
        for &id in &self.params {
            if let Some(t) = named.get(&format!("sgd.velocity:{}", store.param_name(id))) {
                self.velocity.insert(id, t.clone());
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    params: Vec<ParamId>,
    step: u64,
    m: BTreeMap<ParamId, Tensor<T>>,
    v: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: Vec<ParamId>, lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam { lr, beta1, beta2, eps: 1e-8, params, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let step_size = T::from_f64_lossy(self.lr / c1);
        let c2s = T::from_f64_lossy(c2.sqrt());
        let (b1t, b2t) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
        let eps = T::from_f64_lossy(self.eps);
        for &id in &self.params {
            let Some(g) = grads.param(id) else { continue };
            let shape = store.param(id).shape().to_vec();
            let m = self.m.entry(id).or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v.entry(id).or_insert_with(|| Tensor::zeros(&shape));
            let p = store.param_mut(id).data_mut();
            for (((pp, mm), vv), &gg) in
                p.iter_mut().zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut()).zip(g.data())
            {
                *mm = b1t * *mm + (T::one() - b1t) * gg;
                *vv = b2t * *vv + (T::one() - b2t) * gg * gg;
                let denom = vv.sqrt() / c2s + eps;
                *pp = *pp - step_size * *mm / denom;
            }
        }
    }

    pub fn state_tensors(&self, store: &ParamStore<T>, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![(format!("{prefix}.step"), Tensor::scalar(T::from_f64_lossy(self.step as f64)))];
        for (id, t) in &self.m {
            out.push((format!("{prefix}.m:{}", store.param_name(*id)), t.clone()));
        }
        for (id, t) in &self.v {
            out.push((format!("{prefix}.v:{}", store.param_name(*id)), t.clone()));
        }
        out
    }

    pub fn load_state(
        &mut self,
        store: &ParamStore<T>,
        prefix: &str,
        named: &HashMap<String, Tensor<T>>,
    ) -> Result<()> {
        let step =
            named.get(&format!("{prefix}.step")).ok_or_else(|| NnError::UnknownName(format!("{prefix}.step")))?;
        self.step = step.item().as_f64() as u64;
        self.m.clear();
        self.v.clear();
        for &id in &self.params {
            let name = store.param_name(id);
            if let Some(t) = named.get(&format!("{prefix}.m:{name}")) {
                self.m.insert(id, t.clone());
            }
            if let Some(t) = named.get(&format!("{prefix}.v:{name}")) {
                self.v.insert(id, t.clone());
            }
        }
        Ok(())
    }
}
