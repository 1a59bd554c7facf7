use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with a hierarchical name such as `fpn.lateral.2.weight`.
#[derive(Clone, Debug)]
pub struct Parameter<T = f64> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    /// Momentum buffer, created on the first optimizer step.
    pub velocity: Option<Tensor<T>>,
    /// Number of call sites that read this parameter in one forward pass.
    pub shared_ref_count: usize,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f64> {
    params: Vec<Parameter<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            grad: None,
            velocity: None,
            shared_ref_count: 1,
        });
        Ok(id)
    }

    /// He-normal initialised conv weight `[cout, cin, k, k]`.
    pub fn insert_conv_weight<R: Rng>(
        &mut self,
        name: impl Into<String>,
        cout: usize,
        cin: usize,
        k: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, gain * (2.0 / fan_in).sqrt()).expect("positive std");
        let t = Tensor::from_fn(&[cout, cin, k, k], |_| T::from_f64_lossy(normal.sample(rng)));
        self.insert(name, t)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn set_shared_ref_count(&mut self, id: ParamId, count: usize) {
        self.params[id.0].shared_ref_count = count.max(1);
    }

    /// Add `grad` into the accumulated gradient of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.tensor.shape() != grad.shape() {
            return Err(Error::invariant(format!(
                "gradient for `{}` has shape {:?}, parameter is {:?}",
                p.name,
                grad.shape(),
                p.tensor.shape()
            )));
        }
        match p.grad.as_mut() {
            Some(g) => g.add_assign(grad),
            None => p.grad = Some(grad.clone()),
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Multiply every accumulated gradient by `s`.
    pub fn scale_grads(&mut self, s: T) {
        for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }
}

/// SGD with classical momentum and optional L2 weight decay:
/// `v ← μ·v + (g + λ·w)`, `w ← w − lr·v`.
#[derive(Clone, Copy, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    /// Apply one update to every parameter and clear the gradients.
    ///
    /// Fails without touching anything when some parameter has no gradient.
    pub fn step<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if let Some(p) = store.params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::contract(format!(
                "sgd step: parameter `{}` has no gradient",
                p.name
            )));
        }
        let lr = T::from_f64_lossy(self.lr);
        let mu = T::from_f64_lossy(self.momentum);
        let wd = T::from_f64_lossy(self.weight_decay);
        for p in &mut store.params {
            let g = p.grad.take().expect("checked above");
            let v = p.velocity.get_or_insert_with(|| Tensor::zeros(p.tensor.shape()));
            for ((w, vel), &gi) in p.tensor.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vel = mu * *vel + gi + wd * *w;
                *w = *w - lr * *vel;
            }
        }
        Ok(())
    }
}

/// One plain momentum-SGD step without weight decay.
pub fn sgd_step<T: Real>(store: &mut ParamStore<T>, lr: f64, momentum: f64) -> Result<()> {
    Sgd {
        lr,
        momentum,
        weight_decay: 0.0,
    }
    .step(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64, g: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::from_f64(&[1], &[w]).unwrap()).unwrap();
        s.accumulate_grad(id, &Tensor::from_f64(&[1], &[g]).unwrap()).unwrap();
        (s, id)
    }

    #[test]
    fn zero_lr_leaves_params() {
        let (mut s, id) = single(0.7, 3.0);
        sgd_step(&mut s, 0.0, 0.9).unwrap();
        assert_eq!(s.get(id).tensor.data(), &[0.7]);
        assert!(s.get(id).grad.is_none());
    }

    #[test]
    fn unit_lr_subtracts_grad() {
        let (mut s, id) = single(0.5, 0.25);
        sgd_step(&mut s, 1.0, 0.0).unwrap();
        assert_eq!(s.get(id).tensor.data(), &[0.25]);
    }

    #[test]
    fn quadratic_step() {
        // f(w) = w², w = 1, grad 2w = 2, lr 0.1 → 0.8
        let (mut s, id) = single(1.0, 2.0);
        sgd_step(&mut s, 0.1, 0.0).unwrap();
        assert!((s.get(id).tensor.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut s: ParamStore = ParamStore::new();
        s.insert("a", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(sgd_step(&mut s, 0.1, 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s: ParamStore = ParamStore::new();
        s.insert("a", Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[2])).is_err());
    }
}
