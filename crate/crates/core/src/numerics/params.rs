use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{FbsError, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named trainable array with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named parameters of one model; names are unique.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(FbsError::invalid(format!("duplicate parameter name {name}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Gaussian init with the given standard deviation.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        // `+ 0.0` keeps zero-std draws at positive zero
        let data = (0..n).map(|_| std * standard_normal(rng) + 0.0).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(FbsError::Shape(format!(
                "{}: {:?} vs {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Parameters in lexicographic name order.
    pub fn sorted(&self) -> Vec<&Parameter> {
        let mut v: Vec<&Parameter> = self.params.iter().collect();
        v.sort_by(|a, b| a.name.cmp(&b.name));
        v
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// `value -= lr · grad` for every parameter accepted by `filter`.
    pub fn sgd_step(&mut self, lr: f64, filter: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            if !filter(&p.name) {
                continue;
            }
            let g = p.grad.data().to_vec();
            for (v, g) in p.value.data_mut().iter_mut().zip(g) {
                *v -= lr * g;
            }
        }
    }

    pub fn scale_grads(&mut self, c: f64) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= c);
        }
    }
}

/// Lazily maps parameters onto leaves of one graph.
pub struct Binder {
    vars: Vec<Option<Var>>,
    trainable: Vec<bool>,
}

impl Binder {
    /// Every parameter is differentiable.
    pub fn new(store: &ParamStore) -> Self {
        Self {
            vars: vec![None; store.len()],
            trainable: vec![true; store.len()],
        }
    }

    /// Only parameters whose name passes `filter` receive gradients.
    pub fn with_filter(store: &ParamStore, filter: impl Fn(&str) -> bool) -> Self {
        Self {
            vars: vec![None; store.len()],
            trainable: store.params.iter().map(|p| filter(&p.name)).collect(),
        }
    }

    /// Bind nothing as trainable (inference-only pass on the tape).
    pub fn frozen(store: &ParamStore) -> Self {
        Self::with_filter(store, |_| false)
    }

    pub fn var(&mut self, g: &mut Graph, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = g.leaf(store.value(id).clone(), self.trainable[id.0]);
        self.vars[id.0] = Some(v);
        v
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }

    /// Adds gradients from `grads` into the store's gradient slots.
    pub fn accumulate(&self, store: &mut ParamStore, grads: &Gradients) {
        for (i, v) in self.vars.iter().enumerate() {
            let Some(v) = v else { continue };
            if !self.trainable[i] {
                continue;
            }
            if let Some(g) = grads.raw(*v) {
                let p = &mut store.params[i];
                for (a, b) in p.grad.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }
}

pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
}
