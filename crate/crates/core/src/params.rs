//! Named parameter tensors and batch-norm statistics of a model.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::RunningStats;
use crate::tensor::{Real, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct Param<F: Real> {
    pub name: String,
    pub value: Tensor<F>,
    /// Receives decoupled weight decay.
    pub decay: bool,
}

#[derive(Clone, Debug)]
pub struct BnStats<F: Real> {
    pub name: String,
    pub stats: RunningStats<F>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<F: Real> {
    pub params: Vec<Param<F>>,
    pub bn: Vec<BnStats<F>>,
}

/// Handles to the pieces of one batch-norm layer.
#[derive(Clone, Copy, Debug)]
pub struct BnIds {
    pub gamma: usize,
    pub beta: usize,
    pub stats: usize,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            bn: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>, decay: bool) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
            decay,
        });
        self.params.len() - 1
    }

    /// Weight drawn from a normal distribution truncated at two standard
    /// deviations.
    pub fn add_trunc_normal(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut impl Rng) -> usize {
        let value = trunc_normal(shape, INIT_STD, rng);
        self.add(name, value, true)
    }

    pub fn add_bn(&mut self, prefix: &str, channels: usize) -> BnIds {
        let gamma = self.add(format!("{prefix}.weight"), Tensor::ones(&[channels]), false);
        let beta = self.add(format!("{prefix}.bias"), Tensor::zeros(&[channels]), false);
        self.bn.push(BnStats {
            name: prefix.to_string(),
            stats: RunningStats::new(channels),
        });
        BnIds {
            gamma,
            beta,
            stats: self.bn.len() - 1,
        }
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Every parameter and running statistic as `(name, tensor)` pairs, in
    /// a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<F>)> {
        let mut out: Vec<(String, Tensor<F>)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        for b in &self.bn {
            let c = b.stats.channels();
            out.push((
                format!("{}.running_mean", b.name),
                Tensor::new(&[c], b.stats.mean.clone()).expect("stats shape"),
            ));
            out.push((
                format!("{}.running_var", b.name),
                Tensor::new(&[c], b.stats.var.clone()).expect("stats shape"),
            ));
            out.push((
                format!("{}.updates", b.name),
                Tensor::new(&[1], vec![F::of(b.stats.updates as f64)]).expect("stats shape"),
            ));
        }
        out
    }
}

pub fn trunc_normal<F: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<F> {
    let normal = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break F::of(v);
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}
