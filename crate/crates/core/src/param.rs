//! Named, ordered parameter storage.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::graph::Graph;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Real> {
    pub name: String,
    pub tensor: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T: Real = f32> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            tensor: tensor.with_requires_grad(true),
        });
        ParamId(self.params.len() - 1)
    }

    /// Conv weight `out x inp x k x k` drawn Kaiming-uniform on fan-in
    /// (bound `sqrt(6 / fan_in)`), plus a zero bias.
    pub fn push_conv(
        &mut self,
        name: &str,
        out: usize,
        inp: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> (ParamId, ParamId) {
        let fan_in = (inp * k * k).max(1) as f64;
        let bound = num_traits::Float::sqrt(6.0 / fan_in);
        let w = Tensor::from_fn(&[out, inp, k, k], |_| T::lit(rng.gen_range(-bound..bound)));
        let wid = self.push(alloc::format!("{name}.weight"), w);
        let bid = self.push(alloc::format!("{name}.bias"), Tensor::zeros(&[out]));
        (wid, bid)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count across all parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.take_grad();
        }
    }

    /// Global L2 norm of all gradient buffers.
    pub fn grad_norm(&self) -> T {
        let sq = self
            .params
            .iter()
            .filter_map(|p| p.tensor.grad())
            .flatten()
            .fold(T::zero(), |acc, &g| acc + g * g);
        sq.sqrt()
    }

    /// Scales every gradient so the global norm is at most `max`. Returns the
    /// norm before scaling.
    pub fn clip_grad_norm(&mut self, max: T) -> T {
        let norm = self.grad_norm();
        if norm > max {
            let k = max / norm;
            for p in &mut self.params {
                if let Some(g) = p.tensor.take_grad() {
                    p.tensor.accumulate_grad(&g.iter().map(|&v| v * k).collect::<Vec<_>>());
                }
            }
        }
        norm
    }

    /// Adds the gradients computed by `graph` into the parameters' grad
    /// slots. Every parameter ends up with a gradient buffer, zero if the
    /// graph did not use it.
    pub fn absorb_grads(&mut self, graph: &Graph<T>) {
        for p in &mut self.params {
            if p.tensor.grad().is_none() {
                let n = p.tensor.numel();
                p.tensor.accumulate_grad(&vec![T::zero(); n]);
            }
        }
        for (id, var) in graph.param_bindings() {
            if let Some(g) = graph.grad(var) {
                self.params[id.0].tensor.accumulate_grad(g);
            }
        }
    }
}
