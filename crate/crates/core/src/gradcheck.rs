//! Central-difference gradient verification in 64-bit.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamSet};
use crate::tensor::Tensor;

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-8)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

fn scalar(g: &Graph<f64>, v: Var) -> Result<f64> {
    g.value(v)
        .item()
        .ok_or_else(|| Error::NonScalarLoss(g.value(v).shape().to_vec()))
}

/// Compares the backward pass of scalar function `f` at `x` against central
/// differences with step `eps`, returning the worst relative error.
pub fn gradient_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone().with_requires_grad(true));
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic = g
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| alloc::vec![0.0; x.numel()]);

    let eval = |t: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.input(t);
        let l = f(&mut g, v)?;
        scalar(&g, l)
    };
    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * eps));
    }
    Ok(max_relative_error(&analytic, &numeric))
}

/// Worst relative error per checked parameter block.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub blocks: Vec<(String, f64)>,
}

impl ParamCheck {
    pub fn max_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.1).fold(0.0, f64::max)
    }
}

/// Gradient check of a scalar function of a whole parameter set. For each
/// block in `ids`, up to `per_block` evenly spaced elements are perturbed.
pub fn gradient_check_params<F>(
    params: &ParamSet<f64>,
    ids: &[ParamId],
    per_block: usize,
    eps: f64,
    f: F,
) -> Result<ParamCheck>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>,
{
    let mut work = params.clone();
    work.clear_grads();
    let mut g = Graph::new();
    let loss = f(&mut g, &work)?;
    g.backward(loss)?;
    work.absorb_grads(&g);

    let eval = |ps: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = f(&mut g, ps)?;
        scalar(&g, l)
    };

    let mut blocks = Vec::with_capacity(ids.len());
    for &id in ids {
        let n = work.get(id).tensor.numel();
        let take = per_block.min(n).max(1);
        let step = (n / take).max(1);
        let analytic_all = work.get(id).tensor.grad().expect("absorbed").to_vec();
        let mut analytic = Vec::with_capacity(take);
        let mut numeric = Vec::with_capacity(take);
        let mut probe = params.clone();
        for j in 0..take {
            let i = (j * step + step / 2).min(n - 1);
            let orig = probe.get(id).tensor.data()[i];
            probe.get_mut(id).tensor.data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(id).tensor.data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(id).tensor.data_mut()[i] = orig;
            analytic.push(analytic_all[i]);
            numeric.push((up - down) / (2.0 * eps));
        }
        blocks.push((work.get(id).name.clone(), max_relative_error(&analytic, &numeric)));
    }
    Ok(ParamCheck { blocks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_to_rounding() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.3 - 1.0);
        let err = gradient_check(|g, v| Ok(g.sum(v)), &x, 1e-3).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn sum_of_squares() {
        let x = Tensor::from_fn(&[8], |i| (i as f64 * 1.7).sin());
        let err = gradient_check(
            |g, v| {
                let sq = g.mul(v, v)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
