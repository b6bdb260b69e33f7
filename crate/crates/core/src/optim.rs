//! SGD with momentum and L2 weight decay, plus the per-epoch learning-rate
//! schedule.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::param::ParamSet;
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Real = f32> {
    /// One buffer per registered parameter, same length as its data.
    pub velocities: Vec<Vec<T>>,
    pub momentum: T,
    pub weight_decay: T,
    pub lr: T,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ParamSet<T>, lr: T, momentum: T, weight_decay: T) -> Self {
        Self {
            velocities: params.iter().map(|p| alloc::vec![T::zero(); p.tensor.numel()]).collect(),
            momentum,
            weight_decay,
            lr,
        }
    }
}

/// One update of every parameter:
/// `v <- momentum * v + grad + weight_decay * p`, then `p <- p - lr * v`.
/// Gradients are cleared afterwards.
pub fn sgd_step<T: Real>(params: &mut ParamSet<T>, state: &mut OptimizerState<T>) -> Result<()> {
    if state.velocities.len() != params.len() {
        return Err(Error::InvalidConfig(alloc::format!(
            "optimizer tracks {} buffers for {} parameters",
            state.velocities.len(),
            params.len()
        )));
    }
    for (p, v) in params.iter().zip(&state.velocities) {
        match p.tensor.grad() {
            None => return Err(Error::MissingGrad(p.name.clone())),
            Some(g) if g.len() != v.len() => {
                return Err(Error::ShapeMismatch {
                    op: "sgd_step",
                    lhs: p.tensor.shape().to_vec(),
                    rhs: alloc::vec![v.len()],
                })
            }
            Some(_) => {}
        }
    }
    let (m, wd, lr) = (state.momentum, state.weight_decay, state.lr);
    for (p, v) in params.iter_mut().zip(state.velocities.iter_mut()) {
        let g = p.tensor.take_grad().expect("checked above");
        for ((w, vel), gi) in p.tensor.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
            *vel = m * *vel + gi + wd * *w;
            *w = *w - lr * *vel;
        }
    }
    Ok(())
}

/// Learning rate at the start of `epoch` (0-based), built by repeated
/// multiplication so it matches a run that decays once per epoch.
pub fn lr_at_epoch(lr0: f32, decay: f32, epoch: u32) -> f32 {
    (0..epoch).fold(lr0, |lr, _| lr * decay)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_set(w: f32) -> ParamSet<f32> {
        let mut ps = ParamSet::new();
        ps.push("w", Tensor::new(&[1], alloc::vec![w]).unwrap());
        ps
    }

    fn set_grad(ps: &mut ParamSet<f32>, g: f32) {
        let id = ps.ids().next().unwrap();
        ps.get_mut(id).tensor.set_grad(Some(alloc::vec![g])).unwrap();
    }

    #[test]
    fn vanilla_descent() {
        let mut ps = scalar_set(1.5);
        let mut st = OptimizerState::new(&ps, 1.0, 0.0, 0.0);
        set_grad(&mut ps, 0.25);
        sgd_step(&mut ps, &mut st).unwrap();
        assert_eq!(ps.iter().next().unwrap().tensor.data()[0], 1.25);
        assert!(ps.iter().next().unwrap().tensor.grad().is_none());
    }

    #[test]
    fn momentum_carries_without_grad() {
        let mut ps = scalar_set(0.0);
        let mut st = OptimizerState::new(&ps, 0.5, 0.9, 0.0);
        st.velocities[0][0] = 2.0;
        set_grad(&mut ps, 0.0);
        sgd_step(&mut ps, &mut st).unwrap();
        assert_eq!(ps.iter().next().unwrap().tensor.data()[0], -(0.5f32 * (0.9 * 2.0)));
    }

    #[test]
    fn missing_grad_rejected() {
        let mut ps = scalar_set(0.0);
        let mut st = OptimizerState::new(&ps, 0.5, 0.9, 0.0);
        assert!(matches!(sgd_step(&mut ps, &mut st), Err(Error::MissingGrad(_))));
    }

    #[test]
    fn schedule_closed_form() {
        assert_eq!(lr_at_epoch(5e-3, 0.9, 0), 5e-3);
        assert!((lr_at_epoch(5e-3, 0.9, 3) - 3.645e-3).abs() < 1e-9);
    }
}
