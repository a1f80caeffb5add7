//! Parameters and the Adam optimizer.
//!
//! A [`ParamSet`] owns named parameter tensors together with their Adam state.
//! Each training step binds the parameters onto a fresh [`Tape`] as leaves,
//! runs forward/backward, then absorbs the leaf gradients back and applies an
//! update. Binding order is stable (insertion order), which also fixes the
//! checkpoint layout.

use std::collections::HashMap;

use crate::error::{TensorError, TensorResult};
use crate::tape::{Tape, Tx};
use crate::tensor::Tensor;
use crate::Real;

pub struct Param {
    pub name: String,
    pub value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
}

#[derive(Default)]
pub struct ParamSet {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> TensorResult<()> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::InvalidArgument {
                op: "param_set.add",
                msg: format!("duplicate parameter {:?}", name),
            });
        }
        let shape = value.shape().to_vec();
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.by_name.get(name).map(|&i| &mut self.params[i].value)
    }

    /// Put every parameter on the tape as a leaf, in insertion order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Tx> {
        self.params.iter().map(|p| tape.leaf(p.value.clone())).collect()
    }

    /// Pull gradients off the tape after `backward`. Parameters whose leaf
    /// never received a gradient keep zero. Clears previous gradients first.
    pub fn absorb_grads(&mut self, tape: &mut Tape, bound: &[Tx]) -> TensorResult<()> {
        if bound.len() != self.params.len() {
            return Err(TensorError::InvalidArgument {
                op: "param_set.absorb_grads",
                msg: format!("{} handles for {} params", bound.len(), self.params.len()),
            });
        }
        for (p, &tx) in self.params.iter_mut().zip(bound) {
            match tape.take_grad(tx) {
                Some(g) => {
                    if g.shape() != p.value.shape() {
                        return Err(TensorError::ShapeMismatch {
                            op: "param_set.absorb_grads",
                            lhs: p.value.shape().to_vec(),
                            rhs: g.shape().to_vec(),
                        });
                    }
                    p.grad = g;
                }
                None => p.grad = Tensor::zeros(p.value.shape()),
            }
        }
        Ok(())
    }

    pub fn grad_norm(&self) -> Real {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|&g| g * g)
            .sum::<Real>()
            .sqrt()
    }

    /// Raw checkpoint payload views in binding order.
    pub fn export(&self) -> Vec<(&str, &Tensor)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value)).collect()
    }

    /// Load values by name; every parameter must be present with its shape.
    pub fn import(&mut self, values: &HashMap<String, Tensor>) -> TensorResult<()> {
        for p in self.params.iter_mut() {
            let t = values.get(&p.name).ok_or_else(|| TensorError::CheckpointFormat {
                msg: format!("missing parameter {:?}", p.name),
            })?;
            if t.shape() != p.value.shape() {
                return Err(TensorError::CheckpointFormat {
                    msg: format!(
                        "parameter {:?} has shape {:?}, expected {:?}",
                        p.name,
                        t.shape(),
                        p.value.shape()
                    ),
                });
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

/// Adam with bias correction and step-count based learning-rate decay.
pub struct Adam {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    /// Steps at which the learning rate is multiplied by `decay_factor`.
    pub decay_steps: Vec<u64>,
    pub decay_factor: Real,
    step: u64,
}

impl Adam {
    pub fn new(lr: Real) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_steps: Vec::new(),
            decay_factor: 0.1,
            step: 0,
        }
    }

    pub fn with_decay(mut self, steps: Vec<u64>, factor: Real) -> Self {
        self.decay_steps = steps;
        self.decay_factor = factor;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate in effect for the next step.
    pub fn current_lr(&self) -> Real {
        let passed = self.decay_steps.iter().filter(|&&s| self.step >= s).count();
        self.lr * self.decay_factor.powi(passed as i32)
    }

    pub fn step(&mut self, params: &mut ParamSet) {
        self.step += 1;
        let lr = self.current_lr();
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in params.params.iter_mut() {
            for i in 0..p.value.numel() {
                let g = p.grad.data()[i];
                let m = self.beta1 * p.m.data()[i] + (1.0 - self.beta1) * g;
                let v = self.beta2 * p.v.data()[i] + (1.0 - self.beta2) * g * g;
                p.m.data_mut()[i] = m;
                p.v.data_mut()[i] = v;
                let mhat = m / bc1;
                let vhat = v / bc2;
                p.value.data_mut()[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut params = ParamSet::new();
        params.add("x", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap()).unwrap();
        let mut adam = Adam::new(0.1);
        for _ in 0..300 {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let sq = tape.mul(bound[0], bound[0]).unwrap();
            let loss = tape.sum_all(sq);
            tape.backward(loss).unwrap();
            params.absorb_grads(&mut tape, &bound).unwrap();
            adam.step(&mut params);
        }
        for &v in params.get("x").unwrap().value.data() {
            assert!(v.abs() < 1e-2, "did not converge: {}", v);
        }
    }

    #[test]
    fn lr_decay_applies_at_milestones() {
        let mut adam = Adam::new(1.0).with_decay(vec![2], 0.1);
        assert!((adam.current_lr() - 1.0).abs() < 1e-12);
        adam.step.checked_add(0).unwrap();
        let mut params = ParamSet::new();
        params.add("x", Tensor::scalar(1.0)).unwrap();
        adam.step(&mut params); // step = 1
        assert!((adam.current_lr() - 1.0).abs() < 1e-12);
        adam.step(&mut params); // step = 2, milestone reached
        assert!((adam.current_lr() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn duplicate_param_rejected() {
        let mut params = ParamSet::new();
        params.add("w", Tensor::scalar(0.0)).unwrap();
        assert!(params.add("w", Tensor::scalar(1.0)).is_err());
    }
}
