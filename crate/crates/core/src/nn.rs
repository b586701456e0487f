//! Named parameter storage shared by every network in the crate.

use crate::autograd::{Gradients, Tape, Var};
use crate::optim::OptimizerState;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng as _;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedParam<T> {
    pub layer: String,
    pub name: String,
    pub value: Tensor<T>,
}

impl<T> NamedParam<T> {
    pub fn key(&self) -> String {
        format!("{}.{}", self.layer, self.name)
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T> {
    params: Vec<NamedParam<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, layer: &str, name: &str, value: Tensor<T>) -> usize {
        debug_assert!(self.index_of(layer, name).is_none(), "duplicate parameter {layer}.{name}");
        self.params.push(NamedParam {
            layer: layer.to_string(),
            name: name.to_string(),
            value,
        });
        self.params.len() - 1
    }

    pub fn index_of(&self, layer: &str, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.layer == layer && p.name == name)
    }

    pub fn get(&self, layer: &str, name: &str) -> Result<&Tensor<T>> {
        self.index_of(layer, name)
            .map(|i| &self.params[i].value)
            .ok_or_else(|| Error::UnknownParameter(format!("{layer}.{name}")))
    }

    pub fn get_mut(&mut self, layer: &str, name: &str) -> Result<&mut Tensor<T>> {
        let i = self
            .index_of(layer, name)
            .ok_or_else(|| Error::UnknownParameter(format!("{layer}.{name}")))?;
        Ok(&mut self.params[i].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedParam<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut NamedParam<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.params[i].value
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.params[i].value
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records every parameter on `tape`; those for which `trainable(i)`
    /// holds become gradient leaves, the rest constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(usize) -> bool) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if trainable(i) {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// One optimizer update of the parameters at `indices` (ascending), using
    /// the gradients of their tape variables `vars[i]`. `opt` must have been
    /// created for exactly these parameters, in this order.
    pub fn step_subset(
        &mut self,
        indices: &[usize],
        vars: &[Var],
        grads: &Gradients<T>,
        opt: &mut OptimizerState<T>,
        lr: f64,
    ) -> Result<()> {
        let zeros: Vec<Option<Tensor<T>>> = indices
            .iter()
            .map(|&i| grads.get(vars[i]).is_none().then(|| Tensor::zeros(self.params[i].value.shape().to_vec())))
            .collect();
        let g: Vec<&Tensor<T>> = indices
            .iter()
            .zip(&zeros)
            .map(|(&i, z)| grads.get(vars[i]).unwrap_or_else(|| z.as_ref().unwrap()))
            .collect();
        let mut targets: Vec<&mut Tensor<T>> = Vec::with_capacity(indices.len());
        let mut want = indices.iter().peekable();
        for (i, p) in self.params.iter_mut().enumerate() {
            if want.peek() == Some(&&i) {
                want.next();
                targets.push(&mut p.value);
            }
        }
        if targets.len() != indices.len() {
            return Err(Error::InvalidArgument("parameter indices must be ascending and in range".into()));
        }
        opt.step_with_lr(&mut targets, &g, lr)
    }

    /// All values concatenated in storage order.
    pub fn flat_values(&self) -> Vec<T> {
        self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    pub fn load_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.count() {
            return Err(Error::Shape {
                op: "load_flat",
                detail: format!("{} values for {} parameters", values.len(), self.count()),
            });
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// He-uniform initialisation: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn he_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape is consistent")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn flat_roundtrip_and_lookup() {
        let mut ps = ParamSet::<f64>::new();
        ps.push("fc", "weight", Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        ps.push("fc", "bias", Tensor::vector(vec![5.0, 6.0]));
        assert_eq!(ps.count(), 6);
        assert_eq!(ps.flat_values(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut other = ps.clone();
        other.load_flat(&[0.0; 6]).unwrap();
        other.load_flat(&ps.flat_values()).unwrap();
        assert_eq!(other, ps);
        assert!(ps.get("fc", "gamma").is_err());
        assert!(other.load_flat(&[0.0; 5]).is_err());
    }

    #[test]
    fn he_uniform_bound() {
        let mut rng = rng_from_seed(0);
        let t: Tensor<f64> = he_uniform(&[64, 24], 24, &mut rng);
        let b = (6.0f64 / 24.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= b));
        let max = t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max > 0.9 * b);
    }
}
