use crate::error::{AutodiffError, Result};
use crate::scalar::Real;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Appends a parameter and returns its slot index.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Places every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect()
    }

    /// Gradients for the leaves produced by [`bind`](Self::bind).
    pub fn collect_grads(bound: &[Var], grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        bound.iter().map(|&v| grads.take(v)).collect()
    }

    /// `self ← tau · online + (1 − tau) · self`.
    pub fn polyak_toward(&mut self, online: &Self, tau: T) -> Result<()> {
        if self.names.len() != online.names.len() {
            return Err(AutodiffError::InvalidArgument {
                op: "polyak",
                msg: format!("{} target params vs {} online", self.len(), online.len()),
            });
        }
        for (t, o) in self.tensors.iter().zip(&online.tensors) {
            t.expect_same_shape("polyak", o)?;
        }
        let keep = T::one() - tau;
        for (t, o) in self.tensors.iter_mut().zip(&online.tensors) {
            for (a, &b) in t.data_mut().iter_mut().zip(o.data()) {
                *a = tau * b + keep * *a;
            }
        }
        Ok(())
    }

    pub fn sq_norm(&self) -> T {
        self.tensors.iter().map(Tensor::sq_norm).sum()
    }

    /// Sum of squared elementwise differences to another set of the same layout.
    pub fn sq_distance(&self, other: &Self) -> Result<T> {
        let mut acc = T::zero();
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            let d = a.zip_map(b, |x, y| (x - y) * (x - y))?;
            acc = acc + d.sum();
        }
        Ok(acc)
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}
