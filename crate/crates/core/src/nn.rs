//! Named parameter storage shared by every learned module.

use rand::Rng;

use crate::tensor::{AdamW, Checkpoint, Graph, Real, Result, Tensor, TensorError, Var};

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<R> {
    names: Vec<String>,
    tensors: Vec<Tensor<R>>,
}

impl<R: Real> Default for ParamStore<R> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its slot index.
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<R>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<R>] {
        &self.tensors
    }

    pub fn at(&self, i: usize) -> &Tensor<R> {
        &self.tensors[i]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Tensor<R> {
        &mut self.tensors[i]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    /// Total scalar count.
    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Adds every tensor to `g` as a tracked leaf.
    pub fn bind(&self, g: &mut Graph<R>) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t.clone())).collect()
    }

    /// Adds every tensor to `g` as a constant.
    pub fn bind_frozen(&self, g: &mut Graph<R>) -> Vec<Var> {
        self.tensors.iter().map(|t| g.constant(t.clone())).collect()
    }

    /// Checkpoint entries named `prefix.name`.
    pub fn entries(&self, prefix: &str) -> Vec<(String, &Tensor<R>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| (format!("{prefix}.{n}"), t))
            .collect()
    }

    /// Overwrites every tensor from `prefix.name` entries of a checkpoint.
    pub fn load(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        for (n, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let loaded: Tensor<R> = ck.get(&format!("{prefix}.{n}"))?;
            if loaded.shape() != t.shape() {
                return Err(TensorError::Checkpoint(format!(
                    "{prefix}.{n}: expected {:?}, found {:?}",
                    t.shape(),
                    loaded.shape()
                )));
            }
            *t = loaded;
        }
        Ok(())
    }

    /// `self = decay * self + (1 - decay) * other`, slot by slot.
    pub fn blend_from(&mut self, other: &ParamStore<R>, decay: R) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x = decay * *x + (R::one() - decay) * *y;
            }
        }
    }

    /// Applies one optimizer step from the gradients of `vars` in `g`.
    /// Slots whose variable received no gradient get a zero gradient.
    pub fn apply(&mut self, opt: &mut AdamW<R>, g: &Graph<R>, vars: &[Var], lrs: &[f64]) -> Result<()> {
        let zeros: Vec<Tensor<R>> = self
            .tensors
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        let grads: Vec<&Tensor<R>> = vars
            .iter()
            .zip(&zeros)
            .map(|(v, z)| g.grad(*v).unwrap_or(z))
            .collect();
        let mut params: Vec<&mut Tensor<R>> = self.tensors.iter_mut().collect();
        opt.step_with_lrs(&mut params, &grads, lrs)
    }
}

/// He-normal conv weight `[out, in, k, k]`.
pub fn he_conv<R: Real>(out: usize, inp: usize, k: usize, rng: &mut impl Rng) -> Tensor<R> {
    let std = (2.0 / (inp * k * k) as f64).sqrt();
    Tensor::randn([out, inp, k, k], std, rng)
}

/// He-normal fully connected weight stored `[in, out]`.
pub fn he_linear<R: Real>(inp: usize, out: usize, rng: &mut impl Rng) -> Tensor<R> {
    Tensor::randn([inp, out], (2.0 / inp as f64).sqrt(), rng)
}
