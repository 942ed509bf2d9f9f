//! Dense `f64` tensors, a single-use reverse-mode tape, and plain SGD.
//!
//! Feature volumes are channels-last (`H×W×C`), matrices are row-major.
//! Parameters live outside any tape; a forward pass binds them as leaves,
//! and after [`Tape::backward`] their gradients are accumulated back with
//! [`Parameter::accumulate_grad`].

mod ops;
mod tape;

pub use tape::{Gradients, Tape, Var, BCE_EPSILON};

use crate::error::{Error, Result};

/// Padding rule for [`Tape::conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Reduction used by [`Tape::global_pool`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Avg,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    /// Over the last axis, log-sum-exp stabilised.
    Softmax,
}

/// A dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim("tensor", format!("zero-sized axis in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} holds {n} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n]).expect("zeros: non-empty shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n]).expect("full: non-empty shape")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(&[1], vec![value]).expect("scalar")
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.requires_grad = on;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the stored gradient, creating it if absent.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::dim(
                "accumulate_grad",
                format!("gradient has {} elements, tensor {}", g.len(), self.data.len()),
            ));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Largest absolute element.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    /// Frozen parameters still receive gradients; optimizers skip them.
    pub frozen: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Parameter {
            name: name.into(),
            tensor: tensor.with_requires_grad(true),
            frozen: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        self.tensor.accumulate_grad(g)
    }
}

/// One plain SGD update: `p ← p − lr·grad` for every non-frozen parameter.
///
/// Every gradient is cleared afterwards, frozen ones included.
pub fn sgd_step<'a, I>(params: I, lr: f64) -> Result<()>
where
    I: IntoIterator<Item = &'a mut Parameter>,
{
    let mut params: Vec<&mut Parameter> = params.into_iter().collect();
    if let Some(p) = params
        .iter()
        .find(|p| !p.frozen && p.tensor.grad.is_none())
    {
        return Err(Error::contract(format!(
            "sgd_step: trainable parameter '{}' has no gradient",
            p.name
        )));
    }
    for p in params.iter_mut() {
        if !p.frozen {
            let grad = p.tensor.grad.take().expect("checked above");
            for (w, g) in p.tensor.data.iter_mut().zip(&grad) {
                *w -= lr * g;
            }
        }
        p.tensor.clear_grad();
    }
    Ok(())
}

/// SGD with optional classical momentum. With `momentum == 0` this is
/// exactly [`sgd_step`].
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a mut Parameter>,
    {
        let mut params: Vec<&mut Parameter> = params.into_iter().collect();
        if self.momentum == 0.0 {
            return sgd_step(params, self.lr);
        }
        if let Some(p) = params.iter().find(|p| !p.frozen && p.tensor.grad.is_none()) {
            return Err(Error::contract(format!(
                "sgd_step: trainable parameter '{}' has no gradient",
                p.name
            )));
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        }
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            if !p.frozen {
                let grad = p.tensor.grad.take().expect("checked above");
                for ((w, g), vel) in p.tensor.data.iter_mut().zip(&grad).zip(v.iter_mut()) {
                    *vel = self.momentum * *vel + g;
                    *w -= self.lr * *vel;
                }
            }
            p.tensor.clear_grad();
        }
        Ok(())
    }
}
