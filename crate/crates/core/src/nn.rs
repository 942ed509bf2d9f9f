//! Glue between long-lived [`Parameter`]s and a per-pass [`Tape`].

use std::collections::HashMap;

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Gradients, Parameter, Tape, Tensor, Var};

/// Binds parameters onto a tape on first use during a forward pass.
pub struct Binding<'t> {
    tape: &'t Tape,
    vars: HashMap<String, Var<'t>>,
    track: bool,
}

impl<'t> Binding<'t> {
    /// Parameters become gradient-tracked leaves.
    pub fn training(tape: &'t Tape) -> Self {
        Binding {
            tape,
            vars: HashMap::new(),
            track: true,
        }
    }

    /// Parameters become constants; nothing is differentiated.
    pub fn inference(tape: &'t Tape) -> Self {
        Binding {
            tape,
            vars: HashMap::new(),
            track: false,
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn var(&mut self, p: &Parameter) -> Var<'t> {
        let tape = self.tape;
        let track = self.track;
        *self.vars.entry(p.name.clone()).or_insert_with(|| {
            if track {
                tape.param(p)
            } else {
                tape.constant(&p.tensor)
            }
        })
    }

    pub fn get(&self, name: &str) -> Option<Var<'t>> {
        self.vars.get(name).copied()
    }

    /// Adds each parameter's gradient into it. Parameters the loss did not
    /// reach (or that were never bound) receive an explicit zero gradient.
    pub fn accumulate<'p>(
        &self,
        grads: &Gradients,
        params: impl IntoIterator<Item = &'p mut Parameter>,
    ) -> Result<()> {
        for p in params {
            match self.vars.get(&p.name).and_then(|v| grads.wrt(*v)) {
                Some(g) => p.accumulate_grad(g)?,
                None => {
                    let zeros = vec![0.0; p.tensor.len()];
                    p.accumulate_grad(&zeros)?
                }
            }
        }
        Ok(())
    }
}

/// Uniform in `±sqrt(6 / fan_in)`.
pub fn he_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let limit = (6.0 / fan_in as f64).sqrt();
    uniform(rng, shape, limit)
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, shape, limit)
}

fn uniform(rng: &mut impl Rng, shape: &[usize], limit: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape, data).expect("initialiser shape")
}

/// Convolution weights plus per-output-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel: Parameter,
    pub bias: Parameter,
}

impl ConvLayer {
    pub fn he(rng: &mut impl Rng, name: &str, k: usize, cin: usize, cout: usize) -> Self {
        ConvLayer {
            kernel: Parameter::new(
                format!("{name}.kernel"),
                he_uniform(rng, &[k, k, cin, cout], k * k * cin),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[3]
    }

    /// Same-padded stride-1 convolution plus bias.
    pub fn forward<'t>(&self, b: &mut Binding<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let k = b.var(&self.kernel);
        let bias = b.var(&self.bias);
        let tape = b.tape();
        let y = tape.conv2d(x, k, 1, crate::tensor::Padding::Same)?;
        tape.add_bias(y, bias)
    }

    pub fn params(&self) -> [&Parameter; 2] {
        [&self.kernel, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.kernel, &mut self.bias]
    }
}

/// Fully connected `n → m` layer, weights stored `n×m`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Parameter,
    pub bias: Parameter,
}

impl DenseLayer {
    pub fn glorot(rng: &mut impl Rng, name: &str, n: usize, m: usize) -> Self {
        DenseLayer {
            weights: Parameter::new(format!("{name}.weights"), glorot_uniform(rng, &[n, m], n, m)),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[1, m])),
        }
    }

    pub fn zeros(name: &str, n: usize, m: usize) -> Self {
        DenseLayer {
            weights: Parameter::new(format!("{name}.weights"), Tensor::zeros(&[n, m])),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[1, m])),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn forward<'t>(&self, b: &mut Binding<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let w = b.var(&self.weights);
        let bias = b.var(&self.bias);
        let tape = b.tape();
        let row = tape.reshape(x, &[1, x.len()])?;
        tape.dense(row, w, bias)
    }

    pub fn params(&self) -> [&Parameter; 2] {
        [&self.weights, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.weights, &mut self.bias]
    }
}
