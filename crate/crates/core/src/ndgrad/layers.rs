//! Parameterized layers and a sequential stack over [`Graph`] operations.

use rand::Rng;

use super::{fan_in_uniform, Graph, Real, Tensor, Var};
use crate::error::{shape_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dLayer<T> {
    /// `[F, C, kh, kw]`
    pub weight: Tensor<T>,
    /// `[F]`
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> Conv2dLayer<T> {
    /// Square-kernel convolution with "same" padding for odd kernel sizes.
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut R) -> Self {
        Self {
            weight: fan_in_uniform(&[out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel, rng),
            bias: Tensor::zeros(&[out_ch]),
            stride: 1,
            padding: kernel / 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<T> {
    /// `[D, E]`
    pub weight: Tensor<T>,
    /// `[E]`
    pub bias: Tensor<T>,
}

impl<T: Real> DenseLayer<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: fan_in_uniform(&[input, output], input, rng),
            bias: Tensor::zeros(&[output]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Conv(Conv2dLayer<T>),
    Dense(DenseLayer<T>),
    Relu,
    Sigmoid,
    MaxPool(usize),
    Upsample2x,
    /// Reshape keeping the leading batch axis.
    Reshape(Vec<usize>),
}

/// Layers applied in order.
#[derive(Clone, Debug, PartialEq)]
pub struct Stack<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> Stack<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    /// Parameter tensors in a fixed order (weight then bias, layer by layer).
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => out.extend([&c.weight, &c.bias]),
                Layer::Dense(d) => out.extend([&d.weight, &d.bias]),
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => out.extend([&mut c.weight, &mut c.bias]),
                Layer::Dense(d) => out.extend([&mut d.weight, &mut d.bias]),
                _ => {}
            }
        }
        out
    }

    /// `(name, tensor)` pairs, names like `prefix.3.weight`.
    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let (w, b) = match layer {
                Layer::Conv(c) => (&c.weight, &c.bias),
                Layer::Dense(d) => (&d.weight, &d.bias),
                _ => continue,
            };
            out.push((format!("{prefix}.{i}.weight"), w));
            out.push((format!("{prefix}.{i}.bias"), b));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Registers all parameters in `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    pub fn forward(&self, g: &mut Graph<T>, input: Var, vars: &[Var]) -> Result<Var> {
        let expected = self.params().len();
        if vars.len() != expected {
            return Err(shape_err!(
                "stack expects {expected} bound parameters, got {}",
                vars.len()
            ));
        }
        let mut x = input;
        let mut p = vars.iter();
        for layer in &self.layers {
            x = match layer {
                Layer::Conv(c) => {
                    let (w, b) = (*p.next().unwrap(), *p.next().unwrap());
                    let y = g.conv2d(x, w, c.stride, c.padding)?;
                    g.add_channel_bias(y, b)?
                }
                Layer::Dense(_) => {
                    let (w, b) = (*p.next().unwrap(), *p.next().unwrap());
                    g.dense(x, w, b)?
                }
                Layer::Relu => g.relu(x)?,
                Layer::Sigmoid => g.sigmoid(x)?,
                Layer::MaxPool(s) => g.maxpool2d(x, *s)?,
                Layer::Upsample2x => g.upsample2x(x)?,
                Layer::Reshape(dims) => {
                    let mut shape = vec![g.shape(x)[0]];
                    shape.extend_from_slice(dims);
                    g.reshape(x, &shape)?
                }
            };
        }
        Ok(x)
    }

    /// Copies parameters from `tensors`, which must match [`Stack::params`] shapes.
    pub fn load_params(&mut self, tensors: &[Tensor<T>]) -> Result<()> {
        let mut dst = self.params_mut();
        if dst.len() != tensors.len() {
            return Err(shape_err!(
                "expected {} tensors, got {}",
                dst.len(),
                tensors.len()
            ));
        }
        for (d, s) in dst.iter_mut().zip(tensors) {
            if d.shape() != s.shape() {
                return Err(shape_err!("parameter {:?} vs {:?}", d.shape(), s.shape()));
            }
            **d = s.clone();
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Stack<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => Layer::Conv(Conv2dLayer {
                    weight: c.weight.cast(),
                    bias: c.bias.cast(),
                    stride: c.stride,
                    padding: c.padding,
                }),
                Layer::Dense(d) => Layer::Dense(DenseLayer {
                    weight: d.weight.cast(),
                    bias: d.bias.cast(),
                }),
                Layer::Relu => Layer::Relu,
                Layer::Sigmoid => Layer::Sigmoid,
                Layer::MaxPool(s) => Layer::MaxPool(*s),
                Layer::Upsample2x => Layer::Upsample2x,
                Layer::Reshape(d) => Layer::Reshape(d.clone()),
            })
            .collect();
        Stack { layers }
    }
}
