use crate::error::Result;
use crate::nn::ops;
use crate::nn::param::{Init, Parameter};
use crate::nn::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Option<Parameter>,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let mut s = init.scope(name);
        let weight = s.weight("weight", fan_in, fan_out)?;
        let bias = s.constant("bias", &[fan_out], 0.0)?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    /// A bias-free projection, as used for attention keys, queries and values.
    pub fn projection(init: &mut Init<'_>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let weight = init.weight(name, fan_in, fan_out)?;
        Ok(Self { weight, bias: None })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let b = self.bias.as_ref().map(Parameter::tensor);
        ops::linear(x, &self.weight.tensor(), b.as_ref())
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: Parameter,
    pub bias: Parameter,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Result<Self> {
        let mut s = init.scope(name);
        Ok(Self {
            gain: s.constant("gain", &[dim], 1.0)?,
            bias: s.constant("bias", &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::layer_norm(x, &self.gain.tensor(), &self.bias.tensor())
    }
}

/// Linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(init: &mut Init<'_>, name: &str, widths: &[usize]) -> Result<Self> {
        let mut s = init.scope(name);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut s, &format!("l{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len().saturating_sub(1);
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i < last {
                h = ops::relu(&h);
            }
        }
        Ok(h)
    }
}
