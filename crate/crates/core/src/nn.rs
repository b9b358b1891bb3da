//! Parameterised layers shared by every network component.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Param, Tensor};

/// Whether a forward pass should record gradients for the layer's own
/// parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Frozen,
}

impl Mode {
    fn weight(self, p: &Param) -> Tensor {
        match self {
            Mode::Train => p.value.clone(),
            Mode::Frozen => p.frozen(),
        }
    }
}

pub const LEAKY_SLOPE: f32 = 0.2;

/// Kaiming-normal weights (fan-in, gain sqrt(2)), zero bias.
fn kaiming(rng: &mut impl Rng, fan_in: usize, count: usize) -> Vec<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..count).map(|_| normal.sample(rng) as f32).collect()
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = in_c * kernel * kernel;
        Ok(Self {
            weight: Param::new(
                format!("{name}.weight"),
                kaiming(rng, fan_in, out_c * fan_in),
                &[out_c, in_c, kernel, kernel],
            )?,
            bias: Param::new(format!("{name}.bias"), vec![0.0; out_c], &[out_c])?,
            stride,
            pad,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        x.conv2d(&mode.weight(&self.weight), &mode.weight(&self.bias), self.stride, self.pad)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Fully connected layer on `[rows, in]` inputs; weight stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Result<Self> {
        // plain fan-in scaling: the output feeds a softmax, not a ReLU
        let std = (1.0 / inputs as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let w = (0..inputs * outputs).map(|_| normal.sample(rng) as f32).collect();
        Ok(Self {
            weight: Param::new(format!("{name}.weight"), w, &[inputs, outputs])?,
            bias: Param::new(format!("{name}.bias"), vec![0.0; outputs], &[outputs])?,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        x.matmul(&mode.weight(&self.weight))?.add_bias(&mode.weight(&self.bias))
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}
