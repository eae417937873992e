//! Stateful wrappers around the tensor primitives: each owns its parameters
//! and the forward cache its backward pass needs.

use crate::error::{Error, Result};
use crate::param::{join, HasParams, Layer, Param};
use crate::tensor::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, BatchNormCache,
    BatchNormState, BnMode, ConvSpec, Tensor4,
};
use rand::Rng;

/// Uniform in ±sqrt(1/fan_in).
pub fn init_uniform<R: Rng + ?Sized>(len: usize, fan_in: usize, rng: &mut R) -> Vec<f64> {
    let bound = (1.0 / fan_in as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor4>,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(spec: ConvSpec, rng: &mut R) -> Self {
        let ws = spec.weight_shape();
        let weight = Param::new(
            init_uniform(ws.len(), spec.fan_in(), rng),
            ws.to_array().to_vec(),
        );
        Self {
            spec,
            weight,
            bias: Param::zeros(vec![spec.out_channels]),
            input: None,
        }
    }

    pub fn zeroed(spec: ConvSpec) -> Self {
        Self {
            spec,
            weight: Param::zeros(spec.weight_shape().to_array().to_vec()),
            bias: Param::zeros(vec![spec.out_channels]),
            input: None,
        }
    }

    pub fn weight_tensor(&self) -> Tensor4 {
        Tensor4::from_vec(self.spec.weight_shape(), self.weight.value.clone())
            .expect("weight length fixed at construction")
    }

    /// Forward without caching.
    pub fn apply(&self, input: &Tensor4) -> Result<Tensor4> {
        conv2d_forward(input, &self.spec, &self.weight_tensor(), &self.bias.value)
    }
}

impl HasParams for Conv2d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, input: &Tensor4) -> Result<Tensor4> {
        let out = self.apply(input)?;
        self.input = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_output: &Tensor4) -> Result<Tensor4> {
        let input = self
            .input
            .as_ref()
            .ok_or_else(|| Error::contract("conv backward before forward"))?;
        let g = conv2d_backward(input, &self.spec, &self.weight_tensor(), grad_output)?;
        self.weight.accumulate(g.weights.data());
        self.bias.accumulate(&g.bias);
        Ok(g.input)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub state: BatchNormState,
    cache: Option<BatchNormCache>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            state: BatchNormState::new(channels),
            cache: None,
        }
    }
}

impl HasParams for BatchNorm2d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.state.gamma);
        f(&join(prefix, "beta"), &self.state.beta);
        f(&join(prefix, "running_mean"), &self.state.running_mean);
        f(&join(prefix, "running_var"), &self.state.running_var);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.state.gamma);
        f(&join(prefix, "beta"), &mut self.state.beta);
        f(&join(prefix, "running_mean"), &mut self.state.running_mean);
        f(&join(prefix, "running_var"), &mut self.state.running_var);
    }
}

impl Layer for BatchNorm2d {
    fn forward(&mut self, input: &Tensor4) -> Result<Tensor4> {
        let (out, cache) = batchnorm_forward(input, &mut self.state)?;
        self.cache = Some(cache);
        Ok(out)
    }

    fn backward(&mut self, grad_output: &Tensor4) -> Result<Tensor4> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::contract("batchnorm backward before forward"))?;
        let g = batchnorm_backward(grad_output, &self.state, cache)?;
        self.state.gamma.accumulate(&g.gamma);
        self.state.beta.accumulate(&g.beta);
        Ok(g.input)
    }

    fn set_training(&mut self, training: bool) {
        self.state.mode = if training { BnMode::Train } else { BnMode::Eval };
    }
}
