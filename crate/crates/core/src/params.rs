//! Host-side parameter storage. Weights live as plain values between
//! iterations and are pushed onto a fresh tape each forward pass; the push
//! order of every container matches its visit order, so gradient slots can
//! be recovered positionally after backward.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{KernelDims, Real, Tape, TensorId, Value};

/// Convolution weight and bias pair.
#[derive(Debug, Clone)]
pub struct ConvParam<T> {
    pub weight: Value<T>,
    pub bias: Value<T>,
}

/// Tape handles for one convolution's parameters.
#[derive(Debug, Clone, Copy, Default)]
pub struct TapedConv {
    pub weight: TensorId,
    pub bias: TensorId,
}

impl<T: Real> ConvParam<T> {
    /// He-normal weights, std sqrt(2 / fan_in), zero biases.
    pub fn he(kd: KernelDims, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = kd.c_in * kd.kx * kd.ky * kd.kz;
        let mut weight = Value::kernel(kd);
        weight.fill_std_normal(rng, T::of((2.0 / fan_in as f64).sqrt()));
        ConvParam { weight, bias: Value::zeros(vec![kd.c_out]) }
    }

    /// All-zero weights with a constant bias, for heads that must start
    /// at a fixed output.
    pub fn zero_with_bias(kd: KernelDims, bias: f64) -> Self {
        ConvParam {
            weight: Value::kernel(kd),
            bias: Value::full(vec![kd.c_out], T::of(bias)),
        }
    }

    pub fn push(&self, tape: &mut Tape<T>, trainable: bool) -> Result<TapedConv> {
        Ok(TapedConv {
            weight: tape.leaf(self.weight.clone(), trainable)?,
            bias: tape.leaf(self.bias.clone(), trainable)?,
        })
    }

    pub fn visit(&self, name: &str, f: &mut dyn FnMut(&str, &Value<T>)) {
        f(&format!("{name}.weight"), &self.weight);
        f(&format!("{name}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(&str, &mut Value<T>)) {
        f(&format!("{name}.weight"), &mut self.weight);
        f(&format!("{name}.bias"), &mut self.bias);
    }
}
