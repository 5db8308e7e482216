//! Dense f64 tensors and a tape-based reverse-mode autodiff engine.

mod autograd;
pub mod gradcheck;
mod kernels;
mod storage;

pub use autograd::{Tape, Var};
pub use storage::{Tensor, TensorHeader};

use crate::error::Result;

/// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub const GELU_COEFF: f64 = 0.044_715;
pub const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

pub const LAYER_NORM_EPS: f64 = 1e-5;

// Gradient-free conveniences over single tensors.

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut t = Tape::new();
    let (a, b) = (t.constant(a), t.constant(b));
    let out = t.matmul(a, b)?;
    Ok(t.to_tensor(out))
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let mut t = Tape::new();
    let x = t.constant(x);
    let out = t.softmax(x, axis)?;
    Ok(t.to_tensor(out))
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, axis: usize, eps: f64) -> Result<Tensor> {
    let mut t = Tape::new();
    let (x, g, b) = (t.constant(x), t.constant(gain), t.constant(bias));
    let out = t.layer_norm(x, g, b, axis, eps)?;
    Ok(t.to_tensor(out))
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let mut t = Tape::new();
    let x = t.constant(x);
    let out = t.gelu(x)?;
    Ok(t.to_tensor(out))
}

pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let mut t = Tape::new();
    let x = t.constant(logits);
    let out = t.cross_entropy(x, targets)?;
    Ok(t.value(out)[0])
}
