//! Small dense-network substrate with hand-written backpropagation.
//!
//! Layers keep their own gradient buffers. `forward` is pure and returns
//! whatever the matching `backward` needs; `backward` accumulates into the
//! gradient buffers and returns the gradient with respect to the input.

mod adam;
mod attention;
pub mod checkpoint;
mod dense;
mod embed;
mod gradcheck;
mod tensor;

pub use adam::AdamState;
pub use attention::{AttentionCache, MultiHeadAttention};
pub use dense::{Activation, DenseLayer, Mlp, MlpCache};
pub use embed::time_embed;
pub use gradcheck::{grad_check, GradCheckReport};
pub use tensor::{dot, matmul, matmul_nt, matmul_tn, softmax_rows, Tensor2};

use rand::Rng;

use crate::error::{Error, Result};

/// Borrowed view of one named parameter tensor and its gradient.
pub struct ParamRef<'a> {
    pub name: String,
    pub shape: (usize, usize),
    pub value: &'a [f64],
    pub grad: &'a [f64],
}

pub struct ParamMut<'a> {
    pub name: String,
    pub shape: (usize, usize),
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
}

/// Anything that owns trainable parameters.
///
/// Both methods must list parameters in the same, stable order.
pub trait Module {
    fn params(&self) -> Vec<ParamRef<'_>>;
    fn params_mut(&mut self) -> Vec<ParamMut<'_>>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(0.0);
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// All parameter values concatenated in declaration order.
    fn flat_values(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.value.iter().copied()).collect()
    }

    fn flat_grads(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.grad.iter().copied()).collect()
    }

    fn set_flat_values(&mut self, values: &[f64]) -> Result<()> {
        let total = self.num_params();
        if values.len() != total {
            return Err(Error::Config(format!(
                "expected {total} parameter values, got {}",
                values.len()
            )));
        }
        let mut at = 0;
        for p in self.params_mut() {
            let n = p.value.len();
            p.value.copy_from_slice(&values[at..at + n]);
            at += n;
        }
        Ok(())
    }
}

/// Re-labels child parameters as `prefix.name`.
pub(crate) fn prefixed<'a>(prefix: &str, params: Vec<ParamRef<'a>>) -> Vec<ParamRef<'a>> {
    params
        .into_iter()
        .map(|mut p| {
            p.name = format!("{prefix}.{}", p.name);
            p
        })
        .collect()
}

pub(crate) fn prefixed_mut<'a>(prefix: &str, params: Vec<ParamMut<'a>>) -> Vec<ParamMut<'a>> {
    params
        .into_iter()
        .map(|mut p| {
            p.name = format!("{prefix}.{}", p.name);
            p
        })
        .collect()
}

/// `target ← tau·source + (1 − tau)·target`, parameter by parameter.
pub fn soft_update(target: &mut dyn Module, source: &dyn Module, tau: f64) -> Result<()> {
    let src = source.params();
    let dst = target.params_mut();
    if src.len() != dst.len() {
        return Err(Error::Config(format!(
            "soft update between modules with {} and {} parameter tensors",
            src.len(),
            dst.len()
        )));
    }
    for (d, s) in dst.into_iter().zip(src) {
        if d.shape != s.shape {
            return Err(Error::Config(format!(
                "soft update shape mismatch on {}: {:?} vs {:?}",
                d.name, d.shape, s.shape
            )));
        }
        for (t, &v) in d.value.iter_mut().zip(s.value) {
            *t = tau * v + (1.0 - tau) * *t;
        }
    }
    Ok(())
}

/// Glorot-uniform matrix: entries in ±√(6 / (fan_in + fan_out)).
pub fn glorot_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor2 {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor2 { rows, cols, data }
}
