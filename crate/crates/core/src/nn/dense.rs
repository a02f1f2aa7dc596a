use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    glorot_uniform, matmul, matmul_nt, matmul_tn, prefixed, prefixed_mut, Module, ParamMut, ParamRef, Tensor2,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected layer `y = x·Wᵀ + b` with `W` stored out×in.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
    pub weight_grad: Tensor2,
    pub bias_grad: Vec<f64>,
}

impl DenseLayer {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: glorot_uniform(output, input, rng),
            bias: vec![0.0; output],
            weight_grad: Tensor2::zeros(output, input),
            bias_grad: vec![0.0; output],
        }
    }

    pub fn from_parts(weight: Tensor2, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows {
            return Err(Error::Config(format!(
                "bias length {} does not match {} outputs",
                bias.len(),
                weight.rows
            )));
        }
        Ok(Self {
            weight_grad: Tensor2::zeros(weight.rows, weight.cols),
            bias_grad: vec![0.0; bias.len()],
            weight,
            bias,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn forward(&self, x: &Tensor2) -> Tensor2 {
        assert_eq!(x.cols, self.input_dim(), "dense layer input width");
        let mut y = matmul_nt(x, &self.weight);
        for r in 0..y.rows {
            for (v, b) in y.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        y
    }

    /// Accumulates parameter gradients and returns `∂L/∂x`.
    pub fn backward(&mut self, x: &Tensor2, dy: &Tensor2) -> Tensor2 {
        self.weight_grad.add_assign(&matmul_tn(dy, x));
        for r in 0..dy.rows {
            for (g, d) in self.bias_grad.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        self.input_grad(dy)
    }

    /// `∂L/∂x` without touching the gradient buffers.
    pub fn input_grad(&self, dy: &Tensor2) -> Tensor2 {
        matmul(dy, &self.weight)
    }

    pub fn zero(&mut self) {
        self.weight.fill(0.0);
        self.bias.fill(0.0);
    }
}

impl Module for DenseLayer {
    fn params(&self) -> Vec<ParamRef<'_>> {
        vec![
            ParamRef {
                name: "weight".into(),
                shape: self.weight.shape(),
                value: &self.weight.data,
                grad: &self.weight_grad.data,
            },
            ParamRef {
                name: "bias".into(),
                shape: (1, self.bias.len()),
                value: &self.bias,
                grad: &self.bias_grad,
            },
        ]
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let shape = self.weight.shape();
        let blen = self.bias.len();
        vec![
            ParamMut {
                name: "weight".into(),
                shape,
                value: &mut self.weight.data,
                grad: &mut self.weight_grad.data,
            },
            ParamMut {
                name: "bias".into(),
                shape: (1, blen),
                value: &mut self.bias,
                grad: &mut self.bias_grad,
            },
        ]
    }
}

/// Stack of dense layers, each followed by its own activation.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
    pub activations: Vec<Activation>,
}

/// Per-layer inputs and post-activation outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Tensor2>,
    outputs: Vec<Tensor2>,
}

impl MlpCache {
    pub fn output(&self) -> &Tensor2 {
        self.outputs.last().expect("non-empty mlp")
    }
}

impl Mlp {
    /// `widths` lists input, hidden and output widths; one activation per layer.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], activations: &[Activation], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || activations.len() != widths.len() - 1 {
            return Err(Error::Config(format!(
                "mlp needs one activation per layer: {} widths, {} activations",
                widths.len(),
                activations.len()
            )));
        }
        let layers = widths.windows(2).map(|w| DenseLayer::new(w[0], w[1], rng)).collect();
        Ok(Self {
            layers,
            activations: activations.to_vec(),
        })
    }

    /// Hidden layers with `hidden` activation, final layer with `head`.
    pub fn with_head<R: Rng + ?Sized>(
        widths: &[usize],
        hidden: Activation,
        head: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let n = widths.len().saturating_sub(1);
        let mut acts = vec![hidden; n];
        if let Some(last) = acts.last_mut() {
            *last = head;
        }
        Self::new(widths, &acts, rng)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output_dim())
    }

    pub fn forward_cached(&self, x: &Tensor2) -> Result<MlpCache> {
        if x.cols != self.input_dim() {
            return Err(Error::Config(format!(
                "mlp input width {} does not match {}",
                x.cols,
                self.input_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (i, (layer, act)) in self.layers.iter().zip(&self.activations).enumerate() {
            let mut y = layer.forward(&cur);
            if *act != Activation::Identity {
                for v in y.data.iter_mut() {
                    *v = act.apply(*v);
                }
            }
            if !y.is_finite() {
                return Err(Error::Numerical(format!("non-finite activation in layer {i}")));
            }
            inputs.push(cur);
            cur = y.clone();
            outputs.push(y);
        }
        Ok(MlpCache { inputs, outputs })
    }

    pub fn forward(&self, x: &Tensor2) -> Result<Tensor2> {
        let mut cache = self.forward_cached(x)?;
        Ok(cache.outputs.pop().expect("non-empty mlp"))
    }

    /// Accumulates parameter gradients; returns `∂L/∂x`.
    pub fn backward(&mut self, cache: &MlpCache, dy: &Tensor2) -> Tensor2 {
        let mut grad = dy.clone();
        for i in (0..self.layers.len()).rev() {
            let act = self.activations[i];
            apply_activation_grad(act, &cache.outputs[i], &mut grad);
            grad = self.layers[i].backward(&cache.inputs[i], &grad);
        }
        grad
    }

    /// `∂L/∂x` through a frozen network; gradient buffers are untouched.
    pub fn input_grad(&self, cache: &MlpCache, dy: &Tensor2) -> Tensor2 {
        let mut grad = dy.clone();
        for i in (0..self.layers.len()).rev() {
            apply_activation_grad(self.activations[i], &cache.outputs[i], &mut grad);
            grad = self.layers[i].input_grad(&grad);
        }
        grad
    }

    /// Single-sample forward plus backward of `upstream`; returns the output
    /// and the input gradient.
    pub fn forward_backward(&mut self, input: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let cache = self.forward_cached(&Tensor2::row_vector(input))?;
        if upstream.len() != self.output_dim() {
            return Err(Error::Config(format!(
                "upstream gradient width {} does not match output {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        let dx = self.backward(&cache, &Tensor2::row_vector(upstream));
        Ok((cache.output().data.clone(), dx.data))
    }
}

fn apply_activation_grad(act: Activation, out: &Tensor2, grad: &mut Tensor2) {
    if act == Activation::Identity {
        return;
    }
    for (g, &y) in grad.data.iter_mut().zip(&out.data) {
        *g *= act.derivative_from_output(y);
    }
}

impl Module for Mlp {
    fn params(&self) -> Vec<ParamRef<'_>> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&format!("layer{i}"), l.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| prefixed_mut(&format!("layer{i}"), l.params_mut()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::par::stream_rng;

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = DenseLayer::from_parts(Tensor2::identity(3), vec![0.0; 3]).unwrap();
        let mut net = Mlp {
            layers: vec![layer],
            activations: vec![Activation::Identity],
        };
        let (out, dx) = net.forward_backward(&[1.5, -2.0, 0.25], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(out, vec![1.5, -2.0, 0.25]);
        assert_eq!(dx, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn dead_relu_gives_zero_output_and_grads() {
        let mut rng = stream_rng(1, 0);
        let mut layer = DenseLayer::new(3, 4, &mut rng);
        layer.weight.data.iter_mut().for_each(|w| *w = w.abs());
        layer.bias.fill(-0.1);
        let mut net = Mlp {
            layers: vec![layer],
            activations: vec![Activation::Relu],
        };
        // every pre-activation is negative for a non-positive input
        let (out, _) = net.forward_backward(&[-1.0, -2.0, -0.5], &[1.0; 4]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        assert!(net.flat_grads().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn tanh_net_input_grad_matches_central_differences() {
        let mut rng = stream_rng(11, 0);
        let mut net = Mlp::new(&[4, 6, 3], &[Activation::Tanh, Activation::Tanh], &mut rng).unwrap();
        let x = [0.3, -0.7, 1.1, 0.05];
        let up = [0.4, -1.2, 0.9];
        let (_, dx) = net.forward_backward(&x, &up).unwrap();
        let f = |x: &[f64]| -> f64 {
            let y = net.forward(&Tensor2::row_vector(x)).unwrap();
            y.data.iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let rel = (fd - dx[i]).abs() / fd.abs().max(dx[i].abs()).max(1e-8);
            assert!(rel < 1e-4, "input {i}: fd {fd} vs analytic {}", dx[i]);
        }
    }

    #[test]
    fn non_finite_activation_names_layer() {
        let mut rng = stream_rng(2, 0);
        let net = Mlp::new(&[2, 2, 2], &[Activation::Identity, Activation::Identity], &mut rng).unwrap();
        let err = net.forward(&Tensor2::row_vector(&[f64::NAN, 0.0])).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
    }
}
