use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    prefixed, prefixed_mut, time_embed, AttentionCache, DenseLayer, Module, MultiHeadAttention, ParamMut, ParamRef,
    Tensor2,
};
use crate::wni::WniFeature;

/// Shape of one noise predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmlpConfig {
    /// Width of the element being denoised.
    pub dim: usize,
    /// Number of earlier elements concatenated onto the input.
    pub arity: usize,
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub time_dim: usize,
    /// Width of one WNI row (attribute and value embeddings side by side).
    pub wni_width: usize,
    /// Input layer, attention block, `layers − 3` hidden layers, output layer.
    pub layers: usize,
}

impl AmlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 || self.heads == 0 || self.head_dim == 0 || self.wni_width == 0 {
            return Err(Error::Config("noise predictor widths must be positive".into()));
        }
        if self.layers < 3 {
            return Err(Error::Config(format!(
                "noise predictor needs at least 3 layers, got {}",
                self.layers
            )));
        }
        if !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "time embedding dimension {} is odd",
                self.time_dim
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.dim * (1 + self.arity) + self.time_dim
    }
}

/// Noise predictor: an MLP whose hidden state attends over the WNI rows.
///
/// `h0 = relu(W_in·[x_t ‖ emb(t) ‖ cond])`, `h1 = h0 + MHA(h0, U)`, then ReLU
/// hidden layers and a linear output head.
#[derive(Debug, Clone)]
pub struct AmlpNet {
    pub config: AmlpConfig,
    pub input: DenseLayer,
    pub attention: MultiHeadAttention,
    pub hidden: Vec<DenseLayer>,
    pub output: DenseLayer,
}

/// Forward intermediates for [`AmlpNet::backward`].
#[derive(Debug, Clone)]
pub struct AmlpCache {
    input: Tensor2,
    h0: Tensor2,
    attention: AttentionCache,
    /// Input to each hidden layer followed by the input to the output head.
    acts: Vec<Tensor2>,
}

impl AmlpNet {
    pub fn new<R: Rng + ?Sized>(config: AmlpConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let input = DenseLayer::new(config.input_width(), h, rng);
        let attention = MultiHeadAttention::new(h, config.wni_width, config.heads, config.head_dim, h, rng);
        let hidden = (0..config.layers - 3).map(|_| DenseLayer::new(h, h, rng)).collect();
        let output = DenseLayer::new(h, config.dim, rng);
        Ok(Self {
            config,
            input,
            attention,
            hidden,
            output,
        })
    }

    /// Assembles the `[x_t ‖ emb(t) ‖ cond]` input rows.
    fn input_rows(&self, x_t: &Tensor2, steps: &[usize], cond: Option<&Tensor2>) -> Result<Tensor2> {
        let c = &self.config;
        let b = x_t.rows;
        if x_t.cols != c.dim || steps.len() != b {
            return Err(Error::Config(format!(
                "noise predictor expects {b} steps and width {}, got {} steps and width {}",
                c.dim,
                steps.len(),
                x_t.cols
            )));
        }
        let cond_width = cond.map_or(0, |t| t.cols);
        if cond_width != c.arity * c.dim || cond.is_some_and(|t| t.rows != b) {
            return Err(Error::Config(format!(
                "noise predictor has conditioning arity {}, got {cond_width} conditioning columns",
                c.arity
            )));
        }
        let mut rows = Tensor2::zeros(b, c.input_width());
        let mut cache: Vec<(usize, Vec<f64>)> = Vec::new();
        for (r, &t) in steps.iter().enumerate() {
            let emb = match cache.iter().find(|(k, _)| *k == t) {
                Some((_, e)) => e.clone(),
                None => {
                    let e = time_embed(t, c.time_dim)?;
                    cache.push((t, e.clone()));
                    e
                }
            };
            let row = rows.row_mut(r);
            row[..c.dim].copy_from_slice(x_t.row(r));
            row[c.dim..c.dim + c.time_dim].copy_from_slice(&emb);
            if let Some(cond) = cond {
                row[c.dim + c.time_dim..].copy_from_slice(cond.row(r));
            }
        }
        Ok(rows)
    }

    /// Batched prediction. `wni` stacks one WNI matrix per row of `x_t`.
    pub fn forward(
        &self,
        x_t: &Tensor2,
        steps: &[usize],
        cond: Option<&Tensor2>,
        wni: &Tensor2,
    ) -> Result<(Tensor2, AmlpCache)> {
        let input = self.input_rows(x_t, steps, cond)?;
        let h0 = self.input.forward(&input).map(relu);
        let (att, attention) = self.attention.forward_grouped(&h0, wni, x_t.rows)?;
        let mut h = h0.clone();
        h.add_assign(&att);
        let mut acts = Vec::with_capacity(self.hidden.len() + 1);
        for layer in &self.hidden {
            let next = layer.forward(&h).map(relu);
            acts.push(h);
            h = next;
        }
        let out = self.output.forward(&h);
        acts.push(h);
        if !out.is_finite() {
            return Err(Error::Numerical("non-finite noise prediction".into()));
        }
        Ok((
            out,
            AmlpCache {
                input,
                h0,
                attention,
                acts,
            },
        ))
    }

    /// Accumulates parameter gradients for upstream gradient `dout`.
    pub fn backward(&mut self, cache: &AmlpCache, dout: &Tensor2) {
        let n = self.hidden.len();
        let mut dh = self.output.backward(&cache.acts[n], dout);
        for i in (0..n).rev() {
            // acts[i + 1] is relu output of hidden layer i
            let out = &cache.acts[i + 1];
            for (d, &y) in dh.data.iter_mut().zip(&out.data) {
                if y <= 0.0 {
                    *d = 0.0;
                }
            }
            dh = self.hidden[i].backward(&cache.acts[i], &dh);
        }
        let (datt, _) = self.attention.backward(&cache.attention, &dh);
        dh.add_assign(&datt);
        for (d, &y) in dh.data.iter_mut().zip(&cache.h0.data) {
            if y <= 0.0 {
                *d = 0.0;
            }
        }
        self.input.backward(&cache.input, &dh);
    }
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Stacks `wni` once per batch row, ready for grouped attention.
pub fn repeat_wni(wni: &WniFeature, count: usize) -> Tensor2 {
    let rows = wni.rows();
    let mut data = Vec::with_capacity(count * rows * wni.width());
    for _ in 0..count {
        data.extend_from_slice(wni.flatten());
    }
    Tensor2 {
        rows: count * rows,
        cols: wni.width(),
        data,
    }
}

/// Single-sample noise prediction with the conditioning elements listed in
/// chain order.
pub fn amlp_predict(net: &AmlpNet, x_t: &[f64], t: usize, wni: &WniFeature, cond: &[&[f64]]) -> Result<Vec<f64>> {
    if cond.len() != net.config.arity {
        return Err(Error::Config(format!(
            "noise predictor has conditioning arity {}, got {} elements",
            net.config.arity,
            cond.len()
        )));
    }
    let cond_row: Vec<f64> = cond.iter().flat_map(|c| c.iter().copied()).collect();
    let cond_t = (!cond.is_empty()).then(|| Tensor2::row_vector(&cond_row));
    let (out, _) = net.forward(&Tensor2::row_vector(x_t), &[t], cond_t.as_ref(), &wni.matrix)?;
    Ok(out.data)
}

impl Module for AmlpNet {
    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = prefixed("input", self.input.params());
        out.extend(prefixed("attention", self.attention.params()));
        for (i, l) in self.hidden.iter().enumerate() {
            out.extend(prefixed(&format!("hidden{i}"), l.params()));
        }
        out.extend(prefixed("output", self.output.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = prefixed_mut("input", self.input.params_mut());
        out.extend(prefixed_mut("attention", self.attention.params_mut()));
        for (i, l) in self.hidden.iter_mut().enumerate() {
            out.extend(prefixed_mut(&format!("hidden{i}"), l.params_mut()));
        }
        out.extend(prefixed_mut("output", self.output.params_mut()));
        out
    }
}
