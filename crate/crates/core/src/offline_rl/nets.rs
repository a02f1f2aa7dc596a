use rand::Rng;

use crate::error::Result;
use crate::nn::{prefixed, prefixed_mut, Activation, DenseLayer, Mlp, MlpCache, Module, ParamMut, ParamRef, Tensor2};

/// Bounds applied to the encoder's log standard deviation.
pub const LOG_STD_RANGE: (f64, f64) = (-4.0, 4.0);

/// `Σ (μ² + σ² − log σ² − 1) / 2`: KL divergence of a diagonal Gaussian
/// from the standard normal.
pub fn gaussian_kl(mean: &[f64], log_std: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .map(|(m, ls)| (m * m + (2.0 * ls).exp() - 2.0 * ls - 1.0) / 2.0)
        .sum()
}

/// `[s ‖ u − 1]`: the state next to the action's offset from the fair share.
pub fn state_action(s: &Tensor2, u: &Tensor2) -> Tensor2 {
    let m = s.cols + u.cols;
    let mut out = Tensor2::zeros(s.rows, m);
    for r in 0..s.rows {
        let row = out.row_mut(r);
        row[..s.cols].copy_from_slice(s.row(r));
        for (o, v) in row[s.cols..].iter_mut().zip(u.row(r)) {
            *o = v - 1.0;
        }
    }
    out
}

/// Conditional VAE over actions: encoder `(s, u) → (μ, log σ)`, decoder
/// `(s, z) → u` with a tanh head scaled onto `[0, u_max]`.
#[derive(Debug, Clone)]
pub struct VaePolicy {
    pub encoder: Mlp,
    pub mean: DenseLayer,
    pub log_std: DenseLayer,
    pub decoder: Mlp,
    pub u_max: f64,
}

/// Reconstruction and KL terms of one VAE step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeLosses {
    pub reconstruction: f64,
    /// Per-sample KL summed over latent dimensions, averaged over the batch.
    pub kl: f64,
}

impl VaePolicy {
    pub fn new<R: Rng + ?Sized>(dim: usize, latent: usize, hidden: usize, u_max: f64, rng: &mut R) -> Result<Self> {
        Ok(Self {
            encoder: Mlp::with_head(&[2 * dim, hidden, hidden], Activation::Relu, Activation::Relu, rng)?,
            mean: DenseLayer::new(hidden, latent, rng),
            log_std: DenseLayer::new(hidden, latent, rng),
            decoder: Mlp::with_head(
                &[dim + latent, hidden, hidden, dim],
                Activation::Relu,
                Activation::Tanh,
                rng,
            )?,
            u_max,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.mean.output_dim()
    }

    fn decoder_input(s: &Tensor2, z: &Tensor2) -> Tensor2 {
        Tensor2::hcat(&[s, z]).expect("state and latent rows agree")
    }

    /// Decodes latents into actions.
    pub fn decode(&self, s: &Tensor2, z: &Tensor2) -> Result<Tensor2> {
        let t = self.decoder.forward(&Self::decoder_input(s, z))?;
        let half = self.u_max / 2.0;
        Ok(t.map(|v| half * (v + 1.0)))
    }

    /// Accumulates gradients of `recon + kl_weight·KL/latent` for the batch,
    /// where `recon` is the mean squared reconstruction error; `noise` holds
    /// the reparameterisation draws.
    pub fn accumulate(&mut self, s: &Tensor2, u: &Tensor2, noise: &Tensor2, kl_weight: f64) -> Result<VaeLosses> {
        let b = s.rows;
        let latent = self.latent_dim();
        let enc = self.encoder.forward_cached(&state_action(s, u))?;
        let h = enc.output();
        let mu = self.mean.forward(h);
        let ls_raw = self.log_std.forward(h);
        let ls = ls_raw.map(|v| v.clamp(LOG_STD_RANGE.0, LOG_STD_RANGE.1));
        let sigma = ls.map(f64::exp);
        let mut z = Tensor2::zeros(b, latent);
        for i in 0..z.data.len() {
            z.data[i] = mu.data[i] + sigma.data[i] * noise.data[i];
        }
        let dec: MlpCache = self.decoder.forward_cached(&Self::decoder_input(s, &z))?;
        let t = dec.output();
        let half = self.u_max / 2.0;
        let n = (b * u.cols) as f64;
        let mut recon = 0.0;
        let mut dt = Tensor2::zeros(b, u.cols);
        for i in 0..t.data.len() {
            let d = half * (t.data[i] + 1.0) - u.data[i];
            recon += d * d;
            dt.data[i] = 2.0 * d / n * half;
        }
        recon /= n;
        let mut kl = 0.0;
        for r in 0..b {
            kl += gaussian_kl(mu.row(r), ls.row(r));
        }
        kl /= b as f64;

        let dinput = self.decoder.backward(&dec, &dt);
        let dz = dinput.slice_cols(s.cols, latent);
        let c = kl_weight / (latent as f64 * b as f64);
        let mut dmu = Tensor2::zeros(b, latent);
        let mut dls = Tensor2::zeros(b, latent);
        for i in 0..dz.data.len() {
            dmu.data[i] = dz.data[i] + c * mu.data[i];
            let inside = ls_raw.data[i] > LOG_STD_RANGE.0 && ls_raw.data[i] < LOG_STD_RANGE.1;
            dls.data[i] = if inside {
                dz.data[i] * sigma.data[i] * noise.data[i] + c * (sigma.data[i] * sigma.data[i] - 1.0)
            } else {
                0.0
            };
        }
        let mut dh = self.mean.backward(h, &dmu);
        dh.add_assign(&self.log_std.backward(h, &dls));
        self.encoder.backward(&enc, &dh);
        Ok(VaeLosses {
            reconstruction: recon,
            kl,
        })
    }
}

impl Module for VaePolicy {
    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = prefixed("encoder", self.encoder.params());
        out.extend(prefixed("mean", self.mean.params()));
        out.extend(prefixed("log_std", self.log_std.params()));
        out.extend(prefixed("decoder", self.decoder.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = prefixed_mut("encoder", self.encoder.params_mut());
        out.extend(prefixed_mut("mean", self.mean.params_mut()));
        out.extend(prefixed_mut("log_std", self.log_std.params_mut()));
        out.extend(prefixed_mut("decoder", self.decoder.params_mut()));
        out
    }
}

/// Bounded correction `ξ(s, u) = Φ·tanh(·)` added to decoded actions.
#[derive(Debug, Clone)]
pub struct PerturbNet {
    pub net: Mlp,
    pub phi: f64,
}

impl PerturbNet {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, phi: f64, rng: &mut R) -> Result<Self> {
        Ok(Self {
            net: Mlp::with_head(&[2 * dim, hidden, hidden, dim], Activation::Relu, Activation::Tanh, rng)?,
            phi,
        })
    }

    /// Returns `u + ξ(s, u)` and the cache needed to backpropagate into ξ.
    pub fn apply(&self, s: &Tensor2, u: &Tensor2) -> Result<(Tensor2, MlpCache)> {
        let cache = self.net.forward_cached(&state_action(s, u))?;
        let mut out = u.clone();
        for (o, x) in out.data.iter_mut().zip(&cache.output().data) {
            *o += self.phi * x;
        }
        Ok((out, cache))
    }

    pub fn perturbation(&self, s: &Tensor2, u: &Tensor2) -> Result<Tensor2> {
        Ok(self.net.forward(&state_action(s, u))?.map(|x| self.phi * x))
    }

    /// Backpropagates `∂L/∂(u + ξ)` into the perturbation parameters, with
    /// the decoded action held fixed.
    pub fn backward(&mut self, cache: &MlpCache, dout: &Tensor2) {
        let scaled = dout.map(|d| d * self.phi);
        self.net.backward(cache, &scaled);
    }
}

impl Module for PerturbNet {
    fn params(&self) -> Vec<ParamRef<'_>> {
        self.net.params()
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        self.net.params_mut()
    }
}

/// State-action value network `(s, u) → Q`.
pub fn q_network<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Result<Mlp> {
    Mlp::with_head(
        &[2 * dim, hidden, hidden, 1],
        Activation::Relu,
        Activation::Identity,
        rng,
    )
}
