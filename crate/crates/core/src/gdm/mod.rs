//! Intent-conditioned denoising diffusion over transition tuples.
//!
//! Four noise predictors share one schedule. They are chained: the action
//! model sees the state, the reward model sees state and action, and the
//! next-state model sees all three. Sampling clips every reverse step to the
//! target intent's knowledge-base bounds.

mod amlp;
mod schedule;

pub use amlp::{amlp_predict, repeat_wni, AmlpCache, AmlpConfig, AmlpNet};
pub use schedule::{forward_diffuse, reverse_mean, NoiseSchedule};

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::{Bkb, Element, Trajectory};
use crate::io;
use crate::nn::checkpoint::{Checkpoint, CheckpointMeta};
use crate::nn::{AdamState, Module, Tensor2};
use crate::par;
use crate::wni::WniFeature;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GdmConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub wni_dim: usize,
    pub time_dim: usize,
    pub layers: usize,
    pub learning_rate: f64,
    pub train_steps: usize,
    pub batch_size: usize,
}

impl Default for GdmConfig {
    fn default() -> Self {
        Self {
            steps: 5,
            beta_start: 1e-4,
            beta_end: 0.02,
            hidden: 64,
            heads: 4,
            head_dim: 8,
            wni_dim: 16,
            time_dim: 16,
            layers: 4,
            learning_rate: 3e-3,
            train_steps: 2000,
            batch_size: 64,
        }
    }
}

impl GdmConfig {
    pub fn validate(&self) -> Result<()> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)?;
        if self.batch_size == 0 {
            return Err(Error::Config("gdm batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "gdm learning rate {} must be positive",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// One noise predictor with its optimiser.
#[derive(Debug, Clone)]
pub struct ElementModel {
    pub element: Element,
    pub net: AmlpNet,
    pub optimizer: AdamState,
}

/// The four chained noise predictors.
#[derive(Debug, Clone)]
pub struct GdmModelSet {
    pub config: GdmConfig,
    pub schedule: NoiseSchedule,
    pub models: Vec<ElementModel>,
    /// Training steps taken so far.
    pub step: u64,
}

/// Generation seeds are split into chunks of this many trajectories, each
/// with its own RNG stream.
pub const GENERATION_CHUNK: usize = 256;

impl GdmModelSet {
    /// Fresh models for `dim`-wide elements and WNI rows of `wni_width`.
    pub fn new<R: Rng + ?Sized>(config: GdmConfig, dim: usize, wni_width: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let schedule = NoiseSchedule::linear(config.steps, config.beta_start, config.beta_end)?;
        let models = Element::ALL
            .iter()
            .map(|&element| {
                let net = AmlpNet::new(
                    AmlpConfig {
                        dim,
                        arity: element.index(),
                        hidden: config.hidden,
                        heads: config.heads,
                        head_dim: config.head_dim,
                        time_dim: config.time_dim,
                        wni_width,
                        layers: config.layers,
                    },
                    rng,
                )?;
                Ok(ElementModel {
                    element,
                    net,
                    optimizer: AdamState::new(config.learning_rate),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            schedule,
            models,
            step: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.models[0].net.config.dim
    }

    pub fn wni_width(&self) -> usize {
        self.models[0].net.config.wni_width
    }

    pub fn net(&self, e: Element) -> &AmlpNet {
        &self.models[e.index()].net
    }

    /// One Adam step on every element model. `batch` holds normalised
    /// trajectories and `wnis` the matching intent features. Earlier elements
    /// come from the data (teacher forcing). Returns the four MSE losses.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        batch: &[&Trajectory],
        wnis: &[&WniFeature],
        rng: &mut R,
    ) -> Result<[f64; 4]> {
        let b = batch.len();
        if b == 0 || wnis.len() != b {
            return Err(Error::Config(format!(
                "training batch has {b} trajectories and {} intent features",
                wnis.len()
            )));
        }
        let m = self.dim();
        let t_max = self.schedule.steps();
        let mut kv = Tensor2::zeros(0, self.wni_width());
        for w in wnis {
            kv.data.extend_from_slice(w.flatten());
            kv.rows += w.rows();
        }
        if !kv.rows.is_multiple_of(b) {
            return Err(Error::Config("intent features in one batch differ in row count".into()));
        }
        // Noise and steps are drawn up front so the result does not depend on
        // how the four updates are scheduled.
        let draws: Vec<(Vec<usize>, Vec<f64>)> = (0..4)
            .map(|_| {
                let steps = (0..b).map(|_| rng.random_range(1..=t_max)).collect();
                let eps = (0..b * m).map(|_| StandardNormal.sample(rng)).collect();
                (steps, eps)
            })
            .collect();
        let elements: Vec<Tensor2> = Element::ALL
            .iter()
            .map(|&e| {
                let mut t = Tensor2::zeros(b, m);
                for (r, traj) in batch.iter().enumerate() {
                    let v = traj.element(e);
                    if v.len() != m {
                        return Err(Error::Config(format!(
                            "element {e} has width {}, models expect {m}",
                            v.len()
                        )));
                    }
                    t.row_mut(r).copy_from_slice(v);
                }
                Ok(t)
            })
            .collect::<Result<_>>()?;
        let schedule = &self.schedule;
        let step = self.step as usize;
        let results = par::map_mut(&mut self.models, |i, model| -> Result<f64> {
            let (steps, eps) = &draws[i];
            let x0 = &elements[i];
            let mut x_t = Tensor2::zeros(b, m);
            for r in 0..b {
                let row = forward_diffuse(x0.row(r), steps[r], &eps[r * m..(r + 1) * m], schedule)?;
                x_t.row_mut(r).copy_from_slice(&row);
            }
            let cond = (i > 0).then(|| {
                let parts: Vec<&Tensor2> = elements[..i].iter().collect();
                Tensor2::hcat(&parts)
            });
            let cond = cond.transpose()?;
            let (pred, cache) = model
                .net
                .forward(&x_t, steps, cond.as_ref(), &kv)
                .map_err(|e| match e {
                    Error::Numerical(detail) => Error::Divergence {
                        step,
                        detail: format!("{} model: {detail}", model.element),
                    },
                    other => other,
                })?;
            let n = (b * m) as f64;
            let mut loss = 0.0;
            let mut grad = Tensor2::zeros(b, m);
            for ((g, p), e) in grad.data.iter_mut().zip(&pred.data).zip(eps) {
                let d = p - e;
                loss += d * d;
                *g = 2.0 * d / n;
            }
            loss /= n;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("{} model loss is {loss}", model.element),
                });
            }
            model.net.zero_grad();
            model.net.backward(&cache, &grad);
            model.optimizer.step(&mut model.net)?;
            Ok(loss)
        });
        let mut losses = [0.0; 4];
        for (slot, r) in losses.iter_mut().zip(results) {
            *slot = r?;
        }
        self.step += 1;
        Ok(losses)
    }

    pub fn checkpoint(&self, meta: CheckpointMeta) -> Checkpoint {
        let mut ck = Checkpoint::new(CheckpointMeta {
            step_count: self.step,
            ..meta
        });
        for m in &self.models {
            ck.add(&format!("eps_{}", m.element), &m.net);
        }
        ck
    }

    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        for m in &mut self.models {
            ck.restore(&format!("eps_{}", m.element), &mut m.net)?;
        }
        self.step = ck.meta.step_count;
        Ok(())
    }

    /// Writes the configuration, shapes and weights; returns the file hash.
    pub fn save(&self, path: &Path, meta: CheckpointMeta) -> Result<String> {
        io::write_json(
            path,
            &ModelFile {
                format_version: MODEL_VERSION,
                config: self.config.clone(),
                dim: self.dim(),
                wni_width: self.wni_width(),
                checkpoint: self.checkpoint(meta),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ModelFile = io::read_json(path)?;
        io::check_version(path, file.format_version, MODEL_VERSION)?;
        let mut models = Self::new(file.config, file.dim, file.wni_width, &mut par::stream_rng(0, 0))?;
        models.restore(&file.checkpoint)?;
        Ok(models)
    }
}

pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    config: GdmConfig,
    dim: usize,
    wni_width: usize,
    checkpoint: Checkpoint,
}

/// Trains on normalised trajectories for `steps` iterations, sampling
/// minibatches with replacement. `observe(step, losses)` sees every step.
pub fn train_gdm<R: Rng + ?Sized>(
    models: &mut GdmModelSet,
    data: &[Trajectory],
    wni: &BTreeMap<u8, WniFeature>,
    steps: usize,
    rng: &mut R,
    mut observe: impl FnMut(usize, [f64; 4]),
) -> Result<Vec<[f64; 4]>> {
    if data.is_empty() {
        return Err(Error::Degenerate("no training trajectories".into()));
    }
    let batch_size = models.config.batch_size;
    let mut history = Vec::with_capacity(steps);
    for s in 0..steps {
        let idx: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..data.len())).collect();
        let batch: Vec<&Trajectory> = idx.iter().map(|&i| &data[i]).collect();
        let feats = batch
            .iter()
            .map(|t| {
                wni.get(&t.intent_id)
                    .ok_or_else(|| Error::Lookup(format!("no intent features for intent {}", t.intent_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let losses = models.train_step(&batch, &feats, rng)?;
        observe(s, losses);
        history.push(losses);
    }
    Ok(history)
}

/// Denoising step with optional clamping; see [`reverse_step_clipped`].
#[allow(clippy::too_many_arguments)]
fn reverse_step<R: Rng + ?Sized>(
    net: &AmlpNet,
    x_t: &Tensor2,
    t: usize,
    wni: &Tensor2,
    cond: Option<&Tensor2>,
    schedule: &NoiseSchedule,
    bounds: Option<(f64, f64)>,
    rng: &mut R,
) -> Result<Tensor2> {
    let alpha = schedule.alpha(t)?;
    let alpha_bar = schedule.alpha_bar(t)?;
    let sigma = schedule.sigma(t)?;
    let steps = vec![t; x_t.rows];
    let (eps_hat, _) = net.forward(x_t, &steps, cond, wni)?;
    let mut out = Tensor2::zeros(x_t.rows, x_t.cols);
    for ((o, &x), &e) in out.data.iter_mut().zip(&x_t.data).zip(&eps_hat.data) {
        let mut v = reverse_mean(x, e, alpha, alpha_bar);
        if t > 1 {
            let z: f64 = StandardNormal.sample(rng);
            v += sigma * z;
        }
        if let Some((lo, hi)) = bounds {
            v = v.clamp(lo, hi);
        }
        *o = v;
    }
    Ok(out)
}

/// One reverse step `x_t → x_{t−1}`, clamped to `[lo, hi]`. The stochastic
/// term is dropped at `t = 1`.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step_clipped<R: Rng + ?Sized>(
    net: &AmlpNet,
    x_t: &Tensor2,
    t: usize,
    wni: &Tensor2,
    cond: Option<&Tensor2>,
    schedule: &NoiseSchedule,
    bounds: (f64, f64),
    rng: &mut R,
) -> Result<Tensor2> {
    if bounds.0 >= bounds.1 || bounds.0.is_nan() || bounds.1.is_nan() {
        return Err(Error::Config(format!(
            "clip bounds ({}, {}) are empty",
            bounds.0, bounds.1
        )));
    }
    reverse_step(net, x_t, t, wni, cond, schedule, Some(bounds), rng)
}

/// Where a generated dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationMeta {
    pub target_intent: u8,
    pub seed: u64,
    pub model_hash: String,
    pub clipped: bool,
}

/// Generated transitions in raw units.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedDataset {
    pub trajectories: Vec<Trajectory>,
    pub meta: GenerationMeta,
}

/// Chained sampling of `count` transitions for one intent.
///
/// Trajectories are produced in chunks of [`GENERATION_CHUNK`]; chunk `c`
/// draws from stream `c` of `seed`. With `clip`, every reverse step is
/// clamped to the normalised bounds and the denormalised output to the raw
/// bounds.
#[allow(clippy::too_many_arguments)]
pub fn generate_trajectories(
    models: &GdmModelSet,
    target_wni: &WniFeature,
    target_intent: u8,
    bkb: &Bkb,
    count: usize,
    seed: u64,
    clip: bool,
    model_hash: &str,
) -> Result<GeneratedDataset> {
    let mut norm_bounds = Vec::with_capacity(4);
    let mut raw_bounds = Vec::with_capacity(4);
    for e in Element::ALL {
        norm_bounds.push(bkb.bounds(target_intent, e)?);
        raw_bounds.push(bkb.raw_bounds(target_intent, e)?);
    }
    let m = models.dim();
    let chunks = count.div_ceil(GENERATION_CHUNK);
    let results = par::map_indexed(chunks, |c| -> Result<Vec<Trajectory>> {
        let mut rng = par::stream_rng(seed, c as u64);
        let b = GENERATION_CHUNK.min(count - c * GENERATION_CHUNK);
        let kv = repeat_wni(target_wni, b);
        let mut done: Vec<Tensor2> = Vec::with_capacity(4);
        for e in Element::ALL {
            let data = (0..b * m).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut x = Tensor2::from_vec(b, m, data)?;
            let cond = if done.is_empty() {
                None
            } else {
                Some(Tensor2::hcat(&done.iter().collect::<Vec<_>>())?)
            };
            let bounds = clip.then_some(norm_bounds[e.index()]);
            for t in (1..=models.schedule.steps()).rev() {
                x = reverse_step(
                    models.net(e),
                    &x,
                    t,
                    &kv,
                    cond.as_ref(),
                    &models.schedule,
                    bounds,
                    &mut rng,
                )?;
            }
            done.push(x);
        }
        let mut out = Vec::with_capacity(b);
        for r in 0..b {
            let mut traj = Trajectory {
                intent_id: target_intent,
                s: Vec::new(),
                a: Vec::new(),
                r: Vec::new(),
                s_next: Vec::new(),
            };
            for e in Element::ALL {
                let mut v = bkb.denormalize(done[e.index()].row(r), e)?;
                if clip {
                    let (lo, hi) = raw_bounds[e.index()];
                    v.iter_mut().for_each(|x| *x = x.clamp(lo, hi));
                }
                *traj.element_mut(e) = v;
            }
            out.push(traj);
        }
        Ok(out)
    });
    let mut trajectories = Vec::with_capacity(count);
    for r in results {
        trajectories.extend(r?);
    }
    Ok(GeneratedDataset {
        trajectories,
        meta: GenerationMeta {
            target_intent,
            seed,
            model_hash: model_hash.to_owned(),
            clipped: clip,
        },
    })
}

/// Fraction of generated values inside their intent's raw-unit bounds, per
/// `(intent, element)`.
pub fn distribution_accuracy(generated: &[Trajectory], bkb: &Bkb) -> Result<BTreeMap<(u8, Element), f64>> {
    let mut counts: BTreeMap<(u8, Element), (usize, usize)> = BTreeMap::new();
    for t in generated {
        for e in Element::ALL {
            let (lo, hi) = bkb.raw_bounds(t.intent_id, e)?;
            let c = counts.entry((t.intent_id, e)).or_default();
            for &v in t.element(e) {
                c.1 += 1;
                if lo <= v && v <= hi {
                    c.0 += 1;
                }
            }
        }
    }
    Ok(counts
        .into_iter()
        .map(|(k, (inside, total))| (k, inside as f64 / total.max(1) as f64))
        .collect())
}
