//! Water-filling expert, expert trajectory collection and the background
//! knowledge base (normalisation moments plus per-intent value bounds).

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{channel_rates, sample_gains, EnvConfig, IntentSpec};
use crate::error::{Error, Result};
use crate::{io, par};

/// Optimal allocation of `total_power` over channels with the given gains:
/// `p_m = max(0, μ − n0/g_m)` with the water level μ found by bisection.
///
/// The returned allocation never exceeds the budget; it falls short of it by
/// at most a few ulps.
pub fn waterfill(gains: &[f64], total_power: f64, noise_power: f64) -> Result<Vec<f64>> {
    if gains.is_empty() {
        return Err(Error::Domain("no channels to allocate".into()));
    }
    if let Some(g) = gains.iter().find(|&&g| !(g > 0.0)) {
        return Err(Error::Domain(format!("channel gain must be positive, got {g}")));
    }
    if !(total_power > 0.0) {
        return Err(Error::Domain(format!(
            "total power must be positive, got {total_power}"
        )));
    }
    let floors: Vec<f64> = gains.iter().map(|g| noise_power / g).collect();
    let allocated = |level: f64| -> f64 { floors.iter().map(|f| (level - f).max(0.0)).sum() };
    let mut lo = floors.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = floors.iter().copied().fold(f64::NEG_INFINITY, f64::max) + total_power;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if allocated(mid) > total_power {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(floors.iter().map(|f| (lo - f).max(0.0)).collect())
}

/// The four parts of a transition tuple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Element {
    #[serde(rename = "s")]
    State,
    #[serde(rename = "a")]
    Action,
    #[serde(rename = "r")]
    Reward,
    #[serde(rename = "s_next")]
    NextState,
}

impl Element {
    pub const ALL: [Element; 4] = [Element::State, Element::Action, Element::Reward, Element::NextState];

    pub fn name(self) -> &'static str {
        match self {
            Element::State => "s",
            Element::Action => "a",
            Element::Reward => "r",
            Element::NextState => "s_next",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Element::ALL
            .into_iter()
            .find(|e| e.name() == name)
            .ok_or_else(|| Error::Lookup(format!("unknown trajectory element {name:?}")))
    }

    /// Position in the generation chain, equal to the number of earlier
    /// elements it is conditioned on.
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One MDP transition of per-channel vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    #[serde(rename = "intent")]
    pub intent_id: u8,
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: Vec<f64>,
    pub s_next: Vec<f64>,
}

impl Trajectory {
    pub fn element(&self, e: Element) -> &[f64] {
        match e {
            Element::State => &self.s,
            Element::Action => &self.a,
            Element::Reward => &self.r,
            Element::NextState => &self.s_next,
        }
    }

    pub fn element_mut(&mut self, e: Element) -> &mut Vec<f64> {
        match e {
            Element::State => &mut self.s,
            Element::Action => &mut self.a,
            Element::Reward => &mut self.r,
            Element::NextState => &mut self.s_next,
        }
    }

    /// Scalar reward: the total spectral efficiency of the transition.
    pub fn total_reward(&self) -> f64 {
        self.r.iter().sum()
    }
}

/// Water-filling transitions for every intent, `count_per_intent` each.
///
/// Trajectory `i` draws from its own RNG stream, so the result does not
/// depend on the worker count.
pub fn collect_expert(
    specs: &[IntentSpec],
    config: &EnvConfig,
    count_per_intent: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if count_per_intent == 0 {
        return Err(Error::Config("count_per_intent must be at least 1".into()));
    }
    config.validate()?;
    for s in specs {
        s.validate()?;
    }
    let total = specs.len() * count_per_intent;
    par::map_indexed(total, |i| {
        let spec = &specs[i / count_per_intent];
        let mut rng = par::stream_rng(seed, i as u64);
        let state = sample_gains(spec, config, &mut rng);
        let power = config.total_power_options[rng.random_range(0..config.total_power_options.len())];
        let a = waterfill(&state.gains, power, config.noise_power)?;
        let r = channel_rates(&state.gains, &a, config.noise_power)?;
        let next = sample_gains(spec, config, &mut rng);
        Ok(Trajectory {
            intent_id: spec.intent_id,
            s: state.gains,
            a,
            r,
            s_next: next.gains,
        })
    })
    .into_iter()
    .collect()
}

/// Hash of the canonical JSON Lines serialisation of the trajectories.
pub fn dataset_hash(data: &[Trajectory]) -> String {
    let mut bytes = Vec::new();
    for t in data {
        serde_json::to_writer(&mut bytes, t).expect("trajectory serialises");
        bytes.push(b'\n');
    }
    io::sha256_hex(&bytes)
}

pub const BKB_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BkbMeta {
    pub dataset_hash: String,
    pub counts: BTreeMap<String, usize>,
    pub total: usize,
    #[serde(default)]
    pub config_hash: String,
    #[serde(default)]
    pub seed: u64,
}

/// Background knowledge base: global z-score moments per element and the
/// per-intent `[α, β]` bounds of the normalised expert data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bkb {
    pub format_version: u32,
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
    pub bounds: BTreeMap<String, BTreeMap<String, [f64; 2]>>,
    pub meta: BkbMeta,
}

pub fn intent_key(intent_id: u8) -> String {
    format!("intent_{intent_id}")
}

/// Width added on each side of a bound that collapsed to a single value.
const DEGENERATE_PAD: f64 = 1e-6;

impl Bkb {
    fn moment(map: &BTreeMap<String, f64>, e: Element) -> Result<f64> {
        map.get(e.name())
            .copied()
            .ok_or_else(|| Error::Lookup(format!("knowledge base has no statistics for element {e}")))
    }

    pub fn mean(&self, e: Element) -> Result<f64> {
        Self::moment(&self.mean, e)
    }

    pub fn std(&self, e: Element) -> Result<f64> {
        Self::moment(&self.std, e)
    }

    /// Normalised bounds for `(intent, element)`.
    pub fn bounds(&self, intent_id: u8, e: Element) -> Result<(f64, f64)> {
        let b = self
            .bounds
            .get(&intent_key(intent_id))
            .and_then(|m| m.get(e.name()))
            .ok_or_else(|| Error::Lookup(format!("no bounds for intent {intent_id}, element {e}")))?;
        Ok((b[0], b[1]))
    }

    /// Bounds mapped back to raw units.
    pub fn raw_bounds(&self, intent_id: u8, e: Element) -> Result<(f64, f64)> {
        let (lo, hi) = self.bounds(intent_id, e)?;
        let (m, s) = (self.mean(e)?, self.std(e)?);
        Ok((lo * s + m, hi * s + m))
    }

    pub fn intents(&self) -> Vec<u8> {
        self.bounds
            .keys()
            .filter_map(|k| k.strip_prefix("intent_")?.parse().ok())
            .collect()
    }

    pub fn normalize(&self, values: &[f64], e: Element) -> Result<Vec<f64>> {
        let (m, s) = (self.mean(e)?, self.std(e)?);
        Ok(values.iter().map(|v| (v - m) / s).collect())
    }

    /// `x·std + mean` elementwise.
    pub fn denormalize(&self, values: &[f64], e: Element) -> Result<Vec<f64>> {
        let (m, s) = (self.mean(e)?, self.std(e)?);
        Ok(values.iter().map(|v| v * s + m).collect())
    }

    /// Same as [`Bkb::denormalize`], addressing the element by its file name.
    pub fn denormalize_named(&self, values: &[f64], element: &str) -> Result<Vec<f64>> {
        self.denormalize(values, Element::parse(element)?)
    }

    pub fn normalize_trajectory(&self, t: &Trajectory) -> Result<Trajectory> {
        let mut out = t.clone();
        for e in Element::ALL {
            *out.element_mut(e) = self.normalize(t.element(e), e)?;
        }
        Ok(out)
    }

    pub fn denormalize_trajectory(&self, t: &Trajectory) -> Result<Trajectory> {
        let mut out = t.clone();
        for e in Element::ALL {
            *out.element_mut(e) = self.denormalize(t.element(e), e)?;
        }
        Ok(out)
    }

    pub fn hash(&self) -> String {
        io::sha256_hex(&serde_json::to_vec(self).expect("bkb serialises"))
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bkb: Self = io::read_json(path)?;
        io::check_version(path, bkb.format_version, BKB_VERSION)?;
        Ok(bkb)
    }
}

/// Z-scores every element with global moments and records per-intent bounds
/// as the empirical min/max of the normalised values.
pub fn build_bkb(dataset: &[Trajectory]) -> Result<(Vec<Trajectory>, Bkb)> {
    if dataset.is_empty() {
        return Err(Error::Degenerate("empty dataset".into()));
    }
    let mut mean = BTreeMap::new();
    let mut std = BTreeMap::new();
    for e in Element::ALL {
        let mut n = 0usize;
        let mut sum = 0.0;
        for t in dataset {
            sum += t.element(e).iter().sum::<f64>();
            n += t.element(e).len();
        }
        if n == 0 {
            return Err(Error::Degenerate(format!("element {e} has no values")));
        }
        let m = sum / n as f64;
        let var = dataset
            .iter()
            .flat_map(|t| t.element(e).iter())
            .map(|v| (v - m).powi(2))
            .sum::<f64>()
            / n as f64;
        let s = var.sqrt();
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Degenerate(format!("element {e} has zero variance")));
        }
        mean.insert(e.name().to_owned(), m);
        std.insert(e.name().to_owned(), s);
    }

    let mut bkb = Bkb {
        format_version: BKB_VERSION,
        mean,
        std,
        bounds: BTreeMap::new(),
        meta: BkbMeta {
            dataset_hash: dataset_hash(dataset),
            counts: BTreeMap::new(),
            total: dataset.len(),
            config_hash: String::new(),
            seed: 0,
        },
    };
    let normalized = dataset
        .iter()
        .map(|t| bkb.normalize_trajectory(t))
        .collect::<Result<Vec<_>>>()?;

    let mut ranges: BTreeMap<u8, BTreeMap<Element, (f64, f64)>> = BTreeMap::new();
    for t in &normalized {
        let per = ranges.entry(t.intent_id).or_default();
        for e in Element::ALL {
            let r = per.entry(e).or_insert((f64::INFINITY, f64::NEG_INFINITY));
            for &v in t.element(e) {
                r.0 = r.0.min(v);
                r.1 = r.1.max(v);
            }
        }
        *bkb.meta.counts.entry(intent_key(t.intent_id)).or_default() += 1;
    }
    for (intent, per) in ranges {
        let entry = bkb.bounds.entry(intent_key(intent)).or_default();
        for (e, (mut lo, mut hi)) in per {
            if lo >= hi {
                lo -= DEGENERATE_PAD;
                hi += DEGENERATE_PAD;
            }
            entry.insert(e.name().to_owned(), [lo, hi]);
        }
    }
    Ok((normalized, bkb))
}

pub const DATASET_VERSION: u32 = 1;

/// First line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub generated: bool,
    pub config_hash: String,
    pub seed: u64,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_intent: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    meta: DatasetMeta,
}

/// JSON Lines: a metadata line, then one trajectory object per line.
pub fn write_dataset(path: &Path, meta: &DatasetMeta, data: &[Trajectory]) -> Result<String> {
    let mut bytes = Vec::new();
    serde_json::to_writer(&mut bytes, &MetaLine { meta: meta.clone() })?;
    bytes.push(b'\n');
    for t in data {
        serde_json::to_writer(&mut bytes, t)?;
        bytes.write_all(b"\n")?;
    }
    io::write_bytes(path, &bytes)
}

pub fn read_dataset(path: &Path) -> Result<(DatasetMeta, Vec<Trajectory>)> {
    let bytes = io::read_bytes(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let mut lines = text.lines();
    let first = lines.next().ok_or_else(|| Error::Format {
        path: path.display().to_string(),
        detail: "empty dataset file".into(),
    })?;
    let meta: MetaLine = io::parse_json(path, first.as_bytes())?;
    io::check_version(path, meta.meta.format_version, DATASET_VERSION)?;
    let data = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| io::parse_json::<Trajectory>(path, l.as_bytes()))
        .collect::<Result<Vec<_>>>()?;
    if data.len() != meta.meta.count {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!("expected {} trajectories, found {}", meta.meta.count, data.len()),
        });
    }
    Ok((meta.meta, data))
}
