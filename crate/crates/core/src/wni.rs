//! Wireless network intent encoding.
//!
//! An intent is a list of entity–attribute–value tuples about a single
//! entity. Each tuple becomes one row `[embed(attribute) ‖ embed(value)]` of
//! the feature matrix that the noise predictors attend over.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{EnvConfig, IntentSpec};
use crate::error::{Error, Result};
use crate::io;
use crate::nn::Tensor2;

pub const ATTR_CHANNEL_GAIN: &str = "channel gain bucket";
pub const ATTR_USER_SCALE: &str = "user scale";
pub const ATTR_NOISE: &str = "noise";
pub const ATTR_POWER_SET: &str = "transmission power set";

/// Attribute vocabulary accepted by [`encode_intent`].
pub const ATTRIBUTES: [&str; 4] = [ATTR_CHANNEL_GAIN, ATTR_NOISE, ATTR_POWER_SET, ATTR_USER_SCALE];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EavTuple {
    pub entity: String,
    pub attribute: String,
    pub value: String,
}

impl EavTuple {
    pub fn new(entity: &str, attribute: &str, value: &str) -> Self {
        Self {
            entity: entity.to_owned(),
            attribute: attribute.to_owned(),
            value: value.to_owned(),
        }
    }
}

/// Frozen token embedding: every token maps to a unit vector drawn from a
/// generator keyed by `(seed, token)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub seed: u64,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self { seed, dim }
    }

    pub fn embed(&self, token: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(key);
        let mut v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }
}

/// Conditioning matrix, one row per attribute in canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WniFeature {
    pub matrix: Tensor2,
}

impl WniFeature {
    pub fn rows(&self) -> usize {
        self.matrix.rows
    }

    pub fn width(&self) -> usize {
        self.matrix.cols
    }

    /// Row-concatenated view.
    pub fn flatten(&self) -> &[f64] {
        &self.matrix.data
    }

    pub fn distance(&self, other: &WniFeature) -> f64 {
        self.flatten()
            .iter()
            .zip(other.flatten())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Embeds the tuples of one entity, rows ordered lexicographically by attribute.
pub fn encode_intent(tuples: &[EavTuple], table: &EmbeddingTable) -> Result<WniFeature> {
    let first = tuples
        .first()
        .ok_or_else(|| Error::Validation("an intent needs at least one tuple".into()))?;
    for t in tuples {
        if t.entity.is_empty() || t.attribute.is_empty() || t.value.is_empty() {
            return Err(Error::Validation("empty token in intent tuple".into()));
        }
        if t.entity != first.entity {
            return Err(Error::Validation(format!(
                "intent mixes entities {:?} and {:?}",
                first.entity, t.entity
            )));
        }
        if !ATTRIBUTES.contains(&t.attribute.as_str()) {
            return Err(Error::Vocabulary(t.attribute.clone()));
        }
    }
    let mut ordered: Vec<&EavTuple> = tuples.iter().collect();
    ordered.sort_by(|a, b| a.attribute.cmp(&b.attribute).then_with(|| a.value.cmp(&b.value)));
    let rows: Vec<Vec<f64>> = ordered
        .iter()
        .map(|t| {
            let mut row = table.embed(&t.attribute);
            row.extend(table.embed(&t.value));
            row
        })
        .collect();
    let matrix = Tensor2::from_rows(&rows)?;
    Ok(WniFeature { matrix })
}

/// The shared attribute schema of the experiment intents; only the channel
/// gain bucket differs between them.
pub fn experiment_tuples(spec: &IntentSpec, config: &EnvConfig) -> Vec<EavTuple> {
    let powers = config
        .total_power_options
        .iter()
        .map(|p| format!("{p}"))
        .collect::<Vec<_>>()
        .join(",");
    vec![
        EavTuple::new(
            "BS",
            ATTR_CHANNEL_GAIN,
            &format!("[{}, {})", spec.gain_low, spec.gain_high),
        ),
        EavTuple::new("BS", ATTR_USER_SCALE, &config.num_channels.to_string()),
        EavTuple::new("BS", ATTR_NOISE, &format!("{}", config.noise_power)),
        EavTuple::new("BS", ATTR_POWER_SET, &format!("{{{powers}}}")),
    ]
}

/// On-disk intent description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentDescription {
    pub entity: String,
    pub attributes: Vec<AttributeValue>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeValue {
    pub name: String,
    pub value: String,
}

impl IntentDescription {
    pub fn from_tuples(tuples: &[EavTuple]) -> Result<Self> {
        let entity = tuples
            .first()
            .map(|t| t.entity.clone())
            .ok_or_else(|| Error::Validation("an intent needs at least one tuple".into()))?;
        Ok(Self {
            entity,
            attributes: tuples
                .iter()
                .map(|t| AttributeValue {
                    name: t.attribute.clone(),
                    value: t.value.clone(),
                })
                .collect(),
        })
    }

    pub fn tuples(&self) -> Vec<EavTuple> {
        self.attributes
            .iter()
            .map(|a| EavTuple::new(&self.entity, &a.name, &a.value))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        io::write_json(path, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn experiment_features(seed: u64) -> Vec<WniFeature> {
        let table = EmbeddingTable::new(seed, 16);
        let config = EnvConfig::default();
        IntentSpec::experiment_set()
            .iter()
            .map(|s| encode_intent(&experiment_tuples(s, &config), &table).unwrap())
            .collect()
    }

    #[test]
    fn single_tuple_shape() {
        let table = EmbeddingTable::new(1, 16);
        let f = encode_intent(&[EavTuple::new("BS", ATTR_NOISE, "1")], &table).unwrap();
        assert_eq!((f.rows(), f.width()), (1, 32));
        assert_eq!(f.flatten().len(), 32);
    }

    #[test]
    fn deterministic_and_reproducible_from_seed() {
        assert_eq!(experiment_features(3), experiment_features(3));
        assert_ne!(experiment_features(3), experiment_features(4));
    }

    #[test]
    fn experiment_intents_are_distinct() {
        let f = experiment_features(0);
        assert!(f[0].distance(&f[4]) > 0.1);
        for i in 0..5 {
            for j in i + 1..5 {
                assert!(f[i].distance(&f[j]) > 0.0);
            }
        }
        assert!(f.iter().all(|x| x.flatten().iter().all(|v| v.is_finite())));
    }

    #[test]
    fn embeddings_unit_norm_and_dissimilar() {
        let table = EmbeddingTable::new(0, 16);
        let config = EnvConfig::default();
        let mut tokens: Vec<String> = ATTRIBUTES.iter().map(|s| s.to_string()).collect();
        for s in IntentSpec::experiment_set() {
            tokens.extend(experiment_tuples(&s, &config).into_iter().map(|t| t.value));
        }
        tokens.sort();
        tokens.dedup();
        let vecs: Vec<Vec<f64>> = tokens.iter().map(|t| table.embed(t)).collect();
        for (i, a) in vecs.iter().enumerate() {
            assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
            for b in &vecs[i + 1..] {
                let cos: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                assert!(cos < 0.99);
            }
        }
    }

    #[test]
    fn ordering_is_canonical() {
        let table = EmbeddingTable::new(0, 16);
        let config = EnvConfig::default();
        let spec = &IntentSpec::experiment_set()[1];
        let mut tuples = experiment_tuples(spec, &config);
        let a = encode_intent(&tuples, &table).unwrap();
        tuples.reverse();
        assert_eq!(encode_intent(&tuples, &table).unwrap(), a);
    }

    #[test]
    fn validation_errors() {
        let table = EmbeddingTable::new(0, 16);
        assert!(matches!(encode_intent(&[], &table), Err(Error::Validation(_))));
        let mixed = [
            EavTuple::new("BS", ATTR_NOISE, "1"),
            EavTuple::new("UAV", ATTR_NOISE, "1"),
        ];
        assert!(matches!(encode_intent(&mixed, &table), Err(Error::Validation(_))));
        let unknown = [EavTuple::new("BS", "altitude", "100")];
        assert!(matches!(encode_intent(&unknown, &table), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn description_file_round_trip() {
        let config = EnvConfig::default();
        let tuples = experiment_tuples(&IntentSpec::experiment_set()[0], &config);
        let desc = IntentDescription::from_tuples(&tuples).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("intent.json");
        desc.save(&path).unwrap();
        let back = IntentDescription::load(&path).unwrap();
        assert_eq!(back.tuples(), tuples);
    }
}
