//! Run configuration, pipeline orchestration and metrics emission.

mod metrics;
mod pipeline;

pub use metrics::{
    read_metrics, summarize, write_metrics, CellSummary, MetricsRow, MetricsSummary, SchemeDelta, METRICS_HEADER,
};
pub use pipeline::{
    evaluate_cells, run_pipeline, stage_dir, verified_path, PipelineReport, PolicySet, Stage, StageManifest, ALL_STAGES,
};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::DdpgConfig;
use crate::env::{EnvConfig, IntentSpec};
use crate::error::{Error, Result};
use crate::gdm::GdmConfig;
use crate::io;
use crate::offline_rl::BcqConfig;

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "WNI_TRAJGEN_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertSection {
    pub count_per_intent: usize,
}

impl Default for ExpertSection {
    /// A million trajectories split evenly over five intents.
    fn default() -> Self {
        Self {
            count_per_intent: 200_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct WniSection {
    pub embedding_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    /// Generated transitions per intent.
    pub count: usize,
    pub clip: bool,
}

impl Default for GenerationSection {
    fn default() -> Self {
        Self {
            count: 1600,
            clip: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub episodes: usize,
    pub steps: usize,
    /// Number of evaluation seeds; each becomes one `seed` value in the CSV.
    pub seeds: usize,
    pub schemes: Vec<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            episodes: 1,
            steps: 200,
            seeds: 1,
            schemes: SCHEMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Scheme names in CSV order.
pub const SCHEMES: [&str; 4] = ["uniform", "oracle", "bcq", "ddpg"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub env: EnvConfig,
    pub intents: Vec<IntentSpec>,
    pub wni: WniSection,
    pub expert: ExpertSection,
    pub gdm: GdmConfig,
    pub generation: GenerationSection,
    pub bcq: BcqConfig,
    pub ddpg: DdpgConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            env: EnvConfig::default(),
            intents: IntentSpec::experiment_set(),
            wni: WniSection::default(),
            expert: ExpertSection::default(),
            gdm: GdmConfig::default(),
            generation: GenerationSection::default(),
            bcq: BcqConfig::default(),
            ddpg: DdpgConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    /// Defaults with 10,000 expert transitions per intent.
    pub fn desk() -> Self {
        Self {
            expert: ExpertSection {
                count_per_intent: 10_000,
            },
            ..Self::default()
        }
    }

    /// Seconds-scale settings for smoke runs: tiny datasets and a few
    /// training steps per learner, same architecture as the defaults.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.expert.count_per_intent = 200;
        c.gdm.train_steps = 20;
        c.generation.count = 64;
        c.bcq.iterations = 20;
        c.bcq.batch_size = 32;
        c.ddpg.steps = 40;
        c.eval.steps = 10;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        if self.intents.is_empty() {
            return Err(Error::Config("at least one intent is required".into()));
        }
        let mut ids: Vec<u8> = self.intents.iter().map(|s| s.intent_id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.intents.len() {
            return Err(Error::Config("intent ids must be unique".into()));
        }
        for s in &self.intents {
            s.validate()?;
        }
        if self.expert.count_per_intent == 0 || self.generation.count == 0 {
            return Err(Error::Config("expert and generation counts must be positive".into()));
        }
        self.gdm.validate()?;
        self.bcq.validate()?;
        self.ddpg.validate()?;
        if self.eval.episodes == 0 || self.eval.steps == 0 || self.eval.seeds == 0 {
            return Err(Error::Config(
                "evaluation episodes, steps and seeds must be positive".into(),
            ));
        }
        if let Some(bad) = self.eval.schemes.iter().find(|s| !SCHEMES.contains(&s.as_str())) {
            return Err(Error::Config(format!(
                "unknown scheme {bad:?}; expected one of {SCHEMES:?}"
            )));
        }
        Ok(())
    }

    /// SHA-256 of the compact JSON serialisation.
    pub fn hash(&self) -> String {
        io::sha256_hex(&serde_json::to_vec(self).expect("config serialises"))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = io::read_bytes(path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn intent(&self, intent_id: u8) -> Result<&IntentSpec> {
        self.intents
            .iter()
            .find(|s| s.intent_id == intent_id)
            .ok_or_else(|| Error::Config(format!("intent {intent_id} is not configured")))
    }

    pub fn has_scheme(&self, scheme: &str) -> bool {
        self.eval.schemes.iter().any(|s| s == scheme)
    }
}

/// Seed for a named sub-task, independent of every other label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Worker cap from [`THREADS_ENV`], if set to a positive integer.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}
