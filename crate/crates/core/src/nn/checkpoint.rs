//! JSON checkpoints: parameter name → `{rows, cols, data}` plus metadata.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Module, Tensor2};
use crate::error::{Error, Result};
use crate::io;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub config_hash: String,
    pub step_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub params: BTreeMap<String, Tensor2>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            params: BTreeMap::new(),
            meta,
        }
    }

    /// Records every parameter of `module` under `prefix.`.
    pub fn add(&mut self, prefix: &str, module: &dyn Module) {
        for p in module.params() {
            self.params.insert(
                format!("{prefix}.{}", p.name),
                Tensor2 {
                    rows: p.shape.0,
                    cols: p.shape.1,
                    data: p.value.to_vec(),
                },
            );
        }
    }

    pub fn capture(prefix: &str, module: &dyn Module, meta: CheckpointMeta) -> Self {
        let mut ck = Self::new(meta);
        ck.add(prefix, module);
        ck
    }

    /// Overwrites the parameters of `module` stored under `prefix.`.
    pub fn restore(&self, prefix: &str, module: &mut dyn Module) -> Result<()> {
        for p in module.params_mut() {
            let key = format!("{prefix}.{}", p.name);
            let t = self
                .params
                .get(&key)
                .ok_or_else(|| Error::Lookup(format!("checkpoint has no parameter {key}")))?;
            if (t.rows, t.cols) != p.shape || t.data.len() != p.value.len() {
                return Err(Error::Config(format!(
                    "checkpoint parameter {key} is {}x{}, module expects {}x{}",
                    t.rows, t.cols, p.shape.0, p.shape.1
                )));
            }
            p.value.copy_from_slice(&t.data);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Self = io::read_json(path)?;
        io::check_version(path, ck.format_version, CHECKPOINT_VERSION)?;
        Ok(ck)
    }
}
