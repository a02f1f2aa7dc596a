//! Stage orchestration: expert → train-gdm → generate → train-offline,
//! train-baseline → evaluate. Each stage writes its artifacts and a manifest
//! of their SHA-256 hashes under `<out>/<stage>/`; downstream stages only
//! read files whose hash matches the upstream manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::{summarize, write_metrics, MetricsRow};
use super::{derive_seed, RunConfig};
use crate::baselines::{ddpg_train, evaluate_policy, BcqPolicy, DdpgLearner, Policy, UniformPolicy, WaterfillPolicy};
use crate::error::{Error, Result};
use crate::expert::{build_bkb, collect_expert, read_dataset, write_dataset, Bkb, DatasetMeta, DATASET_VERSION};
use crate::gdm::{distribution_accuracy, generate_trajectories, train_gdm, GdmModelSet};
use crate::io;
use crate::nn::checkpoint::CheckpointMeta;
use crate::offline_rl::{train_bcq, BcqLearner};
use crate::par;
use crate::wni::{encode_intent, experiment_tuples, EmbeddingTable, WniFeature};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Expert,
    TrainGdm,
    Generate,
    TrainOffline,
    TrainBaseline,
    Evaluate,
}

pub const ALL_STAGES: [Stage; 6] = [
    Stage::Expert,
    Stage::TrainGdm,
    Stage::Generate,
    Stage::TrainOffline,
    Stage::TrainBaseline,
    Stage::Evaluate,
];

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Expert => "expert",
            Stage::TrainGdm => "train-gdm",
            Stage::Generate => "generate",
            Stage::TrainOffline => "train-offline",
            Stage::TrainBaseline => "train-baseline",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        ALL_STAGES
            .into_iter()
            .find(|s| s.name() == name.trim())
            .ok_or_else(|| Error::Config(format!("unknown stage {name:?}")))
    }

    /// Comma-separated list, e.g. `expert,train-gdm`.
    pub fn parse_list(list: &str) -> Result<Vec<Self>> {
        list.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(Self::parse)
            .collect()
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const MANIFEST_VERSION: u32 = 1;

/// Provenance record of one stage run; paths are relative to the output
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub format_version: u32,
    pub stage: Stage,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineReport {
    pub config_hash: String,
    pub manifests: Vec<StageManifest>,
}

pub fn stage_dir(out: &Path, stage: Stage) -> PathBuf {
    out.join(stage.name())
}

fn manifest_path(out: &Path, stage: Stage) -> PathBuf {
    stage_dir(out, stage).join("manifest.json")
}

/// Resolves `rel` (relative to `out`) as an output of `upstream`, checking
/// its hash against the upstream manifest. Returns the path and hash.
pub fn verified_path(out: &Path, upstream: Stage, rel: &str) -> Result<(PathBuf, String)> {
    let path = out.join(rel);
    if !path.exists() {
        return Err(Error::Staging(path));
    }
    let mpath = manifest_path(out, upstream);
    let manifest: StageManifest = io::read_json(&mpath)?;
    io::check_version(&mpath, manifest.format_version, MANIFEST_VERSION)?;
    let found = io::sha256_hex(&io::read_bytes(&path)?);
    let expected = manifest
        .outputs
        .get(rel)
        .cloned()
        .unwrap_or_else(|| "<not recorded>".into());
    if expected != found {
        return Err(Error::Provenance {
            file: rel.to_owned(),
            expected,
            found,
        });
    }
    Ok((path, found))
}

struct StageRun<'a> {
    out: &'a Path,
    config: &'a RunConfig,
    config_hash: String,
    stage: Stage,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl<'a> StageRun<'a> {
    fn new(out: &'a Path, config: &'a RunConfig, config_hash: &str, stage: Stage) -> Self {
        Self {
            out,
            config,
            config_hash: config_hash.to_owned(),
            stage,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    fn seed(&self, label: &str) -> u64 {
        derive_seed(self.config.seed, label)
    }

    fn input(&mut self, upstream: Stage, rel: &str) -> Result<PathBuf> {
        let (path, hash) = verified_path(self.out, upstream, rel)?;
        self.inputs.insert(rel.to_owned(), hash);
        Ok(path)
    }

    fn rel(&self, file: &str) -> String {
        format!("{}/{file}", self.stage.name())
    }

    fn path(&self, file: &str) -> PathBuf {
        self.out.join(self.rel(file))
    }

    fn record(&mut self, file: &str, hash: String) {
        self.outputs.insert(self.rel(file), hash);
    }

    fn meta(&self, label: &str) -> CheckpointMeta {
        CheckpointMeta {
            seed: self.seed(label),
            config_hash: self.config_hash.clone(),
            step_count: 0,
        }
    }

    fn finish(self) -> Result<StageManifest> {
        let manifest = StageManifest {
            format_version: MANIFEST_VERSION,
            stage: self.stage,
            config_hash: self.config_hash,
            seed: self.config.seed,
            inputs: self.inputs,
            outputs: self.outputs,
        };
        io::write_json(&manifest_path(self.out, self.stage), &manifest)?;
        Ok(manifest)
    }
}

fn policy_file(intent: u8) -> String {
    format!("policy_intent_{intent}.json")
}

fn generated_file(intent: u8) -> String {
    format!("intent_{intent}.jsonl")
}

fn ddpg_file(intent: u8, power: f64) -> String {
    format!("ddpg_intent_{intent}_p{power}.json")
}

fn wni_features(config: &RunConfig) -> Result<BTreeMap<u8, WniFeature>> {
    let table = EmbeddingTable::new(config.wni.embedding_seed, config.gdm.wni_dim);
    config
        .intents
        .iter()
        .map(|s| Ok((s.intent_id, encode_intent(&experiment_tuples(s, &config.env), &table)?)))
        .collect()
}

fn provenance_line(config_hash: &str, seed: u64) -> String {
    format!("# config_hash={config_hash} seed={seed}\n")
}

/// Runs the requested stages in pipeline order, writing under `out`.
/// Stages not requested must already have valid artifacts on disk if a
/// requested stage depends on them.
pub fn run_pipeline(config: &RunConfig, stages: &[Stage], out: &Path) -> Result<PipelineReport> {
    config.validate()?;
    let config_hash = config.hash();
    io::write_json(&out.join("config.json"), config)?;
    let mut manifests = Vec::new();
    for stage in ALL_STAGES.into_iter().filter(|s| stages.contains(s)) {
        log::info!("stage {stage} starting");
        let mut run = StageRun::new(out, config, &config_hash, stage);
        match stage {
            Stage::Expert => expert_stage(&mut run)?,
            Stage::TrainGdm => train_gdm_stage(&mut run)?,
            Stage::Generate => generate_stage(&mut run)?,
            Stage::TrainOffline => train_offline_stage(&mut run)?,
            Stage::TrainBaseline => train_baseline_stage(&mut run)?,
            Stage::Evaluate => evaluate_stage(&mut run)?,
        }
        manifests.push(run.finish()?);
        log::info!("stage {stage} done");
    }
    Ok(PipelineReport { config_hash, manifests })
}

fn expert_stage(run: &mut StageRun<'_>) -> Result<()> {
    let c = run.config;
    let seed = run.seed("expert");
    let data = collect_expert(&c.intents, &c.env, c.expert.count_per_intent, seed)?;
    let (_, mut bkb) = build_bkb(&data)?;
    bkb.meta.config_hash = run.config_hash.clone();
    bkb.meta.seed = seed;
    let meta = DatasetMeta {
        format_version: DATASET_VERSION,
        generated: false,
        config_hash: run.config_hash.clone(),
        seed,
        count: data.len(),
        target_intent: None,
        model_hash: None,
    };
    let h = write_dataset(&run.path("dataset.jsonl"), &meta, &data)?;
    run.record("dataset.jsonl", h);
    let h = bkb.save(&run.path("bkb.json"))?;
    run.record("bkb.json", h);
    Ok(())
}

fn train_gdm_stage(run: &mut StageRun<'_>) -> Result<()> {
    let c = run.config;
    let (_, data) = read_dataset(&run.input(Stage::Expert, "expert/dataset.jsonl")?)?;
    let bkb = Bkb::load(&run.input(Stage::Expert, "expert/bkb.json")?)?;
    let norm = data
        .iter()
        .map(|t| bkb.normalize_trajectory(t))
        .collect::<Result<Vec<_>>>()?;
    let wni = wni_features(c)?;
    let width = wni.values().next().map_or(0, |w| w.width());
    let seed = run.seed("train-gdm");
    let mut models = GdmModelSet::new(c.gdm.clone(), c.env.num_channels, width, &mut par::stream_rng(seed, 0))?;
    let every = (c.gdm.train_steps / 10).max(1);
    let history = train_gdm(
        &mut models,
        &norm,
        &wni,
        c.gdm.train_steps,
        &mut par::stream_rng(seed, 1),
        |s, l| {
            if s % every == 0 {
                log::info!("gdm step {s}: losses {l:?}");
            }
        },
    )?;
    let h = models.save(&run.path("models.json"), run.meta("train-gdm"))?;
    run.record("models.json", h);
    let mut text = provenance_line(&run.config_hash, seed);
    text.push_str("step,state,action,reward,next_state\n");
    for (i, l) in history.iter().enumerate() {
        text.push_str(&format!("{i},{},{},{},{}\n", l[0], l[1], l[2], l[3]));
    }
    let h = io::write_bytes(&run.path("losses.csv"), text.as_bytes())?;
    run.record("losses.csv", h);
    Ok(())
}

#[derive(Serialize)]
struct AccuracyReport {
    config_hash: String,
    seed: u64,
    entries: Vec<AccuracyEntry>,
}

#[derive(Serialize)]
struct AccuracyEntry {
    intent_id: u8,
    element: String,
    accuracy: f64,
}

fn generate_stage(run: &mut StageRun<'_>) -> Result<()> {
    let c = run.config;
    let models_path = run.input(Stage::TrainGdm, "train-gdm/models.json")?;
    let model_hash = run.inputs["train-gdm/models.json"].clone();
    let models = GdmModelSet::load(&models_path)?;
    let bkb = Bkb::load(&run.input(Stage::Expert, "expert/bkb.json")?)?;
    let wni = wni_features(c)?;
    let mut accuracy = Vec::new();
    for spec in &c.intents {
        let k = spec.intent_id;
        let seed = run.seed(&format!("generate/{k}"));
        let set = generate_trajectories(
            &models,
            &wni[&k],
            k,
            &bkb,
            c.generation.count,
            seed,
            c.generation.clip,
            &model_hash,
        )?;
        for ((intent_id, element), acc) in distribution_accuracy(&set.trajectories, &bkb)? {
            accuracy.push(AccuracyEntry {
                intent_id,
                element: element.to_string(),
                accuracy: acc,
            });
        }
        let meta = DatasetMeta {
            format_version: DATASET_VERSION,
            generated: true,
            config_hash: run.config_hash.clone(),
            seed,
            count: set.trajectories.len(),
            target_intent: Some(k),
            model_hash: Some(model_hash.clone()),
        };
        let file = generated_file(k);
        let h = write_dataset(&run.path(&file), &meta, &set.trajectories)?;
        run.record(&file, h);
    }
    let report = AccuracyReport {
        config_hash: run.config_hash.clone(),
        seed: c.seed,
        entries: accuracy,
    };
    let h = io::write_json(&run.path("accuracy.json"), &report)?;
    run.record("accuracy.json", h);
    Ok(())
}

fn train_offline_stage(run: &mut StageRun<'_>) -> Result<()> {
    let c = run.config;
    let mut datasets = Vec::new();
    for spec in &c.intents {
        let path = run.input(Stage::Generate, &format!("generate/{}", generated_file(spec.intent_id)))?;
        datasets.push(read_dataset(&path)?.1);
    }
    let learners = par::map_indexed(c.intents.len(), |i| {
        let k = c.intents[i].intent_id;
        train_bcq(&datasets[i], &c.bcq, derive_seed(c.seed, &format!("train-offline/{k}")))
    });
    for (spec, learner) in c.intents.iter().zip(learners) {
        let (learner, _) = learner?;
        let file = policy_file(spec.intent_id);
        let h = learner.save(&run.path(&file), run.meta(&format!("train-offline/{}", spec.intent_id)))?;
        run.record(&file, h);
    }
    Ok(())
}

fn baseline_cells(config: &RunConfig) -> Vec<(usize, f64)> {
    (0..config.intents.len())
        .flat_map(|i| config.env.total_power_options.iter().map(move |&p| (i, p)))
        .collect()
}

fn train_baseline_stage(run: &mut StageRun<'_>) -> Result<()> {
    let c = run.config;
    let cells = baseline_cells(c);
    let trained = par::map_indexed(cells.len(), |j| {
        let (i, p) = cells[j];
        let k = c.intents[i].intent_id;
        ddpg_train(
            &c.intents[i],
            &c.env,
            p,
            &c.ddpg,
            derive_seed(c.seed, &format!("train-baseline/{k}/{p}")),
        )
    });
    let mut text = provenance_line(&run.config_hash, c.seed);
    text.push_str("intent_id,total_power,step,spectral_efficiency\n");
    for (&(i, p), result) in cells.iter().zip(trained) {
        let (learner, series) = result?;
        let k = c.intents[i].intent_id;
        let file = ddpg_file(k, p);
        let h = learner.save(&run.path(&file), run.meta(&format!("train-baseline/{k}/{p}")))?;
        run.record(&file, h);
        for (step, se) in series.iter().enumerate() {
            text.push_str(&format!("{k},{p},{step},{se}\n"));
        }
    }
    let h = io::write_bytes(&run.path("ddpg_series.csv"), text.as_bytes())?;
    run.record("ddpg_series.csv", h);
    Ok(())
}

/// Trained policies the evaluation stage draws on.
#[derive(Default)]
pub struct PolicySet {
    pub bcq: BTreeMap<u8, BcqLearner>,
    /// Keyed by intent and the bit pattern of the total power.
    pub ddpg: BTreeMap<(u8, u64), DdpgLearner>,
}

/// Paired evaluation of every configured scheme in every `(intent, power)`
/// cell and evaluation seed. Rows are ordered by intent, power, scheme,
/// seed and step.
pub fn evaluate_cells(config: &RunConfig, policies: &PolicySet) -> Result<Vec<MetricsRow>> {
    let oracle = WaterfillPolicy {
        noise_power: config.env.noise_power,
    };
    let seeds: Vec<u64> = (0..config.eval.seeds)
        .map(|i| derive_seed(config.seed, &format!("evaluate/{i}")))
        .collect();
    let schemes: Vec<&str> = super::SCHEMES.into_iter().filter(|s| config.has_scheme(s)).collect();
    let mut cells = Vec::new();
    for spec in &config.intents {
        for &p in &config.env.total_power_options {
            for &scheme in &schemes {
                for &seed in &seeds {
                    cells.push((spec, p, scheme, seed));
                }
            }
        }
    }
    let results = par::map_indexed(cells.len(), |j| -> Result<Vec<MetricsRow>> {
        let (spec, p, scheme, seed) = cells[j];
        let k = spec.intent_id;
        let missing = |what: &str| Error::Lookup(format!("no {what} policy for intent {k}, power {p}"));
        let bcq_policy;
        let policy: &dyn Policy = match scheme {
            "uniform" => &UniformPolicy,
            "oracle" => &oracle,
            "bcq" => {
                bcq_policy = BcqPolicy {
                    learner: policies.bcq.get(&k).ok_or_else(|| missing("bcq"))?,
                    candidates: config.bcq.candidates,
                };
                &bcq_policy
            }
            _ => policies.ddpg.get(&(k, p.to_bits())).ok_or_else(|| missing("ddpg"))?,
        };
        let summary = evaluate_policy(
            policy,
            spec,
            &config.env,
            p,
            config.eval.episodes,
            config.eval.steps,
            seed,
        )?;
        Ok(summary
            .per_step
            .iter()
            .enumerate()
            .map(|(step, &se)| MetricsRow {
                scheme: scheme.to_owned(),
                intent_id: k,
                total_power: p,
                step,
                spectral_efficiency: se,
                seed,
            })
            .collect())
    });
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    Ok(rows)
}

fn evaluate_stage(run: &mut StageRun<'_>) -> Result<()> {
    let c = run.config;
    let mut policies = PolicySet::default();
    if c.has_scheme("bcq") {
        for spec in &c.intents {
            let path = run.input(
                Stage::TrainOffline,
                &format!("train-offline/{}", policy_file(spec.intent_id)),
            )?;
            policies.bcq.insert(spec.intent_id, BcqLearner::load(&path)?);
        }
    }
    if c.has_scheme("ddpg") {
        for (i, p) in baseline_cells(c) {
            let k = c.intents[i].intent_id;
            let path = run.input(Stage::TrainBaseline, &format!("train-baseline/{}", ddpg_file(k, p)))?;
            policies.ddpg.insert((k, p.to_bits()), DdpgLearner::load(&path)?);
        }
    }
    let rows = evaluate_cells(c, &policies)?;
    let h = write_metrics(&run.path("metrics.csv"), &run.config_hash, c.seed, &rows)?;
    run.record("metrics.csv", h);
    let summary = summarize(&run.config_hash, c.seed, &rows);
    let h = io::write_json(&run.path("summary.json"), &summary)?;
    run.record("summary.json", h);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in ALL_STAGES {
            assert_eq!(Stage::parse(s.name()).unwrap(), s);
        }
        assert_eq!(
            Stage::parse_list("expert, train-gdm").unwrap(),
            vec![Stage::Expert, Stage::TrainGdm]
        );
        assert!(matches!(Stage::parse("train"), Err(Error::Config(_))));
    }

    #[test]
    fn file_names_are_stable() {
        assert_eq!(ddpg_file(3, 6.0), "ddpg_intent_3_p6.json");
        assert_eq!(ddpg_file(3, 7.5), "ddpg_intent_3_p7.5.json");
        assert_eq!(generated_file(2), "intent_2.jsonl");
    }
}
