//! Stage orchestration over a working directory.
//!
//! Every stage reads its inputs from and writes its outputs to one directory
//! and leaves a stamp in `stamps/<stage>.json` holding a hash of the
//! configuration it depends on (chained through its upstream stages) and
//! checksums of what it wrote. A stage whose upstream stamp disagrees with
//! the current configuration logs a warning and proceeds; a missing upstream
//! artifact is an error.
//!
//! Layout of the working directory:
//!
//! | stage          | outputs                                           |
//! |----------------|---------------------------------------------------|
//! | `synth`        | `data/<split>_<i>/` keyframe bundles              |
//! | `fit-vocab`    | `vocab.bin`                                       |
//! | `extract-vlad` | `vlad_<split>.bin`                                |
//! | `index`        | `index_<split>.bin`                               |
//! | `retrieve`     | `cliques_<split>.jsonl`                           |
//! | `train`        | `model.bin`, `train_log.csv`                      |
//! | `infer`        | `scores_<split>.csv`                              |
//! | `verify`       | `verified_<split>.csv`                            |
//! | `eval`         | `report.json`, `pr_curve.csv`, `sweep.csv`        |
//! | `plot`         | `plots/{pr_curve,sweep}.{svg,csv}`                |
//!
//! Output files contain no timestamps, so identical configuration and inputs
//! give byte-identical artifacts for any worker count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geoverify::{verify_pair, RansacConfig, Verdict};
use crate::gnn::{self, encode_corpus, predict_query_edges, Hyper, ModelParams, ScoredEdge, Selection, TrainClique, TrainConfig};
use crate::keyframe::{load_dataset, save_dataset, SequenceDataset};
use crate::metrics::{
    evaluate_sequence, pr_curve, EvalReport, LabelThresholds, PrCurve,
    PredictedPose, ScoredPair,
};
use crate::par::{self, Exec};
use crate::retrieval::{build_cliques, build_index, CliqueGraph, Corpus, DescriptorIndex, KeyframeKey, Neighbor};
use crate::synth::{generate, SyntheticWorldSpec};
use crate::vlad::{compute_vlad_batch, fit_vocabulary, Metric, ResidualWeighting, VladDescriptor, VocabConfig, VladOptions, Vocabulary};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing upstream artifact {path} (run `{stage}` first)")]
    MissingArtifact { path: PathBuf, stage: &'static str },
    #[error("malformed {path}: {msg}")]
    Malformed { path: PathBuf, msg: String },
    #[error("{0}")]
    Stage(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl PipelineError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::MissingArtifact { .. } => "missing_artifact",
            PipelineError::Malformed { .. } => "malformed_input",
            PipelineError::Stage(_) => "stage",
            PipelineError::Io { .. } => "io",
        }
    }
}

fn stage_err(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage(e.to_string())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataPaths {
    pub train: Vec<PathBuf>,
    pub val: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
}

impl DataPaths {
    fn get(&self, split: Split) -> &[PathBuf] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Synthetic sequences drawn from one world. Training runs start at evenly
/// spaced points of the loop; validation and test runs use their own
/// trajectory variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSuite {
    pub world: SyntheticWorldSpec,
    pub train_runs: usize,
    pub val_runs: usize,
    pub test_runs: usize,
}

impl Default for SynthSuite {
    fn default() -> Self {
        SynthSuite { world: SyntheticWorldSpec::default(), train_runs: 16, val_runs: 1, test_runs: 1 }
    }
}

impl SynthSuite {
    /// World specs of one split, in order.
    pub fn specs(&self, split: Split) -> Vec<SyntheticWorldSpec> {
        let n = match split {
            Split::Train => self.train_runs,
            Split::Val => self.val_runs,
            Split::Test => self.test_runs,
        };
        (0..n)
            .map(|i| {
                let (run, start) = match split {
                    Split::Train => (i as u64, i as f64 / n as f64),
                    Split::Val => (100 + 2 * i as u64, (0.45 + 0.31 * i as f64).fract()),
                    Split::Test => (101 + 2 * i as u64, (0.15 + 0.31 * i as f64).fract()),
                };
                SyntheticWorldSpec {
                    name: format!("{}_{i:02}", split.name()),
                    run,
                    start_fraction: start,
                    ..self.world.clone()
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabSection {
    pub n_clusters: usize,
    pub metric: Metric,
    /// Keypoints per image used for fitting.
    pub max_keypoints: usize,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub weighting: ResidualWeighting,
    pub intra_normalize: bool,
}

impl Default for VocabSection {
    fn default() -> Self {
        let v = VocabConfig::default();
        let o = VladOptions::default();
        VocabSection {
            n_clusters: v.n_clusters,
            metric: v.metric,
            max_keypoints: v.max_per_image,
            max_iterations: v.max_iterations,
            tolerance: v.tolerance,
            weighting: o.weighting,
            intra_normalize: o.intra_normalize,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalScope {
    /// Queries search their own sequence only.
    #[default]
    Sequence,
    /// Queries search every sequence of their split.
    Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalSection {
    pub k_pct: f64,
    pub exclusion_window: u32,
    pub scope: RetrievalScope,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        RetrievalSection { k_pct: 1.0, exclusion_window: 50, scope: RetrievalScope::Sequence }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifySection {
    pub ransac: RansacConfig,
    pub selection: Selection,
    pub match_metric: Metric,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection { ransac: RansacConfig::default(), selection: Selection::default(), match_metric: Metric::Cosine }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub thresholds: LabelThresholds,
    /// Candidate fractions of the sweep, as fractions of retrieved pairs.
    pub sweep: Vec<f64>,
    /// AP level whose smallest sufficient candidate count is reported.
    pub target_ap: f64,
    pub split: Split,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            thresholds: LabelThresholds::default(),
            sweep: vec![0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0],
            target_ap: 0.9,
            split: Split::Test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Seeds vocabulary fitting and model initialization.
    pub seed: u64,
    pub data: DataPaths,
    pub synth: Option<SynthSuite>,
    pub vocab: VocabSection,
    pub retrieval: RetrievalSection,
    pub model: Hyper,
    pub train: TrainConfig,
    pub verify: VerifySection,
    pub eval: EvalSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            data: DataPaths::default(),
            synth: None,
            vocab: VocabSection::default(),
            retrieval: RetrievalSection::default(),
            model: Hyper::default(),
            train: TrainConfig::default(),
            verify: VerifySection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    /// Replaces every seed (vocabulary, initialization, training, RANSAC).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.verify.ransac.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.vocab.n_clusters == 0 || self.vocab.max_keypoints == 0 {
            return bad("vocab.n_clusters and vocab.max_keypoints must be positive".into());
        }
        if !(self.vocab.tolerance.is_finite() && self.vocab.tolerance >= 0.0) {
            return bad("vocab.tolerance must be non-negative".into());
        }
        if !(self.retrieval.k_pct > 0.0 && self.retrieval.k_pct <= 100.0) {
            return bad(format!("retrieval.k_pct {} outside (0, 100]", self.retrieval.k_pct));
        }
        self.model.validate().map_err(|e| PipelineError::Config(format!("model: {e}")))?;
        if self.model.n_clusters != self.vocab.n_clusters {
            return bad("model.n_clusters must equal vocab.n_clusters".into());
        }
        self.train.validate().map_err(|e| PipelineError::Config(format!("train: {e}")))?;
        self.verify.ransac.validate().map_err(|e| PipelineError::Config(format!("verify.ransac: {e}")))?;
        match self.verify.selection {
            Selection::TopFraction(v) if !(v > 0.0 && v <= 1.0) => return bad(format!("verify.selection fraction {v} outside (0, 1]")),
            Selection::Threshold(v) if !(0.0..=1.0).contains(&v) => return bad(format!("verify.selection threshold {v} outside [0, 1]")),
            _ => {}
        }
        let t = &self.eval.thresholds;
        if !(t.distance_m > 0.0 && t.angle_deg > 0.0) {
            return bad("eval.thresholds must be positive".into());
        }
        if self.eval.sweep.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return bad("eval.sweep fractions must lie in (0, 1]".into());
        }
        if !(self.eval.target_ap > 0.0 && self.eval.target_ap <= 1.0) {
            return bad("eval.target_ap must lie in (0, 1]".into());
        }
        if let Some(s) = &self.synth {
            s.world.validate().map_err(|e| PipelineError::Config(format!("synth.world: {e}")))?;
            if s.world.desc_dim != self.model.desc_dim {
                return bad("model.desc_dim must equal synth.world.desc_dim".into());
            }
            if s.train_runs == 0 {
                return bad("synth.train_runs must be positive".into());
            }
        } else if self.data.train.is_empty() && self.data.test.is_empty() {
            return bad("no data: set [data] paths or a [synth] section".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Synth,
    FitVocab,
    ExtractVlad,
    Index,
    Retrieve,
    Train,
    Infer,
    Verify,
    Eval,
    Plot,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Synth,
        Stage::FitVocab,
        Stage::ExtractVlad,
        Stage::Index,
        Stage::Retrieve,
        Stage::Train,
        Stage::Infer,
        Stage::Verify,
        Stage::Eval,
        Stage::Plot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::FitVocab => "fit-vocab",
            Stage::ExtractVlad => "extract-vlad",
            Stage::Index => "index",
            Stage::Retrieve => "retrieve",
            Stage::Train => "train",
            Stage::Infer => "infer",
            Stage::Verify => "verify",
            Stage::Eval => "eval",
            Stage::Plot => "plot",
        }
    }

    fn upstream(self) -> Option<Stage> {
        let i = Stage::ALL.iter().position(|&s| s == self).unwrap();
        (i > 0).then(|| Stage::ALL[i - 1])
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Configuration hash of every stage, each chained to its upstream hash.
pub fn stage_hashes(cfg: &PipelineConfig) -> BTreeMap<Stage, String> {
    let mut out = BTreeMap::new();
    let mut prev = String::new();
    for stage in Stage::ALL {
        let section = match stage {
            Stage::Synth => serde_json::json!({ "synth": cfg.synth, "data": cfg.data }),
            Stage::FitVocab => serde_json::json!({ "seed": cfg.seed, "vocab": cfg.vocab }),
            Stage::ExtractVlad | Stage::Index => serde_json::json!({}),
            Stage::Retrieve => serde_json::json!(cfg.retrieval),
            Stage::Train => serde_json::json!({
                "seed": cfg.seed, "model": cfg.model, "train": cfg.train, "thresholds": cfg.eval.thresholds,
            }),
            Stage::Infer => serde_json::json!({}),
            Stage::Verify => serde_json::json!(cfg.verify),
            Stage::Eval => serde_json::json!(cfg.eval),
            Stage::Plot => serde_json::json!({}),
        };
        let text = format!("{}\n{}\n{}", stage.name(), prev, section);
        prev = sha256_hex(text.as_bytes());
        out.insert(stage, prev.clone());
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageStamp {
    pub stage: String,
    pub config_hash: String,
    /// Output file name (relative to the working directory) to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

/// Summary of one stage run.
#[derive(Clone, Debug, Serialize)]
pub struct StageSummary {
    pub stage: &'static str,
    pub wall_ms: f64,
    pub outputs: Vec<String>,
    /// Headline numbers of the stage (counts, metrics).
    pub info: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

/// A working directory plus the configuration driving it.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub dir: PathBuf,
    pub exec: Exec,
    hashes: BTreeMap<Stage, String>,
}

struct Ctx {
    outputs: Vec<String>,
    info: BTreeMap<String, f64>,
    warnings: Vec<String>,
}

impl Ctx {
    fn info(&mut self, key: impl Into<String>, v: f64) {
        self.info.insert(key.into(), v);
    }
}

impl Pipeline {
    pub fn new(config: PipelineConfig, dir: impl Into<PathBuf>, exec: Exec) -> Result<Self, PipelineError> {
        config.validate()?;
        let hashes = stage_hashes(&config);
        Ok(Pipeline { config, dir: dir.into(), exec, hashes })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn stamp_path(&self, stage: Stage) -> PathBuf {
        self.dir.join("stamps").join(format!("{}.json", stage.name()))
    }

    /// Stamp left by the last run of a stage, if any.
    pub fn read_stamp(&self, stage: Stage) -> Option<StageStamp> {
        serde_json::from_slice(&fs::read(self.stamp_path(stage)).ok()?).ok()
    }

    fn check_upstream(&self, stage: Stage, ctx: &mut Ctx) {
        let Some(up) = stage.upstream() else { return };
        if up == Stage::Synth && self.config.synth.is_none() {
            return;
        }
        match self.read_stamp(up) {
            Some(s) if s.config_hash == self.hashes[&up] => {}
            Some(_) => {
                let msg = format!("config-hash mismatch: `{}` outputs were produced with a different configuration", up.name());
                log::warn!("{msg}");
                ctx.warnings.push(msg);
            }
            None => {
                let msg = format!("no stamp for upstream stage `{}`", up.name());
                log::warn!("{msg}");
                ctx.warnings.push(msg);
            }
        }
    }

    fn require(&self, name: &str, stage: Stage) -> Result<PathBuf, PipelineError> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(PipelineError::MissingArtifact { path: p, stage: stage.name() })
        }
    }

    fn write(&self, ctx: &mut Ctx, name: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&p, bytes).map_err(io_err(&p))?;
        ctx.outputs.push(name.to_string());
        Ok(())
    }

    fn finish(&self, stage: Stage, ctx: &Ctx) -> Result<(), PipelineError> {
        let mut outputs = BTreeMap::new();
        for name in &ctx.outputs {
            let p = self.path(name);
            if p.is_file() {
                outputs.insert(name.clone(), sha256_hex(&fs::read(&p).map_err(io_err(&p))?));
            }
        }
        let stamp = StageStamp { stage: stage.name().into(), config_hash: self.hashes[&stage].clone(), outputs };
        let p = self.stamp_path(stage);
        fs::create_dir_all(p.parent().unwrap()).map_err(io_err(&p))?;
        fs::write(&p, serde_json::to_vec_pretty(&stamp).unwrap()).map_err(io_err(&p))
    }

    /// Runs one stage.
    pub fn run(&self, stage: Stage) -> Result<StageSummary, PipelineError> {
        let start = Instant::now();
        fs::create_dir_all(&self.dir).map_err(io_err(&self.dir))?;
        let mut ctx = Ctx { outputs: Vec::new(), info: BTreeMap::new(), warnings: Vec::new() };
        self.check_upstream(stage, &mut ctx);
        match stage {
            Stage::Synth => self.synth(&mut ctx)?,
            Stage::FitVocab => self.fit_vocab(&mut ctx)?,
            Stage::ExtractVlad => self.extract_vlad(&mut ctx)?,
            Stage::Index => self.index(&mut ctx)?,
            Stage::Retrieve => self.retrieve(&mut ctx)?,
            Stage::Train => self.train(&mut ctx)?,
            Stage::Infer => self.infer(&mut ctx)?,
            Stage::Verify => self.verify(&mut ctx)?,
            Stage::Eval => self.eval(&mut ctx, None)?,
            Stage::Plot => self.plot(&mut ctx)?,
        }
        self.finish(stage, &ctx)?;
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        log::info!("{} done in {:.0} ms", stage.name(), wall_ms);
        Ok(StageSummary { stage: stage.name(), wall_ms, outputs: ctx.outputs, info: ctx.info, warnings: ctx.warnings })
    }

    /// Evaluates an arbitrary score file (same columns as `scores_<split>.csv`)
    /// against the ground truth of the evaluation split.
    pub fn eval_scores(&self, scores: &Path) -> Result<StageSummary, PipelineError> {
        let start = Instant::now();
        let mut ctx = Ctx { outputs: Vec::new(), info: BTreeMap::new(), warnings: Vec::new() };
        self.eval(&mut ctx, Some(scores))?;
        self.finish(Stage::Eval, &ctx)?;
        Ok(StageSummary {
            stage: Stage::Eval.name(),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            outputs: ctx.outputs,
            info: ctx.info,
            warnings: ctx.warnings,
        })
    }

    /// Runs every stage in order (skipping `synth` without a synth section).
    pub fn run_all(&self) -> Result<Vec<StageSummary>, PipelineError> {
        Stage::ALL
            .iter()
            .filter(|&&s| s != Stage::Synth || self.config.synth.is_some())
            .map(|&s| self.run(s))
            .collect()
    }

    fn split_paths(&self, split: Split) -> Vec<PathBuf> {
        match &self.config.synth {
            Some(suite) if self.config.data.get(split).is_empty() => {
                suite.specs(split).iter().map(|s| self.dir.join("data").join(&s.name)).collect()
            }
            _ => self.config.data.get(split).to_vec(),
        }
    }

    fn load_split(&self, split: Split) -> Result<Vec<SequenceDataset>, PipelineError> {
        self.split_paths(split)
            .iter()
            .map(|p| {
                if !p.join("manifest.json").exists() {
                    return Err(PipelineError::MissingArtifact { path: p.clone(), stage: Stage::Synth.name() });
                }
                load_dataset(p).map_err(|e| PipelineError::Malformed { path: p.clone(), msg: e.to_string() })
            })
            .collect()
    }

    fn synth(&self, ctx: &mut Ctx) -> Result<(), PipelineError> {
        let suite = self
            .config
            .synth
            .as_ref()
            .ok_or_else(|| PipelineError::Config("the synth stage needs a [synth] section".into()))?;
        for split in Split::ALL {
            let specs = suite.specs(split);
            let data = par::map(self.exec, &specs, generate);
            for (spec, ds) in specs.iter().zip(data) {
                let ds = ds.map_err(stage_err)?;
                let rel = format!("data/{}", spec.name);
                let dir = self.path(&rel);
                if dir.exists() {
                    fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
                }
                save_dataset(&ds, &dir).map_err(stage_err)?;
                ctx.outputs.push(format!("{rel}/manifest.json"));
                ctx.info(format!("{}_keyframes", spec.name), ds.keyframes.len() as f64);
            }
        }
        Ok(())
    }

    fn vlad_options(&self) -> VladOptions {
        VladOptions { weighting: self.config.vocab.weighting, intra_normalize: self.config.vocab.intra_normalize }
    }

    fn fit_vocab(&self, ctx: &mut Ctx) -> Result<(), PipelineError> {
        let train = self.load_split(Split::Train)?;
        if train.is_empty() {
            return Err(PipelineError::Config("the training split is empty".into()));
        }
        let v = &self.config.vocab;
        let config = VocabConfig {
            n_clusters: v.n_clusters,
            metric: v.metric,
            seed: self.config.seed,
            max_per_image: v.max_keypoints,
            max_iterations: v.max_iterations,
            tolerance: v.tolerance,
        };
        let images: Vec<_> = train.iter().flat_map(|d| d.keyframes.iter().map(|k| &k.descriptors)).collect();
        let (vocab, report) = fit_vocabulary(&images, &config, self.exec).map_err(stage_err)?;
        let p = self.path("vocab.bin");
        vocab.save(&p).map_err(stage_err)?;
        ctx.outputs.push("vocab.bin".into());
        ctx.info("iterations", report.iterations as f64);
        ctx.info("final_cost", report.costs.last().copied().unwrap_or(0.0));
        Ok(())
    }

    fn load_vocab(&self) -> Result<Vocabulary, PipelineError> {
        let p = self.require("vocab.bin", Stage::FitVocab)?;
        Vocabulary::load(&p).map_err(|e| PipelineError::Malformed { path: p, msg: e.to_string() })
    }

    fn extract_vlad(&self, ctx: &mut Ctx) -> Result<(), PipelineError> {
        let vocab = self.load_vocab()?;
        let options = self.vlad_options();
        for split in Split::ALL {
            let data = self.load_split(split)?;
            if data.is_empty() {
                continue;
            }
            let images: Vec<_> = data.iter().flat_map(|d| d.keyframes.iter().map(|k| &k.descriptors)).collect();
            let vlads = compute_vlad_batch(&images, &vocab, &options, self.exec).map_err(stage_err)?;
            let keys = data
                .iter()
                .enumerate()
                .flat_map(|(s, d)| d.keyframes.iter().map(move |k| KeyframeKey::new(s as u32, k.id)));
            let rows: Vec<_> = keys.zip(vlads.iter()).collect();
            let names = data.iter().map(|d| d.name.clone()).collect();
            let index = DescriptorIndex::from_rows(names, rows).map_err(stage_err)?;
            let name = format!("vlad_{}.bin", split.name());
            index.save(&self.path(&name)).map_err(stage_err)?;
            ctx.outputs.push(name);
            ctx.info(format!("{}_descriptors", split.name()), vlads.len() as f64);
            ctx.info(format!("{}_zero", split.name()), vlads.iter().filter(|v| v.is_zero()).count() as f64);
        }
        Ok(())
    }

    fn index(&self, ctx: &mut Ctx) -> Result<(), PipelineError> {
        for split in Split::ALL {
            let data = self.load_split(split)?;
            if data.is_empty() {
                continue;
            }
            let src = self.require(&format!("vlad_{}.bin", split.name()), Stage::ExtractVlad)?;
            let vlad = DescriptorIndex::load(&src).map_err(|e| PipelineError::Malformed { path: src.clone(), msg: e.to_string() })?;
            // attach descriptors to keyframes and rebuild, which checks that
            // every keyframe of the bundle has a descriptor
            let mut data = data;
            let by_key: BTreeMap<KeyframeKey, usize> = vlad.keys().iter().enumerate().map(|(i, &k)| (k, i)).collect();
            for (s, d) in data.iter_mut().enumerate() {
                for kf in &mut d.keyframes {
                    let i = by_key.get(&KeyframeKey::new(s as u32, kf.id)).ok_or_else(|| PipelineError::Malformed {
                        path: src.clone(),
                        msg: format!("no descriptor for {}/{}", d.name, kf.id),
                    })?;
                    kf.vlad = Some(VladDescriptor::from_values(vlad.row(*i).iter().map(|&v| v as f64).collect()));
                }
            }
            let index = build_index(&data).map_err(stage_err)?;
            let name = format!("index_{}.bin", split.name());
            index.save(&self.path(&name)).map_err(stage_err)?;
            ctx.outputs.push(name);
            ctx.info(format!("{}_rows", split.name()), index.len() as f64);
        }
        Ok(())
    }

    fn load_index(&self, split: Split, names: Vec<String>) -> Result<DescriptorIndex, PipelineError> {
        let p = self.require(&format!("index_{}.bin", split.name()), Stage::Index)?;
        let idx = DescriptorIndex::load(&p).map_err(|e| PipelineError::Malformed { path: p, msg: e.to_string() })?;
        Ok(idx.with_sequence_names(names))
    }

    fn retrieve(&self, ctx: &mut Ctx) -> Result<(), PipelineError> {
        let r = &self.config.retrieval;
        for split in Split::ALL {
            let data = self.load_split(split)?;
            if data.is_empty() {
                continue;
            }
            let index = self.load_index(split, data.iter().map(|d| d.name.clone()).collect())?;
            let mut cliques = Vec::new();
            match r.scope {
                RetrievalScope::Sequence => {
                    for s in 0..data.len() as u32 {
                        let sub = index.restrict_to_sequence(s);
                        let queries = sub.keys().to_vec();
                        cliques.extend(build_cliques(&sub, &queries, r.k_pct, r.exclusion_window, self.exec).map_err(stage_err)?);
                    }
                }
                RetrievalScope::Split => {
                    let queries = index.keys().to_vec();
                    cliques = build_cliques(&index, &queries, r.k_pct, r.exclusion_window, self.exec).map_err(stage_err)?;
                }
            }
            cliques.sort_by_key(|c| c.query);
            let name = format!("cliques_{}.jsonl", split.name());
            self.write(ctx, &name, cliques_to_jsonl(&cliques).as_bytes())?;
            ctx.info(format!("{}_cliques", split.name()), cliques.len() as f64);
            ctx.info(
                format!("{}_neighbors_per_query", split.name()),
                cliques.first().map_or(0.0, |c| c.len() as f64 - 1.0),
            );
        }
        Ok(())
    }

    fn load_cliques(&self, split: Split) -> Result<Vec<CliqueGraph>, PipelineError> {
        let p = self.require(&format!("cliques_{}.jsonl", split.name()), Stage::Retrieve)?;
        let text = fs::read_to_string(&p).map_err(io_err(&p))?;
        cliques_from_jsonl(&text).map_err(|msg| PipelineError::Malformed { path: p, msg })
    }

    fn train_cliques<'a>(&self, corpus: &'a Corpus, cliques: &[CliqueGraph]) -> Result<Vec<TrainClique<'a>>, PipelineError> {
        cliques
            .iter()
            .map(|c| TrainClique::from_clique(c, corpus, &self.config.eval.thresholds).map_err(stage_err))
            .collect()
    }

    fn train(&self, ctx: &mut Ctx) -> Result<(), PipelineError> {
        let vocab = self.load_vocab()?;
        let train_corpus = Corpus::new(self.load_split(Split::Train)?);
        let val_corpus = Corpus::new(self.load_split(Split::Val)?);
        let train_cliques = self.load_cliques(Split::Train)?;
        let val_cliques = if val_corpus.datasets.is_empty() { Vec::new() } else { self.load_cliques(Split::Val)? };
        let train_set = self.train_cliques(&train_corpus, &train_cliques)?;
        let val_set = self.train_cliques(&val_corpus, &val_cliques)?;
        let mut init = ModelParams::<f32>::init(self.config.model.clone(), self.config.seed).map_err(stage_err)?;
        if vocab.dim() == self.config.model.desc_dim {
            init.init_netvlad_from_vocabulary(&vocab, NETVLAD_INIT_ALPHA).map_err(stage_err)?;
        }
        let outcome = gnn::train(init, &train_set, &val_set, &self.config.train, self.exec).map_err(stage_err)?;
        outcome.params.save(&self.path("model.bin")).map_err(stage_err)?;
        ctx.outputs.push("model.bin".into());
        self.write(ctx, "train_log.csv", outcome.log.to_csv().as_bytes())?;
        ctx.info("best_epoch", outcome.best_epoch as f64);
        ctx.info("epochs_run", outcome.epochs_run as f64);
        ctx.info("parameters", outcome.params.num_parameters() as f64);
        if let Some(ap) = outcome.best_val_ap {
            ctx.info("val_ap", ap);
        }
        if let Some(mr) = outcome.best_val_mr {
            ctx.info("val_mr", mr);
        }
        Ok(())
    }

    fn load_model(&self) -> Result<ModelParams<f32>, PipelineError> {
        let p = self.require("model.bin", Stage::Train)?;
        ModelParams::<f32>::load(&p).map_err(|e| PipelineError::Malformed { path: p, msg: e.to_string() })
    }

    fn infer(&self, ctx: &mut Ctx) -> Result<(), PipelineError> {
        let params = self.load_model()?;
        for split in [Split::Val, Split::Test] {
            let corpus = Corpus::new(self.load_split(split)?);
            if corpus.datasets.is_empty() {
                continue;
            }
            let cliques = self.load_cliques(split)?;
            let encodings = encode_corpus(&params, &corpus, self.exec).map_err(stage_err)?;
            let scored = par::map(self.exec, &cliques, |c| predict_query_edges(&params, c, &encodings));
            let mut edges = Vec::new();
            for s in scored {
                edges.extend(s.map_err(stage_err)?);
            }
            let names: Vec<String> = corpus.datasets.iter().map(|d| d.name.clone()).collect();
            let name = format!("scores_{}.csv", split.name());
            self.write(ctx, &name, scores_to_csv(&edges, &names).as_bytes())?;
            ctx.info(format!("{}_scored_edges", split.name()), edges.len() as f64);
        }
        Ok(())
    }

    fn load_scores(&self, path: &Path, names: &[String]) -> Result<Vec<ScoredEdge>, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        scores_from_csv(&text, names).map_err(|msg| PipelineError::Malformed { path: path.to_path_buf(), msg })
    }

    /// Pairs to verify: the union of the selected candidates and the largest
    /// sweep fraction, ranked by score.
    fn verification_budget(&self, ranked: usize) -> usize {
        let sweep_max = self.config.eval.sweep.iter().cloned().fold(0.0, f64::max);
        let by_sweep = (sweep_max * ranked as f64).ceil() as usize;
        by_sweep.min(ranked)
    }

    fn verify(&self, ctx: &mut Ctx) -> Result<(), PipelineError> {
        let split = self.config.eval.split;
        let corpus = Corpus::new(self.load_split(split)?);
        let names: Vec<String> = corpus.datasets.iter().map(|d| d.name.clone()).collect();
        let scores_path = self.require(&format!("scores_{}.csv", split.name()), Stage::Infer)?;
        let scored = self.load_scores(&scores_path, &names)?;
        let ranked = gnn::dedup_edges(&scored);
        let selected = if ranked.is_empty() {
            0
        } else {
            gnn::select_candidates(&scored, self.config.verify.selection).map_err(stage_err)?.len()
        };
        let budget = self.verification_budget(ranked.len()).max(selected);
        let v = &self.config.verify;
        let rows = par::map_range(self.exec, budget, |rank| {
            let e = &ranked[rank];
            let (fi, fj) = (corpus.get(e.a), corpus.get(e.b));
            let (Some(fi), Some(fj)) = (fi, fj) else {
                return Err(PipelineError::Stage(format!("unknown keyframe in pair {:?}-{:?}", e.a, e.b)));
            };
            let intrinsics = &corpus.datasets[e.a.sequence as usize].intrinsics;
            let verdict = verify_pair(fi, fj, &v.ransac, intrinsics, v.match_metric).map_err(stage_err)?;
            Ok(VerifiedRow { edge: *e, rank, selected: rank < selected, verdict })
        });
        let mut rows = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
        rows.sort_by_key(|r| (r.edge.a, r.edge.b));
        let name = format!("verified_{}.csv", split.name());
        self.write(ctx, &name, verified_to_csv(&rows, &names).as_bytes())?;
        ctx.info("verified", rows.len() as f64);
        ctx.info("selected", selected as f64);
        ctx.info("accepted", rows.iter().filter(|r| r.verdict.accepted().is_some()).count() as f64);
        Ok(())
    }

    fn eval(&self, ctx: &mut Ctx, scores_override: Option<&Path>) -> Result<(), PipelineError> {
        let split = self.config.eval.split;
        let corpus = Corpus::new(self.load_split(split)?);
        let names: Vec<String> = corpus.datasets.iter().map(|d| d.name.clone()).collect();
        let th = self.config.eval.thresholds;
        let scores_path = match scores_override {
            Some(p) => p.to_path_buf(),
            None => self.require(&format!("scores_{}.csv", split.name()), Stage::Infer)?,
        };
        let scored = self.load_scores(&scores_path, &names)?;
        let pose_of = |k: KeyframeKey| corpus.get(k).map(|kf| &kf.pose);
        let gnn_pairs: Vec<ScoredPair> =
            scored.iter().map(|e| ScoredPair { a: e.a, b: e.b, score: e.score, pose: None }).collect();
        let gnn_report = evaluate_split(&names, &gnn_pairs, &pose_of, &th);
        let (scores, labels) = pooled_labels(&gnn_pairs, &pose_of, &th);
        let curve = pr_curve(&scores, &labels).map_err(stage_err)?;
        self.write(ctx, "pr_curve.csv", curve.to_csv().as_bytes())?;
        let mut report = serde_json::json!({ "split": split.name(), "scores": gnn_report });
        ctx.info("ap", gnn_report.average.ap.unwrap_or(f64::NAN));
        ctx.info("mr", gnn_report.average.mr.unwrap_or(f64::NAN));

        let verified_path = self.path(&format!("verified_{}.csv", split.name()));
        if scores_override.is_none() && verified_path.exists() {
            let text = fs::read_to_string(&verified_path).map_err(io_err(&verified_path))?;
            let verified = verified_from_csv(&text, &names).map_err(|msg| PipelineError::Malformed { path: verified_path.clone(), msg })?;
            let ranked = gnn::dedup_edges(&scored);
            let with_ransac = |budget: usize, only_selected: bool| {
                combine_verified(&ranked, &verified, |r| if only_selected { r.selected } else { r.rank < budget })
            };
            let selected_pairs = with_ransac(0, true);
            let verified_report = evaluate_split(&names, &selected_pairs, &pose_of, &th);
            ctx.info("verified_ap", verified_report.average.ap.unwrap_or(f64::NAN));
            ctx.info("verified_mr", verified_report.average.mr.unwrap_or(f64::NAN));
            report["verified"] = serde_json::to_value(&verified_report).unwrap();
            let mut sweep = Vec::new();
            let available = verified.len();
            for &f in &self.config.eval.sweep {
                let budget = ((f * ranked.len() as f64).ceil() as usize).min(ranked.len());
                if budget > available {
                    continue;
                }
                let pairs = with_ransac(budget, false);
                let r = evaluate_split(&names, &pairs, &pose_of, &th);
                let accepted = verified.iter().filter(|v| v.rank < budget && v.accepted).count();
                sweep.push(SweepPoint { fraction: f, candidates: budget, accepted, ap: r.average.ap, mr: r.average.mr });
            }
            self.write(ctx, "sweep.csv", sweep_to_csv(&sweep).as_bytes())?;
            report["sweep"] = serde_json::to_value(&sweep).unwrap();
            report["retrieved_pairs"] = serde_json::json!(ranked.len());
            // smallest verification budget reaching the target AP
            let target = self.config.eval.target_ap;
            let reach = (1..=available.min(ranked.len())).find(|&b| {
                let r = evaluate_split(&names, &with_ransac(b, false), &pose_of, &th);
                r.average.ap.is_some_and(|ap| ap >= target)
            });
            report["target_ap"] = serde_json::json!(target);
            report["candidates_to_target"] = serde_json::json!(reach);
            ctx.info("retrieved_pairs", ranked.len() as f64);
            if let Some(b) = reach {
                ctx.info("candidates_to_target", b as f64);
            }
        }
        let text = serde_json::to_string_pretty(&report).unwrap() + "\n";
        self.write(ctx, "report.json", text.as_bytes())?;
        Ok(())
    }

    fn plot(&self, ctx: &mut Ctx) -> Result<(), PipelineError> {
        let pr_path = self.require("pr_curve.csv", Stage::Eval)?;
        let pr_text = fs::read_to_string(&pr_path).map_err(io_err(&pr_path))?;
        let curve = PrCurve::from_csv(&pr_text).map_err(|msg| PipelineError::Malformed { path: pr_path.clone(), msg })?;
        if curve.points.is_empty() {
            return Err(PipelineError::Malformed { path: pr_path, msg: "empty curve".into() });
        }
        let sweep_path = self.path("sweep.csv");
        let sweep = if sweep_path.exists() {
            let text = fs::read_to_string(&sweep_path).map_err(io_err(&sweep_path))?;
            let s = sweep_from_csv(&text).map_err(|msg| PipelineError::Malformed { path: sweep_path.clone(), msg })?;
            if s.is_empty() {
                return Err(PipelineError::Malformed { path: sweep_path, msg: "empty sweep".into() });
            }
            Some((text, s))
        } else {
            None
        };
        let pr_points: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.recall, p.precision)).collect();
        let svg = svg_line_plot("Precision-recall", "recall", "precision", &pr_points, false);
        self.write(ctx, "plots/pr_curve.svg", svg.as_bytes())?;
        self.write(ctx, "plots/pr_curve.csv", pr_text.as_bytes())?;
        if let Some((text, s)) = sweep {
            let pts: Vec<(f64, f64)> =
                s.iter().filter_map(|p| p.ap.map(|ap| (p.candidates.max(1) as f64, ap))).collect();
            let svg = svg_line_plot("AP vs verified candidates", "verified candidates", "AP", &pts, true);
            self.write(ctx, "plots/sweep.svg", svg.as_bytes())?;
            self.write(ctx, "plots/sweep.csv", text.as_bytes())?;
        }
        Ok(())
    }
}

/// Sharpness of the NetVLAD soft assignment when initialized from the
/// vocabulary.
pub const NETVLAD_INIT_ALPHA: f64 = 10.0;

fn evaluate_split<'a>(
    names: &[String],
    pairs: &[ScoredPair],
    pose_of: &impl Fn(KeyframeKey) -> Option<&'a crate::keyframe::Pose>,
    th: &LabelThresholds,
) -> EvalReport {
    let mut per_seq: BTreeMap<u32, Vec<ScoredPair>> = BTreeMap::new();
    for p in pairs {
        per_seq.entry(p.a.sequence).or_default().push(p.clone());
    }
    let reports = per_seq
        .iter()
        .map(|(s, ps)| evaluate_sequence(&names[*s as usize], ps, pose_of, th).0)
        .collect();
    EvalReport::from_sequences(reports)
}

fn pooled_labels<'a>(
    pairs: &[ScoredPair],
    pose_of: &impl Fn(KeyframeKey) -> Option<&'a crate::keyframe::Pose>,
    th: &LabelThresholds,
) -> (Vec<f64>, Vec<bool>) {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for p in crate::metrics::dedup_pairs(pairs) {
        if let (Some(a), Some(b)) = (pose_of(p.a), pose_of(p.b)) {
            scores.push(p.score);
            labels.push(th.is_loop_pair(a, b));
        }
    }
    (scores, labels)
}

/// Final pair scores after verification: a pair keeps its score when it was
/// verified (under `include`) and accepted, and scores zero otherwise.
fn combine_verified(
    ranked: &[ScoredEdge],
    verified: &[VerifiedRecord],
    include: impl Fn(&VerifiedRecord) -> bool,
) -> Vec<ScoredPair> {
    let by_pair: BTreeMap<(KeyframeKey, KeyframeKey), &VerifiedRecord> =
        verified.iter().map(|v| ((v.a, v.b), v)).collect();
    ranked
        .iter()
        .map(|e| match by_pair.get(&(e.a, e.b)) {
            Some(v) if include(v) && v.accepted => ScoredPair { a: e.a, b: e.b, score: e.score, pose: v.pose },
            _ => ScoredPair { a: e.a, b: e.b, score: 0.0, pose: None },
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub fraction: f64,
    pub candidates: usize,
    pub accepted: usize,
    pub ap: Option<f64>,
    pub mr: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn sweep_to_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("fraction,candidates,accepted,ap,mr\n");
    for p in points {
        let _ = writeln!(s, "{},{},{},{},{}", p.fraction, p.candidates, p.accepted, fmt_opt(p.ap), fmt_opt(p.mr));
    }
    s
}

pub fn sweep_from_csv(text: &str) -> Result<Vec<SweepPoint>, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some("fraction,candidates,accepted,ap,mr") {
        return Err("missing header `fraction,candidates,accepted,ap,mr`".into());
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 5 {
                return Err(format!("row {}: expected 5 fields", i + 2));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| format!("row {}: {e}", i + 2));
            let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
            Ok(SweepPoint {
                fraction: num(f[0])?,
                candidates: num(f[1])? as usize,
                accepted: num(f[2])? as usize,
                ap: opt(f[3])?,
                mr: opt(f[4])?,
            })
        })
        .collect()
}

fn cliques_to_jsonl(cliques: &[CliqueGraph]) -> String {
    let mut s = String::new();
    for c in cliques {
        let neighbors: Vec<serde_json::Value> = c.nodes[1..]
            .iter()
            .zip(&c.similarities[1..])
            .map(|(k, sim)| serde_json::json!([k.sequence, k.id, sim]))
            .collect();
        let line = serde_json::json!({ "query": [c.query.sequence, c.query.id], "neighbors": neighbors });
        s.push_str(&line.to_string());
        s.push('\n');
    }
    s
}

fn cliques_from_jsonl(text: &str) -> Result<Vec<CliqueGraph>, String> {
    #[derive(Deserialize)]
    struct Line {
        query: (u32, u32),
        neighbors: Vec<(u32, u32, f64)>,
    }
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let line: Line = serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1))?;
            let neighbors: Vec<Neighbor> = line
                .neighbors
                .iter()
                .map(|&(s, id, similarity)| Neighbor { key: KeyframeKey::new(s, id), similarity })
                .collect();
            Ok(CliqueGraph::from_neighbors(KeyframeKey::new(line.query.0, line.query.1), &neighbors))
        })
        .collect()
}

const SCORES_HEADER: &str = "seq_i,id_i,seq_j,id_j,score";

/// Query-edge scores, one row per edge, sorted by pair.
pub fn scores_to_csv(edges: &[ScoredEdge], names: &[String]) -> String {
    let mut rows: Vec<&ScoredEdge> = edges.iter().collect();
    rows.sort_by_key(|e| (e.a, e.b));
    let mut s = String::from(SCORES_HEADER);
    s.push('\n');
    for e in rows {
        let _ = writeln!(s, "{},{},{},{},{:.8}", names[e.a.sequence as usize], e.a.id, names[e.b.sequence as usize], e.b.id, e.score);
    }
    s
}

fn seq_ordinal(names: &[String], name: &str) -> Result<u32, String> {
    names.iter().position(|n| n == name).map(|p| p as u32).ok_or_else(|| format!("unknown sequence `{name}`"))
}

pub fn scores_from_csv(text: &str, names: &[String]) -> Result<Vec<ScoredEdge>, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some(SCORES_HEADER) {
        return Err(format!("missing header `{SCORES_HEADER}`"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 5 {
                return Err(format!("row {}: expected 5 fields", i + 2));
            }
            let id = |s: &str| s.parse::<u32>().map_err(|e| format!("row {}: {e}", i + 2));
            let score = f[4].parse::<f64>().map_err(|e| format!("row {}: {e}", i + 2))?;
            if !score.is_finite() {
                return Err(format!("row {}: non-finite score", i + 2));
            }
            Ok(ScoredEdge {
                a: KeyframeKey::new(seq_ordinal(names, f[0])?, id(f[1])?),
                b: KeyframeKey::new(seq_ordinal(names, f[2])?, id(f[3])?),
                score,
            })
        })
        .collect()
}

struct VerifiedRow {
    edge: ScoredEdge,
    rank: usize,
    selected: bool,
    verdict: Verdict,
}

const VERIFIED_HEADER: &str =
    "seq_i,id_i,seq_j,id_j,score,rank,selected,accepted,reason,inlier_ratio,qw,qx,qy,qz,tx,ty,tz,pose_valid";

fn verified_to_csv(rows: &[VerifiedRow], names: &[String]) -> String {
    let mut s = String::from(VERIFIED_HEADER);
    s.push('\n');
    for r in rows {
        let e = &r.edge;
        let _ = write!(
            s,
            "{},{},{},{},{:.8},{},{},",
            names[e.a.sequence as usize],
            e.a.id,
            names[e.b.sequence as usize],
            e.b.id,
            e.score,
            r.rank,
            r.selected as u8
        );
        match &r.verdict {
            Verdict::Accepted(v) => {
                let _ = write!(s, "1,,{:.6},", v.inlier_ratio);
                match &v.pose {
                    Some(p) => {
                        let q = p.quaternion();
                        let t = p.translation;
                        let _ = writeln!(
                            s,
                            "{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},1",
                            q.w, q.i, q.j, q.k, t.x, t.y, t.z
                        );
                    }
                    None => s.push_str(",,,,,,,0\n"),
                }
            }
            Verdict::Rejected(reason) => {
                let ratio = match reason {
                    crate::geoverify::RejectReason::LowInlierRatio { ratio } => format!("{ratio:.6}"),
                    _ => String::new(),
                };
                let _ = writeln!(s, "0,{},{ratio},,,,,,,,0", reason.code());
            }
        }
    }
    s
}

/// One row of a verification file.
#[derive(Clone, Debug, PartialEq)]
pub struct VerifiedRecord {
    pub a: KeyframeKey,
    pub b: KeyframeKey,
    pub score: f64,
    pub rank: usize,
    pub selected: bool,
    pub accepted: bool,
    pub inlier_ratio: Option<f64>,
    pub pose: Option<PredictedPose>,
}

pub fn verified_from_csv(text: &str, names: &[String]) -> Result<Vec<VerifiedRecord>, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some(VERIFIED_HEADER) {
        return Err("unexpected header in verification file".into());
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 18 {
                return Err(format!("row {}: expected 18 fields", i + 2));
            }
            let err = |e: &dyn std::fmt::Display| format!("row {}: {e}", i + 2);
            let num = |s: &str| s.parse::<f64>().map_err(|e| err(&e));
            let int = |s: &str| s.parse::<u64>().map_err(|e| err(&e));
            let pose = if f[17] == "1" {
                let q = nalgebra::Quaternion::new(num(f[10])?, num(f[11])?, num(f[12])?, num(f[13])?);
                let r = nalgebra::UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
                Some(PredictedPose { rotation: r, translation: nalgebra::Vector3::new(num(f[14])?, num(f[15])?, num(f[16])?) })
            } else {
                None
            };
            Ok(VerifiedRecord {
                a: KeyframeKey::new(seq_ordinal(names, f[0])?, int(f[1])? as u32),
                b: KeyframeKey::new(seq_ordinal(names, f[2])?, int(f[3])? as u32),
                score: num(f[4])?,
                rank: int(f[5])? as usize,
                selected: f[6] == "1",
                accepted: f[7] == "1",
                inlier_ratio: if f[9].is_empty() { None } else { Some(num(f[9])?) },
                pose,
            })
        })
        .collect()
}

/// Self-contained SVG line plot. `log_x` uses a base-10 x axis.
pub fn svg_line_plot(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)], log_x: bool) -> String {
    let (w, h, left, right, top, bottom) = (480.0, 360.0, 60.0, 20.0, 40.0, 50.0);
    let tx = |x: f64| if log_x { x.max(1e-12).log10() } else { x };
    let xs: Vec<f64> = points.iter().map(|p| tx(p.0)).collect();
    let (mut x0, mut x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let px = |x: f64| left + (tx(x) - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| top + (1.0 - y.clamp(0.0, 1.0)) * (h - top - bottom);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#, w / 2.0, escape(title));
    let (bx, by) = (h - bottom, w - right);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{bx}" x2="{by}" y2="{bx}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{bx}" stroke="black"/>"#);
    for i in 0..=4 {
        let y = i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{y:.2}</text>"#,
            left - 6.0,
            py(y) + 4.0
        );
    }
    for (v, label) in [(x0, "min"), (x1, "max")] {
        let raw = if log_x { 10f64.powf(v) } else { v };
        let xpos = if label == "min" { left } else { w - right };
        let _ = writeln!(
            s,
            r#"<text x="{xpos}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
            bx + 16.0,
            trim_num(raw)
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#, w / 2.0, h - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        escape(y_label)
    );
    let pts: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
    let _ = writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, pts.join(" "));
    s.push_str("</svg>\n");
    s
}

fn trim_num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e9 { format!("{v:.0}") } else { format!("{v:.3}") }
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let mut cfg = PipelineConfig { synth: Some(SynthSuite::default()), ..Default::default() };
        cfg.model.desc_dim = cfg.synth.as_ref().unwrap().world.desc_dim;
        let text = cfg.to_toml_string();
        let back = PipelineConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_sections_are_rejected() {
        let base = "[data]\ntest = [\"x\"]\n";
        assert!(PipelineConfig::from_toml_str(base).is_ok());
        for bad in [
            "[retrieval]\nk_pct = 0.0\n",
            "[model]\ndropout = 1.5\n",
            "[train]\nbatch_size = 0\n",
            "[verify.ransac]\nconfidence = 1.5\n",
            "[eval]\nsweep = [0.0]\n",
            "[vocab]\nn_clusters = 8\n",
        ] {
            let err = PipelineConfig::from_toml_str(&format!("{base}{bad}")).unwrap_err();
            assert!(matches!(err, PipelineError::Config(_)), "{bad}: {err}");
        }
        assert!(PipelineConfig::from_toml_str("").is_err());
    }

    #[test]
    fn stage_hashes_chain() {
        let cfg = PipelineConfig { data: DataPaths { test: vec!["x".into()], ..Default::default() }, ..Default::default() };
        let a = stage_hashes(&cfg);
        let mut changed = cfg.clone();
        changed.retrieval.k_pct = 2.0;
        let b = stage_hashes(&changed);
        for s in Stage::ALL {
            assert_eq!(a[&s] == b[&s], s < Stage::Retrieve, "{s:?}");
        }
    }

    #[test]
    fn score_file_round_trip() {
        let names = vec!["a".to_string(), "b".to_string()];
        let edges = vec![
            ScoredEdge { a: KeyframeKey::new(1, 3), b: KeyframeKey::new(1, 90), score: 0.25 },
            ScoredEdge { a: KeyframeKey::new(0, 7), b: KeyframeKey::new(0, 70), score: 0.125 },
        ];
        let text = scores_to_csv(&edges, &names);
        assert!(text.starts_with("seq_i,id_i,seq_j,id_j,score\na,7,a,70,"));
        let back = scores_from_csv(&text, &names).unwrap();
        assert_eq!(back, vec![edges[1], edges[0]]);
        assert!(scores_from_csv("seq_i,id_i,seq_j,id_j,score\nzz,1,a,2,0.5\n", &names).is_err());
        assert!(scores_from_csv("bad\n", &names).is_err());
    }

    #[test]
    fn sweep_csv_round_trip_and_svg() {
        let pts = vec![
            SweepPoint { fraction: 0.01, candidates: 3, accepted: 2, ap: Some(0.25), mr: Some(0.1) },
            SweepPoint { fraction: 0.1, candidates: 30, accepted: 12, ap: Some(0.75), mr: None },
        ];
        let text = sweep_to_csv(&pts);
        assert_eq!(sweep_from_csv(&text).unwrap(), pts);
        let svg = svg_line_plot("t", "x", "y", &[(3.0, 0.25), (30.0, 0.75)], true);
        assert!(svg.starts_with("<svg") && svg.contains("<polyline"));
    }
}
