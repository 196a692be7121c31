//! End-to-end pipeline stages over a data directory, driven by one
//! declarative configuration. Each stage reads the artifacts of earlier
//! stages and writes its own; every output is a deterministic function of
//! the configuration, the master seed and the inputs.
//!
//! Layout under the data root:
//!
//! ```text
//! trajectories/manifest.jsonl, *.jsonl     generate
//! augmented/index.json, *.jsonl            augment
//! corpus/corpus.txt (+ .manifest.json)     encode
//! tokenizer.json                           tokenize
//! splits.json                              split
//! models/<name>/checkpoint.bin, loss.csv,
//!               scaling_points.json        train
//! optimized/<name>/manifest.jsonl, *.jsonl optimize
//! evaluation/curves.csv, ranks.csv,
//!            summary.json                  evaluate
//! scaling/fit.json                         scaling-fit
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bench::{task_from_spec, BenchError, BenchmarkTask};
use crate::codec::{
    decode_trajectory, encode_trajectory_as, permute_augment, prefix_augment, read_corpus,
    read_corpus_sources, split_encoded, write_corpus, CodecError, EncodedTrajectory,
    QuantizationConfig, TrialGrammar, PREFIX_LENGTHS,
};
use crate::eval::{
    average_rank, fit_power_law, normalized_regret, pareto_points, CurveSet, EvalError,
    ScalingPoint,
};
use crate::infer::{InferError, ModelOptimizer, SamplerConfig};
use crate::model::{
    evaluate_loss, load_checkpoint, pack_windows, save_checkpoint, train_model, Checkpoint, Model,
    ModelConfig, ModelError, TrainConfig,
};
use crate::optimizers::{OptimizerKind, OptimizerSettings};
use crate::runner::{
    load_manifest_trajectories, make_splits, run_grid, run_seed, trajectory_dir,
    trajectory_file_name, GridSpec, RunError, RunManifest, RunRecord, RunStatus, SplitConfig,
    SplitName, Splits, Trajectory,
};
use crate::tok::{train_bpe, TokError, Tokenizer, DEFAULT_VOCAB_SIZE};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing input {path}; run `{stage}` first")]
    Missing { path: PathBuf, stage: &'static str },
    #[error("{0}")]
    Inconsistent(String),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Tok(#[from] TokError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    /// Task specs, see [`task_from_spec`].
    pub tasks: Vec<String>,
    pub optimizers: Vec<String>,
    pub seeds: u64,
    pub budget: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            tasks: vec!["branin".into()],
            optimizers: OptimizerKind::ALL.iter().map(|k| k.to_string()).collect(),
            seeds: 5,
            budget: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Parameter-order permutations per trajectory.
    pub permutations: usize,
    /// Prefix lengths; those longer than a trajectory are skipped.
    pub prefixes: Vec<usize>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            permutations: 1,
            prefixes: PREFIX_LENGTHS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodeConfig {
    pub q: u32,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        Self {
            q: crate::codec::DEFAULT_Q,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizeConfig {
    pub vocab_size: usize,
}

impl Default for TokenizeConfig {
    fn default() -> Self {
        Self {
            vocab_size: DEFAULT_VOCAB_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub holdout_fraction: f64,
    pub holdout_count: Option<usize>,
    pub heldout_spaces: Vec<String>,
}

impl Default for SplitSection {
    fn default() -> Self {
        let d = SplitConfig::default();
        Self {
            holdout_fraction: d.holdout_fraction,
            holdout_count: d.holdout_count,
            heldout_spaces: d.heldout_spaces,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Output directory name under `models/`.
    pub name: String,
    /// `tiny` or a row of the architecture grid (`2M`, `5M`, ...).
    pub size: String,
    pub context_length: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            name: "tiny".into(),
            size: "tiny".into(),
            context_length: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_tokens: u64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub eval_interval: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            total_tokens: d.total_tokens,
            warmup_fraction: d.warmup_fraction,
            weight_decay: d.weight_decay,
            grad_clip: d.grad_clip,
            eval_interval: d.eval_interval,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeConfig {
    /// Model directory name under `models/`.
    pub model: String,
    pub tasks: Vec<String>,
    /// Algorithm names placed in the prompt.
    pub algorithms: Vec<String>,
    pub seeds: u64,
    pub budget: usize,
    pub temperature: f64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            model: "tiny".into(),
            tasks: vec!["branin".into()],
            algorithms: vec!["RS".into()],
            seeds: 5,
            budget: 100,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Directories (relative to the data root) holding a `manifest.jsonl`.
    pub sources: Vec<String>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            sources: vec!["trajectories".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingConfig {
    pub models: Vec<String>,
    /// Points below this compute are treated as the initial convergence phase.
    pub min_compute: Option<f64>,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            models: vec!["tiny".into()],
            min_compute: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; every stage derives its randomness from it.
    pub seed: u64,
    pub generate: GenerateConfig,
    pub augment: AugmentConfig,
    pub encode: EncodeConfig,
    pub tokenize: TokenizeConfig,
    pub split: SplitSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub optimize: OptimizeConfig,
    pub evaluate: EvaluateConfig,
    pub scaling: ScalingConfig,
}

impl PipelineConfig {
    /// Parse TOML text, then apply `key.path=value` overrides. Values are
    /// read as TOML and fall back to plain strings.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("override `{o}` is not key=value")))?;
            let value = parse_override_value(raw.trim());
            set_dotted(&mut root, key.trim(), value)?;
        }
        toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))
    }

    fn stage_seed(&self, stage: &str) -> u64 {
        run_seed(self.seed, stage, "", 0)
    }

    fn quant(&self) -> Result<QuantizationConfig> {
        Ok(QuantizationConfig::new(self.encode.q)?)
    }

    fn optimizer_kinds(&self) -> Result<Vec<OptimizerKind>> {
        self.generate
            .optimizers
            .iter()
            .map(|s| {
                s.parse::<OptimizerKind>()
                    .map_err(|_| PipelineError::Config(format!("unknown optimizer `{s}`")))
            })
            .collect()
    }

    pub fn split_config(&self) -> SplitConfig {
        SplitConfig {
            holdout_fraction: self.split.holdout_fraction,
            holdout_count: self.split.holdout_count,
            heldout_spaces: self.split.heldout_spaces.clone(),
            seed: self.stage_seed("split"),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            total_tokens: t.total_tokens,
            warmup_fraction: t.warmup_fraction,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
            eval_interval: t.eval_interval,
            seed: self.stage_seed("train"),
            ..TrainConfig::default()
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let m = &self.model;
        let c = if m.size == "tiny" {
            ModelConfig::tiny(vocab_size, m.context_length)
        } else {
            ModelConfig::from_grid(&m.size, vocab_size, m.context_length)
                .ok_or_else(|| PipelineError::Config(format!("unknown model size `{}`", m.size)))?
        };
        c.validate()?;
        Ok(c)
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| PipelineError::Config(format!("empty key in `{key}`")))?;
    let mut at = root;
    for p in parts {
        at = at
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| PipelineError::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    at.insert(last.to_string(), value);
    Ok(())
}

/// Where a stage reads and writes.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn trajectories(&self) -> PathBuf {
        trajectory_dir(&self.root)
    }
    pub fn augmented(&self) -> PathBuf {
        self.root.join("augmented")
    }
    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus").join("corpus.txt")
    }
    pub fn tokenizer(&self) -> PathBuf {
        self.root.join("tokenizer.json")
    }
    pub fn splits(&self) -> PathBuf {
        self.root.join("splits.json")
    }
    pub fn model_dir(&self, name: &str) -> PathBuf {
        self.root.join("models").join(name)
    }
    pub fn optimized(&self, model: &str) -> PathBuf {
        self.root.join("optimized").join(model)
    }
    pub fn evaluation(&self) -> PathBuf {
        self.root.join("evaluation")
    }
    pub fn scaling(&self) -> PathBuf {
        self.root.join("scaling").join("fit.json")
    }

    fn require(&self, path: PathBuf, stage: &'static str) -> Result<PathBuf> {
        if path.exists() {
            Ok(path)
        } else {
            Err(PipelineError::Missing { path, stage })
        }
    }
}

/// Shared knobs of every stage invocation.
#[derive(Debug, Clone, Copy)]
pub struct StageOptions {
    pub jobs: usize,
    pub dry_run: bool,
}

impl Default for StageOptions {
    fn default() -> Self {
        Self {
            jobs: 1,
            dry_run: false,
        }
    }
}

/// Human-readable summary lines of a stage.
pub type Report = Vec<String>;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn build_tasks(specs: &[String]) -> Result<Vec<BenchmarkTask>> {
    if specs.is_empty() {
        return Err(PipelineError::Config("no tasks configured".into()));
    }
    let tasks: Vec<BenchmarkTask> = specs
        .iter()
        .map(|s| task_from_spec(s))
        .collect::<std::result::Result<_, _>>()?;
    let mut seen = std::collections::BTreeSet::new();
    for t in &tasks {
        if !seen.insert(t.id.as_str()) {
            return Err(PipelineError::Config(format!(
                "task `{}` listed twice",
                t.id
            )));
        }
    }
    Ok(tasks)
}

/// Runner grid over the configured tasks, optimizers and seeds.
pub fn generate(cfg: &PipelineConfig, ws: &Workspace, opts: StageOptions) -> Result<Report> {
    let kinds = cfg.optimizer_kinds()?;
    let g = &cfg.generate;
    if kinds.is_empty() || g.seeds == 0 || g.budget == 0 {
        return Err(PipelineError::Config(
            "generate needs optimizers, seeds > 0 and budget > 0".into(),
        ));
    }
    let tasks = build_tasks(&g.tasks)?;
    let plan = format!(
        "generate: {} optimizers x {} tasks x {} seeds = {} runs of {} trials into {}",
        kinds.len(),
        tasks.len(),
        g.seeds,
        kinds.len() as u64 * tasks.len() as u64 * g.seeds,
        g.budget,
        ws.trajectories().display()
    );
    if opts.dry_run {
        return Ok(vec![plan]);
    }
    let grid = GridSpec {
        optimizers: kinds,
        seeds: (0..g.seeds).collect(),
        budget: g.budget,
        master_seed: cfg.seed,
        settings: OptimizerSettings::default(),
    };
    let dir = ws.trajectories();
    let (manifest, _) = run_grid(&tasks, &grid, Some(&dir), opts.jobs)?;
    manifest.write(&dir.join("manifest.jsonl"))?;
    Ok(vec![
        plan,
        format!(
            "generate: {} runs, {} failed",
            manifest.len(),
            manifest.n_failed()
        ),
    ])
}

fn load_generated(ws: &Workspace) -> Result<Vec<Trajectory>> {
    let dir = ws.trajectories();
    let manifest = RunManifest::read(&ws.require(dir.join("manifest.jsonl"), "generate")?)?;
    Ok(load_manifest_trajectories(&manifest, &dir)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AugmentEntry {
    file: String,
    augmentation: String,
}

/// Permutation and prefix augmentation of every generated trajectory. The
/// originals are kept as `none`.
pub fn augment(cfg: &PipelineConfig, ws: &Workspace, opts: StageOptions) -> Result<Report> {
    let trajs = load_generated(ws)?;
    let a = &cfg.augment;
    if a.prefixes.contains(&0) {
        return Err(PipelineError::Config("prefix length 0".into()));
    }
    let per: usize = 1 + a.permutations;
    let mut prefix_count = 0;
    for t in &trajs {
        prefix_count += a.prefixes.iter().filter(|&&p| p <= t.len()).count();
    }
    let plan = format!(
        "augment: {} trajectories -> {} records ({} permutations each, {} prefixes) into {}",
        trajs.len(),
        trajs.len() * per + prefix_count,
        a.permutations,
        prefix_count,
        ws.augmented().display()
    );
    if opts.dry_run {
        return Ok(vec![plan]);
    }
    let dir = ws.augmented();
    std::fs::create_dir_all(&dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed("augment"));
    let mut index = Vec::new();
    for (i, t) in trajs.iter().enumerate() {
        let mut out: Vec<(String, Trajectory)> = vec![("none".into(), t.clone())];
        for p in 0..a.permutations {
            out.push((format!("perm{p}"), permute_augment(t, &mut rng)));
        }
        for &p in a.prefixes.iter().filter(|&&p| p <= t.len()) {
            out.push((format!("prefix{p}"), prefix_augment(t, p)?));
        }
        for (aug, traj) in out {
            let file = format!("{i:06}__{aug}.jsonl");
            traj.write(&dir.join(&file))?;
            index.push(AugmentEntry {
                file,
                augmentation: aug,
            });
        }
    }
    write_json(&dir.join("index.json"), &index)?;
    Ok(vec![
        plan,
        format!("augment: wrote {} records", index.len()),
    ])
}

fn load_for_encoding(ws: &Workspace) -> Result<Vec<(String, Trajectory)>> {
    let index_path = ws.augmented().join("index.json");
    if index_path.exists() {
        let index: Vec<AugmentEntry> = read_json(&index_path)?;
        index
            .into_iter()
            .map(|e| {
                Ok((
                    e.augmentation,
                    Trajectory::read(&ws.augmented().join(&e.file))?,
                ))
            })
            .collect()
    } else {
        Ok(load_generated(ws)?
            .into_iter()
            .map(|t| ("none".to_string(), t))
            .collect())
    }
}

/// Encode trajectories (augmented ones when present) into the text corpus.
/// With `verify`, every record is decoded again and checked against the
/// grammar.
pub fn encode(
    cfg: &PipelineConfig,
    ws: &Workspace,
    opts: StageOptions,
    verify: bool,
) -> Result<Report> {
    let quant = cfg.quant()?;
    let input = load_for_encoding(ws)?;
    let plan = format!(
        "encode: {} trajectories with Q={} into {}",
        input.len(),
        quant.q,
        ws.corpus().display()
    );
    if opts.dry_run {
        return Ok(vec![plan]);
    }
    let records: Vec<EncodedTrajectory> = input
        .iter()
        .map(|(aug, t)| encode_trajectory_as(t, quant, aug))
        .collect::<std::result::Result<_, _>>()?;
    let path = ws.corpus();
    std::fs::create_dir_all(path.parent().expect("corpus has a parent"))?;
    write_corpus(&path, &records)?;
    let mut report = vec![plan, format!("encode: wrote {} records", records.len())];
    if verify {
        let violations = verify_records(&records, &input, quant);
        report.push(format!(
            "encode: verify found {violations} round-trip violations"
        ));
        if violations > 0 {
            return Err(PipelineError::Inconsistent(format!(
                "{violations} records failed round-trip verification"
            )));
        }
    }
    Ok(report)
}

fn verify_records(
    records: &[EncodedTrajectory],
    input: &[(String, Trajectory)],
    quant: QuantizationConfig,
) -> usize {
    let half_step = 0.5 / (quant.q - 1) as f64 + 1e-12;
    records
        .iter()
        .zip(input)
        .filter(|(rec, (_, traj))| {
            let Ok(dec) = decode_trajectory(&rec.text, quant) else {
                return true;
            };
            let grammar = TrialGrammar::new(&dec.space, quant);
            let Ok((_, _, stream)) = split_encoded(&rec.text) else {
                return true;
            };
            if !grammar.accepts_stream(stream.as_bytes()) || dec.trials.len() != traj.len() {
                return true;
            }
            let order = traj.space.canonical_order();
            dec.trials.iter().zip(&traj.trials).any(|(d, (c, _))| {
                let Ok(u) = traj.space.to_unit(c) else {
                    return true;
                };
                order
                    .iter()
                    .enumerate()
                    .any(|(j, &i)| match (&d.unit.0[j], &u.0[i]) {
                        (crate::space::ParamValue::Num(a), crate::space::ParamValue::Num(b)) => {
                            (a - b).abs() > half_step
                        }
                        (a, b) => a != b,
                    })
            })
        })
        .count()
}

/// Train the tokenizer on the whole corpus.
pub fn tokenize(cfg: &PipelineConfig, ws: &Workspace, opts: StageOptions) -> Result<Report> {
    let corpus_path = ws.require(ws.corpus(), "encode")?;
    let plan = format!(
        "tokenize: BPE with vocabulary {} on {} into {}",
        cfg.tokenize.vocab_size,
        corpus_path.display(),
        ws.tokenizer().display()
    );
    if opts.dry_run {
        return Ok(vec![plan]);
    }
    let docs = read_corpus(&corpus_path)?;
    let tok = train_bpe(&docs, cfg.tokenize.vocab_size)?;
    tok.save(&ws.tokenizer())?;
    let n_tokens: usize = docs.iter().map(|d| tok.tokenize(d).len()).sum();
    let n_bytes: usize = docs.iter().map(String::len).sum();
    Ok(vec![
        plan,
        format!(
            "tokenize: {} merges, {} tokens for {} bytes ({:.2} bytes/token)",
            tok.merges().len(),
            n_tokens,
            n_bytes,
            n_bytes as f64 / n_tokens.max(1) as f64
        ),
    ])
}

/// Assign tasks to train / unseen-task / unseen-space splits.
pub fn split(cfg: &PipelineConfig, ws: &Workspace, opts: StageOptions) -> Result<Report> {
    let trajs = load_generated(ws)?;
    let pairs: Vec<(&str, &str)> = trajs
        .iter()
        .map(|t| (t.task_id.as_str(), t.space.id.as_str()))
        .collect();
    let splits = make_splits(pairs, &cfg.split_config())?;
    let summary = format!(
        "split: {} train, {} unseen-task, {} unseen-space tasks",
        splits.train.len(),
        splits.val_unseen_task.len(),
        splits.val_unseen_space.len()
    );
    if opts.dry_run {
        return Ok(vec![summary]);
    }
    write_json(&ws.splits(), &splits)?;
    Ok(vec![summary])
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// Token windows per split.
#[derive(Debug, Default)]
pub struct SplitWindows {
    pub train: Vec<Vec<u32>>,
    pub val_unseen_task: Vec<Vec<u32>>,
    pub val_unseen_space: Vec<Vec<u32>>,
}

/// Tokenize the corpus and pack each split into training windows.
pub fn split_windows(
    docs: &[String],
    task_of: &[String],
    splits: &Splits,
    tok: &Tokenizer,
    context: usize,
) -> Result<SplitWindows> {
    let mut by: BTreeMap<SplitName, Vec<Vec<u32>>> = BTreeMap::new();
    for (doc, task) in docs.iter().zip(task_of) {
        let s = splits.split_of(task).ok_or_else(|| {
            PipelineError::Inconsistent(format!("task `{task}` is in no split; rerun `split`"))
        })?;
        by.entry(s).or_default().push(tok.tokenize(doc));
    }
    let mut pack = |s| pack_windows(&by.remove(&s).unwrap_or_default(), tok.eos_id(), context);
    Ok(SplitWindows {
        train: pack(SplitName::Train),
        val_unseen_task: pack(SplitName::ValUnseenTask),
        val_unseen_space: pack(SplitName::ValUnseenSpace),
    })
}

/// Train a model on the train split; validate on unseen tasks.
pub fn train(
    cfg: &PipelineConfig,
    ws: &Workspace,
    opts: StageOptions,
    log: &mut dyn FnMut(&str),
) -> Result<Report> {
    let corpus_path = ws.require(ws.corpus(), "encode")?;
    let tok_path = ws.require(ws.tokenizer(), "tokenize")?;
    let splits_path = ws.require(ws.splits(), "split")?;
    let tok = Tokenizer::load(&tok_path)?;
    let mconf = cfg.model_config(tok.model_vocab_size())?;
    let tconf = cfg.train_config();
    let dir = ws.model_dir(&cfg.model.name);
    let plan = format!(
        "train: {} layers, dim {}, {} parameters ({} non-embedding), {} steps of {} windows x {} tokens into {}",
        mconf.n_layers,
        mconf.model_dim,
        mconf.n_params(),
        mconf.n_non_embedding_params(),
        tconf.total_steps(mconf.context_length),
        tconf.batch_size,
        mconf.context_length,
        dir.display()
    );
    if opts.dry_run {
        return Ok(vec![plan]);
    }
    let docs = read_corpus(&corpus_path)?;
    let sources = read_corpus_sources(&corpus_path)?;
    if sources.len() != docs.len() {
        return Err(PipelineError::Inconsistent(
            "corpus and its manifest disagree; rerun `encode`".into(),
        ));
    }
    let splits: Splits = read_json(&splits_path)?;
    let task_of: Vec<String> = sources.into_iter().map(|s| s.task_id).collect();
    let windows = split_windows(&docs, &task_of, &splits, &tok, mconf.context_length)?;
    if windows.train.is_empty() {
        return Err(PipelineError::Inconsistent("train split is empty".into()));
    }

    let mut model = Model::<f32>::init(mconf.clone(), tconf.seed)?;
    let initial_val = if windows.val_unseen_task.is_empty() {
        None
    } else {
        Some(evaluate_loss(&model, &windows.val_unseen_task)?)
    };
    let n_non_embedding = mconf.n_non_embedding_params() as f64;
    let mut points = Vec::new();
    let mut csv = String::from("step,tokens,learning_rate,train_loss,val_loss\n");
    let outcome = train_model(
        &mut model,
        &windows.train,
        &windows.val_unseen_task,
        &tconf,
        |r| {
            let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                csv,
                "{},{},{},{},{}",
                r.step, r.tokens, r.learning_rate, r.train_loss, val
            )
            .expect("string write");
            if let Some(v) = r.val_loss {
                points.push(ScalingPoint {
                    n_params: n_non_embedding,
                    tokens: r.tokens as f64,
                    loss: v,
                });
                log(&format!(
                    "step {} tokens {} train {:.4} val {:.4}",
                    r.step, r.tokens, r.train_loss, v
                ));
            }
        },
    )?;
    let unseen_space = if windows.val_unseen_space.is_empty() {
        None
    } else {
        Some(evaluate_loss(&model, &windows.val_unseen_space)?)
    };

    std::fs::create_dir_all(&dir)?;
    let ckpt = Checkpoint {
        model,
        step: outcome.steps,
        tokens_seen: outcome.tokens_seen,
        train: Some(tconf),
        tokenizer_sha256: Some(sha256_file(&tok_path)?),
    };
    let id = save_checkpoint(&ckpt, &dir.join("checkpoint.bin"))?;
    std::fs::write(dir.join("loss.csv"), csv)?;
    write_json(&dir.join("scaling_points.json"), &points)?;
    let final_val = outcome.history.last().and_then(|r| r.val_loss);
    write_json(
        &dir.join("summary.json"),
        &serde_json::json!({
            "checkpoint_id": id,
            "steps": outcome.steps,
            "tokens_seen": outcome.tokens_seen,
            "n_params": mconf.n_params(),
            "n_non_embedding_params": mconf.n_non_embedding_params(),
            "initial_val_loss": initial_val,
            "final_val_loss": final_val,
            "val_unseen_space_loss": unseen_space,
            "train_windows": windows.train.len(),
            "val_windows": windows.val_unseen_task.len(),
        }),
    )?;
    Ok(vec![
        plan,
        format!(
            "train: checkpoint {id}, {} steps, final validation loss {}",
            outcome.steps,
            final_val.map_or("n/a".to_string(), |v| format!("{v:.4}"))
        ),
    ])
}

/// Run the trained model as an optimizer on the configured tasks.
pub fn optimize(cfg: &PipelineConfig, ws: &Workspace, opts: StageOptions) -> Result<Report> {
    let o = &cfg.optimize;
    if o.algorithms.is_empty() || o.seeds == 0 || o.budget == 0 {
        return Err(PipelineError::Config(
            "optimize needs algorithms, seeds > 0 and budget > 0".into(),
        ));
    }
    let ckpt_path = ws.require(ws.model_dir(&o.model).join("checkpoint.bin"), "train")?;
    let tok_path = ws.require(ws.tokenizer(), "tokenize")?;
    let tasks = build_tasks(&o.tasks)?;
    let out = ws.optimized(&o.model);
    let plan = format!(
        "optimize: model `{}` x {} algorithms x {} tasks x {} seeds, {} trials each into {}",
        o.model,
        o.algorithms.len(),
        tasks.len(),
        o.seeds,
        o.budget,
        out.display()
    );
    if opts.dry_run {
        return Ok(vec![plan]);
    }
    let (ckpt, id) = load_checkpoint(&ckpt_path)?;
    let tok = Tokenizer::load(&tok_path)?;
    if let Some(want) = &ckpt.tokenizer_sha256 {
        if *want != sha256_file(&tok_path)? {
            return Err(PipelineError::Inconsistent(
                "tokenizer changed since the checkpoint was trained; rerun `train`".into(),
            ));
        }
    }
    let opt = ModelOptimizer::new(&ckpt.model, &tok, id.clone())?;
    std::fs::create_dir_all(&out)?;
    let keys: Vec<(&String, &BenchmarkTask, u64)> = o
        .algorithms
        .iter()
        .flat_map(|a| {
            tasks
                .iter()
                .flat_map(move |t| (0..o.seeds).map(move |s| (a, t, s)))
        })
        .collect();
    let one = |&(alg, task, seed_index): &(&String, &BenchmarkTask, u64)| -> RunRecord {
        let label = format!("model:{alg}");
        let seed = run_seed(cfg.seed, &label, &task.id, seed_index);
        let sampler = SamplerConfig {
            temperature: o.temperature,
            seed,
            ..SamplerConfig::default()
        };
        let mut rec = RunRecord {
            optimizer: format!("model:{alg}@{id}"),
            task_id: task.id.clone(),
            seed_index,
            seed,
            status: RunStatus::Ok,
            path: None,
            best: None,
            error: None,
        };
        let file = trajectory_file_name(&format!("model-{alg}"), &task.id, seed_index);
        match opt
            .optimize(task, alg, o.budget, &sampler)
            .map_err(PipelineError::from)
            .and_then(|t| {
                t.write(&out.join(&file))
                    .map(|_| t)
                    .map_err(PipelineError::from)
            }) {
            Ok(t) => {
                rec.best = t.objectives().into_iter().reduce(f64::min);
                rec.path = Some(file);
            }
            Err(e) => {
                rec.status = RunStatus::Failed;
                rec.error = Some(e.to_string());
            }
        }
        rec
    };
    let runs: Vec<RunRecord> = if opts.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        pool.install(|| keys.par_iter().map(one).collect())
    } else {
        keys.iter().map(one).collect()
    };
    let manifest = RunManifest { runs };
    manifest.write(&out.join("manifest.jsonl"))?;
    Ok(vec![
        plan,
        format!(
            "optimize: {} runs, {} failed",
            manifest.len(),
            manifest.n_failed()
        ),
    ])
}

/// Best-so-far curves, average ranks and normalized regret over the
/// configured trajectory sources.
pub fn evaluate(cfg: &PipelineConfig, ws: &Workspace, opts: StageOptions) -> Result<Report> {
    let mut curves = CurveSet::new();
    let mut n_runs = 0;
    let manifests: Vec<(PathBuf, PathBuf)> = cfg
        .evaluate
        .sources
        .iter()
        .map(|s| {
            let dir = ws.root.join(s);
            let m = ws.require(
                dir.join("manifest.jsonl"),
                if s.starts_with("optimized") {
                    "optimize"
                } else {
                    "generate"
                },
            )?;
            Ok((dir, m))
        })
        .collect::<Result<_>>()?;
    let plan = format!(
        "evaluate: {} sources into {}",
        manifests.len(),
        ws.evaluation().display()
    );
    if opts.dry_run {
        return Ok(vec![plan]);
    }
    for (dir, m) in &manifests {
        let manifest = RunManifest::read(m)?;
        for r in manifest.runs.iter().filter(|r| r.status == RunStatus::Ok) {
            let Some(p) = &r.path else { continue };
            let t = Trajectory::read(&dir.join(p))?;
            curves.add(&r.optimizer, &r.task_id, t.objectives());
            n_runs += 1;
        }
    }
    let methods: Vec<String> = curves.methods().into_iter().map(String::from).collect();
    if methods.is_empty() {
        return Err(PipelineError::Inconsistent(
            "no successful runs to evaluate".into(),
        ));
    }
    let mut final_step = usize::MAX;
    let mut regret: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for m in &methods {
        for task in curves.tasks(m) {
            let (mean, _) = curves.summary(m, task)?;
            final_step = final_step.min(mean.len());
            let (lo, hi) = curves.task_extrema(task).expect("task has runs");
            regret
                .entry(m.clone())
                .or_default()
                .push(*normalized_regret(&mean, lo, hi).last().unwrap_or(&0.0));
        }
    }
    // Ranks only over tasks every method ran on.
    let common: Vec<&str> = curves
        .tasks(&methods[0])
        .into_iter()
        .filter(|t| methods.iter().all(|m| curves.raw(m, t).is_some()))
        .collect();
    let ranks = if methods.len() >= 2 && final_step > 0 && !common.is_empty() {
        let mut shared = CurveSet::new();
        for m in &methods {
            for t in &common {
                for run in curves.raw(m, t).expect("common task") {
                    shared.add(m, t, run.clone());
                }
            }
        }
        Some(average_rank(&shared, final_step - 1)?)
    } else {
        None
    };
    let dir = ws.evaluation();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("curves.csv"), curves.to_csv()?)?;
    let mut csv = String::from("method,average_rank,mean_final_regret\n");
    let mut summary = serde_json::Map::new();
    for m in &methods {
        let r = ranks.as_ref().map(|r| r[m]);
        let reg = crate::stats::mean(&regret[m]);
        writeln!(
            csv,
            "{m},{},{reg}",
            r.map(|v| v.to_string()).unwrap_or_default()
        )
        .expect("string write");
        summary.insert(
            m.clone(),
            serde_json::json!({ "average_rank": r, "mean_final_regret": reg }),
        );
    }
    std::fs::write(dir.join("ranks.csv"), csv)?;
    write_json(
        &dir.join("summary.json"),
        &serde_json::json!({ "runs": n_runs, "final_step": final_step, "methods": summary }),
    )?;
    Ok(vec![
        plan,
        format!("evaluate: {n_runs} runs, {} methods", methods.len()),
    ])
}

/// Pareto front of (compute, validation loss) measurements and a power-law
/// fit through it.
pub fn scaling_fit(cfg: &PipelineConfig, ws: &Workspace, opts: StageOptions) -> Result<Report> {
    let paths: Vec<PathBuf> = cfg
        .scaling
        .models
        .iter()
        .map(|m| ws.require(ws.model_dir(m).join("scaling_points.json"), "train"))
        .collect::<Result<_>>()?;
    let plan = format!(
        "scaling-fit: {} models into {}",
        paths.len(),
        ws.scaling().display()
    );
    if opts.dry_run {
        return Ok(vec![plan]);
    }
    let mut points: Vec<ScalingPoint> = Vec::new();
    for p in &paths {
        points.extend(read_json::<Vec<ScalingPoint>>(p)?);
    }
    let front = pareto_points(&points, cfg.scaling.min_compute);
    let fit = fit_power_law(&front)?;
    write_json(
        &ws.scaling(),
        &serde_json::json!({
            "points": points,
            "pareto": front,
            "fit": { "a": fit.a, "b": fit.b },
        }),
    )?;
    Ok(vec![
        plan,
        format!(
            "scaling-fit: {} points, {} on the front, L = {:.4} * C^-{:.5}",
            points.len(),
            front.len(),
            fit.a,
            fit.b
        ),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_to_nested_keys() {
        let cfg = PipelineConfig::from_toml(
            "seed = 3\n[generate]\nseeds = 2\n",
            &[
                "generate.budget=7".into(),
                "generate.tasks=[\"forrester\"]".into(),
                "model.size=2M".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.generate.seeds, 2);
        assert_eq!(cfg.generate.budget, 7);
        assert_eq!(cfg.generate.tasks, vec!["forrester"]);
        assert_eq!(cfg.model.size, "2M");
        assert!(PipelineConfig::from_toml("", &["nokey".into()]).is_err());
        assert!(PipelineConfig::from_toml("[generate]\nbogus = 1\n", &[]).is_err());
    }

    #[test]
    fn dry_run_touches_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path().join("data"));
        let cfg = PipelineConfig::default();
        let opts = StageOptions {
            jobs: 1,
            dry_run: true,
        };
        let report = generate(&cfg, &ws, opts).unwrap();
        assert!(report[0].contains("5 optimizers x 1 tasks x 5 seeds = 25 runs"));
        assert!(!ws.root.exists());
        assert!(matches!(
            augment(&cfg, &ws, opts),
            Err(PipelineError::Missing { .. })
        ));
    }

    #[test]
    fn stage_seeds_differ() {
        let cfg = PipelineConfig::default();
        assert_ne!(cfg.split_config().seed, cfg.train_config().seed);
    }
}
