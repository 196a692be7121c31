//! Optimizer × task × seed grids, trajectory persistence and train/validation
//! splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bench::{BenchError, BenchmarkTask};
use crate::optimizers::{OptimizerKind, OptimizerSettings, OptimizerState};
use crate::space::{Configuration, SearchSpace, SpaceError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("budget T must be at least 1")]
    EmptyBudget,
    #[error("trial {trial}: {source}")]
    Oracle {
        trial: usize,
        #[source]
        source: BenchError,
    },
    #[error("trial {trial}: {source}")]
    Observe {
        trial: usize,
        #[source]
        source: SpaceError,
    },
    #[error("{path}: line {line}: {reason}")]
    Format {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("invalid split configuration: {0}")]
    Split(String),
    #[error("grid needs at least one task, optimizer and seed")]
    EmptyGrid,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One optimizer run: trials in evaluation order plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub task_id: String,
    pub space: SearchSpace,
    pub optimizer: String,
    pub seed: u64,
    pub trials: Vec<(Configuration, f64)>,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryMeta {
    task_id: String,
    space_id: String,
    optimizer: String,
    seed: u64,
    #[serde(rename = "T")]
    t: usize,
    space: SearchSpace,
}

#[derive(Serialize, Deserialize)]
struct TrialLine {
    t: usize,
    config: serde_json::Map<String, serde_json::Value>,
    objective: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn objectives(&self) -> Vec<f64> {
        self.trials.iter().map(|(_, y)| *y).collect()
    }

    pub fn to_jsonl(&self) -> String {
        let meta = TrajectoryMeta {
            task_id: self.task_id.clone(),
            space_id: self.space.id.clone(),
            optimizer: self.optimizer.clone(),
            seed: self.seed,
            t: self.trials.len(),
            space: self.space.clone(),
        };
        let mut out = serde_json::to_string(&meta).expect("metadata serializes");
        out.push('\n');
        for (t, (config, y)) in self.trials.iter().enumerate() {
            let line = TrialLine {
                t,
                config: self.space.config_to_json(config),
                objective: *y,
            };
            out.push_str(&serde_json::to_string(&line).expect("trial serializes"));
            out.push('\n');
        }
        out
    }

    /// Parse the JSON Lines form; `origin` only labels error messages.
    pub fn from_jsonl(text: &str, origin: &str) -> Result<Self, RunError> {
        let err = |line: usize, reason: String| RunError::Format {
            path: origin.to_string(),
            line,
            reason,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines
            .next()
            .ok_or_else(|| err(1, "empty trajectory file".into()))?;
        let meta: TrajectoryMeta =
            serde_json::from_str(first).map_err(|e| err(1, e.to_string()))?;
        if meta.space.id != meta.space_id {
            return Err(err(
                1,
                format!(
                    "space_id `{}` does not match embedded space `{}`",
                    meta.space_id, meta.space.id
                ),
            ));
        }
        let mut trials = Vec::with_capacity(meta.t);
        for (i, line) in lines {
            let trial: TrialLine =
                serde_json::from_str(line).map_err(|e| err(i + 1, e.to_string()))?;
            if trial.t != trials.len() {
                return Err(err(
                    i + 1,
                    format!("expected t={}, found t={}", trials.len(), trial.t),
                ));
            }
            let config = meta
                .space
                .config_from_json(&trial.config)
                .map_err(|e| err(i + 1, e.to_string()))?;
            trials.push((config, trial.objective));
        }
        if trials.len() != meta.t || trials.is_empty() {
            return Err(err(
                1,
                format!(
                    "header declares T={} but {} trials follow",
                    meta.t,
                    trials.len()
                ),
            ));
        }
        Ok(Self {
            task_id: meta.task_id,
            space: meta.space,
            optimizer: meta.optimizer,
            seed: meta.seed,
            trials,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), RunError> {
        let mut f = BufWriter::new(File::create(path)?);
        f.write_all(self.to_jsonl().as_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_jsonl(&text, &path.display().to_string())
    }
}

/// Ask/tell loop for exactly `budget` evaluations.
pub fn run_trajectory(
    task: &BenchmarkTask,
    kind: OptimizerKind,
    budget: usize,
    seed: u64,
    settings: &OptimizerSettings,
) -> Result<Trajectory, RunError> {
    if budget == 0 {
        return Err(RunError::EmptyBudget);
    }
    let mut opt = OptimizerState::with_settings(kind, task.space.clone(), seed, settings);
    for trial in 0..budget {
        let config = opt.suggest();
        let y = task
            .evaluate(&config)
            .map_err(|source| RunError::Oracle { trial, source })?;
        opt.observe(config, y)
            .map_err(|source| RunError::Observe { trial, source })?;
    }
    Ok(Trajectory {
        task_id: task.id.clone(),
        space: task.space.clone(),
        optimizer: kind.to_string(),
        seed,
        trials: opt.history().to_vec(),
    })
}

/// Seed of one run, independent of every other entry of the grid.
pub fn run_seed(master_seed: u64, kind: &str, task_id: &str, seed_index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update((kind.len() as u64).to_le_bytes());
    h.update(kind.as_bytes());
    h.update((task_id.len() as u64).to_le_bytes());
    h.update(task_id.as_bytes());
    h.update(seed_index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Number of runs of a full grid.
pub fn planned_runs(n_optimizers: u64, n_tasks: u64, n_seeds: u64) -> u64 {
    n_optimizers * n_tasks * n_seeds
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub optimizer: String,
    pub task_id: String,
    pub seed_index: u64,
    pub seed: u64,
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub best: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunManifest {
    pub runs: Vec<RunRecord>,
}

impl RunManifest {
    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn n_failed(&self) -> usize {
        self.runs
            .iter()
            .filter(|r| r.status == RunStatus::Failed)
            .count()
    }

    pub fn write(&self, path: &Path) -> Result<(), RunError> {
        let mut f = BufWriter::new(File::create(path)?);
        for r in &self.runs {
            writeln!(
                f,
                "{}",
                serde_json::to_string(r).expect("record serializes")
            )?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, RunError> {
        let mut runs = Vec::new();
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            runs.push(serde_json::from_str(&line).map_err(|e| RunError::Format {
                path: path.display().to_string(),
                line: i + 1,
                reason: e.to_string(),
            })?);
        }
        Ok(Self { runs })
    }
}

#[derive(Debug, Clone)]
pub struct GridSpec {
    pub optimizers: Vec<OptimizerKind>,
    pub seeds: Vec<u64>,
    pub budget: usize,
    pub master_seed: u64,
    pub settings: OptimizerSettings,
}

/// File name of one run inside the trajectory directory.
pub fn trajectory_file_name(kind: &str, task_id: &str, seed_index: u64) -> String {
    let clean: String = task_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{clean}__{kind}__s{seed_index}.jsonl")
}

/// Execute every (optimizer, task, seed) combination. Failed runs are
/// recorded and the grid continues. Rows are ordered optimizer-major, then
/// task, then seed, whatever the scheduling.
pub fn run_grid(
    tasks: &[BenchmarkTask],
    grid: &GridSpec,
    out_dir: Option<&Path>,
    jobs: usize,
) -> Result<(RunManifest, Vec<Option<Trajectory>>), RunError> {
    if tasks.is_empty() || grid.optimizers.is_empty() || grid.seeds.is_empty() {
        return Err(RunError::EmptyGrid);
    }
    if grid.budget == 0 {
        return Err(RunError::EmptyBudget);
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let keys: Vec<(OptimizerKind, &BenchmarkTask, u64)> = grid
        .optimizers
        .iter()
        .flat_map(|&k| {
            tasks
                .iter()
                .flat_map(move |t| grid.seeds.iter().map(move |&s| (k, t, s)))
        })
        .collect();
    let one = |&(kind, task, seed_index): &(OptimizerKind, &BenchmarkTask, u64)| -> (RunRecord, Option<Trajectory>) {
        let seed = run_seed(grid.master_seed, kind.as_str(), &task.id, seed_index);
        let mut record = RunRecord {
            optimizer: kind.to_string(),
            task_id: task.id.clone(),
            seed_index,
            seed,
            status: RunStatus::Ok,
            path: None,
            best: None,
            error: None,
        };
        let result = run_trajectory(task, kind, grid.budget, seed, &grid.settings).and_then(|traj| {
            if let Some(dir) = out_dir {
                let name = trajectory_file_name(kind.as_str(), &task.id, seed_index);
                traj.write(&dir.join(&name))?;
                record.path = Some(name);
            }
            Ok(traj)
        });
        match result {
            Ok(traj) => {
                record.best = traj.objectives().into_iter().reduce(f64::min);
                (record, Some(traj))
            }
            Err(e) => {
                record.status = RunStatus::Failed;
                record.error = Some(e.to_string());
                (record, None)
            }
        }
    };
    let results: Vec<(RunRecord, Option<Trajectory>)> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        pool.install(|| keys.par_iter().map(one).collect())
    } else {
        keys.iter().map(one).collect()
    };
    let (runs, trajs) = results.into_iter().unzip();
    Ok((RunManifest { runs }, trajs))
}

/// Load every successful trajectory listed in a manifest.
pub fn load_manifest_trajectories(
    manifest: &RunManifest,
    dir: &Path,
) -> Result<Vec<Trajectory>, RunError> {
    manifest
        .runs
        .iter()
        .filter(|r| r.status == RunStatus::Ok)
        .filter_map(|r| r.path.as_ref())
        .map(|p| Trajectory::read(&dir.join(p)))
        .collect()
}

// ---------------------------------------------------------------------------
// Splits

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    /// Fraction of tasks in training spaces held out as unseen tasks.
    pub holdout_fraction: f64,
    /// Absolute count; overrides `holdout_fraction` when set.
    pub holdout_count: Option<usize>,
    /// Spaces whose tasks all go to the unseen-space validation split.
    pub heldout_spaces: Vec<String>,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            holdout_fraction: 0.1,
            holdout_count: None,
            heldout_spaces: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitName {
    Train,
    ValUnseenTask,
    ValUnseenSpace,
}

impl SplitName {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::ValUnseenTask => "val-unseen-task",
            SplitName::ValUnseenSpace => "val-unseen-space",
        }
    }
}

/// Task ids per split, each list sorted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    #[serde(rename = "val-unseen-task")]
    pub val_unseen_task: Vec<String>,
    #[serde(rename = "val-unseen-space")]
    pub val_unseen_space: Vec<String>,
}

impl Splits {
    pub fn split_of(&self, task_id: &str) -> Option<SplitName> {
        let has = |v: &Vec<String>| v.binary_search_by(|t| t.as_str().cmp(task_id)).is_ok();
        if has(&self.train) {
            Some(SplitName::Train)
        } else if has(&self.val_unseen_task) {
            Some(SplitName::ValUnseenTask)
        } else if has(&self.val_unseen_space) {
            Some(SplitName::ValUnseenSpace)
        } else {
            None
        }
    }
}

/// Assign whole tasks to splits. `tasks` maps task id to space id; the same
/// pair may repeat (one entry per trajectory) but a task may not name two
/// different spaces.
pub fn make_splits<'a, I>(tasks: I, config: &SplitConfig) -> Result<Splits, RunError>
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let mut space_of: BTreeMap<&str, &str> = BTreeMap::new();
    for (task, space) in tasks {
        if let Some(prev) = space_of.insert(task, space) {
            if prev != space {
                return Err(RunError::Split(format!(
                    "task `{task}` appears in spaces `{prev}` and `{space}`"
                )));
            }
        }
    }
    if !(0.0..1.0).contains(&config.holdout_fraction) {
        return Err(RunError::Split(format!(
            "holdout_fraction {} must be in [0, 1)",
            config.holdout_fraction
        )));
    }
    let spaces: BTreeSet<&str> = space_of.values().copied().collect();
    let held: BTreeSet<&str> = config.heldout_spaces.iter().map(String::as_str).collect();
    if let Some(unknown) = held.iter().find(|s| !spaces.contains(*s)) {
        return Err(RunError::Split(format!(
            "held-out space `{unknown}` has no tasks"
        )));
    }
    if !spaces.is_empty() && held.len() == spaces.len() {
        return Err(RunError::Split(
            "every space is held out; nothing left to train on".into(),
        ));
    }

    let mut splits = Splits::default();
    let mut candidates: Vec<&str> = Vec::new();
    for (&task, &space) in &space_of {
        if held.contains(space) {
            splits.val_unseen_space.push(task.to_string());
        } else {
            candidates.push(task);
        }
    }
    let n_hold = match config.holdout_count {
        Some(n) => n,
        None => (config.holdout_fraction * candidates.len() as f64).round() as usize,
    };
    if n_hold >= candidates.len() && !candidates.is_empty() {
        return Err(RunError::Split(format!(
            "cannot hold out {n_hold} of {} training-space tasks",
            candidates.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    candidates.shuffle(&mut rng);
    let (val, train) = candidates.split_at(n_hold);
    splits.val_unseen_task = val.iter().map(|s| s.to_string()).collect();
    splits.train = train.iter().map(|s| s.to_string()).collect();
    splits.train.sort();
    splits.val_unseen_task.sort();
    Ok(splits)
}

/// Where [`run_grid`] writes, relative to the data root.
pub fn trajectory_dir(root: &Path) -> PathBuf {
    root.join("trajectories")
}
