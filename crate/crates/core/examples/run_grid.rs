//! Run an (optimizer x task x seed) grid, write trajectories and a manifest.

use anyhow::Result;
use bbo_forge::bench::BenchmarkTask;
use bbo_forge::optimizers::OptimizerKind;
use bbo_forge::runner::{run_grid, GridSpec, RunManifest};

fn main() -> Result<()> {
    let tasks = ["branin", "rosenbrock"]
        .map(BenchmarkTask::synthetic)
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let grid = GridSpec {
        optimizers: vec![OptimizerKind::Rs, OptimizerKind::Tpe, OptimizerKind::Rea],
        seeds: (0..4).collect(),
        budget: 25,
        master_seed: 2024,
        settings: Default::default(),
    };
    let dir = tempfile::tempdir()?;
    let (manifest, _) = run_grid(&tasks, &grid, Some(dir.path()), 1)?;
    let path = dir.path().join("manifest.jsonl");
    manifest.write(&path)?;
    let again = RunManifest::read(&path)?;
    println!("{} runs, {} failed", again.len(), again.n_failed());
    for r in again.runs.iter().take(4) {
        println!(
            "{} {} seed#{} best {:?} -> {}",
            r.optimizer,
            r.task_id,
            r.seed_index,
            r.best,
            r.path.as_deref().unwrap_or("-")
        );
    }
    Ok(())
}
