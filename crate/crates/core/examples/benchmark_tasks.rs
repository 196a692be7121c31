//! Analytic test functions and a kNN surrogate built from an offline table.

use std::sync::Arc;

use anyhow::Result;
use bbo_forge::bench::{task_from_spec, BenchmarkTask, OfflineTable, SurrogateBenchmark};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let branin = BenchmarkTask::synthetic("branin")?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = branin.space.sample_uniform(&mut rng);
    println!("{} at {:?} = {:.4}", branin.id, x.0, branin.evaluate(&x)?);

    // 2 000 evaluated rows, queried through 5 nearest neighbours.
    let table = OfflineTable::from_function("six_hump_camel", 2000, 3)?;
    let surrogate = Arc::new(SurrogateBenchmark::new(table, 5)?);
    let task = BenchmarkTask::surrogate("camel-table", surrogate);
    println!(
        "{} at {:?} = {:.4}",
        task.id,
        x.0,
        task.evaluate(&task.space.sample_uniform(&mut rng))?
    );

    // The spec strings the CLI accepts resolve to the same kinds of tasks.
    for spec in ["hartmann3", "knn:branin:1000:7"] {
        let t = task_from_spec(spec)?;
        println!("{spec} -> {} ({} parameters)", t.id, t.space.dim());
    }
    Ok(())
}
