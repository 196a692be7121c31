//! Ask/tell loop with every optimizer on the same task.

use anyhow::Result;
use bbo_forge::bench::BenchmarkTask;
use bbo_forge::optimizers::{OptimizerKind, OptimizerState};

fn main() -> Result<()> {
    let task = BenchmarkTask::synthetic("branin")?;
    for kind in OptimizerKind::ALL {
        let mut best = Vec::new();
        for seed in 0..5 {
            let mut opt = OptimizerState::new(kind, task.space.clone(), seed);
            for _ in 0..60 {
                let x = opt.suggest();
                let y = task.evaluate(&x)?;
                opt.observe(x, y)?;
            }
            best.push(
                opt.history()
                    .iter()
                    .map(|t| t.1)
                    .fold(f64::INFINITY, f64::min),
            );
        }
        let mean = best.iter().sum::<f64>() / best.len() as f64;
        println!("{:>4}: mean best after 60 trials {mean:.4}", kind.as_str());
    }
    Ok(())
}
