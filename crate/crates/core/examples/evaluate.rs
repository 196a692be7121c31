//! Best-so-far curves, average ranks, normalized regret and marginal
//! density comparison for a few optimizers.

use anyhow::Result;
use bbo_forge::bench::BenchmarkTask;
use bbo_forge::eval::{average_rank, marginal_density_compare, normalized_regret, CurveSet};
use bbo_forge::optimizers::OptimizerKind;
use bbo_forge::runner::{run_grid, GridSpec};

fn main() -> Result<()> {
    let tasks = ["branin", "six_hump_camel", "hartmann3"]
        .map(BenchmarkTask::synthetic)
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let grid = GridSpec {
        optimizers: vec![OptimizerKind::Rs, OptimizerKind::Tpe, OptimizerKind::Bore],
        seeds: (0..5).collect(),
        budget: 50,
        master_seed: 0,
        settings: Default::default(),
    };
    let (_, trajs) = run_grid(&tasks, &grid, None, 1)?;
    let trajs: Vec<_> = trajs.into_iter().flatten().collect();

    let mut curves = CurveSet::new();
    for t in &trajs {
        curves.add(&t.optimizer, &t.task_id, t.objectives());
    }
    for step in [9, 49] {
        println!(
            "average rank after {} trials: {:?}",
            step + 1,
            average_rank(&curves, step)?
        );
    }
    let (lo, hi) = curves.task_extrema("branin").expect("branin runs");
    for m in curves.methods() {
        let (mean, _) = curves.summary(m, "branin")?;
        println!(
            "{m:>4} final normalized regret on branin {:.4}",
            normalized_regret(&mean, lo, hi).last().unwrap()
        );
    }

    // How far from uniform are each optimizer's proposals?
    let on = |kind: &str| -> Vec<_> {
        trajs
            .iter()
            .filter(|t| t.optimizer == kind && t.task_id == "branin")
            .flat_map(|t| t.trials.iter().map(|x| x.0.clone()))
            .collect()
    };
    let space = &tasks[0].space;
    println!(
        "TV(RS, TPE) per parameter {:?}",
        marginal_density_compare(&on("RS"), &on("TPE"), space)?
    );
    println!(
        "\n{}",
        curves
            .to_csv()?
            .lines()
            .take(3)
            .collect::<Vec<_>>()
            .join("\n")
    );
    Ok(())
}
