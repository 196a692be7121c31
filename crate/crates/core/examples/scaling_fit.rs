//! Pareto front of (compute, loss) measurements and a power-law fit.

use anyhow::Result;
use bbo_forge::eval::{fit_power_law, pareto_points, ScalingPoint};

fn main() -> Result<()> {
    // Three model sizes, each measured at several token counts.
    let mut points = Vec::new();
    for (n, floor) in [(2.4e6, 2.1), (4.8e6, 1.95), (1.3e7, 1.85)] {
        for d in [1e7, 3e7, 1e8, 3e8, 1e9] {
            let loss = floor + 40.0 * f64::powf(n * d, -0.2);
            points.push(ScalingPoint {
                n_params: n,
                tokens: d,
                loss,
            });
        }
    }
    let front = pareto_points(&points, Some(1e14));
    for p in &front {
        println!(
            "C = {:.2e}  N = {:.1e}  loss {:.4}",
            p.compute(),
            p.n_params,
            p.loss
        );
    }
    let law = fit_power_law(&front)?;
    println!("L(C) = {:.3} * C^(-{:.4})", law.a, law.b);
    println!("prediction at 1e18 FLOPs: {:.4}", law.predict(1e18));
    Ok(())
}
