//! Mixed search space: sampling, unit-cube mapping and the text header.

use anyhow::Result;
use bbo_forge::space::{ParameterDomain, SearchSpace};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let space = SearchSpace::new(
        "mlp",
        vec![
            ParameterDomain::log_uniform("learning_rate", 1e-5, 1e-1)?,
            ParameterDomain::integer("layers", 1, 8)?,
            ParameterDomain::uniform("dropout", 0.0, 0.5)?,
            ParameterDomain::categorical("activation", 3)?,
        ],
    )?;
    println!("header:\n{}", space.encode_header());

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..3 {
        let config = space.sample_uniform(&mut rng);
        let unit = space.to_unit(&config)?;
        let back = space.from_unit(&unit)?;
        println!(
            "{:?}\n  unit {:?}\n  json {}",
            config.0,
            unit.0,
            serde_json::Value::Object(space.config_to_json(&back))
        );
    }
    Ok(())
}
