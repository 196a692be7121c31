//! Encode a trajectory as text, check it with the trial grammar, decode it
//! back and apply the two augmentations.

use anyhow::Result;
use bbo_forge::bench::BenchmarkTask;
use bbo_forge::codec::{
    decode_trajectory, encode_trajectory, permute_augment, prefix_augment, split_encoded,
    QuantizationConfig, TrialGrammar,
};
use bbo_forge::optimizers::OptimizerKind;
use bbo_forge::runner::run_trajectory;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let quant = QuantizationConfig::default();
    let task = BenchmarkTask::synthetic("hartmann3")?;
    let traj = run_trajectory(&task, OptimizerKind::Tpe, 6, 11, &Default::default())?;

    let text = encode_trajectory(&traj, quant)?.text;
    println!("{text}\n");
    let (_, _, stream) = split_encoded(&text)?;
    let grammar = TrialGrammar::new(&traj.space, quant);
    println!(
        "grammar accepts stream: {}",
        grammar.accepts_stream(stream.as_bytes())
    );
    println!(
        "grammar accepts a broken trial: {}",
        grammar.accepts_trial(b"12,0500*3|")
    );

    let decoded = decode_trajectory(&text, quant)?;
    println!(
        "decoded {} trials, first unit point {:?}",
        decoded.trials.len(),
        decoded.trials[0].unit.0
    );

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let permuted = permute_augment(&traj, &mut rng);
    println!("\npermuted:\n{}", encode_trajectory(&permuted, quant)?.text);
    // With two trials the better one is always token 0 and the other 999.
    println!(
        "\nprefix of 2:\n{}",
        encode_trajectory(&prefix_augment(&traj, 2)?, quant)?.text
    );
    Ok(())
}
