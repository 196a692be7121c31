//! Use a trained model as a grammar-constrained optimizer.
//!
//! Trains a tiny model on random-search trajectories first (about a minute
//! in release mode), then runs it in a closed loop and draws extra
//! proposals for a fixed history.

use anyhow::Result;
use bbo_forge::bench::BenchmarkTask;
use bbo_forge::codec::{encode_trajectory, QuantizationConfig};
use bbo_forge::infer::{History, ModelOptimizer, SamplerConfig};
use bbo_forge::model::{pack_windows, train_model, Model, ModelConfig, TrainConfig};
use bbo_forge::optimizers::OptimizerKind;
use bbo_forge::runner::run_trajectory;
use bbo_forge::tok::train_bpe;

fn main() -> Result<()> {
    let task = BenchmarkTask::synthetic("branin")?;
    let docs = (0..400)
        .map(|seed| {
            Ok(encode_trajectory(
                &run_trajectory(&task, OptimizerKind::Rs, 30, seed, &Default::default())?,
                QuantizationConfig::default(),
            )?
            .text)
        })
        .collect::<Result<Vec<_>>>()?;
    let tok = train_bpe(&docs, 300)?;
    let ids: Vec<Vec<u32>> = docs.iter().map(|d| tok.tokenize(d)).collect();
    let ctx = 256;
    let mut model = Model::<f32>::init(ModelConfig::tiny(tok.model_vocab_size(), ctx), 1)?;
    let tc = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 8,
        total_tokens: 300 * 8 * ctx as u64,
        eval_interval: 100,
        ..Default::default()
    };
    train_model(
        &mut model,
        &pack_windows(&ids, tok.eos_id(), ctx),
        &[],
        &tc,
        |r| {
            if r.step % 100 == 0 {
                println!("step {} train loss {:.3}", r.step, r.train_loss);
            }
        },
    )?;

    let opt = ModelOptimizer::new(&model, &tok, "example")?;
    let cfg = SamplerConfig {
        temperature: 1.0,
        seed: 3,
        ..Default::default()
    };
    let traj = opt.optimize(&task, "RS", 20, &cfg)?;
    println!(
        "{} produced {} trials, best {:.4}",
        traj.optimizer,
        traj.len(),
        traj.objectives()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    );

    let mut history = History::new("RS", task.space.clone());
    history.trials = traj.trials[..5].to_vec();
    for c in opt.sample_next_configs(&history, 3, &cfg)? {
        println!("proposal {:?}", c.0);
    }
    Ok(())
}
