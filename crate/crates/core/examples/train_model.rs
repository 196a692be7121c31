//! Train a small transformer on encoded trajectories and save a checkpoint.

use anyhow::Result;
use bbo_forge::bench::BenchmarkTask;
use bbo_forge::codec::{encode_trajectory, QuantizationConfig};
use bbo_forge::model::{
    flops_estimate, load_checkpoint, pack_windows, save_checkpoint, train_model, Checkpoint, Model,
    ModelConfig, TrainConfig, ARCHITECTURE_GRID,
};
use bbo_forge::optimizers::OptimizerKind;
use bbo_forge::runner::run_trajectory;
use bbo_forge::tok::train_bpe;

fn main() -> Result<()> {
    for (name, ..) in ARCHITECTURE_GRID {
        let c = ModelConfig::from_grid(name, 1024, 512).expect("grid row");
        println!(
            "{name:>4}: {:>11} non-embedding parameters",
            c.n_non_embedding_params()
        );
    }

    let task = BenchmarkTask::synthetic("branin")?;
    let docs = (0..150)
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
    let ctx = 128;
    let train = pack_windows(&ids[15..], tok.eos_id(), ctx);
    let val = pack_windows(&ids[..15], tok.eos_id(), ctx);

    let config = ModelConfig::tiny(tok.model_vocab_size(), ctx);
    let mut model = Model::<f32>::init(config, 0)?;
    let tc = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 8,
        total_tokens: 150 * 8 * ctx as u64,
        eval_interval: 25,
        ..Default::default()
    };
    let outcome = train_model(&mut model, &train, &val, &tc, |r| {
        if let Some(v) = r.val_loss {
            println!(
                "step {:>4} lr {:.2e} train {:.3} val {v:.3}",
                r.step, r.learning_rate, r.train_loss
            );
        }
    })?;
    println!(
        "{} steps, {} tokens, about {:.2e} FLOPs",
        outcome.steps,
        outcome.tokens_seen,
        flops_estimate(model.config.n_non_embedding_params(), outcome.tokens_seen)
    );

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("checkpoint.bin");
    let mut ckpt = Checkpoint::new(model);
    ckpt.step = outcome.steps;
    ckpt.tokens_seen = outcome.tokens_seen;
    ckpt.train = Some(tc);
    let id = save_checkpoint(&ckpt, &path)?;
    let (back, id2) = load_checkpoint(&path)?;
    println!(
        "checkpoint {id} reloads bit-exactly: {}",
        back == ckpt && id == id2
    );
    Ok(())
}
