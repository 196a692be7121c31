//! Train a byte-pair tokenizer on encoded trajectories.

use anyhow::Result;
use bbo_forge::bench::BenchmarkTask;
use bbo_forge::codec::{encode_trajectory, QuantizationConfig};
use bbo_forge::optimizers::OptimizerKind;
use bbo_forge::runner::run_trajectory;
use bbo_forge::tok::{train_bpe, Tokenizer};

fn main() -> Result<()> {
    let task = BenchmarkTask::synthetic("branin")?;
    let docs = (0..60)
        .map(|seed| {
            let t = run_trajectory(&task, OptimizerKind::Rs, 40, seed, &Default::default())?;
            Ok(encode_trajectory(&t, QuantizationConfig::default())?.text)
        })
        .collect::<Result<Vec<_>>>()?;
    let tok = train_bpe(&docs, 400)?;
    let ids = tok.tokenize(&docs[0]);
    println!(
        "vocab {} (+EOS = {}), first doc {} bytes -> {} tokens",
        tok.vocab_size(),
        tok.model_vocab_size(),
        docs[0].len(),
        ids.len()
    );
    let pieces: Vec<String> = ids[..16]
        .iter()
        .map(|&i| String::from_utf8_lossy(tok.expansion(i).unwrap_or_default()).into_owned())
        .collect();
    println!("first tokens: {pieces:?}");
    assert_eq!(tok.detokenize(&ids)?, docs[0]);

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("tokenizer.json");
    tok.save(&path)?;
    println!(
        "reloaded tokenizer identical: {}",
        Tokenizer::load(&path)?.tokenize(&docs[1]) == tok.tokenize(&docs[1])
    );
    Ok(())
}
