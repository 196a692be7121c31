//! The whole pipeline on a toy configuration, driven from Rust instead of
//! the command line: generate, augment, encode, tokenize, split, train,
//! optimize with the model, evaluate and fit scaling.

use anyhow::Result;
use bbo_forge::pipeline::{self, PipelineConfig, StageOptions, Workspace};

const CONFIG: &str = r#"
seed = 3

[generate]
tasks = ["branin", "six_hump_camel", "rosenbrock"]
optimizers = ["RS", "TPE"]
seeds = 4
budget = 20

[augment]
permutations = 1
prefixes = [2, 5]

[tokenize]
vocab_size = 300

[split]
holdout_count = 1

[model]
size = "tiny"
context_length = 128

[train]
total_tokens = 40960
batch_size = 4
eval_interval = 20

[optimize]
seeds = 2
budget = 10
"#;

fn main() -> Result<()> {
    let cfg = PipelineConfig::from_toml(CONFIG, &[])?;
    let dir = tempfile::tempdir()?;
    let ws = Workspace::new(dir.path());
    let opts = StageOptions {
        jobs: 1,
        dry_run: false,
    };
    show("generate", pipeline::generate(&cfg, &ws, opts)?);
    show("augment", pipeline::augment(&cfg, &ws, opts)?);
    show("encode", pipeline::encode(&cfg, &ws, opts, true)?);
    show("tokenize", pipeline::tokenize(&cfg, &ws, opts)?);
    show("split", pipeline::split(&cfg, &ws, opts)?);
    show("train", pipeline::train(&cfg, &ws, opts, &mut |_| {})?);
    show("optimize", pipeline::optimize(&cfg, &ws, opts)?);
    show("evaluate", pipeline::evaluate(&cfg, &ws, opts)?);
    show("scaling-fit", pipeline::scaling_fit(&cfg, &ws, opts)?);
    Ok(())
}

fn show(stage: &str, report: Vec<String>) {
    println!("== {stage}");
    for line in report {
        println!("   {line}");
    }
}
