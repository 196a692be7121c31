//! Acceptance suite: one test per criterion. Tests take a shared lock so
//! that wall-clock limits are measured without competing test threads.

use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use bbo_forge::bench::{task_from_spec, BenchmarkTask};
use bbo_forge::codec::{
    decode_trajectory, encode_trajectory, prefix_augment, split_encoded, QuantizationConfig,
    TrialGrammar,
};
use bbo_forge::eval::{
    best_so_far, fit_power_law, marginal_density_compare, pareto_points, ScalingPoint,
};
use bbo_forge::infer::{History, ModelOptimizer, SamplerConfig};
use bbo_forge::model::{
    evaluate_loss, load_checkpoint, pack_windows, save_checkpoint, train_model, Checkpoint, Model,
    ModelConfig, TrainConfig,
};
use bbo_forge::optimizers::OptimizerKind;
use bbo_forge::runner::{make_splits, planned_runs, run_grid, GridSpec, SplitConfig, Trajectory};
use bbo_forge::space::{Configuration, ParamValue, ParameterDomain, SearchSpace};
use bbo_forge::tok::{train_bpe, Tokenizer};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

const Q: u32 = 1000;

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

/// Writes to stderr directly so the line survives the test harness's output capture.
fn report(id: u32, name: &str, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {id:>2} {name}: {verdict} ({detail})");
}

fn quant() -> QuantizationConfig {
    QuantizationConfig::new(Q).unwrap()
}

fn random_space<R: Rng>(rng: &mut R, id: &str) -> SearchSpace {
    let d = rng.random_range(1..=6);
    let params = (0..d)
        .map(|i| {
            let name = format!("p{i}");
            match rng.random_range(0..4) {
                0 => {
                    let lo = rng.random_range(-100.0..100.0);
                    ParameterDomain::uniform(name, lo, lo + rng.random_range(0.01..500.0))
                }
                1 => {
                    let lo = 10f64.powf(rng.random_range(-6.0..1.0));
                    ParameterDomain::log_uniform(
                        name,
                        lo,
                        lo * 10f64.powf(rng.random_range(0.5..6.0)),
                    )
                }
                2 => {
                    let lo = rng.random_range(-50..50);
                    ParameterDomain::integer(name, lo, lo + rng.random_range(1..2000))
                }
                _ => ParameterDomain::categorical(name, rng.random_range(2..12)),
            }
            .unwrap()
        })
        .collect();
    SearchSpace::new(id, params).unwrap()
}

fn random_trajectory<R: Rng>(rng: &mut R, i: usize) -> Trajectory {
    let space = random_space(rng, &format!("space{i}"));
    let n = rng.random_range(1..=20);
    let ties = rng.random_bool(0.2);
    let trials = (0..n)
        .map(|_| {
            let y = if ties {
                rng.random_range(0..3) as f64
            } else {
                rng.random_range(-1e3..1e3)
            };
            (space.sample_uniform(rng), y)
        })
        .collect();
    Trajectory {
        task_id: format!("task{i}"),
        space,
        optimizer: ["RS", "TPE", "REA"][i % 3].to_string(),
        seed: i as u64,
        trials,
    }
}

#[test]
fn criterion_01_codec_round_trip() {
    let _g = serial();
    let start = Instant::now();
    let tol = 1.0 / (2.0 * (Q as f64 - 1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst, mut cat_mismatch, mut trials) = (0.0f64, 0usize, 0usize);
    for i in 0..10_000 {
        let traj = random_trajectory(&mut rng, i);
        let enc = encode_trajectory(&traj, quant()).unwrap();
        let dec = decode_trajectory(&enc.text, quant()).unwrap();
        assert_eq!(dec.trials.len(), traj.trials.len());
        // The encoding lists numerical parameters first, each group in space order.
        let params = traj.space.params();
        let (mut order, cats): (Vec<usize>, Vec<usize>) =
            (0..params.len()).partition(|&i| !params[i].is_categorical());
        order.extend(cats);
        for ((config, _), d) in traj.trials.iter().zip(&dec.trials) {
            let unit = traj.space.to_unit(config).unwrap();
            for (&i, b) in order.iter().zip(&d.unit.0) {
                let a = &unit.0[i];
                match (a, b) {
                    (ParamValue::Num(a), ParamValue::Num(b)) => worst = worst.max((a - b).abs()),
                    (ParamValue::Cat(a), ParamValue::Cat(b)) => cat_mismatch += usize::from(a != b),
                    _ => cat_mismatch += 1,
                }
            }
            trials += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = worst <= tol + 1e-12 && cat_mismatch == 0 && elapsed < Duration::from_secs(30);
    report(1, "codec round trip", pass, format!(
        "{trials} trials, worst unit error {worst:.3e} vs {tol:.3e}, categorical mismatches {cat_mismatch}, {elapsed:.1?}"
    ));
    assert!(pass);
}

fn mutate<R: Rng>(rng: &mut R, s: &str) -> String {
    const ALPHABET: &[u8] = b"0123456789,*|<>-. a";
    let mut b = s.as_bytes().to_vec();
    for _ in 0..rng.random_range(1..=3) {
        let pos = rng.random_range(0..=b.len());
        let byte = ALPHABET[rng.random_range(0..ALPHABET.len())];
        match rng.random_range(0..4) {
            0 => b.insert(pos, byte),
            1 if pos < b.len() => {
                b.remove(pos);
            }
            2 if pos < b.len() => b[pos] = byte,
            _ if pos < b.len() => {
                let end = rng.random_range(pos..=b.len());
                b.drain(pos..end);
            }
            _ => b.push(byte),
        }
    }
    String::from_utf8(b).unwrap()
}

#[test]
fn criterion_02_grammar_soundness() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut rejected_clean = 0;
    let mut docs = Vec::new();
    for i in 0..2_000 {
        let traj = random_trajectory(&mut rng, i);
        let text = encode_trajectory(&traj, quant()).unwrap().text;
        let (_, _, stream) = split_encoded(&text).unwrap();
        let grammar = TrialGrammar::new(&traj.space, quant());
        rejected_clean += usize::from(!grammar.accepts_stream(stream.as_bytes()));
        docs.push((traj.space, text.len() - stream.len(), text));
    }
    let (mut accepted, mut accept_then_fail) = (0, 0);
    for _ in 0..10_000 {
        let (space, head, text) = &docs[rng.random_range(0..docs.len())];
        let stream = mutate(&mut rng, &text[*head..]);
        if TrialGrammar::new(space, quant()).accepts_stream(stream.as_bytes()) {
            accepted += 1;
            let full = format!("{}{stream}", &text[..*head]);
            accept_then_fail += usize::from(decode_trajectory(&full, quant()).is_err());
        }
    }
    let elapsed = start.elapsed();
    let pass = rejected_clean == 0 && accept_then_fail == 0 && elapsed < Duration::from_secs(30);
    report(2, "grammar soundness", pass, format!(
        "clean rejected {rejected_clean}/2000, mutants accepted {accepted}/10000, accept-then-fail {accept_then_fail}, {elapsed:.1?}"
    ));
    assert!(pass);
}

#[test]
fn criterion_03_objective_tokens() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut checked, mut ties, mut bad) = (0, 0, 0);
    for i in 0..2_000 {
        let traj = random_trajectory(&mut rng, i);
        if traj.trials.len() < 2 {
            continue;
        }
        let pair = prefix_augment(&traj, 2).unwrap();
        let text = encode_trajectory(&pair, quant()).unwrap().text;
        let (_, _, stream) = split_encoded(&text).unwrap();
        let tokens: Vec<&str> = stream
            .split_terminator('|')
            .map(|t| t.rsplit_once('*').unwrap().1)
            .collect();
        let (y0, y1) = (pair.trials[0].1, pair.trials[1].1);
        let expected = if y0 == y1 {
            ties += 1;
            ["0", "0"]
        } else if y0 < y1 {
            ["0", "999"]
        } else {
            ["999", "0"]
        };
        bad += usize::from(tokens != expected);
        checked += 1;
    }
    let pass = bad == 0 && checked > 1000 && ties > 0;
    report(
        3,
        "objective tokens",
        pass,
        format!("{checked} pairs, {ties} ties, {bad} violations"),
    );
    assert!(pass);
}

#[test]
fn criterion_04_run_count() {
    let _g = serial();
    let names = [
        "branin",
        "six_hump_camel",
        "rosenbrock",
        "ackley",
        "hartmann3",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bad = 0;
    for _ in 0..100 {
        let mut kinds = OptimizerKind::ALL.to_vec();
        kinds.shuffle(&mut rng);
        kinds.truncate(rng.random_range(1..=kinds.len()));
        let tasks: Vec<BenchmarkTask> = names[..rng.random_range(1..=names.len())]
            .iter()
            .map(|n| BenchmarkTask::synthetic(n).unwrap())
            .collect();
        let n_seeds = rng.random_range(1..=3u64);
        let grid = GridSpec {
            optimizers: kinds.clone(),
            seeds: (0..n_seeds).collect(),
            budget: rng.random_range(1..=3),
            master_seed: rng.random(),
            settings: Default::default(),
        };
        let (manifest, _) = run_grid(&tasks, &grid, None, 1).unwrap();
        let expected = planned_runs(kinds.len() as u64, tasks.len() as u64, n_seeds);
        bad += usize::from(manifest.len() as u64 != expected);
    }
    let full = planned_runs(6, 3095, 30);
    let pass = bad == 0 && full == 557_100;
    report(
        4,
        "run count",
        pass,
        format!("100 random grids, {bad} mismatches; full scale {full}"),
    );
    assert!(pass);
}

/// Welch's one-sided test that `a` has a smaller mean than `b`.
fn welch_less(a: &[f64], b: &[f64]) -> f64 {
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        (
            n,
            m,
            x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0),
        )
    };
    let ((na, ma, va), (nb, mb, vb)) = (stats(a), stats(b));
    let se2 = va / na + vb / nb;
    let t = (ma - mb) / se2.sqrt();
    let df = se2.powi(2) / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    StudentsT::new(0.0, 1.0, df).unwrap().cdf(t)
}

#[test]
fn criterion_05_optimizer_separation() {
    let _g = serial();
    let start = Instant::now();
    let task = task_from_spec("knn:branin:10000:0").unwrap();
    let grid = GridSpec {
        optimizers: OptimizerKind::ALL.to_vec(),
        seeds: (0..30).collect(),
        budget: 100,
        master_seed: 5,
        settings: Default::default(),
    };
    let (_, trajs) = run_grid(std::slice::from_ref(&task), &grid, None, 1).unwrap();
    let finals = |kind: OptimizerKind| -> Vec<f64> {
        trajs
            .iter()
            .flatten()
            .filter(|t| t.optimizer == kind.as_str())
            .map(|t| *best_so_far(&t.objectives()).last().unwrap())
            .collect()
    };
    let rs = finals(OptimizerKind::Rs);
    let mut pass = rs.len() == 30;
    let mut detail = format!("RS mean {:.4}", rs.iter().sum::<f64>() / rs.len() as f64);
    for kind in [
        OptimizerKind::Tpe,
        OptimizerKind::Bore,
        OptimizerKind::Cqr,
        OptimizerKind::Rea,
    ] {
        let other = finals(kind);
        let p = welch_less(&other, &rs);
        pass &= other.len() == 30 && p < 0.05;
        detail += &format!(
            ", {} mean {:.4} p={p:.2e}",
            kind.as_str(),
            other.iter().sum::<f64>() / other.len() as f64
        );
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(300);
    report(
        5,
        "optimizer separation",
        pass,
        format!("{detail}, {elapsed:.1?}"),
    );
    assert!(pass);
}

#[test]
fn criterion_06_gradient_check() {
    let _g = serial();
    let start = Instant::now();
    let config = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        n_kv_groups: 1,
        model_dim: 8,
        head_dim: 4,
        ffn_dim: 12,
        vocab_size: 11,
        context_length: 16,
    };
    let mut model = Model::<f64>::init_with_std(config, 6, 0.3).unwrap();
    // Perturb the norm gains so their gradients are not at a symmetric point.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for p in model.params.iter_mut() {
        *p += rng.random_range(-0.05..0.05);
    }
    let window: Vec<u32> = (0..12).map(|_| rng.random_range(0..11)).collect();
    let mut grads = vec![0.0; model.params.len()];
    // The scale applies per predicted token; this makes it the mean loss.
    let scale = 1.0 / (window.len() - 1) as f64;
    model.loss_and_grad(&window, scale, &mut grads).unwrap();
    let h = 1e-5;
    let mut worst = (0.0f64, String::new());
    for (name, offset, shape) in model.layout.clone().tensors() {
        let len: usize = shape.iter().product();
        let (mut diff, mut norm) = (0.0, 0.0);
        for i in *offset..offset + len {
            let orig = model.params[i];
            model.params[i] = orig + h;
            let up = model.window_loss(&window).unwrap();
            model.params[i] = orig - h;
            let down = model.window_loss(&window).unwrap();
            model.params[i] = orig;
            let fd = (up - down) / (2.0 * h);
            diff += (grads[i] - fd).powi(2);
            norm += grads[i].powi(2).max(fd.powi(2));
        }
        let rel = diff.sqrt() / norm.sqrt().max(1e-12);
        if rel >= worst.0 {
            worst = (rel, name.clone());
        }
    }
    let elapsed = start.elapsed();
    let pass = worst.0 < 1e-3 && elapsed < Duration::from_secs(60);
    report(
        6,
        "gradient check",
        pass,
        format!(
            "{} tensors, worst relative error {:.2e} in {}, {elapsed:.1?}",
            model.layout.tensors().len(),
            worst.0,
            worst.1
        ),
    );
    assert!(pass);
}

/// Corpus, tokenizer and trained checkpoint shared by criteria 7 and 8.
struct ToyRun {
    tasks: Vec<BenchmarkTask>,
    tokenizer: Tokenizer,
    checkpoint: std::path::PathBuf,
    _dir: tempfile::TempDir,
    initial_val: f64,
    final_val: f64,
    blocks: Vec<f64>,
    elapsed: Duration,
}

const TOY_CTX: usize = 256;

/// Table-backed tasks on two 2-D spaces, ten tables each.
fn toy_tasks() -> Vec<BenchmarkTask> {
    (0..10)
        .flat_map(|s| {
            ["branin", "six_hump_camel"]
                .map(|f| task_from_spec(&format!("knn:{f}:1000:{s}")).unwrap())
        })
        .collect()
}

fn toy_corpus(
    tasks: &[BenchmarkTask],
    optimizers: Vec<OptimizerKind>,
    seeds: u64,
    budget: usize,
) -> Vec<String> {
    let grid = GridSpec {
        optimizers,
        seeds: (0..seeds).collect(),
        budget,
        master_seed: 7,
        settings: Default::default(),
    };
    let (_, trajs) = run_grid(tasks, &grid, None, 1).unwrap();
    trajs
        .iter()
        .map(|t| {
            encode_trajectory(t.as_ref().unwrap(), quant())
                .unwrap()
                .text
        })
        .collect()
}

/// Train the tiny model on shuffled documents; returns the initial and
/// final validation loss and the training history.
fn train_toy(
    docs: &[String],
    steps: u64,
    seed: u64,
) -> (Model<f32>, Tokenizer, f64, f64, Vec<f64>) {
    let tokenizer = train_bpe(&docs[..400], 512).unwrap();
    let mut ids: Vec<Vec<u32>> = docs.iter().map(|d| tokenizer.tokenize(d)).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ids.len() / 20;
    let (val, train) = ids.split_at(n_val);
    let train_w = pack_windows(train, tokenizer.eos_id(), TOY_CTX);
    let val_w = pack_windows(val, tokenizer.eos_id(), TOY_CTX);
    let config = ModelConfig::tiny(tokenizer.model_vocab_size(), TOY_CTX);
    let mut model = Model::<f32>::init(config, seed).unwrap();
    let initial = evaluate_loss(&model, &val_w).unwrap();
    let tc = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 8,
        total_tokens: steps * 8 * TOY_CTX as u64,
        eval_interval: 100,
        seed,
        ..Default::default()
    };
    let outcome = train_model(&mut model, &train_w, &val_w, &tc, |_| {}).unwrap();
    let final_val = outcome.history.last().and_then(|r| r.val_loss).unwrap();
    let blocks = outcome
        .history
        .chunks(50)
        .filter(|c| c.len() == 50)
        .map(|c| c.iter().map(|r| r.train_loss).sum::<f64>() / 50.0)
        .collect();
    (model, tokenizer, initial, final_val, blocks)
}

fn toy_run() -> &'static ToyRun {
    static RUN: OnceLock<ToyRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let tasks = toy_tasks();
        let docs = toy_corpus(&tasks, vec![OptimizerKind::Rs], 100, 100);
        assert!(docs.len() >= 2000);
        let (model, tokenizer, initial_val, final_val, blocks) = train_toy(&docs, 600, 7);
        let dir = tempfile::tempdir().unwrap();
        let checkpoint = dir.path().join("checkpoint.bin");
        save_checkpoint(&Checkpoint::new(model), &checkpoint).unwrap();
        ToyRun {
            tasks,
            tokenizer,
            checkpoint,
            _dir: dir,
            initial_val,
            final_val,
            blocks,
            elapsed: start.elapsed(),
        }
    })
}

#[test]
fn criterion_07_toy_training() {
    let _g = serial();
    let run = toy_run();
    let vocab = run.tokenizer.model_vocab_size();
    let (ckpt, _) = load_checkpoint(&run.checkpoint).unwrap();
    let n_params = ckpt.model.config.n_params();
    let reduction = 1.0 - run.final_val / run.initial_val;
    let monotone = run.blocks.windows(2).all(|w| w[1] <= w[0]);
    let pass = n_params <= 2_000_000
        && (run.initial_val - (vocab as f64).ln()).abs() < 0.1
        && reduction >= 0.30
        && monotone
        && run.elapsed < Duration::from_secs(600);
    report(7, "toy training", pass, format!(
        "{n_params} params, val {:.3} -> {:.3} (ln V {:.3}), reduction {:.1}%, block means {:?}, {:.1?}",
        run.initial_val,
        run.final_val,
        (vocab as f64).ln(),
        100.0 * reduction,
        run.blocks.iter().map(|b| (b * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        run.elapsed
    ));
    assert!(pass);
}

#[test]
fn criterion_08_rs_imitation() {
    let _g = serial();
    let run = toy_run();
    let start = Instant::now();
    let (ckpt, id) = load_checkpoint(&run.checkpoint).unwrap();
    let opt = ModelOptimizer::new(&ckpt.model, &run.tokenizer, id).unwrap();
    let task = &run.tasks[0];
    let mut samples = Vec::new();
    for seed in 0..30 {
        let cfg = SamplerConfig {
            seed,
            ..Default::default()
        };
        let traj = opt.optimize(task, "RS", 100, &cfg).unwrap();
        samples.extend(traj.trials.into_iter().map(|(c, _)| c));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let uniform: Vec<Configuration> = (0..samples.len())
        .map(|_| task.space.sample_uniform(&mut rng))
        .collect();
    let tv = marginal_density_compare(&uniform, &samples, &task.space).unwrap();
    let elapsed = start.elapsed();
    let pass =
        samples.len() == 3000 && tv.iter().all(|&t| t < 0.15) && elapsed < Duration::from_secs(300);
    report(
        8,
        "RS imitation",
        pass,
        format!(
            "{} samples on {}, TV {tv:.3?}, {elapsed:.1?}",
            samples.len(),
            task.id
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_policy_conditioning() {
    let _g = serial();
    let start = Instant::now();
    // Short trajectories keep most trials in the same window as their header.
    let tasks = toy_tasks();
    let docs = toy_corpus(&tasks, vec![OptimizerKind::Rs, OptimizerKind::Tpe], 50, 20);
    let (model, tokenizer, initial, final_val, _) = train_toy(&docs, 1200, 9);
    let opt = ModelOptimizer::new(&model, &tokenizer, "conditioning").unwrap();
    let task = &tasks[1];
    let base = run_one(task, OptimizerKind::Tpe);
    let draw = |algorithm: &str, seed| {
        let mut history = History::new(algorithm, task.space.clone());
        history.trials = base.trials[..8].to_vec();
        opt.sample_next_configs(
            &history,
            1000,
            &SamplerConfig {
                seed,
                ..Default::default()
            },
        )
        .unwrap()
    };
    let (rs, rs_again, tpe) = (draw("RS", 1), draw("RS", 2), draw("TPE", 3));
    let tv = marginal_density_compare(&rs, &tpe, &task.space).unwrap();
    let control = marginal_density_compare(&rs, &rs_again, &task.space).unwrap();
    let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    let pass = max(&tv) > 0.05;
    report(9, "policy conditioning", pass, format!(
        "val {initial:.3} -> {final_val:.3}, TV(RS, TPE) {tv:.3?}, same-prompt control {control:.3?}, {:.1?}",
        start.elapsed()
    ));
    assert!(pass);
}

fn run_one(task: &BenchmarkTask, kind: OptimizerKind) -> Trajectory {
    let grid = GridSpec {
        optimizers: vec![kind],
        seeds: vec![0],
        budget: 20,
        master_seed: 99,
        settings: Default::default(),
    };
    run_grid(std::slice::from_ref(task), &grid, None, 1)
        .unwrap()
        .1
        .remove(0)
        .unwrap()
}

#[test]
fn criterion_10_scaling_fit() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let grid = |rng: &mut ChaCha8Rng| -> Vec<(f64, f64)> {
        (0..24)
            .map(|_| {
                (
                    10f64.powf(rng.random_range(6.0..8.0)),
                    10f64.powf(rng.random_range(8.0..10.0)),
                )
            })
            .collect()
    };
    let (a, b) = (40.0, 0.0157);
    let exact: Vec<ScalingPoint> = grid(&mut rng)
        .into_iter()
        .map(|(n, d)| ScalingPoint {
            n_params: n,
            tokens: d,
            loss: a * (6.0 * n * d).powf(-b),
        })
        .collect();
    let exact_err = (fit_power_law(&exact).unwrap().b - b).abs();
    let noise = rand_distr::Normal::new(0.0, 0.01).unwrap();
    let mut noisy_worst: f64 = 0.0;
    for _ in 0..100 {
        let pts: Vec<ScalingPoint> = grid(&mut rng)
            .into_iter()
            .map(|(n, d)| ScalingPoint {
                n_params: n,
                tokens: d,
                loss: a * (6.0 * n * d).powf(-b) * (1.0 + rng.sample(noise)),
            })
            .collect();
        noisy_worst = noisy_worst.max((fit_power_law(&pts).unwrap().b - b).abs());
    }
    let mut pareto_bad = 0;
    for _ in 0..1000 {
        let pts: Vec<ScalingPoint> = (0..rng.random_range(1..40))
            .map(|_| ScalingPoint {
                n_params: rng.random_range(1..20) as f64,
                tokens: rng.random_range(1..20) as f64,
                loss: rng.random_range(1..30) as f64 / 10.0,
            })
            .collect();
        let mut oracle: Vec<ScalingPoint> = pts
            .iter()
            .copied()
            .filter(|p| !pts.iter().any(|o| o.dominates(p)))
            .collect();
        let mut got = pareto_points(&pts, None);
        let key = |p: &ScalingPoint| (p.compute(), p.loss, p.n_params);
        oracle.sort_by(|x, y| key(x).partial_cmp(&key(y)).unwrap());
        got.sort_by(|x, y| key(x).partial_cmp(&key(y)).unwrap());
        pareto_bad += usize::from(oracle != got);
    }
    let pass = exact_err < 1e-6 && noisy_worst < 0.005 && pareto_bad == 0;
    report(10, "scaling fit", pass, format!(
        "exact |db| {exact_err:.2e}, noisy worst |db| {noisy_worst:.2e}, pareto mismatches {pareto_bad}/1000"
    ));
    assert!(pass);
}

#[test]
fn criterion_11_split_hygiene() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut overlap, mut leaked, mut configs) = (0, 0, 0);
    while configs < 100 {
        let n_spaces = rng.random_range(2..6);
        // One entry per trajectory: several runs per task.
        let runs: Vec<(String, String)> = (0..rng.random_range(5..60))
            .map(|_| {
                let s = rng.random_range(0..n_spaces);
                (format!("s{s}-t{}", rng.random_range(0..8)), format!("s{s}"))
            })
            .collect();
        let spaces: std::collections::BTreeSet<&str> = runs.iter().map(|r| r.1.as_str()).collect();
        let held: Vec<String> = spaces
            .iter()
            .filter(|_| rng.random_bool(0.3))
            .take(spaces.len() - 1)
            .map(|s| s.to_string())
            .collect();
        let config = SplitConfig {
            holdout_fraction: rng.random_range(0.0..0.5),
            holdout_count: None,
            heldout_spaces: held.clone(),
            seed: rng.random(),
        };
        let Ok(splits) = make_splits(runs.iter().map(|(t, s)| (t.as_str(), s.as_str())), &config)
        else {
            continue;
        };
        configs += 1;
        let val: Vec<&String> = splits
            .val_unseen_task
            .iter()
            .chain(&splits.val_unseen_space)
            .collect();
        overlap += splits.train.iter().filter(|t| val.contains(t)).count();
        leaked += runs
            .iter()
            .filter(|(t, s)| held.contains(s) && splits.train.contains(t))
            .count();
    }
    let pass = overlap == 0 && leaked == 0;
    report(11, "split hygiene", pass, format!(
        "{configs} configurations, train/val overlaps {overlap}, held-out-space training trajectories {leaked}"
    ));
    assert!(pass);
}
