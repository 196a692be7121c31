//! A small decoder-only transformer with a hand-written backward pass.
//!
//! Each block is pre-norm: RMSNorm, grouped-query attention (per-head RMSNorm
//! on queries and keys, then rotary embeddings), residual add, RMSNorm, gated
//! SiLU feed-forward, residual add. Input embeddings and the output head are
//! separate matrices. All parameters live in one flat vector; see
//! [`Layout::tensors`] for names, shapes and order.

mod checkpoint;
mod real;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{checkpoint_id, load_checkpoint, save_checkpoint, Checkpoint};
pub use real::{gemm, Mat, Real};
pub use train::{
    evaluate_loss, flops_estimate, learning_rate_at, pack_windows, train_model, LossRecord,
    TrainConfig, TrainOutcome,
};

pub const RMS_EPS: f64 = 1e-6;
pub const ROPE_BASE: f64 = 10_000.0;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds the context length {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {token} outside the vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("need at least 2 tokens, got {0}")]
    TooShort(usize),
    #[error("corpus has {tokens} tokens; one step needs {needed}")]
    CorpusTooSmall { tokens: usize, needed: usize },
    #[error("invalid training configuration: {0}")]
    InvalidTrainConfig(String),
    #[error("checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    /// Number of key/value heads; each serves `n_heads / n_kv_groups` query heads.
    pub n_kv_groups: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub context_length: usize,
}

/// Rows of the architecture grid: (name, layers, heads, groups, dim, head dim, FFN).
pub const ARCHITECTURE_GRID: [(&str, usize, usize, usize, usize, usize, usize); 5] = [
    ("2M", 7, 8, 4, 128, 64, 384),
    ("5M", 14, 8, 4, 128, 64, 384),
    ("13M", 14, 16, 8, 128, 128, 384),
    ("30M", 14, 16, 8, 256, 128, 768),
    ("80M", 14, 16, 8, 512, 128, 1536),
];

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        let dims = [
            self.n_layers,
            self.n_heads,
            self.n_kv_groups,
            self.model_dim,
            self.head_dim,
            self.ffn_dim,
            self.vocab_size,
            self.context_length,
        ];
        if dims.contains(&0) {
            return bad("all dimensions must be positive");
        }
        if !self.n_heads.is_multiple_of(self.n_kv_groups) {
            return bad("n_heads must be divisible by n_kv_groups");
        }
        if !self.head_dim.is_multiple_of(2) {
            return bad("head_dim must be even for rotary embeddings");
        }
        Ok(())
    }

    /// A named row of [`ARCHITECTURE_GRID`].
    pub fn from_grid(name: &str, vocab_size: usize, context_length: usize) -> Option<Self> {
        ARCHITECTURE_GRID.iter().find(|r| r.0 == name).map(
            |&(_, n_layers, n_heads, n_kv_groups, model_dim, head_dim, ffn_dim)| Self {
                n_layers,
                n_heads,
                n_kv_groups,
                model_dim,
                head_dim,
                ffn_dim,
                vocab_size,
                context_length,
            },
        )
    }

    /// Desk-scale model with the grid's proportions (FFN = 3 × dim, 2 query
    /// heads per key/value head).
    pub fn tiny(vocab_size: usize, context_length: usize) -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            n_kv_groups: 2,
            model_dim: 64,
            head_dim: 32,
            ffn_dim: 192,
            vocab_size,
            context_length,
        }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }

    pub fn n_params(&self) -> usize {
        self.layout().total
    }

    /// Parameters excluding the input embedding and the output head.
    pub fn n_non_embedding_params(&self) -> usize {
        self.n_params() - 2 * self.vocab_size * self.model_dim
    }

    fn q_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    fn kv_dim(&self) -> usize {
        self.n_kv_groups * self.head_dim
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerOffsets {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub q_norm: usize,
    pub k_norm: usize,
    pub wo: usize,
    pub ffn_norm: usize,
    pub w_gate: usize,
    pub w_up: usize,
    pub w_down: usize,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub embed: usize,
    pub layers: Vec<LayerOffsets>,
    pub final_norm: usize,
    pub lm_head: usize,
    pub total: usize,
    tensors: Vec<(String, usize, Vec<usize>)>,
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let mut tensors = Vec::new();
        let mut off = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let at = off;
            off += shape.iter().product::<usize>();
            tensors.push((name, at, shape));
            at
        };
        let (d, q, kv, f, hd) = (c.model_dim, c.q_dim(), c.kv_dim(), c.ffn_dim, c.head_dim);
        let embed = add("embed".into(), vec![c.vocab_size, d]);
        let layers = (0..c.n_layers)
            .map(|l| {
                let p = |s: &str| format!("layers.{l}.{s}");
                LayerOffsets {
                    attn_norm: add(p("attn_norm"), vec![d]),
                    wq: add(p("wq"), vec![d, q]),
                    wk: add(p("wk"), vec![d, kv]),
                    wv: add(p("wv"), vec![d, kv]),
                    q_norm: add(p("q_norm"), vec![hd]),
                    k_norm: add(p("k_norm"), vec![hd]),
                    wo: add(p("wo"), vec![q, d]),
                    ffn_norm: add(p("ffn_norm"), vec![d]),
                    w_gate: add(p("w_gate"), vec![d, f]),
                    w_up: add(p("w_up"), vec![d, f]),
                    w_down: add(p("w_down"), vec![f, d]),
                }
            })
            .collect();
        let final_norm = add("final_norm".into(), vec![d]);
        let lm_head = add("lm_head".into(), vec![d, c.vocab_size]);
        Self {
            embed,
            layers,
            final_norm,
            lm_head,
            total: off,
            tensors,
        }
    }

    /// `(name, offset, shape)` in storage order.
    pub fn tensors(&self) -> &[(String, usize, Vec<usize>)] {
        &self.tensors
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: Vec<T>,
}

/// Keys (normalized, rotated) and values of the positions seen so far.
#[derive(Debug, Clone, Default)]
struct LayerKv<T> {
    k: Vec<T>,
    v: Vec<T>,
}

/// Activations kept by the training forward pass.
#[derive(Debug, Default)]
struct LayerCache<T> {
    x_in: Vec<T>,
    r1: Vec<T>,
    h1: Vec<T>,
    q_raw: Vec<T>,
    k_raw: Vec<T>,
    q_r: Vec<T>,
    k_r: Vec<T>,
    q: Vec<T>,
    probs: Vec<T>,
    att: Vec<T>,
    x_mid: Vec<T>,
    r2: Vec<T>,
    h2: Vec<T>,
    a: Vec<T>,
    b: Vec<T>,
    m: Vec<T>,
}

pub(crate) struct Activations<T> {
    layers: Vec<LayerCache<T>>,
    kv: Vec<LayerKv<T>>,
    x_final: Vec<T>,
    r_final: Vec<T>,
    h_final: Vec<T>,
}

fn rmsnorm_fwd<T: Real>(x: &[T], g: &[T], y: &mut [T], rinv: &mut [T]) {
    let dim = g.len();
    let eps = T::from_f64(RMS_EPS);
    let inv_dim = T::from_f64(1.0 / dim as f64);
    for ((xr, yr), ri) in x
        .chunks_exact(dim)
        .zip(y.chunks_exact_mut(dim))
        .zip(rinv.iter_mut())
    {
        let ms: T = xr.iter().map(|&v| v * v).sum::<T>() * inv_dim;
        let r = T::ONE / (ms + eps).sqrt();
        *ri = r;
        for ((yv, &xv), &gv) in yr.iter_mut().zip(xr).zip(g) {
            *yv = xv * r * gv;
        }
    }
}

/// Accumulates into `dx` and `dg`.
fn rmsnorm_bwd<T: Real>(x: &[T], g: &[T], rinv: &[T], dy: &[T], dx: &mut [T], dg: &mut [T]) {
    let dim = g.len();
    let inv_dim = T::from_f64(1.0 / dim as f64);
    for (((xr, dyr), dxr), &r) in x
        .chunks_exact(dim)
        .zip(dy.chunks_exact(dim))
        .zip(dx.chunks_exact_mut(dim))
        .zip(rinv)
    {
        let mut dot = T::ZERO;
        for i in 0..dim {
            let xhat = xr[i] * r;
            dg[i] += dyr[i] * xhat;
            dot += dyr[i] * g[i] * xhat;
        }
        let c = dot * inv_dim;
        for i in 0..dim {
            let xhat = xr[i] * r;
            dxr[i] += (dyr[i] * g[i] - xhat * c) * r;
        }
    }
}

/// Cos/sin tables for positions `p0..p0 + n`, `half` frequencies each.
fn rope_tables<T: Real>(p0: usize, n: usize, head_dim: usize) -> (Vec<T>, Vec<T>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(n * half);
    let mut sin = Vec::with_capacity(n * half);
    for p in p0..p0 + n {
        for i in 0..half {
            let theta = p as f64 * ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64);
            cos.push(T::from_f64(theta.cos()));
            sin.push(T::from_f64(theta.sin()));
        }
    }
    (cos, sin)
}

/// Rotate `x` laid out as `n × heads × head_dim`. With `inverse`, applies the
/// transpose (used by the backward pass).
fn rope_apply<T: Real>(
    x: &mut [T],
    heads: usize,
    head_dim: usize,
    cos: &[T],
    sin: &[T],
    inverse: bool,
) {
    let half = head_dim / 2;
    for (row, chunk) in x.chunks_exact_mut(head_dim).enumerate() {
        let pos = row / heads;
        let (c, s) = (
            &cos[pos * half..(pos + 1) * half],
            &sin[pos * half..(pos + 1) * half],
        );
        for i in 0..half {
            let (a, b) = (chunk[i], chunk[i + half]);
            let si = if inverse { -s[i] } else { s[i] };
            chunk[i] = a * c[i] - b * si;
            chunk[i + half] = a * si + b * c[i];
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

/// Row-wise log-sum-exp.
fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let mut max = row[0];
    for &v in row {
        if v > max {
            max = v;
        }
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

/// Mean negative log-likelihood of `tokens[1..]` given `logits` rows
/// `0..n-1` (`logits` holds one row of `vocab` values per token).
pub fn lm_loss<T: Real>(logits: &[T], tokens: &[u32], vocab: usize) -> Result<f64, ModelError> {
    if tokens.len() < 2 {
        return Err(ModelError::TooShort(tokens.len()));
    }
    let n = tokens.len() - 1;
    let mut total = 0.0;
    for (i, &t) in tokens[1..].iter().enumerate() {
        let row = &logits[i * vocab..(i + 1) * vocab];
        total += (log_sum_exp(row) - row[t as usize]).to_f64();
    }
    Ok(total / n as f64)
}

impl<T: Real> Model<T> {
    /// Truncated-normal initialization (cut at two standard deviations);
    /// norm gains start at one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        Self::init_with_std(config, seed, INIT_STD)
    }

    pub fn init_with_std(config: ModelConfig, seed: u64, std: f64) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = config.layout();
        let mut params = vec![T::ZERO; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("positive std");
        for (_, off, shape) in layout.tensors() {
            let n: usize = shape.iter().product();
            let slot = &mut params[*off..off + n];
            if shape.len() == 1 {
                slot.fill(T::ONE);
            } else {
                for v in slot {
                    let mut x = normal.sample(&mut rng);
                    while x.abs() > 2.0 * std {
                        x = normal.sample(&mut rng);
                    }
                    *v = T::from_f64(x);
                }
            }
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<T>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = config.layout();
        if params.len() != layout.total {
            return Err(ModelError::Format(format!(
                "expected {} parameters, found {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    fn p(&self, off: usize, len: usize) -> &[T] {
        &self.params[off..off + len]
    }

    fn check_tokens(&self, tokens: &[u32], p0: usize) -> Result<(), ModelError> {
        let len = p0 + tokens.len();
        if len > self.config.context_length {
            return Err(ModelError::SequenceTooLong {
                len,
                max: self.config.context_length,
            });
        }
        if let Some(&t) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(ModelError::TokenOutOfRange {
                token: t,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn embed(&self, tokens: &[u32]) -> Vec<T> {
        let d = self.config.model_dim;
        let mut x = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            x.extend_from_slice(self.p(self.layout.embed + t as usize * d, d));
        }
        x
    }

    /// One block over `n` new positions starting at `p0`. `x` is updated in
    /// place; keys and values of the new positions are appended to `kv`.
    fn layer_forward(
        &self,
        l: usize,
        x: &mut [T],
        n: usize,
        p0: usize,
        kv: &mut LayerKv<T>,
        keep: bool,
    ) -> Option<LayerCache<T>> {
        let c = &self.config;
        let o = &self.layout.layers[l];
        let (d, qd, kvd, f, hd) = (c.model_dim, c.q_dim(), c.kv_dim(), c.ffn_dim, c.head_dim);
        let (h, g) = (c.n_heads, c.n_kv_groups);
        let per_group = h / g;
        let total = p0 + n;

        let mut r1 = vec![T::ZERO; n];
        let mut h1 = vec![T::ZERO; n * d];
        rmsnorm_fwd(x, self.p(o.attn_norm, d), &mut h1, &mut r1);

        let mut q_raw = vec![T::ZERO; n * qd];
        let mut k_raw = vec![T::ZERO; n * kvd];
        let mut v_new = vec![T::ZERO; n * kvd];
        gemm(
            Mat::new(&h1, n, d),
            Mat::new(self.p(o.wq, d * qd), d, qd),
            T::ZERO,
            &mut q_raw,
            qd,
        );
        gemm(
            Mat::new(&h1, n, d),
            Mat::new(self.p(o.wk, d * kvd), d, kvd),
            T::ZERO,
            &mut k_raw,
            kvd,
        );
        gemm(
            Mat::new(&h1, n, d),
            Mat::new(self.p(o.wv, d * kvd), d, kvd),
            T::ZERO,
            &mut v_new,
            kvd,
        );

        let mut q = vec![T::ZERO; n * qd];
        let mut k_new = vec![T::ZERO; n * kvd];
        let mut q_r = vec![T::ZERO; n * h];
        let mut k_r = vec![T::ZERO; n * g];
        rmsnorm_fwd(&q_raw, self.p(o.q_norm, hd), &mut q, &mut q_r);
        rmsnorm_fwd(&k_raw, self.p(o.k_norm, hd), &mut k_new, &mut k_r);
        let (cos, sin) = rope_tables::<T>(p0, n, hd);
        rope_apply(&mut q, h, hd, &cos, &sin, false);
        rope_apply(&mut k_new, g, hd, &cos, &sin, false);
        kv.k.extend_from_slice(&k_new);
        kv.v.extend_from_slice(&v_new);

        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let mut att = vec![T::ZERO; n * qd];
        let mut probs = if keep {
            vec![T::ZERO; h * n * total]
        } else {
            Vec::new()
        };
        let mut scores = vec![T::ZERO; n * total];
        for head in 0..h {
            let grp = head / per_group;
            gemm(
                Mat::strided(&q[head * hd..], n, hd, qd),
                Mat::strided(&kv.k[grp * hd..], total, hd, kvd).t(),
                T::ZERO,
                &mut scores,
                total,
            );
            for i in 0..n {
                let row = &mut scores[i * total..(i + 1) * total];
                let visible = p0 + i + 1;
                let mut max = row[0] * scale;
                for v in &mut row[..visible] {
                    *v *= scale;
                    if *v > max {
                        max = *v;
                    }
                }
                let mut sum = T::ZERO;
                for v in &mut row[..visible] {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in &mut row[..visible] {
                    *v /= sum;
                }
                row[visible..].fill(T::ZERO);
            }
            gemm(
                Mat::new(&scores, n, total),
                Mat::strided(&kv.v[grp * hd..], total, hd, kvd),
                T::ZERO,
                &mut att[head * hd..],
                qd,
            );
            if keep {
                probs[head * n * total..(head + 1) * n * total].copy_from_slice(&scores);
            }
        }

        let x_in = if keep { x.to_vec() } else { Vec::new() };
        gemm(
            Mat::new(&att, n, qd),
            Mat::new(self.p(o.wo, qd * d), qd, d),
            T::ONE,
            x,
            d,
        );
        let x_mid = if keep { x.to_vec() } else { Vec::new() };

        let mut r2 = vec![T::ZERO; n];
        let mut h2 = vec![T::ZERO; n * d];
        rmsnorm_fwd(x, self.p(o.ffn_norm, d), &mut h2, &mut r2);
        let mut a = vec![T::ZERO; n * f];
        let mut b = vec![T::ZERO; n * f];
        gemm(
            Mat::new(&h2, n, d),
            Mat::new(self.p(o.w_gate, d * f), d, f),
            T::ZERO,
            &mut a,
            f,
        );
        gemm(
            Mat::new(&h2, n, d),
            Mat::new(self.p(o.w_up, d * f), d, f),
            T::ZERO,
            &mut b,
            f,
        );
        let m: Vec<T> = a
            .iter()
            .zip(&b)
            .map(|(&av, &bv)| av * sigmoid(av) * bv)
            .collect();
        gemm(
            Mat::new(&m, n, f),
            Mat::new(self.p(o.w_down, f * d), f, d),
            T::ONE,
            x,
            d,
        );

        keep.then_some(LayerCache {
            x_in,
            r1,
            h1,
            q_raw,
            k_raw,
            q_r,
            k_r,
            q,
            probs,
            att,
            x_mid,
            r2,
            h2,
            a,
            b,
            m,
        })
    }

    fn head(&self, x: &[T], rows: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (d, v) = (self.config.model_dim, self.config.vocab_size);
        let mut r = vec![T::ZERO; rows];
        let mut h = vec![T::ZERO; rows * d];
        rmsnorm_fwd(x, self.p(self.layout.final_norm, d), &mut h, &mut r);
        let mut logits = vec![T::ZERO; rows * v];
        gemm(
            Mat::new(&h, rows, d),
            Mat::new(self.p(self.layout.lm_head, d * v), d, v),
            T::ZERO,
            &mut logits,
            v,
        );
        (logits, r, h)
    }

    /// Logits for every position, `tokens.len() × vocab_size`.
    pub fn forward(&self, tokens: &[u32]) -> Result<Vec<T>, ModelError> {
        Ok(self.forward_train(tokens)?.0)
    }

    pub(crate) fn forward_train(
        &self,
        tokens: &[u32],
    ) -> Result<(Vec<T>, Activations<T>), ModelError> {
        self.check_tokens(tokens, 0)?;
        let n = tokens.len();
        let mut x = self.embed(tokens);
        let mut layers = Vec::with_capacity(self.config.n_layers);
        let mut kvs = Vec::with_capacity(self.config.n_layers);
        for l in 0..self.config.n_layers {
            let mut kv = LayerKv::default();
            layers.push(
                self.layer_forward(l, &mut x, n, 0, &mut kv, true)
                    .expect("cache requested"),
            );
            kvs.push(kv);
        }
        let (logits, r_final, h_final) = self.head(&x, n);
        Ok((
            logits,
            Activations {
                layers,
                kv: kvs,
                x_final: x,
                r_final,
                h_final,
            },
        ))
    }

    /// Accumulate parameter gradients into `grads` given `dlogits`.
    pub(crate) fn backward(
        &self,
        tokens: &[u32],
        acts: &Activations<T>,
        dlogits: &[T],
        grads: &mut [T],
    ) {
        let c = &self.config;
        let (d, qd, kvd, f, hd, vocab) = (
            c.model_dim,
            c.q_dim(),
            c.kv_dim(),
            c.ffn_dim,
            c.head_dim,
            c.vocab_size,
        );
        let (h, g) = (c.n_heads, c.n_kv_groups);
        let per_group = h / g;
        let n = tokens.len();
        let lay = &self.layout;

        // Output head and final norm.
        gemm(
            Mat::new(&acts.h_final, n, d).t(),
            Mat::new(dlogits, n, vocab),
            T::ONE,
            &mut grads[lay.lm_head..lay.lm_head + d * vocab],
            vocab,
        );
        let mut dh = vec![T::ZERO; n * d];
        gemm(
            Mat::new(dlogits, n, vocab),
            Mat::new(self.p(lay.lm_head, d * vocab), d, vocab).t(),
            T::ZERO,
            &mut dh,
            d,
        );
        let mut dx = vec![T::ZERO; n * d];
        rmsnorm_bwd(
            &acts.x_final,
            self.p(lay.final_norm, d),
            &acts.r_final,
            &dh,
            &mut dx,
            &mut grads[lay.final_norm..lay.final_norm + d],
        );

        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        for l in (0..c.n_layers).rev() {
            let o = &lay.layers[l];
            let cache = &acts.layers[l];
            let kv = &acts.kv[l];

            // Feed-forward.
            let mut dm = vec![T::ZERO; n * f];
            gemm(
                Mat::new(&dx, n, d),
                Mat::new(self.p(o.w_down, f * d), f, d).t(),
                T::ZERO,
                &mut dm,
                f,
            );
            gemm(
                Mat::new(&cache.m, n, f).t(),
                Mat::new(&dx, n, d),
                T::ONE,
                &mut grads[o.w_down..o.w_down + f * d],
                d,
            );
            let mut da = vec![T::ZERO; n * f];
            let mut db = vec![T::ZERO; n * f];
            for i in 0..n * f {
                let (av, bv) = (cache.a[i], cache.b[i]);
                let s = sigmoid(av);
                db[i] = dm[i] * av * s;
                da[i] = dm[i] * bv * s * (T::ONE + av * (T::ONE - s));
            }
            let mut dh2 = vec![T::ZERO; n * d];
            gemm(
                Mat::new(&da, n, f),
                Mat::new(self.p(o.w_gate, d * f), d, f).t(),
                T::ZERO,
                &mut dh2,
                d,
            );
            gemm(
                Mat::new(&db, n, f),
                Mat::new(self.p(o.w_up, d * f), d, f).t(),
                T::ONE,
                &mut dh2,
                d,
            );
            gemm(
                Mat::new(&cache.h2, n, d).t(),
                Mat::new(&da, n, f),
                T::ONE,
                &mut grads[o.w_gate..o.w_gate + d * f],
                f,
            );
            gemm(
                Mat::new(&cache.h2, n, d).t(),
                Mat::new(&db, n, f),
                T::ONE,
                &mut grads[o.w_up..o.w_up + d * f],
                f,
            );
            rmsnorm_bwd(
                &cache.x_mid,
                self.p(o.ffn_norm, d),
                &cache.r2,
                &dh2,
                &mut dx,
                &mut grads[o.ffn_norm..o.ffn_norm + d],
            );

            // Attention output projection.
            let mut datt = vec![T::ZERO; n * qd];
            gemm(
                Mat::new(&dx, n, d),
                Mat::new(self.p(o.wo, qd * d), qd, d).t(),
                T::ZERO,
                &mut datt,
                qd,
            );
            gemm(
                Mat::new(&cache.att, n, qd).t(),
                Mat::new(&dx, n, d),
                T::ONE,
                &mut grads[o.wo..o.wo + qd * d],
                d,
            );

            let mut dq = vec![T::ZERO; n * qd];
            let mut dk = vec![T::ZERO; n * kvd];
            let mut dv = vec![T::ZERO; n * kvd];
            let mut dp = vec![T::ZERO; n * n];
            for head in 0..h {
                let grp = head / per_group;
                let p = &cache.probs[head * n * n..(head + 1) * n * n];
                gemm(
                    Mat::strided(&datt[head * hd..], n, hd, qd),
                    Mat::strided(&kv.v[grp * hd..], n, hd, kvd).t(),
                    T::ZERO,
                    &mut dp,
                    n,
                );
                gemm(
                    Mat::new(p, n, n).t(),
                    Mat::strided(&datt[head * hd..], n, hd, qd),
                    T::ONE,
                    &mut dv[grp * hd..],
                    kvd,
                );
                for i in 0..n {
                    let pr = &p[i * n..(i + 1) * n];
                    let dr = &mut dp[i * n..(i + 1) * n];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for (dv_, &pv) in dr.iter_mut().zip(pr) {
                        *dv_ = pv * (*dv_ - dot) * scale;
                    }
                }
                gemm(
                    Mat::new(&dp, n, n),
                    Mat::strided(&kv.k[grp * hd..], n, hd, kvd),
                    T::ZERO,
                    &mut dq[head * hd..],
                    qd,
                );
                gemm(
                    Mat::new(&dp, n, n).t(),
                    Mat::strided(&cache.q[head * hd..], n, hd, qd),
                    T::ONE,
                    &mut dk[grp * hd..],
                    kvd,
                );
            }
            let (cos, sin) = rope_tables::<T>(0, n, hd);
            rope_apply(&mut dq, h, hd, &cos, &sin, true);
            rope_apply(&mut dk, g, hd, &cos, &sin, true);
            let mut dq_raw = vec![T::ZERO; n * qd];
            let mut dk_raw = vec![T::ZERO; n * kvd];
            rmsnorm_bwd(
                &cache.q_raw,
                self.p(o.q_norm, hd),
                &cache.q_r,
                &dq,
                &mut dq_raw,
                &mut grads[o.q_norm..o.q_norm + hd],
            );
            rmsnorm_bwd(
                &cache.k_raw,
                self.p(o.k_norm, hd),
                &cache.k_r,
                &dk,
                &mut dk_raw,
                &mut grads[o.k_norm..o.k_norm + hd],
            );

            let mut dh1 = vec![T::ZERO; n * d];
            gemm(
                Mat::new(&dq_raw, n, qd),
                Mat::new(self.p(o.wq, d * qd), d, qd).t(),
                T::ZERO,
                &mut dh1,
                d,
            );
            gemm(
                Mat::new(&dk_raw, n, kvd),
                Mat::new(self.p(o.wk, d * kvd), d, kvd).t(),
                T::ONE,
                &mut dh1,
                d,
            );
            gemm(
                Mat::new(&dv, n, kvd),
                Mat::new(self.p(o.wv, d * kvd), d, kvd).t(),
                T::ONE,
                &mut dh1,
                d,
            );
            gemm(
                Mat::new(&cache.h1, n, d).t(),
                Mat::new(&dq_raw, n, qd),
                T::ONE,
                &mut grads[o.wq..o.wq + d * qd],
                qd,
            );
            gemm(
                Mat::new(&cache.h1, n, d).t(),
                Mat::new(&dk_raw, n, kvd),
                T::ONE,
                &mut grads[o.wk..o.wk + d * kvd],
                kvd,
            );
            gemm(
                Mat::new(&cache.h1, n, d).t(),
                Mat::new(&dv, n, kvd),
                T::ONE,
                &mut grads[o.wv..o.wv + d * kvd],
                kvd,
            );
            rmsnorm_bwd(
                &cache.x_in,
                self.p(o.attn_norm, d),
                &cache.r1,
                &dh1,
                &mut dx,
                &mut grads[o.attn_norm..o.attn_norm + d],
            );
        }

        for (i, &t) in tokens.iter().enumerate() {
            let row = lay.embed + t as usize * d;
            for (gv, &dv) in grads[row..row + d].iter_mut().zip(&dx[i * d..(i + 1) * d]) {
                *gv += dv;
            }
        }
    }

    /// Mean loss of one window (`inputs = w[..n]`, `targets = w[1..]`) and
    /// its gradient, scaled by `grad_scale` per predicted token, added to
    /// `grads`.
    pub fn loss_and_grad(
        &self,
        window: &[u32],
        grad_scale: T,
        grads: &mut [T],
    ) -> Result<f64, ModelError> {
        if window.len() < 2 {
            return Err(ModelError::TooShort(window.len()));
        }
        let inputs = &window[..window.len() - 1];
        let (mut logits, acts) = self.forward_train(inputs)?;
        let vocab = self.config.vocab_size;
        let mut total = 0.0;
        for (i, &t) in window[1..].iter().enumerate() {
            if t as usize >= vocab {
                return Err(ModelError::TokenOutOfRange { token: t, vocab });
            }
            let row = &mut logits[i * vocab..(i + 1) * vocab];
            let lse = log_sum_exp(row);
            total += (lse - row[t as usize]).to_f64();
            for v in row.iter_mut() {
                *v = (*v - lse).exp() * grad_scale;
            }
            row[t as usize] -= grad_scale;
        }
        self.backward(inputs, &acts, &logits, grads);
        Ok(total / inputs.len() as f64)
    }

    /// Mean loss of one window without gradients.
    pub fn window_loss(&self, window: &[u32]) -> Result<f64, ModelError> {
        if window.len() < 2 {
            return Err(ModelError::TooShort(window.len()));
        }
        let logits = self.forward(&window[..window.len() - 1])?;
        lm_loss(&logits, window, self.config.vocab_size)
    }
}

/// Incremental decoding with a key/value cache.
pub struct Session<'m, T> {
    model: &'m Model<T>,
    tokens: Vec<u32>,
    kv: Vec<LayerKv<T>>,
    logits: Vec<T>,
}

impl<'m, T: Real> Session<'m, T> {
    pub fn new(model: &'m Model<T>) -> Self {
        Self {
            model,
            tokens: Vec::new(),
            kv: vec![LayerKv::default(); model.config.n_layers],
            logits: Vec::new(),
        }
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Bring the cache in line with `tokens`, reusing the longest common
    /// prefix, and return the next-token logits.
    pub fn sync(&mut self, tokens: &[u32]) -> Result<&[T], ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::TooShort(0));
        }
        let mut keep = self
            .tokens
            .iter()
            .zip(tokens)
            .take_while(|(a, b)| a == b)
            .count();
        if keep == tokens.len() && keep == self.tokens.len() && !self.logits.is_empty() {
            return Ok(&self.logits);
        }
        keep = keep.min(tokens.len() - 1);
        self.truncate(keep);
        self.feed(&tokens[keep..])?;
        Ok(&self.logits)
    }

    /// Append one token and return the next-token logits.
    pub fn push(&mut self, token: u32) -> Result<&[T], ModelError> {
        self.feed(&[token])?;
        Ok(&self.logits)
    }

    fn truncate(&mut self, len: usize) {
        let kvd = self.model.config.kv_dim();
        self.tokens.truncate(len);
        for kv in &mut self.kv {
            kv.k.truncate(len * kvd);
            kv.v.truncate(len * kvd);
        }
        self.logits.clear();
    }

    fn feed(&mut self, new: &[u32]) -> Result<(), ModelError> {
        let m = self.model;
        let p0 = self.tokens.len();
        m.check_tokens(new, p0)?;
        let n = new.len();
        let mut x = m.embed(new);
        for (l, kv) in self.kv.iter_mut().enumerate() {
            m.layer_forward(l, &mut x, n, p0, kv, false);
        }
        let d = m.config.model_dim;
        self.logits = m.head(&x[(n - 1) * d..], 1).0;
        self.tokens.extend_from_slice(new);
        Ok(())
    }
}
