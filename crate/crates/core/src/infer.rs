//! The trained model as an optimizer: grammar-constrained sampling of
//! configurations and the closed ask/evaluate loop around it.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bench::{BenchError, BenchmarkTask};
use crate::codec::{
    decode_config, encode_history, CodecError, GrammarState, QuantizationConfig, Slot, TrialGrammar,
};
use crate::model::{Model, ModelError, Session};
use crate::runner::Trajectory;
use crate::space::{Configuration, SearchSpace};
use crate::tok::Tokenizer;

#[derive(Debug, Error)]
pub enum InferError {
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("model vocabulary {model} does not match tokenizer vocabulary {tokenizer}")]
    VocabMismatch { model: usize, tokenizer: usize },
    #[error("every token is masked in grammar state {0:?}; tokenizer and grammar disagree")]
    AllMasked(GrammarState),
    #[error("sampled configuration exceeded {0} bytes")]
    TrialTooLong(usize),
    #[error("context of {context} tokens cannot hold the prompt and one trial")]
    ContextTooSmall { context: usize },
    #[error("token trie disagrees with the grammar for token {0}")]
    TrieMismatch(u32),
    #[error("trial {trial}: {source}")]
    Trial {
        trial: usize,
        source: Box<InferError>,
    },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Bench(#[from] BenchError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub max_trial_bytes: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            max_trial_bytes: 512,
            seed: 0,
        }
    }
}

/// Prompt prefix plus observed trials with raw objectives.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub algorithm: String,
    pub space: SearchSpace,
    pub trials: Vec<(Configuration, f64)>,
}

impl History {
    pub fn new(algorithm: impl Into<String>, space: SearchSpace) -> Self {
        Self {
            algorithm: algorithm.into(),
            space,
            trials: Vec::new(),
        }
    }

    /// Encoding of the trials from `first` on, objectives scaled over them.
    pub fn encode_from(
        &self,
        first: usize,
        quant: QuantizationConfig,
    ) -> Result<String, CodecError> {
        encode_history(&self.algorithm, &self.space, &self.trials[first..], quant)
    }

    pub fn encode(&self, quant: QuantizationConfig) -> Result<String, CodecError> {
        self.encode_from(0, quant)
    }
}

#[derive(Debug, Default)]
struct TrieNode {
    children: Vec<(u8, usize)>,
    token: Option<u32>,
}

/// Byte-expansion trie of a vocabulary (end-of-sequence excluded).
#[derive(Debug)]
pub struct TokenTrie {
    nodes: Vec<TrieNode>,
}

impl TokenTrie {
    pub fn new(tok: &Tokenizer) -> Self {
        let mut nodes = vec![TrieNode::default()];
        for (id, bytes) in tok.expansions().iter().enumerate() {
            let mut at = 0;
            for &b in bytes {
                at = match nodes[at].children.iter().find(|c| c.0 == b) {
                    Some(&(_, next)) => next,
                    None => {
                        nodes.push(TrieNode::default());
                        let next = nodes.len() - 1;
                        nodes[at].children.push((b, next));
                        next
                    }
                };
            }
            nodes[at].token = Some(id as u32);
        }
        Self { nodes }
    }

    /// Token whose expansion is exactly `bytes`.
    pub fn lookup(&self, bytes: &[u8]) -> Option<u32> {
        let mut at = 0;
        for &b in bytes {
            at = self.nodes[at].children.iter().find(|c| c.0 == b)?.1;
        }
        self.nodes[at].token
    }

    /// Every token the grammar accepts from `state`, with the state after it.
    pub fn allowed(&self, grammar: &TrialGrammar, state: GrammarState) -> Vec<(u32, GrammarState)> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, state)];
        while let Some((node, st)) = stack.pop() {
            if let Some(t) = self.nodes[node].token {
                out.push((t, st));
            }
            for &(b, child) in &self.nodes[node].children {
                if let Some(next) = grammar.advance(st, b) {
                    stack.push((child, next));
                }
            }
        }
        out.sort_unstable_by_key(|e| e.0);
        out
    }
}

/// Masking machinery for one (tokenizer, search space) pair.
#[derive(Debug)]
pub struct ConstrainedDecoder<'t> {
    tok: &'t Tokenizer,
    grammar: TrialGrammar,
    trie: TokenTrie,
    quant: QuantizationConfig,
    cache: HashMap<GrammarState, Vec<(u32, GrammarState)>>,
}

impl<'t> ConstrainedDecoder<'t> {
    /// Builds the trie and checks it against per-byte grammar advancement for
    /// every token at every slot boundary.
    pub fn new(
        tok: &'t Tokenizer,
        space: &SearchSpace,
        quant: QuantizationConfig,
    ) -> Result<Self, InferError> {
        let grammar = TrialGrammar::new(space, quant);
        let trie = TokenTrie::new(tok);
        for (id, bytes) in tok.expansions().iter().enumerate() {
            if trie.lookup(bytes) != Some(id as u32) {
                return Err(InferError::TrieMismatch(id as u32));
            }
        }
        let mut d = Self {
            tok,
            grammar,
            trie,
            quant,
            cache: HashMap::new(),
        };
        for st in d.boundary_states() {
            let via_trie: Vec<(u32, GrammarState)> = d.allowed(st).to_vec();
            let direct: Vec<(u32, GrammarState)> = tok
                .expansions()
                .iter()
                .enumerate()
                .filter_map(|(id, bytes)| {
                    d.grammar.advance_bytes(st, bytes).map(|s| (id as u32, s))
                })
                .collect();
            if via_trie != direct {
                let bad = via_trie
                    .iter()
                    .zip(&direct)
                    .find(|(a, b)| a != b)
                    .map_or(via_trie.len().min(direct.len()) as u32, |(a, _)| a.0);
                return Err(InferError::TrieMismatch(bad));
            }
        }
        Ok(d)
    }

    fn boundary_states(&self) -> Vec<GrammarState> {
        use crate::codec::Phase;
        let mut out = vec![GrammarState::START];
        for slot in 0..self.grammar.slots().len() {
            out.push(GrammarState {
                slot,
                phase: Phase::SlotStart,
            });
            if let Slot::Categorical(_) = self.grammar.slots()[slot] {
                out.push(GrammarState {
                    slot,
                    phase: Phase::CatOpen,
                });
            }
        }
        out.push(GrammarState {
            slot: self.grammar.slots().len() - 1,
            phase: Phase::ObjectiveStart,
        });
        out.dedup();
        out
    }

    pub fn grammar(&self) -> &TrialGrammar {
        &self.grammar
    }

    pub fn allowed(&mut self, state: GrammarState) -> &[(u32, GrammarState)] {
        let (trie, grammar) = (&self.trie, &self.grammar);
        self.cache
            .entry(state)
            .or_insert_with(|| trie.allowed(grammar, state))
    }

    /// Longest configuration string, `*` included.
    pub fn max_config_bytes(&self) -> usize {
        let digits = |n: u32| n.saturating_sub(1).max(1).to_string().len();
        self.grammar
            .slots()
            .iter()
            .map(|s| match s {
                Slot::Numeric => digits(self.quant.q) + 1,
                Slot::Categorical(c) => digits(*c) + 3,
            })
            .sum()
    }

    /// Sample one configuration after `prompt`, returning the text up to and
    /// including `*`. Only the renormalized probabilities of grammar-valid
    /// tokens are used.
    pub fn sample_config<R: Rng + ?Sized>(
        &mut self,
        session: &mut Session<'_, f32>,
        prompt: &[u32],
        cfg: &SamplerConfig,
        rng: &mut R,
    ) -> Result<String, InferError> {
        if !(cfg.temperature > 0.0 && cfg.temperature.is_finite()) {
            return Err(InferError::BadTemperature(cfg.temperature));
        }
        let mut logits = session.sync(prompt)?.to_vec();
        let mut state = GrammarState::START;
        let mut bytes: Vec<u8> = Vec::new();
        loop {
            let allowed = self.allowed(state);
            if allowed.is_empty() {
                return Err(InferError::AllMasked(state));
            }
            let (token, next) = allowed[sample_masked(&logits, allowed, cfg.temperature, rng)];
            bytes.extend_from_slice(self.tok.expansion(token).expect("token from trie"));
            if let Some(end) = bytes.iter().position(|&b| b == b'*') {
                bytes.truncate(end + 1);
                return Ok(String::from_utf8(bytes).expect("grammar bytes are ASCII"));
            }
            if bytes.len() > cfg.max_trial_bytes {
                return Err(InferError::TrialTooLong(cfg.max_trial_bytes));
            }
            state = next;
            logits = session.push(token)?.to_vec();
        }
    }
}

/// Index into `allowed` drawn from the softmax of `logits / temperature`
/// restricted to the allowed tokens.
fn sample_masked<R: Rng + ?Sized>(
    logits: &[f32],
    allowed: &[(u32, GrammarState)],
    temperature: f64,
    rng: &mut R,
) -> usize {
    let scaled: Vec<f64> = allowed
        .iter()
        .map(|&(t, _)| logits[t as usize] as f64 / temperature)
        .collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// A trained model plus its tokenizer, ready to propose configurations.
pub struct ModelOptimizer<'a> {
    pub model: &'a Model<f32>,
    pub tokenizer: &'a Tokenizer,
    /// Short checkpoint hash used in the optimizer label.
    pub checkpoint_id: String,
    pub quant: QuantizationConfig,
}

impl<'a> ModelOptimizer<'a> {
    pub fn new(
        model: &'a Model<f32>,
        tokenizer: &'a Tokenizer,
        checkpoint_id: impl Into<String>,
    ) -> Result<Self, InferError> {
        if model.config.vocab_size != tokenizer.model_vocab_size() {
            return Err(InferError::VocabMismatch {
                model: model.config.vocab_size,
                tokenizer: tokenizer.model_vocab_size(),
            });
        }
        Ok(Self {
            model,
            tokenizer,
            checkpoint_id: checkpoint_id.into(),
            quant: QuantizationConfig::default(),
        })
    }

    /// Fresh decoding state for one search space.
    pub fn start(&self, space: &SearchSpace) -> Result<Proposer<'_>, InferError> {
        Ok(Proposer {
            opt: self,
            session: Session::new(self.model),
            decoder: ConstrainedDecoder::new(self.tokenizer, space, self.quant)?,
            first: 0,
        })
    }

    /// Closed loop: re-encode, sample, evaluate, append; `budget` times.
    pub fn optimize(
        &self,
        task: &BenchmarkTask,
        algorithm: &str,
        budget: usize,
        cfg: &SamplerConfig,
    ) -> Result<Trajectory, InferError> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut proposer = self.start(&task.space)?;
        let mut history = History::new(algorithm, task.space.clone());
        for trial in 0..budget {
            let wrap = |e: InferError| InferError::Trial {
                trial,
                source: Box::new(e),
            };
            let (_, config) = proposer.sample(&history, cfg, &mut rng).map_err(wrap)?;
            let y = task.evaluate(&config).map_err(|e| wrap(e.into()))?;
            history.trials.push((config, y));
        }
        Ok(Trajectory {
            task_id: task.id.clone(),
            space: task.space.clone(),
            optimizer: format!("model:{algorithm}@{}", self.checkpoint_id),
            seed: cfg.seed,
            trials: history.trials,
        })
    }

    /// `n` independent next-configuration samples for one fixed history.
    pub fn sample_next_configs(
        &self,
        history: &History,
        n: usize,
        cfg: &SamplerConfig,
    ) -> Result<Vec<Configuration>, InferError> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut proposer = self.start(&history.space)?;
        (0..n)
            .map(|_| Ok(proposer.sample(history, cfg, &mut rng)?.1))
            .collect()
    }
}

/// Decoding state of one optimization run: key/value cache, token masks and
/// the index of the oldest trial still in the prompt.
pub struct Proposer<'a> {
    opt: &'a ModelOptimizer<'a>,
    session: Session<'a, f32>,
    decoder: ConstrainedDecoder<'a>,
    first: usize,
}

impl Proposer<'_> {
    fn tokens(&self, history: &History, first: usize) -> Result<Vec<u32>, InferError> {
        let text = history.encode_from(first, self.opt.quant)?;
        let mut tokens = Vec::with_capacity(text.len() + 1);
        tokens.push(self.opt.tokenizer.eos_id());
        tokens.extend(self.opt.tokenizer.tokenize(&text));
        Ok(tokens)
    }

    /// Prompt for `history`. When the prompt plus one configuration no
    /// longer fits the context, the oldest trials are dropped until it fits
    /// in half of it, so the cached prefix stays valid for a while.
    fn prompt(&mut self, history: &History) -> Result<Vec<u32>, InferError> {
        let ctx = self.opt.model.config.context_length;
        let reserve = self.decoder.max_config_bytes();
        self.first = self.first.min(history.trials.len());
        let tokens = self.tokens(history, self.first)?;
        if tokens.len() + reserve <= ctx {
            return Ok(tokens);
        }
        let mut fallback = None;
        for first in self.first + 1..=history.trials.len() {
            let tokens = self.tokens(history, first)?;
            if tokens.len() + reserve <= ctx / 2 {
                self.first = first;
                return Ok(tokens);
            }
            if fallback.is_none() && tokens.len() + reserve <= ctx {
                fallback = Some((first, tokens));
            }
        }
        let (first, tokens) = fallback.ok_or(InferError::ContextTooSmall { context: ctx })?;
        self.first = first;
        Ok(tokens)
    }

    /// Sample one configuration given `history`; returns the sampled text
    /// (ending in `*`) and the decoded configuration.
    pub fn sample<R: Rng + ?Sized>(
        &mut self,
        history: &History,
        cfg: &SamplerConfig,
        rng: &mut R,
    ) -> Result<(String, Configuration), InferError> {
        let prompt = self.prompt(history)?;
        let text = self
            .decoder
            .sample_config(&mut self.session, &prompt, cfg, rng)?;
        let config = decode_config(&history.space, self.opt.quant, &text)?.config;
        Ok((text, config))
    }
}
