//! Text encoding of trajectories.
//!
//! An encoded trajectory has three parts:
//!
//! ```text
//! <algorithm>:RS
//! <type>:<UNI>,<min_value>:0.01,<max_value>:1.0,<log-scale>&
//! <type>:<INT>,<min_value>:1,<max_value>:5,<linear-scale>&
//! <type>:<CATEGORICAL>,<categories>:[0, 1]
//! 120,200,<1>*300|60,50,<0>*200|
//! ```
//!
//! Numerical parameters come first (see [`SearchSpace::canonical_order`]).
//! Each numerical value is its unit coordinate quantized to `0..Q`,
//! categorical values are written `<i>`, `*` closes the configuration and the
//! objective token (min-max scaled over the whole trajectory, then quantized)
//! is closed by `|`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::runner::Trajectory;
use crate::space::{
    parse_header, Configuration, Domain, ParamValue, SearchSpace, SpaceError, UnitPoint,
};

pub const DEFAULT_Q: u32 = 1000;

/// Trajectory lengths used by prefix augmentation.
pub const PREFIX_LENGTHS: [usize; 5] = [5, 10, 20, 50, 100];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("unit value {0} outside [0, 1]")]
    UnitOutOfRange(f64),
    #[error("token {token} outside [0, {max}]")]
    TokenOutOfRange { token: u32, max: u32 },
    #[error("byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },
    #[error("prefix length {prefix} not in 1..={len}")]
    BadPrefix { prefix: usize, len: usize },
    #[error("Q must be at least 2, got {0}")]
    BadQ(u32),
    #[error(transparent)]
    Space(#[from] SpaceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizationConfig {
    pub q: u32,
}

impl Default for QuantizationConfig {
    fn default() -> Self {
        Self { q: DEFAULT_Q }
    }
}

impl QuantizationConfig {
    pub fn new(q: u32) -> Result<Self, CodecError> {
        if q < 2 {
            return Err(CodecError::BadQ(q));
        }
        Ok(Self { q })
    }
}

/// `floor(u (Q - 1) + 1/2)`, i.e. round half up.
pub fn quantize(u: f64, quant: QuantizationConfig) -> Result<u32, CodecError> {
    if !(0.0..=1.0).contains(&u) {
        return Err(CodecError::UnitOutOfRange(u));
    }
    let top = quant.q - 1;
    Ok(((u * top as f64 + 0.5).floor() as u32).min(top))
}

pub fn dequantize(token: u32, quant: QuantizationConfig) -> Result<f64, CodecError> {
    let top = quant.q - 1;
    if token > top {
        return Err(CodecError::TokenOutOfRange { token, max: top });
    }
    Ok(token as f64 / top as f64)
}

/// Min-max scaling to `[0, 1]`; a constant list maps to zeros.
pub fn scale_objectives(ys: &[f64]) -> Vec<f64> {
    let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return vec![0.0; ys.len()];
    }
    ys.iter().map(|y| (y - lo) / (hi - lo)).collect()
}

/// Where an encoded record came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingSource {
    pub task_id: String,
    pub optimizer: String,
    pub seed: u64,
    pub augmentation: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTrajectory {
    pub text: String,
    pub n_trials: usize,
    pub source: EncodingSource,
}

/// The algorithm line and space header, ending with the newline that
/// precedes the first trial.
pub fn encode_prompt(algorithm: &str, space: &SearchSpace) -> String {
    format!("<algorithm>:{algorithm}\n{}\n", space.encode_header())
}

/// Configuration part of one trial, without the closing `*`.
pub fn encode_config(
    space: &SearchSpace,
    config: &Configuration,
    quant: QuantizationConfig,
) -> Result<String, CodecError> {
    let unit = space.to_unit(config)?;
    let mut parts = Vec::with_capacity(space.dim());
    for i in space.canonical_order() {
        parts.push(match unit.0[i] {
            ParamValue::Num(u) => quantize(u, quant)?.to_string(),
            ParamValue::Cat(c) => format!("<{c}>"),
        });
    }
    Ok(parts.join(","))
}

/// The trial stream of a history: objectives are scaled over exactly these
/// trials.
pub fn encode_trials(
    space: &SearchSpace,
    trials: &[(Configuration, f64)],
    quant: QuantizationConfig,
) -> Result<String, CodecError> {
    let ys: Vec<f64> = trials.iter().map(|(_, y)| *y).collect();
    let mut out = String::new();
    for ((config, _), s) in trials.iter().zip(scale_objectives(&ys)) {
        out.push_str(&encode_config(space, config, quant)?);
        out.push('*');
        out.push_str(&quantize(s, quant)?.to_string());
        out.push('|');
    }
    Ok(out)
}

pub fn encode_history(
    algorithm: &str,
    space: &SearchSpace,
    trials: &[(Configuration, f64)],
    quant: QuantizationConfig,
) -> Result<String, CodecError> {
    Ok(encode_prompt(algorithm, space) + &encode_trials(space, trials, quant)?)
}

pub fn encode_trajectory(
    traj: &Trajectory,
    quant: QuantizationConfig,
) -> Result<EncodedTrajectory, CodecError> {
    encode_trajectory_as(traj, quant, "none")
}

pub fn encode_trajectory_as(
    traj: &Trajectory,
    quant: QuantizationConfig,
    augmentation: &str,
) -> Result<EncodedTrajectory, CodecError> {
    Ok(EncodedTrajectory {
        text: encode_history(&traj.optimizer, &traj.space, &traj.trials, quant)?,
        n_trials: traj.trials.len(),
        source: EncodingSource {
            task_id: traj.task_id.clone(),
            optimizer: traj.optimizer.clone(),
            seed: traj.seed,
            augmentation: augmentation.to_string(),
        },
    })
}

// ---------------------------------------------------------------------------
// Decoding

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedTrial {
    pub config: Configuration,
    /// Dequantized unit coordinates, in space order.
    pub unit: UnitPoint,
    /// Scaled objective in `[0, 1]`, when the trial carried one.
    pub objective: Option<f64>,
}

fn parse_error(offset: usize, reason: impl Into<String>) -> CodecError {
    CodecError::Parse {
        offset,
        reason: reason.into(),
    }
}

/// Canonical non-negative integer below `bound`: no sign, no leading zeros.
fn parse_number(s: &str, offset: usize, bound: u32) -> Result<u32, CodecError> {
    if s.is_empty() {
        return Err(parse_error(offset, "empty number"));
    }
    if let Some(i) = s.bytes().position(|b| !b.is_ascii_digit()) {
        return Err(parse_error(
            offset + i,
            format!("unexpected byte {:?}", s.as_bytes()[i] as char),
        ));
    }
    if s.len() > 1 && s.starts_with('0') {
        return Err(parse_error(offset, "leading zero"));
    }
    match s.parse::<u64>() {
        Ok(v) if v < bound as u64 => Ok(v as u32),
        _ => Err(parse_error(offset, format!("{s} is not below {bound}"))),
    }
}

/// Parse the configuration part of a trial (no `*`).
fn decode_config_body(
    space: &SearchSpace,
    quant: QuantizationConfig,
    body: &str,
    base: usize,
) -> Result<(Configuration, UnitPoint), CodecError> {
    let order = space.canonical_order();
    let fields: Vec<&str> = body.split(',').collect();
    if fields.len() != order.len() {
        return Err(parse_error(
            base,
            format!("expected {} values, found {}", order.len(), fields.len()),
        ));
    }
    let mut unit = vec![ParamValue::Num(0.0); space.dim()];
    let mut offset = base;
    for (field, &pos) in fields.iter().zip(&order) {
        unit[pos] = match space.params()[pos].domain {
            Domain::Categorical { cardinality } => {
                let inner = field
                    .strip_prefix('<')
                    .and_then(|f| f.strip_suffix('>'))
                    .ok_or_else(|| parse_error(offset, "expected `<index>`"))?;
                ParamValue::Cat(
                    parse_number(inner, offset + 1, cardinality as u32)?
                        .try_into()
                        .expect("fits usize"),
                )
            }
            _ => ParamValue::Num(dequantize(parse_number(field, offset, quant.q)?, quant)?),
        };
        offset += field.len() + 1;
    }
    let unit = UnitPoint(unit);
    let config = space.from_unit(&unit)?;
    Ok((config, unit))
}

/// Decode one complete trial `values*objective|`.
pub fn decode_trial(
    space: &SearchSpace,
    quant: QuantizationConfig,
    s: &str,
) -> Result<DecodedTrial, CodecError> {
    let body = s
        .strip_suffix('|')
        .ok_or_else(|| parse_error(s.len(), "trial must end with `|`"))?;
    if let Some(i) = body.find('|') {
        return Err(parse_error(i, "more than one trial"));
    }
    let star = body
        .find('*')
        .ok_or_else(|| parse_error(body.len(), "missing `*`"))?;
    let (config_part, objective_part) = (&body[..star], &body[star + 1..]);
    if let Some(i) = objective_part.find('*') {
        return Err(parse_error(star + 1 + i, "second `*`"));
    }
    let (config, unit) = decode_config_body(space, quant, config_part, 0)?;
    let objective = dequantize(parse_number(objective_part, star + 1, quant.q)?, quant)?;
    Ok(DecodedTrial {
        config,
        unit,
        objective: Some(objective),
    })
}

/// Decode a sampled configuration `values*` (objective not yet known).
pub fn decode_config(
    space: &SearchSpace,
    quant: QuantizationConfig,
    s: &str,
) -> Result<DecodedTrial, CodecError> {
    let body = s
        .strip_suffix('*')
        .ok_or_else(|| parse_error(s.len(), "configuration must end with `*`"))?;
    if let Some(i) = body.find(['*', '|']) {
        return Err(parse_error(i, "unexpected delimiter"));
    }
    let (config, unit) = decode_config_body(space, quant, body, 0)?;
    Ok(DecodedTrial {
        config,
        unit,
        objective: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedTrajectory {
    pub algorithm: String,
    pub space: SearchSpace,
    pub trials: Vec<DecodedTrial>,
}

/// Split an encoded trajectory into algorithm name, header and trial stream.
pub fn split_encoded(text: &str) -> Result<(&str, &str, &str), CodecError> {
    let first_nl = text
        .find('\n')
        .ok_or_else(|| parse_error(text.len(), "missing header"))?;
    let algorithm = text[..first_nl]
        .strip_prefix("<algorithm>:")
        .ok_or_else(|| parse_error(0, "expected `<algorithm>:`"))?;
    let mut pos = first_nl + 1;
    loop {
        let nl = text[pos..]
            .find('\n')
            .map(|i| pos + i)
            .ok_or_else(|| parse_error(text.len(), "unterminated header"))?;
        if !text[..nl].ends_with('&') {
            return Ok((algorithm, &text[first_nl + 1..nl], &text[nl + 1..]));
        }
        pos = nl + 1;
    }
}

pub fn decode_trajectory(
    text: &str,
    quant: QuantizationConfig,
) -> Result<DecodedTrajectory, CodecError> {
    let (algorithm, header, stream) = split_encoded(text)?;
    let base = text.len() - stream.len();
    let space = parse_header("decoded", header)?;
    let mut trials = Vec::new();
    let mut start = 0;
    while start < stream.len() {
        let end = stream[start..]
            .find('|')
            .map(|i| start + i + 1)
            .ok_or_else(|| parse_error(base + stream.len(), "unterminated trial"))?;
        let trial = decode_trial(&space, quant, &stream[start..end]).map_err(|e| match e {
            CodecError::Parse { offset, reason } => parse_error(base + start + offset, reason),
            other => other,
        })?;
        trials.push(trial);
        start = end;
    }
    Ok(DecodedTrajectory {
        algorithm: algorithm.to_string(),
        space,
        trials,
    })
}

// ---------------------------------------------------------------------------
// Augmentation

/// Shuffle numerical parameters among themselves and categorical ones among
/// themselves, consistently in the space and every trial. The result lists
/// numerical parameters first.
pub fn permute_augment<R: Rng + ?Sized>(traj: &Trajectory, rng: &mut R) -> Trajectory {
    let space = &traj.space;
    let (mut num, mut cat): (Vec<usize>, Vec<usize>) =
        (0..space.dim()).partition(|&i| !space.params()[i].is_categorical());
    num.shuffle(rng);
    cat.shuffle(rng);
    let order: Vec<usize> = num.into_iter().chain(cat).collect();
    Trajectory {
        task_id: traj.task_id.clone(),
        space: space.reordered(&order, space.id.clone()),
        optimizer: traj.optimizer.clone(),
        seed: traj.seed,
        trials: traj
            .trials
            .iter()
            .map(|(c, y)| (Configuration(order.iter().map(|&i| c.0[i]).collect()), *y))
            .collect(),
    }
}

/// The first `prefix` trials. Objective scaling happens at encode time, so it
/// only sees the kept trials.
pub fn prefix_augment(traj: &Trajectory, prefix: usize) -> Result<Trajectory, CodecError> {
    if prefix == 0 || prefix > traj.trials.len() {
        return Err(CodecError::BadPrefix {
            prefix,
            len: traj.trials.len(),
        });
    }
    let mut out = traj.clone();
    out.trials.truncate(prefix);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Grammar

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Numeric,
    Categorical(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    /// Before the first byte of a configuration slot.
    SlotStart,
    Numeric(u32),
    CatOpen,
    Categorical(u32),
    CatClosed,
    /// After `*`, before the first objective digit.
    ObjectiveStart,
    Objective(u32),
}

/// Position inside the trial stream. `slot` indexes the canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GrammarState {
    pub slot: usize,
    pub phase: Phase,
}

impl GrammarState {
    pub const START: GrammarState = GrammarState {
        slot: 0,
        phase: Phase::SlotStart,
    };

    /// True between trials (start of stream or right after `|`).
    pub fn at_trial_boundary(&self) -> bool {
        *self == Self::START
    }

    /// True once `*` has been read.
    pub fn in_objective(&self) -> bool {
        matches!(self.phase, Phase::ObjectiveStart | Phase::Objective(_))
    }
}

/// Byte-level automaton for the trial stream of one search space.
#[derive(Debug, Clone)]
pub struct TrialGrammar {
    slots: Vec<Slot>,
    q: u32,
}

fn digit(b: u8) -> Option<u32> {
    b.is_ascii_digit().then(|| (b - b'0') as u32)
}

/// Append digit `d` to `acc` if the result is canonical and below `bound`.
fn extend(acc: u32, d: u32, bound: u32) -> Option<u32> {
    if acc == 0 {
        return None;
    }
    let v = acc.checked_mul(10)?.checked_add(d)?;
    (v < bound).then_some(v)
}

impl TrialGrammar {
    pub fn new(space: &SearchSpace, quant: QuantizationConfig) -> Self {
        let slots = space
            .canonical_order()
            .into_iter()
            .map(|i| match space.params()[i].domain {
                Domain::Categorical { cardinality } => Slot::Categorical(cardinality as u32),
                _ => Slot::Numeric,
            })
            .collect();
        Self { slots, q: quant.q }
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    fn after_value(&self, slot: usize, b: u8) -> Option<GrammarState> {
        let last = slot + 1 == self.slots.len();
        match (b, last) {
            (b',', false) => Some(GrammarState {
                slot: slot + 1,
                phase: Phase::SlotStart,
            }),
            (b'*', true) => Some(GrammarState {
                slot,
                phase: Phase::ObjectiveStart,
            }),
            _ => None,
        }
    }

    /// Next state, or `None` when `b` cannot continue a valid stream.
    pub fn advance(&self, st: GrammarState, b: u8) -> Option<GrammarState> {
        let at = |phase| {
            Some(GrammarState {
                slot: st.slot,
                phase,
            })
        };
        match st.phase {
            Phase::SlotStart => match self.slots[st.slot] {
                Slot::Numeric => at(Phase::Numeric(digit(b)?)),
                Slot::Categorical(_) => (b == b'<').then_some(GrammarState {
                    slot: st.slot,
                    phase: Phase::CatOpen,
                }),
            },
            Phase::Numeric(acc) => match digit(b) {
                Some(d) => at(Phase::Numeric(extend(acc, d, self.q)?)),
                None => self.after_value(st.slot, b),
            },
            Phase::CatOpen => {
                let Slot::Categorical(card) = self.slots[st.slot] else {
                    unreachable!()
                };
                let d = digit(b)?;
                (d < card).then_some(GrammarState {
                    slot: st.slot,
                    phase: Phase::Categorical(d),
                })
            }
            Phase::Categorical(acc) => {
                let Slot::Categorical(card) = self.slots[st.slot] else {
                    unreachable!()
                };
                match digit(b) {
                    Some(d) => at(Phase::Categorical(extend(acc, d, card)?)),
                    None => (b == b'>').then_some(GrammarState {
                        slot: st.slot,
                        phase: Phase::CatClosed,
                    }),
                }
            }
            Phase::CatClosed => self.after_value(st.slot, b),
            Phase::ObjectiveStart => at(Phase::Objective(digit(b)?)),
            Phase::Objective(acc) => match digit(b) {
                Some(d) => at(Phase::Objective(extend(acc, d, self.q)?)),
                None => (b == b'|').then_some(GrammarState::START),
            },
        }
    }

    pub fn advance_bytes(&self, mut st: GrammarState, bytes: &[u8]) -> Option<GrammarState> {
        for &b in bytes {
            st = self.advance(st, b)?;
        }
        Some(st)
    }

    /// Whether `s` is exactly one complete trial.
    pub fn accepts_trial(&self, s: &[u8]) -> bool {
        let Some((&last, body)) = s.split_last() else {
            return false;
        };
        if last != b'|' || body.contains(&b'|') {
            return false;
        }
        match self.advance_bytes(GrammarState::START, body) {
            Some(st) if st.in_objective() => self.advance(st, b'|') == Some(GrammarState::START),
            _ => false,
        }
    }

    /// Whether `s` is a sequence of zero or more complete trials.
    pub fn accepts_stream(&self, s: &[u8]) -> bool {
        self.advance_bytes(GrammarState::START, s) == Some(GrammarState::START)
    }
}

// ---------------------------------------------------------------------------
// Corpus files

/// Write records separated by blank lines, plus a JSON sidecar listing their
/// sources (`<path>.manifest.json`).
pub fn write_corpus(path: &Path, records: &[EncodedTrajectory]) -> std::io::Result<()> {
    let text: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
    std::fs::write(path, text.join("\n\n") + "\n")?;
    let sources: Vec<&EncodingSource> = records.iter().map(|r| &r.source).collect();
    std::fs::write(
        corpus_manifest_path(path),
        serde_json::to_string_pretty(&sources).expect("sources serialize"),
    )
}

pub fn corpus_manifest_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}

pub fn read_corpus(path: &Path) -> std::io::Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .split("\n\n")
        .map(|r| r.trim_end_matches('\n'))
        .filter(|r| !r.is_empty())
        .map(str::to_string)
        .collect())
}

pub fn read_corpus_sources(path: &Path) -> std::io::Result<Vec<EncodingSource>> {
    let text = std::fs::read_to_string(corpus_manifest_path(path))?;
    serde_json::from_str(&text).map_err(std::io::Error::other)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::tests::arb_space;
    use crate::space::ParameterDomain;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const Q: QuantizationConfig = QuantizationConfig { q: 1000 };

    fn figure_space() -> SearchSpace {
        SearchSpace::new(
            "fig",
            vec![
                ParameterDomain::log_uniform("a", 0.01, 1.0).unwrap(),
                ParameterDomain::integer("b", 1, 5).unwrap(),
                ParameterDomain::categorical("c", 2).unwrap(),
            ],
        )
        .unwrap()
    }

    fn traj(space: SearchSpace, trials: Vec<(Configuration, f64)>) -> Trajectory {
        Trajectory {
            task_id: "t".into(),
            space,
            optimizer: "RS".into(),
            seed: 0,
            trials,
        }
    }

    fn random_traj(space: &SearchSpace, n: usize, rng: &mut ChaCha8Rng) -> Trajectory {
        let trials = (0..n)
            .map(|_| (space.sample_uniform(rng), rng.random::<f64>() * 10.0 - 5.0))
            .collect();
        traj(space.clone(), trials)
    }

    #[test]
    fn quantization_examples() {
        assert_eq!(quantize(0.0, Q).unwrap(), 0);
        assert_eq!(quantize(1.0, Q).unwrap(), 999);
        assert_eq!(quantize(0.5, Q).unwrap(), 500);
        assert!(quantize(1.01, Q).is_err());
        assert!(quantize(-0.01, Q).is_err());
        assert_eq!(dequantize(0, Q).unwrap(), 0.0);
        assert_eq!(dequantize(999, Q).unwrap(), 1.0);
        assert!((dequantize(500, Q).unwrap() - 500.0 / 999.0).abs() < 1e-15);
        assert!(dequantize(1000, Q).is_err());
        assert!(QuantizationConfig::new(1).is_err());
        for i in 0..=10_000 {
            let u = i as f64 / 10_000.0;
            let back = dequantize(quantize(u, Q).unwrap(), Q).unwrap();
            assert!((back - u).abs() <= 0.5 / 999.0 + 1e-12);
        }
    }

    #[test]
    fn scaling_examples() {
        assert_eq!(scale_objectives(&[5.0, 1.0]), vec![1.0, 0.0]);
        assert_eq!(scale_objectives(&[2.0, 2.0]), vec![0.0, 0.0]);
        assert_eq!(scale_objectives(&[1.0, 2.0, 3.0]), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn figure_layout() {
        let space = figure_space();
        let c = |a: f64, b: f64, k: usize| {
            Configuration(vec![
                ParamValue::Num(a),
                ParamValue::Num(b),
                ParamValue::Cat(k),
            ])
        };
        let t = traj(space, vec![(c(0.1, 3.0, 1), 2.0), (c(0.01, 1.0, 0), 1.0)]);
        let enc = encode_trajectory(&t, Q).unwrap();
        assert_eq!(
            enc.text,
            "<algorithm>:RS\n\
             <type>:<UNI>,<min_value>:0.01,<max_value>:1.0,<log-scale>&\n\
             <type>:<INT>,<min_value>:1,<max_value>:5,<linear-scale>&\n\
             <type>:<CATEGORICAL>,<categories>:[0, 1]\n\
             500,500,<1>*999|0,0,<0>*0|"
        );
        assert_eq!(enc.n_trials, 2);
    }

    #[test]
    fn categorical_first_space_still_lists_numbers_first() {
        let space = SearchSpace::new(
            "s",
            vec![
                ParameterDomain::categorical("c", 3).unwrap(),
                ParameterDomain::uniform("x", 0.0, 1.0).unwrap(),
            ],
        )
        .unwrap();
        let config = Configuration(vec![ParamValue::Cat(2), ParamValue::Num(1.0)]);
        assert_eq!(encode_config(&space, &config, Q).unwrap(), "999,<2>");
        let d = decode_trial(&space, Q, "999,<2>*0|").unwrap();
        assert_eq!(d.config, config);
    }

    #[test]
    fn single_trial_objective_is_zero() {
        let space = figure_space();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = random_traj(&space, 1, &mut rng);
        assert!(encode_trajectory(&t, Q).unwrap().text.ends_with("*0|"));
    }

    #[test]
    fn decode_examples() {
        let space = figure_space();
        let d = decode_trial(&space, Q, "0,0,<0>*0|").unwrap();
        assert_eq!(
            d.config,
            Configuration(vec![
                ParamValue::Num(0.01),
                ParamValue::Num(1.0),
                ParamValue::Cat(0)
            ])
        );
        assert_eq!(d.objective, Some(0.0));
        assert_eq!(
            decode_trial(&space, Q, "5,5,<1>*5|").unwrap().config.0[2],
            ParamValue::Cat(1)
        );
        for bad in [
            "0,0,<2>*0|",
            "0,0*0|",
            "00,0,<0>*0|",
            "0,0,<0>*0",
            "0,0,<0>*1000|",
            "0,0,<0>0|",
            "0,0,<0>*0|0",
        ] {
            assert!(decode_trial(&space, Q, bad).is_err(), "{bad}");
        }
        match decode_trial(&space, Q, "0,1x,<0>*0|") {
            Err(CodecError::Parse { offset, .. }) => assert_eq!(offset, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn grammar_examples() {
        let g = TrialGrammar::new(&figure_space(), Q);
        let st = g.advance_bytes(GrammarState::START, b"120").unwrap();
        assert!(g.advance(st, b'0').is_none());
        let st = g.advance_bytes(GrammarState::START, b"1,2,<").unwrap();
        assert!(g.advance(st, b'5').is_none());
        assert!(g.advance(st, b'1').is_some());
        assert!(g.accepts_trial(b"120,200,<1>*300|"));
        assert!(!g.accepts_trial(b"120,200,<1>*300|60,50,<0>*200|"));
        assert!(g.accepts_stream(b"120,200,<1>*300|60,50,<0>*200|"));
        assert!(g
            .advance_bytes(GrammarState::START, b"120,200,<1>*")
            .unwrap()
            .in_objective());
        // `*` only after the last slot, `,` never after it.
        assert!(g.advance_bytes(GrammarState::START, b"1*").is_none());
        assert!(g.advance_bytes(GrammarState::START, b"1,2,<0>,").is_none());
    }

    #[test]
    fn two_trial_prefix_tokens() {
        let space = figure_space();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = random_traj(&space, 20, &mut rng);
        let p = prefix_augment(&t, 2).unwrap();
        let dec = decode_trajectory(&encode_trajectory(&p, Q).unwrap().text, Q).unwrap();
        let mut toks: Vec<f64> = dec.trials.iter().map(|d| d.objective.unwrap()).collect();
        toks.sort_by(f64::total_cmp);
        assert_eq!(toks, vec![0.0, 1.0]);
        let mut tied = t.clone();
        tied.trials[1].1 = tied.trials[0].1;
        let text = encode_trajectory(&prefix_augment(&tied, 2).unwrap(), Q)
            .unwrap()
            .text;
        assert!(
            text.ends_with("*0|") && text.matches("*0|").count() == 2,
            "{text}"
        );
        assert!(prefix_augment(&t, 21).is_err());
        assert!(prefix_augment(&t, 0).is_err());
    }

    #[test]
    fn prefix_scaling_uses_only_the_prefix() {
        let space =
            SearchSpace::new("x", vec![ParameterDomain::uniform("x", 0.0, 1.0).unwrap()]).unwrap();
        let c = Configuration(vec![ParamValue::Num(0.5)]);
        let ys = [10.0, 9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0];
        let t = traj(space.clone(), ys.iter().map(|&y| (c.clone(), y)).collect());
        let full = decode_trajectory(&encode_trajectory(&t, Q).unwrap().text, Q).unwrap();
        let pre = decode_trajectory(
            &encode_trajectory(&prefix_augment(&t, 5).unwrap(), Q)
                .unwrap()
                .text,
            Q,
        )
        .unwrap();
        // Over the first five values 10..6 the last one is the minimum.
        assert_eq!(pre.trials[4].objective, Some(0.0));
        assert_eq!(pre.trials[0].objective, Some(1.0));
        assert!(full.trials[4].objective.unwrap() > 0.4);
    }

    #[test]
    fn permutation_counts() {
        let space = SearchSpace::new(
            "s",
            vec![
                ParameterDomain::uniform("a", 0.0, 1.0).unwrap(),
                ParameterDomain::categorical("c", 2).unwrap(),
                ParameterDomain::uniform("b", 0.0, 1.0).unwrap(),
            ],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_traj(&space, 4, &mut rng);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..200 {
            let p = permute_augment(&t, &mut rng);
            let names: Vec<String> = p.space.params().iter().map(|q| q.name.clone()).collect();
            assert_eq!(names[2], "c");
            assert_eq!(p.objectives(), t.objectives());
            for ((pc, _), (c, _)) in p.trials.iter().zip(&t.trials) {
                for (name, v) in names.iter().zip(pc.values()) {
                    assert_eq!(*v, c.values()[space.position(name).unwrap()]);
                }
            }
            seen.insert(names);
        }
        assert_eq!(seen.len(), 2);
        let one =
            SearchSpace::new("o", vec![ParameterDomain::uniform("a", 0.0, 1.0).unwrap()]).unwrap();
        let t1 = random_traj(&one, 3, &mut rng);
        assert_eq!(permute_augment(&t1, &mut rng), t1);
    }

    #[test]
    fn corpus_file_round_trip() {
        let space = figure_space();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let recs: Vec<EncodedTrajectory> = (0..3)
            .map(|n| encode_trajectory(&random_traj(&space, n + 1, &mut rng), Q).unwrap())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.txt");
        write_corpus(&path, &recs).unwrap();
        let back = read_corpus(&path).unwrap();
        assert_eq!(
            back,
            recs.iter().map(|r| r.text.clone()).collect::<Vec<_>>()
        );
        assert_eq!(read_corpus_sources(&path).unwrap().len(), 3);
    }

    /// Mutate a trial string with bytes from the grammar alphabet.
    fn mutate(s: &str, rng: &mut ChaCha8Rng) -> String {
        const ALPHABET: &[u8] = b"0123456789,*|<>0x";
        let mut b = s.as_bytes().to_vec();
        for _ in 0..rng.random_range(1..4) {
            let i = rng.random_range(0..=b.len());
            match rng.random_range(0..3) {
                0 if i < b.len() => {
                    b.remove(i);
                }
                1 if i < b.len() => b[i] = ALPHABET[rng.random_range(0..ALPHABET.len())],
                _ => b.insert(i, ALPHABET[rng.random_range(0..ALPHABET.len())]),
            }
        }
        String::from_utf8(b).unwrap()
    }

    proptest! {
        #[test]
        fn round_trip_within_half_bin(space in arb_space(), seed in any::<u64>(), n in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_traj(&space, n, &mut rng);
            let dec = decode_trajectory(&encode_trajectory(&t, Q).unwrap().text, Q).unwrap();
            prop_assert_eq!(dec.trials.len(), n);
            for ((c, _), d) in t.trials.iter().zip(&dec.trials) {
                // Decoded spaces list parameters in canonical order.
                let u = space.to_unit(c).unwrap();
                let u: Vec<ParamValue> = space.canonical_order().into_iter().map(|i| u.0[i]).collect();
                for (a, b) in u.iter().zip(&d.unit.0) {
                    match (a, b) {
                        (ParamValue::Num(x), ParamValue::Num(y)) => prop_assert!((x - y).abs() <= 0.5 / 999.0 + 1e-12),
                        _ => prop_assert_eq!(a, b),
                    }
                }
            }
        }

        #[test]
        fn grammar_accepts_iff_decodable(space in arb_space(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = TrialGrammar::new(&space, Q);
            let t = random_traj(&space, 3, &mut rng);
            let text = encode_trajectory(&t, Q).unwrap().text;
            let (_, _, stream) = split_encoded(&text).unwrap();
            prop_assert!(g.accepts_stream(stream.as_bytes()));
            for trial in stream.split_inclusive('|') {
                prop_assert!(g.accepts_trial(trial.as_bytes()));
                for _ in 0..20 {
                    let m = mutate(trial, &mut rng);
                    prop_assert_eq!(g.accepts_trial(m.as_bytes()), decode_trial(&space, Q, &m).is_ok(), "{}", m);
                }
            }
        }

        #[test]
        fn objective_tokens_are_monotone(seed in any::<u64>(), n in 2usize..30) {
            let space = figure_space();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_traj(&space, n, &mut rng);
            let dec = decode_trajectory(&encode_trajectory(&t, Q).unwrap().text, Q).unwrap();
            for i in 0..n {
                for j in 0..n {
                    if t.trials[i].1 < t.trials[j].1 {
                        prop_assert!(dec.trials[i].objective <= dec.trials[j].objective);
                    }
                }
            }
        }

        #[test]
        fn full_prefix_is_identity(space in arb_space(), seed in any::<u64>(), n in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_traj(&space, n, &mut rng);
            prop_assert_eq!(
                encode_trajectory(&prefix_augment(&t, n).unwrap(), Q).unwrap().text,
                encode_trajectory(&t, Q).unwrap().text
            );
            let p = permute_augment(&t, &mut rng);
            let first_cat = p.space.params().iter().position(|q| q.is_categorical()).unwrap_or(p.space.dim());
            prop_assert!(p.space.params()[first_cat..].iter().all(|q| q.is_categorical()));
        }
    }
}
