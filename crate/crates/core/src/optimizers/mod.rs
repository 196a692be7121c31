//! Reference optimizers behind one ask/tell interface.
//!
//! * `RS` samples uniformly from the search space.
//! * `REA` is regularized (aging) evolution with tournament selection.
//! * `TPE` maximizes the ratio of "good" to "bad" Parzen densities.
//! * `BORE` ranks candidates by a class-probability estimate of being good.
//! * `CQR` Thompson-samples conformally calibrated quantile predictions.
//!
//! Model-based optimizers work in unit coordinates (see
//! [`SearchSpace::to_unit`]) and fall back to uniform sampling until they
//! have `n_init` observations.

mod bore;
mod cqr;
mod rea;
mod tpe;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::space::{Configuration, SearchSpace, SpaceError, UnitPoint};

pub use bore::{bore_labels, suggest_bore, BoreSettings};
pub use cqr::{conformal_offsets, suggest_cqr, CqrSettings};
pub use rea::{Population, ReaSettings};
pub use tpe::{suggest_tpe, tpe_threshold, TpeSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OptimizerKind {
    #[serde(rename = "RS")]
    Rs,
    #[serde(rename = "REA")]
    Rea,
    #[serde(rename = "TPE")]
    Tpe,
    #[serde(rename = "BORE")]
    Bore,
    #[serde(rename = "CQR")]
    Cqr,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 5] = [
        OptimizerKind::Rs,
        OptimizerKind::Rea,
        OptimizerKind::Tpe,
        OptimizerKind::Bore,
        OptimizerKind::Cqr,
    ];

    /// Wire name, also used in the `<algorithm>:` line of encodings.
    pub fn as_str(&self) -> &'static str {
        match self {
            OptimizerKind::Rs => "RS",
            OptimizerKind::Rea => "REA",
            OptimizerKind::Tpe => "TPE",
            OptimizerKind::Bore => "BORE",
            OptimizerKind::Cqr => "CQR",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown optimizer `{0}` (expected one of RS, REA, TPE, BORE, CQR)")]
pub struct UnknownOptimizer(pub String);

impl FromStr for OptimizerKind {
    type Err = UnknownOptimizer;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OptimizerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| UnknownOptimizer(s.to_string()))
    }
}

/// Per-kind tunables. Defaults are the documented reference values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSettings {
    pub rea: ReaSettings,
    pub tpe: TpeSettings,
    pub bore: BoreSettings,
    pub cqr: CqrSettings,
}

/// Observations in unit coordinates, as seen by the model-based optimizers.
pub struct UnitHistory<'a> {
    pub points: &'a [UnitPoint],
    pub ys: &'a [f64],
}

enum Strategy {
    Random,
    Rea(Population),
    Tpe(TpeSettings),
    Bore(BoreSettings),
    Cqr(CqrSettings),
}

/// One optimizer run: its kind, space, append-only history and random
/// source. Suggestions are a pure function of (seed, history).
pub struct OptimizerState {
    kind: OptimizerKind,
    space: SearchSpace,
    history: Vec<(Configuration, f64)>,
    unit_history: Vec<UnitPoint>,
    ys: Vec<f64>,
    rng: ChaCha8Rng,
    strategy: Strategy,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, space: SearchSpace, seed: u64) -> Self {
        Self::with_settings(kind, space, seed, &OptimizerSettings::default())
    }

    pub fn with_settings(
        kind: OptimizerKind,
        space: SearchSpace,
        seed: u64,
        settings: &OptimizerSettings,
    ) -> Self {
        let strategy = match kind {
            OptimizerKind::Rs => Strategy::Random,
            OptimizerKind::Rea => Strategy::Rea(Population::new(settings.rea.clone())),
            OptimizerKind::Tpe => Strategy::Tpe(settings.tpe.clone()),
            OptimizerKind::Bore => Strategy::Bore(settings.bore.clone()),
            OptimizerKind::Cqr => Strategy::Cqr(settings.cqr.clone()),
        };
        Self {
            kind,
            space,
            history: Vec::new(),
            unit_history: Vec::new(),
            ys: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            strategy,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn history(&self) -> &[(Configuration, f64)] {
        &self.history
    }

    /// REA population, oldest first. `None` for other kinds.
    pub fn population(&self) -> Option<&Population> {
        match &self.strategy {
            Strategy::Rea(p) => Some(p),
            _ => None,
        }
    }

    /// Ask: propose the next configuration to evaluate.
    pub fn suggest(&mut self) -> Configuration {
        let unit = {
            let hist = UnitHistory {
                points: &self.unit_history,
                ys: &self.ys,
            };
            match &self.strategy {
                Strategy::Random => return self.space.sample_uniform(&mut self.rng),
                Strategy::Rea(pop) => match pop.propose(&self.space, &mut self.rng) {
                    Some(c) => return c,
                    None => return self.space.sample_uniform(&mut self.rng),
                },
                Strategy::Tpe(s) => suggest_tpe(&self.space, &hist, s, &mut self.rng),
                Strategy::Bore(s) => suggest_bore(&self.space, &hist, s, &mut self.rng),
                Strategy::Cqr(s) => suggest_cqr(&self.space, &hist, s, &mut self.rng),
            }
        };
        self.space
            .from_unit(&unit)
            .expect("optimizers propose points inside the unit cube")
    }

    /// Tell: record the objective observed at `config`.
    pub fn observe(&mut self, config: Configuration, y: f64) -> Result<(), SpaceError> {
        let unit = self.space.to_unit(&config)?;
        if let Strategy::Rea(pop) = &mut self.strategy {
            pop.push(config.clone(), y);
        }
        self.unit_history.push(unit);
        self.ys.push(y);
        self.history.push((config, y));
        Ok(())
    }
}

/// A uniformly random point of the unit cube (indices for categoricals).
pub(crate) fn random_unit_point<R: Rng + ?Sized>(space: &SearchSpace, rng: &mut R) -> UnitPoint {
    space
        .to_unit(&space.sample_uniform(rng))
        .expect("uniform samples are valid")
}

/// Position of the first maximum (ties go to the lowest index).
pub(crate) fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Indices sorted by (objective, insertion order).
pub(crate) fn rank_order(ys: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ys.len()).collect();
    order.sort_by(|&a, &b| ys[a].total_cmp(&ys[b]).then(a.cmp(&b)));
    order
}
