use std::collections::VecDeque;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::space::{Configuration, Domain, SearchSpace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReaSettings {
    /// Population capacity `P`.
    pub population_size: usize,
    /// Tournament size `S`.
    pub sample_size: usize,
}

impl Default for ReaSettings {
    fn default() -> Self {
        Self {
            population_size: 10,
            sample_size: 3,
        }
    }
}

/// Aging population: members leave in insertion order once the capacity is
/// exceeded, regardless of fitness.
#[derive(Debug, Clone)]
pub struct Population {
    settings: ReaSettings,
    members: VecDeque<(Configuration, f64)>,
}

impl Population {
    pub fn new(settings: ReaSettings) -> Self {
        Self {
            members: VecDeque::with_capacity(settings.population_size + 1),
            settings,
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Members, oldest first.
    pub fn members(&self) -> impl Iterator<Item = &(Configuration, f64)> {
        self.members.iter()
    }

    pub fn push(&mut self, config: Configuration, y: f64) {
        self.members.push_back((config, y));
        while self.members.len() > self.settings.population_size {
            self.members.pop_front();
        }
    }

    /// Tournament winner among `S` members drawn without replacement.
    pub fn tournament<R: Rng + ?Sized>(&self, rng: &mut R) -> &(Configuration, f64) {
        let s = self.settings.sample_size.clamp(1, self.members.len());
        let mut picked = sample(rng, self.members.len(), s).into_vec();
        picked.sort_unstable();
        let best = picked
            .into_iter()
            .min_by(|&a, &b| {
                self.members[a]
                    .1
                    .total_cmp(&self.members[b].1)
                    .then(a.cmp(&b))
            })
            .expect("non-empty tournament");
        &self.members[best]
    }

    /// Mutated tournament winner; `None` before the first observation.
    pub fn propose<R: Rng + ?Sized>(
        &self,
        space: &SearchSpace,
        rng: &mut R,
    ) -> Option<Configuration> {
        if self.members.is_empty() {
            return None;
        }
        let parent = self.tournament(rng).0.clone();
        Some(mutate(space, &parent, rng))
    }
}

/// Resample exactly one uniformly chosen parameter. The new value differs
/// from the old one whenever the domain has more than one value.
pub(crate) fn mutate<R: Rng + ?Sized>(
    space: &SearchSpace,
    parent: &Configuration,
    rng: &mut R,
) -> Configuration {
    let mut child = parent.clone();
    let d = rng.random_range(0..space.dim());
    let domain = space.params()[d].domain;
    let current = parent.values()[d];
    let can_change = match domain {
        Domain::Integer { lo, hi } => hi > lo,
        Domain::Categorical { cardinality } => cardinality > 1,
        _ => true,
    };
    let mut fresh = domain.value_from_uniform_draw(rng.random());
    if can_change {
        while fresh == current {
            fresh = domain.value_from_uniform_draw(rng.random());
        }
    }
    child.0[d] = fresh;
    child
}
