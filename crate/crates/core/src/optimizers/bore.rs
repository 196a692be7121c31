use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{argmax_first, random_unit_point, rank_order, UnitHistory};
use crate::bench::{nearest, unit_distance_sq};
use crate::space::{SearchSpace, UnitPoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoreSettings {
    /// Fraction of the history labelled as the positive ("good") class.
    pub gamma: f64,
    pub n_init: usize,
    pub pool_size: usize,
    /// Neighbors consulted by the class-probability estimate.
    pub k: usize,
}

impl Default for BoreSettings {
    fn default() -> Self {
        Self {
            gamma: 0.25,
            n_init: 4,
            pool_size: 64,
            k: 5,
        }
    }
}

/// Label the best `round(gamma * n)` observations 1 and the rest 0.
pub fn bore_labels(ys: &[f64], gamma: f64) -> Vec<bool> {
    let n_good = (gamma * ys.len() as f64).round() as usize;
    let mut labels = vec![false; ys.len()];
    for &i in rank_order(ys).iter().take(n_good) {
        labels[i] = true;
    }
    labels
}

/// Inverse-distance weighted k-NN estimate of `P(good | x)`.
fn class_probability(points: &[UnitPoint], labels: &[bool], x: &UnitPoint, k: usize) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in nearest(points, x, k) {
        let w = 1.0 / (unit_distance_sq(&points[i], x).sqrt() + 1e-9);
        den += w;
        if labels[i] {
            num += w;
        }
    }
    num / den
}

/// Score a uniform candidate pool with the classifier and return the most
/// probably-good candidate.
pub fn suggest_bore<R: Rng + ?Sized>(
    space: &SearchSpace,
    history: &UnitHistory<'_>,
    settings: &BoreSettings,
    rng: &mut R,
) -> UnitPoint {
    let n = history.ys.len();
    if n < settings.n_init.max(1) {
        return random_unit_point(space, rng);
    }
    let labels = bore_labels(history.ys, settings.gamma);
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == n {
        return random_unit_point(space, rng);
    }
    let pool: Vec<UnitPoint> = (0..settings.pool_size.max(1))
        .map(|_| random_unit_point(space, rng))
        .collect();
    let scores: Vec<f64> = pool
        .iter()
        .map(|x| class_probability(history.points, &labels, x, settings.k.max(1)))
        .collect();
    pool.into_iter()
        .nth(argmax_first(&scores))
        .expect("non-empty pool")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{ParamValue, ParameterDomain};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_1d() -> SearchSpace {
        SearchSpace::new("u", vec![ParameterDomain::uniform("x", 0.0, 1.0).unwrap()]).unwrap()
    }

    fn pts(xs: &[f64]) -> Vec<UnitPoint> {
        xs.iter()
            .map(|&x| UnitPoint(vec![ParamValue::Num(x)]))
            .collect()
    }

    #[test]
    fn labels_follow_rank() {
        assert_eq!(
            bore_labels(&[4.0, 1.0, 3.0, 2.0], 0.5),
            vec![false, true, false, true]
        );
        assert_eq!(bore_labels(&[1.0], 0.25), vec![false]);
    }

    #[test]
    fn separated_clusters_pull_towards_good() {
        let space = unit_1d();
        let mut xs = vec![0.08, 0.1, 0.12, 0.11];
        let mut ys = vec![0.0, 0.1, 0.05, 0.02];
        for i in 0..12 {
            xs.push(0.85 + 0.01 * i as f64);
            ys.push(10.0 + i as f64);
        }
        let points = pts(&xs);
        let hist = UnitHistory {
            points: &points,
            ys: &ys,
        };
        let settings = BoreSettings {
            pool_size: 256,
            ..BoreSettings::default()
        };
        let hits = (0..1000)
            .filter(|&seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = suggest_bore(&space, &hist, &settings, &mut rng).0[0]
                    .as_num()
                    .unwrap();
                (x - 0.1).abs() < 0.2
            })
            .count();
        assert!(hits >= 950, "{hits}");
    }

    #[test]
    fn identical_labels_fall_back_to_uniform() {
        let space = unit_1d();
        let points = pts(&[0.1, 0.5]);
        let ys = [1.0, 2.0];
        let hist = UnitHistory {
            points: &points,
            ys: &ys,
        };
        // round(0.2 * 2) = 0 positives.
        let settings = BoreSettings {
            gamma: 0.2,
            n_init: 1,
            ..BoreSettings::default()
        };
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(
            suggest_bore(&space, &hist, &settings, &mut a),
            random_unit_point(&space, &mut b)
        );
    }

    #[test]
    fn pool_of_one_returns_it() {
        let space = unit_1d();
        let points = pts(&[0.1, 0.5, 0.6, 0.9]);
        let ys = [0.0, 1.0, 2.0, 3.0];
        let hist = UnitHistory {
            points: &points,
            ys: &ys,
        };
        let settings = BoreSettings {
            pool_size: 1,
            ..BoreSettings::default()
        };
        let mut a = ChaCha8Rng::seed_from_u64(6);
        let mut b = ChaCha8Rng::seed_from_u64(6);
        assert_eq!(
            suggest_bore(&space, &hist, &settings, &mut a),
            random_unit_point(&space, &mut b)
        );
    }
}
