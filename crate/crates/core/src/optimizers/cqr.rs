use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{random_unit_point, UnitHistory};
use crate::bench::nearest;
use crate::space::{SearchSpace, UnitPoint};
use crate::stats::quantile_sorted;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CqrSettings {
    pub levels: Vec<f64>,
    pub n_init: usize,
    pub pool_size: usize,
    /// Neighbors behind each quantile prediction.
    pub k: usize,
}

impl Default for CqrSettings {
    fn default() -> Self {
        Self {
            levels: (1..=9).map(|i| i as f64 / 10.0).collect(),
            n_init: 4,
            pool_size: 64,
            k: 7,
        }
    }
}

/// Empirical k-NN quantile regressor.
struct KnnQuantiles<'a> {
    points: Vec<&'a UnitPoint>,
    ys: Vec<f64>,
    k: usize,
}

impl KnnQuantiles<'_> {
    fn predict(&self, x: &UnitPoint, levels: &[f64]) -> Vec<f64> {
        let mut neigh: Vec<f64> = nearest_refs(&self.points, x, self.k)
            .into_iter()
            .map(|i| self.ys[i])
            .collect();
        neigh.sort_by(f64::total_cmp);
        levels.iter().map(|&q| quantile_sorted(&neigh, q)).collect()
    }
}

fn nearest_refs(points: &[&UnitPoint], x: &UnitPoint, k: usize) -> Vec<usize> {
    // `nearest` takes owned points; the fit set is small so cloning is cheap.
    let owned: Vec<UnitPoint> = points.iter().map(|p| (*p).clone()).collect();
    nearest(&owned, x, k)
}

/// Split-conformal offsets: for each level `q_j`, the conformal `q_j`
/// quantile of calibration residuals `y - q̂_j(x)`.
pub fn conformal_offsets(residuals_per_level: &[Vec<f64>], levels: &[f64]) -> Vec<f64> {
    residuals_per_level
        .iter()
        .zip(levels)
        .map(|(res, &q)| {
            if res.is_empty() {
                return 0.0;
            }
            let mut sorted = res.clone();
            sorted.sort_by(f64::total_cmp);
            let n = sorted.len();
            let rank = ((q * (n + 1) as f64).ceil() as usize).clamp(1, n) - 1;
            sorted[rank]
        })
        .collect()
}

/// Fit quantile predictors on half of the history, calibrate on the other
/// half, then pick the pool candidate whose randomly chosen calibrated
/// quantile is lowest.
pub fn suggest_cqr<R: Rng + ?Sized>(
    space: &SearchSpace,
    history: &UnitHistory<'_>,
    settings: &CqrSettings,
    rng: &mut R,
) -> UnitPoint {
    let n = history.ys.len();
    if n < settings.n_init.max(2) || settings.levels.is_empty() {
        return random_unit_point(space, rng);
    }
    // Even positions fit, odd positions calibrate.
    let model = KnnQuantiles {
        points: history.points.iter().step_by(2).collect(),
        ys: history.ys.iter().step_by(2).copied().collect(),
        k: settings.k.max(1),
    };
    let levels = &settings.levels;
    let mut residuals = vec![Vec::new(); levels.len()];
    for i in (1..n).step_by(2) {
        let pred = model.predict(&history.points[i], levels);
        for (j, p) in pred.into_iter().enumerate() {
            residuals[j].push(history.ys[i] - p);
        }
    }
    let offsets = conformal_offsets(&residuals, levels);

    let pool: Vec<UnitPoint> = (0..settings.pool_size.max(1))
        .map(|_| random_unit_point(space, rng))
        .collect();
    let mut best = (f64::INFINITY, 0);
    for (c, x) in pool.iter().enumerate() {
        let j = rng.random_range(0..levels.len());
        let q = model.predict(x, levels)[j] + offsets[j];
        if q < best.0 {
            best = (q, c);
        }
    }
    pool.into_iter().nth(best.1).expect("non-empty pool")
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

    #[test]
    fn zero_residuals_give_zero_offsets() {
        let levels = CqrSettings::default().levels;
        let res = vec![vec![0.0; 6]; levels.len()];
        assert!(conformal_offsets(&res, &levels).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn offsets_use_conformal_rank() {
        let res = vec![vec![0.4, 0.1, 0.3, 0.2]];
        // ceil(0.5 * 5) = 3 -> third smallest.
        assert_eq!(conformal_offsets(&res, &[0.5]), vec![0.3]);
        assert_eq!(conformal_offsets(&res, &[0.9]), vec![0.4]);
    }

    #[test]
    fn constant_history_picks_first_pool_member() {
        let space = unit_1d();
        let points: Vec<UnitPoint> = (0..10)
            .map(|i| UnitPoint(vec![ParamValue::Num(i as f64 / 10.0)]))
            .collect();
        let ys = [2.0; 10];
        let hist = UnitHistory {
            points: &points,
            ys: &ys,
        };
        let mut a = ChaCha8Rng::seed_from_u64(12);
        let mut b = ChaCha8Rng::seed_from_u64(12);
        let got = suggest_cqr(&space, &hist, &CqrSettings::default(), &mut b);
        assert_eq!(got, random_unit_point(&space, &mut a));
    }

    #[test]
    fn concentrates_near_the_minimum_of_identity() {
        let space = unit_1d();
        let mut total = 0.0;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let xs: Vec<f64> = (0..40).map(|_| rng.random()).collect();
            let points: Vec<UnitPoint> = xs
                .iter()
                .map(|&x| UnitPoint(vec![ParamValue::Num(x)]))
                .collect();
            let hist = UnitHistory {
                points: &points,
                ys: &xs,
            };
            total += suggest_cqr(&space, &hist, &CqrSettings::default(), &mut rng).0[0]
                .as_num()
                .unwrap();
        }
        let mean = total / 100.0;
        assert!(mean < 0.3, "mean selected x = {mean}");
    }
}
