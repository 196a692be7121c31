//! Comparison metrics for optimizer runs and the compute-scaling fit.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::space::{Configuration, Domain, ParamValue, SearchSpace};
use crate::stats::{mean, normal_mass, scott_bandwidth, std_dev};

/// Bins of the unit interval used for density comparison.
pub const DENSITY_BINS: usize = 50;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("average rank needs at least two methods, got {0}")]
    TooFewMethods(usize),
    #[error("method {method} covers a different task set")]
    TaskMismatch { method: String },
    #[error("step {step} beyond curve length {len}")]
    StepOutOfRange { step: usize, len: usize },
    #[error("no curves for method {method} on task {task}")]
    MissingCurve { method: String, task: String },
    #[error("power-law fit needs two distinct positive compute values")]
    DegenerateFit,
    #[error("empty sample set")]
    EmptySamples,
}

/// Running minimum.
pub fn best_so_far(ys: &[f64]) -> Vec<f64> {
    let mut best = f64::INFINITY;
    ys.iter()
        .map(|&y| {
            best = best.min(y);
            best
        })
        .collect()
}

/// Raw objective sequences grouped by (method, task), one per seed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurveSet {
    runs: BTreeMap<String, BTreeMap<String, Vec<Vec<f64>>>>,
}

impl CurveSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, method: &str, task: &str, objectives: Vec<f64>) {
        self.runs
            .entry(method.to_string())
            .or_default()
            .entry(task.to_string())
            .or_default()
            .push(objectives);
    }

    pub fn methods(&self) -> Vec<&str> {
        self.runs.keys().map(String::as_str).collect()
    }

    pub fn tasks(&self, method: &str) -> Vec<&str> {
        self.runs
            .get(method)
            .map_or_else(Vec::new, |t| t.keys().map(String::as_str).collect())
    }

    pub fn raw(&self, method: &str, task: &str) -> Option<&[Vec<f64>]> {
        self.runs.get(method)?.get(task).map(Vec::as_slice)
    }

    fn curves(&self, method: &str, task: &str) -> Result<Vec<Vec<f64>>, EvalError> {
        let raw = self
            .raw(method, task)
            .ok_or_else(|| EvalError::MissingCurve {
                method: method.into(),
                task: task.into(),
            })?;
        Ok(raw.iter().map(|r| best_so_far(r)).collect())
    }

    /// Per-step mean and standard deviation of the best-so-far curves. Steps
    /// run up to the shortest seed.
    pub fn summary(&self, method: &str, task: &str) -> Result<(Vec<f64>, Vec<f64>), EvalError> {
        let curves = self.curves(method, task)?;
        let len = curves.iter().map(Vec::len).min().unwrap_or(0);
        let mut means = Vec::with_capacity(len);
        let mut stds = Vec::with_capacity(len);
        for t in 0..len {
            let col: Vec<f64> = curves.iter().map(|c| c[t]).collect();
            means.push(mean(&col));
            stds.push(std_dev(&col));
        }
        Ok((means, stds))
    }

    /// Smallest and largest raw observation on `task` pooled over methods.
    pub fn task_extrema(&self, task: &str) -> Option<(f64, f64)> {
        let mut it = self
            .runs
            .values()
            .filter_map(|t| t.get(task))
            .flatten()
            .flatten()
            .copied()
            .peekable();
        it.peek()?;
        Some(it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| {
            (lo.min(y), hi.max(y))
        }))
    }

    /// CSV rows `method,task,step,mean,std,regret_mean` (steps 1-based).
    pub fn to_csv(&self) -> Result<String, EvalError> {
        let mut out = String::from("method,task,step,mean,std,normalized_regret\n");
        for (method, tasks) in &self.runs {
            for task in tasks.keys() {
                let (m, s) = self.summary(method, task)?;
                let (lo, hi) = self.task_extrema(task).unwrap_or((0.0, 0.0));
                let regret = normalized_regret(&m, lo, hi);
                for t in 0..m.len() {
                    writeln!(
                        out,
                        "{method},{task},{},{},{},{}",
                        t + 1,
                        m[t],
                        s[t],
                        regret[t]
                    )
                    .expect("string write");
                }
            }
        }
        Ok(out)
    }
}

/// Average ranks (1 = best) with ties sharing the mean of their ranks.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Rank of every method by mean best-so-far at `step` (0-based), averaged
/// over tasks.
pub fn average_rank(curves: &CurveSet, step: usize) -> Result<BTreeMap<String, f64>, EvalError> {
    let methods = curves.methods();
    if methods.len() < 2 {
        return Err(EvalError::TooFewMethods(methods.len()));
    }
    let tasks: BTreeSet<&str> = curves.tasks(methods[0]).into_iter().collect();
    for m in &methods[1..] {
        if curves.tasks(m).into_iter().collect::<BTreeSet<_>>() != tasks {
            return Err(EvalError::TaskMismatch {
                method: m.to_string(),
            });
        }
    }
    let mut totals = vec![0.0; methods.len()];
    for task in &tasks {
        let mut at = Vec::with_capacity(methods.len());
        for m in &methods {
            let (means, _) = curves.summary(m, task)?;
            let v = *means.get(step).ok_or(EvalError::StepOutOfRange {
                step,
                len: means.len(),
            })?;
            at.push(v);
        }
        for (t, r) in totals.iter_mut().zip(midranks(&at)) {
            *t += r;
        }
    }
    Ok(methods
        .iter()
        .zip(totals)
        .map(|(m, t)| (m.to_string(), t / tasks.len() as f64))
        .collect())
}

/// `(best_so_far - y_min) / (y_max - y_min)`, clamped to `[0, 1]`; all zeros
/// when `y_max <= y_min`.
pub fn normalized_regret(curve: &[f64], y_min: f64, y_max: f64) -> Vec<f64> {
    if y_max <= y_min {
        return vec![0.0; curve.len()];
    }
    best_so_far(curve)
        .into_iter()
        .map(|b| ((b - y_min) / (y_max - y_min)).clamp(0.0, 1.0))
        .collect()
}

/// Probability of each of `bins` equal-width bins of `[0, 1]` under a
/// Gaussian KDE of `xs`, renormalized to the unit interval.
pub fn kde_bin_masses(xs: &[f64], bins: usize) -> Vec<f64> {
    let h = scott_bandwidth(xs);
    let mut mass = vec![0.0; bins];
    for &x in xs {
        let inside = normal_mass(x, h, 0.0, 1.0);
        if inside <= 0.0 {
            continue;
        }
        for (b, m) in mass.iter_mut().enumerate() {
            let lo = b as f64 / bins as f64;
            let hi = (b + 1) as f64 / bins as f64;
            *m += normal_mass(x, h, lo, hi) / inside;
        }
    }
    let total: f64 = mass.iter().sum();
    mass.iter_mut().for_each(|m| *m /= total);
    mass
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Per-parameter total-variation distance between two sample sets, in space
/// order: KDE bin masses on unit coordinates for numerical parameters,
/// index frequencies for categorical ones.
pub fn marginal_density_compare(
    reference: &[Configuration],
    samples: &[Configuration],
    space: &SearchSpace,
) -> Result<Vec<f64>, EvalError> {
    if reference.is_empty() || samples.is_empty() {
        return Err(EvalError::EmptySamples);
    }
    let unit = |cs: &[Configuration]| -> Vec<Vec<ParamValue>> {
        cs.iter()
            .map(|c| space.to_unit(c).expect("configuration fits its space").0)
            .collect()
    };
    let (ru, su) = (unit(reference), unit(samples));
    Ok(space
        .params()
        .iter()
        .enumerate()
        .map(|(i, p)| match p.domain {
            Domain::Categorical { cardinality } => {
                let freq = |us: &[Vec<ParamValue>]| {
                    let mut f = vec![0.0; cardinality];
                    for u in us {
                        f[u[i].as_cat().expect("categorical value")] += 1.0 / us.len() as f64;
                    }
                    f
                };
                total_variation(&freq(&ru), &freq(&su))
            }
            _ => {
                let col = |us: &[Vec<ParamValue>]| -> Vec<f64> {
                    us.iter()
                        .map(|u| u[i].as_num().expect("numeric value"))
                        .collect()
                };
                total_variation(
                    &kde_bin_masses(&col(&ru), DENSITY_BINS),
                    &kde_bin_masses(&col(&su), DENSITY_BINS),
                )
            }
        })
        .collect())
}

/// One training measurement: parameters, tokens seen, validation loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub n_params: f64,
    pub tokens: f64,
    pub loss: f64,
}

impl ScalingPoint {
    pub fn compute(&self) -> f64 {
        6.0 * self.n_params * self.tokens
    }

    /// Whether `self` dominates `other`: no more compute, no higher loss,
    /// and strictly better in one of the two.
    pub fn dominates(&self, other: &ScalingPoint) -> bool {
        let (c1, c2) = (self.compute(), other.compute());
        c1 <= c2 && self.loss <= other.loss && (c1 < c2 || self.loss < other.loss)
    }
}

/// Non-dominated points sorted by compute, ignoring points below
/// `min_compute`.
pub fn pareto_points(points: &[ScalingPoint], min_compute: Option<f64>) -> Vec<ScalingPoint> {
    let mut pts: Vec<ScalingPoint> = points
        .iter()
        .copied()
        .filter(|p| min_compute.is_none_or(|m| p.compute() >= m))
        .collect();
    pts.sort_by(|a, b| {
        a.compute()
            .total_cmp(&b.compute())
            .then(a.loss.total_cmp(&b.loss))
    });
    let mut front: Vec<ScalingPoint> = Vec::new();
    let mut best = f64::INFINITY;
    for p in pts {
        if p.loss < best {
            front.push(p);
            best = p.loss;
        } else if p.loss == best && front.last().is_some_and(|l| l.compute() == p.compute()) {
            front.push(p);
        }
    }
    front
}

/// `L = a * C^(-b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLaw {
    pub a: f64,
    pub b: f64,
}

impl PowerLaw {
    pub fn predict(&self, compute: f64) -> f64 {
        self.a * compute.powf(-self.b)
    }
}

/// Least squares on `ln L = ln a - b ln C`.
pub fn fit_power_law(points: &[ScalingPoint]) -> Result<PowerLaw, EvalError> {
    let xy: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.compute() > 0.0 && p.loss > 0.0)
        .map(|p| (p.compute().ln(), p.loss.ln()))
        .collect();
    if xy.len() < 2 {
        return Err(EvalError::DegenerateFit);
    }
    let n = xy.len() as f64;
    let mx = xy.iter().map(|p| p.0).sum::<f64>() / n;
    let my = xy.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = xy.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx <= 1e-300 {
        return Err(EvalError::DegenerateFit);
    }
    let sxy: f64 = xy.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Ok(PowerLaw {
        a: (my - slope * mx).exp(),
        b: -slope,
    })
}
