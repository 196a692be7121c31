//! Objective functions: analytic global-optimization functions, k-nearest
//! neighbor surrogates over offline evaluation tables, and masked tasks
//! derived from those tables.
//!
//! Every objective is minimized. Tables holding maximization metrics must be
//! negated before ingestion.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::space::{
    Configuration, ParamValue, ParameterDomain, SearchSpace, SpaceError, UnitPoint,
};

/// Neighbor count used when a surrogate is built without an explicit `k`.
pub const DEFAULT_K: usize = 3;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("unknown synthetic function `{0}`")]
    UnknownFunction(String),
    #[error("`{name}` expects {expected} dimensions, got {got}")]
    DimensionMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("offline table has no rows")]
    EmptyTable,
    #[error("all {0} rows of the offline table have the same objective")]
    ConstantObjective(usize),
    #[error("row {row}: {reason}")]
    InvalidRow { row: usize, reason: String },
    #[error("neighbor count k={k} must be in 1..={rows}")]
    InvalidK { k: usize, rows: usize },
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A deterministic map from configurations to objective values.
pub trait Objective: Send + Sync {
    fn evaluate(&self, config: &Configuration) -> Result<f64, BenchError>;
}

/// An objective together with the space it is defined on.
#[derive(Clone)]
pub struct BenchmarkTask {
    pub id: String,
    pub space: SearchSpace,
    pub family: String,
    oracle: Arc<dyn Objective>,
}

impl std::fmt::Debug for BenchmarkTask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BenchmarkTask")
            .field("id", &self.id)
            .field("space", &self.space.id)
            .field("family", &self.family)
            .finish()
    }
}

impl BenchmarkTask {
    pub fn new(
        id: impl Into<String>,
        space: SearchSpace,
        family: impl Into<String>,
        oracle: Arc<dyn Objective>,
    ) -> Self {
        Self {
            id: id.into(),
            space,
            family: family.into(),
            oracle,
        }
    }

    /// Evaluate after checking that `config` belongs to the task's space.
    pub fn evaluate(&self, config: &Configuration) -> Result<f64, BenchError> {
        self.space.validate(config)?;
        self.oracle.evaluate(config)
    }

    /// One of the registered analytic functions, on its standard domain.
    pub fn synthetic(name: &str) -> Result<Self, BenchError> {
        let f = find_function(name)?;
        Ok(Self::new(
            name,
            f.space(),
            "global-optimization",
            Arc::new(*f),
        ))
    }

    pub fn surrogate(id: impl Into<String>, surrogate: Arc<SurrogateBenchmark>) -> Self {
        let space = surrogate.table.space.clone();
        Self::new(id, space, "surrogate", surrogate)
    }
}

// ---------------------------------------------------------------------------
// Synthetic functions

#[derive(Clone, Copy)]
pub struct SyntheticFunction {
    pub name: &'static str,
    pub bounds: &'static [(f64, f64)],
    pub f: fn(&[f64]) -> f64,
}

impl SyntheticFunction {
    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn space(&self) -> SearchSpace {
        let params = self
            .bounds
            .iter()
            .enumerate()
            .map(|(i, &(lo, hi))| {
                ParameterDomain::uniform(format!("x{i}"), lo, hi).expect("registry bounds")
            })
            .collect();
        SearchSpace::new(self.name, params).expect("registry space")
    }
}

impl Objective for SyntheticFunction {
    fn evaluate(&self, config: &Configuration) -> Result<f64, BenchError> {
        evaluate_with(self, config)
    }
}

fn branin(x: &[f64]) -> f64 {
    let (x1, x2) = (x[0], x[1]);
    let b = 5.1 / (4.0 * PI * PI);
    let c = 5.0 / PI;
    let t = 1.0 / (8.0 * PI);
    (x2 - b * x1 * x1 + c * x1 - 6.0).powi(2) + 10.0 * (1.0 - t) * x1.cos() + 10.0
}

fn eggholder(x: &[f64]) -> f64 {
    let (x1, x2) = (x[0], x[1]);
    -(x2 + 47.0) * (x2 + x1 / 2.0 + 47.0).abs().sqrt().sin()
        - x1 * (x1 - (x2 + 47.0)).abs().sqrt().sin()
}

fn forrester(x: &[f64]) -> f64 {
    let x = x[0];
    (6.0 * x - 2.0).powi(2) * (12.0 * x - 4.0).sin()
}

fn goldstein_price(x: &[f64]) -> f64 {
    let (x1, x2) = (x[0], x[1]);
    let a = 1.0
        + (x1 + x2 + 1.0).powi(2)
            * (19.0 - 14.0 * x1 + 3.0 * x1 * x1 - 14.0 * x2 + 6.0 * x1 * x2 + 3.0 * x2 * x2);
    let b = 30.0
        + (2.0 * x1 - 3.0 * x2).powi(2)
            * (18.0 - 32.0 * x1 + 12.0 * x1 * x1 + 48.0 * x2 - 36.0 * x1 * x2 + 27.0 * x2 * x2);
    a * b
}

fn six_hump_camel(x: &[f64]) -> f64 {
    let (x1, x2) = (x[0], x[1]);
    (4.0 - 2.1 * x1 * x1 + x1.powi(4) / 3.0) * x1 * x1 + x1 * x2 + (-4.0 + 4.0 * x2 * x2) * x2 * x2
}

fn rosenbrock(x: &[f64]) -> f64 {
    x.windows(2)
        .map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2))
        .sum()
}

fn ackley(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let sq = x.iter().map(|v| v * v).sum::<f64>() / n;
    let cs = x.iter().map(|v| (2.0 * PI * v).cos()).sum::<f64>() / n;
    -20.0 * (-0.2 * sq.sqrt()).exp() - cs.exp() + 20.0 + std::f64::consts::E
}

const HARTMANN3_A: [[f64; 3]; 4] = [
    [3.0, 10.0, 30.0],
    [0.1, 10.0, 35.0],
    [3.0, 10.0, 30.0],
    [0.1, 10.0, 35.0],
];
const HARTMANN3_P: [[f64; 3]; 4] = [
    [0.3689, 0.1170, 0.2673],
    [0.4699, 0.4387, 0.7470],
    [0.1091, 0.8732, 0.5547],
    [0.0381, 0.5743, 0.8828],
];
const HARTMANN3_ALPHA: [f64; 4] = [1.0, 1.2, 3.0, 3.2];

fn hartmann3(x: &[f64]) -> f64 {
    -(0..4)
        .map(|i| {
            let inner: f64 = (0..3)
                .map(|j| HARTMANN3_A[i][j] * (x[j] - HARTMANN3_P[i][j]).powi(2))
                .sum();
            HARTMANN3_ALPHA[i] * (-inner).exp()
        })
        .sum::<f64>()
}

/// The analytic functions known by name. New entries only need a name,
/// standard bounds and an evaluation function.
pub static SYNTHETIC_FUNCTIONS: &[SyntheticFunction] = &[
    SyntheticFunction {
        name: "branin",
        bounds: &[(-5.0, 10.0), (0.0, 15.0)],
        f: branin,
    },
    SyntheticFunction {
        name: "eggholder",
        bounds: &[(-512.0, 512.0), (-512.0, 512.0)],
        f: eggholder,
    },
    SyntheticFunction {
        name: "forrester",
        bounds: &[(0.0, 1.0)],
        f: forrester,
    },
    SyntheticFunction {
        name: "goldstein_price",
        bounds: &[(-2.0, 2.0), (-2.0, 2.0)],
        f: goldstein_price,
    },
    SyntheticFunction {
        name: "six_hump_camel",
        bounds: &[(-3.0, 3.0), (-2.0, 2.0)],
        f: six_hump_camel,
    },
    SyntheticFunction {
        name: "rosenbrock",
        bounds: &[(-5.0, 10.0), (-5.0, 10.0)],
        f: rosenbrock,
    },
    SyntheticFunction {
        name: "ackley",
        bounds: &[(-32.768, 32.768), (-32.768, 32.768)],
        f: ackley,
    },
    SyntheticFunction {
        name: "hartmann3",
        bounds: &[(0.0, 1.0), (0.0, 1.0), (0.0, 1.0)],
        f: hartmann3,
    },
];

pub fn find_function(name: &str) -> Result<&'static SyntheticFunction, BenchError> {
    SYNTHETIC_FUNCTIONS
        .iter()
        .find(|f| f.name == name)
        .ok_or_else(|| BenchError::UnknownFunction(name.to_string()))
}

fn evaluate_with(f: &SyntheticFunction, config: &Configuration) -> Result<f64, BenchError> {
    if config.len() != f.dim() {
        return Err(BenchError::DimensionMismatch {
            name: f.name.to_string(),
            expected: f.dim(),
            got: config.len(),
        });
    }
    let x = config
        .values()
        .iter()
        .map(|v| {
            v.as_num()
                .ok_or(BenchError::Space(SpaceError::KindMismatch {
                    name: f.name.to_string(),
                    expected: "numerical",
                }))
        })
        .collect::<Result<Vec<f64>, _>>()?;
    Ok((f.f)(&x))
}

/// Evaluate a registered analytic function by name.
pub fn evaluate_synthetic(name: &str, config: &Configuration) -> Result<f64, BenchError> {
    evaluate_with(find_function(name)?, config)
}

// ---------------------------------------------------------------------------
// Offline tables and kNN surrogates

#[derive(Debug, Clone)]
pub struct OfflineTable {
    pub space: SearchSpace,
    pub rows: Vec<(Configuration, f64)>,
}

impl OfflineTable {
    pub fn new(space: SearchSpace, rows: Vec<(Configuration, f64)>) -> Result<Self, BenchError> {
        if rows.is_empty() {
            return Err(BenchError::EmptyTable);
        }
        for (i, (config, y)) in rows.iter().enumerate() {
            space.validate(config).map_err(|e| BenchError::InvalidRow {
                row: i,
                reason: e.to_string(),
            })?;
            if !y.is_finite() {
                return Err(BenchError::InvalidRow {
                    row: i,
                    reason: format!("objective {y} is not finite"),
                });
            }
        }
        let first = rows[0].1;
        if rows.iter().all(|(_, y)| *y == first) {
            return Err(BenchError::ConstantObjective(rows.len()));
        }
        Ok(Self { space, rows })
    }

    /// Tabulate an analytic function at `n` uniformly sampled points.
    pub fn from_function(name: &str, n: usize, seed: u64) -> Result<Self, BenchError> {
        let f = find_function(name)?;
        let space = f.space();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..n)
            .map(|_| {
                let c = space.sample_uniform(&mut rng);
                let y = (f.f)(
                    &c.values()
                        .iter()
                        .map(|v| v.as_num().unwrap())
                        .collect::<Vec<_>>(),
                );
                (c, y)
            })
            .collect();
        Self::new(space, rows)
    }

    pub fn mean_objective(&self) -> f64 {
        self.rows.iter().map(|(_, y)| y).sum::<f64>() / self.rows.len() as f64
    }

    /// Write the JSON Lines format read by [`load_offline_table`].
    pub fn write_jsonl(&self, path: &Path) -> Result<(), BenchError> {
        let mut out = std::io::BufWriter::new(File::create(path)?);
        writeln!(
            out,
            "{}",
            serde_json::to_string(&self.space).expect("space serializes")
        )?;
        for (config, y) in &self.rows {
            let row =
                serde_json::json!({"config": self.space.config_to_json(config), "objective": y});
            writeln!(out, "{row}")?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Deserialize)]
struct TableRow {
    config: serde_json::Map<String, serde_json::Value>,
    objective: f64,
}

/// Read an offline table: a header line holding the search space JSON,
/// then one `{"config": {...}, "objective": y}` object per line.
pub fn load_offline_table(path: &Path) -> Result<OfflineTable, BenchError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let (_, header) = lines.next().ok_or(BenchError::EmptyTable)?;
    let space: SearchSpace =
        serde_json::from_str(&header?).map_err(|source| BenchError::Parse { line: 1, source })?;
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: TableRow = serde_json::from_str(&line).map_err(|source| BenchError::Parse {
            line: i + 1,
            source,
        })?;
        let config = space
            .config_from_json(&row.config)
            .map_err(|e| BenchError::InvalidRow {
                row: rows.len(),
                reason: e.to_string(),
            })?;
        rows.push((config, row.objective));
    }
    OfflineTable::new(space, rows)
}

/// Squared distance in unit coordinates; categorical parameters contribute 0
/// when equal and 1 otherwise.
pub(crate) fn unit_distance_sq(a: &UnitPoint, b: &UnitPoint) -> f64 {
    a.0.iter()
        .zip(&b.0)
        .map(|(x, y)| match (x, y) {
            (ParamValue::Num(u), ParamValue::Num(v)) => (u - v) * (u - v),
            (ParamValue::Cat(i), ParamValue::Cat(j)) => f64::from(u8::from(i != j)),
            _ => 1.0,
        })
        .sum()
}

/// Indices of the `k` points nearest to `query`, ordered by (distance, index).
pub(crate) fn nearest(points: &[UnitPoint], query: &UnitPoint, k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (unit_distance_sq(p, query), i))
        .collect();
    let k = k.min(d.len());
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < d.len() {
        d.select_nth_unstable_by(k, cmp);
        d.truncate(k);
    }
    d.sort_by(cmp);
    d.into_iter().map(|(_, i)| i).collect()
}

/// k-nearest-neighbor regressor over an offline table.
#[derive(Debug)]
pub struct SurrogateBenchmark {
    pub table: OfflineTable,
    pub k: usize,
    unit_rows: Vec<UnitPoint>,
}

impl SurrogateBenchmark {
    pub fn new(table: OfflineTable, k: usize) -> Result<Self, BenchError> {
        if k == 0 || k > table.rows.len() {
            return Err(BenchError::InvalidK {
                k,
                rows: table.rows.len(),
            });
        }
        let unit_rows = table
            .rows
            .iter()
            .map(|(c, _)| table.space.to_unit(c))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            table,
            k,
            unit_rows,
        })
    }

    /// Mean objective of the `k` nearest rows (ties at equal distance go to
    /// the lower row index).
    pub fn predict(&self, config: &Configuration) -> Result<f64, BenchError> {
        let q = self.table.space.to_unit(config)?;
        let idx = nearest(&self.unit_rows, &q, self.k);
        Ok(idx.iter().map(|&i| self.table.rows[i].1).sum::<f64>() / idx.len() as f64)
    }
}

impl Objective for SurrogateBenchmark {
    fn evaluate(&self, config: &Configuration) -> Result<f64, BenchError> {
        self.predict(config)
    }
}

pub fn knn_predict(
    surrogate: &SurrogateBenchmark,
    config: &Configuration,
) -> Result<f64, BenchError> {
    surrogate.predict(config)
}

/// The observed value of `param` whose rows have the lowest mean objective.
/// Ties go to the smallest value (or lowest category index).
pub fn marginal_best(table: &OfflineTable, param: &str) -> Result<ParamValue, BenchError> {
    let pos = table
        .space
        .position(param)
        .ok_or_else(|| SpaceError::UnknownParameter(param.to_string()))?;
    // Keyed by a total order over values so iteration visits smaller values first.
    let mut groups: BTreeMap<ValueKey, (f64, usize)> = BTreeMap::new();
    for (config, y) in &table.rows {
        let entry = groups
            .entry(ValueKey(config.values()[pos]))
            .or_insert((0.0, 0));
        entry.0 += y;
        entry.1 += 1;
    }
    let mut best: Option<(ParamValue, f64)> = None;
    for (key, (sum, n)) in groups {
        let mean = sum / n as f64;
        if best.is_none_or(|(_, m)| mean < m) {
            best = Some((key.0, mean));
        }
    }
    Ok(best.expect("table has at least one row").0)
}

#[derive(Clone, Copy, PartialEq)]
struct ValueKey(ParamValue);

impl Eq for ValueKey {}

impl PartialOrd for ValueKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ValueKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        match (self.0, other.0) {
            (ParamValue::Num(a), ParamValue::Num(b)) => a.total_cmp(&b),
            (ParamValue::Cat(a), ParamValue::Cat(b)) => a.cmp(&b),
            (ParamValue::Num(_), ParamValue::Cat(_)) => std::cmp::Ordering::Less,
            (ParamValue::Cat(_), ParamValue::Num(_)) => std::cmp::Ordering::Greater,
        }
    }
}

/// Surrogate restricted to a slice where some parameters are held fixed.
struct MaskedObjective {
    parent: Arc<SurrogateBenchmark>,
    free: Vec<usize>,
    fixed: Vec<(usize, ParamValue)>,
}

impl MaskedObjective {
    fn expand(&self, config: &Configuration) -> Configuration {
        let mut full = vec![ParamValue::Cat(0); self.parent.table.space.dim()];
        for (&pos, v) in self.free.iter().zip(config.values()) {
            full[pos] = *v;
        }
        for &(pos, v) in &self.fixed {
            full[pos] = v;
        }
        Configuration(full)
    }
}

impl Objective for MaskedObjective {
    fn evaluate(&self, config: &Configuration) -> Result<f64, BenchError> {
        self.parent.predict(&self.expand(config))
    }
}

/// Fix one or two parameters of a surrogate at their marginal-best values,
/// yielding a task over the remaining parameters.
pub fn mask_task(
    surrogate: &Arc<SurrogateBenchmark>,
    params: &[&str],
) -> Result<BenchmarkTask, BenchError> {
    let table = &surrogate.table;
    if params.is_empty() || params.len() > 2 {
        return Err(BenchError::InvalidMask(format!(
            "expected 1 or 2 parameters, got {}",
            params.len()
        )));
    }
    let mut fixed = Vec::new();
    for &name in params {
        let pos = table
            .space
            .position(name)
            .ok_or_else(|| SpaceError::UnknownParameter(name.to_string()))?;
        if fixed.iter().any(|&(p, _)| p == pos) {
            return Err(BenchError::InvalidMask(format!("`{name}` listed twice")));
        }
        fixed.push((pos, marginal_best(table, name)?));
    }
    let free: Vec<usize> = (0..table.space.dim())
        .filter(|i| !fixed.iter().any(|&(p, _)| p == *i))
        .collect();
    if free.is_empty() {
        return Err(BenchError::InvalidMask(
            "masking would leave no free parameter".into(),
        ));
    }
    let mut masked_names: Vec<&str> = params.to_vec();
    masked_names.sort_unstable();
    let space_id = format!("{}-mask[{}]", table.space.id, masked_names.join(","));
    let space = SearchSpace::new(
        space_id.clone(),
        free.iter()
            .map(|&i| table.space.params()[i].clone())
            .collect(),
    )?;
    let oracle = MaskedObjective {
        parent: Arc::clone(surrogate),
        free,
        fixed,
    };
    Ok(BenchmarkTask::new(
        space_id,
        space,
        "masked-surrogate",
        Arc::new(oracle),
    ))
}

/// Build a task from a short textual description:
///
/// * `branin`: the analytic function itself;
/// * `knn:branin:10000[:t]`: a k-nearest-neighbor surrogate over a table of
///   10 000 uniform evaluations drawn with table seed `t` (default 0).
///
/// Surrogates of one function share its search space.
pub fn task_from_spec(spec: &str) -> Result<BenchmarkTask, BenchError> {
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.as_slice() {
        [name] => BenchmarkTask::synthetic(name),
        ["knn", name, n, rest @ ..] if rest.len() <= 1 => {
            let bad = |what: &str| BenchError::InvalidSpec(format!("`{spec}`: {what}"));
            let n: usize = n.parse().map_err(|_| bad("table size is not an integer"))?;
            let seed: u64 = match rest {
                [t] => t.parse().map_err(|_| bad("table seed is not an integer"))?,
                _ => 0,
            };
            let table = OfflineTable::from_function(name, n, seed)?;
            let surrogate = SurrogateBenchmark::new(table, DEFAULT_K.min(n))?;
            Ok(BenchmarkTask::surrogate(
                format!("{name}-knn{n}-t{seed}"),
                Arc::new(surrogate),
            ))
        }
        _ => Err(BenchError::InvalidSpec(format!(
            "`{spec}`: expected `<function>` or `knn:<function>:<rows>[:<seed>]`"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_d_table(rows: &[(f64, f64)]) -> OfflineTable {
        let space =
            SearchSpace::new("t", vec![ParameterDomain::uniform("x", 0.0, 1.0).unwrap()]).unwrap();
        OfflineTable::new(
            space,
            rows.iter()
                .map(|&(x, y)| (Configuration(vec![ParamValue::Num(x)]), y))
                .collect(),
        )
        .unwrap()
    }

    fn num(xs: &[f64]) -> Configuration {
        Configuration(xs.iter().map(|&x| ParamValue::Num(x)).collect())
    }

    #[test]
    fn synthetic_examples() {
        let f0 = evaluate_synthetic("forrester", &num(&[0.0])).unwrap();
        assert_eq!(f0, 4.0 * (-4.0f64).sin());
        let gp = evaluate_synthetic("goldstein_price", &num(&[0.0, -1.0])).unwrap();
        assert!((gp - 3.0).abs() < 1e-12);
        assert!(matches!(
            evaluate_synthetic("nope", &num(&[0.0])),
            Err(BenchError::UnknownFunction(_))
        ));
        assert!(matches!(
            evaluate_synthetic("branin", &num(&[0.0])),
            Err(BenchError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn branin_grid_minimum() {
        let n = 1000;
        let mut best = f64::INFINITY;
        for i in 0..n {
            for j in 0..n {
                let x1 = -5.0 + 15.0 * i as f64 / (n - 1) as f64;
                let x2 = 15.0 * j as f64 / (n - 1) as f64;
                best = best.min(branin(&[x1, x2]));
            }
        }
        assert!((best - 0.3979).abs() < 1e-2, "grid minimum {best}");
    }

    #[test]
    fn goldstein_price_minimizer_by_grid() {
        let n = 401;
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                let x1 = -2.0 + 4.0 * i as f64 / (n - 1) as f64;
                let x2 = -2.0 + 4.0 * j as f64 / (n - 1) as f64;
                let v = goldstein_price(&[x1, x2]);
                if v < best.0 {
                    best = (v, x1, x2);
                }
            }
        }
        assert!((best.0 - 3.0).abs() < 1e-9);
        assert!(best.1.abs() < 1e-9 && (best.2 + 1.0).abs() < 1e-9);
    }

    #[test]
    fn knn_examples() {
        let table = one_d_table(&[(0.0, 1.0), (1.0, 3.0)]);
        let s1 = SurrogateBenchmark::new(table.clone(), 1).unwrap();
        assert_eq!(s1.predict(&num(&[0.1])).unwrap(), 1.0);
        assert_eq!(s1.predict(&num(&[1.0])).unwrap(), 3.0);
        // Equidistant query resolves to the lower row index.
        assert_eq!(s1.predict(&num(&[0.5])).unwrap(), 1.0);
        let s2 = SurrogateBenchmark::new(table.clone(), 2).unwrap();
        for q in [0.0, 0.3, 0.9] {
            assert_eq!(s2.predict(&num(&[q])).unwrap(), 2.0);
        }
        assert!(SurrogateBenchmark::new(table, 3).is_err());
    }

    #[test]
    fn knn_categorical_distance() {
        let space = SearchSpace::new(
            "c",
            vec![
                ParameterDomain::uniform("x", 0.0, 1.0).unwrap(),
                ParameterDomain::categorical("c", 2).unwrap(),
            ],
        )
        .unwrap();
        let rows = vec![
            (
                Configuration(vec![ParamValue::Num(0.0), ParamValue::Cat(0)]),
                1.0,
            ),
            (
                Configuration(vec![ParamValue::Num(0.9), ParamValue::Cat(1)]),
                5.0,
            ),
        ];
        let s = SurrogateBenchmark::new(OfflineTable::new(space, rows).unwrap(), 1).unwrap();
        // 0.8 away numerically but same category beats a category mismatch.
        let q = Configuration(vec![ParamValue::Num(0.8), ParamValue::Cat(0)]);
        assert_eq!(s.predict(&q).unwrap(), 1.0);
    }

    #[test]
    fn marginal_best_examples() {
        let space = SearchSpace::new(
            "m",
            vec![
                ParameterDomain::categorical("p", 2).unwrap(),
                ParameterDomain::uniform("q", 0.0, 1.0).unwrap(),
            ],
        )
        .unwrap();
        let row = |p, q, y| {
            (
                Configuration(vec![ParamValue::Cat(p), ParamValue::Num(q)]),
                y,
            )
        };
        let t = OfflineTable::new(
            space.clone(),
            vec![
                row(0, 0.1, 1.0),
                row(0, 0.2, 3.0),
                row(1, 0.3, 2.0),
                row(1, 0.4, 1.0),
            ],
        )
        .unwrap();
        assert_eq!(marginal_best(&t, "p").unwrap(), ParamValue::Cat(1));

        let tie = OfflineTable::new(
            space.clone(),
            vec![
                row(1, 0.1, 1.0),
                row(0, 0.2, 1.0),
                row(0, 0.3, 2.0),
                row(1, 0.4, 2.0),
            ],
        )
        .unwrap();
        assert_eq!(marginal_best(&tie, "p").unwrap(), ParamValue::Cat(0));

        let single = OfflineTable::new(space, vec![row(1, 0.1, 1.0), row(1, 0.4, 2.0)]).unwrap();
        assert_eq!(marginal_best(&single, "p").unwrap(), ParamValue::Cat(1));
        assert!(marginal_best(&single, "zz").is_err());
    }

    #[test]
    fn marginal_best_matches_brute_force() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let space = SearchSpace::new(
            "b",
            vec![
                ParameterDomain::integer("p", 0, 4).unwrap(),
                ParameterDomain::uniform("q", 0.0, 1.0).unwrap(),
            ],
        )
        .unwrap();
        for _ in 0..50 {
            let rows: Vec<_> = (0..30)
                .map(|_| {
                    let p = rng.random_range(0..5) as f64;
                    let y = rng.random_range(0..4) as f64;
                    (
                        Configuration(vec![ParamValue::Num(p), ParamValue::Num(rng.random())]),
                        y,
                    )
                })
                .collect();
            let Ok(t) = OfflineTable::new(space.clone(), rows.clone()) else {
                continue;
            };
            let mut expected = None;
            for v in 0..5 {
                let ys: Vec<f64> = rows
                    .iter()
                    .filter(|(c, _)| c.values()[0] == ParamValue::Num(v as f64))
                    .map(|(_, y)| *y)
                    .collect();
                if ys.is_empty() {
                    continue;
                }
                let m = ys.iter().sum::<f64>() / ys.len() as f64;
                match expected {
                    Some((_, best)) if m >= best => {}
                    _ => expected = Some((v, m)),
                }
            }
            assert_eq!(
                marginal_best(&t, "p").unwrap(),
                ParamValue::Num(expected.unwrap().0 as f64)
            );
        }
    }

    #[test]
    fn mask_task_composes_with_parent() {
        let space = SearchSpace::new(
            "three",
            vec![
                ParameterDomain::categorical("p", 3).unwrap(),
                ParameterDomain::uniform("q", 0.0, 1.0).unwrap(),
                ParameterDomain::uniform("r", 0.0, 1.0).unwrap(),
            ],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows = (0..200)
            .map(|_| {
                let c = space.sample_uniform(&mut rng);
                let p = c.values()[0].as_cat().unwrap() as f64;
                let y = p * 0.5 + c.values()[1].as_num().unwrap() - c.values()[2].as_num().unwrap();
                (c, y)
            })
            .collect();
        let parent = Arc::new(
            SurrogateBenchmark::new(OfflineTable::new(space.clone(), rows).unwrap(), 3).unwrap(),
        );
        let task = mask_task(&parent, &["p"]).unwrap();
        assert_eq!(task.space.dim(), 2);
        assert!(task.id.contains("mask[p]"));
        let best_p = marginal_best(&parent.table, "p").unwrap();
        for _ in 0..20 {
            let c = task.space.sample_uniform(&mut rng);
            let full = Configuration(vec![best_p, c.values()[0], c.values()[1]]);
            assert_eq!(task.evaluate(&c).unwrap(), parent.predict(&full).unwrap());
        }
        let two = mask_task(&parent, &["p", "r"]).unwrap();
        assert_eq!(two.space.dim(), 1);
        assert!(mask_task(&parent, &[]).is_err());
        assert!(mask_task(&parent, &["p", "q", "r"]).is_err());

        let small_space = SearchSpace::new(
            "two",
            vec![
                ParameterDomain::uniform("a", 0.0, 1.0).unwrap(),
                ParameterDomain::uniform("b", 0.0, 1.0).unwrap(),
            ],
        )
        .unwrap();
        let rows = vec![(num(&[0.1, 0.2]), 1.0), (num(&[0.3, 0.4]), 2.0)];
        let small = Arc::new(
            SurrogateBenchmark::new(OfflineTable::new(small_space, rows).unwrap(), 1).unwrap(),
        );
        assert!(matches!(
            mask_task(&small, &["a", "b"]),
            Err(BenchError::InvalidMask(_))
        ));
    }

    #[test]
    fn table_file_round_trip_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let table = one_d_table(&[(0.0, 1.0), (1.0, 3.0)]);
        let path = dir.path().join("t.jsonl");
        table.write_jsonl(&path).unwrap();
        let back = load_offline_table(&path).unwrap();
        assert_eq!(back.rows.len(), 2);
        assert_eq!(back.rows, table.rows);

        let header = serde_json::to_string(&table.space).unwrap();
        let constant = format!(
            "{header}\n{{\"config\":{{\"x\":0.1}},\"objective\":2.0}}\n{{\"config\":{{\"x\":0.2}},\"objective\":2.0}}\n"
        );
        std::fs::write(&path, constant).unwrap();
        assert!(matches!(
            load_offline_table(&path),
            Err(BenchError::ConstantObjective(2))
        ));

        let out_of_range = format!(
            "{header}\n{{\"config\":{{\"x\":0.1}},\"objective\":2.0}}\n{{\"config\":{{\"x\":7.0}},\"objective\":1.0}}\n"
        );
        std::fs::write(&path, out_of_range).unwrap();
        match load_offline_table(&path) {
            Err(BenchError::InvalidRow { row, .. }) => assert_eq!(row, 1),
            other => panic!("expected row rejection, got {other:?}"),
        }
    }

    #[test]
    fn task_specs() {
        let t = task_from_spec("branin").unwrap();
        assert_eq!(t.id, "branin");
        let k = task_from_spec("knn:branin:200:3").unwrap();
        assert_eq!(k.id, "branin-knn200-t3");
        assert_eq!(k.space, t.space);
        assert!(task_from_spec("knn:branin:x").is_err());
        assert!(task_from_spec("knn:nope:10").is_err());
        assert!(task_from_spec("a:b").is_err());
    }
}
