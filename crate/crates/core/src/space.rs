//! Search spaces over numerical (linear or log), integer and categorical
//! parameters.
//!
//! A [`SearchSpace`] is an ordered list of [`ParameterDomain`]s. Points in the
//! space are [`Configuration`]s, one [`ParamValue`] per parameter in the same
//! order. Optimizers and the trajectory codec work in unit coordinates, see
//! [`SearchSpace::to_unit`] and [`SearchSpace::from_unit`].

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaceError {
    #[error("parameter `{name}`: {reason}")]
    InvalidDomain { name: String, reason: String },
    #[error("search space `{0}` has no parameters")]
    Empty(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("configuration has {got} values, space has {expected} parameters")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("parameter `{name}`: value {value} outside its domain")]
    OutOfDomain { name: String, value: String },
    #[error("parameter `{name}`: expected a {expected} value")]
    KindMismatch {
        name: String,
        expected: &'static str,
    },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
}

/// The four parameter kinds. Integer bounds are stored as `i64`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Domain {
    Uniform { lo: f64, hi: f64 },
    LogUniform { lo: f64, hi: f64 },
    Integer { lo: i64, hi: i64 },
    Categorical { cardinality: usize },
}

impl Domain {
    pub fn is_categorical(&self) -> bool {
        matches!(self, Domain::Categorical { .. })
    }

    fn kind_name(&self) -> &'static str {
        match self {
            Domain::Uniform { .. } => "continuous-uniform",
            Domain::LogUniform { .. } => "continuous-log-uniform",
            Domain::Integer { .. } => "integer-uniform",
            Domain::Categorical { .. } => "categorical",
        }
    }

    /// Map a uniform draw `u` in `[0, 1)` to a value of this domain with the
    /// inverse CDF of the domain's uniform prior.
    pub fn value_from_uniform_draw(&self, u: f64) -> ParamValue {
        match *self {
            Domain::Uniform { lo, hi } => ParamValue::Num((lo + u * (hi - lo)).clamp(lo, hi)),
            Domain::LogUniform { lo, hi } => {
                ParamValue::Num((lo * (hi / lo).powf(u)).clamp(lo, hi))
            }
            Domain::Integer { lo, hi } => {
                let n = (hi - lo + 1) as f64;
                let offset = ((u * n).floor() as i64).clamp(0, hi - lo);
                ParamValue::Num((lo + offset) as f64)
            }
            Domain::Categorical { cardinality } => {
                let idx = ((u * cardinality as f64).floor() as usize).min(cardinality - 1);
                ParamValue::Cat(idx)
            }
        }
    }
}

/// One named parameter and its domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDomain", into = "RawDomain")]
pub struct ParameterDomain {
    pub name: String,
    pub domain: Domain,
}

impl ParameterDomain {
    pub fn new(name: impl Into<String>, domain: Domain) -> Result<Self, SpaceError> {
        let name = name.into();
        let invalid = |reason: &str| SpaceError::InvalidDomain {
            name: name.clone(),
            reason: reason.to_string(),
        };
        match domain {
            Domain::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(invalid("requires finite lo < hi"));
                }
            }
            Domain::LogUniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(invalid("requires finite lo < hi"));
                }
                if lo <= 0.0 {
                    return Err(invalid("log-uniform requires lo > 0"));
                }
            }
            Domain::Integer { lo, hi } => {
                if lo > hi {
                    return Err(invalid("requires lo <= hi"));
                }
            }
            Domain::Categorical { cardinality } => {
                if cardinality == 0 {
                    return Err(invalid("categorical requires cardinality >= 1"));
                }
            }
        }
        Ok(Self { name, domain })
    }

    pub fn uniform(name: impl Into<String>, lo: f64, hi: f64) -> Result<Self, SpaceError> {
        Self::new(name, Domain::Uniform { lo, hi })
    }

    pub fn log_uniform(name: impl Into<String>, lo: f64, hi: f64) -> Result<Self, SpaceError> {
        Self::new(name, Domain::LogUniform { lo, hi })
    }

    pub fn integer(name: impl Into<String>, lo: i64, hi: i64) -> Result<Self, SpaceError> {
        Self::new(name, Domain::Integer { lo, hi })
    }

    pub fn categorical(name: impl Into<String>, cardinality: usize) -> Result<Self, SpaceError> {
        Self::new(name, Domain::Categorical { cardinality })
    }

    pub fn is_categorical(&self) -> bool {
        self.domain.is_categorical()
    }

    /// Validate a single value against this domain.
    pub fn check(&self, value: &ParamValue) -> Result<(), SpaceError> {
        let out = || SpaceError::OutOfDomain {
            name: self.name.clone(),
            value: value.to_string(),
        };
        match (self.domain, value) {
            (Domain::Uniform { lo, hi }, ParamValue::Num(v))
            | (Domain::LogUniform { lo, hi }, ParamValue::Num(v)) => {
                if v.is_finite() && *v >= lo && *v <= hi {
                    Ok(())
                } else {
                    Err(out())
                }
            }
            (Domain::Integer { lo, hi }, ParamValue::Num(v)) => {
                if v.fract() == 0.0 && *v >= lo as f64 && *v <= hi as f64 {
                    Ok(())
                } else {
                    Err(out())
                }
            }
            (Domain::Categorical { cardinality }, ParamValue::Cat(i)) => {
                if *i < cardinality {
                    Ok(())
                } else {
                    Err(out())
                }
            }
            (Domain::Categorical { .. }, _) => Err(SpaceError::KindMismatch {
                name: self.name.clone(),
                expected: "categorical index",
            }),
            (_, _) => Err(SpaceError::KindMismatch {
                name: self.name.clone(),
                expected: "numerical",
            }),
        }
    }
}

/// JSON shape of a parameter: `{"name", "kind", "lo", "hi", "cardinality"}`.
#[derive(Serialize, Deserialize)]
struct RawDomain {
    name: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cardinality: Option<usize>,
}

impl TryFrom<RawDomain> for ParameterDomain {
    type Error = SpaceError;

    fn try_from(raw: RawDomain) -> Result<Self, Self::Error> {
        let missing = |field: &str| SpaceError::InvalidDomain {
            name: raw.name.clone(),
            reason: format!("missing `{field}`"),
        };
        let domain = match raw.kind.as_str() {
            "continuous-uniform" => Domain::Uniform {
                lo: raw.lo.ok_or_else(|| missing("lo"))?,
                hi: raw.hi.ok_or_else(|| missing("hi"))?,
            },
            "continuous-log-uniform" => Domain::LogUniform {
                lo: raw.lo.ok_or_else(|| missing("lo"))?,
                hi: raw.hi.ok_or_else(|| missing("hi"))?,
            },
            "integer-uniform" => {
                let lo = raw.lo.ok_or_else(|| missing("lo"))?;
                let hi = raw.hi.ok_or_else(|| missing("hi"))?;
                if lo.fract() != 0.0 || hi.fract() != 0.0 {
                    return Err(SpaceError::InvalidDomain {
                        name: raw.name,
                        reason: "integer bounds must be integral".into(),
                    });
                }
                Domain::Integer {
                    lo: lo as i64,
                    hi: hi as i64,
                }
            }
            "categorical" => Domain::Categorical {
                cardinality: raw.cardinality.ok_or_else(|| missing("cardinality"))?,
            },
            other => {
                return Err(SpaceError::InvalidDomain {
                    name: raw.name.clone(),
                    reason: format!("unknown kind `{other}`"),
                })
            }
        };
        ParameterDomain::new(raw.name, domain)
    }
}

impl From<ParameterDomain> for RawDomain {
    fn from(p: ParameterDomain) -> Self {
        let kind = p.domain.kind_name().to_string();
        let (lo, hi, cardinality) = match p.domain {
            Domain::Uniform { lo, hi } | Domain::LogUniform { lo, hi } => {
                (Some(lo), Some(hi), None)
            }
            Domain::Integer { lo, hi } => (Some(lo as f64), Some(hi as f64), None),
            Domain::Categorical { cardinality } => (None, None, Some(cardinality)),
        };
        RawDomain {
            name: p.name,
            kind,
            lo,
            hi,
            cardinality,
        }
    }
}

/// A single coordinate of a configuration: a real (numerical and integer
/// kinds) or a category index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamValue {
    Num(f64),
    Cat(usize),
}

impl ParamValue {
    pub fn as_num(&self) -> Option<f64> {
        match self {
            ParamValue::Num(v) => Some(*v),
            ParamValue::Cat(_) => None,
        }
    }

    pub fn as_cat(&self) -> Option<usize> {
        match self {
            ParamValue::Cat(i) => Some(*i),
            ParamValue::Num(_) => None,
        }
    }
}

impl std::fmt::Display for ParamValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamValue::Num(v) => write!(f, "{v}"),
            ParamValue::Cat(i) => write!(f, "<{i}>"),
        }
    }
}

/// A point of a search space, aligned with [`SearchSpace::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration(pub Vec<ParamValue>);

impl Configuration {
    pub fn values(&self) -> &[ParamValue] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Unit-cube coordinates of a configuration: numerical entries in `[0, 1]`,
/// categorical entries passed through as indices.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitPoint(pub Vec<ParamValue>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpace")]
pub struct SearchSpace {
    pub id: String,
    pub parameters: Vec<ParameterDomain>,
}

#[derive(Deserialize)]
struct RawSpace {
    id: String,
    parameters: Vec<ParameterDomain>,
}

impl TryFrom<RawSpace> for SearchSpace {
    type Error = SpaceError;

    fn try_from(raw: RawSpace) -> Result<Self, Self::Error> {
        SearchSpace::new(raw.id, raw.parameters)
    }
}

impl SearchSpace {
    pub fn new(
        id: impl Into<String>,
        parameters: Vec<ParameterDomain>,
    ) -> Result<Self, SpaceError> {
        let id = id.into();
        if parameters.is_empty() {
            return Err(SpaceError::Empty(id));
        }
        let mut seen = HashSet::new();
        for p in &parameters {
            if !seen.insert(p.name.as_str()) {
                return Err(SpaceError::DuplicateName(p.name.clone()));
            }
        }
        Ok(Self { id, parameters })
    }

    pub fn dim(&self) -> usize {
        self.parameters.len()
    }

    pub fn params(&self) -> &[ParameterDomain] {
        &self.parameters
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.parameters.iter().position(|p| p.name == name)
    }

    pub fn validate(&self, config: &Configuration) -> Result<(), SpaceError> {
        if config.len() != self.dim() {
            return Err(SpaceError::DimensionMismatch {
                expected: self.dim(),
                got: config.len(),
            });
        }
        self.parameters
            .iter()
            .zip(config.values())
            .try_for_each(|(p, v)| p.check(v))
    }

    /// Draw every parameter independently from its uniform (or log-uniform)
    /// prior.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Configuration {
        Configuration(
            self.parameters
                .iter()
                .map(|p| p.domain.value_from_uniform_draw(rng.random::<f64>()))
                .collect(),
        )
    }

    pub fn to_unit(&self, config: &Configuration) -> Result<UnitPoint, SpaceError> {
        self.validate(config)?;
        let coords = self
            .parameters
            .iter()
            .zip(config.values())
            .map(|(p, v)| match (p.domain, *v) {
                (Domain::Uniform { lo, hi }, ParamValue::Num(x)) => {
                    ParamValue::Num((x - lo) / (hi - lo))
                }
                (Domain::LogUniform { lo, hi }, ParamValue::Num(x)) => {
                    ParamValue::Num((x / lo).ln() / (hi / lo).ln())
                }
                (Domain::Integer { lo, hi }, ParamValue::Num(x)) => {
                    if hi > lo {
                        ParamValue::Num((x - lo as f64) / (hi - lo) as f64)
                    } else {
                        ParamValue::Num(0.0)
                    }
                }
                (Domain::Categorical { .. }, ParamValue::Cat(i)) => ParamValue::Cat(i),
                _ => unreachable!("validated above"),
            })
            .map(|v| match v {
                ParamValue::Num(u) => ParamValue::Num(u.clamp(0.0, 1.0)),
                c => c,
            })
            .collect();
        Ok(UnitPoint(coords))
    }

    pub fn from_unit(&self, unit: &UnitPoint) -> Result<Configuration, SpaceError> {
        if unit.0.len() != self.dim() {
            return Err(SpaceError::DimensionMismatch {
                expected: self.dim(),
                got: unit.0.len(),
            });
        }
        let values = self
            .parameters
            .iter()
            .zip(&unit.0)
            .map(|(p, v)| {
                let out = || SpaceError::OutOfDomain {
                    name: p.name.clone(),
                    value: v.to_string(),
                };
                match (p.domain, *v) {
                    (Domain::Categorical { cardinality }, ParamValue::Cat(i)) => {
                        if i < cardinality {
                            Ok(ParamValue::Cat(i))
                        } else {
                            Err(out())
                        }
                    }
                    (Domain::Categorical { .. }, _) => Err(SpaceError::KindMismatch {
                        name: p.name.clone(),
                        expected: "categorical index",
                    }),
                    (_, ParamValue::Cat(_)) => Err(SpaceError::KindMismatch {
                        name: p.name.clone(),
                        expected: "numerical",
                    }),
                    (domain, ParamValue::Num(u)) => {
                        if !(0.0..=1.0).contains(&u) {
                            return Err(out());
                        }
                        Ok(ParamValue::Num(match domain {
                            Domain::Uniform { lo, hi } => (lo + u * (hi - lo)).clamp(lo, hi),
                            Domain::LogUniform { lo, hi } => (lo * (hi / lo).powf(u)).clamp(lo, hi),
                            Domain::Integer { lo, hi } => {
                                let v = (lo as f64 + u * (hi - lo) as f64).round();
                                v.clamp(lo as f64, hi as f64)
                            }
                            Domain::Categorical { .. } => unreachable!(),
                        }))
                    }
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Configuration(values))
    }

    /// Stable permutation listing numerical (and integer) parameters before
    /// categorical ones. Entry `i` is the original position of the `i`-th
    /// parameter in canonical order.
    pub fn canonical_order(&self) -> Vec<usize> {
        let (num, cat): (Vec<usize>, Vec<usize>) =
            (0..self.dim()).partition(|&i| !self.parameters[i].is_categorical());
        num.into_iter().chain(cat).collect()
    }

    pub fn n_numerical(&self) -> usize {
        self.parameters
            .iter()
            .filter(|p| !p.is_categorical())
            .count()
    }

    pub fn n_categorical(&self) -> usize {
        self.dim() - self.n_numerical()
    }

    /// The search-space block of an encoded trajectory: one line per
    /// parameter in canonical order, lines joined by `&` and a newline.
    pub fn encode_header(&self) -> String {
        let lines: Vec<String> = self
            .canonical_order()
            .into_iter()
            .map(|i| header_line(&self.parameters[i].domain))
            .collect();
        lines.join("&\n")
    }

    /// A copy of this space whose parameters are reordered by `order`
    /// (`order[i]` is the source position of the new `i`-th parameter).
    pub fn reordered(&self, order: &[usize], id: impl Into<String>) -> SearchSpace {
        SearchSpace {
            id: id.into(),
            parameters: order.iter().map(|&i| self.parameters[i].clone()).collect(),
        }
    }

    /// Build a configuration from `(name, value)` pairs in any order.
    pub fn config_from_named<'a, I>(&self, named: I) -> Result<Configuration, SpaceError>
    where
        I: IntoIterator<Item = (&'a str, ParamValue)>,
    {
        let mut values: Vec<Option<ParamValue>> = vec![None; self.dim()];
        for (name, v) in named {
            let pos = self
                .position(name)
                .ok_or_else(|| SpaceError::UnknownParameter(name.to_string()))?;
            values[pos] = Some(v);
        }
        let values = values
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                v.ok_or_else(|| SpaceError::InvalidDomain {
                    name: self.parameters[i].name.clone(),
                    reason: "missing value".into(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let config = Configuration(values);
        self.validate(&config)?;
        Ok(config)
    }

    /// JSON object `{name: value}` in parameter order. Categorical values are
    /// integer indices.
    pub fn config_to_json(
        &self,
        config: &Configuration,
    ) -> serde_json::Map<String, serde_json::Value> {
        self.parameters
            .iter()
            .zip(config.values())
            .map(|(p, v)| {
                let value = match v {
                    ParamValue::Num(x) => serde_json::json!(x),
                    ParamValue::Cat(i) => serde_json::json!(i),
                };
                (p.name.clone(), value)
            })
            .collect()
    }

    pub fn config_from_json(
        &self,
        obj: &serde_json::Map<String, serde_json::Value>,
    ) -> Result<Configuration, SpaceError> {
        let mut named = Vec::with_capacity(obj.len());
        for (name, value) in obj {
            let pos = self
                .position(name)
                .ok_or_else(|| SpaceError::UnknownParameter(name.clone()))?;
            let p = &self.parameters[pos];
            let v = if p.is_categorical() {
                let idx = value.as_u64().ok_or_else(|| SpaceError::KindMismatch {
                    name: name.clone(),
                    expected: "categorical index",
                })?;
                ParamValue::Cat(idx as usize)
            } else {
                ParamValue::Num(value.as_f64().ok_or_else(|| SpaceError::KindMismatch {
                    name: name.clone(),
                    expected: "numerical",
                })?)
            };
            named.push((name.as_str(), v));
        }
        self.config_from_named(named)
    }
}

fn header_line(domain: &Domain) -> String {
    let mut s = String::new();
    match *domain {
        Domain::Uniform { lo, hi } => {
            let _ = write!(
                s,
                "<type>:<UNI>,<min_value>:{lo:?},<max_value>:{hi:?},<linear-scale>"
            );
        }
        Domain::LogUniform { lo, hi } => {
            let _ = write!(
                s,
                "<type>:<UNI>,<min_value>:{lo:?},<max_value>:{hi:?},<log-scale>"
            );
        }
        Domain::Integer { lo, hi } => {
            let _ = write!(
                s,
                "<type>:<INT>,<min_value>:{lo},<max_value>:{hi},<linear-scale>"
            );
        }
        Domain::Categorical { cardinality } => {
            let cats: Vec<String> = (0..cardinality).map(|i| i.to_string()).collect();
            let _ = write!(s, "<type>:<CATEGORICAL>,<categories>:[{}]", cats.join(", "));
        }
    }
    s
}

/// Parse a header produced by [`SearchSpace::encode_header`] back into a
/// space. Parameter names are synthesized (`x0`, `x1`, ...) since encodings
/// never carry them.
pub fn parse_header(id: &str, header: &str) -> Result<SearchSpace, SpaceError> {
    let bad = |line: &str| SpaceError::InvalidDomain {
        name: line.to_string(),
        reason: "malformed header line".into(),
    };
    let mut params = Vec::new();
    for (i, line) in header.split("&\n").enumerate() {
        let name = format!("x{i}");
        let fields: Vec<&str> = line.splitn(2, ',').collect();
        match fields.first().copied() {
            Some("<type>:<CATEGORICAL>") => {
                let rest = fields.get(1).ok_or_else(|| bad(line))?;
                let list = rest
                    .strip_prefix("<categories>:[")
                    .and_then(|r| r.strip_suffix(']'))
                    .ok_or_else(|| bad(line))?;
                let card = if list.is_empty() {
                    0
                } else {
                    list.split(", ").count()
                };
                params.push(ParameterDomain::categorical(name, card)?);
            }
            Some(tag @ ("<type>:<UNI>" | "<type>:<INT>")) => {
                let rest = fields.get(1).ok_or_else(|| bad(line))?;
                let parts: Vec<&str> = rest.split(',').collect();
                if parts.len() != 3 {
                    return Err(bad(line));
                }
                let lo = parts[0]
                    .strip_prefix("<min_value>:")
                    .ok_or_else(|| bad(line))?;
                let hi = parts[1]
                    .strip_prefix("<max_value>:")
                    .ok_or_else(|| bad(line))?;
                let log = match parts[2] {
                    "<log-scale>" => true,
                    "<linear-scale>" => false,
                    _ => return Err(bad(line)),
                };
                let param = if tag == "<type>:<INT>" {
                    let lo: i64 = lo.parse().map_err(|_| bad(line))?;
                    let hi: i64 = hi.parse().map_err(|_| bad(line))?;
                    ParameterDomain::integer(name, lo, hi)?
                } else {
                    let lo: f64 = lo.parse().map_err(|_| bad(line))?;
                    let hi: f64 = hi.parse().map_err(|_| bad(line))?;
                    if log {
                        ParameterDomain::log_uniform(name, lo, hi)?
                    } else {
                        ParameterDomain::uniform(name, lo, hi)?
                    }
                };
                params.push(param);
            }
            _ => return Err(bad(line)),
        }
    }
    SearchSpace::new(id, params)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

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

    #[test]
    fn inverse_cdf_draws() {
        let log = Domain::LogUniform { lo: 0.01, hi: 1.0 };
        let v = log.value_from_uniform_draw(0.5).as_num().unwrap();
        assert!((v - 0.1).abs() < 1e-12);
        let cat = Domain::Categorical { cardinality: 2 };
        assert_eq!(cat.value_from_uniform_draw(0.0), ParamValue::Cat(0));
        assert_eq!(cat.value_from_uniform_draw(0.4999), ParamValue::Cat(0));
        let int = Domain::Integer { lo: 1, hi: 5 };
        assert_eq!(
            int.value_from_uniform_draw(1.0 - 1e-12),
            ParamValue::Num(5.0)
        );
        assert_eq!(int.value_from_uniform_draw(0.0), ParamValue::Num(1.0));
    }

    #[test]
    fn unit_transform_examples() {
        let space = SearchSpace::new(
            "s",
            vec![
                ParameterDomain::log_uniform("a", 0.01, 1.0).unwrap(),
                ParameterDomain::uniform("b", 1.0, 5.0).unwrap(),
            ],
        )
        .unwrap();
        let u = space
            .to_unit(&Configuration(vec![
                ParamValue::Num(0.1),
                ParamValue::Num(1.0),
            ]))
            .unwrap();
        assert!((u.0[0].as_num().unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(u.0[1], ParamValue::Num(0.0));
        let u = space
            .to_unit(&Configuration(vec![
                ParamValue::Num(1.0),
                ParamValue::Num(3.0),
            ]))
            .unwrap();
        assert_eq!(u.0[1], ParamValue::Num(0.5));

        let back = space
            .from_unit(&UnitPoint(vec![ParamValue::Num(0.0), ParamValue::Num(0.5)]))
            .unwrap();
        assert_eq!(back.0[1], ParamValue::Num(3.0));

        let int_space =
            SearchSpace::new("i", vec![ParameterDomain::integer("n", 1, 5).unwrap()]).unwrap();
        let c = int_space
            .from_unit(&UnitPoint(vec![ParamValue::Num(0.49)]))
            .unwrap();
        assert_eq!(c.0[0], ParamValue::Num(3.0));
    }

    #[test]
    fn unit_transform_errors() {
        let space =
            SearchSpace::new("s", vec![ParameterDomain::uniform("b", 1.0, 5.0).unwrap()]).unwrap();
        assert!(matches!(
            space.to_unit(&Configuration(vec![ParamValue::Num(6.0)])),
            Err(SpaceError::OutOfDomain { .. })
        ));
        assert!(matches!(
            space.from_unit(&UnitPoint(vec![ParamValue::Num(1.5)])),
            Err(SpaceError::OutOfDomain { .. })
        ));
        let degenerate =
            SearchSpace::new("d", vec![ParameterDomain::integer("n", 3, 3).unwrap()]).unwrap();
        let u = degenerate
            .to_unit(&Configuration(vec![ParamValue::Num(3.0)]))
            .unwrap();
        assert_eq!(u.0[0], ParamValue::Num(0.0));
    }

    #[test]
    fn invalid_domains_rejected() {
        assert!(ParameterDomain::uniform("x", 1.0, 1.0).is_err());
        assert!(ParameterDomain::log_uniform("x", 0.0, 1.0).is_err());
        assert!(ParameterDomain::integer("x", 2, 1).is_err());
        assert!(ParameterDomain::categorical("x", 0).is_err());
        assert!(SearchSpace::new("e", vec![]).is_err());
        let dup = vec![
            ParameterDomain::uniform("x", 0.0, 1.0).unwrap(),
            ParameterDomain::uniform("x", 0.0, 2.0).unwrap(),
        ];
        assert_eq!(
            SearchSpace::new("d", dup),
            Err(SpaceError::DuplicateName("x".into()))
        );
    }

    #[test]
    fn canonical_order_examples() {
        assert_eq!(figure_space().canonical_order(), vec![0, 1, 2]);
        let cat_first = SearchSpace::new(
            "cn",
            vec![
                ParameterDomain::categorical("c", 3).unwrap(),
                ParameterDomain::uniform("x", 0.0, 1.0).unwrap(),
            ],
        )
        .unwrap();
        assert_eq!(cat_first.canonical_order(), vec![1, 0]);
        let all_cat = SearchSpace::new(
            "cc",
            vec![
                ParameterDomain::categorical("c", 3).unwrap(),
                ParameterDomain::categorical("d", 2).unwrap(),
            ],
        )
        .unwrap();
        assert_eq!(all_cat.canonical_order(), vec![0, 1]);
    }

    #[test]
    fn header_matches_figure_layout() {
        let expected = "<type>:<UNI>,<min_value>:0.01,<max_value>:1.0,<log-scale>&\n\
                        <type>:<INT>,<min_value>:1,<max_value>:5,<linear-scale>&\n\
                        <type>:<CATEGORICAL>,<categories>:[0, 1]";
        assert_eq!(figure_space().encode_header(), expected);

        let single =
            SearchSpace::new("u", vec![ParameterDomain::uniform("x", 0.0, 1.0).unwrap()]).unwrap();
        assert_eq!(
            single.encode_header(),
            "<type>:<UNI>,<min_value>:0.0,<max_value>:1.0,<linear-scale>"
        );
    }

    #[test]
    fn header_parses_back() {
        let space = figure_space();
        let parsed = parse_header("fig", &space.encode_header()).unwrap();
        assert_eq!(parsed.dim(), 3);
        for (a, b) in parsed.params().iter().zip(space.params()) {
            assert_eq!(a.domain, b.domain);
        }
    }

    #[test]
    fn json_round_trip() {
        let space = figure_space();
        let text = serde_json::to_string(&space).unwrap();
        assert!(text.contains(r#""kind":"continuous-log-uniform""#));
        let back: SearchSpace = serde_json::from_str(&text).unwrap();
        assert_eq!(back, space);
        let bad = r#"{"id":"x","parameters":[{"name":"a","kind":"continuous-uniform","lo":2.0,"hi":1.0}]}"#;
        assert!(serde_json::from_str::<SearchSpace>(bad).is_err());
    }

    #[test]
    fn log_uniform_samples_pass_ks() {
        // ln(v) should be uniform on [ln lo, ln hi].
        let space = SearchSpace::new(
            "l",
            vec![ParameterDomain::log_uniform("a", 1e-3, 10.0).unwrap()],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (llo, lhi) = (1e-3f64.ln(), 10f64.ln());
        let n = 10_000;
        let mut u: Vec<f64> = (0..n)
            .map(|_| {
                (space.sample_uniform(&mut rng).0[0].as_num().unwrap().ln() - llo) / (lhi - llo)
            })
            .collect();
        u.sort_by(f64::total_cmp);
        let d = u
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let lo = i as f64 / n as f64;
                let hi = (i + 1) as f64 / n as f64;
                (x - lo).abs().max((hi - x).abs())
            })
            .fold(0.0, f64::max);
        // Asymptotic KS critical value at alpha = 0.01.
        let critical = 1.628 / (n as f64).sqrt();
        assert!(d < critical, "KS statistic {d} >= {critical}");
    }

    fn arb_domain() -> impl Strategy<Value = Domain> {
        prop_oneof![
            (-100.0f64..100.0, 0.001f64..50.0)
                .prop_map(|(lo, w)| Domain::Uniform { lo, hi: lo + w }),
            (1e-4f64..10.0, 1.01f64..1e4).prop_map(|(lo, r)| Domain::LogUniform { lo, hi: lo * r }),
            (-20i64..20, 0i64..30).prop_map(|(lo, w)| Domain::Integer { lo, hi: lo + w }),
            (1usize..6).prop_map(|cardinality| Domain::Categorical { cardinality }),
        ]
    }

    pub(crate) fn arb_space() -> impl Strategy<Value = SearchSpace> {
        prop::collection::vec(arb_domain(), 1..6).prop_map(|domains| {
            let params = domains
                .into_iter()
                .enumerate()
                .map(|(i, d)| ParameterDomain::new(format!("p{i}"), d).unwrap())
                .collect();
            SearchSpace::new("arb", params).unwrap()
        })
    }

    proptest! {
        #[test]
        fn samples_are_valid_and_round_trip(space in arb_space(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let config = space.sample_uniform(&mut rng);
            prop_assert!(space.validate(&config).is_ok());
            let back = space.from_unit(&space.to_unit(&config).unwrap()).unwrap();
            for ((p, a), b) in space.params().iter().zip(config.values()).zip(back.values()) {
                match (p.domain, a, b) {
                    (Domain::Integer { .. }, _, _) | (Domain::Categorical { .. }, _, _) => prop_assert_eq!(a, b),
                    (_, ParamValue::Num(x), ParamValue::Num(y)) => {
                        prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0), "{} vs {}", x, y)
                    }
                    _ => prop_assert!(false),
                }
            }
        }

        #[test]
        fn canonical_order_is_idempotent_permutation(space in arb_space()) {
            let order = space.canonical_order();
            let mut sorted = order.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..space.dim()).collect::<Vec<_>>());
            let reordered = space.reordered(&order, "r");
            prop_assert_eq!(reordered.canonical_order(), (0..space.dim()).collect::<Vec<_>>());
            let first_cat = order.iter().position(|&i| space.params()[i].is_categorical()).unwrap_or(order.len());
            prop_assert!(order[first_cat..].iter().all(|&i| space.params()[i].is_categorical()));
        }
    }
}
