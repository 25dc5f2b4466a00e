//! JSON configuration formats: matrix literals, model, POVM, cost-weight
//! and adaptive-schedule files.
//!
//! A complex matrix is a row-major nested array of `[re, im]` pairs, e.g.
//! the 2×2 identity is `[[[1,0],[0,0]],[[0,0],[1,0]]]`.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::Value;

use crate::adaptive::AdaptiveSchedule;
use crate::error::{Error, Result};
use crate::linalg::{c, CMatrix, RMatrix};
use crate::models::{self, Model, ParameterRegion};
use crate::quantum::{DensityOperator, Instrument, Povm};

fn parse_error(msg: impl Into<String>) -> Error {
    Error::Parse(msg.into())
}

pub fn parse_json(text: &str) -> Result<Value> {
    if text.starts_with('\u{feff}') {
        return Err(parse_error("byte-order mark is not allowed"));
    }
    Ok(serde_json::from_str(text)?)
}

pub fn read_json(path: &Path) -> Result<Value> {
    parse_json(&std::fs::read_to_string(path)?)
}

fn finite(v: &Value, what: &str) -> Result<f64> {
    v.as_f64()
        .filter(|x| x.is_finite())
        .ok_or_else(|| parse_error(format!("{what} must be a finite number, got {v}")))
}

fn array<'a>(v: &'a Value, what: &str) -> Result<&'a Vec<Value>> {
    v.as_array().ok_or_else(|| parse_error(format!("{what} must be an array")))
}

fn real_list(v: &Value, what: &str) -> Result<Vec<f64>> {
    array(v, what)?.iter().map(|x| finite(x, what)).collect()
}

/// Parses a complex matrix literal. Must be square and non-empty.
pub fn parse_matrix(v: &Value) -> Result<CMatrix> {
    let rows = array(v, "matrix")?;
    let n = rows.len();
    if n == 0 {
        return Err(parse_error("matrix is empty"));
    }
    let mut data = Vec::with_capacity(n * n);
    for (r, row) in rows.iter().enumerate() {
        let row = array(row, "matrix row")?;
        if row.len() != n {
            return Err(parse_error(format!("row {r} has {} entries, expected {n}", row.len())));
        }
        for entry in row {
            match entry.as_array().map(Vec::as_slice) {
                Some([re, im]) => data.push(c(finite(re, "real part")?, finite(im, "imaginary part")?)),
                _ => return Err(parse_error(format!("matrix entry must be a [re, im] pair, got {entry}"))),
            }
        }
    }
    Ok(CMatrix::from_row_slice(n, n, &data))
}

pub fn parse_matrix_str(text: &str) -> Result<CMatrix> {
    parse_matrix(&parse_json(text)?)
}

/// Real square matrix, either plain numbers or `[re, 0]` pairs.
pub fn parse_real_matrix(v: &Value) -> Result<RMatrix> {
    let rows = array(v, "matrix")?;
    let n = rows.len();
    if n == 0 {
        return Err(parse_error("matrix is empty"));
    }
    let mut out = RMatrix::zeros(n, n);
    for (r, row) in rows.iter().enumerate() {
        let row = array(row, "matrix row")?;
        if row.len() != n {
            return Err(parse_error(format!("row {r} has {} entries, expected {n}", row.len())));
        }
        for (col, entry) in row.iter().enumerate() {
            out[(r, col)] = match entry {
                Value::Array(pair) if pair.len() == 2 => {
                    let im = finite(&pair[1], "imaginary part")?;
                    if im != 0.0 {
                        return Err(parse_error("cost weights must be real"));
                    }
                    finite(&pair[0], "real part")?
                }
                other => finite(other, "matrix entry")?,
            };
        }
    }
    Ok(out)
}

/// `"identity"` or a real symmetric positive semidefinite matrix of size `m`.
pub fn parse_weight(v: &Value, m: usize) -> Result<RMatrix> {
    let g = match v {
        Value::String(s) if s == "identity" => return Ok(RMatrix::identity(m, m)),
        Value::String(s) => return Err(parse_error(format!("unknown weight `{s}`"))),
        other => parse_real_matrix(other)?,
    };
    if g.nrows() != m {
        return Err(Error::DimensionMismatch { expected: m, found: g.nrows() });
    }
    if (&g - g.transpose()).abs().max() > 1e-12 {
        return Err(Error::InvalidConfig("cost weight matrix must be symmetric".into()));
    }
    if crate::linalg::min_symmetric_eigenvalue(&g) < -1e-12 {
        return Err(Error::InvalidConfig("cost weight matrix must be positive semidefinite".into()));
    }
    Ok(g)
}

/// `"identity"` or a path to a weight file.
pub fn load_weight(arg: &str, m: usize) -> Result<RMatrix> {
    if arg == "identity" {
        return Ok(RMatrix::identity(m, m));
    }
    parse_weight(&read_json(Path::new(arg))?, m)
}

/// `{"box": [[lo, hi], ...], "margin": 1e-3}`.
pub fn parse_region(v: &Value) -> Result<ParameterRegion> {
    let obj = v.as_object().ok_or_else(|| parse_error("region must be an object"))?;
    if let Some(k) = obj.keys().find(|k| !["box", "margin", "radius"].contains(&k.as_str())) {
        return Err(parse_error(format!("unknown region key `{k}`")));
    }
    let bounds = array(obj.get("box").ok_or_else(|| parse_error("region needs `box`"))?, "box")?
        .iter()
        .map(|pair| match real_list(pair, "box interval")?.as_slice() {
            [lo, hi] => Ok((*lo, *hi)),
            _ => Err(parse_error("box interval must be [lo, hi]")),
        })
        .collect::<Result<Vec<_>>>()?;
    let margin = obj.get("margin").map(|m| finite(m, "margin")).transpose()?.unwrap_or(1e-3);
    let region = ParameterRegion::new(bounds, margin)?;
    Ok(match obj.get("radius") {
        Some(r) => region.with_ball(finite(r, "radius")?),
        None => region,
    })
}

fn object(v: &Value, what: &str, allowed: &[&str]) -> Result<BTreeMap<String, Value>> {
    let obj = v.as_object().ok_or_else(|| parse_error(format!("{what} must be an object")))?;
    if let Some(k) = obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(parse_error(format!("unknown {what} key `{k}`")));
    }
    Ok(obj.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
}

/// Model config: a built-in `{"name", "params"}`, a θ-grid
/// `{"grid": {"thetas", "states"}}` or `{"polynomial": [{"powers", "matrix"}]}`,
/// each with an optional `"region"`.
pub fn parse_model(v: &Value) -> Result<Model> {
    let obj = object(v, "model config", &["name", "params", "grid", "polynomial", "region"])?;
    let region = obj.get("region").map(parse_region).transpose()?;
    let sources = ["name", "grid", "polynomial"].iter().filter(|k| obj.contains_key(**k)).count();
    if sources != 1 {
        return Err(parse_error("model config needs exactly one of `name`, `grid`, `polynomial`"));
    }
    if obj.contains_key("params") && !obj.contains_key("name") {
        return Err(parse_error("`params` only applies to built-in models"));
    }
    if let Some(name) = obj.get("name") {
        let name = name.as_str().ok_or_else(|| parse_error("`name` must be a string"))?;
        let model = models::builtin_model(name, obj.get("params").unwrap_or(&Value::Null))?;
        return match (model, region) {
            (m, None) => Ok(m),
            (Model::State(s), Some(r)) => {
                let r = s.region().intersect(&r)?;
                Ok(Model::State(s.with_region(r)))
            }
            (Model::Channel(_), Some(_)) => Err(Error::InvalidConfig("channel families have a fixed region".into())),
        };
    }
    if let Some(grid) = obj.get("grid") {
        let grid = object(grid, "grid", &["thetas", "states"])?;
        let thetas = real_list(grid.get("thetas").ok_or_else(|| parse_error("grid needs `thetas`"))?, "thetas")?;
        let states = array(grid.get("states").ok_or_else(|| parse_error("grid needs `states`"))?, "states")?
            .iter()
            .map(|s| DensityOperator::new(parse_matrix(s)?))
            .collect::<Result<Vec<_>>>()?;
        return Ok(Model::State(models::from_grid(thetas, states, region)?));
    }
    let terms = array(&obj["polynomial"], "polynomial")?
        .iter()
        .map(|t| {
            let t = object(t, "polynomial term", &["powers", "matrix"])?;
            let powers = array(t.get("powers").ok_or_else(|| parse_error("term needs `powers`"))?, "powers")?
                .iter()
                .map(|p| {
                    p.as_u64()
                        .and_then(|p| u32::try_from(p).ok())
                        .ok_or_else(|| parse_error(format!("power must be a small non-negative integer, got {p}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let matrix = parse_matrix(t.get("matrix").ok_or_else(|| parse_error("term needs `matrix`"))?)?;
            Ok((powers, matrix))
        })
        .collect::<Result<Vec<_>>>()?;
    let region = region.ok_or_else(|| parse_error("polynomial models need a `region`"))?;
    Ok(Model::State(models::from_polynomial(terms, region)?))
}

pub fn parse_model_str(text: &str) -> Result<Model> {
    parse_model(&parse_json(text)?)
}

/// A built-in name, or a path to a model config file.
pub fn load_model(arg: &str) -> Result<Model> {
    if models::BUILTIN_NAMES.contains(&arg) {
        return models::builtin_model(arg, &Value::Null);
    }
    let path = Path::new(arg);
    if !path.exists() {
        return Err(Error::UnknownModel(arg.to_string()));
    }
    parse_model(&read_json(path)?)
}

fn labels(v: Option<&Value>, count: usize) -> Result<Vec<i64>> {
    match v {
        None => Ok((0..count as i64).collect()),
        Some(v) => {
            let labels = array(v, "labels")?
                .iter()
                .map(|l| l.as_i64().ok_or_else(|| parse_error(format!("label must be an integer, got {l}"))))
                .collect::<Result<Vec<_>>>()?;
            if labels.len() != count {
                return Err(parse_error(format!("{} labels for {count} elements", labels.len())));
            }
            Ok(labels)
        }
    }
}

/// `{"elements": [matrix, ...], "labels": [...]}` or a bare element list.
pub fn parse_povm(v: &Value) -> Result<Povm> {
    let (elements, labels_v) = match v {
        Value::Array(_) => (v, None),
        Value::Object(_) => {
            let obj = v.as_object().expect("object");
            if let Some(k) = obj.keys().find(|k| !["elements", "labels"].contains(&k.as_str())) {
                return Err(parse_error(format!("unknown POVM key `{k}`")));
            }
            (obj.get("elements").ok_or_else(|| parse_error("POVM needs `elements`"))?, obj.get("labels"))
        }
        _ => return Err(parse_error("POVM must be an object or an array")),
    };
    let elements = array(elements, "elements")?.iter().map(parse_matrix).collect::<Result<Vec<_>>>()?;
    let labels = labels(labels_v, elements.len())?;
    Povm::new(labels.into_iter().zip(elements).collect())
}

pub fn parse_povm_str(text: &str) -> Result<Povm> {
    parse_povm(&parse_json(text)?)
}

pub fn load_povm(path: &Path) -> Result<Povm> {
    parse_povm(&read_json(path)?)
}

fn axis(v: &Value) -> Result<[f64; 3]> {
    match real_list(v, "axis")?.as_slice() {
        [x, y, z] => Ok([*x, *y, *z]),
        _ => Err(parse_error("axis must have three components")),
    }
}

/// One inline instrument:
/// `{"luders": {"axis": [x,y,z], "strength": s}}`,
/// `{"luders": {"elements": [...], "labels": [...]}}` or
/// `{"kraus": [{"label": l, "operators": [matrix, ...]}, ...]}`.
fn parse_instrument(v: &Value) -> Result<Instrument> {
    let obj = object(v, "instrument", &["luders", "kraus"])?;
    match (obj.get("luders"), obj.get("kraus")) {
        (Some(l), None) => {
            let lo = object(l, "luders instrument", &["axis", "strength", "elements", "labels"])?;
            let povm = match (lo.get("axis"), lo.get("elements")) {
                (Some(a), None) => {
                    if lo.contains_key("labels") {
                        return Err(parse_error("axis measurements have fixed labels"));
                    }
                    let strength = lo.get("strength").map(|s| finite(s, "strength")).transpose()?.unwrap_or(1.0);
                    Povm::weak_axis(axis(a)?, strength)?
                }
                (None, Some(_)) => {
                    let mut pv = serde_json::Map::new();
                    pv.insert("elements".into(), lo["elements"].clone());
                    if let Some(lb) = lo.get("labels") {
                        pv.insert("labels".into(), lb.clone());
                    }
                    parse_povm(&Value::Object(pv))?
                }
                _ => return Err(parse_error("luders instrument needs exactly one of `axis`, `elements`")),
            };
            Ok(Instrument::luders(&povm))
        }
        (None, Some(k)) => {
            let branches = array(k, "kraus")?
                .iter()
                .map(|b| {
                    let b = object(b, "kraus branch", &["label", "operators"])?;
                    let label = b
                        .get("label")
                        .and_then(Value::as_i64)
                        .ok_or_else(|| parse_error("kraus branch needs an integer `label`"))?;
                    let ops = array(b.get("operators").ok_or_else(|| parse_error("kraus branch needs `operators`"))?, "operators")?
                        .iter()
                        .map(parse_matrix)
                        .collect::<Result<Vec<_>>>()?;
                    Ok((label, ops))
                })
                .collect::<Result<Vec<_>>>()?;
            Instrument::new(branches)
        }
        _ => Err(parse_error("instrument needs exactly one of `luders`, `kraus`")),
    }
}

/// Decision-table row. `history` is matched against the start of the
/// completed-round history; `null` entries match any label.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleRule {
    pub round: usize,
    pub sample: Option<usize>,
    pub history: Vec<Option<i64>>,
    pub instrument: String,
}

impl ScheduleRule {
    pub fn matches(&self, round: usize, sample: usize, history: &[i64]) -> bool {
        self.round == round
            && self.sample.is_none_or(|s| s == sample)
            && self.history.len() <= history.len()
            && self.history.iter().zip(history).all(|(p, h)| p.is_none_or(|p| p == *h))
    }
}

#[derive(Debug, Clone)]
pub struct ScheduleConfig {
    pub schedule: AdaptiveSchedule,
    pub instruments: BTreeMap<String, Instrument>,
    pub rules: Vec<ScheduleRule>,
    /// Estimate per outcome path, in enumeration order.
    pub estimator: Option<Vec<Vec<f64>>>,
}

/// Schedule file:
/// ```json
/// {"samples": 2, "rounds": 2,
///  "instruments": {"weak": {"luders": {"axis": [0,0,1], "strength": 0.6}}},
///  "rules": [{"round": 0, "instrument": "weak"},
///            {"round": 1, "sample": 0, "history": [0, null], "instrument": "weak"}],
///  "estimator": [[0.1], ...]}
/// ```
/// Rounds and samples are zero-based; the first matching rule wins.
pub fn parse_schedule(v: &Value) -> Result<ScheduleConfig> {
    let obj = object(v, "schedule", &["samples", "rounds", "instruments", "rules", "estimator"])?;
    let count = |key: &str| -> Result<usize> {
        obj.get(key)
            .and_then(Value::as_u64)
            .filter(|&n| n > 0)
            .and_then(|n| usize::try_from(n).ok())
            .ok_or_else(|| parse_error(format!("`{key}` must be a positive integer")))
    };
    let samples = count("samples")?;
    let rounds = count("rounds")?;
    let inst_obj = obj
        .get("instruments")
        .and_then(Value::as_object)
        .ok_or_else(|| parse_error("schedule needs an `instruments` object"))?;
    let instruments = inst_obj
        .iter()
        .map(|(k, v)| Ok((k.clone(), parse_instrument(v)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let dim = instruments.values().next().map(Instrument::dim).ok_or_else(|| parse_error("no instruments defined"))?;
    if let Some((name, inst)) = instruments.iter().find(|(_, i)| i.dim() != dim) {
        return Err(Error::InvalidConfig(format!("instrument `{name}` has dimension {}, expected {dim}", inst.dim())));
    }
    let rules = array(obj.get("rules").ok_or_else(|| parse_error("schedule needs `rules`"))?, "rules")?
        .iter()
        .map(|r| {
            let r = object(r, "rule", &["round", "sample", "history", "instrument"])?;
            let index = |key: &str| -> Result<Option<usize>> {
                r.get(key)
                    .map(|x| x.as_u64().and_then(|x| usize::try_from(x).ok()).ok_or_else(|| parse_error(format!("`{key}` must be a non-negative integer"))))
                    .transpose()
            };
            let round = index("round")?.ok_or_else(|| parse_error("rule needs `round`"))?;
            if round >= rounds {
                return Err(Error::InvalidConfig(format!("rule round {round} beyond {rounds} rounds")));
            }
            let sample = index("sample")?;
            if sample.is_some_and(|s| s >= samples) {
                return Err(Error::InvalidConfig(format!("rule sample beyond {samples} samples")));
            }
            let history = match r.get("history") {
                None => Vec::new(),
                Some(h) => array(h, "history")?
                    .iter()
                    .map(|x| match x {
                        Value::Null => Ok(None),
                        other => other.as_i64().map(Some).ok_or_else(|| parse_error(format!("history entry must be an integer or null, got {other}"))),
                    })
                    .collect::<Result<Vec<_>>>()?,
            };
            if history.len() > round * samples {
                return Err(Error::InvalidConfig(format!("round {round} rule pattern longer than the available history")));
            }
            let instrument = r
                .get("instrument")
                .and_then(Value::as_str)
                .ok_or_else(|| parse_error("rule needs an `instrument` name"))?
                .to_string();
            if !instruments.contains_key(&instrument) {
                return Err(Error::InvalidConfig(format!("rule refers to undefined instrument `{instrument}`")));
            }
            Ok(ScheduleRule { round, sample, history, instrument })
        })
        .collect::<Result<Vec<_>>>()?;
    let estimator = obj
        .get("estimator")
        .map(|e| array(e, "estimator")?.iter().map(|row| real_list(row, "estimate")).collect::<Result<Vec<_>>>())
        .transpose()?;
    let table = rules.clone();
    let lookup = instruments.clone();
    let schedule = AdaptiveSchedule::new(samples, rounds, dim, move |round, sample, history| {
        table
            .iter()
            .find(|r| r.matches(round, sample, history))
            .map(|r| lookup[&r.instrument].clone())
            .ok_or_else(|| Error::InvalidConfig(format!("no rule for round {round}, sample {sample}, history {history:?}")))
    })?;
    Ok(ScheduleConfig { schedule, instruments, rules, estimator })
}

pub fn parse_schedule_str(text: &str) -> Result<ScheduleConfig> {
    parse_schedule(&parse_json(text)?)
}

/// Comma-separated list of numbers, e.g. `0.3` or `0.1,0.2`.
pub fn parse_list<T: std::str::FromStr>(text: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|_| parse_error(format!("cannot parse `{s}` in list `{text}`"))))
        .collect()
}
