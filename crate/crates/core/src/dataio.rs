//! Datasets: CSV ingestion with standardization, predicate splits, and
//! seeded synthetic covariate-shift scenarios.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

/// Per-feature affine standardization recorded at load time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub feature_names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Columns that were constant; they map to zero and invert to the mean.
    pub zero_variance: Vec<bool>,
}

impl Standardizer {
    /// Population statistics of each column.
    pub fn fit<F: Scalar>(features: &Array2<F>, feature_names: &[String]) -> Self {
        let n = features.nrows().max(1) as f64;
        let mut mean = Vec::with_capacity(features.ncols());
        let mut std = Vec::with_capacity(features.ncols());
        let mut zero_variance = Vec::with_capacity(features.ncols());
        for col in features.axis_iter(Axis(1)) {
            let m = col.iter().map(|v| v.as_f64()).sum::<f64>() / n;
            let var = col.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>() / n;
            let s = var.sqrt();
            let degenerate = !(s > 1e-12 * m.abs().max(1.0));
            mean.push(m);
            std.push(if degenerate { 1.0 } else { s });
            zero_variance.push(degenerate);
        }
        Self {
            feature_names: feature_names.to_vec(),
            mean,
            std,
            zero_variance,
        }
    }

    pub fn apply<F: Scalar>(&self, features: &Array2<F>) -> Result<Array2<F>> {
        self.check(features.ncols())?;
        let mut out = features.clone();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            for v in col.iter_mut() {
                *v = if self.zero_variance[j] {
                    F::zero()
                } else {
                    F::lit((v.as_f64() - self.mean[j]) / self.std[j])
                };
            }
        }
        Ok(out)
    }

    pub fn invert<F: Scalar>(&self, features: &Array2<F>) -> Result<Array2<F>> {
        self.check(features.ncols())?;
        let mut out = features.clone();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            for v in col.iter_mut() {
                *v = F::lit(v.as_f64() * self.std[j] + self.mean[j]);
            }
        }
        Ok(out)
    }

    fn check(&self, ncols: usize) -> Result<()> {
        if ncols != self.mean.len() {
            return Err(Error::Shape(format!(
                "standardizer fitted on {} features, got {ncols}",
                self.mean.len()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<F: Scalar> {
    pub features: Array2<F>,
    pub labels: Option<Array2<F>>,
    pub tag: String,
    pub feature_names: Vec<String>,
    pub label_names: Vec<String>,
    /// Raw text of every source column for each retained row; predicates
    /// are evaluated here so that splits use unstandardized values.
    pub columns: BTreeMap<String, Vec<String>>,
    /// Rows dropped during ingestion for missing or non-numeric entries.
    pub dropped_rows: usize,
    pub standardizer: Option<Standardizer>,
}

impl<F: Scalar> Dataset<F> {
    pub fn new(
        features: Array2<F>,
        labels: Option<Array2<F>>,
        tag: impl Into<String>,
        feature_names: Vec<String>,
        label_names: Vec<String>,
    ) -> Result<Self> {
        if let Some(l) = &labels {
            if l.nrows() != features.nrows() {
                return Err(Error::Shape(format!(
                    "{} feature rows but {} label rows",
                    features.nrows(),
                    l.nrows()
                )));
            }
            if l.ncols() != label_names.len() {
                return Err(Error::Shape("label names do not match label columns".into()));
            }
        }
        if feature_names.len() != features.ncols() {
            return Err(Error::Shape("feature names do not match feature columns".into()));
        }
        let mut columns = BTreeMap::new();
        for (j, name) in feature_names.iter().enumerate() {
            columns.insert(name.clone(), features.column(j).iter().map(|v| v.to_string()).collect());
        }
        if let Some(l) = &labels {
            for (j, name) in label_names.iter().enumerate() {
                columns.insert(name.clone(), l.column(j).iter().map(|v| v.to_string()).collect());
            }
        }
        Ok(Self {
            features,
            labels,
            tag: tag.into(),
            feature_names,
            label_names,
            columns,
            dropped_rows: 0,
            standardizer: None,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn labels(&self) -> Result<&Array2<F>> {
        self.labels
            .as_ref()
            .ok_or_else(|| Error::Data(format!("dataset `{}` has no labels", self.tag)))
    }

    /// Copy without labels, as handed to adaptation.
    pub fn unlabeled(&self) -> Self {
        Self {
            labels: None,
            ..self.clone()
        }
    }

    pub fn select_rows(&self, rows: &[usize], tag: impl Into<String>) -> Self {
        Self {
            features: self.features.select(Axis(0), rows),
            labels: self.labels.as_ref().map(|l| l.select(Axis(0), rows)),
            tag: tag.into(),
            feature_names: self.feature_names.clone(),
            label_names: self.label_names.clone(),
            columns: self
                .columns
                .iter()
                .map(|(k, v)| (k.clone(), rows.iter().map(|&i| v[i].clone()).collect()))
                .collect(),
            dropped_rows: 0,
            standardizer: self.standardizer.clone(),
        }
    }

    /// Apply a previously recorded standardization to the raw features,
    /// undoing any standardization already in place.
    pub fn standardized_with(&self, s: &Standardizer) -> Result<Self> {
        let raw = match &self.standardizer {
            Some(current) => current.invert(&self.features)?,
            None => self.features.clone(),
        };
        Ok(Self {
            features: s.apply(&raw)?,
            standardizer: Some(s.clone()),
            ..self.clone()
        })
    }

    /// Seeded shuffle split into `(first, second)` with `fraction` of rows in `second`.
    pub fn random_split(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("split fraction must lie in [0, 1), got {fraction}")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::seeded(seed));
        let cut = self.len() - (fraction * self.len() as f64).round() as usize;
        let (a, b) = idx.split_at(cut);
        let (mut a, mut b) = (a.to_vec(), b.to_vec());
        a.sort_unstable();
        b.sort_unstable();
        Ok((
            self.select_rows(&a, format!("{}:a", self.tag)),
            self.select_rows(&b, format!("{}:b", self.tag)),
        ))
    }

    /// CSV with a header row: features first, then labels.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = self.feature_names.clone();
        if self.labels.is_some() {
            header.extend(self.label_names.iter().cloned());
        }
        out.write_record(&header)?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.features.row(i).iter().map(|v| v.to_string()).collect();
            if let Some(l) = &self.labels {
                row.extend(l.row(i).iter().map(|v| v.to_string()));
            }
            out.write_record(&row)?;
        }
        out.flush().map_err(|e| Error::io("<dataset csv>", e))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file)
    }
}

/// Column selection for [`load_csv`].
#[derive(Debug, Clone, Default)]
pub struct CsvColumns {
    pub labels: Vec<String>,
    /// Empty means every non-label column.
    pub features: Vec<String>,
}

/// Load a labeled CSV, standardizing features with statistics of this file.
pub fn load_csv<F: Scalar>(
    path: impl AsRef<Path>,
    label_columns: &[String],
    feature_columns: &[String],
) -> Result<Dataset<F>> {
    load_csv_with(path, label_columns, feature_columns, None)
}

/// Load a CSV; with `standardizer` given, reuse it instead of fitting one.
/// An empty `label_columns` yields an unlabeled dataset.
pub fn load_csv_with<F: Scalar>(
    path: impl AsRef<Path>,
    label_columns: &[String],
    feature_columns: &[String],
    standardizer: Option<&Standardizer>,
) -> Result<Dataset<F>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(file);
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &String| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column `{name}` not found in {}", path.display())))
    };
    let label_idx: Vec<usize> = label_columns.iter().map(find).collect::<Result<_>>()?;
    let feature_names: Vec<String> = if feature_columns.is_empty() {
        headers
            .iter()
            .filter(|h| !label_columns.contains(h))
            .cloned()
            .collect()
    } else {
        feature_columns.to_vec()
    };
    let feature_idx: Vec<usize> = feature_names.iter().map(find).collect::<Result<_>>()?;

    let mut feats: Vec<f64> = Vec::new();
    let mut labs: Vec<f64> = Vec::new();
    let mut raw: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
    let mut kept = 0usize;
    let mut dropped = 0usize;
    let parse = |s: Option<&str>| -> Option<f64> {
        s.and_then(|v| v.trim().parse::<f64>().ok()).filter(|v| v.is_finite())
    };
    for record in reader.records() {
        let record = match record {
            Ok(r) => r,
            Err(_) => {
                dropped += 1;
                continue;
            }
        };
        let f: Option<Vec<f64>> = feature_idx.iter().map(|&j| parse(record.get(j))).collect();
        let l: Option<Vec<f64>> = label_idx.iter().map(|&j| parse(record.get(j))).collect();
        match (f, l) {
            (Some(f), Some(l)) if record.len() == headers.len() => {
                feats.extend(f);
                labs.extend(l);
                for (j, col) in raw.iter_mut().enumerate() {
                    col.push(record.get(j).unwrap_or("").trim().to_string());
                }
                kept += 1;
            }
            _ => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} malformed rows", path.display());
    }
    if kept == 0 {
        return Err(Error::Data(format!("no usable rows in {}", path.display())));
    }
    let features = Array2::from_shape_vec((kept, feature_idx.len()), feats.into_iter().map(F::lit).collect())
        .map_err(|e| Error::Shape(e.to_string()))?;
    let labels = if label_idx.is_empty() {
        None
    } else {
        Some(
            Array2::from_shape_vec((kept, label_idx.len()), labs.into_iter().map(F::lit).collect())
                .map_err(|e| Error::Shape(e.to_string()))?,
        )
    };
    let standardizer = match standardizer {
        Some(s) => {
            if s.feature_names != feature_names {
                return Err(Error::Schema(format!(
                    "standardizer expects features {:?}, file provides {:?}",
                    s.feature_names, feature_names
                )));
            }
            s.clone()
        }
        None => Standardizer::fit(&features, &feature_names),
    };
    let features = standardizer.apply(&features)?;
    let tag = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Dataset {
        features,
        labels,
        tag,
        feature_names,
        label_names: label_columns.to_vec(),
        columns: headers.into_iter().zip(raw).collect(),
        dropped_rows: dropped,
        standardizer: Some(standardizer),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CompareOp {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
}

impl CompareOp {
    fn symbol(self) -> &'static str {
        match self {
            CompareOp::Lt => "<",
            CompareOp::Le => "<=",
            CompareOp::Gt => ">",
            CompareOp::Ge => ">=",
            CompareOp::Eq => "==",
            CompareOp::Ne => "!=",
        }
    }
}

/// Row rule `column OP value`, e.g. `dis<2.5` or `ocean_proximity!=INLAND`.
/// Ordering comparisons are numeric; equality compares numerically when both
/// sides parse as numbers and textually otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SplitRule {
    pub column: String,
    pub op: CompareOp,
    pub value: String,
}

impl SplitRule {
    pub fn new(column: impl Into<String>, op: CompareOp, value: impl ToString) -> Self {
        Self {
            column: column.into(),
            op,
            value: value.to_string(),
        }
    }

    pub fn matches(&self, cell: &str) -> Result<bool> {
        let lhs = cell.trim().parse::<f64>().ok();
        let rhs = self.value.trim().parse::<f64>().ok();
        match (self.op, lhs, rhs) {
            (CompareOp::Eq, Some(a), Some(b)) => Ok(a == b),
            (CompareOp::Ne, Some(a), Some(b)) => Ok(a != b),
            (CompareOp::Eq, _, _) => Ok(cell.trim() == self.value.trim()),
            (CompareOp::Ne, _, _) => Ok(cell.trim() != self.value.trim()),
            (op, Some(a), Some(b)) => Ok(match op {
                CompareOp::Lt => a < b,
                CompareOp::Le => a <= b,
                CompareOp::Gt => a > b,
                _ => a >= b,
            }),
            _ => Err(Error::Data(format!(
                "cannot compare `{cell}` {} `{}` numerically",
                self.op.symbol(),
                self.value
            ))),
        }
    }
}

impl fmt::Display for SplitRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}{}", self.column, self.op.symbol(), self.value)
    }
}

impl FromStr for SplitRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        // two-character operators first
        for (sym, op) in [
            ("<=", CompareOp::Le),
            (">=", CompareOp::Ge),
            ("==", CompareOp::Eq),
            ("!=", CompareOp::Ne),
            ("<", CompareOp::Lt),
            (">", CompareOp::Gt),
        ] {
            if let Some(pos) = s.find(sym) {
                let column = s[..pos].trim();
                let value = s[pos + sym.len()..].trim();
                if column.is_empty() || value.is_empty() {
                    break;
                }
                return Ok(SplitRule::new(column, op, value));
            }
        }
        Err(Error::Config(format!("cannot parse split rule `{s}` (expected e.g. `dis<2.5`)")))
    }
}

impl TryFrom<String> for SplitRule {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SplitRule> for String {
    fn from(r: SplitRule) -> String {
        r.to_string()
    }
}

/// Rows matching `rule` become the target; the rest the source.
pub fn split_by_predicate<F: Scalar>(data: &Dataset<F>, rule: &SplitRule) -> Result<(Dataset<F>, Dataset<F>)> {
    let col = data
        .columns
        .get(&rule.column)
        .ok_or_else(|| Error::Schema(format!("split column `{}` not present", rule.column)))?;
    let mut source = Vec::new();
    let mut target = Vec::new();
    for (i, cell) in col.iter().enumerate() {
        if rule.matches(cell)? {
            target.push(i);
        } else {
            source.push(i);
        }
    }
    if target.is_empty() {
        return Err(Error::Data(format!("split `{rule}` leaves the target side empty")));
    }
    if source.is_empty() {
        return Err(Error::Data(format!("split `{rule}` leaves the source side empty")));
    }
    Ok((
        data.select_rows(&source, format!("{}:source", data.tag)),
        data.select_rows(&target, format!("{}:target", data.tag)),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrueFunction {
    /// `bias + w.x`
    Linear { weights: Vec<f64>, bias: f64 },
    /// `bias + s + kink * max(0, s - knot)` with `s = w.x`
    Piecewise {
        weights: Vec<f64>,
        bias: f64,
        knot: f64,
        kink: f64,
    },
    /// `bias + linear * s + amplitude * sin(frequency * s)` with `s = w.x`
    Sinusoidal {
        weights: Vec<f64>,
        bias: f64,
        linear: f64,
        amplitude: f64,
        frequency: f64,
    },
}

impl TrueFunction {
    fn weights(&self) -> &[f64] {
        match self {
            TrueFunction::Linear { weights, .. }
            | TrueFunction::Piecewise { weights, .. }
            | TrueFunction::Sinusoidal { weights, .. } => weights,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let s: f64 = self.weights().iter().zip(x).map(|(w, v)| w * v).sum();
        match *self {
            TrueFunction::Linear { bias, .. } => bias + s,
            TrueFunction::Piecewise { bias, knot, kink, .. } => bias + s + kink * (s - knot).max(0.0),
            TrueFunction::Sinusoidal {
                bias,
                linear,
                amplitude,
                frequency,
                ..
            } => bias + linear * s + amplitude * (frequency * s).sin(),
        }
    }
}

/// Independent Gaussian per feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputDistribution {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

/// Target labels are concentrated by accepting a candidate input with
/// probability `exp(-z^2 / 2)`, `z = (f(x) - center) / spread`, and never when
/// `|z| > 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelMode {
    pub center: f64,
    pub spread: f64,
}

impl LabelMode {
    pub const TRUNCATION: f64 = 2.0;

    /// Interval holding every noiseless target label.
    pub fn support(&self) -> (f64, f64) {
        (
            self.center - Self::TRUNCATION * self.spread,
            self.center + Self::TRUNCATION * self.spread,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub feature_dim: usize,
    pub true_function: TrueFunction,
    pub source_input: InputDistribution,
    pub target_input: InputDistribution,
    pub target_label_mode: LabelMode,
    pub noise_scale: f64,
    pub source_count: usize,
    pub target_count: usize,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let d = self.feature_dim;
        let bad = |m: &str| Err(Error::Config(format!("scenario: {m}")));
        if d == 0 {
            return bad("feature_dim must be positive");
        }
        if self.true_function.weights().len() != d {
            return bad("true_function weights must have feature_dim entries");
        }
        for (name, dist) in [("source_input", &self.source_input), ("target_input", &self.target_input)] {
            if dist.mean.len() != d || dist.scale.len() != d {
                return bad(&format!("{name} mean/scale must have feature_dim entries"));
            }
            if dist.scale.iter().any(|s| !(*s >= 0.0)) {
                return bad(&format!("{name} scales must be non-negative"));
            }
        }
        if !(self.noise_scale >= 0.0) {
            return bad("noise_scale must be non-negative");
        }
        if !(self.target_label_mode.spread > 0.0) {
            return bad("target_label_mode spread must be positive");
        }
        if self.source_count == 0 || self.target_count == 0 {
            return bad("counts must be positive");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ScenarioSpec =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("scenario JSON: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Candidate draws allowed per accepted target example.
const MAX_ATTEMPTS_PER_TARGET: usize = 10_000;

fn sample_input<R: Rng + ?Sized>(dist: &InputDistribution, r: &mut R) -> Vec<f64> {
    dist.mean
        .iter()
        .zip(&dist.scale)
        .map(|(&m, &s)| {
            let z: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(r);
            m + s * z
        })
        .collect()
}

/// Generate labeled source and target datasets sharing `true_function`.
pub fn gen_scenario<F: Scalar>(spec: &ScenarioSpec) -> Result<(Dataset<F>, Dataset<F>)> {
    spec.validate()?;
    let d = spec.feature_dim;
    let mut r = rng::seeded(spec.seed);
    let noise = |r: &mut rand_chacha::ChaCha8Rng| -> f64 {
        if spec.noise_scale == 0.0 {
            0.0
        } else {
            spec.noise_scale * Normal::new(0.0, 1.0).expect("unit normal").sample(r)
        }
    };

    let mut src_x = Vec::with_capacity(spec.source_count * d);
    let mut src_y = Vec::with_capacity(spec.source_count);
    for _ in 0..spec.source_count {
        let x = sample_input(&spec.source_input, &mut r);
        src_y.push(spec.true_function.eval(&x) + noise(&mut r));
        src_x.extend(x);
    }

    let mode = &spec.target_label_mode;
    let mut tgt_x = Vec::with_capacity(spec.target_count * d);
    let mut tgt_y = Vec::with_capacity(spec.target_count);
    let budget = spec.target_count.saturating_mul(MAX_ATTEMPTS_PER_TARGET);
    let mut attempts = 0usize;
    while tgt_y.len() < spec.target_count {
        attempts += 1;
        if attempts > budget {
            return Err(Error::Config(format!(
                "target label mode (center {}, spread {}) is unreachable from the target input distribution",
                mode.center, mode.spread
            )));
        }
        let x = sample_input(&spec.target_input, &mut r);
        let clean = spec.true_function.eval(&x);
        let z = (clean - mode.center) / mode.spread;
        let accept: f64 = r.random();
        if z.abs() > LabelMode::TRUNCATION || accept >= (-0.5 * z * z).exp() {
            continue;
        }
        tgt_y.push(clean + noise(&mut r));
        tgt_x.extend(x);
    }

    let names: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    let build = |x: Vec<f64>, y: Vec<f64>, tag: &str| -> Result<Dataset<F>> {
        let n = y.len();
        let features = Array2::from_shape_vec((n, d), x.into_iter().map(F::lit).collect())
            .map_err(|e| Error::Shape(e.to_string()))?;
        let labels = Array1::from_iter(y.into_iter().map(F::lit)).insert_axis(Axis(1));
        Dataset::new(features, Some(labels), tag, names.clone(), vec!["y".to_string()])
    };
    Ok((build(src_x, src_y, "source")?, build(tgt_x, tgt_y, "target")?))
}
