//! Full adaptation run: calibrate on labeled source data, split target
//! predictions by confidence, estimate the target label density, pseudo-label
//! the uncertain examples, and fine-tune with credibility weights.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::calibration::{
    classify, compute_thresholds, fit_error_model, ConfidenceThreshold, ErrorModel, SplitSets, DEFAULT_ETA,
    DEFAULT_SEGMENTS,
};
use crate::dataio::Dataset;
use crate::density::{build_map_with, build_reference_map, map_mae, GridSpec, LabelDensityMap, DEFAULT_GRID_CELLS};
use crate::distribution::ErrorKernel;
use crate::error::{Error, Result};
use crate::pseudolabel::{
    save_pseudo_labels_csv, summarize, GenerationOutput, GenerationSummary, ItemFailure, PseudoLabel,
    PseudoLabelGenerator,
};
use crate::regressor::{Regressor, TrainConfig, TrainingBatch, UncertainPrediction, DEFAULT_DROPOUT, DEFAULT_SAMPLINGS};
use crate::rng;
use crate::scalar::Scalar;

pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_MAX_EPOCHS: usize = 500;
pub const DEFAULT_EARLY_STOP_WINDOW: usize = 20;
pub const DEFAULT_EARLY_STOP_RATIO: f64 = 0.1;

// Independent random streams derived from the run seed.
const STREAM_CALIBRATION: u64 = 1;
const STREAM_TARGET: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_TRAIN: u64 = 4;
const STREAM_TEST: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationConfig {
    pub eta: f64,
    pub segments_q: usize,
    pub samplings_s: usize,
    pub dropout_rate: f64,
    pub grid_cells: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_window: usize,
    pub early_stop_ratio: f64,
    /// Train on confident examples too, with their own prediction as target.
    pub include_confident: bool,
    pub seed: u64,
    pub kernel: ErrorKernel,
    /// One map over all label dimensions instead of one map per dimension.
    pub joint_map: bool,
    /// Diagnostic: every credibility weight set to zero.
    pub force_zero_beta: bool,
    /// Diagnostic: replace the estimated density map with a uniform one.
    pub uniform_prior: bool,
    /// Published figures echoed next to the achieved reductions.
    pub reference_mse_reduction_pct: Option<f64>,
    pub reference_rmsle_reduction_pct: Option<f64>,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            eta: DEFAULT_ETA,
            segments_q: DEFAULT_SEGMENTS,
            samplings_s: DEFAULT_SAMPLINGS,
            dropout_rate: DEFAULT_DROPOUT,
            grid_cells: DEFAULT_GRID_CELLS,
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: DEFAULT_BATCH_SIZE,
            max_epochs: DEFAULT_MAX_EPOCHS,
            early_stop_window: DEFAULT_EARLY_STOP_WINDOW,
            early_stop_ratio: DEFAULT_EARLY_STOP_RATIO,
            include_confident: true,
            seed: 0,
            kernel: ErrorKernel::Gaussian,
            joint_map: false,
            force_zero_beta: false,
            uniform_prior: false,
            reference_mse_reduction_pct: None,
            reference_rmsle_reduction_pct: None,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return bad(format!("eta must lie in (0, 1), got {}", self.eta));
        }
        if self.segments_q < 2 {
            return bad(format!("segments_q must be at least 2, got {}", self.segments_q));
        }
        if self.samplings_s < 2 {
            return bad(format!("samplings_s must be at least 2, got {}", self.samplings_s));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if self.grid_cells == 0 {
            return bad("grid_cells must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.early_stop_window < 2 {
            return bad(format!("early_stop_window must be at least 2, got {}", self.early_stop_window));
        }
        if !(self.early_stop_ratio >= 0.0) {
            return bad(format!("early_stop_ratio must be non-negative, got {}", self.early_stop_ratio));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config JSON: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Stop when the mean per-epoch drop over the last `window` epochs is below
/// `ratio` times the mean drop over the first `window` epochs. Histories
/// shorter than `2 * window` always continue. A non-positive initial drop
/// gives nothing to compare against, so training stops.
pub fn early_stop_check<F: Scalar>(loss_history: &[F], window: usize, ratio: f64) -> bool {
    let n = loss_history.len();
    if window < 2 || n < 2 * window {
        return false;
    }
    let w = window as f64;
    let initial = (loss_history[0].as_f64() - loss_history[window].as_f64()) / w;
    let recent = (loss_history[n - 1 - window].as_f64() - loss_history[n - 1].as_f64()) / w;
    if initial <= 0.0 {
        return true;
    }
    recent < ratio * initial
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub mse: f64,
    pub mae: f64,
    /// Absent when any prediction or label is at most -1.
    pub rmsle: Option<f64>,
    pub rmsle_defined: bool,
}

/// MSE, MAE, and RMSLE over every entry of two equally shaped arrays.
pub fn metrics<F: Scalar>(predictions: ArrayView2<F>, labels: ArrayView2<F>) -> Result<Metrics> {
    if predictions.shape() != labels.shape() {
        return Err(Error::Shape(format!(
            "predictions {:?} and labels {:?} differ in shape",
            predictions.shape(),
            labels.shape()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Data("no examples to evaluate".into()));
    }
    let n = labels.len() as f64;
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut sle = 0.0;
    let mut log_ok = true;
    for (p, y) in predictions.iter().zip(labels.iter()) {
        let (p, y) = (p.as_f64(), y.as_f64());
        se += (p - y) * (p - y);
        ae += (p - y).abs();
        if p > -1.0 && y > -1.0 {
            let d = p.ln_1p() - y.ln_1p();
            sle += d * d;
        } else {
            log_ok = false;
        }
    }
    Ok(Metrics {
        count: labels.nrows(),
        mse: se / n,
        mae: ae / n,
        rmsle: log_ok.then(|| (sle / n).sqrt()),
        rmsle_defined: log_ok,
    })
}

/// Deterministic (dropout off) metrics of `model` on labeled `data`.
pub fn evaluate<F: Scalar>(model: &Regressor<F>, data: &Dataset<F>) -> Result<Metrics> {
    let labels = data.labels()?;
    let predictions = model.predict_rows(data.features.view())?;
    metrics(predictions.view(), labels.view())
}

/// Threshold and error model fitted on labeled calibration data.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration<F: Scalar> {
    pub threshold: ConfidenceThreshold<F>,
    pub error_model: ErrorModel<F>,
}

fn mc_model<F: Scalar>(model: &Regressor<F>, config: &AdaptationConfig) -> Result<Regressor<F>> {
    model.clone().with_dropout_rate(F::lit(config.dropout_rate))
}

fn mc_predictions<F: Scalar>(
    model: &Regressor<F>,
    data: &Dataset<F>,
    config: &AdaptationConfig,
    stream: u64,
) -> Result<Vec<UncertainPrediction<F>>> {
    model.mc_predict_rows(data.features.view(), config.samplings_s, rng::derive_seed(config.seed, stream))
}

fn calibrate_from<F: Scalar>(
    predictions: &[UncertainPrediction<F>],
    labels: ArrayView2<F>,
    eta: f64,
    segments: usize,
) -> Result<Calibration<F>> {
    Ok(Calibration {
        threshold: compute_thresholds(predictions, F::lit(eta))?,
        error_model: fit_error_model(predictions, labels, segments)?,
    })
}

/// MC-dropout on labeled calibration data, then threshold and error model.
pub fn calibrate<F: Scalar>(
    model: &Regressor<F>,
    calibration: &Dataset<F>,
    config: &AdaptationConfig,
) -> Result<Calibration<F>> {
    config.validate()?;
    let labels = calibration.labels()?;
    let model = mc_model(model, config)?;
    let preds = mc_predictions(&model, calibration, config, STREAM_CALIBRATION)?;
    calibrate_from(&preds, labels.view(), config.eta, config.segments_q)
}

/// Confidence split, density maps, and pseudo-labels for one target set.
#[derive(Debug, Clone)]
pub struct PriorStage<F: Scalar> {
    pub split: SplitSets<F>,
    /// One map per label dimension, or a single joint map.
    pub maps: Vec<LabelDensityMap<F>>,
    pub output: GenerationOutput<F>,
}

fn map_and_label<F: Scalar>(
    confident: &[UncertainPrediction<F>],
    uncertain: &[UncertainPrediction<F>],
    error_model: &ErrorModel<F>,
    threshold: &ConfidenceThreshold<F>,
    config: &AdaptationConfig,
) -> Result<(LabelDensityMap<F>, GenerationOutput<F>)> {
    let spec = GridSpec::covering(confident, error_model, config.grid_cells)?;
    let map = if config.uniform_prior {
        LabelDensityMap::uniform(spec)
    } else {
        build_map_with(confident, error_model, &spec, config.kernel)?
    };
    let output = PseudoLabelGenerator::new(&map, error_model, threshold)
        .with_kernel(config.kernel)
        .generate_all(uncertain);
    Ok((map, output))
}

/// Per-dimension runs are merged per example: credibility is averaged, and an
/// example fails if any dimension fails.
fn merge_dimensions<F: Scalar>(requested: usize, outputs: Vec<GenerationOutput<F>>) -> GenerationOutput<F> {
    let dims = outputs.len();
    let mut failures: Vec<ItemFailure> = Vec::new();
    let mut by_index: Vec<HashMap<usize, PseudoLabel<F>>> = Vec::with_capacity(dims);
    for out in &outputs {
        failures.extend(out.failures.iter().cloned());
        by_index.push(out.labels.iter().map(|l| (l.source_index, l.clone())).collect());
    }
    failures.sort_by_key(|f| f.source_index);
    failures.dedup_by_key(|f| f.source_index);
    let mut labels = Vec::new();
    for first in &outputs[0].labels {
        let idx = first.source_index;
        let parts: Option<Vec<&PseudoLabel<F>>> = by_index.iter().map(|m| m.get(&idx)).collect();
        let Some(parts) = parts else { continue };
        labels.push(PseudoLabel {
            value: parts.iter().map(|p| p.value[0]).collect(),
            credibility: parts.iter().map(|p| p.credibility).sum::<F>() / F::from_usize_lossy(dims),
            source_index: idx,
            locality_cells: parts.iter().map(|p| p.locality_cells).sum(),
            fallback: parts.iter().any(|p| p.fallback),
        });
    }
    let summary = summarize(requested, &labels, failures.len());
    GenerationOutput {
        labels,
        failures,
        summary,
    }
}

/// Classify target predictions and pseudo-label the uncertain ones.
pub fn prior_stage<F: Scalar>(
    target_predictions: &[UncertainPrediction<F>],
    calibration: &Calibration<F>,
    config: &AdaptationConfig,
) -> Result<PriorStage<F>> {
    let split = classify(target_predictions, &calibration.threshold);
    if split.confident.is_empty() {
        return Err(Error::Pipeline {
            stage: "classify",
            detail: "no confident target predictions; cannot estimate the label density".into(),
        });
    }
    if split.uncertain.is_empty() {
        return Err(Error::Pipeline {
            stage: "classify",
            detail: "no uncertain target predictions; nothing to adapt".into(),
        });
    }
    let dims = calibration.threshold.dims();
    let (maps, output) = if dims == 1 || config.joint_map {
        let (map, out) = map_and_label(
            &split.confident,
            &split.uncertain,
            &calibration.error_model,
            &calibration.threshold,
            config,
        )?;
        (vec![map], out)
    } else {
        let mut maps = Vec::with_capacity(dims);
        let mut outs = Vec::with_capacity(dims);
        for d in 0..dims {
            let conf: Vec<_> = split.confident.iter().map(|p| p.dimension(d)).collect();
            let unc: Vec<_> = split.uncertain.iter().map(|p| p.dimension(d)).collect();
            let (map, out) = map_and_label(
                &conf,
                &unc,
                &calibration.error_model.dimension(d),
                &calibration.threshold.dimension(d),
                config,
            )?;
            maps.push(map);
            outs.push(out);
        }
        (maps, merge_dimensions(split.uncertain.len(), outs))
    };
    Ok(PriorStage { split, maps, output })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Tasfar,
    /// Control arm: raw predictions as targets, unit weights.
    NaiveSelfTrain,
}

/// Before/after metrics on one split, overall and by confidence subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub size: usize,
    pub uncertain_count: usize,
    pub before: Metrics,
    pub after: Metrics,
    pub uncertain_before: Option<Metrics>,
    pub uncertain_after: Option<Metrics>,
    pub confident_before: Option<Metrics>,
    pub confident_after: Option<Metrics>,
    pub mse_reduction_pct: f64,
    pub rmsle_reduction_pct: Option<f64>,
    pub uncertain_mse_reduction_pct: Option<f64>,
    /// Fraction of the source model's squared error incurred by uncertain rows.
    pub uncertain_error_share: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub calibration: usize,
    pub adaptation: usize,
    pub confident: usize,
    pub uncertain: usize,
    pub pseudo_labeled: usize,
    pub training_rows: usize,
    pub test: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub y0: Vec<f64>,
    pub ym: Vec<f64>,
    pub g: Vec<f64>,
    pub cells: Vec<usize>,
    pub confident_count: usize,
    pub out_of_range: usize,
    pub total_mass: f64,
}

/// Run manifest. `timestamp` is the only field that differs between
/// otherwise identical runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub timestamp: u64,
    pub config: AdaptationConfig,
    pub datasets: BTreeMap<String, String>,
    pub sizes: SplitSizes,
    pub eta: f64,
    pub tau: Vec<f64>,
    pub a0: Vec<f64>,
    pub a1: Vec<f64>,
    pub q: usize,
    pub maps: Vec<MapSummary>,
    pub uncertain_ratio: f64,
    pub generation: GenerationSummary,
    pub failures: Vec<ItemFailure>,
    /// Pseudo-label and raw-prediction error on the pseudo-labeled rows.
    pub pseudo_label_mae: Option<f64>,
    pub uncertain_prediction_mae: Option<f64>,
    /// Pearson correlation of credibility with per-example error reduction.
    pub beta_error_reduction_correlation: Option<f64>,
    pub adaptation: Option<SplitMetrics>,
    pub test: Option<SplitMetrics>,
    /// Held-out split when present, otherwise the adaptation split.
    pub mse_reduction_pct: Option<f64>,
    pub rmsle_reduction_pct: Option<f64>,
    pub reference_mse_reduction_pct: Option<f64>,
    pub reference_rmsle_reduction_pct: Option<f64>,
    pub loss_history: Vec<f64>,
    pub epochs_run: usize,
    pub early_stop_epoch: Option<usize>,
    pub completed: bool,
    pub artifacts: BTreeMap<String, String>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// One exported prediction row; every reported metric can be recomputed from these.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub split: &'static str,
    pub row: usize,
    pub uncertain: bool,
    pub label: Option<Vec<f64>>,
    pub before: Vec<f64>,
    pub after: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AdaptOutput<F: Scalar> {
    pub model: Regressor<F>,
    pub report: RunReport,
    pub pseudo_labels: Vec<PseudoLabel<F>>,
    pub maps: Vec<LabelDensityMap<F>>,
    pub predictions: Vec<PredictionRecord>,
}

/// A failed run with whatever report had been assembled.
#[derive(Debug)]
pub struct PipelineFailure {
    pub error: Error,
    pub partial: Option<Box<RunReport>>,
}

impl From<Error> for PipelineFailure {
    fn from(error: Error) -> Self {
        Self { error, partial: None }
    }
}

impl std::fmt::Display for PipelineFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for PipelineFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

pub type PipelineResult<T> = std::result::Result<T, PipelineFailure>;

/// Credibility-weighted adaptation of `source_model` to `target`.
/// Target labels, and `test` if given, are used only for reporting.
pub fn adapt<F: Scalar>(
    source_model: &Regressor<F>,
    target: &Dataset<F>,
    config: &AdaptationConfig,
    calibration: &Dataset<F>,
    test: Option<&Dataset<F>>,
) -> PipelineResult<AdaptOutput<F>> {
    run(Method::Tasfar, source_model, target, config, calibration, test)
}

/// Same run with raw predictions as targets and unit weights.
pub fn baseline_naive_selftrain<F: Scalar>(
    source_model: &Regressor<F>,
    target: &Dataset<F>,
    config: &AdaptationConfig,
    calibration: &Dataset<F>,
    test: Option<&Dataset<F>>,
) -> PipelineResult<AdaptOutput<F>> {
    run(Method::NaiveSelfTrain, source_model, target, config, calibration, test)
}

/// Source-model fitting options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceTrainConfig {
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    pub dropout_rate: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SourceTrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            dropout_rate: 0.2,
            learning_rate: 0.01,
            epochs: 60,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
        }
    }
}

/// Fit a fresh dropout regressor on labeled data with unit weights. Rows are
/// shuffled once and the batches reused every epoch.
pub fn train_source<F: Scalar>(data: &Dataset<F>, config: &SourceTrainConfig) -> Result<(Regressor<F>, Vec<F>)> {
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let labels = data.labels()?;
    if data.is_empty() {
        return Err(Error::Data("no training rows".into()));
    }
    let mut sizes = vec![data.features.ncols()];
    sizes.extend(&config.hidden);
    sizes.push(labels.ncols());
    let model = Regressor::init(&sizes, F::lit(config.dropout_rate), rng::derive_seed(config.seed, STREAM_TRAIN))?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng::stream(config.seed, STREAM_SHUFFLE));
    let batches = order
        .chunks(config.batch_size)
        .map(|idx| TrainingBatch::unweighted(data.features.select(Axis(0), idx), labels.select(Axis(0), idx)))
        .collect::<Result<Vec<_>>>()?;
    let train = TrainConfig::new(F::lit(config.learning_rate), config.epochs, config.seed);
    model.train(&batches, &train)
}

fn shuffled_batches<F: Scalar>(
    features: &Array2<F>,
    mut rows: Vec<(usize, Vec<F>, F)>,
    config: &AdaptationConfig,
) -> Result<Vec<TrainingBatch<F>>> {
    rows.shuffle(&mut rng::stream(config.seed, STREAM_SHUFFLE));
    let mut batches = Vec::new();
    for chunk in rows.chunks(config.batch_size) {
        let idx: Vec<usize> = chunk.iter().map(|r| r.0).collect();
        let m = chunk[0].1.len();
        let targets = Array2::from_shape_vec((chunk.len(), m), chunk.iter().flat_map(|r| r.1.clone()).collect())
            .map_err(|e| Error::Shape(e.to_string()))?;
        let weights = Array1::from_iter(chunk.iter().map(|r| r.2));
        batches.push(TrainingBatch::new(features.select(Axis(0), &idx), targets, weights)?);
    }
    Ok(batches)
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn reduction_pct(before: f64, after: f64) -> f64 {
    if before == 0.0 {
        0.0
    } else {
        100.0 * (before - after) / before
    }
}

fn subset_metrics<F: Scalar>(
    before: &Array2<F>,
    after: &Array2<F>,
    labels: &Array2<F>,
    rows: &[usize],
) -> Result<Option<(Metrics, Metrics)>> {
    if rows.is_empty() {
        return Ok(None);
    }
    let y = labels.select(Axis(0), rows);
    Ok(Some((
        metrics(before.select(Axis(0), rows).view(), y.view())?,
        metrics(after.select(Axis(0), rows).view(), y.view())?,
    )))
}

fn split_metrics<F: Scalar>(
    before: &Array2<F>,
    after: &Array2<F>,
    labels: &Array2<F>,
    uncertain: &[bool],
) -> Result<SplitMetrics> {
    let all_before = metrics(before.view(), labels.view())?;
    let all_after = metrics(after.view(), labels.view())?;
    let unc: Vec<usize> = (0..uncertain.len()).filter(|&i| uncertain[i]).collect();
    let conf: Vec<usize> = (0..uncertain.len()).filter(|&i| !uncertain[i]).collect();
    let u = subset_metrics(before, after, labels, &unc)?;
    let c = subset_metrics(before, after, labels, &conf)?;
    let total_se = all_before.mse * labels.len() as f64;
    let share = u.as_ref().and_then(|(b, _)| {
        (total_se > 0.0).then(|| b.mse * (unc.len() * labels.ncols()) as f64 / total_se)
    });
    let rmsle_reduction_pct = match (all_before.rmsle, all_after.rmsle) {
        (Some(b), Some(a)) => Some(reduction_pct(b, a)),
        _ => None,
    };
    Ok(SplitMetrics {
        size: labels.nrows(),
        uncertain_count: unc.len(),
        mse_reduction_pct: reduction_pct(all_before.mse, all_after.mse),
        rmsle_reduction_pct,
        uncertain_mse_reduction_pct: u.as_ref().map(|(b, a)| reduction_pct(b.mse, a.mse)),
        uncertain_error_share: share,
        before: all_before,
        after: all_after,
        uncertain_before: u.as_ref().map(|p| p.0.clone()),
        uncertain_after: u.map(|p| p.1),
        confident_before: c.as_ref().map(|p| p.0.clone()),
        confident_after: c.map(|p| p.1),
    })
}

fn records<F: Scalar>(
    split: &'static str,
    before: &Array2<F>,
    after: &Array2<F>,
    labels: Option<&Array2<F>>,
    uncertain: &[bool],
) -> Vec<PredictionRecord> {
    let row = |a: &Array2<F>, i: usize| a.row(i).iter().map(|v| v.as_f64()).collect::<Vec<_>>();
    (0..before.nrows())
        .map(|i| PredictionRecord {
            split,
            row: i,
            uncertain: uncertain[i],
            label: labels.map(|l| row(l, i)),
            before: row(before, i),
            after: row(after, i),
        })
        .collect()
}

fn map_summary<F: Scalar>(map: &LabelDensityMap<F>) -> MapSummary {
    let spec = map.spec();
    let f = |v: &[F]| v.iter().map(|x| x.as_f64()).collect();
    MapSummary {
        y0: f(spec.y0()),
        ym: f(spec.ym()),
        g: f(spec.g()),
        cells: spec.cells().to_vec(),
        confident_count: map.count(),
        out_of_range: map.out_of_range(),
        total_mass: map.total_mass().as_f64(),
    }
}

fn unix_time() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn run<F: Scalar>(
    method: Method,
    source_model: &Regressor<F>,
    target: &Dataset<F>,
    config: &AdaptationConfig,
    calibration_data: &Dataset<F>,
    test: Option<&Dataset<F>>,
) -> PipelineResult<AdaptOutput<F>> {
    config.validate()?;
    if target.is_empty() {
        return Err(Error::Data("target dataset is empty".into()).into());
    }
    let calib_labels = calibration_data.labels().map_err(|_| Error::Pipeline {
        stage: "calibrate",
        detail: "calibration data must be labeled".into(),
    })?;
    let model = mc_model(source_model, config)?;
    let calib_preds = mc_predictions(&model, calibration_data, config, STREAM_CALIBRATION)?;
    let calibration = calibrate_from(&calib_preds, calib_labels.view(), config.eta, config.segments_q)?;
    let target_preds = mc_predictions(&model, target, config, STREAM_TARGET)?;
    let stage = prior_stage(&target_preds, &calibration, config)?;

    let pseudo_labels: Vec<PseudoLabel<F>> = match method {
        Method::Tasfar => stage.output.labels.clone(),
        Method::NaiveSelfTrain => stage
            .split
            .uncertain
            .iter()
            .map(|p| PseudoLabel {
                value: p.prediction.clone(),
                credibility: F::one(),
                source_index: p.input_index,
                locality_cells: 0,
                fallback: false,
            })
            .collect(),
    };
    let generation = match method {
        Method::Tasfar => stage.output.summary.clone(),
        Method::NaiveSelfTrain => summarize(stage.split.uncertain.len(), &pseudo_labels, 0),
    };

    let mut rows: Vec<(usize, Vec<F>, F)> = pseudo_labels
        .iter()
        .map(|l| {
            let w = if config.force_zero_beta { F::zero() } else { l.credibility };
            (l.source_index, l.value.clone(), w)
        })
        .collect();
    if config.include_confident {
        rows.extend(stage.split.confident.iter().map(|p| (p.input_index, p.prediction.clone(), F::one())));
    }
    let training_rows = rows.len();
    let batches = shuffled_batches(&target.features, rows, config)?;

    // Diagnostics on the pseudo-labeled rows, when target labels exist.
    let mut pseudo_label_mae = None;
    let mut uncertain_prediction_mae = None;
    let mut beta_corr = None;
    if let Some(labels) = &target.labels {
        if !pseudo_labels.is_empty() {
            let by_index: HashMap<usize, &UncertainPrediction<F>> =
                stage.split.uncertain.iter().map(|p| (p.input_index, p)).collect();
            let mut betas = Vec::with_capacity(pseudo_labels.len());
            let mut gains = Vec::with_capacity(pseudo_labels.len());
            let (mut pl_err, mut raw_err) = (0.0, 0.0);
            for l in &pseudo_labels {
                let y = labels.row(l.source_index);
                let p = by_index[&l.source_index];
                let m = y.len() as f64;
                let e_pl = l.value.iter().zip(y.iter()).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).sum::<f64>() / m;
                let e_raw =
                    p.prediction.iter().zip(y.iter()).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).sum::<f64>() / m;
                pl_err += e_pl;
                raw_err += e_raw;
                betas.push(l.credibility.as_f64());
                gains.push(e_raw - e_pl);
            }
            let n = pseudo_labels.len() as f64;
            pseudo_label_mae = Some(pl_err / n);
            uncertain_prediction_mae = Some(raw_err / n);
            beta_corr = pearson(&betas, &gains);
        }
    }

    let mut datasets = BTreeMap::new();
    datasets.insert("target".to_string(), target.tag.clone());
    datasets.insert("calibration".to_string(), calibration_data.tag.clone());
    if let Some(t) = test {
        datasets.insert("test".to_string(), t.tag.clone());
    }
    let f64s = |v: &[F]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
    let mut report = RunReport {
        method,
        timestamp: unix_time(),
        config: config.clone(),
        datasets,
        sizes: SplitSizes {
            calibration: calibration_data.len(),
            adaptation: target.len(),
            confident: stage.split.confident.len(),
            uncertain: stage.split.uncertain.len(),
            pseudo_labeled: pseudo_labels.len(),
            training_rows,
            test: test.map(Dataset::len),
        },
        eta: config.eta,
        tau: f64s(&calibration.threshold.tau),
        a0: f64s(&calibration.error_model.a0),
        a1: f64s(&calibration.error_model.a1),
        q: calibration.error_model.segments,
        maps: stage.maps.iter().map(map_summary).collect(),
        uncertain_ratio: stage.split.uncertain_ratio(),
        generation,
        failures: stage.output.failures.clone(),
        pseudo_label_mae,
        uncertain_prediction_mae,
        beta_error_reduction_correlation: beta_corr,
        adaptation: None,
        test: None,
        mse_reduction_pct: None,
        rmsle_reduction_pct: None,
        reference_mse_reduction_pct: config.reference_mse_reduction_pct,
        reference_rmsle_reduction_pct: config.reference_rmsle_reduction_pct,
        loss_history: Vec::new(),
        epochs_run: 0,
        early_stop_epoch: None,
        completed: false,
        artifacts: BTreeMap::new(),
    };

    let mut seen: Vec<F> = Vec::new();
    let trained = if config.max_epochs == 0 || batches.is_empty() {
        Ok((model.clone(), None))
    } else {
        let tc = TrainConfig::new(
            F::lit(config.learning_rate),
            config.max_epochs,
            rng::derive_seed(config.seed, STREAM_TRAIN),
        );
        model
            .train_until(&batches, &tc, |h| {
                seen.clear();
                seen.extend_from_slice(h);
                early_stop_check(h, config.early_stop_window, config.early_stop_ratio)
            })
            .map(|o| (o.model, o.stopped_at))
    };
    report.loss_history = f64s(&seen);
    report.epochs_run = seen.len();
    let (adapted, stopped_at) = match trained {
        Ok(t) => t,
        Err(error) => {
            return Err(PipelineFailure {
                error,
                partial: Some(Box::new(report)),
            })
        }
    };
    report.early_stop_epoch = stopped_at;

    let mut predictions = Vec::new();
    let target_uncertain: Vec<bool> = target_preds
        .iter()
        .map(|p| !calibration.threshold.is_confident(&p.uncertainty))
        .collect();
    let before = source_model.predict_rows(target.features.view())?;
    let after = adapted.predict_rows(target.features.view())?;
    if let Some(labels) = &target.labels {
        report.adaptation = Some(split_metrics(&before, &after, labels, &target_uncertain)?);
    }
    predictions.extend(records("adaptation", &before, &after, target.labels.as_ref(), &target_uncertain));
    if let Some(test) = test {
        let labels = test.labels()?;
        let test_preds = mc_predictions(&model, test, config, STREAM_TEST)?;
        let test_uncertain: Vec<bool> = test_preds
            .iter()
            .map(|p| !calibration.threshold.is_confident(&p.uncertainty))
            .collect();
        let before = source_model.predict_rows(test.features.view())?;
        let after = adapted.predict_rows(test.features.view())?;
        report.test = Some(split_metrics(&before, &after, labels, &test_uncertain)?);
        predictions.extend(records("test", &before, &after, Some(labels), &test_uncertain));
    }
    let headline = report.test.as_ref().or(report.adaptation.as_ref());
    report.mse_reduction_pct = headline.map(|m| m.mse_reduction_pct);
    report.rmsle_reduction_pct = headline.and_then(|m| m.rmsle_reduction_pct);
    report.completed = true;

    Ok(AdaptOutput {
        model: adapted,
        report,
        pseudo_labels,
        maps: stage.maps,
        predictions,
    })
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MODEL_FILE: &str = "adapted_model.bin";
pub const PSEUDO_LABEL_FILE: &str = "pseudo_labels.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

fn density_file(maps: usize, i: usize) -> String {
    if maps == 1 {
        "density_map.csv".to_string()
    } else {
        format!("density_map_{i}.csv")
    }
}

/// CSV of per-row predictions before and after adaptation.
pub fn write_predictions_csv<W: Write>(records: &[PredictionRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let dims = records.first().map_or(1, |r| r.before.len());
    let mut header = vec!["split".to_string(), "row".to_string(), "uncertain".to_string()];
    for prefix in ["label", "before", "after"] {
        header.extend((0..dims).map(|d| format!("{prefix}_{d}")));
    }
    out.write_record(&header)?;
    for r in records {
        let mut row = vec![r.split.to_string(), r.row.to_string(), r.uncertain.to_string()];
        match &r.label {
            Some(l) => row.extend(l.iter().map(f64::to_string)),
            None => row.extend((0..dims).map(|_| String::new())),
        }
        row.extend(r.before.iter().map(f64::to_string));
        row.extend(r.after.iter().map(f64::to_string));
        out.write_record(&row)?;
    }
    out.flush().map_err(|e| Error::io("<predictions csv>", e))
}

/// Write the manifest alone, e.g. the partial report of a failed run.
pub fn write_manifest(report: &RunReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, report.to_json()?).map_err(|e| Error::io(&path, e))
}

impl<F: Scalar> AdaptOutput<F> {
    /// Write model, pseudo-labels, density maps, predictions, and manifest
    /// into `dir`. Artifact paths in the manifest are relative to `dir`.
    pub fn write_artifacts(&mut self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut artifacts = BTreeMap::new();
        self.model.save(dir.join(MODEL_FILE))?;
        artifacts.insert("model".to_string(), MODEL_FILE.to_string());
        save_pseudo_labels_csv(&self.pseudo_labels, dir.join(PSEUDO_LABEL_FILE))?;
        artifacts.insert("pseudo_labels".to_string(), PSEUDO_LABEL_FILE.to_string());
        for (i, map) in self.maps.iter().enumerate() {
            let name = density_file(self.maps.len(), i);
            map.save_csv(dir.join(&name))?;
            let key = if self.maps.len() == 1 {
                "density_map".to_string()
            } else {
                format!("density_map_{i}")
            };
            artifacts.insert(key, name);
        }
        let path = dir.join(PREDICTIONS_FILE);
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_predictions_csv(&self.predictions, file)?;
        artifacts.insert("predictions".to_string(), PREDICTIONS_FILE.to_string());
        artifacts.insert("manifest".to_string(), MANIFEST_FILE.to_string());
        self.report.artifacts = artifacts;
        write_manifest(&self.report, dir)
    }
}

/// Parameter grid for [`sweep`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub grid_cells: Vec<usize>,
    pub segments_q: Vec<usize>,
    pub eta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub grid_cells: usize,
    /// Cell width, averaged over label dimensions.
    pub g: f64,
    pub segments_q: usize,
    pub eta: f64,
    pub uncertain_ratio: f64,
    pub map_mae: f64,
    pub pseudo_label_mae: f64,
    pub prediction_mae: f64,
    pub beta_mean: f64,
    pub beta_error_reduction_correlation: Option<f64>,
    pub a0: f64,
    pub a1: f64,
}

/// Map and pseudo-label quality over a grid of `(grid_cells, q, eta)`,
/// without training. Target labels are required for scoring.
pub fn sweep<F: Scalar>(
    source_model: &Regressor<F>,
    target: &Dataset<F>,
    calibration_data: &Dataset<F>,
    base: &AdaptationConfig,
    grid: &SweepGrid,
) -> Result<Vec<SweepRow>> {
    base.validate()?;
    let target_labels = target.labels()?;
    let calib_labels = calibration_data.labels()?;
    let model = mc_model(source_model, base)?;
    let calib_preds = mc_predictions(&model, calibration_data, base, STREAM_CALIBRATION)?;
    let target_preds = mc_predictions(&model, target, base, STREAM_TARGET)?;
    let mut rows = Vec::new();
    for &eta in &grid.eta {
        for &q in &grid.segments_q {
            let calibration = calibrate_from(&calib_preds, calib_labels.view(), eta, q)?;
            for &cells in &grid.grid_cells {
                let cfg = AdaptationConfig {
                    eta,
                    segments_q: q,
                    grid_cells: cells,
                    ..base.clone()
                };
                cfg.validate()?;
                let stage = prior_stage(&target_preds, &calibration, &cfg)?;
                let mut mae = 0.0;
                let mut g = 0.0;
                for (i, map) in stage.maps.iter().enumerate() {
                    let labels = if stage.maps.len() == 1 {
                        target_labels.clone()
                    } else {
                        target_labels.select(Axis(1), &[i])
                    };
                    let reference = build_reference_map(labels.view(), map.spec())?;
                    mae += map_mae(map, &reference)?.as_f64();
                    g += map.spec().g().iter().map(|v| v.as_f64()).sum::<f64>() / map.spec().dims() as f64;
                }
                let k = stage.maps.len() as f64;
                let by_index: HashMap<usize, &UncertainPrediction<F>> =
                    stage.split.uncertain.iter().map(|p| (p.input_index, p)).collect();
                let (mut pl, mut raw) = (0.0, 0.0);
                let mut betas = Vec::new();
                let mut gains = Vec::new();
                for l in &stage.output.labels {
                    let y = target_labels.row(l.source_index);
                    let m = y.len() as f64;
                    let e_pl = l.value.iter().zip(y).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).sum::<f64>() / m;
                    let e_raw = by_index[&l.source_index]
                        .prediction
                        .iter()
                        .zip(y)
                        .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
                        .sum::<f64>()
                        / m;
                    pl += e_pl;
                    raw += e_raw;
                    betas.push(l.credibility.as_f64());
                    gains.push(e_raw - e_pl);
                }
                let n = stage.output.labels.len().max(1) as f64;
                rows.push(SweepRow {
                    grid_cells: cells,
                    g: g / k,
                    segments_q: q,
                    eta,
                    uncertain_ratio: stage.split.uncertain_ratio(),
                    map_mae: mae / k,
                    pseudo_label_mae: pl / n,
                    prediction_mae: raw / n,
                    beta_mean: stage.output.summary.beta_mean,
                    beta_error_reduction_correlation: pearson(&betas, &gains),
                    a0: calibration.error_model.a0[0].as_f64(),
                    a1: calibration.error_model.a1[0].as_f64(),
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush().map_err(|e| Error::io("<sweep csv>", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn perfect_predictions_score_zero() {
        let y = array![[0.5], [1.5], [2.0]];
        let m = metrics(y.view(), y.view()).unwrap();
        assert_eq!((m.mse, m.mae, m.rmsle), (0.0, 0.0, Some(0.0)));
    }

    #[test]
    fn negative_label_omits_rmsle() {
        let p = array![[0.0], [0.0]];
        let y = array![[1.0], [-1.0]];
        let m = metrics(p.view(), y.view()).unwrap();
        assert_eq!(m.mse, 1.0);
        assert_eq!(m.mae, 1.0);
        assert_eq!(m.rmsle, None);
        assert!(!m.rmsle_defined);
    }

    #[test]
    fn metrics_match_brute_force() {
        use rand::Rng;
        let mut r = rng::seeded(11);
        let p = Array2::from_shape_simple_fn((100, 1), || r.random_range(0.0..5.0));
        let y = Array2::from_shape_simple_fn((100, 1), || r.random_range(0.0..5.0));
        let m = metrics(p.view(), y.view()).unwrap();
        let (mut se, mut ae, mut sle) = (0.0, 0.0, 0.0);
        for i in 0..100 {
            let (a, b): (f64, f64) = (p[[i, 0]], y[[i, 0]]);
            se += (a - b).powi(2);
            ae += (a - b).abs();
            sle += ((1.0 + a).ln() - (1.0 + b).ln()).powi(2);
        }
        assert!((m.mse - se / 100.0).abs() < 1e-12);
        assert!((m.mae - ae / 100.0).abs() < 1e-12);
        assert!((m.rmsle.unwrap() - (sle / 100.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn metric_shape_and_empty_errors() {
        let a = array![[1.0, 2.0]];
        let b = array![[1.0], [2.0]];
        assert!(matches!(metrics(a.view(), b.view()), Err(Error::Shape(_))));
        let e = Array2::<f64>::zeros((0, 1));
        assert!(matches!(metrics(e.view(), e.view()), Err(Error::Data(_))));
    }

    #[test]
    fn linear_decline_never_stops() {
        let h: Vec<f64> = (0..300).map(|t| 1000.0 - t as f64).collect();
        for n in 1..=h.len() {
            assert!(!early_stop_check(&h[..n], 20, 0.1));
        }
    }

    #[test]
    fn plateau_stops_within_window() {
        let k = 50;
        let h: Vec<f64> = (0..200).map(|t| if t < k { 500.0 - t as f64 } else { 500.0 - k as f64 }).collect();
        let first = (1..=h.len()).find(|&n| early_stop_check(&h[..n], 20, 0.1)).unwrap();
        assert!(first > k && first <= k + 20, "{first}");
    }

    #[test]
    fn geometric_decline_stops_at_hand_computed_epoch() {
        // recent / initial = 0.9^(n - 21); first below 0.1 at n = 43
        let h: Vec<f64> = (0..100).map(|t| 100.0 * 0.9f64.powi(t)).collect();
        let first = (1..=h.len()).find(|&n| early_stop_check(&h[..n], 20, 0.1)).unwrap();
        assert_eq!(first, 43);
    }

    #[test]
    fn short_history_continues() {
        let h = [5.0, 1.0, 1.0];
        assert!(!early_stop_check(&h, 2, 0.1));
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = AdaptationConfig::default();
        assert_eq!((c.eta, c.segments_q, c.samplings_s, c.grid_cells), (0.9, 40, 20, 100));
        assert_eq!((c.learning_rate, c.batch_size, c.max_epochs), (1e-3, 32, 500));
        assert!(c.include_confident);
        let parsed = AdaptationConfig::from_json("{\"seed\": 3, \"eta\": 0.8}").unwrap();
        assert_eq!(parsed.seed, 3);
        assert_eq!(parsed.segments_q, 40);
        assert!(matches!(AdaptationConfig::from_json("{\"eta\": 1.5}"), Err(Error::Config(_))));
        assert!(matches!(AdaptationConfig::from_json("{\"bogus\": 1}"), Err(Error::Config(_))));
        assert!(matches!(AdaptationConfig::from_json("[1,"), Err(Error::Config(_))));
    }

    #[test]
    fn pearson_basics() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0], &[0.0, 1.0]), None);
    }

    #[test]
    fn dimension_merge_averages_credibility() {
        let lab = |i: usize, v: f64, b: f64| PseudoLabel {
            value: vec![v],
            credibility: b,
            source_index: i,
            locality_cells: 3,
            fallback: false,
        };
        let mk = |labels: Vec<PseudoLabel<f64>>, failures: Vec<ItemFailure>| GenerationOutput {
            summary: GenerationSummary::default(),
            labels,
            failures,
        };
        let fail = ItemFailure {
            source_index: 2,
            reason: "x".into(),
        };
        let merged = merge_dimensions(
            2,
            vec![
                mk(vec![lab(1, 0.5, 1.0), lab(2, 0.1, 1.0)], vec![]),
                mk(vec![lab(1, -0.5, 3.0)], vec![fail]),
            ],
        );
        assert_eq!(merged.labels.len(), 1);
        assert_eq!(merged.labels[0].value, vec![0.5, -0.5]);
        assert_eq!(merged.labels[0].credibility, 2.0);
        assert_eq!(merged.failures.len(), 1);
        assert_eq!(merged.summary.generated, 1);
    }
}
