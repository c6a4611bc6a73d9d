//! Confidence threshold, confident/uncertain split, and the linear
//! uncertainty-to-error-sigma curve fitted on labeled source data.

use std::cmp::Ordering;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regressor::UncertainPrediction;
use crate::scalar::Scalar;

pub const DEFAULT_ETA: f64 = 0.9;
pub const DEFAULT_SEGMENTS: usize = 40;
/// Lower bound on any calibrated sigma, in label units.
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Fraction of absolute errors a calibrated sigma should cover.
pub const ERROR_QUANTILE: f64 = 0.68;
/// Minimum source sample needed to set a threshold.
pub const MIN_THRESHOLD_SAMPLES: usize = 10;

/// Per-dimension uncertainty threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ConfidenceThreshold<F: Scalar> {
    pub eta: F,
    pub tau: Vec<F>,
}

impl<F: Scalar> ConfidenceThreshold<F> {
    pub fn dims(&self) -> usize {
        self.tau.len()
    }

    pub fn dimension(&self, d: usize) -> ConfidenceThreshold<F> {
        ConfidenceThreshold {
            eta: self.eta,
            tau: vec![self.tau[d]],
        }
    }

    /// True when every dimension's uncertainty is at most its threshold.
    pub fn is_confident(&self, uncertainty: &[F]) -> bool {
        debug_assert_eq!(uncertainty.len(), self.tau.len());
        uncertainty.iter().zip(&self.tau).all(|(u, t)| u <= t)
    }
}

/// Linear map from MC-dropout uncertainty to error standard deviation, one
/// `(a0, a1)` pair per label dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ErrorModel<F: Scalar> {
    pub a0: Vec<F>,
    pub a1: Vec<F>,
    pub segments: usize,
}

impl<F: Scalar> ErrorModel<F> {
    pub fn new(a0: Vec<F>, a1: Vec<F>, segments: usize) -> Result<Self> {
        if a0.len() != a1.len() || a0.is_empty() {
            return Err(Error::Shape("a0 and a1 must be non-empty and equally long".into()));
        }
        Ok(Self { a0, a1, segments })
    }

    pub fn dims(&self) -> usize {
        self.a0.len()
    }

    pub fn dimension(&self, d: usize) -> ErrorModel<F> {
        ErrorModel {
            a0: vec![self.a0[d]],
            a1: vec![self.a1[d]],
            segments: self.segments,
        }
    }

    /// `max(a0 + a1 * u, SIGMA_FLOOR)` for dimension `dim`.
    pub fn sigma_of(&self, dim: usize, u: F) -> F {
        let s = self.a0[dim] + self.a1[dim] * u;
        let floor = F::lit(SIGMA_FLOOR);
        if s > floor {
            s
        } else {
            floor
        }
    }

    pub fn sigmas(&self, uncertainty: &[F]) -> Vec<F> {
        uncertainty
            .iter()
            .enumerate()
            .map(|(d, &u)| self.sigma_of(d, u))
            .collect()
    }
}

/// Confident and uncertain predictions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitSets<F: Scalar> {
    pub confident: Vec<UncertainPrediction<F>>,
    pub uncertain: Vec<UncertainPrediction<F>>,
}

impl<F: Scalar> SplitSets<F> {
    pub fn uncertain_ratio(&self) -> f64 {
        let total = self.confident.len() + self.uncertain.len();
        if total == 0 {
            0.0
        } else {
            self.uncertain.len() as f64 / total as f64
        }
    }
}

fn sort_finite<F: Scalar>(values: &mut [F]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite value in sample".into()));
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    Ok(())
}

/// Empirical `p`-quantile of an ascending sample, interpolating linearly
/// between order statistics at rank `(n - 1) * p`.
pub fn quantile_sorted<F: Scalar>(sorted: &[F], p: F) -> F {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let n = sorted.len();
    let h = F::from_usize_lossy(n - 1) * p;
    let lo = h.floor().to_usize().unwrap_or(0).min(n - 1);
    let hi = (lo + 1).min(n - 1);
    let frac = h - F::from_usize_lossy(lo);
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Threshold for one label dimension: the `eta`-quantile of source
/// uncertainties.
pub fn compute_threshold<F: Scalar>(source_uncertainties: &[F], eta: F) -> Result<ConfidenceThreshold<F>> {
    let tau = threshold_value(source_uncertainties, eta)?;
    Ok(ConfidenceThreshold { eta, tau: vec![tau] })
}

/// One threshold per label dimension from MC-dropout source predictions.
pub fn compute_thresholds<F: Scalar>(
    source_predictions: &[UncertainPrediction<F>],
    eta: F,
) -> Result<ConfidenceThreshold<F>> {
    let first = source_predictions
        .first()
        .ok_or_else(|| Error::Data("no source predictions to set a threshold".into()))?;
    let tau = (0..first.dims())
        .map(|d| {
            let column: Vec<F> = source_predictions.iter().map(|p| p.uncertainty[d]).collect();
            threshold_value(&column, eta)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConfidenceThreshold { eta, tau })
}

fn threshold_value<F: Scalar>(values: &[F], eta: F) -> Result<F> {
    if !(eta > F::zero() && eta <= F::one()) {
        return Err(Error::Config(format!("eta must lie in (0, 1], got {eta}")));
    }
    if values.is_empty() {
        return Err(Error::Data("empty source uncertainty sample".into()));
    }
    if values.len() < MIN_THRESHOLD_SAMPLES {
        return Err(Error::Data(format!(
            "need at least {MIN_THRESHOLD_SAMPLES} source uncertainties, got {}",
            values.len()
        )));
    }
    let mut sorted = values.to_vec();
    sort_finite(&mut sorted)?;
    let tau = quantile_sorted(&sorted, eta);
    if !(tau > F::zero()) {
        return Err(Error::Data(format!(
            "source uncertainties give a non-positive threshold ({tau}); is dropout enabled?"
        )));
    }
    Ok(tau)
}

/// Partition predictions: confident iff every dimension is within threshold.
pub fn classify<F: Scalar>(
    predictions: &[UncertainPrediction<F>],
    threshold: &ConfidenceThreshold<F>,
) -> SplitSets<F> {
    let (confident, uncertain) = predictions
        .iter()
        .cloned()
        .partition(|p| threshold.is_confident(&p.uncertainty));
    SplitSets {
        confident,
        uncertain,
    }
}

/// One summary point per uncertainty segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SegmentSummary<F: Scalar> {
    pub mean_uncertainty: F,
    pub error_sigma: F,
    pub count: usize,
}

/// Sort `(uncertainty, |error|)` pairs by uncertainty and reduce them to
/// `segments` equal-count groups.
pub fn segment_summaries<F: Scalar>(pairs: &[(F, F)], segments: usize) -> Result<Vec<SegmentSummary<F>>> {
    if segments < 2 {
        return Err(Error::Config(format!("need at least 2 segments, got {segments}")));
    }
    if pairs.len() < segments {
        return Err(Error::Data(format!(
            "{} samples cannot fill {segments} segments",
            pairs.len()
        )));
    }
    if pairs.iter().any(|(u, e)| !u.is_finite() || !e.is_finite()) {
        return Err(Error::Data("non-finite uncertainty or error".into()));
    }
    let mut sorted = pairs.to_vec();
    // ties broken on error so the result is independent of input order
    sorted.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(Ordering::Equal)
            .then(a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal))
    });
    let n = sorted.len();
    let mut out = Vec::with_capacity(segments);
    for k in 0..segments {
        let (start, end) = (k * n / segments, (k + 1) * n / segments);
        let chunk = &sorted[start..end];
        let mean_u = chunk.iter().map(|p| p.0).sum::<F>() / F::from_usize_lossy(chunk.len());
        let mut errs: Vec<F> = chunk.iter().map(|p| p.1.abs()).collect();
        sort_finite(&mut errs)?;
        out.push(SegmentSummary {
            mean_uncertainty: mean_u,
            error_sigma: quantile_sorted(&errs, F::lit(ERROR_QUANTILE)),
            count: chunk.len(),
        });
    }
    Ok(out)
}

/// Closed-form least-squares line `e = a0 + a1 * u` through `(u, e)` points.
pub fn fit_line<F: Scalar>(points: &[(F, F)]) -> Result<(F, F)> {
    if points.len() < 2 {
        return Err(Error::DegenerateFit("a line needs at least two points".into()));
    }
    let n = F::from_usize_lossy(points.len());
    let mean_u = points.iter().map(|p| p.0).sum::<F>() / n;
    let mean_e = points.iter().map(|p| p.1).sum::<F>() / n;
    let sxx = points.iter().map(|p| (p.0 - mean_u) * (p.0 - mean_u)).sum::<F>();
    let sxy = points.iter().map(|p| (p.0 - mean_u) * (p.1 - mean_e)).sum::<F>();
    let scale = points.iter().map(|p| p.0 * p.0).sum::<F>();
    if !(sxx > F::epsilon() * scale) {
        return Err(Error::DegenerateFit(
            "segment mean uncertainties have zero variance".into(),
        ));
    }
    let a1 = sxy / sxx;
    Ok((mean_e - a1 * mean_u, a1))
}

/// Fit one `(a0, a1)` per label dimension from labeled source predictions.
pub fn fit_error_model<F: Scalar>(
    source_predictions: &[UncertainPrediction<F>],
    source_labels: ArrayView2<F>,
    segments: usize,
) -> Result<ErrorModel<F>> {
    if source_predictions.len() != source_labels.nrows() {
        return Err(Error::Shape(format!(
            "{} predictions but {} label rows",
            source_predictions.len(),
            source_labels.nrows()
        )));
    }
    let dims = source_labels.ncols();
    if source_predictions.iter().any(|p| p.dims() != dims) {
        return Err(Error::Shape("prediction and label dimensions differ".into()));
    }
    let mut a0 = Vec::with_capacity(dims);
    let mut a1 = Vec::with_capacity(dims);
    for d in 0..dims {
        let pairs: Vec<(F, F)> = source_predictions
            .iter()
            .zip(source_labels.rows())
            .map(|(p, y)| (p.uncertainty[d], (p.prediction[d] - y[d]).abs()))
            .collect();
        let summary = segment_summaries(&pairs, segments)?;
        let points: Vec<(F, F)> = summary
            .iter()
            .map(|s| (s.mean_uncertainty, s.error_sigma))
            .collect();
        let (b0, b1) = fit_line(&points)?;
        a0.push(b0);
        a1.push(b1);
    }
    ErrorModel::new(a0, a1, segments)
}
