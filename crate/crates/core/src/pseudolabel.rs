//! Pseudo-labels for uncertain predictions.
//!
//! The posterior over grid cells is the product of the map density (prior)
//! and the instance-label mass of the prediction (likelihood), restricted to
//! cells whose centres lie strictly within three calibrated sigmas of the
//! prediction. The pseudo-label is the posterior-weighted mean of those
//! cell centres; its credibility is
//! `(local mean density / global mean density) * (uncertainty / tau)`.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{quantile_sorted, ConfidenceThreshold, ErrorModel};
use crate::density::LabelDensityMap;
use crate::distribution::{cell_mass_with, ErrorKernel};
use crate::error::{Error, Result};
use crate::regressor::UncertainPrediction;
use crate::scalar::Scalar;

/// Half-width of the locality window in calibrated sigmas.
pub const WINDOW_SIGMAS: f64 = 3.0;
/// Total window probability below which the posterior is treated as empty.
pub const MIN_WINDOW_PROBABILITY: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct PseudoLabel<F: Scalar> {
    pub value: Vec<F>,
    pub credibility: F,
    pub source_index: usize,
    pub locality_cells: usize,
    /// Set when the window was empty and the raw prediction was kept.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalityWindow<F: Scalar> {
    /// Flat cell indices, ascending.
    pub cell_indices: Vec<usize>,
    pub local_mean_density: F,
    pub global_mean_density: F,
}

/// Unnormalized posterior mass of one window cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellProbability<F: Scalar> {
    pub cell: usize,
    pub probability: F,
}

fn check_finite<F: Scalar>(what: &str, v: &[F]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite {what}")));
    }
    Ok(())
}

/// Per-dimension cell ranges whose centres are within `3 sigma`.
fn window_ranges<F: Scalar>(map: &LabelDensityMap<F>, prediction: &[F], sigma: &[F]) -> Vec<Vec<usize>> {
    let spec = map.spec();
    let reach = F::lit(WINDOW_SIGMAS);
    (0..spec.dims())
        .map(|d| {
            let radius = reach * sigma[d];
            let g = spec.g()[d];
            // candidate range padded by one cell, then filtered exactly
            let lo_t = ((prediction[d] - radius - spec.y0()[d]) / g - F::lit(0.5)).floor() - F::one();
            let hi_t = ((prediction[d] + radius - spec.y0()[d]) / g - F::lit(0.5)).ceil() + F::one();
            let last = spec.cells()[d] as f64 - 1.0;
            let lo = lo_t.as_f64().clamp(0.0, last) as usize;
            let hi = hi_t.as_f64().clamp(0.0, last) as usize;
            if hi_t.as_f64() < 0.0 || lo_t.as_f64() > last {
                return Vec::new();
            }
            (lo..=hi)
                .filter(|&j| (spec.cell_center(d, j) - prediction[d]).abs() < radius)
                .collect()
        })
        .collect()
}

/// Cells whose centres lie inside the per-dimension `3 sigma` box.
pub fn locality_window<F: Scalar>(
    map: &LabelDensityMap<F>,
    prediction: &[F],
    sigma: &[F],
) -> LocalityWindow<F> {
    let spec = map.spec();
    let ranges = window_ranges(map, prediction, sigma);
    let cell_indices: Vec<usize> = match spec.dims() {
        1 => ranges[0].clone(),
        _ => ranges[0]
            .iter()
            .flat_map(|&a| ranges[1].iter().map(move |&b| spec.flatten(&[a, b])))
            .collect(),
    };
    let local = if cell_indices.is_empty() {
        F::zero()
    } else {
        cell_indices.iter().map(|&c| map.density(c)).sum::<F>()
            / F::from_usize_lossy(cell_indices.len())
    };
    LocalityWindow {
        cell_indices,
        local_mean_density: local,
        global_mean_density: map.mean_density(),
    }
}

/// Prior-times-likelihood for every cell in the locality window, unnormalized.
/// Fails with [`Error::EmptyWindow`] when no cell centre is in reach.
pub fn posterior_cell_probs<F: Scalar>(
    map: &LabelDensityMap<F>,
    prediction: &[F],
    sigma: &[F],
) -> Result<Vec<CellProbability<F>>> {
    posterior_cell_probs_with(map, prediction, sigma, ErrorKernel::Gaussian)
}

pub fn posterior_cell_probs_with<F: Scalar>(
    map: &LabelDensityMap<F>,
    prediction: &[F],
    sigma: &[F],
    kernel: ErrorKernel,
) -> Result<Vec<CellProbability<F>>> {
    let spec = map.spec();
    if prediction.len() != spec.dims() || sigma.len() != spec.dims() {
        return Err(Error::Shape(format!(
            "map has {} dimensions, prediction {} and sigma {}",
            spec.dims(),
            prediction.len(),
            sigma.len()
        )));
    }
    check_finite("prediction", prediction)?;
    check_finite("sigma", sigma)?;
    if sigma.iter().any(|s| !(*s > F::zero())) {
        return Err(Error::Domain("sigma must be positive".into()));
    }
    let window = locality_window(map, prediction, sigma);
    if window.cell_indices.is_empty() {
        return Err(Error::EmptyWindow);
    }
    window
        .cell_indices
        .iter()
        .map(|&cell| {
            let idx = spec.unflatten(cell);
            let mut likelihood = F::one();
            for (d, &j) in idx.iter().enumerate() {
                let (lo, hi) = spec.cell_bounds(d, j);
                likelihood = likelihood * cell_mass_with(kernel, prediction[d], sigma[d], lo, hi)?;
            }
            Ok(CellProbability {
                cell,
                probability: likelihood * map.density(cell),
            })
        })
        .collect()
}

/// Why one item of a batch could not be pseudo-labeled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemFailure {
    pub source_index: usize,
    pub reason: String,
}

/// Summary of a batch of generated pseudo-labels.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub requested: usize,
    pub generated: usize,
    pub failed: usize,
    pub fallback_fraction: f64,
    pub beta_mean: f64,
    pub beta_min: f64,
    pub beta_q25: f64,
    pub beta_median: f64,
    pub beta_q75: f64,
    pub beta_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationOutput<F: Scalar> {
    /// Successful pseudo-labels in input order.
    pub labels: Vec<PseudoLabel<F>>,
    pub failures: Vec<ItemFailure>,
    pub summary: GenerationSummary,
}

/// Map, calibration, and threshold bundled for repeated pseudo-labeling.
#[derive(Debug, Clone, Copy)]
pub struct PseudoLabelGenerator<'a, F: Scalar> {
    pub map: &'a LabelDensityMap<F>,
    pub error_model: &'a ErrorModel<F>,
    pub threshold: &'a ConfidenceThreshold<F>,
    pub kernel: ErrorKernel,
}

impl<'a, F: Scalar> PseudoLabelGenerator<'a, F> {
    pub fn new(
        map: &'a LabelDensityMap<F>,
        error_model: &'a ErrorModel<F>,
        threshold: &'a ConfidenceThreshold<F>,
    ) -> Self {
        Self {
            map,
            error_model,
            threshold,
            kernel: ErrorKernel::Gaussian,
        }
    }

    pub fn with_kernel(mut self, kernel: ErrorKernel) -> Self {
        self.kernel = kernel;
        self
    }

    /// Mean of `u / tau` over dimensions.
    fn uncertainty_ratio(&self, uncertainty: &[F]) -> F {
        let total = uncertainty
            .iter()
            .zip(&self.threshold.tau)
            .map(|(&u, &t)| u / t)
            .sum::<F>();
        total / F::from_usize_lossy(uncertainty.len())
    }

    pub fn generate(&self, p: &UncertainPrediction<F>) -> Result<PseudoLabel<F>> {
        let dims = self.map.spec().dims();
        if p.dims() != dims || self.error_model.dims() != dims || self.threshold.dims() != dims {
            return Err(Error::Shape(format!(
                "map has {dims} dimensions; prediction, error model, or threshold disagree"
            )));
        }
        check_finite("prediction", &p.prediction)?;
        check_finite("uncertainty", &p.uncertainty)?;
        let global = self.map.mean_density();
        if !(global > F::zero()) {
            return Err(Error::Data("density map is empty (zero global mean density)".into()));
        }
        let sigma = self.error_model.sigmas(&p.uncertainty);
        let fallback = || PseudoLabel {
            value: p.prediction.clone(),
            credibility: F::zero(),
            source_index: p.input_index,
            locality_cells: 0,
            fallback: true,
        };
        let probs = match posterior_cell_probs_with(self.map, &p.prediction, &sigma, self.kernel) {
            Ok(v) => v,
            Err(Error::EmptyWindow) => return Ok(fallback()),
            Err(e) => return Err(e),
        };
        let total = probs.iter().map(|c| c.probability).sum::<F>();
        if !(total.as_f64() >= MIN_WINDOW_PROBABILITY) {
            return Ok(PseudoLabel {
                locality_cells: probs.len(),
                ..fallback()
            });
        }

        let spec = self.map.spec();
        let mut value = vec![F::zero(); dims];
        let mut lo = vec![F::infinity(); dims];
        let mut hi = vec![F::neg_infinity(); dims];
        for c in &probs {
            for (d, &j) in spec.unflatten(c.cell).iter().enumerate() {
                let center = spec.cell_center(d, j);
                value[d] = value[d] + c.probability * center;
                lo[d] = lo[d].min(center);
                hi[d] = hi[d].max(center);
            }
        }
        for d in 0..dims {
            // rounding must not push the interpolation outside the window
            value[d] = (value[d] / total).max(lo[d]).min(hi[d]);
        }

        let local = probs.iter().map(|c| self.map.density(c.cell)).sum::<F>()
            / F::from_usize_lossy(probs.len());
        let credibility = (local / global) * self.uncertainty_ratio(&p.uncertainty);
        if !credibility.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite credibility for row {}",
                p.input_index
            )));
        }
        Ok(PseudoLabel {
            value,
            credibility,
            source_index: p.input_index,
            locality_cells: probs.len(),
            fallback: false,
        })
    }

    /// Pseudo-label every uncertain prediction. Per-item errors are recorded,
    /// never propagated; output order follows input order.
    pub fn generate_all(&self, uncertain: &[UncertainPrediction<F>]) -> GenerationOutput<F> {
        let results: Vec<Result<PseudoLabel<F>>> =
            uncertain.par_iter().map(|p| self.generate(p)).collect();
        let mut labels = Vec::with_capacity(results.len());
        let mut failures = Vec::new();
        for (p, r) in uncertain.iter().zip(results) {
            match r {
                Ok(l) => labels.push(l),
                Err(e) => failures.push(ItemFailure {
                    source_index: p.input_index,
                    reason: e.to_string(),
                }),
            }
        }
        let summary = summarize(uncertain.len(), &labels, failures.len());
        GenerationOutput {
            labels,
            failures,
            summary,
        }
    }
}

/// Counts and credibility quantiles of a set of generated labels.
pub fn summarize<F: Scalar>(requested: usize, labels: &[PseudoLabel<F>], failed: usize) -> GenerationSummary {
    if labels.is_empty() {
        return GenerationSummary {
            requested,
            failed,
            ..GenerationSummary::default()
        };
    }
    let mut betas: Vec<f64> = labels.iter().map(|l| l.credibility.as_f64()).collect();
    betas.sort_by(f64::total_cmp);
    let n = labels.len();
    GenerationSummary {
        requested,
        generated: n,
        failed,
        fallback_fraction: labels.iter().filter(|l| l.fallback).count() as f64 / n as f64,
        beta_mean: betas.iter().sum::<f64>() / n as f64,
        beta_min: betas[0],
        beta_q25: quantile_sorted(&betas, 0.25),
        beta_median: quantile_sorted(&betas, 0.5),
        beta_q75: quantile_sorted(&betas, 0.75),
        beta_max: betas[n - 1],
    }
}

/// Pseudo-label one uncertain prediction with the Gaussian kernel.
pub fn generate<F: Scalar>(
    map: &LabelDensityMap<F>,
    prediction: &UncertainPrediction<F>,
    error_model: &ErrorModel<F>,
    threshold: &ConfidenceThreshold<F>,
) -> Result<PseudoLabel<F>> {
    PseudoLabelGenerator::new(map, error_model, threshold).generate(prediction)
}

pub fn generate_all<F: Scalar>(
    map: &LabelDensityMap<F>,
    uncertain: &[UncertainPrediction<F>],
    error_model: &ErrorModel<F>,
    threshold: &ConfidenceThreshold<F>,
) -> GenerationOutput<F> {
    PseudoLabelGenerator::new(map, error_model, threshold).generate_all(uncertain)
}

/// CSV audit trail: index, label components, credibility, window size, fallback flag.
pub fn write_pseudo_labels_csv<F: Scalar, W: Write>(labels: &[PseudoLabel<F>], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let dims = labels.first().map_or(1, |l| l.value.len());
    let mut header = vec!["source_index".to_string()];
    header.extend((0..dims).map(|d| format!("pseudo_label_{d}")));
    header.extend(["beta", "window_cells", "fallback"].map(String::from));
    out.write_record(&header)?;
    for l in labels {
        let mut row = vec![l.source_index.to_string()];
        row.extend(l.value.iter().map(|v| v.to_string()));
        row.push(l.credibility.to_string());
        row.push(l.locality_cells.to_string());
        row.push(l.fallback.to_string());
        out.write_record(&row)?;
    }
    out.flush().map_err(|e| Error::io("<pseudo-label csv>", e))
}

pub fn save_pseudo_labels_csv<F: Scalar>(labels: &[PseudoLabel<F>], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_pseudo_labels_csv(labels, file)
}
