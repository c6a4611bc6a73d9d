//! Grid label-density maps.
//!
//! A map covers `[y0, y0 + J*g)` per label dimension with `J = floor((ym - y0) / g)`
//! cells. Each confident prediction contributes the mass of its calibrated
//! instance-label distribution that falls inside each cell; mass outside the
//! grid is dropped. The accumulated map is divided by the number of
//! contributing predictions, so its total is the mean in-range mass.
//!
//! Two-dimensional maps are stored row-major (`index = i0 * J1 + i1`) and use
//! the product of per-dimension masses.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::calibration::ErrorModel;
use crate::distribution::{cell_mass_with, ErrorKernel};
use crate::error::{Error, Result};
use crate::regressor::UncertainPrediction;
use crate::scalar::Scalar;

pub const DEFAULT_GRID_CELLS: usize = 100;
/// Half-width of the default grid margin, in calibrated sigmas.
pub const DEFAULT_RANGE_SIGMAS: f64 = 3.0;
/// Predictions farther than this many sigmas outside the grid are reported.
pub const OUT_OF_RANGE_SIGMAS: f64 = 6.0;

// cell counts that are integral up to rounding are not truncated
const CELL_COUNT_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct GridSpec<F: Scalar> {
    y0: Vec<F>,
    ym: Vec<F>,
    g: Vec<F>,
    cells: Vec<usize>,
}

impl<F: Scalar> GridSpec<F> {
    pub fn new(y0: Vec<F>, ym: Vec<F>, g: Vec<F>) -> Result<Self> {
        let dims = y0.len();
        if !(1..=2).contains(&dims) || ym.len() != dims || g.len() != dims {
            return Err(Error::Config(format!(
                "grid needs 1 or 2 dimensions with matching y0/ym/g lengths (got {}, {}, {})",
                y0.len(),
                ym.len(),
                g.len()
            )));
        }
        let mut cells = Vec::with_capacity(dims);
        for d in 0..dims {
            if !y0[d].is_finite() || !ym[d].is_finite() || !g[d].is_finite() {
                return Err(Error::Config("grid bounds must be finite".into()));
            }
            if !(ym[d] > y0[d]) {
                return Err(Error::Config(format!(
                    "grid dimension {d}: ym ({}) must exceed y0 ({})",
                    ym[d], y0[d]
                )));
            }
            if !(g[d] > F::zero()) {
                return Err(Error::Config(format!("grid size must be positive, got {}", g[d])));
            }
            let j = ((ym[d] - y0[d]) / g[d]).as_f64();
            let j = (j + CELL_COUNT_SLACK * j.max(1.0)).floor();
            if j < 1.0 {
                return Err(Error::Config(format!(
                    "grid dimension {d}: range narrower than one cell"
                )));
            }
            cells.push(j as usize);
        }
        Ok(Self { y0, ym, g, cells })
    }

    /// Grid with `cells` equal cells per dimension spanning `[y0, ym]`.
    pub fn with_cells(y0: Vec<F>, ym: Vec<F>, cells: usize) -> Result<Self> {
        if cells == 0 {
            return Err(Error::Config("grid needs at least one cell".into()));
        }
        let g = y0
            .iter()
            .zip(&ym)
            .map(|(&a, &b)| (b - a) / F::from_usize_lossy(cells))
            .collect();
        Self::new(y0, ym, g)
    }

    /// Default range `[min - 3 max_sigma, max + 3 max_sigma]` over the
    /// confident predictions, split into `cells` cells per dimension.
    pub fn covering(
        confident: &[UncertainPrediction<F>],
        error_model: &ErrorModel<F>,
        cells: usize,
    ) -> Result<Self> {
        let first = confident
            .first()
            .ok_or_else(|| Error::Data("cannot size a grid from an empty confident set".into()))?;
        let dims = first.dims();
        let margin = F::lit(DEFAULT_RANGE_SIGMAS);
        let mut y0 = Vec::with_capacity(dims);
        let mut ym = Vec::with_capacity(dims);
        for d in 0..dims {
            let mut lo = F::infinity();
            let mut hi = F::neg_infinity();
            let mut max_sigma = F::zero();
            for p in confident {
                lo = lo.min(p.prediction[d]);
                hi = hi.max(p.prediction[d]);
                max_sigma = max_sigma.max(error_model.sigma_of(d, p.uncertainty[d]));
            }
            y0.push(lo - margin * max_sigma);
            ym.push(hi + margin * max_sigma);
        }
        Self::with_cells(y0, ym, cells)
    }

    pub fn dims(&self) -> usize {
        self.y0.len()
    }

    pub fn y0(&self) -> &[F] {
        &self.y0
    }

    pub fn ym(&self) -> &[F] {
        &self.ym
    }

    pub fn g(&self) -> &[F] {
        &self.g
    }

    /// Cells per dimension (`J`).
    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn total_cells(&self) -> usize {
        self.cells.iter().product()
    }

    pub fn cell_bounds(&self, dim: usize, j: usize) -> (F, F) {
        let lo = self.y0[dim] + self.g[dim] * F::from_usize_lossy(j);
        (lo, lo + self.g[dim])
    }

    pub fn cell_center(&self, dim: usize, j: usize) -> F {
        self.y0[dim] + self.g[dim] * (F::from_usize_lossy(j) + F::lit(0.5))
    }

    /// Upper edge of the last cell (equals `ym` when the range divides evenly).
    pub fn covered_max(&self, dim: usize) -> F {
        self.cell_bounds(dim, self.cells[dim] - 1).1
    }

    /// Per-dimension indices of a flat cell index.
    pub fn unflatten(&self, flat: usize) -> Vec<usize> {
        match self.dims() {
            1 => vec![flat],
            _ => vec![flat / self.cells[1], flat % self.cells[1]],
        }
    }

    pub fn flatten(&self, idx: &[usize]) -> usize {
        match self.dims() {
            1 => idx[0],
            _ => idx[0] * self.cells[1] + idx[1],
        }
    }

    /// Cell containing `y` in dimension `dim`, if any.
    pub fn locate(&self, dim: usize, y: F) -> Option<usize> {
        let t = (y - self.y0[dim]) / self.g[dim];
        if !(t >= F::zero()) {
            return None;
        }
        let j = t.floor().to_usize()?;
        (j < self.cells[dim]).then_some(j)
    }

    /// Masses of `kernel(mu, sigma)` over every cell of dimension `dim`.
    pub fn dimension_masses(
        &self,
        kernel: ErrorKernel,
        dim: usize,
        mu: F,
        sigma: F,
    ) -> Result<Vec<F>> {
        (0..self.cells[dim])
            .map(|j| {
                let (lo, hi) = self.cell_bounds(dim, j);
                cell_mass_with(kernel, mu, sigma, lo, hi)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LabelDensityMap<F: Scalar> {
    spec: GridSpec<F>,
    densities: Vec<F>,
    normalizer: F,
    count: usize,
    out_of_range: usize,
}

impl<F: Scalar> LabelDensityMap<F> {
    /// Map with explicit densities (used for injected priors and tests).
    pub fn from_densities(spec: GridSpec<F>, densities: Vec<F>) -> Result<Self> {
        if densities.len() != spec.total_cells() {
            return Err(Error::Shape(format!(
                "{} densities for {} cells",
                densities.len(),
                spec.total_cells()
            )));
        }
        if densities.iter().any(|d| !(*d >= F::zero()) || !d.is_finite()) {
            return Err(Error::Data("densities must be finite and non-negative".into()));
        }
        Ok(Self {
            spec,
            densities,
            normalizer: F::one(),
            count: 0,
            out_of_range: 0,
        })
    }

    /// Constant map with unit total mass.
    pub fn uniform(spec: GridSpec<F>) -> Self {
        let n = spec.total_cells();
        let v = F::one() / F::from_usize_lossy(n);
        Self {
            spec,
            densities: vec![v; n],
            normalizer: F::one(),
            count: 0,
            out_of_range: 0,
        }
    }

    pub fn spec(&self) -> &GridSpec<F> {
        &self.spec
    }

    pub fn densities(&self) -> &[F] {
        &self.densities
    }

    pub fn density(&self, flat: usize) -> F {
        self.densities[flat]
    }

    /// Normalizer `D` the accumulated masses were divided by.
    pub fn normalizer(&self) -> F {
        self.normalizer
    }

    /// Number of predictions (or labels) accumulated.
    pub fn count(&self) -> usize {
        self.count
    }

    /// Predictions lying more than six sigmas outside the grid.
    pub fn out_of_range(&self) -> usize {
        self.out_of_range
    }

    pub fn total_mass(&self) -> F {
        self.densities.iter().copied().sum()
    }

    /// Mean density over all cells.
    pub fn mean_density(&self) -> F {
        self.total_mass() / F::from_usize_lossy(self.densities.len())
    }

    /// Write the map as CSV: a metadata header row and values, then one row
    /// per cell with its indices, centre(s), and density.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::WriterBuilder::new().flexible(true).from_writer(w);
        let join = |v: &[F]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";");
        out.write_record(["dims", "y0", "ym", "g", "K"])?;
        out.write_record([
            self.spec.dims().to_string(),
            join(self.spec.y0()),
            join(self.spec.ym()),
            join(self.spec.g()),
            self.count.to_string(),
        ])?;
        if self.spec.dims() == 1 {
            out.write_record(["i", "center", "density"])?;
        } else {
            out.write_record(["i0", "i1", "center0", "center1", "density"])?;
        }
        for (flat, d) in self.densities.iter().enumerate() {
            let idx = self.spec.unflatten(flat);
            let mut row: Vec<String> = idx.iter().map(usize::to_string).collect();
            row.extend(
                idx.iter()
                    .enumerate()
                    .map(|(dim, &j)| self.spec.cell_center(dim, j).to_string()),
            );
            row.push(d.to_string());
            out.write_record(&row)?;
        }
        out.flush().map_err(|e| Error::io("<density csv>", e))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file)
    }
}

/// Accumulate Gaussian instance-label masses of the confident predictions.
pub fn build_map<F: Scalar>(
    confident: &[UncertainPrediction<F>],
    error_model: &ErrorModel<F>,
    spec: &GridSpec<F>,
) -> Result<LabelDensityMap<F>> {
    build_map_with(confident, error_model, spec, ErrorKernel::Gaussian)
}

pub fn build_map_with<F: Scalar>(
    confident: &[UncertainPrediction<F>],
    error_model: &ErrorModel<F>,
    spec: &GridSpec<F>,
    kernel: ErrorKernel,
) -> Result<LabelDensityMap<F>> {
    if confident.is_empty() {
        return Err(Error::Data("cannot build a density map from an empty confident set".into()));
    }
    let dims = spec.dims();
    if confident.iter().any(|p| p.dims() != dims) || error_model.dims() != dims {
        return Err(Error::Shape(format!(
            "grid has {dims} dimensions; predictions or error model disagree"
        )));
    }

    // Canonical order plus run-length grouping makes the sum independent of
    // input order and exact under duplication of the whole set.
    let mut order: Vec<&UncertainPrediction<F>> = confident.iter().collect();
    order.sort_by(|a, b| canonical_cmp(a, b));

    let mut acc = vec![F::zero(); spec.total_cells()];
    let mut out_of_range = 0;
    let mut i = 0;
    while i < order.len() {
        let p = order[i];
        let mut mult = 1;
        while i + mult < order.len() && same_instance(p, order[i + mult]) {
            mult += 1;
        }
        i += mult;

        let sigma = error_model.sigmas(&p.uncertainty);
        let six = F::lit(OUT_OF_RANGE_SIGMAS);
        if (0..dims).any(|d| {
            p.prediction[d] < spec.y0()[d] - six * sigma[d]
                || p.prediction[d] > spec.ym()[d] + six * sigma[d]
        }) {
            out_of_range += mult;
            log::warn!(
                "confident prediction {:?} (row {}) lies outside the grid by more than {OUT_OF_RANGE_SIGMAS} sigma",
                p.prediction.iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
                p.input_index
            );
        }
        let weight = F::from_usize_lossy(mult);
        match dims {
            1 => {
                let m = spec.dimension_masses(kernel, 0, p.prediction[0], sigma[0])?;
                for (a, v) in acc.iter_mut().zip(m) {
                    *a = *a + weight * v;
                }
            }
            _ => {
                let m0 = spec.dimension_masses(kernel, 0, p.prediction[0], sigma[0])?;
                let m1 = spec.dimension_masses(kernel, 1, p.prediction[1], sigma[1])?;
                let width = m1.len();
                for (j0, &a0) in m0.iter().enumerate() {
                    if a0 == F::zero() {
                        continue;
                    }
                    for (j1, &a1) in m1.iter().enumerate() {
                        let cell = &mut acc[j0 * width + j1];
                        *cell = *cell + weight * (a0 * a1);
                    }
                }
            }
        }
    }

    let k = F::from_usize_lossy(confident.len());
    for v in &mut acc {
        *v = *v / k;
    }
    Ok(LabelDensityMap {
        spec: spec.clone(),
        densities: acc,
        normalizer: k,
        count: confident.len(),
        out_of_range,
    })
}

fn canonical_cmp<F: Scalar>(a: &UncertainPrediction<F>, b: &UncertainPrediction<F>) -> Ordering {
    let key = |p: &UncertainPrediction<F>| {
        p.prediction
            .iter()
            .chain(&p.uncertainty)
            .copied()
            .collect::<Vec<F>>()
    };
    let (ka, kb) = (key(a), key(b));
    for (x, y) in ka.iter().zip(&kb) {
        match x.partial_cmp(y) {
            Some(Ordering::Equal) | None => continue,
            Some(o) => return o,
        }
    }
    Ordering::Equal
}

fn same_instance<F: Scalar>(a: &UncertainPrediction<F>, b: &UncertainPrediction<F>) -> bool {
    a.prediction == b.prediction && a.uncertainty == b.uncertainty
}

/// Indicator-function histogram of true labels, normalized by label count.
pub fn build_reference_map<F: Scalar>(labels: ArrayView2<F>, spec: &GridSpec<F>) -> Result<LabelDensityMap<F>> {
    if labels.nrows() == 0 {
        return Err(Error::Data("cannot build a reference map from no labels".into()));
    }
    if labels.ncols() != spec.dims() {
        return Err(Error::Shape(format!(
            "labels have {} columns, grid has {} dimensions",
            labels.ncols(),
            spec.dims()
        )));
    }
    let mut counts = vec![0usize; spec.total_cells()];
    for row in labels.rows() {
        let idx: Option<Vec<usize>> = (0..spec.dims()).map(|d| spec.locate(d, row[d])).collect();
        if let Some(idx) = idx {
            counts[spec.flatten(&idx)] += 1;
        }
    }
    let n = F::from_usize_lossy(labels.nrows());
    Ok(LabelDensityMap {
        spec: spec.clone(),
        densities: counts.into_iter().map(|c| F::from_usize_lossy(c) / n).collect(),
        normalizer: n,
        count: labels.nrows(),
        out_of_range: 0,
    })
}

/// Absolute density difference summed over the cells of a shared grid:
/// 0 for identical maps, 2 for disjoint normalized ones.
pub fn map_mae<F: Scalar>(estimated: &LabelDensityMap<F>, reference: &LabelDensityMap<F>) -> Result<F> {
    if estimated.spec.cells != reference.spec.cells
        || estimated.spec.y0 != reference.spec.y0
        || estimated.spec.g != reference.spec.g
    {
        return Err(Error::Shape("density maps are defined on different grids".into()));
    }
    let total = estimated
        .densities
        .iter()
        .zip(&reference.densities)
        .map(|(a, b)| (*a - *b).abs())
        .sum::<F>();
    Ok(total)
}
