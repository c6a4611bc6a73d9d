//! Instance-label distributions and their interval masses.
//!
//! Cell masses are computed as differences of cumulative functions. For
//! intervals lying in the upper tail the survival function is differenced
//! instead, which keeps full relative precision far from the mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Standard normal cumulative distribution function.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

/// Standard normal survival function `1 - cdf(z)`.
pub fn std_normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / SQRT_2)
}

pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Shape of the per-prediction label distribution.
///
/// Both kernels are parameterised by their standard deviation, so a calibrated
/// error curve can drive either one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKernel {
    #[default]
    Gaussian,
    Laplace,
}

impl ErrorKernel {
    /// Probability mass of the kernel centred at `mu` with standard deviation
    /// `sigma` on `[lo, hi)`.
    pub fn interval_mass(self, mu: f64, sigma: f64, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return 0.0;
        }
        match self {
            ErrorKernel::Gaussian => {
                let a = (lo - mu) / sigma;
                let b = (hi - mu) / sigma;
                if a >= 0.0 {
                    std_normal_sf(a) - std_normal_sf(b)
                } else {
                    std_normal_cdf(b) - std_normal_cdf(a)
                }
            }
            ErrorKernel::Laplace => {
                let scale = sigma / SQRT_2;
                let a = (lo - mu) / scale;
                let b = (hi - mu) / scale;
                // both tails handled through exp of a non-positive argument
                let lower = |t: f64| 0.5 * t.min(0.0).exp();
                let upper = |t: f64| 0.5 * (-t.max(0.0)).exp();
                if a >= 0.0 {
                    upper(a) - upper(b)
                } else if b <= 0.0 {
                    lower(b) - lower(a)
                } else {
                    (1.0 - upper(b)) - lower(a)
                }
            }
        }
    }

    /// Density at `y`.
    pub fn density(self, mu: f64, sigma: f64, y: f64) -> f64 {
        match self {
            ErrorKernel::Gaussian => std_normal_pdf((y - mu) / sigma) / sigma,
            ErrorKernel::Laplace => {
                let scale = sigma / SQRT_2;
                (-(y - mu).abs() / scale).exp() / (2.0 * scale)
            }
        }
    }
}

/// Gaussian probability mass of `Normal(mu, sigma)` on `[cell_lo, cell_hi)`.
pub fn cell_mass<F: Scalar>(mu: F, sigma: F, cell_lo: F, cell_hi: F) -> Result<F> {
    cell_mass_with(ErrorKernel::Gaussian, mu, sigma, cell_lo, cell_hi)
}

pub fn cell_mass_with<F: Scalar>(
    kernel: ErrorKernel,
    mu: F,
    sigma: F,
    cell_lo: F,
    cell_hi: F,
) -> Result<F> {
    if !(sigma > F::zero()) || !sigma.is_finite() {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    if !mu.is_finite() || !cell_lo.is_finite() || !cell_hi.is_finite() {
        return Err(Error::Domain("non-finite cell bounds or mean".into()));
    }
    let m = kernel.interval_mass(mu.as_f64(), sigma.as_f64(), cell_lo.as_f64(), cell_hi.as_f64());
    Ok(F::lit(m.max(0.0)))
}
