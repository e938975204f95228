//! B-spline basis construction and per-subject design matrices.
//!
//! All models share one basis `b(t)`: a `d`-dimensional B-spline of a given
//! degree whose interior knots sit at equally spaced percentiles of the pooled
//! observation times. Out-of-domain times are clamped to the nearest domain
//! endpoint so every design row stays a convex combination (partition of
//! unity) instead of collapsing to zeros.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// A B-spline basis: `dimension` functions of degree `degree` over
/// `[domain.0, domain.1]`, defined by a knot vector with boundary
/// multiplicity `degree + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisConfig {
    pub dimension: usize,
    pub degree: usize,
    pub knots: Vec<f64>,
    pub domain: (f64, f64),
}

/// Design matrix for one subject: rows are `b(t)` for each observation time,
/// with the cached Gram matrix `BᵀB`.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub rows: DMatrix<f64>,
    pub gram: DMatrix<f64>,
}

impl BasisConfig {
    /// Basis with interior knots at equally spaced percentiles of the pooled
    /// observation times of `ds`.
    pub fn from_dataset(ds: &Dataset, dimension: usize, degree: usize) -> Result<Self> {
        let mut pooled: Vec<f64> = ds
            .trajectories
            .iter()
            .flat_map(|t| t.times.iter().copied())
            .collect();
        if pooled.is_empty() {
            return Err(Error::EmptyDataset);
        }
        pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (t_min, t_max) = (pooled[0], pooled[pooled.len() - 1]);
        if t_min == t_max {
            return Err(Error::InvalidArgument(
                "all observation times identical; basis domain is degenerate".into(),
            ));
        }
        if dimension <= degree {
            return Err(Error::InvalidArgument(format!(
                "basis dimension ({dimension}) must exceed degree ({degree})"
            )));
        }
        let n_interior = dimension - degree - 1;
        let mut interior = Vec::with_capacity(n_interior);
        for j in 1..=n_interior {
            let p = j as f64 / (n_interior + 1) as f64;
            let k = quantile_linear(&pooled, p);
            if k <= t_min || k >= t_max {
                return Err(Error::InvalidArgument(format!(
                    "interior knot at percentile {p:.3} falls on the domain boundary"
                )));
            }
            interior.push(k);
        }
        Ok(Self::from_parts(dimension, degree, t_min, t_max, interior))
    }

    /// Basis with equally spaced interior knots on `[t_min, t_max]`.
    pub fn uniform(dimension: usize, degree: usize, t_min: f64, t_max: f64) -> Result<Self> {
        if dimension <= degree {
            return Err(Error::InvalidArgument(format!(
                "basis dimension ({dimension}) must exceed degree ({degree})"
            )));
        }
        if !(t_max > t_min) {
            return Err(Error::InvalidArgument("degenerate basis domain".into()));
        }
        let n_interior = dimension - degree - 1;
        let interior: Vec<f64> = (1..=n_interior)
            .map(|j| t_min + (t_max - t_min) * j as f64 / (n_interior + 1) as f64)
            .collect();
        Ok(Self::from_parts(dimension, degree, t_min, t_max, interior))
    }

    fn from_parts(
        dimension: usize,
        degree: usize,
        t_min: f64,
        t_max: f64,
        interior: Vec<f64>,
    ) -> Self {
        let mut knots = Vec::with_capacity(dimension + degree + 1);
        knots.extend(std::iter::repeat(t_min).take(degree + 1));
        knots.extend(interior);
        knots.extend(std::iter::repeat(t_max).take(degree + 1));
        debug_assert_eq!(knots.len(), dimension + degree + 1);
        BasisConfig {
            dimension,
            degree,
            knots,
            domain: (t_min, t_max),
        }
    }

    /// Evaluates all basis functions at `t` (clamped to the domain).
    pub fn evaluate(&self, t: f64) -> DVector<f64> {
        let d = self.dimension;
        let p = self.degree;
        let t = t.clamp(self.domain.0, self.domain.1);

        // Knot span index k with knots[k] <= t < knots[k+1], restricted to
        // spans of positive length so the right endpoint lands in the last one.
        let mut span = d - 1;
        for k in p..d {
            if t < self.knots[k + 1] {
                span = k;
                break;
            }
        }
        while span > p && self.knots[span] >= self.knots[span + 1] {
            span -= 1;
        }

        // Cox-de Boor recursion for the degree+1 basis functions that are
        // nonzero on this span.
        let mut vals = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        vals[0] = 1.0;
        for j in 1..=p {
            left[j] = t - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let den = right[r + 1] + left[j - r];
                let temp = if den != 0.0 { vals[r] / den } else { 0.0 };
                vals[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            vals[j] = saved;
        }

        let mut row = DVector::zeros(d);
        for (offset, v) in vals.iter().enumerate() {
            row[span - p + offset] = *v;
        }
        row
    }

    /// Builds the design matrix for a vector of observation times.
    pub fn design_matrix(&self, times: &[f64]) -> Result<DesignMatrix> {
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument(
                "non-finite observation time in design matrix".into(),
            ));
        }
        let n = times.len();
        let mut rows = DMatrix::zeros(n, self.dimension);
        for (i, &t) in times.iter().enumerate() {
            rows.set_row(i, &self.evaluate(t).transpose());
        }
        let gram = rows.transpose() * &rows;
        Ok(DesignMatrix { rows, gram })
    }
}

/// Linear-interpolation empirical quantile of a sorted sample.
fn quantile_linear(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}
