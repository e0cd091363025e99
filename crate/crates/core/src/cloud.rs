use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// A weighted discrete probability measure on R^d.
///
/// Points are stored row-wise (`n x d`). Weights are strictly positive and sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Array2<f64>,
    weights: Array1<f64>,
}

impl PointCloud {
    pub fn new(points: Array2<f64>, weights: Array1<f64>) -> Result<Self> {
        let (n, d) = points.dim();
        if n == 0 || d == 0 {
            return Err(Error::invalid(format!("point cloud must be non-empty, got {n}x{d}")));
        }
        if weights.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: weights.len() });
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point coordinates".into()));
        }
        if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::invalid("weights must be positive and finite"));
        }
        let total: f64 = weights.sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::invalid(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { points, weights })
    }

    /// Equal weights `1/n` on every point.
    pub fn uniform(points: Array2<f64>) -> Result<Self> {
        let n = points.nrows();
        if n == 0 {
            return Err(Error::invalid("point cloud must be non-empty"));
        }
        Self::new(points, Array1::from_elem(n, 1.0 / n as f64))
    }

    pub fn dirac(point: &[f64]) -> Result<Self> {
        let points = Array2::from_shape_vec((1, point.len()), point.to_vec())
            .map_err(|e| Error::invalid(e.to_string()))?;
        Self::new(points, Array1::ones(1))
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn weights(&self) -> ArrayView1<'_, f64> {
        self.weights.view()
    }

    pub fn point(&self, i: usize) -> ArrayView1<'_, f64> {
        self.points.row(i)
    }

    pub fn into_points(self) -> Array2<f64> {
        self.points
    }

    /// Replaces the support, keeping the weights.
    pub fn with_points(&self, points: Array2<f64>) -> Result<Self> {
        Self::new(points, self.weights.clone())
    }

    pub(crate) fn check_same_dim(&self, other: &PointCloud) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: other.dim() });
        }
        Ok(())
    }
}

/// Largest Euclidean distance between any two points of the given clouds.
pub fn diameter(clouds: &[ArrayView2<'_, f64>]) -> f64 {
    let all: Vec<ArrayView1<'_, f64>> =
        clouds.iter().flat_map(|c| c.axis_iter(Axis(0))).collect();
    let mut best = 0.0f64;
    for (i, a) in all.iter().enumerate() {
        for b in &all[i + 1..] {
            let d2: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
            best = best.max(d2);
        }
    }
    best.sqrt()
}
