use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Finite sample set in ℝᵈ, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<f64>,
    pub index: Option<usize>,
}

impl EmpiricalMeasure {
    pub fn new(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.is_empty() || !points.len().is_multiple_of(dim) {
            return Err(Error::InvalidArgument(format!(
                "a measure needs at least one point of positive dimension, got {} values in dimension {dim}",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sample {} has a non-finite coordinate", i / dim)));
        }
        Ok(Self { dim, points, index: None })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidArgument("rows have differing dimensions".into()));
        }
        Self::new(dim, rows.concat())
    }

    pub fn with_index(mut self, index: usize) -> Self {
        self.index = Some(index);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.len(), self.dim, self.points.clone()).expect("consistent by construction")
    }

    /// Rows `indices` as a `[len, dim]` tensor.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let data = indices.iter().flat_map(|&i| self.point(i).iter().copied()).collect();
        Tensor::matrix(indices.len(), self.dim, data).expect("consistent by construction")
    }

    /// `count` distinct rows when available, otherwise rows with replacement.
    pub fn minibatch<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Tensor {
        let n = self.len();
        let idx: Vec<usize> = if count <= n {
            sample(rng, n, count).into_vec()
        } else {
            (0..count).map(|_| rng.gen_range(0..n)).collect()
        };
        self.gather(&idx)
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for i in 0..self.len() {
            for (a, b) in m.iter_mut().zip(self.point(i)) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.len() as f64);
        m
    }

    /// Axis-aligned bounding box as `(min, max)` per coordinate.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        (0..self.dim)
            .map(|c| {
                (0..self.len()).map(|i| self.point(i)[c]).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    (lo.min(v), hi.max(v))
                })
            })
            .collect()
    }
}
