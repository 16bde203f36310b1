//! Point clouds: ordered lists of points in 2 or 3 dimensions.

use crate::error::{Error, Result};

/// An ordered list of `n` points in `dim` dimensions (dim ∈ {2, 3}),
/// stored as a flat row-major coordinate buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    dim: usize,
    coords: Vec<f64>,
}

impl PointCloud {
    /// Builds a cloud from a flat coordinate buffer. `coords.len()` must be
    /// a multiple of `dim`.
    pub fn from_flat(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::invalid(format!("point dimension must be 2 or 3, got {dim}")));
        }
        if coords.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "coordinate buffer length {} is not a multiple of dim {dim}",
                coords.len()
            )));
        }
        Ok(Self { dim, coords })
    }

    pub fn from_points3(points: &[[f64; 3]]) -> Self {
        let mut coords = Vec::with_capacity(points.len() * 3);
        for p in points {
            coords.extend_from_slice(p);
        }
        Self { dim: 3, coords }
    }

    pub fn from_points2(points: &[[f64; 2]]) -> Self {
        let mut coords = Vec::with_capacity(points.len() * 2);
        for p in points {
            coords.extend_from_slice(p);
        }
        Self { dim: 2, coords }
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::from_flat(dim, Vec::new())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn point_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.coords[i * self.dim..(i + 1) * self.dim]
    }

    /// Point as a fixed 3-array; only valid for 3-d clouds.
    pub fn point3(&self, i: usize) -> [f64; 3] {
        debug_assert_eq!(self.dim, 3);
        let p = self.point(i);
        [p[0], p[1], p[2]]
    }

    pub fn push(&mut self, p: &[f64]) {
        debug_assert_eq!(p.len(), self.dim);
        self.coords.extend_from_slice(p);
    }

    pub fn iter_points(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.coords
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.coords
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.coords
    }

    /// Axis-aligned bounding box as (min, max) per dimension.
    pub fn bounds(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        if self.is_empty() {
            return None;
        }
        let mut lo = self.point(0).to_vec();
        let mut hi = lo.clone();
        for p in self.iter_points() {
            for d in 0..self.dim {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        Some((lo, hi))
    }
}

/// Euclidean helpers used across modules.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_construction_checks_dim() {
        assert!(PointCloud::from_flat(4, vec![0.0; 8]).is_err());
        assert!(PointCloud::from_flat(3, vec![0.0; 8]).is_err());
        let c = PointCloud::from_flat(2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.point(1), &[3.0, 4.0]);
    }

    #[test]
    fn bounds_cover_all_points() {
        let c = PointCloud::from_points3(&[[0.0, -1.0, 2.0], [3.0, 5.0, -2.0]]);
        let (lo, hi) = c.bounds().unwrap();
        assert_eq!(lo, vec![0.0, -1.0, -2.0]);
        assert_eq!(hi, vec![3.0, 5.0, 2.0]);
    }
}
