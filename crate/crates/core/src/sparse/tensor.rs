use std::collections::HashSet;
use std::sync::Arc;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Cell index `(h, w, l)` over (radius, azimuth, height).
pub type Coord = [usize; 3];

/// Active sites with per-site feature rows over a bounded 3D grid.
///
/// Coordinates are shared behind an `Arc` so layers that keep the active set
/// (submanifold convolutions, normalization, activations) reuse it.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor {
    coords: Arc<[Coord]>,
    features: Array2<f64>,
    shape: [usize; 3],
}

impl SparseTensor {
    /// Validating constructor: coordinates unique and in bounds, one feature row per site.
    pub fn new(coords: Vec<Coord>, features: Array2<f64>, shape: [usize; 3]) -> Result<Self> {
        if features.nrows() != coords.len() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} sites",
                features.nrows(),
                coords.len()
            )));
        }
        let mut seen = HashSet::with_capacity(coords.len());
        for c in &coords {
            if (0..3).any(|a| c[a] >= shape[a]) {
                return Err(Error::Shape(format!("site {c:?} outside shape {shape:?}")));
            }
            if !seen.insert(*c) {
                return Err(Error::Shape(format!("duplicate site {c:?}")));
            }
        }
        Ok(SparseTensor {
            coords: coords.into(),
            features,
            shape,
        })
    }

    /// Builds a tensor on an already-validated coordinate set.
    pub fn from_shared(coords: Arc<[Coord]>, features: Array2<f64>, shape: [usize; 3]) -> Result<Self> {
        if features.nrows() != coords.len() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} sites",
                features.nrows(),
                coords.len()
            )));
        }
        Ok(SparseTensor {
            coords,
            features,
            shape,
        })
    }

    pub fn empty(channels: usize, shape: [usize; 3]) -> Self {
        SparseTensor {
            coords: Vec::new().into(),
            features: Array2::zeros((0, channels)),
            shape,
        }
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn shared_coords(&self) -> &Arc<[Coord]> {
        &self.coords
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn into_features(self) -> Array2<f64> {
        self.features
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn num_sites(&self) -> usize {
        self.coords.len()
    }

    pub fn channels(&self) -> usize {
        self.features.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Same sites, new features.
    pub fn with_features(&self, features: Array2<f64>) -> Result<Self> {
        SparseTensor::from_shared(self.coords.clone(), features, self.shape)
    }

    /// True when both tensors list the same sites in the same order.
    pub fn same_sites(&self, other: &SparseTensor) -> bool {
        self.shape == other.shape
            && (Arc::ptr_eq(&self.coords, &other.coords) || self.coords == other.coords)
    }

    /// New site `i` is old site `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> SparseTensor {
        let coords: Vec<Coord> = perm.iter().map(|&i| self.coords[i]).collect();
        let features = self.features.select(ndarray::Axis(0), perm);
        SparseTensor {
            coords: coords.into(),
            features,
            shape: self.shape,
        }
    }

    /// Row of the site at `coord`, if active.
    pub fn feature_at(&self, coord: Coord) -> Option<ndarray::ArrayView1<'_, f64>> {
        self.coords
            .iter()
            .position(|c| *c == coord)
            .map(|i| self.features.row(i))
    }
}
