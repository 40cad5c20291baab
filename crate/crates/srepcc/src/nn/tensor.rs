//! Sparse tensors: coordinate lists with dense per-point feature rows.

use crate::morton;
use crate::scalar::Scalar;
use crate::{Error, Result};

/// Row-major feature matrix (one row per occupied coordinate).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatMat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> FeatMat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        FeatMat { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols);
        FeatMat { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        FeatMat { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> FeatMat<T> {
        FeatMat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn select_rows(&self, idx: &[u32]) -> FeatMat<T> {
        let mut out = FeatMat::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i as usize));
        }
        out
    }

    pub fn to_f64(&self) -> FeatMat<f64> {
        FeatMat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v.dbl()).collect() }
    }

    pub fn from_f64_mat(m: &FeatMat<f64>) -> FeatMat<T> {
        FeatMat { rows: m.rows, cols: m.cols, data: m.data.iter().map(|&v| T::from_dbl(v)).collect() }
    }
}

/// Open-addressing map from packed Morton keys to row indices. Fixed probing
/// order makes any iteration during kernel-map construction reproducible.
pub struct CoordMap {
    keys: Vec<u64>,
    vals: Vec<u32>,
    mask: usize,
}

const EMPTY: u64 = u64::MAX;

impl CoordMap {
    pub fn build(coords: &[[i64; 3]]) -> CoordMap {
        let cap = (coords.len() * 2).next_power_of_two().max(8);
        let mut m = CoordMap { keys: vec![EMPTY; cap], vals: vec![0; cap], mask: cap - 1 };
        for (i, &c) in coords.iter().enumerate() {
            m.insert(morton::key(c), i as u32);
        }
        m
    }

    #[inline]
    fn slot(&self, key: u64) -> usize {
        (key.wrapping_mul(0x9E3779B97F4A7C15) >> 32) as usize & self.mask
    }

    fn insert(&mut self, key: u64, val: u32) {
        let mut s = self.slot(key);
        loop {
            if self.keys[s] == EMPTY {
                self.keys[s] = key;
                self.vals[s] = val;
                return;
            }
            debug_assert_ne!(self.keys[s], key, "duplicate coordinate");
            s = (s + 1) & self.mask;
        }
    }

    #[inline]
    pub fn get(&self, c: [i64; 3]) -> Option<u32> {
        let key = morton::key(c);
        let mut s = self.slot(key);
        loop {
            let k = self.keys[s];
            if k == key {
                return Some(self.vals[s]);
            }
            if k == EMPTY {
                return None;
            }
            s = (s + 1) & self.mask;
        }
    }
}

/// Coordinates with features, in canonical (Morton) row order.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor<T> {
    pub coords: Vec<[i64; 3]>,
    pub feats: FeatMat<T>,
    pub stride: i64,
}

impl<T: Scalar> SparseTensor<T> {
    /// Validates the full invariant set: row count match, stride alignment,
    /// distinct coordinates, canonical order.
    pub fn new(coords: Vec<[i64; 3]>, feats: FeatMat<T>, stride: i64) -> Result<Self> {
        if coords.len() != feats.rows() {
            return Err(Error::Invariant(format!(
                "{} coordinates but {} feature rows",
                coords.len(),
                feats.rows()
            )));
        }
        if stride < 1 {
            return Err(Error::Invariant(format!("stride {stride} must be positive")));
        }
        let mut prev = None;
        for &c in &coords {
            if c.iter().any(|&v| v % stride != 0) {
                return Err(Error::Invariant(format!("coordinate {c:?} not aligned to stride {stride}")));
            }
            let k = morton::key(c);
            if let Some(p) = prev {
                if k <= p {
                    return Err(Error::Invariant(format!("coordinates not in canonical order at {c:?}")));
                }
            }
            prev = Some(k);
        }
        Ok(SparseTensor { coords, feats, stride })
    }

    /// Sorts rows into canonical order first; duplicate coordinates are an error.
    pub fn from_unsorted(coords: Vec<[i64; 3]>, feats: FeatMat<T>, stride: i64) -> Result<Self> {
        let order = morton::argsort(&coords);
        let sorted: Vec<[i64; 3]> = order.iter().map(|&i| coords[i as usize]).collect();
        let f = feats.select_rows(&order);
        SparseTensor::new(sorted, f, stride)
    }

    /// Single constant-valued feature channel on the given coordinates.
    pub fn occupancy(coords: Vec<[i64; 3]>, stride: i64) -> Result<Self> {
        let n = coords.len();
        SparseTensor::new(coords, FeatMat::filled(n, 1, T::one()), stride)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.feats.cols()
    }

    pub fn select(&self, idx: &[u32]) -> SparseTensor<T> {
        debug_assert!(idx.windows(2).all(|w| w[0] < w[1]), "selection must be ascending");
        SparseTensor {
            coords: idx.iter().map(|&i| self.coords[i as usize]).collect(),
            feats: self.feats.select_rows(idx),
            stride: self.stride,
        }
    }
}
