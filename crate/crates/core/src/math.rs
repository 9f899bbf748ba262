//! Dense matrices, index masks, and the vector primitives the heads build on.
//!
//! All reductions run in ascending index order with plain left-to-right
//! accumulation, so identical inputs give bitwise identical outputs on
//! every code path that shares these helpers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms at or below this are treated as zero vectors.
pub const EPS_NORM: f64 = 1e-30;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// New matrix holding the listed rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> DenseMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        DenseMatrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }
}

/// A sorted set of retained dimensions out of `source_dim`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IndexSet {
    source_dim: usize,
    indices: Vec<usize>,
}

impl IndexSet {
    /// Builds a set from arbitrary-order indices; duplicates and
    /// out-of-range entries are rejected.
    pub fn new(source_dim: usize, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        if indices.is_empty() {
            return Err(Error::config("index set must not be empty"));
        }
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("index set contains duplicates"));
        }
        if let Some(&last) = indices.last() {
            if last >= source_dim {
                return Err(Error::DimensionMismatch {
                    expected: source_dim,
                    actual: last + 1,
                });
            }
        }
        Ok(Self {
            source_dim,
            indices,
        })
    }

    /// Every dimension of `dim`.
    pub fn full(dim: usize) -> Self {
        Self {
            source_dim: dim,
            indices: (0..dim).collect(),
        }
    }

    #[inline]
    pub fn source_dim(&self) -> usize {
        self.source_dim
    }

    #[inline]
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    /// Always false for a constructed set; present for API symmetry.
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.indices.len() == self.source_dim
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    /// Dimensions not in the set; `None` when the set is full.
    pub fn complement(&self) -> Option<IndexSet> {
        let rest: Vec<usize> = (0..self.source_dim).filter(|&i| !self.contains(i)).collect();
        if rest.is_empty() {
            None
        } else {
            Some(IndexSet {
                source_dim: self.source_dim,
                indices: rest,
            })
        }
    }

    /// 0/1 indicator vector of length `source_dim`.
    pub fn to_indicator(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.source_dim];
        for &i in &self.indices {
            out[i] = 1.0;
        }
        out
    }

    pub fn jaccard(&self, other: &IndexSet) -> f64 {
        let (mut a, mut b, mut inter) = (0, 0, 0);
        while a < self.len() && b < other.len() {
            match self.indices[a].cmp(&other.indices[b]) {
                std::cmp::Ordering::Less => a += 1,
                std::cmp::Ordering::Greater => b += 1,
                std::cmp::Ordering::Equal => {
                    inter += 1;
                    a += 1;
                    b += 1;
                }
            }
        }
        inter as f64 / (self.len() + other.len() - inter) as f64
    }

    fn check(&self, dim: usize) -> Result<()> {
        if self.source_dim != dim {
            return Err(Error::DimensionMismatch {
                expected: self.source_dim,
                actual: dim,
            });
        }
        Ok(())
    }
}

#[inline]
pub fn inner(u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    let mut acc = 0.0;
    for (a, b) in u.iter().zip(v) {
        acc += a * b;
    }
    acc
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    inner(v, v).sqrt()
}

/// `v / ‖v‖`, refusing vectors whose norm is at or below [`EPS_NORM`].
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > EPS_NORM) {
        return Err(Error::NormUnderflow { norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Entries of `v` at the mask's indices, in ascending index order.
pub fn gather(v: &[f64], mask: &IndexSet) -> Result<Vec<f64>> {
    mask.check(v.len())?;
    Ok(mask.indices.iter().map(|&i| v[i]).collect())
}

/// Inverse of [`gather`]: writes `sub` into a zero vector of `source_dim`.
pub fn scatter(sub: &[f64], mask: &IndexSet) -> Result<Vec<f64>> {
    if sub.len() != mask.len() {
        return Err(Error::DimensionMismatch {
            expected: mask.len(),
            actual: sub.len(),
        });
    }
    let mut out = vec![0.0; mask.source_dim];
    for (&i, &x) in mask.indices.iter().zip(sub) {
        out[i] = x;
    }
    Ok(out)
}

/// `Σ_{k∈mask} u[k]·v[k]`, accumulated in ascending index order.
pub fn masked_inner(u: &[f64], v: &[f64], mask: &IndexSet) -> Result<f64> {
    mask.check(u.len())?;
    mask.check(v.len())?;
    let mut acc = 0.0;
    for &k in &mask.indices {
        acc += u[k] * v[k];
    }
    Ok(acc)
}

/// Elementwise product with the mask's 0/1 indicator.
pub fn apply_mask(v: &[f64], mask: &IndexSet) -> Result<Vec<f64>> {
    mask.check(v.len())?;
    let mut out = vec![0.0; v.len()];
    for &k in &mask.indices {
        out[k] = v[k];
    }
    Ok(out)
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            actual: v.len(),
        });
    }
    let (nu, nv) = (norm(u), norm(v));
    if !(nu > EPS_NORM) {
        return Err(Error::NormUnderflow { norm: nu });
    }
    if !(nv > EPS_NORM) {
        return Err(Error::NormUnderflow { norm: nv });
    }
    Ok((inner(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

pub fn euclidean(u: &[f64], v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (a, b) in u.iter().zip(v) {
        let d = a - b;
        acc += d * d;
    }
    acc.sqrt()
}
