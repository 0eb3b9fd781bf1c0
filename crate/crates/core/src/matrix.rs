//! Small dense square matrices.
//!
//! Everything in this crate works on K×K tables with K in the tens, so a flat
//! row-major `Vec<f64>` is all the storage we need.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

/// Row-major K×K matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SquareMatrix {
    k: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(k: usize) -> Self {
        Self {
            k,
            data: vec![0.0; k * k],
        }
    }

    pub fn identity(k: usize) -> Self {
        let mut m = Self::zeros(k);
        for i in 0..k {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Every entry equal to `value`.
    pub fn filled(k: usize, value: f64) -> Self {
        Self {
            k,
            data: vec![value; k * k],
        }
    }

    /// Builds a matrix from rows. Returns `None` when the rows are ragged or
    /// the row count does not match the row length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Option<Self> {
        let k = rows.len();
        let mut data = Vec::with_capacity(k * k);
        for r in rows {
            let r = r.as_ref();
            if r.len() != k {
                return None;
            }
            data.extend_from_slice(r);
        }
        Some(Self { k, data })
    }

    /// Wraps a flat row-major buffer of length `k * k`.
    pub fn from_flat(k: usize, data: Vec<f64>) -> Option<Self> {
        (data.len() == k * k).then_some(Self { k, data })
    }

    pub fn from_fn(k: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(k * k);
        for i in 0..k {
            for j in 0..k {
                data.push(f(i, j));
            }
        }
        Self { k, data }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let k = self.k;
        &mut self.data[i * k..(i + 1) * k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.k.max(1))
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.k, |i, j| self[(j, i)])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            k: self.k,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Entrywise `self + scale * other`.
    pub fn add_scaled(&self, other: &Self, scale: f64) -> Self {
        assert_eq!(self.k, other.k, "dimension mismatch");
        Self {
            k: self.k,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + scale * b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add_scaled(other, -1.0)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| s * v)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.k).map(|i| self[(i, i)]).collect()
    }

    /// `(M + Mᵀ) / 2`.
    pub fn symmetric_part(&self) -> Self {
        Self::from_fn(self.k, |i, j| 0.5 * (self[(i, j)] + self[(j, i)]))
    }

    /// `(M − Mᵀ) / 2`.
    pub fn antisymmetric_part(&self) -> Self {
        Self::from_fn(self.k, |i, j| 0.5 * (self[(i, j)] - self[(j, i)]))
    }

    /// Strict upper-triangle entries in row-major order.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.k * self.k.saturating_sub(1) / 2);
        for i in 0..self.k {
            for j in i + 1..self.k {
                out.push(self[(i, j)]);
            }
        }
        out
    }

    /// Applies the same permutation to rows and columns:
    /// `out[(i, j)] = self[(perm[i], perm[j])]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.k);
        Self::from_fn(self.k, |i, j| self[(perm[i], perm[j])])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.k, other.k);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Index<(usize, usize)> for SquareMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.k + j]
    }
}

impl IndexMut<(usize, usize)> for SquareMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.k + j]
    }
}
