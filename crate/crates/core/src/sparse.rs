//! Compressed sparse row storage for the transition matrices.
//!
//! The transport matrices have a handful of entries per row (a three-point
//! stencil for pipe segments, a few inflows for junctions and tanks), so a
//! plain CSR layout with sorted column indices covers everything the
//! dynamics, observability and estimation code needs.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::{self, Write};

use nalgebra::DMatrix;

/// Sparse vector with strictly increasing indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseVec {
    dim: usize,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseVec {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Unit vector `e_index`.
    pub fn unit(dim: usize, index: usize) -> Self {
        assert!(index < dim, "unit index {index} out of range {dim}");
        Self {
            dim,
            indices: vec![index],
            values: vec![1.0],
        }
    }

    /// Builds a vector from parallel index/value arrays. Indices must be
    /// strictly increasing and below `dim`.
    pub fn from_parts(dim: usize, indices: Vec<usize>, values: Vec<f64>) -> Self {
        assert_eq!(indices.len(), values.len());
        debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        debug_assert!(indices.last().is_none_or(|&i| i < dim));
        Self {
            dim,
            indices,
            values,
        }
    }

    pub fn from_dense(values: &[f64]) -> Self {
        let (indices, vals) = values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i, *v))
            .unzip();
        Self {
            dim: values.len(),
            indices,
            values: vals,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (i, v) in self.iter() {
            out[i] = v;
        }
        out
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    /// Moves every index by `offset` and widens the dimension to `dim`.
    pub fn shifted(&self, offset: usize, dim: usize) -> Self {
        assert!(offset + self.dim <= dim);
        Self {
            dim,
            indices: self.indices.iter().map(|i| i + offset).collect(),
            values: self.values.clone(),
        }
    }

    pub fn dot(&self, other: &SparseVec) -> f64 {
        debug_assert_eq!(self.dim, other.dim);
        let (mut a, mut b) = (0, 0);
        let mut acc = 0.0;
        while a < self.indices.len() && b < other.indices.len() {
            match self.indices[a].cmp(&other.indices[b]) {
                std::cmp::Ordering::Less => a += 1,
                std::cmp::Ordering::Greater => b += 1,
                std::cmp::Ordering::Equal => {
                    acc += self.values[a] * other.values[b];
                    a += 1;
                    b += 1;
                }
            }
        }
        acc
    }

    /// Dot product with a diagonal weight: `Σ self_i * w_i * other_i`.
    pub fn weighted_dot(&self, other: &SparseVec, weight: &[f64]) -> f64 {
        let (mut a, mut b) = (0, 0);
        let mut acc = 0.0;
        while a < self.indices.len() && b < other.indices.len() {
            match self.indices[a].cmp(&other.indices[b]) {
                std::cmp::Ordering::Less => a += 1,
                std::cmp::Ordering::Greater => b += 1,
                std::cmp::Ordering::Equal => {
                    let i = self.indices[a];
                    acc += self.values[a] * weight[i] * other.values[b];
                    a += 1;
                    b += 1;
                }
            }
        }
        acc
    }

    /// Concatenates vectors that occupy disjoint, ordered index ranges.
    pub fn concat(dim: usize, parts: &[SparseVec]) -> Self {
        let mut indices = Vec::with_capacity(parts.iter().map(|p| p.nnz()).sum());
        let mut values = Vec::with_capacity(indices.capacity());
        for part in parts {
            debug_assert!(indices
                .last()
                .zip(part.indices.first())
                .is_none_or(|(a, b)| a < b));
            indices.extend_from_slice(&part.indices);
            values.extend_from_slice(&part.values);
        }
        Self::from_parts(dim, indices, values)
    }
}

/// Square or rectangular matrix in compressed sparse row form.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from `(row, col, value)` triplets. Duplicate
    /// positions are summed; exact zeros are kept out of the structure.
    pub fn from_triplets(n_rows: usize, n_cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|a| (a.0, a.1));
        let mut indptr = vec![0usize; n_rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < n_rows && c < n_cols, "triplet ({r}, {c}) outside {n_rows}x{n_cols}");
            if last == Some((r, c)) {
                *values.last_mut().expect("duplicate follows an entry") += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..n_rows {
            indptr[r + 1] += indptr[r];
        }
        let mut m = Self {
            n_rows,
            n_cols,
            indptr,
            indices,
            values,
        };
        m.drop_zeros();
        m
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n_rows: n,
            n_cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut t = Vec::new();
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                if m[(i, j)] != 0.0 {
                    t.push((i, j, m[(i, j)]));
                }
            }
        }
        Self::from_triplets(m.nrows(), m.ncols(), t)
    }

    fn drop_zeros(&mut self) {
        if self.values.iter().all(|v| *v != 0.0) {
            return;
        }
        let mut indptr = vec![0usize; self.n_rows + 1];
        let mut indices = Vec::with_capacity(self.indices.len());
        let mut values = Vec::with_capacity(self.values.len());
        for r in 0..self.n_rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                if self.values[k] != 0.0 {
                    indices.push(self.indices[k]);
                    values.push(self.values[k]);
                }
            }
            indptr[r + 1] = indices.len();
        }
        self.indptr = indptr;
        self.indices = indices;
        self.values = values;
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Fraction of stored entries, `nnz / (rows * cols)`.
    pub fn density(&self) -> f64 {
        if self.n_rows == 0 || self.n_cols == 0 {
            return 0.0;
        }
        self.nnz() as f64 / (self.n_rows as f64 * self.n_cols as f64)
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.indptr[r]..self.indptr[r + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        cols.binary_search(&c).map_or(0.0, |k| vals[k])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `A x` for a dense vector.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_cols);
        (0..self.n_rows)
            .map(|r| {
                let (cols, vals) = self.row(r);
                cols.iter().zip(vals).map(|(c, v)| v * x[*c]).sum()
            })
            .collect()
    }

    /// `uᵀ A` for a dense row vector `u`.
    pub fn left_mul_dense(&self, u: &[f64]) -> Vec<f64> {
        assert_eq!(u.len(), self.n_rows);
        let mut out = vec![0.0; self.n_cols];
        for (r, ur) in u.iter().enumerate() {
            if *ur == 0.0 {
                continue;
            }
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                out[*c] += ur * v;
            }
        }
        out
    }

    /// `uᵀ A` for a sparse row vector, accumulated through `scratch`.
    pub fn left_mul_sparse(&self, u: &SparseVec, scratch: &mut Accumulator) -> SparseVec {
        assert_eq!(u.dim(), self.n_rows);
        scratch.reset(self.n_cols);
        for (r, ur) in u.iter() {
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                scratch.add(*c, ur * v);
            }
        }
        scratch.drain()
    }

    /// `A B` for a dense right-hand side.
    pub fn mul_dense(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(b.nrows(), self.n_cols);
        let mut out = DMatrix::zeros(self.n_rows, b.ncols());
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                for j in 0..b.ncols() {
                    out[(r, j)] += v * b[(*c, j)];
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_rows, self.n_cols);
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                out[(r, *c)] = *v;
            }
        }
        out
    }

    /// Hash of the shape, structure and exact value bits.
    pub fn content_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.n_rows.hash(&mut h);
        self.n_cols.hash(&mut h);
        self.indptr.hash(&mut h);
        self.indices.hash(&mut h);
        for v in &self.values {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Coordinate listing, one `row col value` line per stored entry.
    pub fn write_coordinate<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "% {} {} {}", self.n_rows, self.n_cols, self.nnz())?;
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                writeln!(out, "{r} {c} {v:e}")?;
            }
        }
        Ok(())
    }
}

/// Dense scratch buffer for sparse accumulation with touched-index tracking.
#[derive(Debug, Default)]
pub struct Accumulator {
    values: Vec<f64>,
    seen: Vec<bool>,
    touched: Vec<usize>,
}

impl Accumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
            seen: vec![false; dim],
            touched: Vec::new(),
        }
    }

    fn reset(&mut self, dim: usize) {
        if self.values.len() != dim {
            *self = Self::new(dim);
        } else {
            for &i in &self.touched {
                self.values[i] = 0.0;
                self.seen[i] = false;
            }
            self.touched.clear();
        }
    }

    fn add(&mut self, i: usize, v: f64) {
        if !self.seen[i] {
            self.seen[i] = true;
            self.touched.push(i);
        }
        self.values[i] += v;
    }

    fn drain(&mut self) -> SparseVec {
        self.touched.sort_unstable();
        let dim = self.values.len();
        let mut indices = Vec::with_capacity(self.touched.len());
        let mut values = Vec::with_capacity(self.touched.len());
        for &i in &self.touched {
            let v = self.values[i];
            if v != 0.0 {
                indices.push(i);
                values.push(v);
            }
            self.values[i] = 0.0;
            self.seen[i] = false;
        }
        self.touched.clear();
        SparseVec::from_parts(dim, indices, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CsrMatrix {
        CsrMatrix::from_triplets(
            3,
            3,
            vec![(0, 0, 1.0), (0, 2, 2.0), (1, 1, 3.0), (2, 0, 4.0), (2, 2, 5.0), (2, 2, 1.0)],
        )
    }

    #[test]
    fn duplicates_are_summed() {
        let m = sample();
        assert_eq!(m.get(2, 2), 6.0);
        assert_eq!(m.nnz(), 5);
    }

    #[test]
    fn zeros_are_dropped() {
        let m = CsrMatrix::from_triplets(2, 2, vec![(0, 0, 1.0), (0, 1, 0.0), (1, 0, 2.0), (1, 0, -2.0)]);
        assert_eq!(m.nnz(), 1);
        assert_eq!(m.row(1).0.len(), 0);
    }

    #[test]
    fn products_agree_with_dense() {
        let m = sample();
        let d = m.to_dense();
        let x = [1.0, -2.0, 0.5];
        let ax = m.mul_vec(&x);
        let dx = &d * nalgebra::DVector::from_column_slice(&x);
        for i in 0..3 {
            assert!((ax[i] - dx[i]).abs() < 1e-15);
        }
        let ua = m.left_mul_dense(&x);
        let du = d.transpose() * nalgebra::DVector::from_column_slice(&x);
        let mut acc = Accumulator::new(3);
        let us = m.left_mul_sparse(&SparseVec::from_dense(&x), &mut acc);
        for i in 0..3 {
            assert!((ua[i] - du[i]).abs() < 1e-15);
            assert!((us.to_dense()[i] - du[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn sparse_dot_matches_dense() {
        let a = SparseVec::from_dense(&[0.0, 1.0, 2.0, 0.0, 3.0]);
        let b = SparseVec::from_dense(&[1.0, 1.0, 0.0, 5.0, 2.0]);
        assert_eq!(a.dim(), 5);
        assert_eq!(a.dot(&b), 7.0);
        assert_eq!(a.weighted_dot(&b, &[1.0, 2.0, 1.0, 1.0, 0.5]), 5.0);
    }

    #[test]
    fn content_hash_tracks_values() {
        let a = sample();
        let mut t = vec![(0, 0, 1.0), (0, 2, 2.0), (1, 1, 3.0), (2, 0, 4.0), (2, 2, 6.0)];
        assert_eq!(a.content_hash(), CsrMatrix::from_triplets(3, 3, t.clone()).content_hash());
        t[4].2 = 6.000001;
        assert_ne!(a.content_hash(), CsrMatrix::from_triplets(3, 3, t).content_hash());
    }

    #[test]
    fn coordinate_export_lists_entries() {
        let mut buf = Vec::new();
        sample().write_coordinate(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.starts_with("% 3 3 5"));
    }
}
