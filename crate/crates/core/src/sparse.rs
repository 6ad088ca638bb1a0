//! Compressed sparse row matrices and the sparse direct solver used by the
//! full-order Newton iterations.

use std::io::Write;

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Accumulates `(row, col, value)` entries; duplicates are summed on `finish`.
#[derive(Clone, Debug)]
pub struct TripletBuilder {
    rows: usize,
    cols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            entries: Vec::new(),
        }
    }

    pub fn with_capacity(rows: usize, cols: usize, cap: usize) -> Self {
        Self {
            rows,
            cols,
            entries: Vec::with_capacity(cap),
        }
    }

    #[inline]
    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.rows && col < self.cols);
        self.entries.push((row, col, value));
    }

    /// Adds `scale * m` with its top-left corner at `(r0, c0)`.
    pub fn push_block(&mut self, r0: usize, c0: usize, m: &SparseMatrix, scale: f64) {
        for (i, j, v) in m.iter() {
            self.push(r0 + i, c0 + j, scale * v);
        }
    }

    /// Adds `scale * m^T` with its top-left corner at `(r0, c0)`.
    pub fn push_block_transposed(&mut self, r0: usize, c0: usize, m: &SparseMatrix, scale: f64) {
        for (i, j, v) in m.iter() {
            self.push(r0 + j, c0 + i, scale * v);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn finish(mut self) -> SparseMatrix {
        // Stable sort: duplicates are summed in insertion order.
        self.entries.sort_by_key(|&(i, j, _)| (i, j));
        let mut row_ptr = vec![0usize; self.rows + 1];
        let mut col_idx = Vec::with_capacity(self.entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in self.entries {
            if last == Some((i, j)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(j);
                values.push(v);
                row_ptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..self.rows {
            row_ptr[i + 1] += row_ptr[i];
        }
        SparseMatrix {
            rows: self.rows,
            cols: self.cols,
            row_ptr,
            col_idx,
            values,
        }
    }
}

/// CSR matrix with sorted, duplicate-free column indices in each row.
/// Explicit zeros are kept so that patterns stay stable across assemblies.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        TripletBuilder::new(rows, cols).finish()
    }

    pub fn identity(n: usize) -> Self {
        let mut b = TripletBuilder::with_capacity(n, n, n);
        for i in 0..n {
            b.push(i, i, 1.0);
        }
        b.finish()
    }

    pub fn from_triplets(rows: usize, cols: usize, entries: &[(usize, usize, f64)]) -> Self {
        let mut b = TripletBuilder::with_capacity(rows, cols, entries.len());
        for &(i, j, v) in entries {
            b.push(i, j, v);
        }
        b.finish()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    /// Iterates stored entries in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[r.clone()].binary_search(&j) {
            Ok(p) => self.values[r.start + p],
            Err(_) => 0.0,
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.rows];
        self.mul_vec_add(x, 1.0, &mut y);
        y
    }

    /// `y += scale * A x`
    pub fn mul_vec_add(&self, x: &[f64], scale: f64, y: &mut [f64]) {
        assert_eq!(x.len(), self.cols, "matvec operand length");
        assert_eq!(y.len(), self.rows, "matvec result length");
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[p] * x[self.col_idx[p]];
            }
            *yi += scale * acc;
        }
    }

    pub fn mul_transpose_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.cols];
        self.mul_transpose_vec_add(x, 1.0, &mut y);
        y
    }

    /// `y += scale * A^T x`
    pub fn mul_transpose_vec_add(&self, x: &[f64], scale: f64, y: &mut [f64]) {
        assert_eq!(x.len(), self.rows, "transpose matvec operand length");
        assert_eq!(y.len(), self.cols, "transpose matvec result length");
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let s = scale * xi;
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                y[self.col_idx[p]] += self.values[p] * s;
            }
        }
    }

    /// `x^T A y`
    pub fn quad_form(&self, x: &[f64], y: &[f64]) -> f64 {
        assert_eq!(x.len(), self.rows);
        assert_eq!(y.len(), self.cols);
        (0..self.rows)
            .map(|i| x[i] * self.row(i).map(|(j, v)| v * y[j]).sum::<f64>())
            .sum()
    }

    /// `A B` for a dense right factor.
    pub fn mul_dense(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(b.nrows(), self.cols, "sparse-dense product inner dimension");
        let mut out = DMatrix::zeros(self.rows, b.ncols());
        for j in 0..b.ncols() {
            let bj = b.column(j);
            let mut oj = out.column_mut(j);
            for i in 0..self.rows {
                let mut acc = 0.0;
                for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                    acc += self.values[p] * bj[self.col_idx[p]];
                }
                oj[i] = acc;
            }
        }
        out
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut b = TripletBuilder::with_capacity(self.cols, self.rows, self.nnz());
        for (i, j, v) in self.iter() {
            b.push(j, i, v);
        }
        b.finish()
    }

    pub fn scaled(&self, s: f64) -> SparseMatrix {
        let mut m = self.clone();
        m.values.iter_mut().for_each(|v| *v *= s);
        m
    }

    /// `a * self + b * other`
    pub fn lin_comb(&self, a: f64, other: &SparseMatrix, b: f64) -> SparseMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut t = TripletBuilder::with_capacity(self.rows, self.cols, self.nnz() + other.nnz());
        t.push_block(0, 0, self, a);
        t.push_block(0, 0, other, b);
        t.finish()
    }

    /// Largest absolute entrywise difference, treating missing entries as zero.
    pub fn max_abs_diff(&self, other: &SparseMatrix) -> f64 {
        self.lin_comb(1.0, other, -1.0)
            .values
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.rows, self.cols);
        for (i, j, v) in self.iter() {
            d[(i, j)] += v;
        }
        d
    }

    /// Debug dump: `i j value` per stored entry in lexicographic order.
    pub fn write_dump(&self, mut out: impl Write) -> Result<()> {
        for (i, j, v) in self.iter() {
            writeln!(out, "{i} {j} {v:e}")?;
        }
        Ok(())
    }

    fn to_faer(&self) -> Result<SparseColMat<usize, f64>> {
        let triplets: Vec<Triplet<usize, usize, f64>> =
            self.iter().map(|(i, j, v)| Triplet::new(i, j, v)).collect();
        SparseColMat::try_new_from_triplets(self.rows, self.cols, &triplets)
            .map_err(|e| Error::Factorization(format!("{e:?}")))
    }
}

/// Sparse LU factorization with partial pivoting and a fill-reducing ordering.
pub struct SparseLu {
    n: usize,
    lu: faer::sparse::linalg::solvers::Lu<usize, f64>,
}

impl SparseLu {
    pub fn factor(a: &SparseMatrix) -> Result<Self> {
        if a.rows != a.cols {
            return Err(Error::Dimension {
                context: "sparse LU (square matrix)",
                expected: a.rows,
                got: a.cols,
            });
        }
        let lu = a
            .to_faer()?
            .sp_lu()
            .map_err(|e| Error::Factorization(format!("{e:?}")))?;
        Ok(Self { n: a.rows, lu })
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        if rhs.len() != self.n {
            return Err(Error::Dimension {
                context: "sparse LU solve",
                expected: self.n,
                got: rhs.len(),
            });
        }
        let mut x = faer::Mat::<f64>::from_fn(self.n, 1, |i, _| rhs[i]);
        self.lu.solve_in_place(x.as_mut());
        let out: Vec<f64> = (0..self.n).map(|i| x[(i, 0)]).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Factorization("singular system (non-finite solution)".into()));
        }
        Ok(out)
    }
}

pub fn solve_sparse(a: &SparseMatrix, rhs: &[f64]) -> Result<Vec<f64>> {
    SparseLu::factor(a)?.solve(rhs)
}
