//! Dense complex measurement operators.

use std::cell::Cell;

use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// A linear map `C^N -> C^M` together with its conjugate transpose.
pub trait LinearOperator {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;

    /// `out = A x`
    fn apply(&self, x: &[C64], out: &mut [C64]);

    /// `out = A^H z`
    fn apply_adjoint(&self, z: &[C64], out: &mut [C64]);
}

/// Row-major dense complex matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![C64::new(0.0, 0.0); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = C64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!("{} entries for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> C64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: C64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[C64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn column_norms(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.cols];
        for row in self.data.chunks_exact(self.cols) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v.norm_sqr();
            }
        }
        acc.into_iter().map(f64::sqrt).collect()
    }

    /// Rescale every column to unit Euclidean norm. Zero columns are an error.
    pub fn normalize_columns(&mut self) -> Result<()> {
        let norms = self.column_norms();
        if let Some(j) = norms.iter().position(|&n| n == 0.0) {
            return Err(Error::InvalidParameter(format!("column {j} is identically zero")));
        }
        let inv: Vec<f64> = norms.iter().map(|n| 1.0 / n).collect();
        for row in self.data.chunks_exact_mut(self.cols) {
            for (v, s) in row.iter_mut().zip(&inv) {
                *v *= *s;
            }
        }
        Ok(())
    }

    /// Largest deviation of any column norm from one.
    pub fn max_column_norm_error(&self) -> f64 {
        self.column_norms().into_iter().map(|n| (n - 1.0).abs()).fold(0.0, f64::max)
    }

    /// `tr(A B^H)` for equally shaped matrices.
    pub fn trace_with_adjoint(&self, other: &DenseMatrix) -> C64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b.conj()).sum()
    }
}

impl LinearOperator for DenseMatrix {
    fn rows(&self) -> usize {
        self.rows
    }

    fn cols(&self) -> usize {
        self.cols
    }

    fn apply(&self, x: &[C64], out: &mut [C64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        if self.cols == 0 {
            out.fill(C64::new(0.0, 0.0));
            return;
        }
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            let (mut re, mut im) = (0.0, 0.0);
            for (a, v) in row.iter().zip(x) {
                re += a.re * v.re - a.im * v.im;
                im += a.re * v.im + a.im * v.re;
            }
            *o = C64::new(re, im);
        }
    }

    fn apply_adjoint(&self, z: &[C64], out: &mut [C64]) {
        debug_assert_eq!(z.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.fill(C64::new(0.0, 0.0));
        if self.cols == 0 {
            return;
        }
        for (zm, row) in z.iter().zip(self.data.chunks_exact(self.cols)) {
            let (zr, zi) = (zm.re, zm.im);
            for (o, a) in out.iter_mut().zip(row) {
                // conj(a) * z
                o.re += a.re * zr + a.im * zi;
                o.im += a.re * zi - a.im * zr;
            }
        }
    }
}

/// Wraps an operator and counts forward and adjoint applications.
pub struct CountingOperator<'a, O: LinearOperator> {
    inner: &'a O,
    forward: Cell<usize>,
    adjoint: Cell<usize>,
}

impl<'a, O: LinearOperator> CountingOperator<'a, O> {
    pub fn new(inner: &'a O) -> Self {
        Self { inner, forward: Cell::new(0), adjoint: Cell::new(0) }
    }

    pub fn forward_count(&self) -> usize {
        self.forward.get()
    }

    pub fn adjoint_count(&self) -> usize {
        self.adjoint.get()
    }

    pub fn total(&self) -> usize {
        self.forward.get() + self.adjoint.get()
    }
}

impl<O: LinearOperator> LinearOperator for CountingOperator<'_, O> {
    fn rows(&self) -> usize {
        self.inner.rows()
    }

    fn cols(&self) -> usize {
        self.inner.cols()
    }

    fn apply(&self, x: &[C64], out: &mut [C64]) {
        self.forward.set(self.forward.get() + 1);
        self.inner.apply(x, out)
    }

    fn apply_adjoint(&self, z: &[C64], out: &mut [C64]) {
        self.adjoint.set(self.adjoint.get() + 1);
        self.inner.apply_adjoint(z, out)
    }
}

pub fn norm_sqr(v: &[C64]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum()
}

pub fn dist_sqr(a: &[C64], b: &[C64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum()
}

pub fn inner(a: &[C64], b: &[C64]) -> C64 {
    // a^H b
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}
