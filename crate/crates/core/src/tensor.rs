//! Dense NHWC feature maps and row-major matrices.
//!
//! Every container stores 64-bit floats in a single flat buffer. The layout
//! of [`Tensor4`] is row-major over `(batch, row, col, channel)`, so element
//! `(l, i, j, d)` lives at offset `((l·h + i)·w + j)·c + d`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extents of a batched NHWC tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape4 {
    pub const fn new(b: usize, h: usize, w: usize, c: usize) -> Self {
        Self { b, h, w, c }
    }

    pub fn len(&self) -> usize {
        self.b * self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one batch entry.
    pub fn sample_len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.b, self.h, self.w, self.c]
    }

    #[inline]
    pub fn offset(&self, l: usize, i: usize, j: usize, d: usize) -> usize {
        ((l * self.h + i) * self.w + j) * self.c + d
    }

    fn validate(&self) -> Result<()> {
        for (axis, len) in [("b", self.b), ("h", self.h), ("w", self.w), ("c", self.c)] {
            if len == 0 {
                return Err(Error::shape(format!("axis `{axis}` has zero length")));
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.b, self.h, self.w, self.c)
    }
}

/// Batched NHWC feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(Error::shape(format!(
                "tensor {shape} needs {} elements, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape4) -> Result<Self> {
        shape.validate()?;
        Ok(Self {
            shape,
            data: vec![0.0; shape.len()],
        })
    }

    pub fn from_fn(
        shape: Shape4,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Result<Self> {
        shape.validate()?;
        let mut data = Vec::with_capacity(shape.len());
        for l in 0..shape.b {
            for i in 0..shape.h {
                for j in 0..shape.w {
                    for d in 0..shape.c {
                        data.push(f(l, i, j, d));
                    }
                }
            }
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Checked element access; the error names the offending axis.
    pub fn at(&self, l: usize, i: usize, j: usize, d: usize) -> Result<f64> {
        let s = self.shape;
        for (axis, index, len) in [("b", l, s.b), ("h", i, s.h), ("w", j, s.w), ("c", d, s.c)] {
            if index >= len {
                return Err(Error::IndexOutOfBounds { axis, index, len });
            }
        }
        Ok(self.data[s.offset(l, i, j, d)])
    }

    /// Unchecked-by-contract access used on hot paths; panics on a bad index.
    #[inline]
    pub fn get(&self, l: usize, i: usize, j: usize, d: usize) -> f64 {
        self.data[self.shape.offset(l, i, j, d)]
    }

    /// Flat `h·w·c` slice of batch entry `l`.
    pub fn sample(&self, l: usize) -> &[f64] {
        let n = self.shape.sample_len();
        &self.data[l * n..(l + 1) * n]
    }

    /// Gathers the listed batch entries, in order, into a new tensor.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyInput("batch selection"));
        }
        let mut data = Vec::with_capacity(indices.len() * self.shape.sample_len());
        for &l in indices {
            if l >= self.shape.b {
                return Err(Error::IndexOutOfBounds {
                    axis: "b",
                    index: l,
                    len: self.shape.b,
                });
            }
            data.extend_from_slice(self.sample(l));
        }
        let shape = Shape4 {
            b: indices.len(),
            ..self.shape
        };
        Ok(Self { shape, data })
    }

    /// Flattens each batch entry into one matrix row: `(b, h·w·c)`.
    pub fn to_sample_rows(&self) -> Matrix2 {
        Matrix2 {
            rows: self.shape.b,
            cols: self.shape.sample_len(),
            data: self.data.clone(),
        }
    }

    /// Relabels as a `(b·h·w, c)` matrix; the flat data is unchanged.
    pub fn into_matrix(self) -> Matrix2 {
        Matrix2 {
            rows: self.shape.b * self.shape.h * self.shape.w,
            cols: self.shape.c,
            data: self.data,
        }
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape(format!(
                "matrix {rows}x{cols} has an empty axis"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix {rows}x{cols} needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut m = Self::zeros(n, n)?;
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        Ok(m)
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                data.push(self.get(r, c));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    /// Relabels to new extents with the same element count.
    pub fn reshape(self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {}x{} into {rows}x{cols}",
                self.rows, self.cols
            )));
        }
        Self::new(rows, cols, self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Zero-copy 3-D view of a matrix split into `outer` equal row blocks.
#[derive(Debug, Clone, Copy)]
pub struct Tensor3View<'a> {
    outer: usize,
    rows: usize,
    cols: usize,
    backing: &'a Matrix2,
}

impl<'a> Tensor3View<'a> {
    pub fn new(backing: &'a Matrix2, outer: usize) -> Result<Self> {
        if outer == 0 || backing.rows % outer != 0 {
            return Err(Error::shape(format!(
                "{} rows cannot be split into {outer} equal blocks",
                backing.rows
            )));
        }
        Ok(Self {
            outer,
            rows: backing.rows / outer,
            cols: backing.cols,
            backing,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.outer, self.rows, self.cols)
    }

    pub fn backing(&self) -> &'a Matrix2 {
        self.backing
    }

    /// Contiguous `rows·cols` slice of block `l`.
    pub fn block(&self, l: usize) -> &'a [f64] {
        let n = self.rows * self.cols;
        &self.backing.data[l * n..(l + 1) * n]
    }

    pub fn row(&self, l: usize, r: usize) -> &'a [f64] {
        self.backing.row(l * self.rows + r)
    }

    /// Copies block `l` into an owned matrix.
    pub fn block_matrix(&self, l: usize) -> Matrix2 {
        Matrix2 {
            rows: self.rows,
            cols: self.cols,
            data: self.block(l).to_vec(),
        }
    }

    /// Stacks the listed blocks, in order, into one matrix.
    pub fn gather(&self, blocks: &[usize]) -> Result<Matrix2> {
        if blocks.is_empty() {
            return Err(Error::EmptyInput("block selection"));
        }
        let mut data = Vec::with_capacity(blocks.len() * self.rows * self.cols);
        for &l in blocks {
            if l >= self.outer {
                return Err(Error::IndexOutOfBounds {
                    axis: "outer",
                    index: l,
                    len: self.outer,
                });
            }
            data.extend_from_slice(self.block(l));
        }
        Matrix2::new(blocks.len() * self.rows, self.cols, data)
    }
}

/// Relabels a `(b·h·w, c)` matrix as a `(b, h, w, c)` tensor.
pub fn reshape_matrix_to_tensor4(m: Matrix2, shape: Shape4) -> Result<Tensor4> {
    if m.rows * m.cols != shape.len() {
        return Err(Error::shape(format!(
            "{}x{} matrix has {} elements but {shape} needs {}",
            m.rows,
            m.cols,
            m.rows * m.cols,
            shape.len()
        )));
    }
    Tensor4::new(shape, m.data)
}

pub fn frobenius_norm(m: &Matrix2) -> f64 {
    frobenius_norm_slice(m.data())
}

pub fn frobenius_norm_slice(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Frobenius norm of `a - b` over two equal-length flat buffers.
pub fn frobenius_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "cannot compare buffers of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}
