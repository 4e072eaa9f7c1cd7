//! Lowering of a convolution to a matrix product.
//!
//! The padded source `(b, h, w, c_in)` is stretched into the patch matrix
//! `M` with one row per kernel position and one column per element of a
//! `k_h × k_w × c_in` patch. Rows run batch-major, then over output rows top to
//! bottom, then output columns left to right. Columns use the row-major patch
//! order `q = (i'·k_w + j')·c_in + d`, which is also the order in which
//! [`stretch_filters`] flattens each filter, so `M · L` is the convolution.
//!
//! [`IndexMap`] exposes the same correspondence without materializing `M`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{pad_zeros, ConvGeometry, OutputShape};
use crate::tensor::{Matrix2, Shape4, Tensor3View, Tensor4};

/// Set of `f` filters stored row-major as `(f, k_h, k_w, c_in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    f: usize,
    kh: usize,
    kw: usize,
    c_in: usize,
    data: Vec<f64>,
}

impl FilterBank {
    pub fn new(f: usize, kh: usize, kw: usize, c_in: usize, data: Vec<f64>) -> Result<Self> {
        if f == 0 || kh == 0 || kw == 0 || c_in == 0 {
            return Err(Error::shape(format!(
                "filter bank ({f}, {kh}, {kw}, {c_in}) has an empty axis"
            )));
        }
        if data.len() != f * kh * kw * c_in {
            return Err(Error::shape(format!(
                "filter bank ({f}, {kh}, {kw}, {c_in}) needs {} values, got {}",
                f * kh * kw * c_in,
                data.len()
            )));
        }
        Ok(Self {
            f,
            kh,
            kw,
            c_in,
            data,
        })
    }

    pub fn for_geometry(geom: &ConvGeometry, data: Vec<f64>) -> Result<Self> {
        Self::new(geom.f, geom.kh, geom.kw, geom.c_in, data)
    }

    pub fn zeros(geom: &ConvGeometry) -> Self {
        Self::for_geometry(geom, vec![0.0; geom.f * geom.patch_len()]).expect("validated geometry")
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.f, self.kh, self.kw, self.c_in)
    }

    pub fn count(&self) -> usize {
        self.f
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.c_in
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, fi: usize, i: usize, j: usize, d: usize) -> f64 {
        self.data[((fi * self.kh + i) * self.kw + j) * self.c_in + d]
    }

    /// Filter `fi` flattened in canonical patch order.
    pub fn filter(&self, fi: usize) -> &[f64] {
        let n = self.patch_len();
        &self.data[fi * n..(fi + 1) * n]
    }

    pub fn matches(&self, geom: &ConvGeometry) -> Result<()> {
        if self.dims() != (geom.f, geom.kh, geom.kw, geom.c_in) {
            return Err(Error::shape(format!(
                "filter bank {:?} does not match geometry (f={}, k={}x{}, c_in={})",
                self.dims(),
                geom.f,
                geom.kh,
                geom.kw,
                geom.c_in
            )));
        }
        Ok(())
    }
}

/// Stretched filters `L` of shape `(k_h·k_w·c_in, f)`; column `i` is filter `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterMatrix {
    l: Matrix2,
}

impl FilterMatrix {
    pub fn matrix(&self) -> &Matrix2 {
        &self.l
    }

    pub fn into_matrix(self) -> Matrix2 {
        self.l
    }

    /// Inverse relabeling back to a `(f, k_h, k_w, c_in)` bank.
    pub fn unstretch(&self, kh: usize, kw: usize, c_in: usize) -> Result<FilterBank> {
        unstretch_matrix(&self.l, kh, kw, c_in)
    }
}

pub fn stretch_filters(bank: &FilterBank) -> FilterMatrix {
    let n = bank.patch_len();
    let mut data = vec![0.0; n * bank.f];
    for fi in 0..bank.f {
        for (q, &v) in bank.filter(fi).iter().enumerate() {
            data[q * bank.f + fi] = v;
        }
    }
    FilterMatrix {
        l: Matrix2::new(n, bank.f, data).expect("bank dims are non-zero"),
    }
}

/// Reads a `(k_h·k_w·c_in, f)` weight matrix back as a filter bank.
pub fn unstretch_matrix(l: &Matrix2, kh: usize, kw: usize, c_in: usize) -> Result<FilterBank> {
    if l.rows() != kh * kw * c_in {
        return Err(Error::shape(format!(
            "{} rows cannot hold {kh}x{kw}x{c_in} patches",
            l.rows()
        )));
    }
    let f = l.cols();
    let n = l.rows();
    let mut data = vec![0.0; n * f];
    for q in 0..n {
        for fi in 0..f {
            data[fi * n + q] = l.get(q, fi);
        }
    }
    FilterBank::new(f, kh, kw, c_in, data)
}

/// Decomposed coordinates of one cell of `M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchCoord {
    /// Batch entry.
    pub l: usize,
    /// Output row and column of the patch.
    pub out_row: usize,
    pub out_col: usize,
    /// Offset inside the patch.
    pub ki: usize,
    pub kj: usize,
    pub d: usize,
}

/// Index correspondence between the patch matrix and its padded source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexMap {
    geom: ConvGeometry,
    src: Shape4,
    out: OutputShape,
}

impl IndexMap {
    /// `src` is the shape of the already padded source.
    pub fn new(geom: ConvGeometry, src: Shape4) -> Result<Self> {
        if src.c != geom.c_in {
            return Err(Error::shape(format!(
                "source has {} channels, geometry expects {}",
                src.c, geom.c_in
            )));
        }
        let out = geom.output_shape_padded(src.h, src.w)?;
        Ok(Self { geom, src, out })
    }

    /// Map over the padded version of an unpadded input of shape `input`.
    pub fn for_unpadded(geom: ConvGeometry, input: Shape4) -> Result<Self> {
        let p = geom.pad;
        Self::new(
            geom,
            Shape4::new(input.b, input.h + 2 * p, input.w + 2 * p, input.c),
        )
    }

    pub fn geometry(&self) -> &ConvGeometry {
        &self.geom
    }

    pub fn source_shape(&self) -> Shape4 {
        self.src
    }

    pub fn output_shape(&self) -> OutputShape {
        self.out
    }

    pub fn rows(&self) -> usize {
        self.src.b * self.out.patches()
    }

    pub fn cols(&self) -> usize {
        self.geom.patch_len()
    }

    #[inline]
    pub fn patch_coord(&self, p: usize, q: usize) -> PatchCoord {
        let per_sample = self.out.patches();
        let l = p / per_sample;
        let r = p % per_sample;
        let d = q % self.geom.c_in;
        let kk = q / self.geom.c_in;
        PatchCoord {
            l,
            out_row: r / self.out.w_out,
            out_col: r % self.out.w_out,
            ki: kk / self.geom.kw,
            kj: kk % self.geom.kw,
            d,
        }
    }

    /// Inverse of [`IndexMap::patch_coord`].
    pub fn matrix_coord(&self, pc: PatchCoord) -> (usize, usize) {
        let p = (pc.l * self.out.h_out + pc.out_row) * self.out.w_out + pc.out_col;
        let q = (pc.ki * self.geom.kw + pc.kj) * self.geom.c_in + pc.d;
        (p, q)
    }

    /// Padded-source coordinates `(l, i, j, d)` of cell `(p, q)`; no bounds check.
    #[inline]
    pub fn locate(&self, p: usize, q: usize) -> (usize, usize, usize, usize) {
        let pc = self.patch_coord(p, q);
        let s = self.geom.stride;
        (pc.l, pc.out_row * s + pc.ki, pc.out_col * s + pc.kj, pc.d)
    }

    pub fn source_index(&self, p: usize, q: usize) -> Result<(usize, usize, usize, usize)> {
        if p >= self.rows() {
            return Err(Error::IndexOutOfBounds {
                axis: "p",
                index: p,
                len: self.rows(),
            });
        }
        if q >= self.cols() {
            return Err(Error::IndexOutOfBounds {
                axis: "q",
                index: q,
                len: self.cols(),
            });
        }
        Ok(self.locate(p, q))
    }

    /// Value of `M[p][q]` read from the unpadded input; cells that land in
    /// the zero border yield `0.0` without materializing the padding.
    #[inline]
    pub fn fetch_unpadded(&self, input: &Tensor4, p: usize, q: usize) -> f64 {
        let (l, i, j, d) = self.locate(p, q);
        let pad = self.geom.pad;
        let s = input.shape();
        if i < pad || j < pad || i - pad >= s.h || j - pad >= s.w {
            0.0
        } else {
            input.get(l, i - pad, j - pad, d)
        }
    }
}

/// Free-function form of [`IndexMap::source_index`].
pub fn index_map(
    p: usize,
    q: usize,
    geom: &ConvGeometry,
    src_shape: Shape4,
) -> Result<(usize, usize, usize, usize)> {
    IndexMap::new(*geom, src_shape)?.source_index(p, q)
}

/// Materialized patch matrix `M` with the geometry it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LoweredMatrix {
    m: Matrix2,
    geom: ConvGeometry,
    src_shape: Shape4,
    out: OutputShape,
}

impl LoweredMatrix {
    pub fn matrix(&self) -> &Matrix2 {
        &self.m
    }

    pub fn into_matrix(self) -> Matrix2 {
        self.m
    }

    pub fn geometry(&self) -> &ConvGeometry {
        &self.geom
    }

    /// Shape of the padded source.
    pub fn source_shape(&self) -> Shape4 {
        self.src_shape
    }

    pub fn output_shape(&self) -> OutputShape {
        self.out
    }

    pub fn batch(&self) -> usize {
        self.src_shape.b
    }

    pub fn index_map(&self) -> IndexMap {
        IndexMap {
            geom: self.geom,
            src: self.src_shape,
            out: self.out,
        }
    }

    /// `(b, h_out·w_out, k_h·k_w·c_in)` view over `M`.
    pub fn view3(&self) -> Tensor3View<'_> {
        Tensor3View::new(&self.m, self.src_shape.b).expect("rows are a multiple of the batch")
    }

    pub fn bytes(&self) -> usize {
        self.m.rows() * self.m.cols() * std::mem::size_of::<f64>()
    }
}

pub fn lowered_view3(lm: &LoweredMatrix) -> Tensor3View<'_> {
    lm.view3()
}

/// Stretches an already padded source into `M`.
pub fn im2col(src: &Tensor4, geom: &ConvGeometry) -> Result<LoweredMatrix> {
    let map = IndexMap::new(*geom, src.shape())?;
    let rows = map.rows();
    let cols = map.cols();
    let mut data = vec![0.0; rows * cols];
    let s = src.shape();
    let run = geom.kw * geom.c_in;
    data.par_chunks_mut(cols).enumerate().for_each(|(p, row)| {
        let (l, i0, j0, _) = map.locate(p, 0);
        for ki in 0..geom.kh {
            // One kernel row spans `k_w·c_in` contiguous source values.
            let start = s.offset(l, i0 + ki, j0, 0);
            row[ki * run..(ki + 1) * run].copy_from_slice(&src.data()[start..start + run]);
        }
    });
    Ok(LoweredMatrix {
        m: Matrix2::new(rows, cols, data)?,
        geom: *geom,
        src_shape: s,
        out: map.out,
    })
}

/// Stretches an unpadded input into `M`, treating the `geom.pad` border as
/// zeros. The result equals `im2col(pad_zeros(input, pad), geom)` without
/// allocating the padded copy.
pub fn lower(input: &Tensor4, geom: &ConvGeometry) -> Result<LoweredMatrix> {
    geom.check_input(input.shape())?;
    if geom.pad == 0 {
        return im2col(input, geom);
    }
    let map = IndexMap::for_unpadded(*geom, input.shape())?;
    let cols = map.cols();
    let mut data = vec![0.0; map.rows() * cols];
    let s = input.shape();
    let pad = geom.pad;
    let c = geom.c_in;
    data.par_chunks_mut(cols).enumerate().for_each(|(p, row)| {
        let (l, i0, j0, _) = map.locate(p, 0);
        for ki in 0..geom.kh {
            let i = i0 + ki;
            if i < pad || i - pad >= s.h {
                continue;
            }
            for kj in 0..geom.kw {
                let j = j0 + kj;
                if j < pad || j - pad >= s.w {
                    continue;
                }
                let start = s.offset(l, i - pad, j - pad, 0);
                let q = (ki * geom.kw + kj) * c;
                row[q..q + c].copy_from_slice(&input.data()[start..start + c]);
            }
        }
    });
    Ok(LoweredMatrix {
        m: Matrix2::new(map.rows(), cols, data)?,
        geom: *geom,
        src_shape: map.src,
        out: map.out,
    })
}

/// Reference form of [`lower`] that pads first; kept for cross-checking.
pub fn lower_via_padding(input: &Tensor4, geom: &ConvGeometry) -> Result<LoweredMatrix> {
    geom.check_input(input.shape())?;
    im2col(&pad_zeros(input, geom.pad), geom)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_tensor(shape: Shape4) -> Tensor4 {
        Tensor4::new(shape, (0..shape.len()).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn first_cell_maps_to_origin() {
        let g = ConvGeometry::new(3, 3, 2, 1, 1, 0).unwrap();
        assert_eq!(
            index_map(0, 0, &g, Shape4::new(1, 5, 5, 2)).unwrap(),
            (0, 0, 0, 0)
        );
    }

    #[test]
    fn strided_cell_matches_patch_enumeration() {
        let g = ConvGeometry::new(4, 4, 1, 1, 4, 0).unwrap();
        let src = Shape4::new(1, 28, 28, 1);
        // Nested-loop oracle: walk patches left-to-right, top-to-bottom and
        // within each patch row-major, recording source coordinates.
        let mut cells = Vec::new();
        for pr in 0..7 {
            for pc in 0..7 {
                let mut row = Vec::new();
                for ki in 0..4 {
                    for kj in 0..4 {
                        row.push((0, pr * 4 + ki, pc * 4 + kj, 0));
                    }
                }
                cells.push(row);
            }
        }
        assert_eq!(cells[9][6], (0, 5, 10, 0));
        assert_eq!(index_map(9, 6, &g, src).unwrap(), (0, 5, 10, 0));
        let map = IndexMap::new(g, src).unwrap();
        for (p, row) in cells.iter().enumerate() {
            for (q, &cell) in row.iter().enumerate() {
                assert_eq!(map.locate(p, q), cell);
            }
        }
    }

    #[test]
    fn q_decomposes_row_major() {
        let g = ConvGeometry::new(2, 2, 2, 1, 1, 0).unwrap();
        let map = IndexMap::new(g, Shape4::new(1, 3, 3, 2)).unwrap();
        let pc = map.patch_coord(0, 3);
        assert_eq!((pc.ki, pc.kj, pc.d), (0, 1, 1));
        // Oracle: enumerate (i', j', d) row-major.
        let mut q = 0;
        for ki in 0..2 {
            for kj in 0..2 {
                for d in 0..2 {
                    let pc = map.patch_coord(0, q);
                    assert_eq!((pc.ki, pc.kj, pc.d), (ki, kj, d));
                    assert_eq!(map.matrix_coord(pc), (0, q));
                    q += 1;
                }
            }
        }
    }

    #[test]
    fn index_map_rejects_out_of_range() {
        let g = ConvGeometry::new(2, 2, 1, 1, 2, 0).unwrap();
        let src = Shape4::new(2, 4, 4, 1);
        assert!(matches!(
            index_map(8, 0, &g, src),
            Err(Error::IndexOutOfBounds { axis: "p", .. })
        ));
        assert!(matches!(
            index_map(0, 4, &g, src),
            Err(Error::IndexOutOfBounds { axis: "q", .. })
        ));
    }

    #[test]
    fn mnist_lowered_shapes() {
        let g = ConvGeometry::new(4, 4, 1, 1, 4, 0).unwrap();
        let lm = im2col(&Tensor4::zeros(Shape4::new(1, 28, 28, 1)).unwrap(), &g).unwrap();
        assert_eq!(lm.matrix().dims(), (49, 16));
    }

    #[test]
    fn unit_kernel_enumerates_pixels() {
        let src = Tensor4::new(Shape4::new(1, 2, 2, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = ConvGeometry::new(1, 1, 1, 1, 1, 0).unwrap();
        let lm = im2col(&src, &g).unwrap();
        assert_eq!(lm.matrix().dims(), (4, 1));
        assert_eq!(lm.matrix().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let g = ConvGeometry::new(2, 2, 3, 1, 1, 0).unwrap();
        assert!(im2col(&Tensor4::zeros(Shape4::new(1, 4, 4, 2)).unwrap(), &g).is_err());
    }

    #[test]
    fn non_overlapping_patches_conserve_elements() {
        let shape = Shape4::new(2, 8, 12, 3);
        let src = seq_tensor(shape);
        let g = ConvGeometry::new(4, 4, 3, 1, 4, 0).unwrap();
        let lm = im2col(&src, &g).unwrap();
        let mut seen: Vec<f64> = lm.matrix().data().to_vec();
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(seen, src.data());
    }

    #[test]
    fn lower_pads_with_zero_border() {
        let src = Tensor4::new(Shape4::new(1, 1, 1, 1), vec![3.0]).unwrap();
        let g = ConvGeometry::new(3, 3, 1, 1, 1, 1).unwrap();
        let lm = lower(&src, &g).unwrap();
        assert_eq!(lm.matrix().dims(), (1, 9));
        assert_eq!(
            lm.matrix().data(),
            &[0.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(lm.source_shape(), Shape4::new(1, 3, 3, 1));
    }

    #[test]
    fn virtual_padding_matches_explicit_padding() {
        let shape = Shape4::new(2, 5, 6, 3);
        let src = seq_tensor(shape);
        for (k, s, p) in [(3, 1, 1), (2, 2, 1), (3, 2, 2), (1, 1, 3)] {
            let g = ConvGeometry::new(k, k, 3, 1, s, p)
                .unwrap()
                .with_rounding(crate::geometry::Rounding::Truncate);
            assert_eq!(
                lower(&src, &g).unwrap(),
                lower_via_padding(&src, &g).unwrap()
            );
        }
    }

    #[test]
    fn fetch_unpadded_agrees_with_lowered() {
        let shape = Shape4::new(2, 5, 4, 2);
        let src = seq_tensor(shape);
        let g = ConvGeometry::new(3, 2, 2, 1, 2, 1).unwrap();
        let lm = lower(&src, &g).unwrap();
        let map = IndexMap::for_unpadded(g, shape).unwrap();
        assert_eq!(map, lm.index_map());
        for p in 0..map.rows() {
            for q in 0..map.cols() {
                assert_eq!(
                    map.fetch_unpadded(&src, p, q).to_bits(),
                    lm.matrix().get(p, q).to_bits()
                );
            }
        }
    }

    #[test]
    fn stretch_examples() {
        let bank = FilterBank::new(1, 1, 1, 1, vec![5.0]).unwrap();
        assert_eq!(stretch_filters(&bank).matrix().data(), &[5.0]);

        let bank =
            FilterBank::new(2, 2, 2, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let l = stretch_filters(&bank);
        assert_eq!(l.matrix().dims(), (4, 2));
        let col = |c: usize| (0..4).map(|r| l.matrix().get(r, c)).collect::<Vec<_>>();
        assert_eq!(col(0), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(col(1), vec![5.0, 6.0, 7.0, 8.0]);
        assert_eq!(l.unstretch(2, 2, 1).unwrap(), bank);
    }

    #[test]
    fn view3_blocks() {
        let g = ConvGeometry::new(2, 2, 1, 1, 2, 0).unwrap();
        let src = seq_tensor(Shape4::new(3, 4, 4, 1));
        let lm = im2col(&src, &g).unwrap();
        let v = lowered_view3(&lm);
        assert_eq!(v.shape(), (3, 4, 4));
        assert_eq!(v.row(2, 1), lm.matrix().row(9));

        let single = im2col(&src.select(&[0]).unwrap(), &g).unwrap();
        assert_eq!(single.view3().block(0), single.matrix().data());
    }

    #[test]
    fn patch_dot_is_order_invariant() {
        // Any shared flatten order gives the same dot product up to
        // reassociation; the canonical order is exactly the one `filter()` uses.
        let bank = FilterBank::new(1, 2, 2, 2, (1..=8).map(f64::from).collect()).unwrap();
        let src = seq_tensor(Shape4::new(1, 2, 2, 2));
        let g = ConvGeometry::new(2, 2, 2, 1, 1, 0).unwrap();
        let lm = im2col(&src, &g).unwrap();
        let canonical: f64 = lm
            .matrix()
            .row(0)
            .iter()
            .zip(bank.filter(0))
            .map(|(a, b)| a * b)
            .sum();
        let mut col_major = 0.0;
        for d in 0..2 {
            for kj in 0..2 {
                for ki in 0..2 {
                    col_major += src.get(0, ki, kj, d) * bank.get(0, ki, kj, d);
                }
            }
        }
        assert_eq!(canonical, col_major);
    }
}
