//! Convolution evaluation paths.
//!
//! [`conv_direct`] is the reference: a literal sliding-window loop that every
//! other engine is checked against. All engines reduce each output element
//! over the patch in the same `(i', j', d)` row-major order, so on identical
//! inputs they agree bit for bit.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gemm::gemm;
use crate::geometry::{pad_zeros, ConvGeometry};
use crate::lowering::{lower, stretch_filters, FilterBank, IndexMap};
use crate::tensor::{reshape_matrix_to_tensor4, Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    /// Sliding-window cross-correlation.
    Direct,
    /// Convolution with the kernel reversed along both spatial axes.
    True2D,
    /// Materialized patch matrix followed by GEMM.
    #[serde(rename = "gemm")]
    Im2colGemm,
    /// GEMM reading patch elements through the index map.
    #[serde(rename = "lazy")]
    LazyGemm,
}

impl Engine {
    pub const ALL: [Engine; 4] = [
        Engine::Direct,
        Engine::True2D,
        Engine::Im2colGemm,
        Engine::LazyGemm,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Engine::Direct => "direct",
            Engine::True2D => "true2d",
            Engine::Im2colGemm => "gemm",
            Engine::LazyGemm => "lazy",
        }
    }

    pub fn run(&self, input: &Tensor4, bank: &FilterBank, geom: &ConvGeometry) -> Result<Tensor4> {
        match self {
            Engine::Direct => conv_direct(input, bank, geom),
            Engine::True2D => conv_true2d(input, bank, geom),
            Engine::Im2colGemm => conv_via_gemm(input, bank, geom, false),
            Engine::LazyGemm => conv_via_gemm(input, bank, geom, true),
        }
    }

    /// Bytes of scratch storage the engine allocates besides its output.
    pub fn intermediate_bytes(&self, input: Shape4, geom: &ConvGeometry) -> Result<usize> {
        let out = geom.check_input(input)?;
        let f64_bytes = std::mem::size_of::<f64>();
        Ok(match self {
            Engine::Direct | Engine::True2D if geom.pad == 0 => 0,
            Engine::Direct | Engine::True2D => {
                input.b * (input.h + 2 * geom.pad) * (input.w + 2 * geom.pad) * input.c * f64_bytes
            }
            Engine::Im2colGemm => input.b * out.patches() * geom.patch_len() * f64_bytes,
            Engine::LazyGemm => 0,
        })
    }
}

impl std::fmt::Display for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Engine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Engine::Direct),
            "true2d" => Ok(Engine::True2D),
            "gemm" | "im2col" => Ok(Engine::Im2colGemm),
            "lazy" => Ok(Engine::LazyGemm),
            other => Err(Error::InvalidConfig(format!("unknown engine `{other}`"))),
        }
    }
}

/// A single `k_h × k_w × c` block stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBlock {
    pub kh: usize,
    pub kw: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl KernelBlock {
    pub fn new(kh: usize, kw: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != kh * kw * c {
            return Err(Error::shape(format!(
                "block {kh}x{kw}x{c} needs {} values, got {}",
                kh * kw * c,
                data.len()
            )));
        }
        Ok(Self { kh, kw, c, data })
    }

    /// 2-D single-channel block from rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let kw = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != kw) {
            return Err(Error::shape("ragged rows"));
        }
        Self::new(rows.len(), kw, 1, rows.concat())
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, d: usize) -> f64 {
        self.data[(i * self.kw + j) * self.c + d]
    }

    fn dims(&self) -> (usize, usize, usize) {
        (self.kh, self.kw, self.c)
    }
}

/// Full discrete 1-D convolution: `out[n] = Σ_t g[t]·h[n−t]`, length `|g|+|h|−1`.
pub fn conv1d(g: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    if g.is_empty() {
        return Err(Error::EmptyInput("conv1d signal"));
    }
    if h.is_empty() {
        return Err(Error::EmptyInput("conv1d kernel"));
    }
    let len = g.len() + h.len() - 1;
    let mut out = vec![0.0; len];
    for (n, o) in out.iter_mut().enumerate() {
        let t_lo = n.saturating_sub(h.len() - 1);
        let t_hi = n.min(g.len() - 1);
        let mut acc = 0.0;
        for t in t_lo..=t_hi {
            acc += g[t] * h[n - t];
        }
        *o = acc;
    }
    Ok(out)
}

/// Sum of element-wise products of a patch and an equally shaped filter.
pub fn cross_correlate_patch(patch: &KernelBlock, filt: &KernelBlock) -> Result<f64> {
    if patch.dims() != filt.dims() {
        return Err(Error::shape(format!(
            "patch {:?} and filter {:?} differ in shape",
            patch.dims(),
            filt.dims()
        )));
    }
    Ok(patch.data.iter().zip(&filt.data).map(|(a, b)| a * b).sum())
}

/// Reverses a block along both spatial axes; channels keep their order.
pub fn flip_kernel(filt: &KernelBlock) -> KernelBlock {
    let mut data = Vec::with_capacity(filt.data.len());
    for i in 0..filt.kh {
        for j in 0..filt.kw {
            for d in 0..filt.c {
                data.push(filt.get(filt.kh - 1 - i, filt.kw - 1 - j, d));
            }
        }
    }
    KernelBlock { data, ..*filt }
}

/// Applies [`flip_kernel`] to every filter of a bank.
pub fn flip_bank(bank: &FilterBank) -> FilterBank {
    let (f, kh, kw, c) = bank.dims();
    let mut data = Vec::with_capacity(bank.data().len());
    for fi in 0..f {
        let block = KernelBlock::new(kh, kw, c, bank.filter(fi).to_vec()).expect("bank dims");
        data.extend(flip_kernel(&block).data);
    }
    FilterBank::new(f, kh, kw, c, data).expect("same dims")
}

fn prepare(input: &Tensor4, bank: &FilterBank, geom: &ConvGeometry) -> Result<Shape4> {
    bank.matches(geom)?;
    let out = geom.check_input(input.shape())?;
    Ok(Shape4::new(input.shape().b, out.h_out, out.w_out, geom.f))
}

/// Shared sliding-window loop; `flip` selects true convolution.
fn sliding_window(
    input: &Tensor4,
    bank: &FilterBank,
    geom: &ConvGeometry,
    flip: bool,
) -> Result<Tensor4> {
    let out_shape = prepare(input, bank, geom)?;
    let src = pad_zeros(input, geom.pad);
    let s = geom.stride;
    let (kh, kw, c) = (geom.kh, geom.kw, geom.c_in);
    let mut out = vec![0.0; out_shape.len()];
    out.par_chunks_mut(out_shape.sample_len())
        .enumerate()
        .for_each(|(l, sample)| {
            let mut o = 0;
            for oi in 0..out_shape.h {
                for oj in 0..out_shape.w {
                    for fi in 0..geom.f {
                        let mut acc = 0.0;
                        for ki in 0..kh {
                            for kj in 0..kw {
                                for d in 0..c {
                                    let x = src.get(l, oi * s + ki, oj * s + kj, d);
                                    let w = if flip {
                                        bank.get(fi, kh - 1 - ki, kw - 1 - kj, d)
                                    } else {
                                        bank.get(fi, ki, kj, d)
                                    };
                                    acc += x * w;
                                }
                            }
                        }
                        sample[o] = acc;
                        o += 1;
                    }
                }
            }
        });
    Tensor4::new(out_shape, out)
}

/// Cross-correlation of every filter with every patch; output `(b, h_out, w_out, f)`.
pub fn conv_direct(input: &Tensor4, bank: &FilterBank, geom: &ConvGeometry) -> Result<Tensor4> {
    sliding_window(input, bank, geom, false)
}

/// True 2-D convolution: the double sum with the kernel index reversed.
pub fn conv_true2d(input: &Tensor4, bank: &FilterBank, geom: &ConvGeometry) -> Result<Tensor4> {
    sliding_window(input, bank, geom, true)
}

/// Lowered convolution: `M · L` reshaped to `(b, h_out, w_out, f)`.
///
/// With `lazy` set, `M` is never stored: each of its elements is fetched
/// from the input through the index map as the product is accumulated.
pub fn conv_via_gemm(
    input: &Tensor4,
    bank: &FilterBank,
    geom: &ConvGeometry,
    lazy: bool,
) -> Result<Tensor4> {
    let out_shape = prepare(input, bank, geom)?;
    let l = stretch_filters(bank);
    let product = if lazy {
        lazy_gemm(input, l.matrix(), geom)?
    } else {
        let lm = lower(input, geom)?;
        gemm(lm.matrix(), l.matrix())?
    };
    reshape_matrix_to_tensor4(product, out_shape)
}

fn lazy_gemm(
    input: &Tensor4,
    l: &crate::tensor::Matrix2,
    geom: &ConvGeometry,
) -> Result<crate::tensor::Matrix2> {
    let map = IndexMap::for_unpadded(*geom, input.shape())?;
    let (k, n) = l.dims();
    let ld = l.data();
    let mut out = vec![0.0; map.rows() * n];
    out.par_chunks_mut(n).enumerate().for_each(|(p, row)| {
        for q in 0..k {
            let x = map.fetch_unpadded(input, p, q);
            for (o, &w) in row.iter_mut().zip(&ld[q * n..(q + 1) * n]) {
                *o += x * w;
            }
        }
    });
    crate::tensor::Matrix2::new(map.rows(), n, out)
}
