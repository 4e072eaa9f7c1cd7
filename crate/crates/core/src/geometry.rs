//! Convolution geometry: kernel extents, stride, symmetric zero padding, and
//! the input/output shape relations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

/// How a stride that does not evenly divide the sliding span is handled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rounding {
    /// Reject the geometry and report the remainder.
    #[default]
    Strict,
    /// Floor division; trailing rows/cols that do not fit a full step are dropped.
    Truncate,
}

/// Zero-padding policy, resolved against a kernel into a per-side count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PaddingMode {
    /// No padding.
    Valid,
    /// `⌊k/2⌋` per side; square odd kernels only.
    Half,
    /// `k − 1` per side; square kernels only.
    Full,
    Explicit(usize),
}

impl PaddingMode {
    pub fn resolve(self, kh: usize, kw: usize) -> Result<usize> {
        match self {
            PaddingMode::Valid => Ok(0),
            PaddingMode::Explicit(p) => Ok(p),
            PaddingMode::Half => {
                if kh != kw || kh % 2 == 0 {
                    return Err(Error::InvalidGeometry(format!(
                        "half padding needs a square odd kernel, got {kh}x{kw}"
                    )));
                }
                Ok(kh / 2)
            }
            PaddingMode::Full => {
                if kh != kw {
                    return Err(Error::InvalidGeometry(format!(
                        "full padding is symmetric and needs a square kernel, got {kh}x{kw}"
                    )));
                }
                Ok(kh - 1)
            }
        }
    }
}

impl std::str::FromStr for PaddingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid" | "none" => Ok(PaddingMode::Valid),
            "half" | "same" => Ok(PaddingMode::Half),
            "full" => Ok(PaddingMode::Full),
            other => other
                .parse::<usize>()
                .map(PaddingMode::Explicit)
                .map_err(|_| Error::InvalidGeometry(format!("unknown padding `{other}`"))),
        }
    }
}

/// Kernel, stride and padding of one convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kh: usize,
    pub kw: usize,
    pub c_in: usize,
    /// Number of filters, which is also the output channel count.
    pub f: usize,
    pub stride: usize,
    /// Zero rows/cols added on each side.
    pub pad: usize,
    #[serde(default)]
    pub rounding: Rounding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputShape {
    pub h_out: usize,
    pub w_out: usize,
    pub c_out: usize,
}

impl OutputShape {
    pub fn patches(&self) -> usize {
        self.h_out * self.w_out
    }
}

impl ConvGeometry {
    pub fn new(
        kh: usize,
        kw: usize,
        c_in: usize,
        f: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let g = Self {
            kh,
            kw,
            c_in,
            f,
            stride,
            pad,
            rounding: Rounding::Strict,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn with_padding(
        kh: usize,
        kw: usize,
        c_in: usize,
        f: usize,
        stride: usize,
        padding: PaddingMode,
    ) -> Result<Self> {
        Self::new(kh, kw, c_in, f, stride, padding.resolve(kh, kw)?)
    }

    pub fn with_rounding(mut self, rounding: Rounding) -> Self {
        self.rounding = rounding;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("k_h", self.kh),
            ("k_w", self.kw),
            ("c_in", self.c_in),
            ("f", self.f),
            ("stride", self.stride),
        ] {
            if v == 0 {
                return Err(Error::InvalidGeometry(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Length of one stretched patch: `k_h·k_w·c_in`.
    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.c_in
    }

    /// Output extents for an unpadded `h_in × w_in` input.
    pub fn output_shape(&self, h_in: usize, w_in: usize) -> Result<OutputShape> {
        self.output_shape_padded(h_in + 2 * self.pad, w_in + 2 * self.pad)
    }

    /// Output extents when the given input extents already include padding.
    pub fn output_shape_padded(&self, h_padded: usize, w_padded: usize) -> Result<OutputShape> {
        self.validate()?;
        let h_out = self.out_extent("h", h_padded, self.kh)?;
        let w_out = self.out_extent("w", w_padded, self.kw)?;
        Ok(OutputShape {
            h_out,
            w_out,
            c_out: self.f,
        })
    }

    fn out_extent(&self, axis: &'static str, padded: usize, kernel: usize) -> Result<usize> {
        if padded < kernel {
            return Err(Error::KernelTooLarge {
                axis,
                kernel,
                padded,
            });
        }
        let span = padded - kernel;
        let remainder = span % self.stride;
        if remainder != 0 && self.rounding == Rounding::Strict {
            return Err(Error::StrideRemainder {
                axis,
                span,
                stride: self.stride,
                remainder,
            });
        }
        Ok(span / self.stride + 1)
    }

    /// Checks that `src` (unpadded) has `c_in` channels and a valid output shape.
    pub fn check_input(&self, src: Shape4) -> Result<OutputShape> {
        if src.c != self.c_in {
            return Err(Error::shape(format!(
                "input has {} channels, geometry expects {}",
                src.c, self.c_in
            )));
        }
        self.output_shape(src.h, src.w)
    }
}

/// Surrounds every spatial plane with `p` rows/cols of zeros.
pub fn pad_zeros(t: &Tensor4, p: usize) -> Tensor4 {
    if p == 0 {
        return t.clone();
    }
    let s = t.shape();
    let out_shape = Shape4::new(s.b, s.h + 2 * p, s.w + 2 * p, s.c);
    let mut data = vec![0.0; out_shape.len()];
    let row_len = s.w * s.c;
    for l in 0..s.b {
        for i in 0..s.h {
            let src = s.offset(l, i, 0, 0);
            let dst = out_shape.offset(l, i + p, p, 0);
            data[dst..dst + row_len].copy_from_slice(&t.data()[src..src + row_len]);
        }
    }
    Tensor4::new(out_shape, data).expect("padded shape is consistent")
}
