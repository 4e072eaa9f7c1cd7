//! Binary tensor dumps.
//!
//! A dump is one line of JSON, `{"shape":[..],"dtype":"f64","order":".."}`,
//! terminated by `\n`, followed by the values as little-endian `f64` in
//! layout order. Four-axis tensors use order `bhwc`, filter banks `fhwc` and
//! matrices `rc`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowering::FilterBank;
use crate::tensor::{Matrix2, Shape4, Tensor4};

pub const ORDER_TENSOR: &str = "bhwc";
pub const ORDER_FILTERS: &str = "fhwc";
pub const ORDER_MATRIX: &str = "rc";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub order: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dump {
    pub header: DumpHeader,
    pub data: Vec<f64>,
}

impl Dump {
    fn new(shape: Vec<usize>, order: &str, data: Vec<f64>) -> Self {
        Self {
            header: DumpHeader {
                shape,
                dtype: "f64".into(),
                order: order.into(),
            },
            data,
        }
    }

    pub fn from_tensor(t: &Tensor4) -> Self {
        Self::new(
            t.shape().as_array().to_vec(),
            ORDER_TENSOR,
            t.data().to_vec(),
        )
    }

    pub fn from_matrix(m: &Matrix2) -> Self {
        Self::new(vec![m.rows(), m.cols()], ORDER_MATRIX, m.data().to_vec())
    }

    pub fn from_filters(bank: &FilterBank) -> Self {
        let (f, kh, kw, c) = bank.dims();
        Self::new(vec![f, kh, kw, c], ORDER_FILTERS, bank.data().to_vec())
    }

    fn expect(&self, order: &str, rank: usize) -> Result<()> {
        if self.header.order != order || self.header.shape.len() != rank {
            return Err(Error::MalformedDump(format!(
                "expected rank-{rank} `{order}` dump, found rank-{} `{}`",
                self.header.shape.len(),
                self.header.order
            )));
        }
        Ok(())
    }

    pub fn into_tensor(self) -> Result<Tensor4> {
        self.expect(ORDER_TENSOR, 4)?;
        let s = &self.header.shape;
        Tensor4::new(Shape4::new(s[0], s[1], s[2], s[3]), self.data)
    }

    pub fn into_matrix(self) -> Result<Matrix2> {
        self.expect(ORDER_MATRIX, 2)?;
        Matrix2::new(self.header.shape[0], self.header.shape[1], self.data)
    }

    pub fn into_filters(self) -> Result<FilterBank> {
        self.expect(ORDER_FILTERS, 4)?;
        let s = &self.header.shape;
        FilterBank::new(s[0], s[1], s[2], s[3], self.data)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if !line.ends_with('\n') {
            return Err(Error::MalformedDump("missing header line".into()));
        }
        let header: DumpHeader = serde_json::from_str(line.trim_end())?;
        if header.dtype != "f64" {
            return Err(Error::MalformedDump(format!(
                "unsupported dtype `{}`",
                header.dtype
            )));
        }
        let count = header
            .shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::DimensionOverflow(format!("{:?}", header.shape)))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != count * 8 {
            return Err(Error::TruncatedPayload {
                expected: count * 8,
                found: bytes.len(),
            });
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self { header, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(File::open(path)?)
    }
}

/// True when `bytes` begin like a dump header rather than binary data.
pub fn looks_like_dump(bytes: &[u8]) -> bool {
    bytes.first() == Some(&b'{')
}
