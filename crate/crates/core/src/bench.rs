//! Timing and memory report across convolution engines.

use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engines::{flip_bank, Engine};
use crate::error::{Error, Result};
use crate::geometry::ConvGeometry;
use crate::lowering::FilterBank;
use crate::tensor::{Shape4, Tensor4};

/// Input shape plus geometry of one benchmark case.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchCase {
    pub input: Shape4,
    pub geom: ConvGeometry,
}

impl BenchCase {
    pub fn label(&self) -> String {
        let (s, g) = (self.input, self.geom);
        format!(
            "b{}_h{}_w{}_c{}_k{}x{}_f{}_s{}_p{}",
            s.b, s.h, s.w, s.c, g.kh, g.kw, g.f, g.stride, g.pad
        )
    }
}

impl FromStr for BenchCase {
    type Err = Error;

    /// `b,h,w,c_in,kh,kw,f,stride,pad`
    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidConfig(format!("bad bench case `{s}`: {e}")))?;
        let [b, h, w, c, kh, kw, f, stride, pad] = v[..] else {
            return Err(Error::InvalidConfig(format!(
                "bench case `{s}` needs 9 fields: b,h,w,c_in,kh,kw,f,stride,pad"
            )));
        };
        let case = BenchCase {
            input: Shape4::new(b, h, w, c),
            geom: ConvGeometry::new(kh, kw, c, f, stride, pad)?,
        };
        case.geom.check_input(case.input)?;
        Ok(case)
    }
}

/// MNIST-like, a padded RGB-like layer, and a wider multi-channel layer.
pub fn default_cases() -> Vec<BenchCase> {
    [
        "8,28,28,1,4,4,16,2,0",
        "4,32,32,3,3,3,16,1,1",
        "2,57,57,8,3,3,16,2,0",
    ]
    .iter()
    .map(|s| s.parse().expect("built-in cases are valid"))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub case: String,
    pub engine: String,
    pub reps: usize,
    pub mean_ns: u128,
    pub min_ns: u128,
    /// Scratch storage besides input and output; the patch matrix for `gemm`.
    pub intermediate_bytes: usize,
    pub checksum: String,
    pub status: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchOptions {
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            reps: 5,
            warmup: 1,
            seed: 42,
        }
    }
}

fn checksum(t: &Tensor4) -> String {
    format!("{:.17e}", t.data().iter().sum::<f64>())
}

fn case_inputs(case: &BenchCase, seed: u64) -> Result<(Tensor4, FilterBank)> {
    let mut rng = crate::seeded_rng(seed);
    let s = case.input;
    let x = Tensor4::new(
        s,
        (0..s.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let g = &case.geom;
    let bank = FilterBank::for_geometry(
        g,
        (0..g.f * g.patch_len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )?;
    Ok((x, bank))
}

fn time_engine(
    engine: Engine,
    x: &Tensor4,
    bank: &FilterBank,
    geom: &ConvGeometry,
    opts: &BenchOptions,
) -> Result<(u128, u128, Tensor4)> {
    let mut out = engine.run(x, bank, geom)?;
    for _ in 1..opts.warmup {
        out = engine.run(x, bank, geom)?;
    }
    let mut total = 0u128;
    let mut min = u128::MAX;
    for _ in 0..opts.reps {
        let start = Instant::now();
        out = engine.run(x, bank, geom)?;
        let ns = start.elapsed().as_nanos();
        total += ns;
        min = min.min(ns);
    }
    Ok((total / opts.reps as u128, min, out))
}

/// One row per case and engine. `true2d` runs on the flipped bank, so all
/// engines compute the same cross-correlation and share a checksum.
pub fn run_bench(cases: &[BenchCase], opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    if opts.reps == 0 {
        return Err(Error::InvalidConfig(
            "bench needs at least one repetition".into(),
        ));
    }
    let mut rows = Vec::with_capacity(cases.len() * Engine::ALL.len());
    for (i, case) in cases.iter().enumerate() {
        let (x, bank) = case_inputs(case, opts.seed.wrapping_add(i as u64))?;
        let flipped = flip_bank(&bank);
        for engine in Engine::ALL {
            let filters = if engine == Engine::True2D {
                &flipped
            } else {
                &bank
            };
            let mut row = BenchRow {
                case: case.label(),
                engine: engine.name().into(),
                reps: opts.reps,
                mean_ns: 0,
                min_ns: 0,
                intermediate_bytes: 0,
                checksum: String::new(),
                status: "ok".into(),
            };
            match engine
                .intermediate_bytes(case.input, &case.geom)
                .and_then(|bytes| Ok((bytes, time_engine(engine, &x, filters, &case.geom, opts)?)))
            {
                Ok((bytes, (mean, min, out))) => {
                    row.intermediate_bytes = bytes;
                    row.mean_ns = mean;
                    row.min_ns = min;
                    row.checksum = checksum(&out);
                }
                Err(e) => row.status = format!("error: {e}"),
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn write_csv(rows: &[BenchRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> BenchOptions {
        BenchOptions {
            reps: 1,
            warmup: 1,
            seed: 1,
        }
    }

    #[test]
    fn parses_case() {
        let c: BenchCase = "1,28,28,1,4,4,8,2,0".parse().unwrap();
        assert_eq!(c.input, Shape4::new(1, 28, 28, 1));
        assert_eq!(c.geom.stride, 2);
        assert!("1,28,28".parse::<BenchCase>().is_err());
        assert!("1,28,28,1,4,4,8,5,0".parse::<BenchCase>().is_err());
    }

    #[test]
    fn rows_checksums_and_memory() {
        let cases = vec![
            "1,8,8,2,3,3,4,1,1".parse().unwrap(),
            "2,6,6,1,2,2,3,2,0".parse().unwrap(),
        ];
        let rows = run_bench(&cases, &quick()).unwrap();
        assert_eq!(rows.len(), cases.len() * Engine::ALL.len());
        for chunk in rows.chunks(Engine::ALL.len()) {
            assert!(chunk.iter().all(|r| r.status == "ok"));
            assert!(chunk.iter().all(|r| r.checksum == chunk[0].checksum));
            let lazy = chunk.iter().find(|r| r.engine == "lazy").unwrap();
            assert_eq!(lazy.intermediate_bytes, 0);
        }
        let gemm = rows.iter().find(|r| r.engine == "gemm").unwrap();
        assert_eq!(gemm.intermediate_bytes, 64 * 18 * 8);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let rows = run_bench(&["1,4,4,1,2,2,1,2,0".parse().unwrap()], &quick()).unwrap();
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(
            text.starts_with("case,engine,reps,mean_ns,min_ns,intermediate_bytes,checksum,status")
        );
        assert_eq!(text.lines().count(), 1 + Engine::ALL.len());
    }
}
