//! Image sources: IDX image files, deterministic synthetic images, and
//! seeded sampling into train/validation/evaluation splits.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeded_rng;
use crate::tensor::{Shape4, Tensor4};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_HEADER_LEN: usize = 16;

/// Environment variable naming the default directory for `--data mnist`.
pub const DATA_DIR_ENV: &str = "CONVLOWER_DATA_DIR";

/// File names tried, in order, when resolving an MNIST directory.
pub const MNIST_TRAIN_IMAGES: [&str; 2] = ["train-images-idx3-ubyte", "train-images.idx3-ubyte"];

/// Decoded header and raw pixels of an IDX image file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImageFile {
    pub magic: u32,
    pub dims: [usize; 3],
    pub pixels: Vec<u8>,
}

impl IdxImageFile {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < IDX_HEADER_LEN {
            return Err(Error::TruncatedPayload {
                expected: IDX_HEADER_LEN,
                found: bytes.len(),
            });
        }
        let word = |at: usize| u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        let magic = word(0);
        if magic != IDX_IMAGE_MAGIC {
            return Err(Error::UnexpectedMagic {
                found: magic,
                expected: IDX_IMAGE_MAGIC,
            });
        }
        let dims = [word(4) as usize, word(8) as usize, word(12) as usize];
        let payload = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_add(IDX_HEADER_LEN))
            .ok_or_else(|| {
                Error::DimensionOverflow(format!("{dims:?} overflows the address space"))
            })?;
        if bytes.len() < payload {
            return Err(Error::TruncatedPayload {
                expected: payload,
                found: bytes.len(),
            });
        }
        Ok(Self {
            magic,
            dims,
            pixels: bytes[IDX_HEADER_LEN..payload].to_vec(),
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(IDX_HEADER_LEN + self.pixels.len());
        out.extend_from_slice(&self.magic.to_be_bytes());
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.pixels);
        out
    }

    /// `(n, rows, cols, 1)` tensor with pixels scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Result<Tensor4> {
        let [n, rows, cols] = self.dims;
        let shape = Shape4::new(n, rows, cols, 1);
        Tensor4::new(
            shape,
            self.pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
        )
    }
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Tensor4> {
    let bytes = fs::read(path)?;
    IdxImageFile::parse(&bytes)?.to_tensor()
}

/// Writes an IDX image file; `pixels` is `n·rows·cols` bytes row-major.
pub fn write_idx_images(
    path: impl AsRef<Path>,
    n: usize,
    rows: usize,
    cols: usize,
    pixels: &[u8],
) -> Result<()> {
    if pixels.len() != n * rows * cols {
        return Err(Error::shape(format!(
            "{n}x{rows}x{cols} images need {} bytes, got {}",
            n * rows * cols,
            pixels.len()
        )));
    }
    let file = IdxImageFile {
        magic: IDX_IMAGE_MAGIC,
        dims: [n, rows, cols],
        pixels: pixels.to_vec(),
    };
    fs::write(path, file.encode())?;
    Ok(())
}

/// Draws `n` distinct batch entries in random order.
pub fn sample_without_replacement(t: &Tensor4, n: usize, seed: u64) -> Result<Tensor4> {
    let idx = sample_indices(t.shape().b, n, seed)?;
    t.select(&idx)
}

pub fn sample_indices(population: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > population {
        return Err(Error::InvalidConfig(format!(
            "cannot sample {n} entries from {population}"
        )));
    }
    let mut rng = seeded_rng(seed);
    let mut all: Vec<usize> = (0..population).collect();
    let (chosen, _) = all.partial_shuffle(&mut rng, n);
    Ok(chosen.to_vec())
}

/// `n` single-channel images with independent uniform pixels in `[0, 1)`.
pub fn synthetic_images(n: usize, h: usize, w: usize, seed: u64) -> Result<Tensor4> {
    let mut rng = seeded_rng(seed);
    let shape = Shape4::new(n, h, w, 1);
    Tensor4::new(
        shape,
        (0..shape.len()).map(|_| rng.random::<f64>()).collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "path")]
pub enum DataSource {
    /// IDX image file, or a directory holding the MNIST training images.
    Idx(PathBuf),
    Synthetic,
}

impl DataSource {
    /// Parses `synthetic`, `mnist`, `mnist:<dir>` or `idx:<file>`.
    ///
    /// A bare `mnist` resolves against the `CONVLOWER_DATA_DIR` variable.
    pub fn parse(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "synthetic" => Ok(DataSource::Synthetic),
            None if s == "mnist" => match env::var_os(DATA_DIR_ENV) {
                Some(dir) => Ok(DataSource::Idx(PathBuf::from(dir))),
                None => Err(Error::InvalidConfig(format!(
                    "`--data mnist` needs a directory: use mnist:<dir> or set {DATA_DIR_ENV}"
                ))),
            },
            Some(("mnist", dir)) | Some(("idx", dir)) if !dir.is_empty() => {
                Ok(DataSource::Idx(PathBuf::from(dir)))
            }
            _ => Err(Error::InvalidConfig(format!(
                "unrecognized data source `{s}`"
            ))),
        }
    }

    fn resolve_file(path: &Path) -> Result<PathBuf> {
        if !path.is_dir() {
            return Ok(path.to_path_buf());
        }
        MNIST_TRAIN_IMAGES
            .iter()
            .map(|name| path.join(name))
            .find(|p| p.is_file())
            .ok_or_else(|| {
                Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("no MNIST training images under {}", path.display()),
                ))
            })
    }
}

/// Where images come from and how many go into each split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub n_train: usize,
    pub n_val: usize,
    /// Held-out images used only for the activation-divergence metric.
    pub n_eval: usize,
    /// Side length of synthetic images; IDX files carry their own.
    pub synthetic_side: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Tensor4,
    pub val: Tensor4,
    pub eval: Tensor4,
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        if self.n_train == 0 || self.n_val == 0 || self.n_eval == 0 {
            return Err(Error::InvalidConfig(
                "every split needs at least one image".into(),
            ));
        }
        let total = self.n_train + self.n_val + self.n_eval;
        let pool = match &self.source {
            DataSource::Synthetic => {
                synthetic_images(total, self.synthetic_side, self.synthetic_side, self.seed)?
            }
            DataSource::Idx(path) => {
                let all = load_idx_images(DataSource::resolve_file(path)?)?;
                sample_without_replacement(&all, total, self.seed)?
            }
        };
        let split = |from: usize, len: usize| pool.select(&(from..from + len).collect::<Vec<_>>());
        Ok(Dataset {
            train: split(0, self.n_train)?,
            val: split(self.n_train, self.n_val)?,
            eval: split(self.n_train + self.n_val, self.n_eval)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_zero_image() {
        let file = IdxImageFile {
            magic: IDX_IMAGE_MAGIC,
            dims: [1, 28, 28],
            pixels: vec![0; 784],
        };
        let t = IdxImageFile::parse(&file.encode())
            .unwrap()
            .to_tensor()
            .unwrap();
        assert_eq!(t.shape(), Shape4::new(1, 28, 28, 1));
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pixel_ramp_lands_in_layout_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ramp.idx");
        let pixels: Vec<u8> = (0..=255).collect();
        write_idx_images(&path, 1, 16, 16, &pixels).unwrap();
        let t = load_idx_images(&path).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                assert_eq!(t.get(0, i, j, 0), (i * 16 + j) as f64 / 255.0);
            }
        }
    }

    #[test]
    fn big_endian_header_fields() {
        let bytes = [
            0, 0, 8, 3, // magic
            0, 0, 0, 2, // n
            0, 0, 0, 1, // rows
            0, 0, 1, 0, // cols = 256
        ];
        let mut full = bytes.to_vec();
        full.extend(std::iter::repeat_n(7u8, 512));
        let f = IdxImageFile::parse(&full).unwrap();
        assert_eq!(f.dims, [2, 1, 256]);
    }

    #[test]
    fn label_magic_rejected() {
        let mut bytes = vec![0, 0, 8, 1];
        bytes.extend([0u8; 12]);
        match IdxImageFile::parse(&bytes) {
            Err(e @ Error::UnexpectedMagic { found: 0x801, .. }) => {
                assert!(e.to_string().contains("unexpected magic"));
            }
            other => panic!("expected magic error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_rejected() {
        let file = IdxImageFile {
            magic: IDX_IMAGE_MAGIC,
            dims: [2, 4, 4],
            pixels: vec![1; 32],
        };
        let mut bytes = file.encode();
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(
            IdxImageFile::parse(&bytes),
            Err(Error::TruncatedPayload {
                expected: 48,
                found: 47
            })
        ));
        assert!(matches!(
            IdxImageFile::parse(&bytes[..10]),
            Err(Error::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn huge_dimensions_overflow() {
        let mut bytes = vec![0, 0, 8, 3];
        bytes.extend([0xff; 12]);
        assert!(matches!(
            IdxImageFile::parse(&bytes),
            Err(Error::DimensionOverflow(_))
        ));
    }

    #[test]
    fn sampling_is_deterministic_and_distinct() {
        let a = sample_indices(60_000, 10, 7).unwrap();
        assert_eq!(a, sample_indices(60_000, 10, 7).unwrap());
        assert_ne!(a, sample_indices(60_000, 10, 8).unwrap());
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 10);
        assert!(sample_indices(5, 6, 0).is_err());
    }

    #[test]
    fn full_sample_is_permutation() {
        let t = Tensor4::from_fn(Shape4::new(9, 1, 1, 1), |l, _, _, _| l as f64).unwrap();
        let s = sample_without_replacement(&t, 9, 3).unwrap();
        let mut vals = s.data().to_vec();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(vals, t.data());
    }

    #[test]
    fn synthetic_properties() {
        let a = synthetic_images(100, 10, 10, 11).unwrap();
        assert_eq!(a, synthetic_images(100, 10, 10, 11).unwrap());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let mean = a.data().iter().sum::<f64>() / a.data().len() as f64;
        // 10^4 uniforms: standard error ≈ 0.0029, so ±0.05 is ~17σ.
        assert!((0.45..=0.55).contains(&mean), "mean {mean}");
    }

    #[test]
    fn data_source_parsing() {
        assert_eq!(
            DataSource::parse("synthetic").unwrap(),
            DataSource::Synthetic
        );
        assert_eq!(
            DataSource::parse("mnist:/tmp/m").unwrap(),
            DataSource::Idx(PathBuf::from("/tmp/m"))
        );
        assert!(DataSource::parse("mnist:").is_err());
        assert!(DataSource::parse("imagenet").is_err());
    }

    #[test]
    fn dataset_from_idx_directory() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..20 * 4 * 4).map(|v| (v % 251) as u8).collect();
        write_idx_images(dir.path().join(MNIST_TRAIN_IMAGES[0]), 20, 4, 4, &pixels).unwrap();
        let spec = DatasetSpec {
            source: DataSource::Idx(dir.path().to_path_buf()),
            n_train: 5,
            n_val: 4,
            n_eval: 3,
            synthetic_side: 0,
            seed: 1,
        };
        let ds = spec.load().unwrap();
        assert_eq!(ds.train.shape(), Shape4::new(5, 4, 4, 1));
        assert_eq!(ds.eval.shape().b, 3);
        let too_many = DatasetSpec {
            n_train: 30,
            ..spec
        };
        assert!(too_many.load().is_err());
    }

    proptest! {
        #[test]
        fn idx_round_trip(n in 1usize..4, rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let pixels: Vec<u8> = (0..n * rows * cols).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
            let file = IdxImageFile { magic: IDX_IMAGE_MAGIC, dims: [n, rows, cols], pixels: pixels.clone() };
            let t = IdxImageFile::parse(&file.encode()).unwrap().to_tensor().unwrap();
            let back: Vec<u8> = t.data().iter().map(|v| (v * 255.0).round() as u8).collect();
            prop_assert_eq!(back, pixels);
        }
    }
}
