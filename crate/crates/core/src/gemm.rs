//! Cache-blocked matrix multiplication with a fixed reduction order.
//!
//! Each output element is accumulated as `((0 + a₀b₀) + a₁b₁) + …` with `k`
//! strictly ascending, whatever the tile sizes or thread count. Tiles only
//! change the traversal order between different output elements, so the
//! result is bitwise identical to [`gemm_naive`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix2;

/// Tile sizes for [`gemm_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemmSpec {
    /// Output rows per task; also the unit of parallel work.
    pub block_m: usize,
    pub block_n: usize,
    pub block_k: usize,
}

impl Default for GemmSpec {
    fn default() -> Self {
        Self {
            block_m: 32,
            block_n: 512,
            block_k: 128,
        }
    }
}

impl GemmSpec {
    fn validate(&self) -> Result<()> {
        if self.block_m == 0 || self.block_n == 0 || self.block_k == 0 {
            return Err(Error::InvalidConfig(format!(
                "gemm block sizes must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

fn check_dims(a: &Matrix2, b: &Matrix2) -> Result<()> {
    if a.cols() != b.rows() {
        return Err(Error::shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

pub fn gemm(a: &Matrix2, b: &Matrix2) -> Result<Matrix2> {
    gemm_with(a, b, &GemmSpec::default())
}

pub fn gemm_with(a: &Matrix2, b: &Matrix2, spec: &GemmSpec) -> Result<Matrix2> {
    check_dims(a, b)?;
    spec.validate()?;
    let (m, k) = a.dims();
    let n = b.cols();
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();

    out.par_chunks_mut(spec.block_m * n)
        .enumerate()
        .for_each(|(tile, c)| {
            let row0 = tile * spec.block_m;
            let tile_rows = c.len() / n;
            for k0 in (0..k).step_by(spec.block_k) {
                let k1 = (k0 + spec.block_k).min(k);
                for j0 in (0..n).step_by(spec.block_n) {
                    let j1 = (j0 + spec.block_n).min(n);
                    for r in 0..tile_rows {
                        let a_row = &ad[(row0 + r) * k..(row0 + r + 1) * k];
                        let c_row = &mut c[r * n + j0..r * n + j1];
                        for kk in k0..k1 {
                            let aik = a_row[kk];
                            let b_row = &bd[kk * n + j0..kk * n + j1];
                            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                                *cv += aik * bv;
                            }
                        }
                    }
                }
            }
        });
    Matrix2::new(m, n, out)
}

/// Textbook triple loop; the reference for [`gemm_with`].
pub fn gemm_naive(a: &Matrix2, b: &Matrix2) -> Result<Matrix2> {
    check_dims(a, b)?;
    let (m, k) = a.dims();
    let n = b.cols();
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for kk in 0..k {
                acc += a.get(i, kk) * b.get(kk, j);
            }
            out.push(acc);
        }
    }
    Matrix2::new(m, n, out)
}

/// `aᵀ · b`.
pub fn gemm_tn(a: &Matrix2, b: &Matrix2) -> Result<Matrix2> {
    gemm(&a.transpose(), b)
}

/// `a · bᵀ`.
pub fn gemm_nt(a: &Matrix2, b: &Matrix2) -> Result<Matrix2> {
    gemm(a, &b.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bits(m: &Matrix2) -> Vec<u64> {
        m.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn two_by_two() {
        let a = Matrix2::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Matrix2::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]).unwrap();
        let c = gemm(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
        assert_eq!(gemm_naive(&a, &b).unwrap(), c);
    }

    #[test]
    fn identity_left() {
        let a = Matrix2::new(3, 4, (0..12).map(|v| f64::from(v) * 0.37 - 1.1).collect()).unwrap();
        let c = gemm(&Matrix2::identity(3).unwrap(), &a).unwrap();
        assert_eq!(c, a);
    }

    #[test]
    fn dimension_mismatch() {
        let a = Matrix2::zeros(2, 3).unwrap();
        assert!(gemm(&a, &a).is_err());
    }

    #[test]
    fn zero_block_rejected() {
        let a = Matrix2::zeros(2, 2).unwrap();
        let spec = GemmSpec {
            block_m: 0,
            ..GemmSpec::default()
        };
        assert!(gemm_with(&a, &a, &spec).is_err());
    }

    #[test]
    fn thread_count_does_not_change_bits() {
        let a = Matrix2::new(
            70,
            53,
            (0..70 * 53)
                .map(|v| ((v * 7919) % 1000) as f64 / 997.0 - 0.5)
                .collect(),
        )
        .unwrap();
        let b = Matrix2::new(
            53,
            41,
            (0..53 * 41)
                .map(|v| ((v * 104729) % 1000) as f64 / 991.0 - 0.5)
                .collect(),
        )
        .unwrap();
        let spec = GemmSpec {
            block_m: 4,
            block_n: 8,
            block_k: 16,
        };
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let many = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap();
        let c1 = one.install(|| gemm_with(&a, &b, &spec).unwrap());
        let c4 = many.install(|| gemm_with(&a, &b, &spec).unwrap());
        assert_eq!(bits(&c1), bits(&c4));
    }

    #[test]
    fn transposed_variants() {
        let a = Matrix2::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]).unwrap();
        let b =
            Matrix2::from_rows(&[&[1.0, 0.0, 2.0], &[0.0, 1.0, 1.0], &[1.0, 1.0, 0.0]]).unwrap();
        assert_eq!(gemm_tn(&a, &b).unwrap(), gemm(&a.transpose(), &b).unwrap());
        assert_eq!(gemm_nt(&b, &b).unwrap(), gemm(&b, &b.transpose()).unwrap());
    }

    proptest! {
        #[test]
        fn blocked_equals_naive_bitwise(
            m in 1usize..20, k in 1usize..20, n in 1usize..20,
            bm in 1usize..8, bn in 1usize..8, bk in 1usize..8,
            seed in any::<u64>(),
        ) {
            let fill = |len: usize, salt: u64| -> Vec<f64> {
                (0..len as u64)
                    .map(|i| {
                        let x = (i ^ salt).wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
                        (x % 2001) as f64 / 1000.0 - 1.0
                    })
                    .collect()
            };
            let a = Matrix2::new(m, k, fill(m * k, seed)).unwrap();
            let b = Matrix2::new(k, n, fill(k * n, seed.wrapping_add(1))).unwrap();
            let spec = GemmSpec { block_m: bm, block_n: bn, block_k: bk };
            let blocked = gemm_with(&a, &b, &spec).unwrap();
            let naive = gemm_naive(&a, &b).unwrap();
            prop_assert_eq!(bits(&blocked), bits(&naive));
        }
    }
}
