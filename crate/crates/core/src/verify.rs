//! Randomized engine-equivalence sweep: every lowered engine is compared to
//! the direct sliding-window engine on seeded random geometries.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engines::{conv_direct, Engine};
use crate::error::Result;
use crate::geometry::ConvGeometry;
use crate::lowering::FilterBank;
use crate::tensor::{Shape4, Tensor4};

/// Relative tolerance: `max|direct − other| ≤ TOL·(1 + max|direct|)`.
pub const ENGINE_REL_TOL: f64 = 1e-10;

/// Bounds of the random geometry generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseBounds {
    pub max_batch: usize,
    pub max_side: usize,
    pub max_c_in: usize,
    pub max_filters: usize,
    pub max_pad: usize,
}

impl Default for CaseBounds {
    fn default() -> Self {
        Self {
            max_batch: 3,
            max_side: 12,
            max_c_in: 4,
            max_filters: 5,
            max_pad: 1,
        }
    }
}

/// One reproducible verification case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseGeometry {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub f: usize,
    pub stride: usize,
    pub pad: usize,
    /// Seed of the input and filter values.
    pub case_seed: u64,
}

impl CaseGeometry {
    pub fn input_shape(&self) -> Shape4 {
        Shape4::new(self.b, self.h, self.w, self.c_in)
    }

    pub fn geometry(&self) -> Result<ConvGeometry> {
        ConvGeometry::new(self.kh, self.kw, self.c_in, self.f, self.stride, self.pad)
    }

    /// Input and filters with values uniform in `[-1, 1)`.
    pub fn materialize(&self) -> Result<(Tensor4, FilterBank, ConvGeometry)> {
        let geom = self.geometry()?;
        let mut rng = crate::seeded_rng(self.case_seed);
        let shape = self.input_shape();
        let x = Tensor4::new(
            shape,
            (0..shape.len())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )?;
        let bank = FilterBank::for_geometry(
            &geom,
            (0..geom.f * geom.patch_len())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )?;
        Ok((x, bank, geom))
    }
}

/// Draws a case whose stride divides both sliding spans exactly.
pub fn random_case(rng: &mut impl Rng, bounds: &CaseBounds) -> CaseGeometry {
    let h = rng.random_range(1..=bounds.max_side);
    let w = rng.random_range(1..=bounds.max_side);
    let kh = rng.random_range(1..=h.min(w));
    let kw = rng.random_range(1..=h.min(w));
    let pad = rng.random_range(0..=bounds.max_pad);
    let (span_h, span_w) = (h + 2 * pad - kh, w + 2 * pad - kw);
    let strides: Vec<usize> = (1..=span_h.max(span_w).max(1))
        .filter(|s| span_h % s == 0 && span_w % s == 0)
        .collect();
    CaseGeometry {
        b: rng.random_range(1..=bounds.max_batch),
        h,
        w,
        c_in: rng.random_range(1..=bounds.max_c_in),
        kh,
        kw,
        f: rng.random_range(1..=bounds.max_filters),
        stride: *strides.choose(rng).expect("stride 1 always divides"),
        pad,
        case_seed: rng.random(),
    }
}

/// Largest deviation of `other` from `reference`, relative to `1 + max|reference|`.
pub fn relative_error(reference: &Tensor4, other: &Tensor4) -> f64 {
    if reference.shape() != other.shape() {
        return f64::INFINITY;
    }
    let scale = 1.0 + reference.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = reference
        .data()
        .iter()
        .zip(other.data())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if diff.is_nan() {
        f64::INFINITY
    } else {
        diff / scale
    }
}

pub type EngineFn<'a> =
    &'a (dyn Fn(&Tensor4, &FilterBank, &ConvGeometry) -> Result<Tensor4> + Sync);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub engine: String,
    pub rel_err: f64,
    pub geometry: CaseGeometry,
    pub seed: u64,
    pub case_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifySummary {
    pub cases: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub worst_geometry: Option<CaseGeometry>,
    pub passed: bool,
    /// First failing case, if any.
    pub failure: Option<Counterexample>,
}

/// Sweeps `cases` random geometries comparing each named engine to the
/// direct engine.
pub fn run_verify_with(
    cases: usize,
    seed: u64,
    engines: &[(&str, EngineFn<'_>)],
) -> Result<VerifySummary> {
    let bounds = CaseBounds::default();
    let mut rng = crate::seeded_rng(seed);
    let mut summary = VerifySummary {
        cases,
        seed,
        tolerance: ENGINE_REL_TOL,
        max_rel_err: 0.0,
        worst_geometry: None,
        passed: true,
        failure: None,
    };
    for case_index in 0..cases {
        let case = random_case(&mut rng, &bounds);
        let (x, bank, geom) = case.materialize()?;
        let reference = conv_direct(&x, &bank, &geom)?;
        for (name, engine) in engines {
            let rel = match engine(&x, &bank, &geom) {
                Ok(out) => relative_error(&reference, &out),
                Err(_) => f64::INFINITY,
            };
            if rel > summary.max_rel_err || summary.worst_geometry.is_none() {
                summary.max_rel_err = summary.max_rel_err.max(rel);
                summary.worst_geometry = Some(case);
            }
            if rel > ENGINE_REL_TOL && summary.failure.is_none() {
                summary.passed = false;
                summary.failure = Some(Counterexample {
                    engine: name.to_string(),
                    rel_err: rel,
                    geometry: case,
                    seed,
                    case_index,
                });
            }
        }
    }
    Ok(summary)
}

/// The standard sweep over the im2col+GEMM and lazy engines.
pub fn run_verify(cases: usize, seed: u64) -> Result<VerifySummary> {
    let gemm = |x: &Tensor4, k: &FilterBank, g: &ConvGeometry| Engine::Im2colGemm.run(x, k, g);
    let lazy = |x: &Tensor4, k: &FilterBank, g: &ConvGeometry| Engine::LazyGemm.run(x, k, g);
    run_verify_with(cases, seed, &[("gemm", &gemm), ("lazy", &lazy)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_cases_are_valid() {
        let mut rng = crate::seeded_rng(1);
        let bounds = CaseBounds::default();
        for _ in 0..500 {
            let c = random_case(&mut rng, &bounds);
            assert!(c.b <= 3 && c.h <= 12 && c.w <= 12 && c.c_in <= 4 && c.f <= 5 && c.pad <= 1);
            assert!(c.kh <= c.h.min(c.w) && c.kw <= c.h.min(c.w));
            let g = c.geometry().unwrap();
            g.output_shape(c.h, c.w).unwrap();
        }
    }

    #[test]
    fn verdict_is_deterministic() {
        let a = run_verify(1, 42).unwrap();
        assert_eq!(a, run_verify(1, 42).unwrap());
        assert!(a.passed);
    }

    #[test]
    fn corrupted_engine_is_caught() {
        let broken = |x: &Tensor4, k: &FilterBank, g: &ConvGeometry| {
            let out = Engine::Im2colGemm.run(x, k, g)?;
            let mut data = out.data().to_vec();
            data[0] += 1e-3;
            Tensor4::new(out.shape(), data)
        };
        let s = run_verify_with(5, 3, &[("broken", &broken)]).unwrap();
        assert!(!s.passed);
        let f = s.failure.unwrap();
        assert_eq!(f.engine, "broken");
        assert_eq!(f.case_index, 0);
        assert!(f.rel_err > ENGINE_REL_TOL);
    }

    #[test]
    fn relative_error_of_mismatched_shapes_is_infinite() {
        let a = Tensor4::zeros(Shape4::new(1, 1, 1, 1)).unwrap();
        let b = Tensor4::zeros(Shape4::new(1, 1, 2, 1)).unwrap();
        assert_eq!(relative_error(&a, &b), f64::INFINITY);
        assert_eq!(relative_error(&a, &a), 0.0);
    }
}
