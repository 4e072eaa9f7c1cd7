//! Two-layer linear networks that learn the identity map, built two ways:
//! a convolution first layer ([`CnnNet`]) and a dense first layer applied to
//! the lowered patch matrix ([`FcNet`]). Neither layer has a bias.
//!
//! The loss is the mean squared error over every element of the batch, so
//! for a batch of `b` targets with `D` features the output gradient is
//! `2(ŷ − y)/(b·D)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::engines::conv_direct;
use crate::error::{Error, Result};
use crate::gemm::{gemm, gemm_nt, gemm_tn};
use crate::geometry::{pad_zeros, ConvGeometry, OutputShape};
use crate::lowering::{stretch_filters, unstretch_matrix, FilterBank};
use crate::tensor::{Matrix2, Shape4, Tensor3View, Tensor4};

/// Dense layer computing `x · W` for row-vector inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub w: Matrix2,
}

impl LinearLayer {
    pub fn new(w: Matrix2) -> Self {
        Self { w }
    }

    pub fn in_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn forward(&self, x: &Matrix2) -> Result<Matrix2> {
        gemm(x, &self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub bank: FilterBank,
    pub geom: ConvGeometry,
}

impl ConvLayer {
    pub fn new(bank: FilterBank, geom: ConvGeometry) -> Result<Self> {
        bank.matches(&geom)?;
        Ok(Self { bank, geom })
    }

    /// Convolution output with each sample flattened to one row of
    /// `h_out·w_out·f` values.
    pub fn forward(&self, x: &Tensor4) -> Result<Matrix2> {
        let out = conv_direct(x, &self.bank, &self.geom)?;
        let s = out.shape();
        Matrix2::new(s.b, s.sample_len(), out.into_data())
    }

    /// Filter gradient by sliding-window correlation of the input with the
    /// output gradient `dv` (one row per sample, as produced by `forward`).
    pub fn filter_gradient(&self, x: &Tensor4, dv: &Matrix2) -> Result<FilterBank> {
        let g = &self.geom;
        let out = g.check_input(x.shape())?;
        let b = x.shape().b;
        if dv.dims() != (b, out.patches() * g.f) {
            return Err(Error::shape(format!(
                "output gradient {:?} does not match ({b}, {})",
                dv.dims(),
                out.patches() * g.f
            )));
        }
        let src = pad_zeros(x, g.pad);
        let s = g.stride;
        let mut grad = Vec::with_capacity(g.f * g.patch_len());
        for fi in 0..g.f {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    for d in 0..g.c_in {
                        let mut acc = 0.0;
                        for l in 0..b {
                            let row = dv.row(l);
                            for oi in 0..out.h_out {
                                for oj in 0..out.w_out {
                                    let x = src.get(l, oi * s + ki, oj * s + kj, d);
                                    acc += x * row[(oi * out.w_out + oj) * g.f + fi];
                                }
                            }
                        }
                        grad.push(acc);
                    }
                }
            }
        }
        FilterBank::for_geometry(g, grad)
    }
}

/// Relabeling between a `(f, k_h, k_w, c_in)` filter bank and the
/// `(k_h·k_w·c_in, f)` weight of the equivalent dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightBijection {
    pub kh: usize,
    pub kw: usize,
    pub c_in: usize,
    pub f: usize,
}

impl WeightBijection {
    pub fn for_geometry(g: &ConvGeometry) -> Self {
        Self {
            kh: g.kh,
            kw: g.kw,
            c_in: g.c_in,
            f: g.f,
        }
    }

    pub fn to_dense(&self, bank: &FilterBank) -> Result<LinearLayer> {
        if bank.dims() != (self.f, self.kh, self.kw, self.c_in) {
            return Err(Error::shape(format!(
                "bank {:?} does not fit {self:?}",
                bank.dims()
            )));
        }
        Ok(LinearLayer::new(stretch_filters(bank).into_matrix()))
    }

    pub fn to_bank(&self, dense: &LinearLayer) -> Result<FilterBank> {
        if dense.out_dim() != self.f {
            return Err(Error::shape(format!(
                "dense layer has {} outputs, expected {}",
                dense.out_dim(),
                self.f
            )));
        }
        unstretch_matrix(&dense.w, self.kh, self.kw, self.c_in)
    }
}

/// `rows·cols` draws from `Normal(0, 2/fan_in)`, in row-major order.
pub fn he_init(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if fan_in == 0 {
        return Err(Error::InvalidConfig("fan_in must be at least 1".into()));
    }
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite positive std");
    Ok((0..rows * cols).map(|_| normal.sample(rng)).collect())
}

pub fn mse(y_hat: &Matrix2, y: &Matrix2) -> Result<f64> {
    if y_hat.dims() != y.dims() {
        return Err(Error::shape(format!(
            "prediction {:?} and target {:?} differ",
            y_hat.dims(),
            y.dims()
        )));
    }
    let n = y.data().len() as f64;
    Ok(y_hat
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// `∂mse/∂ŷ` under the all-element mean.
pub fn mse_grad(y_hat: &Matrix2, y: &Matrix2) -> Result<Matrix2> {
    mse(y_hat, y)?;
    let scale = 2.0 / y.data().len() as f64;
    let data = y_hat
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| scale * (a - b))
        .collect();
    Matrix2::new(y.rows(), y.cols(), data)
}

fn ensure_finite(values: &[f64], layer: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteGradient { layer })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub const fn adam_default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "Adam needs betas in [0, 1) and eps > 0, got ({beta1}, {beta2}, {eps})"
                )));
            }
        }
        Ok(())
    }
}

/// Per-parameter optimizer state. Slot 0 is the first layer, slot 1 the head.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    t: i32,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, lr: f64, sizes: &[usize]) -> Self {
        let moments = match kind {
            Optimizer::Sgd => Vec::new(),
            Optimizer::Adam { .. } => sizes
                .iter()
                .map(|&n| (vec![0.0; n], vec![0.0; n]))
                .collect(),
        };
        Self {
            kind,
            lr,
            t: 0,
            moments,
        }
    }

    /// Advances the step counter; call once per mini-batch before `update`.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, slot: usize, w: &mut [f64], g: &[f64]) {
        debug_assert_eq!(w.len(), g.len());
        match self.kind {
            Optimizer::Sgd => {
                for (wi, gi) in w.iter_mut().zip(g) {
                    *wi -= self.lr * gi;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let t = self.t.max(1);
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let (m, v) = &mut self.moments[slot];
                for i in 0..w.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    w[i] -= self.lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

/// Draws the first-layer weights in `(i', j', d, f)` order, then the head.
fn shared_draws(
    geom: &ConvGeometry,
    head_in: usize,
    head_out: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rng = crate::seeded_rng(seed);
    let first = he_init(geom.patch_len(), geom.f, geom.patch_len(), &mut rng)?;
    let head = he_init(head_in, head_out, head_in, &mut rng)?;
    Ok((first, head))
}

/// Gradients of one mini-batch, in each layer's native layout.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub first: Vec<f64>,
    pub head: Matrix2,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnNet {
    pub conv: ConvLayer,
    pub head: LinearLayer,
}

impl CnnNet {
    /// He-initialized network for inputs of shape `input` (batch ignored).
    pub fn init(geom: ConvGeometry, input: Shape4, head_out: usize, seed: u64) -> Result<Self> {
        let out = geom.check_input(input)?;
        let head_in = out.patches() * geom.f;
        let (first, head) = shared_draws(&geom, head_in, head_out, seed)?;
        let n = geom.patch_len();
        let mut bank = vec![0.0; n * geom.f];
        let mut draws = first.into_iter();
        // Stream order is (i', j', d) outer, filter inner.
        for q in 0..n {
            for fi in 0..geom.f {
                bank[fi * n + q] = draws.next().expect("one draw per weight");
            }
        }
        Ok(Self {
            conv: ConvLayer::new(FilterBank::for_geometry(&geom, bank)?, geom)?,
            head: LinearLayer::new(Matrix2::new(head_in, head_out, head)?),
        })
    }

    pub fn forward(&self, x: &Tensor4) -> Result<(Matrix2, Matrix2)> {
        forward_cnn(x, &self.conv, &self.head)
    }

    pub fn gradients(&self, x: &Tensor4, y: &Matrix2) -> Result<Gradients> {
        let (v, y_hat) = self.forward(x)?;
        let loss = mse(&y_hat, y)?;
        let dy = mse_grad(&y_hat, y)?;
        let head = gemm_tn(&v, &dy)?;
        ensure_finite(head.data(), "head")?;
        let dv = gemm_nt(&dy, &self.head.w)?;
        let first = self.conv.filter_gradient(x, &dv)?.data().to_vec();
        ensure_finite(&first, "conv")?;
        Ok(Gradients { first, head, loss })
    }

    pub fn step(&mut self, x: &Tensor4, y: &Matrix2, opt: &mut OptimizerState) -> Result<f64> {
        let g = self.gradients(x, y)?;
        opt.begin_step();
        opt.update(0, self.conv.bank.data_mut(), &g.first);
        opt.update(1, self.head.w.data_mut(), g.head.data());
        Ok(g.loss)
    }
}

pub fn forward_cnn(
    x: &Tensor4,
    conv: &ConvLayer,
    head: &LinearLayer,
) -> Result<(Matrix2, Matrix2)> {
    let v = conv.forward(x)?;
    if head.in_dim() != v.cols() {
        return Err(Error::shape(format!(
            "head expects {} inputs, convolution yields {}",
            head.in_dim(),
            v.cols()
        )));
    }
    let y_hat = head.forward(&v)?;
    Ok((v, y_hat))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcNet {
    pub dense1: LinearLayer,
    pub head: LinearLayer,
    /// Kernel positions per sample, `h_out·w_out`.
    pub positions: usize,
}

impl FcNet {
    pub fn init(geom: ConvGeometry, input: Shape4, head_out: usize, seed: u64) -> Result<Self> {
        let out: OutputShape = geom.check_input(input)?;
        let head_in = out.patches() * geom.f;
        let (first, head) = shared_draws(&geom, head_in, head_out, seed)?;
        Ok(Self {
            dense1: LinearLayer::new(Matrix2::new(geom.patch_len(), geom.f, first)?),
            head: LinearLayer::new(Matrix2::new(head_in, head_out, head)?),
            positions: out.patches(),
        })
    }

    pub fn forward(&self, m3: &Tensor3View<'_>) -> Result<(Matrix2, Matrix2)> {
        forward_fc(m3, &self.dense1, &self.head)
    }

    /// `m` holds the stretched patches of the batch, `positions` rows per sample.
    pub fn gradients(&self, m: &Matrix2, y: &Matrix2) -> Result<Gradients> {
        let m3 = Tensor3View::new(m, y.rows())?;
        let (u, y_hat) = self.forward(&m3)?;
        let loss = mse(&y_hat, y)?;
        let dy = mse_grad(&y_hat, y)?;
        let head = gemm_tn(&u, &dy)?;
        ensure_finite(head.data(), "head")?;
        let du = gemm_nt(&dy, &self.head.w)?.reshape(m.rows(), self.dense1.out_dim())?;
        let first = gemm_tn(m, &du)?.into_data();
        ensure_finite(&first, "dense1")?;
        Ok(Gradients { first, head, loss })
    }

    pub fn step(&mut self, m: &Matrix2, y: &Matrix2, opt: &mut OptimizerState) -> Result<f64> {
        let g = self.gradients(m, y)?;
        opt.begin_step();
        opt.update(0, self.dense1.w.data_mut(), &g.first);
        opt.update(1, self.head.w.data_mut(), g.head.data());
        Ok(g.loss)
    }
}

/// Dense first layer over the lowered input: each block `M′[l]` times the
/// dense weight gives that sample's `(h_out·w_out, f)` activations, which are
/// flattened row-major into one row of `u`.
pub fn forward_fc(
    m3: &Tensor3View<'_>,
    dense1: &LinearLayer,
    head: &LinearLayer,
) -> Result<(Matrix2, Matrix2)> {
    let (b, positions, k) = m3.shape();
    if dense1.in_dim() != k {
        return Err(Error::shape(format!(
            "dense layer expects {} inputs, patches have {k}",
            dense1.in_dim()
        )));
    }
    // The blocks are contiguous, so one product over the backing matrix
    // computes every per-sample block product at once.
    let u = dense1
        .forward(m3.backing())?
        .reshape(b, positions * dense1.out_dim())?;
    if head.in_dim() != u.cols() {
        return Err(Error::shape(format!(
            "head expects {} inputs, dense layer yields {}",
            head.in_dim(),
            u.cols()
        )));
    }
    let y_hat = head.forward(&u)?;
    Ok((u, y_hat))
}
