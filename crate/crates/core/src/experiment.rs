//! The CONV-vs-lowered-FC training experiment.
//!
//! Both networks start from the same seeded draws (related by the weight
//! bijection), see identical mini-batch sequences, and are trained with the
//! same optimizer. The report carries per-epoch losses for both paths and
//! the divergence between them at the end.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::ConvGeometry;
use crate::lowering::{lower, FilterBank, LoweredMatrix};
use crate::nn::{CnnNet, FcNet, LinearLayer, OptimizerState, TrainConfig, WeightBijection};
use crate::tensor::{frobenius_distance, Matrix2, Tensor4};

pub const DEFAULT_HIST_BINS: usize = 50;

/// Layer shape and training settings of one experiment run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub filters: usize,
    pub train: TrainConfig,
    pub hist_bins: usize,
}

impl ExperimentConfig {
    pub fn geometry(&self, c_in: usize) -> Result<ConvGeometry> {
        ConvGeometry::new(self.kh, self.kw, c_in, self.filters, self.stride, 0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub seconds: f64,
}

/// Counts of two weight sets over one shared set of bin edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedHistogram {
    pub edges: Vec<f64>,
    pub cnn_counts: Vec<u64>,
    pub fc_counts: Vec<u64>,
}

impl SharedHistogram {
    pub fn new(cnn: &[f64], fc: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::InvalidConfig(
                "histogram needs at least one bin".into(),
            ));
        }
        let (mut lo, mut hi) = cnn
            .iter()
            .chain(fc)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidConfig(
                "histogram of empty or non-finite weights".into(),
            ));
        }
        if lo == hi {
            lo -= 0.5;
            hi += 0.5;
        }
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
        let count = |vals: &[f64]| {
            let mut counts = vec![0u64; bins];
            for &v in vals {
                let bin = (((v - lo) / width) as usize).min(bins - 1);
                counts[bin] += 1;
            }
            counts
        };
        Ok(Self {
            edges,
            cnn_counts: count(cnn),
            fc_counts: count(fc),
        })
    }

    pub fn identical(&self) -> bool {
        self.cnn_counts == self.fc_counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceMetrics {
    /// `‖V − U‖_F / n` over the evaluation images.
    pub act_fnorm_over_n: f64,
    /// `‖flatten(W_cnn) − flatten(W_fc)‖_F` after relabeling `W_fc` as a bank.
    pub weight_fnorm: f64,
    pub hist: SharedHistogram,
}

/// Divergence between the two first layers: activations `v`/`u` on `n`
/// images, and their weights compared in filter-bank layout.
pub fn equivalence_metrics(
    v: &Matrix2,
    u: &Matrix2,
    w_cnn: &FilterBank,
    w_fc: &LinearLayer,
    n: usize,
    bins: usize,
) -> Result<EquivalenceMetrics> {
    if v.dims() != u.dims() {
        return Err(Error::shape(format!(
            "V {:?} and U {:?} differ",
            v.dims(),
            u.dims()
        )));
    }
    if n == 0 {
        return Err(Error::InvalidConfig("sample count must be positive".into()));
    }
    let (f, kh, kw, c_in) = w_cnn.dims();
    let fc_bank = WeightBijection { kh, kw, c_in, f }.to_bank(w_fc)?;
    Ok(EquivalenceMetrics {
        act_fnorm_over_n: frobenius_distance(v.data(), u.data())? / n as f64,
        weight_fnorm: frobenius_distance(w_cnn.data(), fc_bank.data())?,
        hist: SharedHistogram::new(w_cnn.data(), fc_bank.data(), bins)?,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunNotes {
    pub loss: String,
    pub preprocessing: String,
    pub batch_order: String,
    pub validation: String,
}

impl Default for RunNotes {
    fn default() -> Self {
        Self {
            loss: "mse, mean over batch x features".into(),
            preprocessing: "pixels / 255".into(),
            batch_order: "one seeded shuffle per epoch, shared by both paths".into(),
            validation: "full validation set after every epoch, identity targets".into(),
        }
    }
}

/// Everything `train-equiv` writes to its JSON report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ReportConfig,
    pub cnn: TrainReport,
    pub fc: TrainReport,
    pub metrics: EquivalenceMetrics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportConfig {
    #[serde(flatten)]
    pub experiment: ExperimentConfig,
    pub n_train: usize,
    pub n_val: usize,
    pub n_eval: usize,
    pub image_shape: [usize; 3],
    #[serde(default)]
    pub data: String,
    pub notes: RunNotes,
}

/// Final state of both networks, for inspection after a run.
#[derive(Debug, Clone)]
pub struct TrainedPair {
    pub cnn: CnnNet,
    pub fc: FcNet,
}

pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub nets: TrainedPair,
}

fn epoch_orders(n: usize, epochs: usize, seed: u64) -> Vec<Vec<usize>> {
    // Distinct stream from weight init, which also derives from `seed`.
    let mut rng = crate::seeded_rng(seed ^ 0x5eed_ba7c_0000_0000);
    (0..epochs)
        .map(|_| {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            order
        })
        .collect()
}

/// Weighted mean of per-batch losses, i.e. the mean loss over the epoch's samples.
fn epoch_mean(losses: &[(f64, usize)]) -> f64 {
    let n: usize = losses.iter().map(|(_, b)| b).sum();
    losses.iter().map(|(l, b)| l * *b as f64).sum::<f64>() / n as f64
}

fn train_cnn(
    net: &mut CnnNet,
    data: &Dataset,
    targets: (&Matrix2, &Matrix2),
    orders: &[Vec<usize>],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let start = Instant::now();
    let mut opt = OptimizerState::new(
        cfg.optimizer,
        cfg.lr,
        &[net.conv.bank.data().len(), net.head.w.data().len()],
    );
    let mut report = TrainReport::default();
    for order in orders {
        let mut losses = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            let x = data.train.select(batch)?;
            let y = select_rows(targets.0, batch)?;
            losses.push((net.step(&x, &y, &mut opt)?, batch.len()));
        }
        report.train_loss.push(epoch_mean(&losses));
        let (_, y_hat) = net.forward(&data.val)?;
        report.val_loss.push(crate::nn::mse(&y_hat, targets.1)?);
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

fn train_fc(
    net: &mut FcNet,
    lowered: (&LoweredMatrix, &LoweredMatrix),
    targets: (&Matrix2, &Matrix2),
    orders: &[Vec<usize>],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let start = Instant::now();
    let mut opt = OptimizerState::new(
        cfg.optimizer,
        cfg.lr,
        &[net.dense1.w.data().len(), net.head.w.data().len()],
    );
    let train_view = lowered.0.view3();
    let mut report = TrainReport::default();
    for order in orders {
        let mut losses = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            let m = train_view.gather(batch)?;
            let y = select_rows(targets.0, batch)?;
            losses.push((net.step(&m, &y, &mut opt)?, batch.len()));
        }
        report.train_loss.push(epoch_mean(&losses));
        let (_, y_hat) = net.forward(&lowered.1.view3())?;
        report.val_loss.push(crate::nn::mse(&y_hat, targets.1)?);
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

fn select_rows(m: &Matrix2, rows: &[usize]) -> Result<Matrix2> {
    let mut data = Vec::with_capacity(rows.len() * m.cols());
    for &r in rows {
        data.extend_from_slice(m.row(r));
    }
    Matrix2::new(rows.len(), m.cols(), data)
}

fn check_images(t: &Tensor4, like: &Tensor4, name: &str) -> Result<()> {
    let (a, b) = (t.shape(), like.shape());
    if (a.h, a.w, a.c) != (b.h, b.w, b.c) {
        return Err(Error::shape(format!(
            "{name} images {a} differ from training images {b}"
        )));
    }
    Ok(())
}

/// Trains the CONV network and its lowered FC twin on `data` and compares them.
pub fn train_equivalence_experiment(
    data: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<ExperimentOutcome> {
    cfg.train.validate()?;
    check_images(&data.val, &data.train, "validation")?;
    check_images(&data.eval, &data.train, "evaluation")?;
    let shape = data.train.shape();
    let geom = cfg.geometry(shape.c)?;
    let head_out = shape.sample_len();
    let seed = cfg.train.seed;

    let mut cnn = CnnNet::init(geom, shape, head_out, seed)?;
    let mut fc = FcNet::init(geom, shape, head_out, seed)?;

    // The FC network only ever sees the lowered inputs.
    let train_m = lower(&data.train, &geom)?;
    let val_m = lower(&data.val, &geom)?;
    let targets = (data.train.to_sample_rows(), data.val.to_sample_rows());

    let orders = epoch_orders(shape.b, cfg.train.epochs, seed);
    let cnn_report = train_cnn(
        &mut cnn,
        data,
        (&targets.0, &targets.1),
        &orders,
        &cfg.train,
    )?;
    let fc_report = train_fc(
        &mut fc,
        (&train_m, &val_m),
        (&targets.0, &targets.1),
        &orders,
        &cfg.train,
    )?;

    let eval_m = lower(&data.eval, &geom)?;
    let v = cnn.conv.forward(&data.eval)?;
    let (u, _) = fc.forward(&eval_m.view3())?;
    let metrics = equivalence_metrics(
        &v,
        &u,
        &cnn.conv.bank,
        &fc.dense1,
        data.eval.shape().b,
        cfg.hist_bins,
    )?;

    let report = ExperimentReport {
        config: ReportConfig {
            experiment: *cfg,
            n_train: shape.b,
            n_val: data.val.shape().b,
            n_eval: data.eval.shape().b,
            image_shape: [shape.h, shape.w, shape.c],
            data: String::new(),
            notes: RunNotes::default(),
        },
        cnn: cnn_report,
        fc: fc_report,
        metrics,
    };
    Ok(ExperimentOutcome {
        report,
        nets: TrainedPair { cnn, fc },
    })
}

impl ExperimentReport {
    /// Loss curves as CSV: `epoch,cnn_train,fc_train,cnn_val,fc_val`.
    pub fn write_loss_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "cnn_train", "fc_train", "cnn_val", "fc_val"])?;
        for e in 0..self.cnn.train_loss.len() {
            out.write_record([
                (e + 1).to_string(),
                format!("{:e}", self.cnn.train_loss[e]),
                format!("{:e}", self.fc.train_loss[e]),
                format!("{:e}", self.cnn.val_loss[e]),
                format!("{:e}", self.fc.val_loss[e]),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Largest relative gap between the two paths' per-epoch losses.
    pub fn max_loss_rel_gap(&self) -> f64 {
        let gap = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(f64::MIN_POSITIVE))
                .fold(0.0, f64::max)
        };
        gap(&self.cnn.train_loss, &self.fc.train_loss)
            .max(gap(&self.cnn.val_loss, &self.fc.val_loss))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_images;
    use crate::nn::Optimizer;

    fn tiny_data() -> Dataset {
        Dataset {
            train: synthetic_images(12, 8, 8, 1).unwrap(),
            val: synthetic_images(6, 8, 8, 2).unwrap(),
            eval: synthetic_images(5, 8, 8, 3).unwrap(),
        }
    }

    fn cfg(epochs: usize, optimizer: Optimizer) -> ExperimentConfig {
        ExperimentConfig {
            kh: 2,
            kw: 2,
            stride: 2,
            filters: 3,
            train: TrainConfig {
                lr: 0.05,
                batch_size: 5,
                epochs,
                optimizer,
                seed: 7,
            },
            hist_bins: 10,
        }
    }

    #[test]
    fn zero_epochs_reports_shared_init() {
        let out = train_equivalence_experiment(&tiny_data(), &cfg(0, Optimizer::Sgd)).unwrap();
        assert!(out.report.cnn.train_loss.is_empty());
        assert!(out.report.fc.val_loss.is_empty());
        assert_eq!(out.report.metrics.weight_fnorm, 0.0);
        assert!(out.report.metrics.hist.identical());
    }

    #[test]
    fn sgd_paths_track_each_other() {
        let out = train_equivalence_experiment(&tiny_data(), &cfg(4, Optimizer::Sgd)).unwrap();
        let r = &out.report;
        assert_eq!(r.cnn.train_loss.len(), 4);
        assert!(r.max_loss_rel_gap() <= 1e-9);
        assert!(r.metrics.act_fnorm_over_n <= 1e-9);
        assert!(r.metrics.weight_fnorm <= 1e-9);
        // Training actually moved the weights.
        let init = CnnNet::init(
            cfg(0, Optimizer::Sgd).geometry(1).unwrap(),
            tiny_data().train.shape(),
            64,
            7,
        )
        .unwrap();
        assert_ne!(init.conv.bank, out.nets.cnn.conv.bank);
        assert!(r.cnn.train_loss[3] < r.cnn.train_loss[0]);
    }

    #[test]
    fn adam_run_records_metrics() {
        let out =
            train_equivalence_experiment(&tiny_data(), &cfg(3, Optimizer::adam_default())).unwrap();
        assert!(out.report.metrics.act_fnorm_over_n.is_finite());
        assert!(out.report.metrics.weight_fnorm.is_finite());
    }

    #[test]
    fn metrics_examples() {
        let g = ConvGeometry::new(1, 1, 1, 2, 1, 0).unwrap();
        let bank = FilterBank::for_geometry(&g, vec![0.5, -0.5]).unwrap();
        let dense = WeightBijection::for_geometry(&g).to_dense(&bank).unwrap();
        let v = Matrix2::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let m = equivalence_metrics(&v, &v, &bank, &dense, 2, 4).unwrap();
        assert_eq!(m.act_fnorm_over_n, 0.0);
        assert_eq!(m.weight_fnorm, 0.0);

        let u = Matrix2::from_rows(&[&[1.0, 2.0], &[3.0, 1.0]]).unwrap();
        let once = equivalence_metrics(&v, &u, &bank, &dense, 2, 4)
            .unwrap()
            .act_fnorm_over_n;
        assert_eq!(once, 1.5);
        let double =
            |m: &Matrix2| Matrix2::new(2, 2, m.data().iter().map(|x| 2.0 * x).collect()).unwrap();
        let twice = equivalence_metrics(&double(&v), &double(&u), &bank, &dense, 2, 4)
            .unwrap()
            .act_fnorm_over_n;
        assert_eq!(twice, 2.0 * once);
        assert!(
            equivalence_metrics(&v, &Matrix2::zeros(1, 2).unwrap(), &bank, &dense, 2, 4).is_err()
        );
    }

    #[test]
    fn histogram_binning() {
        let h = SharedHistogram::new(&[0.0, 0.5, 1.0], &[0.0, 0.25, 0.99], 4).unwrap();
        assert_eq!(h.edges, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(h.cnn_counts, vec![1, 0, 1, 1]);
        assert_eq!(h.fc_counts, vec![1, 1, 0, 1]);
        assert!(!h.identical());
        let flat = SharedHistogram::new(&[2.0], &[2.0], 3).unwrap();
        assert_eq!(flat.cnn_counts.iter().sum::<u64>(), 1);
    }

    #[test]
    fn loss_csv_layout() {
        let out = train_equivalence_experiment(&tiny_data(), &cfg(2, Optimizer::Sgd)).unwrap();
        let mut buf = Vec::new();
        out.report.write_loss_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,cnn_train,fc_train,cnn_val,fc_val");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("2,"));
    }

    #[test]
    fn report_json_shape() {
        let out = train_equivalence_experiment(&tiny_data(), &cfg(1, Optimizer::Sgd)).unwrap();
        let json = serde_json::to_value(&out.report).unwrap();
        for key in ["config", "cnn", "fc", "metrics"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        assert!(json["cnn"]["train_loss"].is_array());
        assert!(json["metrics"]["hist"]["edges"].is_array());
        assert!(json["metrics"]["act_fnorm_over_n"].is_number());
        assert!(json["metrics"]["hist"]["cnn_counts"].is_array());
    }
}
