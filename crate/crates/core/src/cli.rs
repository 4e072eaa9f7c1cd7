//! Command-line front end. `main` only parses arguments and maps the result
//! to an exit code.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::bench::{default_cases, run_bench, write_csv, BenchCase, BenchOptions};
use crate::data::{DataSource, DatasetSpec, IdxImageFile};
use crate::dump::{looks_like_dump, Dump};
use crate::engines::Engine;
use crate::error::{Error, Result};
use crate::experiment::{train_equivalence_experiment, ExperimentConfig, DEFAULT_HIST_BINS};
use crate::geometry::{ConvGeometry, PaddingMode, Rounding};
use crate::lowering::{lower, FilterBank};
use crate::nn::{he_init, Optimizer, TrainConfig};
use crate::tensor::Tensor4;
use crate::verify::run_verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "convlower",
    version,
    about = "Convolution by im2col lowering, with verification and benchmarks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the output shape of a convolution as JSON.
    Shapes(ShapesArgs),
    /// Build the patch matrix of an input and optionally dump it.
    Lower(LowerArgs),
    /// Run one convolution engine on an input.
    Conv(ConvArgs),
    /// Compare the lowered engines with the direct engine on random geometries.
    Verify(VerifyArgs),
    /// Time every engine and write a CSV report.
    Bench(BenchArgs),
    /// Train the linear CNN and its dense counterpart and compare them.
    TrainEquiv(TrainArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GeometryArgs {
    #[arg(long)]
    pub kh: usize,
    #[arg(long)]
    pub kw: usize,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Per-side zero padding: a count, or valid, half or full.
    #[arg(long, default_value = "0")]
    pub pad: PaddingMode,
    /// Drop trailing rows and columns the stride does not reach instead of failing.
    #[arg(long)]
    pub allow_truncate: bool,
}

impl GeometryArgs {
    fn geometry(&self, c_in: usize, f: usize) -> Result<ConvGeometry> {
        let g = ConvGeometry::with_padding(self.kh, self.kw, c_in, f, self.stride, self.pad)?;
        Ok(if self.allow_truncate {
            g.with_rounding(Rounding::Truncate)
        } else {
            g
        })
    }
}

#[derive(Debug, Args)]
pub struct ShapesArgs {
    #[arg(long)]
    pub h: usize,
    #[arg(long)]
    pub w: usize,
    #[arg(long, default_value_t = 1)]
    pub c_in: usize,
    #[arg(long, default_value_t = 1)]
    pub filters: usize,
    #[command(flatten)]
    pub geom: GeometryArgs,
}

#[derive(Debug, Args)]
pub struct LowerArgs {
    /// IDX image file or tensor dump.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub geom: GeometryArgs,
    /// Write the patch matrix here as a dump.
    #[arg(long)]
    pub dump: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConvArgs {
    /// IDX image file or tensor dump.
    #[arg(long)]
    pub input: PathBuf,
    /// direct, true2d, gemm or lazy.
    #[arg(long, default_value = "gemm")]
    pub engine: Engine,
    #[command(flatten)]
    pub geom: GeometryArgs,
    /// Filter bank dump; He-initialized from `--seed` when absent.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub filters: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Write the output tensor here as a dump.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 1000)]
    pub cases: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// `b,h,w,c_in,kh,kw,f,stride,pad`; repeatable. Three built-in cases otherwise.
    #[arg(long = "case")]
    pub cases: Vec<BenchCase>,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// synthetic, mnist, mnist:<dir> or idx:<file>.
    #[arg(long, default_value = "synthetic")]
    pub data: String,
    /// Training images.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Validation images; defaults to `--n`.
    #[arg(long)]
    pub n_val: Option<usize>,
    /// Held-out images for the divergence metrics; defaults to `--n`.
    #[arg(long)]
    pub n_eval: Option<usize>,
    /// Side length of synthetic images.
    #[arg(long, default_value_t = 28)]
    pub side: usize,
    #[arg(long, default_value_t = 4)]
    pub kh: usize,
    #[arg(long, default_value_t = 4)]
    pub kw: usize,
    #[arg(long, default_value_t = 2)]
    pub stride: usize,
    #[arg(long, default_value_t = 8)]
    pub filters: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Sgd)]
    pub opt: OptimizerArg,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_HIST_BINS)]
    pub bins: usize,
    /// JSON report destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-epoch loss curves as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// Reads an IDX image file or a `bhwc` dump, deciding by content.
pub fn load_input(path: &Path) -> Result<Tensor4> {
    let bytes = fs::read(path)?;
    if looks_like_dump(&bytes) {
        Dump::read_from(&bytes[..])?.into_tensor()
    } else {
        IdxImageFile::parse(&bytes)?.to_tensor()
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn print_json(out: &mut dyn Write, value: &serde_json::Value) -> Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

fn shapes(args: &ShapesArgs, out: &mut dyn Write) -> Result<i32> {
    let g = args.geom.geometry(args.c_in, args.filters)?;
    let s = g.output_shape(args.h, args.w)?;
    print_json(
        out,
        &json!({ "h_out": s.h_out, "w_out": s.w_out, "c_out": s.c_out, "patches": s.patches(), "patch_len": g.patch_len() }),
    )?;
    Ok(EXIT_OK)
}

fn lower_cmd(args: &LowerArgs, out: &mut dyn Write) -> Result<i32> {
    let x = load_input(&args.input)?;
    let g = args.geom.geometry(x.shape().c, 1)?;
    let lm = lower(&x, &g)?;
    let s = lm.output_shape();
    if let Some(path) = &args.dump {
        let mut w = create(path)?;
        Dump::from_matrix(lm.matrix()).write_to(&mut w)?;
        w.flush()?;
    }
    print_json(
        out,
        &json!({
            "rows": lm.matrix().rows(),
            "cols": lm.matrix().cols(),
            "batch": lm.batch(),
            "h_out": s.h_out,
            "w_out": s.w_out,
            "bytes": lm.bytes(),
        }),
    )?;
    Ok(EXIT_OK)
}

fn conv_cmd(args: &ConvArgs, out: &mut dyn Write) -> Result<i32> {
    let x = load_input(&args.input)?;
    let c_in = x.shape().c;
    let bank = match &args.weights {
        Some(path) => Dump::load(path)?.into_filters()?,
        None => {
            let g = args.geom.geometry(c_in, args.filters)?;
            let mut rng = crate::seeded_rng(args.seed);
            FilterBank::for_geometry(&g, he_init(g.f, g.patch_len(), g.patch_len(), &mut rng)?)?
        }
    };
    let g = args.geom.geometry(c_in, bank.count())?;
    let y = args.engine.run(&x, &bank, &g)?;
    if let Some(path) = &args.out {
        let mut w = create(path)?;
        Dump::from_tensor(&y).write_to(&mut w)?;
        w.flush()?;
    }
    print_json(
        out,
        &json!({
            "engine": args.engine.name(),
            "shape": y.shape().as_array(),
            "checksum": y.data().iter().sum::<f64>(),
        }),
    )?;
    Ok(EXIT_OK)
}

fn verify_cmd(args: &VerifyArgs, out: &mut dyn Write) -> Result<i32> {
    let summary = run_verify(args.cases, args.seed)?;
    serde_json::to_writer(&mut *out, &summary)?;
    writeln!(out)?;
    if let Some(f) = &summary.failure {
        eprintln!(
            "counterexample: engine {} case {} rel_err {:e} geometry {}",
            f.engine,
            f.case_index,
            f.rel_err,
            serde_json::to_string(&f.geometry)?
        );
        return Ok(EXIT_CHECK_FAILED);
    }
    Ok(EXIT_OK)
}

fn bench_cmd(args: &BenchArgs, out: &mut dyn Write) -> Result<i32> {
    if args.threads == 0 {
        return Err(Error::InvalidConfig("--threads must be at least 1".into()));
    }
    let cases = if args.cases.is_empty() {
        default_cases()
    } else {
        args.cases.clone()
    };
    let opts = BenchOptions {
        reps: args.reps,
        warmup: args.warmup,
        seed: args.seed,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let rows = pool.install(|| run_bench(&cases, &opts))?;
    match &args.out {
        Some(path) => write_csv(&rows, create(path)?)?,
        None => write_csv(&rows, &mut *out)?,
    }
    Ok(EXIT_OK)
}

fn train_cmd(args: &TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let spec = DatasetSpec {
        source: DataSource::parse(&args.data)?,
        n_train: args.n,
        n_val: args.n_val.unwrap_or(args.n),
        n_eval: args.n_eval.unwrap_or(args.n),
        synthetic_side: args.side,
        seed: args.seed,
    };
    let cfg = ExperimentConfig {
        kh: args.kh,
        kw: args.kw,
        stride: args.stride,
        filters: args.filters,
        train: TrainConfig {
            lr: args.lr,
            batch_size: args.batch,
            epochs: args.epochs,
            optimizer: match args.opt {
                OptimizerArg::Sgd => Optimizer::Sgd,
                OptimizerArg::Adam => Optimizer::adam_default(),
            },
            seed: args.seed,
        },
        hist_bins: args.bins,
    };
    // Fail on a bad config before paying for data loading.
    cfg.train.validate()?;
    cfg.geometry(1)?;
    let data = spec.load()?;
    let mut outcome = train_equivalence_experiment(&data, &cfg)?;
    outcome.report.config.data = args.data.clone();
    if let Some(path) = &args.csv {
        let mut w = create(path)?;
        outcome.report.write_loss_csv(&mut w)?;
        w.flush()?;
    }
    match &args.out {
        Some(path) => {
            let mut w = create(path)?;
            serde_json::to_writer_pretty(&mut w, &outcome.report)?;
            writeln!(w)?;
            w.flush()?;
            let m = &outcome.report.metrics;
            print_json(
                out,
                &json!({
                    "act_fnorm_over_n": m.act_fnorm_over_n,
                    "weight_fnorm": m.weight_fnorm,
                    "hist_identical": m.hist.identical(),
                    "max_loss_rel_gap": outcome.report.max_loss_rel_gap(),
                }),
            )?;
        }
        None => {
            serde_json::to_writer_pretty(&mut *out, &outcome.report)?;
            writeln!(out)?;
        }
    }
    Ok(EXIT_OK)
}

/// Runs a parsed command, writing its primary output to `out`.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    match &cli.command {
        Command::Shapes(a) => shapes(a, out),
        Command::Lower(a) => lower_cmd(a, out),
        Command::Conv(a) => conv_cmd(a, out),
        Command::Verify(a) => verify_cmd(a, out),
        Command::Bench(a) => bench_cmd(a, out),
        Command::TrainEquiv(a) => train_cmd(a, out),
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        e if e.is_io() => EXIT_IO,
        Error::NonFiniteGradient { .. } => EXIT_CHECK_FAILED,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match execute(&cli, &mut out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_to_string(args: &[&str]) -> (Result<i32>, String) {
        let cli =
            Cli::try_parse_from(std::iter::once("convlower").chain(args.iter().copied())).unwrap();
        let mut buf = Vec::new();
        let code = execute(&cli, &mut buf);
        (code, String::from_utf8(buf).unwrap())
    }

    #[test]
    fn shapes_json() {
        let (code, text) = run_to_string(&[
            "shapes", "--h", "28", "--w", "28", "--kh", "4", "--kw", "4", "--stride", "2",
        ]);
        assert_eq!(code.unwrap(), EXIT_OK);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["h_out"], 13);
        assert_eq!(v["patches"], 169);
    }

    #[test]
    fn indivisible_stride_is_usage_error() {
        let (code, _) = run_to_string(&[
            "shapes", "--h", "28", "--w", "28", "--kh", "4", "--kw", "4", "--stride", "5",
        ]);
        assert_eq!(exit_code(&code.unwrap_err()), EXIT_USAGE);
        let (code, text) = run_to_string(&[
            "shapes",
            "--h",
            "28",
            "--w",
            "28",
            "--kh",
            "4",
            "--kw",
            "4",
            "--stride",
            "5",
            "--allow-truncate",
        ]);
        assert_eq!(code.unwrap(), EXIT_OK);
        assert!(text.contains("\"h_out\":5"));
    }

    #[test]
    fn missing_input_is_io_error() {
        let (code, _) = run_to_string(&[
            "lower",
            "--input",
            "/nonexistent/x.idx",
            "--kh",
            "2",
            "--kw",
            "2",
        ]);
        assert_eq!(exit_code(&code.unwrap_err()), EXIT_IO);
    }

    #[test]
    fn bad_flags_fail_to_parse() {
        for args in [
            &["convlower", "shapes", "--bogus"][..],
            &[
                "convlower",
                "conv",
                "--engine",
                "fft",
                "--input",
                "x",
                "--kh",
                "1",
                "--kw",
                "1",
            ],
        ] {
            assert!(Cli::try_parse_from(args).unwrap_err().use_stderr());
        }
    }
}
