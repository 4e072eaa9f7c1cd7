use std::path::Path;
use std::process::{Command, Output};

use convlower::data::write_idx_images;
use convlower::dump::Dump;
use convlower::lowering::FilterBank;
use tempfile::tempdir;

fn convlower(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_convlower"))
        .args(args)
        .env_remove("CONVLOWER_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn write_images(dir: &Path) -> String {
    let path = dir.join("images.idx");
    let pixels: Vec<u8> = (0..2 * 6 * 6).map(|i| (i * 7 % 256) as u8).collect();
    write_idx_images(&path, 2, 6, 6, &pixels).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn shapes_reports_patch_counts() {
    let v = json(&convlower(&[
        "shapes", "--h", "28", "--w", "28", "--kh", "4", "--kw", "4", "--stride", "4",
    ]));
    assert_eq!(v["patches"], 49);
    assert_eq!(v["patch_len"], 16);
    let v = json(&convlower(&[
        "shapes", "--h", "5", "--w", "5", "--kh", "3", "--kw", "3", "--pad", "full",
    ]));
    assert_eq!(v["h_out"], 7);
}

#[test]
fn lower_dumps_patch_matrix() {
    let dir = tempdir().unwrap();
    let input = write_images(dir.path());
    let dump = dir.path().join("m.bin");
    let v = json(&convlower(&[
        "lower",
        "--input",
        &input,
        "--kh",
        "2",
        "--kw",
        "2",
        "--stride",
        "2",
        "--dump",
        dump.to_str().unwrap(),
    ]));
    assert_eq!(
        (v["rows"].as_u64(), v["cols"].as_u64()),
        (Some(18), Some(4))
    );
    let m = Dump::load(&dump).unwrap().into_matrix().unwrap();
    assert_eq!(m.dims(), (18, 4));
    assert_eq!(m.get(0, 0), 0.0);
    assert_eq!(m.get(0, 1), 7.0 / 255.0);
}

#[test]
fn engines_agree_through_the_cli() {
    let dir = tempdir().unwrap();
    let input = write_images(dir.path());
    let weights = dir.path().join("k.bin");
    let bank =
        FilterBank::new(2, 3, 3, 1, (0..18).map(|i| i as f64 / 9.0 - 1.0).collect()).unwrap();
    Dump::from_filters(&bank).save(&weights).unwrap();
    let mut outputs = Vec::new();
    for engine in ["direct", "gemm", "lazy"] {
        let out = dir.path().join(format!("{engine}.bin"));
        let v = json(&convlower(&[
            "conv",
            "--input",
            &input,
            "--engine",
            engine,
            "--kh",
            "3",
            "--kw",
            "3",
            "--pad",
            "1",
            "--weights",
            weights.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]));
        assert_eq!(v["shape"], serde_json::json!([2, 6, 6, 2]));
        outputs.push(Dump::load(&out).unwrap().data);
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}

#[test]
fn verify_passes_and_is_reproducible() {
    let a = convlower(&["verify", "--cases", "20", "--seed", "7"]);
    let b = convlower(&["verify", "--cases", "20", "--seed", "7"]);
    assert_eq!(a.stdout, b.stdout);
    let v = json(&a);
    assert_eq!(v["passed"], true);
    assert_eq!(v["seed"], 7);
}

#[test]
fn bench_writes_csv_file() {
    let dir = tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let out = convlower(&[
        "bench",
        "--case",
        "1,8,8,1,3,3,2,1,0",
        "--reps",
        "1",
        "--threads",
        "2",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(csv).unwrap();
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn train_equiv_writes_report_and_curves() {
    let dir = tempdir().unwrap();
    let report = dir.path().join("report.json");
    let curves = dir.path().join("loss.csv");
    let v = json(&convlower(&[
        "train-equiv",
        "--n",
        "8",
        "--side",
        "8",
        "--kh",
        "2",
        "--kw",
        "2",
        "--stride",
        "2",
        "--filters",
        "2",
        "--epochs",
        "3",
        "--batch",
        "4",
        "--out",
        report.to_str().unwrap(),
        "--csv",
        curves.to_str().unwrap(),
    ]));
    assert_eq!(v["act_fnorm_over_n"], 0.0);
    assert_eq!(v["hist_identical"], true);
    let full: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(full["config"]["data"], "synthetic");
    assert_eq!(full["cnn"]["train_loss"].as_array().unwrap().len(), 3);
    assert_eq!(std::fs::read_to_string(curves).unwrap().lines().count(), 4);
}

#[test]
fn exit_codes() {
    assert_eq!(convlower(&["shapes", "--h", "28"]).status.code(), Some(2));
    assert_eq!(
        convlower(&["shapes", "--h", "28", "--w", "28", "--kh", "4", "--kw", "4", "--stride", "5"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        convlower(&[
            "lower",
            "--input",
            "/nonexistent/file",
            "--kh",
            "1",
            "--kw",
            "1"
        ])
        .status
        .code(),
        Some(3)
    );
    assert_eq!(
        convlower(&["train-equiv", "--data", "mnist"]).status.code(),
        Some(2)
    );
    assert_eq!(
        convlower(&["train-equiv", "--lr", "0"]).status.code(),
        Some(2)
    );
}
