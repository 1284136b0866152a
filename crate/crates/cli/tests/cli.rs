use std::path::Path;
use std::process::{Command, Output};

use vit_adapter::image::{encode_ppm, parse_pgm};
use vit_adapter::weights::decode;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vit-adapter"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn forward_reports_micro_pyramid() {
    let o = cli(&["forward", "--preset", "micro", "--size", "64"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "P4 16x16, P8 8x8, P16 4x4, P32 2x2");
}

#[test]
fn forward_reads_ppm_and_writes_features() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("in.ppm");
    let rgb: Vec<u8> = (0..3 * 96 * 64).map(|i| (i * 31 % 251) as u8).collect();
    std::fs::write(&img, encode_ppm(96, 64, &rgb)).unwrap();
    let feats = dir.path().join("f.vadw");
    let o = cli(&["forward", "--input", path(&img), "--features", path(&feats)]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(stdout(&o).starts_with("P4 16x24, P8 8x12, P16 4x6, P32 2x3"));
    let entries = decode(&std::fs::read(&feats).unwrap()).unwrap();
    let names: Vec<&str> = entries.iter().map(|e| e.name.as_str()).collect();
    assert_eq!(names, ["P16", "P32", "P4", "P8"]);
    assert_eq!(entries[2].dims, [1, 32, 16, 24]);
}

#[test]
fn params_audit_small() {
    let o = cli(&["params", "--preset", "small"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("paper: 5.8M"), "{text}");
    assert!(text.contains("paper: 21.7M"));
    assert_eq!(text.matches(": pass").count(), 2);
}

#[test]
fn gradcheck_micro_f64_passes() {
    let o = cli(&["gradcheck", "--preset", "micro", "--precision", "f64"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("full model"));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn usage_errors_exit_two() {
    for args in [
        &["frobnicate"][..],
        &["forward", "--preset", "gigantic"],
        &["forward", "--interactions", "3"],
        &["gradcheck", "--precision", "f32"],
        &["toy-train", "--model", "resnet"],
        &["spectrum", "--stride", "3"],
        &["export-weights"],
    ] {
        assert_eq!(cli(args).status.code(), Some(2), "{args:?}");
    }
    assert_eq!(cli(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("bad.ppm");
    std::fs::write(&img, b"P6\n4 4\n255\n\x01\x02").unwrap();
    assert_eq!(
        cli(&["forward", "--input", path(&img)]).status.code(),
        Some(1)
    );
    // 80 is not a multiple of the coarsest stride
    assert_eq!(cli(&["forward", "--size", "80"]).status.code(), Some(1));
}

#[test]
fn spectrum_csv_and_gray_map() {
    let dir = tempfile::tempdir().unwrap();
    let gray = dir.path().join("g.pgm");
    let o = cli(&[
        "spectrum",
        "--size",
        "128",
        "--stride",
        "4",
        "--bins",
        "8",
        "--gray",
        path(&gray),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("freq,rel_log_amp"));
    assert_eq!(lines.next(), Some("0.000000,0.000000"));
    assert_eq!(lines.count(), 8);
    let (w, h, _) = parse_pgm(&std::fs::read(&gray).unwrap()).unwrap();
    assert_eq!((w, h), (32, 32));
    assert_eq!(cli(&["spectrum", "--plain"]).status.code(), Some(0));
}

#[test]
fn toy_train_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let (log, w) = (
            dir.path().join(format!("{tag}.csv")),
            dir.path().join(format!("{tag}.vadw")),
        );
        let args = [
            "toy-train",
            "--steps",
            "3",
            "--batch",
            "2",
            "--log-every",
            "1",
            "--eval-samples",
            "2",
            "--seed",
            "4",
        ];
        let o = cli(&[&args[..], &["--log", path(&log), "--weights", path(&w)]].concat());
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
        assert!(stdout(&o).starts_with("final_miou="));
        (std::fs::read(log).unwrap(), std::fs::read(w).unwrap())
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a, b);
    let csv = String::from_utf8(a.0).unwrap();
    assert!(csv.starts_with("step,loss,miou\n1,"));
    assert_eq!(csv.lines().count(), 5);
    let args = [
        "toy-train",
        "--steps",
        "3",
        "--batch",
        "2",
        "--log-every",
        "1",
        "--eval-samples",
        "2",
        "--seed",
        "4",
    ];
    assert_eq!(stdout(&cli(&args)), csv, "stdout log equals the file log");
}

#[test]
fn describe_output_is_a_valid_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    let o = cli(&[
        "describe", "--preset", "base", "--mode", "none", "--seed", "9",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("# adapter_ffn = 192"));
    assert!(text.contains("# value_dim = 384"));
    std::fs::write(&cfg, &text).unwrap();
    assert_eq!(stdout(&cli(&["describe", "--config", path(&cfg)])), text);
}

#[test]
fn export_weights_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for p in [&a, &b] {
        assert_eq!(
            cli(&["export-weights", "--seed", "2", "--out", path(p)])
                .status
                .code(),
            Some(0)
        );
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let c = dir.path().join("c");
    cli(&["export-weights", "--seed", "3", "--out", path(&c)]);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}
