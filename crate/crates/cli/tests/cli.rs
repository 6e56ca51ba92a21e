use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use gptqt_core::calib_stats::HessianState;
use gptqt_core::tensor_store::{read_tensor, write_tensor};
use gptqt_core::TensorF32;

fn gptqt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gptqt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = gptqt(args);
    assert!(
        out.status.success(),
        "gptqt {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, extra: &[&str]) {
    let mut args = vec!["gen", "--out", p(dir)];
    args.extend_from_slice(extra);
    ok(&args);
}

/// Data rows of a CSV report, keyed by the header.
fn records(report: &str) -> (csv::StringRecord, Vec<csv::StringRecord>) {
    let mut rd = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(report.as_bytes());
    let header = rd.headers().unwrap().clone();
    let rows = rd.records().map(|r| r.unwrap()).collect();
    (header, rows)
}

fn column(header: &csv::StringRecord, row: &csv::StringRecord, name: &str) -> String {
    let i = header
        .iter()
        .position(|h| h == name)
        .unwrap_or_else(|| panic!("no column {name}"));
    row[i].to_string()
}

#[test]
fn gen_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let shape = [
        "--rows",
        "64",
        "--cols",
        "64",
        "--nsamples",
        "128",
        "--seed",
        "1",
    ];
    gen(a.path(), &shape);
    gen(b.path(), &shape);
    for f in ["weights.gqtf", "calib.gqtf", "val.gqtf"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn gen_correlated_calibration() {
    let d = tempfile::tempdir().unwrap();
    gen(
        d.path(),
        &[
            "--rows",
            "16",
            "--cols",
            "32",
            "--nsamples",
            "256",
            "--rho",
            "0.9",
        ],
    );
    let x = read_tensor(d.path().join("calib.gqtf")).unwrap();
    assert_eq!(x.dims(), &[32, 256]);
    let h = HessianState::from_activations(&x, 0.01).unwrap();
    let k = h.k();
    let (mut diag, mut off) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let v = h.h()[i * k + j].abs();
            if i == j {
                diag += v;
            } else {
                off += v;
            }
        }
    }
    // neighbouring features alone carry 2 * 0.9 of the diagonal mass per row
    assert!(off > 0.5 * diag, "off {off} diag {diag}");
}

#[test]
fn gen_missing_dir() {
    let d = tempfile::tempdir().unwrap();
    let out = gptqt(&["gen", "--out", p(&d.path().join("nope"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}

#[test]
fn quantize_then_eval_agree() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), &["--seed", "3"]);
    let (w, c, v) = (
        d.path().join("weights.gqtf"),
        d.path().join("calib.gqtf"),
        d.path().join("val.gqtf"),
    );
    let q = d.path().join("w.gqtq");
    let t = Instant::now();
    let report = ok(&[
        "quantize",
        "--weights",
        p(&w),
        "--calib",
        p(&c),
        "--val",
        p(&v),
        "--out",
        p(&q),
    ]);
    assert!(t.elapsed() < Duration::from_secs(60));
    assert!(report.starts_with("# gptqt-report/1 command=quantize\n"));
    assert!(report.contains("inter_bits=5 range=1 grid_points=64 damp=0.01 block=128"));
    let (h, rows) = records(&report);
    assert_eq!(rows.len(), 1);
    assert_eq!(column(&h, &rows[0], "method"), "gptqt");
    let pack_bytes: usize = column(&h, &rows[0], "pack_bytes").parse().unwrap();
    assert_eq!(fs::metadata(&q).unwrap().len() as usize, pack_bytes);

    let ev = ok(&[
        "eval",
        "--weights",
        p(&w),
        "--quantized",
        p(&q),
        "--val",
        p(&v),
    ]);
    let (eh, erows) = records(&ev);
    assert_eq!(column(&eh, &erows[0], "source"), "gqtq");
    for name in ["output_rel_error", "weight_mse"] {
        let a: f64 = column(&h, &rows[0], name).parse().unwrap();
        let b: f64 = column(&eh, &erows[0], name).parse().unwrap();
        assert_eq!(a, b, "{name}");
    }
    assert_eq!(
        ev,
        ok(&[
            "eval",
            "--weights",
            p(&w),
            "--quantized",
            p(&q),
            "--val",
            p(&v)
        ])
    );
}

#[test]
fn eval_pass_through_is_exact() {
    let d = tempfile::tempdir().unwrap();
    gen(
        d.path(),
        &["--rows", "8", "--cols", "16", "--nsamples", "32"],
    );
    let w = d.path().join("weights.gqtf");
    let ev = ok(&[
        "eval",
        "--weights",
        p(&w),
        "--quantized",
        p(&w),
        "--val",
        p(&d.path().join("val.gqtf")),
    ]);
    let (h, rows) = records(&ev);
    assert_eq!(column(&h, &rows[0], "source"), "gqtf");
    assert_eq!(
        column(&h, &rows[0], "output_rel_error")
            .parse::<f64>()
            .unwrap(),
        0.0
    );
    assert_eq!(
        column(&h, &rows[0], "weight_mse").parse::<f64>().unwrap(),
        0.0
    );
}

#[test]
fn eval_shape_mismatch() {
    let d = tempfile::tempdir().unwrap();
    gen(
        d.path(),
        &["--rows", "8", "--cols", "16", "--nsamples", "32"],
    );
    let other = d.path().join("other.gqtf");
    write_tensor(&other, &TensorF32::matrix(8, 12, vec![0.5; 96]).unwrap()).unwrap();
    let w = d.path().join("weights.gqtf");
    let out = gptqt(&[
        "eval",
        "--weights",
        p(&w),
        "--quantized",
        p(&other),
        "--val",
        p(&d.path().join("val.gqtf")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let out = gptqt(&[
        "eval",
        "--weights",
        p(&other),
        "--quantized",
        p(&other),
        "--val",
        p(&d.path().join("val.gqtf")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn validation_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    gen(
        d.path(),
        &["--rows", "8", "--cols", "16", "--nsamples", "32"],
    );
    let (w, c) = (d.path().join("weights.gqtf"), d.path().join("calib.gqtf"));
    let q = d.path().join("q.gqtq");
    let base = [
        "quantize",
        "--weights",
        p(&w),
        "--calib",
        p(&c),
        "--out",
        p(&q),
    ];
    let run = |extra: &[&str]| {
        let mut a = base.to_vec();
        a.extend_from_slice(extra);
        gptqt(&a)
    };
    let out = run(&["--bits", "4", "--inter-bits", "4"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr)
        .contains("final bits (4) must be below intermediate bits (4)"));
    assert!(!q.exists());
    assert_eq!(run(&["--damp", "0"]).status.code(), Some(2));
    assert_eq!(run(&["--method", "nope"]).status.code(), Some(2));
    assert_eq!(gptqt(&["bench", "--reps", "2"]).status.code(), Some(2));
    let out = gptqt(&[
        "quantize",
        "--weights",
        p(&d.path().join("missing.gqtf")),
        "--calib",
        p(&c),
        "--out",
        p(&q),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn baseline_methods_round_trip() {
    let d = tempfile::tempdir().unwrap();
    gen(
        d.path(),
        &["--rows", "12", "--cols", "20", "--nsamples", "64"],
    );
    let (w, c) = (d.path().join("weights.gqtf"), d.path().join("calib.gqtf"));
    for method in ["rtn", "gptq", "gptq-minmse", "bcq", "gptq-bcq"] {
        let q = d.path().join(format!("{method}.gqtq"));
        let report = ok(&[
            "quantize",
            "--weights",
            p(&w),
            "--calib",
            p(&c),
            "--out",
            p(&q),
            "--method",
            method,
            "--format",
            "markdown",
        ]);
        assert!(report.contains(&format!("| {method} | 3 |")), "{report}");
        let ev = ok(&[
            "eval",
            "--weights",
            p(&w),
            "--quantized",
            p(&q),
            "--val",
            p(&c),
        ]);
        let (h, rows) = records(&ev);
        assert!(
            column(&h, &rows[0], "output_rel_error")
                .parse::<f64>()
                .unwrap()
                > 0.0
        );
    }
}

#[test]
fn compare_rows_are_methods_times_layers() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let shape = ["--rows", "16", "--cols", "24", "--nsamples", "64"];
    gen(a.path(), &shape);
    gen(b.path(), &[&shape[..], &["--seed", "5"]].concat());
    let f = |d: &Path, n: &str| d.join(n).to_str().unwrap().to_string();
    let args = [
        "compare".to_string(),
        "--weights".into(),
        f(a.path(), "weights.gqtf"),
        "--weights".into(),
        f(b.path(), "weights.gqtf"),
        "--calib".into(),
        f(a.path(), "calib.gqtf"),
        "--calib".into(),
        f(b.path(), "calib.gqtf"),
    ];
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let (h, rows) = records(&ok(&args));
    assert_eq!(rows.len(), 6 * 2);
    let methods: Vec<String> = rows.iter().map(|r| column(&h, r, "method")).collect();
    assert_eq!(
        &methods[..6],
        ["rtn", "gptq", "gptq-minmse", "bcq", "gptq-bcq", "gptqt"]
    );
    assert_eq!(column(&h, &rows[6], "layer"), "1:weights");

    let mut sub = args.clone();
    sub.extend(["--methods", "gptq-bcq,gptqt"]);
    let (_, rows) = records(&ok(&sub));
    assert_eq!(rows.len(), 2 * 2);
}

#[test]
fn compare_sweeps() {
    let out = ok(&[
        "compare",
        "--synthetic",
        "2",
        "--rows",
        "8",
        "--cols",
        "16",
        "--nsamples",
        "48",
        "--sweep-inter-bits",
        "--sweep-range",
        "--methods",
        "gptqt",
    ]);
    let (h, rows) = records(&out);
    // 2 layers x (1 method + inter bits {4,5,6} + range {0,1,2})
    assert_eq!(rows.len(), 2 * 7);
    let inter: Vec<String> = rows[2..5]
        .iter()
        .map(|r| column(&h, r, "inter_bits"))
        .collect();
    assert_eq!(inter, ["4", "5", "6"]);
    let range: Vec<String> = rows[5..8]
        .iter()
        .map(|r| column(&h, r, "range_bits"))
        .collect();
    assert_eq!(range, ["0", "1", "2"]);
    assert!(out.contains("# mean output_rel_error gptqt"));
}

#[test]
fn compare_is_deterministic_apart_from_timings() {
    let args = [
        "compare",
        "--synthetic",
        "2",
        "--rows",
        "8",
        "--cols",
        "16",
        "--nsamples",
        "48",
    ];
    let strip = |s: String| -> Vec<Vec<String>> {
        let (h, rows) = records(&s);
        rows.iter()
            .map(|r| {
                h.iter()
                    .zip(r.iter())
                    .filter(|(k, _)| !k.ends_with("_secs"))
                    .map(|(_, v)| v.to_string())
                    .collect()
            })
            .collect()
    };
    assert_eq!(strip(ok(&args)), strip(ok(&args)));
}

#[test]
fn bench_default_sizes() {
    let out = ok(&["bench", "--reps", "3"]);
    let (h, rows) = records(&out);
    assert_eq!(
        h.iter().collect::<Vec<_>>(),
        [
            "rows",
            "cols",
            "bits",
            "path",
            "median_secs",
            "speedup_vs_dequant",
            "max_rel_diff"
        ]
    );
    assert_eq!(rows.len(), 9);
    for (i, n) in ["1024", "2048", "4096"].iter().enumerate() {
        for (j, path) in ["dense", "dequant-matvec", "lut"].iter().enumerate() {
            let r = &rows[3 * i + j];
            assert_eq!(&column(&h, r, "rows"), n);
            assert_eq!(&column(&h, r, "path"), path);
            assert!(column(&h, r, "max_rel_diff").parse::<f64>().unwrap() <= 1e-4);
        }
    }
}

#[test]
fn bench_custom_sizes_markdown() {
    let out = ok(&[
        "bench", "--sizes", "16x40,24", "--bits", "2", "--reps", "3", "--format", "markdown",
    ]);
    assert!(out.starts_with("<!-- gptqt-report/1 command=bench -->"));
    assert_eq!(out.lines().filter(|l| l.starts_with("| ")).count(), 1 + 6);
    assert!(out.contains("| 16 | 40 | 2 | lut |"));
}
