use std::path::Path;

use flute_core::cli_io::{
    raw, run, FlteFile, BANKS_HEADER, BENCH_HEADER, SCHEDULE_HEADER, SWEEP_HEADER,
};
use flute_core::engine::{execute, FluteWeights, MatmulProblem, TrafficStats};
use flute_core::lut_dequant::worst_case_degree;
use flute_core::nfquant::{dequantize_matrix, quantize_matrix};
use flute_core::numerics::f32_to_f16;
use flute_core::restructure::LayoutDescriptor;
use flute_core::{Matrix, QuantConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run(
        std::iter::once("flute-sim").chain(args.iter().copied()),
        &mut out,
        &mut err,
    );
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn random_weights(k: usize, n: usize, seed: u64) -> Matrix<f32> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(k, n, |_, _| r.gen_range(-1.0..1.0))
}

#[test]
fn quantize_dequantize_matches_in_process() {
    let dir = tempfile::tempdir().unwrap();
    let (input, packed, output) = (
        dir.path().join("w.f32"),
        dir.path().join("w.flte"),
        dir.path().join("back.f32"),
    );
    for (bits, group) in [("4", 128u32), ("3", 64), ("2", 32)] {
        let w = random_weights(256, 64, 31);
        raw::write_f32(&input, &w).unwrap();
        let (code, _, err) = cli(&[
            "quantize",
            "--input",
            p(&input),
            "--k",
            "256",
            "--n",
            "64",
            "--bits",
            bits,
            "--group",
            &group.to_string(),
            "--output",
            p(&packed),
        ]);
        assert_eq!(code, 0, "{err}");
        let (code, _, err) = cli(&["dequantize", "--input", p(&packed), "--output", p(&output)]);
        assert_eq!(code, 0, "{err}");
        let cfg = QuantConfig::new(bits.parse().unwrap(), group).unwrap();
        let want = dequantize_matrix(&quantize_matrix(&w, cfg).unwrap());
        let got = raw::read_f32(&output, 256, 64).unwrap();
        assert_eq!(got, want, "b={bits} B={group}");
    }
}

#[test]
fn learned_scales_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let (input, calib, packed) = (
        dir.path().join("w.f32"),
        dir.path().join("x.f32"),
        dir.path().join("w.flte"),
    );
    raw::write_f32(&input, &random_weights(128, 32, 32)).unwrap();
    raw::write_f32(&calib, &random_weights(16, 128, 33)).unwrap();
    let base = [
        "quantize",
        "--input",
        p(&input),
        "--k",
        "128",
        "--n",
        "32",
        "--group",
        "64",
        "--output",
        p(&packed),
    ];
    let mut args = base.to_vec();
    args.extend([
        "--calib",
        p(&calib),
        "--m",
        "16",
        "--learn-scales",
        "--steps",
        "5",
        "--lr",
        "1e-5",
    ]);
    let (code, out, err) = cli(&args);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("learned scales"));
    assert!(FlteFile::parse(&std::fs::read(&packed).unwrap()).is_ok());

    let mut diverging = base.to_vec();
    diverging.extend([
        "--calib",
        p(&calib),
        "--m",
        "16",
        "--learn-scales",
        "--lr",
        "inf",
    ]);
    assert_eq!(cli(&diverging).0, 3);

    let mut missing = base.to_vec();
    missing.push("--learn-scales");
    assert_eq!(cli(&missing).0, 1);
}

#[test]
fn matmul_matches_engine_and_reports_traffic() {
    let dir = tempfile::tempdir().unwrap();
    let (wpath, packed, xpath, ypath, tpath) = (
        dir.path().join("w.f32"),
        dir.path().join("w.flte"),
        dir.path().join("x.f16"),
        dir.path().join("y.f16"),
        dir.path().join("traffic.csv"),
    );
    let w = random_weights(256, 64, 34);
    raw::write_f32(&wpath, &w).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(35);
    let x = Matrix::from_fn(3, 256, |_, _| f32_to_f16(r.gen_range(-1.0..1.0)));
    raw::write_f16(&xpath, &x).unwrap();
    assert_eq!(
        cli(&[
            "quantize",
            "--input",
            p(&wpath),
            "--k",
            "256",
            "--n",
            "64",
            "--output",
            p(&packed)
        ])
        .0,
        0
    );
    let (code, out, err) = cli(&[
        "matmul",
        "--weights",
        p(&packed),
        "--x",
        p(&xpath),
        "--m",
        "3",
        "--output",
        p(&ypath),
        "--workers",
        "5",
        "--tile-n",
        "16",
        "--tile-k",
        "128",
        "--dup",
        "2",
        "--stages",
        "3",
    ]);
    assert_eq!(code, 0, "{err}");
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some(TrafficStats::CSV_HEADER));

    let q = quantize_matrix(&w, QuantConfig::new(4, 128).unwrap()).unwrap();
    let layout = LayoutDescriptor::new(16, 16, 128, 16, 8, 16).unwrap();
    let weights = FluteWeights::prepare(&q, layout, 2).unwrap();
    let want = execute(&MatmulProblem {
        x: &x,
        weights: &weights,
        workers: 5,
        stages: 3,
    })
    .unwrap();
    assert_eq!(raw::read_f16(&ypath, 3, 64).unwrap(), want.y);
    assert_eq!(lines.next().unwrap(), want.traffic.csv_row());

    let (code, out, _) = cli(&[
        "matmul",
        "--weights",
        p(&packed),
        "--x",
        p(&xpath),
        "--m",
        "3",
        "--output",
        p(&ypath),
        "--sequential",
        "--traffic",
        p(&tpath),
    ]);
    assert_eq!(code, 0);
    assert!(out.is_empty());
    assert!(std::fs::read_to_string(&tpath)
        .unwrap()
        .starts_with(TrafficStats::CSV_HEADER));
}

#[test]
fn schedule_csv_lists_roles() {
    let (code, out, _) = cli(&[
        "schedule",
        "--tiles-m",
        "5",
        "--tiles-n",
        "1",
        "--tiles-k",
        "7",
        "--workers",
        "3",
    ]);
    assert_eq!(code, 0);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], SCHEDULE_HEADER);
    assert_eq!(lines[1], "0,0,11,2,t0:exclusive;t1:contributor");
    assert_eq!(lines.len(), 4);
}

#[test]
fn banks_csv_is_seeded_and_bounded() {
    let args = ["banks", "--bits", "3,4", "--dups", "1,2", "--warps", "2000"];
    let (code, out, _) = cli(&args);
    assert_eq!(code, 0);
    assert_eq!(cli(&args).1, out);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], BANKS_HEADER);
    assert_eq!(lines.len(), 5);
    for line in &lines[1..] {
        let f: Vec<&str> = line.split(',').collect();
        let max: usize = f[4].parse().unwrap();
        assert!(max <= worst_case_degree(f[0].parse().unwrap(), f[1].parse().unwrap()));
    }
}

#[test]
fn bench_reports_compression_and_balance() {
    let (code, out, err) = cli(&[
        "bench",
        "--batches",
        "1,16",
        "--bits",
        "4,3",
        "--group",
        "128",
    ]);
    assert_eq!(code, 0, "{err}");
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], BENCH_HEADER);
    assert_eq!(lines.len(), 1 + 2 * 4 * 2);
    for line in &lines[1..] {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[0], "llama3-8b");
        let bpp = if f[4] == "4" { "4.13" } else { "3.13" };
        assert_eq!(f[6], bpp);
        let ratio: f64 = f[7].parse().unwrap();
        let want: f64 = if f[4] == "4" {
            4.125 / 16.0
        } else {
            3.125 / 16.0
        };
        assert!((ratio - want).abs() < 1e-6, "{line}");
        assert!(f[9].parse::<usize>().unwrap() <= 1);
    }
    assert_eq!(cli(&["bench", "--preset", "no-such-model"]).0, 1);
}

#[test]
fn traffic_prices_dense_and_quantized() {
    let run_traffic = |bits: &str| {
        let (code, out, _) = cli(&[
            "traffic", "--m", "1", "--n", "4096", "--k", "4096", "--bits", bits,
        ]);
        assert_eq!(code, 0);
        let row = out.lines().nth(1).unwrap().to_string();
        row.split(',').next().unwrap().parse::<u64>().unwrap()
    };
    assert_eq!(run_traffic("16"), 4096 * 4096 * 2);
    assert_eq!(run_traffic("4"), 4096 * 4096 / 2);
}

#[test]
fn sweep_marks_the_least_traffic_configuration() {
    let (code, out, err) = cli(&[
        "sweep",
        "--m",
        "4",
        "--n",
        "256",
        "--k",
        "512",
        "--workers",
        "16",
        "--warps",
        "200",
    ]);
    assert_eq!(code, 0, "{err}");
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], SWEEP_HEADER);
    let rows: Vec<Vec<&str>> = lines[1..].iter().map(|l| l.split(',').collect()).collect();
    let best: Vec<&Vec<&str>> = rows.iter().filter(|r| r[9] == "1").collect();
    assert_eq!(best.len(), 1);
    let min = rows
        .iter()
        .map(|r| r[5].parse::<u64>().unwrap())
        .min()
        .unwrap();
    assert_eq!(best[0][5].parse::<u64>().unwrap(), min);
}

#[test]
fn exit_codes() {
    assert_eq!(cli(&["--help"]).0, 0);
    assert_eq!(cli(&["frobnicate"]).0, 1);
    assert_eq!(
        cli(&[
            "schedule",
            "--tiles-m",
            "0",
            "--tiles-n",
            "1",
            "--tiles-k",
            "1",
            "--workers",
            "1"
        ])
        .0,
        1
    );
    assert_eq!(
        cli(&[
            "dequantize",
            "--input",
            "/nonexistent/w.flte",
            "--output",
            "/tmp/x"
        ])
        .0,
        2
    );

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.flte");
    std::fs::write(&bad, b"FLTE\x01\x04").unwrap();
    let (code, _, err) = cli(&[
        "dequantize",
        "--input",
        p(&bad),
        "--output",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("header"), "{err}");

    let short = dir.path().join("short.f32");
    std::fs::write(&short, [0u8; 12]).unwrap();
    let (code, _, _) = cli(&[
        "quantize",
        "--input",
        p(&short),
        "--k",
        "128",
        "--n",
        "32",
        "--output",
        p(&bad),
    ]);
    assert_eq!(code, 2);
}
