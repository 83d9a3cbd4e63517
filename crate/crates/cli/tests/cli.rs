use std::path::Path;
use std::process::{Command, Output};

use beamtrain_core::dataset::BeamDataset;
use beamtrain_core::search::CandidateEvaluator;
use beamtrain_core::{build_codebooks, sample_channel_set, BeamSelection, CodebookSizes, GainModel, SystemConfig};

const TINY: &[&str] = &[
    "--set", "codebook.f=2",
    "--set", "codebook.s=2",
    "--set", "codebook.w=2",
    "--set", "dataset.samples=24",
    "--set", "dataset.restarts=2",
    "--set", "model.embed=8",
    "--set", "model.hidden=8",
    "--set", "model.d_k=4",
    "--set", "model.conv_mid=2",
    "--set", "train.epochs=2",
    "--set", "train.batch_size=4",
];

fn beamtrain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_beamtrain"))
        .args(args)
        .env("BEAMTRAIN_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = beamtrain(args);
    assert!(
        out.status.success(),
        "beamtrain {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn data_rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn complexity_orders_algorithms_for_every_m() {
    let csv = ok(&["complexity"]);
    assert!(csv.starts_with("# "));
    let rows = data_rows(&csv);
    let ms: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(ms, ["16", "32", "64", "128"]);
    for r in &rows {
        let [es, ias, mtl] = [2, 3, 4].map(|i| r[i].parse::<u128>().unwrap());
        assert!(es > ias && ias > mtl, "{r:?}");
    }
}

#[test]
fn singleton_search_matches_the_metric() {
    let csv = ok(&[
        "--set", "codebook.f=1", "--set", "codebook.s=1", "--set", "codebook.w=1",
        "--set", "search.samples=1", "--seed", "5", "search", "--algorithm", "es",
    ]);
    let rows = data_rows(&csv);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][4], "1");
    let seed: u64 = rows[0][1].parse().unwrap();
    let cfg = SystemConfig::desk();
    let cb = build_codebooks(&cfg, CodebookSizes::uniform(1)).unwrap();
    let ch = sample_channel_set(&cfg, &GainModel::default(), 3, 3, seed).unwrap();
    let rate = CandidateEvaluator::new(&ch, &cb, &cfg).unwrap().rate_of(&BeamSelection::first(&cfg));
    assert_eq!(rows[0][3], rate.to_string());
}

#[test]
fn invalid_input_exits_nonzero_naming_the_problem() {
    let out = beamtrain(&["--set", "system.bogus=3", "complexity"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("system.bogus"));

    let out = beamtrain(&["--set", "system.k=3", "complexity"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("k <= n_s"));

    let out = beamtrain(&["train", "--dataset", "/nonexistent/ds.rbl", "--out", "/tmp/x"]);
    assert!(!out.status.success());
    assert!(!beamtrain(&["--no-such-flag", "complexity"]).status.success());
}

#[test]
fn blockwise_demo_trace_is_monotone() {
    let csv = ok(&["--set", "blockwise.max_iter=200", "blockwise-demo"]);
    let obj: Vec<f64> = data_rows(&csv).iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(obj.len() > 2);
    assert!(obj.windows(2).all(|w| w[1] <= w[0] + 1e-10));
}

fn pipeline(dir: &Path) -> (String, String, Vec<u8>) {
    let ds = dir.join("ds.rbl");
    let ck = dir.join("model.rblm");
    let report = dir.join("train.csv");
    let eval = dir.join("eval.csv");
    let mut args = TINY.to_vec();
    args.extend(["--seed", "3", "gen-dataset", "--out", s(&ds)]);
    ok(&args);
    let mut args = TINY.to_vec();
    args.extend(["--seed", "3", "train", "--dataset", s(&ds), "--out", s(&ck), "--report", s(&report)]);
    ok(&args);
    ok(&["eval", "--dataset", s(&ds), "--checkpoint", s(&ck), "--es", "--out", s(&eval)]);
    (
        std::fs::read_to_string(report).unwrap(),
        std::fs::read_to_string(eval).unwrap(),
        std::fs::read(ds).unwrap(),
    )
}

#[test]
fn pipeline_is_reproducible_and_dominance_holds() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline(a.path());
    let second = pipeline(b.path());
    assert_eq!(first, second);

    let ds = BeamDataset::read(&a.path().join("ds.rbl")).unwrap();
    assert_eq!(ds.len(), 24);
    assert_eq!(ds.split.train.len(), 20);
    let rows = data_rows(&first.1);
    assert_eq!(rows.len(), 4);
    for r in &rows {
        let [mtl, ias, es] = [2, 3, 4].map(|i| r[i].parse::<f64>().unwrap());
        assert!(es >= ias - 1e-9 && es >= mtl - 1e-9, "{r:?}");
    }
    let epochs = first.0.lines().filter(|l| l.starts_with("epoch,")).count();
    assert_eq!(epochs, 2);
}
