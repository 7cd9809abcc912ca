//! End-to-end runs of the `res2wake` binary.

use std::path::Path;
use std::process::{Command, Output};

use res2wake::data::{write_wav, SAMPLE_RATE};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_res2wake"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "{:?} failed:\n{}",
        cmd,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn param_count(arch: &str) -> usize {
    let o = run_ok(bin().args(["params", "--arch", arch]));
    let text = stdout(&o);
    let line = text.lines().find(|l| l.starts_with("params ")).expect("params line");
    line["params ".len()..].trim().parse().unwrap()
}

#[test]
fn params_reports_budgets_and_summary() {
    let ii = param_count("se-res2net50-ii");
    assert!((41_600..=62_400).contains(&ii), "{ii}");
    let i = param_count("se-res2net50-i");
    assert!((102_400..=153_600).contains(&i), "{i}");
    let o = run_ok(bin().args(["params", "--arch", "res2net50-ii"]));
    let text = stdout(&o);
    assert!(text.contains("conv4_x") && !text.contains("conv5_x"), "{text}");
    assert!(text.contains("2-d fc, softmax"), "{text}");
}

#[test]
fn errors_are_one_line_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nlr0 = -1.0\n").unwrap();
    let o = bin()
        .args([
            "--out",
            dir.path().to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "gen-data",
        ])
        .output()
        .unwrap();
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "), "{err}");

    let o = bin()
        .args([
            "--out",
            dir.path().to_str().unwrap(),
            "featurize",
            "--manifest",
            "/nonexistent/manifest.jsonl",
        ])
        .output()
        .unwrap();
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    let uncommented: Vec<&str> = err.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(uncommented.len(), 1, "{err}");
    assert!(
        uncommented[0].starts_with("error: ") && uncommented[0].contains("manifest"),
        "{err}"
    );
}

fn write_config(path: &Path, epochs: usize) {
    let text = format!(
        "[features]\nn_mels = 32\n\n[train]\nmin_epochs = {epochs}\nmax_epochs = {epochs}\nbatch_size = 8\nlr0 = 0.001\n"
    );
    std::fs::write(path, text).unwrap();
}

/// Small corpus, one epoch per model: checks the plumbing, not accuracy.
#[test]
fn gen_train_detect_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("run.toml");
    write_config(&cfg, 1);
    let p = |s: &str| root.join(s).to_str().unwrap().to_owned();
    let common = |out: &str| {
        vec![
            "--seed".to_owned(),
            "5".into(),
            "--config".into(),
            p("run.toml"),
            "--out".into(),
            p(out),
        ]
    };

    run_ok(
        bin()
            .args(common("data"))
            .args(["gen-data", "--n-pos", "10", "--n-neg", "10", "--stream-hours", "0.003"]),
    );
    assert!(root.join("data/manifest.jsonl").exists());
    assert!(root.join("data/contents.jsonl").exists());
    let echoed = std::fs::read_to_string(root.join("data/config.toml")).unwrap();
    assert!(echoed.contains("seed = 5"), "{echoed}");

    // The echoed configuration alone reproduces the run.
    run_ok(bin().args(["--config", &p("data/config.toml"), "--out", &p("again"), "gen-data"]));
    for f in ["contents.jsonl", "manifest.jsonl", "pos_0003.wav", "neg_0007.wav"] {
        assert_eq!(
            std::fs::read(root.join("data").join(f)).unwrap(),
            std::fs::read(root.join("again").join(f)).unwrap(),
            "{f}"
        );
    }

    run_ok(
        bin()
            .args(common("feats"))
            .args(["featurize", "--manifest", &p("data/manifest.jsonl")]),
    );
    run_ok(
        bin()
            .args(common("m0"))
            .args(["train", "--target", "m0", "--features", &p("feats")]),
    );
    run_ok(
        bin()
            .args(common("m1"))
            .args(["train", "--target", "m1", "--manifest", &p("data/manifest.jsonl")]),
    );
    for d in ["m0", "m1"] {
        assert!(root.join(d).join("model.wwa").exists());
        let log = std::fs::read_to_string(root.join(d).join("train_log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 1);
    }

    // Swapped model directories are refused.
    let o = bin()
        .args(common("bad"))
        .args([
            "detect",
            "--stream",
            &p("data/negative_stream.wav"),
            "--m0",
            &p("m1"),
            "--m1",
            &p("m0"),
        ])
        .output()
        .unwrap();
    assert!(!o.status.success());

    let silence = root.join("silence.wav");
    write_wav(&silence, &vec![0i16; SAMPLE_RATE as usize * 4], SAMPLE_RATE).unwrap();
    // An untrained M1 scores constant input arbitrarily; a strict trigger
    // threshold keeps the check about the plumbing.
    let mut text = std::fs::read_to_string(&cfg).unwrap();
    text.push_str("\n[detector]\nthreshold = 0.999\n");
    std::fs::write(root.join("strict.toml"), text).unwrap();
    let o = run_ok(bin().args([
        "--config",
        &p("strict.toml"),
        "--out",
        &p("det"),
        "detect",
        "--stream",
        silence.to_str().unwrap(),
        "--m0",
        &p("m0"),
        "--m1",
        &p("m1"),
    ]));
    let events = std::fs::read_to_string(root.join("det/events.jsonl")).unwrap();
    assert_eq!(events.trim(), "", "{}", stdout(&o));

    run_ok(bin().args(common("eval")).args([
        "eval",
        "--manifest",
        &p("data/manifest.jsonl"),
        "--negative-stream",
        &p("data/negative_stream.wav"),
        "--m0",
        &p("m0"),
        "--m1",
        &p("m1"),
        "--thresholds",
        "0:0.99:100",
    ]));
    let csv = std::fs::read_to_string(root.join("eval/det.csv")).unwrap();
    let rows = det_rows(&csv);
    assert_eq!(rows.len(), 100);
    for w in rows.windows(2) {
        assert!(w[1].1 >= w[0].1, "FRR decreased: {w:?}");
        assert!(w[1].2 <= w[0].2, "FAH increased: {w:?}");
    }

    // Re-sweeping the saved candidates reproduces the same curve.
    run_ok(bin().args(common("resweep")).args([
        "sweep",
        "--candidates",
        &p("eval/candidates.jsonl"),
        "--thresholds",
        "0:0.99:100",
    ]));
    assert_eq!(std::fs::read_to_string(root.join("resweep/det.csv")).unwrap(), csv);
}

fn det_rows(csv: &str) -> Vec<(f64, f64, f64)> {
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    assert_eq!(header, "threshold,frr,fah");
    lines
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            (v[0], v[1], v[2])
        })
        .collect()
}
