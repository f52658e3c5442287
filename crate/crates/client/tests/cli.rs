use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use docxplain_core::formats::{decode_map, decode_mask};
use docxplain_core::synth::document_page;
use tempfile::TempDir;

fn docxplain(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_docxplain"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DOCXPLAIN_LOG")
        .output()
        .expect("docxplain runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// The reference model binary of the core crate, built on demand.
fn echo_model() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let path = profile_dir.join("docxplain-echo-model");
    if !path.exists() {
        let mut cmd = Command::new(env!("CARGO"));
        cmd.args(["build", "-p", "docxplain-core", "--bin", "docxplain-echo-model"]);
        if profile_dir.file_name().is_some_and(|n| n == "release") {
            cmd.arg("--release");
        }
        assert!(cmd.status().unwrap().success(), "building the echo model");
    }
    path
}

/// Writes `n` synthetic pages and a manifest listing them.
fn corpus(dir: &Path, n: u64, size: usize) -> PathBuf {
    let mut manifest = String::from("# synthetic pages\n");
    for i in 0..n {
        let name = format!("page{i}.png");
        std::fs::write(dir.join(&name), document_page(size, i).to_png()).unwrap();
        manifest.push_str(&name);
        manifest.push('\n');
    }
    let path = dir.join("corpus.csv");
    std::fs::write(&path, manifest).unwrap();
    path
}

const FAST_METRICS: &str = r#"
[metrics]
aopc = { patch = 8, steps = 8 }
sensitivity = { radius = 0.02, n_samples = 0 }
infidelity = { patch = 8, n_samples = 16 }
"#;

fn fast_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, format!("{extra}\n{FAST_METRICS}")).unwrap();
    path
}

#[test]
fn segment_writes_mask_per_kernel() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("p.png"), document_page(256, 2).to_png()).unwrap();
    let out = docxplain(&["segment", "p.png", "--out", "run"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    for k in ["5x5", "3x15", "15x3"] {
        let mask = decode_mask(&std::fs::read(dir.path().join(format!("run/masks/p.{k}.dxsm"))).unwrap()).unwrap();
        assert!(text.contains(&format!("n_bg={} n_fg={}", mask.n_bg(), mask.n_fg())));
        assert!(dir.path().join(format!("run/masks/p.{k}.png")).exists());
    }
    assert!(dir.path().join("run/config.toml").exists());
}

#[test]
fn explain_both_modes_writes_paired_maps() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("p.png"), document_page(224, 4).to_png()).unwrap();
    let out = docxplain(&["explain", "p.png", "--model", "region-density", "--mode", "both", "--out", "run"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let fg = decode_map(&std::fs::read(dir.path().join("run/attributions/p.docxplain_fg.dxam")).unwrap()).unwrap();
    let full = decode_map(&std::fs::read(dir.path().join("run/attributions/p.docxplain_fgbg.dxam")).unwrap()).unwrap();
    assert_eq!((fg.width, fg.height, fg.target_class), (full.width, full.height, full.target_class));
    assert!(dir.path().join("run/heatmaps/p.docxplain_fg.png").exists());
}

#[test]
fn usage_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&docxplain(&["frobnicate"], dir.path())), 1);
    assert_eq!(code(&docxplain(&["explain", "x.png", "--mode", "all"], dir.path())), 1);
    assert_eq!(code(&docxplain(&["explain", "missing.png", "--model", "constant"], dir.path())), 1);
    assert_eq!(code(&docxplain(&["explain", "missing.png"], dir.path())), 1);
    assert_eq!(code(&docxplain(&["--help"], dir.path())), 0);
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "colour = 3").unwrap();
    assert_eq!(code(&docxplain(&["segment", "x.png", "--config", "bad.toml"], dir.path())), 1);
}

#[test]
fn empty_manifest_fails_without_outputs() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("empty.csv"), "# nothing\n").unwrap();
    let out = docxplain(&["evaluate", "empty.csv", "--model", "constant", "--out", "run"], dir.path());
    assert_eq!(code(&out), 1);
    assert!(!dir.path().join("run").exists());
}

#[test]
fn compare_needs_two_distinct_methods() {
    let dir = TempDir::new().unwrap();
    corpus(dir.path(), 1, 224);
    let one = docxplain(&["compare", "corpus.csv", "--model", "constant", "--methods", "random"], dir.path());
    assert_eq!(code(&one), 1);
    let dup = docxplain(&["compare", "corpus.csv", "--model", "constant", "--methods", "random,random"], dir.path());
    assert_eq!(code(&dup), 1);
    assert!(String::from_utf8_lossy(&dup.stderr).contains("twice"));
}

#[test]
fn constant_model_compare_has_zero_abpc() {
    let dir = TempDir::new().unwrap();
    corpus(dir.path(), 2, 224);
    let cfg = fast_config(dir.path(), "");
    let out = docxplain(
        &[
            "compare", "corpus.csv", "--config", cfg.to_str().unwrap(), "--model", "constant:0.8",
            "--methods", "docxplain_fg,occlusion,random:3", "--out", "run",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mut rows = csv::Reader::from_path(dir.path().join("run/aggregate.csv")).unwrap();
    let headers = rows.headers().unwrap().clone();
    let abpc = headers.iter().position(|h| h == "abpc").unwrap();
    let records: Vec<_> = rows.records().map(|r| r.unwrap()).collect();
    assert_eq!(records.len(), 3);
    for r in &records {
        assert_eq!(r[abpc].parse::<f64>().unwrap(), 0.0);
    }
    for m in ["docxplain_fg", "occlusion", "random:3"] {
        let curve = std::fs::read_to_string(dir.path().join(format!("run/curves/{m}.morf.csv"))).unwrap();
        assert!(curve.starts_with("fraction,mean_drop"));
    }
}

#[test]
fn evaluate_is_byte_reproducible() {
    let dir = TempDir::new().unwrap();
    corpus(dir.path(), 3, 224);
    let cfg = fast_config(dir.path(), "seed = 11");
    let run = |out: &str| {
        let o = docxplain(
            &["evaluate", "corpus.csv", "--config", cfg.to_str().unwrap(), "--model", "region-density", "--out", out],
            dir.path(),
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    };
    run("a");
    run("b");
    for rel in ["samples.csv", "aggregate.csv", "report.json"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(rel)).unwrap(),
            std::fs::read(dir.path().join("b").join(rel)).unwrap(),
            "{rel}"
        );
    }
    let maps: Vec<_> = std::fs::read_dir(dir.path().join("a/attributions")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(maps.len(), 6);
    for name in maps {
        assert_eq!(
            std::fs::read(dir.path().join("a/attributions").join(&name)).unwrap(),
            std::fs::read(dir.path().join("b/attributions").join(&name)).unwrap()
        );
    }
}

#[test]
fn persisted_config_reproduces_the_run() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("p.png"), document_page(224, 9).to_png()).unwrap();
    let first = docxplain(&["explain", "p.png", "--model", "region-density:20,30,100,60", "--seed", "5", "--out", "a"], dir.path());
    assert_eq!(code(&first), 0);
    let again = docxplain(&["explain", "p.png", "--config", "a/config.toml", "--out", "b"], dir.path());
    assert_eq!(code(&again), 0, "{}", String::from_utf8_lossy(&again.stderr));
    for m in ["docxplain_fg", "docxplain_fgbg"] {
        let rel = format!("attributions/p.{m}.dxam");
        assert_eq!(std::fs::read(dir.path().join("a").join(&rel)).unwrap(), std::fs::read(dir.path().join("b").join(&rel)).unwrap());
    }
}

#[test]
fn corrupt_samples_are_isolated_until_the_threshold() {
    let dir = TempDir::new().unwrap();
    let manifest = corpus(dir.path(), 3, 224);
    std::fs::write(dir.path().join("page1.png"), b"corrupt").unwrap();
    let cfg = fast_config(dir.path(), "mode = \"fg\"");
    let out = docxplain(
        &["evaluate", manifest.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--model", "region-density", "--out", "run"],
        dir.path(),
    );
    // One of three samples failed: more than 10%.
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("failed 1 of 3"));
    assert!(dir.path().join("run/report.json").exists());
}

#[test]
fn model_protocol_violation_exits_two() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("p.png"), document_page(224, 1).to_png()).unwrap();
    let model = format!("exec:{} --fault bad-magic", echo_model().display());
    let out = docxplain(&["explain", "p.png", "--model", &model, "--out", "run"], dir.path());
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte"));

    corpus(dir.path(), 2, 224);
    let cfg = fast_config(dir.path(), "mode = \"fg\"");
    let model = format!("exec:{} --fault truncate", echo_model().display());
    let out = docxplain(&["evaluate", "corpus.csv", "--config", cfg.to_str().unwrap(), "--model", &model, "--out", "ev"], dir.path());
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn healthy_subprocess_model_explains() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("p.png"), document_page(224, 1).to_png()).unwrap();
    let model = format!("exec:{} --classes 2", echo_model().display());
    let out = docxplain(&["explain", "p.png", "--model", &model, "--mode", "fg", "--out", "run"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("run/attributions/p.docxplain_fg.dxam").exists());
}
