use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use rlprune::format;

fn rlprune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rlprune"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = rlprune(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small dataset plus a one-epoch vgg-mini, shared by every test.
fn fixture() -> &'static (PathBuf, PathBuf) {
    static DIR: OnceLock<(PathBuf, PathBuf)> = OnceLock::new();
    DIR.get_or_init(|| {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-fixture");
        let _ = std::fs::remove_dir_all(&root);
        let data = root.join("data");
        let model = root.join("vgg");
        ok(&["gen-data", "--out", s(&data), "--train", "300", "--reward-split", "60", "--test", "100"]);
        ok(&["train", "--arch", "vgg-mini", "--data", s(&data), "--out", s(&model), "--epochs", "1"]);
        (data, model)
    })
}

fn scratch(name: &str) -> PathBuf {
    let p = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&p);
    p
}

const TINY: &str = "[search]\nsteps = 2\nstages_per_step = 1\nsamples_per_stage = 2\ninner_samples = 1\n";

fn prune(name: &str, extra: &[&str]) -> (PathBuf, serde_json::Value) {
    let (data, model) = fixture();
    let out = scratch(name);
    std::fs::create_dir_all(&out).unwrap();
    let cfg = out.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let mut args = vec!["--config", s(&cfg), "prune", s(model), "--data", s(data), "--out", s(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    let summary = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    (out, summary)
}

#[test]
fn gen_data_is_deterministic() {
    let (a, b, c) = (scratch("gd-a"), scratch("gd-b"), scratch("gd-c"));
    let args = ["--train", "50", "--reward-split", "10", "--test", "10"];
    for (dir, seed) in [(&a, "1"), (&b, "1"), (&c, "2")] {
        let mut v = vec!["gen-data", "--out", s(dir), "--seed", seed];
        v.extend_from_slice(&args);
        ok(&v);
    }
    for f in ["train.rlpd", "reward.rlpd", "test.rlpd"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        assert_ne!(std::fs::read(a.join(f)).unwrap(), std::fs::read(c.join(f)).unwrap());
    }
}

#[test]
fn zero_sparsity_changes_nothing() {
    let (_, sum) = prune("zero", &["--sparsity", "0"]);
    assert_eq!(sum["c_f"], 0.0);
    assert_eq!(sum["c_p"], 0.0);
    assert_eq!(sum["accuracy_before"], sum["accuracy_after"]);
}

#[test]
fn flops_reward_preset_lands_in_summary() {
    let (out, sum) = prune("flops", &["--reward", "flops", "--sparsity", "0.2"]);
    assert_eq!((sum["alpha"].as_f64(), sum["beta"].as_f64()), (Some(0.25), Some(0.0)));
    assert!(sum["c_f"].as_f64().unwrap() > 0.0);
    assert!(out.join("vgg-mini-pruned.rlpm.json").exists());
}

#[test]
fn eval_against_itself_has_zero_ratios() {
    let (data, model) = fixture();
    let text = ok(&["eval", s(model), "--data", s(data), "--base", s(model)]);
    assert!(text.contains("c_f 0.000000") && text.contains("c_p 0.000000"), "{text}");
}

#[test]
fn report_covers_every_searchable_group() {
    let (data, model) = fixture();
    let (out, _) = prune("report", &["--sparsity", "0.2"]);
    let trace: serde_json::Value = serde_json::from_str(&ok(&["trace", s(model), "--json"])).unwrap();
    let searchable = trace["groups"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|g| g["pinned"] == false)
        .count();
    let text = ok(&["report", s(&out.join("history.csv")), "--out", s(&out.join("plots"))]);
    assert!(text.starts_with(&format!("{searchable} groups, 2 steps")), "{text}");

    let scores = out.join("scores");
    ok(&["report", "--scores", s(model), "--data", s(data), "--out", s(&scores)]);
    assert!(scores.join("scores.csv").exists());
}

#[test]
fn config_errors_exit_2_and_data_errors_exit_3() {
    let (data, model) = fixture();
    let dir = scratch("codes");
    std::fs::create_dir_all(&dir).unwrap();
    let bad = dir.join("bad.toml");
    std::fs::write(&bad, "[search]\nstepz = 3\n").unwrap();
    let out = rlprune(&["--config", s(&bad), "prune", s(model), "--data", s(data), "--out", s(&dir)]);
    assert_eq!(out.status.code(), Some(2));
    let out = rlprune(&["prune", s(model), "--data", s(data), "--out", s(&dir), "--sparsity", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    let out = rlprune(&["eval", s(model), "--data", s(&dir.join("missing"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn sensitivity_of_an_unread_group_is_zero() {
    let (data, model) = fixture();
    let mut m = format::load(model).unwrap();
    // Nothing downstream reads conv3 once conv4's weights are zero.
    let conv4 = m.id_of("conv4").unwrap();
    m.nodes[conv4].params.weight.as_mut().unwrap().data_mut().fill(0.0);
    let dir = scratch("sens");
    let dead = dir.join("dead");
    format::save(&m, &dead).unwrap();
    let csv = dir.join("sens.csv");
    ok(&["sensitivity", s(&dead), "--data", s(data), "--fraction", "0.5", "--out", s(&csv)]);
    let mut rd = csv::Reader::from_path(&csv).unwrap();
    let row = rd
        .records()
        .map(|r| r.unwrap())
        .find(|r| &r[1] == "conv3")
        .unwrap();
    assert_eq!(&row[6], "ok");
    assert_eq!(row[5].parse::<f64>().unwrap(), 0.0);
}
