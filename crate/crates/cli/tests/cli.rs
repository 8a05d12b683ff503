use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn onetrans(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_onetrans"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawning onetrans")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_owned()
}

/// A config small enough for end-to-end smoke runs.
const SMALL: &str = r#"
[data]
users = 6
requests = 12
candidates_per_request = 4
days = 2
click_len = [2, 4]
impression_len = [2, 4]

[train]
batch_size = 8

[perf]
candidates = 4
reps = 5
warmup = 0

[perf.data]
users = 2
requests = 3
candidates_per_request = 4
"#;

fn small_config(dir: &Path) -> String {
    let p = path(dir, "small.toml");
    fs::write(&p, SMALL).unwrap();
    p
}

#[test]
fn unknown_command_and_missing_seed_exit_1() {
    assert_eq!(onetrans(&["frobnicate"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let out = onetrans(&["train", "--data", "synthetic", "--out", &path(dir.path(), "m.ckpt")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--seed"), "{}", stderr(&out));
    assert_eq!(onetrans(&["--help"]).status.code(), Some(0));
}

#[test]
fn malformed_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = path(dir.path(), "bad.toml");
    fs::write(&cfg, "[model]\nlayerz = 3\n").unwrap();
    let out = onetrans(&["datagen", "--config", &cfg, "--seed", "1", "--out", &path(dir.path(), "d.jsonl")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("layerz"), "{}", stderr(&out));
}

#[test]
fn datagen_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = path(dir.path(), "d.jsonl");
    let ckpt = path(dir.path(), "m.ckpt");
    assert!(onetrans(&["datagen", "--config", &cfg, "--seed", "3", "--out", &data]).status.success());
    assert_eq!(fs::read_to_string(&data).unwrap().lines().count(), 12);
    assert!(Path::new(&format!("{data}.config.toml")).exists());

    let out = onetrans(&["train", "--config", &cfg, "--data", &data, "--seed", "3", "--out", &ckpt]);
    assert!(out.status.success(), "{}", stderr(&out));
    let metrics = fs::read_to_string(format!("{ckpt}.metrics.csv")).unwrap();
    assert!(metrics.starts_with("day,task,auc,uauc\n"));
    assert!(metrics.contains("\nall,ctr,"));
    let echoed = fs::read_to_string(format!("{ckpt}.config.toml")).unwrap();
    assert!(echoed.contains("# seed: 3") && echoed.contains("batch_size = 8"), "{echoed}");

    let eval_csv = path(dir.path(), "eval.csv");
    let out = onetrans(&["eval", "--ckpt", &ckpt, "--data", &data, "--out", &eval_csv]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(fs::read_to_string(&eval_csv).unwrap().starts_with("day,task,auc,uauc\n"));

    let missing = onetrans(&["eval", "--ckpt", &path(dir.path(), "nope"), "--data", &data]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn bench_ablation_writes_deterministic_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = |name: &str| {
        let out_path = path(dir.path(), name);
        let out = onetrans(&["bench", "ablation", "--config", &cfg, "--budget-steps", "1", "--seed", "5", "--out", &out_path]);
        assert!(out.status.success(), "{}", stderr(&out));
        fs::read_to_string(out_path).unwrap()
    };
    let a = run("a.csv");
    assert!(a.starts_with("variant,axis,auc,uauc,delta_auc,delta_uauc,params,flops,cache_compatible,partial\n"));
    assert_eq!(a.lines().count(), 8);
    assert_eq!(a, run("b.csv"));
}

#[test]
fn bench_scaling_and_perf_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let scaling = path(dir.path(), "s.csv");
    let out = onetrans(&[
        "bench", "scaling", "--config", &cfg, "--axis", "depth", "--grid", "1,2", "--seed", "1", "--out", &scaling,
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(fs::read_to_string(&scaling).unwrap().lines().count(), 3);

    let bad_axis = onetrans(&["bench", "scaling", "--axis", "height", "--grid", "1", "--seed", "1", "--out", &scaling]);
    assert_eq!(bad_axis.status.code(), Some(1));

    let perf = path(dir.path(), "p.csv");
    let out = onetrans(&[
        "bench", "perf", "--config", &cfg, "--toggles", "pyramid,cache", "--candidates", "2", "--seed", "1", "--out", &perf,
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = fs::read_to_string(&perf).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().skip(1).all(|l| l.split(',').nth(2) == Some("2")));
}

#[test]
fn verify_passes_and_fails_with_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let report = path(dir.path(), "v.json");
    let ok = onetrans(&["verify", "--seeds", "2", "--out", &report]);
    assert_eq!(ok.status.code(), Some(0), "{}", stderr(&ok));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["pass"], true);

    let strict = onetrans(&["verify", "--seeds", "2", "--tolerance", "-1", "--out", &report]);
    assert_eq!(strict.status.code(), Some(1));
}

#[test]
fn echoed_config_is_a_valid_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let first = path(dir.path(), "a.jsonl");
    assert!(onetrans(&["datagen", "--config", &cfg, "--seed", "4", "--out", &first]).status.success());
    let echoed = format!("{first}.config.toml");
    let second = path(dir.path(), "b.jsonl");
    assert!(onetrans(&["datagen", "--config", &echoed, "--seed", "4", "--out", &second]).status.success());
    assert_eq!(fs::read(&first).unwrap(), fs::read(&second).unwrap());
}
