use std::path::Path;
use std::process::{Command, Output};

use sprint_cli::report::{self, CommandResult};

fn sprint(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sprint")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_compare_replay_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs.jsonl");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"generate": {"runs": 3}}"#).unwrap();
    let out = sprint(&["generate", "--config", path(&cfg), "--seed", "4", "--jobs", "2", "--out", path(&runs)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(report::read(&runs).unwrap().len(), 6);

    let ab = dir.path().join("ab.jsonl");
    let ba = dir.path().join("ba.jsonl");
    let r = path(&runs);
    assert_eq!(
        code(&sprint(&[
            "compare",
            "--a",
            r,
            "--label-a",
            "baseline",
            "--b",
            r,
            "--label-b",
            "sprint",
            "--out",
            path(&ab)
        ])),
        0
    );
    assert_eq!(
        code(&sprint(&[
            "compare",
            "--a",
            r,
            "--label-a",
            "sprint",
            "--b",
            r,
            "--label-b",
            "baseline",
            "--out",
            path(&ba)
        ])),
        0
    );
    let get = |p: &Path| match report::read(p).unwrap().remove(0).result {
        CommandResult::Compare(c) => c,
        other => panic!("unexpected {other:?}"),
    };
    let (x, y) = (get(&ab), get(&ba));
    assert_eq!(x.agreement, y.agreement);
    assert!((x.nfe_ratio * y.nfe_ratio - 1.0).abs() < 1e-12);
    assert!((x.attended_ratio * y.attended_ratio - 1.0).abs() < 1e-12);

    let out = sprint(&["replay", r]);
    assert_eq!(code(&out), 0);
    assert_eq!(String::from_utf8_lossy(&out.stdout).matches("Identical").count(), 6);
}

#[test]
fn compare_needs_a_label_when_variants_mix() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs.jsonl");
    assert_eq!(code(&sprint(&["generate", "--out", path(&runs)])), 0);
    let r = path(&runs);
    assert_eq!(code(&sprint(&["compare", "--a", r, "--b", r])), 2);
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"generate": {"runz": 3}}"#).unwrap();
    assert_eq!(code(&sprint(&["generate", "--config", path(&bad)])), 2);
    std::fs::write(&bad, r#"{"generate": {"n_blocks": 0}}"#).unwrap();
    assert_eq!(code(&sprint(&["generate", "--config", path(&bad)])), 2);
    assert_eq!(code(&sprint(&["generate", "--config", path(&dir.path().join("missing.json"))])), 2);
    assert_eq!(code(&sprint(&["pack"])), 2);
    assert_eq!(code(&sprint(&["replay", path(&dir.path().join("none.jsonl"))])), 2);
}

#[test]
fn runtime_faults_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.bin");
    std::fs::write(&model, b"not a container").unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, format!(r#"{{"model": {{"file": {{"path": {:?}}}}}}}"#, path(&model))).unwrap();
    assert_eq!(code(&sprint(&["generate", "--config", path(&cfg)])), 1);
}

#[test]
fn pack_and_moesim_commands() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    let lines: Vec<String> =
        (0..12).map(|i| format!(r#"{{"id": {i}, "ids": [{}]}}"#, vec!["5"; 3 + 5 * i].join(","))).collect();
    std::fs::write(&corpus, lines.join("\n")).unwrap();
    let shards = dir.path().join("packed.jsonl");
    let out = dir.path().join("pack.jsonl");
    let o = sprint(&["pack", "--corpus", path(&corpus), "--shards", path(&shards), "--out", path(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let CommandResult::Pack(p) = report::read(&out).unwrap().remove(0).result else { panic!() };
    assert_eq!(p.samples, 12);
    assert!(p.padding <= p.naive_padding);
    assert_eq!(std::fs::read_to_string(&shards).unwrap().lines().count(), p.sequences);
    assert_eq!(code(&sprint(&["replay", path(&out)])), 0);

    let o = sprint(&["moesim"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("gap 0.7500"));
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        let cfg = sprint_cli::RunConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        cfg.validate().unwrap();
        n += 1;
    }
    assert!(n >= 2);
}
