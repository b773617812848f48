use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.toml")
}

fn groupcvr(out: &Path, args: &[&str]) -> Output {
    let out_dir = format!("paths.out_dir=\"{}\"", out.display());
    Command::new(env!("CARGO_BIN_EXE_groupcvr"))
        .arg("--config")
        .arg(fixture())
        .args(["--offline", "--override", &out_dir])
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = groupcvr(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

/// Last stderr line parsed as the machine-readable error object.
fn error_of(o: &Output) -> serde_json::Value {
    assert!(!o.status.success());
    let stderr = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(stderr.lines().last().expect("error line")).expect("json error line")
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn full_pipeline_emits_a_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let stdout = ok(&out, &["run"]);
    assert!(stdout.contains("low-activity GAUC"), "{stdout}");
    assert!(stdout.contains("mean alpha_fusion"));
    for f in [
        "synth/users.jsonl",
        "profile/embeddings.jsonl",
        "group/codebooks.jsonl",
        "priors/priors.jsonl",
        "train/full/params.jsonl",
        "eval/full/report.jsonl",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let lines = fs::read_to_string(out.join("eval/full/report.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert_eq!(first["segment"], "overall");
    assert_eq!(lines.lines().count(), 2 + 5);
}

#[test]
fn stages_run_one_by_one_and_rerun_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    for stage in ["synth", "profile", "group", "priors", "train", "eval"] {
        ok(&a, &[stage]);
    }
    let first = files(&a);
    assert!(first.iter().any(|(p, _)| p.ends_with("manifest.json")));

    // Same stages in a fresh directory: identical bytes, manifests included.
    let b = tmp.path().join("b");
    ok(&b, &["run"]);
    assert_eq!(first, files(&b));

    // Deleting a downstream artifact and rerunning restores the same file.
    let params = a.join("train/full/params.jsonl");
    let before = fs::read(&params).unwrap();
    fs::remove_file(&params).unwrap();
    ok(&a, &["train"]);
    assert_eq!(before, fs::read(&params).unwrap());
    assert_eq!(first, files(&a));
}

#[test]
fn missing_upstream_artifact_names_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let err = error_of(&groupcvr(&out, &["eval"]));
    assert_eq!(err["error"], "missing_artifact");
    assert_eq!(err["stage"], "synth");

    ok(&out, &["synth"]);
    ok(&out, &["profile"]);
    let err = error_of(&groupcvr(&out, &["priors"]));
    assert_eq!(err["stage"], "group");
    assert!(err["message"].as_str().unwrap().contains("run `group` first"));
}

#[test]
fn config_mismatch_needs_an_explicit_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    ok(&out, &["synth"]);
    let err = error_of(&groupcvr(&out, &["--seed", "6", "profile"]));
    assert_eq!(err["error"], "config_mismatch");

    let o = groupcvr(&out, &["--seed", "6", "--allow-config-mismatch", "profile"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning:"));

    // Settings a stage does not depend on never count as a mismatch.
    ok(&out, &["--seed", "6", "synth"]);
    let o = groupcvr(&out, &["--seed", "6", "--override", "model.lambda=0.02", "profile"]);
    assert!(o.status.success());
    assert!(!String::from_utf8_lossy(&o.stderr).contains("warning:"));
}

#[test]
fn individual_only_mode_trains_and_evaluates() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    for stage in ["synth", "profile", "group", "priors"] {
        ok(&out, &[stage]);
    }
    ok(&out, &["--mode", "individual_only", "train"]);
    let stdout = ok(&out, &["--mode", "individual_only", "eval"]);
    assert!(stdout.contains("mode individual_only"));
    assert!(out.join("eval/individual_only/report.json").exists());
    // Its fusion column is empty: there is no group channel.
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("eval/individual_only/report.json")).unwrap()).unwrap();
    assert!(report["levels"][0]["mean_alpha_fusion"].is_null());

    let err = error_of(&groupcvr(&out, &["--mode", "no_such_mode", "train"]));
    assert_eq!(err["error"], "unknown_mode");
}

#[test]
fn no_llm_emb_evaluates_on_its_own_grouping() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    ok(&out, &["run"]);
    ok(&out, &["--mode", "no_llm_emb", "train"]);
    assert!(out.join("train/no_llm_emb/assignments.jsonl").exists());
    let stdout = ok(&out, &["--mode", "no_llm_emb", "eval"]);
    assert!(stdout.contains("low-activity GAUC"));
}

#[test]
fn ablate_reports_deltas_against_full() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    for stage in ["synth", "profile", "group", "priors"] {
        ok(&out, &[stage]);
    }
    let stdout = ok(&out, &["ablate", "--modes", "kl_loss,no_margin"]);
    assert!(stdout.contains("w/ KL Loss"));
    let rows: Vec<serde_json::Value> = fs::read_to_string(out.join("ablate/ablation.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0]["mode"], "full");
    assert_eq!(rows[0]["delta_low_activity_gauc"], 0.0);

    let err = error_of(&groupcvr(&out, &["ablate", "--modes", "bogus"]));
    assert_eq!(err["error"], "unknown_mode");
}

#[test]
fn sweep_writes_plot_series() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    for stage in ["synth", "profile", "group", "priors"] {
        ok(&out, &[stage]);
    }
    ok(&out, &["--plot-data", "sweep"]);
    let k = fs::read_to_string(out.join("sweep/plot_gauc_vs_k.tsv")).unwrap();
    assert_eq!(k.lines().next(), Some("k\tlow_activity_gauc"));
    assert_eq!(k.lines().count(), 1 + 2);
    let lambda = fs::read_to_string(out.join("sweep/plot_gauc_vs_lambda.tsv")).unwrap();
    assert_eq!(lambda.lines().count(), 1 + 2);
    assert_eq!(
        fs::read_to_string(out.join("sweep/sweep.jsonl"))
            .unwrap()
            .lines()
            .count(),
        4
    );
}

#[test]
fn bad_config_is_reported_as_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let err = error_of(&groupcvr(&out, &["--override", "model.no_such_key=1", "synth"]));
    assert_eq!(err["error"], "config");
    let err = error_of(&groupcvr(&out, &["--override", "eval.levels=1", "synth"]));
    assert_eq!(err["error"], "config");
}

#[test]
fn config_subcommand_prints_effective_config() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(tmp.path(), &["--seed", "42", "--mode", "group_only", "config"]);
    assert!(stdout.contains("seed = 42"));
    assert!(stdout.contains("mode = \"group_only\""));
    assert!(stdout.contains("offline = true"));
}
