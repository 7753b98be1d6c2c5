use std::fs;
use std::path::Path;
use std::process::Command;

use avlm_cli::{ExperimentPlan, Manifest, Pipeline, Scale, MANIFEST_FILE};

fn avlm(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_avlm")).args(args).output().expect("spawn avlm");
    assert!(
        out.status.success(),
        "avlm {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_tiny_configs(dir: &Path) {
    let plan = ExperimentPlan::preset("smoke", 0, Scale::Smoke).unwrap();
    let avlm_cli::Stage::Datagen { corpus, .. } = &plan.stages[0] else {
        panic!("first smoke stage is not datagen");
    };
    fs::write(dir.join("corpus.json"), serde_json::to_string(corpus).unwrap()).unwrap();
    fs::write(dir.join("train.json"), serde_json::to_string(&plan.pretrain).unwrap()).unwrap();
    fs::write(dir.join("eval.json"), serde_json::to_string(&plan.eval).unwrap()).unwrap();
}

#[test]
fn every_command_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_tiny_configs(d);
    let data = d.join("data");
    let summary = avlm(&["datagen", "--seed", "3", "--config", p(&d.join("corpus.json")), "--out", p(&data)]);
    assert!(summary.contains("\"vocab_hash\""), "{summary}");

    let base = d.join("pre");
    avlm(&[
        "pretrain",
        "--config",
        p(&d.join("train.json")),
        "--data",
        p(&data),
        "--out",
        p(&base),
        "--fusion",
        "none",
    ]);
    assert!(base.join("base").join("model").exists());
    let pre = d.join("pre-prefix");
    avlm(&[
        "pretrain",
        "--config",
        p(&d.join("train.json")),
        "--data",
        p(&data),
        "--base",
        p(&base.join("base")),
        "--out",
        p(&pre),
        "--fusion",
        "prefix",
        "--mask",
        "0.3",
    ]);
    let metrics = fs::read_to_string(pre.join("metrics.jsonl")).unwrap();
    assert!(metrics.lines().count() > 0);

    let ft = d.join("ft");
    avlm(&[
        "finetune",
        "--config",
        p(&d.join("train.json")),
        "--ckpt",
        p(&pre),
        "--data",
        p(&data),
        "--task",
        "generate",
        "--limit",
        "4",
        "--out",
        p(&ft),
    ]);

    let lines = avlm(&["generate", "--ckpt", p(&ft), "--data", p(&data), "--emotion", "happy", "--n", "2"]);
    assert_eq!(lines.lines().count(), 2);
    for line in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["prompted"], "happy");
    }

    let report = d.join("reports").join("ppl.json");
    fs::create_dir_all(report.parent().unwrap()).unwrap();
    avlm(&[
        "eval",
        "--config",
        p(&d.join("eval.json")),
        "--ckpt",
        &format!("speech={}", p(&base.join("base"))),
        "--ckpt",
        &format!("prefix={}", p(&pre)),
        "--data",
        p(&data),
        "--suite",
        "ppl",
        "--emit-csv",
        "--out",
        p(&report),
    ]);
    assert!(report.exists());
    let csv = fs::read_to_string(d.join("reports").join("ppl.csv")).unwrap();
    assert!(csv.lines().count() > 2, "{csv}");
}

#[test]
fn reproduce_resumes_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("run");
    let out = avlm(&["reproduce", "--preset", "fig5", "--scale", "smoke", "--out", p(&root)]);
    assert!(out.lines().filter(|l| l.contains(" ran")).count() >= 4, "{out}");
    let first = fs::read(root.join(MANIFEST_FILE)).unwrap();

    let again = avlm(&["reproduce", "--preset", "fig5", "--scale", "smoke", "--out", p(&root)]);
    assert!(!again.contains(" ran"), "{again}");
    assert_eq!(fs::read(root.join(MANIFEST_FILE)).unwrap(), first);

    // Removing a downstream artifact reruns only that stage.
    fs::remove_file(root.join("reports/fig5/report.json")).unwrap();
    let plan = ExperimentPlan::preset("fig5", 0, Scale::Smoke).unwrap();
    let summary = Pipeline::new(plan, &root).unwrap().run().unwrap();
    let ran: Vec<&str> = summary.stages.iter().filter(|s| !s.resumed).map(|s| s.name.as_str()).collect();
    assert_eq!(ran, ["reports/fig5"]);
    assert_eq!(fs::read(root.join(MANIFEST_FILE)).unwrap(), first);

    // A corrupted checkpoint is rebuilt; identical bytes leave downstream keys valid.
    let manifest = Manifest::load(&root).unwrap();
    let victim = manifest.stage_files("finetune/avlm-gen").next().unwrap().0.clone();
    fs::write(root.join(&victim), b"tampered").unwrap();
    let plan = ExperimentPlan::preset("fig5", 0, Scale::Smoke).unwrap();
    let summary = Pipeline::new(plan, &root).unwrap().run().unwrap();
    let ran: Vec<&str> = summary.stages.iter().filter(|s| !s.resumed).map(|s| s.name.as_str()).collect();
    assert_eq!(ran, ["finetune/avlm-gen"]);
    assert_eq!(fs::read(root.join(MANIFEST_FILE)).unwrap(), first);

    // A fresh directory with the same seed reproduces the manifest byte for byte.
    let other = tmp.path().join("other");
    avlm(&["reproduce", "--preset", "fig5", "--scale", "smoke", "--out", p(&other)]);
    assert_eq!(fs::read(other.join(MANIFEST_FILE)).unwrap(), first);
}
