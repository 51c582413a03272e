use std::path::Path;
use std::process::{Command, Output};

use creative_core::classifiers::ClusterModel;
use creative_core::Image;

fn creative(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_creative"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .env_remove("CREATIVE_CACHE_DIR")
        .output()
        .expect("spawn creative")
}

fn ok(out: &Path, args: &[&str]) -> Output {
    let o = creative(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn configs() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn exit_codes_follow_error_class() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    assert_eq!(creative(out, &["--bogus-flag"]).status.code(), Some(2));
    assert_eq!(creative(out, &["no-such-command"]).status.code(), Some(2));
    assert_eq!(creative(out, &["train-ddpo", "--override", "reward.nope=1"]).status.code(), Some(2));
    assert_eq!(
        creative(out, &["train-ddpo", "--config", "/nonexistent/cfg.toml"]).status.code(),
        Some(2)
    );
    let external = creative(out, &["train-ddpo", "--override", "policy.kind=external:sd2"]);
    assert_eq!(external.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&external.stderr).contains("backend unavailable"));
    assert_eq!(creative(out, &["eval-score"]).status.code(), Some(1));
    assert_eq!(creative(out, &["--help"]).status.code(), Some(0));
}

fn write_tree(root: &Path, classes: usize, per_class: usize) {
    for c in 0..classes {
        let dir = root.join(format!("style-{c:02}"));
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..per_class {
            let v = (c * per_class + i) as f32 / (classes * per_class) as f32;
            let img = Image::from_fn(8, 8, |y, x, ch| (v + 0.1 * ch as f32 + 0.01 * (x + y) as f32) % 1.0).unwrap();
            img.save_png(&dir.join(format!("{i}.png"))).unwrap();
        }
    }
}

#[test]
fn subset_then_cluster_with_k_passthrough() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("images");
    write_tree(&root, 12, 2);
    let out = tmp.path().join("runs");
    let root_s = root.to_str().unwrap();
    ok(&out, &["subset-mediums", "--root", root_s, "--dataset", "toy", "--top-n", "10"]);
    let mediums = out.join("mediums");
    for f in ["mediums.csv", "labels.txt", "subset.json", "config.toml", "run.json"] {
        assert!(mediums.join(f).is_file(), "{f}");
    }
    let labels = std::fs::read_to_string(mediums.join("labels.txt")).unwrap();
    assert_eq!(labels.lines().count(), 10);

    ok(&out, &["fit-clusters", "--k", "10", "--dataset", "mediums"]);
    let dir = out.join("clusters-mediums-k10");
    let model = ClusterModel::load(&dir.join("clusters.json")).unwrap();
    assert_eq!(model.centers.len(), 10);
    let fit: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("fit.json")).unwrap()).unwrap();
    assert_eq!(fit["k"], 10);
    assert_eq!(fit["images"], 20);
    let run: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["config_hash"].as_str().unwrap().len(), 16);
}

#[test]
fn eval_generate_twice_gives_identical_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let args = [
        "eval-generate",
        "--n",
        "6",
        "--base-seed",
        "7",
        "--override",
        "policy.pretrain_steps=20",
        "--override",
        "eval.steps=4",
    ];
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&a, &args);
    ok(&b, &args);
    let read = |root: &Path, f: &str| std::fs::read(root.join("evalsets/base").join(f)).unwrap();
    assert_eq!(read(&a, "manifest.json"), read(&b, "manifest.json"));
    for i in 0..6 {
        let f = format!("{i:04}.png");
        assert_eq!(read(&a, &f), read(&b, &f), "{f}");
    }
    assert_eq!(read(&a, "config.toml"), read(&b, "config.toml"));
    let manifest: serde_json::Value = serde_json::from_slice(&read(&a, "manifest.json")).unwrap();
    assert_eq!(manifest["base_seed"], 7);
    assert_eq!(manifest["items"].as_array().unwrap().len(), 6);
}

#[test]
fn toy_workflow_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    let small = [
        "--override",
        "policy.pretrain_steps=20",
        "--override",
        "eval.steps=4",
        "--override",
        "eval.space.iterations=50",
        "--override",
        "eval.space.exaggeration_iters=10",
    ];
    let with = |args: &[&str]| -> Vec<String> { args.iter().chain(&small).map(|s| s.to_string()).collect() };
    let run = |args: Vec<String>| ok(out, &args.iter().map(String::as_str).collect::<Vec<_>>());

    run(with(&["train-disc", "--toy", "--epochs", "2", "--n", "64", "--override", "can.batch=16"]));
    assert!(out.join("disc-toy/discriminator.json").is_file());

    let cfg = configs().join("toy-ddpo.toml");
    run(with(&[
        "train-ddpo",
        "--config",
        cfg.to_str().unwrap(),
        "--epochs",
        "2",
        "--override",
        "classifier.discriminator=disc-toy",
        "--override",
        "ddpo.effective_batch=4",
        "--override",
        "ddpo.inference_steps=3",
    ]));
    let ddpo = out.join("ddpo-toy-ddpo");
    let epochs = std::fs::read_to_string(ddpo.join("epochs.jsonl")).unwrap();
    assert_eq!(epochs.lines().count(), 2);
    assert_eq!(std::fs::read_to_string(ddpo.join("rewards.jsonl")).unwrap().lines().count(), 8);
    assert!(ddpo.join("adapters.safetensors").is_file());
    assert!(ddpo.join("checkpoint.json").is_file());

    run(with(&["train-can", "--toy", "--epochs", "1", "--n", "16", "--override", "can.batch=8"]));
    assert!(out.join("can-toy/arch.json").is_file());

    for args in [
        vec!["eval-generate", "--n", "6"],
        vec!["eval-generate", "--n", "6", "--checkpoint", "ddpo-toy-ddpo"],
        vec!["eval-generate", "--n", "6", "--can", "can-toy"],
    ] {
        run(with(&args));
    }
    for m in ["base", "toy-ddpo", "can-toy"] {
        assert!(out.join("evalsets").join(m).join("manifest.json").is_file(), "{m}");
    }

    let scored = run(with(&["eval-score"]));
    assert!(String::from_utf8_lossy(&scored.stdout).contains("toy-ddpo"));
    run(with(&["eval-similarity", "--mode", "content"]));
    assert!(out.join("similarity/similarity_content.csv").is_file());
    run(with(&["eval-space"]));
    assert!(out.join("space/space.png").is_file());
    run(with(&["report"]));
    for f in ["scores.csv", "similarity_style.csv", "space.csv", "config.toml"] {
        assert!(out.join("report").join(f).is_file(), "{f}");
    }
}
