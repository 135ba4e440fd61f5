use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const CONFIG: &str = r#"{
  "denoiser": {
    "input_size": 32, "base_channels": 4, "channel_mult": [1, 2], "res_blocks_encoder": [1, 1],
    "attention_resolutions": [16], "time_embed_dim": 8, "diffusion_steps": 4
  },
  "train": { "steps": 3, "batch_size": 4, "learning_rate": 0.001, "log_every": 1, "checkpoint_every": 2 },
  "metrics": {
    "embedder": { "widths": [4, 8, 8, 16], "norm_groups": 4 },
    "train": { "steps": 4, "batch_size": 8, "accuracy_floor": 0.0 }
  }
}"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_repaintlab"))
        .args(args)
        .env("REPAINTLAB_THREADS", "2")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn end_to_end_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = d.join("run.json");
    std::fs::write(&cfg, CONFIG).unwrap();
    let (corpus, emb, ckpt) = (d.join("corpus"), d.join("emb"), d.join("ckpt"));

    ok(&[
        "synth",
        "--classes",
        "2",
        "--per-class",
        "40",
        "--size",
        "32",
        "--seed",
        "1",
        "--out",
        s(&corpus),
    ]);
    assert!(corpus.join("corpus.json").exists());
    assert!(corpus.join("c0_00000.png").exists());
    assert!(corpus.join("c0_00000.cells.jsonl").exists());
    assert_eq!(
        json(&corpus.join("provenance.json"))["config"]["corpus"]["per_class"],
        40
    );

    ok(&[
        "train-embedder",
        "--config",
        s(&cfg),
        "--corpus",
        s(&corpus),
        "--out",
        s(&emb),
    ]);
    assert!(emb.join("provenance.json").exists());

    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&corpus),
        "--seed",
        "2",
        "--out",
        s(&ckpt),
    ]);
    let metrics = std::fs::read_to_string(ckpt.join("metrics.jsonl")).unwrap();
    let rows: Vec<Value> = metrics
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 3);
    for key in ["step", "loss_simple", "loss_vlb", "lr"] {
        assert!(rows[0].get(key).is_some(), "metrics row lacks {key}");
    }
    assert!(ckpt.join("checkpoints/step-000002/params.ndt").exists());
    let prov = json(&ckpt.join("provenance.json"));
    assert_eq!(prov["seed"], 2);
    assert!(prov["inputs"][s(&corpus)].is_string());

    // Identical inputs give identical checkpoints.
    let again = d.join("ckpt2");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&corpus),
        "--seed",
        "2",
        "--out",
        s(&again),
    ]);
    for f in [
        "params.ndt",
        "config.json",
        "metrics.jsonl",
        "provenance.json",
        "checkpoints/step-000002/params.ndt",
    ] {
        assert_eq!(
            std::fs::read(ckpt.join(f)).unwrap(),
            std::fs::read(again.join(f)).unwrap(),
            "{f} differs"
        );
    }

    let samples = d.join("samples");
    ok(&[
        "sample",
        "--ckpt",
        s(&ckpt),
        "--n",
        "64",
        "--seed",
        "3",
        "--out",
        s(&samples),
    ]);
    assert!(samples.join("sample_00063.png").exists());

    let mask = d.join("mask.png");
    repaintlab::synthlab::make_mask(32, 0.2, 1)
        .unwrap()
        .save_png(&mask)
        .unwrap();
    let image = corpus.join("c1_00003.png");
    let out = d.join("r/out.png");
    ok(&[
        "repaint",
        "--ckpt",
        s(&ckpt),
        "--image",
        s(&image),
        "--mask",
        s(&mask),
        "--jump",
        "2",
        "--seed",
        "3",
        "--out",
        s(&out),
    ]);
    let side = json(&d.join("r/out.png.prov.json"));
    for key in ["checkpoint", "mask_coverage", "jump", "steps", "seed"] {
        assert!(side.get(key).is_some(), "sidecar lacks {key}");
    }
    assert_eq!(side["jump"], 2);
    let first = std::fs::read(&out).unwrap();
    ok(&[
        "repaint",
        "--ckpt",
        s(&ckpt),
        "--image",
        s(&image),
        "--mask",
        s(&mask),
        "--jump",
        "2",
        "--seed",
        "3",
        "--out",
        s(&out),
    ]);
    assert_eq!(std::fs::read(&out).unwrap(), first);
    // Known pixels survive the PNG round trip unchanged.
    let m = repaintlab::synthlab::Mask::load_png(&mask).unwrap();
    let a = repaintlab::image::read_gray_png(&image).unwrap().2;
    let b = repaintlab::image::read_gray_png(&out).unwrap().2;
    for (i, k) in m.known().iter().enumerate() {
        if *k {
            assert_eq!(a[i], b[i]);
        }
    }
    let hole_out = d.join("r/hole.png");
    ok(&[
        "repaint",
        "--ckpt",
        s(&ckpt),
        "--image",
        s(&image),
        "--mask",
        s(&mask),
        "--mask-convention",
        "hole",
        "--seed",
        "3",
        "--out",
        s(&hole_out),
    ]);
    let flipped = json(&d.join("r/hole.png.prov.json"))["mask_coverage"]
        .as_f64()
        .unwrap();
    assert!((flipped + side["mask_coverage"].as_f64().unwrap() - 1.0).abs() < 1e-12);

    let fcd = ok(&[
        "fcd",
        "--ckpt",
        s(&emb),
        "--set-a",
        s(&corpus),
        "--set-b",
        s(&samples),
    ]);
    let v: Value = serde_json::from_slice(&fcd.stdout).unwrap();
    assert_eq!(
        (v["n_a"].as_u64(), v["n_b"].as_u64(), v["dim"].as_u64()),
        (Some(80), Some(64), Some(16))
    );
    assert!(v["fcd"].as_f64().unwrap() >= 0.0);

    let curve = d.join("battery.json");
    let b = ok(&[
        "fcd-battery",
        "--ckpt",
        s(&emb),
        "--set",
        s(&corpus),
        "--kind",
        "gaussian_noise",
        "--levels",
        "0,0.1,0.2,0.4",
        "--out",
        s(&curve),
    ]);
    let v: Value = serde_json::from_slice(&b.stdout).unwrap();
    assert_eq!(v["curves"][0]["curve"].as_array().unwrap().len(), 4);
    assert!(d.join("battery.json.prov.json").exists());

    let report = d.join("report.json");
    ok(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--ckpt",
        s(&ckpt),
        "--embedder",
        s(&emb),
        "--corpus",
        s(&corpus),
        "--n",
        "6",
        "--jump",
        "1",
        "--seed",
        "4",
        "--out",
        s(&report),
    ]);
    let r = json(&report);
    assert_eq!(r["bins"].as_array().unwrap().len(), 9);
    assert_eq!(r["patches"].as_array().unwrap().len(), 6);
    assert!(r.get("fcd_repaired_vs_intact").is_some() && r.get("fcd_baseline_vs_intact").is_some());
    assert!(d.join("report.json.prov.json").exists());
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["synth"]).status.code(), Some(2));
}

#[test]
fn config_errors_exit_with_one_and_a_pointer() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"corpus": {"clases": 3}}"#).unwrap();
    let out = run(&[
        "synth",
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("c")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["pointer"], "/corpus/clases");

    std::fs::write(&cfg, r#"{"train": {"ema_decay": 1.5}}"#).unwrap();
    let out = run(&[
        "synth",
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("c")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["pointer"], "/train/ema_decay");
}

#[test]
fn data_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "fcd",
        "--ckpt",
        s(tmp.path()),
        "--set-a",
        s(tmp.path()),
        "--set-b",
        s(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(serde_json::from_slice::<Value>(&out.stderr).unwrap()["error"].is_string());
    let bad_threads = Command::new(env!("CARGO_BIN_EXE_repaintlab"))
        .args(["synth", "--out", s(&tmp.path().join("x"))])
        .env("REPAINTLAB_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(bad_threads.status.code(), Some(1));
}

#[test]
fn synth_is_byte_identical_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let args = |o: &Path| {
        ok(&[
            "synth",
            "--classes",
            "3",
            "--per-class",
            "4",
            "--size",
            "32",
            "--seed",
            "9",
            "--out",
            s(o),
        ]);
    };
    args(&a);
    args(&b);
    let mut names: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    for n in names {
        assert_eq!(
            std::fs::read(a.join(&n)).unwrap(),
            std::fs::read(b.join(&n)).unwrap(),
            "{n:?}"
        );
    }
}
