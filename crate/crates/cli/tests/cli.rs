use std::path::Path;
use std::process::{Command, Output};

fn sgnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgnet")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "stdout:\n{stdout}\nstderr:\n{}", String::from_utf8_lossy(&out.stderr));
    stdout
}

fn write_json(path: &Path, value: serde_json::Value) {
    std::fs::write(path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
}

#[test]
fn gradcheck_reports_every_group() {
    let dir = tempfile::tempdir().unwrap();
    let out = sgnet(&["--deterministic", "gradcheck", "--seed", "5", "--out", dir.path().to_str().unwrap()]);
    let stdout = ok(&out);
    assert!(stdout.contains("all gradients within"));
    for group in ["channel.w2", "channel.b2", "channel.w1", "channel.b1", "spatial.kernel", "spatial.bias"] {
        assert!(stdout.contains(group), "missing {group}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
}

#[test]
fn gen_train_resume_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    write_json(
        &root.join("data.json"),
        serde_json::json!({
            "num_cases": 4,
            "master_seed": 3,
            "phantom": { "volume_shape": [16, 16, 8] },
            "split": { "train": 0.5, "val": 0.25, "test": 0.25 }
        }),
    );
    let stdout = ok(&sgnet(&[
        "gen-data",
        "--config",
        root.join("data.json").to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ]));
    assert!(stdout.contains("wrote 4 cases"));

    write_json(
        &root.join("exp.json"),
        serde_json::json!({
            "network": { "stage_channels": [2, 4] },
            "optim": { "epochs": 2, "batch_size": 1, "lr_decay_every_epochs": 1 },
            "data": { "manifest": "data/manifest.json" },
            "seed": 1
        }),
    );
    let cfg = root.join("exp.json");
    let run = root.join("run");
    ok(&sgnet(&["--deterministic", "train", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()]));
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,epoch,lr,total,seg,clear,blurry,aux");
    assert_eq!(lines.len(), 1 + 2 * 2);
    assert!(run.join("checkpoints/epoch_000.ckpt").exists());
    assert!(run.join("checkpoints/epoch_001.ckpt").exists());
    assert!(run.join("checkpoints/best.ckpt").exists());

    // Resuming after epoch 0 replays epoch 1 exactly.
    let resumed = root.join("resumed");
    ok(&sgnet(&[
        "--deterministic",
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        resumed.to_str().unwrap(),
        "--resume",
        run.join("checkpoints/epoch_000.ckpt").to_str().unwrap(),
    ]));
    let replay = std::fs::read_to_string(resumed.join("train_log.csv")).unwrap();
    assert_eq!(replay.lines().skip(1).collect::<Vec<_>>(), lines[3..]);

    let eval = root.join("eval");
    let stdout = ok(&sgnet(&[
        "evaluate",
        "--checkpoint",
        run.join("checkpoints/best.ckpt").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--split",
        "test",
        "--out",
        eval.to_str().unwrap(),
        "--overlays",
    ]));
    assert!(stdout.contains("class 3"));
    let csv = std::fs::read_to_string(eval.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
    let pgm = std::fs::read(eval.join("overlays/case_0003.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
    assert_eq!(pgm.len(), b"P5\n16 16\n255\n".len() + 256);
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = sgnet(&["train", "--config", missing.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));

    write_json(&dir.path().join("bad.json"), serde_json::json!({ "optim": { "lr": -1.0 } }));
    let out = sgnet(&["train", "--config", dir.path().join("bad.json").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr must be > 0"));

    let out = sgnet(&["evaluate", "--checkpoint", "x.ckpt", "--split", "holdout", "--manifest", "m.json"]);
    assert!(!out.status.success());
}
