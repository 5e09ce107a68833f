//! Real command outputs and the shipped configs validate against docs/schemas.

use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::Command;

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn read_json(path: &Path) -> Value {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Replaces references to sibling schema files with their contents.
fn inline_refs(value: &mut Value, dir: &Path) {
    match value {
        Value::Object(map) => {
            if let Some(Value::String(target)) = map.get("$ref") {
                if !target.starts_with('#') {
                    let mut inner = read_json(&dir.join(target));
                    inline_refs(&mut inner, dir);
                    if let Value::Object(inner) = &mut inner {
                        inner.remove("$schema");
                    }
                    *value = inner;
                    return;
                }
            }
            map.values_mut().for_each(|v| inline_refs(v, dir));
        }
        Value::Array(items) => items.iter_mut().for_each(|v| inline_refs(v, dir)),
        _ => {}
    }
}

fn assert_valid(schema: &str, instance: &Path) {
    let dir = workspace().join("docs/schemas");
    let mut schema_json = read_json(&dir.join(schema));
    inline_refs(&mut schema_json, &dir);
    let validator = jsonschema::validator_for(&schema_json).unwrap_or_else(|e| panic!("{schema}: {e}"));
    let doc = read_json(instance);
    let errors: Vec<String> = validator.iter_errors(&doc).map(|e| format!("{} at {}", e, e.instance_path())).collect();
    assert!(errors.is_empty(), "{} against {schema}:\n{}", instance.display(), errors.join("\n"));
}

fn sgnet(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_sgnet")).args(args).env("RUST_LOG", "warn").output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn shipped_configs_match_schemas() {
    let configs = workspace().join("configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&configs).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let schema =
            if name.starts_with("data") { "dataset_spec.schema.json" } else { "experiment_config.schema.json" };
        assert_valid(schema, &path);
        seen += 1;
    }
    assert!(seen >= 2);
}

#[test]
fn written_artifacts_match_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let path = |p: &str| root.join(p).to_string_lossy().into_owned();
    std::fs::write(
        root.join("data.json"),
        r#"{ "num_cases": 3, "master_seed": 9, "phantom": { "volume_shape": [16, 16, 8] }, "split": { "train": 0.34, "val": 0.33, "test": 0.33 } }"#,
    )
    .unwrap();
    std::fs::write(
        root.join("exp.json"),
        r#"{ "network": { "stage_channels": [2, 4] }, "optim": { "epochs": 1, "batch_size": 1 }, "data": { "manifest": "data/manifest.json" } }"#,
    )
    .unwrap();
    assert_valid("dataset_spec.schema.json", &root.join("data.json"));
    assert_valid("experiment_config.schema.json", &root.join("exp.json"));

    sgnet(&["gen-data", "--config", &path("data.json"), "--out", &path("data")]);
    sgnet(&["train", "--config", &path("exp.json"), "--out", &path("run")]);
    sgnet(&[
        "evaluate",
        "--checkpoint",
        &path("run/checkpoints/epoch_000.ckpt"),
        "--config",
        &path("exp.json"),
        "--out",
        &path("eval"),
    ]);
    sgnet(&["gradcheck", "--out", &path("gc")]);

    assert_valid("manifest.schema.json", &root.join("data/manifest.json"));
    assert_valid("experiment_config.schema.json", &root.join("run/config.json"));
    assert_valid("metrics.schema.json", &root.join("eval/metrics.json"));
    assert_valid("gradcheck.schema.json", &root.join("gc/gradcheck.json"));
}

#[test]
fn schemas_reject_bad_documents() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{ "num_cases": 3, "phantom": { "num_objects": 4 } }"#).unwrap();
    let result = std::panic::catch_unwind(|| assert_valid("dataset_spec.schema.json", &bad));
    assert!(result.is_err(), "a phantom with 4 objects passed the referenced schema");
    std::fs::write(&bad, r#"{ "optim": { "epochs": 2, "momentum": 0.9 } }"#).unwrap();
    assert!(std::panic::catch_unwind(|| assert_valid("experiment_config.schema.json", &bad)).is_err());
}
