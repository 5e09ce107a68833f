//! File-level entry points behind the `sgnet` subcommands.

use crate::checkpoint::load_checkpoint;
use crate::error::{Error, Result};
use crate::experiment::{
    ablation_deltas, ablation_rows, ablation_summary, evaluate_named, run_ablation, train, write_csv_rows,
    write_overlay_pgm, AblationRun, ExperimentConfig, TrainOptions, TrainOutcome,
};
use crate::gradcheck::{run_gradcheck, GradcheckOptions, GradcheckReport};
use crate::metrics::MetricsReport;
use crate::phantom::{generate_dataset, DatasetSpec, Manifest, Split};
use std::path::{Path, PathBuf};

pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const OVERLAY_DIR: &str = "overlays";
pub const ABLATION_RUNS_CSV: &str = "ablation_runs.csv";
pub const ABLATION_TABLE_CSV: &str = "ablation_table.csv";
pub const ABLATION_DELTAS_CSV: &str = "ablation_deltas.csv";
pub const GRADCHECK_JSON: &str = "gradcheck.json";

fn manifest_root(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Reads an optional dataset spec and writes the phantoms to `out`.
pub fn cmd_gen_data(
    config: Option<&Path>,
    master_seed: Option<u64>,
    num_cases: Option<usize>,
    out: &Path,
) -> Result<Manifest> {
    let mut spec = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
            serde_json::from_str::<DatasetSpec>(&text).map_err(Error::json(path))?
        }
        None => DatasetSpec::default(),
    };
    if let Some(seed) = master_seed {
        spec.master_seed = seed;
    }
    if let Some(n) = num_cases {
        spec.num_cases = n;
    }
    generate_dataset(&spec, out)
}

pub fn cmd_train(config: &Path, seed: Option<u64>, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    let cfg = load_config(config, seed)?;
    let manifest = Manifest::read(&cfg.data.manifest)?;
    let root = manifest_root(&cfg.data.manifest);
    let train_set = manifest.load_split(root, Split::Train)?;
    let val = manifest.load_split(root, Split::Val)?;
    log::info!("training on {} cases, validating on {}", train_set.len(), val.len());
    let opts = TrainOptions { out_dir: Some(out.to_path_buf()), resume: resume.map(Path::to_path_buf) };
    train(&cfg, &train_set, &val, &opts)
}

/// Evaluates a checkpoint on one split of a manifest.
pub fn cmd_evaluate(
    checkpoint: &Path,
    manifest_path: &Path,
    split: Split,
    out: &Path,
    overlays: bool,
) -> Result<MetricsReport> {
    let net = load_checkpoint::<f32>(checkpoint)?.network;
    let manifest = Manifest::read(manifest_path)?;
    let root = manifest_root(manifest_path);
    let cases: Vec<_> = manifest.cases_in(split).collect();
    let samples = cases.iter().map(|c| manifest.load_case(root, c)).collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    let (report, preds) = evaluate_named(&net, &samples, &ids)?;

    std::fs::create_dir_all(out).map_err(Error::io(out))?;
    report.write_csv(&out.join(METRICS_CSV))?;
    report.write_json(&out.join(METRICS_JSON))?;
    if overlays {
        let dir = out.join(OVERLAY_DIR);
        std::fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        for ((id, sample), pred) in ids.iter().zip(&samples).zip(&preds) {
            write_overlay_pgm(&dir.join(format!("{id}.pgm")), &sample.image, &sample.label, pred)?;
        }
    }
    Ok(report)
}

pub fn write_ablation(out: &Path, runs: &[AblationRun]) -> Result<()> {
    std::fs::create_dir_all(out).map_err(Error::io(out))?;
    write_csv_rows(&out.join(ABLATION_RUNS_CSV), &ablation_rows(runs))?;
    write_csv_rows(&out.join(ABLATION_TABLE_CSV), &ablation_summary(runs))?;
    write_csv_rows(&out.join(ABLATION_DELTAS_CSV), &ablation_deltas(runs))
}

/// Trains the SG x soft-contour grid on the train split and scores it on
/// the test split.
pub fn cmd_ablate(config: &Path, seeds: Option<Vec<u64>>, out: &Path) -> Result<Vec<AblationRun>> {
    let mut cfg = load_config(config, None)?;
    if let Some(seeds) = seeds {
        cfg.ablation.seeds = seeds;
    }
    if cfg.ablation.seeds.len() < 3 {
        log::warn!("ablation with {} seed(s); at least 3 are needed for a spread", cfg.ablation.seeds.len());
    }
    let manifest = Manifest::read(&cfg.data.manifest)?;
    let root = manifest_root(&cfg.data.manifest);
    let train_set = manifest.load_split(root, Split::Train)?;
    let test = manifest.load_split(root, Split::Test)?;
    if test.is_empty() {
        return Err(Error::Config("ablation needs a non-empty test split".into()));
    }
    let runs = run_ablation(&cfg, &train_set, &test)?;
    write_ablation(out, &runs)?;
    Ok(runs)
}

/// Runs the finite-difference suite and writes `gradcheck.json` when `out` is given.
pub fn cmd_gradcheck(seed: u64, out: Option<&Path>) -> Result<GradcheckReport> {
    let report = run_gradcheck(&GradcheckOptions { seed, ..GradcheckOptions::default() })?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let path: PathBuf = dir.join(GRADCHECK_JSON);
        let text = serde_json::to_string_pretty(&report).map_err(Error::json(&path))?;
        std::fs::write(&path, text).map_err(Error::io(&path))?;
    }
    Ok(report)
}
