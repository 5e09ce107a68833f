//! Experiment configuration, the training loop, evaluation and the ablation grid.

use crate::boundary::{make_hard_only_targets, make_targets, BoundaryTargets, OrganTaxonomy, SoftenConfig};
use crate::checkpoint::{load_checkpoint, save_checkpoint, TrainingState};
use crate::error::{Error, Result};
use crate::losses::{total_loss, BlurryLoss, LossBreakdown, LossConfig};
use crate::metrics::{evaluate_case, MetricsReport, Summary};
use crate::network::{predict_labels, Network, NetworkConfig};
use crate::optim::{Adam, OptimConfig};
use crate::phantom::SegSample;
use crate::volume::{FeatureVolume, LabelVolume};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub use_sg: bool,
    /// Soft (Gaussian) contour targets for blurry classes; hard contours and
    /// focal loss otherwise.
    pub use_soft_contour: bool,
    pub use_boundary_heads: bool,
    pub use_deep_supervision: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags { use_sg: true, use_soft_contour: true, use_boundary_heads: true, use_deep_supervision: true }
    }
}

impl AblationFlags {
    pub fn label(&self) -> String {
        let on = |b: bool| if b { "on" } else { "off" };
        format!("sg_{}__soft_{}", on(self.use_sg), on(self.use_soft_contour))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Relative paths are resolved against the config file's directory.
    pub manifest: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { manifest: PathBuf::from("data/manifest.json") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { seeds: vec![0, 1, 2] }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    pub losses: LossConfig,
    pub taxonomy: OrganTaxonomy,
    pub soften: SoftenConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub seed: u64,
    /// Take precedence over `network.use_sg`, `network.deep_supervision`
    /// and the boundary loss settings.
    pub ablation_flags: AblationFlags,
    pub ablation: AblationConfig,
}

impl ExperimentConfig {
    /// Reads a JSON config; a relative manifest path is anchored at the
    /// config file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text).map_err(Error::json(path))?;
        if cfg.data.manifest.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.data.manifest = dir.join(&cfg.data.manifest);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let (net, losses) = self.effective();
        net.validate()?;
        losses.validate()?;
        self.taxonomy.validate(net.num_classes)?;
        self.soften.validate()?;
        self.optim.validate()?;
        if self.ablation.seeds.is_empty() {
            return Err(Error::Config("ablation.seeds must not be empty".into()));
        }
        Ok(())
    }

    /// Network and loss configs with the ablation flags applied.
    pub fn effective(&self) -> (NetworkConfig, LossConfig) {
        let f = self.ablation_flags;
        let mut net = self.network.clone();
        net.use_sg = f.use_sg;
        net.deep_supervision = f.use_deep_supervision;
        let mut losses = self.losses.clone();
        if !f.use_boundary_heads {
            losses.weights.clear = 0.0;
            losses.weights.blurry = 0.0;
        }
        if !f.use_soft_contour {
            losses.blurry_loss = BlurryLoss::Focal;
        }
        (net, losses)
    }

    pub fn with_flags(&self, flags: AblationFlags) -> Self {
        ExperimentConfig { ablation_flags: flags, ..self.clone() }
    }
}

/// A training sample with its boundary targets precomputed.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub image: FeatureVolume<f32>,
    pub label: LabelVolume,
    pub targets: BoundaryTargets,
}

pub fn prepare(samples: &[SegSample], cfg: &ExperimentConfig) -> Result<Vec<PreparedSample>> {
    samples
        .par_iter()
        .map(|s| {
            let targets = if cfg.ablation_flags.use_soft_contour {
                make_targets(&s.label, &cfg.taxonomy, &cfg.soften)?
            } else {
                make_hard_only_targets(&s.label, &cfg.taxonomy)
            };
            Ok(PreparedSample { image: s.image.clone(), label: s.label.clone(), targets })
        })
        .collect()
}

/// One row of the per-step training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub seg: f64,
    pub clear: f64,
    pub blurry: f64,
    pub aux: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network<f32>,
    pub steps: Vec<StepLog>,
    pub best_val_dsc: Option<f64>,
    pub best_epoch: Option<usize>,
}

/// Where training writes its artifacts, and an optional checkpoint to resume from.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub out_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

pub const TRAIN_LOG: &str = "train_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:03}.ckpt")
}

/// Sample order for one epoch, a pure function of `(seed, epoch)` so that
/// resuming needs no RNG state.
pub fn epoch_order(seed: u64, epoch: usize, n: usize, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
    let mut order = Vec::with_capacity(len + n);
    while order.len() < len {
        let mut pass: Vec<usize> = (0..n).collect();
        pass.shuffle(&mut rng);
        order.extend(pass);
    }
    order.truncate(len);
    order
}

/// Runs one forward/backward/update; returns the loss terms of the batch.
pub fn train_step(
    net: &mut Network<f32>,
    adam: &mut Adam<f32>,
    batch: &[&PreparedSample],
    losses: &LossConfig,
    lr: f64,
) -> Result<LossBreakdown> {
    let images: Vec<FeatureVolume<f32>> = batch.iter().map(|p| p.image.clone()).collect();
    let x = FeatureVolume::stack(&images)?;
    let (out, tape) = net.forward_traced(&x)?;
    let labels: Vec<&LabelVolume> = batch.iter().map(|p| &p.label).collect();
    let targets: Vec<&BoundaryTargets> = batch.iter().map(|p| &p.targets).collect();
    let (breakdown, grads) = total_loss(&out, &labels, &targets, losses)?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    let g = net.backward(&tape, &grads)?;
    if g.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    adam.step(net.params_mut(), &g, lr)?;
    Ok(breakdown)
}

struct LogWriter {
    w: csv::Writer<std::fs::File>,
    path: PathBuf,
}

impl LogWriter {
    fn open(path: &Path, append: bool) -> Result<Self> {
        let exists = append && path.exists();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(exists)
            .truncate(!exists)
            .open(path)
            .map_err(Error::io(path))?;
        let w = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
        Ok(LogWriter { w, path: path.to_path_buf() })
    }

    fn row(&mut self, row: &StepLog) -> Result<()> {
        self.w.serialize(row).map_err(Error::csv(&self.path))?;
        self.w.flush().map_err(Error::io(&self.path))
    }
}

pub fn read_train_log(path: &Path) -> Result<Vec<StepLog>> {
    let mut r = csv::Reader::from_path(path).map_err(Error::csv(path))?;
    r.deserialize().map(|row| row.map_err(Error::csv(path))).collect()
}

/// Trains a network on `train`, selecting the best epoch by mean validation DSC.
pub fn train(
    cfg: &ExperimentConfig,
    train: &[SegSample],
    val: &[SegSample],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let (net_cfg, loss_cfg) = cfg.effective();
    let prepared = prepare(train, cfg)?;
    let experiment_json = serde_json::to_value(cfg).expect("config serializes");

    let mut net = Network::<f32>::build(net_cfg.clone(), cfg.seed)?;
    let mut adam = Adam::new(&cfg.optim, net.params());
    let mut state = TrainingState { epoch: 0, step: 0, best_val_dsc: None, best_epoch: None };
    if let Some(path) = &opts.resume {
        let ck = load_checkpoint::<f32>(path)?;
        if ck.header.network != net_cfg {
            return Err(Error::Checkpoint {
                path: path.clone(),
                reason: "network config differs from the experiment config".into(),
            });
        }
        net = ck.network;
        if let Some(moments) = ck.adam {
            adam.restore(moments, net.params())?;
        }
        state = ck.header.training.ok_or_else(|| Error::Checkpoint {
            path: path.clone(),
            reason: "no training state; cannot resume".into(),
        })?;
    }

    let ckpt_dir = opts.out_dir.as_ref().map(|d| d.join(CHECKPOINT_DIR));
    let mut log = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir.join(CHECKPOINT_DIR)).map_err(Error::io(dir))?;
            let cfg_path = dir.join("config.json");
            let text = serde_json::to_string_pretty(cfg).map_err(Error::json(&cfg_path))?;
            std::fs::write(&cfg_path, text).map_err(Error::io(&cfg_path))?;
            Some(LogWriter::open(&dir.join(TRAIN_LOG), opts.resume.is_some())?)
        }
        None => None,
    };

    let batch = cfg.optim.batch_size.min(prepared.len());
    let steps_per_epoch = cfg.optim.steps_per_epoch.unwrap_or(prepared.len().div_ceil(batch));
    let schedule = cfg.optim.schedule();
    let mut steps = Vec::new();

    for epoch in state.epoch..cfg.optim.epochs {
        let lr = schedule.lr(epoch);
        let order = epoch_order(cfg.seed, epoch, prepared.len(), steps_per_epoch * batch);
        for chunk in order.chunks(batch) {
            let items: Vec<&PreparedSample> = chunk.iter().map(|&i| &prepared[i]).collect();
            let b = train_step(&mut net, &mut adam, &items, &loss_cfg, lr).map_err(|e| match e {
                Error::NonFinite(what) => {
                    Error::Diverged { step: state.step, epoch, detail: format!("non-finite {what} at lr {lr}") }
                }
                other => other,
            })?;
            let row = StepLog {
                step: state.step,
                epoch,
                lr,
                total: b.total,
                seg: b.seg,
                clear: b.clear,
                blurry: b.blurry,
                aux: b.aux,
            };
            if let Some(w) = log.as_mut() {
                w.row(&row)?;
            }
            log::debug!("step {} epoch {epoch} lr {lr:e} loss {:.5}", state.step, b.total);
            steps.push(row);
            state.step += 1;
        }

        state.epoch = epoch + 1;
        let mut improved = false;
        if !val.is_empty() {
            let report = evaluate(&net, val)?.0;
            log::info!("epoch {epoch}: lr {lr:e}, validation mean DSC {:.4}", report.mean_dsc);
            if state.best_val_dsc.map_or(true, |b| report.mean_dsc > b) {
                state.best_val_dsc = Some(report.mean_dsc);
                state.best_epoch = Some(epoch);
                improved = true;
            }
        } else {
            log::info!("epoch {epoch}: lr {lr:e} done ({} steps)", state.step);
        }
        if let Some(dir) = &ckpt_dir {
            let path = dir.join(epoch_checkpoint_name(epoch));
            save_checkpoint(&path, &net, Some(&adam.state), Some(&state), Some(&experiment_json))?;
            if improved {
                std::fs::copy(&path, dir.join(BEST_CHECKPOINT)).map_err(Error::io(dir.join(BEST_CHECKPOINT)))?;
            }
        }
    }

    Ok(TrainOutcome { network: net, steps, best_val_dsc: state.best_val_dsc, best_epoch: state.best_epoch })
}

/// Predicted label map for a single `(1, C, H, W, T)` image.
pub fn predict(net: &Network<f32>, image: &FeatureVolume<f32>) -> Result<LabelVolume> {
    let out = net.forward(image)?;
    Ok(predict_labels(&out).remove(0))
}

fn check_compatible(net: &Network<f32>, sample: &SegSample) -> Result<()> {
    let cfg = net.config();
    let dims = sample.label.dims();
    if sample.image.channels() != cfg.in_channels || sample.image.spatial() != dims {
        return Err(Error::mismatch("evaluate", sample.image.shape(), dims));
    }
    let d = cfg.required_divisor();
    if dims.iter().any(|&x| x % d != 0) {
        return Err(Error::Indivisible {
            dims,
            required: d,
            factor: cfg.downsample_factor,
            exponent: cfg.stages() as u32 - 1,
        });
    }
    if usize::from(sample.label.max_label()) >= cfg.num_classes {
        return Err(Error::LabelOutOfRange { label: sample.label.max_label(), classes: cfg.num_classes });
    }
    Ok(())
}

/// Foreground classes scored for a network.
pub fn foreground_classes(cfg: &NetworkConfig) -> Vec<u8> {
    (1..cfg.num_classes as u8).collect()
}

/// Inference plus metrics over `samples`; case ids are `case_{index}` unless
/// the caller renames them. Cases run in parallel.
pub fn evaluate(net: &Network<f32>, samples: &[SegSample]) -> Result<(MetricsReport, Vec<LabelVolume>)> {
    let ids: Vec<String> = (0..samples.len()).map(|i| format!("case_{i:04}")).collect();
    evaluate_named(net, samples, &ids)
}

pub fn evaluate_named(
    net: &Network<f32>,
    samples: &[SegSample],
    ids: &[String],
) -> Result<(MetricsReport, Vec<LabelVolume>)> {
    if ids.len() != samples.len() {
        return Err(Error::mismatch("evaluate ids", samples.len(), ids.len()));
    }
    let classes = foreground_classes(net.config());
    let rows: Vec<_> = samples
        .par_iter()
        .zip(ids)
        .map(|(s, id)| {
            check_compatible(net, s)?;
            let pred = predict(net, &s.image)?;
            let metrics = evaluate_case(id, &pred, &s.label, &s.meta.spacing, &classes)?;
            Ok((metrics, pred))
        })
        .collect::<Result<_>>()?;
    let (cases, preds): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    Ok((MetricsReport::from_cases(cases), preds))
}

/// In-plane label transitions of slice `t`.
fn slice_contour(label: &LabelVolume, t: usize) -> Vec<bool> {
    let [h, w, _] = label.dims();
    let mut out = vec![false; h * w];
    for a in 0..h {
        for b in 0..w {
            let l = label.get(a, b, t);
            let differs = |x: usize, y: usize| label.get(x, y, t) != l;
            out[a * w + b] = l != 0
                && ((a > 0 && differs(a - 1, b))
                    || (a + 1 < h && differs(a + 1, b))
                    || (b > 0 && differs(a, b - 1))
                    || (b + 1 < w && differs(a, b + 1)));
        }
    }
    out
}

/// Mid-depth slice as binary PGM: image in grey, ground-truth contour white,
/// predicted contour black, coincident contour mid-grey.
pub fn write_overlay_pgm(path: &Path, image: &FeatureVolume<f32>, gt: &LabelVolume, pred: &LabelVolume) -> Result<()> {
    let [h, w, depth] = gt.dims();
    if pred.dims() != gt.dims() || image.spatial() != gt.dims() {
        return Err(Error::mismatch("overlay", gt.dims(), pred.dims()));
    }
    let t = depth / 2;
    let plane: Vec<f32> = (0..h * w).map(|i| image.get(0, 0, i / w, i % w, t)).collect();
    let (lo, hi) = plane.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let gt_c = slice_contour(gt, t);
    let pred_c = slice_contour(pred, t);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    for i in 0..h * w {
        bytes.push(match (gt_c[i], pred_c[i]) {
            (true, true) => 128,
            (true, false) => 255,
            (false, true) => 0,
            (false, false) => (32.0 + 191.0 * (plane[i] - lo) / span).round() as u8,
        });
    }
    std::fs::write(path, bytes).map_err(Error::io(path))
}

/// One trained-and-evaluated cell of the ablation grid.
#[derive(Debug, Clone)]
pub struct AblationRun {
    pub flags: AblationFlags,
    pub seed: u64,
    pub report: MetricsReport,
}

/// The four `{use_sg} x {use_soft_contour}` combinations, full method first.
pub fn ablation_grid(base: AblationFlags) -> [AblationFlags; 4] {
    [(true, true), (true, false), (false, true), (false, false)].map(|(sg, soft)| AblationFlags {
        use_sg: sg,
        use_soft_contour: soft,
        ..base
    })
}

/// Trains every grid cell for every seed and evaluates on `test`.
pub fn run_ablation(cfg: &ExperimentConfig, train_set: &[SegSample], test: &[SegSample]) -> Result<Vec<AblationRun>> {
    let mut runs = Vec::new();
    for flags in ablation_grid(cfg.ablation_flags) {
        for &seed in &cfg.ablation.seeds {
            let run_cfg = ExperimentConfig { seed, ..cfg.with_flags(flags) };
            let started = std::time::Instant::now();
            let outcome = train(&run_cfg, train_set, &[], &TrainOptions::default())?;
            let (report, _) = evaluate(&outcome.network, test)?;
            log::info!(
                "{} seed {seed}: mean DSC {:.4} ({:.0}s)",
                flags.label(),
                report.mean_dsc,
                started.elapsed().as_secs_f64()
            );
            runs.push(AblationRun { flags, seed, report });
        }
    }
    Ok(runs)
}

/// Per-run, per-class row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub use_sg: bool,
    pub use_soft_contour: bool,
    pub seed: u64,
    pub class: u8,
    pub dsc_mean: Option<f64>,
    pub dsc_std: Option<f64>,
    pub asd_mean: Option<f64>,
    pub asd_std: Option<f64>,
}

pub fn ablation_rows(runs: &[AblationRun]) -> Vec<AblationRow> {
    let mut rows = Vec::new();
    for run in runs {
        for (&class, s) in &run.report.per_class {
            rows.push(AblationRow {
                config: run.flags.label(),
                use_sg: run.flags.use_sg,
                use_soft_contour: run.flags.use_soft_contour,
                seed: run.seed,
                class,
                dsc_mean: s.dsc.mean,
                dsc_std: s.dsc.std,
                asd_mean: s.asd.mean,
                asd_std: s.asd.std,
            });
        }
    }
    rows
}

/// Effect of switching one factor on, per seed and class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationDelta {
    /// `sg` or `soft_contour`.
    pub factor: String,
    /// Setting of the other factor during the comparison.
    pub other_on: bool,
    pub seed: u64,
    pub class: u8,
    /// `on - off`; positive is better.
    pub dsc_delta: Option<f64>,
    /// `off - on`; positive means the factor lowered ASD (better).
    pub asd_improvement: Option<f64>,
}

fn run_for(runs: &[AblationRun], sg: bool, soft: bool, seed: u64) -> Option<&AblationRun> {
    runs.iter().find(|r| r.flags.use_sg == sg && r.flags.use_soft_contour == soft && r.seed == seed)
}

pub fn ablation_deltas(runs: &[AblationRun]) -> Vec<AblationDelta> {
    let mut seeds: Vec<u64> = runs.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut out = Vec::new();
    for factor in ["sg", "soft_contour"] {
        for other_on in [true, false] {
            for &seed in &seeds {
                let (on, off) = if factor == "sg" {
                    (run_for(runs, true, other_on, seed), run_for(runs, false, other_on, seed))
                } else {
                    (run_for(runs, other_on, true, seed), run_for(runs, other_on, false, seed))
                };
                let (Some(on), Some(off)) = (on, off) else { continue };
                for (&class, s_on) in &on.report.per_class {
                    let Some(s_off) = off.report.per_class.get(&class) else { continue };
                    let diff = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| a - b);
                    out.push(AblationDelta {
                        factor: factor.to_string(),
                        other_on,
                        seed,
                        class,
                        dsc_delta: diff(s_on.dsc.mean, s_off.dsc.mean),
                        asd_improvement: diff(s_off.asd.mean, s_on.asd.mean),
                    });
                }
            }
        }
    }
    out
}

/// Mean and spread over seeds of a per-run statistic.
pub fn across_seeds(runs: &[AblationRun], flags: AblationFlags, f: impl Fn(&MetricsReport) -> Option<f64>) -> Summary {
    Summary::of(runs.iter().filter(|r| r.flags == flags).map(|r| f(&r.report)))
}

/// Per-configuration, per-class aggregate over seeds of the per-run means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummaryRow {
    pub config: String,
    pub use_sg: bool,
    pub use_soft_contour: bool,
    pub class: u8,
    pub seeds: usize,
    pub dsc_mean: Option<f64>,
    pub dsc_std: Option<f64>,
    pub asd_mean: Option<f64>,
    pub asd_std: Option<f64>,
}

pub fn ablation_summary(runs: &[AblationRun]) -> Vec<AblationSummaryRow> {
    let mut grid: Vec<AblationFlags> = Vec::new();
    for r in runs {
        if !grid.contains(&r.flags) {
            grid.push(r.flags);
        }
    }
    let mut classes: Vec<u8> = runs.iter().flat_map(|r| r.report.per_class.keys().copied()).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut rows = Vec::new();
    for flags in grid {
        for &class in &classes {
            let dsc = across_seeds(runs, flags, |r| r.per_class.get(&class).and_then(|s| s.dsc.mean));
            let asd = across_seeds(runs, flags, |r| r.per_class.get(&class).and_then(|s| s.asd.mean));
            rows.push(AblationSummaryRow {
                config: flags.label(),
                use_sg: flags.use_sg,
                use_soft_contour: flags.use_soft_contour,
                class,
                seeds: runs.iter().filter(|r| r.flags == flags).count(),
                dsc_mean: dsc.mean,
                dsc_std: dsc.std,
                asd_mean: asd.mean,
                asd_std: asd.std,
            });
        }
    }
    rows
}

pub fn write_csv_rows<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(Error::csv(path))?;
    for row in rows {
        w.serialize(row).map_err(Error::csv(path))?;
    }
    w.flush().map_err(Error::io(path))
}
